//! Shared oracles for the integration and acceptance suites: central
//! finite differences, kink-safe random tensors, and a Floyd-Warshall
//! all-pairs reference. Everything here is independent of the library's
//! own computation paths.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use robustmorph_core::graph::{Graph, NodeId};
use robustmorph_core::tensor::Tensor;
use std::collections::BTreeMap;

/// Central finite-difference step, chosen per the gradient-suite contract.
pub const FD_STEP: f64 = 1e-4;

/// Random-looking values that keep every element at least ~0.3 grid steps
/// away from ReLU's kink at zero and make all values pairwise distinct
/// (so max-pool windows have no near-ties within the FD step).
pub fn kink_safe_tensor(dims: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let step = 2.0 / n as f64;
    let mut vals: Vec<f64> = (0..n)
        .map(|k| step * (k as f64 - n as f64 / 2.0 + 0.37))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vals.shuffle(&mut rng);
    Tensor::new(dims.to_vec(), vals).unwrap()
}

/// Builds the graph twice per perturbed element and compares the analytic
/// backward gradients against central finite differences. The closure must
/// be a pure function of the bound parameters (fresh running stats each
/// call). Returns the maximum relative error over all parameter elements.
pub fn gradcheck<B>(params: &BTreeMap<String, Tensor<f64>>, build: B) -> f64
where
    B: Fn(&mut Graph<f64>, &BTreeMap<String, NodeId>) -> NodeId,
{
    let eval = |p: &BTreeMap<String, Tensor<f64>>| -> (f64, Option<BTreeMap<String, Tensor<f64>>>) {
        let mut g = Graph::<f64>::new();
        let mut ids = BTreeMap::new();
        for (name, tensor) in p {
            ids.insert(name.clone(), g.param(name, tensor.clone()).unwrap());
        }
        let loss = build(&mut g, &ids);
        (g.value(loss).item().unwrap(), Some(g.backward(loss).unwrap()))
    };

    let (_, analytic) = eval(params);
    let analytic = analytic.unwrap();

    let mut max_rel = 0.0f64;
    for (name, tensor) in params {
        for i in 0..tensor.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += FD_STEP;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= FD_STEP;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * FD_STEP);
            let an = analytic[name].data()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}

/// Scalar probe: dot the output with fixed random weights and sum, so the
/// check exercises every output element of the layer under test.
pub fn probe_loss(g: &mut Graph<f64>, out: NodeId, seed: u64) -> NodeId {
    let weights = kink_safe_tensor(g.value(out).dims(), seed ^ 0x9e3779b97f4a7c15);
    let weighted = g.mul_const(out, weights).unwrap();
    g.sum(weighted)
}

/// All-pairs shortest paths by Floyd-Warshall dynamic programming over an
/// adjacency matrix (`f64::INFINITY` where no edge).
pub fn floyd_warshall(adj: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = adj.len();
    let mut d: Vec<Vec<f64>> = adj.to_vec();
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}
