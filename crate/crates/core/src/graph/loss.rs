//! Training losses: weighted cross-entropy and the multi-kernel MMD
//! estimator used for domain adaptation.

use super::Op;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Squared-bandwidth multipliers applied to the median-heuristic base.
pub const DEFAULT_BANDWIDTH_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Weights and knobs shared by both loss terms.
#[derive(Clone, Debug)]
pub struct LossConfig<F> {
    /// Per-class weights w_m = N / (M * n_m). All ones for balanced classes.
    pub class_weights: Vec<F>,
    /// Relative contribution of the MMD term in the total loss.
    pub mmd_weight: F,
    /// Multipliers on the median-heuristic squared bandwidth.
    pub bandwidth_multipliers: Vec<F>,
}

impl<F: Scalar> LossConfig<F> {
    pub fn from_class_counts(counts: &[usize], mmd_weight: F) -> Result<Self> {
        if counts.iter().any(|&n| n == 0) {
            return Err(Error::Config("every class count must be > 0".into()));
        }
        if mmd_weight < F::zero() {
            return Err(Error::Config("mmd weight must be >= 0".into()));
        }
        let total: usize = counts.iter().sum();
        let m = counts.len();
        let class_weights = counts
            .iter()
            .map(|&n| F::cast_usize(total) / (F::cast_usize(m) * F::cast_usize(n)))
            .collect();
        Ok(Self {
            class_weights,
            mmd_weight,
            bandwidth_multipliers: DEFAULT_BANDWIDTH_MULTIPLIERS
                .iter()
                .map(|&m| F::cast_from(m))
                .collect(),
        })
    }

    /// Uniform weights for `k` classes.
    pub fn balanced(k: usize, mmd_weight: F) -> Self {
        Self {
            class_weights: vec![F::one(); k],
            mmd_weight,
            bandwidth_multipliers: DEFAULT_BANDWIDTH_MULTIPLIERS
                .iter()
                .map(|&m| F::cast_from(m))
                .collect(),
        }
    }
}

pub(super) fn weighted_ce_forward<F: Scalar>(
    logits: &Tensor<F>,
    labels: &[usize],
    cfg: &LossConfig<F>,
) -> Result<(Tensor<F>, Op<F>)> {
    let &[n, k] = logits.dims() else {
        return Err(Error::Shape(format!(
            "weighted_ce needs (N,K) logits, got {:?}",
            logits.dims()
        )));
    };
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!("label {bad} out of range 0..{k}")));
    }
    if cfg.class_weights.len() != k {
        return Err(Error::Config(format!(
            "{} class weights for {k} classes",
            cfg.class_weights.len()
        )));
    }

    let mut softmax = vec![F::zero(); n * k];
    let mut sample_weights = Vec::with_capacity(n);
    let mut weight_sum = F::zero();
    let mut loss = F::zero();
    for (ni, &label) in labels.iter().enumerate() {
        let row = &logits.data()[ni * k..(ni + 1) * k];
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        let w = cfg.class_weights[label];
        loss += w * (lse - row[label]);
        weight_sum += w;
        sample_weights.push(w);
        for (o, &v) in softmax[ni * k..(ni + 1) * k].iter_mut().zip(row) {
            *o = (v - lse).exp();
        }
    }
    let value = Tensor::scalar(loss / weight_sum);
    Ok((
        value,
        Op::WeightedCe {
            labels: labels.to_vec(),
            sample_weights,
            weight_sum,
            softmax,
        },
    ))
}

pub(super) fn weighted_ce_backward<F: Scalar>(
    logit_dims: &[usize],
    labels: &[usize],
    sample_weights: &[F],
    weight_sum: F,
    softmax: &[F],
    dy: F,
) -> Tensor<F> {
    let k = logit_dims[1];
    let mut dlogits = vec![F::zero(); softmax.len()];
    for (ni, &label) in labels.iter().enumerate() {
        let scale = dy * sample_weights[ni] / weight_sum;
        for ki in 0..k {
            let indicator = if ki == label { F::one() } else { F::zero() };
            dlogits[ni * k + ki] = scale * (softmax[ni * k + ki] - indicator);
        }
    }
    Tensor::new(logit_dims.to_vec(), dlogits).expect("dlogits dims")
}

/// Gaussian RBF kernel k(a,b) = exp(-|a-b|^2 / (2 sigma^2)).
pub fn rbf_kernel<F: Scalar>(a: &[F], b: &[F], sigma: F) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "rbf_kernel length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if sigma <= F::zero() {
        return Err(Error::Config("rbf_kernel sigma must be > 0".into()));
    }
    let two = F::cast_from(2.0);
    let mut d2 = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        d2 += d * d;
    }
    Ok((-d2 / (two * sigma * sigma)).exp())
}

/// Median-heuristic squared bandwidths: the base is the median of all
/// pairwise squared distances (i < j) in the joined batch, scaled by each
/// multiplier. Falls back to 1 when the batch is degenerate.
pub fn median_heuristic_sigma_sqs<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    multipliers: &[F],
) -> Result<Vec<F>> {
    let rows = |t: &Tensor<F>| -> Result<(usize, usize)> {
        match *t.dims() {
            [n, d] => Ok((n, d)),
            _ => Err(Error::Shape(format!("expected (N,D), got {:?}", t.dims()))),
        }
    };
    let (na, d) = rows(a)?;
    let (nb, db) = rows(b)?;
    if d != db {
        return Err(Error::Shape(format!("embedding dims differ: {d} vs {db}")));
    }
    let total = na + nb;
    let row = |i: usize| -> &[F] {
        if i < na {
            &a.data()[i * d..(i + 1) * d]
        } else {
            &b.data()[(i - na) * d..(i - na + 1) * d]
        }
    };
    let mut dists = Vec::with_capacity(total * (total - 1) / 2);
    for i in 0..total {
        for j in (i + 1)..total {
            let (ri, rj) = (row(i), row(j));
            let mut d2 = F::zero();
            for (&x, &y) in ri.iter().zip(rj) {
                let df = x - y;
                d2 += df * df;
            }
            dists.push(d2);
        }
    }
    let base = if dists.is_empty() {
        F::one()
    } else {
        dists.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
        let mid = dists.len() / 2;
        let med = if dists.len() % 2 == 0 {
            (dists[mid - 1] + dists[mid]) / F::cast_from(2.0)
        } else {
            dists[mid]
        };
        if med > F::zero() {
            med
        } else {
            F::one()
        }
    };
    Ok(multipliers.iter().map(|&m| m * base).collect())
}

struct MmdGeometry<F> {
    n: usize,
    d: usize,
    /// Squared distances within a, within b, and across (a_i to b_j).
    aa: Vec<F>,
    ab: Vec<F>,
    bb: Vec<F>,
}

fn mmd_geometry<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<MmdGeometry<F>> {
    let &[n, d] = a.dims() else {
        return Err(Error::Shape(format!("mmd needs (N,D) batches, got {:?}", a.dims())));
    };
    if b.dims() != a.dims() {
        return Err(Error::Contract(format!(
            "mmd batches must have identical dims: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if n < 2 {
        return Err(Error::Contract("mmd needs batch size N >= 2".into()));
    }
    let sqnorm = |t: &Tensor<F>| -> Vec<F> {
        (0..n)
            .map(|i| t.data()[i * d..(i + 1) * d].iter().map(|&v| v * v).sum())
            .collect()
    };
    let (na, nb) = (sqnorm(a), sqnorm(b));
    let dot = |x: &[F], y: &[F]| -> F {
        let mut acc = F::zero();
        for (&u, &v) in x.iter().zip(y) {
            acc += u * v;
        }
        acc
    };
    let two = F::cast_from(2.0);
    let pairwise = |u: &Tensor<F>, nu: &[F], v: &Tensor<F>, nv: &[F]| -> Vec<F> {
        let mut out = vec![F::zero(); n * n];
        out.par_chunks_mut(n).enumerate().for_each(|(i, slice)| {
            let ri = &u.data()[i * d..(i + 1) * d];
            for (j, slot) in slice.iter_mut().enumerate() {
                let rj = &v.data()[j * d..(j + 1) * d];
                *slot = nu[i] + nv[j] - two * dot(ri, rj);
            }
        });
        out
    };
    Ok(MmdGeometry {
        n,
        d,
        aa: pairwise(a, &na, a, &na),
        ab: pairwise(a, &na, b, &nb),
        bb: pairwise(b, &nb, b, &nb),
    })
}

pub(super) fn mmd_forward<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    sigma_sqs: &[F],
) -> Result<Tensor<F>> {
    if sigma_sqs.is_empty() || sigma_sqs.iter().any(|&s| s <= F::zero()) {
        return Err(Error::Config("mmd needs at least one positive sigma^2".into()));
    }
    let geo = mmd_geometry(a, b)?;
    let n = geo.n;
    let two = F::cast_from(2.0);
    let nk = F::cast_usize(sigma_sqs.len());
    let kern = |d2: F| -> F {
        let mut acc = F::zero();
        for &s in sigma_sqs {
            acc += (-d2 / (two * s)).exp();
        }
        acc / nk
    };
    let mut total = F::zero();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let idx = i * n + j;
            let jdx = j * n + i;
            // Grouped so identical batches cancel exactly, term by term.
            total += (kern(geo.aa[idx]) - kern(geo.ab[idx]))
                + (kern(geo.bb[idx]) - kern(geo.ab[jdx]));
        }
    }
    let denom = F::cast_usize(n) * F::cast_usize(n - 1);
    Ok(Tensor::scalar(total / denom))
}

pub(super) fn mmd_backward<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    sigma_sqs: &[F],
    dy: F,
) -> [Tensor<F>; 2] {
    let geo = mmd_geometry(a, b).expect("validated at forward");
    let (n, d) = (geo.n, geo.d);
    let two = F::cast_from(2.0);
    let nk = F::cast_usize(sigma_sqs.len());
    // d k(d2)/d d2 summed over the kernel set = -(1/S) sum_s k_s / (2 sigma_s^2);
    // the chain rule through d2 contributes the (x - y) factors below.
    let kern_slope = |d2: F| -> F {
        let mut acc = F::zero();
        for &s in sigma_sqs {
            acc += (-d2 / (two * s)).exp() / s;
        }
        acc / nk
    };
    let denom = F::cast_usize(n) * F::cast_usize(n - 1);
    let scale = dy * two / denom;

    let grad_half = |x: &Tensor<F>, y: &Tensor<F>, same: &[F], cross: &[F], cross_t: bool| {
        let mut grad = vec![F::zero(); n * d];
        grad.par_chunks_mut(d).enumerate().for_each(|(p, row)| {
            let xp = &x.data()[p * d..(p + 1) * d];
            for q in 0..n {
                if q == p {
                    continue;
                }
                let w_same = kern_slope(same[p * n + q]);
                let cross_idx = if cross_t { q * n + p } else { p * n + q };
                let w_cross = kern_slope(cross[cross_idx]);
                let xq = &x.data()[q * d..(q + 1) * d];
                let yq = &y.data()[q * d..(q + 1) * d];
                for k in 0..d {
                    row[k] += w_same * (xq[k] - xp[k]) - w_cross * (yq[k] - xp[k]);
                }
            }
            for v in row.iter_mut() {
                *v = *v * scale;
            }
        });
        grad
    };

    let da = grad_half(a, b, &geo.aa, &geo.ab, false);
    let db = grad_half(b, a, &geo.bb, &geo.ab, true);
    [
        Tensor::new(a.dims().to_vec(), da).expect("da dims"),
        Tensor::new(b.dims().to_vec(), db).expect("db dims"),
    ]
}
