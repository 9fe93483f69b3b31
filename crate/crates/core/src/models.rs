//! The two classifier architectures: a three-conv-layer CNN (convnet) and a
//! four-block residual network (miniresnet). Both expose a 256-unit latent
//! bottleneck followed by a three-way output layer, full forward, latent
//! extraction, and truncated-head evaluation.

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, NodeId, RunningStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const LATENT_DIM: usize = 256;
pub const CATEGORIES: usize = 3;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Convnet,
    Miniresnet,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Convnet => "convnet",
            Architecture::Miniresnet => "miniresnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "convnet" => Ok(Architecture::Convnet),
            "miniresnet" => Ok(Architecture::Miniresnet),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Input (channels, height, width).
    pub input: (usize, usize, usize),
    pub latent_dim: usize,
    pub categories: usize,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, height: usize, width: usize) -> Self {
        Self {
            architecture,
            input: (3, height, width),
            latent_dim: LATENT_DIM,
            categories: CATEGORIES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        if c != 3 {
            return Err(Error::Config(format!("input must have 3 channels, got {c}")));
        }
        if h < 32 || w < 32 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be >= 32 and divisible by 4"
            )));
        }
        if self.latent_dim != LATENT_DIM {
            return Err(Error::Config(format!(
                "latent dimension is fixed at {LATENT_DIM}"
            )));
        }
        if self.categories != CATEGORIES {
            return Err(Error::Config(format!(
                "output layer is fixed at {CATEGORIES} categories"
            )));
        }
        Ok(())
    }
}

/// Architecture description, all trainable parameters, batchnorm running
/// statistics, and the explicit train/eval mode flag.
#[derive(Clone, Debug)]
pub struct ModelState<F: Scalar> {
    pub spec: ModelSpec,
    pub seed: u64,
    pub params: BTreeMap<String, Tensor<F>>,
    pub running: BTreeMap<String, RunningStats<F>>,
    mode: Option<Mode>,
}

/// One row of the architecture trace: layer name, output shape (without the
/// batch dimension), trainable parameter count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub output: Vec<usize>,
    pub params: usize,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn conv<F: Scalar>(&mut self, out_c: usize, in_c: usize, k: usize) -> (Tensor<F>, Tensor<F>) {
        let fan_in = in_c * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Tensor::from_fn(&[out_c, in_c, k, k], |_| {
            F::cast_from(self.rng.random_range(-bound..bound))
        });
        (weight, Tensor::zeros(&[out_c]))
    }

    fn dense<F: Scalar>(&mut self, d: usize, k: usize) -> (Tensor<F>, Tensor<F>) {
        let bound = (6.0 / d as f64).sqrt();
        let weight =
            Tensor::from_fn(&[d, k], |_| F::cast_from(self.rng.random_range(-bound..bound)));
        (weight, Tensor::zeros(&[k]))
    }
}

/// Pooling output side: floor((s - 2) / 2) + 1 for the 2x2/stride-2 pools.
fn pooled(s: usize) -> usize {
    (s - 2) / 2 + 1
}

/// Residual block channel plan: (in, out, stride).
const RESNET_BLOCKS: [(usize, usize, usize); 4] =
    [(16, 16, 1), (16, 32, 2), (32, 64, 2), (64, 128, 2)];

/// Build a seeded model. Kaiming-uniform fan-in init for conv/dense weights,
/// zero biases, gamma = 1 / beta = 0 for batchnorm.
pub fn build_model<F: Scalar>(spec: ModelSpec, seed: u64) -> Result<ModelState<F>> {
    spec.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut params: BTreeMap<String, Tensor<F>> = BTreeMap::new();
    let mut running: BTreeMap<String, RunningStats<F>> = BTreeMap::new();

    let mut add_conv = |params: &mut BTreeMap<String, Tensor<F>>,
                        init: &mut Init,
                        name: &str,
                        out_c: usize,
                        in_c: usize,
                        k: usize| {
        let (w, b) = init.conv::<F>(out_c, in_c, k);
        params.insert(format!("{name}.weight"), w);
        params.insert(format!("{name}.bias"), b);
    };
    let mut add_bn = |params: &mut BTreeMap<String, Tensor<F>>,
                      running: &mut BTreeMap<String, RunningStats<F>>,
                      name: &str,
                      c: usize| {
        params.insert(format!("{name}.gamma"), Tensor::filled(&[c], F::one()));
        params.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
        running.insert(
            name.to_string(),
            RunningStats::new(c, F::cast_from(BN_MOMENTUM), F::cast_from(BN_EPS)),
        );
    };

    match spec.architecture {
        Architecture::Convnet => {
            add_conv(&mut params, &mut init, "conv1", 8, 3, 5);
            add_bn(&mut params, &mut running, "bn1", 8);
            add_conv(&mut params, &mut init, "conv2", 16, 8, 3);
            add_bn(&mut params, &mut running, "bn2", 16);
            add_conv(&mut params, &mut init, "conv3", 32, 16, 3);
            add_bn(&mut params, &mut running, "bn3", 32);
            let (_, h, w) = spec.input;
            let flat = 32 * pooled(pooled(pooled(h))) * pooled(pooled(pooled(w)));
            let (fw, fb) = init.dense::<F>(flat, LATENT_DIM);
            params.insert("fc1.weight".into(), fw);
            params.insert("fc1.bias".into(), fb);
        }
        Architecture::Miniresnet => {
            add_conv(&mut params, &mut init, "stem", 16, 3, 3);
            add_bn(&mut params, &mut running, "stem_bn", 16);
            for (i, &(in_c, out_c, stride)) in RESNET_BLOCKS.iter().enumerate() {
                let block = format!("block{}", i + 1);
                add_conv(&mut params, &mut init, &format!("{block}.conv1"), out_c, in_c, 3);
                add_bn(&mut params, &mut running, &format!("{block}.bn1"), out_c);
                add_conv(&mut params, &mut init, &format!("{block}.conv2"), out_c, out_c, 3);
                add_bn(&mut params, &mut running, &format!("{block}.bn2"), out_c);
                if in_c != out_c || stride != 1 {
                    add_conv(&mut params, &mut init, &format!("{block}.shortcut"), out_c, in_c, 1);
                    add_bn(&mut params, &mut running, &format!("{block}.shortcut_bn"), out_c);
                }
            }
            let (fw, fb) = init.dense::<F>(128, LATENT_DIM);
            params.insert("fc1.weight".into(), fw);
            params.insert("fc1.bias".into(), fb);
        }
    }
    let (hw, hb) = init.dense::<F>(LATENT_DIM, CATEGORIES);
    params.insert("head.weight".into(), hw);
    params.insert("head.bias".into(), hb);

    Ok(ModelState {
        spec,
        seed,
        params,
        running,
        mode: None,
    })
}

impl<F: Scalar> ModelState<F> {
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = Some(mode);
    }

    pub fn mode(&self) -> Option<Mode> {
        self.mode
    }

    fn require_mode(&self) -> Result<Mode> {
        self.mode
            .ok_or_else(|| Error::State("model mode not set; call set_mode first".into()))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Bind every trainable parameter into `graph` as named leaves.
    pub fn bind(&self, graph: &mut Graph<F>) -> Result<BTreeMap<String, NodeId>> {
        let mut ids = BTreeMap::new();
        for (name, tensor) in &self.params {
            ids.insert(name.clone(), graph.param(name, tensor.clone())?);
        }
        Ok(ids)
    }

    /// Forward pass over bound parameters. Returns (latents, logits) node
    /// ids; latents are the post-activation bottleneck values. Train mode
    /// updates the model's batchnorm running statistics in place.
    pub fn forward_nodes(
        &mut self,
        graph: &mut Graph<F>,
        ids: &BTreeMap<String, NodeId>,
        batch: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let mode = self.require_mode()?;
        let dims = graph.value(batch).dims().to_vec();
        let (c, h, w) = self.spec.input;
        if dims.len() != 4 || dims[1] != c || dims[2] != h || dims[3] != w {
            return Err(Error::Shape(format!(
                "batch dims {dims:?} do not match model input (N,{c},{h},{w})"
            )));
        }

        let conv = |g: &mut Graph<F>, x, name: &str, stride, padding| -> Result<NodeId> {
            g.conv2d(
                x,
                ids[&format!("{name}.weight")],
                ids[&format!("{name}.bias")],
                stride,
                padding,
            )
        };

        let latent = match self.spec.architecture {
            Architecture::Convnet => {
                let mut x = batch;
                for (conv_name, bn_name, k, p) in [
                    ("conv1", "bn1", 5, 2),
                    ("conv2", "bn2", 3, 1),
                    ("conv3", "bn3", 3, 1),
                ] {
                    let _ = k;
                    let c = conv(graph, x, conv_name, 1, p)?;
                    let r = graph.relu(c);
                    let bn = graph.batchnorm2d(
                        r,
                        ids[&format!("{bn_name}.gamma")],
                        ids[&format!("{bn_name}.beta")],
                        self.running.get_mut(bn_name).expect("bn stats"),
                        mode,
                    )?;
                    x = graph.maxpool2d(bn, 2, 2)?;
                }
                let flat = graph.flatten(x)?;
                let fc = graph.dense(flat, ids["fc1.weight"], ids["fc1.bias"])?;
                graph.relu(fc)
            }
            Architecture::Miniresnet => {
                let stem = conv(graph, batch, "stem", 1, 1)?;
                let stem_bn = graph.batchnorm2d(
                    stem,
                    ids["stem_bn.gamma"],
                    ids["stem_bn.beta"],
                    self.running.get_mut("stem_bn").expect("bn stats"),
                    mode,
                )?;
                let mut x = graph.relu(stem_bn);
                for (i, &(in_c, out_c, stride)) in RESNET_BLOCKS.iter().enumerate() {
                    let block = format!("block{}", i + 1);
                    let c1 = conv(graph, x, &format!("{block}.conv1"), stride, 1)?;
                    let b1 = graph.batchnorm2d(
                        c1,
                        ids[&format!("{block}.bn1.gamma")],
                        ids[&format!("{block}.bn1.beta")],
                        self.running.get_mut(&format!("{block}.bn1")).expect("bn stats"),
                        mode,
                    )?;
                    let r1 = graph.relu(b1);
                    let c2 = conv(graph, r1, &format!("{block}.conv2"), 1, 1)?;
                    let b2 = graph.batchnorm2d(
                        c2,
                        ids[&format!("{block}.bn2.gamma")],
                        ids[&format!("{block}.bn2.beta")],
                        self.running.get_mut(&format!("{block}.bn2")).expect("bn stats"),
                        mode,
                    )?;
                    let shortcut = if in_c != out_c || stride != 1 {
                        let sc = conv(graph, x, &format!("{block}.shortcut"), stride, 0)?;
                        graph.batchnorm2d(
                            sc,
                            ids[&format!("{block}.shortcut_bn.gamma")],
                            ids[&format!("{block}.shortcut_bn.beta")],
                            self.running
                                .get_mut(&format!("{block}.shortcut_bn"))
                                .expect("bn stats"),
                            mode,
                        )?
                    } else {
                        x
                    };
                    let sum = graph.add(b2, shortcut)?;
                    x = graph.relu(sum);
                }
                let gap = graph.global_avg_pool(x)?;
                let fc = graph.dense(gap, ids["fc1.weight"], ids["fc1.bias"])?;
                graph.relu(fc)
            }
        };
        let logits = graph.dense(latent, ids["head.weight"], ids["head.bias"])?;
        Ok((latent, logits))
    }

    /// Standalone forward: builds a private graph and returns the latent and
    /// logit tensors. Gradients are not retained.
    pub fn forward(&mut self, batch: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let mut graph = Graph::new();
        let ids = self.bind(&mut graph)?;
        let input = graph.input(batch.clone());
        let (latent, logits) = self.forward_nodes(&mut graph, &ids, input)?;
        Ok((graph.value(latent).clone(), graph.value(logits).clone()))
    }

    /// Apply only the output layer to latent vectors; shares parameters with
    /// the full model, so feeding forward() latents reproduces its logits.
    pub fn truncated_head(&self, latents: &Tensor<F>) -> Result<Tensor<F>> {
        if self.require_mode()? != Mode::Eval {
            return Err(Error::State("truncated_head requires eval mode".into()));
        }
        let d = *latents.dims().last().expect("non-empty dims");
        if d != self.spec.latent_dim {
            return Err(Error::Shape(format!(
                "latent length {d} != {}",
                self.spec.latent_dim
            )));
        }
        let mut graph = Graph::new();
        let x = graph.input(latents.clone());
        let w = graph.input(self.params["head.weight"].clone());
        let b = graph.input(self.params["head.bias"].clone());
        let logits = graph.dense(x, w, b)?;
        Ok(graph.value(logits).clone())
    }

    /// Per-layer output shapes and parameter counts at the spec input size.
    pub fn layer_trace(&self) -> Vec<LayerInfo> {
        let (_, h, w) = self.spec.input;
        let count = |name: &str| -> usize {
            self.params
                .iter()
                .filter(|(k, _)| k.starts_with(&format!("{name}.")))
                .map(|(_, v)| v.len())
                .sum()
        };
        let mut rows = Vec::new();
        match self.spec.architecture {
            Architecture::Convnet => {
                let (mut ch, mut hh, mut ww) = (3, h, w);
                for (i, out_c) in [8usize, 16, 32].into_iter().enumerate() {
                    ch = out_c;
                    rows.push(LayerInfo {
                        name: format!("conv{}", i + 1),
                        output: vec![ch, hh, ww],
                        params: count(&format!("conv{}", i + 1)),
                    });
                    rows.push(LayerInfo {
                        name: format!("bn{}", i + 1),
                        output: vec![ch, hh, ww],
                        params: count(&format!("bn{}", i + 1)),
                    });
                    hh = pooled(hh);
                    ww = pooled(ww);
                    rows.push(LayerInfo {
                        name: format!("pool{}", i + 1),
                        output: vec![ch, hh, ww],
                        params: 0,
                    });
                }
                rows.push(LayerInfo {
                    name: "flatten".into(),
                    output: vec![ch * hh * ww],
                    params: 0,
                });
                rows.push(LayerInfo {
                    name: "fc1".into(),
                    output: vec![self.spec.latent_dim],
                    params: count("fc1"),
                });
                rows.push(LayerInfo {
                    name: "head".into(),
                    output: vec![self.spec.categories],
                    params: count("head"),
                });
            }
            Architecture::Miniresnet => {
                let (mut hh, mut ww) = (h, w);
                rows.push(LayerInfo {
                    name: "stem".into(),
                    output: vec![16, hh, ww],
                    params: count("stem") + count("stem_bn"),
                });
                for (i, &(_, out_c, stride)) in RESNET_BLOCKS.iter().enumerate() {
                    hh = hh.div_ceil(stride);
                    ww = ww.div_ceil(stride);
                    rows.push(LayerInfo {
                        name: format!("block{}", i + 1),
                        output: vec![out_c, hh, ww],
                        params: count(&format!("block{}", i + 1)),
                    });
                }
                rows.push(LayerInfo {
                    name: "gap".into(),
                    output: vec![128],
                    params: 0,
                });
                rows.push(LayerInfo {
                    name: "fc1".into(),
                    output: vec![self.spec.latent_dim],
                    params: count("fc1"),
                });
                rows.push(LayerInfo {
                    name: "head".into(),
                    output: vec![self.spec.categories],
                    params: count("head"),
                });
            }
        }
        rows
    }

    /// All persistent tensors (parameters plus running statistics), as
    /// written to checkpoints.
    pub fn to_checkpoint_tensors(&self) -> BTreeMap<String, Tensor<f32>> {
        let mut out: BTreeMap<String, Tensor<f32>> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.cast()))
            .collect();
        for (name, stats) in &self.running {
            out.insert(
                format!("{name}.running_mean"),
                Tensor::new(vec![stats.mean.len()], stats.mean.iter().map(|v| v.as_f64() as f32).collect())
                    .expect("stats dims"),
            );
            out.insert(
                format!("{name}.running_var"),
                Tensor::new(vec![stats.var.len()], stats.var.iter().map(|v| v.as_f64() as f32).collect())
                    .expect("stats dims"),
            );
        }
        out
    }

    /// Rebuild a model from checkpoint tensors.
    pub fn from_checkpoint_tensors(
        spec: ModelSpec,
        seed: u64,
        tensors: &BTreeMap<String, Tensor<f32>>,
    ) -> Result<Self> {
        let mut model = build_model::<F>(spec, seed)?;
        for (name, value) in &mut model.params {
            let stored = tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint missing parameter {name:?}")))?;
            if stored.dims() != value.dims() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {name:?} has dims {:?}, expected {:?}",
                    stored.dims(),
                    value.dims()
                )));
            }
            *value = stored.cast();
        }
        for (name, stats) in &mut model.running {
            let mean = tensors
                .get(&format!("{name}.running_mean"))
                .ok_or_else(|| Error::Config(format!("checkpoint missing {name}.running_mean")))?;
            let var = tensors
                .get(&format!("{name}.running_var"))
                .ok_or_else(|| Error::Config(format!("checkpoint missing {name}.running_var")))?;
            stats.mean = mean.data().iter().map(|&v| F::cast_from(v as f64)).collect();
            stats.var = var.data().iter().map(|&v| F::cast_from(v as f64)).collect();
        }
        Ok(model)
    }
}
