//! Training loops for the two regimes: regular (weighted CE on Y10) and
//! domain adaptation (CE on Y10 plus the MMD distance between Y10 and Y1
//! latents, with Y1 images entering unlabeled). Early stopping tracks the
//! validation total loss; the best-epoch checkpoint is retained.

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::graph::{median_heuristic_sigma_sqs, Graph, LossConfig, Mode, NodeId};
use crate::models::ModelState;
use crate::scalar::Scalar;
use crate::synth::dataset::{seeded_shuffle, Dataset, Domain, Example, Split};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    Regular,
    Da,
}

impl TrainingMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainingMode::Regular => "regular",
            TrainingMode::Da => "da",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "regular" => Ok(TrainingMode::Regular),
            "da" => Ok(TrainingMode::Da),
            other => Err(Error::Config(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub mode: TrainingMode,
    pub epochs: usize,
    pub train_batch: usize,
    pub eval_batch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Relative contribution of the MMD term (lambda).
    pub mmd_weight: f64,
    /// Early-stopping patience in epochs on validation total loss.
    pub patience: usize,
    pub seed: u64,
}

impl TrainingConfig {
    /// Hyperparameters from the training recipe: lr 1e-5, betas (0.7, 0.8),
    /// batch 128/64, 100 epochs, lambda 0.05, weight decay 0.001 for regular
    /// training and 0.0001 for domain adaptation.
    pub fn new(mode: TrainingMode) -> Self {
        Self {
            mode,
            epochs: 100,
            train_batch: 128,
            eval_batch: 64,
            learning_rate: 1e-5,
            beta1: 0.7,
            beta2: 0.8,
            weight_decay: match mode {
                TrainingMode::Regular => 0.001,
                TrainingMode::Da => 0.0001,
            },
            mmd_weight: 0.05,
            patience: 10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_batch < 2 || self.eval_batch < 2 {
            return Err(Error::Config("batch sizes must be >= 2".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.mmd_weight < 0.0 {
            return Err(Error::Config("mmd weight must be >= 0".into()));
        }
        Ok(())
    }

    fn adam<F: Scalar>(&self) -> AdamConfig<F> {
        AdamConfig {
            learning_rate: F::cast_from(self.learning_rate),
            beta1: F::cast_from(self.beta1),
            beta2: F::cast_from(self.beta2),
            epsilon: F::cast_from(1e-8),
            weight_decay: F::cast_from(self.weight_decay),
        }
    }
}

/// Per-epoch training record. Loss fields are epoch means over training
/// batches and satisfy total = ce + lambda * mmd. The train-split Y1
/// accuracy is NaN: training batches carry Y1 images without labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce_loss: f64,
    pub mmd_loss: f64,
    pub total_loss: f64,
    pub train_acc_y10: f64,
    pub train_acc_y1: f64,
    pub val_acc_y10: f64,
    pub val_acc_y1: f64,
    pub val_total_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopped,
    MaxEpochs,
    /// Training aborted on a non-finite loss or gradient; the best
    /// checkpoint up to the abort is retained.
    NumericAbort(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

pub struct TrainOutcome<F: Scalar> {
    /// Model restored to the best validation epoch, left in eval mode.
    pub best: ModelState<F>,
    /// Model as of the last completed step, left in eval mode.
    pub fin: ModelState<F>,
    pub history: TrainingHistory,
}

/// Stack examples into an (N, 3, H, W) batch for one domain.
pub fn stack_batch<F: Scalar>(examples: &[&Example], domain: Domain) -> Result<Tensor<F>> {
    if examples.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let dims = examples[0].y10.dims().to_vec();
    let mut data = Vec::with_capacity(examples.len() * examples[0].y10.len());
    for e in examples {
        let image = match domain {
            Domain::Y10 => &e.y10,
            Domain::Y1 => &e.y1,
        };
        if image.dims() != dims {
            return Err(Error::Shape("examples differ in image size".into()));
        }
        data.extend(image.data().iter().map(|&v| F::cast_from(v as f64)));
    }
    Tensor::new(
        vec![examples.len(), dims[0], dims[1], dims[2]],
        data,
    )
}

fn argmax_rows<F: Scalar>(logits: &Tensor<F>) -> Vec<usize> {
    let k = logits.dims()[logits.rank() - 1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Classification metrics weighted by true-instance counts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// confusion[true][predicted]
    pub confusion: [[usize; 3]; 3],
    pub examples: usize,
}

impl Metrics {
    pub fn from_confusion(confusion: [[usize; 3]; 3]) -> Self {
        let total: usize = confusion.iter().flatten().sum();
        let mut correct = 0usize;
        let (mut precision, mut recall, mut f1) = (0.0, 0.0, 0.0);
        for m in 0..3 {
            correct += confusion[m][m];
            let true_count: usize = confusion[m].iter().sum();
            let pred_count: usize = (0..3).map(|t| confusion[t][m]).sum();
            let tp = confusion[m][m] as f64;
            let p = if pred_count > 0 { tp / pred_count as f64 } else { 0.0 };
            let r = if true_count > 0 { tp / true_count as f64 } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            let weight = true_count as f64 / total as f64;
            precision += weight * p;
            recall += weight * r;
            f1 += weight * f;
        }
        Self {
            accuracy: correct as f64 / total as f64,
            precision,
            recall,
            f1,
            confusion,
            examples: total,
        }
    }
}

/// Evaluate a model on one split and domain. The model must be in eval mode.
pub fn evaluate<F: Scalar>(
    model: &mut ModelState<F>,
    dataset: &Dataset,
    split: Split,
    domain: Domain,
    batch_size: usize,
) -> Result<Metrics> {
    if model.mode() != Some(Mode::Eval) {
        return Err(Error::State("evaluate requires eval mode".into()));
    }
    let examples = dataset.split(split);
    if examples.is_empty() {
        return Err(Error::Precondition(format!("split {} is empty", split.name())));
    }
    let mut confusion = [[0usize; 3]; 3];
    for chunk in examples.chunks(batch_size) {
        let batch = stack_batch::<F>(chunk, domain)?;
        let (_, logits) = model.forward(&batch)?;
        for (pred, example) in argmax_rows(&logits).into_iter().zip(chunk) {
            confusion[example.label.index()][pred] += 1;
        }
    }
    Ok(Metrics::from_confusion(confusion))
}

/// Train a model on the dataset's train split. See module docs for the two
/// modes. Deterministic given (config, seed, dataset).
pub fn train<F: Scalar>(
    mut model: ModelState<F>,
    dataset: &Dataset,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    let train_examples = dataset.split(Split::Train);
    let val_examples = dataset.split(Split::Val);
    if train_examples.is_empty() || val_examples.is_empty() {
        return Err(Error::Precondition("train and val splits must be non-empty".into()));
    }

    let counts = dataset.class_counts(Split::Train);
    let loss_cfg: LossConfig<F> = LossConfig::from_class_counts(
        &counts.iter().copied().map(|c| c.max(1)).collect::<Vec<_>>(),
        F::cast_from(cfg.mmd_weight),
    )?;
    let lambda = cfg.mmd_weight;

    let mut adam = AdamState::new(cfg.adam::<F>());
    let mut history = TrainingHistory {
        records: Vec::new(),
        best_epoch: 0,
        stop_reason: StopReason::MaxEpochs,
    };
    let mut best_val = f64::INFINITY;
    let mut best_snapshot = (model.params.clone(), model.running.clone());
    let mut since_best = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        model.set_mode(Mode::Train);
        let mut order: Vec<usize> = (0..train_examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::synth::dataset::derive_seed(
            cfg.seed,
            0xE90C + epoch as u64,
        ));
        seeded_shuffle(&mut order, &mut rng);

        let (mut ce_sum, mut mmd_sum, mut batches) = (0.0f64, 0.0f64, 0usize);
        let (mut correct10, mut seen10) = (0usize, 0usize);

        let mut start = 0;
        while start < order.len() {
            let end = (start + cfg.train_batch).min(order.len());
            let is_partial = end - start < cfg.train_batch;
            // The MMD estimator needs equal batch sizes, so domain
            // adaptation drops the trailing partial batch.
            if cfg.mode == TrainingMode::Da && is_partial {
                break;
            }
            let chunk: Vec<&Example> = order[start..end].iter().map(|&i| train_examples[i]).collect();
            start = end;

            let labels: Vec<usize> = chunk.iter().map(|e| e.label.index()).collect();
            let mut graph = Graph::new();
            let ids = model.bind(&mut graph)?;
            let x10 = graph.input(stack_batch::<F>(&chunk, Domain::Y10)?);
            let (latents10, logits10) = model.forward_nodes(&mut graph, &ids, x10)?;
            let ce = graph.weighted_ce(logits10, &labels, &loss_cfg)?;

            let (total, mmd_value) = if cfg.mode == TrainingMode::Da {
                let x1 = graph.input(stack_batch::<F>(&chunk, Domain::Y1)?);
                let (latents1, _) = model.forward_nodes(&mut graph, &ids, x1)?;
                let sigmas = median_heuristic_sigma_sqs(
                    graph.value(latents10),
                    graph.value(latents1),
                    &loss_cfg.bandwidth_multipliers,
                )?;
                let mmd = graph.mmd(latents10, latents1, &sigmas)?;
                let scaled = graph.scale(mmd, F::cast_from(lambda));
                let total = graph.add(ce, scaled)?;
                (total, graph.value(mmd).item()?.as_f64())
            } else {
                (ce, 0.0)
            };

            let total_value = graph.value(total).item()?.as_f64();
            if !total_value.is_finite() {
                history.stop_reason =
                    StopReason::NumericAbort(format!("non-finite loss at epoch {epoch}"));
                break 'epochs;
            }
            let grads = graph.backward(total)?;
            if let Err(err) = adam.step(&mut model.params, &grads) {
                history.stop_reason = StopReason::NumericAbort(err.to_string());
                break 'epochs;
            }

            for (pred, &label) in argmax_rows(graph.value(logits10)).into_iter().zip(&labels) {
                if pred == label {
                    correct10 += 1;
                }
                seen10 += 1;
            }
            ce_sum += graph.value(ce).item()?.as_f64();
            mmd_sum += mmd_value;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::Precondition("no full training batch available".into()));
        }

        // Validation pass: early stopping tracks CE(Y10) + lambda * MMD on
        // the val split; Y1 labels feed only the diagnostic accuracy column.
        model.set_mode(Mode::Eval);
        let (val_total, val_acc_y10, val_acc_y1) =
            validation_pass(&mut model, &val_examples, cfg, &loss_cfg)?;

        let ce_mean = ce_sum / batches as f64;
        let mmd_mean = mmd_sum / batches as f64;
        history.records.push(EpochRecord {
            epoch,
            ce_loss: ce_mean,
            mmd_loss: mmd_mean,
            total_loss: ce_mean + lambda * mmd_mean,
            train_acc_y10: correct10 as f64 / seen10 as f64,
            train_acc_y1: f64::NAN,
            val_acc_y10,
            val_acc_y1,
            val_total_loss: val_total,
        });

        if val_total < best_val {
            best_val = val_total;
            history.best_epoch = epoch;
            best_snapshot = (model.params.clone(), model.running.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stop_reason = StopReason::EarlyStopped;
                break;
            }
        }
    }

    let mut fin = model.clone();
    fin.set_mode(Mode::Eval);
    let mut best = model;
    best.params = best_snapshot.0;
    best.running = best_snapshot.1;
    best.set_mode(Mode::Eval);
    Ok(TrainOutcome { best, fin, history })
}

/// Mean validation total loss plus accuracy per domain.
fn validation_pass<F: Scalar>(
    model: &mut ModelState<F>,
    val: &[&Example],
    cfg: &TrainingConfig,
    loss_cfg: &LossConfig<F>,
) -> Result<(f64, f64, f64)> {
    let (mut ce_sum, mut mmd_sum, mut batches) = (0.0f64, 0.0f64, 0usize);
    let (mut correct10, mut correct1, mut seen) = (0usize, 0usize, 0usize);
    for chunk in val.chunks(cfg.eval_batch) {
        let labels: Vec<usize> = chunk.iter().map(|e| e.label.index()).collect();
        let mut graph = Graph::new();
        let ids = model.bind(&mut graph)?;
        let x10 = graph.input(stack_batch::<F>(chunk, Domain::Y10)?);
        let (latents10, logits10) = model.forward_nodes(&mut graph, &ids, x10)?;
        let ce = graph.weighted_ce(logits10, &labels, loss_cfg)?;
        ce_sum += graph.value(ce).item()?.as_f64();

        let x1 = graph.input(stack_batch::<F>(chunk, Domain::Y1)?);
        let (latents1, logits1) = model.forward_nodes(&mut graph, &ids, x1)?;
        if cfg.mode == TrainingMode::Da && chunk.len() >= 2 {
            let sigmas = median_heuristic_sigma_sqs(
                graph.value(latents10),
                graph.value(latents1),
                &loss_cfg.bandwidth_multipliers,
            )?;
            let mmd = graph.mmd(latents10, latents1, &sigmas)?;
            mmd_sum += graph.value(mmd).item()?.as_f64();
        }

        for ((p10, p1), &label) in argmax_rows(graph.value(logits10))
            .into_iter()
            .zip(argmax_rows(graph.value(logits1)))
            .zip(&labels)
        {
            if p10 == label {
                correct10 += 1;
            }
            if p1 == label {
                correct1 += 1;
            }
            seen += 1;
        }
        batches += 1;
    }
    let val_total = ce_sum / batches as f64 + cfg.mmd_weight * (mmd_sum / batches as f64);
    Ok((
        val_total,
        correct10 as f64 / seen as f64,
        correct1 as f64 / seen as f64,
    ))
}
