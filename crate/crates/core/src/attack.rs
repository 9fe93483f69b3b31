//! Targeted one-pixel attacks by differential evolution. The attack is
//! black box: it sees only classification score vectors, never gradients
//! or parameters.

use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::models::ModelState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One candidate perturbation: a pixel coordinate and replacement values
/// for the three bands, all in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelCandidate {
    pub x: usize,
    pub y: usize,
    pub values: [f64; 3],
}

/// Replace one pixel; the output differs from the input at exactly one
/// spatial location.
pub fn apply_pixel<F: Scalar>(image: &Tensor<F>, candidate: &PixelCandidate) -> Result<Tensor<F>> {
    let &[c, h, w] = image.dims() else {
        return Err(Error::Shape(format!(
            "apply_pixel expects (3,H,W), got {:?}",
            image.dims()
        )));
    };
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 bands, got {c}")));
    }
    if candidate.x >= w || candidate.y >= h {
        return Err(Error::Config(format!(
            "pixel ({}, {}) outside {h}x{w} image",
            candidate.x, candidate.y
        )));
    }
    if candidate.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Config(format!(
            "replacement values {:?} outside [0,1]",
            candidate.values
        )));
    }
    let mut out = image.clone();
    for band in 0..3 {
        out.data_mut()[band * h * w + candidate.y * w + candidate.x] =
            F::cast_from(candidate.values[band]);
    }
    Ok(out)
}

/// Classification scores (softmax probabilities) for a batch of images.
/// Implementations must behave as pure functions of the image batch.
pub trait BlackBoxModel<F: Scalar> {
    fn scores(&mut self, images: &[Tensor<F>]) -> Result<Vec<Vec<f64>>>;

    /// Latent embedding of one image, when the model exposes one.
    fn latent(&mut self, _image: &Tensor<F>) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

fn softmax_f64(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

impl<F: Scalar> BlackBoxModel<F> for ModelState<F> {
    fn scores(&mut self, images: &[Tensor<F>]) -> Result<Vec<Vec<f64>>> {
        if self.mode() != Some(Mode::Eval) {
            return Err(Error::State("attack requires the model in eval mode".into()));
        }
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let dims = images[0].dims();
        let mut data = Vec::with_capacity(images.len() * images[0].len());
        for img in images {
            if img.dims() != dims {
                return Err(Error::Shape("mixed image sizes in score batch".into()));
            }
            data.extend_from_slice(img.data());
        }
        let batch = Tensor::new(
            vec![images.len(), dims[0], dims[1], dims[2]],
            data,
        )?;
        let (_, logits) = self.forward(&batch)?;
        Ok(logits
            .data()
            .chunks(3)
            .map(|row| softmax_f64(&row.iter().map(|&v| v.as_f64()).collect::<Vec<_>>()))
            .collect())
    }

    fn latent(&mut self, image: &Tensor<F>) -> Result<Option<Vec<f64>>> {
        let dims = image.dims();
        let batch = image
            .clone()
            .reshape(vec![1, dims[0], dims[1], dims[2]])?;
        let (latents, _) = self.forward(&batch)?;
        Ok(Some(latents.data().iter().map(|&v| v.as_f64()).collect()))
    }
}

/// Probability of `target` for the pixel-modified image.
pub fn fitness<F: Scalar, M: BlackBoxModel<F>>(
    model: &mut M,
    image: &Tensor<F>,
    candidate: &PixelCandidate,
    target: usize,
) -> Result<f64> {
    let modified = apply_pixel(image, candidate)?;
    let scores = model.scores(&[modified])?;
    Ok(scores[0][target])
}

pub const DIMS: usize = 5;
pub type Genome = [f64; DIMS];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeConfig {
    pub population: usize,
    pub max_iterations: usize,
    pub mutation_factor: f64,
    pub seed: u64,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self {
            population: 100,
            max_iterations: 80,
            mutation_factor: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DeOutcome {
    pub best: Genome,
    pub best_fitness: f64,
    /// Generations executed when the loop stopped.
    pub iterations: usize,
    /// Best-ever fitness after each generation (index 0 = initialization).
    pub history: Vec<f64>,
    pub stopped_early: bool,
}

/// Differential evolution: children v = a + F (b - c) from three distinct
/// population members are compared only to their corresponding parent and
/// replace it iff strictly fitter. `stop` sees the best-ever genome once per
/// generation and ends the search early when it returns true.
pub fn differential_evolution<O, S>(
    mut objective: O,
    bounds: &[(f64, f64); DIMS],
    cfg: &DeConfig,
    mut stop: S,
) -> Result<DeOutcome>
where
    O: FnMut(&[Genome]) -> Result<Vec<f64>>,
    S: FnMut(&Genome, f64) -> Result<bool>,
{
    if cfg.population < 4 {
        return Err(Error::Config(format!(
            "population must be >= 4 for mutation, got {}",
            cfg.population
        )));
    }
    if bounds.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi)) {
        return Err(Error::Config("bounds must be finite with lo < hi".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clamp = |g: &mut Genome| {
        for (v, (lo, hi)) in g.iter_mut().zip(bounds) {
            *v = v.clamp(*lo, *hi);
        }
    };

    let mut population: Vec<Genome> = (0..cfg.population)
        .map(|_| {
            let mut g = [0.0; DIMS];
            for (v, (lo, hi)) in g.iter_mut().zip(bounds) {
                *v = rng.random_range(*lo..*hi);
            }
            g
        })
        .collect();
    let mut fitnesses = objective(&population)?;

    let mut best_idx = 0;
    for (i, &f) in fitnesses.iter().enumerate() {
        if f > fitnesses[best_idx] {
            best_idx = i;
        }
    }
    let mut best = population[best_idx];
    let mut best_fitness = fitnesses[best_idx];
    let mut history = vec![best_fitness];

    if stop(&best, best_fitness)? {
        return Ok(DeOutcome {
            best,
            best_fitness,
            iterations: 0,
            history,
            stopped_early: true,
        });
    }

    for generation in 1..=cfg.max_iterations {
        let mut children = Vec::with_capacity(cfg.population);
        for i in 0..cfg.population {
            // Three random members, distinct from each other and the parent.
            let mut pick = || loop {
                let j = rng.random_range(0..cfg.population);
                if j != i {
                    return j;
                }
            };
            let (a, b, c) = {
                let a = pick();
                let mut b = pick();
                while b == a {
                    b = pick();
                }
                let mut c = pick();
                while c == a || c == b {
                    c = pick();
                }
                (a, b, c)
            };
            let mut child = [0.0; DIMS];
            for d in 0..DIMS {
                child[d] = population[a][d]
                    + cfg.mutation_factor * (population[b][d] - population[c][d]);
            }
            clamp(&mut child);
            children.push(child);
        }
        let child_fitnesses = objective(&children)?;
        for i in 0..cfg.population {
            if child_fitnesses[i] > fitnesses[i] {
                population[i] = children[i];
                fitnesses[i] = child_fitnesses[i];
                if child_fitnesses[i] > best_fitness {
                    best_fitness = child_fitnesses[i];
                    best = children[i];
                }
            }
        }
        history.push(best_fitness);
        if stop(&best, best_fitness)? {
            return Ok(DeOutcome {
                best,
                best_fitness,
                iterations: generation,
                history,
                stopped_early: true,
            });
        }
    }
    Ok(DeOutcome {
        best,
        best_fitness,
        iterations: cfg.max_iterations,
        history,
        stopped_early: false,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub target: usize,
    pub population: usize,
    pub max_iterations: usize,
    pub mutation_factor: f64,
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(target: usize, seed: u64) -> Self {
        Self {
            target,
            population: 100,
            max_iterations: 80,
            mutation_factor: 0.5,
            seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackResult {
    pub id: u64,
    pub true_label: usize,
    pub target: usize,
    pub success: bool,
    pub best: PixelCandidate,
    /// Differential-evolution generations executed; the susceptibility
    /// measure (fewer = easier to attack).
    pub iterations: usize,
    pub baseline_scores: Vec<f64>,
    pub perturbed_scores: Vec<f64>,
    pub baseline_latent: Option<Vec<f64>>,
    pub perturbed_latent: Option<Vec<f64>>,
}

/// Genome -> pixel candidate: coordinates round to the nearest integer at
/// evaluation time, values clamp to [0,1].
pub fn genome_to_candidate(genome: &Genome, h: usize, w: usize) -> PixelCandidate {
    PixelCandidate {
        x: (genome[0].round().max(0.0) as usize).min(w - 1),
        y: (genome[1].round().max(0.0) as usize).min(h - 1),
        values: [
            genome[2].clamp(0.0, 1.0),
            genome[3].clamp(0.0, 1.0),
            genome[4].clamp(0.0, 1.0),
        ],
    }
}

/// Run the targeted one-pixel attack against a correctly classified image.
pub fn one_pixel_attack<F: Scalar, M: BlackBoxModel<F>>(
    model: &mut M,
    id: u64,
    image: &Tensor<F>,
    true_label: usize,
    spec: &AttackSpec,
) -> Result<AttackResult> {
    if spec.target == true_label {
        return Err(Error::Config("attack target equals the true label".into()));
    }
    if spec.target >= 3 || true_label >= 3 {
        return Err(Error::Config("labels must be in 0..3".into()));
    }
    let &[_, h, w] = image.dims() else {
        return Err(Error::Shape(format!(
            "attack expects (3,H,W) image, got {:?}",
            image.dims()
        )));
    };

    let baseline_scores = model.scores(&[image.clone()])?.remove(0);
    let baseline_pred = argmax(&baseline_scores);
    if baseline_pred != true_label {
        return Err(Error::Precondition(format!(
            "baseline image {id} classified as {baseline_pred}, not its true label {true_label}; skipping"
        )));
    }
    let baseline_latent = model.latent(image)?;

    let bounds: [(f64, f64); DIMS] = [
        (0.0, (w - 1) as f64),
        (0.0, (h - 1) as f64),
        (0.0, 1.0),
        (0.0, 1.0),
        (0.0, 1.0),
    ];
    let de_cfg = DeConfig {
        population: spec.population,
        max_iterations: spec.max_iterations,
        mutation_factor: spec.mutation_factor,
        seed: spec.seed,
    };

    // One batched model call per generation; one extra call per generation
    // checks the success rule on the best candidate.
    let model = std::cell::RefCell::new(model);
    let objective = |genomes: &[Genome]| -> Result<Vec<f64>> {
        let images: Vec<Tensor<F>> = genomes
            .iter()
            .map(|g| apply_pixel(image, &genome_to_candidate(g, h, w)))
            .collect::<Result<_>>()?;
        let scores = model.borrow_mut().scores(&images)?;
        Ok(scores.into_iter().map(|s| s[spec.target]).collect())
    };
    let stop = |best: &Genome, _fit: f64| -> Result<bool> {
        let candidate = genome_to_candidate(best, h, w);
        let perturbed = apply_pixel(image, &candidate)?;
        let scores = model.borrow_mut().scores(&[perturbed])?.remove(0);
        Ok(argmax(&scores) == spec.target)
    };
    let outcome = differential_evolution(objective, &bounds, &de_cfg, stop)?;

    let best = genome_to_candidate(&outcome.best, h, w);
    let perturbed_image = apply_pixel(image, &best)?;
    let perturbed_scores = model.borrow_mut().scores(&[perturbed_image.clone()])?.remove(0);
    let perturbed_latent = model.borrow_mut().latent(&perturbed_image)?;
    Ok(AttackResult {
        id,
        true_label,
        target: spec.target,
        success: argmax(&perturbed_scores) == spec.target,
        best,
        iterations: outcome.iterations,
        baseline_scores,
        perturbed_scores,
        baseline_latent,
        perturbed_latent,
    })
}

/// Attack each incorrect label in order of descending baseline score and
/// keep results for every attempt, stopping after the first success.
pub fn attack_all_targets<F: Scalar, M: BlackBoxModel<F>>(
    model: &mut M,
    id: u64,
    image: &Tensor<F>,
    true_label: usize,
    population: usize,
    max_iterations: usize,
    seed: u64,
) -> Result<Vec<AttackResult>> {
    let baseline = model.scores(&[image.clone()])?.remove(0);
    let mut targets: Vec<usize> = (0..3).filter(|&t| t != true_label).collect();
    targets.sort_by(|&a, &b| baseline[b].partial_cmp(&baseline[a]).expect("finite scores"));

    let mut results = Vec::new();
    for (attempt, target) in targets.into_iter().enumerate() {
        let spec = AttackSpec {
            target,
            population,
            max_iterations,
            mutation_factor: 0.5,
            seed: crate::synth::dataset::derive_seed(seed, id * 2 + attempt as u64),
        };
        let result = one_pixel_attack(model, id, image, true_label, &spec)?;
        let success = result.success;
        results.push(result);
        if success {
            break;
        }
    }
    Ok(results)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn test_image() -> Tensor<f64> {
        Tensor::from_fn(&[3, 2, 2], |i| (i as f64) / 12.0)
    }

    #[test]
    fn apply_pixel_identity_candidate_is_noop() {
        let img = test_image();
        let current = PixelCandidate {
            x: 1,
            y: 0,
            values: [img.data()[1], img.data()[5], img.data()[9]],
        };
        assert_eq!(apply_pixel(&img, &current).unwrap(), img);
    }

    #[test]
    fn apply_pixel_changes_exactly_one_spatial_pixel() {
        let img = test_image();
        let cand = PixelCandidate { x: 0, y: 1, values: [0.9, 0.8, 0.7] };
        let out = apply_pixel(&img, &cand).unwrap();
        let mut differing = 0;
        for y in 0..2 {
            for x in 0..2 {
                let changed = (0..3).any(|b| out.data()[b * 4 + y * 2 + x] != img.data()[b * 4 + y * 2 + x]);
                if changed {
                    differing += 1;
                    assert_eq!((x, y), (0, 1));
                }
            }
        }
        assert_eq!(differing, 1);
    }

    #[test]
    fn apply_pixel_known_2x2_case() {
        let img = Tensor::<f64>::zeros(&[3, 2, 2]);
        let cand = PixelCandidate { x: 0, y: 0, values: [1.0, 0.0, 0.0] };
        let out = apply_pixel(&img, &cand).unwrap();
        let mut expect = vec![0.0; 12];
        expect[0] = 1.0;
        assert_eq!(out.data(), &expect[..]);
    }

    #[test]
    fn apply_pixel_rejects_out_of_bounds_and_bad_values() {
        let img = test_image();
        assert!(apply_pixel(&img, &PixelCandidate { x: 2, y: 0, values: [0.0; 3] }).is_err());
        assert!(apply_pixel(&img, &PixelCandidate { x: 0, y: 0, values: [1.5, 0.0, 0.0] }).is_err());
    }

    #[test]
    fn de_finds_concave_quadratic_optimum() {
        let z_star = [3.0, -2.0, 0.5, 0.25, -0.75];
        let bounds = [(-5.0, 5.0); 5];
        let cfg = DeConfig {
            population: 50,
            max_iterations: 100,
            mutation_factor: 0.5,
            seed: 12,
        };
        let objective = |genomes: &[Genome]| -> crate::error::Result<Vec<f64>> {
            Ok(genomes
                .iter()
                .map(|g| -g.iter().zip(&z_star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .collect())
        };
        let outcome = differential_evolution(objective, &bounds, &cfg, |_, _| Ok(false)).unwrap();
        for (got, want) in outcome.best.iter().zip(&z_star) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-2);
        }
        // Best-ever fitness is non-decreasing.
        for w in outcome.history.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert_eq!(outcome.iterations, 100);
    }

    #[test]
    fn de_rejects_tiny_population() {
        let cfg = DeConfig { population: 3, ..DeConfig::default() };
        let err = differential_evolution(
            |g: &[Genome]| Ok(vec![0.0; g.len()]),
            &[(0.0, 1.0); 5],
            &cfg,
            |_, _| Ok(false),
        );
        assert!(err.is_err());
    }

    #[test]
    fn de_is_deterministic_for_fixed_seed() {
        let bounds = [(0.0, 1.0); 5];
        let cfg = DeConfig { population: 20, max_iterations: 10, mutation_factor: 0.5, seed: 3 };
        let run = || {
            differential_evolution(
                |gs: &[Genome]| Ok(gs.iter().map(|g| g.iter().sum::<f64>()).collect()),
                &bounds,
                &cfg,
                |_, _| Ok(false),
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.best, b.best);
        assert_eq!(a.history, b.history);
    }

    /// Logistic scores over raw pixels: scores = softmax(W x + b).
    pub struct LinearSoftmax {
        pub weights: Vec<Vec<f64>>, // 3 x D
        pub bias: [f64; 3],
    }

    impl BlackBoxModel<f64> for LinearSoftmax {
        fn scores(&mut self, images: &[Tensor<f64>]) -> crate::error::Result<Vec<Vec<f64>>> {
            Ok(images
                .iter()
                .map(|img| {
                    let logits: Vec<f64> = self
                        .weights
                        .iter()
                        .zip(self.bias)
                        .map(|(row, b)| {
                            b + row.iter().zip(img.data()).map(|(w, x)| w * x).sum::<f64>()
                        })
                        .collect();
                    softmax_f64(&logits)
                })
                .collect())
        }
    }

    pub fn toy_linear_model(seed: u64, d: usize) -> LinearSoftmax {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        LinearSoftmax {
            weights: (0..3)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
            bias: [0.0, 0.1, -0.1],
        }
    }

    #[test]
    fn fitness_matches_closed_form_on_linear_model() {
        let mut model = toy_linear_model(5, 3 * 4 * 4);
        let img = Tensor::<f64>::from_fn(&[3, 4, 4], |i| ((i * 7) % 11) as f64 / 11.0);
        let cand = PixelCandidate { x: 2, y: 1, values: [0.3, 0.9, 0.1] };
        let got = fitness(&mut model, &img, &cand, 2).unwrap();

        // Closed form: softmax of the affine scores of the modified image.
        let modified = apply_pixel(&img, &cand).unwrap();
        let logits: Vec<f64> = model
            .weights
            .iter()
            .zip(model.bias)
            .map(|(row, b)| b + row.iter().zip(modified.data()).map(|(w, x)| w * x).sum::<f64>())
            .collect();
        let want = softmax_f64(&logits)[2];
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn attack_skips_misclassified_baseline() {
        let mut model = toy_linear_model(6, 3 * 4 * 4);
        let img = Tensor::<f64>::from_fn(&[3, 4, 4], |i| (i % 5) as f64 / 5.0);
        let pred = argmax(&model.scores(&[img.clone()]).unwrap()[0]);
        let wrong_true = (pred + 1) % 3;
        let spec = AttackSpec::new((pred + 2) % 3, 0);
        let err = one_pixel_attack(&mut model, 0, &img, wrong_true, &spec).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn successful_attack_flips_argmax_and_touches_one_pixel() {
        // A model dominated by single-pixel weights is easy to flip.
        let d = 3 * 8 * 8;
        let mut model = toy_linear_model(9, d);
        // Strengthen the target class weight on one pixel location.
        model.weights[1][5] = 40.0;
        let img = Tensor::<f64>::filled(&[3, 8, 8], 0.1);
        let true_label = argmax(&model.scores(&[img.clone()]).unwrap()[0]);
        if true_label == 1 {
            return; // construction failed to keep 1 as a non-true class
        }
        let spec = AttackSpec {
            target: 1,
            population: 30,
            max_iterations: 40,
            mutation_factor: 0.5,
            seed: 4,
        };
        let result = one_pixel_attack(&mut model, 7, &img, true_label, &spec).unwrap();
        assert!(result.success);
        assert_eq!(argmax(&result.perturbed_scores), 1);
        assert!(result.iterations <= 40);
        let modified = apply_pixel(&img, &result.best).unwrap();
        let differing = (0..64)
            .filter(|&p| (0..3).any(|b| modified.data()[b * 64 + p] != img.data()[b * 64 + p]))
            .count();
        assert_eq!(differing, 1);
    }
}
