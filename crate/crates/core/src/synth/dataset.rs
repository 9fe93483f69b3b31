//! Dataset assembly: rejection-sampled galaxy generation labeled by the
//! G-M20 statistics, minority-class augmentation, paired Y10/Y1 survey
//! emulation, 70:10:20 splits, and the on-disk container
//! (manifest.json + images.bin).

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::morphology::{self, Label, LABELS};
use crate::synth::preprocess::{apply_transform, preprocess, PreprocessConfig, AUGMENTATIONS};
use crate::synth::survey::{emulate_survey, SurveyConfig};
use crate::synth::{render_galaxy, GalaxyParams, MorphFamily, SersicComponent};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const GXDS_MAGIC: &[u8; 4] = b"GXDS";
pub const GXDS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

pub const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    Y10,
    Y1,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Y10 => "Y10",
            Domain::Y1 => "Y1",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Requested generated examples per class (spiral, elliptical, merger),
    /// before minority-class augmentation.
    pub class_counts: [usize; 3],
    /// Seed for parameter sampling and the per-example noise streams.
    pub seed: u64,
    /// Rejection-sampling budget per accepted example.
    pub max_attempts: usize,
    /// Segmentation threshold used when labeling noiseless renders.
    pub seg_threshold: f64,
    /// Minimum G-M20 distance from every decision line for an accepted
    /// sample; keeps labels well inside their class regions.
    pub label_margin: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            class_counts: [350, 350, 88],
            seed: 0,
            max_attempts: 400,
            seg_threshold: 0.0225,
            label_margin: 0.015,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildConfig {
    pub generator: GeneratorConfig,
    pub survey_y10: SurveyConfig,
    pub survey_y1: SurveyConfig,
    pub preprocess: PreprocessConfig,
    pub split_seed: u64,
}

impl BuildConfig {
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            generator: GeneratorConfig { seed, ..GeneratorConfig::default() },
            survey_y10: SurveyConfig::lsst_like(10, seed),
            survey_y1: SurveyConfig::lsst_like(1, seed),
            preprocess: PreprocessConfig::default(),
            split_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.generator.image_size < 16 {
            return Err(Error::Config("generator.image_size must be >= 16".into()));
        }
        for (label, &count) in LABELS.iter().zip(&self.generator.class_counts) {
            if count < 30 {
                return Err(Error::Config(format!(
                    "generator.class_counts[{label}] must be >= 30, got {count}"
                )));
            }
        }
        let max = *self.generator.class_counts.iter().max().expect("3 classes");
        let min = *self.generator.class_counts.iter().min().expect("3 classes");
        if max > 5 * min {
            return Err(Error::Config(format!(
                "class counts {:?} cannot be balanced by x5 augmentation",
                self.generator.class_counts
            )));
        }
        if self.generator.max_attempts == 0 {
            return Err(Error::Config("generator.max_attempts must be >= 1".into()));
        }
        self.survey_y10.validate()?;
        self.survey_y1.validate()?;
        self.preprocess.validate()?;
        Ok(())
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("serializable config").as_bytes())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecordMeta {
    pub id: u64,
    pub domain: Domain,
    /// Byte offset of this record in images.bin.
    pub offset: u64,
    pub label: Label,
    pub split: Split,
    pub params_digest: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub config_digest: String,
    pub image_size: usize,
    /// counts[split][label] over examples (each example has a Y10/Y1 pair).
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub records: Vec<RecordMeta>,
}

/// One example: the preprocessed Y10/Y1 observation pair of a single raw
/// render, sharing one id, label, and split.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: u64,
    pub label: Label,
    pub split: Split,
    pub y10: Tensor<f32>,
    pub y1: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub image_size: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Example> {
        self.examples.iter().filter(|e| e.split == split).collect()
    }

    pub fn class_counts(&self, split: Split) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for e in self.examples.iter().filter(|e| e.split == split) {
            counts[e.label.index()] += 1;
        }
        counts
    }
}

/// splitmix64; the standard finalizer used to derive per-example seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Per-example seed: hash of the global seed and the example id.
pub fn derive_seed(global: u64, id: u64) -> u64 {
    splitmix64(global ^ id.wrapping_mul(0x9e3779b97f4a7c15))
}

/// Family priors aimed at each class's G-M20 region (calibrated against the
/// measured statistics of preprocessed renders at the default segmentation
/// threshold). Labels still come from the classifier; samples landing in the
/// wrong region or too close to a boundary line are rejected.
fn sample_params(target: Label, rng: &mut ChaCha8Rng) -> GalaxyParams {
    let fluxes = |rng: &mut ChaCha8Rng, base: f64| -> [f64; 3] {
        let r = base * rng.random_range(0.8..1.3);
        [r * rng.random_range(0.55..0.8), r, r * rng.random_range(1.0..1.3)]
    };
    match target {
        Label::Spiral => GalaxyParams {
            family: MorphFamily::DiskArms,
            components: vec![SersicComponent {
                n: rng.random_range(0.5..0.8),
                r_e: rng.random_range(6.0..11.0),
                flux: fluxes(rng, 250.0),
                axis_ratio: rng.random_range(0.5..0.9),
                position_angle: rng.random_range(0.0..std::f64::consts::PI),
            }],
            arm_amplitude: rng.random_range(0.1..0.3),
            pitch_angle: rng.random_range(0.25..0.45),
            separation: 0.0,
            center_offset: (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
        },
        Label::Elliptical => GalaxyParams {
            family: MorphFamily::Spheroid,
            components: vec![SersicComponent {
                n: rng.random_range(4.5..6.0),
                r_e: rng.random_range(8.0..13.0),
                flux: fluxes(rng, 250.0),
                axis_ratio: rng.random_range(0.7..0.95),
                position_angle: rng.random_range(0.0..std::f64::consts::PI),
            }],
            arm_amplitude: 0.0,
            pitch_angle: 0.0,
            separation: 0.0,
            center_offset: (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
        },
        Label::Merger => {
            let component = |rng: &mut ChaCha8Rng| SersicComponent {
                n: rng.random_range(1.0..3.0),
                r_e: rng.random_range(2.5..4.5),
                flux: fluxes(rng, 150.0),
                axis_ratio: rng.random_range(0.6..0.95),
                position_angle: rng.random_range(0.0..std::f64::consts::PI),
            };
            GalaxyParams {
                family: MorphFamily::Merger,
                components: vec![component(rng), component(rng)],
                arm_amplitude: 0.0,
                pitch_angle: 0.0,
                separation: rng.random_range(7.0..14.0),
                center_offset: (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
            }
        }
    }
}

/// Signed distance of (G, M20) from the nearest line bounding its class
/// region; positive when inside the region for `target`.
fn label_margin(target: Label, g: f64, m20: f64) -> f64 {
    let d_merger = g - morphology::BOUNDARIES.merger_line(m20);
    let d_dashed = g - morphology::BOUNDARIES.elliptical_spiral_line(m20);
    match target {
        Label::Merger => d_merger,
        Label::Elliptical => (-d_merger).min(d_dashed),
        Label::Spiral => (-d_merger).min(-d_dashed),
    }
}

struct RawExample {
    id: u64,
    label: Label,
    raw: Tensor<f32>,
    params_digest: String,
}

/// Generate, label, balance, observe, split, and write the dataset.
/// Returns the manifest plus the in-memory dataset.
pub fn build_dataset(cfg: &BuildConfig, out_dir: &Path) -> Result<(DatasetManifest, Dataset)> {
    cfg.validate()?;
    let size = cfg.generator.image_size;

    // Rejection sampling per class on the noiseless preprocessed render.
    let mut raws: Vec<RawExample> = Vec::new();
    let mut next_id = 0u64;
    for (class_idx, &label) in LABELS.iter().enumerate() {
        let needed = cfg.generator.class_counts[class_idx];
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.generator.seed, 0xC1A55 + class_idx as u64));
        for _ in 0..needed {
            let mut accepted = false;
            for _attempt in 0..cfg.generator.max_attempts {
                let params = sample_params(label, &mut rng);
                let raw = match render_galaxy::<f32>(&params, size) {
                    Ok(r) => r,
                    Err(_) => continue,
                };
                let clean = preprocess(&raw, &cfg.preprocess)?;
                let (measures, got) = match morphology::measure(&clean, cfg.generator.seg_threshold)
                {
                    Ok((m, l)) if m.gini.is_finite() && m.m20.is_finite() => (m, l),
                    _ => continue,
                };
                if got != label
                    || label_margin(label, measures.gini, measures.m20) < cfg.generator.label_margin
                {
                    continue;
                }
                let params_digest =
                    sha256_hex(serde_json::to_string(&params)?.as_bytes());
                raws.push(RawExample { id: next_id, label, raw, params_digest });
                next_id += 1;
                accepted = true;
                break;
            }
            if !accepted {
                return Err(Error::Generation {
                    class: label.name().into(),
                    detail: format!(
                        "no accepted sample within {} attempts",
                        cfg.generator.max_attempts
                    ),
                });
            }
        }
    }

    // Balance by augmenting minority classes up to the largest class.
    let mut per_class: [Vec<usize>; 3] = Default::default();
    for (i, r) in raws.iter().enumerate() {
        per_class[r.label.index()].push(i);
    }
    let target = per_class.iter().map(Vec::len).max().expect("3 classes");
    for class_idx in 0..3 {
        let originals = per_class[class_idx].clone();
        let deficit = target - originals.len();
        for k in 0..deficit {
            let source = &raws[originals[k % originals.len()]];
            let transform = AUGMENTATIONS[1 + k / originals.len()];
            let raw = apply_transform(&source.raw, transform)?;
            let params_digest = format!("{}:{:?}", source.params_digest, transform);
            raws.push(RawExample {
                id: next_id,
                label: source.label,
                raw,
                params_digest,
            });
            next_id += 1;
        }
    }

    // 70:10:20 split by seeded random assignment.
    let n = raws.len();
    let mut order: Vec<usize> = (0..n).collect();
    seeded_shuffle(&mut order, &mut ChaCha8Rng::seed_from_u64(cfg.split_seed));
    let n_train = n * 70 / 100;
    let n_val = n * 10 / 100;
    let mut splits = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    // Observe each raw image in both survey regimes with the same derived
    // noise seed stream, then preprocess.
    let observed: Vec<Result<(Tensor<f32>, Tensor<f32>)>> = raws
        .par_iter()
        .map(|r| {
            let seed = derive_seed(cfg.generator.seed, r.id);
            let y10_cfg = SurveyConfig { seed, ..cfg.survey_y10.clone() };
            let y1_cfg = SurveyConfig { seed, ..cfg.survey_y1.clone() };
            let y10 = preprocess(&emulate_survey(&r.raw, &y10_cfg)?, &cfg.preprocess)?;
            let y1 = preprocess(&emulate_survey(&r.raw, &y1_cfg)?, &cfg.preprocess)?;
            Ok((y10, y1))
        })
        .collect();

    let mut examples = Vec::with_capacity(n);
    for (raw, obs) in raws.iter().zip(observed) {
        let (y10, y1) = obs?;
        examples.push(Example {
            id: raw.id,
            label: raw.label,
            split: splits[raw.id as usize],
            y10,
            y1,
        });
    }

    // Serialize images.bin and the manifest.
    std::fs::create_dir_all(out_dir)?;
    let mut bin: Vec<u8> = Vec::new();
    bin.extend_from_slice(GXDS_MAGIC);
    bin.extend_from_slice(&GXDS_VERSION.to_le_bytes());
    let mut records = Vec::with_capacity(2 * n);
    for (example, raw) in examples.iter().zip(&raws) {
        for (domain, image) in [(Domain::Y10, &example.y10), (Domain::Y1, &example.y1)] {
            records.push(RecordMeta {
                id: example.id,
                domain,
                offset: bin.len() as u64,
                label: example.label,
                split: example.split,
                params_digest: raw.params_digest.clone(),
            });
            bin.extend_from_slice(&example.id.to_le_bytes());
            for &v in image.data() {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(out_dir.join("images.bin"))?;
    file.write_all(&bin)?;

    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for example in &examples {
        *counts
            .entry(example.split.name().to_string())
            .or_default()
            .entry(example.label.name().to_string())
            .or_insert(0) += 1;
    }
    let manifest = DatasetManifest {
        format_version: 1,
        tool_version: crate::VERSION.to_string(),
        config_digest: cfg.digest(),
        image_size: size,
        counts,
        records,
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;

    Ok((manifest, Dataset { image_size: size, examples }))
}

/// Fisher-Yates with our seeded generator (index draws, not rand's shuffle,
/// so the result is pinned by this code alone).
pub(crate) fn seeded_shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Read a dataset directory back into memory.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Dataset)> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let bin = std::fs::read(dir.join("images.bin"))?;
    if bin.len() < 8 || &bin[0..4] != GXDS_MAGIC {
        return Err(Error::Config("images.bin is not a GXDS container".into()));
    }
    let version = u32::from_le_bytes(bin[4..8].try_into().expect("4 bytes"));
    if version != GXDS_VERSION {
        return Err(Error::Config(format!("unsupported GXDS version {version}")));
    }
    let size = manifest.image_size;
    let pixels = 3 * size * size;

    let read_image = |offset: u64, id: u64| -> Result<Tensor<f32>> {
        let start = offset as usize;
        let end = start + 8 + 4 * pixels;
        if end > bin.len() {
            return Err(Error::Config(format!("record at {offset} exceeds images.bin")));
        }
        let stored = u64::from_le_bytes(bin[start..start + 8].try_into().expect("8 bytes"));
        if stored != id {
            return Err(Error::Config(format!(
                "record at {offset} has id {stored}, manifest says {id}"
            )));
        }
        let mut data = Vec::with_capacity(pixels);
        for i in 0..pixels {
            let at = start + 8 + 4 * i;
            data.push(f32::from_le_bytes(bin[at..at + 4].try_into().expect("4 bytes")));
        }
        Tensor::new(vec![3, size, size], data)
    };

    let mut by_id: BTreeMap<u64, (Option<Tensor<f32>>, Option<Tensor<f32>>, Label, Split)> =
        BTreeMap::new();
    for record in &manifest.records {
        let image = read_image(record.offset, record.id)?;
        let entry = by_id
            .entry(record.id)
            .or_insert((None, None, record.label, record.split));
        if entry.2 != record.label || entry.3 != record.split {
            return Err(Error::Config(format!(
                "inconsistent label/split for id {}",
                record.id
            )));
        }
        match record.domain {
            Domain::Y10 => entry.0 = Some(image),
            Domain::Y1 => entry.1 = Some(image),
        }
    }
    let mut examples = Vec::with_capacity(by_id.len());
    for (id, (y10, y1, label, split)) in by_id {
        let y10 = y10.ok_or_else(|| Error::Config(format!("id {id} missing Y10 image")))?;
        let y1 = y1.ok_or_else(|| Error::Config(format!("id {id} missing Y1 image")))?;
        examples.push(Example { id, label, split, y10, y1 });
    }
    Ok((manifest, Dataset { image_size: size, examples }))
}
