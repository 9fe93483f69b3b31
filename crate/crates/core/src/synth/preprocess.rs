//! Percentile clipping, joint [0,1] scaling, arcsinh stretching, and the
//! flip/rotation augmentations.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub low_percentile: f64,
    pub high_percentile: f64,
    /// Arcsinh stretch constant c in x -> arcsinh(c x) / arcsinh(c).
    pub arcsinh_constant: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            low_percentile: 0.1,
            high_percentile: 99.9,
            arcsinh_constant: 0.85,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.low_percentile
            && self.low_percentile < self.high_percentile
            && self.high_percentile <= 100.0)
        {
            return Err(Error::Config(format!(
                "percentiles must satisfy 0 <= low < high <= 100, got {} / {}",
                self.low_percentile, self.high_percentile
            )));
        }
        if self.arcsinh_constant <= 0.0 {
            return Err(Error::Config("arcsinh constant must be > 0".into()));
        }
        Ok(())
    }
}

/// Percentile by linear interpolation between order statistics.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = idx - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

/// Clip jointly over all three bands to the configured percentiles, scale
/// jointly to [0,1], then apply the arcsinh stretch. A constant image maps
/// to all zeros.
pub fn preprocess<F: Scalar>(obs: &Tensor<F>, cfg: &PreprocessConfig) -> Result<Tensor<F>> {
    cfg.validate()?;
    if obs.rank() != 3 {
        return Err(Error::Shape(format!(
            "preprocess expects (C,H,W), got {:?}",
            obs.dims()
        )));
    }
    if obs.len() < 1000 {
        return Err(Error::Precondition(format!(
            "preprocess needs >= 1000 pixels for stable percentiles, got {}",
            obs.len()
        )));
    }
    let mut sorted: Vec<f64> = obs.data().iter().map(|&v| v.as_f64()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite pixels"));
    let lo = percentile(&sorted, cfg.low_percentile);
    let hi = percentile(&sorted, cfg.high_percentile);
    if hi <= lo {
        return Ok(Tensor::zeros(obs.dims()));
    }
    let c = cfg.arcsinh_constant;
    let denom = c.asinh();
    let span = hi - lo;
    let data = obs
        .data()
        .iter()
        .map(|&v| {
            let clipped = v.as_f64().clamp(lo, hi);
            let unit = (clipped - lo) / span;
            F::cast_from((c * unit).asinh() / denom)
        })
        .collect();
    Tensor::new(obs.dims().to_vec(), data)
}

/// Axis-flip / rotation transforms used for augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    HFlip,
    VFlip,
    Rot90,
    Rot180,
}

pub const AUGMENTATIONS: [Transform; 5] = [
    Transform::Identity,
    Transform::HFlip,
    Transform::VFlip,
    Transform::Rot90,
    Transform::Rot180,
];

/// Apply one transform to a square (C,H,W) image.
pub fn apply_transform<F: Scalar>(img: &Tensor<F>, t: Transform) -> Result<Tensor<F>> {
    let &[c, h, w] = img.dims() else {
        return Err(Error::Shape(format!(
            "transform expects (C,H,W), got {:?}",
            img.dims()
        )));
    };
    if h != w {
        return Err(Error::Shape(format!("transform needs a square image, got {h}x{w}")));
    }
    let src = img.data();
    let mut out = vec![F::zero(); src.len()];
    for ci in 0..c {
        let base = ci * h * w;
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = match t {
                    Transform::Identity => (y, x),
                    Transform::HFlip => (y, w - 1 - x),
                    Transform::VFlip => (h - 1 - y, x),
                    Transform::Rot90 => (x, w - 1 - y),
                    Transform::Rot180 => (h - 1 - y, w - 1 - x),
                };
                out[base + y * w + x] = src[base + sy * w + sx];
            }
        }
    }
    Tensor::new(img.dims().to_vec(), out)
}

/// The five-image augmentation family: original, horizontal and vertical
/// flips, and 90/180-degree rotations.
pub fn augment<F: Scalar>(img: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
    AUGMENTATIONS.iter().map(|&t| apply_transform(img, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy_image(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, 20, 20], |_| rng.random_range(-50.0..500.0))
    }

    #[test]
    fn output_hits_one_at_high_percentile_and_stays_in_unit_range() {
        let img = noisy_image(5);
        let out = preprocess(&img, &PreprocessConfig::default()).unwrap();
        let max = out.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = out.data().iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((max - 1.0).abs() < 1e-12, "max {max}");
        assert!(min >= 0.0);
    }

    #[test]
    fn constant_image_maps_to_zeros() {
        let img = Tensor::<f64>::filled(&[3, 20, 20], 7.5);
        let out = preprocess(&img, &PreprocessConfig::default()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn preprocess_is_monotone() {
        let img = noisy_image(6);
        let out = preprocess(&img, &PreprocessConfig::default()).unwrap();
        let mut pairs: Vec<(f64, f64)> = img.data().iter().cloned().zip(out.data().iter().cloned()).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            assert!(w[0].1 <= w[1].1 + 1e-15);
        }
    }

    #[test]
    fn preprocess_requires_enough_pixels() {
        let img = Tensor::<f64>::zeros(&[3, 10, 10]);
        assert!(preprocess(&img, &PreprocessConfig::default()).is_err());
    }

    #[test]
    fn hflip_is_an_involution_and_rot180_composes_flips() {
        let img = noisy_image(7);
        let h = apply_transform(&img, Transform::HFlip).unwrap();
        let hh = apply_transform(&h, Transform::HFlip).unwrap();
        assert_eq!(hh, img);

        let v = apply_transform(&img, Transform::VFlip).unwrap();
        let hv = apply_transform(&v, Transform::HFlip).unwrap();
        let r180 = apply_transform(&img, Transform::Rot180).unwrap();
        assert_eq!(hv, r180);
    }

    #[test]
    fn symmetric_image_is_fixed_by_all_transforms() {
        let img = Tensor::<f64>::from_fn(&[1, 5, 5], |i| {
            let (y, x) = ((i / 5) as f64 - 2.0, (i % 5) as f64 - 2.0);
            (-(y * y + x * x)).exp()
        });
        for out in augment(&img).unwrap() {
            assert_eq!(out, img);
        }
    }

    #[test]
    fn augment_rejects_non_square() {
        let img = Tensor::<f64>::zeros(&[3, 4, 6]);
        assert!(augment(&img).is_err());
    }
}
