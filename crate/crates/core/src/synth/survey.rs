//! Survey observation emulation: PSF blur, exposure scaling, Poisson noise,
//! and sky subtraction, per band.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

/// Expected counts above this are rejected rather than sampled.
pub const MAX_EXPECTED_COUNTS: f64 = 4_503_599_627_370_496.0; // 2^52

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurveyConfig {
    /// Exposure seconds per year of observing, per (g, r, i) band.
    pub exposure_per_year: [f64; 3],
    /// Years of observing: 1 and 10 are the named Y1/Y10 regimes.
    pub years: u32,
    /// Sky background in counts/s/pixel per band.
    pub sky_background: [f64; 3],
    /// Gaussian PSF full width at half maximum, in pixels (0 disables blur).
    pub psf_fwhm: f64,
    /// Detector gain in counts per flux unit.
    pub gain: f64,
    /// Seed of the per-image noise stream.
    pub seed: u64,
}

impl SurveyConfig {
    /// The paper's exposure pattern (g: 240 s/yr, r and i: 552 s/yr).
    pub fn lsst_like(years: u32, seed: u64) -> Self {
        Self {
            exposure_per_year: [240.0, 552.0, 552.0],
            years,
            sky_background: [100.0, 100.0, 100.0],
            psf_fwhm: 3.0,
            gain: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.exposure_per_year.iter().any(|&t| t <= 0.0) {
            return Err(Error::Config("exposure times must be > 0".into()));
        }
        if self.years == 0 {
            return Err(Error::Config("years must be >= 1".into()));
        }
        if self.sky_background.iter().any(|&s| s < 0.0) {
            return Err(Error::Config("sky background must be >= 0".into()));
        }
        if self.psf_fwhm < 0.0 {
            return Err(Error::Config("psf fwhm must be >= 0".into()));
        }
        if self.gain <= 0.0 {
            return Err(Error::Config("gain must be > 0".into()));
        }
        Ok(())
    }

    /// Total integration time for a band index.
    pub fn exposure_seconds(&self, band: usize) -> f64 {
        self.exposure_per_year[band] * self.years as f64
    }
}

const FWHM_TO_SIGMA: f64 = 2.354_820_045_030_949; // 2 sqrt(2 ln 2)

/// Separable Gaussian blur with zero padding outside the frame.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, fwhm: f64) -> Vec<f64> {
    if fwhm <= 0.0 {
        return plane.to_vec();
    }
    let sigma = fwhm / FWHM_TO_SIGMA;
    let radius = (3.5 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for k in -radius..=radius {
        let v = (-(k as f64) * (k as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }

    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = x as isize + ki as isize - radius;
                if sx >= 0 && (sx as usize) < w {
                    acc += plane[y * w + sx as usize] * kv;
                }
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = y as isize + ki as isize - radius;
                if sy >= 0 && (sy as usize) < h {
                    acc += rows[sy as usize * w + x] * kv;
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Observe a raw flux/s image: per band, blur with the PSF, scale to expected
/// counts (source * gain + sky) * t, draw Poisson counts, subtract sky * t.
pub fn emulate_survey<F: Scalar>(raw: &Tensor<F>, cfg: &SurveyConfig) -> Result<Tensor<F>> {
    cfg.validate()?;
    let &[bands, h, w] = raw.dims() else {
        return Err(Error::Shape(format!(
            "emulate_survey expects (3,H,W), got {:?}",
            raw.dims()
        )));
    };
    if bands != 3 {
        return Err(Error::Shape(format!("expected 3 bands, got {bands}")));
    }
    if raw.data().iter().any(|&v| v < F::zero()) {
        return Err(Error::Precondition("raw image must be nonnegative".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = vec![F::zero(); raw.len()];
    for band in 0..3 {
        let t = cfg.exposure_seconds(band);
        let sky_counts = cfg.sky_background[band] * t;
        let plane: Vec<f64> = raw.data()[band * h * w..(band + 1) * h * w]
            .iter()
            .map(|&v| v.as_f64())
            .collect();
        let blurred = gaussian_blur(&plane, h, w, cfg.psf_fwhm);
        for (i, &src) in blurred.iter().enumerate() {
            let expected = (src * cfg.gain + cfg.sky_background[band]) * t;
            if expected > MAX_EXPECTED_COUNTS {
                return Err(Error::Numeric(format!(
                    "expected counts {expected:.3e} exceed 2^52 in band {band}"
                )));
            }
            let counts = if expected > 0.0 {
                Poisson::new(expected)
                    .map_err(|e| Error::Numeric(format!("poisson({expected}): {e}")))?
                    .sample(&mut rng)
            } else {
                0.0
            };
            out[band * h * w + i] = F::cast_from(counts - sky_counts);
        }
    }
    Tensor::new(raw.dims().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_image_noise_is_centered_with_sky_variance() {
        // Pixel levels of source-free sky follow a Poisson centered at 0
        // after subtraction, with variance equal to the background counts.
        let raw = Tensor::<f64>::zeros(&[3, 8, 8]);
        let mut cfg = SurveyConfig::lsst_like(1, 7);
        cfg.psf_fwhm = 0.0;
        cfg.sky_background = [50.0, 50.0, 50.0];
        let mut values = Vec::new();
        for rep in 0..60 {
            cfg.seed = rep;
            let obs = emulate_survey(&raw, &cfg).unwrap();
            values.extend(obs.data()[..64].iter().copied());
        }
        // Band 0: t = 240 s, so variance should be 50 * 240 = 12000.
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expect_var: f64 = 50.0 * 240.0;
        assert!(mean.abs() < 0.05 * expect_var.sqrt() * 3.0, "mean {mean}");
        assert!(
            (var - expect_var).abs() < 0.05 * expect_var,
            "variance {var} vs {expect_var}"
        );
    }

    #[test]
    fn y10_expected_counts_are_ten_times_y1() {
        // Pre-subtraction means scale linearly with exposure time.
        let raw = Tensor::<f64>::filled(&[3, 4, 4], 2.0);
        let mut mean = [0.0f64; 2];
        for (slot, years) in [(0usize, 1u32), (1, 10)] {
            let mut acc = 0.0;
            let mut count = 0usize;
            for rep in 0..1000 {
                let mut cfg = SurveyConfig::lsst_like(years, 1000 + rep);
                cfg.psf_fwhm = 0.0;
                let obs = emulate_survey(&raw, &cfg).unwrap();
                // Add back the known sky to get pre-subtraction counts (band r).
                let t = cfg.exposure_seconds(1);
                for &v in &obs.data()[16..32] {
                    acc += v + 100.0 * t;
                    count += 1;
                }
            }
            mean[slot] = acc / count as f64;
        }
        let ratio = mean[1] / mean[0];
        assert!((ratio - 10.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn flat_source_snr_gains_sqrt_ten() {
        let raw = Tensor::<f64>::filled(&[3, 4, 4], 5.0);
        let snr = |years: u32, seed0: u64| -> f64 {
            let mut samples = Vec::new();
            for rep in 0..1000 {
                let mut cfg = SurveyConfig::lsst_like(years, seed0 + rep);
                cfg.psf_fwhm = 0.0;
                let obs = emulate_survey(&raw, &cfg).unwrap();
                samples.push(obs.data()[20]); // one r-band pixel
            }
            let n = samples.len() as f64;
            let mean = samples.iter().sum::<f64>() / n;
            let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            mean / var.sqrt()
        };
        let ratio = snr(10, 1) / snr(1, 100_000);
        assert!((ratio - 10f64.sqrt()).abs() < 0.1 * 10f64.sqrt(), "snr ratio {ratio}");
    }

    #[test]
    fn blur_preserves_total_flux_away_from_edges() {
        let mut plane = vec![0.0; 32 * 32];
        plane[16 * 32 + 16] = 100.0;
        let blurred = gaussian_blur(&plane, 32, 32, 3.0);
        let total: f64 = blurred.iter().sum();
        assert!((total - 100.0).abs() < 1e-6, "total {total}");
    }

    #[test]
    fn overflow_guard_triggers() {
        let raw = Tensor::<f64>::filled(&[3, 4, 4], 1e13);
        let cfg = SurveyConfig::lsst_like(10, 0);
        assert!(matches!(
            emulate_survey(&raw, &cfg),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn same_seed_reproduces_bitwise() {
        let raw = Tensor::<f64>::filled(&[3, 6, 6], 3.0);
        let cfg = SurveyConfig::lsst_like(1, 42);
        let a = emulate_survey(&raw, &cfg).unwrap();
        let b = emulate_survey(&raw, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
