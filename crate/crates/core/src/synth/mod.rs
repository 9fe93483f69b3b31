//! Synthetic three-class galaxy generation in raw flux units, survey-noise
//! emulation, preprocessing, and dataset assembly.

pub mod dataset;
pub mod preprocess;
pub mod survey;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Morphology family of the generator (recorded, but class labels come from
/// the G-M20 statistics of the rendered image).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphFamily {
    DiskArms,
    Spheroid,
    Merger,
}

/// One Sersic component: I(r) = I_e exp(-b_n [(r/r_e)^(1/n) - 1]) with
/// b_n from the standard asymptotic approximation b_n = 2n - 1/3.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SersicComponent {
    /// Sersic index, in [0.5, 6].
    pub n: f64,
    /// Effective (half-light) radius in pixels.
    pub r_e: f64,
    /// Total flux per band (g, r, i) in flux units per second.
    pub flux: [f64; 3],
    /// Minor/major axis ratio, in (0, 1].
    pub axis_ratio: f64,
    /// Position angle in radians.
    pub position_angle: f64,
}

/// Full parameter set for one synthetic galaxy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GalaxyParams {
    pub family: MorphFamily,
    /// One component for disk/spheroid, two for mergers.
    pub components: Vec<SersicComponent>,
    /// Spiral-arm modulation amplitude (disk family only), in [0, 1].
    pub arm_amplitude: f64,
    /// Spiral-arm pitch angle in radians (disk family only).
    pub pitch_angle: f64,
    /// Center separation in pixels (merger family only).
    pub separation: f64,
    /// Sub-pixel offset of the galaxy center from the frame center.
    pub center_offset: (f64, f64),
}

impl GalaxyParams {
    pub fn validate(&self) -> Result<()> {
        let expect = match self.family {
            MorphFamily::Merger => 2,
            _ => 1,
        };
        if self.components.len() != expect {
            return Err(Error::Config(format!(
                "{:?} needs {expect} component(s), got {}",
                self.family,
                self.components.len()
            )));
        }
        for c in &self.components {
            if !(0.5..=6.0).contains(&c.n) {
                return Err(Error::Config(format!("sersic index {} outside [0.5, 6]", c.n)));
            }
            if c.r_e <= 0.0 {
                return Err(Error::Config("effective radius must be > 0".into()));
            }
            if c.flux.iter().any(|&f| f <= 0.0) {
                return Err(Error::Config("band fluxes must be > 0".into()));
            }
            if !(c.axis_ratio > 0.0 && c.axis_ratio <= 1.0) {
                return Err(Error::Config(format!(
                    "axis ratio {} outside (0, 1]",
                    c.axis_ratio
                )));
            }
        }
        if self.family == MorphFamily::DiskArms {
            if !(0.0..=1.0).contains(&self.arm_amplitude) {
                return Err(Error::Config(format!(
                    "arm amplitude {} outside [0, 1]",
                    self.arm_amplitude
                )));
            }
            if self.arm_amplitude > 0.0
                && !(self.pitch_angle > 0.0 && self.pitch_angle < std::f64::consts::FRAC_PI_2)
            {
                return Err(Error::Config(format!(
                    "pitch angle {} outside (0, pi/2)",
                    self.pitch_angle
                )));
            }
        }
        if self.family == MorphFamily::Merger && self.separation < 0.0 {
            return Err(Error::Config("separation must be >= 0".into()));
        }
        if self.center_offset.0.abs() >= 1.0 || self.center_offset.1.abs() >= 1.0 {
            return Err(Error::Config("center offset must be sub-pixel".into()));
        }
        Ok(())
    }
}

/// Flux of the unit-I_e elliptical Sersic profile integrated over the plane:
/// 2 pi n e^(b_n) b_n^(-2n) Gamma(2n) r_e^2 q.
fn sersic_total_flux(n: f64, r_e: f64, q: f64) -> f64 {
    let b = 2.0 * n - 1.0 / 3.0;
    2.0 * std::f64::consts::PI * n * b.exp() * b.powf(-2.0 * n) * libm::tgamma(2.0 * n)
        * r_e
        * r_e
        * q
}

/// Samples per pixel axis when integrating the profile over a pixel.
const OVERSAMPLE: usize = 4;

/// Render a galaxy to a raw (3, size, size) image in flux/s units.
pub fn render_galaxy<F: Scalar>(params: &GalaxyParams, size: usize) -> Result<Tensor<F>> {
    params.validate()?;
    if size < 16 {
        return Err(Error::Config(format!("image size {size} below minimum 16")));
    }
    for c in &params.components {
        if c.r_e > size as f64 / 3.0 {
            return Err(Error::Config(format!(
                "effective radius {} exceeds size/3 = {}",
                c.r_e,
                size as f64 / 3.0
            )));
        }
    }

    let frame_center = (size as f64 - 1.0) / 2.0;
    let cy = frame_center + params.center_offset.0;
    let cx = frame_center + params.center_offset.1;

    // Component centers; mergers are split along the leading component's
    // position angle.
    let centers: Vec<(f64, f64)> = match params.family {
        MorphFamily::Merger => {
            let ang = params.components[0].position_angle;
            let (dy, dx) = (ang.sin(), ang.cos());
            let half = params.separation / 2.0;
            vec![
                (cy - half * dy, cx - half * dx),
                (cy + half * dy, cx + half * dx),
            ]
        }
        _ => vec![(cy, cx)],
    };

    let mut out = vec![0.0f64; 3 * size * size];
    let arms = params.family == MorphFamily::DiskArms && params.arm_amplitude > 0.0;
    let inv_os = 1.0 / OVERSAMPLE as f64;

    for (component, &(ccy, ccx)) in params.components.iter().zip(&centers) {
        let b = 2.0 * component.n - 1.0 / 3.0;
        let inv_n = 1.0 / component.n;
        let (sin_t, cos_t) = component.position_angle.sin_cos();
        let inv_q = 1.0 / component.axis_ratio;
        let tan_pitch = params.pitch_angle.tan();
        let norm = sersic_total_flux(component.n, component.r_e, component.axis_ratio);
        let intensity: Vec<f64> = component.flux.iter().map(|&f| f / norm).collect();

        for y in 0..size {
            for x in 0..size {
                let mut shape = 0.0;
                for sy in 0..OVERSAMPLE {
                    for sx in 0..OVERSAMPLE {
                        let py = y as f64 + (sy as f64 + 0.5) * inv_os - 0.5 - ccy;
                        let px = x as f64 + (sx as f64 + 0.5) * inv_os - 0.5 - ccx;
                        // Rotate into the component frame, squeeze the minor axis.
                        let u = cos_t * px + sin_t * py;
                        let v = -sin_t * px + cos_t * py;
                        let r = (u * u + (v * inv_q) * (v * inv_q)).sqrt().max(1e-9);
                        let mut val = (-b * ((r / component.r_e).powf(inv_n) - 1.0)).exp();
                        if arms {
                            let phi = v.atan2(u);
                            let winding = (r / component.r_e).ln() / tan_pitch;
                            val *= 1.0 + params.arm_amplitude * (2.0 * (phi - winding)).cos();
                        }
                        shape += val;
                    }
                }
                shape *= inv_os * inv_os;
                for band in 0..3 {
                    out[band * size * size + y * size + x] += intensity[band] * shape;
                }
            }
        }
    }

    Ok(Tensor::new(
        vec![3, size, size],
        out.into_iter().map(F::cast_from).collect(),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn disk(n: f64, r_e: f64, flux: f64, amp: f64) -> GalaxyParams {
        GalaxyParams {
            family: MorphFamily::DiskArms,
            components: vec![SersicComponent {
                n,
                r_e,
                flux: [flux, flux, flux],
                axis_ratio: 1.0,
                position_angle: 0.0,
            }],
            arm_amplitude: amp,
            pitch_angle: 0.35,
            separation: 0.0,
            center_offset: (0.0, 0.0),
        }
    }

    #[test]
    fn exponential_disk_flux_is_conserved() {
        let flux = 200.0;
        let params = disk(1.0, 6.0, flux, 0.0);
        let img = render_galaxy::<f64>(&params, 64).unwrap();
        for band in 0..3 {
            let total: f64 = img.data()[band * 4096..(band + 1) * 4096].iter().sum();
            assert_relative_eq!(total, flux, max_relative = 0.05);
        }
        assert!(img.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_arm_amplitude_matches_pure_sersic() {
        let with_arms_off = render_galaxy::<f64>(&disk(1.2, 5.0, 100.0, 0.0), 48).unwrap();
        let mut plain = disk(1.2, 5.0, 100.0, 0.0);
        plain.family = MorphFamily::Spheroid;
        let spheroid = render_galaxy::<f64>(&plain, 48).unwrap();
        assert_eq!(with_arms_off, spheroid);
    }

    #[test]
    fn zero_separation_merger_equals_doubled_single_component() {
        let comp = SersicComponent {
            n: 1.5,
            r_e: 4.0,
            flux: [80.0, 120.0, 150.0],
            axis_ratio: 0.7,
            position_angle: 0.8,
        };
        let merger = GalaxyParams {
            family: MorphFamily::Merger,
            components: vec![comp.clone(), comp.clone()],
            arm_amplitude: 0.0,
            pitch_angle: 0.0,
            separation: 0.0,
            center_offset: (0.2, -0.3),
        };
        let mut doubled_comp = comp;
        doubled_comp.flux = [160.0, 240.0, 300.0];
        let single = GalaxyParams {
            family: MorphFamily::Spheroid,
            components: vec![doubled_comp],
            arm_amplitude: 0.0,
            pitch_angle: 0.0,
            separation: 0.0,
            center_offset: (0.2, -0.3),
        };
        let a = render_galaxy::<f64>(&merger, 48).unwrap();
        let b = render_galaxy::<f64>(&single, 48).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_relative_eq!(x, y, max_relative = 1e-9);
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        let mut p = disk(1.0, 6.0, 100.0, 0.0);
        p.components[0].n = 8.0;
        assert!(render_galaxy::<f64>(&p, 64).is_err());
        let mut p = disk(1.0, 30.0, 100.0, 0.0);
        p.components[0].r_e = 30.0;
        assert!(render_galaxy::<f64>(&p, 64).is_err());
        let p = disk(1.0, 6.0, 100.0, 0.0);
        assert!(render_galaxy::<f64>(&p, 8).is_err());
        let mut p = disk(1.0, 6.0, 100.0, 0.0);
        p.components[0].axis_ratio = 0.0;
        assert!(render_galaxy::<f64>(&p, 64).is_err());
    }
}
