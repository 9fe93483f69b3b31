//! Scratch calibration pilot (not shipped).
use robustmorph_core::morphology::{self, Label, BOUNDARIES};
use robustmorph_core::synth::preprocess::{preprocess, PreprocessConfig};
use robustmorph_core::synth::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample(target: Label, rng: &mut ChaCha8Rng) -> GalaxyParams {
    let flux = |rng: &mut ChaCha8Rng| -> [f64;3] {
        let r: f64 = 250.0 * rng.random_range(0.8..1.3);
        [r * rng.random_range(0.55..0.8), r, r * rng.random_range(1.0..1.3)]
    };
    match target {
        Label::Spiral => GalaxyParams {
            family: MorphFamily::DiskArms,
            components: vec![SersicComponent { n: rng.random_range(0.5..0.8), r_e: rng.random_range(6.0..11.0), flux: flux(rng), axis_ratio: rng.random_range(0.5..0.9), position_angle: rng.random_range(0.0..3.14) }],
            arm_amplitude: rng.random_range(0.1..0.3), pitch_angle: rng.random_range(0.25..0.45), separation: 0.0,
            center_offset: (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
        },
        Label::Elliptical => GalaxyParams {
            family: MorphFamily::Spheroid,
            components: vec![SersicComponent { n: rng.random_range(4.5..6.0), r_e: rng.random_range(8.0..13.0), flux: flux(rng), axis_ratio: rng.random_range(0.7..0.95), position_angle: rng.random_range(0.0..3.14) }],
            arm_amplitude: 0.0, pitch_angle: 0.0, separation: 0.0,
            center_offset: (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
        },
        Label::Merger => {
            let comp = |rng: &mut ChaCha8Rng| SersicComponent { n: rng.random_range(1.0..3.0), r_e: rng.random_range(2.5..4.5), flux: { let r: f64 = 150.0*rng.random_range(0.6..1.3); [r*0.7, r, r*1.15] }, axis_ratio: rng.random_range(0.6..0.95), position_angle: rng.random_range(0.0..3.14) };
            GalaxyParams { family: MorphFamily::Merger, components: vec![comp(rng), comp(rng)], arm_amplitude: 0.0, pitch_angle: 0.0, separation: rng.random_range(7.0..14.0), center_offset: (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)) }
        }
    }
}

fn main() {
    let pp = PreprocessConfig::default();
    let thr = 0.0225;
    let floor = 0.015;
    for &label in &[Label::Spiral, Label::Elliptical, Label::Merger] {
        let mut rng = ChaCha8Rng::seed_from_u64(17 + label.index() as u64);
        let (mut hit, total) = (0, 300);
        for _ in 0..total {
            let p = sample(label, &mut rng);
            let raw = match render_galaxy::<f32>(&p, 64) { Ok(r) => r, Err(_) => continue };
            let clean = preprocess(&raw, &pp).unwrap();
            if let Ok((m, l)) = morphology::measure(&clean, thr) {
                if !m.gini.is_finite() || !m.m20.is_finite() { continue; }
                let d_merger = m.gini - BOUNDARIES.merger_line(m.m20);
                let d_dashed = m.gini - BOUNDARIES.elliptical_spiral_line(m.m20);
                let margin = match label {
                    Label::Merger => d_merger,
                    Label::Elliptical => (-d_merger).min(d_dashed),
                    Label::Spiral => (-d_merger).min(-d_dashed),
                };
                if l == label && margin >= floor { hit += 1; }
            }
        }
        println!("{:10}: accept-with-margin {hit}/{total} ({:.0}%)", label.name(), 100.0*hit as f64/total as f64);
    }
}
