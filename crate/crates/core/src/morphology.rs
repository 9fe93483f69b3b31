//! Gini / M20 morphology statistics and the bulge-statistic classifier
//! separating spiral, elliptical, and merging galaxies.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Morphology classes, in the order used for network outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Spiral,
    Elliptical,
    Merger,
}

pub const LABELS: [Label; 3] = [Label::Spiral, Label::Elliptical, Label::Merger];

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Spiral => 0,
            Label::Elliptical => 1,
            Label::Merger => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        LABELS
            .get(i)
            .copied()
            .ok_or_else(|| Error::Config(format!("label index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Spiral => "spiral",
            Label::Elliptical => "elliptical",
            Label::Merger => "merger",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The G-M20 plane boundaries. Mergers sit above the solid line
/// G = -0.14 M20 + 0.33; among non-mergers, ellipticals sit above the
/// dashed line G = (0.693 M20 + 3.96) / 4.95.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryConstants {
    pub merger_slope: f64,
    pub merger_intercept: f64,
    pub intersection_g: f64,
    pub intersection_m20: f64,
}

pub const BOUNDARIES: BoundaryConstants = BoundaryConstants {
    merger_slope: -0.14,
    merger_intercept: 0.33,
    intersection_g: 0.565,
    intersection_m20: -1.679,
};

impl BoundaryConstants {
    pub fn merger_line(&self, m20: f64) -> f64 {
        self.merger_slope * m20 + self.merger_intercept
    }

    pub fn elliptical_spiral_line(&self, m20: f64) -> f64 {
        (0.693 * m20 + 3.96) / 4.95
    }
}

/// Result of measuring one image.
#[derive(Clone, Copy, Debug)]
pub struct MorphologyMeasures {
    pub gini: f64,
    pub m20: f64,
    pub segment_pixels: usize,
}

/// Sum of the three bands per pixel, the working flux map for all statistics.
fn band_sum<F: Scalar>(image: &Tensor<F>) -> Result<(Vec<f64>, usize, usize)> {
    let &[c, h, w] = image.dims() else {
        return Err(Error::Shape(format!(
            "morphology expects (C,H,W), got {:?}",
            image.dims()
        )));
    };
    let mut flux = vec![0.0f64; h * w];
    for ci in 0..c {
        for i in 0..h * w {
            flux[i] += image.data()[ci * h * w + i].as_f64();
        }
    }
    Ok((flux, h, w))
}

/// Boolean source mask: pixels whose band-summed value exceeds
/// `threshold_fraction` times the band-summed maximum.
pub fn make_segmap<F: Scalar>(image: &Tensor<F>, threshold_fraction: f64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&threshold_fraction) {
        return Err(Error::Config(format!(
            "threshold_fraction must be in [0,1), got {threshold_fraction}"
        )));
    }
    let (flux, _, _) = band_sum(image)?;
    let max = flux.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cut = threshold_fraction * max;
    let mask: Vec<bool> = flux.iter().map(|&v| v > cut).collect();
    if mask.iter().all(|&m| !m) {
        return Err(Error::Precondition("segmentation selected no pixels".into()));
    }
    Ok(mask)
}

/// Gini coefficient in the Lotz form over sorted absolute segment fluxes:
/// G = 1/(mean n (n-1)) * sum_i (2i - n - 1) X_i.
pub fn gini<F: Scalar>(image: &Tensor<F>, segmap: &[bool]) -> Result<f64> {
    let (flux, h, w) = band_sum(image)?;
    if segmap.len() != h * w {
        return Err(Error::Shape(format!(
            "segmap has {} entries for {}x{} image",
            segmap.len(),
            h,
            w
        )));
    }
    let mut values: Vec<f64> = flux
        .iter()
        .zip(segmap)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v.abs())
        .collect();
    let n = values.len();
    if n < 2 {
        return Err(Error::Precondition(format!(
            "gini needs >= 2 segment pixels, got {n}"
        )));
    }
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(Error::Precondition("gini undefined for all-zero segment".into()));
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite flux"));
    let mean = total / n as f64;
    let mut acc = 0.0;
    for (i, &v) in values.iter().enumerate() {
        // 1-based rank in ascending order.
        acc += (2.0 * (i + 1) as f64 - n as f64 - 1.0) * v;
    }
    Ok(acc / (mean * n as f64 * (n as f64 - 1.0)))
}

/// M20: log10 of the second-order moment of the brightest pixels (descending
/// flux until cumulative flux first reaches 20% of the total) over the total
/// second-order moment. The moment center is the segment pixel coordinate
/// minimizing the total moment.
pub fn m20<F: Scalar>(image: &Tensor<F>, segmap: &[bool]) -> Result<f64> {
    let (flux, h, w) = band_sum(image)?;
    if segmap.len() != h * w {
        return Err(Error::Shape(format!(
            "segmap has {} entries for {}x{} image",
            segmap.len(),
            h,
            w
        )));
    }
    let pixels: Vec<(usize, usize, f64)> = (0..h * w)
        .filter(|&i| segmap[i])
        .map(|i| (i / w, i % w, flux[i]))
        .collect();
    let positive = pixels.iter().filter(|&&(_, _, f)| f > 0.0).count();
    if positive < 2 {
        return Err(Error::Precondition(format!(
            "m20 needs >= 2 segment pixels with positive flux, got {positive}"
        )));
    }

    let moment_about = |cy: f64, cx: f64| -> f64 {
        pixels
            .iter()
            .map(|&(y, x, f)| {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                f * (dy * dy + dx * dx)
            })
            .sum()
    };
    let mut best = f64::INFINITY;
    let mut center = (0.0, 0.0);
    for &(y, x, _) in &pixels {
        let m = moment_about(y as f64, x as f64);
        if m < best {
            best = m;
            center = (y as f64, x as f64);
        }
    }
    if best <= 0.0 {
        return Err(Error::Precondition(
            "m20 degenerate: total second moment is zero".into(),
        ));
    }

    let mut by_flux: Vec<&(usize, usize, f64)> = pixels.iter().collect();
    // Descending flux; ties broken by pixel order for determinism.
    by_flux.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .expect("finite flux")
            .then((a.0, a.1).cmp(&(b.0, b.1)))
    });
    let total_flux: f64 = pixels.iter().map(|p| p.2).sum();
    let target = 0.2 * total_flux;
    let mut cum = 0.0;
    let mut bright_moment = 0.0;
    for &&(y, x, f) in &by_flux {
        cum += f;
        let (dy, dx) = (y as f64 - center.0, x as f64 - center.1);
        bright_moment += f * (dy * dy + dx * dx);
        if cum >= target {
            break;
        }
    }
    if bright_moment <= 0.0 {
        // Happens when a single center pixel alone holds 20% of the flux.
        return Err(Error::Precondition(
            "m20 degenerate: brightest-20% moment is zero".into(),
        ));
    }
    Ok((bright_moment / best).log10())
}

/// Strict-inequality bulge-statistic classifier: merger above the merger
/// line; otherwise elliptical above the dashed line, spiral below or on it.
pub fn classify_gm20(g: f64, m20: f64) -> Label {
    if g > BOUNDARIES.merger_line(m20) {
        Label::Merger
    } else if g > BOUNDARIES.elliptical_spiral_line(m20) {
        Label::Elliptical
    } else {
        Label::Spiral
    }
}

/// Segmentation, both statistics, and the class label in one call.
pub fn measure<F: Scalar>(image: &Tensor<F>, threshold_fraction: f64) -> Result<(MorphologyMeasures, Label)> {
    let segmap = make_segmap(image, threshold_fraction)?;
    let g = gini(image, &segmap)?;
    let m = m20(image, &segmap)?;
    let measures = MorphologyMeasures {
        gini: g,
        m20: m,
        segment_pixels: segmap.iter().filter(|&&b| b).count(),
    };
    Ok((measures, classify_gm20(g, m)))
}

/// Default segmentation threshold on noiseless renders.
pub const DEFAULT_SEG_THRESHOLD: f64 = 0.05;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn image_1band(h: usize, w: usize, vals: Vec<f64>) -> Tensor<f64> {
        // Three bands with the flux split evenly; band-sum recovers vals.
        let mut data = Vec::with_capacity(3 * h * w);
        for _ in 0..3 {
            data.extend(vals.iter().map(|v| v / 3.0));
        }
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn segmap_threshold_zero_selects_all_positive_pixels() {
        let img = image_1band(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let mask = make_segmap(&img, 0.0).unwrap();
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn segmap_high_threshold_selects_only_peak() {
        let img = image_1band(2, 2, vec![0.1, 0.2, 0.3, 10.0]);
        let mask = make_segmap(&img, 0.999).unwrap();
        assert_eq!(mask, vec![false, false, false, true]);
    }

    #[test]
    fn segmap_known_4x4_case() {
        let mut vals = vec![0.1; 16];
        vals[5] = 1.0;
        vals[10] = 0.8;
        let img = image_1band(4, 4, vals);
        let mask = make_segmap(&img, 0.5).unwrap();
        let selected: Vec<usize> = (0..16).filter(|&i| mask[i]).collect();
        assert_eq!(selected, vec![5, 10]);
    }

    #[test]
    fn segmap_rejects_invalid_threshold_and_empty_mask() {
        let img = image_1band(2, 2, vec![1.0; 4]);
        assert!(make_segmap(&img, 1.0).is_err());
        assert!(make_segmap(&img, -0.1).is_err());
        let zero = image_1band(2, 2, vec![0.0; 4]);
        assert!(make_segmap(&zero, 0.5).is_err());
    }

    #[test]
    fn gini_uniform_is_zero() {
        let img = image_1band(3, 3, vec![2.5; 9]);
        let seg = vec![true; 9];
        assert_abs_diff_eq!(gini(&img, &seg).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gini_single_bright_pixel_is_one() {
        let mut vals = vec![0.0; 9];
        vals[4] = 7.0;
        let img = image_1band(3, 3, vals);
        let seg = vec![true; 9];
        assert_abs_diff_eq!(gini(&img, &seg).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gini_known_values() {
        let img = image_1band(2, 2, vec![1.0, 1.0, 1.0, 5.0]);
        let seg = vec![true; 4];
        assert_abs_diff_eq!(gini(&img, &seg).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn gini_error_paths() {
        let img = image_1band(2, 2, vec![0.0, 0.0, 0.0, 1.0]);
        let seg = vec![false, false, false, true];
        assert!(gini(&img, &seg).is_err());
        let allzero = image_1band(2, 2, vec![0.0; 4]);
        assert!(gini(&allzero, &[true, true, true, true]).is_err());
    }

    #[test]
    fn m20_two_equal_pixels_symmetric_about_center() {
        // Pixels at (1,1) and (1,3); the minimizing center is the midpoint
        // (1,2), so one pixel carries >= 20% of flux and half the moment.
        let mut vals = vec![0.0; 25];
        vals[1 * 5 + 1] = 3.0;
        vals[1 * 5 + 3] = 3.0;
        let img = image_1band(5, 5, vals);
        let seg = vec![true; 25];
        assert_abs_diff_eq!(m20(&img, &seg).unwrap(), 0.5f64.log10(), epsilon = 1e-9);
    }

    #[test]
    fn m20_four_corner_pixels() {
        let mut vals = vec![0.0; 25];
        for (y, x) in [(1, 1), (1, 3), (3, 1), (3, 3)] {
            vals[y * 5 + x] = 2.0;
        }
        let img = image_1band(5, 5, vals);
        let seg = vec![true; 25];
        assert_abs_diff_eq!(m20(&img, &seg).unwrap(), 0.25f64.log10(), epsilon = 1e-9);
    }

    #[test]
    fn m20_single_point_source_is_degenerate() {
        let mut vals = vec![0.0; 9];
        vals[4] = 1.0;
        let img = image_1band(3, 3, vals);
        assert!(m20(&img, &vec![true; 9]).is_err());
    }

    #[test]
    fn statistics_are_scale_invariant() {
        let vals: Vec<f64> = (0..36).map(|i| ((i * 7 + 3) % 11) as f64 + 0.5).collect();
        let img = image_1band(6, 6, vals.clone());
        let scaled = image_1band(6, 6, vals.iter().map(|v| v * 137.0).collect());
        let seg = make_segmap(&img, 0.05).unwrap();
        assert_abs_diff_eq!(
            gini(&img, &seg).unwrap(),
            gini(&scaled, &seg).unwrap(),
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(
            m20(&img, &seg).unwrap(),
            m20(&scaled, &seg).unwrap(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn m20_center_dominated_blob_is_degenerate() {
        let mut vals = vec![0.0; 25];
        vals[2 * 5 + 2] = 10.0;
        for (y, x) in [(1, 2), (3, 2), (2, 1), (2, 3)] {
            vals[y * 5 + x] = 0.5;
        }
        let img = image_1band(5, 5, vals);
        assert!(m20(&img, &vec![true; 25]).is_err());
    }

    #[test]
    fn statistics_are_translation_covariant() {
        // A diamond blob measured at two positions in the frame.
        let blob = [
            (0usize, 1usize, 5.0),
            (1, 0, 4.5),
            (1, 2, 4.0),
            (2, 1, 3.5),
            (1, 1, 1.0),
        ];
        let place = |oy: usize, ox: usize| -> (Tensor<f64>, Vec<bool>) {
            let mut vals = vec![0.0; 64];
            let mut seg = vec![false; 64];
            for &(y, x, f) in &blob {
                vals[(y + oy) * 8 + (x + ox)] = f;
                seg[(y + oy) * 8 + (x + ox)] = true;
            }
            (image_1band(8, 8, vals), seg)
        };
        let (img1, seg1) = place(1, 1);
        let (img2, seg2) = place(4, 3);
        assert_abs_diff_eq!(
            gini(&img1, &seg1).unwrap(),
            gini(&img2, &seg2).unwrap(),
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(
            m20(&img1, &seg1).unwrap(),
            m20(&img2, &seg2).unwrap(),
            epsilon = 1e-6
        );
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify_gm20(0.6, -1.0), Label::Merger);
        assert_eq!(classify_gm20(0.6, -2.5), Label::Elliptical);
        assert_eq!(classify_gm20(0.45, -1.5), Label::Spiral);
    }

    #[test]
    fn boundary_lines_are_algebraically_consistent() {
        assert_abs_diff_eq!(0.693 / 4.95, 0.14, epsilon = 1e-12);
        assert_abs_diff_eq!(3.96 / 4.95, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn published_intersection_lies_on_both_lines() {
        let g = BOUNDARIES.intersection_g;
        let m = BOUNDARIES.intersection_m20;
        assert!((BOUNDARIES.merger_line(m) - g).abs() < 1e-3);
        assert!((BOUNDARIES.elliptical_spiral_line(m) - g).abs() < 1e-3);
    }

    #[test]
    fn boundary_tie_goes_to_the_spiral_side() {
        // A point exactly on both computed lines classifies as spiral under
        // the strict-inequality rule.
        let m = BOUNDARIES.intersection_m20;
        let g_on_dashed = BOUNDARIES.elliptical_spiral_line(m);
        assert!(g_on_dashed < BOUNDARIES.merger_line(m));
        assert_eq!(classify_gm20(g_on_dashed, m), Label::Spiral);
    }
}
