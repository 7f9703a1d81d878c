//! Position recovery: Gaussian spot fitting, pair separation, and 1-D spatial
//! reconstruction of current sweeps by FFT.

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ScanImage;
use crate::lm::{LeastSquares, LevenbergMarquardt};
use crate::sequence::{PulseSequence, SweepResult};
use crate::spin::PhysicalConstants;

/// Minimum amplitude-to-standard-error ratio for a fit to count as a blob.
pub const MIN_AMPLITUDE_SIGNIFICANCE: f64 = 5.0;
const MIN_FIT_PIXELS: usize = 25;

/// Parameter order of [`LocalizationResult::covariance`].
pub const COVARIANCE_ORDER: [&str; 5] = ["amplitude_counts", "center_x_m", "center_y_m", "width_m", "offset_counts"];

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub center_m: [f64; 2],
    pub amplitude: f64,
    /// Gaussian sigma, meters.
    pub width_m: f64,
    pub offset: f64,
    /// Covariance in [`COVARIANCE_ORDER`].
    pub covariance: [[f64; 5]; 5],
    pub sigma_xy_m: [f64; 2],
    pub residual_norm: f64,
    pub iterations: usize,
}

/// JSON form of a [`LocalizationResult`] with units in the key names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub center_x_nm: f64,
    pub center_y_nm: f64,
    pub amplitude_counts: f64,
    pub width_nm: f64,
    pub offset_counts: f64,
    pub sigma_x_nm: f64,
    pub sigma_y_nm: f64,
    pub residual_norm_counts: f64,
    pub iterations: usize,
    pub covariance_order: Vec<String>,
    /// Covariance in counts and nanometers, ordered as `covariance_order`.
    pub covariance: Vec<Vec<f64>>,
}

impl LocalizationResult {
    pub fn record(&self) -> LocalizationRecord {
        let unit = [1.0, 1e9, 1e9, 1e9, 1.0];
        LocalizationRecord {
            center_x_nm: self.center_m[0] * 1e9,
            center_y_nm: self.center_m[1] * 1e9,
            amplitude_counts: self.amplitude,
            width_nm: self.width_m * 1e9,
            offset_counts: self.offset,
            sigma_x_nm: self.sigma_xy_m[0] * 1e9,
            sigma_y_nm: self.sigma_xy_m[1] * 1e9,
            residual_norm_counts: self.residual_norm,
            iterations: self.iterations,
            covariance_order: ["amplitude_counts", "center_x_nm", "center_y_nm", "width_nm", "offset_counts"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            covariance: (0..5)
                .map(|i| (0..5).map(|j| self.covariance[i][j] * unit[i] * unit[j]).collect())
                .collect(),
        }
    }
}

/// Isotropic Gaussian plus offset over pixel-index coordinates.
/// Parameters `[A, x0, y0, w, b]`.
struct GaussianSpot<'a> {
    width: usize,
    counts: &'a [f64],
}

impl GaussianSpot<'_> {
    fn coords(&self, k: usize) -> (f64, f64) {
        ((k % self.width) as f64, (k / self.width) as f64)
    }
}

impl LeastSquares for GaussianSpot<'_> {
    fn residuals(&self, p: &DVector<f64>) -> Option<DVector<f64>> {
        let (a, x0, y0, w, b) = (p[0], p[1], p[2], p[3], p[4]);
        if w == 0.0 {
            return None;
        }
        let inv = 1.0 / (2.0 * w * w);
        Some(DVector::from_iterator(
            self.counts.len(),
            self.counts.iter().enumerate().map(|(k, c)| {
                let (x, y) = self.coords(k);
                let q = (x - x0).powi(2) + (y - y0).powi(2);
                a * (-q * inv).exp() + b - c
            }),
        ))
    }

    fn jacobian(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let (a, x0, y0, w) = (p[0], p[1], p[2], p[3]);
        let w2 = w * w;
        let mut jac = DMatrix::zeros(self.counts.len(), 5);
        for k in 0..self.counts.len() {
            let (x, y) = self.coords(k);
            let (dx, dy) = (x - x0, y - y0);
            let q = dx * dx + dy * dy;
            let e = (-q / (2.0 * w2)).exp();
            jac[(k, 0)] = e;
            jac[(k, 1)] = a * e * dx / w2;
            jac[(k, 2)] = a * e * dy / w2;
            jac[(k, 3)] = a * e * q / (w2 * w);
            jac[(k, 4)] = 1.0;
        }
        jac
    }
}

/// Initial `[A, x0, y0, w, b]` from the border level, intensity centroid and
/// second moments.
fn initial_guess(image: &ScanImage) -> Result<DVector<f64>> {
    let (w, h) = (image.geometry.width_px, image.geometry.height_px);
    let border: Vec<f64> = (0..image.counts.len())
        .filter(|k| {
            let (x, y) = (k % w, k / w);
            x == 0 || y == 0 || x + 1 == w || y + 1 == h
        })
        .map(|k| image.counts[k])
        .collect();
    let background = border.iter().sum::<f64>() / border.len() as f64;

    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (k, c) in image.counts.iter().enumerate() {
        let weight = (c - background).max(0.0);
        sw += weight;
        sx += weight * (k % w) as f64;
        sy += weight * (k / w) as f64;
    }
    if !(sw > 0.0) {
        return Err(Error::DegenerateBlob("no signal above the border level".into()));
    }
    let (cx, cy) = (sx / sw, sy / sw);
    let mut m2 = 0.0;
    for (k, c) in image.counts.iter().enumerate() {
        let weight = (c - background).max(0.0);
        m2 += weight * (((k % w) as f64 - cx).powi(2) + ((k / w) as f64 - cy).powi(2));
    }
    let spread = (m2 / sw / 2.0).sqrt().clamp(1.0, 0.5 * w.max(h) as f64);
    let peak = image.counts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(DVector::from_vec(vec![peak - background, cx, cy, spread, background]))
}

/// Levenberg–Marquardt fit of `A·exp(−r²/2w²) + b` to a single-spot image.
///
/// Returns a degenerate-blob error when the optimum has non-positive or
/// insignificant amplitude, or a center or width incompatible with the grid.
pub fn fit_gaussian2d(image: &ScanImage) -> Result<LocalizationResult> {
    image.geometry.validate()?;
    if image.counts.len() < MIN_FIT_PIXELS || image.counts.len() != image.geometry.len() {
        return Err(Error::InvalidArgument(format!(
            "fit needs a consistent image of at least {MIN_FIT_PIXELS} pixels"
        )));
    }
    if image.counts.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("image contains non-finite counts".into()));
    }
    let start = initial_guess(image)?;
    let problem = GaussianSpot {
        width: image.geometry.width_px,
        counts: &image.counts,
    };
    let out = LevenbergMarquardt::default().minimize(&problem, start)?;

    let p = &out.params;
    let (amplitude, x0, y0, width_px, offset) = (p[0], p[1], p[2], p[3].abs(), p[4]);
    if !(amplitude > 0.0) {
        return Err(Error::DegenerateBlob(format!("fitted amplitude {amplitude:.3e} is not positive")));
    }
    let (w, h) = (image.geometry.width_px as f64, image.geometry.height_px as f64);
    if !(width_px >= 0.5 && width_px <= w.max(h)) {
        return Err(Error::DegenerateBlob(format!("fitted width {width_px:.3} px is implausible")));
    }
    if !(x0 >= -0.5 && x0 <= w - 0.5 && y0 >= -0.5 && y0 <= h - 0.5) {
        return Err(Error::DegenerateBlob(format!("fitted center ({x0:.2}, {y0:.2}) px lies off the grid")));
    }
    let cov_px = out
        .covariance()
        .ok_or_else(|| Error::Fit("normal matrix is singular at the optimum".into()))?;
    let amp_se = cov_px[(0, 0)].max(0.0).sqrt();
    if amplitude < MIN_AMPLITUDE_SIGNIFICANCE * amp_se {
        return Err(Error::DegenerateBlob(format!(
            "amplitude {amplitude:.3e} is within {MIN_AMPLITUDE_SIGNIFICANCE} standard errors of zero"
        )));
    }

    let g = &image.geometry;
    let px = g.pixel_size_m;
    let scale = [1.0, px, px, px, 1.0];
    let mut covariance = [[0.0; 5]; 5];
    for (i, row) in covariance.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = cov_px[(i, j)] * scale[i] * scale[j];
        }
    }
    Ok(LocalizationResult {
        center_m: [g.origin_m[0] + (x0 + 0.5) * px, g.origin_m[1] + (y0 + 0.5) * px],
        amplitude,
        width_m: width_px * px,
        offset,
        sigma_xy_m: [covariance[1][1].max(0.0).sqrt(), covariance[2][2].max(0.0).sqrt()],
        covariance,
        residual_norm: out.residual_norm(),
        iterations: out.iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub distance_m: f64,
    pub uncertainty_m: f64,
}

/// Distance between two fitted centers, with first-order uncertainty along
/// the separation direction from both per-axis variances.
pub fn pair_separation(a: &LocalizationResult, b: &LocalizationResult) -> Separation {
    let dx = b.center_m[0] - a.center_m[0];
    let dy = b.center_m[1] - a.center_m[1];
    let distance = dx.hypot(dy);
    let (ux2, uy2) = if distance > 0.0 {
        ((dx / distance).powi(2), (dy / distance).powi(2))
    } else {
        (0.5, 0.5)
    };
    let var_x = a.sigma_xy_m[0].powi(2) + b.sigma_xy_m[0].powi(2);
    let var_y = a.sigma_xy_m[1].powi(2) + b.sigma_xy_m[1].powi(2);
    Separation {
        distance_m: distance,
        uncertainty_m: (ux2 * var_x + uy2 * var_y).sqrt(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralPeak {
    pub position_m: f64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialSpectrum {
    pub positions_m: Vec<f64>,
    pub magnitudes: Vec<f64>,
    /// One unpadded frequency bin expressed as a distance.
    pub resolution_m: f64,
    /// Strongest first.
    pub peaks: Vec<SpectralPeak>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FftOptions {
    pub zero_padding: usize,
    /// Apply a Hann window before transforming.
    pub hann_window: bool,
    /// Peaks below this fraction of the strongest bin are dropped.
    pub peak_threshold: f64,
}

impl Default for FftOptions {
    fn default() -> Self {
        Self {
            zero_padding: 4,
            hann_window: true,
            peak_threshold: 0.2,
        }
    }
}

pub fn fft_reconstruct(
    sweep: &SweepResult,
    seq: &PulseSequence,
    constants: &PhysicalConstants,
) -> Result<SpatialSpectrum> {
    fft_reconstruct_with(sweep, seq, constants, &FftOptions::default())
}

/// Magnitude spectrum of the mean-subtracted sweep, with the current-frequency
/// axis mapped to gradient coordinate via `r = f_I / (γ g τ κ)`.
pub fn fft_reconstruct_with(
    sweep: &SweepResult,
    seq: &PulseSequence,
    constants: &PhysicalConstants,
    options: &FftOptions,
) -> Result<SpatialSpectrum> {
    let n = sweep.len();
    if n < 16 || sweep.signals.len() != n {
        return Err(Error::Sampling(format!("FFT reconstruction needs at least 16 points, got {n}")));
    }
    let step = (sweep.currents_ma[n - 1] - sweep.currents_ma[0]) / (n - 1) as f64;
    if !(step > 0.0) {
        return Err(Error::Sampling("currents must increase".into()));
    }
    for pair in sweep.currents_ma.windows(2) {
        if ((pair[1] - pair[0]) - step).abs() > 1e-6 * step {
            return Err(Error::Sampling(format!(
                "current spacing {} deviates from the mean step {step}",
                pair[1] - pair[0]
            )));
        }
    }
    let cycles = seq.cycles_per_ma_per_m(constants)?.abs();
    if cycles == 0.0 {
        return Err(Error::NoEncoding);
    }

    let padded = n * options.zero_padding.max(1);
    let mean = sweep.signals.iter().sum::<f64>() / n as f64;
    let mut buffer: Vec<Complex<f64>> = sweep
        .signals
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let w = if options.hann_window {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos()
            } else {
                1.0
            };
            Complex::new((s - mean) * w, 0.0)
        })
        .collect();
    buffer.resize(padded, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(padded).process(&mut buffer);

    let bins = padded / 2 + 1;
    let magnitudes: Vec<f64> = buffer[..bins].iter().map(|c| c.norm()).collect();
    let bin_width = 1.0 / (padded as f64 * step) / cycles;
    let positions_m: Vec<f64> = (0..bins).map(|k| k as f64 * bin_width).collect();

    let strongest = magnitudes[1..].iter().cloned().fold(0.0, f64::max);
    let mut peaks = Vec::new();
    for k in 1..bins - 1 {
        let (a, b, c) = (magnitudes[k - 1], magnitudes[k], magnitudes[k + 1]);
        if b > a && b >= c && b >= options.peak_threshold * strongest && b > 0.0 {
            let denom = a - 2.0 * b + c;
            let delta = if denom != 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
            peaks.push(SpectralPeak {
                position_m: (k as f64 + delta) * bin_width,
                magnitude: b - 0.25 * (a - c) * delta,
            });
        }
    }
    peaks.sort_by(|x, y| y.magnitude.total_cmp(&x.magnitude));

    Ok(SpatialSpectrum {
        positions_m,
        magnitudes,
        resolution_m: 1.0 / (cycles * n as f64 * step),
        peaks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GradientWaveform;
    use crate::imaging::{MapLabel, ScanGeometry};
    use crate::sequence::run_current_sweep;
    use crate::spin::NvCenter;

    fn gaussian_image(a: f64, x0: f64, y0: f64, w: f64, b: f64) -> ScanImage {
        let g = ScanGeometry::default();
        let counts = (0..g.len())
            .map(|k| {
                let (x, y) = ((k % 50) as f64, (k / 50) as f64);
                a * (-((x - x0).powi(2) + (y - y0).powi(2)) / (2.0 * w * w)).exp() + b
            })
            .collect();
        ScanImage::new(g, counts, MapLabel::Difference { isolates: Some(0) }).unwrap()
    }

    #[test]
    fn noiseless_gaussian_recovered() {
        let img = gaussian_image(250.0, 21.3, 27.8, 7.5, 12.0);
        let fit = fit_gaussian2d(&img).unwrap();
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        assert!(rel(fit.amplitude, 250.0) < 1e-6);
        assert!(rel(fit.center_m[0], (21.3 + 0.5) * 20e-9) < 1e-6);
        assert!(rel(fit.center_m[1], (27.8 + 0.5) * 20e-9) < 1e-6);
        assert!(rel(fit.width_m, 7.5 * 20e-9) < 1e-6);
        assert!(rel(fit.offset, 12.0) < 1e-6);
    }

    #[test]
    fn covariance_is_symmetric() {
        let mut img = gaussian_image(100.0, 25.0, 24.0, 8.0, 3.0);
        // deterministic ripple standing in for noise
        for (k, c) in img.counts.iter_mut().enumerate() {
            *c += ((k * 7919) % 13) as f64 * 0.1 - 0.6;
        }
        let fit = fit_gaussian2d(&img).unwrap();
        for i in 0..5 {
            assert!(fit.covariance[i][i] >= 0.0);
            for j in 0..5 {
                assert_eq!(fit.covariance[i][j], fit.covariance[j][i]);
            }
        }
        assert!(fit.sigma_xy_m.iter().all(|s| *s > 0.0));
    }

    #[test]
    fn negative_blob_is_degenerate() {
        let img = gaussian_image(-80.0, 25.0, 25.0, 6.0, 200.0);
        assert!(fit_gaussian2d(&img).is_err());
    }

    #[test]
    fn separation_examples() {
        let base = fit_gaussian2d(&gaussian_image(100.0, 25.0, 25.0, 8.0, 0.0)).unwrap();
        let a = LocalizationResult { center_m: [0.0, 0.0], sigma_xy_m: [1e-9, 1e-9], ..base.clone() };
        let b = LocalizationResult { center_m: [266e-9, 0.0], ..a.clone() };
        let s = pair_separation(&a, &b);
        assert!((s.distance_m - 266e-9).abs() < 1e-18);
        assert!((s.uncertainty_m - 2f64.sqrt() * 1e-9).abs() < 1e-20);

        let same = pair_separation(&a, &a);
        assert_eq!(same.distance_m, 0.0);
        assert!((same.uncertainty_m - 2f64.sqrt() * 1e-9).abs() < 1e-20);

        let rot = |r: &LocalizationResult| LocalizationResult {
            center_m: [-r.center_m[1], r.center_m[0]],
            ..r.clone()
        };
        let b2 = LocalizationResult { center_m: [150e-9, -40e-9], ..a.clone() };
        let d = pair_separation(&a, &b2).distance_m;
        assert!((pair_separation(&rot(&a), &rot(&b2)).distance_m - d).abs() < 1e-20);
    }

    #[test]
    fn fft_rejects_bad_sampling() {
        let seq = PulseSequence::new(GradientWaveform::rectangular(20e-6), 12.0).unwrap();
        let c = [NvCenter::on_axis(2e-6)];
        let k = PhysicalConstants::default();
        let short = run_current_sweep(&seq, &c, &[0.0, 0.1, 0.2], &k).unwrap();
        assert!(matches!(fft_reconstruct(&short, &seq, &k), Err(Error::Sampling(_))));
        let mut currents: Vec<f64> = (0..32).map(|i| i as f64 * 0.01).collect();
        currents[10] += 0.003;
        let uneven = run_current_sweep(&seq, &c, &currents, &k).unwrap();
        assert!(matches!(fft_reconstruct(&uneven, &seq, &k), Err(Error::Sampling(_))));
    }

    #[test]
    fn single_center_single_dominant_peak() {
        let seq = PulseSequence::new(GradientWaveform::rectangular(20e-6), 12.0).unwrap();
        let c = [NvCenter::on_axis(2.3e-6)];
        let k = PhysicalConstants::default();
        let currents: Vec<f64> = (0..128).map(|i| i as f64 * 0.5 / 128.0).collect();
        let sweep = run_current_sweep(&seq, &c, &currents, &k).unwrap();
        let spec = fft_reconstruct(&sweep, &seq, &k).unwrap();
        assert_eq!(spec.peaks.len(), 1);
        assert!((spec.peaks[0].position_m - 2.3e-6).abs() < spec.resolution_m);
        let unpadded = fft_reconstruct_with(&sweep, &seq, &k, &FftOptions { zero_padding: 1, ..Default::default() }).unwrap();
        assert_eq!(unpadded.resolution_m, spec.resolution_m);
    }
}
