#![allow(dead_code)]

use nvphase::imaging::map_seed;
use nvphase::{
    fit_gaussian2d, subtract_maps, synthesize_scan, GradientWaveform, JointState, LocalizationResult,
    NvCenter, PsfModel, Sampling, ScanGeometry, Segment, WaveformShape,
};
use rand::Rng;

pub const GAMMA_E: f64 = 28.024e9;
pub const PAIR_SEPARATION_M: f64 = 266.0e-9;
pub const ISOLATED_BUDGET: f64 = 3.4e4;
/// Gradient coordinates of the switching pair, 186 nm apart.
pub const SWITCH_PAIR_M: [f64; 2] = [2.635e-6, 2.821e-6];

pub struct PairScene {
    pub centers: [NvCenter; 2],
    pub psf: PsfModel,
    pub geometry: ScanGeometry,
    pub background: f64,
}

/// Two emitters 266 nm apart, tilted off the pixel axes, straddling the
/// center of the default 1 × 1 µm² field.
pub fn pair_scene(contrast: f64, budget: f64, background: f64) -> PairScene {
    let geometry = ScanGeometry::default();
    let mid = geometry.center_m();
    let angle: f64 = 0.35;
    let half = [0.5 * PAIR_SEPARATION_M * angle.cos(), 0.5 * PAIR_SEPARATION_M * angle.sin()];
    let make = |sign: f64, r: f64| {
        NvCenter::new([mid[0] + sign * half[0], mid[1] + sign * half[1]], r, 1.0, contrast).unwrap()
    };
    let mut psf = PsfModel::default();
    psf.peak_rate = psf.peak_rate_for_budget(budget, &geometry);
    PairScene {
        centers: [make(-1.0, SWITCH_PAIR_M[0]), make(1.0, SWITCH_PAIR_M[1])],
        psf,
        geometry,
        background,
    }
}

/// Measured 00, 01 and 10 maps from one seed family, subtracted and fitted.
/// Returns the fits of emitter 1 and emitter 2.
pub fn localize_pair(scene: &PairScene, seed: u64) -> nvphase::Result<[LocalizationResult; 2]> {
    let scan = |state| {
        synthesize_scan(
            &scene.centers,
            &scene.psf,
            &scene.geometry,
            state,
            scene.background,
            Sampling::Poisson { seed: map_seed(seed, state) },
        )
    };
    let both = scan(JointState::S00)?;
    let first_off = scan(JointState::S10)?;
    let second_off = scan(JointState::S01)?;
    let first = fit_gaussian2d(&subtract_maps(&both, &first_off)?)?;
    let second = fit_gaussian2d(&subtract_maps(&both, &second_off)?)?;
    Ok([first, second])
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Random piecewise-constant waveform whose breakpoints fall on multiples of
/// `1/grid` of τ.
pub fn random_piecewise<R: Rng>(rng: &mut R, grid: usize) -> GradientWaveform {
    let pieces = rng.random_range(1..=6usize);
    let mut ends: Vec<usize> = (0..pieces - 1).map(|_| rng.random_range(1..grid)).collect();
    ends.sort_unstable();
    ends.dedup();
    ends.push(grid);
    let segments = ends
        .into_iter()
        .map(|e| Segment {
            end: e as f64 / grid as f64,
            level: rng.random_range(-1.0..=1.0),
        })
        .collect();
    let tau = rng.random_range(1e-6..200e-6);
    GradientWaveform::new(WaveformShape::Piecewise(segments), tau, rng.random_bool(0.5)).unwrap()
}

/// Echo-signed integral of a piecewise waveform by summing level × duration
/// over each segment clipped to the two halves.
pub fn piecewise_kappa(waveform: &GradientWaveform) -> f64 {
    let WaveformShape::Piecewise(segments) = &waveform.shape else {
        panic!("expected a piecewise waveform");
    };
    let mut start = 0.0;
    let mut total = 0.0;
    for s in segments {
        for (lo, hi, sign) in [(0.0, 0.5, 1.0), (0.5, 1.0, if waveform.echo { -1.0 } else { 1.0 })] {
            let overlap = (s.end.min(hi) - f64::max(start, lo)).max(0.0);
            total += sign * s.level * overlap;
        }
        start = s.end;
    }
    total
}
