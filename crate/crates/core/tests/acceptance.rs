//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::f64::consts::{PI, TAU};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use nvphase::{
    fft_reconstruct, find_switch_currents, fit_calibration, gradient_at, joint_state, min_resolution,
    pair_separation, propagate_oracle, readout_state, run_current_sweep, GradientWaveform, JointState,
    NvCenter, OracleSettings, PhysicalConstants, PulseSequence, WireCalibration,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, u64);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within_budget(outcome: Outcome, elapsed: Duration, limit: Duration) -> Outcome {
    let timing = format!("{:.2} s of {:.0} s", elapsed.as_secs_f64(), limit.as_secs_f64());
    match outcome {
        Ok(d) if elapsed < limit => Ok(format!("{d}; {timing}")),
        Ok(d) => Err(format!("{d}; too slow: {timing}")),
        Err(d) => Err(format!("{d}; {timing}")),
    }
}

fn oracle_equivalence() -> Outcome {
    let constants = PhysicalConstants::default();
    let settings = OracleSettings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let mut worst: f64 = 0.0;
    let cases = 200;
    for case in 0..cases {
        let spins = 1 + case % 2;
        let waveform = random_piecewise(&mut rng, 2 * settings.steps_per_half);
        let seq = PulseSequence::new(waveform, rng.random_range(0.5..50.0)).unwrap();
        let current = rng.random_range(0.0..2.0);
        let mut analytic = Vec::new();
        let mut brute = Vec::new();
        for _ in 0..spins {
            let center = NvCenter::on_axis(rng.random_range(-3e-6..3e-6));
            let phi = seq.phase(&center, current, &constants).map_err(|e| e.to_string())?;
            analytic.push(readout_state(phi).unwrap());
            brute.push(
                propagate_oracle(&seq, &center, current, &constants, &settings).map_err(|e| e.to_string())?,
            );
        }
        let a = joint_state(&analytic).unwrap();
        let b = joint_state(&brute).unwrap();
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x.norm_sqr() - y.norm_sqr()).abs());
        }
    }
    check(worst < 1e-9, format!("{cases} sequences, worst population gap {worst:.2e}"))
}

fn resolution_bound() -> Outcome {
    let r = min_resolution(735.0, &GradientWaveform::rectangular(160e-6), &PhysicalConstants::default())
        .map_err(|e| e.to_string())?;
    let expected = 0.5 / (GAMMA_E * 735.0 * 160e-6);
    let nm = r * 1e9;
    check(
        (r - expected).abs() < 1e-12 * expected && (nm - 0.1517).abs() < 5e-4 && (nm / 0.15 - 1.0).abs() < 0.02,
        format!("{nm:.4} nm against 0.15 nm ({:+.1}%)", 100.0 * (nm / 0.15 - 1.0)),
    )
}

/// Dense-grid oracle: first local minimum of the target cost on a 10 nA grid
/// that clears the cost threshold with a phase difference near π.
fn dense_switch_oracle(target: [u8; 2], range: (f64, f64)) -> Option<f64> {
    let cost = |i: f64| {
        let phi: Vec<f64> = SWITCH_PAIR_M
            .iter()
            .map(|r| TAU * GAMMA_E * 12.0 * i * r * 20e-6)
            .collect();
        let pop = |p: f64, bit: u8| if bit == 0 { 0.5 * (1.0 + p.cos()) } else { 0.5 * (1.0 - p.cos()) };
        let c = (1.0 - pop(phi[0], target[0])).powi(2) + (1.0 - pop(phi[1], target[1])).powi(2);
        (c, ((phi[0] - phi[1]).abs() % TAU - PI).abs())
    };
    let n = ((range.1 - range.0) / 1e-5).round() as usize;
    let grid: Vec<f64> = (0..=n).map(|k| range.0 + k as f64 * 1e-5).collect();
    let costs: Vec<(f64, f64)> = grid.iter().map(|&i| cost(i)).collect();
    (1..n).find_map(|k| {
        let (c, gap) = costs[k];
        let minimum = c <= costs[k - 1].0 && c <= costs[k + 1].0;
        (minimum && c < 0.05 && gap <= 0.2).then_some(grid[k])
    })
}

fn switching_currents() -> Outcome {
    let constants = PhysicalConstants::default();
    let seq = PulseSequence::new(GradientWaveform::rectangular(20e-6), 12.0).unwrap();
    let pair = SWITCH_PAIR_M.map(NvCenter::on_axis);
    let range = (0.0, 0.6);
    let s01 = find_switch_currents(&seq, &pair, range, JointState::S01, &constants).map_err(|e| e.to_string())?;
    let s10 = find_switch_currents(&seq, &pair, range, JointState::S10, &constants).map_err(|e| e.to_string())?;
    let o01 = dense_switch_oracle([0, 1], range).ok_or("grid oracle found no 01 switch")?;
    let o10 = dense_switch_oracle([1, 0], range).ok_or("grid oracle found no 10 switch")?;
    let detail = format!(
        "01 at {:.4} mA (infidelity {:.3}, grid {:.5}), 10 at {:.4} mA (infidelity {:.3}, grid {:.5})",
        s01.current_ma, s01.infidelity, o01, s10.current_ma, s10.infidelity, o10
    );
    check(
        (s01.current_ma - 0.40).abs() <= 0.01
            && s01.infidelity < 0.05
            && s10.infidelity < 0.05
            && (s10.current_ma - s01.current_ma).abs() > 1e-3
            && (s01.current_ma - o01).abs() <= 2e-5
            && (s10.current_ma - o10).abs() <= 2e-5,
        detail,
    )
}

fn localization_reproduction() -> Outcome {
    let scene = pair_scene(1.0, ISOLATED_BUDGET, 0.0);
    let fits: Vec<_> = (0..100u64)
        .into_par_iter()
        .map(|seed| localize_pair(&scene, seed))
        .collect::<nvphase::Result<_>>()
        .map_err(|e| e.to_string())?;

    let sep = pair_separation(&fits[0][0], &fits[0][1]);
    let sep_ok = (sep.distance_m - PAIR_SEPARATION_M).abs() <= 3.0 * sep.uncertainty_m;
    let mut report = vec![format!(
        "seed 0: {:.2} ± {:.2} nm",
        sep.distance_m * 1e9,
        sep.uncertainty_m * 1e9
    )];
    let mut band_ok = true;
    let mut scatter_ok = true;
    for emitter in 0..2 {
        for axis in 0..2 {
            let reported = mean(&fits.iter().map(|f| f[emitter].sigma_xy_m[axis]).collect::<Vec<_>>());
            let scatter = std_dev(&fits.iter().map(|f| f[emitter].center_m[axis]).collect::<Vec<_>>());
            band_ok &= (0.5e-9..=2e-9).contains(&reported);
            let ratio = scatter / reported;
            scatter_ok &= (0.5..=2.0).contains(&ratio);
            report.push(format!(
                "NV{} {}: sigma {:.2} nm, scatter {:.2} nm",
                emitter + 1,
                ["x", "y"][axis],
                reported * 1e9,
                scatter * 1e9
            ));
        }
    }
    check(sep_ok && band_ok && scatter_ok, report.join(", "))
}

fn shot_noise_scaling() -> Outcome {
    let budgets = [1e3, 1e3 * 10f64.powf(0.5), 1e4, 1e4 * 10f64.powf(0.5), 1e5];
    let mut logs_n = Vec::new();
    let mut logs_s = Vec::new();
    for &budget in &budgets {
        let scene = pair_scene(1.0, budget, 0.0);
        let fits: Vec<_> = (0..300u64)
            .into_par_iter()
            .map(|seed| localize_pair(&scene, 1_000_000 + seed))
            .collect::<nvphase::Result<_>>()
            .map_err(|e| e.to_string())?;
        let xs: Vec<f64> = fits.iter().map(|f| f[0].center_m[0]).collect();
        let ys: Vec<f64> = fits.iter().map(|f| f[0].center_m[1]).collect();
        let scatter = (0.5 * (std_dev(&xs).powi(2) + std_dev(&ys).powi(2))).sqrt();
        logs_n.push(budget.ln());
        logs_s.push(scatter.ln());
    }
    let k = slope(&logs_n, &logs_s);
    check((k + 0.5).abs() <= 0.05, format!("slope {k:.3} over {:.0e}..{:.0e} photons", budgets[0], budgets[4]))
}

fn fft_reconstruction() -> Outcome {
    let constants = PhysicalConstants::default();
    let seq = PulseSequence::new(GradientWaveform::rectangular(20e-6), 12.0).unwrap();
    let truth = [SWITCH_PAIR_M[0], SWITCH_PAIR_M[0] + 1e-6];
    let centers = truth.map(NvCenter::on_axis);
    let n = 128;
    let currents: Vec<f64> = (0..n).map(|k| k as f64 * 0.5 / n as f64).collect();
    let sweep = run_current_sweep(&seq, &centers, &currents, &constants).map_err(|e| e.to_string())?;
    let spectrum = fft_reconstruct(&sweep, &seq, &constants).map_err(|e| e.to_string())?;
    let expected_resolution = 1.0 / (GAMMA_E * 12.0 * 20e-6 * 0.5);
    let res_ok = (spectrum.resolution_m / expected_resolution - 1.0).abs() < 1e-9
        && (spectrum.resolution_m / 297e-9 - 1.0).abs() <= 0.05;
    let mut found: Vec<f64> = spectrum.peaks.iter().take(2).map(|p| p.position_m).collect();
    found.sort_by(f64::total_cmp);
    let peaks_ok = spectrum.peaks.len() == 2
        && found.iter().zip(&truth).all(|(f, t)| (f - t).abs() <= spectrum.resolution_m);
    check(
        res_ok && peaks_ok,
        format!(
            "resolution {:.1} nm, peaks at {} µm for truth {:.3} and {:.3} µm",
            spectrum.resolution_m * 1e9,
            found.iter().map(|f| format!("{:.3}", f * 1e6)).collect::<Vec<_>>().join(" and "),
            truth[0] * 1e6,
            truth[1] * 1e6
        ),
    )
}

fn calibration() -> Outcome {
    let truth = WireCalibration::reported_microwire();
    let points: Vec<(f64, f64)> = (0..12)
        .map(|k| {
            let d = 0.5e-6 + k as f64 * 0.4e-6;
            (d, truth.amplitude_t_m / (d + truth.offset_m))
        })
        .collect();
    let fit = fit_calibration(&points, truth.reference_current_ma).map_err(|e| e.to_string())?;
    let ea = (fit.calibration.amplitude_t_m / truth.amplitude_t_m - 1.0).abs();
    let ed = (fit.calibration.offset_m / truth.offset_m - 1.0).abs();

    let anchor = WireCalibration::from_gradient_anchor(0.5e-6, 10.0, 735.0, 0.0).map_err(|e| e.to_string())?;
    let g = gradient_at(&anchor, 0.5e-6, 10.0).map_err(|e| e.to_string())?;
    // T/m to mT/µm
    let mt_per_um = g.magnitude_t_per_m * 1e-3;
    check(
        ea < 1e-6 && ed < 1e-6 && (mt_per_um - 0.735).abs() <= 1e-12,
        format!("relative errors a {ea:.1e}, d0 {ed:.1e}; anchor gradient {mt_per_um} mT/µm"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("oracle equivalence", oracle_equivalence, 10),
        ("resolution bound", resolution_bound, 1),
        ("switching currents", switching_currents, 5),
        ("localization reproduction", localization_reproduction, 300),
        ("shot-noise scaling", shot_noise_scaling, 300),
        ("FFT reconstruction", fft_reconstruction, 1),
        ("calibration", calibration, 1),
    ];
    let mut failures = 0;
    for (index, (name, run, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        match within_budget(outcome, start.elapsed(), Duration::from_secs(*limit)) {
            Ok(detail) => println!("PASS {} {name}: {detail}", index + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {} {name}: {detail}", index + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
