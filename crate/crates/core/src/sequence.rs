//! Experiment-level composition: current sweeps, switching currents and the
//! minimum separation the gradient can still switch independently.

use std::f64::consts::{PI, TAU};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::field::{phase_integral, GradientWaveform};
use crate::spin::{signal_total, JointState, NvCenter, PhysicalConstants};

/// Finest grid spacing of the switching-current search, mA.
pub const SWITCH_GRID_STEP_MA: f64 = 1e-3;
/// Largest accepted two-spin population infidelity.
pub const SWITCH_COST_THRESHOLD: f64 = 0.05;
/// Accepted deviation of `|φ₁ − φ₂| mod 2π` from π, radians.
pub const SWITCH_PHASE_TOLERANCE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub waveform: GradientWaveform,
    /// Gradient at the emitters per mA of drive current, T·m⁻¹·mA⁻¹.
    pub gradient_per_ma: f64,
    /// Optional T2; scales the cosine contrast by `exp(−τ/T2)`.
    pub decoherence_t2_s: Option<f64>,
}

impl PulseSequence {
    pub fn new(waveform: GradientWaveform, gradient_per_ma: f64) -> Result<Self> {
        let seq = Self {
            waveform,
            gradient_per_ma,
            decoherence_t2_s: None,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn with_t2(mut self, t2_s: f64) -> Result<Self> {
        self.decoherence_t2_s = Some(t2_s);
        self.validate()?;
        Ok(self)
    }

    pub fn tau(&self) -> f64 {
        self.waveform.duration_s
    }

    pub fn validate(&self) -> Result<()> {
        self.waveform.validate()?;
        ensure_finite("gradient per mA", self.gradient_per_ma)?;
        if let Some(t2) = self.decoherence_t2_s {
            if !(t2 > 0.0) {
                return Err(Error::InvalidArgument(format!("T2 must be positive, got {t2}")));
            }
        }
        Ok(())
    }

    pub fn envelope(&self) -> f64 {
        self.decoherence_t2_s
            .map_or(1.0, |t2| (-self.tau() / t2).exp())
    }

    pub fn phase(&self, center: &NvCenter, current_ma: f64, constants: &PhysicalConstants) -> Result<f64> {
        phase_integral(
            &self.waveform,
            self.gradient_per_ma,
            current_ma,
            center.gradient_coordinate_m,
            constants,
        )
    }

    /// Phase cycles per mA per meter of gradient coordinate, `γ g τ κ · scale`.
    pub fn cycles_per_ma_per_m(&self, constants: &PhysicalConstants) -> Result<f64> {
        let kappa = self.waveform.effective_factor()?;
        Ok(constants.gamma_e_hz_per_t
            * self.gradient_per_ma
            * self.waveform.amplitude_scale
            * self.tau()
            * kappa)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub currents_ma: Vec<f64>,
    pub signals: Vec<f64>,
    /// `phases[i][j]`: phase of center `j` at current `i`, radians.
    pub phases: Vec<Vec<f64>>,
}

impl SweepResult {
    pub fn len(&self) -> usize {
        self.currents_ma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.currents_ma.is_empty()
    }

    /// CSV with header `current_mA,signal,phase_1,...`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let n = self.phases.first().map_or(0, Vec::len);
        let mut header = vec!["current_mA".to_string(), "signal".to_string()];
        header.extend((1..=n).map(|j| format!("phase_{j}")));
        writer.write_record(&header)?;
        for ((i, s), phases) in self.currents_ma.iter().zip(&self.signals).zip(&self.phases) {
            let mut row = vec![i.to_string(), s.to_string()];
            row.extend(phases.iter().map(f64::to_string));
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Signal and per-center phase at each drive current.
pub fn run_current_sweep(
    seq: &PulseSequence,
    centers: &[NvCenter],
    currents_ma: &[f64],
    constants: &PhysicalConstants,
) -> Result<SweepResult> {
    if currents_ma.is_empty() {
        return Err(Error::InvalidArgument("current sweep is empty".into()));
    }
    if centers.is_empty() {
        return Err(Error::InvalidArgument("current sweep needs at least one center".into()));
    }
    seq.validate()?;
    let envelope = seq.envelope();
    let mut signals = Vec::with_capacity(currents_ma.len());
    let mut phases = Vec::with_capacity(currents_ma.len());
    for &current in currents_ma {
        ensure_finite("current", current)?;
        let row = centers
            .iter()
            .map(|c| seq.phase(c, current, constants))
            .collect::<Result<Vec<_>>>()?;
        signals.push(envelope * signal_total(centers, &row)?);
        phases.push(row);
    }
    Ok(SweepResult {
        currents_ma: currents_ma.to_vec(),
        signals,
        phases,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchSolution {
    pub current_ma: f64,
    /// `(1 − p₁)² + (1 − p₂)²` for the target populations.
    pub infidelity: f64,
    /// `|φ₁ − φ₂|` wrapped into `[0, 2π)`.
    pub phase_difference: f64,
}

/// Population of `bit` (0 bright, 1 dark) after the echo readout.
fn target_population(phase: f64, bit: u8, envelope: f64) -> f64 {
    let z = envelope * phase.cos();
    if bit == 0 {
        0.5 * (1.0 + z)
    } else {
        0.5 * (1.0 - z)
    }
}

/// Smallest current in `search_range_ma` that drives the pair into `target`
/// (`01` or `10`).
///
/// Grid search at ≤ 1 µA followed by golden-section refinement of each grid
/// minimum. A minimum is accepted when its cost is below
/// [`SWITCH_COST_THRESHOLD`] and the phase difference is within
/// [`SWITCH_PHASE_TOLERANCE`] of π.
pub fn find_switch_currents(
    seq: &PulseSequence,
    centers: &[NvCenter; 2],
    search_range_ma: (f64, f64),
    target: JointState,
    constants: &PhysicalConstants,
) -> Result<SwitchSolution> {
    let (lo, hi) = search_range_ma;
    if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && hi > lo) {
        return Err(Error::InvalidArgument(format!(
            "search range must satisfy 0 <= lo < hi, got ({lo}, {hi})"
        )));
    }
    if !matches!(target, JointState::S01 | JointState::S10) {
        return Err(Error::InvalidArgument(format!(
            "switch target must be 01 or 10, got {target}"
        )));
    }
    seq.validate()?;
    for c in centers {
        c.validate()?;
    }

    let bits = target.bits();
    let envelope = seq.envelope();
    let cost = |current: f64| -> Result<(f64, f64)> {
        let p1 = seq.phase(&centers[0], current, constants)?;
        let p2 = seq.phase(&centers[1], current, constants)?;
        let c = (1.0 - target_population(p1, bits[0], envelope)).powi(2)
            + (1.0 - target_population(p2, bits[1], envelope)).powi(2);
        Ok((c, (p1 - p2).abs().rem_euclid(TAU)))
    };

    let steps = ((hi - lo) / SWITCH_GRID_STEP_MA).ceil().max(2.0) as usize;
    let dx = (hi - lo) / steps as f64;
    let grid: Vec<f64> = (0..=steps).map(|k| lo + k as f64 * dx).collect();
    let costs = grid
        .iter()
        .map(|&i| cost(i).map(|c| c.0))
        .collect::<Result<Vec<_>>>()?;

    let mut best = (f64::INFINITY, lo);
    for k in 0..grid.len() {
        let left = if k > 0 { costs[k - 1] } else { f64::INFINITY };
        let right = if k + 1 < grid.len() { costs[k + 1] } else { f64::INFINITY };
        let here = costs[k];
        if here < best.0 {
            best = (here, grid[k]);
        }
        let is_minimum = here <= left && here <= right && (here < left || here < right);
        if !is_minimum {
            continue;
        }
        let a = grid[k.saturating_sub(1)];
        let b = grid[(k + 1).min(grid.len() - 1)];
        let current = golden_section(|x| cost(x).map_or(f64::INFINITY, |c| c.0), a, b, 1e-10);
        let (c, diff) = cost(current)?;
        if c < best.0 {
            best = (c, current);
        }
        if c < SWITCH_COST_THRESHOLD && (diff - PI).abs() <= SWITCH_PHASE_TOLERANCE {
            return Ok(SwitchSolution {
                current_ma: current,
                infidelity: c,
                phase_difference: diff,
            });
        }
    }
    Err(Error::NotSwitchable {
        best_cost: best.0,
        best_current_ma: best.1,
    })
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Separation whose phases differ by π at gradient `G`:
/// `Δr = 1 / (2 γ G τ κ)`.
pub fn min_resolution(
    gradient_t_per_m: f64,
    waveform: &GradientWaveform,
    constants: &PhysicalConstants,
) -> Result<f64> {
    if !(gradient_t_per_m > 0.0 && gradient_t_per_m.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gradient must be positive, got {gradient_t_per_m}"
        )));
    }
    constants.validate()?;
    let kappa = waveform.effective_factor()?;
    if kappa == 0.0 {
        return Err(Error::NoEncoding);
    }
    Ok(0.5 / (constants.gamma_e_hz_per_t * gradient_t_per_m * waveform.duration_s * kappa.abs()))
}
