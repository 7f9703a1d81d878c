//! Two-level spin physics of phase encoding.
//!
//! Only the `m_s = 0` / `m_s = +1` pair is modelled. After the
//! `π/2 – τ/2 – π – τ/2 – π/2` echo a spin that accumulated the relative phase
//! `φ` ends in `cos(φ/2)|0⟩ + i sin(φ/2)|1⟩` (global phase dropped), so its
//! normalized fluorescence `p0 − p1` equals `cos φ`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::sequence::PulseSequence;

/// Largest register `joint_state` will expand (2^20 amplitudes).
pub const MAX_JOINT_SPINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    /// Electron gyromagnetic ratio in Hz/T (cycles per second per tesla).
    pub gamma_e_hz_per_t: f64,
    /// Ground-state zero-field splitting in Hz.
    pub zero_field_splitting_hz: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self {
            gamma_e_hz_per_t: 28.024e9,
            zero_field_splitting_hz: 2.87e9,
        }
    }
}

impl PhysicalConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_e_hz_per_t > 0.0 && self.gamma_e_hz_per_t.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gyromagnetic ratio must be positive, got {}",
                self.gamma_e_hz_per_t
            )));
        }
        if !(self.zero_field_splitting_hz > 0.0 && self.zero_field_splitting_hz.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "zero-field splitting must be positive, got {}",
                self.zero_field_splitting_hz
            )));
        }
        Ok(())
    }

    /// Gyromagnetic ratio in rad·s⁻¹·T⁻¹.
    pub fn gamma_rad(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.gamma_e_hz_per_t
    }
}

/// A single switchable emitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NvCenter {
    /// Position in the scan plane, meters.
    pub position_m: [f64; 2],
    /// Projection of the position onto the gradient axis, meters.
    pub gradient_coordinate_m: f64,
    /// ON-state photon-rate weight `C_j`.
    pub brightness: f64,
    /// Fractional fluorescence drop of `|1⟩` relative to `|0⟩`.
    pub contrast: f64,
}

impl NvCenter {
    pub const DEFAULT_CONTRAST: f64 = 0.30;

    pub fn new(
        position_m: [f64; 2],
        gradient_coordinate_m: f64,
        brightness: f64,
        contrast: f64,
    ) -> Result<Self> {
        let center = Self {
            position_m,
            gradient_coordinate_m,
            brightness,
            contrast,
        };
        center.validate()?;
        Ok(center)
    }

    /// Unit-brightness emitter on the gradient axis with the default contrast.
    pub fn on_axis(gradient_coordinate_m: f64) -> Self {
        Self {
            position_m: [0.0, 0.0],
            gradient_coordinate_m,
            brightness: 1.0,
            contrast: Self::DEFAULT_CONTRAST,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite("position x", self.position_m[0])?;
        ensure_finite("position y", self.position_m[1])?;
        ensure_finite("gradient coordinate", self.gradient_coordinate_m)?;
        if !(self.brightness >= 0.0 && self.brightness.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "brightness must be finite and >= 0, got {}",
                self.brightness
            )));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "contrast must lie in (0, 1], got {}",
                self.contrast
            )));
        }
        Ok(())
    }
}

/// Pure state of one two-level spin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpinState {
    pub amp0: Complex64,
    pub amp1: Complex64,
}

impl SpinState {
    pub const GROUND: SpinState = SpinState {
        amp0: Complex64::new(1.0, 0.0),
        amp1: Complex64::new(0.0, 0.0),
    };
    pub const EXCITED: SpinState = SpinState {
        amp0: Complex64::new(0.0, 0.0),
        amp1: Complex64::new(1.0, 0.0),
    };

    pub fn norm_sqr(&self) -> f64 {
        self.amp0.norm_sqr() + self.amp1.norm_sqr()
    }

    /// Population of the bright state `|0⟩`.
    pub fn population0(&self) -> f64 {
        self.amp0.norm_sqr()
    }

    /// Population of the dark state `|1⟩`.
    pub fn population1(&self) -> f64 {
        self.amp1.norm_sqr()
    }

    /// `⟨σz⟩ = p0 − p1`, the normalized fluorescence of a unit emitter.
    pub fn z_expectation(&self) -> f64 {
        self.population0() - self.population1()
    }

    fn apply(&self, m: &[[Complex64; 2]; 2]) -> SpinState {
        SpinState {
            amp0: m[0][0] * self.amp0 + m[0][1] * self.amp1,
            amp1: m[1][0] * self.amp0 + m[1][1] * self.amp1,
        }
    }
}

/// `cos(θ)|0⟩ + i sin(θ)|1⟩`.
///
/// `θ` is half of the accumulated relative phase; see [`readout_state`].
pub fn final_state(phase: f64) -> Result<SpinState> {
    ensure_finite("phase", phase)?;
    Ok(SpinState {
        amp0: Complex64::new(phase.cos(), 0.0),
        amp1: Complex64::new(0.0, phase.sin()),
    })
}

/// State after the echo readout for an accumulated relative phase `φ`.
pub fn readout_state(accumulated_phase: f64) -> Result<SpinState> {
    final_state(0.5 * accumulated_phase)
}

/// Normalized single-emitter fluorescence, `cos φ`.
pub fn signal_single(phase: f64) -> Result<f64> {
    ensure_finite("phase", phase)?;
    Ok(phase.cos())
}

/// Weighted fluorescence of several emitters, `Σ C_j cos φ_j`.
pub fn signal_total(centers: &[NvCenter], phases: &[f64]) -> Result<f64> {
    if centers.is_empty() || centers.len() != phases.len() {
        return Err(Error::InvalidArgument(format!(
            "need equal non-empty center and phase lists, got {} and {}",
            centers.len(),
            phases.len()
        )));
    }
    centers.iter().zip(phases).try_fold(0.0, |acc, (c, &phi)| {
        Ok(acc + c.brightness * signal_single(phi)?)
    })
}

/// Kronecker product of single-spin states. Spin 0 is the most significant
/// bit of the basis index, so `[|0⟩, |1⟩]` has its weight at index `0b01`.
pub fn joint_state(states: &[SpinState]) -> Result<Vec<Complex64>> {
    if states.is_empty() || states.len() > MAX_JOINT_SPINS {
        return Err(Error::Capacity(format!(
            "joint state supports 1..={MAX_JOINT_SPINS} spins, got {}",
            states.len()
        )));
    }
    let mut out = vec![Complex64::new(1.0, 0.0)];
    for s in states {
        let mut next = Vec::with_capacity(out.len() * 2);
        for a in &out {
            next.push(a * s.amp0);
            next.push(a * s.amp1);
        }
        out = next;
    }
    Ok(out)
}

/// `⟨σz⟩` of spin `index` in an `n`-spin joint amplitude vector.
pub fn spin_z_expectation(joint: &[Complex64], n: usize, index: usize) -> Result<f64> {
    if n == 0 || n > MAX_JOINT_SPINS || joint.len() != 1 << n || index >= n {
        return Err(Error::InvalidArgument(format!(
            "joint vector of length {} does not hold spin {index} of {n}",
            joint.len()
        )));
    }
    let bit = n - 1 - index;
    Ok(joint
        .iter()
        .enumerate()
        .map(|(k, a)| {
            if (k >> bit) & 1 == 0 {
                a.norm_sqr()
            } else {
                -a.norm_sqr()
            }
        })
        .sum())
}

/// Joint basis label of a pair of spins; the first digit is spin 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JointState {
    #[serde(rename = "00")]
    S00,
    #[serde(rename = "01")]
    S01,
    #[serde(rename = "10")]
    S10,
    #[serde(rename = "11")]
    S11,
}

impl JointState {
    /// Target basis bit of each spin (0 = bright, 1 = dark).
    pub fn bits(self) -> [u8; 2] {
        match self {
            JointState::S00 => [0, 0],
            JointState::S01 => [0, 1],
            JointState::S10 => [1, 0],
            JointState::S11 => [1, 1],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            JointState::S00 => "00",
            JointState::S01 => "01",
            JointState::S10 => "10",
            JointState::S11 => "11",
        }
    }
}

impl std::fmt::Display for JointState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for JointState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "00" => Ok(JointState::S00),
            "01" => Ok(JointState::S01),
            "10" => Ok(JointState::S10),
            "11" => Ok(JointState::S11),
            other => Err(Error::InvalidArgument(format!("unknown joint state `{other}`"))),
        }
    }
}

/// Step control for [`propagate_oracle`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSettings {
    /// Propagator steps in each half of the echo.
    pub steps_per_half: usize,
    /// Maximum population change allowed when the step is halved.
    pub convergence_tolerance: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            steps_per_half: 1024,
            convergence_tolerance: 1e-9,
        }
    }
}

fn rx(angle: f64) -> [[Complex64; 2]; 2] {
    let c = Complex64::new((0.5 * angle).cos(), 0.0);
    let s = Complex64::new(0.0, -(0.5 * angle).sin());
    [[c, s], [s, c]]
}

fn rz(angle: f64) -> [[Complex64; 2]; 2] {
    let zero = Complex64::new(0.0, 0.0);
    [
        [Complex64::from_polar(1.0, -0.5 * angle), zero],
        [zero, Complex64::from_polar(1.0, 0.5 * angle)],
    ]
}

/// Brute-force rotating-frame propagation of one spin through `seq`.
///
/// Microwave pulses are instantaneous ideal rotations; between them the spin
/// precesses about z with detuning `2π γ G(t) r`. Each step's precession angle
/// comes from 3-point Gauss–Legendre quadrature of the sampled waveform, and
/// the run is repeated at half the step to confirm convergence. The second
/// `π/2` pulse is `+x` after an echo and `−x` without one, so zero phase
/// always returns the bright state. Decoherence is not modelled here.
pub fn propagate_oracle(
    seq: &PulseSequence,
    center: &NvCenter,
    current_ma: f64,
    constants: &PhysicalConstants,
    settings: &OracleSettings,
) -> Result<SpinState> {
    ensure_finite("current", current_ma)?;
    constants.validate()?;
    seq.validate()?;
    if settings.steps_per_half == 0 {
        return Err(Error::Discretization("at least one step per half is required".into()));
    }
    let steps = 2 * settings.steps_per_half;
    for boundary in seq.waveform.shape.boundaries() {
        let pos = boundary * steps as f64;
        if (pos - pos.round()).abs() > 1e-9 * steps as f64 {
            return Err(Error::Discretization(format!(
                "segment boundary at {boundary} of tau is not a multiple of 1/{steps}"
            )));
        }
    }

    let coarse = propagate_fixed(seq, center, current_ma, constants, settings.steps_per_half);
    let fine = propagate_fixed(seq, center, current_ma, constants, 2 * settings.steps_per_half);
    let change = (coarse.population0() - fine.population0()).abs();
    if change >= settings.convergence_tolerance {
        return Err(Error::Discretization(format!(
            "halving the step changed the population by {change:.3e}"
        )));
    }
    Ok(fine)
}

fn propagate_fixed(
    seq: &PulseSequence,
    center: &NvCenter,
    current_ma: f64,
    constants: &PhysicalConstants,
    steps_per_half: usize,
) -> SpinState {
    const NODES: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
    const WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];

    let waveform = &seq.waveform;
    let tau = waveform.duration_s;
    let steps = 2 * steps_per_half;
    let du = 1.0 / steps as f64;
    // detuning (rad/s) per unit waveform level
    let detuning_scale = constants.gamma_rad()
        * seq.gradient_per_ma
        * current_ma
        * waveform.amplitude_scale
        * center.gradient_coordinate_m;

    let mut psi = SpinState::GROUND.apply(&rx(std::f64::consts::FRAC_PI_2));
    for k in 0..steps {
        if waveform.echo && k == steps_per_half {
            psi = psi.apply(&rx(std::f64::consts::PI));
        }
        let mid = (k as f64 + 0.5) * du;
        let mean_level: f64 = NODES
            .iter()
            .zip(WEIGHTS)
            .map(|(x, w)| w * waveform.level(mid + 0.5 * du * x))
            .sum::<f64>()
            * 0.5;
        let angle = detuning_scale * mean_level * du * tau;
        psi = psi.apply(&rz(angle));
    }
    let last = if waveform.echo {
        std::f64::consts::FRAC_PI_2
    } else {
        -std::f64::consts::FRAC_PI_2
    };
    psi.apply(&rx(last))
}
