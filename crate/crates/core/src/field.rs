//! Microwire field model, calibration and the phase-encoding integral.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::lm::{LeastSquares, LevenbergMarquardt};
use crate::spin::PhysicalConstants;

/// μ0 / 2π in T·m/A.
const MU0_OVER_2PI: f64 = 2e-7;

/// Field of an infinitely thin straight wire, tesla.
pub fn ideal_wire_field(current_ma: f64, distance_m: f64) -> Result<f64> {
    ensure_finite("current", current_ma)?;
    if !(distance_m > 0.0 && distance_m.is_finite()) {
        return Err(Error::Domain(format!("distance must be positive, got {distance_m}")));
    }
    Ok(MU0_OVER_2PI * current_ma * 1e-3 / distance_m)
}

/// Inverse-law field model `B(d, I) = a · (I / I_ref) / (d + d0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireCalibration {
    /// `a`, tesla·meter at the reference current.
    pub amplitude_t_m: f64,
    /// `d0`, meters.
    pub offset_m: f64,
    pub reference_current_ma: f64,
}

impl WireCalibration {
    pub fn new(amplitude_t_m: f64, offset_m: f64, reference_current_ma: f64) -> Result<Self> {
        let cal = Self {
            amplitude_t_m,
            offset_m,
            reference_current_ma,
        };
        cal.validate()?;
        Ok(cal)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude_t_m > 0.0 && self.amplitude_t_m.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "calibration amplitude must be positive, got {}",
                self.amplitude_t_m
            )));
        }
        ensure_finite("calibration offset", self.offset_m)?;
        if !(self.reference_current_ma > 0.0 && self.reference_current_ma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "reference current must be positive, got {}",
                self.reference_current_ma
            )));
        }
        Ok(())
    }

    /// Calibration whose gradient magnitude at `distance_m` and `current_ma`
    /// equals `gradient_t_per_m`, for a chosen offset `d0`.
    pub fn from_gradient_anchor(
        distance_m: f64,
        current_ma: f64,
        gradient_t_per_m: f64,
        offset_m: f64,
    ) -> Result<Self> {
        let lever = distance_m + offset_m;
        if !(lever > 0.0) {
            return Err(Error::Domain(format!("d + d0 must be positive, got {lever}")));
        }
        Self::new(gradient_t_per_m * lever * lever, offset_m, current_ma)
    }

    /// Calibration passing through two `(distance_m, current_ma, |G|)` gradient
    /// anchors. `reference_current_ma` fixes the current `a` refers to.
    pub fn from_gradient_anchors(
        first: (f64, f64, f64),
        second: (f64, f64, f64),
        reference_current_ma: f64,
    ) -> Result<Self> {
        let (d1, i1, g1) = first;
        let (d2, i2, g2) = second;
        if !(g1 > 0.0 && g2 > 0.0 && i1 > 0.0 && i2 > 0.0) {
            return Err(Error::InvalidArgument("anchors need positive currents and gradients".into()));
        }
        // d_k + d0 = s · sqrt(I_k / G_k) with s = sqrt(a / I_ref)
        let k1 = (i1 / g1).sqrt();
        let k2 = (i2 / g2).sqrt();
        let s = (d2 - d1) / (k2 - k1);
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Fit("gradient anchors are inconsistent with an inverse law".into()));
        }
        let offset = s * k1 - d1;
        Self::new(s * s * reference_current_ma, offset, reference_current_ma)
    }

    /// Calibration matching the reported maximum gradient of 0.735 mT/µm at
    /// 0.5 µm and 10 mA, and about 0.024 mT/µm at 2 µm and 2 mA.
    pub fn reported_microwire() -> Self {
        Self::from_gradient_anchors((0.5e-6, 10.0, 735.0), (2e-6, 2.0, 24.0), 10.0)
            .expect("anchors are consistent")
    }

    fn lever(&self, distance_m: f64) -> Result<f64> {
        ensure_finite("distance", distance_m)?;
        let lever = distance_m + self.offset_m;
        if lever > 0.0 {
            Ok(lever)
        } else {
            Err(Error::Domain(format!(
                "d + d0 = {lever} m is outside the calibration domain"
            )))
        }
    }

    /// Field magnitude in tesla.
    pub fn field(&self, distance_m: f64, current_ma: f64) -> Result<f64> {
        ensure_finite("current", current_ma)?;
        let lever = self.lever(distance_m)?;
        Ok(self.amplitude_t_m * (current_ma / self.reference_current_ma) / lever)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientDirection {
    /// Field grows toward the wire (positive current).
    TowardWire,
    AwayFromWire,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientSample {
    pub magnitude_t_per_m: f64,
    pub direction: GradientDirection,
}

impl GradientSample {
    /// Derivative dB/dd with its sign.
    pub fn signed(&self) -> f64 {
        match self.direction {
            GradientDirection::TowardWire => -self.magnitude_t_per_m,
            GradientDirection::AwayFromWire => self.magnitude_t_per_m,
        }
    }
}

/// `dB/dd = −a · (I / I_ref) / (d + d0)²`.
pub fn gradient_at(cal: &WireCalibration, distance_m: f64, current_ma: f64) -> Result<GradientSample> {
    ensure_finite("current", current_ma)?;
    let lever = cal.lever(distance_m)?;
    let signed = -cal.amplitude_t_m * (current_ma / cal.reference_current_ma) / (lever * lever);
    Ok(GradientSample {
        magnitude_t_per_m: signed.abs(),
        direction: if signed > 0.0 {
            GradientDirection::AwayFromWire
        } else {
            GradientDirection::TowardWire
        },
    })
}

/// Field along the NV axis from the `m_s = 0 → +1` transition frequency.
pub fn splitting_to_field(transition_hz: f64, constants: &PhysicalConstants) -> Result<f64> {
    ensure_finite("transition frequency", transition_hz)?;
    constants.validate()?;
    if transition_hz < constants.zero_field_splitting_hz {
        return Err(Error::Domain(format!(
            "transition {transition_hz} Hz lies below the zero-field splitting"
        )));
    }
    Ok((transition_hz - constants.zero_field_splitting_hz) / constants.gamma_e_hz_per_t)
}

pub fn field_to_splitting(field_t: f64, constants: &PhysicalConstants) -> Result<f64> {
    ensure_finite("field", field_t)?;
    constants.validate()?;
    if field_t < 0.0 {
        return Err(Error::Domain(format!("field must be >= 0, got {field_t}")));
    }
    Ok(constants.zero_field_splitting_hz + constants.gamma_e_hz_per_t * field_t)
}

#[derive(Debug, Clone)]
pub struct CalibrationFit {
    pub calibration: WireCalibration,
    /// Euclidean norm of the field residuals, tesla.
    pub residual_norm_t: f64,
    pub iterations: usize,
}

/// Residuals in mT against distances in µm; parameters `[a (mT·µm), d0 (µm)]`.
struct InverseLaw {
    distance_um: Vec<f64>,
    field_mt: Vec<f64>,
}

impl LeastSquares for InverseLaw {
    fn residuals(&self, p: &DVector<f64>) -> Option<DVector<f64>> {
        let (a, d0) = (p[0], p[1]);
        if self.distance_um.iter().any(|d| d + d0 <= 0.0) {
            return None;
        }
        Some(DVector::from_iterator(
            self.distance_um.len(),
            self.distance_um
                .iter()
                .zip(&self.field_mt)
                .map(|(d, b)| a / (d + d0) - b),
        ))
    }

    fn jacobian(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let (a, d0) = (p[0], p[1]);
        DMatrix::from_fn(self.distance_um.len(), 2, |i, j| {
            let lever = self.distance_um[i] + d0;
            if j == 0 {
                1.0 / lever
            } else {
                -a / (lever * lever)
            }
        })
    }
}

/// Least-squares fit of `B(d) = a / (d + d0)` to `(distance_m, field_t)` points
/// measured at `current_ma`. Starts from `a = B₁·d₁`, `d0 = 0`.
pub fn fit_calibration(points: &[(f64, f64)], current_ma: f64) -> Result<CalibrationFit> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "calibration needs at least 3 points, got {}",
            points.len()
        )));
    }
    if !(current_ma > 0.0 && current_ma.is_finite()) {
        return Err(Error::InvalidArgument(format!("calibration current must be positive, got {current_ma}")));
    }
    for &(d, b) in points {
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::InvalidArgument(format!("distance must be positive, got {d}")));
        }
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::InvalidArgument(format!("field must be positive, got {b}")));
        }
    }
    let first = points[0].0;
    if points.iter().all(|&(d, _)| d == first) {
        return Err(Error::Fit("all calibration points share one distance".into()));
    }

    let problem = InverseLaw {
        distance_um: points.iter().map(|p| p.0 * 1e6).collect(),
        field_mt: points.iter().map(|p| p.1 * 1e3).collect(),
    };
    let start = DVector::from_vec(vec![problem.field_mt[0] * problem.distance_um[0], 0.0]);
    let solver = LevenbergMarquardt {
        cost_tolerance: 1e-15,
        ..Default::default()
    };
    let out = solver.minimize(&problem, start)?;
    let calibration = WireCalibration::new(out.params[0] * 1e-9, out.params[1] * 1e-6, current_ma)
        .map_err(|e| Error::Fit(format!("fit produced an invalid calibration: {e}")))?;
    Ok(CalibrationFit {
        calibration,
        residual_norm_t: out.residual_norm() * 1e-3,
        iterations: out.iterations,
    })
}

/// Reads `distance_um,field_mT` rows and returns `(meters, tesla)` pairs.
pub fn read_calibration_csv(path: impl AsRef<Path>) -> Result<Vec<(f64, f64)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    if names != ["distance_um", "field_mT"] {
        return Err(Error::Parse(format!(
            "calibration CSV header must be `distance_um,field_mT`, found `{}`",
            names.join(",")
        )));
    }
    let mut points = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |i: usize| -> Result<f64> {
            record
                .get(i)
                .map(str::trim)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("data row {}: column {}: {e}", line + 1, i + 1)))
        };
        points.push((parse(0)? * 1e-6, parse(1)? * 1e-3));
    }
    Ok(points)
}

/// One step of a piecewise-constant waveform, ending at `end` (fraction of τ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub end: f64,
    pub level: f64,
}

/// Normalized time profile of the gradient current, `w(u)` for `u = t/τ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WaveformShape {
    /// Constant magnitude whose sign follows the echo kernel, so the whole
    /// pulse adds phase.
    Rectangular,
    /// `cos(π u)`.
    HalfCosine,
    /// `cos(2π u)`.
    FullCosine,
    /// Arbitrary levels in `[-1, 1]`; the last segment must end at 1.
    Piecewise(Vec<Segment>),
}

impl WaveformShape {
    /// Interior breakpoints (fractions of τ) where the level may jump.
    pub fn boundaries(&self) -> Vec<f64> {
        match self {
            WaveformShape::Piecewise(segments) => segments
                .iter()
                .map(|s| s.end)
                .filter(|&e| e < 1.0)
                .collect(),
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for WaveformShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            WaveformShape::Rectangular => "rectangular",
            WaveformShape::HalfCosine => "half-cosine",
            WaveformShape::FullCosine => "full-cosine",
            WaveformShape::Piecewise(_) => "piecewise",
        };
        f.write_str(name)
    }
}

impl FromStr for WaveformShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rectangular" => Ok(WaveformShape::Rectangular),
            "half-cosine" | "half_cosine" => Ok(WaveformShape::HalfCosine),
            "full-cosine" | "full_cosine" => Ok(WaveformShape::FullCosine),
            other => Err(Error::Configuration(format!("unsupported waveform shape `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientWaveform {
    pub shape: WaveformShape,
    /// Total evolution time τ, seconds.
    pub duration_s: f64,
    /// Whether a π pulse at τ/2 flips the sign kernel.
    pub echo: bool,
    /// Multiplier on the drive current.
    pub amplitude_scale: f64,
}

impl GradientWaveform {
    pub fn new(shape: WaveformShape, duration_s: f64, echo: bool) -> Result<Self> {
        let w = Self {
            shape,
            duration_s,
            echo,
            amplitude_scale: 1.0,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn rectangular(duration_s: f64) -> Self {
        Self {
            shape: WaveformShape::Rectangular,
            duration_s,
            echo: true,
            amplitude_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "waveform duration must be positive, got {}",
                self.duration_s
            )));
        }
        ensure_finite("amplitude scale", self.amplitude_scale)?;
        if let WaveformShape::Piecewise(segments) = &self.shape {
            if segments.is_empty() {
                return Err(Error::Configuration("piecewise waveform has no segments".into()));
            }
            let mut previous = 0.0;
            for s in segments {
                if !(s.end > previous && s.end <= 1.0) {
                    return Err(Error::Configuration(format!(
                        "segment ends must increase within (0, 1], got {} after {previous}",
                        s.end
                    )));
                }
                if !(s.level.abs() <= 1.0) {
                    return Err(Error::Configuration(format!(
                        "segment level must lie in [-1, 1], got {}",
                        s.level
                    )));
                }
                previous = s.end;
            }
            if previous != 1.0 {
                return Err(Error::Configuration("last segment must end at 1".into()));
            }
        }
        Ok(())
    }

    /// Echo sign kernel: +1 on `[0, τ/2)`, −1 on `[τ/2, τ]` with an echo.
    pub fn echo_sign(&self, u: f64) -> f64 {
        if self.echo && u >= 0.5 {
            -1.0
        } else {
            1.0
        }
    }

    /// Normalized current level at `u = t/τ`.
    pub fn level(&self, u: f64) -> f64 {
        match &self.shape {
            WaveformShape::Rectangular => self.echo_sign(u),
            WaveformShape::HalfCosine => (PI * u).cos(),
            WaveformShape::FullCosine => (2.0 * PI * u).cos(),
            WaveformShape::Piecewise(segments) => segments
                .iter()
                .find(|s| u < s.end)
                .or(segments.last())
                .map_or(0.0, |s| s.level),
        }
    }

    /// `κ = ∫₀¹ s(u) w(u) du`, in closed form.
    pub fn effective_factor(&self) -> Result<f64> {
        self.validate()?;
        Ok(match &self.shape {
            WaveformShape::Rectangular => 1.0,
            WaveformShape::HalfCosine => {
                if self.echo {
                    2.0 / PI
                } else {
                    0.0
                }
            }
            WaveformShape::FullCosine => 0.0,
            WaveformShape::Piecewise(segments) => {
                let mut start = 0.0;
                let mut total = 0.0;
                for s in segments {
                    let weight = if self.echo {
                        let before = (s.end.min(0.5) - start).max(0.0);
                        let after = (s.end - start.max(0.5)).max(0.0);
                        before - after
                    } else {
                        s.end - start
                    };
                    total += s.level * weight;
                    start = s.end;
                }
                total
            }
        })
    }
}

/// Accumulated relative phase `φ = 2π γ G(I) r τ κ` in radians, with
/// `G(I) = gradient_per_ma · I · amplitude_scale`.
pub fn phase_integral(
    waveform: &GradientWaveform,
    gradient_per_ma: f64,
    current_ma: f64,
    r_m: f64,
    constants: &PhysicalConstants,
) -> Result<f64> {
    ensure_finite("gradient per mA", gradient_per_ma)?;
    ensure_finite("current", current_ma)?;
    ensure_finite("gradient coordinate", r_m)?;
    constants.validate()?;
    let kappa = waveform.effective_factor()?;
    let gradient = gradient_per_ma * current_ma * waveform.amplitude_scale;
    Ok(constants.gamma_rad() * gradient * r_m * waveform.duration_s * kappa)
}
