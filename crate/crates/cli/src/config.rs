//! Experiment configuration: one TOML file per run, units in every key name.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use nvphase::field::read_calibration_csv;
use nvphase::{
    fit_calibration, gradient_at, GradientWaveform, NvCenter, PhysicalConstants, PsfModel, PulseSequence,
    ScanGeometry, WaveformShape, WireCalibration,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub constants: ConstantsConfig,
    pub wire: Option<WireConfig>,
    pub sequence: Option<SequenceConfig>,
    #[serde(default)]
    pub centers: Vec<CenterConfig>,
    pub sweep: Option<SweepConfig>,
    pub scan: Option<ScanConfig>,
    pub resolution: Option<ResolutionConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsConfig {
    pub gamma_e_hz_per_t: f64,
    pub zero_field_splitting_hz: f64,
}

impl Default for ConstantsConfig {
    fn default() -> Self {
        let c = PhysicalConstants::default();
        Self {
            gamma_e_hz_per_t: c.gamma_e_hz_per_t,
            zero_field_splitting_hz: c.zero_field_splitting_hz,
        }
    }
}

/// Wire calibration from a `distance_um,field_mT` CSV or from explicit
/// inverse-law parameters, evaluated at the emitters' distance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireConfig {
    pub calibration_csv: Option<PathBuf>,
    pub calibration_current_ma: Option<f64>,
    pub amplitude_t_m: Option<f64>,
    pub offset_um: Option<f64>,
    pub reference_current_ma: Option<f64>,
    pub distance_um: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    #[serde(default = "default_waveform")]
    pub waveform: String,
    pub tau_us: f64,
    #[serde(default = "yes")]
    pub echo: bool,
    /// Takes precedence over `[wire]`.
    pub gradient_t_per_m_per_ma: Option<f64>,
    pub t2_us: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenterConfig {
    #[serde(default)]
    pub x_nm: f64,
    #[serde(default)]
    pub y_nm: f64,
    pub gradient_coordinate_nm: f64,
    #[serde(default = "one")]
    pub brightness: f64,
    #[serde(default = "default_contrast")]
    pub contrast: f64,
}

/// `points` currents `start + k·span/points`, so the span is the full
/// sampled extent seen by the FFT.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub start_ma: f64,
    pub span_ma: f64,
    pub points: usize,
    pub switch_search_max_ma: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    #[serde(default = "default_side")]
    pub width_px: usize,
    #[serde(default = "default_side")]
    pub height_px: usize,
    #[serde(default = "default_pixel_nm")]
    pub pixel_size_nm: f64,
    #[serde(default)]
    pub origin_x_nm: f64,
    #[serde(default)]
    pub origin_y_nm: f64,
    #[serde(default = "default_fwhm_nm")]
    pub fwhm_nm: f64,
    /// Expected photons of one unit-brightness ON emitter at the field center.
    #[serde(default = "default_budget")]
    pub photon_budget: f64,
    #[serde(default)]
    pub background_counts: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolutionConfig {
    /// Gradient for the switching bound; defaults to the sequence gradient at
    /// the end of the sweep.
    pub gradient_t_per_m: Option<f64>,
}

fn default_waveform() -> String {
    "rectangular".into()
}
fn yes() -> bool {
    true
}
fn one() -> f64 {
    1.0
}
fn default_contrast() -> f64 {
    NvCenter::DEFAULT_CONTRAST
}
fn default_side() -> usize {
    50
}
fn default_pixel_nm() -> f64 {
    20.0
}
fn default_fwhm_nm() -> f64 {
    436.0
}
fn default_budget() -> f64 {
    3.4e4
}

/// Loads `path`, applies `key.path=value` overrides, then deserializes.
pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut config: ExperimentConfig = if overrides.is_empty() {
        toml::from_str(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?
    } else {
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let merged = toml::to_string(&table)?;
        toml::from_str(&merged).map_err(|e| anyhow!("{} (after overrides): {e}", path.display()))?
    };
    if let Some(wire) = config.wire.as_mut() {
        if let Some(csv) = wire.calibration_csv.as_mut() {
            if csv.is_relative() {
                *csv = path.parent().unwrap_or(Path::new(".")).join(&*csv);
            }
        }
    }
    Ok(config)
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{item}` is not of the form key=value"))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut root = toml::Value::Table(std::mem::take(table));
    let result = set_path(&mut root, &parts, value).map_err(|e| anyhow!("override `{key}`: {e}"));
    if let toml::Value::Table(t) = root {
        *table = t;
    }
    result
}

fn set_path(node: &mut toml::Value, parts: &[&str], value: toml::Value) -> Result<()> {
    let (head, rest) = parts.split_first().ok_or_else(|| anyhow!("empty key"))?;
    let child = match node {
        toml::Value::Table(t) if rest.is_empty() => {
            t.insert(head.to_string(), value);
            return Ok(());
        }
        toml::Value::Table(t) => t
            .entry(head.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new())),
        toml::Value::Array(items) => {
            let index: usize = head.parse().map_err(|_| anyhow!("`{head}` is not a list index"))?;
            let len = items.len();
            let item = items
                .get_mut(index)
                .ok_or_else(|| anyhow!("index {index} out of range for a list of {len}"))?;
            if rest.is_empty() {
                *item = value;
                return Ok(());
            }
            item
        }
        _ => bail!("`{head}` is below a scalar"),
    };
    set_path(child, rest, value)
}

/// Validated physical objects built from a config.
pub struct Experiment {
    pub seed: u64,
    pub constants: PhysicalConstants,
    pub centers: Vec<NvCenter>,
    pub config: ExperimentConfig,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let c = &config.constants;
        let constants = PhysicalConstants {
            gamma_e_hz_per_t: c.gamma_e_hz_per_t,
            zero_field_splitting_hz: c.zero_field_splitting_hz,
        };
        constants.validate().context("constants")?;
        let centers = config
            .centers
            .iter()
            .enumerate()
            .map(|(i, c)| {
                NvCenter::new(
                    [c.x_nm * 1e-9, c.y_nm * 1e-9],
                    c.gradient_coordinate_nm * 1e-9,
                    c.brightness,
                    c.contrast,
                )
                .with_context(|| format!("centers.{i}"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed: config.seed,
            constants,
            centers,
            config,
        })
    }

    pub fn require_centers(&self, count: Option<usize>) -> Result<()> {
        match count {
            Some(n) if self.centers.len() != n => bail!("centers: need exactly {n}, found {}", self.centers.len()),
            None if self.centers.is_empty() => bail!("centers: at least one [[centers]] entry is required"),
            _ => Ok(()),
        }
    }

    pub fn pair(&self) -> Result<[NvCenter; 2]> {
        self.require_centers(Some(2))?;
        Ok([self.centers[0], self.centers[1]])
    }

    pub fn waveform(&self) -> Result<GradientWaveform> {
        let s = self.sequence_config()?;
        let shape: WaveformShape = s.waveform.parse().context("sequence.waveform")?;
        if !(s.tau_us > 0.0) {
            bail!("sequence.tau_us: must be positive, got {}", s.tau_us);
        }
        GradientWaveform::new(shape, s.tau_us * 1e-6, s.echo).context("sequence")
    }

    fn sequence_config(&self) -> Result<&SequenceConfig> {
        self.config
            .sequence
            .as_ref()
            .ok_or_else(|| anyhow!("sequence: missing [sequence] table"))
    }

    /// Gradient per mA at the emitters, T·m⁻¹·mA⁻¹.
    pub fn gradient_per_ma(&self) -> Result<f64> {
        if let Some(g) = self.sequence_config()?.gradient_t_per_m_per_ma {
            return Ok(g);
        }
        let wire = self
            .config
            .wire
            .as_ref()
            .ok_or_else(|| anyhow!("sequence.gradient_t_per_m_per_ma: required when no [wire] table is given"))?;
        let cal = self.calibration(wire)?;
        Ok(gradient_at(&cal, wire.distance_um * 1e-6, 1.0)
            .context("wire.distance_um")?
            .magnitude_t_per_m)
    }

    fn calibration(&self, wire: &WireConfig) -> Result<WireCalibration> {
        if let Some(csv) = &wire.calibration_csv {
            if !csv.exists() {
                bail!("wire.calibration_csv: {} does not exist", csv.display());
            }
            let current = wire
                .calibration_current_ma
                .ok_or_else(|| anyhow!("wire.calibration_current_ma: required with a calibration CSV"))?;
            let points = read_calibration_csv(csv).with_context(|| format!("wire.calibration_csv: {}", csv.display()))?;
            return Ok(fit_calibration(&points, current).context("wire calibration fit")?.calibration);
        }
        match (wire.amplitude_t_m, wire.offset_um, wire.reference_current_ma) {
            (Some(a), Some(d0), Some(i)) => WireCalibration::new(a, d0 * 1e-6, i).context("wire"),
            _ => bail!("wire: give calibration_csv or all of amplitude_t_m, offset_um, reference_current_ma"),
        }
    }

    pub fn sequence(&self) -> Result<PulseSequence> {
        let seq = PulseSequence::new(self.waveform()?, self.gradient_per_ma()?).context("sequence")?;
        match self.sequence_config()?.t2_us {
            Some(t2) => seq.with_t2(t2 * 1e-6).context("sequence.t2_us"),
            None => Ok(seq),
        }
    }

    pub fn sweep(&self) -> Result<&SweepConfig> {
        let s = self
            .config
            .sweep
            .as_ref()
            .ok_or_else(|| anyhow!("sweep: missing [sweep] table"))?;
        if !(s.span_ma > 0.0 && s.span_ma.is_finite()) {
            bail!("sweep.span_ma: current range must be positive, got {}", s.span_ma);
        }
        if !(s.start_ma >= 0.0 && s.start_ma.is_finite()) {
            bail!("sweep.start_ma: must be finite and >= 0, got {}", s.start_ma);
        }
        if s.points < 2 {
            bail!("sweep.points: need at least 2, got {}", s.points);
        }
        Ok(s)
    }

    pub fn currents(&self) -> Result<Vec<f64>> {
        let s = self.sweep()?;
        let step = s.span_ma / s.points as f64;
        Ok((0..s.points).map(|k| s.start_ma + k as f64 * step).collect())
    }

    pub fn scan(&self) -> Result<ScanSetup> {
        let s = self
            .config
            .scan
            .as_ref()
            .ok_or_else(|| anyhow!("scan: missing [scan] table"))?;
        let geometry = ScanGeometry {
            width_px: s.width_px,
            height_px: s.height_px,
            pixel_size_m: s.pixel_size_nm * 1e-9,
            origin_m: [s.origin_x_nm * 1e-9, s.origin_y_nm * 1e-9],
        };
        geometry.validate().context("scan")?;
        if !(s.photon_budget >= 0.0 && s.photon_budget.is_finite()) {
            bail!("scan.photon_budget: must be finite and >= 0, got {}", s.photon_budget);
        }
        if !(s.background_counts >= 0.0 && s.background_counts.is_finite()) {
            bail!("scan.background_counts: must be finite and >= 0, got {}", s.background_counts);
        }
        let mut psf = PsfModel {
            fwhm_m: s.fwhm_nm * 1e-9,
            peak_rate: 0.0,
        };
        psf.validate().context("scan.fwhm_nm")?;
        psf.peak_rate = psf.peak_rate_for_budget(s.photon_budget, &geometry);
        Ok(ScanSetup {
            geometry,
            psf,
            background: s.background_counts,
        })
    }
}

pub struct ScanSetup {
    pub geometry: ScanGeometry,
    pub psf: PsfModel,
    pub background: f64,
}
