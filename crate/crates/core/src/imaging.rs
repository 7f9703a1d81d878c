//! Confocal scan synthesis: Gaussian PSF, pixel grids, Poisson photon counts,
//! joint-state maps and map subtraction.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::spin::{JointState, NvCenter};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsfModel {
    pub fwhm_m: f64,
    /// Expected photons per pixel dwell at the center of a unit-brightness
    /// ON emitter.
    pub peak_rate: f64,
}

impl Default for PsfModel {
    fn default() -> Self {
        Self {
            fwhm_m: 436e-9,
            peak_rate: 100.0,
        }
    }
}

impl PsfModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fwhm_m > 0.0 && self.fwhm_m.is_finite()) {
            return Err(Error::InvalidArgument(format!("FWHM must be positive, got {}", self.fwhm_m)));
        }
        if !(self.peak_rate >= 0.0 && self.peak_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "peak rate must be finite and >= 0, got {}",
                self.peak_rate
            )));
        }
        Ok(())
    }

    /// Gaussian standard deviation equivalent to the FWHM.
    pub fn sigma_m(&self) -> f64 {
        self.fwhm_m / (8.0 * std::f64::consts::LN_2).sqrt()
    }

    /// Peak rate at which a unit-brightness emitter centered on `geometry`
    /// yields `photons` expected counts summed over the grid.
    pub fn peak_rate_for_budget(&self, photons: f64, geometry: &ScanGeometry) -> f64 {
        let center = geometry.center_m();
        let total: f64 = geometry
            .pixel_centers()
            .map(|p| psf_value(self, [p[0] - center[0], p[1] - center[1]]))
            .sum();
        photons / total
    }
}

/// `exp(−4 ln2 |offset|² / FWHM²)`, equal to 1 at the origin.
pub fn psf_value(psf: &PsfModel, offset_m: [f64; 2]) -> f64 {
    let r2 = offset_m[0] * offset_m[0] + offset_m[1] * offset_m[1];
    (-4.0 * std::f64::consts::LN_2 * r2 / (psf.fwhm_m * psf.fwhm_m)).exp()
}

/// Pixel grid. `origin_m` is the outer corner of pixel `(0, 0)`; counts are
/// stored row-major with `x` fastest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    pub width_px: usize,
    pub height_px: usize,
    pub pixel_size_m: f64,
    pub origin_m: [f64; 2],
}

impl Default for ScanGeometry {
    /// 50 × 50 pixels over 1 × 1 µm².
    fn default() -> Self {
        Self {
            width_px: 50,
            height_px: 50,
            pixel_size_m: 20e-9,
            origin_m: [0.0, 0.0],
        }
    }
}

impl ScanGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::InvalidArgument("scan grid is empty".into()));
        }
        if !(self.pixel_size_m > 0.0 && self.pixel_size_m.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "pixel size must be positive, got {}",
                self.pixel_size_m
            )));
        }
        ensure_finite("origin x", self.origin_m[0])?;
        ensure_finite("origin y", self.origin_m[1])?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.width_px * self.height_px
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixel_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.origin_m[0] + (ix as f64 + 0.5) * self.pixel_size_m,
            self.origin_m[1] + (iy as f64 + 0.5) * self.pixel_size_m,
        ]
    }

    pub fn pixel_centers(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.len()).map(|k| self.pixel_center(k % self.width_px, k / self.width_px))
    }

    /// Center of the scanned field.
    pub fn center_m(&self) -> [f64; 2] {
        [
            self.origin_m[0] + 0.5 * self.width_px as f64 * self.pixel_size_m,
            self.origin_m[1] + 0.5 * self.height_px as f64 * self.pixel_size_m,
        ]
    }
}

/// What a map holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MapLabel {
    /// Poisson counts of one joint state.
    Measured { state: JointState },
    /// Expected counts of one joint state.
    Noiseless { state: JointState },
    /// Difference of two maps; `isolates` is the 0-based emitter left over.
    Difference { isolates: Option<usize> },
}

impl MapLabel {
    pub fn state(&self) -> Option<JointState> {
        match self {
            MapLabel::Measured { state } | MapLabel::Noiseless { state } => Some(*state),
            MapLabel::Difference { .. } => None,
        }
    }

    /// Short text label: `00`, `01`, `10`, `11`, `noiseless` or `difference`.
    pub fn short(&self) -> &'static str {
        match self {
            MapLabel::Measured { state } => state.label(),
            MapLabel::Noiseless { .. } => "noiseless",
            MapLabel::Difference { .. } => "difference",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanImage {
    pub geometry: ScanGeometry,
    pub counts: Vec<f64>,
    pub label: MapLabel,
    pub seed: Option<u64>,
}

impl ScanImage {
    pub fn new(geometry: ScanGeometry, counts: Vec<f64>, label: MapLabel) -> Result<Self> {
        geometry.validate()?;
        if counts.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "{} counts for a {}x{} grid",
                counts.len(),
                geometry.width_px,
                geometry.height_px
            )));
        }
        Ok(Self {
            geometry,
            counts,
            label,
            seed: None,
        })
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.counts[iy * self.geometry.width_px + ix]
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Store the expected rate itself.
    Expected,
    /// Independent Poisson draw per pixel.
    Poisson { seed: u64 },
}

/// Seed of stream `stream` in the family rooted at `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Seed used for the map of `state` when a scan set shares one top-level seed.
pub fn map_seed(seed: u64, state: JointState) -> u64 {
    let stream = match state {
        JointState::S00 => 1,
        JointState::S01 => 2,
        JointState::S10 => 3,
        JointState::S11 => 4,
    };
    derive_seed(seed, stream)
}

/// Expected counts `λ(p) = b + Σ_j C_j (1 − c_j off_j) · peak · psf(p − r_j)`.
pub fn expected_rate(
    centers: &[NvCenter],
    psf: &PsfModel,
    joint_state: JointState,
    background_rate: f64,
    point_m: [f64; 2],
) -> f64 {
    let bits = joint_state.bits();
    background_rate
        + centers
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let off = bits.get(j).copied().unwrap_or(0) as f64;
                let offset = [point_m[0] - c.position_m[0], point_m[1] - c.position_m[1]];
                c.brightness * (1.0 - c.contrast * off) * psf.peak_rate * psf_value(psf, offset)
            })
            .sum::<f64>()
}

/// One confocal map of the pair in `joint_state`.
///
/// Each pixel draws from its own ChaCha stream keyed by `(seed, pixel index)`,
/// so the result does not depend on evaluation order.
pub fn synthesize_scan(
    centers: &[NvCenter; 2],
    psf: &PsfModel,
    geometry: &ScanGeometry,
    joint_state: JointState,
    background_rate: f64,
    sampling: Sampling,
) -> Result<ScanImage> {
    geometry.validate()?;
    psf.validate()?;
    for c in centers {
        c.validate()?;
    }
    if !(background_rate >= 0.0 && background_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "background rate must be finite and >= 0, got {background_rate}"
        )));
    }

    let width = geometry.width_px;
    let counts: Vec<f64> = (0..geometry.len())
        .into_par_iter()
        .map(|k| {
            let point = geometry.pixel_center(k % width, k / width);
            let lambda = expected_rate(centers, psf, joint_state, background_rate, point);
            match sampling {
                Sampling::Expected => lambda,
                Sampling::Poisson { seed } => poisson_draw(seed, k as u64, lambda),
            }
        })
        .collect();

    let (label, seed) = match sampling {
        Sampling::Expected => (MapLabel::Noiseless { state: joint_state }, None),
        Sampling::Poisson { seed } => (MapLabel::Measured { state: joint_state }, Some(seed)),
    };
    Ok(ScanImage {
        geometry: *geometry,
        counts,
        label,
        seed,
    })
}

fn poisson_draw(seed: u64, pixel: u64, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel);
    Poisson::new(lambda)
        .expect("rate is positive and finite")
        .sample(&mut rng)
}

/// Pixelwise `on_on − one_off`.
pub fn subtract_maps(on_on: &ScanImage, one_off: &ScanImage) -> Result<ScanImage> {
    if on_on.geometry != one_off.geometry || on_on.counts.len() != one_off.counts.len() {
        return Err(Error::Shape(format!(
            "cannot subtract a {}x{} map from a {}x{} map with different geometry",
            one_off.geometry.width_px,
            one_off.geometry.height_px,
            on_on.geometry.width_px,
            on_on.geometry.height_px
        )));
    }
    let isolates = match (on_on.label.state(), one_off.label.state()) {
        (Some(JointState::S00), Some(JointState::S01)) => Some(1),
        (Some(JointState::S00), Some(JointState::S10)) => Some(0),
        _ => None,
    };
    Ok(ScanImage {
        geometry: on_on.geometry,
        counts: on_on
            .counts
            .iter()
            .zip(&one_off.counts)
            .map(|(a, b)| a - b)
            .collect(),
        label: MapLabel::Difference { isolates },
        seed: None,
    })
}

/// Sidecar record stored next to each PGM map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanMetadata {
    pub width_px: usize,
    pub height_px: usize,
    pub pixel_size_nm: f64,
    pub origin_x_nm: f64,
    pub origin_y_nm: f64,
    pub state_label: String,
    pub label: MapLabel,
    pub seed: Option<u64>,
}

impl ScanMetadata {
    pub fn of(image: &ScanImage) -> Self {
        let g = &image.geometry;
        Self {
            width_px: g.width_px,
            height_px: g.height_px,
            pixel_size_nm: g.pixel_size_m * 1e9,
            origin_x_nm: g.origin_m[0] * 1e9,
            origin_y_nm: g.origin_m[1] * 1e9,
            state_label: image.label.short().to_string(),
            label: image.label,
            seed: image.seed,
        }
    }

    pub fn geometry(&self) -> ScanGeometry {
        ScanGeometry {
            width_px: self.width_px,
            height_px: self.height_px,
            pixel_size_m: self.pixel_size_nm * 1e-9,
            origin_m: [self.origin_x_nm * 1e-9, self.origin_y_nm * 1e-9],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmFormat {
    /// ASCII.
    P2,
    /// Binary; 8-bit samples when maxval < 256, otherwise 16-bit big-endian.
    P5,
}

/// Writes counts rounded to the nearest integer. Negative or > 65535 counts
/// cannot be represented.
pub fn write_pgm<W: Write>(image: &ScanImage, format: PgmFormat, mut out: W) -> Result<()> {
    let values = image
        .counts
        .iter()
        .map(|&c| {
            let v = c.round();
            if !(0.0..=65535.0).contains(&v) {
                Err(Error::InvalidArgument(format!("count {c} does not fit a PGM sample")))
            } else {
                Ok(v as u16)
            }
        })
        .collect::<Result<Vec<u16>>>()?;
    let maxval = values.iter().copied().max().unwrap_or(0).max(1);
    let g = &image.geometry;
    match format {
        PgmFormat::P2 => {
            writeln!(out, "P2")?;
            writeln!(out, "{} {}", g.width_px, g.height_px)?;
            writeln!(out, "{maxval}")?;
            for row in values.chunks(g.width_px) {
                let line: Vec<String> = row.iter().map(u16::to_string).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
        PgmFormat::P5 => {
            write!(out, "P5\n{} {}\n{maxval}\n", g.width_px, g.height_px)?;
            if maxval < 256 {
                out.write_all(&values.iter().map(|&v| v as u8).collect::<Vec<_>>())?;
            } else {
                for v in values {
                    out.write_all(&v.to_be_bytes())?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a P2 or P5 graymap as `(width, height, samples)`.
pub fn read_pgm<R: Read>(input: R) -> Result<(usize, usize, Vec<u16>)> {
    let mut reader = BufReader::new(input);
    let mut header = Vec::new();
    // magic, width, height, maxval; '#' comments allowed between tokens
    while header.len() < 4 {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Parse("truncated PGM header".into()));
        }
        let content = line.split('#').next().unwrap_or("");
        header.extend(content.split_whitespace().map(str::to_string));
    }
    if header.len() > 4 {
        return Err(Error::Parse("unexpected data on the PGM maxval line".into()));
    }
    let num = |i: usize| -> Result<usize> {
        header[i]
            .parse::<usize>()
            .map_err(|e| Error::Parse(format!("PGM header field `{}`: {e}", header[i])))
    };
    let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Parse(format!("PGM maxval {maxval} out of range")));
    }
    let n = width * height;
    let samples: Vec<u16> = match header[0].as_str() {
        "P2" => {
            let mut rest = String::new();
            reader.read_to_string(&mut rest)?;
            rest.split_whitespace()
                .map(|t| t.parse::<u16>().map_err(|e| Error::Parse(format!("PGM sample `{t}`: {e}"))))
                .collect::<Result<_>>()?
        }
        "P5" => {
            let mut bytes = Vec::new();
            reader.read_to_end(&mut bytes)?;
            if maxval < 256 {
                bytes.into_iter().map(u16::from).collect()
            } else {
                bytes
                    .chunks_exact(2)
                    .map(|b| u16::from_be_bytes([b[0], b[1]]))
                    .collect()
            }
        }
        other => return Err(Error::Parse(format!("unsupported PGM magic `{other}`"))),
    };
    if samples.len() != n {
        return Err(Error::Parse(format!("PGM holds {} samples, expected {n}", samples.len())));
    }
    Ok((width, height, samples))
}

/// CSV of raw counts with header `x_px,y_px,x_nm,y_nm,counts`.
pub fn write_counts_csv<W: Write>(image: &ScanImage, out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["x_px", "y_px", "x_nm", "y_nm", "counts"])?;
    let g = &image.geometry;
    for (k, c) in image.counts.iter().enumerate() {
        let (ix, iy) = (k % g.width_px, k / g.width_px);
        let p = g.pixel_center(ix, iy);
        writer.write_record([
            ix.to_string(),
            iy.to_string(),
            (p[0] * 1e9).to_string(),
            (p[1] * 1e9).to_string(),
            c.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes `<stem>.pgm` (P2), `<stem>.json` and `<stem>.csv` into `dir`.
pub fn save_map(image: &ScanImage, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let pgm = dir.join(format!("{stem}.pgm"));
    write_pgm(image, PgmFormat::P2, std::fs::File::create(&pgm)?)?;
    let meta = serde_json::to_string_pretty(&ScanMetadata::of(image))?;
    std::fs::write(dir.join(format!("{stem}.json")), meta + "\n")?;
    write_counts_csv(image, std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
    Ok(pgm)
}

/// Loads a map from a PGM file and its JSON sidecar.
pub fn load_map(pgm: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<ScanImage> {
    let meta: ScanMetadata = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
    let (w, h, samples) = read_pgm(std::fs::File::open(pgm)?)?;
    if w != meta.width_px || h != meta.height_px {
        return Err(Error::Shape(format!(
            "PGM is {w}x{h} but its sidecar says {}x{}",
            meta.width_px, meta.height_px
        )));
    }
    let mut image = ScanImage::new(
        meta.geometry(),
        samples.into_iter().map(f64::from).collect(),
        meta.label,
    )?;
    image.seed = meta.seed;
    Ok(image)
}
