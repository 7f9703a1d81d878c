#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nvphase::imaging::{load_map, map_seed, save_map};
use nvphase::localize::LocalizationRecord;
use nvphase::{
    fft_reconstruct, find_switch_currents, fit_gaussian2d, min_resolution, pair_separation, run_current_sweep,
    subtract_maps, synthesize_scan, Error, JointState, Sampling, ScanImage,
};
use serde::Serialize;

use config::Experiment;

#[derive(Parser)]
#[command(name = "nvphase", version, about = "Phase-encoded photoswitching experiments for NV-center pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Signal versus gradient current, spatial spectrum and switching currents.
    Sweep(CommonArgs),
    /// Three confocal maps (00, 01, 10) from one seed family.
    Scan(CommonArgs),
    /// Subtract maps, fit both spots and report their separation.
    Localize {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding map_00, map_01 and map_10 from `scan`.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Use expected counts instead of Poisson draws.
        #[arg(long)]
        noiseless: bool,
    },
    /// Switching-resolution bound and FFT pixel size.
    Resolution(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment TOML file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// `key.path=value`, applied before validation. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl CommonArgs {
    fn experiment(&self) -> Result<Experiment> {
        let path = self.config.as_ref().ok_or_else(|| anyhow!("--config is required"))?;
        let mut cfg = config::load(path, &self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Experiment::new(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

#[derive(Serialize)]
struct CenterFrequency {
    gradient_coordinate_nm: f64,
    frequency_per_ma: f64,
}

#[derive(Serialize)]
struct PeakReport {
    position_nm: f64,
    frequency_per_ma: f64,
    magnitude: f64,
}

#[derive(Serialize)]
struct SwitchReport {
    target: String,
    switchable: bool,
    current_ma: f64,
    infidelity: f64,
    phase_difference_rad: Option<f64>,
}

#[derive(Serialize)]
struct SweepSummary {
    points: usize,
    start_ma: f64,
    span_ma: f64,
    gradient_t_per_m_per_ma: f64,
    waveform: String,
    kappa: f64,
    centers: Vec<CenterFrequency>,
    fft_resolution_nm: Option<f64>,
    spectral_peaks: Vec<PeakReport>,
    switching: Vec<SwitchReport>,
}

fn cmd_sweep(args: &CommonArgs) -> Result<()> {
    let exp = args.experiment()?;
    exp.require_centers(None)?;
    let seq = exp.sequence()?;
    let currents = exp.currents()?;
    let sweep = run_current_sweep(&seq, &exp.centers, &currents, &exp.constants)?;
    let out = args.out_dir()?;
    let csv_path = out.join("sweep.csv");
    sweep.write_csv(fs::File::create(&csv_path)?)?;

    let cycles = seq.cycles_per_ma_per_m(&exp.constants)?;
    let spectrum = match fft_reconstruct(&sweep, &seq, &exp.constants) {
        Ok(s) => Some(s),
        Err(Error::Sampling(_)) | Err(Error::NoEncoding) => None,
        Err(e) => return Err(e.into()),
    };
    let mut switching = Vec::new();
    if exp.centers.len() == 2 {
        let range = exp.sweep()?;
        let hi = range.switch_search_max_ma.unwrap_or(range.start_ma + range.span_ma);
        for target in [JointState::S01, JointState::S10] {
            let pair = exp.pair()?;
            switching.push(match find_switch_currents(&seq, &pair, (range.start_ma, hi), target, &exp.constants) {
                Ok(s) => SwitchReport {
                    target: target.to_string(),
                    switchable: true,
                    current_ma: s.current_ma,
                    infidelity: s.infidelity,
                    phase_difference_rad: Some(s.phase_difference),
                },
                Err(Error::NotSwitchable { best_cost, best_current_ma }) => SwitchReport {
                    target: target.to_string(),
                    switchable: false,
                    current_ma: best_current_ma,
                    infidelity: best_cost,
                    phase_difference_rad: None,
                },
                Err(e) => return Err(e.into()),
            });
        }
    }
    let summary = SweepSummary {
        points: sweep.len(),
        start_ma: currents[0],
        span_ma: exp.sweep()?.span_ma,
        gradient_t_per_m_per_ma: seq.gradient_per_ma,
        waveform: seq.waveform.shape.to_string(),
        kappa: seq.waveform.effective_factor()?,
        centers: exp
            .centers
            .iter()
            .map(|c| CenterFrequency {
                gradient_coordinate_nm: c.gradient_coordinate_m * 1e9,
                frequency_per_ma: (cycles * c.gradient_coordinate_m).abs(),
            })
            .collect(),
        fft_resolution_nm: spectrum.as_ref().map(|s| s.resolution_m * 1e9),
        spectral_peaks: spectrum
            .as_ref()
            .map(|s| {
                s.peaks
                    .iter()
                    .map(|p| PeakReport {
                        position_nm: p.position_m * 1e9,
                        frequency_per_ma: p.position_m * cycles.abs(),
                        magnitude: p.magnitude,
                    })
                    .collect()
            })
            .unwrap_or_default(),
        switching,
    };
    let summary_path = write_json(out, "sweep_summary.json", &summary)?;
    println!("wrote {} and {}", csv_path.display(), summary_path.display());
    for p in &summary.spectral_peaks {
        println!("spectral peak at {:.1} nm ({:.3} cycles/mA)", p.position_nm, p.frequency_per_ma);
    }
    for s in &summary.switching {
        if s.switchable {
            println!("switch {} at {:.4} mA (infidelity {:.2e})", s.target, s.current_ma, s.infidelity);
        } else {
            println!("switch {} not reachable; best infidelity {:.3} at {:.4} mA", s.target, s.infidelity, s.current_ma);
        }
    }
    Ok(())
}

const MAP_STATES: [JointState; 3] = [JointState::S00, JointState::S01, JointState::S10];

fn synthesize_set(exp: &Experiment, noiseless: bool) -> Result<Vec<ScanImage>> {
    let pair = exp.pair()?;
    let setup = exp.scan()?;
    MAP_STATES
        .iter()
        .map(|&state| {
            let sampling = if noiseless {
                Sampling::Expected
            } else {
                Sampling::Poisson { seed: map_seed(exp.seed, state) }
            };
            Ok(synthesize_scan(&pair, &setup.psf, &setup.geometry, state, setup.background, sampling)?)
        })
        .collect()
}

#[derive(Serialize)]
struct ScanSummary {
    seed: u64,
    photon_budget: f64,
    peak_rate_counts: f64,
    background_counts: f64,
    maps: Vec<MapSummary>,
}

#[derive(Serialize)]
struct MapSummary {
    state: String,
    file: String,
    map_seed: Option<u64>,
    total_counts: f64,
}

fn cmd_scan(args: &CommonArgs) -> Result<()> {
    let exp = args.experiment()?;
    let setup = exp.scan()?;
    let maps = synthesize_set(&exp, false)?;
    let out = args.out_dir()?;
    let mut summaries = Vec::new();
    for map in &maps {
        let stem = format!("map_{}", map.label.short());
        let path = save_map(map, out, &stem)?;
        summaries.push(MapSummary {
            state: map.label.short().to_string(),
            file: format!("{stem}.pgm"),
            map_seed: map.seed,
            total_counts: map.total(),
        });
        println!("wrote {}", path.display());
    }
    write_json(
        out,
        "scan_summary.json",
        &ScanSummary {
            seed: exp.seed,
            photon_budget: exp.config.scan.as_ref().map_or(0.0, |s| s.photon_budget),
            peak_rate_counts: setup.psf.peak_rate,
            background_counts: setup.background,
            maps: summaries,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct TruthReport {
    emitter_1_nm: [f64; 2],
    emitter_2_nm: [f64; 2],
    separation_nm: f64,
}

#[derive(Serialize)]
struct LocalizationReport {
    source: String,
    emitter_1: LocalizationRecord,
    emitter_2: LocalizationRecord,
    separation_nm: f64,
    separation_uncertainty_nm: f64,
    truth: Option<TruthReport>,
}

fn load_set(dir: &Path) -> Result<Vec<ScanImage>> {
    MAP_STATES
        .iter()
        .map(|state| {
            let stem = format!("map_{}", state.label());
            load_map(dir.join(format!("{stem}.pgm")), dir.join(format!("{stem}.json")))
                .with_context(|| format!("loading {stem} from {}", dir.display()))
        })
        .collect()
}

fn cmd_localize(args: &CommonArgs, images: Option<&Path>, noiseless: bool) -> Result<()> {
    let (maps, truth, source) = match images {
        Some(dir) => {
            if noiseless {
                bail!("--noiseless applies to --config runs only");
            }
            (load_set(dir)?, None, dir.display().to_string())
        }
        None => {
            let exp = args.experiment()?;
            let maps = synthesize_set(&exp, noiseless)?;
            let [a, b] = exp.pair()?;
            let truth = TruthReport {
                emitter_1_nm: a.position_m.map(|v| v * 1e9),
                emitter_2_nm: b.position_m.map(|v| v * 1e9),
                separation_nm: (a.position_m[0] - b.position_m[0]).hypot(a.position_m[1] - b.position_m[1]) * 1e9,
            };
            (maps, Some(truth), "config".to_string())
        }
    };
    for (map, state) in maps.iter().zip(MAP_STATES) {
        if map.label.state() != Some(state) {
            bail!("map for {state} is labelled `{}`", map.label.short());
        }
    }
    let first = fit_gaussian2d(&subtract_maps(&maps[0], &maps[2])?).context("fitting emitter 1 (00 - 10)")?;
    let second = fit_gaussian2d(&subtract_maps(&maps[0], &maps[1])?).context("fitting emitter 2 (00 - 01)")?;
    let sep = pair_separation(&first, &second);
    let report = LocalizationReport {
        source,
        emitter_1: first.record(),
        emitter_2: second.record(),
        separation_nm: sep.distance_m * 1e9,
        separation_uncertainty_nm: sep.uncertainty_m * 1e9,
        truth,
    };
    let path = write_json(args.out_dir()?, "localization.json", &report)?;
    for (name, r) in [("NV1", &report.emitter_1), ("NV2", &report.emitter_2)] {
        println!(
            "{name}: ({:.2}, {:.2}) nm, sigma ({:.2}, {:.2}) nm",
            r.center_x_nm, r.center_y_nm, r.sigma_x_nm, r.sigma_y_nm
        );
    }
    println!(
        "separation {:.2} ± {:.2} nm; wrote {}",
        report.separation_nm,
        report.separation_uncertainty_nm,
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ResolutionReport {
    gradient_t_per_m: f64,
    tau_us: f64,
    waveform: String,
    kappa: f64,
    min_resolution_nm: f64,
    fft_span_ma: Option<f64>,
    fft_resolution_nm: Option<f64>,
}

fn cmd_resolution(args: &CommonArgs) -> Result<()> {
    let exp = args.experiment()?;
    let waveform = exp.waveform()?;
    let configured = exp.config.resolution.as_ref().and_then(|r| r.gradient_t_per_m);
    let (seq, span) = if exp.config.sweep.is_some() {
        (Some(exp.sequence()?), Some(exp.sweep()?.span_ma))
    } else {
        (None, None)
    };
    let gradient = match (configured, &seq) {
        (Some(g), _) => g,
        (None, Some(seq)) => {
            let s = exp.sweep()?;
            seq.gradient_per_ma * (s.start_ma + s.span_ma)
        }
        (None, None) => bail!("resolution.gradient_t_per_m: required when no [sweep] table is given"),
    };
    let dr = min_resolution(gradient, &waveform, &exp.constants).context("resolution.gradient_t_per_m")?;
    let fft = match (&seq, span) {
        (Some(seq), Some(span)) => {
            let cycles = seq.cycles_per_ma_per_m(&exp.constants)?.abs();
            if cycles == 0.0 {
                return Err(Error::NoEncoding.into());
            }
            Some(1.0 / (cycles * span))
        }
        _ => None,
    };
    let report = ResolutionReport {
        gradient_t_per_m: gradient,
        tau_us: waveform.duration_s * 1e6,
        waveform: waveform.shape.to_string(),
        kappa: waveform.effective_factor()?,
        min_resolution_nm: dr * 1e9,
        fft_span_ma: span,
        fft_resolution_nm: fft.map(|r| r * 1e9),
    };
    let path = write_json(args.out_dir()?, "resolution.json", &report)?;
    println!("switching resolution {:.4} nm at {gradient} T/m", report.min_resolution_nm);
    if let Some(r) = report.fft_resolution_nm {
        println!("FFT pixel {r:.1} nm over {} mA", span.unwrap_or_default());
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Scan(args) => cmd_scan(&args),
        Command::Localize { common, images, noiseless } => cmd_localize(&common, images.as_deref(), noiseless),
        Command::Resolution(args) => cmd_resolution(&args),
    }
}
