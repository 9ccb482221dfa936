use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rescal::beamform::{pattern_metrics, write_pattern_csv};
use rescal::calib::RankPolicy;
use rescal::harness::{
    calibrate_from_file, output_path, run_beampattern, run_metrics_table, run_montecarlo,
    simulate_observations, write_metrics_csv, ExperimentConfig, HarnessError, Preset, Snr,
};
use rescal::slepian::SlepianBasis;
use rescal::sphere::Direction;

/// Residual-surface calibration of MIMO arrays.
#[derive(Parser)]
#[command(name = "rescal", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON file overriding preset values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `paper` (default) or `quick`.
    #[arg(long, global = true)]
    preset: Option<Preset>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the Slepian basis and write basis.json.
    Basis,
    /// Weight RMSE sweep over scatterer counts and SNRs.
    Montecarlo(BasisArg),
    /// Ideal, uncalibrated and calibrated azimuth cuts toward one target.
    Beampattern {
        #[command(flatten)]
        basis: BasisArg,
        #[arg(long, allow_hyphen_values = true)]
        azimuth_deg: Option<f64>,
        #[arg(long)]
        elevation_deg: Option<f64>,
    },
    /// Beamformer quality table per observation SNR.
    Metrics(BasisArg),
    /// Simulate one ground truth and export its observations.
    Simulate {
        #[command(flatten)]
        basis: BasisArg,
        #[arg(long, default_value_t = 150)]
        scatterers: usize,
        /// dB value or `noiseless`.
        #[arg(long, default_value = "8")]
        snr: Snr,
    },
    /// Fit residual surfaces to an observation CSV.
    Calibrate {
        #[arg(long)]
        observations: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        /// Calibration JSON; defaults to <out>/calibration.json.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        element_spacing: f64,
        /// Return the minimum-norm fit instead of failing on rank deficiency.
        #[arg(long)]
        allow_rank_deficient: bool,
    },
}

#[derive(Args)]
struct BasisArg {
    /// Previously exported basis.json; built from the config when absent.
    #[arg(long)]
    basis: Option<PathBuf>,
}

fn load_config(c: &Common) -> Result<ExperimentConfig, HarnessError> {
    let base = ExperimentConfig::preset(c.preset.unwrap_or(Preset::Paper));
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(&base, path)?,
        None => base,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn basis_for(cfg: &ExperimentConfig, arg: &BasisArg) -> Result<Arc<SlepianBasis>, HarnessError> {
    match &arg.basis {
        Some(p) => Ok(Arc::new(SlepianBasis::load(p)?)),
        None => cfg.build_basis(),
    }
}

fn create(path: &Path) -> Result<File, HarnessError> {
    Ok(File::create(path)?)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let cfg = load_config(&cli.common)?;
    let out = &cfg.out_dir;
    let prov = cfg.provenance();
    match cli.command {
        Command::Basis => {
            let basis = cfg.build_basis()?;
            let path = output_path(out, "basis.json")?;
            basis.save(&path)?;
            println!(
                "P={} Shannon={:.4} functions={} fingerprint={}",
                basis.max_degree(),
                basis.shannon(),
                basis.len(),
                basis.fingerprint()
            );
            println!("wrote {}", path.display());
        }
        Command::Montecarlo(b) => {
            let basis = basis_for(&cfg, &b)?;
            let table = run_montecarlo(&cfg, &basis)?;
            let wide = output_path(out, "montecarlo.csv")?;
            table.write_csv(create(&wide)?, &prov)?;
            let long = output_path(out, "montecarlo_cells.csv")?;
            table.write_cells_csv(create(&long)?, &prov)?;
            for c in table.cells.iter().filter(|c| c.excluded > 0) {
                eprintln!(
                    "N_s={} SNR={}: {} runs excluded ({})",
                    c.scatterers,
                    c.snr,
                    c.excluded,
                    c.first_error.as_deref().unwrap_or("")
                );
            }
            println!("wrote {} and {}", wide.display(), long.display());
        }
        Command::Beampattern {
            basis: b,
            azimuth_deg,
            elevation_deg,
        } => {
            let basis = basis_for(&cfg, &b)?;
            let [az0, el0] = cfg.pattern_target_deg;
            let target =
                Direction::from_degrees(azimuth_deg.unwrap_or(az0), elevation_deg.unwrap_or(el0))?;
            let patterns = run_beampattern(&cfg, &basis, &target)?;
            let path = output_path(out, "beampattern.csv")?;
            write_pattern_csv(create(&path)?, &patterns, Some(&prov))?;
            if let Ok(m) = pattern_metrics(&patterns[0], &patterns[1], &patterns[2], &target) {
                println!(
                    "recovery {:.4}  delta_theta uncal {:.3} deg, cal {:.3} deg",
                    m.calibrated.peak_snr_recovery_fraction,
                    m.uncalibrated.direction_error_deg,
                    m.calibrated.direction_error_deg
                );
            }
            println!("wrote {}", path.display());
        }
        Command::Metrics(b) => {
            let basis = basis_for(&cfg, &b)?;
            let rows = run_metrics_table(&cfg, &basis)?;
            let path = output_path(out, "metrics.csv")?;
            write_metrics_csv(create(&path)?, &rows, &prov)?;
            for r in rows.iter().filter(|r| r.excluded > 0) {
                eprintln!(
                    "SNR={}: {} samples excluded ({})",
                    r.snr,
                    r.excluded,
                    r.first_error.as_deref().unwrap_or("")
                );
            }
            println!("wrote {}", path.display());
        }
        Command::Simulate {
            basis: b,
            scatterers,
            snr,
        } => {
            let basis = basis_for(&cfg, &b)?;
            let (gt, obs) = simulate_observations(&cfg, &basis, scatterers, snr)?;
            let basis_path = output_path(out, "basis.json")?;
            basis.save(&basis_path)?;
            let gt_path = output_path(out, "ground_truth.json")?;
            let gt_file = gt.to_file(Some("basis.json".into()));
            std::fs::write(&gt_path, serde_json::to_string_pretty(&gt_file)?)?;
            let obs_path = output_path(out, "observations.csv")?;
            obs.write_csv(create(&obs_path)?, Some(&prov))?;
            println!(
                "wrote {}, {} and {}",
                obs_path.display(),
                gt_path.display(),
                basis_path.display()
            );
        }
        Command::Calibrate {
            observations,
            basis,
            output,
            element_spacing,
            allow_rank_deficient,
        } => {
            let policy = if allow_rank_deficient {
                RankPolicy::MinimumNorm
            } else {
                RankPolicy::Reject
            };
            let path = match output {
                Some(p) => p,
                None => output_path(out, "calibration.json")?,
            };
            let cal = calibrate_from_file(&observations, &basis, &path, element_spacing, policy)?;
            for (kind, els) in [("tx", &cal.tx), ("rx", &cal.rx)] {
                for e in els {
                    println!(
                        "{kind} {}: residual norm {:.6e}, rank {}",
                        e.element, e.residual_norm, e.rank
                    );
                }
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
