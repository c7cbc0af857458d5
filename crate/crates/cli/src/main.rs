use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use uot_core::bench::slices::{auto_bounds, export_slices, SliceSource};
use uot_core::bench::{
    alpha_sweep, run, scaling_bench, AlphaChoice, BenchError, ProblemSpec, RunConfig, RunReport, ScalingSpec,
    TrainOverrides,
};
use uot_core::lagrangian::SourceMode;
use uot_core::FieldPair;

/// Dynamic unbalanced optimal transport experiments.
#[derive(Debug, Parser)]
#[command(name = "uot", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on one problem and write the report and artifacts.
    Run {
        #[command(flatten)]
        common: Common,
        /// Source-cost weight.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// One run per alpha plus a balanced run.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        /// Comma-separated alpha values; `ot` adds the balanced run explicitly.
        #[arg(long, value_delimiter = ',', default_value = "1e-6,1e-4,1e-2,ot")]
        alpha: Vec<AlphaChoice>,
    },
    /// Epoch time and tape memory across dimensions.
    BenchScaling {
        #[arg(long, default_value_t = 5)]
        test: u8,
        #[arg(long, value_delimiter = ',', default_value = "2,10,30,60,100")]
        dim: Vec<usize>,
        #[arg(long, default_value_t = 1024)]
        batch: usize,
        /// Timed epochs per dimension.
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Density slices from a finished run directory.
    ExportSlices {
        /// Directory holding `report.json` and `params.json`.
        #[arg(long)]
        from: PathBuf,
        /// Output directory; defaults to `<from>/slices`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
        /// Columns and rows, e.g. `65,65`.
        #[arg(long, value_delimiter = ',')]
        bins: Option<Vec<usize>>,
        /// `x_lo,x_hi,y_lo,y_hi`
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        bounds: Option<Vec<f64>>,
        #[arg(long)]
        samples: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Built-in problem 1-12.
    #[arg(long)]
    test: Option<u8>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long = "lambda-p")]
    lambda_p: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON run config; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<(RunConfig, TrainOverrides), BenchError> {
        let mut cfg = match (&self.config, self.test) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path).map_err(|e| BenchError::Config(vec![format!("{}: {e}", path.display())]))?;
                RunConfig::from_json(&text)?
            }
            (None, Some(t)) => RunConfig::builtin(t),
            (None, None) => return Err(BenchError::Config(vec!["problem: give --test or --config".into()])),
        };
        if let Some(t) = self.test {
            cfg.problem = ProblemSpec::Builtin { test: t };
        }
        if self.dim.is_some() {
            cfg.dim = self.dim;
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        let flags = TrainOverrides {
            epochs: self.epochs,
            batch: self.batch,
            lambda: self.lambda,
            lambda_p: self.lambda_p,
            seed: self.seed,
            ..TrainOverrides::default()
        };
        Ok((cfg, flags))
    }
}

fn read(path: &Path) -> Result<String, BenchError> {
    std::fs::read_to_string(path).map_err(|e| BenchError::Config(vec![format!("{}: {e}", path.display())]))
}

fn export(
    from: &Path,
    out: Option<PathBuf>,
    times: Option<Vec<f64>>,
    bins: Option<Vec<usize>>,
    bounds: Option<Vec<f64>>,
    samples: Option<usize>,
) -> Result<(), BenchError> {
    if bins.as_ref().is_some_and(|b| b.len() != 2) {
        return Err(BenchError::Config(vec!["--bins: expected two values".into()]));
    }
    if bounds.as_ref().is_some_and(|b| b.len() != 4) {
        return Err(BenchError::Config(vec!["--bounds: expected four values".into()]));
    }
    let report = RunReport::from_json(&read(&from.join("report.json"))?)?;
    let doc = serde_json::from_str(&read(&from.join("params.json"))?)
        .map_err(|e| BenchError::Config(vec![format!("params.json: {e}")]))?;
    let fields = FieldPair::from_json(&doc).map_err(|e| BenchError::Config(vec![format!("params.json: {e}")]))?;
    let mut cfg = report.config;
    if let Some(t) = times {
        cfg.slices.times = t;
    }
    if let Some(b) = bins {
        cfg.slices.bins = [b[0], b[1]];
    }
    if let Some(b) = bounds {
        cfg.slices.bounds = Some([[b[0], b[1]], [b[2], b[3]]]);
    }
    if let Some(s) = samples {
        cfg.slices.samples = s;
    }
    cfg.slices.enabled = true;
    let run = cfg.resolve(&TrainOverrides::default())?;
    let dir = out.unwrap_or_else(|| from.join("slices"));
    std::fs::create_dir_all(&dir).map_err(|e| BenchError::Config(vec![format!("{}: {e}", dir.display())]))?;
    let bounds = run
        .slices
        .bounds
        .unwrap_or_else(|| auto_bounds(&run.problem.rho0, &run.problem.rho1));
    let src = SliceSource {
        fields: &fields,
        rho0: &run.problem.rho0,
        source: if run.train.ot_mode {
            SourceMode::Off
        } else {
            SourceMode::Learned
        },
        steps: run.train.steps,
        seed: run.train.seed,
    };
    for s in export_slices(src, &run.slices, bounds, &dir)? {
        println!("t = {}: {} (mass {:.6})", s.time, dir.join(&s.raster).display(), s.mass_in_bounds);
    }
    Ok(())
}

fn main_inner(cli: Cli) -> Result<(), BenchError> {
    match cli.command {
        Command::Run { common, alpha } => {
            let (cfg, mut flags) = common.load()?;
            flags.alpha = alpha;
            let outcome = run(&cfg, &flags)?;
            let r = &outcome.report;
            println!("final_gkl {:.16e}", r.final_gkl);
            println!("terminal_mass {:.16e}", r.terminal_mass);
            if let Some(v) = r.obstacle_violation {
                println!("obstacle_violation {v:.16e}");
            }
            println!("mean_epoch_time_s {:.6}", r.mean_epoch_time_s);
        }
        Command::SweepAlpha { common, alpha } => {
            let (cfg, flags) = common.load()?;
            let base = cfg.resolve(&flags)?;
            let report = alpha_sweep(&base, &alpha)?;
            print!("{}", report.table());
        }
        Command::BenchScaling {
            test,
            dim,
            batch,
            epochs,
            warmup,
            seed,
            out,
        } => {
            let spec = ScalingSpec {
                test,
                dims: dim,
                batch,
                epochs,
                warmup,
                seed,
            };
            let report = scaling_bench(&spec, out.as_deref())?;
            println!("{:>6}  {:>12}  {:>12}  {:>14}", "dim", "mean_s", "std_s", "peak_tape_MiB");
            for r in &report.rows {
                println!(
                    "{:>6}  {:>12.6}  {:>12.6}  {:>14.2}",
                    r.dim,
                    r.mean_s,
                    r.std_s,
                    r.peak_tape_bytes as f64 / (1u64 << 20) as f64
                );
            }
            println!("time ratio {:.3}", report.time_ratio);
        }
        Command::ExportSlices {
            from,
            out,
            times,
            bins,
            bounds,
            samples,
        } => export(&from, out, times, bins, bounds, samples)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
