//! One training run and its output files.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use log::{error, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ResolvedRun, RunConfig, TrainOverrides};
use super::slices::{auto_bounds, export_slices, SliceSource, SliceSummary};
use super::{create_dir, write_file, BenchError};
use crate::densities::GaussianMixture;
use crate::fields::{FieldPair, Trainable};
use crate::lagrangian::{write_trajectory_csv, Integrator, SourceMode};
use crate::objective::{obstacle_violation, ObjectiveTerms, ObstacleMap, EXP_CLAMP};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::{self, pretrain_triggered, Phase, TrainConfig, TrainError, TrainHistory, Trained};

/// Random stream of the final evaluation batch.
pub const EVAL_STREAM: u64 = 2;

/// Samples written to `trajectory.csv` unless configured.
pub const DEFAULT_TRAJECTORY_SAMPLES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    NumericalAbort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortInfo {
    pub phase: Phase,
    pub epoch: usize,
    pub reason: String,
}

/// Densities the run actually used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemEcho {
    pub rho0: GaussianMixture,
    pub rho1: GaussianMixture,
    pub obstacles: Option<ObstacleMap>,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub status: RunStatus,
    pub test: Option<u8>,
    pub dim: usize,
    pub seed: u64,
    /// Terminal penalty on the evaluation batch.
    #[serde(deserialize_with = "crate::json::f64_or_nan")]
    pub final_gkl: f64,
    #[serde(deserialize_with = "crate::json::f64_or_nan")]
    pub terminal_mass: f64,
    pub terms: ObjectiveTerms,
    pub clamp_events: usize,
    pub eval_samples: usize,
    pub mean_epoch_time_s: f64,
    pub epochs_run: usize,
    pub pretrain_epochs_run: usize,
    /// Mass-weighted share of trajectory nodes inside obstacles.
    pub obstacle_violation: Option<f64>,
    pub abort: Option<AbortInfo>,
    pub problem: ProblemEcho,
    /// Feeding this back as a config file reproduces the run.
    pub config: RunConfig,
    /// Settings the method leaves open and the values this run used.
    pub assumptions: Vec<String>,
    pub files: Vec<String>,
}

/// A finished run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub fields: FieldPair,
    pub history: TrainHistory,
    pub pretrain: Option<TrainHistory>,
    pub slices: Vec<SliceSummary>,
}

/// Final metrics of a parameter set on the evaluation batch.
#[derive(Debug, Clone)]
struct FinalEval {
    terms: ObjectiveTerms,
    terminal_mass: f64,
    clamp_events: usize,
    violation: Option<f64>,
    samples: usize,
}

pub fn eval_batch(rho0: &GaussianMixture, cfg: &TrainConfig) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(EVAL_STREAM);
    rho0.sample(cfg.batch, &mut rng).points
}

fn source_mode(cfg: &TrainConfig) -> SourceMode {
    if cfg.ot_mode {
        SourceMode::Off
    } else {
        SourceMode::Learned
    }
}

fn forward(fields: &FieldPair, run: &ResolvedRun, points: &Tensor) -> Result<(Tape, crate::lagrangian::TrajectoryBundle), BenchError> {
    let numerical = |e: String| BenchError::Numerical(e);
    let mut tape = Tape::new();
    let mut bound = fields.bind(&mut tape, Trainable::NONE).map_err(|e| numerical(e.to_string()))?;
    let bundle = Integrator::new(&run.problem.rho0, run.train.steps)
        .with_source(source_mode(&run.train))
        .integrate(&mut tape, &mut bound, points)
        .map_err(|e| numerical(e.to_string()))?;
    Ok((tape, bundle))
}

fn final_eval(fields: &FieldPair, run: &ResolvedRun) -> Result<FinalEval, BenchError> {
    let points = eval_batch(&run.problem.rho0, &run.train);
    let e = trainer::evaluate(fields, &run.problem, &run.train, &points, Trainable::NONE)?;
    let violation = match &run.problem.obstacles {
        Some(obs) => {
            let (tape, bundle) = forward(fields, run, &points)?;
            Some(obstacle_violation(&tape, &bundle, obs))
        }
        None => None,
    };
    Ok(FinalEval {
        terms: e.terms,
        terminal_mass: e.terminal_mass,
        clamp_events: e.clamp_events,
        violation,
        samples: run.train.batch,
    })
}

fn assumptions(run: &ResolvedRun, trajectory_samples: usize) -> Vec<String> {
    let c = &run.train;
    let mut a = vec![
        format!(
            "warm start: {} velocity-only epochs against the mass-normalized target with the source off, run when the mean distance exceeds {}",
            c.pretrain_epochs, c.pretrain_trigger_distance
        ),
        "warm start and main phase each start with fresh optimizer moments and learning-rate schedule".into(),
        format!("learning rate {} decayed by {} every {} epochs", c.lr0, c.decay, trainer::DECAY_EVERY),
        format!(
            "final metrics on a fresh batch of {} samples from random stream {EVAL_STREAM}",
            c.batch
        ),
        format!("exponents in the terminal penalty clamped to +-{EXP_CLAMP}"),
        "parameter init: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases".into(),
        format!("trajectory.csv holds the first {trajectory_samples} evaluation samples"),
    ];
    if c.ot_mode {
        a.push("source frozen at zero: balanced transport".into());
    }
    if let Some(obs) = &run.problem.obstacles {
        a.push(format!(
            "obstacle field: rectangles with Gaussian falloff of width {}, weight {}",
            obs.blur, c.lambda_p
        ));
        if run.test.is_some() {
            a.push("maze rectangles are a reconstruction chosen to block the straight path".into());
        }
    }
    a
}

fn write_outputs(
    run: &ResolvedRun,
    fields: &FieldPair,
    history: &TrainHistory,
    pretrain: Option<&TrainHistory>,
    files: &mut Vec<String>,
) -> Result<(), BenchError> {
    let dir = &run.out;
    write_file(&dir.join("params.json"), crate::json::to_string_pretty(&fields.to_json()))?;
    files.push("params.json".into());
    write_file(&dir.join("history.jsonl"), history.to_jsonl())?;
    files.push("history.jsonl".into());
    if let Some(p) = pretrain {
        write_file(&dir.join("pretrain_history.jsonl"), p.to_jsonl())?;
        files.push("pretrain_history.jsonl".into());
    }
    Ok(())
}

fn write_trajectory(run: &ResolvedRun, fields: &FieldPair, samples: usize) -> Result<(), BenchError> {
    let all = eval_batch(&run.problem.rho0, &run.train);
    let d = run.problem.dim();
    let k = samples.min(run.train.batch);
    let points = Tensor::matrix(k, d, all.data()[..k * d].to_vec());
    let (tape, bundle) = forward(fields, run, &points)?;
    let path = run.out.join("trajectory.csv");
    let file = File::create(&path).map_err(BenchError::io(&path))?;
    let mut w = BufWriter::new(file);
    write_trajectory_csv(&mut w, &tape, &bundle).map_err(BenchError::io(&path))?;
    Ok(())
}

fn build_report(
    run: &ResolvedRun,
    eval: &FinalEval,
    history: &TrainHistory,
    pretrain_epochs: usize,
    abort: Option<AbortInfo>,
    trajectory_samples: usize,
) -> RunReport {
    RunReport {
        status: if abort.is_some() {
            RunStatus::NumericalAbort
        } else {
            RunStatus::Ok
        },
        test: run.test,
        dim: run.problem.dim(),
        seed: run.train.seed,
        final_gkl: eval.terms.gkl,
        terminal_mass: eval.terminal_mass,
        terms: eval.terms,
        clamp_events: eval.clamp_events,
        eval_samples: eval.samples,
        mean_epoch_time_s: history.mean_epoch_time(),
        epochs_run: history.len(),
        pretrain_epochs_run: pretrain_epochs,
        obstacle_violation: eval.violation,
        abort,
        problem: ProblemEcho {
            rho0: run.problem.rho0.clone(),
            rho1: run.problem.rho1.clone(),
            obstacles: run.problem.obstacles.clone(),
        },
        config: run.echo(),
        assumptions: assumptions(run, trajectory_samples),
        files: Vec::new(),
    }
}

fn write_report(dir: &Path, report: &RunReport) -> Result<(), BenchError> {
    write_file(&dir.join("report.json"), crate::json::to_string_pretty(report))
}

/// Trains, evaluates and writes `report.json`, `history.jsonl`,
/// `params.json`, `trajectory.csv` and the slice files into `run.out`.
///
/// On a numerical abort the report (status `numerical_abort`), the last
/// good parameters and the partial history are still written before the
/// error is returned.
pub fn run_resolved(run: &ResolvedRun) -> Result<RunOutcome, BenchError> {
    create_dir(&run.out)?;
    let traj = run.trajectory_samples.unwrap_or(DEFAULT_TRAJECTORY_SAMPLES);
    info!(
        "run {:?} d={} seed={} -> {}",
        run.test,
        run.problem.dim(),
        run.train.seed,
        run.out.display()
    );
    let trained = match trainer::train(&run.problem, &run.train) {
        Ok(t) => t,
        Err(TrainError::NumericalAbort {
            phase,
            epoch,
            reason,
            last_good,
            history,
        }) => {
            error!("{phase} epoch {epoch}: {reason}");
            let (main, pre) = match phase {
                Phase::Pretrain => (TrainHistory::default(), Some(history)),
                Phase::Main => (history, None),
            };
            let pre_epochs = match (&pre, phase) {
                (Some(p), _) => p.len(),
                (None, _) if pretrain_triggered(&run.problem, &run.train) => run.train.pretrain_epochs,
                _ => 0,
            };
            let mut files = Vec::new();
            write_outputs(run, &last_good, &main, pre.as_ref(), &mut files)?;
            let eval = final_eval(&last_good, run).unwrap_or(FinalEval {
                terms: ObjectiveTerms {
                    kinetic: f64::NAN,
                    source: f64::NAN,
                    gkl: f64::NAN,
                    preference: f64::NAN,
                    total: f64::NAN,
                },
                terminal_mass: f64::NAN,
                clamp_events: 0,
                violation: None,
                samples: run.train.batch,
            });
            let abort = AbortInfo {
                phase,
                epoch,
                reason: reason.clone(),
            };
            let mut report = build_report(run, &eval, &main, pre_epochs, Some(abort), traj);
            files.insert(0, "report.json".into());
            report.files = files;
            write_report(&run.out, &report)?;
            return Err(BenchError::Numerical(format!("{phase} epoch {epoch}: {reason}")));
        }
        Err(e) => return Err(e.into()),
    };
    let Trained {
        fields,
        history,
        pretrain,
    } = trained;
    let eval = final_eval(&fields, run)?;
    let mut files = vec!["report.json".to_string()];
    write_outputs(run, &fields, &history, pretrain.as_ref(), &mut files)?;
    write_trajectory(run, &fields, traj)?;
    files.push("trajectory.csv".into());
    let mut slices = Vec::new();
    if run.slices.enabled {
        let dir = run.out.join("slices");
        create_dir(&dir)?;
        let bounds = run
            .slices
            .bounds
            .unwrap_or_else(|| auto_bounds(&run.problem.rho0, &run.problem.rho1));
        let src = SliceSource {
            fields: &fields,
            rho0: &run.problem.rho0,
            source: source_mode(&run.train),
            steps: run.train.steps,
            seed: run.train.seed,
        };
        slices = export_slices(src, &run.slices, bounds, &dir)?;
        for s in &slices {
            for f in [&s.raster, &s.scatter] {
                files.push(format!("slices/{f}"));
            }
            files.push(format!("slices/{}", s.raster.replace(".pgm", ".json")));
        }
    }
    let pre_epochs = pretrain.as_ref().map_or(0, TrainHistory::len);
    let mut report = build_report(run, &eval, &history, pre_epochs, None, traj);
    report.files = files;
    write_report(&run.out, &report)?;
    info!(
        "final P {:.6e} mass {:.6} mean epoch {:.4}s",
        report.final_gkl, report.terminal_mass, report.mean_epoch_time_s
    );
    Ok(RunOutcome {
        report,
        fields,
        history,
        pretrain,
        slices,
    })
}

/// Resolves `cfg` with `flags` on top and runs it.
pub fn run(cfg: &RunConfig, flags: &TrainOverrides) -> Result<RunOutcome, BenchError> {
    run_resolved(&cfg.resolve(flags)?)
}

/// Config of a run on a built-in problem with everything else at defaults.
pub fn builtin_config(test: u8, dim: Option<usize>) -> RunConfig {
    RunConfig {
        dim,
        ..RunConfig::builtin(test)
    }
}

impl RunReport {
    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        serde_json::from_str(text).map_err(|e| BenchError::Config(vec![format!("report: {e}")]))
    }
}
