//! Run configuration file and its resolution into a concrete problem.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::problems::{self, BUILTIN_COUNT};
use super::BenchError;
use crate::densities::{Component, GaussianMixture};
use crate::objective::ObstacleMap;
use crate::trainer::{Problem, TrainConfig};

/// Either a built-in problem id or explicit densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProblemSpec {
    Builtin {
        test: u8,
    },
    Explicit {
        rho0: Vec<Component>,
        rho1: Vec<Component>,
        #[serde(default)]
        obstacles: Option<ObstacleMap>,
    },
}

/// Training settings to apply on top of the defaults; absent fields keep
/// the default (or the built-in problem's tuned value).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub steps: Option<usize>,
    pub intervals: Option<usize>,
    pub width: Option<usize>,
    pub hidden: Option<usize>,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub lambda_p: Option<f64>,
    pub lr0: Option<f64>,
    pub decay: Option<f64>,
    pub seed: Option<u64>,
    pub pretrain_epochs: Option<usize>,
    pub pretrain_trigger_distance: Option<f64>,
    pub ot_mode: Option<bool>,
}

impl TrainOverrides {
    /// Fields set in `other` replace those in `self`.
    pub fn merge(&mut self, other: &TrainOverrides) {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(
            epochs,
            batch,
            steps,
            intervals,
            width,
            hidden,
            alpha,
            lambda,
            lambda_p,
            lr0,
            decay,
            seed,
            pretrain_epochs,
            pretrain_trigger_distance,
            ot_mode
        );
    }

    /// Every field set from `cfg`.
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            epochs: Some(cfg.epochs),
            batch: Some(cfg.batch),
            steps: Some(cfg.steps),
            intervals: Some(cfg.intervals),
            width: Some(cfg.width),
            hidden: Some(cfg.hidden),
            alpha: Some(cfg.alpha),
            lambda: Some(cfg.lambda),
            lambda_p: Some(cfg.lambda_p),
            lr0: Some(cfg.lr0),
            decay: Some(cfg.decay),
            seed: Some(cfg.seed),
            pretrain_epochs: Some(cfg.pretrain_epochs),
            pretrain_trigger_distance: Some(cfg.pretrain_trigger_distance),
            ot_mode: Some(cfg.ot_mode),
        }
    }

    pub fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        set!(
            epochs,
            batch,
            steps,
            intervals,
            width,
            hidden,
            alpha,
            lambda,
            lambda_p,
            lr0,
            decay,
            seed,
            pretrain_epochs,
            pretrain_trigger_distance,
            ot_mode
        );
    }
}

/// Raster export settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SliceSpec {
    pub enabled: bool,
    pub times: Vec<f64>,
    /// `[[x_lo, x_hi], [y_lo, y_hi]]`; `None` picks bounds covering both densities.
    pub bounds: Option<[[f64; 2]; 2]>,
    /// Raster width and height in cells.
    pub bins: [usize; 2],
    pub samples: usize,
}

impl Default for SliceSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            times: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            bounds: None,
            bins: [65, 65],
            samples: 20_000,
        }
    }
}

/// The run-config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub slices: SliceSpec,
    /// Samples written to `trajectory.csv`; the whole evaluation batch when absent.
    #[serde(default)]
    pub trajectory_samples: Option<usize>,
}

impl RunConfig {
    pub fn builtin(test: u8) -> Self {
        Self {
            problem: ProblemSpec::Builtin { test },
            dim: None,
            train: TrainOverrides::default(),
            out: None,
            slices: SliceSpec::default(),
            trajectory_samples: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        serde_json::from_str(text).map_err(|e| BenchError::Config(vec![format!("config: {e}")]))
    }
}

/// A fully determined run.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub spec: ProblemSpec,
    pub test: Option<u8>,
    pub problem: Problem,
    pub train: TrainConfig,
    pub out: PathBuf,
    pub slices: SliceSpec,
    pub trajectory_samples: Option<usize>,
}

fn check_components(path: &str, comps: &[Component], dim: Option<usize>, errs: &mut Vec<String>) {
    if comps.is_empty() {
        errs.push(format!("{path}: needs at least one component"));
        return;
    }
    let d = dim.unwrap_or(comps[0].mean.len());
    for (i, c) in comps.iter().enumerate() {
        let p = format!("{path}[{i}]");
        if !(c.weight > 0.0 && c.weight.is_finite()) {
            errs.push(format!("{p}.weight: must be positive"));
        }
        if c.mean.len() != d {
            errs.push(format!("{p}.mean: has {} entries, expected {d}", c.mean.len()));
        }
        if c.variance.len() != d {
            errs.push(format!("{p}.var: has {} entries, expected {d}", c.variance.len()));
        }
        if c.mean.iter().any(|x| !x.is_finite()) {
            errs.push(format!("{p}.mean: entries must be finite"));
        }
        for (k, v) in c.variance.iter().enumerate() {
            if !(*v > 0.0 && v.is_finite()) {
                errs.push(format!("{p}.var[{k}]: must be positive"));
            }
        }
    }
}

fn check_obstacles(obs: &ObstacleMap, errs: &mut Vec<String>) {
    if !(obs.blur > 0.0 && obs.blur.is_finite()) {
        errs.push("problem.obstacles.blur: must be positive".into());
    }
    for (i, r) in obs.rects.iter().enumerate() {
        for k in 0..2 {
            if !(r.min[k] <= r.max[k]) {
                errs.push(format!("problem.obstacles.rects[{i}]: min[{k}] exceeds max[{k}]"));
            }
        }
    }
}

fn check_slices(s: &SliceSpec, errs: &mut Vec<String>) {
    for (i, t) in s.times.iter().enumerate() {
        if !(0.0..=1.0).contains(t) {
            errs.push(format!("slices.times[{i}]: must lie in [0, 1]"));
        }
    }
    if s.bins[0] == 0 || s.bins[1] == 0 {
        errs.push("slices.bins: must be positive".into());
    }
    if s.enabled && s.samples == 0 {
        errs.push("slices.samples: must be positive".into());
    }
    if let Some(b) = s.bounds {
        for (k, axis) in b.iter().enumerate() {
            if !(axis[0] < axis[1]) {
                errs.push(format!("slices.bounds[{k}]: lower bound must be below upper bound"));
            }
        }
    }
}

impl ResolvedRun {
    /// A config that resolves to this run again.
    pub fn echo(&self) -> RunConfig {
        RunConfig {
            problem: self.spec.clone(),
            dim: Some(self.problem.dim()),
            train: TrainOverrides::from_config(&self.train),
            out: Some(self.out.clone()),
            slices: self.slices.clone(),
            trajectory_samples: self.trajectory_samples,
        }
    }
}

impl RunConfig {
    /// Validates everything and builds the concrete run. `flags` override
    /// the file's training settings.
    pub fn resolve(&self, flags: &TrainOverrides) -> Result<ResolvedRun, BenchError> {
        let mut errs = Vec::new();
        let mut train = TrainConfig::default();
        let (test, problem) = match &self.problem {
            ProblemSpec::Builtin { test } => {
                if !(1..=BUILTIN_COUNT).contains(test) {
                    errs.push(format!("problem.test: must be in 1..={BUILTIN_COUNT}, got {test}"));
                    (Some(*test), None)
                } else {
                    let d = self.dim.unwrap_or(problems::default_dim(*test));
                    match problems::builtin(*test, d) {
                        Some(b) => {
                            if let Some(lp) = b.lambda_p {
                                train.lambda_p = lp;
                            }
                            (Some(*test), Some(b.problem))
                        }
                        None => {
                            errs.push(format!(
                                "dim: test {test} needs dimension >= {}, got {d}",
                                problems::min_dim(*test)
                            ));
                            (Some(*test), None)
                        }
                    }
                }
            }
            ProblemSpec::Explicit { rho0, rho1, obstacles } => {
                let before = errs.len();
                check_components("problem.rho0", rho0, self.dim, &mut errs);
                let d0 = self.dim.or_else(|| rho0.first().map(|c| c.mean.len()));
                check_components("problem.rho1", rho1, d0, &mut errs);
                if let Some(o) = obstacles {
                    check_obstacles(o, &mut errs);
                    if d0.is_some_and(|d| d < 2) && !o.rects.is_empty() {
                        errs.push("problem.obstacles: need dimension >= 2".into());
                    }
                }
                if errs.len() == before {
                    let p = Problem {
                        rho0: GaussianMixture::new(rho0.clone()).expect("checked"),
                        rho1: GaussianMixture::new(rho1.clone()).expect("checked"),
                        obstacles: obstacles.clone(),
                    };
                    (None, Some(p))
                } else {
                    (None, None)
                }
            }
        };
        if self.dim == Some(0) {
            errs.push("dim: must be positive".into());
        }
        self.train.apply(&mut train);
        flags.apply(&mut train);
        for p in train.problems() {
            errs.push(format!("train.{p}"));
        }
        check_slices(&self.slices, &mut errs);
        if self.trajectory_samples == Some(0) {
            errs.push("trajectory_samples: must be positive".into());
        }
        if !errs.is_empty() {
            return Err(BenchError::Config(errs));
        }
        Ok(ResolvedRun {
            spec: self.problem.clone(),
            test,
            problem: problem.expect("no errors"),
            train,
            out: self.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            slices: self.slices.clone(),
            trajectory_samples: self.trajectory_samples,
        })
    }
}
