//! Runs one problem over a list of `alpha` values plus balanced transport.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::config::{ResolvedRun, RunConfig};
use super::run::{run_resolved, RunReport, RunStatus};
use super::{create_dir, write_file, BenchError};
use crate::lagrangian::fmt17;

/// A sweep entry: a source-cost weight or the balanced (source-free) mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaChoice {
    Value(f64),
    Ot,
}

impl AlphaChoice {
    fn dir_name(self) -> String {
        match self {
            AlphaChoice::Value(a) => format!("alpha_{a:e}"),
            AlphaChoice::Ot => "ot".into(),
        }
    }
}

impl fmt::Display for AlphaChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaChoice::Value(a) => write!(f, "{a:e}"),
            AlphaChoice::Ot => f.write_str("ot"),
        }
    }
}

impl FromStr for AlphaChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("ot") {
            return Ok(AlphaChoice::Ot);
        }
        let a: f64 = s.parse().map_err(|_| format!("alpha {s:?} is neither a number nor \"ot\""))?;
        if !(a > 0.0 && a.is_finite()) {
            return Err(format!("alpha must be positive, got {s}"));
        }
        Ok(AlphaChoice::Value(a))
    }
}

impl Serialize for AlphaChoice {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            AlphaChoice::Value(a) => s.serialize_f64(*a),
            AlphaChoice::Ot => s.serialize_str("ot"),
        }
    }
}

impl<'de> Deserialize<'de> for AlphaChoice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(a) => Ok(AlphaChoice::Value(a)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: AlphaChoice,
    pub dir: String,
    pub status: RunStatus,
    pub terminal_mass: f64,
    pub final_gkl: f64,
    pub mean_epoch_time_s: f64,
}

/// Contents of `sweep.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub test: Option<u8>,
    pub dim: usize,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
    pub base_config: RunConfig,
}

impl SweepReport {
    /// Fixed-width table of alpha, terminal mass and final penalty.
    pub fn table(&self) -> String {
        let mut s = format!("{:>12}  {:>24}  {:>24}  {}\n", "alpha", "terminal_mass", "final_gkl", "status");
        for r in &self.rows {
            s.push_str(&format!(
                "{:>12}  {:>24}  {:>24}  {:?}\n",
                r.alpha.to_string(),
                fmt17(r.terminal_mass),
                fmt17(r.final_gkl),
                r.status
            ));
        }
        s
    }
}

fn one(base: &ResolvedRun, alpha: AlphaChoice) -> Result<RunReport, BenchError> {
    let mut run = base.clone();
    match alpha {
        AlphaChoice::Value(a) => {
            run.train.alpha = a;
            run.train.ot_mode = false;
        }
        AlphaChoice::Ot => run.train.ot_mode = true,
    }
    run.out = base.out.join(alpha.dir_name());
    match run_resolved(&run) {
        Ok(o) => Ok(o.report),
        Err(BenchError::Numerical(msg)) => {
            warn!("alpha {alpha}: {msg}");
            let text = std::fs::read_to_string(run.out.join("report.json")).map_err(BenchError::io(&run.out))?;
            RunReport::from_json(&text)
        }
        Err(e) => Err(e),
    }
}

/// Runs `base` once per entry of `alphas` (plus a balanced run when the list
/// has none) into `<out>/alpha_<value>` and `<out>/ot`, then writes
/// `<out>/sweep.json`. Runs are independent and execute in parallel when
/// the `parallel` feature is on.
pub fn alpha_sweep(base: &ResolvedRun, alphas: &[AlphaChoice]) -> Result<SweepReport, BenchError> {
    let mut list = alphas.to_vec();
    if !list.contains(&AlphaChoice::Ot) {
        list.push(AlphaChoice::Ot);
    }
    let bad: Vec<String> = list
        .iter()
        .enumerate()
        .filter_map(|(i, a)| match a {
            AlphaChoice::Value(v) if !(*v > 0.0 && v.is_finite()) => Some(format!("alpha[{i}]: must be positive, got {v}")),
            _ => None,
        })
        .collect();
    if !bad.is_empty() {
        return Err(BenchError::Config(bad));
    }
    create_dir(&base.out)?;

    #[cfg(feature = "parallel")]
    let reports: Vec<Result<RunReport, BenchError>> = {
        use rayon::prelude::*;
        list.par_iter().map(|&a| one(base, a)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let reports: Vec<Result<RunReport, BenchError>> = list.iter().map(|&a| one(base, a)).collect();

    let mut rows = Vec::with_capacity(list.len());
    for (a, r) in list.iter().zip(reports) {
        let r = r?;
        rows.push(SweepRow {
            alpha: *a,
            dir: a.dir_name(),
            status: r.status,
            terminal_mass: r.terminal_mass,
            final_gkl: r.final_gkl,
            mean_epoch_time_s: r.mean_epoch_time_s,
        });
    }
    let report = SweepReport {
        test: base.test,
        dim: base.problem.dim(),
        seed: base.train.seed,
        rows,
        base_config: base.echo(),
    };
    write_file(&base.out.join("sweep.json"), crate::json::to_string_pretty(&report))?;
    if let Some(r) = report.rows.iter().find(|r| r.status == RunStatus::NumericalAbort) {
        return Err(BenchError::Numerical(format!("alpha {} aborted", r.alpha)));
    }
    Ok(report)
}
