//! Epoch time and memory against dimension at a fixed batch size.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::problems::{self, BUILTIN_COUNT};
use super::{create_dir, write_file, BenchError};
use crate::fields::Trainable;
use crate::trainer::{self, run_rngs, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    pub test: u8,
    pub dims: Vec<usize>,
    pub batch: usize,
    /// Timed epochs per dimension.
    pub epochs: usize,
    /// Untimed epochs run first.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for ScalingSpec {
    fn default() -> Self {
        Self {
            test: 5,
            dims: vec![2, 10, 30, 60, 100],
            batch: 1024,
            epochs: 5,
            warmup: 1,
            seed: 0,
        }
    }
}

impl ScalingSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut e = Vec::new();
        if !(1..=BUILTIN_COUNT).contains(&self.test) {
            e.push(format!("test: must be in 1..={BUILTIN_COUNT}, got {}", self.test));
        }
        if self.dims.is_empty() {
            e.push("dims: empty".into());
        }
        for (i, &d) in self.dims.iter().enumerate() {
            if d < 2 {
                e.push(format!("dims[{i}]: must be >= 2, got {d}"));
            }
        }
        if self.batch == 0 {
            e.push("batch: must be positive".into());
        }
        if self.epochs == 0 {
            e.push("epochs: must be positive".into());
        }
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimTiming {
    pub dim: usize,
    pub epoch_times_s: Vec<f64>,
    pub mean_s: f64,
    /// Sample standard deviation of the epoch times.
    pub std_s: f64,
    /// Three standard errors of the mean: differences below this are noise.
    pub noise_bound_s: f64,
    /// Largest number of bytes the tape held during one epoch.
    pub peak_tape_bytes: usize,
    pub parameters: usize,
}

/// Contents of `scaling.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub spec: ScalingSpec,
    pub parallel: bool,
    pub rows: Vec<DimTiming>,
    /// Mean epoch time at the last dimension over that at the first.
    pub time_ratio: f64,
}

fn stats(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std, 3.0 * std / n.sqrt())
}

/// Trains each dimension for `warmup + epochs` epochs in turn (no warm
/// start phase) and records the timed epochs. Dimensions run one after
/// another so that timings do not compete for cores. Writes
/// `<out>/scaling.json` when `out` is given.
pub fn scaling_bench(spec: &ScalingSpec, out: Option<&Path>) -> Result<ScalingReport, BenchError> {
    let errs = spec.problems();
    if !errs.is_empty() {
        return Err(BenchError::Config(errs));
    }
    let mut rows = Vec::with_capacity(spec.dims.len());
    for &d in &spec.dims {
        let b = problems::builtin(spec.test, d).ok_or_else(|| {
            BenchError::Config(vec![format!("dims: test {} is not defined at d = {d}", spec.test)])
        })?;
        let cfg = TrainConfig {
            epochs: spec.warmup + spec.epochs,
            batch: spec.batch,
            seed: spec.seed,
            pretrain_epochs: 0,
            lambda_p: b.lambda_p.unwrap_or(TrainConfig::default().lambda_p),
            ..TrainConfig::default()
        };
        let trained = trainer::train(&b.problem, &cfg)?;
        let times: Vec<f64> = trained.history.records[spec.warmup..].iter().map(|r| r.epoch_time_s).collect();
        let (mut rng, _) = run_rngs(spec.seed);
        let points = b.problem.rho0.sample(spec.batch, &mut rng).points;
        let peak = trainer::evaluate(&trained.fields, &b.problem, &cfg, &points, Trainable::ALL)?.peak_bytes;
        let (mean, std, noise) = stats(&times);
        log::info!("d = {d}: {mean:.4} s per epoch, tape peak {} MiB", peak >> 20);
        rows.push(DimTiming {
            dim: d,
            epoch_times_s: times,
            mean_s: mean,
            std_s: std,
            noise_bound_s: noise,
            peak_tape_bytes: peak,
            parameters: trained.fields.parameter_count(),
        });
    }
    let time_ratio = rows.last().expect("dims nonempty").mean_s / rows[0].mean_s;
    let report = ScalingReport {
        spec: spec.clone(),
        parallel: crate::par::parallel_enabled(),
        rows,
        time_ratio,
    };
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("scaling.json"), crate::json::to_string_pretty(&report))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_examples() {
        let (m, s, n) = stats(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert!((n - 3.0 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(stats(&[4.0]), (4.0, 0.0, 0.0));
    }

    #[test]
    fn spec_checks() {
        let spec = ScalingSpec {
            dims: vec![1, 2],
            batch: 0,
            ..ScalingSpec::default()
        };
        let e = spec.problems();
        assert!(e.iter().any(|m| m.starts_with("dims[0]")));
        assert!(e.iter().any(|m| m.starts_with("batch")));
        assert!(ScalingSpec::default().problems().is_empty());
    }
}
