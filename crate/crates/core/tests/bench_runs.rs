use std::path::Path;

use uot_core::bench::problems::{builtin, default_dim};
use uot_core::bench::run::eval_batch;
use uot_core::bench::{
    alpha_sweep, run, scaling_bench, AlphaChoice, BenchError, RunConfig, RunReport, RunStatus, ScalingSpec,
    SliceSpec, TrainOverrides,
};
use uot_core::fields::{init_params, Trainable};
use uot_core::trainer::{evaluate, run_rngs};
use uot_core::Component;

fn quick(test: u8, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::builtin(test);
    cfg.out = Some(out.to_path_buf());
    cfg.train = TrainOverrides {
        epochs: Some(3),
        batch: Some(64),
        pretrain_epochs: Some(2),
        seed: Some(5),
        ..TrainOverrides::default()
    };
    cfg.slices = SliceSpec {
        samples: 500,
        bins: [9, 9],
        ..SliceSpec::default()
    };
    cfg
}

#[test]
fn builtin_table_is_literal() {
    // (id, rho0 components, rho1 components) as (weight, nonzero mean entries, variance)
    type C = (f64, &'static [(usize, f64)], f64);
    let table: [(u8, &[C], &[C]); 12] = [
        (1, &[(1.0, &[], 1.0)], &[(2.0, &[], 1.0)]),
        (2, &[(1.0, &[], 1.0)], &[(0.5, &[], 1.0)]),
        (3, &[(1.0, &[], 1.0)], &[(2.0, &[(0, 4.0)], 1.0)]),
        (4, &[(1.0, &[], 1.0)], &[(0.5, &[(0, 4.0)], 1.0)]),
        (5, &[(1.0, &[], 1.0)], &[(0.5, &[(0, -4.0)], 1.0)]),
        (6, &[(1.0, &[], 1.0)], &[(2.0, &[(0, 4.0)], 1.0)]),
        (7, &[(1.0, &[], 0.3)], &[(2.0, &[(0, 4.0)], 0.3)]),
        (8, &[(1.0, &[(0, -4.0), (1, -4.0)], 1.0)], &[(0.5, &[(0, 4.0), (1, 4.0)], 1.0)]),
        (9, &[(1.0, &[], 1.0)], &[(1.0, &[(0, -2.0)], 1.0), (1.0, &[(0, 2.0)], 1.0)]),
        (10, &[(1.0, &[(0, -2.0)], 1.0), (1.0, &[(0, 2.0)], 1.0)], &[(1.0, &[], 1.0)]),
        (11, &[(1.0, &[(0, 8.0), (1, 4.0)], 1.0)], &[(0.5, &[(0, 8.0), (1, 12.0)], 0.3)]),
        (12, &[(1.0, &[(0, -4.0), (1, -4.0)], 1.0)], &[(0.5, &[(0, 4.0), (1, 4.0)], 0.3)]),
    ];
    let expand = |d: usize, cs: &[C]| -> Vec<Component> {
        cs.iter()
            .map(|&(w, mean, var)| {
                let mut m = vec![0.0; d];
                for &(k, v) in mean {
                    m[k] = v;
                }
                Component::isotropic(w, m, var)
            })
            .collect()
    };
    for (id, r0, r1) in table {
        for d in [default_dim(id), 5] {
            let b = builtin(id, d).unwrap();
            assert_eq!(b.problem.rho0.components(), &expand(d, r0)[..], "test {id} rho0 d={d}");
            assert_eq!(b.problem.rho1.components(), &expand(d, r1)[..], "test {id} rho1 d={d}");
        }
    }
}

#[test]
fn zero_epochs_reports_untrained_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(2, dir.path());
    cfg.train.epochs = Some(0);
    let out = run(&cfg, &TrainOverrides::default()).unwrap();
    let r = &out.report;
    assert_eq!((r.status, r.epochs_run), (RunStatus::Ok, 0));
    let resolved = cfg.resolve(&TrainOverrides::default()).unwrap();
    let fields = init_params(resolved.train.field_shape(1), &mut run_rngs(5).0);
    assert_eq!(out.fields, fields);
    let pts = eval_batch(&resolved.problem.rho0, &resolved.train);
    let e = evaluate(&fields, &resolved.problem, &resolved.train, &pts, Trainable::NONE).unwrap();
    assert_eq!(r.final_gkl, e.terms.gkl);
    for f in ["report.json", "history.jsonl", "params.json", "trajectory.csv", "slices/slice_t0.500.pgm"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn report_replays_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let first = run(&quick(5, &dir.path().join("a")), &TrainOverrides::default()).unwrap();
    assert_eq!(first.report.pretrain_epochs_run, 2);
    let text = std::fs::read_to_string(dir.path().join("a/report.json")).unwrap();
    let report = RunReport::from_json(&text).unwrap();
    assert_eq!(report, first.report);
    let mut cfg = report.config.clone();
    cfg.out = Some(dir.path().join("b"));
    let second = run(&cfg, &TrainOverrides::default()).unwrap();
    assert_eq!(second.report.final_gkl.to_bits(), first.report.final_gkl.to_bits());
    assert_eq!(second.fields, first.fields);
    let h1 = std::fs::read_to_string(dir.path().join("a/history.jsonl")).unwrap();
    assert_eq!(h1.lines().count(), 3);
}

#[test]
fn slice_rasters() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(5, dir.path());
    cfg.train.epochs = Some(0);
    cfg.slices = SliceSpec {
        times: vec![0.0],
        bounds: Some([[-4.5, 4.5], [-4.5, 4.5]]),
        bins: [9, 9],
        samples: 20_000,
        enabled: true,
    };
    let out = run(&cfg, &TrainOverrides::default()).unwrap();
    let s = &out.slices[0];
    assert_eq!(s.peak_cell, Some([4, 4]));
    assert!(!s.empty);
    let img = std::fs::read(dir.path().join("slices/slice_t0.000.pgm")).unwrap();
    assert!(img.starts_with(b"P5\n9 9\n255\n"));
    assert_eq!(img.len(), 11 + 81);
    assert_eq!(img[11 + 4 * 9 + 4], 255);

    let far = tempfile::tempdir().unwrap();
    cfg.out = Some(far.path().to_path_buf());
    cfg.slices.bounds = Some([[40.0, 50.0], [40.0, 50.0]]);
    let out = run(&cfg, &TrainOverrides::default()).unwrap();
    assert!(out.slices[0].empty);
    let img = std::fs::read(far.path().join("slices/slice_t0.000.pgm")).unwrap();
    assert!(img[11..].iter().all(|&p| p == 0));
}

#[test]
fn sweep_adds_balanced_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(3, dir.path());
    cfg.train.pretrain_epochs = Some(0);
    cfg.slices.enabled = false;
    let base = cfg.resolve(&TrainOverrides::default()).unwrap();
    let report = alpha_sweep(&base, &[AlphaChoice::Value(1e-2)]).unwrap();
    assert_eq!(report.rows.len(), 2);
    let ot = &report.rows[1];
    assert_eq!(ot.alpha, AlphaChoice::Ot);
    assert!((ot.terminal_mass - 1.0).abs() < 1e-12);
    assert!(dir.path().join("sweep.json").exists());
    assert!(dir.path().join("ot/report.json").exists());
    let bad = alpha_sweep(&base, &[AlphaChoice::Value(-1.0)]).unwrap_err();
    assert_eq!(bad.exit_code(), 2);
}

#[test]
fn numerical_abort_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(3, dir.path());
    cfg.train.lambda = Some(1.7e308);
    let err = run(&cfg, &TrainOverrides::default()).unwrap_err();
    assert!(matches!(err, BenchError::Numerical(_)));
    assert_eq!(err.exit_code(), 3);
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let report = RunReport::from_json(&text).unwrap();
    assert_eq!(report.status, RunStatus::NumericalAbort);
    assert!(report.abort.is_some());
    assert!(dir.path().join("params.json").exists());
}

#[test]
fn config_errors_exit_two() {
    let e = run(&RunConfig::builtin(0), &TrainOverrides::default()).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn scaling_samples() {
    let spec = ScalingSpec {
        dims: vec![2],
        epochs: 3,
        warmup: 0,
        batch: 64,
        ..ScalingSpec::default()
    };
    let report = scaling_bench(&spec, None).unwrap();
    let row = &report.rows[0];
    assert_eq!(row.epoch_times_s.len(), 3);
    assert!(row.epoch_times_s.iter().all(|&t| t > 0.0));
    assert!(row.peak_tape_bytes > 0);
    assert_eq!(report.time_ratio, 1.0);
}
