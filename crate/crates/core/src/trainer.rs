//! Training loop: fresh batch per epoch, forward integration, objective,
//! backward pass and Adam updates, plus the mean-shift warm start.

use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densities::GaussianMixture;
use crate::fields::{init_params, FieldError, FieldPair, FieldShape, Trainable};
use crate::lagrangian::{terminal_mass, Integrator, LagrangianError, SourceMode};
use crate::objective::{
    simpson_weights, total_objective, ObjectiveError, ObjectiveSpec, ObjectiveTerms, ObstacleMap, TerminalPenalty,
    Weights,
};
use crate::tape::{Tape, TapeError};
use crate::tensor::Tensor;

/// Epochs between learning-rate decays.
pub const DECAY_EVERY: usize = 10;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("numerical abort in {phase} epoch {epoch}: {reason}")]
    NumericalAbort {
        phase: Phase,
        epoch: usize,
        reason: String,
        /// Parameters before the failing epoch.
        last_good: Box<FieldPair>,
        /// Records of the epochs completed in the failing phase.
        history: TrainHistory,
    },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Lagrangian(#[from] LagrangianError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Main,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Main => "main",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    /// Time steps `N`.
    pub steps: usize,
    /// Basis intervals `M`.
    pub intervals: usize,
    /// Blocks summed per basis function, `L`.
    pub width: usize,
    /// Hidden units `H`.
    pub hidden: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub lambda_p: f64,
    pub lr0: f64,
    pub decay: f64,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub pretrain_trigger_distance: f64,
    /// Balanced transport: the source is held at zero and never trained.
    pub ot_mode: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch: 1024,
            steps: 10,
            intervals: 5,
            width: 2,
            hidden: 10,
            alpha: 0.01,
            lambda: 1e4,
            lambda_p: 1.0,
            lr0: 0.01,
            decay: 0.98,
            seed: 0,
            pretrain_epochs: 200,
            pretrain_trigger_distance: 0.5,
            ot_mode: false,
        }
    }
}

impl TrainConfig {
    /// Field-path messages for every invalid entry.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut positive = |name: &str, ok: bool| {
            if !ok {
                out.push(format!("{name}: must be positive"));
            }
        };
        positive("batch", self.batch > 0);
        positive("steps", self.steps > 0);
        positive("width", self.width > 0);
        positive("hidden", self.hidden > 0);
        positive("alpha", self.alpha > 0.0 && self.alpha.is_finite());
        positive("lr0", self.lr0 > 0.0 && self.lr0.is_finite());
        positive("decay", self.decay > 0.0 && self.decay.is_finite());
        if !self.steps.is_multiple_of(2) {
            out.push(format!("steps: must be even, got {}", self.steps));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            out.push("lambda: must be nonnegative".into());
        }
        if !(self.lambda_p >= 0.0 && self.lambda_p.is_finite()) {
            out.push("lambda_p: must be nonnegative".into());
        }
        if !(self.pretrain_trigger_distance >= 0.0) {
            out.push("pretrain_trigger_distance: must be nonnegative".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let p = self.problems();
        if !p.is_empty() {
            return Err(TrainError::Config(p.join("; ")));
        }
        let m = self.intervals.max(1);
        if !self.steps.is_multiple_of(m) || self.steps / m < 2 {
            warn!(
                "steps = {} is not a multiple k*M of M = {} with k >= 2",
                self.steps, self.intervals
            );
        }
        Ok(())
    }

    pub fn field_shape(&self, dim: usize) -> FieldShape {
        FieldShape {
            dim,
            intervals: self.intervals,
            width: self.width,
            hidden: self.hidden,
        }
    }

    pub fn weights(&self) -> Weights {
        Weights {
            alpha: self.alpha,
            lambda: self.lambda,
            lambda_p: self.lambda_p,
        }
    }

    fn source_mode(&self) -> SourceMode {
        if self.ot_mode {
            SourceMode::Off
        } else {
            SourceMode::Learned
        }
    }
}

/// Densities and optional obstacles of one transport problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub rho0: GaussianMixture,
    pub rho1: GaussianMixture,
    pub obstacles: Option<ObstacleMap>,
}

impl Problem {
    pub fn dim(&self) -> usize {
        self.rho0.dim()
    }

    pub fn mean_distance(&self) -> f64 {
        self.rho0
            .mean()
            .iter()
            .zip(self.rho1.mean())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.rho0.dim() != self.rho1.dim() {
            return Err(TrainError::Config(format!(
                "rho1: dimension {} differs from rho0 dimension {}",
                self.rho1.dim(),
                self.rho0.dim()
            )));
        }
        if self.obstacles.as_ref().is_some_and(|o| !o.rects.is_empty()) && self.dim() < 2 {
            return Err(TrainError::Config("obstacles: need dimension >= 2".into()));
        }
        Ok(())
    }
}

/// `lr0 * decay^floor(epoch / 10)`
pub fn lr_schedule(epoch: usize, lr0: f64, decay: f64) -> f64 {
    lr0 * decay.powi((epoch / DECAY_EVERY) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AdamError {
    #[error("expected {expected} tensors, got {params} parameters and {grads} gradients")]
    Count { expected: usize, params: usize, grads: usize },
    #[error("tensor {index}: parameter shape {param:?}, gradient shape {grad:?}")]
    Shape {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("tensor {index}: non-finite gradient")]
    NonFinite { index: usize },
}

/// One bias-corrected Adam update. Parameters are left untouched on error.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState, lr: f64) -> Result<(), AdamError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(AdamError::Count {
            expected: state.m.len(),
            params: params.len(),
            grads: grads.len(),
        });
    }
    for (index, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[index].shape() != g.shape() {
            return Err(AdamError::Shape {
                index,
                param: p.shape().to_vec(),
                grad: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(AdamError::NonFinite { index });
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *x -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// One line of `history.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub terms: ObjectiveTerms,
    pub terminal_mass: f64,
    pub lr: f64,
    pub epoch_time_s: f64,
    pub clamp_events: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn mean_epoch_time(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.epoch_time_s).sum::<f64>() / self.records.len() as f64
    }

    /// JSON lines, one record per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&crate::json::to_string(r));
            out.push('\n');
        }
        out
    }
}

/// Result of one loss evaluation at fixed parameters.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub terms: ObjectiveTerms,
    pub terminal_mass: f64,
    pub clamp_events: usize,
    /// Gradients of the trainable tensors in [`FieldPair::named_tensors`] order.
    pub grads: Vec<Tensor>,
    /// Peak bytes held by the tape during the pass.
    pub peak_bytes: usize,
}

/// Settings that differ between the warm start and the main phase.
#[derive(Debug, Clone, Copy)]
struct PhaseSetup<'a> {
    phase: Phase,
    target: &'a GaussianMixture,
    penalty: TerminalPenalty,
    source: SourceMode,
}

fn is_numerical(e: &TrainError) -> bool {
    fn tape(e: &TapeError) -> bool {
        matches!(e, TapeError::NonFinite { .. } | TapeError::LogNonPositive { .. })
    }
    fn field(e: &FieldError) -> bool {
        matches!(e, FieldError::Tape(t) if tape(t))
    }
    match e {
        TrainError::Lagrangian(LagrangianError::NonFinite { .. }) => true,
        TrainError::Lagrangian(LagrangianError::Tape(t)) => tape(t),
        TrainError::Lagrangian(LagrangianError::Field(f)) => field(f),
        TrainError::Objective(ObjectiveError::Tape(t)) => tape(t),
        TrainError::Field(f) => field(f),
        TrainError::Tape(t) => tape(t),
        _ => false,
    }
}

fn evaluate_phase(
    fields: &FieldPair,
    problem: &Problem,
    cfg: &TrainConfig,
    setup: PhaseSetup<'_>,
    points: &Tensor,
    trainable: Trainable,
) -> Result<Evaluation, TrainError> {
    let mut tape = Tape::new();
    let mut bound = fields.bind(&mut tape, trainable)?;
    let bundle = Integrator::new(&problem.rho0, cfg.steps)
        .with_source(setup.source)
        .integrate(&mut tape, &mut bound, points)?;
    let rule = simpson_weights(cfg.steps)?;
    let spec = ObjectiveSpec {
        target: setup.target,
        weights: cfg.weights(),
        obstacles: problem.obstacles.as_ref(),
        penalty: setup.penalty,
        include_source: setup.source == SourceMode::Learned,
    };
    let nodes = total_objective(&mut tape, &bundle, &rule, &spec)?;
    let terms = nodes.terms(&tape);
    let mass = terminal_mass(&tape, &bundle);
    let mut grads = Vec::new();
    if trainable != Trainable::NONE {
        let mut g = tape.backward(nodes.total)?;
        let ids = bound.node_ids();
        let n = trainable_count(fields, trainable);
        for id in &ids[..n] {
            grads.push(g.take(*id).expect("trainable node has a gradient"));
        }
    }
    Ok(Evaluation {
        terms,
        terminal_mass: mass,
        clamp_events: nodes.clamp_events,
        grads,
        peak_bytes: tape.peak_bytes(),
    })
}

fn trainable_count(fields: &FieldPair, trainable: Trainable) -> usize {
    match (trainable.velocity, trainable.source) {
        (true, true) => fields.named_tensors().len(),
        (true, false) => fields.velocity_tensor_count(),
        (false, false) => 0,
        (false, true) => panic!("source-only training is not supported"),
    }
}

/// Loss terms and gradients of the main objective on a given batch.
pub fn evaluate(
    fields: &FieldPair,
    problem: &Problem,
    cfg: &TrainConfig,
    points: &Tensor,
    trainable: Trainable,
) -> Result<Evaluation, TrainError> {
    let setup = PhaseSetup {
        phase: Phase::Main,
        target: &problem.rho1,
        penalty: TerminalPenalty::Gkl,
        source: cfg.source_mode(),
    };
    evaluate_phase(fields, problem, cfg, setup, points, trainable)
}

/// Random streams of one run: parameter initialization and batch sampling.
pub fn run_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let init = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = ChaCha8Rng::seed_from_u64(seed);
    batches.set_stream(1);
    (init, batches)
}

fn run_phase(
    fields: &mut FieldPair,
    problem: &Problem,
    cfg: &TrainConfig,
    setup: PhaseSetup<'_>,
    epochs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainHistory, TrainError> {
    let trainable = if setup.source == SourceMode::Learned {
        Trainable::ALL
    } else {
        Trainable::VELOCITY_ONLY
    };
    let n = trainable_count(fields, trainable);
    let mut adam = AdamState::new(fields.named_tensors().iter().take(n).map(|(_, t)| *t));
    let mut history = TrainHistory::default();
    for epoch in 0..epochs {
        let start = Instant::now();
        let lr = lr_schedule(epoch, cfg.lr0, cfg.decay);
        let batch = problem.rho0.sample(cfg.batch, rng);
        let abort = |reason: String, fields: &FieldPair, history: &TrainHistory| TrainError::NumericalAbort {
            phase: setup.phase,
            epoch,
            reason,
            last_good: Box::new(fields.clone()),
            history: history.clone(),
        };
        let eval = match evaluate_phase(fields, problem, cfg, setup, &batch.points, trainable) {
            Ok(e) => e,
            Err(e) if is_numerical(&e) => return Err(abort(e.to_string(), fields, &history)),
            Err(e) => return Err(e),
        };
        if !eval.terms.total.is_finite() {
            return Err(abort(format!("objective is {}", eval.terms.total), fields, &history));
        }
        let grads: Vec<&Tensor> = eval.grads.iter().collect();
        let mut params = fields.tensors_mut();
        if let Err(e) = adam_step(&mut params[..n], &grads, &mut adam, lr) {
            drop(params);
            return Err(abort(e.to_string(), fields, &history));
        }
        let record = EpochRecord {
            epoch,
            terms: eval.terms,
            terminal_mass: eval.terminal_mass,
            lr,
            epoch_time_s: start.elapsed().as_secs_f64(),
            clamp_events: eval.clamp_events,
        };
        if epoch % 100 == 0 || epoch + 1 == epochs {
            info!(
                "{} epoch {epoch}: total {:.6e} P {:.3e} mass {:.4}",
                setup.phase, record.terms.total, record.terms.gkl, record.terminal_mass
            );
        }
        history.records.push(record);
    }
    Ok(history)
}

/// Whether the warm start runs for this problem.
pub fn pretrain_triggered(problem: &Problem, cfg: &TrainConfig) -> bool {
    cfg.pretrain_epochs > 0 && problem.mean_distance() > cfg.pretrain_trigger_distance
}

/// Velocity-only warm start against `E + lambda KL(rho(1) | rho1 / |rho1|)`
/// with the source held at zero (plus the obstacle term when present).
/// Returns `None` without touching `fields` when not triggered.
pub fn pretrain_mean_shift(
    fields: &mut FieldPair,
    problem: &Problem,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<TrainHistory>, TrainError> {
    if !pretrain_triggered(problem, cfg) {
        return Ok(None);
    }
    let target = problem.rho1.normalized();
    let setup = PhaseSetup {
        phase: Phase::Pretrain,
        target: &target,
        penalty: TerminalPenalty::Kl,
        source: SourceMode::Off,
    };
    run_phase(fields, problem, cfg, setup, cfg.pretrain_epochs, rng).map(Some)
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct Trained {
    pub fields: FieldPair,
    pub history: TrainHistory,
    /// Warm-start history when the pretrain phase ran.
    pub pretrain: Option<TrainHistory>,
}

/// Initializes parameters from the seed, runs the warm start when
/// triggered, then the main phase.
pub fn train(problem: &Problem, cfg: &TrainConfig) -> Result<Trained, TrainError> {
    cfg.validate()?;
    problem.validate()?;
    let shape = cfg.field_shape(problem.dim());
    shape.validate()?;
    let (mut init_rng, mut rng) = run_rngs(cfg.seed);
    let mut fields = init_params(shape, &mut init_rng);
    if cfg.epochs == 0 {
        return Ok(Trained {
            fields,
            history: TrainHistory::default(),
            pretrain: None,
        });
    }
    let pretrain = pretrain_mean_shift(&mut fields, problem, cfg, &mut rng)?;
    let history = train_from(&mut fields, problem, cfg, &mut rng)?;
    Ok(Trained {
        fields,
        history,
        pretrain,
    })
}

/// Main phase starting from the given parameters.
pub fn train_from(
    fields: &mut FieldPair,
    problem: &Problem,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainHistory, TrainError> {
    let setup = PhaseSetup {
        phase: Phase::Main,
        target: &problem.rho1,
        penalty: TerminalPenalty::Gkl,
        source: cfg.source_mode(),
    };
    run_phase(fields, problem, cfg, setup, cfg.epochs, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(0, 0.01, 0.98), 0.01);
        assert!((lr_schedule(9, 0.01, 0.98) - 0.01).abs() < 1e-18);
        assert!((lr_schedule(10, 0.01, 0.98) - 0.0098).abs() < 1e-15);
        let direct = 0.01 * 0.98f64.powi(99);
        assert!((lr_schedule(995, 0.01, 0.98) - direct).abs() < 1e-18);
        assert!((direct - 1.353e-3).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_gradient() {
        let mut p = Tensor::column(vec![1.0, -2.0]);
        let g = Tensor::zeros(&[2, 1]);
        let before = p.clone();
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[&g], &mut st, 0.01).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);

        st.m[0] = Tensor::column(vec![0.5, 0.5]);
        st.v[0] = Tensor::column(vec![0.25, 0.25]);
        adam_step(&mut [&mut p], &[&g], &mut st, 0.0).unwrap();
        assert_eq!(st.m[0].data(), &[0.45, 0.45]);
        assert!(st.v[0].data()[0] < 0.25);
    }

    #[test]
    fn adam_first_step() {
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[&Tensor::scalar(1.0)], &mut st, 0.01).unwrap();
        assert!((p.item() + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new([&p]);
        for _ in 0..200 {
            let g = Tensor::scalar(2.0 * (p.item() - 3.0));
            adam_step(&mut [&mut p], &[&g], &mut st, 0.1).unwrap();
        }
        assert!((p.item() - 3.0).abs() < 0.05, "{}", p.item());
    }

    #[test]
    fn adam_rejects_bad_input() {
        let mut p = Tensor::column(vec![1.0, 2.0]);
        let mut st = AdamState::new([&p]);
        let bad = Tensor::column(vec![f64::NAN, 0.0]);
        let before = p.clone();
        assert_eq!(
            adam_step(&mut [&mut p], &[&bad], &mut st, 0.1),
            Err(AdamError::NonFinite { index: 0 })
        );
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
        let wrong = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            adam_step(&mut [&mut p], &[&wrong], &mut st, 0.1),
            Err(AdamError::Shape { .. })
        ));
    }

    #[test]
    fn config_validation_lists_fields() {
        let cfg = TrainConfig {
            steps: 7,
            alpha: 0.0,
            batch: 0,
            ..TrainConfig::default()
        };
        let p = cfg.problems();
        assert!(p.iter().any(|m| m.starts_with("steps")));
        assert!(p.iter().any(|m| m.starts_with("alpha")));
        assert!(p.iter().any(|m| m.starts_with("batch")));
        assert!(TrainConfig::default().validate().is_ok());
    }
}
