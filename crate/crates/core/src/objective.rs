//! Semi-discrete objective: kinetic energy, source cost, generalized KL
//! terminal penalty and an optional obstacle preference term.
//!
//! Spatial integrals are Monte Carlo averages over the characteristic
//! samples weighted by `rho / mu = exp(ln(rho / mu))`; time integrals use
//! composite Simpson weights on the integrator's nodes. Every exponent is
//! clamped to `[-50, 50]` and the number of clamped entries is reported.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densities::GaussianMixture;
use crate::lagrangian::TrajectoryBundle;
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;

/// Bound applied to every exponent before `exp`.
pub const EXP_CLAMP: f64 = 50.0;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("Simpson's rule needs an even number of intervals >= 2, got {0}")]
    OddIntervals(usize),
    #[error("rule has {rule} nodes but the trajectory has {bundle}")]
    NodeCount { rule: usize, bundle: usize },
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("obstacles need at least two coordinates, trajectory has {0}")]
    ObstacleDimension(usize),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Composite Simpson weights on `N + 1` uniform nodes of `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn intervals(&self) -> usize {
        self.weights.len() - 1
    }

    /// `sum_j w_j g(t_j)`
    pub fn integrate(&self, g: impl Fn(f64) -> f64) -> f64 {
        let n = self.intervals() as f64;
        self.weights
            .iter()
            .enumerate()
            .map(|(j, w)| w * g(j as f64 / n))
            .sum()
    }
}

/// `(h/3) [1, 4, 2, 4, ..., 2, 4, 1]` with `h = 1/N`.
pub fn simpson_weights(n: usize) -> Result<QuadratureRule, ObjectiveError> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(ObjectiveError::OddIntervals(n));
    }
    let h3 = 1.0 / (3.0 * n as f64);
    let weights = (0..=n)
        .map(|j| {
            let c = if j == 0 || j == n {
                1.0
            } else if j % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h3
        })
        .collect();
    Ok(QuadratureRule { weights })
}

/// Axis-aligned rectangle in the first two coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

/// Blurred rectangular obstacles.
///
/// Along each axis a rectangle contributes 1 inside `[min, max]` and
/// `exp(-dist^2 / (2 s^2))` outside; the rectangle value is the product over
/// the two axes and `Q` is the maximum over rectangles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleMap {
    pub rects: Vec<Rect>,
    #[serde(default = "default_blur")]
    pub blur: f64,
}

fn default_blur() -> f64 {
    0.5
}

fn ramp(x: f64, lo: f64, hi: f64, s: f64) -> (f64, f64) {
    let (dist, sign) = if x < lo {
        (lo - x, -1.0)
    } else if x > hi {
        (x - hi, 1.0)
    } else {
        return (1.0, 0.0);
    };
    let v = (-dist * dist / (2.0 * s * s)).exp();
    // d/dx exp(-dist^2/2s^2) with d dist/dx = sign
    (v, -v * dist / (s * s) * sign)
}

impl ObstacleMap {
    pub fn new(rects: Vec<Rect>, blur: f64) -> Self {
        Self { rects, blur }
    }

    pub fn empty() -> Self {
        Self::new(vec![], default_blur())
    }

    /// `Q(x)` and its gradient in the first two coordinates.
    pub fn value_and_grad(&self, x: &[f64]) -> (f64, [f64; 2]) {
        let mut best = (0.0, [0.0, 0.0]);
        for r in &self.rects {
            let (a, da) = ramp(x[0], r.min[0], r.max[0], self.blur);
            let (b, db) = ramp(x[1], r.min[1], r.max[1], self.blur);
            let q = a * b;
            if q > best.0 {
                best = (q, [da * b, a * db]);
            }
        }
        best
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.value_and_grad(x).0
    }

    /// Records `Q` for each row of `z` as an `[r, 1]` node.
    pub fn node(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId, ObjectiveError> {
        let d = tape.value(z).dims2().map_or(0, |(_, c)| c);
        if d < 2 {
            return Err(ObjectiveError::ObstacleDimension(d));
        }
        Ok(tape.row_field(z, |row, g| {
            let (q, dq) = self.value_and_grad(row);
            g.fill(0.0);
            g[0] = dq[0];
            g[1] = dq[1];
            q
        })?)
    }
}

/// Objective values read back from the tape.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    #[serde(rename = "E", deserialize_with = "crate::json::f64_or_nan")]
    pub kinetic: f64,
    #[serde(rename = "R", deserialize_with = "crate::json::f64_or_nan")]
    pub source: f64,
    #[serde(rename = "P", deserialize_with = "crate::json::f64_or_nan")]
    pub gkl: f64,
    #[serde(rename = "Q", deserialize_with = "crate::json::f64_or_nan")]
    pub preference: f64,
    #[serde(deserialize_with = "crate::json::f64_or_nan")]
    pub total: f64,
}

/// Penalty weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub alpha: f64,
    pub lambda: f64,
    pub lambda_p: f64,
}

impl Weights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ObjectiveError::Weights(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.lambda >= 0.0) || !(self.lambda_p >= 0.0) {
            return Err(ObjectiveError::Weights("lambda and lambda_p must be nonnegative".into()));
        }
        Ok(())
    }
}

/// How the terminal penalty compares the pushed density with the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalPenalty {
    /// Generalized KL against the unnormalized target.
    Gkl,
    /// `E[(rho/mu) ln(rho / target)]`: the GKL without its linear mass terms.
    /// Used with a normalized target while the source is off.
    Kl,
}

/// Node handles of the assembled objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveNodes {
    pub kinetic: NodeId,
    pub source: NodeId,
    pub gkl: NodeId,
    pub preference: NodeId,
    pub total: NodeId,
    /// Exponent entries clamped while building the terms.
    pub clamp_events: usize,
}

impl ObjectiveNodes {
    pub fn terms(&self, tape: &Tape) -> ObjectiveTerms {
        ObjectiveTerms {
            kinetic: tape.value(self.kinetic).item(),
            source: tape.value(self.source).item(),
            gkl: tape.value(self.gkl).item(),
            preference: tape.value(self.preference).item(),
            total: tape.value(self.total).item(),
        }
    }
}

/// `exp(clamp(x))` with the number of clamped entries.
fn clamped_exp(tape: &mut Tape, x: NodeId) -> Result<(NodeId, usize), TapeError> {
    let events = tape
        .value(x)
        .data()
        .iter()
        .filter(|v| v.abs() > EXP_CLAMP)
        .count();
    let c = tape.clamp(x, -EXP_CLAMP, EXP_CLAMP)?;
    Ok((tape.exp(c)?, events))
}

fn check_rule(bundle: &TrajectoryBundle, rule: &QuadratureRule) -> Result<(), ObjectiveError> {
    if rule.weights.len() != bundle.times.len() {
        return Err(ObjectiveError::NodeCount {
            rule: rule.weights.len(),
            bundle: bundle.times.len(),
        });
    }
    Ok(())
}

/// `sum_j w_j mean_i(per_sample_j[i] * ratio_j[i])`
fn weighted_time_integral(
    tape: &mut Tape,
    bundle: &TrajectoryBundle,
    rule: &QuadratureRule,
    mut per_sample: impl FnMut(&mut Tape, usize) -> Result<NodeId, ObjectiveError>,
) -> Result<(NodeId, usize), ObjectiveError> {
    check_rule(bundle, rule)?;
    let r = bundle.samples as f64;
    let mut terms = Vec::with_capacity(rule.weights.len());
    let mut events = 0;
    for j in 0..rule.weights.len() {
        let g = per_sample(tape, j)?;
        let (ratio, ev) = clamped_exp(tape, bundle.log_ratio[j])?;
        events += ev;
        let prod = tape.mul(g, ratio)?;
        terms.push(tape.sum_all(prod)?);
    }
    let coeffs: Vec<f64> = rule.weights.iter().map(|w| w / r).collect();
    Ok((tape.lincomb(&terms, &coeffs)?, events))
}

/// Kinetic term `int_0^1 mean_i |v|^2 rho/mu dt`.
pub fn kinetic_term(tape: &mut Tape, bundle: &TrajectoryBundle, rule: &QuadratureRule) -> Result<NodeId, ObjectiveError> {
    Ok(kinetic_term_counted(tape, bundle, rule)?.0)
}

fn kinetic_term_counted(
    tape: &mut Tape,
    bundle: &TrajectoryBundle,
    rule: &QuadratureRule,
) -> Result<(NodeId, usize), ObjectiveError> {
    weighted_time_integral(tape, bundle, rule, |tape, j| {
        let sq = tape.square(bundle.velocity[j])?;
        Ok(tape.sum_axis(sq, 1)?)
    })
}

/// Source term `int_0^1 mean_i f^2 rho/mu dt`.
pub fn source_term(tape: &mut Tape, bundle: &TrajectoryBundle, rule: &QuadratureRule) -> Result<NodeId, ObjectiveError> {
    Ok(weighted_time_integral(tape, bundle, rule, |tape, j| Ok(tape.square(bundle.source[j])?))?.0)
}

/// Preference term `int_0^1 mean_i Q(z) rho/mu dt`.
pub fn preference_term(
    tape: &mut Tape,
    bundle: &TrajectoryBundle,
    rule: &QuadratureRule,
    obstacles: &ObstacleMap,
) -> Result<NodeId, ObjectiveError> {
    if bundle.dim < 2 {
        return Err(ObjectiveError::ObstacleDimension(bundle.dim));
    }
    if obstacles.rects.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0))?);
    }
    Ok(weighted_time_integral(tape, bundle, rule, |tape, j| obstacles.node(tape, bundle.z[j]))?.0)
}

/// Generalized KL between the pushed density at `t = 1` and `target`:
/// `mean_i [a (ln a - ln b) - a + b]` with `a = rho/mu` and `b = target/mu`
/// at the terminal samples. Each bracket equals `a phi(b/a) >= 0` with
/// `phi(s) = s - 1 - ln s`.
pub fn gkl_term(tape: &mut Tape, bundle: &TrajectoryBundle, target: &GaussianMixture) -> Result<NodeId, ObjectiveError> {
    Ok(terminal_penalty(tape, bundle, target, TerminalPenalty::Gkl)?.0)
}

/// Per-sample terminal penalty `[r, 1]` and clamp count.
pub fn terminal_brackets(
    tape: &mut Tape,
    bundle: &TrajectoryBundle,
    target: &GaussianMixture,
    kind: TerminalPenalty,
) -> Result<(NodeId, usize), ObjectiveError> {
    let n = bundle.last();
    let log_a = bundle.log_ratio[n];
    let log_target = target.log_density_node(tape, bundle.z[n])?;
    let log_b = tape.sub(log_target, bundle.log_mu[n])?;
    let (a, ev_a) = clamped_exp(tape, log_a)?;
    let diff = tape.sub(log_a, log_b)?;
    let main = tape.mul(a, diff)?;
    match kind {
        TerminalPenalty::Kl => Ok((main, ev_a)),
        TerminalPenalty::Gkl => {
            let (b, ev_b) = clamped_exp(tape, log_b)?;
            Ok((tape.lincomb(&[main, a, b], &[1.0, -1.0, 1.0])?, ev_a + ev_b))
        }
    }
}

fn terminal_penalty(
    tape: &mut Tape,
    bundle: &TrajectoryBundle,
    target: &GaussianMixture,
    kind: TerminalPenalty,
) -> Result<(NodeId, usize), ObjectiveError> {
    let (brackets, events) = terminal_brackets(tape, bundle, target, kind)?;
    Ok((tape.mean_all(brackets)?, events))
}

/// Everything needed to assemble the total objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveSpec<'a> {
    pub target: &'a GaussianMixture,
    pub weights: Weights,
    pub obstacles: Option<&'a ObstacleMap>,
    pub penalty: TerminalPenalty,
    /// Skip the source term (it is identically zero when the source is off).
    pub include_source: bool,
}

impl<'a> ObjectiveSpec<'a> {
    pub fn new(target: &'a GaussianMixture, weights: Weights) -> Self {
        Self {
            target,
            weights,
            obstacles: None,
            penalty: TerminalPenalty::Gkl,
            include_source: true,
        }
    }
}

/// `E + R / alpha + lambda P + lambda_P Q` on the tape.
pub fn total_objective(
    tape: &mut Tape,
    bundle: &TrajectoryBundle,
    rule: &QuadratureRule,
    spec: &ObjectiveSpec<'_>,
) -> Result<ObjectiveNodes, ObjectiveError> {
    spec.weights.validate()?;
    check_rule(bundle, rule)?;
    let (kinetic, ev_e) = kinetic_term_counted(tape, bundle, rule)?;
    let source = if spec.include_source {
        source_term(tape, bundle, rule)?
    } else {
        tape.constant(Tensor::scalar(0.0))?
    };
    let (gkl, ev_p) = terminal_penalty(tape, bundle, spec.target, spec.penalty)?;
    let preference = match spec.obstacles {
        Some(obs) if !obs.rects.is_empty() => preference_term(tape, bundle, rule, obs)?,
        _ => tape.constant(Tensor::scalar(0.0))?,
    };
    let w = spec.weights;
    let total = tape.lincomb(
        &[kinetic, source, gkl, preference],
        &[1.0, 1.0 / w.alpha, w.lambda, w.lambda_p],
    )?;
    Ok(ObjectiveNodes {
        kinetic,
        source,
        gkl,
        preference,
        total,
        // the ratio clamps in E, R and Q see the same log-weights; count them once
        clamp_events: ev_e + ev_p,
    })
}

/// Mass-weighted fraction of (node, sample) pairs where `Q > 0.5`.
pub fn obstacle_violation(tape: &Tape, bundle: &TrajectoryBundle, obstacles: &ObstacleMap) -> f64 {
    let d = bundle.dim;
    let mut hit = 0.0;
    let mut all = 0.0;
    for j in 0..bundle.times.len() {
        let z = tape.value(bundle.z[j]).data();
        let lr = tape.value(bundle.log_ratio[j]).data();
        for (row, l) in z.chunks(d).zip(lr) {
            let w = l.clamp(-EXP_CLAMP, EXP_CLAMP).exp();
            all += w;
            if obstacles.value(row) > 0.5 {
                hit += w;
            }
        }
    }
    if all > 0.0 {
        hit / all
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_examples() {
        let r = simpson_weights(2).unwrap();
        let expect = [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0];
        for (a, b) in r.weights.iter().zip(expect) {
            assert!((a - b).abs() < 1e-16);
        }
        let r = simpson_weights(10).unwrap();
        let pattern = [1.0, 4.0, 2.0, 4.0, 2.0, 4.0, 2.0, 4.0, 2.0, 4.0, 1.0];
        for (a, c) in r.weights.iter().zip(pattern) {
            assert!((a - c / 30.0).abs() < 1e-16);
        }
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((r.integrate(|t| t * t * t) - 0.25).abs() < 1e-15);
        assert!(matches!(simpson_weights(3), Err(ObjectiveError::OddIntervals(3))));
        assert!(simpson_weights(0).is_err());
    }

    #[test]
    fn obstacle_profile() {
        let obs = ObstacleMap::new(
            vec![Rect {
                min: [0.0, 0.0],
                max: [2.0, 1.0],
            }],
            0.5,
        );
        assert_eq!(obs.value(&[1.0, 0.5]), 1.0);
        assert_eq!(obs.value(&[0.0, 0.0]), 1.0);
        assert!(obs.value(&[2.0 + 3.0 * 0.5 + 1e-9, 0.5]) < 0.012);
        assert!(obs.value(&[5.0, 5.0]) < 0.01);
        for &x in &[-1.0, 0.3, 2.4, 3.0] {
            for &y in &[-0.6, 0.5, 1.2] {
                let q = obs.value(&[x, y]);
                assert!((0.0..=1.0).contains(&q));
            }
        }
        assert_eq!(ObstacleMap::empty().value(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn obstacle_gradient_matches_differences() {
        let obs = ObstacleMap::new(
            vec![
                Rect {
                    min: [0.0, 0.0],
                    max: [2.0, 1.0],
                },
                Rect {
                    min: [4.0, -1.0],
                    max: [5.0, 3.0],
                },
            ],
            0.5,
        );
        let h = 1e-6;
        for p in [[-0.4, 0.3], [2.3, 1.4], [3.4, 0.2], [1.0, -0.7]] {
            let (_, g) = obs.value_and_grad(&p);
            for k in 0..2 {
                let mut a = p;
                let mut b = p;
                a[k] += h;
                b[k] -= h;
                let fd = (obs.value(&a) - obs.value(&b)) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-7, "{p:?} axis {k}: {fd} vs {}", g[k]);
            }
        }
    }
}
