//! Characteristic ODEs integrated with classical RK4 on the tape.
//!
//! Each sample carries its position `z`, the reference log-density `ln mu`
//! and the log-weight `ln(rho / mu)`:
//!
//! ```text
//! dz/dt          = v(z, t)
//! d ln mu / dt   = -div v(z, t)
//! d ln(rho/mu)/dt = f(z, t)
//! ```
//!
//! This is a fixed linear change of variables of the `(z, ln rho, ln mu)`
//! system, so RK4 produces the same iterates; `ln rho` is recovered as
//! `ln mu + ln(rho/mu)`. Keeping the log-weight as a state makes it exactly
//! constant whenever the source is identically zero.

use std::io::{self, Write};

use thiserror::Error;

use crate::densities::GaussianMixture;
use crate::fields::{BoundFields, FieldError};
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LagrangianError {
    #[error("non-finite {quantity} at step {step}, sample {sample}")]
    NonFinite {
        step: usize,
        sample: usize,
        quantity: &'static str,
    },
    #[error("step count must be even and at least 2, got {0}")]
    InvalidSteps(usize),
    #[error("initial points have shape {got:?}, expected [r, {dim}]")]
    Points { got: Vec<usize>, dim: usize },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// A right-hand side for [`rk4_step`].
pub trait Dynamics {
    /// Extra values produced by the first-stage evaluation (kept per node).
    type Aux;

    fn rhs(&mut self, tape: &mut Tape, state: &[NodeId], t: f64) -> Result<(Vec<NodeId>, Self::Aux), LagrangianError>;
}

fn check_finite(tape: &Tape, ids: &[NodeId], step: usize, names: &[&'static str]) -> Result<(), LagrangianError> {
    for (k, &id) in ids.iter().enumerate() {
        let v = tape.value(id);
        if let Some(flat) = v.first_non_finite() {
            let cols = v.dims2().map_or(1, |(_, c)| c);
            return Err(LagrangianError::NonFinite {
                step,
                sample: flat / cols,
                quantity: names.get(k).copied().unwrap_or("state"),
            });
        }
    }
    Ok(())
}

/// One classical RK4 step of size `h` from time `t`. Returns the new state
/// and the auxiliary output of the first stage.
pub fn rk4_step<D: Dynamics>(
    dynamics: &mut D,
    tape: &mut Tape,
    state: &[NodeId],
    t: f64,
    h: f64,
    step: usize,
    names: &[&'static str],
) -> Result<(Vec<NodeId>, D::Aux), LagrangianError> {
    let (k1, aux) = dynamics.rhs(tape, state, t)?;
    let stage = |tape: &mut Tape, k: &[NodeId], c: f64| -> Result<Vec<NodeId>, LagrangianError> {
        let s = state
            .iter()
            .zip(k)
            .map(|(&y, &ki)| tape.lincomb(&[y, ki], &[1.0, c]))
            .collect::<Result<Vec<_>, _>>()?;
        check_finite(tape, &s, step, names)?;
        Ok(s)
    };
    let s2 = stage(tape, &k1, 0.5 * h)?;
    let (k2, _) = dynamics.rhs(tape, &s2, t + 0.5 * h)?;
    let s3 = stage(tape, &k2, 0.5 * h)?;
    let (k3, _) = dynamics.rhs(tape, &s3, t + 0.5 * h)?;
    let s4 = stage(tape, &k3, h)?;
    let (k4, _) = dynamics.rhs(tape, &s4, t + h)?;
    let next = (0..state.len())
        .map(|i| tape.lincomb(&[state[i], k1[i], k2[i], k3[i], k4[i]], &[1.0, h / 6.0, h / 3.0, h / 3.0, h / 6.0]))
        .collect::<Result<Vec<_>, _>>()?;
    check_finite(tape, &next, step, names)?;
    Ok((next, aux))
}

/// Integrates `dynamics` over `[0, 1]` with `steps` uniform RK4 steps,
/// returning the state at every node.
pub fn rk4_integrate<D: Dynamics>(
    dynamics: &mut D,
    tape: &mut Tape,
    initial: Vec<NodeId>,
    steps: usize,
) -> Result<Vec<Vec<NodeId>>, LagrangianError> {
    let h = 1.0 / steps as f64;
    let mut states = vec![initial];
    for j in 0..steps {
        let (next, _) = rk4_step(dynamics, tape, &states[j], j as f64 * h, h, j, &[])?;
        states.push(next);
    }
    Ok(states)
}

/// Whether the source field is evaluated or held at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceMode {
    Learned,
    /// `f = 0`: balanced transport, total mass conserved.
    Off,
}

struct CharacteristicSystem<'a> {
    fields: &'a mut BoundFields,
    source: SourceMode,
    zero: NodeId,
}

/// Stage-one field values at a node.
#[derive(Debug, Clone, Copy)]
pub struct NodeFields {
    pub velocity: NodeId,
    pub source: NodeId,
}

impl Dynamics for CharacteristicSystem<'_> {
    type Aux = NodeFields;

    fn rhs(&mut self, tape: &mut Tape, state: &[NodeId], t: f64) -> Result<(Vec<NodeId>, NodeFields), LagrangianError> {
        let t = t.clamp(0.0, 1.0);
        let z = state[0];
        let ve = self.fields.eval_velocity_and_divergence(tape, z, t)?;
        let neg_div = tape.scale(ve.divergence, -1.0)?;
        let f = match self.source {
            SourceMode::Learned => self.fields.eval_source(tape, z, t)?,
            SourceMode::Off => self.zero,
        };
        Ok((
            vec![ve.velocity, neg_div, f],
            NodeFields {
                velocity: ve.velocity,
                source: f,
            },
        ))
    }
}

/// States and field values at every time node `t_j = j / N`.
#[derive(Debug, Clone)]
pub struct TrajectoryBundle {
    pub times: Vec<f64>,
    /// `[r, d]` per node.
    pub z: Vec<NodeId>,
    /// `[r, 1]` per node.
    pub log_rho: Vec<NodeId>,
    pub log_mu: Vec<NodeId>,
    /// `ln(rho / mu)`, `[r, 1]` per node.
    pub log_ratio: Vec<NodeId>,
    /// `v(z_j, t_j)`, `[r, d]`.
    pub velocity: Vec<NodeId>,
    /// `f(z_j, t_j)`, `[r, 1]`.
    pub source: Vec<NodeId>,
    pub samples: usize,
    pub dim: usize,
}

impl TrajectoryBundle {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn last(&self) -> usize {
        self.times.len() - 1
    }
}

/// Integrator settings for the characteristic system.
#[derive(Debug, Clone, Copy)]
pub struct Integrator<'a> {
    pub rho0: &'a GaussianMixture,
    /// Sampling reference; `None` means the mass-normalized `rho0`.
    pub mu0: Option<&'a GaussianMixture>,
    pub steps: usize,
    pub source: SourceMode,
}

impl<'a> Integrator<'a> {
    pub fn new(rho0: &'a GaussianMixture, steps: usize) -> Self {
        Self {
            rho0,
            mu0: None,
            steps,
            source: SourceMode::Learned,
        }
    }

    pub fn with_source(mut self, source: SourceMode) -> Self {
        self.source = source;
        self
    }

    /// Pushes `points` (`[r, d]`, drawn from the reference) along the flow.
    pub fn integrate(
        &self,
        tape: &mut Tape,
        fields: &mut BoundFields,
        points: &Tensor,
    ) -> Result<TrajectoryBundle, LagrangianError> {
        let n = self.steps;
        if n < 2 || !n.is_multiple_of(2) {
            return Err(LagrangianError::InvalidSteps(n));
        }
        let dim = self.rho0.dim();
        let (r, d) = points.dims2().ok_or_else(|| LagrangianError::Points {
            got: points.shape().to_vec(),
            dim,
        })?;
        if d != dim {
            return Err(LagrangianError::Points {
                got: points.shape().to_vec(),
                dim,
            });
        }

        let z0 = tape.constant(points.clone())?;
        let (log_mu0, log_ratio0) = match self.mu0 {
            None => {
                let mu = self.rho0.normalized();
                let lm = mu.log_density(points).expect("dimension checked");
                let ratio = self.rho0.total_mass().ln();
                (Tensor::column(lm), Tensor::filled(&[r, 1], ratio))
            }
            Some(mu) => {
                let lm = mu.log_density(points).map_err(|e| TapeError::Invalid(e.to_string()))?;
                let lr = self.rho0.log_density(points).expect("dimension checked");
                let ratio: Vec<f64> = lr.iter().zip(&lm).map(|(a, b)| a - b).collect();
                (Tensor::column(lm), Tensor::column(ratio))
            }
        };
        let log_mu0 = tape.constant(log_mu0)?;
        let log_ratio0 = tape.constant(log_ratio0)?;
        let zero = tape.constant(Tensor::zeros(&[r, 1]))?;

        let mut system = CharacteristicSystem {
            fields,
            source: self.source,
            zero,
        };
        let names = ["position", "log mu", "log ratio"];
        let h = 1.0 / n as f64;
        let mut states = vec![vec![z0, log_mu0, log_ratio0]];
        let mut aux = Vec::with_capacity(n + 1);
        for j in 0..n {
            let (next, a) = rk4_step(&mut system, tape, &states[j], j as f64 * h, h, j, &names)?;
            states.push(next);
            aux.push(a);
        }
        let (_, last) = system.rhs(tape, &states[n], 1.0)?;
        aux.push(last);

        let mut bundle = TrajectoryBundle {
            times: (0..=n).map(|j| j as f64 / n as f64).collect(),
            z: Vec::with_capacity(n + 1),
            log_rho: Vec::with_capacity(n + 1),
            log_mu: Vec::with_capacity(n + 1),
            log_ratio: Vec::with_capacity(n + 1),
            velocity: aux.iter().map(|a| a.velocity).collect(),
            source: aux.iter().map(|a| a.source).collect(),
            samples: r,
            dim,
        };
        for s in &states {
            bundle.z.push(s[0]);
            bundle.log_mu.push(s[1]);
            bundle.log_ratio.push(s[2]);
            bundle.log_rho.push(tape.add(s[1], s[2])?);
        }
        Ok(bundle)
    }
}

/// Monte Carlo estimate of the total mass at `t = 1`: the mean of `rho / mu`.
pub fn terminal_mass(tape: &Tape, bundle: &TrajectoryBundle) -> f64 {
    mass_at(tape, bundle, bundle.last())
}

/// Mean of `rho / mu` at node `j`.
pub fn mass_at(tape: &Tape, bundle: &TrajectoryBundle, j: usize) -> f64 {
    let v = tape.value(bundle.log_ratio[j]).data();
    v.iter().map(|x| x.exp()).sum::<f64>() / v.len() as f64
}

/// Formats a float with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `t, sample_id, x_1..x_d, rho, mu`, one row per (node, sample).
pub fn write_trajectory_csv<W: Write>(out: &mut W, tape: &Tape, bundle: &TrajectoryBundle) -> io::Result<()> {
    let d = bundle.dim;
    let mut header = vec!["t".to_string(), "sample_id".to_string()];
    header.extend((1..=d).map(|k| format!("x_{k}")));
    header.push("rho".into());
    header.push("mu".into());
    writeln!(out, "{}", header.join(","))?;
    for (j, &t) in bundle.times.iter().enumerate() {
        let z = tape.value(bundle.z[j]).data();
        let lr = tape.value(bundle.log_rho[j]).data();
        let lm = tape.value(bundle.log_mu[j]).data();
        for i in 0..bundle.samples {
            let mut row = vec![fmt17(t), i.to_string()];
            row.extend(z[i * d..(i + 1) * d].iter().map(|&x| fmt17(x)));
            row.push(fmt17(lr[i].exp()));
            row.push(fmt17(lm[i].exp()));
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{FieldPair, FieldShape, SourceField, Trainable};

    fn shape(d: usize) -> FieldShape {
        FieldShape {
            dim: d,
            intervals: 2,
            width: 1,
            hidden: 3,
        }
    }

    #[test]
    fn constant_velocity_translates_exactly() {
        let s = shape(2);
        let mut p = FieldPair::zeros(s);
        for i in 0..=s.intervals {
            p.velocity.block_mut(i, 0).b2 = Tensor::row(vec![0.5, -1.25]);
        }
        let rho0 = GaussianMixture::standard(2);
        let pts = Tensor::matrix(3, 2, vec![0.0, 1.0, -2.0, 0.5, 3.0, 3.0]);
        let mut tape = Tape::new();
        let mut b = p.bind(&mut tape, Trainable::ALL).unwrap();
        let bundle = Integrator::new(&rho0, 4).integrate(&mut tape, &mut b, &pts).unwrap();
        let zn = tape.value(bundle.z[4]).data();
        for i in 0..3 {
            assert!((zn[2 * i] - (pts.data()[2 * i] + 0.5)).abs() < 1e-14);
            assert!((zn[2 * i + 1] - (pts.data()[2 * i + 1] - 1.25)).abs() < 1e-14);
        }
        for j in 0..=4 {
            assert_eq!(tape.value(bundle.log_mu[j]), tape.value(bundle.log_mu[0]));
        }
    }

    #[test]
    fn constant_source_doubles_mass() {
        let s = shape(1);
        let mut p = FieldPair::zeros(s);
        p.source = SourceField::constant(s, 2f64.ln());
        let rho0 = GaussianMixture::standard(1);
        let pts = Tensor::matrix(4, 1, vec![-1.0, 0.0, 0.3, 2.0]);
        let mut tape = Tape::new();
        let mut b = p.bind(&mut tape, Trainable::ALL).unwrap();
        let bundle = Integrator::new(&rho0, 10).integrate(&mut tape, &mut b, &pts).unwrap();
        let l0 = tape.value(bundle.log_rho[0]).data().to_vec();
        let ln = tape.value(bundle.log_rho[10]).data();
        for i in 0..4 {
            assert!((ln[i] - l0[i] - 2f64.ln()).abs() < 1e-14);
        }
        assert_eq!(tape.value(bundle.z[10]), &pts);
        assert!((terminal_mass(&tape, &bundle) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn conservation_without_source() {
        let s = shape(2);
        let p = FieldPair::zeros(s);
        let rho0 = GaussianMixture::gaussian(3.0, vec![1.0, 0.0], 0.5).unwrap();
        let pts = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        let mut tape = Tape::new();
        let mut b = p.bind(&mut tape, Trainable::ALL).unwrap();
        let bundle = Integrator::new(&rho0, 4).integrate(&mut tape, &mut b, &pts).unwrap();
        for j in 0..=4 {
            for &v in tape.value(bundle.log_ratio[j]).data() {
                assert_eq!(v, 3f64.ln());
            }
        }
    }

    #[test]
    fn odd_or_tiny_step_counts_rejected() {
        let p = FieldPair::zeros(shape(1));
        let rho0 = GaussianMixture::standard(1);
        let pts = Tensor::matrix(1, 1, vec![0.0]);
        for n in [0, 1, 3] {
            let mut tape = Tape::new();
            let mut b = p.bind(&mut tape, Trainable::ALL).unwrap();
            assert!(matches!(
                Integrator::new(&rho0, n).integrate(&mut tape, &mut b, &pts),
                Err(LagrangianError::InvalidSteps(_))
            ));
        }
    }

    #[test]
    fn exploding_field_aborts_at_first_step() {
        let s = shape(1);
        let mut p = FieldPair::zeros(s);
        for i in 0..=s.intervals {
            let b = p.velocity.block_mut(i, 0);
            b.w1 = Tensor::matrix(3, 1, vec![1.0; 3]);
            b.w2 = Tensor::matrix(1, 3, vec![1.5e308; 3]);
        }
        let rho0 = GaussianMixture::standard(1);
        let pts = Tensor::matrix(2, 1, vec![0.5, 1.0]);
        let mut tape = Tape::new();
        let mut b = p.bind(&mut tape, Trainable::ALL).unwrap();
        let err = Integrator::new(&rho0, 2).integrate(&mut tape, &mut b, &pts).unwrap_err();
        assert!(matches!(err, LagrangianError::NonFinite { step: 0, .. }), "{err}");
    }

    #[test]
    fn non_finite_sample_index_is_row() {
        let mut tape = Tape::new();
        let ok = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        let big = tape.constant(Tensor::matrix(3, 2, vec![0.0, 0.0, 0.0, 1e308, 0.0, 0.0])).unwrap();
        let bad = tape.lincomb(&[big, big], &[1.0, 1.0]).unwrap();
        let err = check_finite(&tape, &[ok, bad], 7, &["a", "b"]).unwrap_err();
        assert!(matches!(err, LagrangianError::NonFinite { step: 7, sample: 1, quantity: "b" }));
    }
}
