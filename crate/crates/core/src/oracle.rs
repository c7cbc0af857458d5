//! Independent checks: central-difference gradients, flow-map Jacobian
//! determinants and grid quadrature of the transported mass.

use thiserror::Error;

use crate::densities::GaussianMixture;
use crate::fields::{FieldError, FieldPair, Trainable};
use crate::lagrangian::{Integrator, LagrangianError, SourceMode};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("time {t} is not a node of a {steps}-step grid")]
    NotANode { t: f64, steps: usize },
    #[error("grid quadrature supports dimension 1 or 2, got {0}")]
    GridDimension(usize),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Lagrangian(#[from] LagrangianError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Central-difference settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSpec {
    pub h: f64,
    pub rel_tol: f64,
}

impl FdSpec {
    /// Step for parameter gradients.
    pub const PARAMS: Self = Self { h: 1e-5, rel_tol: 1e-4 };
    /// Step for flow-map Jacobians.
    pub const FLOW: Self = Self { h: 1e-4, rel_tol: 1e-3 };
}

/// `(f(p + h e_k) - f(p - h e_k)) / 2h` for every coordinate.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "step must be positive");
    let mut p = params.to_vec();
    (0..p.len())
        .map(|k| {
            let x = p[k];
            p[k] = x + h;
            let up = f(&p);
            p[k] = x - h;
            let down = f(&p);
            p[k] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)` in the Euclidean norm.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Node index of `t` on an `steps`-step uniform grid.
pub fn node_index(t: f64, steps: usize) -> Result<usize, OracleError> {
    let j = t * steps as f64;
    let r = j.round();
    if (j - r).abs() > 1e-9 || !(0.0..=steps as f64).contains(&r) {
        return Err(OracleError::NotANode { t, steps });
    }
    Ok(r as usize)
}

/// Values of the integrated states at one node.
#[derive(Debug, Clone)]
pub struct FlowSnapshot {
    /// `[r, d]`
    pub z: Tensor,
    pub log_mu: Vec<f64>,
    pub log_rho: Vec<f64>,
}

/// Pushes `points` along the fields and reads the states at node `j`.
pub fn flow_at(
    fields: &FieldPair,
    rho0: &GaussianMixture,
    points: &Tensor,
    steps: usize,
    source: SourceMode,
    j: usize,
) -> Result<FlowSnapshot, OracleError> {
    let mut tape = Tape::new();
    let mut bound = fields.bind(&mut tape, Trainable::NONE)?;
    let bundle = Integrator::new(rho0, steps)
        .with_source(source)
        .integrate(&mut tape, &mut bound, points)?;
    Ok(FlowSnapshot {
        z: tape.value(bundle.z[j]).clone(),
        log_mu: tape.value(bundle.log_mu[j]).data().to_vec(),
        log_rho: tape.value(bundle.log_rho[j]).data().to_vec(),
    })
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn determinant(mut a: Vec<f64>, n: usize) -> f64 {
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs()))
            .expect("nonempty");
        if a[p * n + c] == 0.0 {
            return 0.0;
        }
        if p != c {
            for k in 0..n {
                a.swap(p * n + k, c * n + k);
            }
            det = -det;
        }
        let piv = a[c * n + c];
        det *= piv;
        for i in c + 1..n {
            let f = a[i * n + c] / piv;
            for k in c..n {
                a[i * n + k] -= f * a[c * n + k];
            }
        }
    }
    det
}

/// `det(dz(x, t)/dx)` from central differences of the integrated flow map,
/// using `2d` perturbed starts. `t` must be a node of the `steps` grid.
pub fn fd_flow_jacobian_det(
    fields: &FieldPair,
    x: &[f64],
    t: f64,
    h: f64,
    steps: usize,
) -> Result<f64, OracleError> {
    let d = x.len();
    let j = node_index(t, steps)?;
    let mut pts = Vec::with_capacity(2 * d * d);
    for k in 0..d {
        for s in [h, -h] {
            let mut p = x.to_vec();
            p[k] += s;
            pts.extend(p);
        }
    }
    let rho0 = GaussianMixture::standard(d);
    let snap = flow_at(
        fields,
        &rho0,
        &Tensor::matrix(2 * d, d, pts),
        steps,
        SourceMode::Off,
        j,
    )?;
    let z = snap.z.data();
    // column k of the Jacobian from rows 2k (plus) and 2k + 1 (minus)
    let mut jac = vec![0.0; d * d];
    for k in 0..d {
        for i in 0..d {
            jac[i * d + k] = (z[2 * k * d + i] - z[(2 * k + 1) * d + i]) / (2.0 * h);
        }
    }
    Ok(determinant(jac, d))
}

/// Regular grid on `[lo, hi]^d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    /// Points per axis, endpoints included.
    pub points: usize,
}

/// Trapezoid estimate of `int rho(x, t) dx`.
///
/// Grid points are pushed along the flow with their carried weights and the
/// integral is taken over the starting grid through the change of variables
/// `rho(z, t) det(dz/dx) = rho(z, t) mu0(x) / mu(z, t)`.
pub fn grid_mass(
    fields: &FieldPair,
    rho0: &GaussianMixture,
    t: f64,
    grid: Grid,
    steps: usize,
    source: SourceMode,
) -> Result<f64, OracleError> {
    let d = rho0.dim();
    if d != 1 && d != 2 {
        return Err(OracleError::GridDimension(d));
    }
    if grid.points < 2 || !(grid.hi > grid.lo) {
        return Err(OracleError::Grid(format!("{grid:?}")));
    }
    let j = node_index(t, steps)?;
    let n = grid.points;
    let step = (grid.hi - grid.lo) / (n - 1) as f64;
    let axis: Vec<f64> = (0..n).map(|i| grid.lo + i as f64 * step).collect();
    let w1: Vec<f64> = (0..n)
        .map(|i| if i == 0 || i == n - 1 { 0.5 * step } else { step })
        .collect();
    let (pts, weights): (Vec<f64>, Vec<f64>) = if d == 1 {
        (axis.clone(), w1.clone())
    } else {
        let mut p = Vec::with_capacity(2 * n * n);
        let mut w = Vec::with_capacity(n * n);
        for (a, wa) in axis.iter().zip(&w1) {
            for (b, wb) in axis.iter().zip(&w1) {
                p.extend([*a, *b]);
                w.push(wa * wb);
            }
        }
        (p, w)
    };
    let count = weights.len();
    let points = Tensor::matrix(count, d, pts);
    let snap = flow_at(fields, rho0, &points, steps, source, j)?;
    let log_mu0 = rho0.normalized().log_density(&points).expect("dimension matches");
    Ok((0..count)
        .map(|i| weights[i] * (snap.log_rho[i] - snap.log_mu[i] + log_mu0[i]).exp())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::FieldShape;

    fn shape(d: usize) -> FieldShape {
        FieldShape {
            dim: d,
            intervals: 2,
            width: 1,
            hidden: 3,
        }
    }

    #[test]
    fn fd_gradient_examples() {
        let g = fd_gradient(|p| p[0] * p[0] + p[1] * p[1], &[1.0, 2.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = fd_gradient(|_| 3.0, &[1.0, 2.0, 3.0], 1e-5);
        assert!(g.iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn determinant_small_cases() {
        assert_eq!(determinant(vec![3.0], 1), 3.0);
        assert!((determinant(vec![1.0, 2.0, 3.0, 4.0], 2) + 2.0).abs() < 1e-15);
        assert!((determinant(vec![0.0, 1.0, 1.0, 0.0], 2) + 1.0).abs() < 1e-15);
        let a = vec![2.0, 0.0, 1.0, 1.0, 3.0, 2.0, 1.0, 1.0, 2.0];
        assert!((determinant(a, 3) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn flow_det_trivial_fields() {
        let zero = FieldPair::zeros(shape(2));
        let det = fd_flow_jacobian_det(&zero, &[0.3, -0.7], 1.0, 1e-4, 10).unwrap();
        assert!((det - 1.0).abs() < 1e-10);

        let mut constant = FieldPair::zeros(shape(2));
        for i in 0..=2 {
            constant.velocity.block_mut(i, 0).b2 = Tensor::row(vec![1.5, -0.5]);
        }
        let det = fd_flow_jacobian_det(&constant, &[0.3, -0.7], 0.5, 1e-4, 10).unwrap();
        assert!((det - 1.0).abs() < 1e-10, "{det}");
        assert!(matches!(
            fd_flow_jacobian_det(&zero, &[0.0, 0.0], 0.33, 1e-4, 10),
            Err(OracleError::NotANode { .. })
        ));
    }

    #[test]
    fn grid_mass_trivial_fields() {
        let rho0 = GaussianMixture::standard(1);
        let grid = Grid {
            lo: -8.0,
            hi: 8.0,
            points: 400,
        };
        let zero = FieldPair::zeros(shape(1));
        let m = grid_mass(&zero, &rho0, 1.0, grid, 10, SourceMode::Learned).unwrap();
        assert!((m - 1.0).abs() < 1e-3);

        let mut grow = FieldPair::zeros(shape(1));
        grow.source.b = Tensor::scalar(std::f64::consts::LN_2);
        let m = grid_mass(&grow, &rho0, 1.0, grid, 10, SourceMode::Learned).unwrap();
        assert!((m - 2.0).abs() < 1e-3, "{m}");

        let heavy = GaussianMixture::gaussian(2.5, vec![0.5], 1.0).unwrap();
        let m = grid_mass(&grow, &heavy, 0.0, grid, 10, SourceMode::Learned).unwrap();
        assert!((m - 2.5).abs() < 1e-3);

        assert!(matches!(
            grid_mass(&FieldPair::zeros(shape(3)), &GaussianMixture::standard(3), 1.0, grid, 10, SourceMode::Off),
            Err(OracleError::GridDimension(3))
        ));
    }
}
