//! Unnormalized mixtures of axis-aligned Gaussians.
//!
//! These carry the initial density, the target density and the sampling
//! reference. The total mass of a mixture is the sum of its weights and is
//! not required to be one.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, PartialEq)]
pub enum DensityError {
    #[error("mixture needs at least one component")]
    Empty,
    #[error("component {index}: weight must be positive and finite, got {weight}")]
    BadWeight { index: usize, weight: f64 },
    #[error("component {index}: variance entries must be positive and finite")]
    BadVariance { index: usize },
    #[error("component {index}: mean has dimension {got}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("points have dimension {got}, mixture has dimension {expected}")]
    PointDimension { expected: usize, got: usize },
}

/// One weighted Gaussian with diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    #[serde(rename = "var")]
    pub variance: Vec<f64>,
}

impl Component {
    /// `weight * N(mean, var * I)`
    pub fn isotropic(weight: f64, mean: Vec<f64>, var: f64) -> Self {
        let d = mean.len();
        Self {
            weight,
            mean,
            variance: vec![var; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Component>", into = "Vec<Component>")]
pub struct GaussianMixture {
    components: Vec<Component>,
    dim: usize,
    // per component: ln(weight) - 0.5 * (d ln 2pi + sum ln var)
    log_norms: Vec<f64>,
    inv_vars: Vec<Vec<f64>>,
}

impl TryFrom<Vec<Component>> for GaussianMixture {
    type Error = DensityError;
    fn try_from(c: Vec<Component>) -> Result<Self, Self::Error> {
        Self::new(c)
    }
}

impl From<GaussianMixture> for Vec<Component> {
    fn from(m: GaussianMixture) -> Self {
        m.components
    }
}

/// Draws from a mixture, with the stream identity recorded for provenance.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub points: Tensor,
    pub stream: u64,
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self, DensityError> {
        let first = components.first().ok_or(DensityError::Empty)?;
        let dim = first.mean.len();
        let mut log_norms = Vec::with_capacity(components.len());
        let mut inv_vars = Vec::with_capacity(components.len());
        for (index, c) in components.iter().enumerate() {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(DensityError::BadWeight {
                    index,
                    weight: c.weight,
                });
            }
            for got in [c.mean.len(), c.variance.len()] {
                if got != dim {
                    return Err(DensityError::DimensionMismatch {
                        index,
                        expected: dim,
                        got,
                    });
                }
            }
            if dim == 0 {
                return Err(DensityError::DimensionMismatch {
                    index,
                    expected: 1,
                    got: 0,
                });
            }
            if c.variance.iter().any(|&v| !(v > 0.0 && v.is_finite())) || c.mean.iter().any(|m| !m.is_finite()) {
                return Err(DensityError::BadVariance { index });
            }
            let log_det: f64 = c.variance.iter().map(|v| v.ln()).sum();
            log_norms.push(c.weight.ln() - 0.5 * (dim as f64 * LN_2PI + log_det));
            inv_vars.push(c.variance.iter().map(|v| 1.0 / v).collect());
        }
        Ok(Self {
            components,
            dim,
            log_norms,
            inv_vars,
        })
    }

    /// Single isotropic Gaussian `weight * N(mean, var * I)`.
    pub fn gaussian(weight: f64, mean: Vec<f64>, var: f64) -> Result<Self, DensityError> {
        Self::new(vec![Component::isotropic(weight, mean, var)])
    }

    /// `N(0, I_d)`
    pub fn standard(d: usize) -> Self {
        Self::gaussian(1.0, vec![0.0; d], 1.0).expect("valid standard normal")
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn total_mass(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    /// The same shape rescaled to unit mass.
    pub fn normalized(&self) -> Self {
        let m = self.total_mass();
        let comps = self
            .components
            .iter()
            .map(|c| Component {
                weight: c.weight / m,
                ..c.clone()
            })
            .collect();
        Self::new(comps).expect("rescaling keeps a valid mixture")
    }

    /// Mass-weighted mean.
    pub fn mean(&self) -> Vec<f64> {
        let m = self.total_mass();
        let mut out = vec![0.0; self.dim];
        for c in &self.components {
            for (o, &x) in out.iter_mut().zip(&c.mean) {
                *o += c.weight / m * x;
            }
        }
        out
    }

    /// Log of the unnormalized density at `x`; also writes the gradient in
    /// `x` into `grad` when given.
    pub fn log_density_point(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let k = self.components.len();
        let mut terms = [0.0f64; 8];
        let mut heap;
        let terms: &mut [f64] = if k <= terms.len() {
            &mut terms[..k]
        } else {
            heap = vec![0.0; k];
            &mut heap
        };
        for (j, c) in self.components.iter().enumerate() {
            let q: f64 = x
                .iter()
                .zip(&c.mean)
                .zip(&self.inv_vars[j])
                .map(|((xi, mi), iv)| (xi - mi) * (xi - mi) * iv)
                .sum();
            terms[j] = self.log_norms[j] - 0.5 * q;
        }
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = terms.iter().map(|t| (t - max).exp()).sum();
        let value = max + total.ln();
        if let Some(g) = grad {
            g.iter_mut().for_each(|v| *v = 0.0);
            for (j, c) in self.components.iter().enumerate() {
                let w = (terms[j] - value).exp();
                for ((gi, (xi, mi)), iv) in g.iter_mut().zip(x.iter().zip(&c.mean)).zip(&self.inv_vars[j]) {
                    *gi -= w * (xi - mi) * iv;
                }
            }
        }
        value
    }

    /// Log of the unnormalized density for each row of an `[r, d]` batch.
    pub fn log_density(&self, x: &Tensor) -> Result<Vec<f64>, DensityError> {
        let (_, d) = x.dims2().ok_or(DensityError::PointDimension {
            expected: self.dim,
            got: 0,
        })?;
        if d != self.dim {
            return Err(DensityError::PointDimension {
                expected: self.dim,
                got: d,
            });
        }
        Ok(x.data().chunks(d).map(|row| self.log_density_point(row, None)).collect())
    }

    /// Records the log-density of each row of `x` on the tape as an `[r, 1]` node.
    pub fn log_density_node(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId, TapeError> {
        let d = tape.value(x).dims2().map(|(_, c)| c);
        if d != Some(self.dim) {
            return Err(TapeError::Invalid(format!(
                "log_density: points have shape {:?}, mixture dimension {}",
                tape.value(x).shape(),
                self.dim
            )));
        }
        tape.row_field(x, |row, g| self.log_density_point(row, Some(g)))
    }

    /// Draws `r` i.i.d. points from the mass-normalized mixture.
    pub fn sample<R: Rng + ?Sized>(&self, r: usize, rng: &mut R) -> SampleBatch {
        assert!(r > 0, "sample count must be positive");
        let mass = self.total_mass();
        let mut data = Vec::with_capacity(r * self.dim);
        for _ in 0..r {
            let mut u: f64 = rng.random::<f64>() * mass;
            let mut pick = self.components.len() - 1;
            for (j, c) in self.components.iter().enumerate() {
                if u < c.weight {
                    pick = j;
                    break;
                }
                u -= c.weight;
            }
            let c = &self.components[pick];
            for (m, v) in c.mean.iter().zip(&c.variance) {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + v.sqrt() * z);
            }
        }
        SampleBatch {
            points: Tensor::matrix(r, self.dim, data),
            stream: rng.random(),
        }
    }
}
