//! Dynamic unbalanced optimal transport under the Wasserstein-Fisher-Rao
//! objective, solved by training neural velocity and source fields along
//! Lagrangian characteristics.

pub mod bench;
pub mod densities;
pub mod fields;
pub mod json;
pub mod lagrangian;
pub mod objective;
pub mod oracle;
pub mod par;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use densities::{Component, GaussianMixture, SampleBatch};
pub use fields::{FieldPair, FieldShape, HatBasis, SourceField, VelocityField};
pub use lagrangian::{Integrator, SourceMode, TrajectoryBundle};
pub use objective::{ObjectiveTerms, ObstacleMap, QuadratureRule, Rect};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
