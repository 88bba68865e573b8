//! Generative diffeomorphic shape model.
//!
//! Initial velocities of a population of subjects, expressed in template
//! space, are modelled as `v = W z + r`: a low-dimensional principal subspace
//! `W` with latent coordinates `z`, plus a residual field `r` ("anatomical
//! noise") with inferred precision. Velocities are turned into diffeomorphisms
//! by geodesic shooting, and a categorical template is warped to each subject
//! through a softmax of its interpolated log-probabilities.
//!
//! Module map:
//!
//! * [`field`], [`interp`], [`fieldio`]: periodic lattices, pull/push
//!   resampling and the `GSHFLD01` file format.
//! * [`operator`]: the metric `L` and its Green's function `K`.
//! * [`shooting`]: momentum-conserving geodesic shooting.
//! * [`template`]: softmax template warping, the categorical data term and
//!   template updates.
//! * [`latent`]: per-subject Laplace posteriors and conjugate updates for the
//!   noise and latent precisions, plus the variational lower bound.
//! * [`subspace`]: Gauss-Newton subspace updates and orthogonalisation.
//! * [`pipeline`]: configuration, synthetic data, training, registration,
//!   checkpoints and exports.

pub mod error;
pub(crate) mod fft;
pub mod field;
pub mod fieldio;
pub mod interp;
pub mod latent;
pub mod operator;
pub mod pipeline;
pub mod shooting;
pub mod solver;
pub mod subspace;
pub mod template;

pub use error::{Error, ErrorKind, Result};
pub use field::{CategoricalImage, Field, Lattice, ScalarField, TensorField, VectorField};
pub use operator::{build_kernel, MetricParams, SpectralKernel};
pub use shooting::{shoot, Deformation, DeformationKind, ShootingResult};
