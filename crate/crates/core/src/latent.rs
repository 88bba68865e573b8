//! Per-subject Laplace posteriors over `z` and `r`, conjugate updates for the
//! noise precision `λ` (Gamma) and latent precision `A` (Wishart), and the
//! variational lower bound.
//!
//! Every subject contributes a free energy
//!
//! ```text
//! F = E(v*) + ½ tr(S_z WᵀHW) + ½ Σᵢ tr(Hᵢ S_r,ᵢ)
//!   + γ₁/2 tr(A (zzᵀ + S_z)) + γ₁λ/2 E[rᵀLr] + γ₂/2 E[vᵀLv]
//!   − ½ ln|S_z| − ½ Σᵢ ln|S_r,ᵢ| + normalisers
//! ```
//!
//! where `v* = W z* + r*` and `H` is the Gauss-Newton Hessian of the data term
//! at `v*`. The curvature traces are the second-order correction to the data
//! term under the Laplace posterior; with them the Laplace covariances are the
//! exact maximisers of the bound, so each update below can only increase it.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::field::{dot, Field, Lattice, TensorField, VectorField};
use crate::operator::SpectralKernel;
use crate::solver::{backtrack, pcg, GnOptions};
use crate::subspace::{gram, Subspace};
use crate::template::{apply_blocks, DataTerm, DataTermDerivs};

/// Weights of the two velocity priors: `γ₁` for the separate priors on
/// `W`, `z`, `r` and `γ₂` for the joint prior on `W z + r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureWeights {
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Default for MixtureWeights {
    fn default() -> Self {
        Self {
            gamma1: 1.0,
            gamma2: 1.0,
        }
    }
}

impl MixtureWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma1 >= 0.0 && self.gamma2 >= 0.0 && self.gamma1 + self.gamma2 > 0.0;
        if !ok || !(self.gamma1.is_finite() && self.gamma2.is_finite()) {
            return Err(Error::Config(format!(
                "prior weights must be non-negative with a positive sum, got ({}, {})",
                self.gamma1, self.gamma2
            )));
        }
        Ok(())
    }
}

/// How the residual posterior covariance is represented.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualUncertainty {
    /// Point estimate only.
    None,
    /// Voxelwise `d×d` blocks of the Laplace covariance.
    #[default]
    Diagonal,
}

/// Gaussian posterior over the latent coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl LatentPosterior {
    pub fn zeros(m: usize) -> Self {
        Self {
            mean: DVector::zeros(m),
            cov: DMatrix::zeros(m, m),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `E[z zᵀ] = z* z*ᵀ + S_z`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        &self.mean * self.mean.transpose() + &self.cov
    }
}

/// Laplace posterior over the residual field.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualPosterior {
    pub mean: VectorField,
    /// Voxelwise `d×d` covariance blocks; absent when uncertainty is ignored.
    pub uncertainty: Option<TensorField>,
    /// `E[rᵀ L r] = r*ᵀ L r* + Σᵢ tr(S_r,ᵢ Lᵢᵢ)`.
    pub expected_prior_energy: f64,
}

impl ResidualPosterior {
    pub fn zeros(lattice: &Lattice) -> Self {
        Self {
            mean: Field::zeros(lattice, lattice.ndim()),
            uncertainty: None,
            expected_prior_energy: 0.0,
        }
    }
}

/// Both posteriors of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectPosterior {
    pub z: LatentPosterior,
    pub r: ResidualPosterior,
}

impl SubjectPosterior {
    pub fn zeros(lattice: &Lattice, m: usize) -> Self {
        Self {
            z: LatentPosterior::zeros(m),
            r: ResidualPosterior::zeros(lattice),
        }
    }

    /// `v = W z* + r*`.
    pub fn velocity(&self, w: &Subspace) -> VectorField {
        let mut v = w.reconstruct(&self.z.mean);
        v.axpy(1.0, &self.r.mean);
        v
    }
}

/// Gamma posterior over `λ`, parameterised so that the prior mean is `λ₀`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePrecisionPosterior {
    pub alpha: f64,
    pub beta: f64,
    pub nu0: f64,
    pub lambda0: f64,
    /// Number of residual degrees of freedom `d·I`.
    pub dof: f64,
}

impl NoisePrecisionPosterior {
    pub fn prior(lambda0: f64, nu0: f64, lattice: &Lattice) -> Result<Self> {
        if !(lambda0 > 0.0 && nu0 > 0.0 && lambda0.is_finite() && nu0.is_finite()) {
            return Err(Error::Config(format!(
                "lambda0 and nu0 must be positive, got {lambda0} and {nu0}"
            )));
        }
        let dof = (lattice.ndim() * lattice.len()) as f64;
        Ok(Self {
            alpha: nu0 * dof / 2.0,
            beta: nu0 * dof / (2.0 * lambda0),
            nu0,
            lambda0,
            dof,
        })
    }

    pub fn prior_alpha(&self) -> f64 {
        self.nu0 * self.dof / 2.0
    }

    pub fn prior_beta(&self) -> f64 {
        self.nu0 * self.dof / (2.0 * self.lambda0)
    }

    /// `E[λ]`.
    pub fn mean(&self) -> f64 {
        self.alpha / self.beta
    }

    /// `E[ln λ]`.
    pub fn expected_log(&self) -> f64 {
        digamma(self.alpha) - self.beta.ln()
    }

    /// `KL(q ‖ p)` against the prior.
    pub fn kl_divergence(&self) -> f64 {
        let (a0, b0) = (self.prior_alpha(), self.prior_beta());
        let (a, b) = (self.alpha, self.beta);
        (a - a0) * digamma(a) - ln_gamma(a) + ln_gamma(a0) + a0 * (b.ln() - b0.ln())
            + a * (b0 - b) / b
    }
}

/// Wishart posterior over `A` with prior `W(I/M, M)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPrecisionPosterior {
    pub scale: DMatrix<f64>,
    pub dof: f64,
}

fn ln_multigamma(x: f64, m: usize) -> f64 {
    let mf = m as f64;
    mf * (mf - 1.0) / 4.0 * PI.ln() + (0..m).map(|j| ln_gamma(x - j as f64 / 2.0)).sum::<f64>()
}

fn multidigamma(x: f64, m: usize) -> f64 {
    (0..m).map(|j| digamma(x - j as f64 / 2.0)).sum()
}

fn spd_log_det(m: &DMatrix<f64>) -> Option<f64> {
    let ch = m.clone().cholesky()?;
    Some(2.0 * ch.l().diagonal().iter().map(|x| x.ln()).sum::<f64>())
}

impl LatentPrecisionPosterior {
    pub fn prior(m: usize) -> Self {
        Self {
            scale: DMatrix::identity(m, m) / m as f64,
            dof: m as f64,
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.nrows()
    }

    /// `E[A] = ν V`.
    pub fn mean(&self) -> DMatrix<f64> {
        &self.scale * self.dof
    }

    /// `E[ln |A|]`.
    pub fn expected_log_det(&self) -> f64 {
        let m = self.dim();
        multidigamma(self.dof / 2.0, m)
            + m as f64 * 2f64.ln()
            + spd_log_det(&self.scale).unwrap_or(f64::NEG_INFINITY)
    }

    /// `KL(q ‖ p)` against `W(I/M, M)`.
    pub fn kl_divergence(&self) -> f64 {
        let m = self.dim();
        let mf = m as f64;
        let (n0, n) = (mf, self.dof);
        let ln_v = spd_log_det(&self.scale).unwrap_or(f64::NEG_INFINITY);
        let ln_v0 = -mf * mf.ln();
        let tr = mf * self.scale.trace();
        n0 / 2.0 * (ln_v0 - ln_v) + n / 2.0 * (tr - mf) + ln_multigamma(n0 / 2.0, m)
            - ln_multigamma(n / 2.0, m)
            + (n - n0) / 2.0 * multidigamma(n / 2.0, m)
    }
}

/// Conjugate Gamma update from the expected residual energies.
pub fn update_noise_precision(
    post: &NoisePrecisionPosterior,
    residuals: &[&ResidualPosterior],
    weights: &MixtureWeights,
) -> NoisePrecisionPosterior {
    let n = residuals.len() as f64;
    let energy: f64 = residuals.iter().map(|r| r.expected_prior_energy).sum();
    NoisePrecisionPosterior {
        alpha: post.prior_alpha() + weights.gamma1 * n * post.dof / 2.0,
        beta: post.prior_beta() + weights.gamma1 / 2.0 * energy,
        ..*post
    }
}

/// Conjugate Wishart update from the latent second moments.
pub fn update_latent_precision(
    post: &LatentPrecisionPosterior,
    latents: &[&LatentPosterior],
    weights: &MixtureWeights,
) -> Result<LatentPrecisionPosterior> {
    let m = post.dim();
    let mut acc = DMatrix::zeros(m, m);
    for z in latents {
        acc += z.second_moment();
    }
    let inv = DMatrix::identity(m, m) * m as f64 + acc * weights.gamma1;
    let inv = (&inv + inv.transpose()) * 0.5;
    let scale = inv
        .cholesky()
        .ok_or(Error::SingularSystem("Wishart scale"))?
        .inverse();
    Ok(LatentPrecisionPosterior {
        scale: (&scale + scale.transpose()) * 0.5,
        dof: m as f64 + weights.gamma1 * latents.len() as f64,
    })
}

/// Global quantities every per-subject update reads.
pub struct SharedState<'a> {
    pub subspace: &'a Subspace,
    pub kernel: &'a SpectralKernel,
    pub weights: MixtureWeights,
    pub uncertainty: ResidualUncertainty,
    /// `E[A]`.
    pub latent_precision: DMatrix<f64>,
    pub expected_log_det_a: f64,
    /// `E[λ]`.
    pub noise_precision: f64,
    pub expected_log_lambda: f64,
    lw: Vec<VectorField>,
    gram: DMatrix<f64>,
    l_diag: Vec<f64>,
    log_det_l: f64,
}

impl<'a> SharedState<'a> {
    pub fn new(
        subspace: &'a Subspace,
        kernel: &'a SpectralKernel,
        noise: &NoisePrecisionPosterior,
        latent: &LatentPrecisionPosterior,
        weights: MixtureWeights,
        uncertainty: ResidualUncertainty,
    ) -> Result<Self> {
        weights.validate()?;
        subspace.lattice().ensure_same(kernel.lattice(), "shared state")?;
        if latent.dim() != subspace.len() {
            return Err(Error::Config(format!(
                "latent precision is {0}x{0} but the subspace has {1} modes",
                latent.dim(),
                subspace.len()
            )));
        }
        let lw = subspace.apply_l(kernel)?;
        let gram = gram(subspace.modes(), &lw);
        Ok(Self {
            subspace,
            kernel,
            weights,
            uncertainty,
            latent_precision: latent.mean(),
            expected_log_det_a: latent.expected_log_det(),
            noise_precision: noise.mean(),
            expected_log_lambda: noise.expected_log(),
            lw,
            gram,
            l_diag: kernel.diagonal_block(),
            log_det_l: kernel.log_det(),
        })
    }

    /// The same global state around a different subspace.
    pub fn with_subspace<'b>(&self, subspace: &'b Subspace) -> Result<SharedState<'b>>
    where
        'a: 'b,
    {
        subspace.lattice().ensure_same(self.lattice(), "shared state")?;
        if subspace.len() != self.modes() {
            return Err(Error::Config("replacement subspace changes the mode count".into()));
        }
        let lw = subspace.apply_l(self.kernel)?;
        Ok(SharedState {
            subspace,
            kernel: self.kernel,
            weights: self.weights,
            uncertainty: self.uncertainty,
            latent_precision: self.latent_precision.clone(),
            expected_log_det_a: self.expected_log_det_a,
            noise_precision: self.noise_precision,
            expected_log_lambda: self.expected_log_lambda,
            gram: gram(subspace.modes(), &lw),
            lw,
            l_diag: self.l_diag.clone(),
            log_det_l: self.log_det_l,
        })
    }

    pub fn lattice(&self) -> &Lattice {
        self.subspace.lattice()
    }

    pub fn modes(&self) -> usize {
        self.subspace.len()
    }

    /// `L w_m` for every mode.
    pub fn lw(&self) -> &[VectorField] {
        &self.lw
    }

    /// `Wᵀ L W`.
    pub fn l_gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Residual prior weight `γ₁λ + γ₂`.
    pub fn residual_weight(&self) -> f64 {
        self.weights.gamma1 * self.noise_precision + self.weights.gamma2
    }

    /// `Wᵀ x`-style projections onto `L w_m`, i.e. `Wᵀ L x`.
    fn project_l(&self, x: &VectorField) -> DVector<f64> {
        DVector::from_iterator(self.lw.len(), self.lw.iter().map(|lw| lw.dot(x)))
    }

    fn project(&self, x: &VectorField) -> DVector<f64> {
        DVector::from_iterator(
            self.modes(),
            self.subspace.modes().iter().map(|w| w.dot(x)),
        )
    }

    /// `Wᵀ H W` for voxelwise Hessian blocks `H`.
    pub fn project_hessian(&self, hess_v: &TensorField) -> DMatrix<f64> {
        let hw: Vec<Vec<f64>> = self
            .subspace
            .modes()
            .iter()
            .map(|w| apply_blocks(hess_v, w.data()))
            .collect();
        let m = self.modes();
        let mut out = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in a..m {
                let x = dot(self.subspace.mode(a).data(), &hw[b]);
                out[(a, b)] = x;
                out[(b, a)] = x;
            }
        }
        out
    }

    /// Laplace precision of `z`: `WᵀHW + γ₁A + γ₂WᵀLW`.
    pub fn latent_hessian(&self, hess_v: &TensorField) -> DMatrix<f64> {
        self.project_hessian(hess_v)
            + &self.latent_precision * self.weights.gamma1
            + &self.gram * self.weights.gamma2
    }

    /// Voxelwise residual covariance blocks `(Hᵢ + c Lᵢᵢ)⁻¹`.
    pub fn residual_blocks(&self, hess_v: &TensorField) -> Result<TensorField> {
        let d = self.lattice().ndim();
        let c = self.residual_weight();
        let mut out = hess_v.clone();
        for i in 0..self.lattice().len() {
            let blk = out.voxel_mut(i);
            for (x, l) in blk.iter_mut().zip(&self.l_diag) {
                *x += c * l;
            }
            let m = DMatrix::from_row_slice(d, d, blk);
            let m = (&m + m.transpose()) * 0.5;
            let inv = m
                .cholesky()
                .ok_or(Error::SingularSystem("residual covariance block"))?
                .inverse();
            for a in 0..d {
                for b in 0..d {
                    blk[a * d + b] = inv[(a, b)];
                }
            }
        }
        Ok(out)
    }
}

/// Per-subject terms of the bound, evaluated at one `(z, r)` configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubjectTerms {
    pub data: f64,
    /// `½ tr(S_z WᵀHW) + ½ Σ tr(Hᵢ S_r,ᵢ)`.
    pub curvature: f64,
    pub latent_prior: f64,
    pub residual_prior: f64,
    pub joint_prior: f64,
    pub entropy: f64,
}

impl SubjectTerms {
    /// Contribution to the bound (negative free energy).
    pub fn bound(&self) -> f64 {
        -self.data - self.curvature + self.latent_prior + self.residual_prior + self.joint_prior
            + self.entropy
    }
}

fn block_traces(blocks: &TensorField, other: &[f64], d: usize) -> f64 {
    // Σᵢ tr(Bᵢ Oᵢ) for symmetric blocks; `other` is either per-voxel or shared.
    let shared = other.len() == d * d;
    blocks
        .data()
        .chunks(d * d)
        .enumerate()
        .map(|(i, b)| {
            let o = if shared { other } else { &other[i * d * d..(i + 1) * d * d] };
            dot(b, o)
        })
        .sum()
}

fn blocks_log_det(blocks: &TensorField, d: usize) -> Result<f64> {
    let mut acc = 0.0;
    for b in blocks.data().chunks(d * d) {
        acc += spd_log_det(&DMatrix::from_row_slice(d, d, b))
            .ok_or(Error::SingularSystem("residual covariance block"))?;
    }
    Ok(acc)
}

/// Evaluates the per-subject terms.
///
/// `derivs` must be the data term at `v = W z* + r*`, and `lr` the momentum
/// `L r*`.
fn subject_terms(
    shared: &SharedState,
    derivs: &DataTermDerivs,
    z: &LatentPosterior,
    r_mean: &VectorField,
    lr: &VectorField,
    s_r: Option<&TensorField>,
) -> Result<SubjectTerms> {
    let d = shared.lattice().ndim();
    let m = shared.modes() as f64;
    let di = (d * shared.lattice().len()) as f64;
    let ln2pi = (2.0 * PI).ln();
    let (g1, g2) = (shared.weights.gamma1, shared.weights.gamma2);

    let whw = shared.project_hessian(&derivs.hess_v);
    let mut curvature = 0.5 * (&z.cov * &whw).trace();
    let mut entropy = 0.5 * spd_log_det(&z.cov).ok_or(Error::SingularSystem("latent covariance"))?
        + m / 2.0 * (1.0 + ln2pi);
    let mut trace_r = 0.0;
    if let Some(s) = s_r {
        curvature += 0.5 * block_traces(s, derivs.hess_v.data(), d);
        trace_r = block_traces(s, &shared.l_diag, d);
        entropy += 0.5 * blocks_log_det(s, d)? + di / 2.0 * (1.0 + ln2pi);
    }

    let a = &shared.latent_precision;
    let latent_prior = g1
        * (0.5 * shared.expected_log_det_a - m / 2.0 * ln2pi - 0.5 * (a * z.second_moment()).trace());
    let rlr = r_mean.dot(lr);
    let residual_prior = g1
        * (di / 2.0 * shared.expected_log_lambda + 0.5 * shared.log_det_l - di / 2.0 * ln2pi
            - 0.5 * shared.noise_precision * (rlr + trace_r));
    // E[(Wz + r)ᵀ L (Wz + r)]
    let zgz = (z.mean.transpose() * &shared.gram * &z.mean)[(0, 0)];
    let cross = 2.0 * z.mean.dot(&shared.project_l(r_mean));
    let joint = zgz + cross + rlr + (&z.cov * &shared.gram).trace() + trace_r;
    let joint_prior = g2 * (0.5 * shared.log_det_l - di / 2.0 * ln2pi - 0.5 * joint);
    Ok(SubjectTerms {
        data: derivs.energy,
        curvature,
        latent_prior,
        residual_prior,
        joint_prior,
        entropy,
    })
}

/// Bound terms for a subject given precomputed data-term derivatives at its
/// reconstructed velocity.
pub fn subject_terms_at(
    shared: &SharedState,
    derivs: &DataTermDerivs,
    post: &SubjectPosterior,
) -> Result<SubjectTerms> {
    let lr = shared.kernel.apply_l(&post.r.mean)?;
    let s_r = match shared.uncertainty {
        ResidualUncertainty::None => None,
        ResidualUncertainty::Diagonal => post.r.uncertainty.as_ref(),
    };
    subject_terms(shared, derivs, &post.z, &post.r.mean, &lr, s_r)
}

/// Bound terms for a subject at its stored posterior.
pub fn subject_bound(
    data: &dyn DataTerm,
    shared: &SharedState,
    post: &SubjectPosterior,
) -> Result<SubjectTerms> {
    subject_terms_at(shared, &data.derivs(&post.velocity(shared.subspace))?, post)
}

/// Gradient of the latent objective
/// `E(Wz + r) + ½ zᵀ(γ₁A + γ₂WᵀLW) z + γ₂ zᵀWᵀL r`.
pub fn latent_gradient(
    shared: &SharedState,
    grad_v: &VectorField,
    z: &DVector<f64>,
    r: &VectorField,
) -> DVector<f64> {
    let (g1, g2) = (shared.weights.gamma1, shared.weights.gamma2);
    shared.project(grad_v)
        + &shared.latent_precision * z * g1
        + (&shared.gram * z + shared.project_l(r)) * g2
}

/// The latent objective itself, given the data energy at `Wz + r`.
pub fn latent_objective(
    shared: &SharedState,
    energy: f64,
    z: &DVector<f64>,
    r: &VectorField,
) -> f64 {
    let (g1, g2) = (shared.weights.gamma1, shared.weights.gamma2);
    let p = &shared.latent_precision * g1 + &shared.gram * g2;
    energy + 0.5 * (z.transpose() * p * z)[(0, 0)] + g2 * z.dot(&shared.project_l(r))
}

/// Gradient of the residual objective
/// `E(Wz + r) + (γ₁λ + γ₂)/2 rᵀLr + γ₂ rᵀLWz`.
pub fn residual_gradient(
    shared: &SharedState,
    grad_v: &VectorField,
    z: &DVector<f64>,
    r: &VectorField,
) -> Result<VectorField> {
    let mut target = r.scaled(shared.residual_weight());
    target.axpy(shared.weights.gamma2, &shared.subspace.reconstruct(z));
    let mut g = shared.kernel.apply_l(&target)?;
    g.axpy(1.0, grad_v);
    Ok(g)
}

pub fn residual_objective(
    shared: &SharedState,
    energy: f64,
    z: &DVector<f64>,
    r: &VectorField,
) -> Result<f64> {
    let lr = shared.kernel.apply_l(r)?;
    let wz = shared.subspace.reconstruct(z);
    Ok(energy + 0.5 * shared.residual_weight() * r.dot(&lr) + shared.weights.gamma2 * wz.dot(&lr))
}

struct Candidate {
    derivs: DataTermDerivs,
    z: LatentPosterior,
    r: ResidualPosterior,
}

fn finish_residual(
    shared: &SharedState,
    derivs: &DataTermDerivs,
    mean: VectorField,
    lr: &VectorField,
) -> Result<ResidualPosterior> {
    let rlr = mean.dot(lr);
    let (uncertainty, trace) = match shared.uncertainty {
        ResidualUncertainty::None => (None, 0.0),
        ResidualUncertainty::Diagonal => {
            let s = shared.residual_blocks(&derivs.hess_v)?;
            let t = block_traces(&s, &shared.l_diag, shared.lattice().ndim());
            (Some(s), t)
        }
    };
    Ok(ResidualPosterior {
        mean,
        uncertainty,
        expected_prior_energy: rlr + trace,
    })
}

fn latent_cov(shared: &SharedState, hess_v: &TensorField) -> Result<DMatrix<f64>> {
    let p = shared.latent_hessian(hess_v);
    let cov = p
        .cholesky()
        .ok_or(Error::SingularSystem("latent Gauss-Newton system"))?
        .inverse();
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Negative subject bound with `S_z` refreshed at `z`; `S_r` held fixed.
fn eval_latent(
    data: &dyn DataTerm,
    shared: &SharedState,
    z: &DVector<f64>,
    r: &ResidualPosterior,
    lr: &VectorField,
) -> Result<Option<(f64, Candidate)>> {
    let mut v = shared.subspace.reconstruct(z);
    v.axpy(1.0, &r.mean);
    let derivs = match data.derivs(&v) {
        Ok(d) => d,
        Err(Error::NonFinite(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let zp = LatentPosterior {
        mean: z.clone(),
        cov: match latent_cov(shared, &derivs.hess_v) {
            Ok(c) => c,
            Err(Error::SingularSystem(_)) => return Ok(None),
            Err(e) => return Err(e),
        },
    };
    let s_r = match shared.uncertainty {
        ResidualUncertainty::None => None,
        ResidualUncertainty::Diagonal => r.uncertainty.as_ref(),
    };
    let terms = subject_terms(shared, &derivs, &zp, &r.mean, lr, s_r)?;
    Ok(Some((
        -terms.bound(),
        Candidate {
            derivs,
            z: zp,
            r: r.clone(),
        },
    )))
}

/// Negative subject bound with `S_r` refreshed at `r`; `S_z` held fixed.
fn eval_residual(
    data: &dyn DataTerm,
    shared: &SharedState,
    z: &LatentPosterior,
    r: &VectorField,
) -> Result<Option<(f64, Candidate)>> {
    let mut v = shared.subspace.reconstruct(&z.mean);
    v.axpy(1.0, r);
    let derivs = match data.derivs(&v) {
        Ok(d) => d,
        Err(Error::NonFinite(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let lr = shared.kernel.apply_l(r)?;
    let rp = finish_residual(shared, &derivs, r.clone(), &lr)?;
    let terms = subject_terms(shared, &derivs, z, r, &lr, rp.uncertainty.as_ref())?;
    Ok(Some((
        -terms.bound(),
        Candidate {
            derivs,
            z: z.clone(),
            r: rp,
        },
    )))
}

/// Gauss-Newton update of `z` with backtracking on the subject bound.
///
/// `S_z` is refreshed to `(WᵀHW + γ₁A + γ₂WᵀLW)⁻¹` at the new mode.
pub fn update_latent(
    data: &dyn DataTerm,
    shared: &SharedState,
    post: &SubjectPosterior,
    opts: &GnOptions,
) -> Result<LatentPosterior> {
    let lr = shared.kernel.apply_l(&post.r.mean)?;
    let mut z = post.z.mean.clone();
    let (mut current, mut cand) = eval_latent(data, shared, &z, &post.r, &lr)?
        .ok_or(Error::NonFinite("latent objective at the current mode"))?;
    for _ in 0..opts.iterations {
        let g = latent_gradient(shared, &cand.derivs.grad_v, &z, &post.r.mean);
        let h = shared.latent_hessian(&cand.derivs.hess_v);
        let step = h
            .cholesky()
            .ok_or(Error::SingularSystem("latent Gauss-Newton system"))?
            .solve(&(-g));
        let (ls, next) = backtrack(current, opts.max_backtracks, |s| {
            eval_latent(data, shared, &(&z + &step * s), &post.r, &lr)
        })?;
        match next {
            Some(c) => {
                current = ls.value;
                z = c.z.mean.clone();
                cand = c;
            }
            None => break,
        }
    }
    Ok(cand.z)
}

/// Gauss-Newton update of `r`: `(H + cL) δ = −g` by conjugate gradients
/// preconditioned with `K / c`, followed by backtracking on the subject bound.
pub fn update_residual(
    data: &dyn DataTerm,
    shared: &SharedState,
    post: &SubjectPosterior,
    opts: &GnOptions,
) -> Result<ResidualPosterior> {
    let lat = shared.lattice().clone();
    let d = lat.ndim();
    let c = shared.residual_weight();
    let mut r = post.r.mean.clone();
    let (mut current, mut cand) = eval_residual(data, shared, &post.z, &r)?
        .ok_or(Error::NonFinite("residual objective at the current mode"))?;
    for _ in 0..opts.iterations {
        let g = residual_gradient(shared, &cand.derivs.grad_v, &post.z.mean, &r)?;
        let hess = &cand.derivs.hess_v;
        let apply = |x: &[f64]| -> Result<Vec<f64>> {
            let xf = Field::from_vec(&lat, d, x.to_vec())?;
            let mut out = shared.kernel.apply_l(&xf)?;
            out.scale(c);
            let hx = apply_blocks(hess, x);
            Ok(out.data().iter().zip(&hx).map(|(a, b)| a + b).collect())
        };
        let precond = |x: &[f64]| -> Result<Vec<f64>> {
            let xf = Field::from_vec(&lat, d, x.to_vec())?;
            Ok(shared.kernel.apply_k(&xf)?.into_data().into_iter().map(|v| v / c).collect())
        };
        let rhs: Vec<f64> = g.data().iter().map(|x| -x).collect();
        let (step, report) = pcg(apply, precond, &rhs, opts.cg_tolerance, opts.cg_max_iterations)?;
        if !report.converged {
            if opts.strict_solver {
                return Err(Error::SolverNotConverged {
                    iterations: report.iterations,
                    residual: report.relative_residual,
                });
            }
            log::debug!(
                "residual solve stopped at {} iterations (relative residual {:.2e})",
                report.iterations,
                report.relative_residual
            );
        }
        let step = Field::from_vec(&lat, d, step)?;
        let (ls, next) = backtrack(current, opts.max_backtracks, |s| {
            let mut trial = r.clone();
            trial.axpy(s, &step);
            eval_residual(data, shared, &post.z, &trial)
        })?;
        match next {
            Some(cn) => {
                current = ls.value;
                r = cn.r.mean.clone();
                cand = cn;
            }
            None => break,
        }
    }
    Ok(cand.r)
}

/// Alternating `z` and `r` updates for one subject.
pub fn update_subject(
    data: &dyn DataTerm,
    shared: &SharedState,
    post: &SubjectPosterior,
    opts: &GnOptions,
    rounds: usize,
) -> Result<SubjectPosterior> {
    let mut post = post.clone();
    for _ in 0..rounds {
        post.z = update_latent(data, shared, &post, opts)?;
        post.r = update_residual(data, shared, &post, opts)?;
    }
    Ok(post)
}

/// Recomputes both Laplace covariances at the stored modes.
pub fn refresh_covariances(
    data: &dyn DataTerm,
    shared: &SharedState,
    post: &SubjectPosterior,
) -> Result<SubjectPosterior> {
    let derivs = data.derivs(&post.velocity(shared.subspace))?;
    let lr = shared.kernel.apply_l(&post.r.mean)?;
    Ok(SubjectPosterior {
        z: LatentPosterior {
            mean: post.z.mean.clone(),
            cov: latent_cov(shared, &derivs.hess_v)?,
        },
        r: finish_residual(shared, &derivs, post.r.mean.clone(), &lr)?,
    })
}

/// Global terms of the bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    /// `Σₙ` subject contributions.
    pub subjects: f64,
    pub noise_kl: f64,
    pub latent_kl: f64,
    pub subspace_prior: f64,
    pub template_prior: f64,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.subjects - self.noise_kl - self.latent_kl + self.subspace_prior + self.template_prior
    }
}

/// `γ₁ Σₘ ln N(w_m | 0, L⁻¹)`.
pub fn subspace_prior(shared: &SharedState) -> f64 {
    let di = (shared.lattice().ndim() * shared.lattice().len()) as f64;
    let m = shared.modes() as f64;
    shared.weights.gamma1
        * (m * (0.5 * shared.log_det_l - di / 2.0 * (2.0 * PI).ln()) - 0.5 * shared.gram.trace())
}

/// Assembles the variational lower bound.
///
/// `template_log_prior` is the log-Dirichlet term of the template (the
/// negated penalty).
pub fn lower_bound(
    data: &[&dyn DataTerm],
    shared: &SharedState,
    posteriors: &[SubjectPosterior],
    noise: &NoisePrecisionPosterior,
    latent: &LatentPrecisionPosterior,
    template_log_prior: f64,
) -> Result<BoundTerms> {
    if data.len() != posteriors.len() {
        return Err(Error::Data(format!(
            "{} data terms for {} posteriors",
            data.len(),
            posteriors.len()
        )));
    }
    use rayon::prelude::*;
    let per: Vec<f64> = data
        .par_iter()
        .zip(posteriors.par_iter())
        .map(|(d, p)| subject_bound(*d, shared, p).map(|t| t.bound()))
        .collect::<Result<_>>()?;
    Ok(BoundTerms {
        subjects: per.iter().sum(),
        noise_kl: noise.kl_divergence(),
        latent_kl: latent.kl_divergence(),
        subspace_prior: subspace_prior(shared),
        template_prior: template_log_prior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{build_kernel, MetricParams};
    use crate::template::{FlatDataTerm, QuadraticDataTerm};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(m: usize) -> (Lattice, SpectralKernel, Subspace) {
        let lat = Lattice::new(&[8, 8]).unwrap();
        let kern = build_kernel(&lat, &MetricParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Subspace::random_smooth(&lat, m, &kern, 1.0, &mut rng).unwrap();
        (lat, kern, w)
    }

    #[test]
    fn gamma_prior_and_ml_limit() {
        let lat = Lattice::new(&[8, 8]).unwrap();
        let p = NoisePrecisionPosterior::prior(17.0, 10.0, &lat).unwrap();
        assert_eq!(p.mean(), 17.0);
        assert_eq!(update_noise_precision(&p, &[], &MixtureWeights::default()).mean(), 17.0);
        assert!(p.kl_divergence().abs() < 1e-9);

        let lambda_true = 40.0;
        let r = ResidualPosterior {
            mean: Field::zeros(&lat, 2),
            uncertainty: None,
            expected_prior_energy: p.dof / lambda_true,
        };
        let tiny = NoisePrecisionPosterior::prior(17.0, 1e-9, &lat).unwrap();
        let q = update_noise_precision(&tiny, &[&r], &MixtureWeights::default());
        assert!((q.mean() - lambda_true).abs() < 1e-6);
        let q = update_noise_precision(&p, &[&r], &MixtureWeights::default());
        assert!(q.mean() > 17.0 && q.mean() < lambda_true);
    }

    #[test]
    fn wishart_prior_mean_is_identity() {
        let p = LatentPrecisionPosterior::prior(4);
        assert_eq!(p.mean(), DMatrix::identity(4, 4));
        let q = update_latent_precision(&p, &[], &MixtureWeights::default()).unwrap();
        assert_eq!(q.mean(), DMatrix::identity(4, 4));
        assert!(p.kl_divergence().abs() < 1e-9);
    }

    #[test]
    fn flat_data_gives_prior_posteriors() {
        let (lat, kern, w) = setup(2);
        let noise = NoisePrecisionPosterior::prior(17.0, 10.0, &lat).unwrap();
        let latent = LatentPrecisionPosterior::prior(2);
        let weights = MixtureWeights::default();
        let shared =
            SharedState::new(&w, &kern, &noise, &latent, weights, ResidualUncertainty::Diagonal)
                .unwrap();
        let flat = FlatDataTerm::new(&lat);
        let post = SubjectPosterior::zeros(&lat, 2);
        let out = update_subject(&flat, &shared, &post, &GnOptions::default(), 2).unwrap();
        assert!(out.z.mean.iter().all(|x| x.abs() < 1e-12));
        assert!(out.r.mean.data().iter().all(|x| x.abs() < 1e-12));
        let expect = (DMatrix::identity(2, 2) + w.l_gram(&kern).unwrap())
            .try_inverse()
            .unwrap();
        assert!((&out.z.cov - expect).amax() < 1e-10);
    }

    #[test]
    fn flat_data_residual_stationarity() {
        let (lat, kern, w) = setup(1);
        let noise = NoisePrecisionPosterior::prior(17.0, 10.0, &lat).unwrap();
        let latent = LatentPrecisionPosterior::prior(1);
        let weights = MixtureWeights {
            gamma1: 1.0,
            gamma2: 0.5,
        };
        let shared =
            SharedState::new(&w, &kern, &noise, &latent, weights, ResidualUncertainty::None)
                .unwrap();
        let mut post = SubjectPosterior::zeros(&lat, 1);
        post.z.mean[0] = 0.8;
        post.z.cov[(0, 0)] = 0.1;
        let opts = GnOptions {
            cg_tolerance: 1e-12,
            cg_max_iterations: 200,
            ..GnOptions::default()
        };
        let r = update_residual(&FlatDataTerm::new(&lat), &shared, &post, &opts).unwrap();
        let mut expect = w.mode(0).scaled(-0.5 * 0.8 / (17.0 + 0.5));
        expect.axpy(-1.0, &r.mean);
        assert!(expect.norm() < 1e-8 * w.mode(0).norm());
    }

    #[test]
    fn quadratic_surrogate_matches_ridge_solution() {
        let (lat, kern, w) = setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let centre = crate::subspace::smooth_noise(&lat, &kern, 3.0, &mut rng).unwrap();
        let prec = Field::from_fn(&lat, 4, |c, o| {
            let s = 0.5 + 0.1 * ((c[0] + c[1]) % 3) as f64;
            o.copy_from_slice(&[s, 0.1, 0.1, s]);
        });
        let q = QuadraticDataTerm::new(centre.clone(), prec.clone()).unwrap();
        let noise = NoisePrecisionPosterior::prior(17.0, 10.0, &lat).unwrap();
        let latent = LatentPrecisionPosterior::prior(1);
        let shared = SharedState::new(
            &w,
            &kern,
            &noise,
            &latent,
            MixtureWeights::default(),
            ResidualUncertainty::Diagonal,
        )
        .unwrap();
        let mut post = SubjectPosterior::zeros(&lat, 1);
        post.r.mean = crate::subspace::smooth_noise(&lat, &kern, 0.5, &mut rng).unwrap();
        let z = update_latent(&q, &shared, &post, &GnOptions::default()).unwrap();
        // Closed form: (wᵀDw + A + wᵀLw) z = wᵀD(c − r) − wᵀL r.
        let w0 = w.mode(0);
        let dw = apply_blocks(&prec, w0.data());
        let mut cr = centre.clone();
        cr.axpy(-1.0, &post.r.mean);
        let lw = kern.apply_l(w0).unwrap();
        let lhs = dot(w0.data(), &dw) + 1.0 + lw.dot(w0);
        let rhs = dot(cr.data(), &dw) - lw.dot(&post.r.mean);
        assert!((z.mean[0] - rhs / lhs).abs() < 1e-8 * (rhs / lhs).abs().max(1.0));
        assert!((z.cov[(0, 0)] - 1.0 / lhs).abs() < 1e-12);
    }

    #[test]
    fn subject_updates_never_decrease_the_bound() {
        let (lat, kern, w) = setup(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let centre = crate::subspace::smooth_noise(&lat, &kern, 4.0, &mut rng).unwrap();
        let prec = Field::from_fn(&lat, 4, |_, o| o.copy_from_slice(&[2.0, 0.0, 0.0, 1.0]));
        let q = QuadraticDataTerm::new(centre, prec).unwrap();
        let noise = NoisePrecisionPosterior::prior(17.0, 10.0, &lat).unwrap();
        let latent = LatentPrecisionPosterior::prior(2);
        let shared = SharedState::new(
            &w,
            &kern,
            &noise,
            &latent,
            MixtureWeights::default(),
            ResidualUncertainty::Diagonal,
        )
        .unwrap();
        let mut post =
            refresh_covariances(&q, &shared, &SubjectPosterior::zeros(&lat, 2)).unwrap();
        let mut last = subject_bound(&q, &shared, &post).unwrap().bound();
        for _ in 0..4 {
            post = update_subject(&q, &shared, &post, &GnOptions::default(), 1).unwrap();
            let b = subject_bound(&q, &shared, &post).unwrap().bound();
            assert!(b >= last - 1e-9 * last.abs(), "{b} < {last}");
            last = b;
        }
        let expected = post.r.mean.dot(&kern.apply_l(&post.r.mean).unwrap());
        assert!(post.r.expected_prior_energy >= expected);
    }
}
