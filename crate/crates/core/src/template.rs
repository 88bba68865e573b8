//! Softmax template warping and the categorical data term.
//!
//! The log-template `a` is pulled through the subject's inverse transform and
//! normalised voxelwise, `μ = softmax(Φ a)`. The data term is the negative
//! categorical log-likelihood `E = −Σᵢ Σₖ fₖ ln μₖ`. Its voxelwise gradient and
//! Hessian with respect to the warped log-template are
//!
//! ```text
//! gₖ = μₖ Σₗ fₗ − fₖ        Hₖₘ = μₖ (δₖₘ − μₘ) Σₗ fₗ
//! ```
//!
//! Derivatives with respect to the velocity are taken by displacing the
//! template in template space, `a ↦ a − ∇a · δv`, so that
//! `∂E/∂v = −Σₖ ∇aₖ (Φᵀg)ₖ` and the Gauss-Newton Hessian is the voxelwise
//! `d×d` block `Σₖₘ ∇aₖ (ΦᵀH)ₖₘ ∇aₘᵀ`. [`LinearisedDataTerm`] is the energy
//! whose exact gradient this is.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{CategoricalImage, Field, Lattice, TensorField, VectorField};
use crate::interp::{pull, pull_map, push_map, spatial_gradient};
use crate::operator::SpectralKernel;
use crate::shooting::{shoot, Deformation, ShootingResult};
use crate::solver::{backtrack, solve_spd_block};

/// Bound applied to log-template values before the softmax.
pub const LOG_CLAMP: f64 = 30.0;

/// Log-probability template `a` (`K` channels).
#[derive(Clone, Debug, PartialEq)]
pub struct LogTemplate {
    field: Field,
}

impl LogTemplate {
    pub fn new(mut field: Field) -> Result<Self> {
        if field.channels() < 2 {
            return Err(Error::Data("templates need K >= 2 classes".into()));
        }
        if !field.is_finite() {
            return Err(Error::NonFinite("log-template"));
        }
        field
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = x.clamp(-LOG_CLAMP, LOG_CLAMP));
        Ok(Self { field })
    }

    /// Softmax-inverse of voxelwise class counts plus `eps` pseudo-counts,
    /// the MAP template under identity warps. The pseudo-count is floored
    /// at 1e-6 so that unseen classes stay finite.
    pub fn from_mean(images: &[&CategoricalImage], eps: f64) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Data("no images to average".into()))?;
        let lat = first.lattice();
        let k = first.classes();
        let mut acc = Field::zeros(lat, k);
        for img in images {
            img.field().ensure_like(&acc, "template initialisation")?;
            acc.axpy(1.0, img.field());
        }
        let eps = eps.max(1e-6);
        for i in 0..lat.len() {
            let v = acc.voxel_mut(i);
            v.iter_mut().for_each(|x| *x = (*x + eps).ln());
            centre(v);
        }
        Self::new(acc)
    }

    pub fn uniform(lattice: &Lattice, k: usize) -> Result<Self> {
        Self::new(Field::zeros(lattice, k))
    }

    pub fn classes(&self) -> usize {
        self.field.channels()
    }

    pub fn lattice(&self) -> &Lattice {
        self.field.lattice()
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    /// Spatial gradient of every class, `K·d` channels.
    pub fn gradient(&self) -> Field {
        spatial_gradient(&self.field)
    }

    /// Unwarped class probabilities.
    pub fn probabilities(&self) -> WarpedTemplate {
        softmax_field(self.field.clone())
    }
}

fn centre(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Deformed template `μ` with its log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedTemplate {
    probs: Field,
    log_probs: Field,
}

impl WarpedTemplate {
    pub fn probs(&self) -> &Field {
        &self.probs
    }

    pub fn log_probs(&self) -> &Field {
        &self.log_probs
    }

    pub fn classes(&self) -> usize {
        self.probs.channels()
    }

    /// The template's probabilities as (soft) categorical observations.
    pub fn to_categorical(&self) -> CategoricalImage {
        CategoricalImage::new(self.probs.clone()).expect("softmax output is a valid categorical image")
    }
}

fn softmax_field(mut logits: Field) -> WarpedTemplate {
    let k = logits.channels();
    let mut probs = logits.clone();
    for i in 0..logits.lattice().len() {
        let l = logits.voxel_mut(i);
        l.iter_mut()
            .for_each(|x| *x = x.clamp(-LOG_CLAMP, LOG_CLAMP));
        let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + l.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        let p = probs.voxel_mut(i);
        for c in 0..k {
            l[c] -= lse;
            p[c] = l[c].exp();
        }
    }
    WarpedTemplate {
        probs,
        log_probs: logits,
    }
}

/// `μ = softmax(a ∘ φ⁻¹)`: interpolate in log space, then normalise.
pub fn warp_template(a: &LogTemplate, phi_inv: &Deformation) -> Result<WarpedTemplate> {
    Ok(softmax_field(pull(a.field(), phi_inv)?))
}

/// Negative categorical log-likelihood `−Σᵢ Σₖ fₖ ln μₖ`.
pub fn data_energy(f: &CategoricalImage, mu: &WarpedTemplate) -> Result<f64> {
    f.field().ensure_like(mu.log_probs(), "data energy")?;
    Ok(-f
        .field()
        .data()
        .iter()
        .zip(mu.log_probs().data())
        .filter(|(fk, _)| **fk != 0.0)
        .map(|(fk, lk)| fk * lk)
        .sum::<f64>())
}

/// Voxelwise gradient and Hessian of the categorical term w.r.t. the warped
/// log-template: `K` and `K×K` channel fields.
pub fn categorical_derivatives(f: &CategoricalImage, mu: &WarpedTemplate) -> (Field, TensorField) {
    let lat = f.lattice();
    let k = f.classes();
    let mut g = Field::zeros(lat, k);
    let mut h = Field::zeros(lat, k * k);
    for i in 0..lat.len() {
        let fv = f.field().voxel(i);
        let s: f64 = fv.iter().sum();
        if s == 0.0 {
            continue;
        }
        let m = mu.probs().voxel(i);
        let gv = g.voxel_mut(i);
        for c in 0..k {
            gv[c] = m[c] * s - fv[c];
        }
        let hv = h.voxel_mut(i);
        for c in 0..k {
            for e in 0..k {
                let delta = if c == e { 1.0 } else { 0.0 };
                hv[c * k + e] = s * m[c] * (delta - m[e]);
            }
        }
    }
    (g, h)
}

/// Data-term energy with its velocity gradient and voxelwise GN Hessian.
#[derive(Clone, Debug)]
pub struct DataTermDerivs {
    pub energy: f64,
    /// `I × d`.
    pub grad_v: VectorField,
    /// `I × d×d`, symmetric positive semidefinite blocks.
    pub hess_v: TensorField,
}

impl DataTermDerivs {
    pub fn zero(lattice: &Lattice) -> Self {
        let d = lattice.ndim();
        Self {
            energy: 0.0,
            grad_v: Field::zeros(lattice, d),
            hess_v: Field::zeros(lattice, d * d),
        }
    }

    /// `H_v x` for a velocity-shaped `x`.
    pub fn apply_hessian(&self, x: &[f64]) -> Vec<f64> {
        apply_blocks(&self.hess_v, x)
    }
}

/// Applies a field of `d×d` blocks to a `d`-channel vector.
pub(crate) fn apply_blocks(blocks: &TensorField, x: &[f64]) -> Vec<f64> {
    let d = blocks.lattice().ndim();
    let mut out = vec![0.0; x.len()];
    for (i, (o, xv)) in out.chunks_mut(d).zip(x.chunks(d)).enumerate() {
        let h = blocks.voxel(i);
        for a in 0..d {
            o[a] = (0..d).map(|b| h[a * d + b] * xv[b]).sum();
        }
    }
    out
}

/// Contracts pushed class derivatives with the template gradient.
fn contract(
    lattice: &Lattice,
    grad_a: &Field,
    pushed_g: &Field,
    pushed_h: Option<&TensorField>,
) -> (VectorField, TensorField) {
    let d = lattice.ndim();
    let k = pushed_g.channels();
    let mut grad = Field::zeros(lattice, d);
    let mut hess = Field::zeros(lattice, d * d);
    for i in 0..lattice.len() {
        let ga = grad_a.voxel(i);
        let pg = pushed_g.voxel(i);
        let gv = grad.voxel_mut(i);
        for b in 0..d {
            gv[b] = -(0..k).map(|c| pg[c] * ga[c * d + b]).sum::<f64>();
        }
        if let Some(ph) = pushed_h {
            let ph = ph.voxel(i);
            let hv = hess.voxel_mut(i);
            for b in 0..d {
                for e in b..d {
                    let mut acc = 0.0;
                    for c in 0..k {
                        for m in 0..k {
                            acc += ga[c * d + b] * ph[c * k + m] * ga[m * d + e];
                        }
                    }
                    hv[b * d + e] = acc;
                    hv[e * d + b] = acc;
                }
            }
        }
    }
    (grad, hess)
}

/// Energy and derivatives for a subject whose velocity was shot into `result`.
pub fn data_derivs(
    f: &CategoricalImage,
    a: &LogTemplate,
    result: &ShootingResult,
) -> Result<DataTermDerivs> {
    derivs_with_gradient(f, a, &a.gradient(), &result.inverse)
}

fn derivs_with_gradient(
    f: &CategoricalImage,
    a: &LogTemplate,
    grad_a: &Field,
    inverse: &Deformation,
) -> Result<DataTermDerivs> {
    if f.classes() != a.classes() {
        return Err(Error::ChannelMismatch {
            expected: a.classes(),
            found: f.classes(),
        });
    }
    let mu = warp_template(a, inverse)?;
    let energy = data_energy(f, &mu)?;
    let (g, h) = categorical_derivatives(f, &mu);
    let pg = push_map(&g, inverse.map());
    let ph = push_map(&h, inverse.map());
    let (grad_v, hess_v) = contract(a.lattice(), grad_a, &pg, Some(&ph));
    if !(energy.is_finite() && grad_v.is_finite() && hess_v.is_finite()) {
        return Err(Error::NonFinite("data term derivatives"));
    }
    Ok(DataTermDerivs {
        energy,
        grad_v,
        hess_v,
    })
}

/// A subject-level data term as a function of the initial velocity.
pub trait DataTerm: Sync {
    fn lattice(&self) -> &Lattice;

    /// `E(v)`.
    fn energy(&self, v: &VectorField) -> Result<f64>;

    /// `E(v)` with its gradient and Gauss-Newton Hessian.
    fn derivs(&self, v: &VectorField) -> Result<DataTermDerivs>;
}

/// The categorical likelihood of one image under the shot template.
pub struct CategoricalDataTerm<'a> {
    image: &'a CategoricalImage,
    template: &'a LogTemplate,
    template_grad: Field,
    kernel: &'a SpectralKernel,
    steps: usize,
}

impl<'a> CategoricalDataTerm<'a> {
    pub fn new(
        image: &'a CategoricalImage,
        template: &'a LogTemplate,
        kernel: &'a SpectralKernel,
        steps: usize,
    ) -> Result<Self> {
        image.lattice().ensure_same(template.lattice(), "data term")?;
        if image.classes() != template.classes() {
            return Err(Error::ChannelMismatch {
                expected: template.classes(),
                found: image.classes(),
            });
        }
        Ok(Self {
            image,
            template,
            template_grad: template.gradient(),
            kernel,
            steps,
        })
    }

    pub fn image(&self) -> &CategoricalImage {
        self.image
    }

    pub fn shoot(&self, v: &VectorField) -> Result<ShootingResult> {
        shoot(v, self.kernel, self.steps)
    }

    /// Warped template for velocity `v`.
    pub fn warped(&self, v: &VectorField) -> Result<WarpedTemplate> {
        warp_template(self.template, &self.shoot(v)?.inverse)
    }

    /// Linearisation about the velocity `v_ref`.
    pub fn linearise(&self, v_ref: &VectorField) -> Result<LinearisedDataTerm<'a>> {
        Ok(LinearisedDataTerm {
            image: self.image,
            template: self.template,
            template_grad: self.template_grad.clone(),
            inverse: self.shoot(v_ref)?.inverse,
            v_ref: v_ref.clone(),
        })
    }
}

impl DataTerm for CategoricalDataTerm<'_> {
    fn lattice(&self) -> &Lattice {
        self.image.lattice()
    }

    fn energy(&self, v: &VectorField) -> Result<f64> {
        data_energy(self.image, &self.warped(v)?)
    }

    fn derivs(&self, v: &VectorField) -> Result<DataTermDerivs> {
        let res = self.shoot(v)?;
        derivs_with_gradient(self.image, self.template, &self.template_grad, &res.inverse)
    }
}

/// A data term that observes nothing.
pub struct FlatDataTerm {
    lattice: Lattice,
}

impl FlatDataTerm {
    pub fn new(lattice: &Lattice) -> Self {
        Self {
            lattice: lattice.clone(),
        }
    }
}

impl DataTerm for FlatDataTerm {
    fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    fn energy(&self, _v: &VectorField) -> Result<f64> {
        Ok(0.0)
    }

    fn derivs(&self, _v: &VectorField) -> Result<DataTermDerivs> {
        Ok(DataTermDerivs::zero(&self.lattice))
    }
}

/// Quadratic surrogate `½ Σᵢ (vᵢ − cᵢ)ᵀ Dᵢ (vᵢ − cᵢ)` with voxelwise PSD blocks.
///
/// Gauss-Newton is exact on it, which makes closed-form checks of the
/// latent and subspace updates possible.
pub struct QuadraticDataTerm {
    centre: VectorField,
    precision: TensorField,
}

impl QuadraticDataTerm {
    pub fn new(centre: VectorField, precision: TensorField) -> Result<Self> {
        let d = centre.lattice().ndim();
        centre.lattice().ensure_same(precision.lattice(), "quadratic data term")?;
        if centre.channels() != d || precision.channels() != d * d {
            return Err(Error::ChannelMismatch {
                expected: d * d,
                found: precision.channels(),
            });
        }
        Ok(Self { centre, precision })
    }

    pub fn centre(&self) -> &VectorField {
        &self.centre
    }

    pub fn precision(&self) -> &TensorField {
        &self.precision
    }

    fn residual(&self, v: &VectorField) -> Vec<f64> {
        v.data()
            .iter()
            .zip(self.centre.data())
            .map(|(a, b)| a - b)
            .collect()
    }
}

impl DataTerm for QuadraticDataTerm {
    fn lattice(&self) -> &Lattice {
        self.centre.lattice()
    }

    fn energy(&self, v: &VectorField) -> Result<f64> {
        let e = self.residual(v);
        Ok(0.5 * crate::field::dot(&e, &apply_blocks(&self.precision, &e)))
    }

    fn derivs(&self, v: &VectorField) -> Result<DataTermDerivs> {
        let e = self.residual(v);
        let g = apply_blocks(&self.precision, &e);
        Ok(DataTermDerivs {
            energy: 0.5 * crate::field::dot(&e, &g),
            grad_v: Field::from_vec(self.lattice(), self.lattice().ndim(), g)?,
            hess_v: self.precision.clone(),
        })
    }
}

/// The categorical energy with the deformation frozen at `v_ref` and the
/// template displaced linearly in template space:
/// `E(v) = C_f(Φ (a − ∇a · (v − v_ref)))`.
///
/// At `v = v_ref` its gradient equals [`DataTermDerivs::grad_v`].
pub struct LinearisedDataTerm<'a> {
    image: &'a CategoricalImage,
    template: &'a LogTemplate,
    template_grad: Field,
    inverse: Deformation,
    v_ref: VectorField,
}

impl LinearisedDataTerm<'_> {
    fn displaced(&self, v: &VectorField) -> Field {
        let lat = self.template.lattice();
        let d = lat.ndim();
        let k = self.template.classes();
        let mut a = self.template.field().clone();
        for i in 0..lat.len() {
            let dv: Vec<f64> = (0..d)
                .map(|b| v.voxel(i)[b] - self.v_ref.voxel(i)[b])
                .collect();
            let ga = self.template_grad.voxel(i);
            let av = a.voxel_mut(i);
            for c in 0..k {
                av[c] -= (0..d).map(|b| ga[c * d + b] * dv[b]).sum::<f64>();
            }
        }
        a
    }

    fn warped(&self, v: &VectorField) -> WarpedTemplate {
        softmax_field(pull_map(&self.displaced(v), self.inverse.map()))
    }

    pub fn energy(&self, v: &VectorField) -> Result<f64> {
        data_energy(self.image, &self.warped(v))
    }

    pub fn gradient(&self, v: &VectorField) -> Result<VectorField> {
        let mu = self.warped(v);
        let (g, _) = categorical_derivatives(self.image, &mu);
        let pg = push_map(&g, self.inverse.map());
        Ok(contract(self.template.lattice(), &self.template_grad, &pg, None).0)
    }
}

/// Log-Dirichlet penalty `−ε Σᵢ Σₖ ln softmax(a)ₖ`.
pub fn dirichlet_penalty(a: &LogTemplate, eps: f64) -> f64 {
    -eps * a.probabilities().log_probs().data().iter().sum::<f64>()
}

/// MAP objective of the template: data terms of all subjects plus the
/// log-Dirichlet penalty.
pub fn template_objective(
    a: &LogTemplate,
    subjects: &[(&CategoricalImage, &Deformation)],
    dirichlet_eps: f64,
) -> Result<f64> {
    let mut total = dirichlet_penalty(a, dirichlet_eps);
    for (f, phi) in subjects {
        total += data_energy(f, &warp_template(a, phi)?)?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateUpdateReport {
    pub objective_before: f64,
    pub objective_after: f64,
    pub step: f64,
}

/// One Gauss-Newton step on the template MAP objective with backtracking.
///
/// `subjects` pairs each image with the inverse transform that warps the
/// template onto it. Gradients and Hessians are pushed to template space and
/// the system is solved voxelwise (`K×K`).
pub fn update_template(
    a: &LogTemplate,
    subjects: &[(&CategoricalImage, &Deformation)],
    dirichlet_eps: f64,
    max_backtracks: usize,
) -> Result<(LogTemplate, TemplateUpdateReport)> {
    if subjects.is_empty() {
        return Err(Error::Data("template update needs at least one subject".into()));
    }
    let lat = a.lattice();
    let k = a.classes();
    let prior = a.probabilities();
    let mut grad = Field::zeros(lat, k);
    let mut hess = Field::zeros(lat, k * k);
    if !(dirichlet_eps >= 0.0 && dirichlet_eps.is_finite()) {
        return Err(Error::Config(format!("dirichlet_eps must be non-negative, got {dirichlet_eps}")));
    }
    // Pseudo-observation of ε per class at every voxel; the derivatives are
    // linear in the observation, so a uniform image is scaled by Kε.
    let uniform = CategoricalImage::new(Field::constant(lat, k, 1.0 / k as f64))?;
    let (g0, h0) = categorical_derivatives(&uniform, &prior);
    grad.axpy(k as f64 * dirichlet_eps, &g0);
    hess.axpy(k as f64 * dirichlet_eps, &h0);
    let pushed: Vec<(Field, Field)> = subjects
        .iter()
        .map(|(f, phi)| -> Result<(Field, Field)> {
            let mu = warp_template(a, phi)?;
            let (g, h) = categorical_derivatives(f, &mu);
            Ok((push_map(&g, phi.map()), push_map(&h, phi.map())))
        })
        .collect::<Result<_>>()?;
    for (g, h) in &pushed {
        grad.axpy(1.0, g);
        hess.axpy(1.0, h);
    }
    let mut dir = Field::zeros(lat, k);
    for i in 0..lat.len() {
        let mut h = hess.voxel(i).to_vec();
        // The objective is invariant to adding a constant to every class;
        // the rank-one term removes that null space without moving the step.
        let tr: f64 = (0..k).map(|c| h[c * k + c]).sum::<f64>().max(1e-12);
        h.iter_mut().for_each(|x| *x += tr / k as f64);
        let rhs: Vec<f64> = grad.voxel(i).iter().map(|x| -x).collect();
        let step = solve_spd_block(&h, &rhs, k);
        dir.voxel_mut(i).copy_from_slice(&step);
    }
    let before = template_objective(a, subjects, dirichlet_eps)?;
    let (ls, cand) = backtrack(before, max_backtracks, |s| {
        let mut f = a.field().clone();
        f.axpy(s, &dir);
        for i in 0..lat.len() {
            centre(f.voxel_mut(i));
        }
        let cand = LogTemplate::new(f)?;
        let val = template_objective(&cand, subjects, dirichlet_eps)?;
        Ok(val.is_finite().then_some((val, cand)))
    })?;
    let out = cand.unwrap_or_else(|| a.clone());
    Ok((
        out,
        TemplateUpdateReport {
            objective_before: before,
            objective_after: ls.value,
            step: ls.step,
        },
    ))
}
