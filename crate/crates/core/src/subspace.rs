//! The principal subspace `W`, its Gauss-Newton update and the
//! orthogonalisation `(T, Q)` that diagonalises both Gram matrices without
//! changing any reconstructed velocity `W z`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{Field, Lattice, VectorField};
use crate::latent::{
    subject_terms_at, subspace_prior, LatentPosterior, LatentPrecisionPosterior, MixtureWeights,
    SharedState, SubjectPosterior,
};
use crate::operator::SpectralKernel;
use crate::solver::{backtrack, pcg, CgReport, GnOptions};
use crate::template::{apply_blocks, DataTerm, DataTermDerivs};

/// `M` velocity fields spanning the principal subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct Subspace {
    lattice: Lattice,
    modes: Vec<VectorField>,
}

impl Subspace {
    pub fn new(lattice: &Lattice, modes: Vec<VectorField>) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::Config("the subspace needs at least one mode".into()));
        }
        for w in &modes {
            w.lattice().ensure_same(lattice, "subspace mode")?;
            if w.channels() != lattice.ndim() {
                return Err(Error::ChannelMismatch {
                    expected: lattice.ndim(),
                    found: w.channels(),
                });
            }
            if !w.is_finite() {
                return Err(Error::NonFinite("subspace mode"));
            }
        }
        Ok(Self {
            lattice: lattice.clone(),
            modes,
        })
    }

    /// `K`-smoothed white noise, each mode scaled to L-norm `scale`.
    pub fn random_smooth(
        lattice: &Lattice,
        m: usize,
        kernel: &SpectralKernel,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let modes = (0..m)
            .map(|_| smooth_noise(lattice, kernel, scale, rng))
            .collect::<Result<_>>()?;
        Self::new(lattice, modes)
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[VectorField] {
        &self.modes
    }

    pub fn mode(&self, m: usize) -> &VectorField {
        &self.modes[m]
    }

    /// `W z`.
    pub fn reconstruct(&self, z: &DVector<f64>) -> VectorField {
        let mut v = Field::zeros(&self.lattice, self.lattice.ndim());
        for (w, &zm) in self.modes.iter().zip(z.iter()) {
            if zm != 0.0 {
                v.axpy(zm, w);
            }
        }
        v
    }

    /// `W X` for an `M×P` matrix, returned as `P` fields.
    pub fn combine(&self, x: &DMatrix<f64>) -> Vec<VectorField> {
        (0..x.ncols())
            .map(|p| self.reconstruct(&x.column(p).into_owned()))
            .collect()
    }

    /// `L w_m` for every mode.
    pub fn apply_l(&self, kernel: &SpectralKernel) -> Result<Vec<VectorField>> {
        self.modes.iter().map(|w| kernel.apply_l(w)).collect()
    }

    /// `Wᵀ L W`.
    pub fn l_gram(&self, kernel: &SpectralKernel) -> Result<DMatrix<f64>> {
        Ok(gram(&self.modes, &self.apply_l(kernel)?))
    }
}

/// `K`-coloured white noise with L-norm `scale`.
pub(crate) fn smooth_noise(
    lattice: &Lattice,
    kernel: &SpectralKernel,
    scale: f64,
    rng: &mut impl Rng,
) -> Result<VectorField> {
    let d = lattice.ndim();
    let white = Field::from_vec(
        lattice,
        d,
        (0..lattice.len() * d).map(|_| rng.sample(StandardNormal)).collect(),
    )?;
    let mut w = kernel.apply_k(&white)?;
    let norm = kernel.energy(&w)?.sqrt();
    if norm > 0.0 {
        w.scale(scale / norm);
    }
    Ok(w)
}

/// `Aᵀ B` for two lists of fields.
pub(crate) fn gram(a: &[VectorField], b: &[VectorField]) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(a.len(), b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            g[(i, j)] = x.dot(y);
        }
    }
    g
}

/// Outcome of [`update_subspace`].
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceUpdateReport {
    pub objective_before: f64,
    pub objective_after: f64,
    pub step: f64,
    /// Conjugate-gradient reports, one per mode.
    pub solves: Vec<CgReport>,
}

/// Negative `W`-dependent part of the bound (plus constants): subject terms
/// evaluated with `derivs` at each reconstructed velocity, and the subspace
/// prior.
pub fn subspace_objective(
    shared: &SharedState,
    derivs: &[DataTermDerivs],
    posteriors: &[SubjectPosterior],
) -> Result<f64> {
    let mut total = -subspace_prior(shared);
    for (d, p) in derivs.iter().zip(posteriors) {
        total -= subject_terms_at(shared, d, p)?.bound();
    }
    Ok(total)
}

/// Gradient of [`subspace_objective`] with the data Hessians held fixed:
///
/// ```text
/// g_m = Σₙ [zₙₘ ∇Eₙ + Hₙ (W Sₙ)_m + γ₂ L (W E[zₙzₙᵀ] + rₙ zₙᵀ)_m] + γ₁ L w_m
/// ```
pub fn subspace_gradient(
    shared: &SharedState,
    derivs: &[DataTermDerivs],
    posteriors: &[SubjectPosterior],
) -> Result<Vec<VectorField>> {
    let w = shared.subspace;
    let m = w.len();
    let (g1, g2) = (shared.weights.gamma1, shared.weights.gamma2);
    let mut data_part: Vec<VectorField> = (0..m)
        .map(|_| Field::zeros(w.lattice(), w.lattice().ndim()))
        .collect();
    let mut prior_target: Vec<VectorField> = w.modes().iter().map(|x| x.scaled(g1)).collect();
    for (d, p) in derivs.iter().zip(posteriors) {
        let ws = w.combine(&p.z.cov);
        let wm = w.combine(&p.z.second_moment());
        for k in 0..m {
            let zk = p.z.mean[k];
            data_part[k].axpy(zk, &d.grad_v);
            let hws = apply_blocks(&d.hess_v, ws[k].data());
            data_part[k]
                .data_mut()
                .iter_mut()
                .zip(&hws)
                .for_each(|(a, b)| *a += b);
            prior_target[k].axpy(g2, &wm[k]);
            prior_target[k].axpy(g2 * zk, &p.r.mean);
        }
    }
    data_part
        .into_iter()
        .zip(&prior_target)
        .map(|(mut g, t)| {
            g.axpy(1.0, &shared.kernel.apply_l(t)?);
            Ok(g)
        })
        .collect()
}

/// One Gauss-Newton step on every mode of `W`, with a joint backtracking line
/// search on the bound.
///
/// Each mode solves
/// `(Σₙ E[zₙₘ²] Hₙ + (γ₁ + γ₂ Σₙ E[zₙₘ²]) L) δw_m = −g_m`
/// by conjugate gradients preconditioned with the scaled Green's function.
pub fn update_subspace(
    data: &[&dyn DataTerm],
    shared: &SharedState,
    posteriors: &[SubjectPosterior],
    opts: &GnOptions,
) -> Result<(Subspace, SubspaceUpdateReport)> {
    if data.len() != posteriors.len() {
        return Err(Error::Data(format!(
            "{} data terms for {} posteriors",
            data.len(),
            posteriors.len()
        )));
    }
    let w = shared.subspace;
    let lat = w.lattice().clone();
    let d = lat.ndim();
    let (g1, g2) = (shared.weights.gamma1, shared.weights.gamma2);
    let eval_derivs = |sub: &Subspace| -> Result<Vec<DataTermDerivs>> {
        data.par_iter()
            .zip(posteriors.par_iter())
            .map(|(dt, p)| dt.derivs(&p.velocity(sub)))
            .collect()
    };
    let derivs = eval_derivs(w)?;
    let before = subspace_objective(shared, &derivs, posteriors)?;
    let grad = subspace_gradient(shared, &derivs, posteriors)?;

    let solved: Vec<(VectorField, CgReport)> = (0..w.len())
        .into_par_iter()
        .map(|m| -> Result<(VectorField, CgReport)> {
            let ez2: Vec<f64> = posteriors
                .iter()
                .map(|p| p.z.mean[m] * p.z.mean[m] + p.z.cov[(m, m)])
                .collect();
            let c = g1 + g2 * ez2.iter().sum::<f64>();
            let apply = |x: &[f64]| -> Result<Vec<f64>> {
                let xf = Field::from_vec(&lat, d, x.to_vec())?;
                let mut out = shared.kernel.apply_l(&xf)?;
                out.scale(c);
                for (dv, &e) in derivs.iter().zip(&ez2) {
                    if e != 0.0 {
                        let hx = apply_blocks(&dv.hess_v, x);
                        out.data_mut()
                            .iter_mut()
                            .zip(&hx)
                            .for_each(|(a, b)| *a += e * b);
                    }
                }
                Ok(out.into_data())
            };
            let precond = |x: &[f64]| -> Result<Vec<f64>> {
                let xf = Field::from_vec(&lat, d, x.to_vec())?;
                Ok(shared
                    .kernel
                    .apply_k(&xf)?
                    .into_data()
                    .into_iter()
                    .map(|v| v / c)
                    .collect())
            };
            let rhs: Vec<f64> = grad[m].data().iter().map(|x| -x).collect();
            let (step, report) =
                pcg(apply, precond, &rhs, opts.cg_tolerance, opts.cg_max_iterations)?;
            if !report.converged && opts.strict_solver {
                return Err(Error::SolverNotConverged {
                    iterations: report.iterations,
                    residual: report.relative_residual,
                });
            }
            Ok((Field::from_vec(&lat, d, step)?, report))
        })
        .collect::<Result<_>>()?;

    let (ls, cand) = backtrack(before, opts.max_backtracks, |s| {
        let modes: Vec<VectorField> = w
            .modes()
            .iter()
            .zip(&solved)
            .map(|(wm, (dw, _))| {
                let mut x = wm.clone();
                x.axpy(s, dw);
                x
            })
            .collect();
        let sub = match Subspace::new(&lat, modes) {
            Ok(s) => s,
            Err(Error::NonFinite(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let derivs = match eval_derivs(&sub) {
            Ok(d) => d,
            Err(Error::NonFinite(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let st = shared.with_subspace(&sub)?;
        let val = subspace_objective(&st, &derivs, posteriors)?;
        drop(st);
        Ok(val.is_finite().then_some((val, sub)))
    })?;
    Ok((
        cand.unwrap_or_else(|| w.clone()),
        SubspaceUpdateReport {
            objective_before: before,
            objective_after: ls.value,
            step: ls.step,
            solves: solved.into_iter().map(|(_, r)| r).collect(),
        },
    ))
}

/// The linear maps of an orthogonalisation: `z ↦ T z`, `W ↦ W T⁻¹`, followed
/// by the diagonal rescaling `Q`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthoTransform {
    pub t: DMatrix<f64>,
    pub t_inv: DMatrix<f64>,
    pub q: DVector<f64>,
}

impl OrthoTransform {
    pub fn identity(m: usize) -> Self {
        Self {
            t: DMatrix::identity(m, m),
            t_inv: DMatrix::identity(m, m),
            q: DVector::from_element(m, 1.0),
        }
    }

    /// Combined latent map `Q T`.
    pub fn latent_map(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.q) * &self.t
    }

    /// Combined subspace map `T⁻¹ Q⁻¹`.
    pub fn subspace_map(&self) -> DMatrix<f64> {
        &self.t_inv * DMatrix::from_diagonal(&self.q.map(|x| 1.0 / x))
    }

    /// Applies `W ↦ W T⁻¹Q⁻¹`, `z ↦ QT z`, `S ↦ QT S (QT)ᵀ`.
    pub fn apply(
        &self,
        w: &Subspace,
        latents: &[LatentPosterior],
    ) -> Result<(Subspace, Vec<LatentPosterior>)> {
        let t = self.latent_map();
        let sub = Subspace::new(w.lattice(), w.combine(&self.subspace_map()))?;
        let z = latents
            .iter()
            .map(|p| {
                let cov = &t * &p.cov * t.transpose();
                LatentPosterior {
                    mean: &t * &p.mean,
                    cov: (&cov + cov.transpose()) * 0.5,
                }
            })
            .collect();
        Ok((sub, z))
    }

    /// Condition number of `T`.
    pub fn condition(&self) -> f64 {
        let sv = self.t.clone().singular_values();
        sv.max() / sv.min()
    }
}

/// `Σₙ (zₙzₙᵀ + Sₙ)`.
pub fn latent_moments(latents: &[LatentPosterior]) -> DMatrix<f64> {
    let m = latents.first().map_or(0, LatentPosterior::dim);
    latents
        .iter()
        .fold(DMatrix::zeros(m, m), |acc, p| acc + p.second_moment())
}

fn sorted_eigen(m: &DMatrix<f64>, descending: bool) -> (DVector<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| {
        let c = eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]);
        if descending {
            c.reverse()
        } else {
            c
        }
    });
    let vals = DVector::from_iterator(idx.len(), idx.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(m.nrows(), idx.len());
    for (j, &i) in idx.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        // Fix the sign so the largest entry is positive.
        let k = col.iamax();
        if col[k] < 0.0 {
            col.neg_mut();
        }
        vecs.set_column(j, &col);
    }
    (vals, vecs)
}

/// Finds `T` with `T E[ZZᵀ] Tᵀ` diagonal (descending) and
/// `T⁻ᵀ WᵀLW T⁻¹ = I`. `Q` is left at one.
pub fn orthogonalise(
    w: &Subspace,
    latents: &[LatentPosterior],
    kernel: &SpectralKernel,
) -> Result<OrthoTransform> {
    let g = w.l_gram(kernel)?;
    let (lam, el) = sorted_eigen(&g, false);
    let top = lam.max();
    for (k, &l) in lam.iter().enumerate() {
        if !(l > 1e-12 * top) {
            return Err(Error::RankDeficient {
                mode: el.column(k).iamax(),
                eigenvalue: l,
            });
        }
    }
    let sq = lam.map(f64::sqrt);
    let half = &el * DMatrix::from_diagonal(&sq);
    let mt = half.transpose() * latent_moments(latents) * &half;
    let (_, ez) = sorted_eigen(&mt, true);
    let t = ez.transpose() * half.transpose();
    let t_inv = &el * DMatrix::from_diagonal(&sq.map(|x| 1.0 / x)) * &ez;
    Ok(OrthoTransform {
        t,
        t_inv,
        q: DVector::from_element(w.len(), 1.0),
    })
}

/// Alternates Wishart updates of `A` with the diagonal rescaling `Q`.
///
/// Inputs are the diagonals of the latent moments `d_m` and of the L-Gram
/// matrix `g_m` after orthogonalisation. Each `q_m` minimises
///
/// ```text
/// γ₁/2 (q² d_m A_mm + g_m / q²) − n ln q
/// ```
///
/// where the last term is the change in the latent entropies of `n`
/// subjects; with `n = 0` this gives `q⁴ = g_m / (d_m A_mm)`. Stops when `Q`
/// moves by less than `1e-6` or after 32 rounds.
pub fn rescale(
    moments: &DVector<f64>,
    gram: &DVector<f64>,
    latent: &LatentPrecisionPosterior,
    weights: &MixtureWeights,
    entropy_weight: f64,
    subjects: usize,
) -> (DVector<f64>, LatentPrecisionPosterior) {
    let m = moments.len();
    let g1 = weights.gamma1;
    let mut q = DVector::from_element(m, 1.0);
    let mut a = latent.clone();
    if g1 <= 0.0 {
        return (q, a);
    }
    let wishart = |q: &DVector<f64>| {
        let dof = m as f64 + g1 * subjects as f64;
        let diag = DVector::from_iterator(
            m,
            (0..m).map(|k| 1.0 / (m as f64 + g1 * q[k] * q[k] * moments[k])),
        );
        LatentPrecisionPosterior {
            scale: DMatrix::from_diagonal(&diag),
            dof,
        }
    };
    for _ in 0..32 {
        let amm = a.mean().diagonal();
        let next = DVector::from_iterator(
            m,
            (0..m).map(|k| balance_scale(moments[k], gram[k], amm[k], g1, entropy_weight)),
        );
        let change = (&next - &q).amax();
        q = next;
        a = wishart(&q);
        if change < 1e-6 {
            break;
        }
    }
    (q, a)
}

/// Minimiser over `q > 0` of `γ₁/2 (q² d A + g / q²) − n ln q`, floored at
/// `1e-8`.
pub fn balance_scale(d: f64, g: f64, a: f64, gamma1: f64, n: f64) -> f64 {
    let c2 = gamma1 * d * a;
    if c2 <= 0.0 {
        return 1.0;
    }
    let x = (n + (n * n + 4.0 * c2 * gamma1 * g).sqrt()) / (2.0 * c2);
    x.sqrt().max(1e-8)
}

/// The rescaling objective `γ₁/2 (q² d A + g / q²) − n ln q` summed over modes.
pub fn rescale_objective(
    q: &DVector<f64>,
    moments: &DVector<f64>,
    gram: &DVector<f64>,
    a_diag: &DVector<f64>,
    gamma1: f64,
    n: f64,
) -> f64 {
    (0..q.len())
        .map(|k| {
            let q2 = q[k] * q[k];
            gamma1 / 2.0 * (q2 * moments[k] * a_diag[k] + gram[k] / q2) - n * q[k].ln()
        })
        .sum()
}

/// Principal angles (radians, ascending) between the spans of two sets of
/// fields under the Euclidean inner product.
pub fn principal_angles(a: &[VectorField], b: &[VectorField]) -> Result<Vec<f64>> {
    let basis = |x: &[VectorField]| -> Result<DMatrix<f64>> {
        let n = x
            .first()
            .ok_or_else(|| Error::Data("empty basis".into()))?
            .data()
            .len();
        let mut m = DMatrix::zeros(n, x.len());
        for (j, f) in x.iter().enumerate() {
            if f.data().len() != n {
                return Err(Error::Data("bases live on different lattices".into()));
            }
            m.set_column(j, &DVector::from_column_slice(f.data()));
        }
        Ok(m.qr().q())
    };
    let (qa, qb) = (basis(a)?, basis(b)?);
    let sv = (qa.transpose() * qb).singular_values();
    let mut angles: Vec<f64> = sv.iter().map(|s| s.clamp(-1.0, 1.0).acos()).collect();
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}
