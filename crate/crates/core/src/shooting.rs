//! Geodesic shooting: integrate an initial velocity into a diffeomorphism.
//!
//! The momentum `u = L v` is transported along the path,
//! `u_t = |Dψ_t⁻¹| (Dψ_t⁻¹)ᵀ (u₀ ∘ ψ_t⁻¹)`, and mapped back to a velocity with
//! `v_t = K u_t`. Both the forward flow `ψ` and its inverse are integrated
//! over unit time with semi-Lagrangian midpoint steps:
//!
//! ```text
//! ψ ← F ∘ ψ        ψ⁻¹ ← ψ⁻¹ ∘ F⁻¹        F(x) = x + δt v(x + ½δt v(x))
//! ```
//!
//! where `v` is the velocity at the half step. Maps are resampled with cubic
//! convolution. The momentum is carried in weak form by pushing
//! `(Dψ)⁻ᵀ u₀` through the forward map, which stays stable for rough
//! momenta where resampling `u₀` would not.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, Lattice, TensorField, VectorField};
use crate::interp::{pull_cubic_map, pull_map, push_spline_map, spatial_gradient4};
use crate::operator::SpectralKernel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeformationKind {
    Forward,
    Inverse,
}

/// A dense transform stored as absolute sample coordinates in voxel units.
#[derive(Clone, Debug, PartialEq)]
pub struct Deformation {
    map: VectorField,
    kind: DeformationKind,
}

fn identity_map(lattice: &Lattice) -> VectorField {
    let d = lattice.ndim();
    Field::from_fn(lattice, d, |c, o| {
        for a in 0..d {
            o[a] = c[a] as f64;
        }
    })
}

impl Deformation {
    pub fn new(map: VectorField, kind: DeformationKind) -> Result<Self> {
        let d = map.lattice().ndim();
        if map.channels() != d {
            return Err(Error::ChannelMismatch {
                expected: d,
                found: map.channels(),
            });
        }
        if !map.is_finite() {
            return Err(Error::NonFinite("deformation map"));
        }
        Ok(Self { map, kind })
    }

    pub fn identity(lattice: &Lattice) -> Self {
        Self {
            map: identity_map(lattice),
            kind: DeformationKind::Inverse,
        }
    }

    /// Builds a transform from a displacement field (`map = id + disp`).
    pub fn from_displacement(disp: &VectorField, kind: DeformationKind) -> Result<Self> {
        let mut map = identity_map(disp.lattice());
        map.axpy(1.0, disp);
        Self::new(map, kind)
    }

    pub fn lattice(&self) -> &Lattice {
        self.map.lattice()
    }

    pub fn map(&self) -> &VectorField {
        &self.map
    }

    pub fn kind(&self) -> DeformationKind {
        self.kind
    }

    pub fn displacement(&self) -> VectorField {
        let mut disp = self.map.clone();
        disp.axpy(-1.0, &identity_map(self.lattice()));
        disp
    }

    /// `self ∘ inner`, i.e. `x ↦ self(inner(x))`.
    pub fn compose(&self, inner: &Deformation) -> Result<Deformation> {
        self.lattice().ensure_same(inner.lattice(), "compose")?;
        let mut map = pull_map(&self.displacement(), &inner.map);
        map.axpy(1.0, &inner.map);
        Deformation::new(map, self.kind)
    }
}

/// Output of [`shoot`].
#[derive(Clone, Debug)]
pub struct ShootingResult {
    /// `ψ`, the flow of the initial velocity at unit time.
    pub forward: Deformation,
    /// `ψ⁻¹`; pulling the template with this map warps it to the subject.
    pub inverse: Deformation,
    pub initial_momentum: VectorField,
    pub steps: usize,
    /// Kinetic energy `⟨u_t, v_t⟩` at `t = 0, 1/T, …, 1`.
    pub energies: Vec<f64>,
}

/// Transported momentum for the forward map `fwd`, in weak form:
/// `⟨u_t, w⟩ = ⟨u₀, (Dψ)⁻¹ (w ∘ ψ)⟩`, so `u_t` is the adjoint of linear
/// interpolation applied to `(Dψ)⁻ᵀ u₀`. Only smooth test fields see the
/// momentum, which keeps rough momenta from aliasing into low frequencies.
fn transport_momentum(u0: &VectorField, fwd: &VectorField) -> Result<VectorField> {
    let lat = u0.lattice();
    let d = lat.ndim();
    let jac = jacobian_of_map(fwd);
    let mut covec = Field::zeros(lat, d);
    for i in 0..lat.len() {
        let j = jac.voxel(i);
        let u = u0.voxel(i);
        if !(det(j, d) > 0.0) {
            return Err(Error::NonFinite("geodesic shooting (lattice folded)"));
        }
        let o = covec.voxel_mut(i);
        // Solve Jᵀ o = u.
        if d == 2 {
            let det = j[0] * j[3] - j[1] * j[2];
            o[0] = (j[3] * u[0] - j[2] * u[1]) / det;
            o[1] = (-j[1] * u[0] + j[0] * u[1]) / det;
        } else {
            let m = nalgebra::Matrix3::from_row_slice(j).transpose();
            let x = m
                .lu()
                .solve(&nalgebra::Vector3::new(u[0], u[1], u[2]))
                .unwrap_or_else(|| nalgebra::Vector3::repeat(f64::NAN));
            o.copy_from_slice(x.as_slice());
        }
    }
    Ok(push_spline_map(&covec, fwd))
}

/// Image of the points `pts` under one step `x ↦ x + h v(x + ½h v(x))`.
fn step_points(v: &VectorField, pts: &VectorField, h: f64) -> VectorField {
    let mut mid = pts.clone();
    mid.axpy(0.5 * h, &pull_cubic_map(v, pts));
    let mut out = pts.clone();
    out.axpy(h, &pull_cubic_map(v, &mid));
    out
}

/// Lattice points pulled back through one step: solves
/// `x + h v(x + ½h v(x)) = y` at every lattice point `y` by fixed-point
/// iteration.
fn inverse_step_points(v: &VectorField, id: &VectorField, h: f64) -> VectorField {
    let mut x = id.clone();
    x.axpy(-h, v);
    for _ in 0..3 {
        let img = step_points(v, &x, h);
        // x ← y − h v(x + ½h v(x)) = x + (y − F(x))
        x.axpy(1.0, id);
        x.axpy(-1.0, &img);
    }
    x
}

/// `ψ⁻¹ ∘ G` where `G` undoes one step of `v`.
fn advance_inverse(inv: &VectorField, id: &VectorField, v: &VectorField, h: f64) -> VectorField {
    let pts = inverse_step_points(v, id, h);
    let mut disp = inv.clone();
    disp.axpy(-1.0, id);
    let mut out = pull_cubic_map(&disp, &pts);
    out.axpy(1.0, &pts);
    out
}

/// Energy ratio (either way) beyond which a shooting is reported as diverged.
pub const ENERGY_GROWTH_LIMIT: f64 = 10.0;

/// Integrates `v0` over unit time with `steps` midpoint steps.
///
/// Each step predicts the momentum at the half step, maps it to a velocity,
/// and advances both maps with it; the inverse step is solved to be the
/// inverse of the forward step.
pub fn shoot(v0: &VectorField, kern: &SpectralKernel, steps: usize) -> Result<ShootingResult> {
    if steps == 0 {
        return Err(Error::Config("shooting needs at least one time step".into()));
    }
    if !v0.is_finite() {
        return Err(Error::NonFinite("initial velocity"));
    }
    let lat = v0.lattice();
    let id = identity_map(lat);
    let dt = 1.0 / steps as f64;

    let u0 = kern.apply_l(v0)?;
    let mut energies = vec![u0.dot(v0)];
    let mut fwd = id.clone();
    let mut inv = id.clone();
    let mut v = v0.clone();
    let all_zero = v0.data().iter().all(|&x| x == 0.0);

    for t in 0..steps {
        if t > 0 {
            let u = transport_momentum(&u0, &fwd)?;
            v = kern.apply_k(&u)?;
            energies.push(u.dot(&v));
        }
        if all_zero {
            continue;
        }
        let half = step_points(&v, &fwd, 0.5 * dt);
        let vh = kern.apply_k(&transport_momentum(&u0, &half)?)?;
        inv = advance_inverse(&inv, &id, &vh, dt);
        fwd = step_points(&vh, &fwd, dt);
        if !(inv.is_finite() && fwd.is_finite()) {
            return Err(Error::NonFinite("geodesic shooting"));
        }
    }
    let u = transport_momentum(&u0, &fwd)?;
    let v1 = kern.apply_k(&u)?;
    energies.push(u.dot(&v1));
    if energies.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("geodesic shooting energy"));
    }
    // The energy is conserved along a geodesic. Rough momenta keep most of
    // it at high frequencies where transport is inexact, so only an
    // order-of-magnitude change is taken to mean the flow outran the lattice.
    let e0 = energies[0];
    if energies.iter().any(|&e| e > ENERGY_GROWTH_LIMIT * e0 || e * ENERGY_GROWTH_LIMIT < e0) {
        return Err(Error::NonFinite("geodesic shooting (energy diverged)"));
    }
    Ok(ShootingResult {
        forward: Deformation::new(fwd, DeformationKind::Forward)?,
        inverse: Deformation::new(inv, DeformationKind::Inverse)?,
        initial_momentum: u0,
        steps,
        energies,
    })
}

fn jacobian_of_map(map: &VectorField) -> TensorField {
    let lat = map.lattice();
    let d = lat.ndim();
    let mut disp = map.clone();
    disp.axpy(-1.0, &identity_map(lat));
    // Gradient channel layout is (component, axis) = J[a][b] row-major.
    let mut jac = spatial_gradient4(&disp);
    for i in 0..lat.len() {
        let j = jac.voxel_mut(i);
        for a in 0..d {
            j[a * d + a] += 1.0;
        }
    }
    jac
}

/// Fourth-order central-difference Jacobian `Dφ` of a transform, `d×d` row-major per voxel
/// with entry `(a, b) = ∂φₐ/∂x_b`.
pub fn jacobian(phi: &Deformation) -> TensorField {
    jacobian_of_map(phi.map())
}

/// Determinant of a row-major `d×d` block (`d` ∈ {2, 3}).
pub fn det(j: &[f64], d: usize) -> f64 {
    match d {
        2 => j[0] * j[3] - j[1] * j[2],
        3 => {
            j[0] * (j[4] * j[8] - j[5] * j[7]) - j[1] * (j[3] * j[8] - j[5] * j[6])
                + j[2] * (j[3] * j[7] - j[4] * j[6])
        }
        _ => unreachable!("lattices are 2D or 3D"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{build_kernel, MetricParams};

    #[test]
    fn zero_velocity_is_exact_identity() {
        let lat = Lattice::new(&[16, 12]).unwrap();
        let kern = build_kernel(&lat, &MetricParams::default()).unwrap();
        let res = shoot(&Field::zeros(&lat, 2), &kern, 8).unwrap();
        assert_eq!(res.forward.map(), Deformation::identity(&lat).map());
        assert_eq!(res.inverse.map(), Deformation::identity(&lat).map());
        assert!(res.energies.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn rejects_zero_steps() {
        let lat = Lattice::new(&[8, 8]).unwrap();
        let kern = build_kernel(&lat, &MetricParams::default()).unwrap();
        assert!(shoot(&Field::zeros(&lat, 2), &kern, 0).is_err());
    }

    #[test]
    fn constant_velocity_translates() {
        let lat = Lattice::new(&[32, 32]).unwrap();
        let kern = build_kernel(&lat, &MetricParams::default()).unwrap();
        let c = [0.7, -0.4];
        let v = Field::from_fn(&lat, 2, |_, o| o.copy_from_slice(&c));
        let res = shoot(&v, &kern, 8).unwrap();
        let fd = res.forward.displacement();
        let id = res.inverse.displacement();
        for i in 0..lat.len() {
            for a in 0..2 {
                assert!((fd.voxel(i)[a] - c[a]).abs() < 1e-3);
                assert!((id.voxel(i)[a] + c[a]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn jacobian_of_identity_translation_and_scaling() {
        let lat = Lattice::new(&[10, 9, 8]).unwrap();
        let id = Deformation::identity(&lat);
        let j = jacobian(&id);
        for i in 0..lat.len() {
            assert_eq!(det(j.voxel(i), 3), 1.0);
        }
        let t = Field::constant(&lat, 3, 0.37);
        let tr = Deformation::from_displacement(&t, DeformationKind::Forward).unwrap();
        let j = jacobian(&tr);
        for i in 0..lat.len() {
            assert!((det(j.voxel(i), 3) - 1.0).abs() < 1e-14);
        }
        let scaled = Field::from_fn(&lat, 3, |c, o| {
            for a in 0..3 {
                o[a] = 1.1 * c[a] as f64;
            }
        });
        let s = Deformation::new(scaled, DeformationKind::Forward).unwrap();
        let j = jacobian(&s);
        for i in 0..lat.len() {
            let c = lat.coords(i);
            let interior = (0..3).all(|a| c[a] > 1 && c[a] + 2 < lat.dims()[a]);
            if interior {
                assert!((det(j.voxel(i), 3) - 1.1f64.powi(3)).abs() < 1e-12);
            }
        }
    }
}
