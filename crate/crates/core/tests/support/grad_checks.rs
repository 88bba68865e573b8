//! Finite-difference checks of the data-term gradients, shared by the
//! gradient suite and the acceptance gate.
//!
//! The data term is differentiated with the deformation frozen at a
//! reference velocity (`LinearisedDataTerm`), which is exactly what the
//! Gauss-Newton updates use. Gradients with respect to `z`, `r` and `W`
//! follow from `v = W z + r` by the chain rule and are checked through the
//! library's own objective and gradient functions.

#![allow(dead_code)]

use geoshape::latent::{
    latent_gradient, latent_objective, residual_gradient, residual_objective,
    LatentPosterior, LatentPrecisionPosterior, MixtureWeights, NoisePrecisionPosterior,
    ResidualPosterior, ResidualUncertainty, SharedState, SubjectPosterior,
};
use geoshape::subspace::{subspace_gradient, subspace_objective, Subspace};
use geoshape::template::{CategoricalDataTerm, DataTerm, DataTermDerivs, LogTemplate};
use geoshape::{build_kernel, CategoricalImage, Field, Lattice, MetricParams, VectorField};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn smooth(lat: &Lattice, c: usize, amp: f64, rng: &mut ChaCha8Rng) -> Field {
    let n = lat.dims().to_vec();
    let phases: Vec<[f64; 4]> = (0..c).map(|_| rng.random()).collect();
    Field::from_fn(lat, c, |x, o| {
        for (ch, p) in phases.iter().enumerate() {
            let t0 = std::f64::consts::TAU * x[0] as f64 / n[0] as f64;
            let t1 = std::f64::consts::TAU * x[1] as f64 / n[1] as f64;
            o[ch] = amp * ((t0 + 6.0 * p[0]).sin() * (t1 + 6.0 * p[1]).cos()
                + 0.5 * (2.0 * t0 + 6.0 * p[2]).cos() * (t1 + 6.0 * p[3]).sin());
        }
    })
}

struct Setup {
    lat: Lattice,
    template: LogTemplate,
    image: CategoricalImage,
    subspace: Subspace,
    z: DVector<f64>,
    r: VectorField,
}

fn setup(k: usize, m: usize, seed: u64) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lat = Lattice::new(&[16, 16]).unwrap();
    let template = LogTemplate::new(smooth(&lat, k, 3.0, &mut rng)).unwrap();
    let labels: Vec<Option<usize>> = (0..lat.len()).map(|_| Some(rng.random_range(0..k))).collect();
    let image = CategoricalImage::from_labels(&lat, k, &labels).unwrap();
    let modes = (0..m).map(|_| smooth(&lat, 2, 0.6, &mut rng)).collect();
    let subspace = Subspace::new(&lat, modes).unwrap();
    let z = DVector::from_iterator(m, (0..m).map(|_| rng.random_range(-1.0..1.0)));
    let r = smooth(&lat, 2, 0.3, &mut rng);
    Setup { lat, template, image, subspace, z, r }
}

pub fn cases() -> Vec<(usize, usize)> {
    vec![(2, 1), (2, 2), (3, 1), (3, 2)]
}

/// Relative errors of the velocity gradient (at the reference and away
/// from it) and the mismatch between the linearised and full gradients at
/// the reference.
pub fn velocity_errors(k: usize, m: usize) -> (f64, f64) {
    let mut worst = 0f64;
    let s = setup(k, m, 10 * k as u64 + m as u64);
    let kern = build_kernel(&s.lat, &MetricParams::default()).unwrap();
    let term = CategoricalDataTerm::new(&s.image, &s.template, &kern, 8).unwrap();
    let mut v = s.subspace.reconstruct(&s.z);
    v.axpy(1.0, &s.r);
    let lin = term.linearise(&v).unwrap();
    // Away from the reference too, where the linearised energy is not the full one.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut at = v.clone();
    at.axpy(1.0, &smooth(&s.lat, 2, 0.05, &mut rng));
    for point in [&v, &at] {
        let g = lin.gradient(point).unwrap();
        let fd: Vec<f64> = (0..point.data().len())
            .map(|i| {
                let mut p = point.clone();
                p.data_mut()[i] += H;
                let ep = lin.energy(&p).unwrap();
                p.data_mut()[i] -= 2.0 * H;
                (ep - lin.energy(&p).unwrap()) / (2.0 * H)
            })
            .collect();
        worst = worst.max(rel_err(g.data(), &fd));
    }
    // The linearisation reproduces the full data-term gradient at its reference.
    let full = term.derivs(&v).unwrap();
    (worst, rel_err(lin.gradient(&v).unwrap().data(), full.grad_v.data()))
}

fn shared_state<'a>(
    s: &'a Setup,
    kern: &'a geoshape::SpectralKernel,
    sub: &'a Subspace,
) -> SharedState<'a> {
    let m = sub.len();
    let noise = NoisePrecisionPosterior::prior(17.0, 10.0, &s.lat).unwrap();
    let mut latent = LatentPrecisionPosterior::prior(m);
    latent.scale = DMatrix::from_fn(m, m, |i, j| if i == j { 0.7 + 0.2 * i as f64 } else { 0.05 });
    SharedState::new(sub, kern, &noise, &latent, MixtureWeights::default(), ResidualUncertainty::Diagonal)
        .unwrap()
}

/// Relative errors of the latent and residual gradients.
pub fn latent_residual_errors(k: usize, m: usize) -> (f64, f64) {
    let s = setup(k, m, 100 + 10 * k as u64 + m as u64);
    let kern = build_kernel(&s.lat, &MetricParams::default()).unwrap();
    let term = CategoricalDataTerm::new(&s.image, &s.template, &kern, 8).unwrap();
    let shared = shared_state(&s, &kern, &s.subspace);
    let vel = |z: &DVector<f64>, r: &VectorField| {
        let mut v = s.subspace.reconstruct(z);
        v.axpy(1.0, r);
        v
    };
    let v0 = vel(&s.z, &s.r);
    let lin = term.linearise(&v0).unwrap();
    let grad_v = lin.gradient(&v0).unwrap();

    let gz = latent_gradient(&shared, &grad_v, &s.z, &s.r);
    let fz: Vec<f64> = (0..m)
        .map(|j| {
            let f = |dz: f64| {
                let mut z = s.z.clone();
                z[j] += dz;
                latent_objective(&shared, lin.energy(&vel(&z, &s.r)).unwrap(), &z, &s.r)
            };
            (f(H) - f(-H)) / (2.0 * H)
        })
        .collect();
    let ez = rel_err(gz.as_slice(), &fz);

    let gr = residual_gradient(&shared, &grad_v, &s.z, &s.r).unwrap();
    let fr: Vec<f64> = (0..s.r.data().len())
        .map(|i| {
            let f = |dr: f64| {
                let mut r = s.r.clone();
                r.data_mut()[i] += dr;
                residual_objective(&shared, lin.energy(&vel(&s.z, &r)).unwrap(), &s.z, &r)
                    .unwrap()
            };
            (f(H) - f(-H)) / (2.0 * H)
        })
        .collect();
    (ez, rel_err(gr.data(), &fr))
}

/// Relative error of the subspace gradient.
pub fn subspace_error(k: usize, m: usize) -> f64 {
    let s = setup(k, m, 200 + 10 * k as u64 + m as u64);
    let kern = build_kernel(&s.lat, &MetricParams::default()).unwrap();
    let term = CategoricalDataTerm::new(&s.image, &s.template, &kern, 8).unwrap();
    let post = SubjectPosterior {
        z: LatentPosterior {
            mean: s.z.clone(),
            cov: DMatrix::from_fn(m, m, |i, j| if i == j { 0.3 } else { 0.02 }),
        },
        r: ResidualPosterior {
            mean: s.r.clone(),
            uncertainty: None,
            expected_prior_energy: kern.energy(&s.r).unwrap(),
        },
    };
    let mut v0 = s.subspace.reconstruct(&s.z);
    v0.axpy(1.0, &s.r);
    let lin = term.linearise(&v0).unwrap();
    let full = term.derivs(&v0).unwrap();
    let derivs = DataTermDerivs {
        energy: full.energy,
        grad_v: lin.gradient(&v0).unwrap(),
        hess_v: full.hess_v.clone(),
    };
    let shared = shared_state(&s, &kern, &s.subspace);
    let g = subspace_gradient(&shared, std::slice::from_ref(&derivs), std::slice::from_ref(&post))
        .unwrap();
    // Objective in W: linearised data energy plus every W-dependent prior
    // and curvature term, with the Hessian blocks held fixed.
    let objective = |modes: Vec<VectorField>| {
        let sub = Subspace::new(&s.lat, modes).unwrap();
        let sh = shared.with_subspace(&sub).unwrap();
        let mut v = sub.reconstruct(&s.z);
        v.axpy(1.0, &s.r);
        let d = DataTermDerivs {
            energy: lin.energy(&v).unwrap(),
            grad_v: derivs.grad_v.clone(),
            hess_v: derivs.hess_v.clone(),
        };
        subspace_objective(&sh, &[d], std::slice::from_ref(&post)).unwrap()
    };
    let mut fd = Vec::new();
    let mut an = Vec::new();
    for (j, gj) in g.iter().enumerate() {
        for i in 0..gj.data().len() {
            let f = |dw: f64| {
                let mut modes = s.subspace.modes().to_vec();
                modes[j].data_mut()[i] += dw;
                objective(modes)
            };
            fd.push((f(H) - f(-H)) / (2.0 * H));
            an.push(gj.data()[i]);
        }
    }
    rel_err(&an, &fd)
}
