//! The outer training loop.
//!
//! Each iteration updates, in turn, every subject's `(z, r)` posterior, the
//! noise precision `λ`, the latent precision `A`, the subspace `W`, the
//! template `a`, and finally re-orthogonalises and rescales the subspace.
//! Every phase is checked against the lower bound and rolled back if it
//! would lower it, so the recorded bound never decreases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::CategoricalImage;
use crate::latent::{
    lower_bound, refresh_covariances, update_latent_precision, update_noise_precision,
    update_subject, BoundTerms, LatentPosterior, LatentPrecisionPosterior,
    NoisePrecisionPosterior, SharedState, SubjectPosterior,
};
use crate::operator::{build_kernel, SpectralKernel};
use crate::pipeline::checkpoint::ModelCheckpoint;
use crate::pipeline::config::PipelineConfig;
use crate::pipeline::dataset::Dataset;
use crate::shooting::Deformation;
use crate::subspace::{
    latent_moments, orthogonalise, rescale, smooth_noise, update_subspace, OrthoTransform,
    Subspace,
};
use crate::template::{
    dirichlet_penalty, update_template, CategoricalDataTerm, DataTerm, LogTemplate,
};

/// Training phases, in the order they run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Subjects,
    NoisePrecision,
    LatentPrecision,
    Subspace,
    Template,
    Orthogonalise,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseReport {
    pub phase: Phase,
    pub bound_before: f64,
    pub bound_after: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    pub bound: f64,
    pub phases: Vec<PhaseReport>,
}

/// Relative slack used when deciding whether a phase lowered the bound.
const BOUND_SLACK: f64 = 1e-9;

fn not_worse(after: f64, before: f64) -> bool {
    after.is_finite() && after >= before - BOUND_SLACK * before.abs().max(1.0)
}

fn data_terms<'a>(
    images: &'a [CategoricalImage],
    template: &'a LogTemplate,
    kernel: &'a SpectralKernel,
    steps: usize,
) -> Result<Vec<CategoricalDataTerm<'a>>> {
    images
        .iter()
        .map(|img| CategoricalDataTerm::new(img, template, kernel, steps))
        .collect()
}

fn as_dyn<'a>(terms: &'a [CategoricalDataTerm<'a>]) -> Vec<&'a dyn DataTerm> {
    terms.iter().map(|t| t as &dyn DataTerm).collect()
}

/// Global state as borrowed pieces, for bound evaluation.
struct View<'a> {
    config: &'a PipelineConfig,
    kernel: &'a SpectralKernel,
    images: &'a [CategoricalImage],
    template: &'a LogTemplate,
    subspace: &'a Subspace,
    posteriors: &'a [SubjectPosterior],
    noise: &'a NoisePrecisionPosterior,
    latent: &'a LatentPrecisionPosterior,
}

impl View<'_> {
    fn shared(&self) -> Result<SharedState<'_>> {
        SharedState::new(
            self.subspace,
            self.kernel,
            self.noise,
            self.latent,
            self.config.weights(),
            self.config.residual_uncertainty,
        )
    }

    fn bound(&self) -> Result<BoundTerms> {
        let terms = data_terms(self.images, self.template, self.kernel, self.config.steps)?;
        lower_bound(
            &as_dyn(&terms),
            &self.shared()?,
            self.posteriors,
            self.noise,
            self.latent,
            -dirichlet_penalty(self.template, self.config.dirichlet_eps),
        )
    }
}

fn view<'a>(
    model: &'a ModelCheckpoint,
    kernel: &'a SpectralKernel,
    images: &'a [CategoricalImage],
) -> View<'a> {
    View {
        config: &model.config,
        kernel,
        images,
        template: &model.template,
        subspace: &model.subspace,
        posteriors: &model.posteriors,
        noise: &model.noise,
        latent: &model.latent,
    }
}

/// Lower bound of a model on its training data.
pub fn evaluate_bound(model: &ModelCheckpoint, data: &Dataset) -> Result<BoundTerms> {
    check_data(model, data)?;
    let kernel = build_kernel(model.template.lattice(), &model.config.metric)?;
    view(model, &kernel, &data.images).bound()
}

fn check_data(model: &ModelCheckpoint, data: &Dataset) -> Result<()> {
    if data.len() != model.posteriors.len() {
        return Err(Error::Data(format!(
            "model has {} subjects, dataset has {}",
            model.posteriors.len(),
            data.len()
        )));
    }
    for img in &data.images {
        img.lattice().ensure_same(model.template.lattice(), "training image")?;
        if img.classes() != model.template.classes() {
            return Err(Error::ChannelMismatch {
                expected: model.template.classes(),
                found: img.classes(),
            });
        }
    }
    Ok(())
}

/// Initial model: the template is the softmax-inverse of the average image,
/// `W` is `K`-smoothed noise made L-orthonormal, posteriors sit at zero with
/// their Laplace covariances, and `λ`, `A` are at their priors.
pub fn initialise(config: &PipelineConfig, data: &Dataset) -> Result<ModelCheckpoint> {
    config.validate()?;
    if data.len() < 2 {
        return Err(Error::Data(format!(
            "training needs at least two images, got {}",
            data.len()
        )));
    }
    let lat = data.lattice().expect("non-empty dataset").clone();
    let kernel = build_kernel(&lat, &config.metric)?;
    let images: Vec<&CategoricalImage> = data.images.iter().collect();
    let template = LogTemplate::from_mean(&images, config.dirichlet_eps)?;
    let m = config.modes;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let raw = Subspace::random_smooth(&lat, m, &kernel, 1.0, &mut rng)?;
    let zeros: Vec<LatentPosterior> = (0..data.len()).map(|_| LatentPosterior::zeros(m)).collect();
    let (subspace, _) = orthogonalise(&raw, &zeros, &kernel)?.apply(&raw, &zeros)?;
    let noise = NoisePrecisionPosterior::prior(config.lambda0, config.nu0, &lat)?;
    let latent = LatentPrecisionPosterior::prior(m);
    let posteriors = {
        let shared = SharedState::new(
            &subspace,
            &kernel,
            &noise,
            &latent,
            config.weights(),
            config.residual_uncertainty,
        )?;
        let terms = data_terms(&data.images, &template, &kernel, config.steps)?;
        terms
            .par_iter()
            .map(|t| refresh_covariances(t, &shared, &SubjectPosterior::zeros(&lat, m)))
            .collect::<Result<Vec<_>>>()?
    };
    let mut model = ModelCheckpoint {
        config: config.clone(),
        iteration: 0,
        bound_trace: Vec::new(),
        subject_ids: data.ids.clone(),
        template,
        subspace,
        posteriors,
        noise,
        latent,
    };
    let lb = view(&model, &kernel, &data.images).bound()?.total();
    if !lb.is_finite() {
        return Err(Error::NonFinite("initial lower bound"));
    }
    model.bound_trace.push(lb);
    Ok(model)
}

/// Replaces collapsed modes with small smooth noise until `W` has full rank
/// in the L inner product, then orthogonalises.
fn orthogonalise_with_repair(
    subspace: &Subspace,
    latents: &[LatentPosterior],
    kernel: &SpectralKernel,
    rng: &mut ChaCha8Rng,
) -> Result<(Subspace, OrthoTransform)> {
    let mut w = subspace.clone();
    for _ in 0..=w.len() {
        match orthogonalise(&w, latents, kernel) {
            Ok(t) => return Ok((w, t)),
            Err(Error::RankDeficient { mode, eigenvalue }) => {
                let largest = w
                    .modes()
                    .iter()
                    .map(|x| kernel.energy(x).map(f64::sqrt))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .fold(0.0, f64::max)
                    .max(1e-12);
                log::warn!(
                    "mode {mode} collapsed (L-Gram eigenvalue {eigenvalue:e}); reinitialising"
                );
                let mut modes = w.modes().to_vec();
                modes[mode] = smooth_noise(w.lattice(), kernel, 1e-3 * largest, rng)?;
                w = Subspace::new(w.lattice(), modes)?;
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::SingularSystem("subspace orthogonalisation"))
}

/// Runs one outer iteration in place.
pub fn iterate(model: &mut ModelCheckpoint, data: &Dataset) -> Result<IterationReport> {
    check_data(model, data)?;
    let cfg = model.config.clone();
    let kernel = build_kernel(model.template.lattice(), &cfg.metric)?;
    let images = &data.images;
    let weights = cfg.weights();
    let mut phases = Vec::with_capacity(6);
    let mut current = match model.bound_trace.last() {
        Some(&b) => b,
        None => view(model, &kernel, images).bound()?.total(),
    };
    let mut record = |phase: Phase, before: f64, after: f64, accepted: bool| {
        log::debug!("{phase:?}: bound {before:.6} -> {after:.6} (accepted: {accepted})");
        phases.push(PhaseReport {
            phase,
            bound_before: before,
            bound_after: after,
            accepted,
        });
    };

    // Subjects.
    {
        let posteriors = {
            let v = view(model, &kernel, images);
            let shared = v.shared()?;
            let terms = data_terms(images, &model.template, &kernel, cfg.steps)?;
            terms
                .par_iter()
                .zip(model.posteriors.par_iter())
                .map(|(t, p)| update_subject(t, &shared, p, &cfg.solver, cfg.subject_rounds))
                .collect::<Result<Vec<_>>>()?
        };
        let lb = View {
            posteriors: &posteriors,
            ..view(model, &kernel, images)
        }
        .bound()?
        .total();
        let ok = not_worse(lb, current);
        record(Phase::Subjects, current, lb, ok);
        if ok {
            model.posteriors = posteriors;
            current = lb;
        }
    }

    // λ.
    {
        let residuals: Vec<_> = model.posteriors.iter().map(|p| &p.r).collect();
        let noise = update_noise_precision(&model.noise, &residuals, &weights);
        let lb = View {
            noise: &noise,
            ..view(model, &kernel, images)
        }
        .bound()?
        .total();
        let ok = not_worse(lb, current);
        record(Phase::NoisePrecision, current, lb, ok);
        if ok {
            model.noise = noise;
            current = lb;
        }
    }

    // A.
    {
        let latents: Vec<_> = model.posteriors.iter().map(|p| &p.z).collect();
        let latent = update_latent_precision(&model.latent, &latents, &weights)?;
        let lb = View {
            latent: &latent,
            ..view(model, &kernel, images)
        }
        .bound()?
        .total();
        let ok = not_worse(lb, current);
        record(Phase::LatentPrecision, current, lb, ok);
        if ok {
            model.latent = latent;
            current = lb;
        }
    }

    // W.
    {
        let subspace = {
            let v = view(model, &kernel, images);
            let shared = v.shared()?;
            let terms = data_terms(images, &model.template, &kernel, cfg.steps)?;
            update_subspace(&as_dyn(&terms), &shared, &model.posteriors, &cfg.solver)?.0
        };
        let lb = View {
            subspace: &subspace,
            ..view(model, &kernel, images)
        }
        .bound()?
        .total();
        let ok = not_worse(lb, current);
        record(Phase::Subspace, current, lb, ok);
        if ok {
            model.subspace = subspace;
            current = lb;
        }
    }

    // Template.
    {
        let inverses: Vec<Deformation> = model
            .posteriors
            .par_iter()
            .map(|p| {
                crate::shooting::shoot(&p.velocity(&model.subspace), &kernel, cfg.steps)
                    .map(|r| r.inverse)
            })
            .collect::<Result<_>>()?;
        let pairs: Vec<(&CategoricalImage, &Deformation)> = images.iter().zip(&inverses).collect();
        let (template, _) = update_template(
            &model.template,
            &pairs,
            cfg.dirichlet_eps,
            cfg.solver.max_backtracks,
        )?;
        let lb = View {
            template: &template,
            ..view(model, &kernel, images)
        }
        .bound()?
        .total();
        let ok = not_worse(lb, current);
        record(Phase::Template, current, lb, ok);
        if ok {
            model.template = template;
            current = lb;
        }
    }

    // Orthogonalise and rescale.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (model.iteration as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let latents: Vec<LatentPosterior> = model.posteriors.iter().map(|p| p.z.clone()).collect();
        let (repaired, mut transform) =
            orthogonalise_with_repair(&model.subspace, &latents, &kernel, &mut rng)?;
        let t = &transform.t;
        let moments = (t * latent_moments(&latents) * t.transpose()).diagonal();
        let ti = &transform.t_inv;
        let gram = (ti.transpose() * repaired.l_gram(&kernel)? * ti).diagonal();
        let n = latents.len();
        let (q, latent) = rescale(&moments, &gram, &model.latent, &weights, n as f64, n);
        transform.q = q;
        let (subspace, latents) = transform.apply(&repaired, &latents)?;
        let posteriors: Vec<SubjectPosterior> = model
            .posteriors
            .iter()
            .zip(latents)
            .map(|(p, z)| SubjectPosterior { z, r: p.r.clone() })
            .collect();
        let lb = View {
            subspace: &subspace,
            posteriors: &posteriors,
            latent: &latent,
            ..view(model, &kernel, images)
        }
        .bound()?
        .total();
        let ok = not_worse(lb, current);
        record(Phase::Orthogonalise, current, lb, ok);
        if ok {
            model.subspace = subspace;
            model.posteriors = posteriors;
            model.latent = latent;
            current = lb;
        }
    }

    model.iteration += 1;
    model.bound_trace.push(current);
    log::info!("iteration {}: lower bound {current:.6}", model.iteration);
    Ok(IterationReport {
        iteration: model.iteration,
        bound: current,
        phases,
    })
}

/// Iterates until `config.iterations` outer iterations are done or the
/// relative bound change drops below `config.tolerance`.
pub fn run(model: &mut ModelCheckpoint, data: &Dataset) -> Result<Vec<IterationReport>> {
    let mut reports = Vec::new();
    while model.iteration < model.config.iterations {
        let before = *model.bound_trace.last().expect("initialised models carry a bound");
        let report = iterate(model, data)?;
        let change = (report.bound - before).abs() / before.abs().max(1e-300);
        reports.push(report);
        if change < model.config.tolerance {
            break;
        }
    }
    Ok(reports)
}

/// Initialises and trains a model.
pub fn train(config: &PipelineConfig, data: &Dataset) -> Result<ModelCheckpoint> {
    let mut model = initialise(config, data)?;
    run(&mut model, data)?;
    Ok(model)
}

/// Bound trace as CSV (`iteration,bound`).
pub fn bound_trace_csv(model: &ModelCheckpoint) -> String {
    let mut out = String::from("iteration,bound\n");
    for (i, b) in model.bound_trace.iter().enumerate() {
        out.push_str(&format!("{i},{b:e}\n"));
    }
    out
}
