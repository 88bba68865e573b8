//! Registration of new images under a trained model.
//!
//! Only the subject's own posteriors are optimised; the template, subspace
//! and both precisions stay frozen.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::CategoricalImage;
use crate::latent::{refresh_covariances, subject_bound, update_subject, SharedState, SubjectPosterior};
use crate::operator::{build_kernel, SpectralKernel};
use crate::pipeline::checkpoint::ModelCheckpoint;
use crate::template::{CategoricalDataTerm, DataTerm};

#[derive(Clone, Debug, PartialEq)]
pub struct Registration {
    pub posterior: SubjectPosterior,
    /// Categorical log-likelihood `ln p(f | μ)` at the posterior mode.
    pub log_likelihood: f64,
    /// The subject's contribution to the lower bound.
    pub bound: f64,
}

/// Frozen model pieces shared by many registrations.
pub struct Registrar<'a> {
    model: &'a ModelCheckpoint,
    kernel: SpectralKernel,
}

impl<'a> Registrar<'a> {
    pub fn new(model: &'a ModelCheckpoint) -> Result<Self> {
        let kernel = build_kernel(model.template.lattice(), &model.config.metric)?;
        Ok(Self { model, kernel })
    }

    fn shared(&self) -> Result<SharedState<'_>> {
        SharedState::new(
            &self.model.subspace,
            &self.kernel,
            &self.model.noise,
            &self.model.latent,
            self.model.config.weights(),
            self.model.config.residual_uncertainty,
        )
    }

    fn data_term<'b>(&'b self, image: &'b CategoricalImage) -> Result<CategoricalDataTerm<'b>> {
        let lat = self.model.template.lattice();
        image.lattice().ensure_same(lat, "registered image")?;
        CategoricalDataTerm::new(image, &self.model.template, &self.kernel, self.model.config.steps)
    }

    /// Log-likelihood of `image` under a given posterior mode.
    pub fn log_likelihood(&self, image: &CategoricalImage, post: &SubjectPosterior) -> Result<f64> {
        let term = self.data_term(image)?;
        Ok(-term.energy(&post.velocity(&self.model.subspace))?)
    }

    /// Registers one image, starting from `init` or from zero.
    pub fn register(
        &self,
        image: &CategoricalImage,
        init: Option<&SubjectPosterior>,
    ) -> Result<Registration> {
        let cfg = &self.model.config;
        let shared = self.shared()?;
        let term = self.data_term(image)?;
        let m = self.model.subspace.len();
        let mut post = match init {
            Some(p) => {
                if p.z.dim() != m {
                    return Err(Error::Data(format!(
                        "initial posterior has {} modes, model has {m}",
                        p.z.dim()
                    )));
                }
                p.clone()
            }
            None => refresh_covariances(
                &term,
                &shared,
                &SubjectPosterior::zeros(image.lattice(), m),
            )?,
        };
        let mut bound = subject_bound(&term, &shared, &post)?.bound();
        for _ in 0..cfg.register_iterations {
            let next = update_subject(&term, &shared, &post, &cfg.solver, cfg.subject_rounds)?;
            let nb = subject_bound(&term, &shared, &next)?.bound();
            if !(nb >= bound) {
                break;
            }
            let change = (nb - bound).abs() / bound.abs().max(1e-300);
            post = next;
            bound = nb;
            if change < cfg.tolerance {
                break;
            }
        }
        let log_likelihood = -term.energy(&post.velocity(&self.model.subspace))?;
        Ok(Registration {
            posterior: post,
            log_likelihood,
            bound,
        })
    }

    /// Registers many images concurrently; results keep the input order.
    pub fn register_all(&self, images: &[CategoricalImage]) -> Result<Vec<Registration>> {
        images.par_iter().map(|img| self.register(img, None)).collect()
    }
}
