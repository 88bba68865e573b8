//! Model checkpoints.
//!
//! A checkpoint is a directory:
//!
//! ```text
//! model.json            configuration, counters, bound trace, λ and A
//!                       posteriors, per-subject latent posteriors
//! template.gsh          log-template a (K channels)
//! modes/w_000.gsh ...   one field per principal mode
//! residuals/r_000.gsh   residual means, one per subject
//! residuals/s_000.gsh   voxelwise residual covariance blocks, when kept
//! ```
//!
//! Fields are stored as 64-bit floats and JSON numbers are printed in
//! shortest round-trip form, so save followed by load is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldio::{read_field, write_field, Dtype};
use crate::latent::{
    LatentPosterior, LatentPrecisionPosterior, NoisePrecisionPosterior, ResidualPosterior,
    SubjectPosterior,
};
use crate::pipeline::config::PipelineConfig;
use crate::subspace::Subspace;
use crate::template::LogTemplate;

const FORMAT: &str = "geoshape-checkpoint-1";

/// Everything needed to resume training or register new subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: PipelineConfig,
    /// Completed outer iterations.
    pub iteration: usize,
    /// Lower bound after initialisation and after each outer iteration.
    pub bound_trace: Vec<f64>,
    pub subject_ids: Vec<String>,
    pub template: LogTemplate,
    pub subspace: Subspace,
    pub posteriors: Vec<SubjectPosterior>,
    pub noise: NoisePrecisionPosterior,
    pub latent: LatentPrecisionPosterior,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectRecord {
    id: String,
    z: LatentPosterior,
    residual_energy: f64,
    residual_uncertainty: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelRecord {
    format: String,
    config: PipelineConfig,
    iteration: usize,
    bound_trace: Vec<f64>,
    modes: usize,
    noise: NoisePrecisionPosterior,
    latent: LatentPrecisionPosterior,
    subjects: Vec<SubjectRecord>,
}

fn mode_path(dir: &Path, m: usize) -> std::path::PathBuf {
    dir.join("modes").join(format!("w_{m:03}.gsh"))
}

fn residual_path(dir: &Path, n: usize, what: char) -> std::path::PathBuf {
    dir.join("residuals").join(format!("{what}_{n:03}.gsh"))
}

fn fresh_dir(path: &Path) -> Result<()> {
    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl ModelCheckpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        if self.subject_ids.len() != self.posteriors.len() {
            return Err(Error::Data("subject ids and posteriors differ in length".into()));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fresh_dir(&dir.join("modes"))?;
        fresh_dir(&dir.join("residuals"))?;
        write_field(&dir.join("template.gsh"), self.template.field(), Dtype::F64)?;
        for (m, w) in self.subspace.modes().iter().enumerate() {
            write_field(&mode_path(dir, m), w, Dtype::F64)?;
        }
        let mut subjects = Vec::with_capacity(self.posteriors.len());
        for (n, (id, p)) in self.subject_ids.iter().zip(&self.posteriors).enumerate() {
            write_field(&residual_path(dir, n, 'r'), &p.r.mean, Dtype::F64)?;
            if let Some(s) = &p.r.uncertainty {
                write_field(&residual_path(dir, n, 's'), s, Dtype::F64)?;
            }
            subjects.push(SubjectRecord {
                id: id.clone(),
                z: p.z.clone(),
                residual_energy: p.r.expected_prior_energy,
                residual_uncertainty: p.r.uncertainty.is_some(),
            });
        }
        let record = ModelRecord {
            format: FORMAT.into(),
            config: self.config.clone(),
            iteration: self.iteration,
            bound_trace: self.bound_trace.clone(),
            modes: self.subspace.len(),
            noise: self.noise,
            latent: self.latent.clone(),
            subjects,
        };
        let path = dir.join("model.json");
        let text = serde_json::to_string_pretty(&record).expect("checkpoint serialises");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let record: ModelRecord = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        if record.format != FORMAT {
            return Err(Error::Data(format!(
                "unsupported checkpoint format {:?}",
                record.format
            )));
        }
        record.config.validate()?;
        let template = LogTemplate::new(read_field(&dir.join("template.gsh"))?)?;
        let lat = template.lattice().clone();
        let modes = (0..record.modes)
            .map(|m| read_field(&mode_path(dir, m)))
            .collect::<Result<Vec<_>>>()?;
        let subspace = Subspace::new(&lat, modes)?;
        let mut subject_ids = Vec::with_capacity(record.subjects.len());
        let mut posteriors = Vec::with_capacity(record.subjects.len());
        for (n, s) in record.subjects.into_iter().enumerate() {
            let mean = read_field(&residual_path(dir, n, 'r'))?;
            mean.lattice().ensure_same(&lat, "residual field")?;
            let uncertainty = if s.residual_uncertainty {
                Some(read_field(&residual_path(dir, n, 's'))?)
            } else {
                None
            };
            if s.z.dim() != record.modes {
                return Err(Error::Data(format!(
                    "subject {} has {} latent coordinates, expected {}",
                    s.id,
                    s.z.dim(),
                    record.modes
                )));
            }
            subject_ids.push(s.id);
            posteriors.push(SubjectPosterior {
                z: s.z,
                r: ResidualPosterior {
                    mean,
                    uncertainty,
                    expected_prior_energy: s.residual_energy,
                },
            });
        }
        Ok(Self {
            config: record.config,
            iteration: record.iteration,
            bound_trace: record.bound_trace,
            subject_ids,
            template,
            subspace,
            posteriors,
            noise: record.noise,
            latent: record.latent,
        })
    }
}
