//! Figure data: PGM images of templates and mode sweeps, and CSV tables of
//! latent coordinates and fits.
//!
//! PGM files are 8-bit binary (`P5`) images of one class probability, with
//! the first lattice axis running along image rows. For 3D lattices the
//! central slice of the last axis is written.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::field::{Field, VectorField};
use crate::operator::build_kernel;
use crate::pipeline::checkpoint::ModelCheckpoint;
use crate::pipeline::dataset::Dataset;
use crate::pipeline::register::Registrar;
use crate::shooting::shoot;
use crate::template::warp_template;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportTarget {
    Template,
    Modes,
    Latents,
    Fits,
}

impl FromStr for ExportTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "template" => Ok(Self::Template),
            "modes" => Ok(Self::Modes),
            "latents" => Ok(Self::Latents),
            "fits" => Ok(Self::Fits),
            other => Err(Error::Config(format!(
                "unknown export target {other:?} (expected template, modes, latents or fits)"
            ))),
        }
    }
}

/// Encodes channel `class` of `probs` as a binary PGM.
pub fn pgm_bytes(probs: &Field, class: usize) -> Vec<u8> {
    let lat = probs.lattice();
    let dims = lat.dims();
    let (rows, cols) = (dims[0], dims[1]);
    let slice = if dims.len() == 3 { dims[2] / 2 } else { 0 };
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for x0 in 0..rows {
        for x1 in 0..cols {
            let i = x0 + rows * (x1 + cols * slice);
            let p = probs.voxel(i)[class].clamp(0.0, 1.0);
            out.push((p * 255.0).round() as u8);
        }
    }
    out
}

fn write_pgms(dir: &Path, stem: &str, probs: &Field) -> Result<Vec<PathBuf>> {
    (0..probs.channels())
        .map(|k| {
            let path = dir.join(format!("{stem}_class{k}.pgm"));
            fs::write(&path, pgm_bytes(probs, k)).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

fn warped_probs(model: &ModelCheckpoint, v: &VectorField) -> Result<Field> {
    let kernel = build_kernel(model.template.lattice(), &model.config.metric)?;
    let res = shoot(v, &kernel, model.config.steps)?;
    Ok(warp_template(&model.template, &res.inverse)?.probs().clone())
}

/// Template probabilities, plus the first subject reconstructed with an
/// increasing number of modes (`0, 1, 2, 4, …, M`) and with its residual.
pub fn export_template(model: &ModelCheckpoint, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = write_pgms(dir, "template", model.template.probabilities().probs())?;
    if let Some(post) = model.posteriors.first() {
        let m = model.subspace.len();
        let mut counts = vec![0];
        let mut c = 1;
        while c < m {
            counts.push(c);
            c *= 2;
        }
        counts.push(m);
        for count in counts {
            let mut z = post.z.mean.clone();
            z.rows_mut(count, m - count).fill(0.0);
            let v = model.subspace.reconstruct(&z);
            files.extend(write_pgms(dir, &format!("recon_modes{count:02}"), &warped_probs(model, &v)?)?);
        }
        let v = post.velocity(&model.subspace);
        files.extend(write_pgms(dir, "recon_full", &warped_probs(model, &v)?)?);
    }
    Ok(files)
}

/// The template shot along `±sigma` prior standard deviations of each mode.
pub fn export_modes(model: &ModelCheckpoint, dir: &Path, sigma: f64) -> Result<Vec<PathBuf>> {
    let cov = model
        .latent
        .mean()
        .cholesky()
        .ok_or(Error::SingularSystem("latent precision"))?
        .inverse();
    let m = model.subspace.len();
    let mut files = Vec::new();
    for k in 0..m {
        for (tag, sign) in [("minus", -1.0), ("plus", 1.0)] {
            let mut z = DVector::zeros(m);
            z[k] = sign * sigma * cov[(k, k)].sqrt();
            let v = model.subspace.reconstruct(&z);
            let stem = format!("mode{k:02}_{tag}");
            files.extend(write_pgms(dir, &stem, &warped_probs(model, &v)?)?);
        }
    }
    Ok(files)
}

/// `subject_id,z_1,…,z_M`, one row per training subject.
pub fn latents_csv(model: &ModelCheckpoint) -> String {
    let m = model.subspace.len();
    let mut out = String::from("subject_id");
    for k in 1..=m {
        write!(out, ",z_{k}").unwrap();
    }
    out.push('\n');
    for (id, p) in model.subject_ids.iter().zip(&model.posteriors) {
        out.push_str(id);
        for x in p.z.mean.iter() {
            write!(out, ",{x:e}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// One row of the fits table.
#[derive(Clone, Debug, PartialEq)]
pub struct FitRow {
    pub split: &'static str,
    pub subject_id: String,
    pub log_likelihood: f64,
}

/// Training fits at the stored posteriors and, when `test` is given, fits of
/// freshly registered test images.
pub fn fits(
    model: &ModelCheckpoint,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<Vec<FitRow>> {
    if train.len() != model.posteriors.len() {
        return Err(Error::Data(format!(
            "model has {} training subjects, dataset has {}",
            model.posteriors.len(),
            train.len()
        )));
    }
    let reg = Registrar::new(model)?;
    let mut rows = Vec::new();
    for ((id, img), p) in train.ids.iter().zip(&train.images).zip(&model.posteriors) {
        rows.push(FitRow {
            split: "train",
            subject_id: id.clone(),
            log_likelihood: reg.log_likelihood(img, p)?,
        });
    }
    if let Some(test) = test {
        for (id, r) in test.ids.iter().zip(reg.register_all(&test.images)?) {
            rows.push(FitRow {
                split: "test",
                subject_id: id.clone(),
                log_likelihood: r.log_likelihood,
            });
        }
    }
    Ok(rows)
}

pub fn fits_csv(rows: &[FitRow]) -> String {
    let mut out = String::from("split,subject_id,log_likelihood\n");
    for r in rows {
        writeln!(out, "{},{},{:e}", r.split, r.subject_id, r.log_likelihood).unwrap();
    }
    out
}

fn write_text(path: PathBuf, text: &str) -> Result<Vec<PathBuf>> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(vec![path])
}

/// Runs one export into `dir`. `train` is needed for fits; `test` adds
/// registered test subjects to them.
pub fn export(
    model: &ModelCheckpoint,
    target: ExportTarget,
    dir: &Path,
    train: Option<&Dataset>,
    test: Option<&Dataset>,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    match target {
        ExportTarget::Template => export_template(model, dir),
        ExportTarget::Modes => export_modes(model, dir, 2.0),
        ExportTarget::Latents => write_text(dir.join("latents.csv"), &latents_csv(model)),
        ExportTarget::Fits => {
            let train = train.ok_or_else(|| {
                Error::Config("fits export needs the training dataset".into())
            })?;
            write_text(dir.join("fits.csv"), &fits_csv(&fits(model, train, test)?))
        }
    }
}
