//! Synthetic populations drawn from the generative model.
//!
//! Each subject gets `z ~ N(0, A⁻¹)` and `r ~ N(0, (λL)⁻¹)`; the velocity
//! `v = W z + r` is shot, the base template is warped with the resulting
//! inverse map, and one class per voxel is sampled from the warped
//! probabilities.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{CategoricalImage, Field, Lattice, VectorField};
use crate::fieldio::{write_field, Dtype};
use crate::operator::{build_kernel, MetricParams, SpectralKernel};
use crate::pipeline::config::SyntheticSpec;
use crate::pipeline::dataset::Dataset;
use crate::shooting::shoot;
use crate::subspace::Subspace;
use crate::template::{warp_template, LogTemplate};

/// Analytic smooth modes: one period of a sine across the lattice, moving
/// one axis as a function of the next (shears) and then as a function of
/// itself (compressions). Each peaks at `amplitude` voxels.
pub fn analytic_modes(lattice: &Lattice, count: usize, amplitude: f64) -> Result<Subspace> {
    let d = lattice.ndim();
    if count > 2 * d {
        return Err(Error::Config(format!("at most {} analytic modes in {d}D", 2 * d)));
    }
    let dims = lattice.dims().to_vec();
    let modes = (0..count)
        .map(|j| {
            let channel = j % d;
            let axis = if j < d { (channel + 1) % d } else { channel };
            Field::from_fn(lattice, d, |c, o| {
                let t = TAU * c[axis] as f64 / dims[axis] as f64;
                o[channel] = amplitude * if j < d { t.sin() } else { t.cos() };
            })
        })
        .collect();
    Subspace::new(lattice, modes)
}

/// A periodic blob pattern with two periods along every axis. Class 1
/// follows `Π cos`, class 2 (when present) follows `Π sin`, and class 0 is
/// the reference.
pub fn base_template(lattice: &Lattice, classes: usize, sharpness: f64) -> Result<LogTemplate> {
    let dims = lattice.dims().to_vec();
    let d = lattice.ndim();
    let field = Field::from_fn(lattice, classes, |c, o| {
        let phase = |a: usize| 2.0 * TAU * c[a] as f64 / dims[a] as f64;
        let cc: f64 = (0..d).map(|a| phase(a).cos()).product();
        let ss: f64 = (0..d).map(|a| phase(a).sin()).product();
        o[1] = sharpness * cc;
        if classes > 2 {
            o[2] = sharpness * ss;
        }
    });
    LogTemplate::new(field)
}

pub fn sample_latent(precision: &[f64], rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_iterator(
        precision.len(),
        precision.iter().map(|a| rng.sample::<f64, _>(StandardNormal) / a.sqrt()),
    )
}

/// `r ~ N(0, (λL)⁻¹)`.
pub fn sample_residual(kernel: &SpectralKernel, lambda: f64, rng: &mut impl Rng) -> Result<VectorField> {
    let lat = kernel.lattice();
    let d = lat.ndim();
    let white = Field::from_vec(
        lat,
        d,
        (0..lat.len() * d).map(|_| rng.sample(StandardNormal)).collect(),
    )?;
    Ok(kernel.colour_noise(&white)?.scaled(1.0 / lambda.sqrt()))
}

/// Draws one class per voxel from `probs`.
pub fn sample_categorical(probs: &Field, rng: &mut impl Rng) -> Result<CategoricalImage> {
    let lat = probs.lattice();
    let k = probs.channels();
    let labels: Vec<Option<usize>> = (0..lat.len())
        .map(|i| {
            let u: f64 = rng.random();
            let p = probs.voxel(i);
            let mut acc = 0.0;
            let mut label = k - 1;
            for (c, &pc) in p.iter().enumerate() {
                acc += pc;
                if u < acc {
                    label = c;
                    break;
                }
            }
            Some(label)
        })
        .collect();
    CategoricalImage::from_labels(lat, k, &labels)
}

#[derive(Clone, Debug)]
pub struct SyntheticSubject {
    pub id: String,
    pub image: CategoricalImage,
    pub z: DVector<f64>,
    pub residual: VectorField,
}

#[derive(Clone, Debug)]
pub struct SyntheticPopulation {
    pub spec: SyntheticSpec,
    pub template: LogTemplate,
    pub subspace: Subspace,
    pub train: Vec<SyntheticSubject>,
    pub test: Vec<SyntheticSubject>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthSubject {
    id: String,
    split: String,
    z: Vec<f64>,
    residual_energy: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthRecord {
    spec: SyntheticSpec,
    metric: MetricParams,
    steps: usize,
    seed: u64,
    subjects: Vec<TruthSubject>,
}

/// Attempts per subject before a fold is reported as an error.
const MAX_DRAWS: usize = 20;

/// Generates a training and a test population.
pub fn synthesise(
    spec: &SyntheticSpec,
    metric: &MetricParams,
    steps: usize,
    seed: u64,
) -> Result<SyntheticPopulation> {
    spec.validate()?;
    let lat = Lattice::new(&spec.dims)?;
    let kernel = build_kernel(&lat, metric)?;
    let template = base_template(&lat, spec.classes, spec.sharpness)?;
    let subspace = analytic_modes(&lat, spec.true_modes, spec.mode_amplitude)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |prefix: &str, count: usize| -> Result<Vec<SyntheticSubject>> {
        (0..count)
            .map(|n| {
                // Draws whose velocity folds the lattice are not diffeomorphic;
                // redraw them, which truncates the prior's far tail.
                let mut attempt = 0;
                let (z, residual, res) = loop {
                    let z = sample_latent(&spec.latent_precision, &mut rng);
                    let residual = sample_residual(&kernel, spec.lambda, &mut rng)?;
                    let mut v = subspace.reconstruct(&z);
                    v.axpy(1.0, &residual);
                    match shoot(&v, &kernel, steps) {
                        Ok(res) => break (z, residual, res),
                        Err(e @ Error::NonFinite(_)) => {
                            attempt += 1;
                            if attempt >= MAX_DRAWS {
                                return Err(e);
                            }
                            log::debug!("{prefix}{n:03}: redrawing after {e}");
                        }
                        Err(e) => return Err(e),
                    }
                };
                let mu = warp_template(&template, &res.inverse)?;
                let image = sample_categorical(mu.probs(), &mut rng)?;
                Ok(SyntheticSubject {
                    id: format!("{prefix}{n:03}"),
                    image,
                    z,
                    residual,
                })
            })
            .collect()
    };
    let train = draw("train", spec.n_train)?;
    let test = draw("test", spec.n_test)?;
    Ok(SyntheticPopulation {
        spec: spec.clone(),
        template,
        subspace,
        train,
        test,
    })
}

fn dataset(subjects: &[SyntheticSubject]) -> Result<Dataset> {
    Dataset::new(
        subjects.iter().map(|s| s.id.clone()).collect(),
        subjects.iter().map(|s| s.image.clone()).collect(),
    )
}

impl SyntheticPopulation {
    pub fn train_dataset(&self) -> Result<Dataset> {
        dataset(&self.train)
    }

    pub fn test_dataset(&self) -> Result<Dataset> {
        dataset(&self.test)
    }

    /// Writes `train/`, `test/` (datasets with manifests) and `truth/`
    /// (base template, true modes and `truth.json`) under `out`.
    pub fn save(&self, out: &Path, metric: &MetricParams, steps: usize, seed: u64) -> Result<()> {
        self.train_dataset()?.save(&out.join("train"))?;
        self.test_dataset()?.save(&out.join("test"))?;
        let truth = out.join("truth");
        fs::create_dir_all(&truth).map_err(|e| Error::io(&truth, e))?;
        write_field(&truth.join("template.gsh"), self.template.field(), Dtype::F64)?;
        for (m, w) in self.subspace.modes().iter().enumerate() {
            write_field(&truth.join(format!("w_{m:03}.gsh")), w, Dtype::F64)?;
        }
        let kernel = build_kernel(self.template.lattice(), metric)?;
        let mut subjects = Vec::new();
        for (split, list) in [("train", &self.train), ("test", &self.test)] {
            for s in list {
                subjects.push(TruthSubject {
                    id: s.id.clone(),
                    split: split.into(),
                    z: s.z.iter().copied().collect(),
                    residual_energy: kernel.energy(&s.residual)?,
                });
            }
        }
        let record = TruthRecord {
            spec: self.spec.clone(),
            metric: *metric,
            steps,
            seed,
            subjects,
        };
        let path = truth.join("truth.json");
        let text = serde_json::to_string_pretty(&record).expect("truth serialises");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_are_smooth_and_peak_at_amplitude() {
        let lat = Lattice::new(&[16, 12]).unwrap();
        let w = analytic_modes(&lat, 4, 2.5).unwrap();
        for m in w.modes() {
            let peak = m.data().iter().fold(0f64, |a, b| a.max(b.abs()));
            assert!((peak - 2.5).abs() < 1e-12);
        }
        assert!(analytic_modes(&lat, 5, 1.0).is_err());
    }

    #[test]
    fn infinite_precision_gives_zero_residual() {
        let lat = Lattice::new(&[8, 8]).unwrap();
        let kern = build_kernel(&lat, &MetricParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = sample_residual(&kern, f64::INFINITY, &mut rng).unwrap();
        assert!(r.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn categorical_sampling_respects_certain_voxels() {
        let lat = Lattice::new(&[4, 4]).unwrap();
        let probs = Field::from_fn(&lat, 3, |c, o| o[(c[0] + c[1]) % 3] = 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = sample_categorical(&probs, &mut rng).unwrap();
        assert_eq!(img.field(), &probs);
    }
}
