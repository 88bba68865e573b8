//! TOML configuration.
//!
//! Every key is optional and unknown keys are rejected. A file containing
//! only the defaults looks like this:
//!
//! ```toml
//! modes = 32          # M, number of principal modes
//! gamma1 = 1.0
//! gamma2 = 1.0
//! lambda0 = 17.0
//! nu0 = 10.0
//! dirichlet_eps = 1e-3
//! steps = 8           # geodesic shooting time steps
//! iterations = 32     # outer training iterations
//! tolerance = 1e-6    # relative bound change that stops training
//! subject_rounds = 2  # alternating (z, r) rounds per subject and iteration
//! register_iterations = 16
//! seed = 0
//! residual_uncertainty = "diagonal"
//!
//! [metric]
//! absolute = 1e-4
//! membrane = 0.001
//! bending = 0.02
//! elastic = [0.0025, 0.005]
//!
//! [solver]
//! iterations = 1
//! max_backtracks = 6
//! cg_tolerance = 1e-6
//! cg_max_iterations = 64
//! strict_solver = false
//!
//! [synthetic]
//! dims = [32, 32]
//! classes = 2
//! true_modes = 2
//! n_train = 20
//! n_test = 20
//! lambda = 25.0
//! latent_precision = [1.0, 2.0]
//! mode_amplitude = 2.0
//! sharpness = 6.0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{MixtureWeights, ResidualUncertainty};
use crate::operator::MetricParams;
use crate::solver::GnOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// `M`.
    pub modes: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub lambda0: f64,
    pub nu0: f64,
    /// Log-Dirichlet pseudo-count per class and voxel.
    pub dirichlet_eps: f64,
    pub steps: usize,
    pub iterations: usize,
    pub tolerance: f64,
    pub subject_rounds: usize,
    /// Outer rounds of per-subject inference when registering new images.
    pub register_iterations: usize,
    pub seed: u64,
    pub residual_uncertainty: ResidualUncertainty,
    pub metric: MetricParams,
    pub solver: GnOptions,
    pub synthetic: SyntheticSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            modes: 32,
            gamma1: 1.0,
            gamma2: 1.0,
            lambda0: 17.0,
            nu0: 10.0,
            dirichlet_eps: 1e-3,
            steps: 8,
            iterations: 32,
            tolerance: 1e-6,
            subject_rounds: 2,
            register_iterations: 16,
            seed: 0,
            residual_uncertainty: ResidualUncertainty::Diagonal,
            metric: MetricParams::default(),
            solver: GnOptions::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

/// Ground truth for a synthetic population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub dims: Vec<usize>,
    /// `K`.
    pub classes: usize,
    /// Number of analytic ground-truth modes.
    pub true_modes: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Residual precision `λ` used to sample `r ~ N(0, (λL)⁻¹)`.
    pub lambda: f64,
    /// Diagonal of the latent precision `A`; `z ~ N(0, A⁻¹)`.
    pub latent_precision: Vec<f64>,
    /// Peak displacement in voxels of each mode at `z = 1`.
    pub mode_amplitude: f64,
    /// Peak log-odds of the base template.
    pub sharpness: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dims: vec![32, 32],
            classes: 2,
            true_modes: 2,
            n_train: 20,
            n_test: 20,
            lambda: 25.0,
            latent_precision: vec![1.0, 2.0],
            mode_amplitude: 2.0,
            sharpness: 6.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=3).contains(&self.dims.len()) {
            return bad(format!("synthetic dims must be 2D or 3D, got {:?}", self.dims));
        }
        if !(2..=3).contains(&self.classes) {
            return bad(format!("synthetic classes must be 2 or 3, got {}", self.classes));
        }
        if self.true_modes == 0 || self.true_modes > 2 * self.dims.len() {
            return bad(format!(
                "true_modes must be in 1..={}, got {}",
                2 * self.dims.len(),
                self.true_modes
            ));
        }
        if self.latent_precision.len() != self.true_modes {
            return bad(format!(
                "latent_precision needs {} entries, got {}",
                self.true_modes,
                self.latent_precision.len()
            ));
        }
        if self.latent_precision.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return bad("latent_precision entries must be positive".into());
        }
        if !(self.lambda > 0.0) {
            return bad(format!("synthetic lambda must be positive, got {}", self.lambda));
        }
        if !(self.mode_amplitude.is_finite() && self.sharpness.is_finite()) {
            return bad("synthetic amplitudes must be finite".into());
        }
        Ok(())
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn weights(&self) -> MixtureWeights {
        MixtureWeights {
            gamma1: self.gamma1,
            gamma2: self.gamma2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.modes == 0 {
            return bad("modes must be at least 1".into());
        }
        self.weights().validate()?;
        self.metric.validate()?;
        if !(self.lambda0 > 0.0 && self.nu0 > 0.0) {
            return bad(format!(
                "lambda0 and nu0 must be positive, got {} and {}",
                self.lambda0, self.nu0
            ));
        }
        if !(self.dirichlet_eps >= 0.0 && self.dirichlet_eps.is_finite()) {
            return bad(format!("dirichlet_eps out of range: {}", self.dirichlet_eps));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.tolerance >= 0.0) {
            return bad(format!("tolerance must be non-negative, got {}", self.tolerance));
        }
        if self.solver.cg_max_iterations == 0 {
            return bad("solver.cg_max_iterations must be at least 1".into());
        }
        self.synthetic.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = PipelineConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.modes, 32);
        assert_eq!((cfg.lambda0, cfg.nu0), (17.0, 10.0));
        assert_eq!(cfg.metric.elastic, (0.0025, 0.005));
    }

    #[test]
    fn round_trips_through_text() {
        let mut cfg = PipelineConfig::default();
        cfg.modes = 4;
        cfg.metric.bending = 0.125;
        cfg.residual_uncertainty = ResidualUncertainty::None;
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn documented_example_parses_to_defaults() {
        let doc = include_str!("config.rs");
        let block: String = doc
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .collect::<Vec<_>>()
            .join("\n");
        assert_eq!(PipelineConfig::from_toml_str(&block).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in ["modes = 4\nbogus = 1", "[metric]\nstiffness = 1.0", "modes = 0", "nu0 = -1.0"] {
            let err = PipelineConfig::from_toml_str(text).unwrap_err();
            assert_eq!(err.kind(), crate::ErrorKind::Config, "{text}");
        }
    }
}
