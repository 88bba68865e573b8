//! The metric operator `L` and its Green's function `K = L⁻¹`.
//!
//! `L` is the sum of an absolute (zeroth-order) penalty, membrane energy
//! (vector Laplacian), bending energy (biharmonic) and linear elasticity, all
//! discretised with forward differences `Dₐ` on the periodic lattice:
//!
//! ```text
//! ½ vᵀLv = ½ abs ‖v‖² + ½ mem Σₐ‖Dₐv‖² + ½ ben ‖Δv‖²
//!        + μ Σᵢⱼ ‖(Dᵢvⱼ + Dⱼvᵢ)/2‖² + ½ λ ‖div v‖²
//! ```
//!
//! With `dₐ(θ) = (e^{iθₐ} − 1)/hₐ` and `s = Σₐ|dₐ|²`, the per-frequency symbol is
//! `(abs + mem·s + ben·s² + μ·s) I + (μ + λ) d̄ dᵀ`, so both `L` and `K`
//! are applied exactly with FFTs. The shear cross term `Σ (Dᵢvⱼ)(Dⱼvᵢ)` is
//! summed by parts into `‖div v‖²`, which keeps the stencil mirror-symmetric.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::FftNd;
use crate::field::{Field, Lattice, VectorField};

/// Weights of the regularisation energies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricParams {
    /// Zeroth-order penalty making `L` invertible.
    pub absolute: f64,
    pub membrane: f64,
    pub bending: f64,
    /// Linear-elastic weights `(μ, λ)`: μ scales the symmetrised-gradient
    /// (shear) term, λ the divergence term.
    pub elastic: (f64, f64),
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            absolute: 1e-4,
            membrane: 0.001,
            bending: 0.02,
            elastic: (0.0025, 0.005),
        }
    }
}

impl MetricParams {
    pub fn validate(&self) -> Result<()> {
        let w = [
            self.absolute,
            self.membrane,
            self.bending,
            self.elastic.0,
            self.elastic.1,
        ];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidMetric(
                "weights must be finite and non-negative".into(),
            ));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(Error::InvalidMetric(
                "all weights are zero, the operator is identically singular".into(),
            ));
        }
        Ok(())
    }
}

/// Frequency-domain representation of `L` (and `K` when it exists).
#[derive(Clone, Debug)]
pub struct SpectralKernel {
    lattice: Lattice,
    params: MetricParams,
    fft: FftNd,
    /// `I` row-major `d×d` blocks of `L̂`.
    symbol: Vec<Complex64>,
    /// `I` blocks of `L̂⁻¹` (pseudo-inverse on singular frequencies).
    inverse: Vec<Complex64>,
    invertible: bool,
}

/// Forward-difference symbols `dₐ(θ)` at linear frequency index `k`.
fn difference_symbols(lattice: &Lattice, k: usize) -> [Complex64; 3] {
    let c = lattice.coords(k);
    let mut d = [Complex64::new(0.0, 0.0); 3];
    for a in 0..lattice.ndim() {
        let theta = std::f64::consts::TAU * c[a] as f64 / lattice.dims()[a] as f64;
        let h = lattice.voxel_size()[a];
        d[a] = (Complex64::from_polar(1.0, theta) - 1.0) / h;
    }
    d
}

/// Builds the spectral representation of `L` on `lattice`.
pub fn build_kernel(lattice: &Lattice, params: &MetricParams) -> Result<SpectralKernel> {
    params.validate()?;
    let dim = lattice.ndim();
    let n = lattice.len();
    let (mu, lam) = params.elastic;
    let mut symbol = vec![Complex64::new(0.0, 0.0); n * dim * dim];
    let mut inverse = vec![Complex64::new(0.0, 0.0); n * dim * dim];
    let mut invertible = true;
    for k in 0..n {
        let d = difference_symbols(lattice, k);
        let s: f64 = d[..dim].iter().map(|x| x.norm_sqr()).sum();
        let diag = params.absolute + params.membrane * s + params.bending * s * s + mu * s;
        let block = &mut symbol[k * dim * dim..(k + 1) * dim * dim];
        for a in 0..dim {
            for b in 0..dim {
                let mut v = (mu + lam) * d[a].conj() * d[b];
                if a == b {
                    v += diag;
                }
                block[a * dim + b] = v;
            }
        }
        let m = DMatrix::from_row_slice(dim, dim, block);
        let inv = match m.clone().try_inverse() {
            Some(inv) if m.determinant().norm() > 1e-300 => inv,
            _ => {
                invertible = false;
                m.pseudo_inverse(1e-12).map_err(|e| {
                    Error::InvalidMetric(format!("pseudo-inverse failed: {e}"))
                })?
            }
        };
        for a in 0..dim {
            for b in 0..dim {
                inverse[k * dim * dim + a * dim + b] = inv[(a, b)];
            }
        }
    }
    Ok(SpectralKernel {
        lattice: lattice.clone(),
        params: *params,
        fft: FftNd::new(lattice.dims()),
        symbol,
        inverse,
        invertible,
    })
}

impl SpectralKernel {
    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn params(&self) -> &MetricParams {
        &self.params
    }

    pub fn is_invertible(&self) -> bool {
        self.invertible
    }

    /// `d×d` symbol block at linear frequency index `k` (row-major).
    pub fn symbol_block(&self, k: usize) -> &[Complex64] {
        let dd = self.lattice.ndim().pow(2);
        &self.symbol[k * dd..(k + 1) * dd]
    }

    /// Momentum `u = L v`.
    pub fn apply_l(&self, v: &VectorField) -> Result<VectorField> {
        self.check(v)?;
        Ok(self.apply_blocks(v, &self.symbol))
    }

    /// Velocity `v = K u`.
    pub fn apply_k(&self, u: &VectorField) -> Result<VectorField> {
        self.check(u)?;
        if !self.invertible {
            return Err(Error::InvalidMetric(
                "operator is singular (absolute weight is zero); K does not exist".into(),
            ));
        }
        Ok(self.apply_blocks(u, &self.inverse))
    }

    /// `vᵀ L v`.
    pub fn energy(&self, v: &VectorField) -> Result<f64> {
        Ok(self.apply_l(v)?.dot(v))
    }

    /// Real `d×d` diagonal block `L_ii` shared by every voxel (row-major).
    pub fn diagonal_block(&self) -> Vec<f64> {
        let dd = self.lattice.ndim().pow(2);
        let n = self.lattice.len() as f64;
        let mut out = vec![0.0; dd];
        for blk in self.symbol.chunks(dd) {
            for (o, x) in out.iter_mut().zip(blk) {
                *o += x.re;
            }
        }
        out.iter_mut().for_each(|x| *x /= n);
        out
    }

    /// `ln det L` summed over all frequencies.
    pub fn log_det(&self) -> f64 {
        let dim = self.lattice.ndim();
        self.symbol
            .chunks(dim * dim)
            .map(|blk| DMatrix::from_row_slice(dim, dim, blk).determinant().re.ln())
            .sum()
    }

    /// All `d·I` eigenvalues of `L`, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let dim = self.lattice.ndim();
        let mut ev: Vec<f64> = self
            .symbol
            .chunks(dim * dim)
            .flat_map(|blk| {
                let m = DMatrix::from_row_slice(dim, dim, blk);
                let m = (m.clone() + m.adjoint()) * Complex64::new(0.5, 0.0);
                m.symmetric_eigenvalues().iter().copied().collect::<Vec<f64>>()
            })
            .collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Colours white noise so the result has covariance `L⁻¹`.
    pub fn colour_noise(&self, white: &VectorField) -> Result<VectorField> {
        self.check(white)?;
        let dim = self.lattice.ndim();
        let mut factors = Vec::with_capacity(self.symbol.len());
        for blk in self.symbol.chunks(dim * dim) {
            let m = DMatrix::from_row_slice(dim, dim, blk);
            let m = (m.clone() + m.adjoint()) * Complex64::new(0.5, 0.0);
            let chol = m.cholesky().ok_or_else(|| {
                Error::InvalidMetric("operator not positive definite; cannot sample".into())
            })?;
            // With L̂ = C Cᴴ, C⁻ᴴ ξ has covariance L̂⁻¹.
            let f = chol
                .l()
                .adjoint()
                .try_inverse()
                .ok_or(Error::SingularSystem("noise colouring"))?;
            for a in 0..dim {
                for b in 0..dim {
                    factors.push(f[(a, b)]);
                }
            }
        }
        Ok(self.apply_blocks(white, &factors))
    }

    fn check(&self, v: &Field) -> Result<()> {
        self.lattice.ensure_same(v.lattice(), "spectral operator")?;
        if v.channels() != self.lattice.ndim() {
            return Err(Error::ChannelMismatch {
                expected: self.lattice.ndim(),
                found: v.channels(),
            });
        }
        Ok(())
    }

    fn apply_blocks(&self, v: &VectorField, blocks: &[Complex64]) -> VectorField {
        let dim = self.lattice.ndim();
        let n = self.lattice.len();
        let mut spec: Vec<Vec<Complex64>> = (0..dim)
            .map(|a| {
                let mut buf: Vec<Complex64> = (0..n)
                    .map(|i| Complex64::new(v.data()[i * dim + a], 0.0))
                    .collect();
                self.fft.forward(&mut buf);
                buf
            })
            .collect();
        let mut tmp = [Complex64::new(0.0, 0.0); 3];
        for k in 0..n {
            let blk = &blocks[k * dim * dim..(k + 1) * dim * dim];
            for a in 0..dim {
                tmp[a] = (0..dim).map(|b| blk[a * dim + b] * spec[b][k]).sum();
            }
            for a in 0..dim {
                spec[a][k] = tmp[a];
            }
        }
        let mut out = Field::zeros(&self.lattice, dim);
        for (a, buf) in spec.iter_mut().enumerate() {
            self.fft.inverse(buf);
            for i in 0..n {
                out.data_mut()[i * dim + a] = buf[i].re;
            }
        }
        out
    }
}
