//! Dense fields on a regular periodic lattice.
//!
//! Every field stores its samples voxel-major with channels innermost:
//! the value of channel `c` at linear voxel index `i` lives at
//! `data[i * channels + c]`. Voxels are linearised with the first axis
//! varying fastest, `i = x0 + n0 * (x1 + n1 * x2)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extent and spacing of a 2D or 3D voxel grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    dims: Vec<usize>,
    voxel_size: Vec<f64>,
}

impl Lattice {
    pub fn new(dims: &[usize]) -> Result<Self> {
        Self::with_voxel_size(dims, &vec![1.0; dims.len()])
    }

    pub fn with_voxel_size(dims: &[usize], voxel_size: &[f64]) -> Result<Self> {
        if dims.len() != 2 && dims.len() != 3 {
            return Err(Error::InvalidLattice(format!(
                "expected 2 or 3 axes, got {}",
                dims.len()
            )));
        }
        if voxel_size.len() != dims.len() {
            return Err(Error::InvalidLattice(
                "voxel_size length differs from dims".into(),
            ));
        }
        if let Some(n) = dims.iter().find(|&&n| n < 4) {
            return Err(Error::InvalidLattice(format!(
                "every axis needs at least 4 voxels, got {n}"
            )));
        }
        if voxel_size.iter().any(|&h| !(h.is_finite() && h > 0.0)) {
            return Err(Error::InvalidLattice(
                "voxel sizes must be positive and finite".into(),
            ));
        }
        Ok(Self {
            dims: dims.to_vec(),
            voxel_size: voxel_size.to_vec(),
        })
    }

    #[inline]
    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    #[inline]
    pub fn voxel_size(&self) -> &[f64] {
        &self.voxel_size
    }

    /// Number of voxels `I`.
    #[inline]
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Multi-index of linear voxel `i`, padded to three axes.
    #[inline]
    pub fn coords(&self, mut i: usize) -> [usize; 3] {
        let mut out = [0; 3];
        for (a, &n) in self.dims.iter().enumerate() {
            out[a] = i % n;
            i /= n;
        }
        out
    }

    /// Linear index of a (wrapped) multi-index.
    #[inline]
    pub fn index_wrapped(&self, c: [i64; 3]) -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for (a, &n) in self.dims.iter().enumerate() {
            idx += c[a].rem_euclid(n as i64) as usize * stride;
            stride *= n;
        }
        idx
    }

    /// Linear stride of each axis.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.ndim());
        let mut acc = 1;
        for &n in &self.dims {
            s.push(acc);
            acc *= n;
        }
        s
    }

    pub(crate) fn ensure_same(&self, other: &Lattice, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::LatticeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// A multi-channel field on a [`Lattice`].
///
/// Scalar fields have one channel, vector fields `d`, tensor fields `d * d`
/// (full, symmetric storage) and categorical/log-template fields `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    lattice: Lattice,
    channels: usize,
    data: Vec<f64>,
}

pub type ScalarField = Field;
pub type VectorField = Field;
pub type TensorField = Field;

impl Field {
    pub fn zeros(lattice: &Lattice, channels: usize) -> Self {
        Self {
            lattice: lattice.clone(),
            channels,
            data: vec![0.0; lattice.len() * channels],
        }
    }

    pub fn constant(lattice: &Lattice, channels: usize, value: f64) -> Self {
        Self {
            lattice: lattice.clone(),
            channels,
            data: vec![value; lattice.len() * channels],
        }
    }

    pub fn from_vec(lattice: &Lattice, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Data("field must have at least one channel".into()));
        }
        if data.len() != lattice.len() * channels {
            return Err(Error::Data(format!(
                "field data has {} values, expected {}",
                data.len(),
                lattice.len() * channels
            )));
        }
        Ok(Self {
            lattice: lattice.clone(),
            channels,
            data,
        })
    }

    /// Builds a field by evaluating `f(voxel_coords, out)` at every voxel.
    pub fn from_fn(
        lattice: &Lattice,
        channels: usize,
        mut f: impl FnMut([usize; 3], &mut [f64]),
    ) -> Self {
        let mut out = Self::zeros(lattice, channels);
        for i in 0..lattice.len() {
            let c = lattice.coords(i);
            f(c, &mut out.data[i * channels..(i + 1) * channels]);
        }
        out
    }

    #[inline]
    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn voxel(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    #[inline]
    pub fn voxel_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn dot(&self, other: &Field) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn scaled(&self, s: f64) -> Field {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Field) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += s * y;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn ensure_like(&self, other: &Field, what: &str) -> Result<()> {
        self.lattice.ensure_same(&other.lattice, what)?;
        if self.channels != other.channels {
            return Err(Error::ChannelMismatch {
                expected: self.channels,
                found: other.channels,
            });
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-voxel class responsibilities `f` (sub-stochastic: sum ≤ 1, all-zero
/// voxels are missing data).
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalImage {
    field: Field,
}

impl CategoricalImage {
    pub fn new(field: Field) -> Result<Self> {
        if field.channels() < 2 {
            return Err(Error::Data("categorical images need K >= 2 classes".into()));
        }
        for i in 0..field.lattice().len() {
            let v = field.voxel(i);
            if v.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(Error::Data(format!(
                    "negative or non-finite responsibility at voxel {i}"
                )));
            }
            let s: f64 = v.iter().sum();
            if s > 1.0 + 1e-6 {
                return Err(Error::Data(format!(
                    "responsibilities at voxel {i} sum to {s} > 1"
                )));
            }
        }
        Ok(Self { field })
    }

    /// Hard labels in `0..k`; `None` marks missing voxels.
    pub fn from_labels(lattice: &Lattice, k: usize, labels: &[Option<usize>]) -> Result<Self> {
        if labels.len() != lattice.len() {
            return Err(Error::Data("label count differs from voxel count".into()));
        }
        let mut field = Field::zeros(lattice, k);
        for (i, l) in labels.iter().enumerate() {
            if let Some(l) = *l {
                if l >= k {
                    return Err(Error::Data(format!("label {l} out of range for K={k}")));
                }
                field.voxel_mut(i)[l] = 1.0;
            }
        }
        Ok(Self { field })
    }

    #[inline]
    pub fn classes(&self) -> usize {
        self.field.channels()
    }

    #[inline]
    pub fn lattice(&self) -> &Lattice {
        self.field.lattice()
    }

    #[inline]
    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn into_field(self) -> Field {
        self.field
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_rejects_small_or_wrong_rank() {
        assert!(Lattice::new(&[3, 8]).is_err());
        assert!(Lattice::new(&[8]).is_err());
        assert!(Lattice::new(&[8, 8, 8, 8]).is_err());
        assert!(Lattice::with_voxel_size(&[8, 8], &[1.0, 0.0]).is_err());
        assert_eq!(Lattice::new(&[4, 5, 6]).unwrap().len(), 120);
    }

    #[test]
    fn coords_round_trip() {
        let lat = Lattice::new(&[5, 6, 7]).unwrap();
        for i in 0..lat.len() {
            let c = lat.coords(i);
            assert_eq!(lat.index_wrapped([c[0] as i64, c[1] as i64, c[2] as i64]), i);
        }
        assert_eq!(lat.index_wrapped([-1, 0, 0]), 4);
        assert_eq!(lat.index_wrapped([0, 6, 0]), 0);
    }

    #[test]
    fn categorical_validation() {
        let lat = Lattice::new(&[4, 4]).unwrap();
        let mut f = Field::zeros(&lat, 2);
        f.voxel_mut(0)[0] = 0.7;
        f.voxel_mut(0)[1] = 0.3;
        assert!(CategoricalImage::new(f.clone()).is_ok());
        f.voxel_mut(1)[0] = 0.9;
        f.voxel_mut(1)[1] = 0.2;
        assert!(CategoricalImage::new(f.clone()).is_err());
        f.voxel_mut(1)[1] = -0.1;
        assert!(CategoricalImage::new(f).is_err());
        assert!(CategoricalImage::new(Field::zeros(&lat, 1)).is_err());
    }
}
