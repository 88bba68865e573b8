//! Multilinear resampling on a periodic lattice.
//!
//! [`pull`] applies the sparse sample-and-interpolate operator `Φ` defined by
//! a deformation, [`push`] applies its exact transpose `Φᵀ`. Boundaries wrap
//! around on every axis, so every sample point has a full set of `2^d`
//! neighbours and the two operators are adjoint to rounding error.
//! Dirichlet or Neumann boundaries are not supported.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fft::FftNd;
use crate::field::{Field, Lattice, VectorField};
use crate::shooting::Deformation;

/// Interpolation stencil of a single sample point: up to eight
/// `(voxel index, weight)` pairs, zero weights dropped.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub n: usize,
}

impl Stencil {
    #[inline]
    pub fn at(lattice: &Lattice, p: &[f64]) -> Self {
        let d = lattice.ndim();
        let dims = lattice.dims();
        let mut lo = [0i64; 3];
        let mut t = [0.0; 3];
        for a in 0..d {
            let f = p[a].floor();
            lo[a] = f as i64;
            t[a] = p[a] - f;
        }
        let mut st = Stencil {
            idx: [0; 8],
            w: [0.0; 8],
            n: 0,
        };
        'corner: for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0usize;
            let mut stride = 1usize;
            for a in 0..d {
                let hi = (corner >> a) & 1 == 1;
                let wa = if hi { t[a] } else { 1.0 - t[a] };
                if wa == 0.0 {
                    continue 'corner;
                }
                w *= wa;
                let n = dims[a] as i64;
                idx += (lo[a] + hi as i64).rem_euclid(n) as usize * stride;
                stride *= dims[a];
            }
            st.idx[st.n] = idx;
            st.w[st.n] = w;
            st.n += 1;
        }
        st
    }
}

fn check(src: &Field, phi: &Deformation) -> Result<()> {
    let lat = src.lattice();
    if lat.ndim() != phi.lattice().ndim() {
        return Err(Error::LatticeMismatch(format!(
            "field is {}D, deformation is {}D",
            lat.ndim(),
            phi.lattice().ndim()
        )));
    }
    lat.ensure_same(phi.lattice(), "pull/push")
}

/// Samples `src` at every coordinate of `phi` (`Φ · src`).
pub fn pull(src: &Field, phi: &Deformation) -> Result<Field> {
    check(src, phi)?;
    Ok(pull_map(src, phi.map()))
}

/// Samples `src` at the absolute voxel coordinates stored in `map`.
pub(crate) fn pull_map(src: &Field, map: &VectorField) -> Field {
    let lat = src.lattice();
    let d = lat.ndim();
    let c = src.channels();
    let mut out = Field::zeros(lat, c);
    let s = src.data();
    let m = map.data();
    out.data_mut()
        .par_chunks_mut(c)
        .enumerate()
        .for_each(|(i, o)| {
            let st = Stencil::at(lat, &m[i * d..(i + 1) * d]);
            for k in 0..st.n {
                let base = st.idx[k] * c;
                let w = st.w[k];
                for (ch, ov) in o.iter_mut().enumerate() {
                    *ov += w * s[base + ch];
                }
            }
        });
    out
}

/// Keys cubic convolution weights (`a = −½`) for the taps at offsets
/// `−1, 0, 1, 2` from the floor of the sample point.
#[inline]
fn cubic_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    ]
}

/// Cubic B-spline basis weights for the taps at offsets `−1, 0, 1, 2`.
#[inline]
fn bspline_weights(t: f64) -> [f64; 4] {
    let u = 1.0 - t;
    let t2 = t * t;
    let t3 = t2 * t;
    [
        u * u * u / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Flat offsets and weights of the `4ᵈ` taps around `p`, one row per axis.
#[inline]
fn taps(dims: &[usize], p: &[f64], weights: fn(f64) -> [f64; 4]) -> ([[usize; 4]; 3], [[f64; 4]; 3]) {
    let mut idx = [[0usize; 4]; 3];
    let mut w = [[0.0; 4]; 3];
    let mut stride = 1usize;
    for (a, &n) in dims.iter().enumerate() {
        let f = p[a].floor();
        w[a] = weights(p[a] - f);
        let base = (f as i64 - 1).rem_euclid(n as i64) as usize;
        for k in 0..4 {
            let j = base + k;
            idx[a][k] = if j >= n { j - n } else { j } * stride;
        }
        stride *= n;
    }
    if dims.len() == 2 {
        idx[2] = [0; 4];
        w[2] = [1.0, 0.0, 0.0, 0.0];
    }
    (idx, w)
}

/// Calls `f(flat_index, weight)` for every tap with a non-zero weight.
#[inline]
fn for_taps(idx: &[[usize; 4]; 3], w: &[[f64; 4]; 3], mut f: impl FnMut(usize, f64)) {
    for k2 in 0..4 {
        if w[2][k2] == 0.0 {
            continue;
        }
        for k1 in 0..4 {
            let w21 = w[2][k2] * w[1][k1];
            if w21 == 0.0 {
                continue;
            }
            let i21 = idx[2][k2] + idx[1][k1];
            for k0 in 0..4 {
                let wt = w21 * w[0][k0];
                if wt != 0.0 {
                    f(i21 + idx[0][k0], wt);
                }
            }
        }
    }
}

fn pull_4tap(src: &Field, map: &VectorField, weights: fn(f64) -> [f64; 4]) -> Field {
    let lat = src.lattice();
    let d = lat.ndim();
    let dims = lat.dims();
    let c = src.channels();
    let mut out = Field::zeros(lat, c);
    let s = src.data();
    let m = map.data();
    out.data_mut()
        .par_chunks_mut(c)
        .enumerate()
        .for_each(|(i, o)| {
            let (idx, w) = taps(dims, &m[i * d..(i + 1) * d], weights);
            for_taps(&idx, &w, |j, wt| {
                let base = j * c;
                for (ch, ov) in o.iter_mut().enumerate() {
                    *ov += wt * s[base + ch];
                }
            });
        });
    out
}

/// Adjoint of [`pull_4tap`]: scatters each voxel of `src` onto the taps
/// around `map(x)`. Serial so the summation order is fixed.
fn push_4tap(src: &Field, map: &VectorField, weights: fn(f64) -> [f64; 4]) -> Field {
    let lat = src.lattice();
    let d = lat.ndim();
    let dims = lat.dims();
    let c = src.channels();
    let mut out = Field::zeros(lat, c);
    let s = src.data();
    let m = map.data();
    let o = out.data_mut();
    for i in 0..lat.len() {
        let (idx, w) = taps(dims, &m[i * d..(i + 1) * d], weights);
        let sv = &s[i * c..(i + 1) * c];
        for_taps(&idx, &w, |j, wt| {
            let base = j * c;
            for ch in 0..c {
                o[base + ch] += wt * sv[ch];
            }
        });
    }
    out
}

/// Cubic-convolution resampling at absolute voxel coordinates.
///
/// Third-order accurate and exact at lattice points, but not paired with an
/// adjoint; shooting uses it to compose maps.
pub(crate) fn pull_cubic_map(src: &Field, map: &VectorField) -> Field {
    pull_4tap(src, map, cubic_weights)
}

/// Interpolating cubic B-spline coefficients of a periodic field, computed
/// by dividing out the sampled basis in Fourier space.
pub(crate) fn spline_coefficients(src: &Field) -> Field {
    let lat = src.lattice();
    let d = lat.ndim();
    let c = src.channels();
    let n = lat.len();
    let fft = FftNd::new(lat.dims());
    let dims = lat.dims();
    let filter: Vec<f64> = (0..n)
        .map(|k| {
            let kc = lat.coords(k);
            (0..d)
                .map(|a| {
                    let th = std::f64::consts::TAU * kc[a] as f64 / dims[a] as f64;
                    (4.0 + 2.0 * th.cos()) / 6.0
                })
                .product()
        })
        .collect();
    let mut out = Field::zeros(lat, c);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for ch in 0..c {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(src.data()[i * c + ch], 0.0);
        }
        fft.forward(&mut buf);
        buf.iter_mut().zip(&filter).for_each(|(b, f)| *b /= f);
        fft.inverse(&mut buf);
        for (i, b) in buf.iter().enumerate() {
            out.data_mut()[i * c + ch] = b.re;
        }
    }
    out
}

/// Adjoint of spline interpolation at `map`, i.e. of
/// `pull_spline_map(spline_coefficients(·), map)`.
pub(crate) fn push_spline_map(src: &Field, map: &VectorField) -> Field {
    spline_coefficients(&push_4tap(src, map, bspline_weights))
}

/// Scatters `src` back through `phi` (`Φᵀ · src`), the exact adjoint of [`pull`].
pub fn push(src: &Field, phi: &Deformation) -> Result<Field> {
    check(src, phi)?;
    Ok(push_map(src, phi.map()))
}

pub(crate) fn push_map(src: &Field, map: &VectorField) -> Field {
    let lat = src.lattice();
    let d = lat.ndim();
    let c = src.channels();
    let mut out = Field::zeros(lat, c);
    let s = src.data();
    let m = map.data();
    let o = out.data_mut();
    // Serial scatter keeps the summation order fixed.
    for i in 0..lat.len() {
        let st = Stencil::at(lat, &m[i * d..(i + 1) * d]);
        let sv = &s[i * c..(i + 1) * c];
        for k in 0..st.n {
            let base = st.idx[k] * c;
            let w = st.w[k];
            for ch in 0..c {
                o[base + ch] += w * sv[ch];
            }
        }
    }
    out
}

/// Central-difference spatial gradient in voxel units with wrap-around.
///
/// For a field with `c` channels the result has `c * d` channels, the
/// derivative of channel `ch` along axis `a` stored at `ch * d + a`.
pub fn spatial_gradient(src: &Field) -> VectorField {
    let lat = src.lattice();
    let d = lat.ndim();
    let c = src.channels();
    let dims = lat.dims();
    let strides = lat.strides();
    let mut out = Field::zeros(lat, c * d);
    let s = src.data();
    out.data_mut()
        .par_chunks_mut(c * d)
        .enumerate()
        .for_each(|(i, o)| {
            let coord = lat.coords(i);
            for a in 0..d {
                let n = dims[a];
                let x = coord[a];
                let fwd = if x + 1 == n { i + strides[a] - n * strides[a] } else { i + strides[a] };
                let bwd = if x == 0 { i + (n - 1) * strides[a] } else { i - strides[a] };
                for ch in 0..c {
                    o[ch * d + a] = 0.5 * (s[fwd * c + ch] - s[bwd * c + ch]);
                }
            }
        });
    out
}

/// Fourth-order central differences, same layout as [`spatial_gradient`].
pub(crate) fn spatial_gradient4(src: &Field) -> VectorField {
    let lat = src.lattice();
    let d = lat.ndim();
    let c = src.channels();
    let mut out = Field::zeros(lat, c * d);
    let s = src.data();
    out.data_mut()
        .par_chunks_mut(c * d)
        .enumerate()
        .for_each(|(i, o)| {
            let coord = lat.coords(i);
            for a in 0..d {
                let at = |off: i64| {
                    let mut p = [coord[0] as i64, coord[1] as i64, coord[2] as i64];
                    p[a] += off;
                    lat.index_wrapped(p) * c
                };
                let (m2, m1, p1, p2) = (at(-2), at(-1), at(1), at(2));
                for ch in 0..c {
                    o[ch * d + a] = (8.0 * (s[p1 + ch] - s[m1 + ch]) - (s[p2 + ch] - s[m2 + ch]))
                        / 12.0;
                }
            }
        });
    out
}
