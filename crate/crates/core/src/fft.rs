//! Separable n-dimensional complex FFT over first-axis-fastest buffers.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub(crate) struct FftNd {
    dims: Vec<usize>,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
}

impl std::fmt::Debug for FftNd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftNd").field("dims", &self.dims).finish()
    }
}

impl FftNd {
    pub fn new(dims: &[usize]) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            dims: dims.to_vec(),
            forward: dims.iter().map(|&n| planner.plan_fft_forward(n)).collect(),
            inverse: dims.iter().map(|&n| planner.plan_fft_inverse(n)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    /// Unnormalised forward transform.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.forward);
    }

    /// Inverse transform including the `1/I` normalisation.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.inverse);
        let s = 1.0 / self.len() as f64;
        buf.iter_mut().for_each(|x| *x *= s);
    }

    fn run(&self, buf: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>]) {
        debug_assert_eq!(buf.len(), self.len());
        let total = self.len();
        let mut stride = 1;
        for (a, &n) in self.dims.iter().enumerate() {
            let plan = &plans[a];
            if stride == 1 {
                plan.process(buf);
            } else {
                let mut line = vec![Complex64::new(0.0, 0.0); n];
                let block = stride * n;
                for start in (0..total).step_by(block) {
                    for off in 0..stride {
                        let base = start + off;
                        for (k, l) in line.iter_mut().enumerate() {
                            *l = buf[base + k * stride];
                        }
                        plan.process(&mut line);
                        for (k, l) in line.iter().enumerate() {
                            buf[base + k * stride] = *l;
                        }
                    }
                }
            }
            stride *= n;
        }
    }
}
