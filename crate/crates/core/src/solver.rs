//! Iterative and line-search helpers shared by the Gauss-Newton updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::dot;

/// Knobs shared by every Gauss-Newton update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GnOptions {
    /// Gauss-Newton iterations per call.
    pub iterations: usize,
    /// Step halvings before a direction is abandoned.
    pub max_backtracks: usize,
    /// Relative residual at which conjugate gradients stop.
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
    /// Fail instead of using the partial solution when CG hits its cap.
    pub strict_solver: bool,
}

impl Default for GnOptions {
    fn default() -> Self {
        Self {
            iterations: 1,
            max_backtracks: 6,
            cg_tolerance: 1e-6,
            cg_max_iterations: 64,
            strict_solver: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    /// Final `‖b − Ax‖ / ‖b‖`.
    pub relative_residual: f64,
    pub converged: bool,
}

/// Preconditioned conjugate gradients for an SPD operator, starting at zero.
pub fn pcg(
    apply: impl Fn(&[f64]) -> Result<Vec<f64>>,
    precondition: impl Fn(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    tolerance: f64,
    max_iterations: usize,
) -> Result<(Vec<f64>, CgReport)> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        return Ok((
            x,
            CgReport {
                iterations: 0,
                relative_residual: 0.0,
                converged: true,
            },
        ));
    }
    let mut r = b.to_vec();
    let mut z = precondition(&r)?;
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut rel = 1.0;
    for it in 0..max_iterations {
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            if pap.is_finite() && it > 0 {
                break;
            }
            return Err(Error::SingularSystem("conjugate gradients"));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = dot(&r, &r).sqrt() / bnorm;
        if rel <= tolerance {
            return Ok((
                x,
                CgReport {
                    iterations: it + 1,
                    relative_residual: rel,
                    converged: true,
                },
            ));
        }
        z = precondition(&r)?;
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok((
        x,
        CgReport {
            iterations: max_iterations,
            relative_residual: rel,
            converged: false,
        },
    ))
}

/// Outcome of a backtracking search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSearch {
    /// Accepted step length; zero when no trial improved the objective.
    pub step: f64,
    pub value: f64,
}

/// Halving line search along a fixed direction: tries `1, ½, ¼, …` and accepts
/// the first step that strictly decreases the objective.
///
/// `eval(step)` returns `Ok(None)` for trial points that are infeasible (for
/// instance a shooting blow-up); those count as rejections.
pub fn backtrack<T>(
    current: f64,
    max_backtracks: usize,
    mut eval: impl FnMut(f64) -> Result<Option<(f64, T)>>,
) -> Result<(LineSearch, Option<T>)> {
    let mut step = 1.0;
    for _ in 0..=max_backtracks {
        if let Some((value, payload)) = eval(step)? {
            if value < current {
                return Ok((LineSearch { step, value }, Some(payload)));
            }
        }
        step *= 0.5;
    }
    Ok((
        LineSearch {
            step: 0.0,
            value: current,
        },
        None,
    ))
}

/// Symmetric 2D/3D (or K×K) solve `H x = b` by Cholesky, falling back to an
/// eigenvalue-floored solve for semidefinite blocks.
pub(crate) fn solve_spd_block(h: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let m = nalgebra::DMatrix::from_row_slice(n, n, h);
    let rhs = nalgebra::DVector::from_column_slice(b);
    if let Some(ch) = m.clone().cholesky() {
        return ch.solve(&rhs).iter().copied().collect();
    }
    let eig = m.symmetric_eigen();
    let floor = eig.eigenvalues.amax().max(1e-300) * 1e-12;
    let mut out = nalgebra::DVector::zeros(n);
    for k in 0..n {
        let lam = eig.eigenvalues[k];
        if lam > floor {
            let col = eig.eigenvectors.column(k);
            out += col * (col.dot(&rhs) / lam);
        }
    }
    out.iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcg_solves_small_spd_system() {
        let a = [[4.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 2.0]];
        let apply = |x: &[f64]| -> Result<Vec<f64>> {
            Ok((0..3).map(|i| (0..3).map(|j| a[i][j] * x[j]).sum()).collect())
        };
        let b = [1.0, 2.0, 3.0];
        let (x, rep) = pcg(apply, |r: &[f64]| Ok(r.to_vec()), &b, 1e-12, 10).unwrap();
        assert!(rep.converged);
        let ax = apply(&x).unwrap();
        for i in 0..3 {
            assert!((ax[i] - b[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn exact_preconditioner_converges_in_one_step() {
        let apply = |x: &[f64]| -> Result<Vec<f64>> { Ok(x.iter().map(|v| 5.0 * v).collect()) };
        let pre = |r: &[f64]| -> Result<Vec<f64>> { Ok(r.iter().map(|v| v / 5.0).collect()) };
        let (x, rep) = pcg(apply, pre, &[1.0, -2.0], 1e-12, 10).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!((x[0] - 0.2).abs() < 1e-15 && (x[1] + 0.4).abs() < 1e-15);
    }

    #[test]
    fn backtracking_halves_until_decrease() {
        let f = |s: f64| (s - 0.2) * (s - 0.2);
        let (ls, payload) = backtrack(f(0.0), 6, |s| Ok(Some((f(s), s)))).unwrap();
        assert_eq!(ls.step, 0.25);
        assert_eq!(payload, Some(0.25));
        let (ls, payload) = backtrack(0.0, 3, |s| Ok(Some((s, ())))).unwrap();
        assert_eq!(ls.step, 0.0);
        assert!(payload.is_none());
    }

    #[test]
    fn semidefinite_block_solve_is_least_norm() {
        // Softmax-style Hessian with the all-ones null space.
        let h = [0.25, -0.25, -0.25, 0.25];
        let x = solve_spd_block(&h, &[0.5, -0.5], 2);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] + 1.0).abs() < 1e-12);
    }
}
