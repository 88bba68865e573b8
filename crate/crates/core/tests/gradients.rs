//! Analytic data-term gradients against central finite differences.

mod support;

use support::grad_checks::{cases, latent_residual_errors, subspace_error, velocity_errors};

#[test]
fn velocity_gradient_matches_finite_differences() {
    for (k, m) in cases() {
        let (e, reference) = velocity_errors(k, m);
        assert!(e < 1e-4, "K={k} M={m}: velocity gradient error {e:e}");
        assert!(reference < 1e-12, "K={k} M={m}: reference gradient mismatch {reference:e}");
    }
}

#[test]
fn latent_and_residual_gradients_match_finite_differences() {
    for (k, m) in cases() {
        let (ez, er) = latent_residual_errors(k, m);
        assert!(ez < 1e-4, "K={k} M={m}: latent gradient error {ez:e}");
        assert!(er < 1e-4, "K={k} M={m}: residual gradient error {er:e}");
    }
}

#[test]
fn subspace_gradient_matches_finite_differences() {
    for (k, m) in cases() {
        let e = subspace_error(k, m);
        assert!(e < 1e-4, "K={k} M={m}: subspace gradient error {e:e}");
    }
}
