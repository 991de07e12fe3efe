//! Finite-difference gradient checking, used by the test suites.
//!
//! Checks run in `f64`: central differences with step `h` give truncation
//! error `O(h²)`, so with `h = 1e-4` agreement to `1e-4` relative error is
//! expected wherever the function is smooth.

use super::{rel_err, Tensor};

/// Central-difference derivative of `f` w.r.t. coordinate `i` of `param`.
pub fn fd_partial(param: &Tensor<f64>, i: usize, h: f64, f: &dyn Fn() -> Tensor<f64>) -> f64 {
    let orig = param.to_vec()[i];
    param.update_data(|d| d[i] = orig + h);
    let fp = f().item();
    param.update_data(|d| d[i] = orig - h);
    let fm = f().item();
    param.update_data(|d| d[i] = orig);
    (fp - fm) / (2.0 * h)
}

/// Analytic gradients of the scalar `f()` w.r.t. every param, via backward.
pub fn analytic_grads(params: &[Tensor<f64>], f: &dyn Fn() -> Tensor<f64>) -> Vec<Vec<f64>> {
    for p in params {
        p.zero_grad();
    }
    let loss = f();
    loss.backward().expect("backward on scalar loss");
    params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect()
}

/// Compare analytic and finite-difference gradients over at most
/// `max_coords` evenly spaced coordinates per parameter. Returns the worst
/// relative error observed.
pub fn max_grad_rel_err(
    params: &[Tensor<f64>],
    f: &dyn Fn() -> Tensor<f64>,
    h: f64,
    max_coords: usize,
) -> f64 {
    let analytic = analytic_grads(params, f);
    let mut worst = 0.0f64;
    for (p, ga) in params.iter().zip(&analytic) {
        let n = p.numel();
        let step = n.div_ceil(max_coords).max(1);
        for i in (0..n).step_by(step) {
            let fd = fd_partial(p, i, h, f);
            worst = worst.max(rel_err(ga[i], fd));
        }
    }
    worst
}
