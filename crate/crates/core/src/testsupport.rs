//! Independent oracles shared by the test suites.
//!
//! Everything here deliberately avoids the reverse-mode machinery it is used
//! to check: gradients come from central finite differences on re-evaluated
//! forward passes only.

use crate::params::ParamStore;
use ndarray::Array2;

/// Central finite-difference gradient of `f` with respect to each named
/// parameter, perturbing one scalar entry at a time.
pub fn fd_gradient<F>(
    store: &mut ParamStore,
    names: &[String],
    step: f64,
    mut f: F,
) -> Vec<Array2<f64>>
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let shape = {
            let v = store.value(name);
            (v.nrows(), v.ncols())
        };
        let mut grad = Array2::zeros(shape);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = store.value(name)[(r, c)];
                store.value_mut(name)[(r, c)] = orig + step;
                let fp = f(store);
                store.value_mut(name)[(r, c)] = orig - step;
                let fm = f(store);
                store.value_mut(name)[(r, c)] = orig;
                grad[(r, c)] = (fp - fm) / (2.0 * step);
            }
        }
        out.push(grad);
    }
    out
}

/// Relative error with an absolute floor for near-zero references.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

/// Maximum elementwise [`rel_err`] over two equally shaped matrices.
pub fn max_rel_err(got: &Array2<f64>, want: &Array2<f64>) -> f64 {
    got.iter()
        .zip(want.iter())
        .map(|(g, w)| rel_err(*g, *w))
        .fold(0.0, f64::max)
}

/// Trapezoid-rule antiderivative of sampled values on a uniform grid,
/// anchored at zero at the left endpoint.
pub fn trapezoid_antiderivative(values: &[f64], dx: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in values.windows(2) {
        acc += 0.5 * (w[0] + w[1]) * dx;
        out.push(acc);
    }
    out
}
