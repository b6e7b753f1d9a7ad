//! Shared test utilities: the central finite-difference oracle used to
//! check every autodiff gradient, independent of the tape's backward pass
//! (it only ever evaluates forward values).

use inpaint_core::tensor::Tensor;

pub const FD_H: f64 = 1e-5;

/// Central finite difference of `f` along coordinate `i` of `x`.
pub fn fd_at(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, i: usize, h: f64) -> f64 {
    let bump = |delta: f64| {
        let mut data = x.data().to_vec();
        data[i] += delta;
        Tensor::from_vec(x.shape(), data)
    };
    (f(&bump(h)) - f(&bump(-h))) / (2.0 * h)
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-8 {
        return (a - b).abs(); // both tiny: absolute comparison
    }
    (a - b).abs() / denom
}

/// Checks the analytic gradient against finite differences at the given
/// coordinates.
pub fn check_grad_at(
    f: &dyn Fn(&Tensor) -> f64,
    x: &Tensor,
    analytic: &Tensor,
    coords: &[usize],
    tol: f64,
    label: &str,
) {
    for &i in coords {
        let numeric = fd_at(f, x, i, FD_H);
        let got = analytic.data()[i];
        let err = rel_err(got, numeric);
        assert!(
            err < tol,
            "{label}: coord {i}: autodiff {got} vs fd {numeric} (rel err {err:.3e} >= {tol:.0e})"
        );
    }
}

/// Deterministic coordinate sample: `k` spread-out indices of a buffer.
pub fn spread_coords(numel: usize, k: usize) -> Vec<usize> {
    let k = k.min(numel);
    (0..k).map(|j| j * numel / k).collect()
}
