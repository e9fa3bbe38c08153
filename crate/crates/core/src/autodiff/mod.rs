//! Tape-based reverse-mode autodiff over dense tensors.

pub mod tape;
pub mod tensor;

pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

/// Central finite-difference gradient of `f` with respect to `x`, used by the
/// test suites as an independent oracle for the tape.
pub fn central_difference(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    perturbation: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut work = x.to_vec();
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + perturbation;
        let fp = f(&work);
        work[i] = orig - perturbation;
        let fm = f(&work);
        work[i] = orig;
        grad[i] = (fp - fm) / (2.0 * perturbation);
    }
    grad
}

/// Relative agreement check between an autodiff gradient and its
/// finite-difference estimate. The floor keeps FD roundoff on near-zero
/// entries from registering as disagreement.
pub fn gradient_close(ad: &[f64], fd: &[f64], rel_tol: f64, floor: f64) -> bool {
    ad.len() == fd.len()
        && ad
            .iter()
            .zip(fd.iter())
            .all(|(&a, &b)| (a - b).abs() <= rel_tol * a.abs().max(b.abs()).max(floor))
}
