//! Central finite-difference verification utilities (f64 mode).
//!
//! The closure under test rebuilds its computation from plain tensors each
//! call, so the numeric gradient never touches the reverse-mode path it is
//! checking.

use super::Tensor;

/// Central-difference gradient of a scalar function of several tensors.
pub fn central_diff_grad<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Vec<Tensor<f64>>
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for ti in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[ti].shape());
        for ei in 0..inputs[ti].len() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let fp = f(&work);
            work[ti].data_mut()[ei] = orig - h;
            let fm = f(&work);
            work[ti].data_mut()[ei] = orig;
            g.data_mut()[ei] = (fp - fm) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Worst relative disagreement between analytic and numeric gradients.
pub fn max_rel_error(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        assert_eq!(a.shape(), n.shape(), "gradient shape disagreement");
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let scale = av.abs().max(nv.abs()).max(1e-6);
            worst = worst.max((av - nv).abs() / scale);
        }
    }
    worst
}
