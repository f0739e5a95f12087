//! Minimal dense-tensor arithmetic with reverse-mode autodiff.
//!
//! Covers exactly what the encoder/projector/predictor networks need:
//! conv2d, (leaky) relu, matmul, bias adds, global average pooling, row-wise
//! L2 normalization, cosine distance, and a handful of elementwise glue ops.
//! Everything is generic over [`Real`] so training runs in `f32` while
//! gradient checks run in `f64`.

pub mod check;
mod gemm;
pub mod ops;
mod tape;

pub use gemm::{dot, gemm_nn, gemm_nt, gemm_tn};
pub use tape::{Gradients, Op, Tape, VarId};

use crate::{Error, Result};

/// Scalar type the tensor stack is generic over (`f32` for training,
/// `f64` for finite-difference verification).
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor. A scalar is the empty shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                details: format!("shape {shape:?} wants {want} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert element type (f32 <-> f64) for verification-mode runs.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place `self += other`, used by gradient accumulation.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    /// In-place SGD update `self -= lr * grad`.
    pub fn sgd_step(&mut self, grad: &Tensor<T>, lr: T) -> Result<()> {
        if self.shape != grad.shape {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                details: format!("params {:?} vs grads {:?}", self.shape, grad.shape),
            });
        }
        for (p, g) in self.data.iter_mut().zip(grad.data.iter()) {
            *p -= lr * *g;
        }
        Ok(())
    }

    /// EMA blend `self = tau * self + (1 - tau) * online`.
    pub fn ema_blend(&mut self, online: &Tensor<T>, tau: T) -> Result<()> {
        if self.shape != online.shape {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                details: format!("target {:?} vs online {:?}", self.shape, online.shape),
            });
        }
        let one_minus = T::one() - tau;
        for (t, o) in self.data.iter_mut().zip(online.data.iter()) {
            *t = tau * *t + one_minus * *o;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn sgd_step_arithmetic() {
        // p=1, g=2, lr=0.1 -> 0.8
        let mut p = Tensor::scalar(1.0f64);
        let g = Tensor::scalar(2.0f64);
        p.sgd_step(&g, 0.1).unwrap();
        assert!((p.item() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut p = Tensor::from_vec(vec![1.0f32, -2.0, 3.5]);
        let before = p.clone();
        let g = Tensor::from_vec(vec![9.0f32, 9.0, 9.0]);
        p.sgd_step(&g, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_shape_mismatch_errors() {
        let mut p = Tensor::from_vec(vec![1.0f32, 2.0]);
        let g = Tensor::from_vec(vec![1.0f32]);
        assert!(matches!(
            p.sgd_step(&g, 0.1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn ema_endpoints() {
        let online = Tensor::from_vec(vec![2.0f64, 4.0]);
        let mut target = Tensor::from_vec(vec![1.0f64, 1.0]);
        // tau = 1 leaves target unchanged
        target.ema_blend(&online, 1.0).unwrap();
        assert_eq!(target.data(), &[1.0, 1.0]);
        // tau = 0 copies online
        target.ema_blend(&online, 0.0).unwrap();
        assert_eq!(target.data(), &[2.0, 4.0]);
    }

    #[test]
    fn ema_converges_geometrically_to_frozen_online() {
        // theta_t after n updates: tau^n * theta_0 + (1 - tau^n) * online
        let online = Tensor::scalar(10.0f64);
        let mut target = Tensor::scalar(0.0f64);
        let tau = 0.9f64;
        for _ in 0..50 {
            target.ema_blend(&online, tau).unwrap();
        }
        let expected = (1.0 - tau.powi(50)) * 10.0;
        assert!((target.item() - expected).abs() < 1e-9);
    }
}
