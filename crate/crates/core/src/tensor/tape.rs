//! Reverse-mode tape. Nodes are appended in execution order, which is a
//! topological order by construction; `backward` walks it once in reverse.

use super::{ops, Real, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    /// Identity forward, gradient barrier backward.
    Detach,
    Conv2d {
        stride: usize,
        pad: usize,
    },
    Matmul,
    Add,
    Mul,
    AddBiasRow,
    AddBiasChan,
    Relu,
    LeakyRelu {
        alpha: f64,
    },
    GlobalAvgPool,
    L2Normalize,
    CosineDistance,
    SumAll,
    Affine {
        a: f64,
        b: f64,
    },
}

struct Node<T> {
    op: Op,
    inputs: Vec<VarId>,
    value: Tensor<T>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients keyed by the tape's variable ids; absent entries are zero.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: VarId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a variable, materializing zeros for untouched ones.
    pub fn get_or_zeros(&self, id: VarId, shape: &[usize]) -> Tensor<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<VarId>, value: Tensor<T>) -> VarId {
        self.nodes.push(Node { op, inputs, value });
        VarId(self.nodes.len() - 1)
    }

    /// Insert a leaf (input or parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> VarId {
        self.push(Op::Leaf, Vec::new(), value)
    }

    /// Identity whose gradient does not flow to its input (stop-gradient).
    pub fn detach(&mut self, x: VarId) -> VarId {
        let value = self.value(x).clone();
        self.push(Op::Detach, vec![x], value)
    }

    pub fn conv2d(&mut self, x: VarId, w: VarId, stride: usize, pad: usize) -> Result<VarId> {
        let value = ops::conv2d_forward(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x, w], value))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = ops::matmul_forward(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul, vec![a, b], value))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = ops::add_forward(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = ops::mul_forward(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul, vec![a, b], value))
    }

    pub fn add_bias_row(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let value = ops::add_bias_row_forward(self.value(x), self.value(bias))?;
        Ok(self.push(Op::AddBiasRow, vec![x, bias], value))
    }

    pub fn add_bias_chan(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let value = ops::add_bias_chan_forward(self.value(x), self.value(bias))?;
        Ok(self.push(Op::AddBiasChan, vec![x, bias], value))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let value = ops::relu_forward(self.value(x));
        self.push(Op::Relu, vec![x], value)
    }

    pub fn leaky_relu(&mut self, x: VarId, alpha: f64) -> VarId {
        let value = ops::leaky_relu_forward(self.value(x), alpha);
        self.push(Op::LeakyRelu { alpha }, vec![x], value)
    }

    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId> {
        let value = ops::global_avg_pool_forward(self.value(x))?;
        Ok(self.push(Op::GlobalAvgPool, vec![x], value))
    }

    pub fn l2_normalize(&mut self, x: VarId) -> Result<VarId> {
        let value = ops::l2_normalize_forward(self.value(x))?;
        Ok(self.push(Op::L2Normalize, vec![x], value))
    }

    pub fn cosine_distance(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = ops::cosine_distance_forward(self.value(a), self.value(b))?;
        Ok(self.push(Op::CosineDistance, vec![a, b], value))
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let value = ops::sum_all_forward(self.value(x));
        self.push(Op::SumAll, vec![x], value)
    }

    /// Elementwise `a * x + b` with constant coefficients.
    pub fn affine(&mut self, x: VarId, a: f64, b: f64) -> VarId {
        let value = ops::affine_forward(self.value(x), a, b);
        self.push(Op::Affine { a, b }, vec![x], value)
    }

    /// Reverse pass from a scalar root. Visits each node exactly once.
    pub fn backward(&self, root: VarId) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                details: format!("root must be scalar, got {:?}", self.value(root).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let mut contributions: Vec<(VarId, Tensor<T>)> = Vec::new();
            match node.op {
                Op::Leaf | Op::Detach => {}
                Op::Conv2d { stride, pad } => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    let w = &self.nodes[node.inputs[1].0].value;
                    let (gx, gw) = ops::conv2d_backward(x, w, &gout, stride, pad)?;
                    contributions.push((node.inputs[0], gx));
                    contributions.push((node.inputs[1], gw));
                }
                Op::Matmul => {
                    let a = &self.nodes[node.inputs[0].0].value;
                    let b = &self.nodes[node.inputs[1].0].value;
                    let (ga, gb) = ops::matmul_backward(a, b, &gout);
                    contributions.push((node.inputs[0], ga));
                    contributions.push((node.inputs[1], gb));
                }
                Op::Add => {
                    contributions.push((node.inputs[0], gout.clone()));
                    contributions.push((node.inputs[1], gout.clone()));
                }
                Op::Mul => {
                    let a = &self.nodes[node.inputs[0].0].value;
                    let b = &self.nodes[node.inputs[1].0].value;
                    contributions.push((node.inputs[0], ops::mul_forward(&gout, b)?));
                    contributions.push((node.inputs[1], ops::mul_forward(&gout, a)?));
                }
                Op::AddBiasRow => {
                    let m = gout.shape()[1];
                    contributions.push((node.inputs[0], gout.clone()));
                    contributions.push((node.inputs[1], ops::add_bias_row_backward(&gout, m)));
                }
                Op::AddBiasChan => {
                    contributions.push((node.inputs[0], gout.clone()));
                    contributions.push((node.inputs[1], ops::add_bias_chan_backward(&gout)));
                }
                Op::Relu => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    contributions.push((node.inputs[0], ops::relu_backward(x, &gout)));
                }
                Op::LeakyRelu { alpha } => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    contributions.push((node.inputs[0], ops::leaky_relu_backward(x, &gout, alpha)));
                }
                Op::GlobalAvgPool => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    contributions
                        .push((node.inputs[0], ops::global_avg_pool_backward(x.shape(), &gout)));
                }
                Op::L2Normalize => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    contributions.push((node.inputs[0], ops::l2_normalize_backward(x, &gout)));
                }
                Op::CosineDistance => {
                    let a = &self.nodes[node.inputs[0].0].value;
                    let b = &self.nodes[node.inputs[1].0].value;
                    let (ga, gb) = ops::cosine_distance_backward(a, b, gout.item());
                    contributions.push((node.inputs[0], ga));
                    contributions.push((node.inputs[1], gb));
                }
                Op::SumAll => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    contributions.push((node.inputs[0], ops::sum_all_backward(x.shape(), gout.item())));
                }
                Op::Affine { a, .. } => {
                    contributions.push((node.inputs[0], ops::affine_backward(&gout, a)));
                }
            }
            // Inputs always precede the node, so re-inserting before the
            // contribution pass cannot alias.
            grads[idx] = Some(gout);
            for (input, grad) in contributions {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::{central_diff_grad, max_rel_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FD_TOL: f64 = 1e-4;
    const FD_H: f64 = 1e-5;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let data = (0..shape.iter().product::<usize>())
            // keep values away from relu kinks at 0
            .map(|_| {
                let v: f64 = rng.gen_range(0.2..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Check the tape gradient of `build` against central differences for
    /// every input tensor.
    fn fd_check<F>(name: &str, inputs: &[Tensor<f64>], build: F)
    where
        F: Fn(&mut Tape<f64>, &[VarId]) -> VarId,
    {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root).unwrap();
        let analytic: Vec<Tensor<f64>> = ids
            .iter()
            .zip(inputs)
            .map(|(&id, t)| grads.get_or_zeros(id, t.shape()))
            .collect();

        let numeric = central_diff_grad(
            |xs| {
                let mut tape = Tape::new();
                let ids: Vec<VarId> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
                let root = build(&mut tape, &ids);
                tape.value(root).item()
            },
            inputs,
            FD_H,
        );
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < FD_TOL, "{name}: max rel error {err:.3e} >= {FD_TOL:e}");
    }

    #[test]
    fn fd_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 5]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        for pad in [0usize, 1] {
            fd_check("conv2d", &[x.clone(), w.clone()], |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], 1, pad).unwrap();
                tape.sum_all(y)
            });
        }
    }

    #[test]
    fn fd_conv2d_stride_2() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_tensor(&mut rng, &[1, 1, 6, 6]);
        let w = rand_tensor(&mut rng, &[2, 1, 3, 3]);
        fd_check("conv2d_s2", &[x, w], |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], 2, 1).unwrap();
            tape.sum_all(y)
        });
    }

    #[test]
    fn fd_matmul_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let bias = rand_tensor(&mut rng, &[2]);
        fd_check("matmul+bias_row", &[a, b, bias], |tape, ids| {
            let y = tape.matmul(ids[0], ids[1]).unwrap();
            let y = tape.add_bias_row(y, ids[2]).unwrap();
            tape.sum_all(y)
        });
    }

    #[test]
    fn fd_bias_chan_and_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let bias = rand_tensor(&mut rng, &[3]);
        fd_check("bias_chan+gap", &[x, bias], |tape, ids| {
            let y = tape.add_bias_chan(ids[0], ids[1]).unwrap();
            let y = tape.global_avg_pool(y).unwrap();
            tape.sum_all(y)
        });
    }

    #[test]
    fn fd_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rand_tensor(&mut rng, &[4, 6]);
        fd_check("relu", std::slice::from_ref(&x), |tape, ids| {
            let y = tape.relu(ids[0]);
            tape.sum_all(y)
        });
        fd_check("leaky_relu", &[x], |tape, ids| {
            let y = tape.leaky_relu(ids[0], 0.01);
            tape.sum_all(y)
        });
    }

    #[test]
    fn fd_add_mul_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let a = rand_tensor(&mut rng, &[5]);
        let b = rand_tensor(&mut rng, &[5]);
        fd_check("add/mul/affine", &[a, b], |tape, ids| {
            let s = tape.add(ids[0], ids[1]).unwrap();
            let p = tape.mul(s, ids[1]).unwrap();
            let p = tape.affine(p, 0.7, -0.3);
            tape.sum_all(p)
        });
    }

    #[test]
    fn fd_l2_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        fd_check("l2_normalize", &[x, w], |tape, ids| {
            let y = tape.l2_normalize(ids[0]).unwrap();
            let y = tape.mul(y, ids[1]).unwrap();
            tape.sum_all(y)
        });
    }

    #[test]
    fn fd_cosine_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let a = rand_tensor(&mut rng, &[6]);
        let b = rand_tensor(&mut rng, &[6]);
        fd_check("cosine_distance", &[a, b], |tape, ids| {
            tape.cosine_distance(ids[0], ids[1]).unwrap()
        });
    }

    #[test]
    fn cosine_distance_identities() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::from_vec(vec![0.3f64, -1.2, 2.0]));
        let d = tape.cosine_distance(v, v).unwrap();
        assert!(tape.value(d).item().abs() < 1e-12);

        let e1 = tape.leaf(Tensor::from_vec(vec![1.0f64, 0.0]));
        let e2 = tape.leaf(Tensor::from_vec(vec![0.0f64, 1.0]));
        let d = tape.cosine_distance(e1, e2).unwrap();
        assert!((tape.value(d).item() - 1.0).abs() < 1e-12);

        // antiparallel -> 2; range is [0, 2]
        let neg = tape.leaf(Tensor::from_vec(vec![-1.0f64, 0.0]));
        let d = tape.cosine_distance(e1, neg).unwrap();
        assert!((tape.value(d).item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_distance_zero_vector_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![0.0f64, 0.0]));
        let b = tape.leaf(Tensor::from_vec(vec![1.0f64, 0.0]));
        assert!(matches!(
            tape.cosine_distance(a, b),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn l2_normalize_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..20 {
            let x = rand_tensor(&mut rng, &[4, 8]);
            let mut tape = Tape::new();
            let id = tape.leaf(x);
            let y = tape.l2_normalize(id).unwrap();
            for row in tape.value(y).data().chunks_exact(8) {
                let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0f64, 2.0]));
        let y = tape.leaf(Tensor::from_vec(vec![3.0f64, 4.0]));
        let yd = tape.detach(y);
        let p = tape.mul(x, yd).unwrap();
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss).unwrap();
        // x receives d(loss)/dx = y values; y receives exactly nothing
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn quadratic_bowl_descends_monotonically() {
        // f(p) = sum((p - c)^2): SGD with small lr decreases f every step.
        let c = Tensor::from_vec(vec![1.0f64, -2.0, 0.5]);
        let mut p = Tensor::from_vec(vec![5.0f64, 5.0, 5.0]);
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let mut tape = Tape::new();
            let pid = tape.leaf(p.clone());
            let cid = tape.leaf(c.map(|v| -v));
            let diff = tape.add(pid, cid).unwrap();
            let sq = tape.mul(diff, diff).unwrap();
            let loss = tape.sum_all(sq);
            let val = tape.value(loss).item();
            assert!(val < last, "loss must strictly decrease while far from optimum");
            last = val;
            let grads = tape.backward(loss).unwrap();
            p.sgd_step(grads.get(pid).unwrap(), 0.05).unwrap();
        }
        assert!(last < 1e-3);
    }
}
