//! The three networks: a small conv encoder (the representation model kept
//! after training), a projector, and an online-only predictor.
//!
//! Encoder: conv3x3(1->8) + leaky_relu, conv3x3(8->16) + leaky_relu,
//! conv3x3(16->32) + leaky_relu, global average pool -> 32-dim embedding.
//! Projector/predictor are two-layer MLPs (32->64->64 and 64->64->64).

use crate::tensor::{ops, Real, Tape, Tensor, VarId};
use crate::Result;
use rand::Rng;

pub const EMBED_DIM: usize = 32;
pub const PROJ_DIM: usize = 64;
pub const LEAKY_ALPHA: f64 = 0.01;

pub const ARCH_DESCRIPTOR: &str =
    "conv3x3(1-8)|lrelu|conv3x3(8-16)|lrelu|conv3x3(16-32)|lrelu|gap32";

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    /// `[c_out, c_in, 3, 3]`
    pub weight: Tensor<T>,
    /// `[c_out]`
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[d_in, d_out]`
    pub weight: Tensor<T>,
    /// `[d_out]`
    pub bias: Tensor<T>,
}

fn uniform_tensor<T: Real>(rng: &mut impl Rng, shape: &[usize], limit: f64) -> Tensor<T> {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(shape, data).expect("sized by construction")
}

impl<T: Real> Conv<T> {
    fn init(rng: &mut impl Rng, c_in: usize, c_out: usize) -> Self {
        let fan_in = (c_in * 9) as f64;
        let limit = (6.0 / fan_in).sqrt();
        Self {
            weight: uniform_tensor(rng, &[c_out, c_in, 3, 3], limit),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

impl<T: Real> Linear<T> {
    fn init(rng: &mut impl Rng, d_in: usize, d_out: usize) -> Self {
        let limit = (6.0 / d_in as f64).sqrt();
        Self {
            weight: uniform_tensor(rng, &[d_in, d_out], limit),
            bias: Tensor::zeros(&[d_out]),
        }
    }
}

/// Convolutional backbone producing the 32-dim embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
    pub conv3: Conv<T>,
}

/// Two-layer fully connected head (projector or predictor).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct EncoderVars {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
    pub w3: VarId,
    pub b3: VarId,
}

pub struct MlpVars {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
}

impl<T: Real> Encoder<T> {
    pub fn init(rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv::init(rng, 1, 8),
            conv2: Conv::init(rng, 8, 16),
            conv3: Conv::init(rng, 16, 32),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.conv3.weight,
            &self.conv3.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.conv3.weight,
            &mut self.conv3.bias,
        ]
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            conv1: Conv {
                weight: self.conv1.weight.cast(),
                bias: self.conv1.bias.cast(),
            },
            conv2: Conv {
                weight: self.conv2.weight.cast(),
                bias: self.conv2.bias.cast(),
            },
            conv3: Conv {
                weight: self.conv3.weight.cast(),
                bias: self.conv3.bias.cast(),
            },
        }
    }

    pub fn leaves(&self, tape: &mut Tape<T>) -> EncoderVars {
        EncoderVars {
            w1: tape.leaf(self.conv1.weight.clone()),
            b1: tape.leaf(self.conv1.bias.clone()),
            w2: tape.leaf(self.conv2.weight.clone()),
            b2: tape.leaf(self.conv2.bias.clone()),
            w3: tape.leaf(self.conv3.weight.clone()),
            b3: tape.leaf(self.conv3.bias.clone()),
        }
    }

    /// Tape forward: `[N, 1, P, P] -> [N, 32]`.
    pub fn forward_on(tape: &mut Tape<T>, vars: &EncoderVars, x: VarId) -> Result<VarId> {
        let mut h = tape.conv2d(x, vars.w1, 1, 0)?;
        h = tape.add_bias_chan(h, vars.b1)?;
        h = tape.leaky_relu(h, LEAKY_ALPHA);
        h = tape.conv2d(h, vars.w2, 1, 0)?;
        h = tape.add_bias_chan(h, vars.b2)?;
        h = tape.leaky_relu(h, LEAKY_ALPHA);
        h = tape.conv2d(h, vars.w3, 1, 0)?;
        h = tape.add_bias_chan(h, vars.b3)?;
        h = tape.leaky_relu(h, LEAKY_ALPHA);
        tape.global_avg_pool(h)
    }

    /// Inference forward without a tape: `[N, 1, P, P] -> [N, 32]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = ops::conv2d_forward(x, &self.conv1.weight, 1, 0)?;
        h = ops::add_bias_chan_forward(&h, &self.conv1.bias)?;
        h = ops::leaky_relu_forward(&h, LEAKY_ALPHA);
        h = ops::conv2d_forward(&h, &self.conv2.weight, 1, 0)?;
        h = ops::add_bias_chan_forward(&h, &self.conv2.bias)?;
        h = ops::leaky_relu_forward(&h, LEAKY_ALPHA);
        h = ops::conv2d_forward(&h, &self.conv3.weight, 1, 0)?;
        h = ops::add_bias_chan_forward(&h, &self.conv3.bias)?;
        h = ops::leaky_relu_forward(&h, LEAKY_ALPHA);
        ops::global_avg_pool_forward(&h)
    }
}

impl<T: Real> Mlp<T> {
    pub fn init(rng: &mut impl Rng, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            fc1: Linear::init(rng, d_in, d_hidden),
            fc2: Linear::init(rng, d_hidden, d_out),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![
            &self.fc1.weight,
            &self.fc1.bias,
            &self.fc2.weight,
            &self.fc2.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            fc1: Linear {
                weight: self.fc1.weight.cast(),
                bias: self.fc1.bias.cast(),
            },
            fc2: Linear {
                weight: self.fc2.weight.cast(),
                bias: self.fc2.bias.cast(),
            },
        }
    }

    pub fn leaves(&self, tape: &mut Tape<T>) -> MlpVars {
        MlpVars {
            w1: tape.leaf(self.fc1.weight.clone()),
            b1: tape.leaf(self.fc1.bias.clone()),
            w2: tape.leaf(self.fc2.weight.clone()),
            b2: tape.leaf(self.fc2.bias.clone()),
        }
    }

    pub fn forward_on(tape: &mut Tape<T>, vars: &MlpVars, x: VarId) -> Result<VarId> {
        let mut h = tape.matmul(x, vars.w1)?;
        h = tape.add_bias_row(h, vars.b1)?;
        h = tape.relu(h);
        h = tape.matmul(h, vars.w2)?;
        tape.add_bias_row(h, vars.b2)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = ops::matmul_forward(x, &self.fc1.weight)?;
        h = ops::add_bias_row_forward(&h, &self.fc1.bias)?;
        h = ops::relu_forward(&h);
        h = ops::matmul_forward(&h, &self.fc2.weight)?;
        ops::add_bias_row_forward(&h, &self.fc2.bias)
    }
}

/// Online encoder+projector+predictor and the EMA target encoder+projector.
#[derive(Clone, Debug)]
pub struct ByolNets<T> {
    pub online_enc: Encoder<T>,
    pub online_proj: Mlp<T>,
    pub predictor: Mlp<T>,
    pub target_enc: Encoder<T>,
    pub target_proj: Mlp<T>,
}

impl<T: Real> ByolNets<T> {
    /// Online nets are randomly initialized; the target starts as a copy.
    pub fn init(rng: &mut impl Rng) -> Self {
        let online_enc = Encoder::init(rng);
        let online_proj = Mlp::init(rng, EMBED_DIM, PROJ_DIM, PROJ_DIM);
        let predictor = Mlp::init(rng, PROJ_DIM, PROJ_DIM, PROJ_DIM);
        let target_enc = online_enc.clone();
        let target_proj = online_proj.clone();
        Self {
            online_enc,
            online_proj,
            predictor,
            target_enc,
            target_proj,
        }
    }

    /// `theta_target <- tau * theta_target + (1 - tau) * theta_online`.
    pub fn ema_update(&mut self, tau: T) -> Result<()> {
        for (t, o) in self
            .target_enc
            .params_mut()
            .into_iter()
            .zip(self.online_enc.params())
        {
            t.ema_blend(o, tau)?;
        }
        for (t, o) in self
            .target_proj
            .params_mut()
            .into_iter()
            .zip(self.online_proj.params())
        {
            t.ema_blend(o, tau)?;
        }
        Ok(())
    }

    pub fn online_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.online_enc.params_mut();
        out.extend(self.online_proj.params_mut());
        out.extend(self.predictor.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embedding_dim_is_32_for_any_valid_patch_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc: Encoder<f32> = Encoder::init(&mut rng);
        for p in [9usize, 15, 21] {
            let x = Tensor::zeros(&[3, 1, p, p]);
            let y = enc.forward(&x).unwrap();
            assert_eq!(y.shape(), &[3, EMBED_DIM]);
        }
    }

    #[test]
    fn tape_and_inference_forwards_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc: Encoder<f64> = Encoder::init(&mut rng);
        let data: Vec<f64> = (0..2 * 15 * 15).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let x = Tensor::new(&[2, 1, 15, 15], data).unwrap();

        let plain = enc.forward(&x).unwrap();
        let mut tape = Tape::new();
        let vars = enc.leaves(&mut tape);
        let xid = tape.leaf(x);
        let y = Encoder::forward_on(&mut tape, &vars, xid).unwrap();
        assert_eq!(tape.value(y), &plain);
    }

    #[test]
    fn target_starts_as_online_copy_with_matching_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nets: ByolNets<f32> = ByolNets::init(&mut rng);
        let online_n: usize = nets
            .online_enc
            .params()
            .iter()
            .chain(nets.online_proj.params().iter())
            .map(|t| t.len())
            .sum();
        let target_n: usize = nets
            .target_enc
            .params()
            .iter()
            .chain(nets.target_proj.params().iter())
            .map(|t| t.len())
            .sum();
        assert_eq!(online_n, target_n);
        assert_eq!(nets.online_enc, nets.target_enc);
    }
}
