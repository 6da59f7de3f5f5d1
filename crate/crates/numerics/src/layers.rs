//! Parameterized building blocks. Layers only hold [`ParamId`]s, so the same network
//! description runs against an `f32` training set or an `f64` copy in the gradient checker.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{fan_in_uniform, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        let weight = ps.add(
            &format!("{name}.weight"),
            fan_in_uniform(rng, &[c_out, c_in, k, k], fan_in),
            true,
        )?;
        let bias = if bias {
            Some(ps.add(
                &format!("{name}.bias"),
                fan_in_uniform(rng, &[c_out], fan_in),
                true,
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        match self.bias {
            Some(b) => {
                let b = g.param(ps, b);
                g.channel_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Transposed convolution; kernel 4 / stride 2 / pad 1 doubles the resolution.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = c_in * k * k / (stride * stride).max(1);
        let weight = ps.add(
            &format!("{name}.weight"),
            fan_in_uniform(rng, &[c_in, c_out, k, k], fan_in),
            true,
        )?;
        let bias = if bias {
            Some(ps.add(
                &format!("{name}.bias"),
                fan_in_uniform(rng, &[c_out], fan_in),
                true,
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let y = g.conv_transpose2d(x, w, self.stride, self.pad)?;
        match self.bias {
            Some(b) => {
                let b = g.param(ps, b);
                g.channel_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = ps.add(
            &format!("{name}.weight"),
            fan_in_uniform(rng, &[d_out, d_in], d_in),
            true,
        )?;
        let bias = if bias {
            Some(ps.add(
                &format!("{name}.bias"),
                fan_in_uniform(rng, &[d_out], d_in),
                true,
            )?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.linear(x, w, b)
    }
}

/// Batch normalization over axis 1. Training graphs normalize with batch statistics and
/// queue running-statistic updates; evaluation graphs use the running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(ps: &mut ParamSet, name: &str, ch: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.add(&format!("{name}.gamma"), Tensor::full(&[ch], 1.0), true)?,
            beta: ps.add(&format!("{name}.beta"), Tensor::zeros(&[ch]), true)?,
            running_mean: ps.add(&format!("{name}.running_mean"), Tensor::zeros(&[ch]), false)?,
            running_var: ps.add(&format!("{name}.running_var"), Tensor::full(&[ch], 1.0), false)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        if g.is_training() {
            let out = g.batch_norm_train(x, gamma, beta)?;
            let m = T::from_f64_lossy(BN_MOMENTUM);
            let keep = T::one() - m;
            let rm: Vec<T> = ps
                .get(self.running_mean)
                .data()
                .iter()
                .zip(&out.batch_mean)
                .map(|(r, b)| keep * *r + m * *b)
                .collect();
            let rv: Vec<T> = ps
                .get(self.running_var)
                .data()
                .iter()
                .zip(&out.batch_var_unbiased)
                .map(|(r, b)| keep * *r + m * *b)
                .collect();
            g.push_buffer_update(self.running_mean, rm);
            g.push_buffer_update(self.running_var, rv);
            Ok(out.out)
        } else {
            g.batch_norm_eval(
                x,
                gamma,
                beta,
                ps.get(self.running_mean).data(),
                ps.get(self.running_var).data(),
            )
        }
    }
}

/// Convolution, batch normalization, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ps, rng, &format!("{name}.conv"), c_in, c_out, 3, stride, 1, false)?,
            bn: BatchNorm::new(ps, &format!("{name}.bn"), c_out)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, ps, x)?;
        let y = self.bn.forward(g, ps, y)?;
        Ok(g.relu(y))
    }
}

/// Transposed convolution (x2 upsampling), batch normalization, ReLU.
#[derive(Debug, Clone)]
pub struct UpBlock {
    pub conv: ConvTranspose2d,
    pub bn: BatchNorm,
}

impl UpBlock {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: ConvTranspose2d::new(ps, rng, &format!("{name}.convt"), c_in, c_out, 4, 2, 1, false)?,
            bn: BatchNorm::new(ps, &format!("{name}.bn"), c_out)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, ps, x)?;
        let y = self.bn.forward(g, ps, y)?;
        Ok(g.relu(y))
    }
}

/// Residual cross-attention from spatial features (queries) to a token sequence (keys/values).
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl CrossAttention {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        channels: usize,
        ctx_dim: usize,
        attn_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(ps, rng, &format!("{name}.q"), channels, attn_dim, false)?,
            k: Linear::new(ps, rng, &format!("{name}.k"), ctx_dim, attn_dim, false)?,
            v: Linear::new(ps, rng, &format!("{name}.v"), ctx_dim, attn_dim, false)?,
            out: Linear::new(ps, rng, &format!("{name}.out"), attn_dim, channels, true)?,
        })
    }

    /// `x: [N, C, H, W]`, `ctx: [N, L, ctx_dim]` -> `x + attend(x, ctx)`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        x: Var,
        ctx: Var,
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (n, ch, hw) = (s[0], s[1], s[2] * s[3]);
        let tokens = g.reshape(x, &[n, ch, hw])?;
        let tokens = g.transpose12(tokens)?;
        let q = self.q.forward(g, ps, tokens)?;
        let k = self.k.forward(g, ps, ctx)?;
        let v = self.v.forward(g, ps, ctx)?;
        let a = g.scaled_dot_product_attention(q, k, v)?;
        let o = self.out.forward(g, ps, a)?;
        let o = g.transpose12(o)?;
        let o = g.reshape(o, &s)?;
        g.add(x, o)
    }
}

/// Inverted dropout; identity outside training graphs or when `p == 0`.
pub fn dropout<T: Scalar, R: Rng>(g: &mut Graph<T>, x: Var, p: f64, rng: &mut R) -> Result<Var> {
    if !g.is_training() || p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let scale = T::from_f64_lossy(1.0 / keep);
    let mask = (0..g.value(x).len())
        .map(|_| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        })
        .collect();
    g.mul_const(x, mask)
}
