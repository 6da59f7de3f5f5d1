//! Map prediction network: a conditional consistency model that inpaints the unobserved part of
//! a heightmap image, conditioned on the observed map, its mask and nearby robots' trajectories.

use std::path::Path;

use fourcnet_numerics::layers::{ConvBlock, Conv2d, CrossAttention, Linear, UpBlock};
use fourcnet_numerics::{
    adam_step, ema_update, load_into, AdamState, Graph, ParamSet, Scalar, Tensor, Var,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cmtp::{context_tensors, TrajContext};
use crate::config::{EmaMode, MpnConfig};
use crate::error::{Error, Result};
use crate::nn::{self, stack};
use crate::seeds::{mix, rng};

/// Hidden width of the time-embedding MLP.
const TEMB: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub eps: f64,
    pub t_max: f64,
    pub rho: f64,
    pub sigma_data: f64,
    pub s0: usize,
    pub s1: usize,
    /// Total training steps `K`.
    pub total_steps: usize,
}

impl NoiseSchedule {
    pub fn from_config(c: &MpnConfig) -> Self {
        Self {
            eps: c.eps,
            t_max: c.t_max,
            rho: c.rho,
            sigma_data: c.sigma_data,
            s0: c.s0,
            s1: c.s1,
            total_steps: c.steps,
        }
    }

    /// Descending Karras grid from `t_max` to `eps` with exponent `rho`.
    pub fn karras_sigmas(&self, n: usize) -> Result<Vec<f64>> {
        if n < 2 {
            return Err(Error::Contract(format!("karras grid needs N >= 2, got {n}")));
        }
        let (a, b) = (self.t_max.powf(1.0 / self.rho), self.eps.powf(1.0 / self.rho));
        let mut s: Vec<f64> = (0..n)
            .map(|i| (a + i as f64 / (n - 1) as f64 * (b - a)).powf(self.rho))
            .collect();
        s[0] = self.t_max;
        s[n - 1] = self.eps;
        Ok(s)
    }

    /// Discretization size `N(k)`: a square-root ramp from `s0` to `s1` over `K` steps.
    pub fn step_count(&self, k: usize) -> usize {
        let kk = self.total_steps.max(1) as f64;
        let (s0, s1) = (self.s0 as f64, self.s1 as f64);
        let inner = (k as f64 / kk) * ((s1 + 1.0).powi(2) - s0 * s0) + s0 * s0;
        let n = (inner.sqrt() - 1.0).ceil() + 1.0;
        (n.max(s0).min(s1)) as usize
    }

    /// `(p_skip, p_out)` at noise level `t`.
    pub fn skip_out(&self, t: f64) -> Result<(f64, f64)> {
        if t < self.eps {
            return Err(Error::Contract(format!("noise level {t} below eps {}", self.eps)));
        }
        let sd2 = self.sigma_data * self.sigma_data;
        let d = t - self.eps;
        Ok((sd2 / (d * d + sd2), self.sigma_data * d / (sd2 + t * t).sqrt()))
    }

    /// Input scaling `1 / sqrt(t² + sigma_data²)` applied to the noisy channel.
    pub fn c_in(&self, t: f64) -> f64 {
        1.0 / (t * t + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn ema_factor(&self, k: usize, start: f64, mode: EmaMode) -> f64 {
        match mode {
            EmaMode::Fixed => start,
            EmaMode::Adaptive => (self.s0 as f64 * start.ln() / self.step_count(k) as f64).exp(),
        }
    }

    /// Noise levels visited by multistep sampling with `t_total` network evaluations.
    pub fn sampling_sigmas(&self, t_total: usize) -> Result<Vec<f64>> {
        match t_total {
            0 => Err(Error::Contract("t_total must be at least 1".into())),
            1 => Ok(vec![self.t_max]),
            n => self.karras_sigmas(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpnArch {
    pub size: usize,
    pub channels: Vec<usize>,
    pub blocks: usize,
    pub use_encoder: bool,
    pub use_attention: bool,
    pub attn_dim: usize,
    pub time_dim: usize,
    pub token_dim: usize,
    pub d_emb: usize,
    pub schedule: NoiseSchedule,
}

impl MpnArch {
    pub fn from_config(c: &MpnConfig, size: usize, token_dim: usize, d_emb: usize) -> Self {
        Self {
            size,
            channels: c.channels[..c.blocks].to_vec(),
            blocks: c.blocks,
            use_encoder: c.use_encoder,
            use_attention: c.use_attention,
            attn_dim: c.attn_dim,
            time_dim: c.time_dim,
            token_dim,
            d_emb,
            schedule: NoiseSchedule::from_config(c),
        }
    }

    fn is_middle(&self, level: usize) -> bool {
        level >= 1 && level + 1 < self.blocks
    }
}

#[derive(Debug, Clone)]
enum Cond {
    None,
    Attention(CrossAttention),
    /// Ablation without attention: the projected trajectory embedding becomes a channel offset.
    Bias(Linear),
}

#[derive(Debug, Clone)]
struct Level {
    block: ConvBlock,
    time: Linear,
    cond: Cond,
}

/// U-Net `F_theta` over `[c_in(t) m_t, M_obs, mask]`.
#[derive(Debug, Clone)]
pub struct MpnNet {
    pub arch: MpnArch,
    time1: Linear,
    time2: Linear,
    ctx_proj: Option<Linear>,
    enc: Vec<Level>,
    ups: Vec<UpBlock>,
    /// Decoder levels `1..blocks-1`, indexed by level.
    dec: Vec<Option<Level>>,
    head: Conv2d,
}

/// Conditioning inputs already placed on a graph.
#[derive(Debug, Clone, Copy)]
pub struct CtxVars {
    pub tokens: Var,
    pub emb: Var,
}

impl MpnNet {
    pub fn new(arch: MpnArch, seed: u64) -> Result<(Self, ParamSet)> {
        let n = arch.blocks;
        if n < 2 || arch.channels.len() != n {
            return Err(Error::Config("U-Net needs at least two levels".into()));
        }
        if arch.size % (1 << (n - 1)) != 0 {
            return Err(Error::Config(format!(
                "map size {} not divisible by 2^{}",
                arch.size,
                n - 1
            )));
        }
        let mut ps = ParamSet::new();
        let mut r = rng(seed);
        let ch = &arch.channels;
        let time1 = Linear::new(&mut ps, &mut r, "time1", arch.time_dim, TEMB, true)?;
        let time2 = Linear::new(&mut ps, &mut r, "time2", TEMB, TEMB, true)?;
        let ctx_proj = if arch.use_encoder {
            Some(Linear::new(&mut ps, &mut r, "ctx_proj", arch.d_emb, arch.token_dim, true)?)
        } else {
            None
        };
        let make_cond = |ps: &mut ParamSet, r: &mut ChaCha8Rng, name: &str, level: usize| -> Result<Cond> {
            if !arch.use_encoder || !arch.is_middle(level) {
                return Ok(Cond::None);
            }
            Ok(if arch.use_attention {
                Cond::Attention(CrossAttention::new(ps, r, name, ch[level], arch.token_dim, arch.attn_dim)?)
            } else {
                Cond::Bias(Linear::new(ps, r, name, arch.token_dim, ch[level], true)?)
            })
        };
        let mut enc = Vec::new();
        for l in 0..n {
            let c_in = if l == 0 { 3 } else { ch[l - 1] };
            let stride = if l == 0 { 1 } else { 2 };
            enc.push(Level {
                block: ConvBlock::new(&mut ps, &mut r, &format!("enc{l}"), c_in, ch[l], stride)?,
                time: Linear::new(&mut ps, &mut r, &format!("enc{l}.time"), TEMB, ch[l], true)?,
                cond: make_cond(&mut ps, &mut r, &format!("enc{l}.cond"), l)?,
            });
        }
        let mut ups = vec![];
        let mut dec = vec![];
        for l in (0..n - 1).rev() {
            ups.push(UpBlock::new(&mut ps, &mut r, &format!("up{l}"), ch[l + 1], ch[l])?);
            if l > 0 {
                dec.push(Some(Level {
                    block: ConvBlock::new(&mut ps, &mut r, &format!("dec{l}"), 2 * ch[l], ch[l], 1)?,
                    time: Linear::new(&mut ps, &mut r, &format!("dec{l}.time"), TEMB, ch[l], true)?,
                    cond: make_cond(&mut ps, &mut r, &format!("dec{l}.cond"), l)?,
                }));
            } else {
                dec.push(None);
            }
        }
        ups.reverse();
        dec.reverse();
        let head = Conv2d::new(&mut ps, &mut r, "head", 2 * ch[0], 1, 3, 1, 1, true)?;
        Ok((
            Self {
                arch,
                time1,
                time2,
                ctx_proj,
                enc,
                ups,
                dec,
                head,
            },
            ps,
        ))
    }

    /// Rebuilds the architecture recorded in a checkpoint and loads its weights.
    pub fn load(blob: &Path) -> Result<(Self, ParamSet)> {
        let (_, manifest) = nn::load_model(blob, "train-mpn")?;
        let arch: MpnArch = serde_json::from_value(manifest.meta.clone())?;
        let (net, mut ps) = Self::new(arch, 0)?;
        load_into(&mut ps, blob)?;
        Ok((net, ps))
    }

    /// Fails unless `ps` has exactly this network's parameter names and shapes.
    pub fn check_params(&self, ps: &ParamSet) -> Result<()> {
        let (_, fresh) = Self::new(self.arch.clone(), 0)?;
        fresh
            .check_aligned(ps)
            .map_err(|e| Error::Contract(format!("MPN parameters do not match the network: {e}")))
    }

    /// Sinusoidal features of `c_noise = ln(t) / 4`.
    fn time_features<T: Scalar>(&self, ts: &[f64]) -> Result<Tensor<T>> {
        let half = self.arch.time_dim / 2;
        let mut data = Vec::with_capacity(ts.len() * self.arch.time_dim);
        for &t in ts {
            let cn = 0.25 * t.ln();
            for i in 0..half {
                let f = (-(1000f64).ln() * i as f64 / half as f64).exp();
                data.push(T::from_f64_lossy((cn * f * 10.0).sin()));
            }
            for i in 0..half {
                let f = (-(1000f64).ln() * i as f64 / half as f64).exp();
                data.push(T::from_f64_lossy((cn * f * 10.0).cos()));
            }
        }
        Ok(Tensor::new(&[ts.len(), self.arch.time_dim], data)?)
    }

    fn apply_level<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        lv: &Level,
        x: Var,
        temb: Var,
        ctx: Option<(Var, Var)>,
    ) -> Result<Var> {
        let h = lv.block.forward(g, ps, x)?;
        let tb = lv.time.forward(g, ps, temb)?;
        let h = g.sample_channel_bias(h, tb)?;
        match (&lv.cond, ctx) {
            (Cond::Attention(a), Some((tokens, _))) => Ok(a.forward(g, ps, h, tokens)?),
            (Cond::Bias(l), Some((_, emb_tok))) => {
                let b = l.forward(g, ps, emb_tok)?;
                Ok(g.sample_channel_bias(h, b)?)
            }
            (Cond::None, _) => Ok(h),
            _ => Err(Error::Contract("conditioned level evaluated without context".into())),
        }
    }

    /// `F_theta(input, t, ctx)` with `input: [N, 3, H, W]`; returns `[N, 1, H, W]`.
    pub fn forward_f<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        input: Var,
        ts: &[f64],
        ctx: Option<CtxVars>,
    ) -> Result<Var> {
        let s = g.shape(input).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != self.arch.size || s[3] != self.arch.size {
            return Err(Error::Contract(format!(
                "MPN expects [N, 3, {0}, {0}], got {s:?}",
                self.arch.size
            )));
        }
        let n = s[0];
        if ts.len() != n {
            return Err(Error::Contract(format!("{} noise levels for batch {n}", ts.len())));
        }
        let tf = g.input(self.time_features(ts)?);
        let temb = self.time1.forward(g, ps, tf)?;
        let temb = g.relu(temb);
        let temb = self.time2.forward(g, ps, temb)?;
        let temb = g.relu(temb);

        let ctx_vars = match (&self.ctx_proj, ctx) {
            (Some(p), Some(c)) => {
                let e = p.forward(g, ps, c.emb)?;
                let e3 = g.reshape(e, &[n, 1, self.arch.token_dim])?;
                let tokens = g.concat(&[c.tokens, e3], 1)?;
                Some((tokens, e))
            }
            (Some(_), None) => {
                return Err(Error::Contract("MPN built with a trajectory encoder needs context".into()))
            }
            (None, _) => None,
        };

        let mut skips = Vec::with_capacity(self.arch.blocks);
        let mut h = input;
        for lv in &self.enc {
            h = self.apply_level(g, ps, lv, h, temb, ctx_vars)?;
            skips.push(h);
        }
        for l in (0..self.arch.blocks - 1).rev() {
            let up = self.ups[l].forward(g, ps, h)?;
            let cat = g.concat(&[up, skips[l]], 1)?;
            h = match &self.dec[l] {
                Some(lv) => self.apply_level(g, ps, lv, cat, temb, ctx_vars)?,
                None => self.head.forward(g, ps, cat)?,
            };
        }
        Ok(h)
    }

    /// `clamp(p_skip(t) m_t + p_out(t) F_theta([c_in(t) m_t, M_obs, mask], t), 0, 1)`.
    #[allow(clippy::too_many_arguments)]
    pub fn consistency_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        m_t: Var,
        ts: &[f64],
        obs: Var,
        mask: Var,
        ctx: Option<CtxVars>,
    ) -> Result<Var> {
        let y = self.consistency_raw(g, ps, m_t, ts, obs, mask, ctx)?;
        Ok(g.clamp(y, 0.0, 1.0))
    }

    /// [`MpnNet::consistency_forward`] without the final clamp. Training uses this form:
    /// a saturated clamp passes no gradient, and a network whose outputs all fall outside
    /// `[0, 1]` would never recover.
    #[allow(clippy::too_many_arguments)]
    pub fn consistency_raw<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        m_t: Var,
        ts: &[f64],
        obs: Var,
        mask: Var,
        ctx: Option<CtxVars>,
    ) -> Result<Var> {
        let (a, b, c) = (g.shape(m_t).to_vec(), g.shape(obs).to_vec(), g.shape(mask).to_vec());
        if a != b || a != c || a.len() != 4 || a[1] != 1 {
            return Err(Error::Contract(format!(
                "noisy state {a:?}, observation {b:?} and mask {c:?} must all be [N, 1, H, W]"
            )));
        }
        let sched = &self.arch.schedule;
        let mut skip = Vec::with_capacity(ts.len());
        let mut out = Vec::with_capacity(ts.len());
        let mut cin = Vec::with_capacity(ts.len());
        for &t in ts {
            let (s, o) = sched.skip_out(t)?;
            skip.push(T::from_f64_lossy(s));
            out.push(T::from_f64_lossy(o));
            cin.push(T::from_f64_lossy(sched.c_in(t)));
        }
        let scaled = g.scale_samples(m_t, &cin)?;
        let x = g.concat(&[scaled, obs, mask], 1)?;
        let f = self.forward_f(g, ps, x, ts, ctx)?;
        let a = g.scale_samples(m_t, &skip)?;
        let b = g.scale_samples(f, &out)?;
        Ok(g.add(a, b)?)
    }
}

/// Fixed random convolution pyramid standing in for a perceptual network.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    weights: Vec<Tensor<f64>>,
}

pub const PYRAMID: [usize; 3] = [8, 16, 16];
const PYRAMID_SEED: u64 = 0x5EED_F00D;

impl Default for FeaturePyramid {
    fn default() -> Self {
        let mut r = rng(PYRAMID_SEED);
        let mut c_in = 1;
        let mut weights = Vec::new();
        for &c in &PYRAMID {
            let fan_in = c_in * 9;
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid normal");
            let data = (0..c * fan_in).map(|_| d.sample(&mut r)).collect();
            weights.push(Tensor::new(&[c, c_in, 3, 3], data).expect("pyramid shape"));
            c_in = c;
        }
        Self { weights }
    }
}

impl FeaturePyramid {
    /// Sum over levels of the mean squared feature difference. The input itself is level zero,
    /// so the distance also sees absolute intensity, which the random features barely do.
    pub fn distance<T: Scalar>(&self, g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
        if g.shape(a) != g.shape(b) {
            return Err(Error::Contract("feature distance needs equal shapes".into()));
        }
        let (mut fa, mut fb) = (a, b);
        let d = g.sub(a, b)?;
        let d2 = g.mul(d, d)?;
        let mut total = Some(g.mean(d2));
        for w in &self.weights {
            let wv = g.input(w.cast());
            let ya = g.conv2d(fa, wv, 2, 1)?;
            fa = g.relu(ya);
            let yb = g.conv2d(fb, wv, 2, 1)?;
            fb = g.relu(yb);
            let d = g.sub(fa, fb)?;
            let d2 = g.mul(d, d)?;
            let m = g.mean(d2);
            total = Some(match total {
                Some(t) => g.add(t, m)?,
                None => m,
            });
        }
        Ok(total.expect("pyramid has levels"))
    }
}

fn sobel_kernels<T: Scalar>() -> Tensor<T> {
    let gx = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let gy = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let data = gx.iter().chain(gy.iter()).map(|&v| T::from_f64_lossy(v)).collect();
    Tensor::new(&[2, 1, 3, 3], data).expect("sobel shape")
}

/// Sobel gradient magnitude of `[N, 1, H, W]` maps with replicate padding; `[N, 1, H, W]`.
pub fn sobel_magnitude<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.pad_replicate(x, 1)?;
    let k = g.input(sobel_kernels());
    let e = g.conv2d(p, k, 1, 0)?;
    let e2 = g.mul(e, e)?;
    // Sum the two gradient channels with a 1x1 convolution.
    let ones = g.input(Tensor::new(&[1, 2, 1, 1], vec![T::one(); 2])?);
    let m = g.conv2d(e2, ones, 1, 0)?;
    let out = g.sqrt_eps(m);
    debug_assert_eq!(g.shape(out), s.as_slice());
    Ok(out)
}

/// Mean over pixels of the squared difference in Sobel magnitude.
pub fn edge_loss<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Contract("edge loss needs equal shapes".into()));
    }
    let sa = sobel_magnitude(g, a)?;
    let sb = sobel_magnitude(g, b)?;
    let d = g.sub(sa, sb)?;
    let d2 = g.mul(d, d)?;
    Ok(g.mean(d2))
}

/// `a * feature_distance + b * edge_loss`.
pub fn compound_loss<T: Scalar>(
    g: &mut Graph<T>,
    pyr: &FeaturePyramid,
    x: Var,
    y: Var,
    a: f64,
    b: f64,
) -> Result<Var> {
    if a < 0.0 || b < 0.0 {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    let f = pyr.distance(g, x, y)?;
    let e = edge_loss(g, x, y)?;
    let f = g.scale(f, a);
    let e = g.scale(e, b);
    Ok(g.add(f, e)?)
}

/// One training example: ground truth, observation, mask and optional trajectory conditioning.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub gt: &'a [f32],
    pub obs: &'a [f32],
    pub mask: &'a [f32],
    pub ctx: Option<&'a TrajContext>,
}

fn put_ctx<T: Scalar>(g: &mut Graph<T>, net: &MpnNet, ctx: &[Option<&TrajContext>]) -> Result<Option<CtxVars>> {
    if !net.arch.use_encoder {
        return Ok(None);
    }
    let c: Vec<&TrajContext> = ctx
        .iter()
        .map(|c| c.ok_or_else(|| Error::Contract("missing trajectory context".into())))
        .collect::<Result<_>>()?;
    let (tokens, emb) = context_tensors::<T>(&c, net.arch.token_dim)?;
    Ok(Some(CtxVars {
        tokens: g.input(tokens),
        emb: g.input(emb),
    }))
}

/// Online/target parameter pair plus optimizer state.
pub struct Trainer {
    pub net: MpnNet,
    pub online: ParamSet,
    pub target: ParamSet,
    pub adam: AdamState,
    pub cfg: MpnConfig,
    pub pyramid: FeaturePyramid,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(net: MpnNet, params: ParamSet, cfg: &MpnConfig, seed: u64) -> Self {
        Self {
            adam: AdamState::new(&params),
            target: params.clone(),
            online: params,
            net,
            cfg: cfg.clone(),
            pyramid: FeaturePyramid::default(),
            rng: rng(seed),
        }
    }

    /// Compound loss between the online network at `t_hi` and the (gradient-free) target
    /// network at `t_lo`, both fed the same noise draw, plus `anchor` times the same loss
    /// against the ground truth. Returns the graph and loss node.
    pub fn pair_loss(
        &self,
        batch: &[Example],
        t_hi: &[f64],
        t_lo: &[f64],
        noise: &[Vec<f32>],
    ) -> Result<(Graph<f32>, Var)> {
        let size = self.net.arch.size;
        let noisy = |ts: &[f64]| -> Vec<Vec<f32>> {
            batch
                .iter()
                .zip(ts)
                .zip(noise)
                .map(|((ex, &t), z)| ex.gt.iter().zip(z).map(|(x, e)| x + t as f32 * e).collect())
                .collect()
        };
        let (hi, lo) = (noisy(t_hi), noisy(t_lo));
        let obs: Vec<Vec<&[f32]>> = batch.iter().map(|e| vec![e.obs]).collect();
        let mask: Vec<Vec<&[f32]>> = batch.iter().map(|e| vec![e.mask]).collect();
        let ctx: Vec<Option<&TrajContext>> = batch.iter().map(|e| e.ctx).collect();

        let mut tg = Graph::<f32>::inference(true);
        let m = tg.input(stack(&lo.iter().map(|v| vec![v.as_slice()]).collect::<Vec<_>>(), size, size)?);
        let o = tg.input(stack(&obs, size, size)?);
        let k = tg.input(stack(&mask, size, size)?);
        let c = put_ctx(&mut tg, &self.net, &ctx)?;
        let tv = self.net.consistency_raw(&mut tg, &self.target, m, t_lo, o, k, c)?;
        let target = tg.tensor(tv);

        let mut g = Graph::<f32>::new(true);
        let m = g.input(stack(&hi.iter().map(|v| vec![v.as_slice()]).collect::<Vec<_>>(), size, size)?);
        let o = g.input(stack(&obs, size, size)?);
        let k = g.input(stack(&mask, size, size)?);
        let c = put_ctx(&mut g, &self.net, &ctx)?;
        let y = self.net.consistency_raw(&mut g, &self.online, m, t_hi, o, k, c)?;
        let tgt = g.input(target);
        let mut loss = compound_loss(&mut g, &self.pyramid, y, tgt, self.cfg.a, self.cfg.b)?;
        if self.cfg.anchor > 0.0 {
            let gt: Vec<Vec<&[f32]>> = batch.iter().map(|e| vec![e.gt]).collect();
            let gv = g.input(stack(&gt, size, size)?);
            let l = compound_loss(&mut g, &self.pyramid, y, gv, self.cfg.a, self.cfg.b)?;
            let l = g.scale(l, self.cfg.anchor);
            loss = g.add(loss, l)?;
        }
        Ok((g, loss))
    }

    /// One consistency-training step at iteration `k`; returns the loss.
    pub fn step(&mut self, k: usize, batch: &[Example]) -> Result<f64> {
        let sched = &self.net.arch.schedule;
        let n = sched.step_count(k);
        let sig = sched.karras_sigmas(n)?;
        // Ascending levels t_0 = eps < ... < t_{N-1} = T.
        let asc: Vec<f64> = sig.iter().rev().copied().collect();
        let hw = self.net.arch.size * self.net.arch.size;
        let mut t_hi = Vec::with_capacity(batch.len());
        let mut t_lo = Vec::with_capacity(batch.len());
        let mut picks = Vec::with_capacity(batch.len());
        let mut noise = Vec::with_capacity(batch.len());
        for _ in batch {
            let j = self.rng.random_range(0..n - 1);
            picks.push(j);
            t_lo.push(asc[j]);
            t_hi.push(asc[j + 1]);
            noise.push(
                (0..hw)
                    .map(|_| StandardNormal.sample(&mut self.rng))
                    .collect::<Vec<f32>>(),
            );
        }
        let (mut g, loss) = self.pair_loss(batch, &t_hi, &t_lo, &noise)?;
        let lv = g.scalar_value(loss) as f64;
        if !lv.is_finite() {
            return Err(Error::Contract(format!(
                "non-finite MPN loss at step {k}: N = {n}, indices {picks:?}, t_hi {t_hi:?}, t_lo {t_lo:?}"
            )));
        }
        g.backward(loss)?;
        g.accumulate_param_grads(&mut self.online)?;
        g.commit_buffers(&mut self.online)?;
        adam_step(&mut self.online, &mut self.adam, self.cfg.lr)?;
        let h = sched.ema_factor(k, self.cfg.ema_start, self.cfg.ema_mode);
        ema_update(&mut self.target, &self.online, h)?;
        Ok(lv)
    }
}

/// Inputs for one prediction.
#[derive(Debug, Clone)]
pub struct Request<'a> {
    pub obs: &'a [f32],
    pub mask: &'a [bool],
    pub ctx: Option<&'a TrajContext>,
}

/// Multistep consistency sampling with known-region clamping. Each request gets its own noise
/// stream derived from `(seed, request index)`; observed pixels of the result equal `obs`.
pub fn sample_prediction(
    net: &MpnNet,
    ps: &ParamSet,
    reqs: &[Request],
    t_total: usize,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    net.check_params(ps)?;
    let sched = &net.arch.schedule;
    let sig = sched.sampling_sigmas(t_total)?;
    let size = net.arch.size;
    let hw = size * size;
    let mut out = Vec::with_capacity(reqs.len());
    for (ci, chunk) in reqs.chunks(32).enumerate() {
        let mut rngs: Vec<ChaCha8Rng> = (0..chunk.len())
            .map(|i| rng(mix(seed, (ci * 32 + i) as u64)))
            .collect();
        for r in chunk {
            if r.obs.len() != hw || r.mask.len() != hw {
                return Err(Error::Contract(format!("request does not match map size {size}")));
            }
        }
        let masks: Vec<Vec<f32>> = chunk.iter().map(|r| nn::mask_plane(r.mask)).collect();
        let mut m: Vec<Vec<f32>> = rngs
            .iter_mut()
            .map(|r| {
                (0..hw)
                    .map(|_| { let z: f32 = StandardNormal.sample(r); sig[0] as f32 * z })
                    .collect()
            })
            .collect();
        let mut x0: Vec<Vec<f32>> = Vec::new();
        for (i, &t) in sig.iter().enumerate() {
            let mut g = Graph::<f32>::inference(false);
            let mv = g.input(stack(&m.iter().map(|v| vec![v.as_slice()]).collect::<Vec<_>>(), size, size)?);
            let ov = g.input(stack(&chunk.iter().map(|r| vec![r.obs]).collect::<Vec<_>>(), size, size)?);
            let kv = g.input(stack(&masks.iter().map(|v| vec![v.as_slice()]).collect::<Vec<_>>(), size, size)?);
            let ctx: Vec<Option<&TrajContext>> = chunk.iter().map(|r| r.ctx).collect();
            let c = put_ctx(&mut g, net, &ctx)?;
            let ts = vec![t; chunk.len()];
            let y = net.consistency_forward(&mut g, ps, mv, &ts, ov, kv, c)?;
            x0 = nn::planes(&g, y);
            for (p, r) in x0.iter_mut().zip(chunk) {
                for ((v, &o), &k) in p.iter_mut().zip(r.obs).zip(r.mask) {
                    if k {
                        *v = o;
                    }
                }
            }
            if let Some(&next) = sig.get(i + 1) {
                let s = (next * next - sched.eps * sched.eps).max(0.0).sqrt() as f32;
                for ((mi, xi), r) in m.iter_mut().zip(&x0).zip(rngs.iter_mut()) {
                    for (a, b) in mi.iter_mut().zip(xi) {
                        let z: f32 = StandardNormal.sample(r);
                        *a = b + s * z;
                    }
                }
            }
        }
        out.extend(x0);
    }
    Ok(out)
}

/// Result of a training run.
pub struct MpnRun {
    pub net: MpnNet,
    /// Target (EMA) parameters. They only supply the consistency targets during training.
    pub target: ParamSet,
    /// Online parameters, used for sampling. At short training runs the slow EMA still sits
    /// near initialization.
    pub online: ParamSet,
    pub losses: Vec<f64>,
}

/// Consistency training over `examples` for `cfg.steps` iterations with random mini-batches.
/// Each example is a list of alternatives (one per CSP level); one is drawn per visit.
pub fn train_mpn(arch: MpnArch, examples: &[Vec<Example>], cfg: &MpnConfig, seed: u64) -> Result<MpnRun> {
    if examples.len() < cfg.batch {
        return Err(Error::Config(format!(
            "{} examples cannot fill a batch of {}",
            examples.len(),
            cfg.batch
        )));
    }
    let (net, ps) = MpnNet::new(arch, mix(seed, 1))?;
    let mut tr = Trainer::new(net, ps, cfg, mix(seed, 2));
    let mut pick = rng(mix(seed, 3));
    let mut losses = Vec::with_capacity(cfg.steps);
    for k in 0..cfg.steps {
        let batch: Vec<Example> = (0..cfg.batch)
            .map(|_| {
                let alts = &examples[pick.random_range(0..examples.len())];
                alts[pick.random_range(0..alts.len())]
            })
            .collect();
        losses.push(tr.step(k, &batch)?);
    }
    Ok(MpnRun {
        net: tr.net,
        target: tr.target,
        online: tr.online,
        losses,
    })
}
