//! Contrastive map-trajectory pretraining: two small convolutional encoders trained with an
//! InfoNCE objective so that a map and the trajectories driven on it embed close together.

use std::path::Path;

use fourcnet_numerics::layers::{dropout, Conv2d, ConvBlock};
use fourcnet_numerics::{adam_step, load_into, AdamState, Graph, ParamSet, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::CmtpConfig;
use crate::error::{Error, Result};
use crate::nn::{self, stack};
use crate::seeds::{mix, rng};
use crate::worldgen::Record;

pub const BACKBONE: [usize; 4] = [16, 32, 64, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmtpArch {
    pub size: usize,
    pub d_emb: usize,
    pub dropout: f64,
}

impl CmtpArch {
    /// Side of the final backbone grid, whose cells are exported as conditioning tokens.
    pub fn token_grid(&self) -> usize {
        self.size / 4
    }

    pub fn token_dim(&self) -> usize {
        BACKBONE[3]
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    blocks: Vec<ConvBlock>,
    head1: Conv2d,
    head2: Conv2d,
    dropout: f64,
    size: usize,
}

/// Output of one encoder pass.
pub struct Encoded {
    /// Final backbone feature map `[N, 64, size/4, size/4]`.
    pub tokens: Var,
    /// Unit-norm embedding `[N, d_emb]`.
    pub emb: Var,
}

impl Encoder {
    fn new(ps: &mut ParamSet, r: &mut ChaCha8Rng, name: &str, arch: &CmtpArch) -> Result<Self> {
        if arch.size % 4 != 0 {
            return Err(Error::Config(format!("encoder input size {} must be a multiple of 4", arch.size)));
        }
        let cells = arch.token_grid() * arch.token_grid();
        if arch.d_emb % cells != 0 {
            return Err(Error::Config(format!(
                "embedding size {} must be a multiple of the {cells} output cells",
                arch.d_emb
            )));
        }
        let mut blocks = Vec::new();
        let mut c_in = 1;
        for (i, &c) in BACKBONE.iter().enumerate() {
            let stride = if i == 1 || i == 2 { 2 } else { 1 };
            blocks.push(ConvBlock::new(ps, r, &format!("{name}.b{i}"), c_in, c, stride)?);
            c_in = c;
        }
        Ok(Self {
            blocks,
            head1: Conv2d::new(ps, r, &format!("{name}.head1"), c_in, c_in, 1, 1, 0, true)?,
            head2: Conv2d::new(ps, r, &format!("{name}.head2"), c_in, arch.d_emb / cells, 1, 1, 0, true)?,
            dropout: arch.dropout,
            size: arch.size,
        })
    }

    /// `x: [N, 1, size, size]`. Dropout is active only on training graphs.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        x: Var,
        r: &mut ChaCha8Rng,
    ) -> Result<Encoded> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] != self.size || s[3] != self.size {
            return Err(Error::Contract(format!(
                "encoder expects [N, 1, {0}, {0}], got {s:?}",
                self.size
            )));
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, ps, h)?;
        }
        let tokens = h;
        // The projection head works per cell, so the embedding stays spatially aligned and
        // the similarity of two embeddings compares the same map locations.
        let h = self.head1.forward(g, ps, h)?;
        let h = g.relu(h);
        let h = dropout(g, h, self.dropout, r)?;
        let h = self.head2.forward(g, ps, h)?;
        let n = s[0];
        let flat_len = g.value(h).len() / n;
        let h = g.reshape(h, &[n, flat_len])?;
        let emb = g.l2_normalize_rows(h)?;
        Ok(Encoded { tokens, emb })
    }
}

/// Map encoder and trajectory encoder sharing one parameter set (`map.*`, `traj.*`).
#[derive(Debug, Clone)]
pub struct Cmtp {
    pub arch: CmtpArch,
    pub map: Encoder,
    pub traj: Encoder,
}

impl Cmtp {
    pub fn new(arch: CmtpArch, seed: u64) -> Result<(Self, ParamSet)> {
        let mut ps = ParamSet::new();
        let mut r = rng(seed);
        let map = Encoder::new(&mut ps, &mut r, "map", &arch)?;
        let traj = Encoder::new(&mut ps, &mut r, "traj", &arch)?;
        Ok((Self { arch, map, traj }, ps))
    }

    pub fn load(blob: &Path) -> Result<(Self, ParamSet)> {
        let (_, manifest) = nn::load_model(blob, "pretrain-cmtp")?;
        let arch: CmtpArch = serde_json::from_value(manifest.meta.clone())?;
        let (net, mut ps) = Self::new(arch, 0)?;
        load_into(&mut ps, blob)?;
        Ok((net, ps))
    }
}

/// In-batch InfoNCE, map to trajectory: mean over rows of
/// `-log softmax_j(<m_i, t_j> / mu)[i]`. Inputs are unit-norm `[B, D]` embeddings.
pub fn cmtp_loss<T: Scalar>(g: &mut Graph<T>, maps: Var, trajs: Var, mu: f64) -> Result<Var> {
    if !(mu > 0.0) {
        return Err(Error::Config(format!("temperature {mu} must be positive")));
    }
    let (ms, ts) = (g.shape(maps).to_vec(), g.shape(trajs).to_vec());
    if ms.len() != 2 || ms != ts || ms[0] == 0 {
        return Err(Error::Contract(format!("embedding batches {ms:?} vs {ts:?}")));
    }
    let b = ms[0];
    let logits = g.linear(maps, trajs, None)?;
    let logits = g.scale(logits, 1.0 / mu);
    let logp = g.log_softmax(logits)?;
    let eye = (0..b * b)
        .map(|i| if i / b == i % b { T::one() } else { T::zero() })
        .collect();
    let diag = g.mul_const(logp, eye)?;
    let s = g.sum(diag);
    Ok(g.scale(s, -1.0 / b as f64))
}

fn images<'a>(recs: &[&'a Record], trajs: &'a [Vec<f32>]) -> (Vec<Vec<&'a [f32]>>, Vec<Vec<&'a [f32]>>) {
    (
        recs.iter().map(|r| vec![r.gt.as_slice()]).collect(),
        trajs.iter().map(|t| vec![t.as_slice()]).collect(),
    )
}

/// Embeds maps and trajectory images in evaluation mode.
pub fn embed(
    net: &Cmtp,
    ps: &ParamSet,
    maps: &[&[f32]],
    trajs: &[&[f32]],
) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let size = net.arch.size;
    let mut r = rng(0);
    let mut out_m = Vec::new();
    let mut out_t = Vec::new();
    for (mc, tc) in maps.chunks(64).zip(trajs.chunks(64)) {
        let mut g = Graph::<f32>::inference(false);
        let mx = g.input(stack(&mc.iter().map(|m| vec![*m]).collect::<Vec<_>>(), size, size)?);
        let tx = g.input(stack(&tc.iter().map(|t| vec![*t]).collect::<Vec<_>>(), size, size)?);
        let em = net.map.forward(&mut g, ps, mx, &mut r)?.emb;
        let et = net.traj.forward(&mut g, ps, tx, &mut r)?.emb;
        let d = net.arch.d_emb;
        out_m.extend(g.value(em).chunks(d).map(<[f32]>::to_vec));
        out_t.extend(g.value(et).chunks(d).map(<[f32]>::to_vec));
    }
    Ok((out_m, out_t))
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Fraction of maps whose most similar trajectory embedding is their own (ties go to the
/// lower index).
pub fn top1_retrieval(maps: &[Vec<f32>], trajs: &[Vec<f32>]) -> f64 {
    let hits = maps
        .iter()
        .enumerate()
        .filter(|(i, m)| {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for (j, t) in trajs.iter().enumerate() {
                let s = cosine(m, t);
                if s > best.0 {
                    best = (s, j);
                }
            }
            best.1 == *i
        })
        .count();
    hits as f64 / maps.len().max(1) as f64
}

#[derive(Debug, Clone)]
pub struct CmtpRun {
    pub net: Cmtp,
    pub params: ParamSet,
    /// `(epoch, train_loss, val_loss)`
    pub curve: Vec<(usize, f64, Option<f64>)>,
    pub best_epoch: usize,
    /// Record ids used for gradient steps; the rest of the input went to validation.
    pub fit_ids: Vec<usize>,
}

fn batch_loss(
    net: &Cmtp,
    ps: &ParamSet,
    recs: &[&Record],
    trajs: &[Vec<f32>],
    mu: f64,
    training: bool,
    r: &mut ChaCha8Rng,
) -> Result<(Graph<f32>, Var)> {
    let size = net.arch.size;
    let (mi, ti) = images(recs, trajs);
    let mut g = if training {
        Graph::new(true)
    } else {
        Graph::inference(false)
    };
    let mx = g.input(stack(&mi, size, size)?);
    let tx = g.input(stack(&ti, size, size)?);
    let em = net.map.forward(&mut g, ps, mx, r)?.emb;
    let et = net.traj.forward(&mut g, ps, tx, r)?.emb;
    let loss = cmtp_loss(&mut g, em, et, mu)?;
    Ok((g, loss))
}

/// Trains both encoders jointly on the training split, holding back `val_frac` of it for
/// early stopping. Trajectory images are drawn from a random CSP level each time a record
/// is visited. Training stops once validation loss has not improved for `patience` epochs;
/// the weights at that point are returned.
pub fn train_cmtp(train: &[&Record], cfg: &CmtpConfig, seed: u64) -> Result<CmtpRun> {
    if train.len() < cfg.batch {
        return Err(Error::Config(format!(
            "{} training records cannot fill a batch of {}",
            train.len(),
            cfg.batch
        )));
    }
    let size = train[0].size;
    let arch = CmtpArch {
        size,
        d_emb: cfg.d_emb,
        dropout: cfg.dropout,
    };
    let (net, mut ps) = Cmtp::new(arch, mix(seed, 1))?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut r = rng(mix(seed, 2));
    order.shuffle(&mut r);
    let n_val = ((train.len() as f64 * cfg.val_frac).round() as usize).min(train.len() - cfg.batch);
    let n_val = if n_val == 1 { 0 } else { n_val };
    let val: Vec<&Record> = order[..n_val].iter().map(|&i| train[i]).collect();
    let fit: Vec<&Record> = order[n_val..].iter().map(|&i| train[i]).collect();
    let val_trajs = val
        .iter()
        .map(|rec| rec.traj_image(1.0))
        .collect::<Result<Vec<_>>>()?;

    let mut adam = AdamState::new(&ps);
    let mut best = (f64::INFINITY, 0usize);
    let mut curve = Vec::new();
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..fit.len()).collect();
        idx.shuffle(&mut r);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in idx.chunks(cfg.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let recs: Vec<&Record> = chunk.iter().map(|&i| fit[i]).collect();
            let trajs = recs
                .iter()
                .map(|rec| {
                    let (q, _) = &rec.csp[r.random_range(0..rec.csp.len())];
                    rec.traj_image(*q)
                })
                .collect::<Result<Vec<_>>>()?;
            let (mut g, loss) = batch_loss(&net, &ps, &recs, &trajs, cfg.temperature, true, &mut r)?;
            g.backward(loss)?;
            g.accumulate_param_grads(&mut ps)?;
            g.commit_buffers(&mut ps)?;
            adam_step(&mut ps, &mut adam, cfg.lr)?;
            sum += g.scalar_value(loss) as f64;
            batches += 1;
        }
        let train_loss = sum / batches.max(1) as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            let (g, l) = batch_loss(&net, &ps, &val, &val_trajs, cfg.temperature, false, &mut r)?;
            Some(g.scalar_value(l) as f64)
        };
        curve.push((epoch, train_loss, val_loss));
        let score = val_loss.unwrap_or(train_loss);
        if score < best.0 {
            best = (score, epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }
    Ok(CmtpRun {
        net,
        params: ps,
        curve,
        best_epoch: best.1,
        fit_ids: fit.iter().map(|r| r.id).collect(),
    })
}

/// Conditioning extracted by the frozen trajectory encoder for one trajectory image.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajContext {
    /// `[L, token_dim]` row-major spatial tokens.
    pub tokens: Vec<f32>,
    pub emb: Vec<f32>,
}

/// Runs the trajectory encoder (evaluation mode) over trajectory images.
pub fn traj_contexts(net: &Cmtp, ps: &ParamSet, images: &[&[f32]]) -> Result<Vec<TrajContext>> {
    let size = net.arch.size;
    let mut r = rng(0);
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let mut g = Graph::<f32>::inference(false);
        let x = g.input(stack(&chunk.iter().map(|t| vec![*t]).collect::<Vec<_>>(), size, size)?);
        let enc = net.traj.forward(&mut g, ps, x, &mut r)?;
        let s = g.shape(enc.tokens).to_vec();
        let (c, l) = (s[1], s[2] * s[3]);
        let tv = g.value(enc.tokens);
        let ev = g.value(enc.emb);
        let d = net.arch.d_emb;
        for n in 0..s[0] {
            let mut tokens = vec![0.0f32; l * c];
            for ch in 0..c {
                for p in 0..l {
                    tokens[p * c + ch] = tv[(n * c + ch) * l + p];
                }
            }
            out.push(TrajContext {
                tokens,
                emb: ev[n * d..(n + 1) * d].to_vec(),
            });
        }
    }
    Ok(out)
}

pub fn context_tensors<T: Scalar>(ctx: &[&TrajContext], token_dim: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = ctx.len();
    let l = ctx[0].tokens.len() / token_dim;
    let d = ctx[0].emb.len();
    let cv = |v: &f32| T::from_f64_lossy(*v as f64);
    let tokens = Tensor::new(&[n, l, token_dim], ctx.iter().flat_map(|c| c.tokens.iter().map(cv)).collect())?;
    let emb = Tensor::new(&[n, d], ctx.iter().flat_map(|c| c.emb.iter().map(cv)).collect())?;
    Ok((tokens, emb))
}
