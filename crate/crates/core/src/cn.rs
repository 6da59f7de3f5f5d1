//! Confidence network: a residual convolutional autoencoder that maps
//! `[predicted map, trajectory image, mask]` to a per-cell probability that the prediction is wrong.

use std::path::Path;

use fourcnet_numerics::layers::{Conv2d, ConvBlock, UpBlock};
use fourcnet_numerics::{adam_step, load_into, AdamState, Graph, ParamSet, Scalar, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::CnConfig;
use crate::error::{Error, Result};
use crate::grid::OBSTACLE_LEVEL;
use crate::nn::{self, stack};
use crate::seeds::{mix, rng};

/// Stacks the three input planes in the fixed order `[pred, traj, mask]`.
pub fn build_cn_input(pred: &[f32], traj: &[f32], mask: &[bool]) -> Result<[Vec<f32>; 3]> {
    if pred.len() != traj.len() || pred.len() != mask.len() {
        return Err(Error::Contract(format!(
            "confidence input planes disagree: {}, {}, {}",
            pred.len(),
            traj.len(),
            mask.len()
        )));
    }
    Ok([pred.to_vec(), traj.to_vec(), nn::mask_plane(mask)])
}

/// 1 where the prediction is wrong: off by more than `threshold` or on the other side of
/// the obstacle level.
pub fn gt_confidence(pred: &[f32], gt: &[f32], threshold: f64) -> Result<Vec<f32>> {
    if pred.len() != gt.len() {
        return Err(Error::Contract("prediction and ground truth sizes differ".into()));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&p, &h)| {
            let far = (p as f64 - h as f64).abs() > threshold;
            let class = (p >= OBSTACLE_LEVEL) != (h >= OBSTACLE_LEVEL);
            if far || class {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnArch {
    pub size: usize,
    pub channels: Vec<usize>,
}

impl CnArch {
    pub fn from_config(c: &CnConfig, size: usize) -> Self {
        Self {
            size,
            channels: c.channels[..c.blocks].to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CnNet {
    pub arch: CnArch,
    enc: Vec<ConvBlock>,
    ups: Vec<UpBlock>,
    head: Conv2d,
}

impl CnNet {
    pub fn new(arch: CnArch, seed: u64) -> Result<(Self, ParamSet)> {
        let n = arch.channels.len();
        if n < 2 {
            return Err(Error::Config("confidence network needs at least two blocks".into()));
        }
        if arch.size % (1 << (n - 1)) != 0 {
            return Err(Error::Config(format!("map size {} not divisible by 2^{}", arch.size, n - 1)));
        }
        let mut ps = ParamSet::new();
        let mut r = rng(seed);
        let ch = &arch.channels;
        let mut enc = Vec::new();
        for l in 0..n {
            let (c_in, stride) = if l == 0 { (3, 1) } else { (ch[l - 1], 2) };
            enc.push(ConvBlock::new(&mut ps, &mut r, &format!("enc{l}"), c_in, ch[l], stride)?);
        }
        let mut ups = Vec::new();
        for l in 0..n - 1 {
            ups.push(UpBlock::new(&mut ps, &mut r, &format!("up{l}"), ch[l + 1], ch[l])?);
        }
        let head = Conv2d::new(&mut ps, &mut r, "head", ch[0], 1, 3, 1, 1, true)?;
        Ok((Self { arch, enc, ups, head }, ps))
    }

    pub fn load(blob: &Path) -> Result<(Self, ParamSet)> {
        let (_, manifest) = nn::load_model(blob, "train-cn")?;
        let arch: CnArch = serde_json::from_value(manifest.meta.clone())?;
        let (net, mut ps) = Self::new(arch, 0)?;
        load_into(&mut ps, blob)?;
        Ok((net, ps))
    }

    /// `x: [N, 3, H, W]` to sigmoid uncertainty `[N, 1, H, W]`. Skips are added, not concatenated.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != self.arch.size || s[3] != self.arch.size {
            return Err(Error::Contract(format!(
                "confidence network expects [N, 3, {0}, {0}], got {s:?}",
                self.arch.size
            )));
        }
        let mut skips = Vec::new();
        let mut h = x;
        for b in &self.enc {
            h = b.forward(g, ps, h)?;
            skips.push(h);
        }
        for l in (0..self.ups.len()).rev() {
            let u = self.ups[l].forward(g, ps, h)?;
            h = g.add(u, skips[l])?;
        }
        let y = self.head.forward(g, ps, h)?;
        Ok(g.sigmoid(y))
    }

    /// Evaluation-mode uncertainty maps for a list of three-plane inputs.
    pub fn predict(&self, ps: &ParamSet, inputs: &[[Vec<f32>; 3]]) -> Result<Vec<Vec<f32>>> {
        let size = self.arch.size;
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(64) {
            let mut g = Graph::<f32>::inference(false);
            let planes: Vec<Vec<&[f32]>> = chunk
                .iter()
                .map(|c| c.iter().map(Vec::as_slice).collect())
                .collect();
            let x = g.input(stack(&planes, size, size)?);
            let y = self.forward(&mut g, ps, x)?;
            out.extend(nn::planes(&g, y));
        }
        Ok(out)
    }
}

/// Mean squared error over all pixels.
pub fn cn_loss<T: Scalar>(g: &mut Graph<T>, c: Var, target: Var) -> Result<Var> {
    if g.shape(c) != g.shape(target) {
        return Err(Error::Contract("confidence and target shapes differ".into()));
    }
    let d = g.sub(c, target)?;
    let d2 = g.mul(d, d)?;
    Ok(g.mean(d2))
}

/// One self-supervised example.
#[derive(Debug, Clone)]
pub struct CnExample {
    pub input: [Vec<f32>; 3],
    pub target: Vec<f32>,
}

pub struct CnRun {
    pub net: CnNet,
    pub params: ParamSet,
    /// `(epoch, train_loss, val_loss)`
    pub curve: Vec<(usize, f64, Option<f64>)>,
}

fn batch_graph(
    net: &CnNet,
    ps: &ParamSet,
    batch: &[&CnExample],
    training: bool,
) -> Result<(Graph<f32>, Var)> {
    let size = net.arch.size;
    let mut g = if training {
        Graph::new(true)
    } else {
        Graph::inference(false)
    };
    let x: Vec<Vec<&[f32]>> = batch
        .iter()
        .map(|e| e.input.iter().map(Vec::as_slice).collect())
        .collect();
    let t: Vec<Vec<&[f32]>> = batch.iter().map(|e| vec![e.target.as_slice()]).collect();
    let xv = g.input(stack(&x, size, size)?);
    let tv = g.input(stack(&t, size, size)?);
    let c = net.forward(&mut g, ps, xv)?;
    let loss = cn_loss(&mut g, c, tv)?;
    Ok((g, loss))
}

/// Mean loss of `ps` over `data` in evaluation mode.
pub fn evaluate_loss(net: &CnNet, ps: &ParamSet, data: &[CnExample]) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in data.chunks(64) {
        let refs: Vec<&CnExample> = chunk.iter().collect();
        let (g, l) = batch_graph(net, ps, &refs, false)?;
        sum += g.scalar_value(l) as f64 * chunk.len() as f64;
    }
    Ok(sum / data.len().max(1) as f64)
}

pub fn train_cn(arch: CnArch, train: &[CnExample], val: &[CnExample], cfg: &CnConfig, seed: u64) -> Result<CnRun> {
    if train.len() < cfg.batch {
        return Err(Error::Config(format!(
            "{} examples cannot fill a batch of {}",
            train.len(),
            cfg.batch
        )));
    }
    let (net, mut ps) = CnNet::new(arch, mix(seed, 1))?;
    let mut adam = AdamState::new(&ps);
    let mut r = rng(mix(seed, 2));
    let mut curve = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut r);
        let (mut sum, mut n) = (0.0, 0);
        for chunk in idx.chunks(cfg.batch) {
            let batch: Vec<&CnExample> = chunk.iter().map(|&i| &train[i]).collect();
            let (mut g, loss) = batch_graph(&net, &ps, &batch, true)?;
            let lv = g.scalar_value(loss) as f64;
            if !lv.is_finite() {
                return Err(Error::Contract(format!("non-finite confidence loss in epoch {epoch}")));
            }
            g.backward(loss)?;
            g.accumulate_param_grads(&mut ps)?;
            g.commit_buffers(&mut ps)?;
            adam_step(&mut ps, &mut adam, cfg.lr)?;
            sum += lv * chunk.len() as f64;
            n += chunk.len();
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(&net, &ps, val)?)
        };
        curve.push((epoch, sum / n as f64, val_loss));
    }
    Ok(CnRun { net, params: ps, curve })
}

/// Area under the ROC curve of `scores` ranking positive `labels`, with tied scores
/// counted as half. `None` when either class is absent.
pub fn auroc(scores: &[f32], labels: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // Sum of positive ranks with average ranks for ties.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    Some((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos as f64 * neg as f64))
}
