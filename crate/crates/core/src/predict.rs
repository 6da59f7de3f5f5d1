//! Map predictors used by exploration and evaluation: the learned pipeline (trajectory
//! encoder, consistency sampler, confidence network) and the two non-learned baselines.

use std::path::Path;
use std::time::Instant;

use fourcnet_numerics::ParamSet;

use crate::cmtp::{traj_contexts, Cmtp, TrajContext};
use crate::cn::{build_cn_input, CnNet};
use crate::error::{Error, Result};
use crate::grid::{idx, OBSTACLE_LEVEL};
use crate::mpn::{sample_prediction, MpnNet, Request};

/// Value written into unknown cells by the non-predictive baseline.
pub const NPE_FILL: f32 = 0.4;

/// Fills unknown cells with a fixed traversable value; confidence is uniform.
pub fn predict_npe(obs: &[f32], mask: &[bool]) -> Result<(Vec<f32>, Vec<f32>)> {
    if obs.len() != mask.len() {
        return Err(Error::Contract("observation and mask sizes differ".into()));
    }
    let map = obs
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v } else { NPE_FILL })
        .collect();
    Ok((map, vec![1.0; obs.len()]))
}

/// Index of the database map closest to `obs` on observed cells (lowest index on ties).
pub fn db_lookup(obs: &[f32], mask: &[bool], database: &[Vec<f32>]) -> Result<usize> {
    if database.is_empty() {
        return Err(Error::Config("database predictor needs at least one map".into()));
    }
    let mut best = (f64::INFINITY, 0);
    for (j, m) in database.iter().enumerate() {
        if m.len() != obs.len() {
            return Err(Error::Contract(format!("database map {j} has the wrong size")));
        }
        let (mut s, mut n) = (0.0, 0usize);
        for i in 0..obs.len() {
            if mask[i] {
                let d = m[i] as f64 - obs[i] as f64;
                s += d * d;
                n += 1;
            }
        }
        let e = if n == 0 { 0.0 } else { s / n as f64 };
        if e < best.0 {
            best = (e, j);
        }
    }
    Ok(best.1)
}

/// 5x5 Gaussian weights, sigma 1.
fn gauss5() -> [[f64; 5]; 5] {
    let mut k = [[0.0; 5]; 5];
    for (dy, row) in k.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let (x, y) = (dx as f64 - 2.0, dy as f64 - 2.0);
            *v = (-(x * x + y * y) / 2.0).exp();
        }
    }
    k
}

/// Database retrieval baseline: unknown cells come from the closest database map, then
/// unknown cells within two cells of the mask boundary are Gaussian-blended with their
/// surroundings. Observed cells are never changed.
pub fn predict_db(obs: &[f32], mask: &[bool], width: usize, database: &[Vec<f32>]) -> Result<(Vec<f32>, Vec<f32>)> {
    let j = db_lookup(obs, mask, database)?;
    let height = obs.len() / width;
    let fused: Vec<f32> = (0..obs.len())
        .map(|i| if mask[i] { obs[i] } else { database[j][i] })
        .collect();
    let k = gauss5();
    let mut out = fused.clone();
    for y in 0..height {
        for x in 0..width {
            let i = idx(width, (x, y));
            if mask[i] {
                continue;
            }
            let mut near_boundary = false;
            let (mut s, mut w) = (0.0, 0.0);
            for dy in 0..5 {
                for dx in 0..5 {
                    let (nx, ny) = (x as isize + dx as isize - 2, y as isize + dy as isize - 2);
                    if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                        continue;
                    }
                    let n = idx(width, (nx as usize, ny as usize));
                    near_boundary |= mask[n];
                    s += k[dy][dx] * fused[n] as f64;
                    w += k[dy][dx];
                }
            }
            if near_boundary {
                out[i] = (s / w) as f32;
            }
        }
    }
    Ok((out, vec![1.0; obs.len()]))
}

/// Wall-clock seconds per stage of one learned prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timing {
    pub encode_s: f64,
    pub sample_s: f64,
    pub cn_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub map: Vec<f32>,
    /// Per-cell uncertainty; all ones when no confidence network is used.
    pub confidence: Vec<f32>,
    pub timing: Timing,
}

/// One input to the learned pipeline.
#[derive(Debug, Clone, Copy)]
pub struct Input<'a> {
    pub obs: &'a [f32],
    pub mask: &'a [bool],
    pub traj: &'a [f32],
}

/// Trained networks of the full pipeline.
pub struct Models {
    pub cmtp: Cmtp,
    pub cmtp_ps: ParamSet,
    pub mpn: MpnNet,
    pub mpn_ps: ParamSet,
    pub cn: Option<(CnNet, ParamSet)>,
}

impl Models {
    pub fn load(cmtp: &Path, mpn: &Path, cn: Option<&Path>) -> Result<Self> {
        let (c, cps) = Cmtp::load(cmtp)?;
        let (m, mps) = MpnNet::load(mpn)?;
        let cn = cn.map(CnNet::load).transpose()?;
        let models = Self {
            cmtp: c,
            cmtp_ps: cps,
            mpn: m,
            mpn_ps: mps,
            cn,
        };
        models.check()?;
        Ok(models)
    }

    /// Fails when the networks disagree on resolution or conditioning width.
    pub fn check(&self) -> Result<()> {
        let size = self.mpn.arch.size;
        if self.cmtp.arch.size != size || self.cn.as_ref().is_some_and(|(c, _)| c.arch.size != size) {
            return Err(Error::Config("checkpoints were trained at different map sizes".into()));
        }
        if self.mpn.arch.use_encoder
            && (self.mpn.arch.d_emb != self.cmtp.arch.d_emb
                || self.mpn.arch.token_dim != self.cmtp.arch.token_dim())
        {
            return Err(Error::Config("MPN conditioning does not match the trajectory encoder".into()));
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.mpn.arch.size
    }

    /// Runs the pipeline on a batch. Timing of each prediction is the batch time divided
    /// evenly. `use_cn = false` leaves the confidence at one.
    pub fn predict(&self, inputs: &[Input], t_total: usize, seed: u64, use_cn: bool) -> Result<Vec<Prediction>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let hw = self.size() * self.size();
        for i in inputs {
            if i.obs.len() != hw || i.mask.len() != hw || i.traj.len() != hw {
                return Err(Error::Contract(format!("prediction input does not match map size {}", self.size())));
            }
        }
        let start = Instant::now();
        let ctx: Option<Vec<TrajContext>> = if self.mpn.arch.use_encoder {
            let imgs: Vec<&[f32]> = inputs.iter().map(|i| i.traj).collect();
            Some(traj_contexts(&self.cmtp, &self.cmtp_ps, &imgs)?)
        } else {
            None
        };
        let t_enc = start.elapsed().as_secs_f64();
        let reqs: Vec<Request> = inputs
            .iter()
            .enumerate()
            .map(|(k, i)| Request {
                obs: i.obs,
                mask: i.mask,
                ctx: ctx.as_ref().map(|c| &c[k]),
            })
            .collect();
        let s0 = Instant::now();
        let maps = sample_prediction(&self.mpn, &self.mpn_ps, &reqs, t_total, seed)?;
        let t_sample = s0.elapsed().as_secs_f64();
        let c0 = Instant::now();
        let conf = match (&self.cn, use_cn) {
            (Some((net, ps)), true) => {
                let x = maps
                    .iter()
                    .zip(inputs)
                    .map(|(m, i)| build_cn_input(m, i.traj, i.mask))
                    .collect::<Result<Vec<_>>>()?;
                net.predict(ps, &x)?
            }
            (None, true) => return Err(Error::Missing("confidence network checkpoint not loaded".into())),
            (_, false) => vec![vec![1.0; hw]; inputs.len()],
        };
        let t_cn = c0.elapsed().as_secs_f64();
        let n = inputs.len() as f64;
        let timing = Timing {
            encode_s: t_enc / n,
            sample_s: t_sample / n,
            cn_s: if use_cn { t_cn / n } else { 0.0 },
            total_s: start.elapsed().as_secs_f64() / n,
        };
        Ok(maps
            .into_iter()
            .zip(conf)
            .map(|(map, confidence)| Prediction { map, confidence, timing })
            .collect())
    }
}

/// Cells a prediction marks as obstacles.
pub fn obstacle_estimate(map: &[f32]) -> Vec<bool> {
    map.iter().map(|&v| v >= OBSTACLE_LEVEL).collect()
}
