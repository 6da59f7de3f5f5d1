//! Training stages shared by the command line and the test suites. Each stage has an
//! in-memory form and writes its outputs into a directory with the effective config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cmtp::{traj_contexts, train_cmtp, Cmtp, CmtpRun, TrajContext};
use crate::cn::{build_cn_input, gt_confidence, train_cn, CnArch, CnExample, CnRun};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::io::{read_pgm, write_map, Image, MapSidecar};
use crate::mpn::{sample_prediction, train_mpn, Example, MpnArch, MpnNet, MpnRun, Request};
use crate::nn::{self, save_model};
use crate::seeds::mix;
use crate::worldgen::{Dataset, Record, Split};

/// Seed streams of the stages, so changing one stage never perturbs another.
pub mod stream {
    pub const CMTP: u64 = 0xC317;
    pub const MPN: u64 = 0x3B9;
    pub const DPM: u64 = 0xD93;
    pub const CN: u64 = 0xC9;
    pub const EVAL: u64 = 0xE7A1;
}

/// Writes the effective config next to a stage's outputs.
pub fn echo_config(cfg: &Config, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), cfg.to_json())?;
    Ok(())
}

pub fn run_cmtp(cfg: &Config, ds: &Dataset) -> Result<CmtpRun> {
    let train = ds.split(Split::Train);
    train_cmtp(&train, &cfg.cmtp, mix(cfg.seed, stream::CMTP))
}

pub fn save_cmtp(cfg: &Config, run: &CmtpRun, dir: &Path) -> Result<()> {
    echo_config(cfg, dir)?;
    save_model(&run.params, &dir.join("cmtp.bin"), &cfg.hash(), cfg.seed, &run.net.arch)?;
    nn::write_curve(&dir.join("cmtp_curve.csv"), ["epoch", "train_loss", "val_loss"], &run.curve)
}

/// Trajectory contexts for every record at every CSP level, `[record][level]`.
pub fn record_contexts(net: &Cmtp, ps: &fourcnet_numerics::ParamSet, recs: &[&Record]) -> Result<Vec<Vec<TrajContext>>> {
    let mut images = Vec::new();
    for r in recs {
        for (q, _) in &r.csp {
            images.push(r.traj_image(*q)?);
        }
    }
    let refs: Vec<&[f32]> = images.iter().map(Vec::as_slice).collect();
    let flat = traj_contexts(net, ps, &refs)?;
    let mut it = flat.into_iter();
    Ok(recs
        .iter()
        .map(|r| (0..r.csp.len()).map(|_| it.next().expect("one context per image")).collect())
        .collect())
}

pub fn mask_planes(recs: &[&Record]) -> Vec<Vec<f32>> {
    recs.iter().map(|r| nn::mask_plane(&r.masked.mask)).collect()
}

/// Trains the prediction network on the training split with the frozen trajectory encoder.
pub fn run_mpn(cfg: &Config, ds: &Dataset, cmtp: &Cmtp, cmtp_ps: &fourcnet_numerics::ParamSet) -> Result<MpnRun> {
    let train = ds.split(Split::Train);
    let ctx = if cfg.mpn.use_encoder {
        Some(record_contexts(cmtp, cmtp_ps, &train)?)
    } else {
        None
    };
    let masks = mask_planes(&train);
    let examples: Vec<Vec<Example>> = train
        .iter()
        .enumerate()
        .map(|(i, r)| {
            (0..r.csp.len())
                .map(|l| Example {
                    gt: &r.gt,
                    obs: &r.masked.observed,
                    mask: &masks[i],
                    ctx: ctx.as_ref().map(|c| &c[i][l]),
                })
                .collect()
        })
        .collect();
    let arch = MpnArch::from_config(&cfg.mpn, ds.config.size, cmtp.arch.token_dim(), cmtp.arch.d_emb);
    train_mpn(arch, &examples, &cfg.mpn, mix(cfg.seed, stream::MPN))
}

pub fn save_mpn(cfg: &Config, run: &MpnRun, dir: &Path) -> Result<()> {
    echo_config(cfg, dir)?;
    save_model(&run.online, &dir.join("mpn.bin"), &cfg.hash(), cfg.seed, &run.net.arch)?;
    let rows: Vec<(usize, f64, Option<f64>)> = run.losses.iter().enumerate().map(|(k, &l)| (k, l, None)).collect();
    nn::write_curve(&dir.join("mpn_curve.csv"), ["step", "train_loss", "val_loss"], &rows)
}

/// One prediction of the prediction-confidence dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DpmEntry {
    pub record: usize,
    pub q: f64,
    pub split: Split,
    pub pred: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DpmIndexEntry {
    file: String,
    record: usize,
    q: f64,
    split: Split,
}

/// Predictions for `cn.dpm_count` (record, CSP level) pairs cycling over the training split,
/// plus one held-out prediction per test record.
pub fn run_dpm(cfg: &Config, ds: &Dataset, cmtp: &Cmtp, cmtp_ps: &fourcnet_numerics::ParamSet, mpn: &MpnNet, mpn_ps: &fourcnet_numerics::ParamSet) -> Result<Vec<DpmEntry>> {
    let mut jobs: Vec<(&Record, usize)> = Vec::new();
    let train = ds.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("dataset has no training records".into()));
    }
    for k in 0..cfg.cn.dpm_count {
        let r = train[k % train.len()];
        jobs.push((r, (k / train.len()) % r.csp.len()));
    }
    for (k, r) in ds.split(Split::Test).into_iter().enumerate() {
        jobs.push((r, k % r.csp.len()));
    }
    let ctx = if mpn.arch.use_encoder {
        let imgs = jobs
            .iter()
            .map(|(r, l)| r.traj_image(r.csp[*l].0))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f32]> = imgs.iter().map(Vec::as_slice).collect();
        Some(traj_contexts(cmtp, cmtp_ps, &refs)?)
    } else {
        None
    };
    let reqs: Vec<Request> = jobs
        .iter()
        .enumerate()
        .map(|(k, (r, _))| Request {
            obs: &r.masked.observed,
            mask: &r.masked.mask,
            ctx: ctx.as_ref().map(|c| &c[k]),
        })
        .collect();
    let preds = sample_prediction(mpn, mpn_ps, &reqs, cfg.cn.dpm_t_total, mix(cfg.seed, stream::DPM))?;
    Ok(jobs
        .into_iter()
        .zip(preds)
        .map(|((r, l), pred)| DpmEntry {
            record: r.id,
            q: r.csp[l].0,
            split: r.split,
            pred,
        })
        .collect())
}

pub fn save_dpm(cfg: &Config, ds: &Dataset, dpm: &[DpmEntry], dir: &Path) -> Result<()> {
    echo_config(cfg, dir)?;
    let c = &ds.config;
    let side = MapSidecar::new("prediction", c.l_min, c.l_max, c.cell_size());
    let mut index = Vec::new();
    for (k, e) in dpm.iter().enumerate() {
        let file = format!("p{k:05}.pgm");
        write_map(&dir.join(&file), &Image::new(c.size, c.size, e.pred.clone())?, &side)?;
        index.push(DpmIndexEntry {
            file,
            record: e.record,
            q: e.q,
            split: e.split,
        });
    }
    fs::write(dir.join("dpm.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_dpm(dir: &Path) -> Result<Vec<DpmEntry>> {
    let p = dir.join("dpm.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::Missing(format!("{}: {e}; run build-dpm first", p.display())))?;
    let index: Vec<DpmIndexEntry> = serde_json::from_str(&text)?;
    index
        .into_iter()
        .map(|e| {
            Ok(DpmEntry {
                pred: read_pgm(&dir.join(&e.file))?.data,
                record: e.record,
                q: e.q,
                split: e.split,
            })
        })
        .collect()
}

/// Confidence-network examples `(train, held_out)` built from prediction entries.
pub fn cn_examples(cfg: &Config, ds: &Dataset, dpm: &[DpmEntry]) -> Result<(Vec<CnExample>, Vec<CnExample>)> {
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for e in dpm {
        let r = ds
            .records
            .iter()
            .find(|r| r.id == e.record)
            .ok_or_else(|| Error::Contract(format!("prediction refers to unknown record {}", e.record)))?;
        let ex = CnExample {
            input: build_cn_input(&e.pred, &r.traj_image(e.q)?, &r.masked.mask)?,
            target: gt_confidence(&e.pred, &r.gt, cfg.cn.threshold)?,
        };
        match e.split {
            Split::Train => tr.push(ex),
            Split::Test => te.push(ex),
        }
    }
    Ok((tr, te))
}

pub fn run_cn(cfg: &Config, ds: &Dataset, dpm: &[DpmEntry]) -> Result<CnRun> {
    let (tr, te) = cn_examples(cfg, ds, dpm)?;
    train_cn(CnArch::from_config(&cfg.cn, ds.config.size), &tr, &te, &cfg.cn, mix(cfg.seed, stream::CN))
}

pub fn save_cn(cfg: &Config, run: &CnRun, dir: &Path) -> Result<()> {
    echo_config(cfg, dir)?;
    save_model(&run.params, &dir.join("cn.bin"), &cfg.hash(), cfg.seed, &run.net.arch)?;
    nn::write_curve(&dir.join("cn_curve.csv"), ["epoch", "train_loss", "val_loss"], &run.curve)
}
