//! Comparison harness: predictor metrics on a test split, exploration episodes over a grid
//! of budgets and areas, a per-stage runtime breakdown and architecture ablations.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::cn::{auroc, evaluate_loss, train_cn, CnArch};
use crate::config::{Config, PredictorKind, RegionMode};
use crate::error::{Error, Result};
use crate::grid::OBSTACLE_LEVEL;
use crate::metrics::{mean_sd, mse, oiou, ssim, vts};
use crate::par::par_map;
use crate::pipeline::{self, stream, DpmEntry};
use crate::predict::{predict_db, predict_npe, Input, Models};
use crate::seeds::{mix, mix3};
use crate::sim::{run_episode, Predictor, Snapshots, World};
use crate::worldgen::{Dataset, Record, Split};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRow {
    pub record_id: usize,
    pub predictor: String,
    pub csp: f64,
    pub n_robots: usize,
    pub mse: f64,
    pub oiou: f64,
    pub ssim: f64,
    pub vts: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub predictor: String,
    pub csp: f64,
    pub n: usize,
    pub mse_mean: f64,
    pub mse_sd: f64,
    pub oiou_mean: f64,
    pub oiou_sd: f64,
    pub ssim_mean: f64,
    pub ssim_sd: f64,
    pub vts_mean: f64,
    pub vts_sd: f64,
    pub wall_clock_s: f64,
}

/// Metrics of one prediction against its record.
pub fn score(pred: &[f32], rec: &Record, region: RegionMode) -> Result<(f64, f64, f64, f64)> {
    let unknown: Vec<bool> = rec.masked.mask.iter().map(|m| !m).collect();
    let reg = match region {
        RegionMode::Predicted => Some(unknown.as_slice()),
        RegionMode::Whole => None,
    };
    Ok((
        mse(pred, &rec.gt, reg)?,
        oiou(pred, &rec.gt, reg, OBSTACLE_LEVEL)?,
        ssim(pred, &rec.gt, rec.size)?,
        vts(pred, rec.size, &rec.trajectories)?,
    ))
}

/// Every configured predictor on every test record at every CSP level. Returns the
/// per-sample rows and the mean wall-clock seconds per prediction for each predictor.
pub fn evaluate_predictions(
    cfg: &Config,
    recs: &[&Record],
    models: Option<&Models>,
    database: &[Vec<f32>],
    t_total: usize,
) -> Result<(Vec<SampleRow>, Vec<(PredictorKind, f64)>)> {
    let mut rows = Vec::new();
    let mut clocks = Vec::new();
    let levels: Vec<f64> = recs.first().map(|r| r.csp.iter().map(|c| c.0).collect()).unwrap_or_default();
    for &kind in &cfg.eval.predictors {
        let mut wall = 0.0;
        let mut count = 0usize;
        for (li, &q) in levels.iter().enumerate() {
            let t0 = Instant::now();
            let preds: Vec<Vec<f32>> = match kind {
                PredictorKind::Npe => recs
                    .iter()
                    .map(|r| predict_npe(&r.masked.observed, &r.masked.mask).map(|p| p.0))
                    .collect::<Result<_>>()?,
                PredictorKind::Db => recs
                    .iter()
                    .map(|r| predict_db(&r.masked.observed, &r.masked.mask, r.size, database).map(|p| p.0))
                    .collect::<Result<_>>()?,
                PredictorKind::Fourcnet | PredictorKind::FourcnetNoCn => {
                    let m = models.ok_or_else(|| Error::Missing("learned predictors need trained checkpoints".into()))?;
                    let trajs = recs.iter().map(|r| r.traj_image(q)).collect::<Result<Vec<_>>>()?;
                    let inputs: Vec<Input> = recs
                        .iter()
                        .zip(&trajs)
                        .map(|(r, t)| Input {
                            obs: &r.masked.observed,
                            mask: &r.masked.mask,
                            traj: t,
                        })
                        .collect();
                    let use_cn = kind == PredictorKind::Fourcnet && m.cn.is_some();
                    m.predict(&inputs, t_total, mix3(cfg.seed, stream::EVAL, li as u64), use_cn)?
                        .into_iter()
                        .map(|p| p.map)
                        .collect()
                }
            };
            wall += t0.elapsed().as_secs_f64();
            count += preds.len();
            for (r, p) in recs.iter().zip(&preds) {
                let (m, o, s, v) = score(p, r, cfg.eval.region)?;
                rows.push(SampleRow {
                    record_id: r.id,
                    predictor: kind.name().into(),
                    csp: q,
                    n_robots: r.trajectories.len(),
                    mse: m,
                    oiou: o,
                    ssim: s,
                    vts: v,
                });
            }
        }
        clocks.push((kind, wall / count.max(1) as f64));
    }
    Ok((rows, clocks))
}

pub fn aggregate(rows: &[SampleRow], clocks: &[(PredictorKind, f64)]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|k| k.0 == r.predictor && k.1 == r.csp) {
            keys.push((r.predictor.clone(), r.csp));
        }
    }
    keys.into_iter()
        .map(|(p, q)| {
            let sel: Vec<&SampleRow> = rows.iter().filter(|r| r.predictor == p && r.csp == q).collect();
            let col = |f: fn(&SampleRow) -> f64| mean_sd(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (mse_mean, mse_sd) = col(|r| r.mse);
            let (oiou_mean, oiou_sd) = col(|r| r.oiou);
            let (ssim_mean, ssim_sd) = col(|r| r.ssim);
            let (vts_mean, vts_sd) = col(|r| r.vts);
            AggregateRow {
                wall_clock_s: clocks.iter().find(|c| c.0.name() == p).map_or(f64::NAN, |c| c.1),
                predictor: p,
                csp: q,
                n: sel.len(),
                mse_mean,
                mse_sd,
                oiou_mean,
                oiou_sd,
                ssim_mean,
                ssim_sd,
                vts_mean,
                vts_sd,
            }
        })
        .collect()
}

/// Mean of one metric for a predictor, optionally restricted to one CSP level.
pub fn mean_of(rows: &[SampleRow], predictor: PredictorKind, csp: Option<f64>, f: fn(&SampleRow) -> f64) -> f64 {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.predictor == predictor.name() && csp.is_none_or(|q| r.csp == q))
        .map(f)
        .collect();
    mean_sd(&v).0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRow {
    pub method: String,
    pub env_size: f64,
    pub budget: f64,
    pub seed: u64,
    pub coverage_pct: f64,
}

/// Episodes for every (area, budget, seed, method); worlds depend only on the seed index.
pub fn run_episode_grid(
    cfg: &Config,
    methods: &[PredictorKind],
    models: Option<&Models>,
    database: Option<&[Vec<f32>]>,
    jobs: usize,
) -> Result<Vec<EpisodeRow>> {
    let mut grid = Vec::new();
    for &area in &cfg.eval.areas_m2 {
        for &budget in &cfg.eval.budgets_m {
            for s in 0..cfg.eval.episode_seeds {
                for &m in methods {
                    grid.push((area, budget, s as u64, m));
                }
            }
        }
    }
    let results = par_map(&grid, jobs, |&(area, budget, s, m)| -> Result<EpisodeRow> {
        let mut sc = cfg.sim.clone();
        sc.area_m2 = area;
        sc.budget_m = budget;
        sc.predictor = m;
        let seed = mix3(cfg.seed, stream::EVAL, s);
        let world = World::generate(&cfg.worldgen, &sc, seed)?;
        let pred = Predictor::from_kind(m, models, database)?;
        let log = run_episode(&world, &sc, &pred, seed, Snapshots::default())?;
        Ok(EpisodeRow {
            method: m.name().into(),
            env_size: area,
            budget,
            seed: s,
            coverage_pct: log.final_coverage,
        })
    });
    results.into_iter().collect()
}

/// Mean per-prediction wall-clock of each stage of the learned pipeline.
#[derive(Debug, Clone, Serialize)]
pub struct RuntimeReport {
    pub predictions: usize,
    pub t_total: usize,
    pub trajectory_encode_s: f64,
    pub mpn_sample_s: f64,
    pub cn_forward_s: f64,
    pub end_to_end_s: f64,
    pub sampling_dominates: bool,
}

/// Times single-request predictions (no batching) on up to `n` records.
pub fn runtime_report(models: &Models, recs: &[&Record], n: usize, t_total: usize, seed: u64) -> Result<RuntimeReport> {
    let (mut e, mut s, mut c, mut t) = (0.0, 0.0, 0.0, 0.0);
    let take = recs.len().min(n);
    if take == 0 {
        return Err(Error::Config("runtime report needs at least one record".into()));
    }
    for (i, r) in recs.iter().take(take).enumerate() {
        let traj = r.traj_image(r.csp.last().map_or(1.0, |c| c.0))?;
        let p = models.predict(
            &[Input {
                obs: &r.masked.observed,
                mask: &r.masked.mask,
                traj: &traj,
            }],
            t_total,
            mix(seed, i as u64),
            models.cn.is_some(),
        )?;
        let tm = p[0].timing;
        e += tm.encode_s;
        s += tm.sample_s;
        c += tm.cn_s;
        t += tm.total_s;
    }
    let k = take as f64;
    let (e, s, c, t) = (e / k, s / k, c / k, t / k);
    Ok(RuntimeReport {
        predictions: take,
        t_total,
        trajectory_encode_s: e,
        mpn_sample_s: s,
        cn_forward_s: c,
        end_to_end_s: t,
        sampling_dominates: s > e + c && s > 0.5 * t,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub network: String,
    pub variant: String,
    pub metric: String,
    pub value: f64,
}

/// Short retrains of architecture variants: MPN block count, encoder and attention switches
/// (masked-region MSE and OIOU on the test split), and CN block count (loss and AUROC on the
/// held-out predictions).
pub fn run_ablations(cfg: &Config, ds: &Dataset, models: &Models, dpm: &[DpmEntry], t_total: usize) -> Result<Vec<AblationRow>> {
    let test = ds.split(Split::Test);
    let mut rows = Vec::new();
    let mut variants: Vec<(String, Config)> = Vec::new();
    for blocks in [2, 4, 5] {
        let mut c = cfg.clone();
        c.mpn.blocks = blocks;
        variants.push((format!("blocks_{blocks}"), c));
    }
    let mut c = cfg.clone();
    c.mpn.use_encoder = false;
    variants.push(("no_encoder".into(), c));
    let mut c = cfg.clone();
    c.mpn.use_attention = false;
    variants.push(("no_attention".into(), c));
    for (name, mut c) in variants {
        c.mpn.steps = cfg.eval.ablation_steps;
        let run = pipeline::run_mpn(&c, ds, &models.cmtp, &models.cmtp_ps)?;
        let m = Models {
            cmtp: models.cmtp.clone(),
            cmtp_ps: models.cmtp_ps.clone(),
            mpn: run.net,
            mpn_ps: run.online,
            cn: None,
        };
        let mut ec = c.clone();
        ec.eval.predictors = vec![PredictorKind::FourcnetNoCn];
        let (r, _) = evaluate_predictions(&ec, &test, Some(&m), &[], t_total)?;
        for (metric, f) in [("mse", (|r: &SampleRow| r.mse) as fn(&SampleRow) -> f64), ("oiou", |r| r.oiou)] {
            rows.push(AblationRow {
                network: "mpn".into(),
                variant: name.clone(),
                metric: metric.into(),
                value: mean_of(&r, PredictorKind::FourcnetNoCn, None, f),
            });
        }
    }
    let (tr, te) = pipeline::cn_examples(cfg, ds, dpm)?;
    for blocks in [2, 4, 6] {
        let mut c = cfg.cn.clone();
        c.blocks = blocks;
        let run = train_cn(CnArch::from_config(&c, ds.config.size), &tr, &te, &c, mix(cfg.seed, stream::CN))?;
        let loss = evaluate_loss(&run.net, &run.params, &te)?;
        let (scores, labels) = cn_scores(&run.net, &run.params, &te)?;
        rows.push(AblationRow {
            network: "cn".into(),
            variant: format!("blocks_{blocks}"),
            metric: "loss".into(),
            value: loss,
        });
        rows.push(AblationRow {
            network: "cn".into(),
            variant: format!("blocks_{blocks}"),
            metric: "auroc".into(),
            value: auroc(&scores, &labels).unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}

/// Flattened CN outputs and binary error labels over a set of examples.
pub fn cn_scores(
    net: &crate::cn::CnNet,
    ps: &fourcnet_numerics::ParamSet,
    data: &[crate::cn::CnExample],
) -> Result<(Vec<f32>, Vec<bool>)> {
    let inputs: Vec<[Vec<f32>; 3]> = data.iter().map(|e| e.input.clone()).collect();
    let out = net.predict(ps, &inputs)?;
    let scores = out.into_iter().flatten().collect();
    let labels = data.iter().flat_map(|e| e.target.iter().map(|&t| t > 0.5)).collect();
    Ok((scores, labels))
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Map images of the training split, used by the database predictor.
pub fn database(ds: &Dataset) -> Vec<Vec<f32>> {
    ds.split(Split::Train).into_iter().map(|r| r.gt.clone()).collect()
}
