use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fourcnet::cmtp::Cmtp;
use fourcnet::config::{Config, PredictorKind};
use fourcnet::eval;
use fourcnet::io::{read_mask, read_pgm, write_map, write_mask, Image, MapSidecar};
use fourcnet::pipeline::{self, stream};
use fourcnet::predict::{Input, Models};
use fourcnet::seeds::mix;
use fourcnet::sim::{run_episode, write_episode, Predictor, Snapshots, World};
use fourcnet::worldgen::{build_dmt, load_dataset, prepare_dir, rasterize, write_dataset, Split};
use fourcnet::{Error, Result};

#[derive(Parser)]
#[command(name = "fourcnet", version, about = "Map prediction and multi-robot exploration pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; all fields optional except `seed`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args, Clone, Default)]
struct Ckpts {
    #[arg(long)]
    cmtp: Option<PathBuf>,
    #[arg(long)]
    mpn: Option<PathBuf>,
    #[arg(long)]
    cn: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a map-trajectory dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overrides `worldgen.count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the trajectory encoder contrastively.
    PretrainCmtp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the map prediction network.
    TrainMpn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cmtp: PathBuf,
    },
    /// Build the predicted-map dataset used to train the confidence network.
    BuildDpm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cmtp: PathBuf,
        #[arg(long)]
        mpn: PathBuf,
    },
    /// Train the confidence network.
    TrainCn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dpm: PathBuf,
    },
    /// Predict one map.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Rasterized trajectory image.
        #[arg(long)]
        traj: PathBuf,
        /// MPN checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Trajectory encoder checkpoint; defaults to `cmtp.bin` in the MPN directory or in `../cmtp/`.
        #[arg(long)]
        cmtp: Option<PathBuf>,
        #[arg(long)]
        cn: Option<PathBuf>,
        #[arg(long)]
        t_total: Option<usize>,
    },
    /// Run one exploration episode.
    Explore {
        #[command(flatten)]
        common: Common,
        /// fourcnet, fourcnet_no_cn, npe or db.
        #[arg(long, value_parser = parse_predictor)]
        predictor: Option<PredictorKind>,
        #[command(flatten)]
        ckpts: Ckpts,
        /// Dataset for the database predictor.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Explore this map instead of a generated one.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        snapshot_every: Option<usize>,
    },
    /// Compare predictors on the test split and in exploration episodes.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        ckpts: Ckpts,
        /// Predicted-map dataset, needed for confidence-network ablations.
        #[arg(long)]
        dpm: Option<PathBuf>,
        #[arg(long)]
        t_total: Option<usize>,
        /// Skip exploration episodes.
        #[arg(long)]
        no_episodes: bool,
    },
    /// Render a dataset record as PGM images.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        record: usize,
    },
}

fn load_config(c: &Common) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::with_seed(
            c.seed
                .ok_or_else(|| Error::Config("pass --config or --seed".into()))?,
        ),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    eprintln!("config hash {}", cfg.hash());
    Ok(cfg)
}

fn load_models(cmtp: Option<&Path>, mpn: Option<&Path>, cn: Option<&Path>) -> Result<Models> {
    let need = |p: Option<&Path>, what: &str| -> Result<PathBuf> {
        p.map(Path::to_path_buf)
            .ok_or_else(|| Error::Missing(format!("--{what} checkpoint is required for learned predictors")))
    };
    Models::load(&need(cmtp, "cmtp")?, &need(mpn, "mpn")?, cn)
}

/// Looks for the encoder checkpoint next to the MPN checkpoint or in a sibling `cmtp/` directory.
fn find_cmtp(mpn: &Path) -> Option<PathBuf> {
    let dir = mpn.parent()?;
    [dir.join("cmtp.bin"), dir.join("../cmtp/cmtp.bin")]
        .into_iter()
        .find(|p| p.exists())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { common, count } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = count {
                cfg.worldgen.count = n;
            }
            let ds = build_dmt(&cfg.worldgen, cfg.seed, cfg.worldgen.count, common.jobs)?;
            write_dataset(&ds, &common.out, common.overwrite)?;
            pipeline::echo_config(&cfg, &common.out)?;
            eprintln!("wrote {} records to {}", ds.records.len(), common.out.display());
        }
        Cmd::PretrainCmtp { common, data } => {
            let cfg = load_config(&common)?;
            let ds = load_dataset(&data)?;
            prepare_dir(&common.out, common.overwrite)?;
            let run = pipeline::run_cmtp(&cfg, &ds)?;
            pipeline::save_cmtp(&cfg, &run, &common.out)?;
            eprintln!("trained {} epochs, best {}", run.curve.len(), run.best_epoch);
        }
        Cmd::TrainMpn { common, data, cmtp } => {
            let cfg = load_config(&common)?;
            let ds = load_dataset(&data)?;
            let (net, ps) = Cmtp::load(&cmtp)?;
            check_size(net.arch.size, ds.config.size)?;
            prepare_dir(&common.out, common.overwrite)?;
            let run = pipeline::run_mpn(&cfg, &ds, &net, &ps)?;
            pipeline::save_mpn(&cfg, &run, &common.out)?;
            eprintln!("trained {} steps", run.losses.len());
        }
        Cmd::BuildDpm { common, data, cmtp, mpn } => {
            let cfg = load_config(&common)?;
            let ds = load_dataset(&data)?;
            let m = Models::load(&cmtp, &mpn, None)?;
            check_size(m.size(), ds.config.size)?;
            prepare_dir(&common.out, common.overwrite)?;
            let dpm = pipeline::run_dpm(&cfg, &ds, &m.cmtp, &m.cmtp_ps, &m.mpn, &m.mpn_ps)?;
            pipeline::save_dpm(&cfg, &ds, &dpm, &common.out)?;
            eprintln!("wrote {} predictions", dpm.len());
        }
        Cmd::TrainCn { common, data, dpm } => {
            let cfg = load_config(&common)?;
            let ds = load_dataset(&data)?;
            let entries = pipeline::load_dpm(&dpm)?;
            prepare_dir(&common.out, common.overwrite)?;
            let run = pipeline::run_cn(&cfg, &ds, &entries)?;
            pipeline::save_cn(&cfg, &run, &common.out)?;
            eprintln!("trained {} epochs", run.curve.len());
        }
        Cmd::Predict { common, obs, mask, traj, ckpt, cmtp, cn, t_total } => {
            let cfg = load_config(&common)?;
            let cmtp = cmtp
                .or_else(|| find_cmtp(&ckpt))
                .ok_or_else(|| Error::Missing("trajectory encoder checkpoint not found; pass --cmtp".into()))?;
            let models = Models::load(&cmtp, &ckpt, cn.as_deref())?;
            let o = read_pgm(&obs)?;
            let (mw, m) = read_mask(&mask)?;
            let t = read_pgm(&traj)?;
            if o.width != models.size() || mw != o.width || t.width != o.width || m.len() != o.data.len() || t.data.len() != o.data.len() {
                return Err(Error::Contract(format!("inputs must all be {0}x{0}", models.size())));
            }
            let t_total = t_total.unwrap_or(cfg.mpn.t_total);
            let p = models
                .predict(&[Input { obs: &o.data, mask: &m, traj: &t.data }], t_total, mix(cfg.seed, stream::EVAL), models.cn.is_some())?
                .pop()
                .expect("one prediction");
            prepare_dir(&common.out, common.overwrite)?;
            pipeline::echo_config(&cfg, &common.out)?;
            let w = &cfg.worldgen;
            let side = MapSidecar::new("prediction", w.l_min, w.l_max, w.extent_m / o.width as f64);
            write_map(&common.out.join("prediction.pgm"), &Image::new(o.width, o.height, p.map)?, &side)?;
            if models.cn.is_some() {
                let side = MapSidecar::new("uncertainty", 0.0, 1.0, w.extent_m / o.width as f64);
                write_map(&common.out.join("uncertainty.pgm"), &Image::new(o.width, o.height, p.confidence)?, &side)?;
            }
            eprintln!("prediction written with t_total {t_total} in {:.3}s", p.timing.total_s);
        }
        Cmd::Explore { common, predictor, ckpts, data, world, snapshot_every } => {
            let mut cfg = load_config(&common)?;
            if let Some(p) = predictor {
                cfg.sim.predictor = p;
            }
            if snapshot_every.is_some() {
                cfg.sim.snapshot_every = snapshot_every;
            }
            let world = match world {
                Some(p) => {
                    let img = read_pgm(&p)?;
                    if img.width != img.height {
                        return Err(Error::Contract("world map must be square".into()));
                    }
                    World::from_image(img.data, img.width, &cfg.worldgen, &cfg.sim)
                }
                None => World::generate(&cfg.worldgen, &cfg.sim, cfg.seed)?,
            };
            let learned = matches!(cfg.sim.predictor, PredictorKind::Fourcnet | PredictorKind::FourcnetNoCn);
            let models = if learned {
                let cn = ckpts.cn.as_deref().filter(|_| cfg.sim.predictor == PredictorKind::Fourcnet);
                Some(load_models(ckpts.cmtp.as_deref(), ckpts.mpn.as_deref(), cn)?)
            } else {
                None
            };
            let database = match (&data, cfg.sim.predictor) {
                (Some(d), PredictorKind::Db) => Some(eval::database(&load_dataset(d)?)),
                _ => None,
            };
            let pred = Predictor::from_kind(cfg.sim.predictor, models.as_ref(), database.as_deref())?;
            prepare_dir(&common.out, common.overwrite)?;
            pipeline::echo_config(&cfg, &common.out)?;
            let snaps = Snapshots {
                dir: Some(common.out.as_path()),
                every: cfg.sim.snapshot_every,
            };
            let log = run_episode(&world, &cfg.sim, &pred, cfg.seed, snaps)?;
            write_episode(&log, &common.out)?;
            eprintln!("coverage {:.2}% after {} ticks", log.final_coverage, log.ticks);
        }
        Cmd::Evaluate { common, data, ckpts, dpm, t_total, no_episodes } => {
            let cfg = load_config(&common)?;
            let ds = load_dataset(&data)?;
            let t_total = t_total.unwrap_or(cfg.mpn.t_total);
            let learned = cfg
                .eval
                .predictors
                .iter()
                .any(|p| matches!(p, PredictorKind::Fourcnet | PredictorKind::FourcnetNoCn));
            let models = if learned || cfg.eval.ablations {
                Some(load_models(ckpts.cmtp.as_deref(), ckpts.mpn.as_deref(), ckpts.cn.as_deref())?)
            } else {
                None
            };
            if let Some(m) = &models {
                check_size(m.size(), ds.config.size)?;
            }
            let mut test = ds.split(Split::Test);
            if let Some(n) = cfg.eval.max_records {
                test.truncate(n);
            }
            let db = eval::database(&ds);
            prepare_dir(&common.out, common.overwrite)?;
            pipeline::echo_config(&cfg, &common.out)?;
            let (rows, clocks) = eval::evaluate_predictions(&cfg, &test, models.as_ref(), &db, t_total)?;
            eval::write_rows(&common.out.join("per_sample.csv"), &rows)?;
            let agg = eval::aggregate(&rows, &clocks);
            eval::write_rows(&common.out.join("aggregate.csv"), &agg)?;
            for a in &agg {
                eprintln!(
                    "{:<15} q={:.2} mse {:8.1} oiou {:.3} ssim {:.3} vts {:.3}",
                    a.predictor, a.csp, a.mse_mean, a.oiou_mean, a.ssim_mean, a.vts_mean
                );
            }
            if !no_episodes {
                let episodes = eval::run_episode_grid(&cfg, &cfg.eval.predictors, models.as_ref(), Some(&db), common.jobs)?;
                eval::write_rows(&common.out.join("episodes.csv"), &episodes)?;
            }
            if let Some(m) = &models {
                let report = eval::runtime_report(m, &test, 16, t_total, mix(cfg.seed, stream::EVAL))?;
                fs::write(common.out.join("runtime.json"), serde_json::to_string_pretty(&report)?)?;
                eprintln!(
                    "runtime per prediction: encode {:.4}s sample {:.4}s cn {:.4}s total {:.4}s",
                    report.trajectory_encode_s, report.mpn_sample_s, report.cn_forward_s, report.end_to_end_s
                );
                if cfg.eval.ablations {
                    let dir = dpm.ok_or_else(|| Error::Missing("ablations need --dpm".into()))?;
                    let entries = pipeline::load_dpm(&dir)?;
                    let rows = eval::run_ablations(&cfg, &ds, m, &entries, t_total)?;
                    eval::write_rows(&common.out.join("ablations.csv"), &rows)?;
                }
            }
        }
        Cmd::Render { common, data, record } => {
            let cfg = load_config(&common)?;
            let ds = load_dataset(&data)?;
            let rec = ds
                .records
                .iter()
                .find(|r| r.id == record)
                .ok_or_else(|| Error::Contract(format!("no record {record} in {}", data.display())))?;
            prepare_dir(&common.out, common.overwrite)?;
            pipeline::echo_config(&cfg, &common.out)?;
            let c = &ds.config;
            let side = |k: &str| MapSidecar::new(k, c.l_min, c.l_max, c.cell_size());
            let img = |v: Vec<f32>| Image::new(rec.size, rec.size, v);
            write_map(&common.out.join("gt.pgm"), &img(rec.gt.clone())?, &side("ground_truth"))?;
            write_map(&common.out.join("observed.pgm"), &img(rec.masked.observed.clone())?, &side("observed"))?;
            write_mask(&common.out.join("mask.pgm"), rec.size, &rec.masked.mask)?;
            write_map(
                &common.out.join("traj_full.pgm"),
                &img(rasterize(&rec.trajectories, rec.size, rec.size)?)?,
                &side("trajectory"),
            )?;
            for (q, _) in &rec.csp {
                let name = format!("traj_q{:03}.pgm", (q * 100.0).round() as u32);
                write_map(&common.out.join(name), &img(rec.traj_image(*q)?)?, &side("trajectory"))?;
            }
        }
    }
    Ok(())
}

fn parse_predictor(s: &str) -> std::result::Result<PredictorKind, String> {
    PredictorKind::parse(s).ok_or_else(|| format!("unknown predictor `{s}`"))
}

fn check_size(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Config(format!("checkpoint expects {a}x{a} maps, dataset has {b}x{b}")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
