//! Decentralized multi-robot exploration: ray-cast sensing, trajectory exchange with
//! communication dropout, frontier scoring on predicted maps, A* navigation and energy
//! accounting. One episode is a deterministic tick loop over robots in id order.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{PredictorKind, SimConfig, StartScheme, WorldgenConfig};
use crate::error::{Error, Result};
use crate::grid::{bresenham, cell_of, disk, idx, Cell, OBSTACLE_LEVEL};
use crate::io::{write_map, write_mask, Image, MapSidecar};
use crate::metrics::{coverage_pct, mse, oiou};
use crate::planning::{astar, Path as GridPath};
use crate::predict::{self, Input, Models};
use crate::seeds::{mix, mix3, rng};
use crate::worldgen::{apply_csp, decode_elevation, generate_record, rasterize, Heightmap, Trajectory};

pub use crate::predict::{predict_db, predict_npe};

/// Ticks a robot waits behind another before it re-plans.
const MAX_WAIT: usize = 3;
/// Consecutive re-plans forced by waiting after which a robot gives up.
const MAX_STALLS: usize = 3;

/// Eq. 1: `w * dd + k * max(0, dz)`.
pub fn energy_cost(dd: f64, dz: f64, w: f64, k: f64) -> f64 {
    w * dd + k * dz.max(0.0)
}

/// Empirical coverable area in m² for travel distance `d_max` (m) in an area `a` (m²).
pub fn energy_budget(d_max: f64, a: f64) -> Result<f64> {
    if !(d_max > 0.0 && a > 0.0) {
        return Err(Error::Config("energy budget needs positive distance and area".into()));
    }
    Ok(0.0615 * d_max.powf(0.985) * a.powf(0.635))
}

/// Reveals every cell within `s` of `pos` whose Bresenham ray from `pos` crosses no
/// obstacle before reaching it. Returns the number of newly observed cells.
pub fn sense(world: &[f32], width: usize, obs: &mut [f32], mask: &mut [bool], pos: Cell, s: f64) -> usize {
    let height = world.len() / width;
    let mut new = 0;
    for c in disk(width, height, pos, s) {
        let ray = bresenham(pos, c);
        let inner = if ray.len() > 2 { &ray[1..ray.len() - 1] } else { &[][..] };
        let clear = inner
            .iter()
            .all(|&p| world[idx(width, p)] < OBSTACLE_LEVEL);
        if clear {
            let i = idx(width, c);
            obs[i] = world[i];
            if !mask[i] {
                mask[i] = true;
                new += 1;
            }
        }
    }
    new
}

/// One candidate goal per cluster of observed free cells bordering unknown space.
#[derive(Debug, Clone, PartialEq)]
pub struct Frontier {
    pub cell: Cell,
    pub size: usize,
}

/// Observed free cells 8-adjacent to an unknown cell, grouped by 8-connectivity. Clusters
/// smaller than three cells are dropped; each remaining cluster is represented by its cell
/// nearest the centroid (lowest index on ties). Output is in order of first cluster cell.
pub fn detect_frontiers(obs: &[f32], mask: &[bool], width: usize) -> Vec<Frontier> {
    let height = obs.len() / width;
    let is_frontier = |i: usize| -> bool {
        if !mask[i] || obs[i] >= OBSTACLE_LEVEL {
            return false;
        }
        let (x, y) = cell_of(width, i);
        crate::grid::STEPS8.iter().any(|&(dx, dy)| {
            let (nx, ny) = (x as isize + dx, y as isize + dy);
            nx >= 0 && ny >= 0 && nx < width as isize && ny < height as isize && !mask[idx(width, (nx as usize, ny as usize))]
        })
    };
    let f: Vec<bool> = (0..obs.len()).map(is_frontier).collect();
    let mut seen = vec![false; obs.len()];
    let mut out = Vec::new();
    for start in 0..obs.len() {
        if !f[start] || seen[start] {
            continue;
        }
        let mut cluster = vec![];
        let mut q = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = q.pop_front() {
            cluster.push(i);
            let (x, y) = cell_of(width, i);
            for &(dx, dy) in &crate::grid::STEPS8 {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                    continue;
                }
                let n = idx(width, (nx as usize, ny as usize));
                if f[n] && !seen[n] {
                    seen[n] = true;
                    q.push_back(n);
                }
            }
        }
        if cluster.len() < 3 {
            continue;
        }
        let n = cluster.len() as f64;
        let cx = cluster.iter().map(|&i| (i % width) as f64).sum::<f64>() / n;
        let cy = cluster.iter().map(|&i| (i / width) as f64).sum::<f64>() / n;
        let best = *cluster
            .iter()
            .min_by(|&&a, &&b| {
                let d = |i: usize| ((i % width) as f64 - cx).powi(2) + ((i / width) as f64 - cy).powi(2);
                d(a).total_cmp(&d(b)).then(a.cmp(&b))
            })
            .expect("non-empty cluster");
        out.push(Frontier {
            cell: cell_of(width, best),
            size: cluster.len(),
        });
    }
    out
}

/// Uncertainty-weighted predicted-traversable share of the disk of radius `d_r` around `g`.
/// Observed cells contribute nothing; the normalizer is the full disk cell count.
pub fn info_gain(pred: &[f32], conf: &[f32], mask: &[bool], width: usize, g: Cell, d_r: f64) -> Result<f64> {
    if d_r <= 0.0 {
        return Err(Error::Config("information radius must be positive".into()));
    }
    let a = disk(width, pred.len() / width, g, d_r);
    let s: f64 = a
        .iter()
        .map(|&c| idx(width, c))
        .filter(|&i| !mask[i] && pred[i] < OBSTACLE_LEVEL)
        .map(|i| conf[i] as f64)
        .sum();
    Ok(s / a.len() as f64)
}

/// Sum of predicted map values along a path that avoids the predicted obstacles.
pub fn traversability_score(pred: &[f32], width: usize, path: &[Cell]) -> Result<f64> {
    let mut s = 0.0;
    for &c in path {
        let v = pred[idx(width, c)];
        if v >= OBSTACLE_LEVEL {
            return Err(Error::Contract(format!("path crosses a predicted obstacle at {c:?}")));
        }
        s += v as f64;
    }
    Ok(s)
}

/// `alpha * I + beta * T + gamma * D`.
pub fn utility(i: f64, t: f64, d: f64, coeffs: [f64; 3]) -> f64 {
    coeffs[0] * i + coeffs[1] * t + coeffs[2] * d
}

/// A scored frontier candidate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scored {
    pub cell: Cell,
    pub info: f64,
    pub trav: f64,
    pub dist: f64,
    pub energy: f64,
    pub utility: f64,
    #[serde(skip)]
    pub path: Vec<Cell>,
}

/// Argmax utility; ties go to the shorter path, then the lower cell index.
pub fn select(cands: &[Scored], width: usize) -> Option<&Scored> {
    cands.iter().max_by(|a, b| {
        a.utility
            .total_cmp(&b.utility)
            .then(b.dist.total_cmp(&a.dist))
            .then(idx(width, b.cell).cmp(&idx(width, a.cell)))
    })
}

/// Energy a path would cost with elevations decoded from `map`.
pub fn path_energy(map: &[f32], width: usize, path: &[Cell], geo: &Geometry) -> f64 {
    path.windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let dd = if a.0 != b.0 && a.1 != b.1 { std::f64::consts::SQRT_2 } else { 1.0 };
            let za = geo.elevation(map[idx(width, a)]);
            let zb = geo.elevation(map[idx(width, b)]);
            energy_cost(dd, zb - za, geo.w, geo.k)
        })
        .sum()
}

/// Physical scale of an episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub cell_size: f64,
    pub l_min: f64,
    pub l_max: f64,
    pub w: f64,
    pub k: f64,
}

impl Geometry {
    pub fn elevation(&self, v: f32) -> f64 {
        decode_elevation(v, self.l_min, self.l_max)
    }
}

/// Scores every frontier of a robot's predicted map that is reachable and affordable.
/// Paths never cross the `avoid` cells.
#[allow(clippy::too_many_arguments)]
pub fn score_frontiers(
    pred: &[f32],
    conf: &[f32],
    mask: &[bool],
    frontiers: &[Frontier],
    pos: Cell,
    energy: f64,
    width: usize,
    geo: &Geometry,
    cfg: &SimConfig,
    d_r: f64,
    avoid: &[Cell],
) -> Result<Vec<Scored>> {
    let mut blocked = predict::obstacle_estimate(pred);
    let height = pred.len() / width;
    for &c in avoid {
        blocked[idx(width, c)] = true;
    }
    let mut out = Vec::new();
    for f in frontiers {
        if f.cell == pos || blocked[idx(width, f.cell)] {
            continue;
        }
        let Some(GridPath { cells, cost }) = astar(&blocked, width, height, pos, f.cell) else {
            continue;
        };
        let e = path_energy(pred, width, &cells, geo);
        if e > energy {
            continue;
        }
        let info = info_gain(pred, conf, mask, width, f.cell, d_r)?;
        let trav = traversability_score(pred, width, &cells)?;
        out.push(Scored {
            cell: f.cell,
            info,
            trav,
            dist: cost,
            energy: e,
            utility: utility(info, trav, cost, cfg.coeffs),
            path: cells,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Robot {
    pub id: usize,
    pub pos: Cell,
    pub traj: Trajectory,
    pub energy: f64,
    pub obs: Vec<f32>,
    pub mask: Vec<bool>,
    /// Union raster of trajectories received from other robots.
    pub received: Vec<f32>,
    plan: VecDeque<Cell>,
    since_plan: usize,
    waited: usize,
    stalls: usize,
    pub halted: bool,
}

impl Robot {
    pub fn new(id: usize, pos: Cell, energy: f64, hw: usize) -> Self {
        Self {
            id,
            pos,
            traj: Trajectory {
                robot_id: id,
                points: vec![(0, pos)],
            },
            energy,
            obs: vec![0.0; hw],
            mask: vec![false; hw],
            received: vec![0.0; hw],
            plan: VecDeque::new(),
            since_plan: 0,
            waited: 0,
            stalls: 0,
            halted: false,
        }
    }
}

/// For every pair within `range`, each robot receives the other's trajectory after
/// dropout at level `q`. Draws are independent per direction and per tick.
pub fn exchange_trajectories(robots: &mut [Robot], q: f64, range: f64, seed: u64, tick: usize, width: usize) -> Result<()> {
    let n = robots.len();
    let mut inbox: Vec<Vec<Trajectory>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (robots[i].pos, robots[j].pos);
            let d = ((a.0 as f64 - b.0 as f64).powi(2) + (a.1 as f64 - b.1 as f64).powi(2)).sqrt();
            if d > range {
                continue;
            }
            inbox[i].push(apply_csp(&robots[j].traj, q, mix3(seed, tick as u64, (j * n + i) as u64)));
            inbox[j].push(apply_csp(&robots[i].traj, q, mix3(seed, tick as u64, (i * n + j) as u64)));
        }
    }
    for (r, msgs) in robots.iter_mut().zip(inbox) {
        if msgs.is_empty() {
            continue;
        }
        let raster = rasterize(&msgs, width, r.received.len() / width)?;
        for (a, b) in r.received.iter_mut().zip(raster) {
            *a = a.max(b);
        }
    }
    Ok(())
}

/// Start cells: distinct free cells reachable from each other, nearest (breadth-first) to
/// the scheme's anchors.
pub fn start_positions(world: &[f32], width: usize, n: usize, scheme: StartScheme, seed: u64) -> Result<Vec<Cell>> {
    let height = world.len() / width;
    let blocked: Vec<bool> = world.iter().map(|&v| v >= OBSTACLE_LEVEL).collect();
    // Largest free component, so every robot can reach every other.
    let mut comp = vec![usize::MAX; world.len()];
    let mut sizes = Vec::new();
    for s in 0..world.len() {
        if blocked[s] || comp[s] != usize::MAX {
            continue;
        }
        let reach = crate::grid::flood(&blocked, width, height, cell_of(width, s));
        let id = sizes.len();
        let mut count = 0;
        for (i, &r) in reach.iter().enumerate() {
            if r {
                comp[i] = id;
                count += 1;
            }
        }
        sizes.push(count);
    }
    let main = (0..sizes.len())
        .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
        .ok_or_else(|| Error::Generation("world has no free cells".into()))?;
    if sizes[main] < n {
        return Err(Error::Generation("too few free cells for the robots".into()));
    }
    let nearest_free = |anchor: Cell, taken: &[Cell]| -> Cell {
        let mut best = (usize::MAX, usize::MAX);
        for i in 0..world.len() {
            let c = cell_of(width, i);
            if comp[i] != main || taken.contains(&c) {
                continue;
            }
            let d = (c.0 as isize - anchor.0 as isize).pow(2) as usize + (c.1 as isize - anchor.1 as isize).pow(2) as usize;
            if d < best.0 {
                best = (d, i);
            }
        }
        cell_of(width, best.1)
    };
    let (w1, h1) = (width - 1, height - 1);
    let mut out = Vec::new();
    match scheme {
        StartScheme::Opposite => {
            for i in 0..n {
                let anchor = if i % 2 == 0 { (0, 0) } else { (w1, h1) };
                let c = nearest_free(anchor, &out);
                out.push(c);
            }
        }
        StartScheme::Center => {
            for _ in 0..n {
                let c = nearest_free((width / 2, height / 2), &out);
                out.push(c);
            }
        }
        StartScheme::Random => {
            let mut free: Vec<usize> = (0..world.len()).filter(|&i| comp[i] == main).collect();
            free.shuffle(&mut rng(seed));
            out.extend(free[..n].iter().map(|&i| cell_of(width, i)));
        }
    }
    Ok(out)
}

/// How a robot turns its observations into a predicted map and uncertainty.
pub enum Predictor<'a> {
    Npe,
    Db(&'a [Vec<f32>]),
    Learned { models: &'a Models, use_cn: bool },
}

impl<'a> Predictor<'a> {
    pub fn from_kind(kind: PredictorKind, models: Option<&'a Models>, database: Option<&'a [Vec<f32>]>) -> Result<Self> {
        let need = |m: Option<&'a Models>| m.ok_or_else(|| Error::Missing("trained checkpoints are required for this predictor".into()));
        Ok(match kind {
            PredictorKind::Npe => Self::Npe,
            PredictorKind::Db => Self::Db(database.ok_or_else(|| Error::Missing("database predictor needs a dataset".into()))?),
            PredictorKind::Fourcnet => Self::Learned {
                models: need(models)?,
                use_cn: true,
            },
            PredictorKind::FourcnetNoCn => Self::Learned {
                models: need(models)?,
                use_cn: false,
            },
        })
    }

    /// `(map, uncertainty)` for one robot.
    pub fn predict(&self, obs: &[f32], mask: &[bool], traj: &[f32], width: usize, t_total: usize, seed: u64) -> Result<(Vec<f32>, Vec<f32>)> {
        match self {
            Self::Npe => predict_npe(obs, mask),
            Self::Db(db) => predict_db(obs, mask, width, db),
            Self::Learned { models, use_cn } => {
                if models.size() != width {
                    return Err(Error::Config(format!(
                        "checkpoints expect {0}x{0} maps, world is {width}x{width}",
                        models.size()
                    )));
                }
                let p = models
                    .predict(&[Input { obs, mask, traj }], t_total, seed, *use_cn)?
                    .pop()
                    .expect("one prediction");
                Ok((p.map, p.confidence))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub tick: usize,
    pub robot_id: usize,
    pub x: usize,
    pub y: usize,
    pub energy: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub tick: usize,
    pub robot_id: usize,
    pub mse: Option<f64>,
    pub oiou: Option<f64>,
    pub goal: Option<Cell>,
    pub candidates: usize,
    pub utility: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoveRecord {
    pub tick: usize,
    pub robot_id: usize,
    pub from: Cell,
    pub to: Cell,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub predictor: String,
    pub seed: u64,
    pub budget: f64,
    pub ticks: usize,
    pub steps: Vec<StepRecord>,
    pub predictions: Vec<PredictionRecord>,
    pub moves: Vec<MoveRecord>,
    pub final_energy: Vec<f64>,
    pub final_coverage: f64,
    /// Wall-clock seconds per prediction; excluded from the deterministic outputs.
    #[serde(skip)]
    pub prediction_wall_s: Vec<f64>,
}

/// A world for an episode: a generated heightmap image and its scale.
#[derive(Debug, Clone)]
pub struct World {
    pub image: Vec<f32>,
    pub width: usize,
    pub geo: Geometry,
}

impl World {
    /// Generates the world for `seed` with cell size `sqrt(area) / size`.
    pub fn generate(wcfg: &WorldgenConfig, scfg: &SimConfig, seed: u64) -> Result<Self> {
        let rec = generate_record(wcfg, mix(seed, 0xE915), 0)?;
        Ok(Self::from_image(rec.gt, wcfg.size, wcfg, scfg))
    }

    pub fn from_image(image: Vec<f32>, width: usize, wcfg: &WorldgenConfig, scfg: &SimConfig) -> Self {
        Self {
            image,
            width,
            geo: Geometry {
                cell_size: scfg.area_m2.sqrt() / width as f64,
                l_min: wcfg.l_min,
                l_max: wcfg.l_max,
                w: scfg.w,
                k: scfg.k,
            },
        }
    }

    pub fn heightmap(&self) -> Heightmap {
        Heightmap::from_image(&self.image, self.width, self.geo.l_min, self.geo.l_max, self.geo.cell_size)
    }
}

/// Optional side outputs of an episode.
#[derive(Debug, Clone, Copy, Default)]
pub struct Snapshots<'p> {
    pub dir: Option<&'p Path>,
    pub every: Option<usize>,
}

fn team_mask(robots: &[Robot]) -> Vec<bool> {
    let mut m = vec![false; robots[0].mask.len()];
    for r in robots {
        for (a, &b) in m.iter_mut().zip(&r.mask) {
            *a |= b;
        }
    }
    m
}

/// Runs one episode. Energy is in units of `w` per cell; the budget is `budget_m` metres of
/// travel converted to cells.
pub fn run_episode(world: &World, cfg: &SimConfig, predictor: &Predictor, seed: u64, snaps: Snapshots) -> Result<EpisodeLog> {
    if cfg.n_robots == 0 || !(cfg.budget_m >= 0.0) {
        return Err(Error::Config("episode needs robots and a non-negative budget".into()));
    }
    if !cfg.coeffs.iter().all(|c| c.is_finite()) {
        return Err(Error::Config("utility coefficients must be finite".into()));
    }
    let width = world.width;
    let hw = world.image.len();
    let geo = &world.geo;
    let s = cfg.sensing_m / geo.cell_size;
    let d_r = cfg.d_r.unwrap_or(s);
    let budget = cfg.budget_m / geo.cell_size * cfg.w;
    let truth: Vec<bool> = world.image.iter().map(|&v| v >= OBSTACLE_LEVEL).collect();

    let starts = start_positions(&world.image, width, cfg.n_robots, cfg.start, mix(seed, 1))?;
    let mut robots: Vec<Robot> = starts
        .iter()
        .enumerate()
        .map(|(i, &p)| Robot::new(i, p, budget, hw))
        .collect();
    for r in robots.iter_mut() {
        sense(&world.image, width, &mut r.obs, &mut r.mask, r.pos, s);
    }
    let mut log = EpisodeLog {
        predictor: match predictor {
            Predictor::Npe => "npe".into(),
            Predictor::Db(_) => "db".into(),
            Predictor::Learned { use_cn: true, .. } => "fourcnet".into(),
            Predictor::Learned { use_cn: false, .. } => "fourcnet_no_cn".into(),
        },
        seed,
        budget,
        ticks: 0,
        steps: Vec::new(),
        predictions: Vec::new(),
        moves: Vec::new(),
        final_energy: Vec::new(),
        final_coverage: 0.0,
        prediction_wall_s: Vec::new(),
    };
    let mut coverage = coverage_pct(&team_mask(&robots));
    for r in &robots {
        log.steps.push(StepRecord {
            tick: 0,
            robot_id: r.id,
            x: r.pos.0,
            y: r.pos.1,
            energy: r.energy,
            coverage,
        });
    }
    let snap = |tick: usize, robots: &[Robot], preds: &[Option<Vec<f32>>]| -> Result<()> {
        let (Some(dir), Some(every)) = (snaps.dir, snaps.every) else {
            return Ok(());
        };
        if every == 0 || tick % every != 0 {
            return Ok(());
        }
        fs::create_dir_all(dir)?;
        write_mask(&dir.join(format!("t{tick:04}_coverage.pgm")), width, &team_mask(robots))?;
        for (r, p) in robots.iter().zip(preds) {
            if let Some(p) = p {
                let side = MapSidecar::new("prediction", geo.l_min, geo.l_max, geo.cell_size);
                write_map(
                    &dir.join(format!("t{tick:04}_r{}_pred.pgm", r.id)),
                    &Image::new(width, hw / width, p.clone())?,
                    &side,
                )?;
            }
        }
        Ok(())
    };
    let mut last_pred: Vec<Option<Vec<f32>>> = vec![None; robots.len()];
    snap(0, &robots, &last_pred)?;

    let mut tick = 0;
    while tick < cfg.horizon && robots.iter().any(|r| !r.halted) {
        tick += 1;
        exchange_trajectories(&mut robots, cfg.csp, s, mix(seed, 2), tick, width)?;
        for i in 0..robots.len() {
            if robots[i].halted {
                continue;
            }
            let replan_due = cfg.replan_every.is_some_and(|n| n > 0 && robots[i].since_plan >= n);
            let stalled = robots[i].waited >= MAX_WAIT;
            if stalled {
                robots[i].stalls += 1;
                if robots[i].stalls > MAX_STALLS {
                    robots[i].halted = true;
                    continue;
                }
            }
            if robots[i].plan.is_empty() || replan_due || stalled {
                // After waiting, route around the robots in the way.
                let avoid: Vec<Cell> = if stalled {
                    robots.iter().filter(|o| o.id != robots[i].id).map(|o| o.pos).collect()
                } else {
                    Vec::new()
                };
                let r = &robots[i];
                let t0 = Instant::now();
                let (pred, conf) = predictor.predict(&r.obs, &r.mask, &r.received, width, cfg.t_total, mix3(seed, tick as u64, r.id as u64))?;
                log.prediction_wall_s.push(t0.elapsed().as_secs_f64());
                let unknown: Vec<bool> = r.mask.iter().map(|m| !m).collect();
                let has_unknown = unknown.iter().any(|&u| u);
                let frontiers = detect_frontiers(&r.obs, &r.mask, width);
                let cands = score_frontiers(&pred, &conf, &r.mask, &frontiers, r.pos, r.energy, width, geo, cfg, d_r, &avoid)?;
                let choice = select(&cands, width).cloned();
                log.predictions.push(PredictionRecord {
                    tick,
                    robot_id: r.id,
                    mse: if has_unknown { Some(mse(&pred, &world.image, Some(&unknown))?) } else { None },
                    oiou: if has_unknown { Some(oiou(&pred, &world.image, Some(&unknown), OBSTACLE_LEVEL)?) } else { None },
                    goal: choice.as_ref().map(|c| c.cell),
                    candidates: cands.len(),
                    utility: choice.as_ref().map(|c| c.utility),
                });
                last_pred[i] = Some(pred);
                let r = &mut robots[i];
                r.since_plan = 0;
                r.waited = 0;
                match choice {
                    Some(c) => r.plan = c.path.into_iter().skip(1).collect(),
                    None => {
                        r.halted = true;
                        r.plan.clear();
                        continue;
                    }
                }
            }
            let Some(&next) = robots[i].plan.front() else {
                continue;
            };
            let r = &robots[i];
            // The next cell is always adjacent, hence observed; re-plan if it turned out blocked.
            if r.obs[idx(width, next)] >= OBSTACLE_LEVEL || truth[idx(width, next)] {
                robots[i].plan.clear();
                continue;
            }
            if robots.iter().any(|o| o.id != r.id && o.pos == next) {
                robots[i].waited += 1;
                continue;
            }
            let dd = if r.pos.0 != next.0 && r.pos.1 != next.1 { std::f64::consts::SQRT_2 } else { 1.0 };
            let dz = geo.elevation(world.image[idx(width, next)]) - geo.elevation(world.image[idx(width, r.pos)]);
            let cost = energy_cost(dd, dz, geo.w, geo.k);
            if cost > r.energy {
                robots[i].halted = true;
                continue;
            }
            let r = &mut robots[i];
            log.moves.push(MoveRecord {
                tick,
                robot_id: r.id,
                from: r.pos,
                to: next,
                cost,
            });
            r.energy -= cost;
            r.pos = next;
            r.plan.pop_front();
            r.traj.points.push((tick, next));
            r.since_plan += 1;
            r.waited = 0;
            r.stalls = 0;
            sense(&world.image, width, &mut r.obs, &mut r.mask, next, s);
        }
        coverage = coverage_pct(&team_mask(&robots));
        for r in &robots {
            log.steps.push(StepRecord {
                tick,
                robot_id: r.id,
                x: r.pos.0,
                y: r.pos.1,
                energy: r.energy,
                coverage,
            });
        }
        snap(tick, &robots, &last_pred)?;
    }
    log.ticks = tick;
    log.final_energy = robots.iter().map(|r| r.energy).collect();
    log.final_coverage = coverage;
    Ok(log)
}

/// Writes `steps.csv`, `summary.json` (deterministic) and `timing.json` (wall-clock).
pub fn write_episode(log: &EpisodeLog, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("steps.csv"))?;
    w.write_record(["tick", "robot_id", "x", "y", "energy", "coverage"])?;
    for s in &log.steps {
        w.write_record([
            s.tick.to_string(),
            s.robot_id.to_string(),
            s.x.to_string(),
            s.y.to_string(),
            format!("{:.9}", s.energy),
            format!("{:.6}", s.coverage),
        ])?;
    }
    w.flush()?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(log)?)?;
    let timing = serde_json::json!({
        "predictions": log.prediction_wall_s.len(),
        "wall_s_per_prediction": log.prediction_wall_s,
    });
    fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&timing)?)?;
    Ok(())
}
