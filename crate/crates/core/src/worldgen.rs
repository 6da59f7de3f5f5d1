//! Procedural worlds: diamond-square terrain, random-walk obstacles, A* robot trajectories,
//! communication dropout, blob observation masks and the map-trajectory dataset.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::WorldgenConfig;
use crate::error::{contract, Error, Result};
use crate::grid::{flood, idx, Cell};
use crate::io::{self, Image, MapSidecar};
use crate::planning::astar;
use crate::seeds::{mix, mix3, rng, unit};

/// Normalized value of the highest traversable terrain; obstacles render as 1.0.
pub const TERRAIN_MAX: f32 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct Heightmap {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub elevation: Vec<f64>,
    pub obstacle: Vec<bool>,
    pub l_min: f64,
    pub l_max: f64,
}

impl Heightmap {
    /// Normalized image: terrain in `[0, 0.8]`, obstacles 1.0.
    pub fn image(&self) -> Vec<f32> {
        let span = self.l_max - self.l_min;
        self.elevation
            .iter()
            .zip(&self.obstacle)
            .map(|(&e, &o)| {
                if o {
                    1.0
                } else {
                    io::quantize(((e - self.l_min) / span) as f32 * TERRAIN_MAX)
                }
            })
            .collect()
    }

    /// Inverse of [`Heightmap::image`] on traversable cells.
    pub fn from_image(img: &[f32], width: usize, l_min: f64, l_max: f64, cell_size: f64) -> Self {
        let obstacle: Vec<bool> = img.iter().map(|&v| v >= crate::grid::OBSTACLE_LEVEL).collect();
        let elevation = img
            .iter()
            .zip(&obstacle)
            .map(|(&v, &o)| {
                if o {
                    l_max
                } else {
                    decode_elevation(v, l_min, l_max)
                }
            })
            .collect();
        Self {
            width,
            height: img.len() / width,
            cell_size,
            elevation,
            obstacle,
            l_min,
            l_max,
        }
    }

    pub fn is_free(&self, c: Cell) -> bool {
        !self.obstacle[idx(self.width, c)]
    }
}

pub fn decode_elevation(v: f32, l_min: f64, l_max: f64) -> f64 {
    (v.min(TERRAIN_MAX) / TERRAIN_MAX) as f64 * (l_max - l_min) + l_min
}

/// Raw diamond-square field on a `(2^n + 1)²` grid. `corners` fixes the four seeds;
/// otherwise they are drawn from `[-1, 1)`.
pub fn diamond_square(n: u32, seed: u64, roughness: f64, decay: f64, corners: Option<f64>) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Config(format!("diamond-square exponent {n} < 2")));
    }
    if roughness < 0.0 || !(decay > 0.0 && decay < 1.0) {
        return Err(Error::Config("need roughness >= 0 and 0 < decay < 1".into()));
    }
    let s = (1usize << n) + 1;
    let mut r = rng(seed);
    let mut g = vec![0.0f64; s * s];
    for &(x, y) in &[(0, 0), (s - 1, 0), (0, s - 1), (s - 1, s - 1)] {
        g[y * s + x] = corners.unwrap_or_else(|| r.random_range(-1.0..1.0));
    }
    let mut step = s - 1;
    let mut scale = roughness;
    while step > 1 {
        let half = step / 2;
        for y in (half..s).step_by(step) {
            for x in (half..s).step_by(step) {
                let avg = (g[(y - half) * s + x - half]
                    + g[(y - half) * s + x + half]
                    + g[(y + half) * s + x - half]
                    + g[(y + half) * s + x + half])
                    / 4.0;
                g[y * s + x] = avg + r.random_range(-1.0..1.0) * scale;
            }
        }
        for y in (0..s).step_by(half) {
            let x0 = if (y / half) % 2 == 0 { half } else { 0 };
            for x in (x0..s).step_by(step) {
                let mut sum = 0.0;
                let mut cnt = 0.0;
                if y >= half {
                    sum += g[(y - half) * s + x];
                    cnt += 1.0;
                }
                if y + half < s {
                    sum += g[(y + half) * s + x];
                    cnt += 1.0;
                }
                if x >= half {
                    sum += g[y * s + x - half];
                    cnt += 1.0;
                }
                if x + half < s {
                    sum += g[y * s + x + half];
                    cnt += 1.0;
                }
                g[y * s + x] = sum / cnt + r.random_range(-1.0..1.0) * scale;
            }
        }
        scale *= decay;
        step = half;
    }
    Ok(g)
}

/// Terrain of `size²` cells: the top-left crop of the smallest covering diamond-square grid,
/// min-max normalized into `[l_min, l_max]`.
pub fn terrain(cfg: &WorldgenConfig, seed: u64) -> Result<Vec<f64>> {
    let size = cfg.size;
    let n = (usize::BITS - (size - 1).leading_zeros()).max(2);
    let full = diamond_square(n, seed, cfg.roughness, cfg.decay, None)?;
    let s = (1usize << n) + 1;
    let mut out: Vec<f64> = (0..size * size).map(|i| full[(i / size) * s + i % size]).collect();
    let (lo, hi) = out
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    for v in &mut out {
        *v = if hi > lo {
            cfg.l_min + (*v - lo) / (hi - lo) * (cfg.l_max - cfg.l_min)
        } else {
            cfg.l_min
        };
    }
    Ok(out)
}

pub fn flat_heightmap(size: usize, cfg: &WorldgenConfig) -> Heightmap {
    Heightmap {
        width: size,
        height: size,
        cell_size: cfg.extent_m / size as f64,
        elevation: vec![cfg.l_min; size * size],
        obstacle: vec![false; size * size],
        l_min: cfg.l_min,
        l_max: cfg.l_max,
    }
}

/// Stamps `count` random-walk polylines (each dilated by one cell) onto `hm`. A layout is
/// accepted when at least 60% of cells stay free and the free cells form one connected region.
pub fn place_obstacles(
    hm: &Heightmap,
    seed: u64,
    count: usize,
    len_range: (usize, usize),
) -> Result<Heightmap> {
    let (w, h) = (hm.width, hm.height);
    for attempt in 0..100u64 {
        let mut r = rng(mix(seed, attempt));
        let mut obstacle = hm.obstacle.clone();
        for _ in 0..count {
            let len = r.random_range(len_range.0..=len_range.1);
            let mut px = r.random_range(0.0..w as f64);
            let mut py = r.random_range(0.0..h as f64);
            let mut heading = r.random_range(0.0..2.0 * PI);
            for _ in 0..len {
                let (cx, cy) = (px.floor() as isize, py.floor() as isize);
                if cx < 0 || cy < 0 || cx >= w as isize || cy >= h as isize {
                    break;
                }
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (x, y) = (cx + dx, cy + dy);
                        if x >= 0 && y >= 0 && x < w as isize && y < h as isize {
                            obstacle[y as usize * w + x as usize] = true;
                        }
                    }
                }
                heading += r.random_range(-PI / 4.0..PI / 4.0);
                px += heading.cos();
                py += heading.sin();
            }
        }
        let free: Vec<usize> = (0..w * h).filter(|&i| !obstacle[i]).collect();
        if (free.len() as f64) < 0.6 * (w * h) as f64 {
            continue;
        }
        let reach = flood(&obstacle, w, h, (free[0] % w, free[0] / w));
        if free.iter().all(|&i| reach[i]) {
            return Ok(Heightmap {
                obstacle,
                ..hm.clone()
            });
        }
    }
    Err(Error::Generation(format!(
        "no connected obstacle layout with {count} obstacles after 100 attempts"
    )))
}

/// A robot's positions; each point carries its original timestep so dropout leaves gaps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub robot_id: usize,
    pub points: Vec<(usize, Cell)>,
}

impl Trajectory {
    pub fn from_cells(robot_id: usize, cells: &[Cell]) -> Self {
        Self {
            robot_id,
            points: cells.iter().copied().enumerate().collect(),
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.points.iter().map(|p| p.1)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One optimal A* path per robot between random free endpoints at least a quarter of the
/// map diagonal apart.
pub fn gen_trajectories(hm: &Heightmap, n_robots: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if !(1..=6).contains(&n_robots) {
        return Err(Error::Config(format!("robot count {n_robots} outside 1..=6")));
    }
    let (w, h) = (hm.width, hm.height);
    let free: Vec<usize> = (0..w * h).filter(|&i| !hm.obstacle[i]).collect();
    if free.len() < 2 {
        return Err(Error::Generation("fewer than two free cells".into()));
    }
    let min_sep = 0.25 * ((w * w + h * h) as f64).sqrt();
    let mut out = Vec::with_capacity(n_robots);
    for robot in 0..n_robots {
        let mut r = rng(mix(seed, robot as u64));
        let mut found = None;
        for _ in 0..100 {
            let a = free[r.random_range(0..free.len())];
            let b = free[r.random_range(0..free.len())];
            let (ca, cb) = ((a % w, a / w), (b % w, b / w));
            let dx = ca.0 as f64 - cb.0 as f64;
            let dy = ca.1 as f64 - cb.1 as f64;
            if (dx * dx + dy * dy).sqrt() < min_sep {
                continue;
            }
            if let Some(p) = astar(&hm.obstacle, w, h, ca, cb) {
                found = Some(p);
                break;
            }
        }
        let p = found.ok_or_else(|| {
            Error::Generation(format!("no feasible start/end pair for robot {robot} after 100 draws"))
        })?;
        out.push(Trajectory::from_cells(robot, &p.cells));
    }
    Ok(out)
}

/// Keeps each point independently with probability `q`; the draw for a point depends only on
/// `(seed, robot_id, timestep)`.
pub fn apply_csp(traj: &Trajectory, q: f64, seed: u64) -> Trajectory {
    Trajectory {
        robot_id: traj.robot_id,
        points: traj
            .points
            .iter()
            .copied()
            .filter(|&(t, _)| unit(seed, traj.robot_id as u64, t as u64) < q)
            .collect(),
    }
}

/// Binary union raster of every trajectory point.
pub fn rasterize(trajs: &[Trajectory], width: usize, height: usize) -> Result<Vec<f32>> {
    let mut g = vec![0.0f32; width * height];
    for tr in trajs {
        for c in tr.cells() {
            if c.0 >= width || c.1 >= height {
                return Err(contract(format!(
                    "trajectory point {c:?} outside {width}x{height}"
                )));
            }
            g[idx(width, c)] = 1.0;
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedMap {
    pub observed: Vec<f32>,
    pub mask: Vec<bool>,
}

impl MaskedMap {
    pub fn from_mask(gt: &[f32], mask: Vec<bool>) -> Self {
        let observed = gt
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        Self { observed, mask }
    }

    pub fn fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

/// Observation mask made of one to three random-walk blobs (3x3 brush) covering
/// `observed_frac ± 0.05` of the map.
pub fn mask_map(gt: &[f32], width: usize, seed: u64, observed_frac: f64) -> Result<MaskedMap> {
    if !(observed_frac > 0.0 && observed_frac < 1.0) {
        return Err(Error::Config(format!("observed fraction {observed_frac} outside (0, 1)")));
    }
    let height = gt.len() / width;
    let n = gt.len();
    let target = (observed_frac * n as f64).round() as usize;
    let tol = (0.05 * n as f64).floor() as usize;
    for attempt in 0..100u64 {
        let mut r = rng(mix(seed, attempt));
        let blobs = r.random_range(1..=3usize);
        let mut walkers: Vec<(isize, isize)> = (0..blobs)
            .map(|_| (r.random_range(0..width) as isize, r.random_range(0..height) as isize))
            .collect();
        let mut mask = vec![false; n];
        let mut count = 0;
        let stamp = |mask: &mut Vec<bool>, count: &mut usize, (cx, cy): (isize, isize)| {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (x, y) = (cx + dx, cy + dy);
                    if x >= 0 && y >= 0 && x < width as isize && y < height as isize {
                        let i = y as usize * width + x as usize;
                        if !mask[i] {
                            mask[i] = true;
                            *count += 1;
                        }
                    }
                }
            }
        };
        for wk in &walkers {
            stamp(&mut mask, &mut count, *wk);
        }
        let mut steps = 0;
        while count < target && steps < 400 * n {
            let b = steps % blobs;
            let (dx, dy) = [(1, 0), (-1, 0), (0, 1), (0, -1)][r.random_range(0..4)];
            let (x, y) = walkers[b];
            walkers[b] = (
                (x + dx).clamp(0, width as isize - 1),
                (y + dy).clamp(0, height as isize - 1),
            );
            stamp(&mut mask, &mut count, walkers[b]);
            steps += 1;
        }
        if count.abs_diff(target) <= tol {
            return Ok(MaskedMap::from_mask(gt, mask));
        }
    }
    Err(Error::Generation(format!(
        "could not reach observed fraction {observed_frac} after 100 attempts"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One map-trajectory record: ground truth, full trajectories, their dropout variants and
/// an observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: usize,
    pub size: usize,
    pub gt: Vec<f32>,
    pub trajectories: Vec<Trajectory>,
    /// `(q, trajectories after dropout)` per configured CSP level.
    pub csp: Vec<(f64, Vec<Trajectory>)>,
    pub masked: MaskedMap,
    pub split: Split,
    pub hash: String,
}

impl Record {
    pub fn trajs_at(&self, q: f64) -> Option<&[Trajectory]> {
        self.csp
            .iter()
            .find(|(lvl, _)| (lvl - q).abs() < 1e-9)
            .map(|(_, t)| t.as_slice())
    }

    pub fn traj_image(&self, q: f64) -> Result<Vec<f32>> {
        let t = self
            .trajs_at(q)
            .ok_or_else(|| Error::Config(format!("record {} has no CSP level {q}", self.id)))?;
        rasterize(t, self.size, self.size)
    }

    fn content_hash(&self) -> String {
        let mut bytes = Vec::new();
        for v in &self.gt {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for m in &self.masked.mask {
            bytes.push(*m as u8);
        }
        for (q, ts) in &self.csp {
            bytes.extend_from_slice(&q.to_le_bytes());
            for t in ts {
                for &(s, (x, y)) in &t.points {
                    for v in [t.robot_id, s, x, y] {
                        bytes.extend_from_slice(&(v as u64).to_le_bytes());
                    }
                }
            }
        }
        crate::config::hex_digest(&bytes)
    }
}

pub fn generate_record(cfg: &WorldgenConfig, seed: u64, id: usize) -> Result<Record> {
    let rs = mix(seed, id as u64);
    let mut r = rng(mix(rs, 0));
    let elevation = terrain(cfg, mix(rs, 1))?;
    let base = Heightmap {
        elevation,
        ..flat_heightmap(cfg.size, cfg)
    };
    let count = r.random_range(cfg.obstacles_min..=cfg.obstacles_max);
    let hm = place_obstacles(
        &base,
        mix(rs, 2),
        count,
        (cfg.obstacle_len_min, cfg.obstacle_len_max),
    )?;
    let n_robots = r.random_range(cfg.robots_min..=cfg.robots_max);
    let trajectories = gen_trajectories(&hm, n_robots, mix(rs, 3))?;
    let csp = cfg
        .csp_levels
        .iter()
        .enumerate()
        .map(|(li, &q)| {
            let s = mix3(rs, 4, li as u64);
            (q, trajectories.iter().map(|t| apply_csp(t, q, s)).collect())
        })
        .collect();
    let frac = r.random_range(cfg.observed_frac_min..=cfg.observed_frac_max);
    let gt = hm.image();
    let masked = mask_map(&gt, cfg.size, mix(rs, 5), frac)?;
    let mut rec = Record {
        id,
        size: cfg.size,
        gt,
        trajectories,
        csp,
        masked,
        split: Split::Train,
        hash: String::new(),
    };
    rec.hash = rec.content_hash();
    Ok(rec)
}

/// Ranks records by content hash and marks the first `floor(n * test_frac)` as test.
pub fn assign_splits(records: &mut [Record], test_frac: f64) {
    let n_test = (records.len() as f64 * test_frac).floor() as usize;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].hash.cmp(&records[b].hash).then(a.cmp(&b)));
    for (rank, &i) in order.iter().enumerate() {
        records[i].split = if rank < n_test { Split::Test } else { Split::Train };
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config: WorldgenConfig,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == s).collect()
    }
}

/// Generates `count` records; `jobs > 1` spreads records over threads without changing output.
pub fn build_dmt(cfg: &WorldgenConfig, seed: u64, count: usize, jobs: usize) -> Result<Dataset> {
    cfg.validate()?;
    let ids: Vec<usize> = (0..count).collect();
    let mut records = crate::par::par_map(&ids, jobs, |&i| generate_record(cfg, seed, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    assign_splits(&mut records, cfg.test_frac);
    Ok(Dataset {
        seed,
        config: cfg.clone(),
        records,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    id: usize,
    dir: String,
    hash: String,
    split: Split,
    n_robots: usize,
    observed_frac: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    format: String,
    seed: u64,
    config: WorldgenConfig,
    records: Vec<IndexEntry>,
}

fn level_tag(q: f64) -> String {
    format!("q{:03}", (q * 100.0).round() as u32)
}

/// Creates `dir` (refusing to clobber an existing one unless `overwrite`).
pub fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        if !overwrite {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                format!("{} exists; pass --overwrite to replace it", dir.display()),
            )));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn write_dataset(ds: &Dataset, dir: &Path, overwrite: bool) -> Result<()> {
    prepare_dir(dir, overwrite)?;
    let c = &ds.config;
    let side = MapSidecar::new("ground_truth", c.l_min, c.l_max, c.cell_size());
    let obs_side = MapSidecar::new("observed", c.l_min, c.l_max, c.cell_size());
    let mut entries = Vec::new();
    for rec in &ds.records {
        let name = format!("r{:05}", rec.id);
        let rd = dir.join(&name);
        fs::create_dir_all(&rd)?;
        io::write_map(&rd.join("gt.pgm"), &Image::new(rec.size, rec.size, rec.gt.clone())?, &side)?;
        io::write_map(
            &rd.join("observed.pgm"),
            &Image::new(rec.size, rec.size, rec.masked.observed.clone())?,
            &obs_side,
        )?;
        io::write_mask(&rd.join("mask.pgm"), rec.size, &rec.masked.mask)?;
        io::write_trajectories(&rd.join("traj_full.csv"), &rec.trajectories)?;
        for (q, ts) in &rec.csp {
            io::write_trajectories(&rd.join(format!("traj_{}.csv", level_tag(*q))), ts)?;
        }
        entries.push(IndexEntry {
            id: rec.id,
            dir: name,
            hash: rec.hash.clone(),
            split: rec.split,
            n_robots: rec.trajectories.len(),
            observed_frac: rec.masked.fraction(),
        });
    }
    let index = Index {
        format: "fourcnet-dmt-v1".into(),
        seed: ds.seed,
        config: ds.config.clone(),
        records: entries,
    };
    fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let ip = dir.join("index.json");
    let text = fs::read_to_string(&ip)
        .map_err(|e| Error::Missing(format!("{}: {e}; run gen-data first", ip.display())))?;
    let index: Index = serde_json::from_str(&text)?;
    let mut records = Vec::with_capacity(index.records.len());
    for e in &index.records {
        let rd = dir.join(&e.dir);
        let gt = io::read_pgm(&rd.join("gt.pgm"))?;
        let (_, mask) = io::read_mask(&rd.join("mask.pgm"))?;
        let trajectories = io::read_trajectories(&rd.join("traj_full.csv"))?;
        let mut csp = Vec::new();
        for &q in &index.config.csp_levels {
            let kept = io::read_trajectories(&rd.join(format!("traj_{}.csv", level_tag(q))))?;
            // A robot whose every point was dropped writes no rows; restore it as empty.
            let ts = trajectories
                .iter()
                .map(|t| {
                    kept.iter().find(|k| k.robot_id == t.robot_id).cloned().unwrap_or(Trajectory {
                        robot_id: t.robot_id,
                        points: Vec::new(),
                    })
                })
                .collect();
            csp.push((q, ts));
        }
        records.push(Record {
            id: e.id,
            size: gt.width,
            masked: MaskedMap::from_mask(&gt.data, mask),
            gt: gt.data,
            trajectories,
            csp,
            split: e.split,
            hash: e.hash.clone(),
        });
    }
    Ok(Dataset {
        seed: index.seed,
        config: index.config,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_corners_without_roughness() {
        let g = diamond_square(3, 1, 0.0, 0.5, Some(0.25)).unwrap();
        assert!(g.iter().all(|&v| v == 0.25));
        assert!(diamond_square(1, 1, 1.0, 0.5, None).is_err());
    }

    #[test]
    fn terrain_spans_range() {
        let cfg = WorldgenConfig::default();
        let t = terrain(&cfg, 42).unwrap();
        let lo = t.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (cfg.l_min, cfg.l_max));
        assert_eq!(t, terrain(&cfg, 42).unwrap());
    }

    #[test]
    fn csp_extremes() {
        let t = Trajectory::from_cells(0, &[(0, 0), (1, 1), (2, 2)]);
        assert_eq!(apply_csp(&t, 1.0, 3), t);
        assert!(apply_csp(&t, 0.0, 3).is_empty());
    }
}
