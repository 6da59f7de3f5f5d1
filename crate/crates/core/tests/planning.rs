use std::f64::consts::SQRT_2;

use fourcnet::config::{Config, PredictorKind};
use fourcnet::planning::astar;
use fourcnet::worldgen::decode_elevation;
use fourcnet::sim::{energy_cost, run_episode, Predictor, Snapshots, World};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain O(n²) Dijkstra with the same move rules, written without a heap.
fn dijkstra(blocked: &[bool], w: usize, h: usize, s: (usize, usize), g: (usize, usize)) -> Option<f64> {
    let n = w * h;
    let at = |x: usize, y: usize| y * w + x;
    if blocked[at(s.0, s.1)] || blocked[at(g.0, g.1)] {
        return None;
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    dist[at(s.0, s.1)] = 0.0;
    loop {
        let mut u = None;
        for i in 0..n {
            if !done[i] && dist[i].is_finite() && u.is_none_or(|j: usize| dist[i] < dist[j]) {
                u = Some(i);
            }
        }
        let u = u?;
        done[u] = true;
        if u == at(g.0, g.1) {
            return Some(dist[u]);
        }
        let (x, y) = ((u % w) as i64, (u / w) as i64);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if blocked[at(nx, ny)] {
                    continue;
                }
                let diag = dx != 0 && dy != 0;
                if diag && (blocked[at(nx, y as usize)] || blocked[at(x as usize, ny)]) {
                    continue;
                }
                let c = dist[u] + if diag { SQRT_2 } else { 1.0 };
                if c < dist[at(nx, ny)] {
                    dist[at(nx, ny)] = c;
                }
            }
        }
    }
}

fn random_map(seed: u64, w: usize, h: usize, density: f64) -> Vec<bool> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..w * h).map(|_| r.random_bool(density)).collect()
}

#[test]
fn astar_matches_dijkstra_on_random_maps() {
    let (w, h) = (16, 16);
    for seed in 0..20 {
        let mut blocked = random_map(seed, w, h, 0.25);
        blocked[0] = false;
        blocked[w * h - 1] = false;
        let a = astar(&blocked, w, h, (0, 0), (w - 1, h - 1)).map(|p| p.cost);
        let d = dijkstra(&blocked, w, h, (0, 0), (w - 1, h - 1));
        match (a, d) {
            (Some(a), Some(d)) => assert!((a - d).abs() < 1e-9, "seed {seed}: {a} vs {d}"),
            (None, None) => {}
            other => panic!("seed {seed}: reachability differs {other:?}"),
        }
    }
}

#[test]
fn path_is_connected_and_costed() {
    let blocked = random_map(77, 16, 16, 0.2);
    let free: Vec<usize> = (0..256).filter(|&i| !blocked[i]).collect();
    let (s, g) = ((free[0] % 16, free[0] / 16), (free[free.len() - 1] % 16, free[free.len() - 1] / 16));
    let p = astar(&blocked, 16, 16, s, g).expect("free corners of a sparse map connect");
    assert_eq!(p.cells.first(), Some(&s));
    assert_eq!(p.cells.last(), Some(&g));
    let mut cost = 0.0;
    for w in p.cells.windows(2) {
        let (dx, dy) = (w[0].0.abs_diff(w[1].0), w[0].1.abs_diff(w[1].1));
        assert!(dx <= 1 && dy <= 1 && dx + dy > 0);
        assert!(!blocked[w[1].1 * 16 + w[1].0]);
        cost += if dx + dy == 2 { SQRT_2 } else { 1.0 };
    }
    assert!((cost - p.cost).abs() < 1e-9);
}

proptest! {
    #[test]
    fn astar_agrees_with_dijkstra(seed in 0u64..10_000, density in 0.0f64..0.45, sx in 0usize..12, sy in 0usize..12, gx in 0usize..12, gy in 0usize..12) {
        let blocked = random_map(seed, 12, 12, density);
        let a = astar(&blocked, 12, 12, (sx, sy), (gx, gy)).map(|p| p.cost);
        let d = dijkstra(&blocked, 12, 12, (sx, sy), (gx, gy));
        prop_assert_eq!(a.is_some(), d.is_some());
        if let (Some(a), Some(d)) = (a, d) {
            prop_assert!((a - d).abs() < 1e-9);
        }
    }
}

#[test]
fn energy_ledger_is_exact() {
    let mut cfg = Config::with_seed(5);
    cfg.sim.predictor = PredictorKind::Npe;
    for seed in 0..20u64 {
        cfg.sim.budget_m = 15.0 + seed as f64;
        let world = World::generate(&cfg.worldgen, &cfg.sim, seed).unwrap();
        let log = run_episode(&world, &cfg.sim, &Predictor::Npe, seed, Snapshots::default()).unwrap();
        let geo = world.geo;
        let mut spent = vec![0.0; cfg.sim.n_robots];
        for m in &log.moves {
            let diag = m.from.0 != m.to.0 && m.from.1 != m.to.1;
            let z = |c: (usize, usize)| decode_elevation(world.image[c.1 * world.width + c.0], geo.l_min, geo.l_max);
            let dz = z(m.to) - z(m.from);
            let expect = energy_cost(if diag { SQRT_2 } else { 1.0 }, dz, geo.w, geo.k);
            assert!((m.cost - expect).abs() < 1e-9, "seed {seed}: move {m:?} expected {expect}");
            spent[m.robot_id] += m.cost;
        }
        for (i, e) in log.final_energy.iter().enumerate() {
            assert!(*e >= -1e-9, "seed {seed}: robot {i} overspent");
            assert!((log.budget - spent[i] - e).abs() < 1e-9, "seed {seed}: robot {i} ledger off");
        }
    }
}
