use fourcnet::config::{Config, SimConfig, StartScheme, WorldgenConfig};
use fourcnet::grid::disk;
use fourcnet::metrics::{coverage_pct, oiou};
use fourcnet::sim::*;
use fourcnet::worldgen::{rasterize, Trajectory};
use proptest::prelude::*;

#[test]
fn sensing_reveals_the_disk() {
    let world = vec![0.3f32; 81];
    let (mut obs, mut mask) = (vec![0.0; 81], vec![false; 81]);
    assert_eq!(sense(&world, 9, &mut obs, &mut mask, (4, 4), 2.0), 13);
    let mut expect = vec![false; 81];
    for y in 0..9i32 {
        for x in 0..9i32 {
            expect[(y * 9 + x) as usize] = (x - 4).pow(2) + (y - 4).pow(2) <= 4;
        }
    }
    assert_eq!(mask, expect);
    assert!(obs.iter().zip(&mask).all(|(&o, &m)| o == if m { 0.3 } else { 0.0 }));
    // Idempotent.
    assert_eq!(sense(&world, 9, &mut obs, &mut mask, (4, 4), 2.0), 0);
    assert_eq!(mask, expect);
}

#[test]
fn walls_occlude() {
    let mut world = vec![0.3f32; 81];
    for y in 0..9 {
        world[y * 9 + 5] = 1.0;
    }
    let (mut obs, mut mask) = (vec![0.0; 81], vec![false; 81]);
    sense(&world, 9, &mut obs, &mut mask, (3, 4), 3.0);
    assert!(mask[4 * 9 + 5], "the blocking cell itself is seen");
    assert!(!mask[4 * 9 + 6], "cells behind the wall stay unknown");
    assert_eq!(obs[4 * 9 + 5], 1.0);
}

#[test]
fn energy_arithmetic() {
    assert_eq!(energy_cost(1.0, 0.0, 1.0, 2.0), 1.0);
    assert_eq!(energy_cost(1.0, -0.2, 1.0, 2.0), 1.0);
    let total: f64 = [0.1, -0.2, 0.0].iter().map(|&dz| energy_cost(1.0, dz, 1.0, 2.0)).sum();
    assert!((total - 3.2).abs() < 1e-12);

    let low = energy_budget(25.0, 225.0).unwrap();
    assert!((45.0..=46.5).contains(&low), "{low}");
    let high = energy_budget(40.0, 900.0).unwrap();
    assert!((172.0..=178.0).contains(&high), "{high}");
    assert!(energy_budget(0.0, 225.0).is_err());
}

#[test]
fn path_energy_matches_summation() {
    let geo = Geometry {
        cell_size: 1.0,
        l_min: 0.0,
        l_max: 0.3,
        w: 1.0,
        k: 2.0,
    };
    // Elevations 0, 0.1, 0.3, 0.15 along a path with one diagonal.
    let mut map = vec![0.0f32; 16];
    let path = [(0, 0), (1, 0), (2, 1), (3, 1)];
    let z = [0.0, 0.1, 0.3, 0.15];
    for (c, e) in path.iter().zip(z) {
        map[c.1 * 4 + c.0] = (e / 0.3 * 0.8) as f32;
    }
    let expect = 1.0 + 2.0 * 0.1 + (2f64.sqrt() + 2.0 * 0.2) + 1.0;
    assert!((path_energy(&map, 4, &path, &geo) - expect).abs() < 1e-6);
}

#[test]
fn trajectory_exchange_is_range_gated() {
    let mut robots = vec![Robot::new(0, (0, 0), 10.0, 64), Robot::new(1, (7, 7), 10.0, 64)];
    robots[0].traj = Trajectory::from_cells(0, &[(0, 0), (0, 1)]);
    robots[1].traj = Trajectory::from_cells(1, &[(7, 7), (6, 7)]);
    exchange_trajectories(&mut robots, 1.0, 2.0, 1, 1, 8).unwrap();
    assert!(robots.iter().all(|r| r.received.iter().all(|&v| v == 0.0)));

    let mut robots = vec![
        Robot::new(0, (1, 1), 10.0, 64),
        Robot::new(1, (2, 1), 10.0, 64),
        Robot::new(2, (1, 2), 10.0, 64),
    ];
    let paths = [vec![(0, 0), (1, 1)], vec![(3, 0), (2, 1)], vec![(0, 3), (1, 2)]];
    for (r, p) in robots.iter_mut().zip(&paths) {
        r.traj = Trajectory::from_cells(r.id, p);
    }
    exchange_trajectories(&mut robots, 1.0, 2.0, 1, 1, 8).unwrap();
    for i in 0..3 {
        let others: Vec<Trajectory> = (0..3).filter(|&j| j != i).map(|j| robots[j].traj.clone()).collect();
        assert_eq!(robots[i].received, rasterize(&others, 8, 8).unwrap(), "robot {i}");
    }
}

#[test]
fn frontier_detection() {
    let obs = vec![0.2f32; 64];
    assert!(detect_frontiers(&obs, &[true; 64], 8).is_empty());
    // Left half observed: one cluster along the boundary column.
    let mask: Vec<bool> = (0..64).map(|i| i % 8 < 4).collect();
    let f = detect_frontiers(&obs, &mask, 8);
    assert_eq!(f.len(), 1);
    assert_eq!(f[0].size, 8);
    assert_eq!(f[0].cell.0, 3);
    // Two observed cells are too small a cluster.
    let mut tiny = vec![false; 64];
    tiny[0] = true;
    tiny[1] = true;
    assert!(detect_frontiers(&obs, &tiny, 8).is_empty());
}

#[test]
fn information_gain_cases() {
    let pred = vec![0.3f32; 81];
    let conf = vec![1.0f32; 81];
    assert_eq!(info_gain(&pred, &conf, &[true; 81], 9, (4, 4), 2.0).unwrap(), 0.0);
    assert_eq!(info_gain(&pred, &conf, &[false; 81], 9, (4, 4), 2.0).unwrap(), 1.0);

    // Right half of the disk unknown with C = 0.5, left half observed.
    let mask: Vec<bool> = (0..81).map(|i| i % 9 <= 4).collect();
    let half = vec![0.5f32; 81];
    let cells = disk(9, 9, (4, 4), 2.0);
    let unknown = cells.iter().filter(|c| c.0 > 4).count();
    let expect = 0.5 * unknown as f64 / cells.len() as f64;
    assert!((info_gain(&pred, &half, &mask, 9, (4, 4), 2.0).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn traversability_and_utility() {
    let mut pred = vec![0.0f32; 9];
    assert_eq!(traversability_score(&pred, 3, &[(0, 0), (1, 0)]).unwrap(), 0.0);
    pred[0] = 0.1;
    pred[1] = 0.2;
    pred[2] = 0.3;
    let t = traversability_score(&pred, 3, &[(0, 0), (1, 0), (2, 0)]).unwrap();
    assert!((t - 0.6).abs() < 1e-6);
    pred[4] = 1.0;
    assert!(traversability_score(&pred, 3, &[(0, 0), (1, 1)]).is_err());
    assert_eq!(utility(1.0, 2.0, 3.0, [4.0, -1.0, -5.0]), -13.0);
    assert!(select(&[], 3).is_none());
}

#[test]
fn baselines() {
    let gt: Vec<f32> = (0..64).map(|i| if i % 8 == 6 { 1.0 } else { (i % 5) as f32 / 10.0 }).collect();
    let mask: Vec<bool> = (0..64).map(|i| i % 8 < 4).collect();
    let obs: Vec<f32> = gt.iter().zip(&mask).map(|(&g, &m)| if m { g } else { 0.0 }).collect();

    let (full, _) = predict_npe(&gt, &[true; 64]).unwrap();
    assert_eq!(full, gt);
    let (npe, conf) = predict_npe(&obs, &mask).unwrap();
    assert!(conf.iter().all(|&c| c == 1.0));
    let unknown: Vec<bool> = mask.iter().map(|m| !m).collect();
    assert_eq!(oiou(&npe, &gt, Some(&unknown), 0.95).unwrap(), 0.0);

    let other: Vec<f32> = (0..64).map(|i| (i % 3) as f32 / 4.0).collect();
    let db = vec![other, gt.clone()];
    let (p, _) = predict_db(&obs, &mask, 8, &db).unwrap();
    for i in 0..64 {
        if mask[i] {
            assert_eq!(p[i], gt[i]);
        }
    }
    let err = fourcnet::metrics::mse(&p, &gt, Some(&unknown)).unwrap();
    // Only the two blended columns next to the boundary can differ.
    assert!(err < 2000.0, "{err}");
    assert!(predict_db(&obs, &mask, 8, &[]).is_err());
}

fn open_world(size: usize, cfg: &SimConfig) -> World {
    World::from_image(vec![0.4; size * size], size, &WorldgenConfig::default(), cfg)
}

#[test]
fn single_robot_covers_a_small_open_world() {
    let cfg = SimConfig {
        n_robots: 1,
        start: StartScheme::Center,
        area_m2: 81.0,
        budget_m: 500.0,
        ..Default::default()
    };
    let log = run_episode(&open_world(9, &cfg), &cfg, &Predictor::Npe, 3, Snapshots::default()).unwrap();
    assert_eq!(log.final_coverage, 100.0);
}

#[test]
fn zero_budget_keeps_the_initial_view() {
    let cfg = SimConfig {
        budget_m: 0.0,
        area_m2: 256.0,
        ..Default::default()
    };
    let world = open_world(16, &cfg);
    let log = run_episode(&world, &cfg, &Predictor::Npe, 1, Snapshots::default()).unwrap();
    assert!(log.moves.is_empty());
    let starts = start_positions(&world.image, 16, cfg.n_robots, cfg.start, 0).unwrap();
    let mut mask = vec![false; 256];
    for c in starts {
        for d in disk(16, 16, c, cfg.sensing_m / world.geo.cell_size) {
            mask[d.1 * 16 + d.0] = true;
        }
    }
    assert_eq!(log.final_coverage, coverage_pct(&mask));
}

#[test]
fn episodes_are_deterministic() {
    let cfg = Config::with_seed(2);
    let world = World::generate(&cfg.worldgen, &cfg.sim, 9).unwrap();
    let a = run_episode(&world, &cfg.sim, &Predictor::Npe, 4, Snapshots::default()).unwrap();
    let b = run_episode(&world, &cfg.sim, &Predictor::Npe, 4, Snapshots::default()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(a.final_coverage > 0.0);
}

proptest! {
    #[test]
    fn sensing_is_monotone_and_bounded(x in 0usize..12, y in 0usize..12, r in 0.5f64..4.0, walls in proptest::collection::vec(0usize..144, 0..30)) {
        let mut world = vec![0.3f32; 144];
        for w in walls {
            world[w] = 1.0;
        }
        let (mut obs, mut mask) = (vec![0.0; 144], vec![false; 144]);
        let n = sense(&world, 12, &mut obs, &mut mask, (x, y), r);
        prop_assert_eq!(n, mask.iter().filter(|&&m| m).count());
        prop_assert!(n <= disk(12, 12, (x, y), r).len());
        prop_assert!(mask[y * 12 + x]);
        for i in 0..144 {
            if mask[i] {
                prop_assert_eq!(obs[i], world[i]);
            }
        }
    }

    #[test]
    fn energy_cost_never_rewards_descent(dd in 0.0f64..2.0, dz in -1.0f64..1.0) {
        let c = energy_cost(dd, dz, 1.0, 2.0);
        prop_assert!(c >= dd);
        prop_assert!(c <= dd + 2.0 * dz.abs() + 1e-12);
    }
}
