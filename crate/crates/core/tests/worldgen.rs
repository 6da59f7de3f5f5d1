use fourcnet::config::WorldgenConfig;
use fourcnet::grid::{flood, OBSTACLE_LEVEL};
use fourcnet::worldgen::*;
use proptest::prelude::*;

fn long_path() -> Trajectory {
    let cells: Vec<(usize, usize)> = (0..10_000).map(|i| (i % 100, i / 100)).collect();
    Trajectory::from_cells(2, &cells)
}

#[test]
fn dropout_keeps_the_expected_fraction() {
    let t = long_path();
    for q in [0.25, 0.5, 1.0] {
        let kept = apply_csp(&t, q, 17);
        let frac = kept.len() as f64 / t.len() as f64;
        assert!((frac - q).abs() <= 0.02, "q {q}: kept {frac}");
        // Survivors keep their original timesteps, in order.
        assert!(kept.points.windows(2).all(|w| w[0].0 < w[1].0));
        assert!(kept.points.iter().all(|&(s, c)| t.points[s].1 == c));
    }
    assert_eq!(apply_csp(&t, 0.5, 17), apply_csp(&t, 0.5, 17));
    assert_ne!(apply_csp(&t, 0.5, 17), apply_csp(&t, 0.5, 18));
}

#[test]
fn dropout_levels_nest_under_a_shared_seed() {
    // The same seed keeps a subset as q shrinks, since the per-point draw is shared.
    let t = long_path();
    let a = apply_csp(&t, 0.25, 3);
    let b = apply_csp(&t, 0.5, 3);
    assert!(a.points.iter().all(|p| b.points.contains(p)));
}

#[test]
fn raster_is_the_union_of_points() {
    let a = Trajectory::from_cells(0, &[(0, 0), (1, 1), (2, 2)]);
    let b = Trajectory::from_cells(1, &[(2, 2), (3, 0)]);
    let g = rasterize(&[a, b], 4, 3).unwrap();
    let ones: Vec<usize> = (0..12).filter(|&i| g[i] == 1.0).collect();
    assert_eq!(ones, vec![0, 3, 5, 10]);
    assert!(g.iter().all(|&v| v == 0.0 || v == 1.0));
    assert!(rasterize(&[Trajectory::from_cells(0, &[(4, 0)])], 4, 3).is_err());
}

#[test]
fn records_meet_their_invariants() {
    let cfg = WorldgenConfig::default();
    for id in 0..8 {
        let r = generate_record(&cfg, 21, id).unwrap();
        let n = cfg.size * cfg.size;
        assert_eq!(r.gt.len(), n);
        assert!(r.gt.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let blocked: Vec<bool> = r.gt.iter().map(|&v| v >= OBSTACLE_LEVEL).collect();
        let free: Vec<usize> = (0..n).filter(|&i| !blocked[i]).collect();
        assert!(free.len() as f64 >= 0.6 * n as f64, "record {id}");
        let reach = flood(&blocked, cfg.size, cfg.size, (free[0] % cfg.size, free[0] / cfg.size));
        assert!(free.iter().all(|&i| reach[i]), "record {id}: free space is split");

        let frac = r.masked.fraction();
        assert!(frac >= cfg.observed_frac_min - 0.05 && frac <= cfg.observed_frac_max + 0.05, "record {id}: {frac}");
        for i in 0..n {
            assert_eq!(r.masked.observed[i], if r.masked.mask[i] { r.gt[i] } else { 0.0 });
        }
        for t in &r.trajectories {
            assert!(t.cells().all(|c| !blocked[c.1 * cfg.size + c.0]));
            for w in t.points.windows(2) {
                let (a, b) = (w[0].1, w[1].1);
                assert!(a.0.abs_diff(b.0) <= 1 && a.1.abs_diff(b.1) <= 1);
            }
        }
        assert_eq!(r.csp.len(), cfg.csp_levels.len());
    }
}

#[test]
fn dataset_roundtrip_and_determinism() {
    let cfg = WorldgenConfig {
        count: 8,
        ..Default::default()
    };
    let a = build_dmt(&cfg, 4, 8, 1).unwrap();
    let b = build_dmt(&cfg, 4, 8, 2).unwrap();
    assert_eq!(a, b, "worker count must not change the data");
    assert_eq!(a.records.len(), 8);
    assert_ne!(a.records[0].gt, build_dmt(&cfg, 5, 8, 1).unwrap().records[0].gt);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dmt");
    write_dataset(&a, &path, false).unwrap();
    assert!(write_dataset(&a, &path, false).is_err(), "refuses to clobber");
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.records.len(), 8);
    for (x, y) in a.records.iter().zip(&back.records) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.split, y.split);
        assert_eq!(x.masked.mask, y.masked.mask);
        assert_eq!(x.trajectories, y.trajectories);
        assert_eq!(x.csp, y.csp);
        assert!(x.gt.iter().zip(&y.gt).all(|(p, q)| (p - q).abs() <= 1.0 / 65535.0));
    }
}

#[test]
fn mask_rejects_impossible_fractions() {
    let gt = vec![0.2f32; 64];
    assert!(mask_map(&gt, 8, 1, 0.0).is_err());
    assert!(mask_map(&gt, 8, 1, 1.0).is_err());
}

proptest! {
    #[test]
    fn mask_hits_its_target(seed in 0u64..1000, frac in 0.2f64..0.8) {
        let gt = vec![0.2f32; 32 * 32];
        let m = mask_map(&gt, 32, seed, frac).unwrap();
        prop_assert!((m.fraction() - frac).abs() <= 0.05 + 1e-9);
    }

    #[test]
    fn elevation_decoding_is_linear(v in 0.0f32..TERRAIN_MAX) {
        let z = decode_elevation(v, 0.0, 0.3);
        prop_assert!((z - v as f64 / TERRAIN_MAX as f64 * 0.3).abs() < 1e-6);
    }
}
