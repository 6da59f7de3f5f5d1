use fourcnet::metrics::{coverage_pct, mse, oiou, ssim, ssim_raw, vts};
use fourcnet::worldgen::Trajectory;
use fourcnet::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const T: f32 = 0.95;

struct Case {
    pred: Vec<f32>,
    gt: Vec<f32>,
    region: Vec<bool>,
    trajs: Vec<Trajectory>,
}

fn case(seed: u64) -> Case {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let cell = |r: &mut ChaCha8Rng| if r.random_bool(0.2) { 1.0 } else { r.random_range(0.0..0.8f32) };
    let pred = (0..64).map(|_| cell(&mut r)).collect();
    let gt = (0..64).map(|_| cell(&mut r)).collect();
    let mut region: Vec<bool> = (0..64).map(|_| r.random_bool(0.5)).collect();
    region[0] = true;
    let trajs = (0..2)
        .map(|id| {
            let cells: Vec<(usize, usize)> = (0..r.random_range(1..10)).map(|_| (r.random_range(0..8), r.random_range(0..8))).collect();
            Trajectory::from_cells(id, &cells)
        })
        .collect();
    Case { pred, gt, region, trajs }
}

#[test]
fn brute_force_agreement_on_random_instances() {
    for seed in 0..50 {
        let c = case(seed);
        let (mut sq, mut n, mut inter, mut union) = (0.0, 0, 0, 0);
        for y in 0..8 {
            for x in 0..8 {
                let i = y * 8 + x;
                if !c.region[i] {
                    continue;
                }
                let d = 255.0 * c.pred[i] as f64 - 255.0 * c.gt[i] as f64;
                sq += d * d;
                n += 1;
                let (p, g) = (c.pred[i] >= T, c.gt[i] >= T);
                if p && g {
                    inter += 1;
                }
                if p || g {
                    union += 1;
                }
            }
        }
        let m = mse(&c.pred, &c.gt, Some(&c.region)).unwrap();
        assert!((m - sq / n as f64).abs() < 1e-6 * m.max(1.0), "seed {seed}");
        let o = oiou(&c.pred, &c.gt, Some(&c.region), T).unwrap();
        let expect = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        assert_eq!(o, expect, "seed {seed}");

        let mut pts = Vec::new();
        for t in &c.trajs {
            for &(_, (x, y)) in &t.points {
                pts.push(c.pred[y * 8 + x] < T);
            }
        }
        let v = vts(&c.pred, 8, &c.trajs).unwrap();
        assert_eq!(v, pts.iter().filter(|&&b| b).count() as f64 / pts.len() as f64);

        let cov = coverage_pct(&c.region);
        assert_eq!(cov, 100.0 * c.region.iter().filter(|&&b| b).count() as f64 / 64.0);
    }
}

#[test]
fn hand_cases() {
    let z = vec![0.0f32; 9];
    assert_eq!(mse(&z, &z, None).unwrap(), 0.0);
    let shifted = vec![16.0 / 255.0f32; 9];
    assert!((mse(&shifted, &z, None).unwrap() - 256.0).abs() < 1e-3);
    assert!(matches!(mse(&z, &z, Some(&[false; 9])), Err(Error::UndefinedRegion(_))));

    // Obstacles: predicted {(0,0), (0,1)}, true {(0,1), (0,2)} on a 3x3 grid.
    let mut p = vec![0.2f32; 9];
    let mut g = vec![0.2f32; 9];
    p[0] = 1.0;
    p[3] = 1.0;
    g[3] = 1.0;
    g[6] = 1.0;
    assert!((oiou(&p, &g, None, T).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(oiou(&p, &p, None, T).unwrap(), 1.0);
    assert_eq!(oiou(&z, &z, None, T).unwrap(), 1.0);
    let mut d = vec![0.2f32; 9];
    d[8] = 1.0;
    assert_eq!(oiou(&p, &d, None, T).unwrap(), 0.0);

    // Ten trajectory points, two on predicted obstacles.
    let mut m = vec![0.1f32; 16];
    m[0] = 1.0;
    m[5] = 1.0;
    let cells: Vec<(usize, usize)> = (0..10).map(|i| (i % 4, i / 4)).collect();
    let t = Trajectory::from_cells(0, &cells);
    assert!((vts(&m, 4, &[t]).unwrap() - 0.8).abs() < 1e-12);
    assert!(vts(&m, 4, &[]).is_err());

    assert_eq!(coverage_pct(&[true; 5]), 100.0);
    assert_eq!(coverage_pct(&[false; 5]), 0.0);
}

#[test]
fn ssim_identities() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let a: Vec<f32> = (0..100).map(|_| r.random_range(0.0..1.0)).collect();
    assert!((ssim(&a, &a, 10).unwrap() - 1.0).abs() < 1e-9);
    let inv: Vec<f32> = a.iter().map(|v| 1.0 - v).collect();
    assert!(ssim_raw(&a, &inv, 10).unwrap() < 0.0);
    assert_eq!(ssim(&a, &inv, 10).unwrap(), 0.0);

    // Constant maps reduce to the luminance term.
    let (x, y) = (0.3f64, 0.6f64);
    let c1 = 0.01f64.powi(2);
    let expect = (2.0 * x * y + c1) / (x * x + y * y + c1);
    let got = ssim_raw(&[x as f32; 64], &[y as f32; 64], 8).unwrap();
    assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
}

proptest! {
    #[test]
    fn metrics_stay_in_range(seed in 0u64..5000) {
        let c = case(seed);
        let m = mse(&c.pred, &c.gt, Some(&c.region)).unwrap();
        prop_assert!((0.0..=255.0 * 255.0).contains(&m));
        let o = oiou(&c.pred, &c.gt, Some(&c.region), T).unwrap();
        prop_assert!((0.0..=1.0).contains(&o));
        let s = ssim(&c.pred, &c.gt, 8).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(mse(&c.pred, &c.gt, None).unwrap(), mse(&c.gt, &c.pred, None).unwrap());
    }
}
