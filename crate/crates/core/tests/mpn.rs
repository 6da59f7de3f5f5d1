use fourcnet::cmtp::cmtp_loss;
use fourcnet::config::MpnConfig;
use fourcnet::mpn::*;
use fourcnet_numerics::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::from_config(&MpnConfig::default())
}

fn small_config() -> MpnConfig {
    MpnConfig {
        channels: vec![4, 4, 8, 8],
        blocks: 4,
        attn_dim: 8,
        time_dim: 8,
        use_encoder: false,
        use_attention: false,
        ..Default::default()
    }
}

fn small_net() -> (MpnNet, fourcnet_numerics::ParamSet) {
    let c = small_config();
    MpnNet::new(MpnArch::from_config(&c, 8, 6, 8), 11).unwrap()
}

#[test]
fn karras_grid_of_five() {
    let s = schedule().karras_sigmas(5).unwrap();
    let expect = [80.0, 17.52783196464411, 2.515218976147159, 0.16975275626876413, 0.002];
    for (a, b) in s.iter().zip(expect) {
        assert!((a - b).abs() <= 1e-9 * b.max(1.0), "{a} vs {b}");
    }
    assert!(schedule().karras_sigmas(1).is_err());
}

#[test]
fn karras_endpoints_are_exact() {
    for n in 2..60 {
        let s = schedule().karras_sigmas(n).unwrap();
        assert_eq!(s[0], 80.0);
        assert_eq!(s[n - 1], 0.002);
        assert!(s.windows(2).all(|w| w[0] > w[1]));
    }
}

#[test]
fn preconditioning_coefficients() {
    let s = schedule();
    assert_eq!(s.skip_out(0.002).unwrap(), (1.0, 0.0));
    let (skip, _) = s.skip_out(0.002 + 0.5).unwrap();
    assert!((skip - 0.5).abs() < 1e-12);
    let mut prev = s.skip_out(0.002).unwrap();
    for i in 1..=1000 {
        let t = 0.002 + (80.0 - 0.002) * i as f64 / 1000.0;
        let cur = s.skip_out(t).unwrap();
        assert!(cur.0 < prev.0 && cur.1 > prev.1, "t {t}");
        prev = cur;
    }
    assert!(s.skip_out(0.001).is_err());
}

#[test]
fn discretization_ramp() {
    let s = NoiseSchedule {
        total_steps: 1000,
        ..schedule()
    };
    assert_eq!(s.step_count(0), 2);
    assert_eq!(s.step_count(1000), 100);
    let counts: Vec<usize> = (0..=1000).map(|k| s.step_count(k)).collect();
    assert!(counts.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn sampling_levels() {
    let s = schedule();
    assert_eq!(s.sampling_sigmas(1).unwrap(), vec![80.0]);
    assert_eq!(s.sampling_sigmas(4).unwrap(), s.karras_sigmas(4).unwrap());
    assert!(s.sampling_sigmas(0).is_err());
}

#[test]
fn boundary_condition_holds() {
    let (net, ps) = small_net();
    let mut r = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let m: Vec<f32> = (0..64).map(|_| r.random_range(0.0..1.0)).collect();
        let mut g = Graph::<f32>::inference(false);
        let mv = g.input(Tensor::new(&[1, 1, 8, 8], m.clone()).unwrap());
        let o = g.input(Tensor::new(&[1, 1, 8, 8], vec![0.0; 64]).unwrap());
        let k = g.input(Tensor::new(&[1, 1, 8, 8], vec![0.0; 64]).unwrap());
        let y = net.consistency_forward(&mut g, &ps, mv, &[0.002], o, k, None).unwrap();
        let out = g.tensor(y);
        assert!(out.data().iter().zip(&m).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}

fn plane(v: Vec<f64>, h: usize, w: usize) -> Tensor<f64> {
    Tensor::new(&[1, 1, h, w], v).unwrap()
}

#[test]
fn sobel_on_a_vertical_step() {
    let step: Vec<f64> = (0..25).map(|i| if i % 5 >= 2 { 1.0 } else { 0.0 }).collect();
    let mut g = Graph::<f64>::new(false);
    let a = g.input(plane(step, 5, 5));
    let b = g.input(plane(vec![0.0; 25], 5, 5));
    let m = sobel_magnitude(&mut g, a).unwrap();
    let mag = g.tensor(m);
    for (i, v) in mag.data().iter().enumerate() {
        let expect = if matches!(i % 5, 1 | 2) { 4.0 } else { 0.0 };
        assert!((v - expect).abs() < 1e-5, "cell {i}: {v}");
    }
    let l = edge_loss(&mut g, a, b).unwrap();
    assert!((g.scalar_value(l) - 6.4).abs() < 1e-4);
}

#[test]
fn compound_loss_identities() {
    let pyr = FeaturePyramid::default();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..64).map(|_| r.random_range(0.0..1.0)).collect();
    let y: Vec<f64> = (0..64).map(|_| r.random_range(0.0..1.0)).collect();
    let mut g = Graph::<f64>::new(false);
    let (a, b) = (g.input(plane(x, 8, 8)), g.input(plane(y, 8, 8)));
    let same = compound_loss(&mut g, &pyr, a, a, 0.1, 0.04).unwrap();
    assert_eq!(g.scalar_value(same), 0.0);
    let d = pyr.distance(&mut g, a, b).unwrap();
    let e = edge_loss(&mut g, a, b).unwrap();
    let both = compound_loss(&mut g, &pyr, a, b, 0.1, 0.04).unwrap();
    let (d, e, both) = (g.scalar_value(d), g.scalar_value(e), g.scalar_value(both));
    assert!(d > 0.0 && e > 0.0);
    assert!((both - (0.1 * d + 0.04 * e)).abs() < 1e-12);
    let zero = compound_loss(&mut g, &pyr, a, b, 0.0, 0.0).unwrap();
    assert_eq!(g.scalar_value(zero), 0.0);
    assert!(compound_loss(&mut g, &pyr, a, b, -1.0, 0.0).is_err());
}

#[test]
fn infonce_values() {
    let mut g = Graph::<f64>::new(false);
    let one = g.input(Tensor::new(&[1, 2], vec![0.6, 0.8]).unwrap());
    let l = cmtp_loss(&mut g, one, one, 0.07).unwrap();
    assert!(g.scalar_value(l).abs() < 1e-12);

    let eye = g.input(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let l = cmtp_loss(&mut g, eye, eye, 1.0).unwrap();
    assert!((g.scalar_value(l) - 0.3132616875182228).abs() < 1e-12);
    assert!(cmtp_loss(&mut g, eye, eye, 0.0).is_err());
}

#[test]
fn sampling_respects_observations() {
    let (net, ps) = small_net();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let obs: Vec<f32> = (0..64).map(|_| r.random_range(0.0..1.0)).collect();
    let full = [true; 64];
    let req = Request {
        obs: &obs,
        mask: &full,
        ctx: None,
    };
    let out = sample_prediction(&net, &ps, &[req.clone()], 3, 1).unwrap();
    assert_eq!(out[0], obs);

    let half: Vec<bool> = (0..64).map(|i| i < 32).collect();
    let part = Request {
        obs: &obs,
        mask: &half,
        ctx: None,
    };
    let a = sample_prediction(&net, &ps, &[part.clone(), part.clone()], 2, 9).unwrap();
    let b = sample_prediction(&net, &ps, &[part.clone(), part.clone()], 2, 9).unwrap();
    assert_eq!(a, b);
    assert!(a[0][..32] == obs[..32]);
    assert!(a[0].iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(sample_prediction(&net, &ps, &[part], 0, 9).is_err());
}

#[test]
fn training_is_seeded() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let maps: Vec<Vec<f32>> = (0..4).map(|_| (0..64).map(|_| r.random_range(0.0..1.0)).collect()).collect();
    let mask: Vec<f32> = (0..64).map(|i| (i % 2) as f32).collect();
    let obs: Vec<Vec<f32>> = maps.iter().map(|m| m.iter().zip(&mask).map(|(a, b)| a * b).collect()).collect();
    let examples: Vec<Vec<Example>> = (0..4)
        .map(|i| {
            vec![Example {
                gt: &maps[i],
                obs: &obs[i],
                mask: &mask,
                ctx: None,
            }]
        })
        .collect();
    let cfg = MpnConfig {
        steps: 3,
        batch: 2,
        ..small_config()
    };
    let arch = MpnArch::from_config(&cfg, 8, 6, 8);
    let a = train_mpn(arch.clone(), &examples, &cfg, 4).unwrap();
    let b = train_mpn(arch.clone(), &examples, &cfg, 4).unwrap();
    assert_eq!(a.losses, b.losses);
    assert!(a.losses.iter().all(|l| l.is_finite() && *l >= 0.0));
    let big = MpnConfig { batch: 5, ..cfg.clone() };
    assert!(train_mpn(arch, &examples, &big, 4).is_err());
}

proptest! {
    #[test]
    fn skip_and_out_stay_in_unit_range(t in 0.002f64..80.0) {
        let (s, o) = schedule().skip_out(t).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((0.0..=0.5).contains(&o));
    }
}
