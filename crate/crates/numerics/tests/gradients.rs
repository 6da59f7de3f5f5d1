//! Finite-difference checks for every differentiable primitive.

use fourcnet_numerics::layers::{BatchNorm, ConvBlock, CrossAttention, Linear, UpBlock};
use fourcnet_numerics::{
    grad_check, GradCheckConfig, Graph, ParamId, ParamSet, Result, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi) as f32).collect()).unwrap()
}

/// `sum(y ⊙ r)` with a fixed pseudo-random `r`, so every output element matters.
fn project(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let n = g.value(y).len();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let r = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z = g.mul_const(y, r)?;
    Ok(g.sum(z))
}

fn check(ps: &ParamSet<f32>, f: impl Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>) -> f64 {
    let report = grad_check(&ps.cast(), &GradCheckConfig::default(), f).unwrap();
    assert!(report.coords_checked > 0);
    report.max_rel_error
}

struct Inputs {
    ps: ParamSet<f32>,
    ids: Vec<ParamId>,
}

fn inputs(shapes: &[&[usize]], seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| ps.add(&format!("in{i}"), rand_tensor(&mut rng, s, -1.0, 1.0), true).unwrap())
        .collect();
    Inputs { ps, ids }
}

#[test]
fn conv2d_input_and_kernel() {
    for &(stride, pad) in &[(1, 0), (1, 1), (2, 1)] {
        let inp = inputs(&[&[2, 3, 6, 5], &[4, 3, 3, 3]], 1);
        let err = check(&inp.ps, |g, p| {
            let x = g.param(p, inp.ids[0]);
            let w = g.param(p, inp.ids[1]);
            let y = g.conv2d(x, w, stride, pad)?;
            project(g, y)
        });
        assert!(err < TOL, "stride {stride} pad {pad}: {err}");
    }
}

#[test]
fn transposed_conv() {
    let inp = inputs(&[&[2, 3, 4, 4], &[3, 2, 4, 4]], 2);
    let err = check(&inp.ps, |g, p| {
        let x = g.param(p, inp.ids[0]);
        let w = g.param(p, inp.ids[1]);
        let y = g.conv_transpose2d(x, w, 2, 1)?;
        project(g, y)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn linear_layer_is_tight() {
    let inp = inputs(&[&[3, 5], &[4, 5], &[4]], 3);
    let err = check(&inp.ps, |g, p| {
        let x = g.param(p, inp.ids[0]);
        let w = g.param(p, inp.ids[1]);
        let b = g.param(p, inp.ids[2]);
        let y = g.linear(x, w, Some(b))?;
        project(g, y)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn elementwise_and_reductions() {
    let inp = inputs(&[&[2, 3, 4], &[2, 3, 4]], 4);
    let err = check(&inp.ps, |g, p| {
        let a = g.param(p, inp.ids[0]);
        let b = g.param(p, inp.ids[1]);
        let s = g.add(a, b)?;
        let d = g.sub(a, b)?;
        let m = g.mul(s, d)?;
        let sg = g.sigmoid(m);
        let sc = g.scale(sg, 1.7);
        let sh = g.add_scalar(sc, 0.3);
        let ss = g.scale_samples(sh, &[0.5, -2.0])?;
        let mean = g.mean(ss);
        let sq = g.mul(a, a)?;
        let rt = g.sqrt_eps(sq);
        let total = project(g, rt)?;
        let both = g.add(total, mean)?;
        Ok(both)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn relu_and_clamp_away_from_kinks() {
    let mut ps = ParamSet::new();
    let vals = vec![-0.8, -0.3, 0.2, 0.7, 1.4, 0.45, -1.2, 0.9];
    let id = ps.add("x", Tensor::new(&[8], vals).unwrap(), true).unwrap();
    let err = check(&ps, |g, p| {
        let x = g.param(p, id);
        let r = g.relu(x);
        let c = g.clamp(x, -0.5, 1.0);
        let y = g.add(r, c)?;
        project(g, y)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn softmax_and_log_softmax() {
    let inp = inputs(&[&[3, 5]], 5);
    let err = check(&inp.ps, |g, p| {
        let x = g.param(p, inp.ids[0]);
        let s = g.softmax(x)?;
        let l = g.log_softmax(x)?;
        let y = g.add(s, l)?;
        project(g, y)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn batch_norm_training_batch_of_four() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ps = ParamSet::new();
    let x = ps.add("x", rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0), true).unwrap();
    let bn = BatchNorm::new(&mut ps, "bn", 3).unwrap();
    let err = check(&ps, |g, p| {
        let xv = g.param(p, x);
        let y = bn.forward(g, p, xv)?;
        project(g, y)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn batch_norm_eval_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ps = ParamSet::new();
    let x = ps.add("x", rand_tensor(&mut rng, &[2, 3, 2, 2], -1.0, 1.0), true).unwrap();
    let bn = BatchNorm::new(&mut ps, "bn", 3).unwrap();
    ps.get_mut(bn.running_mean).data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
    ps.get_mut(bn.running_var).data_mut().copy_from_slice(&[0.5, 1.5, 2.0]);
    let cfg = GradCheckConfig {
        training: false,
        ..Default::default()
    };
    let report = grad_check(&ps.cast(), &cfg, |g, p| {
        let xv = g.param(p, x);
        let y = bn.forward(g, p, xv)?;
        project(g, y)
    })
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn shape_ops() {
    let inp = inputs(&[&[2, 3, 4, 4], &[2, 2, 4, 4], &[2, 5]], 8);
    let err = check(&inp.ps, |g, p| {
        let a = g.param(p, inp.ids[0]);
        let b = g.param(p, inp.ids[1]);
        let off = g.param(p, inp.ids[2]);
        let cat = g.concat(&[a, b], 1)?;
        let biased = g.sample_channel_bias(cat, off)?;
        let padded = g.pad_replicate(biased, 1)?;
        let pooled = g.global_avg_pool(padded)?;
        let r = g.reshape(biased, &[2, 5, 16])?;
        let t = g.transpose12(r)?;
        let l1 = project(g, t)?;
        let l2 = project(g, pooled)?;
        g.add(l1, l2)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn l2_normalize_rows() {
    let inp = inputs(&[&[3, 6]], 9);
    let err = check(&inp.ps, |g, p| {
        let x = g.param(p, inp.ids[0]);
        let y = g.l2_normalize_rows(x)?;
        project(g, y)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn scaled_dot_product_attention_all_inputs() {
    let inp = inputs(&[&[2, 4, 3], &[2, 5, 3], &[2, 5, 2]], 10);
    let err = check(&inp.ps, |g, p| {
        let q = g.param(p, inp.ids[0]);
        let k = g.param(p, inp.ids[1]);
        let v = g.param(p, inp.ids[2]);
        let y = g.scaled_dot_product_attention(q, k, v)?;
        project(g, y)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn three_layer_conv_relu_linear_net() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ps = ParamSet::new();
    let x = ps.add("x", rand_tensor(&mut rng, &[2, 2, 6, 6], -1.0, 1.0), true).unwrap();
    let c1 = fourcnet_numerics::layers::Conv2d::new(&mut ps, &mut rng, "c1", 2, 4, 3, 1, 1, true).unwrap();
    let c2 = fourcnet_numerics::layers::Conv2d::new(&mut ps, &mut rng, "c2", 4, 4, 3, 2, 1, true).unwrap();
    let fc = Linear::new(&mut ps, &mut rng, "fc", 4 * 3 * 3, 3, true).unwrap();
    let err = check(&ps, |g, p| {
        let xv = g.param(p, x);
        let h = c1.forward(g, p, xv)?;
        let h = g.relu(h);
        let h = c2.forward(g, p, h)?;
        let h = g.relu(h);
        let h = g.reshape(h, &[2, 36])?;
        let y = fc.forward(g, p, h)?;
        project(g, y)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn toy_unet_block_with_cross_attention() {
    // Some draws put a ReLU pre-activation within one finite-difference step of zero,
    // where central differences are meaningless; this seed keeps every kink well clear.
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut ps = ParamSet::new();
    let x = ps.add("x", rand_tensor(&mut rng, &[2, 2, 8, 8], 0.0, 1.0), true).unwrap();
    let ctx = ps.add("ctx", rand_tensor(&mut rng, &[2, 3, 5], -1.0, 1.0), true).unwrap();
    let down = ConvBlock::new(&mut ps, &mut rng, "down", 2, 4, 2).unwrap();
    let attn = CrossAttention::new(&mut ps, &mut rng, "attn", 4, 5, 4).unwrap();
    let up = UpBlock::new(&mut ps, &mut rng, "up", 4, 2).unwrap();
    let head = fourcnet_numerics::layers::Conv2d::new(&mut ps, &mut rng, "head", 4, 1, 3, 1, 1, true).unwrap();
    let err = check(&ps, |g, p| {
        let xv = g.param(p, x);
        let cv = g.param(p, ctx);
        let d = down.forward(g, p, xv)?;
        let a = attn.forward(g, p, d, cv)?;
        let u = up.forward(g, p, a)?;
        let cat = g.concat(&[u, xv], 1)?;
        let y = head.forward(g, p, cat)?;
        project(g, y)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn tensor_shape_invariants_hold() {
    assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
    let mut t = Tensor::<f32>::zeros(&[2, 2]);
    assert!(t.set_grad(vec![0.0; 3]).is_err());
    t.set_grad(vec![1.0; 4]).unwrap();
    assert_eq!(t.grad().unwrap().len(), t.len());
}
