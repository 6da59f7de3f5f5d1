use fourcnet_numerics::layers::ConvBlock;
use fourcnet_numerics::{adam_step, ema_update, AdamState, Graph, ParamSet, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn two_sets(a: Vec<f32>, b: Vec<f32>) -> (ParamSet<f32>, ParamSet<f32>) {
    let mut t = ParamSet::new();
    t.add("p", Tensor::from_vec(a), true).unwrap();
    let mut o = ParamSet::new();
    o.add("p", Tensor::from_vec(b), true).unwrap();
    (t, o)
}

proptest! {
    #[test]
    fn ema_stays_between_old_and_online(
        vals in prop::collection::vec((-100.0f32..100.0, -100.0f32..100.0), 1..32),
        h in 0.0f64..=1.0,
    ) {
        let (a, b): (Vec<f32>, Vec<f32>) = vals.into_iter().unzip();
        let (mut t, o) = two_sets(a.clone(), b.clone());
        ema_update(&mut t, &o, h).unwrap();
        for ((new, old), on) in t.by_name("p").unwrap().data().iter().zip(&a).zip(&b) {
            let (lo, hi) = if old <= on { (*old, *on) } else { (*on, *old) };
            prop_assert!(*new >= lo && *new <= hi, "{new} not in [{lo}, {hi}]");
        }
    }
}

fn train_once(seed: u64) -> ParamSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let block = ConvBlock::new(&mut ps, &mut rng, "b", 1, 3, 1).unwrap();
    let mut st = AdamState::new(&ps);
    for step in 0..5 {
        let mut g = Graph::new(true);
        let x = g.input(
            Tensor::new(&[2, 1, 4, 4], (0..32).map(|i| ((i + step) % 7) as f32 * 0.1).collect())
                .unwrap(),
        );
        let y = block.forward(&mut g, &ps, x).unwrap();
        let l = g.mean(y);
        g.backward(l).unwrap();
        g.accumulate_param_grads(&mut ps).unwrap();
        g.commit_buffers(&mut ps).unwrap();
        adam_step(&mut ps, &mut st, 1e-2).unwrap();
    }
    ps
}

#[test]
fn training_is_bit_reproducible() {
    let a = train_once(5);
    let b = train_once(5);
    for (x, y) in a.iter().zip(b.iter()) {
        assert_eq!(x.tensor.data(), y.tensor.data(), "{}", x.name);
    }
    let c = train_once(6);
    assert_ne!(a, c);
}
