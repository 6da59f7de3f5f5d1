use crate::error::{NumericsError, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;

/// Bias-corrected Adam moments for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(ps: &ParamSet<T>) -> Self {
        Self::with_hyper(ps, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(ps: &ParamSet<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |_| Vec::new();
        Self {
            m: ps.iter().map(zeros).collect(),
            v: ps.iter().map(zeros).collect(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One Adam update over every trainable entry, in insertion order; gradients are cleared afterwards.
pub fn adam_step<T: Scalar>(ps: &mut ParamSet<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if state.m.len() != ps.len() {
        return Err(NumericsError::Contract(
            "optimizer state was built for a different parameter set".into(),
        ));
    }
    if let Some(e) = ps.iter().find(|e| e.trainable && e.tensor.grad().is_none()) {
        return Err(NumericsError::Contract(format!(
            "parameter {} has no gradient",
            e.name
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
    let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - b1), T::from_f64_lossy(1.0 - b2));
    let step_size = T::from_f64_lossy(lr / bc1);
    let sqrt_bc2 = T::from_f64_lossy(bc2.sqrt());
    let eps = T::from_f64_lossy(state.eps);
    for (i, e) in ps.iter_mut().enumerate() {
        if !e.trainable {
            continue;
        }
        let n = e.tensor.len();
        let grad = e.tensor.grad().expect("checked above").to_vec();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        if m.is_empty() {
            m.resize(n, T::zero());
            v.resize(n, T::zero());
        }
        if m.len() != n {
            return Err(NumericsError::Contract(format!(
                "moment buffer for {} has wrong length",
                e.name
            )));
        }
        for (j, w) in e.tensor.data_mut().iter_mut().enumerate() {
            let gj = grad[j];
            m[j] = b1t * m[j] + one_b1 * gj;
            v[j] = b2t * v[j] + one_b2 * gj * gj;
            let denom = v[j].sqrt() / sqrt_bc2 + eps;
            *w = *w - step_size * m[j] / denom;
        }
        e.tensor.zero_grad();
    }
    Ok(())
}

/// `target <- h * target + (1 - h) * online`, elementwise over every entry (buffers included).
pub fn ema_update<T: Scalar>(target: &mut ParamSet<T>, online: &ParamSet<T>, h: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&h) {
        return Err(NumericsError::Contract(format!(
            "EMA factor {h} outside [0, 1]"
        )));
    }
    target.check_aligned(online)?;
    let ht = T::from_f64_lossy(h);
    let one_h = T::from_f64_lossy(1.0 - h);
    for (t, o) in target.iter_mut().zip(online.iter()) {
        for (a, b) in t.tensor.data_mut().iter_mut().zip(o.tensor.data()) {
            *a = if h == 1.0 {
                *a
            } else if h == 0.0 {
                *b
            } else {
                ht * *a + one_h * *b
            };
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(w: f32, g: Option<f32>) -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::from_vec(vec![w]), true).unwrap();
        if let Some(g) = g {
            ps.get_mut(id).set_grad(vec![g]).unwrap();
        }
        ps
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut ps = single(0.7, Some(0.0));
        let mut st = AdamState::new(&ps);
        adam_step(&mut ps, &mut st, 0.1).unwrap();
        assert_eq!(ps.by_name("w").unwrap().data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = single(0.0, Some(1.0));
        let mut st = AdamState::new(&ps);
        adam_step(&mut ps, &mut st, 0.1).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((ps.by_name("w").unwrap().data()[0] as f64 - expected).abs() < 1e-7);
        assert!(ps.by_name("w").unwrap().grad().is_none());
        assert_eq!(st.step, 1);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut ps = single(0.0, None);
        let mut st = AdamState::new(&ps);
        let err = adam_step(&mut ps, &mut st, 0.1).unwrap_err().to_string();
        assert!(err.contains('w'), "{err}");
    }

    #[test]
    fn ema_edge_factors_and_arithmetic() {
        let online = single(3.0, None);
        let mut t = single(1.0, None);
        ema_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t.by_name("w").unwrap().data(), &[1.0]);
        ema_update(&mut t, &online, 0.95).unwrap();
        assert!((t.by_name("w").unwrap().data()[0] - 1.1).abs() < 1e-6);
        ema_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t.by_name("w").unwrap().data(), &[3.0]);
    }

    #[test]
    fn ema_rejects_mismatched_sets() {
        let mut t = single(1.0, None);
        let mut other = ParamSet::new();
        other.add("v", Tensor::from_vec(vec![1.0]), true).unwrap();
        assert!(ema_update(&mut t, &other, 0.5).is_err());
        let same = t.clone();
        assert!(ema_update(&mut t, &same, 1.5).is_err());
    }
}
