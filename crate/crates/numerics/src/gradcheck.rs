//! Central finite-difference gradient checking in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamSet};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates probed per parameter tensor; `usize::MAX` probes all of them.
    pub max_coords_per_param: usize,
    pub seed: u64,
    /// Whether the checked fragment runs as a training graph (batch statistics).
    pub training: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_coords_per_param: usize::MAX,
            seed: 0,
            training: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_pair: (f64, f64),
    pub coords_checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients of the scalar produced by `f` against central differences,
/// for every trainable entry of `ps`.
pub fn grad_check<F>(ps: &ParamSet<f64>, cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::inference(cfg.training);
        let out = f(&mut g, p)?;
        g.ensure_finite()?;
        Ok(g.scalar_value(out))
    };

    let mut g = Graph::new(cfg.training);
    let out = f(&mut g, ps)?;
    g.backward(out)?;
    let mut analytic = ps.clone();
    analytic.zero_grads();
    g.accumulate_param_grads(&mut analytic)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = ps.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_pair: (0.0, 0.0),
        coords_checked: 0,
    };
    for idx in 0..ps.len() {
        let id = ParamId(idx);
        let entry = ps.entry(id);
        if !entry.trainable {
            continue;
        }
        let n = entry.tensor.len();
        let coords: Vec<usize> = if cfg.max_coords_per_param >= n {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let grad = analytic.get(id).grad().map(|g| g.to_vec()).unwrap_or(vec![0.0; n]);
        for j in coords {
            let orig = probe.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + cfg.step;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - cfg.step;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error(grad[j], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{}[{j}]", entry.name);
                report.worst_pair = (grad[j], numeric);
            }
        }
    }
    Ok(report)
}
