//! Glue between grid images and the tensor engine: batching, checkpoints, loss curves.

use std::fs;
use std::path::Path;

use fourcnet_numerics::{Graph, ParamSet, Scalar, Tensor, Var};
use serde::Serialize;

use crate::error::{Error, Result};

/// Stacks per-sample channel planes into an `[N, C, H, W]` tensor.
pub fn stack<T: Scalar>(samples: &[Vec<&[f32]>], h: usize, w: usize) -> Result<Tensor<T>> {
    let n = samples.len();
    let c = samples.first().map_or(0, |s| s.len());
    let mut data = Vec::with_capacity(n * c * h * w);
    for s in samples {
        if s.len() != c {
            return Err(Error::Contract("samples disagree on channel count".into()));
        }
        for plane in s {
            if plane.len() != h * w {
                return Err(Error::Contract(format!(
                    "plane of {} values does not fit {h}x{w}",
                    plane.len()
                )));
            }
            data.extend(plane.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
    }
    Ok(Tensor::new(&[n, c, h, w], data)?)
}

/// Splits an `[N, 1, H, W]` node into per-sample `f32` planes.
pub fn planes<T: Scalar>(g: &Graph<T>, v: Var) -> Vec<Vec<f32>> {
    let s = g.shape(v);
    let hw = s[2] * s[3];
    g.value(v)
        .chunks(hw)
        .map(|p| p.iter().map(|x| x.to_f64().unwrap_or(f64::NAN) as f32).collect())
        .collect()
}

pub fn mask_plane(mask: &[bool]) -> Vec<f32> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

pub fn save_model<M: Serialize>(
    ps: &ParamSet<f32>,
    blob: &Path,
    config_hash: &str,
    seed: u64,
    arch: &M,
) -> Result<()> {
    if let Some(parent) = blob.parent() {
        fs::create_dir_all(parent)?;
    }
    fourcnet_numerics::save_checkpoint(ps, blob, config_hash, seed, serde_json::to_value(arch)?)?;
    Ok(())
}

/// Loads a checkpoint, failing with a hint about the producing stage when it is missing.
pub fn load_model(blob: &Path, stage: &str) -> Result<(ParamSet<f32>, fourcnet_numerics::Manifest)> {
    if !blob.exists() {
        return Err(Error::Missing(format!(
            "checkpoint {} not found; run `{stage}` first",
            blob.display()
        )));
    }
    Ok(fourcnet_numerics::load_checkpoint(blob)?)
}

/// `(epoch_or_step, train_loss, val_loss)` rows.
pub fn write_curve(path: &Path, header: [&str; 3], rows: &[(usize, f64, Option<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for (e, tl, vl) in rows {
        w.write_record([
            e.to_string(),
            format!("{tl:.8}"),
            vl.map(|v| format!("{v:.8}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
