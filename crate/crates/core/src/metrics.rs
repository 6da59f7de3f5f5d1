//! Prediction and exploration metrics. Region masks select the cells that count; `None` means
//! the whole map.

use crate::error::{Error, Result};
use crate::grid::OBSTACLE_LEVEL;
use crate::worldgen::Trajectory;

fn aligned(a: &[f32], b: &[f32], region: Option<&[bool]>) -> Result<()> {
    if a.len() != b.len() || region.is_some_and(|r| r.len() != a.len()) {
        return Err(Error::Contract("metric inputs are not aligned".into()));
    }
    Ok(())
}

fn cells<'a>(n: usize, region: Option<&'a [bool]>) -> impl Iterator<Item = usize> + 'a {
    (0..n).filter(move |&i| region.is_none_or(|r| r[i]))
}

/// Mean squared difference with values scaled to `[0, 255]`.
pub fn mse(pred: &[f32], gt: &[f32], region: Option<&[bool]>) -> Result<f64> {
    aligned(pred, gt, region)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for i in cells(pred.len(), region) {
        let d = (pred[i] as f64 - gt[i] as f64) * 255.0;
        sum += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedRegion("mse over an empty region".into()));
    }
    Ok(sum / n as f64)
}

/// Obstacle intersection-over-union at `threshold`; 1 when neither map has obstacles.
pub fn oiou(pred: &[f32], gt: &[f32], region: Option<&[bool]>, threshold: f32) -> Result<f64> {
    aligned(pred, gt, region)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for i in cells(pred.len(), region) {
        let (p, g) = (pred[i] >= threshold, gt[i] >= threshold);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Fraction of trajectory points on cells the prediction marks traversable.
pub fn vts(pred: &[f32], width: usize, trajs: &[Trajectory]) -> Result<f64> {
    let (mut ok, mut n) = (0usize, 0usize);
    for t in trajs {
        for (x, y) in t.cells() {
            let i = y * width + x;
            let v = *pred
                .get(i)
                .ok_or_else(|| Error::Contract(format!("trajectory point ({x}, {y}) outside the map")))?;
            ok += (v < OBSTACLE_LEVEL) as usize;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedRegion("no trajectory points".into()));
    }
    Ok(ok as f64 / n as f64)
}

pub const SSIM_WINDOW: usize = 7;

/// Mean structural similarity over all fully contained 7x7 windows (uniform weights,
/// dynamic range 1). Returns the raw value, which can be negative.
pub fn ssim_raw(a: &[f32], b: &[f32], width: usize) -> Result<f64> {
    aligned(a, b, None)?;
    let height = a.len() / width.max(1);
    if width < SSIM_WINDOW || height < SSIM_WINDOW || width * height != a.len() {
        return Err(Error::Contract(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images")));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=height - SSIM_WINDOW {
        for x0 in 0..=width - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let (p, q) = (a[y * width + x] as f64, b[y * width + x] as f64);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// [`ssim_raw`] clamped to `[0, 1]`.
pub fn ssim(a: &[f32], b: &[f32], width: usize) -> Result<f64> {
    Ok(ssim_raw(a, b, width)?.clamp(0.0, 1.0))
}

pub fn coverage_pct(mask: &[bool]) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    100.0 * mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
}

/// Mean and sample standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, v.sqrt())
}
