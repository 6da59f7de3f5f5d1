//! On-disk formats: 16-bit ASCII PGM (P2) maps with JSON sidecars, and trajectory CSVs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::worldgen::Trajectory;

pub const PGM_MAX: u32 = 65535;

/// A normalized single-channel image in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Contract(format!(
                "image {width}x{height} given {} values",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }
}

/// Rounds a normalized value onto the 16-bit grid used by the PGM files.
pub fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) as f64 * PGM_MAX as f64).round() as f32 / PGM_MAX as f32
}

pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    let mut s = format!("P2\n{} {}\n{}\n", img.width, img.height, PGM_MAX);
    for row in img.data.chunks(img.width) {
        let line: Vec<String> = row
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) as f64) * PGM_MAX as f64).round().to_string())
            .collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let text = fs::read_to_string(path)?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err(bad("not an ASCII PGM (P2)"));
    }
    let mut num = |what: &str| -> Result<u64> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("bad or missing {what}")))
    };
    let (w, h, maxval) = (num("width")? as usize, num("height")? as usize, num("maxval")?);
    if maxval == 0 || maxval > PGM_MAX as u64 {
        return Err(bad("maxval out of range"));
    }
    let mut data = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        let v = num("pixel")?;
        if v > maxval {
            return Err(bad("pixel exceeds maxval"));
        }
        data.push((v as f64 / maxval as f64) as f32);
    }
    Image::new(w, h, data)
}

pub fn write_mask(path: &Path, width: usize, mask: &[bool]) -> Result<()> {
    let data = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    write_pgm(path, &Image::new(width, mask.len() / width, data)?)
}

pub fn read_mask(path: &Path) -> Result<(usize, Vec<bool>)> {
    let img = read_pgm(path)?;
    Ok((img.width, img.data.iter().map(|&v| v >= 0.5).collect()))
}

/// Sidecar describing how a map PGM decodes into elevations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSidecar {
    pub l_min: f64,
    pub l_max: f64,
    pub cell_size: f64,
    pub obstacle_value: f64,
    pub terrain_max: f64,
    pub unknown_value: f64,
    pub kind: String,
}

impl MapSidecar {
    pub fn new(kind: &str, l_min: f64, l_max: f64, cell_size: f64) -> Self {
        Self {
            l_min,
            l_max,
            cell_size,
            obstacle_value: 1.0,
            terrain_max: crate::worldgen::TERRAIN_MAX as f64,
            unknown_value: 0.0,
            kind: kind.to_string(),
        }
    }
}

pub fn sidecar_path(pgm: &Path) -> PathBuf {
    let mut s = pgm.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_map(path: &Path, img: &Image, sidecar: &MapSidecar) -> Result<()> {
    write_pgm(path, img)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajRow {
    robot_id: usize,
    t: usize,
    x: usize,
    y: usize,
}

/// Rows `(robot_id, t, x, y)`; `t` is the original timestep, so dropped points leave gaps.
pub fn write_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for tr in trajs {
        for &(t, (x, y)) in &tr.points {
            w.serialize(TrajRow {
                robot_id: tr.robot_id,
                t,
                x,
                y,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: Vec<Trajectory> = Vec::new();
    for row in r.deserialize() {
        let row: TrajRow = row?;
        match out.last_mut() {
            Some(tr) if tr.robot_id == row.robot_id => tr.points.push((row.t, (row.x, row.y))),
            _ => out.push(Trajectory {
                robot_id: row.robot_id,
                points: vec![(row.t, (row.x, row.y))],
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let data: Vec<f32> = (0..12).map(|i| quantize(i as f32 / 11.0)).collect();
        let img = Image::new(4, 3, data).unwrap();
        write_pgm(&p, &img).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), img);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        fs::write(&p, "P5\n1 1\n255\n0").unwrap();
        assert!(read_pgm(&p).is_err());
        fs::write(&p, "P2\n2 2\n255\n0 1 2").unwrap();
        assert!(read_pgm(&p).is_err());
    }
}
