//! Strict JSON configuration. Every section has defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    #[serde(default)]
    pub worldgen: WorldgenConfig,
    #[serde(default)]
    pub cmtp: CmtpConfig,
    #[serde(default)]
    pub mpn: MpnConfig,
    #[serde(default)]
    pub cn: CnConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldgenConfig {
    /// Map side in cells.
    pub size: usize,
    /// Side length of the represented area in metres.
    pub extent_m: f64,
    pub l_min: f64,
    pub l_max: f64,
    pub roughness: f64,
    pub decay: f64,
    pub obstacles_min: usize,
    pub obstacles_max: usize,
    pub obstacle_len_min: usize,
    pub obstacle_len_max: usize,
    pub robots_min: usize,
    pub robots_max: usize,
    pub observed_frac_min: f64,
    pub observed_frac_max: f64,
    pub csp_levels: Vec<f64>,
    pub count: usize,
    pub test_frac: f64,
}

impl Default for WorldgenConfig {
    fn default() -> Self {
        Self {
            size: 32,
            extent_m: 30.0,
            l_min: 0.0,
            l_max: 0.3,
            roughness: 1.0,
            decay: 0.55,
            obstacles_min: 2,
            obstacles_max: 5,
            obstacle_len_min: 10,
            obstacle_len_max: 40,
            robots_min: 2,
            robots_max: 6,
            observed_frac_min: 0.25,
            observed_frac_max: 0.6,
            csp_levels: vec![0.25, 0.5, 1.0],
            count: 2048,
            test_frac: 0.2,
        }
    }
}

impl WorldgenConfig {
    pub fn cell_size(&self) -> f64 {
        self.extent_m / self.size as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("worldgen: {m}")));
        if self.size < 4 {
            return bad("size must be at least 4");
        }
        if !(self.l_max > self.l_min) {
            return bad("l_max must exceed l_min");
        }
        if !(self.decay > 0.0 && self.decay < 1.0) || self.roughness < 0.0 {
            return bad("need roughness >= 0 and 0 < decay < 1");
        }
        if self.obstacles_min > self.obstacles_max || self.obstacle_len_min > self.obstacle_len_max {
            return bad("obstacle ranges are inverted");
        }
        if self.robots_min < 1 || self.robots_max > 6 || self.robots_min > self.robots_max {
            return bad("robot count range must lie within 1..=6");
        }
        let f = (self.observed_frac_min, self.observed_frac_max);
        if !(f.0 > 0.0 && f.1 < 1.0 && f.0 <= f.1) {
            return bad("observed fraction range must lie inside (0, 1)");
        }
        if self.csp_levels.is_empty() || self.csp_levels.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return bad("csp levels must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.test_frac) {
            return bad("test_frac must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmtpConfig {
    pub temperature: f64,
    pub batch: usize,
    pub lr: f64,
    pub dropout: f64,
    pub d_emb: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Fraction of the training split held back for early stopping.
    pub val_frac: f64,
}

impl Default for CmtpConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            batch: 128,
            lr: 1e-3,
            dropout: 0.3,
            d_emb: 64,
            epochs: 30,
            patience: 5,
            val_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaMode {
    /// `H(k) = exp(s0 ln(H0) / N(k))`
    Adaptive,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpnConfig {
    pub lr: f64,
    pub batch: usize,
    pub a: f64,
    pub b: f64,
    /// Weight of an extra loss pulling the online output toward the ground truth. Pure
    /// consistency training (0) needs far more steps than a desk-scale run gets before its
    /// boundary anchor reaches the high noise levels.
    pub anchor: f64,
    pub steps: usize,
    pub eps: f64,
    pub t_max: f64,
    pub rho: f64,
    pub sigma_data: f64,
    pub s0: usize,
    pub s1: usize,
    pub ema_start: f64,
    pub ema_mode: EmaMode,
    pub t_total: usize,
    pub channels: Vec<usize>,
    /// Number of encoder (and decoder) levels actually used, from the front of `channels`.
    pub blocks: usize,
    pub use_encoder: bool,
    pub use_attention: bool,
    pub attn_dim: usize,
    pub time_dim: usize,
}

impl Default for MpnConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            batch: 8,
            a: 0.1,
            b: 0.04,
            anchor: 1.0,
            steps: 2000,
            eps: 0.002,
            t_max: 80.0,
            rho: 7.0,
            sigma_data: 0.5,
            s0: 2,
            s1: 100,
            ema_start: 0.95,
            ema_mode: EmaMode::Adaptive,
            t_total: 30,
            channels: vec![16, 16, 32, 32, 64],
            blocks: 5,
            use_encoder: true,
            use_attention: true,
            attn_dim: 32,
            time_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub threshold: f64,
    pub channels: Vec<usize>,
    pub blocks: usize,
    /// Records in the predicted-map dataset.
    pub dpm_count: usize,
    /// Sampling steps used when building the predicted-map dataset.
    pub dpm_t_total: usize,
}

impl Default for CnConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 64,
            epochs: 20,
            threshold: 0.1,
            channels: vec![8, 16, 16, 32, 32, 64],
            blocks: 6,
            dpm_count: 1024,
            dpm_t_total: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartScheme {
    Opposite,
    Center,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Fourcnet,
    FourcnetNoCn,
    Npe,
    Db,
}

impl PredictorKind {
    pub fn name(self) -> &'static str {
        match self {
            PredictorKind::Fourcnet => "fourcnet",
            PredictorKind::FourcnetNoCn => "fourcnet_no_cn",
            PredictorKind::Npe => "npe",
            PredictorKind::Db => "db",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Fourcnet, Self::FourcnetNoCn, Self::Npe, Self::Db]
            .into_iter()
            .find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_robots: usize,
    pub start: StartScheme,
    /// Area of the square world in m²; the grid resolution comes from `worldgen.size`.
    pub area_m2: f64,
    pub sensing_m: f64,
    pub w: f64,
    pub k: f64,
    pub coeffs: [f64; 3],
    /// Information-gain radius in cells; defaults to the sensing range.
    pub d_r: Option<f64>,
    pub horizon: usize,
    /// Travel budget per robot in metres.
    pub budget_m: f64,
    pub csp: f64,
    pub predictor: PredictorKind,
    /// Re-plan every N ticks instead of only on arrival.
    pub replan_every: Option<usize>,
    pub t_total: usize,
    pub snapshot_every: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_robots: 3,
            start: StartScheme::Opposite,
            area_m2: 900.0,
            sensing_m: 1.5,
            w: 1.0,
            k: 2.0,
            coeffs: [4.0, -1.0, -5.0],
            d_r: None,
            horizon: 500,
            budget_m: 40.0,
            csp: 1.0,
            predictor: PredictorKind::Fourcnet,
            replan_every: None,
            t_total: 30,
            snapshot_every: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMode {
    Predicted,
    Whole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub region: RegionMode,
    pub predictors: Vec<PredictorKind>,
    pub episode_seeds: usize,
    pub budgets_m: Vec<f64>,
    pub areas_m2: Vec<f64>,
    pub max_records: Option<usize>,
    pub ablations: bool,
    pub ablation_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            region: RegionMode::Predicted,
            predictors: vec![
                PredictorKind::Fourcnet,
                PredictorKind::Npe,
                PredictorKind::Db,
            ],
            episode_seeds: 20,
            budgets_m: vec![40.0, 85.0],
            areas_m2: vec![900.0],
            max_records: None,
            ablations: false,
            ablation_steps: 300,
        }
    }
}

impl Config {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            worldgen: Default::default(),
            cmtp: Default::default(),
            mpn: Default::default(),
            cn: Default::default(),
            sim: Default::default(),
            eval: Default::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.worldgen.validate()?;
        let c = &self.cmtp;
        if !(c.temperature > 0.0) {
            return Err(Error::Config("cmtp: temperature must be positive".into()));
        }
        if c.batch < 2 || !(0.0..1.0).contains(&c.dropout) {
            return Err(Error::Config("cmtp: need batch >= 2 and dropout in [0, 1)".into()));
        }
        let m = &self.mpn;
        if !(m.eps > 0.0 && m.eps < m.t_max && m.rho > 0.0 && m.sigma_data > 0.0) {
            return Err(Error::Config("mpn: need 0 < eps < t_max, rho > 0, sigma_data > 0".into()));
        }
        if m.s0 < 2 || m.s1 < m.s0 || m.a < 0.0 || m.b < 0.0 || m.anchor < 0.0 || m.t_total < 1 {
            return Err(Error::Config("mpn: need s0 >= 2, s1 >= s0, a, b, anchor >= 0, t_total >= 1".into()));
        }
        if !(0.0..=1.0).contains(&m.ema_start) {
            return Err(Error::Config("mpn: ema_start must lie in [0, 1]".into()));
        }
        if ![2, 4, 5].contains(&m.blocks) || m.blocks > m.channels.len() {
            return Err(Error::Config("mpn: blocks must be 2, 4 or 5 and fit the channel list".into()));
        }
        let n = &self.cn;
        if ![2, 4, 6].contains(&n.blocks) || n.blocks > n.channels.len() || !(n.threshold > 0.0) {
            return Err(Error::Config("cn: blocks must be 2, 4 or 6 and threshold positive".into()));
        }
        let s = &self.sim;
        if s.coeffs.iter().any(|v| !v.is_finite()) || !(s.budget_m >= 0.0) {
            return Err(Error::Config("sim: coefficients must be finite and budget non-negative".into()));
        }
        if !(0.0..=1.0).contains(&s.csp) || s.n_robots == 0 || !(s.area_m2 > 0.0) {
            return Err(Error::Config("sim: need csp in [0, 1], at least one robot, positive area".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON encoding of the effective configuration.
    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
