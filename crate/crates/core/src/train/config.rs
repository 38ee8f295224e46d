//! Run configuration: a TOML document layered over a named preset, then
//! `DONN_*` environment overrides (`__` separates nested keys, e.g.
//! `DONN_SLR__RHO=0.2`).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DonnError, Result};
use crate::field::Geometry;
use crate::roughness::NeighborMode;
use crate::slr::SlrConfig;
use crate::smoothing::GsConfig;

pub const ENV_PREFIX: &str = "DONN_";

/// Rung of the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "baseline", alias = "Baseline")]
    Baseline,
    /// Roughness-regularized training.
    #[serde(rename = "A", alias = "a")]
    A,
    /// Block sparsification only.
    #[serde(rename = "B", alias = "b")]
    B,
    /// Sparsification with roughness.
    #[serde(rename = "C", alias = "c")]
    C,
    /// Sparsification with roughness and intra-block smoothness.
    #[serde(rename = "D", alias = "d")]
    D,
}

impl Mode {
    pub fn uses_roughness(self) -> bool {
        matches!(self, Mode::A | Mode::C | Mode::D)
    }

    pub fn uses_intra_block(self) -> bool {
        self == Mode::D
    }

    pub fn sparsifies(self) -> bool {
        matches!(self, Mode::B | Mode::C | Mode::D)
    }

    /// Sparsified rungs are reported after 2π smoothing as well.
    pub fn smooths(self) -> bool {
        self.sparsifies()
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::A => "A",
            Mode::B => "B",
            Mode::C => "C",
            Mode::D => "D",
        })
    }
}

impl FromStr for Mode {
    type Err = DonnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" | "Baseline" => Ok(Mode::Baseline),
            "A" | "a" => Ok(Mode::A),
            "B" | "b" => Ok(Mode::B),
            "C" | "c" => Ok(Mode::C),
            "D" | "d" => Ok(Mode::D),
            other => Err(DonnError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = DonnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(DonnError::Config(format!("unknown preset {other:?} (desk | paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Leading training samples used; 0 = all.
    pub train_samples: usize,
    /// Leading test samples used; 0 = all.
    pub test_samples: usize,
}

impl DataConfig {
    pub fn mnist(dir: impl AsRef<Path>, train_samples: usize, test_samples: usize) -> Self {
        let dir = dir.as_ref();
        Self {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
            train_samples,
            test_samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub depth: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Roughness weight, active in modes A, C and D.
    pub p: f64,
    /// Intra-block smoothness weight, active in mode D.
    pub q: f64,
    pub neighbors: NeighborMode,
    /// Total optical power of every encoded input. Detector sums scale with it,
    /// which sets how sharp the softmax in the loss is.
    pub input_power: f64,
    /// Zero-pad to 2n before propagating (linear instead of circular convolution).
    pub pad_propagation: bool,
    /// Sparsified modes start from this checkpoint instead of training a baseline first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    pub geometry: Geometry,
    pub data: DataConfig,
    pub slr: SlrConfig,
    pub gs: GsConfig,
}

impl TrainConfig {
    /// 64x64 grid, 3 layers, 10k/2k MNIST subset, 30 epochs.
    pub fn desk() -> Self {
        let mut slr = SlrConfig::with_block_size(8);
        slr.learning_rate = 0.01;
        Self {
            mode: Mode::Baseline,
            seed: 0,
            depth: 3,
            epochs: 30,
            batch_size: 200,
            learning_rate: 0.05,
            p: 3e-7,
            q: 1e-3,
            neighbors: NeighborMode::Eight,
            input_power: 300.0,
            pad_propagation: false,
            init_checkpoint: None,
            geometry: Geometry::desk(),
            data: DataConfig::mnist("data/mnist", 10_000, 2_000),
            slr,
            gs: GsConfig::default(),
        }
    }

    /// 200x200 grid, 27.94 cm spacing, full MNIST, 50 epochs.
    pub fn paper() -> Self {
        let mut slr = SlrConfig::with_block_size(25);
        slr.learning_rate = 0.001;
        Self {
            mode: Mode::Baseline,
            seed: 0,
            depth: 3,
            epochs: 50,
            batch_size: 200,
            learning_rate: 0.2,
            p: 0.1,
            q: 0.1,
            neighbors: NeighborMode::Eight,
            input_power: 300.0,
            pad_propagation: false,
            init_checkpoint: None,
            geometry: Geometry::paper(),
            data: DataConfig::mnist("data/mnist", 0, 0),
            slr,
            gs: GsConfig::default(),
        }
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Weight of the roughness term after mode gating.
    pub fn effective_p(&self) -> f64 {
        if self.mode.uses_roughness() {
            self.p
        } else {
            0.0
        }
    }

    pub fn effective_q(&self) -> f64 {
        if self.mode.uses_intra_block() {
            self.q
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DonnError::Config(m));
        self.geometry.validate().map_err(|e| DonnError::Config(e.to_string()))?;
        if self.depth == 0 {
            return bad("depth must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.input_power > 0.0 && self.input_power.is_finite()) {
            return bad(format!("input_power must be > 0, got {}", self.input_power));
        }
        if !(self.p >= 0.0 && self.p.is_finite()) || !(self.q >= 0.0 && self.q.is_finite()) {
            return bad(format!("p and q must be >= 0, got {} and {}", self.p, self.q));
        }
        self.slr.validate()?;
        self.gs.validate()?;
        if self.geometry.n % self.slr.block_size != 0 {
            return bad(format!(
                "slr.block_size {} does not divide n = {}",
                self.slr.block_size, self.geometry.n
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DonnError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Preset, then the optional file, then `DONN_*` variables from `env`.
    pub fn load<I>(preset: Preset, file: Option<&Path>, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut value = toml::Value::try_from(Self::preset(preset)).map_err(|e| DonnError::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| DonnError::Config(format!("{}: {e}", path.display())))?;
            let overlay: toml::Value =
                toml::from_str(&text).map_err(|e| DonnError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, overlay);
        }
        apply_env_overrides(&mut value, env)?;
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| DonnError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `DONN_A__B=value` pairs in sorted key order. Unknown keys surface
/// as errors when the merged document is deserialized.
pub fn apply_env_overrides<I>(value: &mut toml::Value, env: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_ascii_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(DonnError::Config(format!("malformed override {key}")));
        }
        let mut slot = &mut *value;
        for (depth, part) in path.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| DonnError::Config(format!("{key}: {} is not a table", path[..depth].join("."))))?;
            slot = table.entry(part.clone()).or_insert(toml::Value::Table(Default::default()));
        }
        *slot = parse_scalar(&raw);
    }
    Ok(())
}
