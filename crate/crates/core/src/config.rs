//! Run configuration, read from a sectioned TOML file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoise::RdmConfig;
use crate::error::{FuseError, Result};
use crate::hypernet::HyperNetConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterPaths {
    pub target: PathBuf,
    pub sources: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    pub block_rows: usize,
    pub descriptor_len: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            block_rows: 8,
            descriptor_len: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseConfig {
    pub mu_gate: f64,
    pub n_proj: usize,
    pub mu_target: f64,
    pub sigma_target: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            mu_gate: 0.10,
            n_proj: 2048,
            mu_target: 0.0,
            sigma_target: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub encodings: bool,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            embed_dim: 1024,
            heads: 8,
            max_positions: 4096,
            encodings: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    /// No task model: only the regularizer drives training.
    #[default]
    None,
    /// The synthetic target family of the harness scenario with this seed.
    Harness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub preset: String,
    /// Scenario within the preset; empty selects the preset's main one.
    pub variant: String,
    pub seed: u64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            kind: ObjectiveKind::None,
            preset: "single-source".into(),
            variant: String::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub fused: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("fusion-out"),
            fused: "fused.safetensors".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub adapters: AdapterPaths,
    pub context: ContextConfig,
    pub denoise: DenoiseConfig,
    pub hypernet: NetworkConfig,
    pub train: TrainConfig,
    pub objective: ObjectiveConfig,
    pub output: OutputConfig,
    /// Foreign module token -> canonical module type.
    pub aliases: BTreeMap<String, String>,
}

impl FusionConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FuseError::Config(e.to_string()))
    }

    /// Reads a config file; relative adapter and output paths resolve
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FuseError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() && !p.as_os_str().is_empty() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut cfg.adapters.target);
            cfg.adapters.sources.iter_mut().for_each(fix);
            fix(&mut cfg.output.dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FuseError::Config(e.to_string()))
    }

    /// Checks everything that does not need the adapter files.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let bad = |m: String| Err(FuseError::Config(m));
        if self.context.block_rows == 0 || self.context.descriptor_len == 0 {
            return bad("context.block_rows and context.descriptor_len must be positive".into());
        }
        if self.denoise.n_proj == 0 || self.denoise.sigma_target.is_nan() || self.denoise.sigma_target <= 0.0 {
            return bad("denoise.n_proj must be positive and denoise.sigma_target > 0".into());
        }
        if self.hypernet.heads == 0 || !self.hypernet.embed_dim.is_multiple_of(self.hypernet.heads) {
            return bad(format!(
                "hypernet.embed_dim {} must be divisible by hypernet.heads {}",
                self.hypernet.embed_dim, self.hypernet.heads
            ));
        }
        if self.hypernet.embed_dim < 2 || self.hypernet.max_positions == 0 {
            return bad("hypernet.embed_dim must be >= 2 and hypernet.max_positions positive".into());
        }
        Ok(())
    }

    /// Checks the adapter path list: a target, at least one source, all distinct.
    pub fn validate_paths(&self) -> Result<()> {
        if self.adapters.target.as_os_str().is_empty() {
            return Err(FuseError::Config("adapters.target is required".into()));
        }
        if self.adapters.sources.is_empty() {
            return Err(FuseError::Config("adapters.sources needs at least one path".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in std::iter::once(&self.adapters.target).chain(&self.adapters.sources) {
            if !seen.insert(p) {
                return Err(FuseError::Config(format!("adapter path listed twice: {}", p.display())));
            }
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&canonical)[..8])
    }

    pub fn rdm(&self) -> RdmConfig {
        RdmConfig {
            n_proj: self.denoise.n_proj,
            mu_target: self.denoise.mu_target,
            sigma_target: self.denoise.sigma_target,
            seed: self.train.seed,
        }
    }

    pub fn network(&self, n_sources: usize, n_groups: usize, max_rank: usize) -> HyperNetConfig {
        HyperNetConfig {
            embed_dim: self.hypernet.embed_dim,
            heads: self.hypernet.heads,
            max_positions: self.hypernet.max_positions,
            block_rows: self.context.block_rows,
            max_rank,
            descriptor_len: self.context.descriptor_len,
            n_sources,
            n_groups,
            encodings: self.hypernet.encodings,
            alpha_init: self.train.alpha_init,
            mu_gate: self.denoise.mu_gate,
            seed: self.hypernet.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = FusionConfig::from_toml("").unwrap();
        assert_eq!(cfg, FusionConfig::default());
        assert_eq!(cfg.train.learning_rate, 5e-5);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.grad_accum, 8);
        assert_eq!(cfg.train.lambda_reg, 0.005);
        assert_eq!(cfg.train.alpha_init, 0.3);
        assert_eq!(cfg.denoise.mu_gate, 0.10);
        assert_eq!(cfg.hypernet.embed_dim, 1024);
    }

    #[test]
    fn sections_parse_and_round_trip() {
        let text = r#"
[adapters]
target = "t.safetensors"
sources = ["a.safetensors", "b.safetensors"]

[train]
lr = 0.001
epochs = 2
precision = "f32"

[objective]
kind = "harness"
preset = "multi-source"
seed = 4

[aliases]
w1 = "up_proj"
"#;
        let cfg = FusionConfig::from_toml(text).unwrap();
        assert_eq!(cfg.adapters.sources.len(), 2);
        assert_eq!(cfg.train.learning_rate, 0.001);
        assert_eq!(cfg.train.precision, crate::trainer::Precision::F32);
        assert_eq!(cfg.objective.kind, ObjectiveKind::Harness);
        assert_eq!(cfg.aliases["w1"], "up_proj");
        let again = FusionConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(FusionConfig::from_toml("[train]\nlearning = 1.0\n").is_err());
        let cfg = FusionConfig::from_toml("[hypernet]\nembed_dim = 30\nheads = 4\n").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = FusionConfig::from_toml("[adapters]\ntarget = \"t\"\nsources = [\"t\"]\n").unwrap();
        assert!(cfg.validate_paths().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = FusionConfig::default();
        let mut b = a.clone();
        b.train.alpha_init = 0.9;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
