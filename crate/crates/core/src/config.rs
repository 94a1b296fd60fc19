//! Run configuration files (TOML or JSON) and the raw binary weight import.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::index_gen::SigConfig;
use crate::kv_cache::CacheConfig;
use crate::mpu::MpuConfig;
use crate::perf::PlatformConfig;
use crate::pipeline::{LayerWeights, ModelConfig, ModelWeights, PipelineError};
use crate::quant::QTensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CacheSection {
    #[serde(default = "default_capacity")]
    pub total_capacity: u64,
    #[serde(default = "default_hot_fraction")]
    pub hot_fraction: f64,
    #[serde(default = "default_lookahead")]
    pub lookahead: usize,
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Hot-admission threshold; omitted means half the run's query blocks.
    #[serde(default)]
    pub t_hot: Option<u64>,
}

fn default_capacity() -> u64 {
    16 * 1024 * 1024
}
fn default_hot_fraction() -> f64 {
    0.5
}
fn default_lookahead() -> usize {
    4
}
fn default_true() -> bool {
    true
}

impl Default for CacheSection {
    fn default() -> Self {
        CacheSection {
            total_capacity: default_capacity(),
            hot_fraction: default_hot_fraction(),
            lookahead: default_lookahead(),
            enabled: true,
            t_hot: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlatformSection {
    #[serde(default = "default_frequency")]
    pub frequency: f64,
    #[serde(default = "default_hbm")]
    pub hbm_bw: f64,
    #[serde(default = "default_ddr")]
    pub ddr_bw: f64,
    #[serde(default)]
    pub mpu: MpuConfig,
}

fn default_frequency() -> f64 {
    175e6
}
fn default_hbm() -> f64 {
    460e9
}
fn default_ddr() -> f64 {
    38e9
}

impl Default for PlatformSection {
    fn default() -> Self {
        PlatformSection {
            frequency: default_frequency(),
            hbm_bw: default_hbm(),
            ddr_bw: default_ddr(),
            mpu: MpuConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunSection {
    /// Context lengths to simulate.
    pub lengths: Vec<usize>,
    /// Optional binary weight manifest; synthetic weights otherwise.
    #[serde(default)]
    pub weights_manifest: Option<String>,
}

/// Top-level run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub sparsity: SigConfig,
    #[serde(default)]
    pub platform: PlatformSection,
    #[serde(default)]
    pub cache: CacheSection,
    pub run: RunSection,
}

impl RunConfig {
    /// Parse from TOML or JSON by extension, then validate everything before
    /// any compute happens.
    pub fn from_path(path: &Path) -> Result<RunConfig, PipelineError> {
        let text = fs::read_to_string(path)?;
        let is_json = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("json"))
            .unwrap_or(false);
        let cfg: RunConfig = if is_json {
            serde_json::from_str(&text)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.model.validate(self.sparsity.block_size)?;
        if self.run.lengths.is_empty() {
            return Err(PipelineError::Config("run.lengths must be non-empty".into()));
        }
        for &len in &self.run.lengths {
            if len < self.sparsity.block_size {
                return Err(PipelineError::Config(format!(
                    "length {len} shorter than one block"
                )));
            }
        }
        if !(self.sparsity.gamma > 0.0 && self.sparsity.gamma <= 1.0) {
            return Err(PipelineError::Config(format!(
                "gamma must be in (0, 1], got {}",
                self.sparsity.gamma
            )));
        }
        if self.sparsity.tau < 0.0 {
            return Err(PipelineError::Config("tau must be non-negative".into()));
        }
        if !(self.cache.hot_fraction > 0.0 && self.cache.hot_fraction < 1.0) {
            return Err(PipelineError::Config(format!(
                "cache.hot_fraction must be in (0, 1), got {}",
                self.cache.hot_fraction
            )));
        }
        if self.cache.lookahead == 0 {
            return Err(PipelineError::Config("cache.lookahead must be >= 1".into()));
        }
        self.platform().validate().map_err(PipelineError::Config)?;
        Ok(())
    }

    /// Assembled platform config; `block_bytes` and `t_hot` are filled per
    /// run from the model shape.
    pub fn platform(&self) -> PlatformConfig {
        PlatformConfig {
            frequency: self.platform.frequency,
            hbm_bw: self.platform.hbm_bw,
            ddr_bw: self.platform.ddr_bw,
            mpu: self.platform.mpu,
            cache: CacheConfig {
                total_capacity: self.cache.total_capacity,
                hot_fraction: self.cache.hot_fraction,
                t_hot: self.cache.t_hot.unwrap_or(1),
                lookahead: self.cache.lookahead,
                block_bytes: (2 * self.sparsity.block_size * self.model.head_dim) as u64,
                enabled: self.cache.enabled,
            },
        }
    }
}

/// One tensor of the binary weight manifest: a raw little-endian INT8 grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub scale: f64,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightManifest {
    pub tensors: Vec<ManifestEntry>,
}

/// Load model weights from a JSON manifest plus raw INT8 files. Expected
/// names: `layer{i}.w_q|w_k|w_v|w1|w2` and `w_out`; missing norm rows
/// default to unity.
pub fn import_weights(manifest_path: &Path, model: &ModelConfig) -> Result<ModelWeights, PipelineError> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: WeightManifest = serde_json::from_str(&text)
        .map_err(|e| PipelineError::WeightImport(format!("manifest: {e}")))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));

    let mut loaded = std::collections::BTreeMap::new();
    for entry in &manifest.tensors {
        let bytes = fs::read(dir.join(&entry.file))?;
        if bytes.len() != entry.rows * entry.cols {
            return Err(PipelineError::WeightImport(format!(
                "{}: file holds {} bytes, shape needs {}",
                entry.name,
                bytes.len(),
                entry.rows * entry.cols
            )));
        }
        if !(entry.scale > 0.0 && entry.scale.is_finite()) {
            return Err(PipelineError::WeightImport(format!(
                "{}: scale must be positive",
                entry.name
            )));
        }
        let data: Vec<i8> = bytes.iter().map(|&b| b as i8).collect();
        loaded.insert(
            entry.name.clone(),
            QTensor::from_parts(entry.rows, entry.cols, data, entry.scale),
        );
    }

    let mut get = |name: String, rows: usize, cols: usize| -> Result<QTensor, PipelineError> {
        let t = loaded
            .remove(&name)
            .ok_or_else(|| PipelineError::WeightImport(format!("missing tensor {name}")))?;
        if t.rows != rows || t.cols != cols {
            return Err(PipelineError::WeightImport(format!(
                "{name}: shape {}x{} does not match model {}x{}",
                t.rows, t.cols, rows, cols
            )));
        }
        Ok(t)
    };

    let unity = vec![crate::fixed::FX_ONE as i32; model.d_model];
    let mut layers = Vec::with_capacity(model.layers);
    for i in 0..model.layers {
        layers.push(LayerWeights {
            w_q: get(format!("layer{i}.w_q"), model.d_model, model.d_model)?,
            w_k: get(format!("layer{i}.w_k"), model.d_model, model.kv_dim())?,
            w_v: get(format!("layer{i}.w_v"), model.d_model, model.kv_dim())?,
            w1: get(format!("layer{i}.w1"), model.d_model, model.ffn_dim)?,
            w2: get(format!("layer{i}.w2"), model.ffn_dim, model.d_model)?,
            norm_attn: unity.clone(),
            norm_ffn: unity.clone(),
        });
    }
    let w_out = get("w_out".to_string(), model.d_model, model.d_model)?;
    Ok(ModelWeights {
        layers,
        norm_final: unity,
        w_out,
    })
}
