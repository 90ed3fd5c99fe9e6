//! Model and training hyperparameters, and the flat TOML config file that
//! carries both.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Concatenate pooled image/text features instead of graph fusion.
    NoMff,
    /// Single linear head instead of weighted multi-scale heads.
    NoMsp,
    /// Square patch grid with the unmodified 2-D positional grid.
    NoMgtsVit,
    /// Plain feed-forward experts and a router without the frequency term.
    NoFtc,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::NoMff, Ablation::NoMsp, Ablation::NoMgtsVit, Ablation::NoFtc];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoMff => "no_mff",
            Ablation::NoMsp => "no_msp",
            Ablation::NoMgtsVit => "no_mgts_vit",
            Ablation::NoFtc => "no_ftc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_len: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub patch_len: usize,
    pub patch_stride: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub n_blocks: usize,
    /// Blocks whose experts carry a frequency-time cell; `None` means all.
    pub ftc_blocks: Option<Vec<usize>>,
    pub alpha_init: f64,
    /// Width of the frequency branch; `None` means `d_model / 2`.
    pub freq_width: Option<usize>,
    pub attn_heads: usize,
    pub ffn_mult: usize,
    /// Router reuses expert 0's frequency-time cell instead of owning one.
    pub router_shares_ftc: bool,
    pub rms_eps: f64,
    pub chart_height: usize,
    pub image_depth: usize,
    pub pe_grid: usize,
    pub graph_layers: usize,
    pub past_window: usize,
    pub future_window: usize,
    /// Series<->image edges run both ways under one relation.
    pub cross_symmetric: bool,
    /// Text nodes also receive messages from series and image nodes.
    pub text_bidirectional: bool,
    pub head_scales: Vec<usize>,
    pub weight_hidden: usize,
    /// Normalize each input window per variable and undo it on the forecast.
    pub instance_norm: bool,
    pub ablations: BTreeSet<Ablation>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_len: 96,
            horizon: 96,
            d_model: 32,
            patch_len: 16,
            patch_stride: 8,
            n_experts: 4,
            top_k: 2,
            n_blocks: 2,
            ftc_blocks: None,
            alpha_init: 0.5,
            freq_width: None,
            attn_heads: 1,
            ffn_mult: 4,
            router_shares_ftc: false,
            rms_eps: 1e-6,
            chart_height: 64,
            image_depth: 2,
            pe_grid: 14,
            graph_layers: 2,
            past_window: 2,
            future_window: 2,
            cross_symmetric: true,
            text_bidirectional: false,
            head_scales: vec![30, 50, 100],
            weight_hidden: 32,
            instance_norm: true,
            ablations: BTreeSet::new(),
        }
    }
}

impl ModelConfig {
    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    /// Number of temporal patches `T = (L - pl) / st + 1`.
    pub fn patch_count(&self) -> usize {
        (self.input_len - self.patch_len) / self.patch_stride + 1
    }

    pub fn freq_width(&self) -> usize {
        self.freq_width.unwrap_or((self.d_model / 2).max(1))
    }

    pub fn block_has_ftc(&self, block: usize) -> bool {
        !self.has(Ablation::NoFtc)
            && self.ftc_blocks.as_ref().is_none_or(|b| b.contains(&block))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.input_len == 0 || self.horizon == 0 {
            return fail("input_len and horizon must be positive".into());
        }
        if self.patch_len == 0 || self.patch_stride == 0 || self.patch_len > self.input_len {
            return fail(format!(
                "patch_len {} / patch_stride {} invalid for input_len {}",
                self.patch_len, self.patch_stride, self.input_len
            ));
        }
        if !(self.input_len - self.patch_len).is_multiple_of(self.patch_stride) {
            return fail(format!(
                "input_len - patch_len = {} is not divisible by patch_stride {}",
                self.input_len - self.patch_len,
                self.patch_stride
            ));
        }
        if self.d_model == 0 || self.attn_heads == 0 || !self.d_model.is_multiple_of(self.attn_heads) {
            return fail(format!("d_model {} must be a positive multiple of attn_heads {}", self.d_model, self.attn_heads));
        }
        if self.n_experts == 0 || self.top_k == 0 || self.top_k > self.n_experts {
            return fail(format!("top_k {} must lie in [1, n_experts = {}]", self.top_k, self.n_experts));
        }
        if let Some(blocks) = &self.ftc_blocks {
            if let Some(b) = blocks.iter().find(|&&b| b >= self.n_blocks) {
                return fail(format!("ftc block {b} out of range for {} blocks", self.n_blocks));
            }
        }
        if !(self.alpha_init > 0.0 && self.alpha_init < 1.0) {
            return fail(format!("alpha_init {} must lie in (0, 1)", self.alpha_init));
        }
        if self.freq_width == Some(0) || self.ffn_mult == 0 || self.weight_hidden == 0 {
            return fail("freq_width, ffn_mult and weight_hidden must be positive".into());
        }
        if self.head_scales.is_empty() || self.head_scales.contains(&0) {
            return fail(format!("head scales {:?} must be non-empty and positive", self.head_scales));
        }
        if self.chart_height == 0 || self.pe_grid == 0 {
            return fail("chart_height and pe_grid must be positive".into());
        }
        if !(self.rms_eps > 0.0) {
            return fail("rms_eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub initial_lr: f64,
    /// Multiply the learning rate by 0.5 at every epoch boundary.
    pub lr_halving: bool,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub few_shot_fraction: Option<f64>,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub train_stride: usize,
    pub eval_stride: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 10,
            initial_lr: 1e-3,
            lr_halving: true,
            early_stop_patience: 3,
            seed: 0,
            few_shot_fraction: None,
            max_steps: None,
            train_ratio: 0.7,
            val_ratio: 0.1,
            train_stride: 1,
            eval_stride: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return fail("batch_size, max_epochs and early_stop_patience must be at least 1".into());
        }
        if !(self.initial_lr > 0.0) {
            return fail(format!("initial_lr {} must be positive", self.initial_lr));
        }
        if let Some(f) = self.few_shot_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return fail(format!("few_shot_fraction {f} not in (0, 1]"));
            }
        }
        if self.max_steps == Some(0) || self.train_stride == 0 || self.eval_stride == 0 {
            return fail("max_steps and strides must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return fail("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.lr_halving {
            self.initial_lr * 0.5f64.powi(epoch as i32)
        } else {
            self.initial_lr
        }
    }
}

/// Both halves of a run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn field_names<T: Serialize + Default>() -> BTreeSet<String> {
    match serde_json::to_value(T::default()) {
        Ok(serde_json::Value::Object(map)) => map.keys().cloned().collect(),
        _ => BTreeSet::new(),
    }
}

impl RunConfig {
    /// Parses the flat key-value config. Every key must name a model or
    /// training field; omitted keys keep their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("malformed config: {e}")))?;
        let model_keys = field_names::<ModelConfig>();
        let train_keys = field_names::<TrainConfig>();
        let mut model = toml::Table::new();
        let mut train = toml::Table::new();
        for (k, v) in table {
            if model_keys.contains(&k) {
                model.insert(k, v);
            } else if train_keys.contains(&k) {
                train.insert(k, v);
            } else {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
        }
        let model: ModelConfig = model
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let train: TrainConfig = train
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let cfg = Self { model, train };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Flat TOML rendering, readable back by [`RunConfig::from_toml_str`].
    pub fn to_toml_string(&self) -> Result<String> {
        let mut table = toml::Table::try_from(&self.model).map_err(|e| Error::Config(e.to_string()))?;
        let train = toml::Table::try_from(&self.train).map_err(|e| Error::Config(e.to_string()))?;
        table.extend(train);
        toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
