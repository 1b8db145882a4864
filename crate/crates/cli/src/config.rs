//! Sectioned TOML run configuration. Relative paths resolve against the config
//! file's directory (or the working directory when no file is given).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use reldet::corpus::{SplitSpec, SyntheticSpec};
use reldet::decoding::{DecodeParams, Strategy};
use reldet::model::{ModelConfig, TrainParams};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Output of `gen-synthetic`, input records and image root for later stages.
    pub data_dir: PathBuf,
    pub splits_dir: PathBuf,
    /// Defaults to `<data_dir>/lexicon.txt`.
    pub lexicon: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub predictions: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "data".into(),
            splits_dir: "splits".into(),
            lexicon: None,
            synonyms: None,
            checkpoint: "model.ckpt".into(),
            predictions: "predictions.jsonl".into(),
            report_dir: "report".into(),
        }
    }
}

/// Model shape; the vocabulary size comes from the vocabulary file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub image_layers: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    pub decoder_layers: usize,
    pub ffn_mult: usize,
    pub image_side: usize,
    pub patch_size: usize,
    pub num_position_tokens: usize,
    pub max_input_len: usize,
    pub max_target_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = ModelConfig::tiny(0, 32);
        ModelSection {
            hidden_dim: t.hidden_dim,
            num_heads: t.num_heads,
            image_layers: t.image_layers,
            text_layers: t.text_layers,
            fusion_layers: t.fusion_layers,
            decoder_layers: t.decoder_layers,
            ffn_mult: t.ffn_mult,
            image_side: t.image_side,
            patch_size: t.patch_size,
            num_position_tokens: t.num_position_tokens,
            max_input_len: t.max_input_len,
            max_target_len: t.max_target_len,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            image_layers: self.image_layers,
            text_layers: self.text_layers,
            fusion_layers: self.fusion_layers,
            decoder_layers: self.decoder_layers,
            ffn_mult: self.ffn_mult,
            image_side: self.image_side,
            patch_size: self.patch_size,
            vocab_size,
            num_position_tokens: self.num_position_tokens,
            max_input_len: self.max_input_len,
            max_target_len: self.max_target_len,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TrainSplit {
    Base,
    TextAug,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub split: TrainSplit,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub cosine_decay: bool,
    pub clip_norm: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainParams::default();
        TrainSection {
            split: TrainSplit::Base,
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            warmup_steps: d.warmup_steps,
            cosine_decay: d.cosine_decay,
            clip_norm: d.clip_norm,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub k: usize,
    pub step1_max_len: usize,
    pub step2_max_len: usize,
    pub strategy: Strategy,
    /// Split whose records are decoded by `predict`.
    pub split: String,
}

impl Default for DecodeSection {
    fn default() -> Self {
        let d = DecodeParams::default();
        DecodeSection {
            k: d.k,
            step1_max_len: d.step1_max_len,
            step2_max_len: d.step2_max_len,
            strategy: Strategy::TwoStep,
            split: "full_test".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub iou_thresholds: Vec<f64>,
    pub splits: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ks: vec![1, 3],
            iou_thresholds: vec![0.3, 0.4, 0.5],
            splits: vec!["test_a".into(), "test_b".into(), "full_test".into()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub min_count: usize,
    pub max_count: usize,
    pub removal_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        let d = SplitSpec::default();
        SplitSection { min_count: d.min_count, max_count: d.max_count, removal_fraction: d.removal_fraction }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synthetic: SyntheticSpec,
    pub splits: SplitSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub decode: DecodeSection,
    pub eval: EvalSection,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let mut c: RunConfig = toml::from_str(&text).map_err(|e| reldet::Error::Config(format!("{}: {e}", p.display())))?;
                c.base_dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
                c
            }
            None => RunConfig::default(),
        };
        cfg.eval.ks.sort_unstable();
        cfg.eval.ks.dedup();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.resolve(&self.paths.data_dir)
    }

    pub fn splits_dir(&self) -> PathBuf {
        self.resolve(&self.paths.splits_dir)
    }

    pub fn lexicon(&self) -> PathBuf {
        match &self.paths.lexicon {
            Some(p) => self.resolve(p),
            None => self.data_dir().join("lexicon.txt"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            bail!(reldet::Error::Config("eval.ks must be a non-empty list of positive integers".into()));
        }
        if self.eval.iou_thresholds.is_empty() || self.eval.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            bail!(reldet::Error::Config("eval.iou_thresholds must be non-empty and within (0, 1]".into()));
        }
        if self.decode.k == 0 {
            bail!(reldet::Error::Config("decode.k must be positive".into()));
        }
        Ok(())
    }

    pub fn train_params(&self, seed: u64) -> TrainParams {
        TrainParams {
            lr: self.train.lr,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed,
            clip_norm: self.train.clip_norm,
            warmup_steps: self.train.warmup_steps,
            cosine_decay: self.train.cosine_decay,
            ..TrainParams::default()
        }
    }

    pub fn split_spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            min_count: self.splits.min_count,
            max_count: self.splits.max_count,
            removal_fraction: self.splits.removal_fraction,
            seed,
        }
    }

    pub fn decode_params(&self) -> DecodeParams {
        DecodeParams { k: self.decode.k, step1_max_len: self.decode.step1_max_len, step2_max_len: self.decode.step2_max_len }
    }
}
