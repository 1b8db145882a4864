//! The four-part network: image encoder, text encoder, fusion encoder with
//! cross-attention, and an autoregressive decoder over the shared vocabulary.

mod checkpoint;
mod forward;
mod image;
mod incremental;
mod loss;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{config, Result};
use crate::tensor::Matrix;
use crate::vocab::Sentinel;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use forward::{context_for, decoder_logits, encode_image, encode_text, fuse_context, ContextState, Forward};
pub use image::ImageTensor;
pub use incremental::{DecoderState, StepDecoder};
pub use loss::{compute_gradients, compute_loss, LossReport};
pub use train::{train, train_from, TrainOutcome, TrainParams, TrainingSet};

/// Standard deviation of the initial weight distribution.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub image_layers: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    pub decoder_layers: usize,
    pub ffn_mult: usize,
    pub image_side: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub num_position_tokens: usize,
    pub max_input_len: usize,
    pub max_target_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn tiny(vocab_size: usize, num_position_tokens: usize) -> Self {
        ModelConfig {
            hidden_dim: 64,
            num_heads: 4,
            image_layers: 2,
            text_layers: 2,
            fusion_layers: 2,
            decoder_layers: 2,
            ffn_mult: 4,
            image_side: 64,
            patch_size: 8,
            vocab_size,
            num_position_tokens,
            max_input_len: 16,
            max_target_len: 16,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(config(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        let layers = [self.image_layers, self.text_layers, self.fusion_layers, self.decoder_layers];
        if layers.contains(&0) || self.ffn_mult == 0 {
            return Err(config("every sub-network needs at least one layer"));
        }
        if self.patch_size == 0 || self.image_side == 0 || !self.image_side.is_multiple_of(self.patch_size) {
            return Err(config(format!(
                "image side {} must be divisible by patch size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.max_target_len < 8 {
            return Err(config("max_target_len must be at least 8"));
        }
        if self.max_input_len < 7 {
            return Err(config("max_input_len must fit a subject plus its box"));
        }
        if self.num_position_tokens < 2 || self.vocab_size <= Sentinel::COUNT + self.num_position_tokens {
            return Err(config(format!(
                "vocab_size {} cannot hold sentinels, words and {} position tokens",
                self.vocab_size, self.num_position_tokens
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_side / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn position_range(&self) -> std::ops::Range<usize> {
        self.vocab_size - self.num_position_tokens..self.vocab_size
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AttnIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct CrossIds {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub attn: AttnIds,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub self_attn: AttnIds,
    pub cross: Option<CrossIds>,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl BlockIds {
    fn all(&self) -> Vec<ParamId> {
        let a = |x: &AttnIds| vec![x.wq, x.bq, x.wk, x.bk, x.wv, x.bv, x.wo, x.bo];
        let mut v = vec![self.ln1_g, self.ln1_b];
        v.extend(a(&self.self_attn));
        if let Some(c) = &self.cross {
            v.extend([c.ln_g, c.ln_b]);
            v.extend(a(&c.attn));
        }
        v.extend([self.ln2_g, self.ln2_b, self.w1, self.b1, self.w2, self.b2]);
        v
    }
}

/// Parameter ids of every sub-network, fixed by the config.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub image_pos: ParamId,
    pub image_blocks: Vec<BlockIds>,
    pub image_ln: (ParamId, ParamId),
    pub token_embed: ParamId,
    pub text_pos: ParamId,
    pub text_blocks: Vec<BlockIds>,
    pub text_ln: (ParamId, ParamId),
    pub fusion_blocks: Vec<BlockIds>,
    pub fusion_ln: (ParamId, ParamId),
    pub bos: ParamId,
    pub decoder_pos: ParamId,
    pub decoder_blocks: Vec<BlockIds>,
    pub decoder_ln: (ParamId, ParamId),
    pub out_w: ParamId,
    pub out_b: ParamId,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Registrar<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Registrar<'_> {
    fn reg(&mut self, name: String, rows: usize, cols: usize, init: Init) -> ParamId {
        let data = match init {
            Init::Normal => (0..rows * cols).map(|_| self.normal.sample(&mut self.rng)).collect(),
            Init::Zeros => vec![0.0; rows * cols],
            Init::Ones => vec![1.0; rows * cols],
        };
        self.store.register(name, Matrix::from_vec(rows, cols, data))
    }

    fn ln(&mut self, name: &str, d: usize) -> (ParamId, ParamId) {
        (self.reg(format!("{name}.gamma"), 1, d, Init::Ones), self.reg(format!("{name}.beta"), 1, d, Init::Zeros))
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnIds {
        let mut lin = |n: &str| {
            (
                self.reg(format!("{name}.{n}.weight"), d, d, Init::Normal),
                self.reg(format!("{name}.{n}.bias"), 1, d, Init::Zeros),
            )
        };
        let (wq, bq) = lin("q");
        let (wk, bk) = lin("k");
        let (wv, bv) = lin("v");
        let (wo, bo) = lin("o");
        AttnIds { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    fn block(&mut self, name: &str, d: usize, ffn: usize, cross: bool) -> BlockIds {
        let (ln1_g, ln1_b) = self.ln(&format!("{name}.ln1"), d);
        let self_attn = self.attn(&format!("{name}.self_attn"), d);
        let cross = cross.then(|| {
            let (ln_g, ln_b) = self.ln(&format!("{name}.ln_cross"), d);
            CrossIds { ln_g, ln_b, attn: self.attn(&format!("{name}.cross_attn"), d) }
        });
        let (ln2_g, ln2_b) = self.ln(&format!("{name}.ln2"), d);
        let w1 = self.reg(format!("{name}.ffn.w1"), d, ffn, Init::Normal);
        let b1 = self.reg(format!("{name}.ffn.b1"), 1, ffn, Init::Zeros);
        let w2 = self.reg(format!("{name}.ffn.w2"), ffn, d, Init::Normal);
        let b2 = self.reg(format!("{name}.ffn.b2"), 1, d, Init::Zeros);
        BlockIds { ln1_g, ln1_b, self_attn, cross, ln2_g, ln2_b, w1, b1, w2, b2 }
    }
}

impl Layout {
    fn register(cfg: &ModelConfig, store: &mut ParamStore) -> Layout {
        let d = cfg.hidden_dim;
        let ffn = d * cfg.ffn_mult;
        let mut r = Registrar {
            store,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid normal"),
        };
        let patch_w = r.reg("image.patch.weight".into(), cfg.patch_dim(), d, Init::Normal);
        let patch_b = r.reg("image.patch.bias".into(), 1, d, Init::Zeros);
        let image_pos = r.reg("image.pos".into(), cfg.num_patches(), d, Init::Normal);
        let image_blocks = (0..cfg.image_layers).map(|i| r.block(&format!("image.block{i}"), d, ffn, false)).collect();
        let image_ln = r.ln("image.ln_final", d);
        let token_embed = r.reg("token_embed".into(), cfg.vocab_size, d, Init::Normal);
        let text_pos = r.reg("text.pos".into(), cfg.max_input_len, d, Init::Normal);
        let text_blocks = (0..cfg.text_layers).map(|i| r.block(&format!("text.block{i}"), d, ffn, false)).collect();
        let text_ln = r.ln("text.ln_final", d);
        let fusion_blocks = (0..cfg.fusion_layers).map(|i| r.block(&format!("fusion.block{i}"), d, ffn, true)).collect();
        let fusion_ln = r.ln("fusion.ln_final", d);
        let bos = r.reg("decoder.bos".into(), 1, d, Init::Normal);
        let decoder_pos = r.reg("decoder.pos".into(), cfg.max_target_len, d, Init::Normal);
        let decoder_blocks =
            (0..cfg.decoder_layers).map(|i| r.block(&format!("decoder.block{i}"), d, ffn, true)).collect();
        let decoder_ln = r.ln("decoder.ln_final", d);
        let out_w = r.reg("decoder.out.weight".into(), cfg.vocab_size, d, Init::Normal);
        let out_b = r.reg("decoder.out.bias".into(), 1, cfg.vocab_size, Init::Zeros);
        Layout {
            patch_w,
            patch_b,
            image_pos,
            image_blocks,
            image_ln,
            token_embed,
            text_pos,
            text_blocks,
            text_ln,
            fusion_blocks,
            fusion_ln,
            bos,
            decoder_pos,
            decoder_blocks,
            decoder_ln,
            out_w,
            out_b,
        }
    }
}

/// Configuration, parameters and their layout.
#[derive(Debug, Clone)]
pub struct ModelState {
    config: ModelConfig,
    params: ParamStore,
    pub(crate) layout: Layout,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Draws every weight from N(0, 0.02) using `config.seed`, then copies each fusion
/// block into the decoder block with the same index.
pub fn init_parameters(config: &ModelConfig) -> Result<ModelState> {
    config.validate()?;
    let mut params = ParamStore::default();
    let layout = Layout::register(config, &mut params);
    for (src, dst) in layout.fusion_blocks.iter().zip(&layout.decoder_blocks) {
        for (s, d) in src.all().into_iter().zip(dst.all()) {
            let value = params.get(s).clone();
            *params.get_mut(d) = value;
        }
    }
    Ok(ModelState { config: config.clone(), params, layout })
}

impl ModelState {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Looks up a parameter by its registered name.
    pub fn param_by_name(&self, name: &str) -> Option<ParamId> {
        self.params.names().iter().position(|n| n == name).map(ParamId)
    }

    pub fn all_finite(&self) -> bool {
        self.params.tensors().iter().all(Matrix::all_finite)
    }

    /// Pairs of (fusion, decoder) parameter ids that initialization ties together.
    pub fn fusion_decoder_pairs(&self) -> Vec<(ParamId, ParamId)> {
        self.layout
            .fusion_blocks
            .iter()
            .zip(&self.layout.decoder_blocks)
            .flat_map(|(f, d)| f.all().into_iter().zip(d.all()))
            .collect()
    }

    /// Output-projection weight (`[vocab, d]`) and bias (`[1, vocab]`) ids.
    pub fn output_projection(&self) -> (ParamId, ParamId) {
        (self.layout.out_w, self.layout.out_b)
    }

    pub(crate) fn from_parts(config: ModelConfig, tensors: Vec<(String, Matrix)>) -> Result<Self> {
        let mut fresh = init_parameters(&config)?;
        if tensors.len() != fresh.params.len() {
            return Err(crate::Error::Parse(format!(
                "checkpoint has {} tensors, config expects {}",
                tensors.len(),
                fresh.params.len()
            )));
        }
        for (i, (name, m)) in tensors.into_iter().enumerate() {
            let id = ParamId(i);
            let slot = fresh.params.get(id);
            if fresh.params.name(id) != name || slot.shape() != m.shape() {
                return Err(crate::Error::Parse(format!("checkpoint tensor {name} does not match layout")));
            }
            *fresh.params.get_mut(id) = m;
        }
        Ok(fresh)
    }
}
