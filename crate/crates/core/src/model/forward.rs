use crate::autodiff::{Tape, Var};
use crate::error::{validation, Result};
use crate::tensor::Matrix;
use crate::vocab::{Sentinel, TokenId};

use super::{AttnIds, BlockIds, ImageTensor, ModelConfig, ModelState};

/// Fused features produced by the fusion encoder, one row per input text token.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextState {
    pub z: Matrix,
}

impl ContextState {
    pub fn len(&self) -> usize {
        self.z.rows
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows == 0
    }
}

/// Whether `token` may be emitted in the current output segment. Before `[@]` the
/// decoder speaks words and sentinels; after it, only position tokens and `[SEP]`.
pub(crate) fn segment_allows(cfg: &ModelConfig, in_box_segment: bool, token: usize) -> bool {
    let is_pos = cfg.position_range().contains(&token);
    if in_box_segment {
        is_pos || token == Sentinel::Sep.id() as usize
    } else {
        !is_pos
    }
}

/// Row-major mask of disallowed logits for decoder rows fed by `[BOS] ++ prefix`.
pub(crate) fn grammar_mask(cfg: &ModelConfig, prefix: &[TokenId]) -> Vec<bool> {
    let v = cfg.vocab_size;
    let mut masked = Vec::with_capacity((prefix.len() + 1) * v);
    let mut in_box = false;
    for k in 0..=prefix.len() {
        if k > 0 && prefix[k - 1] == Sentinel::At.id() {
            in_box = true;
        }
        masked.extend((0..v).map(|t| !segment_allows(cfg, in_box, t)));
    }
    masked
}

/// Builds forward graphs for one model on a fresh tape.
pub struct Forward<'m> {
    pub tape: Tape<'m>,
    model: &'m ModelState,
}

impl<'m> Forward<'m> {
    pub fn new(model: &'m ModelState) -> Self {
        Forward { tape: Tape::new(model.params()), model }
    }

    fn cfg(&self) -> &'m ModelConfig {
        &self.model.config
    }

    fn mha(&mut self, a: &AttnIds, hq: Var, hkv: Var, causal: bool) -> Var {
        let t = &mut self.tape;
        let (wq, bq, wk, bk) = (t.param(a.wq), t.param(a.bq), t.param(a.wk), t.param(a.bk));
        let (wv, bv, wo, bo) = (t.param(a.wv), t.param(a.bv), t.param(a.wo), t.param(a.bo));
        let q = t.linear(hq, wq, bq);
        let k = t.linear(hkv, wk, bk);
        let v = t.linear(hkv, wv, bv);
        let o = t.attention(q, k, v, self.model.config.num_heads, causal);
        t.linear(o, wo, bo)
    }

    /// Pre-norm transformer block with optional cross-attention to `ctx`.
    fn block(&mut self, b: &BlockIds, x: Var, ctx: Option<Var>, causal: bool) -> Var {
        let (g, be) = (self.tape.param(b.ln1_g), self.tape.param(b.ln1_b));
        let h = self.tape.layer_norm(x, g, be);
        let a = self.mha(&b.self_attn, h, h, causal);
        let mut x = self.tape.add(x, a);
        if let (Some(c), Some(ctx)) = (&b.cross, ctx) {
            let (g, be) = (self.tape.param(c.ln_g), self.tape.param(c.ln_b));
            let h = self.tape.layer_norm(x, g, be);
            let a = self.mha(&c.attn, h, ctx, false);
            x = self.tape.add(x, a);
        }
        let t = &mut self.tape;
        let (g, be) = (t.param(b.ln2_g), t.param(b.ln2_b));
        let h = t.layer_norm(x, g, be);
        let (w1, b1, w2, b2) = (t.param(b.w1), t.param(b.b1), t.param(b.w2), t.param(b.b2));
        let f = t.linear(h, w1, b1);
        let f = t.gelu(f);
        let f = t.linear(f, w2, b2);
        t.add(x, f)
    }

    fn stack(&mut self, blocks: &[BlockIds], mut x: Var, ctx: Option<Var>, causal: bool, ln: (crate::autodiff::ParamId, crate::autodiff::ParamId)) -> Var {
        for b in blocks {
            x = self.block(b, x, ctx, causal);
        }
        let (g, be) = (self.tape.param(ln.0), self.tape.param(ln.1));
        self.tape.layer_norm(x, g, be)
    }

    pub fn image(&mut self, img: &ImageTensor) -> Result<Var> {
        let cfg = self.cfg();
        if img.side() != cfg.image_side {
            return Err(validation(format!("image side {} != configured {}", img.side(), cfg.image_side)));
        }
        let lay = &self.model.layout;
        let patches = self.tape.input(img.patches(cfg.patch_size));
        let (w, b) = (self.tape.param(lay.patch_w), self.tape.param(lay.patch_b));
        let x = self.tape.linear(patches, w, b);
        let pos_table = self.tape.param(lay.image_pos);
        let pos = self.tape.gather(pos_table, (0..cfg.num_patches()).collect());
        let x = self.tape.add(x, pos);
        Ok(self.stack(&lay.image_blocks, x, None, false, lay.image_ln))
    }

    pub fn text(&mut self, ids: &[TokenId]) -> Result<Var> {
        let cfg = self.cfg();
        if ids.is_empty() || ids.len() > cfg.max_input_len {
            return Err(validation(format!("input length {} outside 1..={}", ids.len(), cfg.max_input_len)));
        }
        if let Some(bad) = ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(validation(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let lay = &self.model.layout;
        let emb = self.tape.param(lay.token_embed);
        let x = self.tape.gather(emb, ids.iter().map(|&t| t as usize).collect());
        let pos_table = self.tape.param(lay.text_pos);
        let pos = self.tape.gather(pos_table, (0..ids.len()).collect());
        let x = self.tape.add(x, pos);
        Ok(self.stack(&lay.text_blocks, x, None, false, lay.text_ln))
    }

    /// Text features attend to image features; the output keeps the text length.
    pub fn fuse(&mut self, image_feats: Var, text_feats: Var) -> Result<Var> {
        let d = self.cfg().hidden_dim;
        if self.tape.value(image_feats).cols != d || self.tape.value(text_feats).cols != d {
            return Err(validation("feature width does not match hidden_dim"));
        }
        let lay = &self.model.layout;
        Ok(self.stack(&lay.fusion_blocks, text_feats, Some(image_feats), false, lay.fusion_ln))
    }

    /// Masked logits, one row per next-token prediction for `[BOS] ++ prefix`.
    pub fn decoder_logits(&mut self, z: Var, prefix: &[TokenId]) -> Result<Var> {
        let cfg = self.cfg();
        if prefix.len() >= cfg.max_target_len {
            return Err(validation(format!("prefix length {} must be < {}", prefix.len(), cfg.max_target_len)));
        }
        if let Some(bad) = prefix.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(validation(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let lay = &self.model.layout;
        let bos = self.tape.param(lay.bos);
        let x = if prefix.is_empty() {
            bos
        } else {
            let emb = self.tape.param(lay.token_embed);
            let toks = self.tape.gather(emb, prefix.iter().map(|&t| t as usize).collect());
            self.tape.vstack(vec![bos, toks])
        };
        let pos_table = self.tape.param(lay.decoder_pos);
        let pos = self.tape.gather(pos_table, (0..=prefix.len()).collect());
        let x = self.tape.add(x, pos);
        let h = self.stack(&lay.decoder_blocks, x, Some(z), true, lay.decoder_ln);
        let (w, b) = (self.tape.param(lay.out_w), self.tape.param(lay.out_b));
        let logits = self.tape.matmul_nt(h, w);
        let logits = self.tape.add_row(logits, b);
        Ok(self.tape.mask_neg_inf(logits, grammar_mask(cfg, prefix)))
    }

    /// Image and subject encoding fused into the decoder context.
    pub fn context(&mut self, img: &ImageTensor, input_ids: &[TokenId]) -> Result<Var> {
        let i = self.image(img)?;
        let t = self.text(input_ids)?;
        self.fuse(i, t)
    }
}

/// Image features, `(S/p)^2` rows of width `d`.
pub fn encode_image(img: &ImageTensor, m: &ModelState) -> Result<Matrix> {
    let mut f = Forward::new(m);
    let v = f.image(img)?;
    Ok(f.tape.value(v).clone())
}

/// One feature row per input token.
pub fn encode_text(input_ids: &[TokenId], m: &ModelState) -> Result<Matrix> {
    let mut f = Forward::new(m);
    let v = f.text(input_ids)?;
    Ok(f.tape.value(v).clone())
}

pub fn fuse_context(image_feats: &Matrix, text_feats: &Matrix, m: &ModelState) -> Result<ContextState> {
    let mut f = Forward::new(m);
    let i = f.tape.input(image_feats.clone());
    let t = f.tape.input(text_feats.clone());
    let z = f.fuse(i, t)?;
    Ok(ContextState { z: f.tape.value(z).clone() })
}

pub fn context_for(img: &ImageTensor, input_ids: &[TokenId], m: &ModelState) -> Result<ContextState> {
    let mut f = Forward::new(m);
    let z = f.context(img, input_ids)?;
    Ok(ContextState { z: f.tape.value(z).clone() })
}

/// Logits (with disallowed entries at `-inf`) for every next-token position.
pub fn decoder_logits(z: &ContextState, prefix: &[TokenId], m: &ModelState) -> Result<Matrix> {
    if z.z.cols != m.config.hidden_dim {
        return Err(validation("context width does not match hidden_dim"));
    }
    let mut f = Forward::new(m);
    let zv = f.tape.input(z.z.clone());
    let l = f.decoder_logits(zv, prefix)?;
    Ok(f.tape.value(l).clone())
}
