//! Forward-only decoder that consumes one token at a time with cached keys and
//! values. It runs the same kernels in the same order as the taped decoder, so
//! its log-probabilities match `decoder_logits` row for row.

use crate::autodiff::ParamStore;
use crate::error::{validation, Result};
use crate::tensor::{self, log_softmax, Matrix};
use crate::vocab::{Sentinel, TokenId};

use super::forward::segment_allows;
use super::{AttnIds, ContextState, ModelState};

fn linear(p: &ParamStore, x: &Matrix, w: crate::autodiff::ParamId, b: crate::autodiff::ParamId) -> Matrix {
    tensor::add_row_broadcast(&tensor::matmul(x, p.get(w)), p.get(b))
}

fn ln(p: &ParamStore, x: &Matrix, ids: (crate::autodiff::ParamId, crate::autodiff::ParamId)) -> Matrix {
    tensor::layer_norm(x, p.get(ids.0), p.get(ids.1)).0
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    out.add_assign(b);
    out
}

fn append_row(m: &mut Matrix, row: &Matrix) {
    debug_assert_eq!(row.rows, 1);
    m.data.extend_from_slice(&row.data);
    m.rows += 1;
}

/// Per-hypothesis decoder state: cached self-attention keys/values per layer and
/// the log-probabilities for the next token.
#[derive(Debug, Clone)]
pub struct DecoderState {
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    len: usize,
    in_box_segment: bool,
    log_probs: Vec<f64>,
}

impl DecoderState {
    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    /// Number of decoder rows consumed, including the start row.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Decoder bound to one fused context.
pub struct StepDecoder<'m> {
    model: &'m ModelState,
    cross: Vec<(Matrix, Matrix)>,
}

impl<'m> StepDecoder<'m> {
    pub fn new(model: &'m ModelState, z: &ContextState) -> Result<Self> {
        if z.z.cols != model.config().hidden_dim || z.is_empty() {
            return Err(validation("context does not match the model"));
        }
        let p = model.params();
        let cross = model
            .layout
            .decoder_blocks
            .iter()
            .map(|b| {
                let c = b.cross.as_ref().expect("decoder blocks have cross-attention");
                (linear(p, &z.z, c.attn.wk, c.attn.bk), linear(p, &z.z, c.attn.wv, c.attn.bv))
            })
            .collect();
        Ok(StepDecoder { model, cross })
    }

    pub fn max_len(&self) -> usize {
        self.model.config().max_target_len
    }

    /// State after the start row only: distribution of the first target token.
    pub fn start(&self) -> DecoderState {
        let n = self.model.layout.decoder_blocks.len();
        let d = self.model.config().hidden_dim;
        let empty = DecoderState {
            keys: vec![Matrix::zeros(0, d); n],
            values: vec![Matrix::zeros(0, d); n],
            len: 0,
            in_box_segment: false,
            log_probs: Vec::new(),
        };
        self.step(&empty, None)
    }

    /// Consumes `token` and returns the state predicting the following one.
    pub fn push(&self, state: &DecoderState, token: TokenId) -> Result<DecoderState> {
        if state.len >= self.max_len() {
            return Err(validation("decoder context is full"));
        }
        if token as usize >= self.model.config().vocab_size {
            return Err(validation(format!("token {token} outside vocabulary")));
        }
        Ok(self.step(state, Some(token)))
    }

    /// Feeds a whole prefix after the start row.
    pub fn feed(&self, prefix: &[TokenId]) -> Result<DecoderState> {
        let mut s = self.start();
        for &t in prefix {
            s = self.push(&s, t)?;
        }
        Ok(s)
    }

    fn attn(&self, a: &AttnIds, h: &Matrix, keys: &Matrix, values: &Matrix) -> Matrix {
        let p = self.model.params();
        let q = linear(p, h, a.wq, a.bq);
        let heads = self.model.config().num_heads;
        let mut o = Matrix::zeros(1, q.cols);
        let mut probs = vec![0.0; heads * keys.rows];
        tensor::attend_row(q.row(0), keys, values, keys.rows, heads, o.row_mut(0), &mut probs);
        linear(p, &o, a.wo, a.bo)
    }

    fn step(&self, prev: &DecoderState, token: Option<TokenId>) -> DecoderState {
        let p = self.model.params();
        let lay = &self.model.layout;
        let cfg = self.model.config();
        let pos = prev.len;
        let mut x = match token {
            None => p.get(lay.bos).clone(),
            Some(t) => Matrix::from_vec(1, cfg.hidden_dim, p.get(lay.token_embed).row(t as usize).to_vec()),
        };
        x = add(&x, &Matrix::from_vec(1, cfg.hidden_dim, p.get(lay.decoder_pos).row(pos).to_vec()));

        let mut next = prev.clone();
        for (l, b) in lay.decoder_blocks.iter().enumerate() {
            let h = ln(p, &x, (b.ln1_g, b.ln1_b));
            let sa = &b.self_attn;
            append_row(&mut next.keys[l], &linear(p, &h, sa.wk, sa.bk));
            append_row(&mut next.values[l], &linear(p, &h, sa.wv, sa.bv));
            let a = self.attn(sa, &h, &next.keys[l], &next.values[l]);
            x = add(&x, &a);
            let c = b.cross.as_ref().expect("decoder blocks have cross-attention");
            let h = ln(p, &x, (c.ln_g, c.ln_b));
            let a = self.attn(&c.attn, &h, &self.cross[l].0, &self.cross[l].1);
            x = add(&x, &a);
            let h = ln(p, &x, (b.ln2_g, b.ln2_b));
            let mut f = linear(p, &h, b.w1, b.b1);
            f.data.iter_mut().for_each(|v| *v = tensor::gelu(*v));
            let f = linear(p, &f, b.w2, b.b2);
            x = add(&x, &f);
        }
        let h = ln(p, &x, lay.decoder_ln);
        let mut logits = tensor::add_row_broadcast(&tensor::matmul_nt(&h, p.get(lay.out_w)), p.get(lay.out_b));

        next.len = pos + 1;
        if token == Some(Sentinel::At.id()) {
            next.in_box_segment = true;
        }
        for (t, l) in logits.data.iter_mut().enumerate() {
            if !segment_allows(cfg, next.in_box_segment, t) {
                *l = f64::NEG_INFINITY;
            }
        }
        next.log_probs = log_softmax(&logits.data);
        next
    }
}
