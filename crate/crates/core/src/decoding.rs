//! Beam search over any step-wise scorer, and the two decoding strategies built on it.
//!
//! Two-step decoding first searches for `K` relation-object prefixes ending in `[@]`,
//! then completes each prefix greedily up to `[SEP]`. Single-pass decoding searches
//! directly for complete sequences and serves as the baseline.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_text, ImageRef, SampleRecord};
use crate::error::{validation, Result};
use crate::geometry::BoxPixels;
use crate::model::{encode_image, encode_text, fuse_context, ContextState, DecoderState, ImageTensor, ModelState, StepDecoder};
use crate::tensor::Matrix;
use crate::vocab::{Sentinel, TokenId, Tokenizer};

/// A next-token scorer that can be advanced one token at a time.
pub trait StepModel {
    type State: Clone;

    /// State after consuming `prefix`.
    fn init(&self, prefix: &[TokenId]) -> Result<Self::State>;

    /// Log-probabilities of every next token; `-inf` marks impossible tokens.
    fn log_probs<'s>(&self, state: &'s Self::State) -> &'s [f64];

    fn advance(&self, state: &Self::State, token: TokenId) -> Result<Self::State>;
}

impl StepModel for StepDecoder<'_> {
    type State = DecoderState;

    fn init(&self, prefix: &[TokenId]) -> Result<DecoderState> {
        self.feed(prefix)
    }

    fn log_probs<'s>(&self, state: &'s DecoderState) -> &'s [f64] {
        state.log_probs()
    }

    fn advance(&self, state: &DecoderState, token: TokenId) -> Result<DecoderState> {
        self.push(state, token)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSequence {
    pub tokens: Vec<TokenId>,
    /// Sum of per-token log-probabilities of the tokens after the supplied prefix.
    pub score: f64,
}

/// Best-first order: higher score, then the lexicographically smaller token sequence.
pub fn rank_order(a: &ScoredSequence, b: &ScoredSequence) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    /// Up to `K` sequences ending in the end token, best first.
    pub finished: Vec<ScoredSequence>,
    /// Best hypotheses that hit `max_len` without the end token.
    pub unfinished: Vec<ScoredSequence>,
    /// How many of the requested `K` sequences did not finalize.
    pub shortfall: usize,
}

struct Hyp<S> {
    seq: ScoredSequence,
    state: S,
}

/// Beam search of width `k`. A hypothesis is final once it emits `end`; sequences
/// (prefix included) never exceed `max_len` tokens. Scores are raw summed
/// log-probabilities with no length normalization.
pub fn beam_search<M: StepModel>(
    model: &M,
    prefix: &[TokenId],
    k: usize,
    end: TokenId,
    max_len: usize,
) -> Result<BeamOutput> {
    if k == 0 {
        return Err(validation("beam width must be at least 1"));
    }
    if max_len <= prefix.len() {
        return Err(validation(format!("max_len {max_len} must exceed prefix length {}", prefix.len())));
    }
    let mut beams = vec![Hyp { seq: ScoredSequence { tokens: prefix.to_vec(), score: 0.0 }, state: model.init(prefix)? }];
    let mut finished: Vec<ScoredSequence> = Vec::new();
    let mut unfinished: Vec<ScoredSequence> = Vec::new();

    while !beams.is_empty() {
        // (beam index, token, score)
        let mut cands: Vec<(usize, TokenId, f64)> = Vec::new();
        for (bi, b) in beams.iter().enumerate() {
            let next_len = b.seq.tokens.len() + 1;
            for (tok, &lp) in model.log_probs(&b.state).iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let tok = tok as TokenId;
                let score = b.seq.score + lp;
                if tok == end {
                    let mut tokens = b.seq.tokens.clone();
                    tokens.push(tok);
                    finished.push(ScoredSequence { tokens, score });
                } else if next_len < max_len {
                    cands.push((bi, tok, score));
                } else {
                    let mut tokens = b.seq.tokens.clone();
                    tokens.push(tok);
                    unfinished.push(ScoredSequence { tokens, score });
                }
            }
        }
        finished.sort_by(rank_order);
        finished.truncate(k);

        let cmp_cand = |a: &(usize, TokenId, f64), b: &(usize, TokenId, f64)| {
            b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal).then_with(|| {
                beams[a.0].seq.tokens.iter().chain([&a.1]).cmp(beams[b.0].seq.tokens.iter().chain([&b.1]))
            })
        };
        cands.sort_by(cmp_cand);
        cands.truncate(k);
        if finished.len() == k && cands.first().is_none_or(|c| c.2 < finished[k - 1].score) {
            break;
        }
        let mut next = Vec::with_capacity(cands.len());
        for (bi, tok, score) in cands {
            let b = &beams[bi];
            let mut tokens = b.seq.tokens.clone();
            tokens.push(tok);
            next.push(Hyp { seq: ScoredSequence { tokens, score }, state: model.advance(&b.state, tok)? });
        }
        beams = next;
    }
    unfinished.sort_by(rank_order);
    unfinished.truncate(k);
    let shortfall = k - finished.len();
    Ok(BeamOutput { finished, unfinished, shortfall })
}

/// One decoded relation-object-box triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub relation: String,
    pub object: String,
    pub bbox: Option<BoxPixels>,
    pub score: f64,
    pub well_formed: bool,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    pub k: usize,
    /// Total length budget of the relation-object search, `[@]` included.
    pub step1_max_len: usize,
    /// Extra tokens allowed after each relation-object prefix.
    pub step2_max_len: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams { k: 3, step1_max_len: 8, step2_max_len: 6 }
    }
}

/// The decoding inputs for one query.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub image: &'a ImageTensor,
    pub subject: &'a str,
    pub subject_box: &'a BoxPixels,
}

fn parse(tok: &Tokenizer, q: &Query<'_>, tokens: Vec<TokenId>, score: f64) -> Prediction {
    let d = tok.decode_prediction(&tokens, q.image.native_width as f64, q.image.native_height as f64);
    Prediction { relation: d.relation, object: d.object, bbox: d.bbox, score, well_formed: d.well_formed, tokens }
}

fn context_of(q: &Query<'_>, image_feats: &Matrix, model: &ModelState, tok: &Tokenizer) -> Result<ContextState> {
    let (w, h) = (q.image.native_width as f64, q.image.native_height as f64);
    let input = tok.encode_input(q.subject, q.subject_box, w, h)?;
    fuse_context(image_feats, &encode_text(&input, model)?, model)
}

fn two_step_with(q: &Query<'_>, z: &ContextState, params: &DecodeParams, model: &ModelState, tok: &Tokenizer) -> Result<Vec<Prediction>> {
    let dec = StepDecoder::new(model, z)?;
    let limit = model.config().max_target_len;
    let step1 = beam_search(&dec, &[], params.k, Sentinel::At.id(), params.step1_max_len.min(limit))?;
    let mut out = Vec::with_capacity(step1.finished.len());
    for prefix in step1.finished {
        let max_len = (prefix.tokens.len() + params.step2_max_len).min(limit);
        let tokens = if max_len > prefix.tokens.len() {
            let step2 = beam_search(&dec, &prefix.tokens, 1, Sentinel::Sep.id(), max_len)?;
            step2
                .finished
                .into_iter()
                .chain(step2.unfinished)
                .next()
                .map_or_else(|| prefix.tokens.clone(), |s| s.tokens)
        } else {
            prefix.tokens.clone()
        };
        out.push(parse(tok, q, tokens, prefix.score));
    }
    Ok(out)
}

fn single_pass_with(q: &Query<'_>, z: &ContextState, params: &DecodeParams, model: &ModelState, tok: &Tokenizer) -> Result<Vec<Prediction>> {
    let dec = StepDecoder::new(model, z)?;
    let max_len = (params.step1_max_len + params.step2_max_len).min(model.config().max_target_len);
    let res = beam_search(&dec, &[], params.k, Sentinel::Sep.id(), max_len)?;
    Ok(res.finished.into_iter().map(|s| parse(tok, q, s.tokens, s.score)).collect())
}

/// `K` relation-object prefixes by beam search to `[@]`, each completed by a
/// width-1 search to `[SEP]`. Prediction scores are the prefix scores. Prefixes
/// that never reach `[SEP]` yield malformed predictions.
pub fn two_step_decode(q: &Query<'_>, params: &DecodeParams, model: &ModelState, tok: &Tokenizer) -> Result<Vec<Prediction>> {
    let z = context_of(q, &encode_image(q.image, model)?, model, tok)?;
    two_step_with(q, &z, params, model, tok)
}

/// One beam search of width `K` straight to `[SEP]`.
pub fn single_pass_decode(q: &Query<'_>, params: &DecodeParams, model: &ModelState, tok: &Tokenizer) -> Result<Vec<Prediction>> {
    let z = context_of(q, &encode_image(q.image, model)?, model, tok)?;
    single_pass_with(q, &z, params, model, tok)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    TwoStep,
    SinglePass,
}

/// Decodes every record's (image, subject, subject box) query once and returns
/// the predictions of all records sharing it, ordered by sample id then rank.
/// Images are loaded and encoded once each.
pub fn predict_records<F>(
    records: &[SampleRecord],
    model: &ModelState,
    tok: &Tokenizer,
    params: &DecodeParams,
    strategy: Strategy,
    mut load: F,
) -> Result<Vec<PredictionRecord>>
where
    F: FnMut(&ImageRef) -> Result<ImageTensor>,
{
    let mut images: HashMap<&ImageRef, (ImageTensor, Matrix)> = HashMap::new();
    let mut decoded: HashMap<(&ImageRef, String, [u64; 4]), Vec<Prediction>> = HashMap::new();
    let mut order: Vec<&SampleRecord> = records.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = Vec::with_capacity(records.len() * params.k);
    for r in order {
        let key = (&r.image, normalize_text(&r.subject), <[f64; 4]>::from(r.subject_box).map(f64::to_bits));
        if !decoded.contains_key(&key) {
            if !images.contains_key(&r.image) {
                let img = load(&r.image)?;
                let feats = encode_image(&img, model)?;
                images.insert(&r.image, (img, feats));
            }
            let (img, feats) = &images[&r.image];
            let q = Query { image: img, subject: &r.subject, subject_box: &r.subject_box };
            let z = context_of(&q, feats, model, tok)?;
            let preds = match strategy {
                Strategy::TwoStep => two_step_with(&q, &z, params, model, tok)?,
                Strategy::SinglePass => single_pass_with(&q, &z, params, model, tok)?,
            };
            decoded.insert(key.clone(), preds);
        }
        out.extend(PredictionRecord::from_predictions(&r.id, &decoded[&key]));
    }
    Ok(out)
}

/// Line-delimited prediction record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub rank: usize,
    pub relation: String,
    pub object: String,
    #[serde(rename = "box")]
    pub bbox: Option<BoxPixels>,
    pub score: f64,
    pub well_formed: bool,
}

impl PredictionRecord {
    pub fn from_predictions(sample_id: &str, preds: &[Prediction]) -> Vec<PredictionRecord> {
        preds
            .iter()
            .enumerate()
            .map(|(rank, p)| PredictionRecord {
                sample_id: sample_id.to_string(),
                rank,
                relation: p.relation.clone(),
                object: p.object.clone(),
                bbox: p.bbox,
                score: p.score,
                well_formed: p.well_formed,
            })
            .collect()
    }
}

pub fn write_prediction_records<W: Write>(mut w: W, records: &[PredictionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_prediction_records<R: BufRead>(r: R) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| crate::Error::Parse(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}
