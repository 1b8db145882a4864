use std::collections::HashMap;

use crate::autodiff::{Gradients, Var};
use crate::error::{validation, Error, Result};
use crate::vocab::SequenceExample;

use super::{Forward, ImageTensor, ModelState};

/// Mean cross-entropy over supervised target positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub supervised_positions: usize,
    /// Set when the batch had no supervised position; `value` is then 0.
    pub empty_batch: bool,
}

/// Records the loss graph on `f`. Identical images (by address) and identical
/// (image, input) pairs are encoded once and shared across the batch.
pub(crate) fn loss_graph(
    f: &mut Forward<'_>,
    batch: &[(&ImageTensor, &SequenceExample)],
) -> Result<Option<(Var, usize)>> {
    if batch.is_empty() {
        return Err(validation("empty batch"));
    }
    let mut image_feats: HashMap<*const ImageTensor, Var> = HashMap::new();
    let mut contexts: HashMap<(*const ImageTensor, &[u32]), Var> = HashMap::new();
    let mut terms = Vec::with_capacity(batch.len());
    let mut count = 0usize;
    for (img, ex) in batch {
        if ex.target_ids.len() != ex.loss_mask.len() || ex.target_ids.is_empty() {
            return Err(validation("target and mask lengths differ"));
        }
        let n = ex.supervised_positions();
        if n == 0 {
            continue;
        }
        let key = *img as *const ImageTensor;
        let z = match contexts.get(&(key, ex.input_ids.as_slice())) {
            Some(z) => *z,
            None => {
                let iv = match image_feats.get(&key) {
                    Some(v) => *v,
                    None => {
                        let v = f.image(img)?;
                        image_feats.insert(key, v);
                        v
                    }
                };
                let tv = f.text(&ex.input_ids)?;
                let z = f.fuse(iv, tv)?;
                contexts.insert((key, ex.input_ids.as_slice()), z);
                z
            }
        };
        let prefix = &ex.target_ids[..ex.target_ids.len() - 1];
        let logits = f.decoder_logits(z, prefix)?;
        let targets = ex
            .target_ids
            .iter()
            .zip(&ex.loss_mask)
            .map(|(&t, &m)| m.then_some(t as usize))
            .collect();
        terms.push(f.tape.cross_entropy(logits, targets));
        count += n;
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let total = f.tape.sum(terms);
    Ok(Some((f.tape.scale(total, 1.0 / count as f64), count)))
}

pub fn compute_loss(batch: &[(&ImageTensor, &SequenceExample)], m: &ModelState) -> Result<LossReport> {
    let mut f = Forward::new(m);
    match loss_graph(&mut f, batch)? {
        None => {
            log::warn!("batch has no supervised target positions");
            Ok(LossReport { value: 0.0, supervised_positions: 0, empty_batch: true })
        }
        Some((root, count)) => {
            Ok(LossReport { value: f.tape.value(root).data[0], supervised_positions: count, empty_batch: false })
        }
    }
}

/// Exact reverse-mode gradients of [`compute_loss`] for every parameter.
pub fn compute_gradients(batch: &[(&ImageTensor, &SequenceExample)], m: &ModelState) -> Result<(LossReport, Gradients)> {
    let mut f = Forward::new(m);
    match loss_graph(&mut f, batch)? {
        None => Ok((LossReport { value: 0.0, supervised_positions: 0, empty_batch: true }, m.params().zeros_like())),
        Some((root, count)) => {
            let value = f.tape.value(root).data[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {value}")));
            }
            let g = f.tape.backward(root);
            Ok((LossReport { value, supervised_positions: count, empty_batch: false }, g))
        }
    }
}
