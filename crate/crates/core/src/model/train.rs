use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::corpus::{ImageRef, SampleRecord};
use crate::error::{validation, Error, Result};
use crate::tensor::Matrix;
use crate::vocab::{SequenceExample, Tokenizer};

use super::loss::compute_gradients;
use super::{init_parameters, ImageTensor, ModelConfig, ModelState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Target number of samples per update. Samples of one image are never split
    /// across batches, so each image is encoded once per update.
    pub batch_size: usize,
    pub seed: u64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
    /// Linear warmup length in optimizer steps.
    pub warmup_steps: usize,
    /// Cosine-anneal the learning rate to zero over the run.
    pub cosine_decay: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            clip_norm: Some(1.0),
            warmup_steps: 0,
            cosine_decay: false,
        }
    }
}

/// Images plus encoded samples referring to them by index.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub images: Vec<ImageTensor>,
    pub examples: Vec<(usize, SequenceExample)>,
}

impl TrainingSet {
    /// Encodes `records`, loading each distinct image once through `load`.
    pub fn from_records<F>(records: &[SampleRecord], tok: &Tokenizer, mut load: F) -> Result<Self>
    where
        F: FnMut(&ImageRef) -> Result<ImageTensor>,
    {
        let mut set = TrainingSet::default();
        let mut index: HashMap<&ImageRef, usize> = HashMap::new();
        for r in records {
            let img = match index.get(&r.image) {
                Some(&i) => i,
                None => {
                    set.images.push(load(&r.image)?);
                    index.insert(&r.image, set.images.len() - 1);
                    set.images.len() - 1
                }
            };
            set.examples.push((img, tok.encode_record(r)?));
        }
        Ok(set)
    }

    /// Sample indices grouped by image, in first-appearance order.
    fn image_groups(&self) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); self.images.len()];
        for (i, (img, _)) in self.examples.iter().enumerate() {
            groups[*img].push(i);
        }
        groups.retain(|g| !g.is_empty());
        groups
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelState,
    /// Mean supervised-token loss per epoch, measured before each update.
    pub loss_history: Vec<f64>,
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    fn new(model: &ModelState) -> Self {
        let z = model.params().zeros_like().tensors;
        Adam { m: z.clone(), v: z, t: 0 }
    }

    fn step(&mut self, model: &mut ModelState, grads: &Gradients, lr: f64, hp: &TrainParams) {
        self.t += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.t);
        let bc2 = 1.0 - hp.beta2.powi(self.t);
        for (i, p) in model.params_mut().tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i].data, &mut self.v[i].data, &grads.tensors[i].data);
            for j in 0..p.data.len() {
                m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
                v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.data[j] -= lr * mhat / (vhat.sqrt() + hp.eps);
            }
        }
    }
}

fn learning_rate(hp: &TrainParams, step: usize, total: usize) -> f64 {
    let warm = if hp.warmup_steps > 0 && step < hp.warmup_steps {
        (step + 1) as f64 / hp.warmup_steps as f64
    } else {
        1.0
    };
    let decay = if hp.cosine_decay && total > 0 {
        0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
    } else {
        1.0
    };
    hp.lr * warm * decay
}

/// Initializes from `config` and trains.
pub fn train(data: &TrainingSet, config: &ModelConfig, hp: &TrainParams) -> Result<TrainOutcome> {
    train_from(init_parameters(config)?, data, hp)
}

/// Adam training from an existing state with seeded per-epoch shuffling.
pub fn train_from(mut model: ModelState, data: &TrainingSet, hp: &TrainParams) -> Result<TrainOutcome> {
    if data.examples.is_empty() {
        return Err(validation("training set is empty"));
    }
    if hp.batch_size == 0 {
        return Err(validation("batch_size must be positive"));
    }
    if let Some((i, _)) = data.examples.iter().find(|(i, _)| *i >= data.images.len()) {
        return Err(validation(format!("sample refers to missing image {i}")));
    }
    let mut groups = data.image_groups();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut adam = Adam::new(&model);
    let mut history = Vec::with_capacity(hp.epochs);
    let steps_per_epoch = {
        let mut n = 0;
        let mut acc = 0;
        for q in &groups {
            acc += q.len();
            if acc >= hp.batch_size {
                n += 1;
                acc = 0;
            }
        }
        n + usize::from(acc > 0)
    };
    let total_steps = steps_per_epoch * hp.epochs;
    let mut step = 0usize;

    for epoch in 0..hp.epochs {
        groups.shuffle(&mut rng);
        let mut weighted = 0.0;
        let mut tokens = 0usize;
        let mut batch: Vec<usize> = Vec::with_capacity(hp.batch_size * 2);
        let mut qi = 0;
        while qi < groups.len() {
            batch.clear();
            while qi < groups.len() && batch.len() < hp.batch_size {
                batch.extend(&groups[qi]);
                qi += 1;
            }
            let items: Vec<(&ImageTensor, &SequenceExample)> =
                batch.iter().map(|&i| (&data.images[data.examples[i].0], &data.examples[i].1)).collect();
            let (report, mut grads) = compute_gradients(&items, &model).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("training diverged at epoch {epoch}, step {step}: {msg}")),
                other => other,
            })?;
            if report.empty_batch {
                continue;
            }
            if let Some(clip) = hp.clip_norm {
                let norm = grads.global_norm();
                if norm > clip {
                    let s = clip / norm;
                    grads.tensors.iter_mut().flat_map(|t| t.data.iter_mut()).for_each(|g| *g *= s);
                }
            }
            adam.step(&mut model, &grads, learning_rate(hp, step, total_steps), hp);
            step += 1;
            weighted += report.value * report.supervised_positions as f64;
            tokens += report.supervised_positions;
        }
        let epoch_loss = if tokens > 0 { weighted / tokens as f64 } else { 0.0 };
        if !epoch_loss.is_finite() || !model.all_finite() {
            return Err(Error::Numeric(format!("training diverged at epoch {epoch}: loss {epoch_loss}")));
        }
        log::info!("epoch {epoch}: loss {epoch_loss:.5}");
        history.push(epoch_loss);
    }
    Ok(TrainOutcome { model, loss_history: history })
}
