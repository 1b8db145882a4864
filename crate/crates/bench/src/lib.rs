//! Shared fixtures for the benchmarks: a small synthetic dataset, its tokenizer and
//! an untrained model sized like the CLI default.

use reldet::corpus::{generate_synthetic_dataset, SampleRecord, SyntheticDataset, SyntheticSpec};
use reldet::decoding::PredictionRecord;
use reldet::model::{init_parameters, ImageTensor, ModelConfig, ModelState};
use reldet::Tokenizer;

pub use reldet;

pub struct Fixture {
    pub data: SyntheticDataset,
    pub tok: Tokenizer,
    pub model: ModelState,
}

impl Fixture {
    pub fn new(num_positions: usize) -> Self {
        let spec = SyntheticSpec { num_scenes: 40, num_test_scenes: 20, seed: 11, ..Default::default() };
        let data = generate_synthetic_dataset(&spec).expect("synthetic data");
        let tok = Tokenizer::from_records(&data.grounded, &[], num_positions).expect("tokenizer");
        let mut cfg = ModelConfig::tiny(tok.vocab().len(), num_positions);
        cfg.image_side = spec.canvas as usize;
        let model = init_parameters(&cfg).expect("model");
        Fixture { data, tok, model }
    }

    pub fn image(&self, r: &SampleRecord) -> ImageTensor {
        self.data.image_tensor(&r.image, self.model.config().image_side).expect("image")
    }
}

/// `n` predictions per record of `gt`, perturbed so that a share of them match.
pub fn predictions_for(gt: &[SampleRecord], n: usize) -> Vec<PredictionRecord> {
    let mut out = Vec::with_capacity(gt.len() * n);
    for (i, r) in gt.iter().enumerate() {
        for rank in 0..n {
            let shift = ((i + rank) % 7) as f64;
            let b = r.object_box.map(|b| reldet::BoxPixels::new(b.x1 + shift, b.y1, b.x2 + shift, b.y2));
            out.push(PredictionRecord {
                sample_id: r.id.clone(),
                rank,
                relation: if rank % 2 == 0 { r.relation.clone() } else { "below".into() },
                object: r.object.clone(),
                bbox: b,
                score: -(rank as f64),
                well_formed: b.is_some(),
            });
        }
    }
    out
}
