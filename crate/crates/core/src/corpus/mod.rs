//! Records, caption-to-triplet extraction, benchmark splits and synthetic scenes.

mod images;
mod lexicon;
mod record;
mod splits;
mod synthetic;

pub use images::ImageStore;
pub use lexicon::{extract_triplets, Lexicon};
pub use record::{
    load_jsonl, load_records, normalize_text, read_jsonl, rel_obj, save_jsonl, write_jsonl, CaptionRecord,
    GroundTruthIndex, ImageKind, ImageRef, RelObj, SampleRecord, SubjectGrounding, Triplet,
};
pub use splits::{
    audit_splits, build_pair_statistics, build_splits, candidate_pairs, caption_samples, partition_rel_obj_sets, BenchmarkSplits, SplitAudit, SplitSpec,
};
pub use synthetic::{
    generate_synthetic_dataset, spatial_relation, synthetic_lexicon, write_ppm, write_synthetic_dataset, ManifestEntry,
    Scene, SceneObject, SyntheticDataset, SyntheticSpec, RELATIONS,
};
