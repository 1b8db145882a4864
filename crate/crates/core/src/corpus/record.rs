use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::geometry::BoxPixels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    File,
    Synthetic,
}

/// Where a sample's pixels live. `ref` is a path for `file` images and a scene
/// name for `synthetic` ones.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub kind: ImageKind,
    #[serde(rename = "ref")]
    pub reference: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: ImageRef,
    pub subject: String,
    pub subject_box: BoxPixels,
    pub relation: String,
    pub object: String,
    pub object_box: Option<BoxPixels>,
    pub grounded: bool,
    pub source: String,
}

/// Lowercases and collapses whitespace.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// A normalized (relation, object) pair.
pub type RelObj = (String, String);

pub fn rel_obj(relation: &str, object: &str) -> RelObj {
    (normalize_text(relation), normalize_text(object))
}

impl SampleRecord {
    pub fn pair(&self) -> RelObj {
        rel_obj(&self.relation, &self.object)
    }

    /// Checks the grounded flag and both boxes against the stated image size.
    pub fn validate(&self) -> Result<()> {
        let ctx = |e: Error| validation(format!("record {}: {e}", self.id));
        if self.grounded != self.object_box.is_some() {
            return Err(validation(format!("record {}: grounded flag disagrees with object box", self.id)));
        }
        let (w, h) = (self.image.width as f64, self.image.height as f64);
        self.subject_box.validate(w, h).map_err(ctx)?;
        if let Some(b) = &self.object_box {
            b.validate(w, h).map_err(ctx)?;
        }
        if normalize_text(&self.subject).is_empty() || self.pair().0.is_empty() || self.pair().1.is_empty() {
            return Err(validation(format!("record {}: empty subject, relation or object", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

/// A subject phrase with its box, supplied alongside a caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectGrounding {
    pub phrase: String,
    #[serde(rename = "box")]
    pub bbox: BoxPixels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub image: ImageRef,
    pub caption: String,
    pub subjects: Vec<SubjectGrounding>,
}

impl CaptionRecord {
    /// Ungrounded samples for the triplets whose subject has a supplied box.
    /// Triplets with an unknown subject are skipped.
    pub fn ungrounded_samples(&self, triplets: &[Triplet]) -> Vec<SampleRecord> {
        let boxes: BTreeMap<String, BoxPixels> =
            self.subjects.iter().map(|s| (normalize_text(&s.phrase), s.bbox)).collect();
        triplets
            .iter()
            .enumerate()
            .filter_map(|(i, t)| {
                let b = boxes.get(&normalize_text(&t.subject))?;
                Some(SampleRecord {
                    id: format!("{}#{i}", self.id),
                    image: self.image.clone(),
                    subject: t.subject.clone(),
                    subject_box: *b,
                    relation: t.relation.clone(),
                    object: t.object.clone(),
                    object_box: None,
                    grounded: false,
                    source: "caption".into(),
                })
            })
            .collect()
    }
}

/// Grounded records keyed by image reference.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthIndex {
    by_image: BTreeMap<String, Vec<SampleRecord>>,
}

impl GroundTruthIndex {
    pub fn new(records: impl IntoIterator<Item = SampleRecord>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        let mut by_image: BTreeMap<String, Vec<SampleRecord>> = BTreeMap::new();
        for r in records {
            if !r.grounded {
                return Err(validation(format!("record {} is not grounded", r.id)));
            }
            if !ids.insert(r.id.clone()) {
                return Err(validation(format!("duplicate record id {}", r.id)));
            }
            by_image.entry(r.image.reference.clone()).or_default().push(r);
        }
        Ok(GroundTruthIndex { by_image })
    }

    pub fn for_image(&self, image: &str) -> &[SampleRecord] {
        self.by_image.get(image).map_or(&[], Vec::as_slice)
    }

    pub fn images(&self) -> impl Iterator<Item = &str> {
        self.by_image.keys().map(String::as_str)
    }

    pub fn records(&self) -> impl Iterator<Item = &SampleRecord> {
        self.by_image.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.by_image.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_image.is_empty()
    }
}

pub fn write_jsonl<T: Serialize, W: Write>(mut w: W, items: &[T]) -> Result<()> {
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(r: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn save_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_jsonl(std::io::BufWriter::new(std::fs::File::create(path)?), items)
}

pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read_jsonl(std::io::BufReader::new(f)).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads sample records and validates each one.
pub fn load_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let recs: Vec<SampleRecord> = load_jsonl(path)?;
    recs.iter().try_for_each(SampleRecord::validate)?;
    Ok(recs)
}
