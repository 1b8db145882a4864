//! Recall@K with relation-object text matching and IoU-gated object localization.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_text, SampleRecord};
use crate::decoding::PredictionRecord;
use crate::error::{validation, Error, Result};
use crate::geometry::BoxPixels;

/// Intersection over union; 0 when the boxes only touch.
pub fn iou(a: &BoxPixels, b: &BoxPixels) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Equivalence groups of terms, closed symmetrically.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymMap {
    map: BTreeMap<String, BTreeSet<String>>,
}

impl SynonymMap {
    pub fn from_groups<G, S>(groups: G) -> Self
    where
        G: IntoIterator,
        G::Item: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut map: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for g in groups {
            let terms: Vec<String> = g.into_iter().map(|t| normalize_text(t.as_ref())).filter(|t| !t.is_empty()).collect();
            for a in &terms {
                for b in &terms {
                    map.entry(a.clone()).or_default().insert(b.clone());
                    map.entry(b.clone()).or_default().insert(a.clone());
                }
            }
        }
        SynonymMap { map }
    }

    /// One comma-separated group per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Self {
        SynonymMap::from_groups(
            text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(|l| l.split(',')),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(SynonymMap::parse(&std::fs::read_to_string(path)?))
    }

    /// Every term is its own synonym.
    pub fn are_synonyms(&self, a: &str, b: &str) -> bool {
        let (a, b) = (normalize_text(a), normalize_text(b));
        a == b || self.map.get(&a).is_some_and(|s| s.contains(&b))
    }
}

/// Relations must match exactly after normalization; objects may match through synonyms.
pub fn match_rel_obj(pred: (&str, &str), gt: (&str, &str), syn: &SynonymMap) -> bool {
    normalize_text(pred.0) == normalize_text(gt.0) && syn.are_synonyms(pred.1, gt.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub split: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub iou_threshold: f64,
    pub rel_object_recall: f64,
    pub object_loc_recall: f64,
    pub n: usize,
}

/// Positive counts for one relation-object pair at one (K, threshold).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub split: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub iou_threshold: f64,
    pub relation: String,
    pub object: String,
    pub text_positives: usize,
    pub box_positives: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub pairs: Vec<PairRow>,
}

impl EvalReport {
    pub fn row(&self, split: &str, k: usize, thr: f64) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.split == split && r.k == k && r.iou_threshold == thr)
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.pairs.extend(other.pairs);
    }
}

/// Groups prediction records by sample id, each list in rank order.
pub fn group_predictions(records: &[PredictionRecord]) -> HashMap<String, Vec<PredictionRecord>> {
    let mut out: HashMap<String, Vec<PredictionRecord>> = HashMap::new();
    for r in records {
        out.entry(r.sample_id.clone()).or_default().push(r.clone());
    }
    for v in out.values_mut() {
        v.sort_by_key(|r| r.rank);
    }
    out
}

/// Prediction ids with no ground-truth sample, sorted.
pub fn unmatched_ids(predictions: &HashMap<String, Vec<PredictionRecord>>, gt: &[SampleRecord]) -> Vec<String> {
    let ids: BTreeSet<&str> = gt.iter().map(|r| r.id.as_str()).collect();
    let mut out: Vec<String> = predictions.keys().filter(|k| !ids.contains(k.as_str())).cloned().collect();
    out.sort();
    out
}

/// Per-sample Recall@K for every (K, threshold). A sample is text-positive when any
/// of its top-K predictions matches the ground-truth pair, and box-positive when
/// such a matching prediction also has a well-formed box with IoU at or above the
/// threshold. Repeated predictions are not deduplicated; samples without
/// predictions count as negatives.
pub fn evaluate_recall(
    split: &str,
    predictions: &HashMap<String, Vec<PredictionRecord>>,
    gt: &[SampleRecord],
    ks: &[usize],
    thresholds: &[f64],
    syn: &SynonymMap,
) -> Result<EvalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(validation("K list must be non-empty and positive"));
    }
    if thresholds.is_empty() || thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(validation("IoU thresholds must lie in (0, 1]"));
    }
    let (nk, nt) = (ks.len(), thresholds.len());
    let mut text = vec![0usize; nk];
    let mut boxed = vec![0usize; nk * nt];
    // pair -> (n, text per K, box per (K, threshold))
    let mut per_pair: BTreeMap<(String, String), (usize, Vec<usize>, Vec<usize>)> = BTreeMap::new();
    let mut missing = 0usize;
    let empty = Vec::new();
    for g in gt {
        let gt_box = g.object_box.ok_or_else(|| validation(format!("ground-truth record {} has no object box", g.id)))?;
        let preds = predictions.get(&g.id).unwrap_or_else(|| {
            missing += 1;
            &empty
        });
        // Rank of the first text match and best IoU among matches within each prefix.
        let mut first_match = None;
        let mut best_iou_upto = Vec::with_capacity(preds.len());
        let mut best = f64::NEG_INFINITY;
        for (i, p) in preds.iter().enumerate() {
            if match_rel_obj((&p.relation, &p.object), (&g.relation, &g.object), syn) {
                first_match.get_or_insert(i);
                if let (true, Some(b)) = (p.well_formed, &p.bbox) {
                    best = best.max(iou(b, &gt_box));
                }
            }
            best_iou_upto.push(best);
        }
        let entry = per_pair.entry(g.pair()).or_insert_with(|| (0, vec![0; nk], vec![0; nk * nt]));
        entry.0 += 1;
        for (ki, &k) in ks.iter().enumerate() {
            if first_match.is_some_and(|m| m < k) {
                text[ki] += 1;
                entry.1[ki] += 1;
            }
            let best = best_iou_upto.get(k.min(preds.len()).wrapping_sub(1)).copied().unwrap_or(f64::NEG_INFINITY);
            for (ti, &thr) in thresholds.iter().enumerate() {
                if best >= thr {
                    boxed[ki * nt + ti] += 1;
                    entry.2[ki * nt + ti] += 1;
                }
            }
        }
    }
    if missing > 0 {
        log::warn!("{missing} ground-truth samples in {split} have no predictions; counted as negatives");
    }
    let n = gt.len();
    let ratio = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    let mut report = EvalReport::default();
    for (ki, &k) in ks.iter().enumerate() {
        for (ti, &thr) in thresholds.iter().enumerate() {
            report.rows.push(EvalRow {
                split: split.to_string(),
                k,
                iou_threshold: thr,
                rel_object_recall: ratio(text[ki]),
                object_loc_recall: ratio(boxed[ki * nt + ti]),
                n,
            });
            for ((rel, obj), (pn, pt, pb)) in &per_pair {
                report.pairs.push(PairRow {
                    split: split.to_string(),
                    k,
                    iou_threshold: thr,
                    relation: rel.clone(),
                    object: obj.clone(),
                    text_positives: pt[ki],
                    box_positives: pb[ki * nt + ti],
                    n: *pn,
                });
            }
        }
    }
    Ok(report)
}

/// Column-aligned text table, one line per row.
pub fn format_table(report: &EvalReport) -> String {
    let header = ["split", "K", "IoU", "Rel-Object", "Object-Loc", "n"].map(String::from);
    let mut cells: Vec<[String; 6]> = vec![header];
    for r in &report.rows {
        cells.push([
            r.split.clone(),
            r.k.to_string(),
            format!("{:.2}", r.iou_threshold),
            format!("{:.2}", 100.0 * r.rel_object_recall),
            format!("{:.2}", 100.0 * r.object_loc_recall),
            r.n.to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..6).map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Writes the text table to `table` and one JSON object per row to `rows`.
pub fn write_report<T: Write, R: Write>(report: &EvalReport, mut table: T, mut rows: R) -> Result<()> {
    table.write_all(format_table(report).as_bytes())?;
    for r in &report.rows {
        serde_json::to_writer(&mut rows, r)?;
        rows.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_report_rows<R: BufRead>(r: R) -> Result<Vec<EvalRow>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?);
        }
    }
    Ok(out)
}
