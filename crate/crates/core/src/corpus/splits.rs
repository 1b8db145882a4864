//! Frequency statistics of relation-object pairs and benchmark split construction.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, validation, Result};

use super::lexicon::{extract_triplets, Lexicon};
use super::record::{rel_obj, CaptionRecord, RelObj, SampleRecord, Triplet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub min_count: usize,
    pub max_count: usize,
    /// Share of each Set-A pair's grounded samples removed from the base split.
    pub removal_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { min_count: 1, max_count: usize::MAX, removal_fraction: 0.5, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_count > self.max_count {
            return Err(config(format!("min_count {} exceeds max_count {}", self.min_count, self.max_count)));
        }
        if !(0.0..=1.0).contains(&self.removal_fraction) {
            return Err(config(format!("removal_fraction {} outside [0, 1]", self.removal_fraction)));
        }
        Ok(())
    }

    /// Number of samples removed from a Set-A pair with `n` grounded samples. Rounds
    /// down, so `ceil((1 - fraction) * n)` samples are retained.
    pub fn removal_count(&self, n: usize) -> usize {
        ((self.removal_fraction * n as f64).floor() as usize).min(n)
    }
}

/// Triplets extracted from every caption, plus the ungrounded samples of those
/// whose subject has a supplied box.
pub fn caption_samples(captions: &[CaptionRecord], lex: &Lexicon) -> (Vec<Triplet>, Vec<SampleRecord>) {
    let mut triplets = Vec::new();
    let mut samples = Vec::new();
    for c in captions {
        let t = extract_triplets(&c.caption, lex);
        samples.extend(c.ungrounded_samples(&t));
        triplets.extend(t);
    }
    (triplets, samples)
}

/// Window-filtered pairs that also occur in the test pool.
pub fn candidate_pairs(stats: &BTreeMap<RelObj, usize>, test_pool: &[SampleRecord]) -> BTreeSet<RelObj> {
    let in_test: BTreeSet<RelObj> = test_pool.iter().map(SampleRecord::pair).collect();
    stats.keys().filter(|p| in_test.contains(*p)).cloned().collect()
}

/// Counts every (relation, object) pair over records and extracted triplets and
/// keeps those with `min <= count <= max`.
pub fn build_pair_statistics(
    records: &[SampleRecord],
    triplets: &[Triplet],
    min: usize,
    max: usize,
) -> Result<BTreeMap<RelObj, usize>> {
    if min > max {
        return Err(config(format!("frequency window [{min}, {max}] is empty")));
    }
    let mut counts: BTreeMap<RelObj, usize> = BTreeMap::new();
    for p in records.iter().map(SampleRecord::pair).chain(triplets.iter().map(|t| rel_obj(&t.relation, &t.object))) {
        *counts.entry(p).or_default() += 1;
    }
    counts.retain(|_, c| (min..=max).contains(c));
    Ok(counts)
}

/// Seeded shuffle then an even split; with an odd count Set A takes the extra pair.
pub fn partition_rel_obj_sets(pairs: &BTreeSet<RelObj>, seed: u64) -> Result<(BTreeSet<RelObj>, BTreeSet<RelObj>)> {
    if pairs.len() < 2 {
        return Err(validation(format!("need at least 2 relation-object pairs to partition, got {}", pairs.len())));
    }
    let mut v: Vec<RelObj> = pairs.iter().cloned().collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let b = v.split_off(v.len().div_ceil(2));
    Ok((v.into_iter().collect(), b.into_iter().collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSplits {
    pub set_a: BTreeSet<RelObj>,
    pub set_b: BTreeSet<RelObj>,
    pub base_train: Vec<SampleRecord>,
    pub text_aug_train: Vec<SampleRecord>,
    pub test_a: Vec<SampleRecord>,
    pub test_b: Vec<SampleRecord>,
    pub full_test: Vec<SampleRecord>,
}

fn sorted_by_id(recs: &[SampleRecord]) -> Vec<SampleRecord> {
    let mut v = recs.to_vec();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

/// Base split: grounded records minus a seeded `floor(fraction * n)` of every Set-A
/// pair and minus every Set-B record. Text-augmented split: base plus the ungrounded
/// records whose pair is in A or B. Test splits filter `test_pool` by pair.
pub fn build_splits(
    grounded: &[SampleRecord],
    ungrounded: &[SampleRecord],
    spec: &SplitSpec,
    set_a: &BTreeSet<RelObj>,
    set_b: &BTreeSet<RelObj>,
    test_pool: &[SampleRecord],
) -> Result<BenchmarkSplits> {
    spec.validate()?;
    if let Some(p) = set_a.intersection(set_b).next() {
        return Err(validation(format!("pair {p:?} is in both Set A and Set B")));
    }
    if let Some(r) = grounded.iter().chain(test_pool).find(|r| !r.grounded) {
        return Err(validation(format!("record {} is expected to be grounded", r.id)));
    }
    if let Some(r) = ungrounded.iter().find(|r| r.grounded) {
        return Err(validation(format!("record {} is expected to be ungrounded", r.id)));
    }
    let grounded = sorted_by_id(grounded);
    let mut by_pair: BTreeMap<RelObj, Vec<usize>> = BTreeMap::new();
    for (i, r) in grounded.iter().enumerate() {
        let p = r.pair();
        if set_a.contains(&p) {
            by_pair.entry(p).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut removed = vec![false; grounded.len()];
    for idx in by_pair.values() {
        let k = spec.removal_count(idx.len());
        for &i in idx.choose_multiple(&mut rng, k) {
            removed[i] = true;
        }
    }
    let base_train: Vec<SampleRecord> = grounded
        .iter()
        .zip(&removed)
        .filter(|(r, gone)| !**gone && !set_b.contains(&r.pair()))
        .map(|(r, _)| r.clone())
        .collect();
    let mut text_aug_train = base_train.clone();
    text_aug_train.extend(sorted_by_id(ungrounded).into_iter().filter(|r| {
        let p = r.pair();
        set_a.contains(&p) || set_b.contains(&p)
    }));

    let full_test = sorted_by_id(test_pool);
    let test_a: Vec<SampleRecord> = full_test.iter().filter(|r| set_a.contains(&r.pair())).cloned().collect();
    let test_b: Vec<SampleRecord> = full_test.iter().filter(|r| set_b.contains(&r.pair())).cloned().collect();

    let text_pairs: BTreeSet<RelObj> = ungrounded.iter().map(SampleRecord::pair).collect();
    for p in test_b.iter().map(SampleRecord::pair).collect::<BTreeSet<_>>() {
        if !text_pairs.contains(&p) {
            log::warn!("Set-B pair ({}, {}) has test samples but no ungrounded samples", p.0, p.1);
        }
    }
    Ok(BenchmarkSplits {
        set_a: set_a.clone(),
        set_b: set_b.clone(),
        base_train,
        text_aug_train,
        test_a,
        test_b,
        full_test,
    })
}

/// Per-pair retained counts in the base split versus the grounded input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitAudit {
    pub set_a_retained: BTreeMap<String, (usize, usize)>,
    pub set_b_in_base: usize,
    pub text_aug_extra: usize,
}

/// Recounts a built split from scratch and checks every set-algebra rule.
pub fn audit_splits(
    splits: &BenchmarkSplits,
    grounded: &[SampleRecord],
    ungrounded: &[SampleRecord],
    spec: &SplitSpec,
) -> Result<SplitAudit> {
    let fail = |m: String| Err(validation(format!("split audit: {m}")));
    if !splits.set_a.is_disjoint(&splits.set_b) {
        return fail("Set A and Set B overlap".into());
    }
    let mut total: BTreeMap<&RelObj, usize> = BTreeMap::new();
    for r in grounded {
        let p = r.pair();
        if let Some(k) = splits.set_a.get(&p) {
            *total.entry(k).or_default() += 1;
        }
    }
    let mut set_a_retained = BTreeMap::new();
    for (p, n) in total {
        let kept = splits.base_train.iter().filter(|r| r.pair() == *p).count();
        if kept != n - spec.removal_count(n) {
            return fail(format!("pair ({}, {}) kept {kept} of {n}", p.0, p.1));
        }
        set_a_retained.insert(format!("{} {}", p.0, p.1), (kept, n));
    }
    let set_b_in_base = splits.base_train.iter().filter(|r| splits.set_b.contains(&r.pair())).count();
    if set_b_in_base != 0 {
        return fail(format!("{set_b_in_base} Set-B samples in the base split"));
    }
    let grounded_ids: BTreeSet<&str> = grounded.iter().map(|r| r.id.as_str()).collect();
    if splits.base_train.iter().any(|r| !grounded_ids.contains(r.id.as_str())) {
        return fail("base split holds a record not in the grounded input".into());
    }
    let base_ids: BTreeSet<&str> = splits.base_train.iter().map(|r| r.id.as_str()).collect();
    let aug_ids: BTreeSet<&str> = splits.text_aug_train.iter().map(|r| r.id.as_str()).collect();
    if !base_ids.is_subset(&aug_ids) {
        return fail("text-augmented split does not contain the base split".into());
    }
    let extra: Vec<&SampleRecord> = splits.text_aug_train.iter().filter(|r| !base_ids.contains(r.id.as_str())).collect();
    for r in &extra {
        let p = r.pair();
        if r.grounded || !(splits.set_a.contains(&p) || splits.set_b.contains(&p)) {
            return fail(format!("unexpected extra record {}", r.id));
        }
    }
    let expected_extra = ungrounded
        .iter()
        .filter(|r| {
            let p = r.pair();
            splits.set_a.contains(&p) || splits.set_b.contains(&p)
        })
        .count();
    if extra.len() != expected_extra {
        return fail(format!("{} extra records, expected {expected_extra}", extra.len()));
    }
    if splits.test_a.iter().any(|r| !splits.set_a.contains(&r.pair()))
        || splits.test_b.iter().any(|r| !splits.set_b.contains(&r.pair()))
    {
        return fail("test split holds a pair outside its set".into());
    }
    Ok(SplitAudit { set_a_retained, set_b_in_base, text_aug_extra: extra.len() })
}
