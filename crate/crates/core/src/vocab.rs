//! Token vocabulary, box-coordinate discretization, and the mapping between
//! structured samples and token sequences.
//!
//! Id layout: the seven sentinels first, then the sorted text terms, then the
//! `P` position tokens `[pos_0] .. [pos_{P-1}]`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::{SampleRecord, Triplet};
use crate::error::{config, validation, Error, Result};
use crate::geometry::BoxPixels;

pub type TokenId = u32;

/// Reserved tokens. The discriminant is the token id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Sentinel {
    Sub = 0,
    BoxOpen = 1,
    BoxClose = 2,
    At = 3,
    Sep = 4,
    Pad = 5,
    Unk = 6,
}

impl Sentinel {
    pub const ALL: [Sentinel; 7] = [
        Sentinel::Sub,
        Sentinel::BoxOpen,
        Sentinel::BoxClose,
        Sentinel::At,
        Sentinel::Sep,
        Sentinel::Pad,
        Sentinel::Unk,
    ];

    pub const COUNT: usize = 7;

    pub const fn id(self) -> TokenId {
        self as TokenId
    }

    pub const fn surface(self) -> &'static str {
        match self {
            Sentinel::Sub => "[SUB]",
            Sentinel::BoxOpen => "[BOX]",
            Sentinel::BoxClose => "[/BOX]",
            Sentinel::At => "[@]",
            Sentinel::Sep => "[SEP]",
            Sentinel::Pad => "[PAD]",
            Sentinel::Unk => "[UNK]",
        }
    }
}

fn position_surface(bin: usize) -> String {
    format!("[pos_{bin}]")
}

/// Quantized box: four bins in `[0, P-1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoxBins {
    pub bx1: u32,
    pub by1: u32,
    pub bx2: u32,
    pub by2: u32,
}

impl BoxBins {
    pub fn as_array(&self) -> [u32; 4] {
        [self.bx1, self.by1, self.bx2, self.by2]
    }
}

/// Closed word-level vocabulary with position tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, TokenId>,
    num_positions: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from arbitrary phrases; each phrase is split on whitespace
    /// and lowercased. Terms are sorted so input order never matters.
    pub fn from_phrases<'a, I>(phrases: I, num_positions: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if num_positions < 2 {
            return Err(config(format!("need at least 2 position tokens, got {num_positions}")));
        }
        let words: BTreeSet<String> = phrases.into_iter().flat_map(split_words).collect();
        if words.is_empty() {
            return Err(validation("vocabulary needs at least one text term"));
        }
        Self::from_sorted_terms(words.into_iter().collect(), num_positions)
    }

    fn from_sorted_terms(terms: Vec<String>, num_positions: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(terms.len());
        for (i, t) in terms.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) || t.starts_with('[') {
                return Err(validation(format!("invalid vocabulary term {t:?}")));
            }
            if index.insert(t.clone(), (Sentinel::COUNT + i) as TokenId).is_some() {
                return Err(validation(format!("duplicate vocabulary term {t:?}")));
            }
        }
        Ok(Vocabulary { terms, index, num_positions })
    }

    pub fn len(&self) -> usize {
        Sentinel::COUNT + self.terms.len() + self.num_positions
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_positions(&self) -> usize {
        self.num_positions
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    /// First position-token id.
    pub fn position_offset(&self) -> TokenId {
        (Sentinel::COUNT + self.terms.len()) as TokenId
    }

    /// Id of a word, `[UNK]` when out of vocabulary.
    pub fn word_id(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(Sentinel::Unk.id())
    }

    pub fn position_id(&self, bin: u32) -> TokenId {
        debug_assert!((bin as usize) < self.num_positions);
        self.position_offset() + bin
    }

    /// Bin of a position token, `None` for any other id.
    pub fn bin_of(&self, id: TokenId) -> Option<u32> {
        let off = self.position_offset();
        (id >= off && ((id - off) as usize) < self.num_positions).then(|| id - off)
    }

    pub fn is_word(&self, id: TokenId) -> bool {
        let i = id as usize;
        i >= Sentinel::COUNT && i < Sentinel::COUNT + self.terms.len()
    }

    /// Surface form of any id in range.
    pub fn surface(&self, id: TokenId) -> Option<String> {
        let i = id as usize;
        if i < Sentinel::COUNT {
            Some(Sentinel::ALL[i].surface().to_string())
        } else if i < Sentinel::COUNT + self.terms.len() {
            Some(self.terms[i - Sentinel::COUNT].clone())
        } else if i < self.len() {
            Some(position_surface(i - Sentinel::COUNT - self.terms.len()))
        } else {
            None
        }
    }

    /// Inverse of [`Vocabulary::surface`].
    pub fn id_of_surface(&self, s: &str) -> Option<TokenId> {
        if let Some(sent) = Sentinel::ALL.iter().find(|x| x.surface() == s) {
            return Some(sent.id());
        }
        if let Some(id) = self.index.get(s) {
            return Some(*id);
        }
        let bin = s.strip_prefix("[pos_")?.strip_suffix(']')?.parse::<u32>().ok()?;
        ((bin as usize) < self.num_positions && position_surface(bin as usize) == s)
            .then(|| self.position_id(bin))
    }

    /// Plain-text form: a `P=<int>` header, then one surface form per line in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(16 * self.len());
        writeln!(out, "P={}", self.num_positions).unwrap();
        for id in 0..self.len() as TokenId {
            out.push_str(&self.surface(id).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty vocabulary file".into()))?;
        let p: usize = header
            .strip_prefix("P=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad vocabulary header {header:?}")))?;
        let body: Vec<&str> = lines.collect();
        if body.len() < Sentinel::COUNT + p {
            return Err(Error::Parse("vocabulary file truncated".into()));
        }
        for (i, s) in Sentinel::ALL.iter().enumerate() {
            if body[i] != s.surface() {
                return Err(Error::Parse(format!("line {} should be {}", i + 2, s.surface())));
            }
        }
        let n_terms = body.len() - Sentinel::COUNT - p;
        let terms: Vec<String> =
            body[Sentinel::COUNT..Sentinel::COUNT + n_terms].iter().map(|s| s.to_string()).collect();
        for (bin, line) in body[Sentinel::COUNT + n_terms..].iter().enumerate() {
            if *line != position_surface(bin) {
                return Err(Error::Parse(format!("expected {} got {line:?}", position_surface(bin))));
            }
        }
        if terms.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parse("vocabulary terms are not sorted and unique".into()));
        }
        if p < 2 {
            return Err(config("vocabulary needs at least 2 position tokens"));
        }
        Self::from_sorted_terms(terms, p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the serialized form; checkpoints record it.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Lowercased whitespace tokenization.
pub fn split_words(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split_whitespace().map(str::to_lowercase)
}

/// Vocabulary over every subject, relation and object word of the given records and triplets.
pub fn build_vocabulary(
    records: &[SampleRecord],
    triplets: &[Triplet],
    num_positions: usize,
) -> Result<Vocabulary> {
    let phrases = records
        .iter()
        .flat_map(|r| [r.subject.as_str(), r.relation.as_str(), r.object.as_str()])
        .chain(triplets.iter().flat_map(|t| [t.subject.as_str(), t.relation.as_str(), t.object.as_str()]));
    Vocabulary::from_phrases(phrases, num_positions)
}

/// Quantizes pixel coordinates: `floor(P * coord / extent)` clamped into `[0, P-1]`.
pub fn quantize_box(b: &BoxPixels, w: f64, h: f64, num_positions: usize) -> Result<BoxBins> {
    if !(w > 0.0 && h > 0.0) {
        return Err(validation(format!("image extent must be positive, got {w}x{h}")));
    }
    b.validate(w, h)?;
    let p = num_positions as f64;
    let max_bin = (num_positions - 1) as f64;
    let q = |c: f64, extent: f64| (p * c / extent).floor().clamp(0.0, max_bin) as u32;
    Ok(BoxBins { bx1: q(b.x1, w), by1: q(b.y1, h), bx2: q(b.x2, w), by2: q(b.y2, h) })
}

/// Bin-center inverse of [`quantize_box`]. Axes whose two bins coincide are widened by
/// half a bin on each side so the box keeps positive area.
pub fn dequantize_bins(b: &BoxBins, w: f64, h: f64, num_positions: usize) -> Result<BoxPixels> {
    if b.as_array().iter().any(|&v| v as usize >= num_positions) {
        return Err(validation(format!("bins {:?} out of range for P={num_positions}", b)));
    }
    if b.bx1 > b.bx2 || b.by1 > b.by2 {
        return Err(validation(format!("inverted bins {:?}", b)));
    }
    let p = num_positions as f64;
    let axis = |lo: u32, hi: u32, extent: f64| {
        let step = extent / p;
        let (a, z) = ((lo as f64 + 0.5) * step, (hi as f64 + 0.5) * step);
        if lo == hi {
            (a - 0.5 * step, z + 0.5 * step)
        } else {
            (a, z)
        }
    };
    let (x1, x2) = axis(b.bx1, b.bx2, w);
    let (y1, y2) = axis(b.by1, b.by2, h);
    Ok(BoxPixels { x1, y1, x2, y2 })
}

/// Encoded training/evaluation instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceExample {
    pub input_ids: Vec<TokenId>,
    pub target_ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

impl SequenceExample {
    pub fn supervised_positions(&self) -> usize {
        self.loss_mask.iter().filter(|m| **m).count()
    }
}

/// Result of parsing a decoded token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPrediction {
    pub relation: String,
    pub object: String,
    pub bbox: Option<BoxPixels>,
    pub well_formed: bool,
}

/// Vocabulary plus the object lexicon used to split decoded text into relation and object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vocabulary,
    object_words: BTreeSet<String>,
}

impl Tokenizer {
    pub fn new<I, S>(vocab: Vocabulary, object_words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let object_words = object_words.into_iter().flat_map(|s| split_words(s.as_ref()).collect::<Vec<_>>()).collect();
        Tokenizer { vocab, object_words }
    }

    /// Builds both the vocabulary and the object lexicon from the same sources.
    pub fn from_records(records: &[SampleRecord], triplets: &[Triplet], num_positions: usize) -> Result<Self> {
        let vocab = build_vocabulary(records, triplets, num_positions)?;
        let objects = records.iter().map(|r| r.object.as_str()).chain(triplets.iter().map(|t| t.object.as_str()));
        Ok(Tokenizer::new(vocab, objects))
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn object_words(&self) -> &BTreeSet<String> {
        &self.object_words
    }

    pub fn object_lexicon_text(&self) -> String {
        self.object_words.iter().map(|w| format!("{w}\n")).collect()
    }

    pub fn parse_object_lexicon(text: &str) -> BTreeSet<String> {
        text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_lowercase).collect()
    }

    fn push_box(&self, out: &mut Vec<TokenId>, b: &BoxPixels, w: f64, h: f64) -> Result<()> {
        let bins = quantize_box(b, w, h, self.vocab.num_positions)?;
        out.extend(bins.as_array().iter().map(|&v| self.vocab.position_id(v)));
        Ok(())
    }

    /// `[SUB] subject-words [BOX] 4 x position [/BOX]`.
    pub fn encode_input(&self, subject: &str, subject_box: &BoxPixels, w: f64, h: f64) -> Result<Vec<TokenId>> {
        let words: Vec<String> = split_words(subject).collect();
        if words.is_empty() {
            return Err(validation("empty subject"));
        }
        let mut ids = Vec::with_capacity(words.len() + 7);
        ids.push(Sentinel::Sub.id());
        ids.extend(words.iter().map(|w| self.vocab.word_id(w)));
        ids.push(Sentinel::BoxOpen.id());
        self.push_box(&mut ids, subject_box, w, h)?;
        ids.push(Sentinel::BoxClose.id());
        Ok(ids)
    }

    /// Relation and object words, `[@]`, then (when grounded) four position tokens and `[SEP]`.
    /// Every emitted position is supervised; ungrounded targets simply stop at `[@]`.
    pub fn encode_target(
        &self,
        relation: &str,
        object: &str,
        object_box: Option<&BoxPixels>,
        w: f64,
        h: f64,
    ) -> Result<(Vec<TokenId>, Vec<bool>)> {
        let rel: Vec<String> = split_words(relation).collect();
        let obj: Vec<String> = split_words(object).collect();
        if rel.is_empty() || obj.is_empty() {
            return Err(validation("relation and object must be non-empty"));
        }
        let mut ids: Vec<TokenId> = rel.iter().chain(&obj).map(|w| self.vocab.word_id(w)).collect();
        ids.push(Sentinel::At.id());
        if let Some(b) = object_box {
            self.push_box(&mut ids, b, w, h)?;
            ids.push(Sentinel::Sep.id());
        }
        let mask = vec![true; ids.len()];
        Ok((ids, mask))
    }

    /// Encodes a record, checking that the grounded flag agrees with the object box.
    pub fn encode_record(&self, r: &SampleRecord) -> Result<SequenceExample> {
        if r.grounded != r.object_box.is_some() {
            return Err(validation(format!(
                "record {}: grounded={} but object box {}",
                r.id,
                r.grounded,
                if r.object_box.is_some() { "present" } else { "missing" }
            )));
        }
        let (w, h) = (r.image.width as f64, r.image.height as f64);
        let input_ids = self.encode_input(&r.subject, &r.subject_box, w, h)?;
        let (target_ids, loss_mask) = self.encode_target(&r.relation, &r.object, r.object_box.as_ref(), w, h)?;
        Ok(SequenceExample { input_ids, target_ids, loss_mask })
    }

    fn split_relation_object(&self, words: &[String]) -> (String, String) {
        let tail = words.iter().rev().take_while(|w| self.object_words.contains(w.as_str())).count();
        let cut = words.len() - tail;
        (words[..cut].join(" "), words[cut..].join(" "))
    }

    /// Parses decoder output. Malformed sequences are reported through `well_formed`
    /// rather than an error so that they count as negatives downstream.
    pub fn decode_prediction(&self, ids: &[TokenId], w: f64, h: f64) -> DecodedPrediction {
        let at = ids.iter().position(|&t| t == Sentinel::At.id());
        let text_part = &ids[..at.unwrap_or(ids.len())];
        let mut well_formed = at.is_some();
        let mut words = Vec::with_capacity(text_part.len());
        for &t in text_part {
            if self.vocab.bin_of(t).is_some() {
                well_formed = false;
            } else if let Some(s) = self.vocab.surface(t) {
                words.push(s);
            } else {
                well_formed = false;
            }
        }
        let Some(at) = at else {
            return DecodedPrediction { relation: String::new(), object: words.join(" "), bbox: None, well_formed: false };
        };
        let (relation, object) = self.split_relation_object(&words);

        let suffix = &ids[at + 1..];
        let bins: Vec<u32> = suffix.iter().take(4).filter_map(|&t| self.vocab.bin_of(t)).collect();
        let bbox = if bins.len() == 4 && suffix.get(4) == Some(&Sentinel::Sep.id()) {
            let bb = BoxBins { bx1: bins[0], by1: bins[1], bx2: bins[2], by2: bins[3] };
            dequantize_bins(&bb, w, h, self.vocab.num_positions).ok()
        } else {
            None
        };
        well_formed &= bbox.is_some();
        DecodedPrediction { relation, object, bbox, well_formed }
    }
}

/// Writes `vocab.txt`-style and object-lexicon files side by side.
pub fn save_tokenizer(tok: &Tokenizer, vocab_path: &Path, objects_path: &Path) -> Result<()> {
    tok.vocab.save(vocab_path)?;
    std::fs::write(objects_path, tok.object_lexicon_text())?;
    Ok(())
}

pub fn load_tokenizer(vocab_path: &Path, objects_path: &Path) -> Result<Tokenizer> {
    let vocab = Vocabulary::load(vocab_path)?;
    let objects = Tokenizer::parse_object_lexicon(&std::fs::read_to_string(objects_path)?);
    Ok(Tokenizer { vocab, object_words: objects })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        let v = Vocabulary::from_phrases(["man", "riding", "horse", "rides", "holding", "umbrella", "sits on"], 100).unwrap();
        Tokenizer::new(v, ["horse", "umbrella"])
    }

    #[test]
    fn vocabulary_size_counts_sentinels_words_positions() {
        let v = Vocabulary::from_phrases(["man", "horse", "riding"], 100).unwrap();
        assert_eq!(v.len(), 110);
        assert_eq!(v.position_offset(), 10);
    }

    #[test]
    fn empty_terms_or_small_p_rejected() {
        assert!(matches!(Vocabulary::from_phrases([], 100), Err(Error::Validation(_))));
        assert!(matches!(Vocabulary::from_phrases(["  "], 100), Err(Error::Validation(_))));
        assert!(matches!(Vocabulary::from_phrases(["a"], 1), Err(Error::Config(_))));
    }

    #[test]
    fn shuffled_input_serializes_identically() {
        let a = Vocabulary::from_phrases(["man", "horse", "riding"], 10).unwrap();
        let b = Vocabulary::from_phrases(["riding", "man", "horse", "man"], 10).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        let again = Vocabulary::parse(&a.to_text()).unwrap();
        assert_eq!(again, a);
        assert_eq!(again.to_text(), a.to_text());
    }

    #[test]
    fn parse_rejects_tampered_files() {
        let v = Vocabulary::from_phrases(["man", "horse"], 3).unwrap();
        let text = v.to_text();
        assert!(Vocabulary::parse(&text.replace("P=3", "P=4")).is_err());
        assert!(Vocabulary::parse(&text.replace("[@]", "[AT]")).is_err());
        assert!(Vocabulary::parse(&text.replace("horse\nman", "man\nhorse")).is_err());
    }

    #[test]
    fn quantize_examples() {
        let b = quantize_box(&BoxPixels::new(50.0, 25.0, 150.0, 75.0), 200.0, 100.0, 100).unwrap();
        assert_eq!(b.as_array(), [25, 25, 75, 75]);
        let b = quantize_box(&BoxPixels::new(0.0, 0.0, 200.0, 100.0), 200.0, 100.0, 100).unwrap();
        assert_eq!(b.as_array(), [0, 0, 99, 99]);
        let b = quantize_box(&BoxPixels::new(9.9, 0.0, 10.1, 100.0), 100.0, 100.0, 10).unwrap();
        assert_eq!(b.as_array(), [0, 0, 1, 9]);
        assert!(quantize_box(&BoxPixels::new(5.0, 0.0, 5.0, 10.0), 100.0, 100.0, 10).is_err());
        assert!(quantize_box(&BoxPixels::new(0.0, 0.0, 5.0, 10.0), 0.0, 100.0, 10).is_err());
    }

    #[test]
    fn dequantize_examples() {
        let b = dequantize_bins(&BoxBins { bx1: 25, by1: 0, bx2: 26, by2: 1 }, 200.0, 100.0, 100).unwrap();
        assert_eq!(b.x1, 51.0);
        let b = dequantize_bins(&BoxBins { bx1: 5, by1: 5, bx2: 5, by2: 9 }, 100.0, 100.0, 10).unwrap();
        assert_eq!([b.x1, b.y1, b.x2, b.y2], [50.0, 55.0, 60.0, 95.0]);
        b.validate(100.0, 100.0).unwrap();
        assert!(dequantize_bins(&BoxBins { bx1: 0, by1: 0, bx2: 10, by2: 1 }, 100.0, 100.0, 10).is_err());
    }

    #[test]
    fn encode_input_layout() {
        let t = tok();
        let v = t.vocab();
        let ids = t.encode_input("man", &BoxPixels::new(50.0, 25.0, 150.0, 75.0), 200.0, 100.0).unwrap();
        assert_eq!(
            ids,
            vec![
                Sentinel::Sub.id(),
                v.word_id("man"),
                Sentinel::BoxOpen.id(),
                v.position_id(25),
                v.position_id(25),
                v.position_id(75),
                v.position_id(75),
                Sentinel::BoxClose.id()
            ]
        );
        let unk = t.encode_input("zyzzyva", &BoxPixels::new(50.0, 25.0, 150.0, 75.0), 200.0, 100.0).unwrap();
        assert_eq!(unk.len(), ids.len());
        assert_eq!(unk[1], Sentinel::Unk.id());
        assert!(t.encode_input(" ", &BoxPixels::new(50.0, 25.0, 150.0, 75.0), 200.0, 100.0).is_err());
    }

    #[test]
    fn encode_target_grounded_and_ungrounded() {
        let t = tok();
        let v = t.vocab();
        let (ids, mask) =
            t.encode_target("rides", "horse", Some(&BoxPixels::new(50.0, 25.0, 150.0, 75.0)), 200.0, 100.0).unwrap();
        assert_eq!(ids.len(), 8);
        assert_eq!(&ids[..3], &[v.word_id("rides"), v.word_id("horse"), Sentinel::At.id()]);
        assert_eq!(ids[7], Sentinel::Sep.id());
        assert!(mask.iter().all(|m| *m));

        let (ids, mask) = t.encode_target("holding", "umbrella", None, 200.0, 100.0).unwrap();
        assert_eq!(ids, vec![v.word_id("holding"), v.word_id("umbrella"), Sentinel::At.id()]);
        assert_eq!(mask, vec![true; 3]);

        let (ids, _) = t.encode_target("sits on", "horse", None, 200.0, 100.0).unwrap();
        assert_eq!(&ids[..2], &[v.word_id("sits"), v.word_id("on")]);
    }

    #[test]
    fn decode_prediction_cases() {
        let t = tok();
        let v = t.vocab();
        let (ids, _) =
            t.encode_target("rides", "horse", Some(&BoxPixels::new(50.0, 25.0, 150.0, 75.0)), 200.0, 100.0).unwrap();
        let d = t.decode_prediction(&ids, 200.0, 100.0);
        assert_eq!((d.relation.as_str(), d.object.as_str(), d.well_formed), ("rides", "horse", true));
        let b = d.bbox.unwrap();
        assert_eq!([b.x1, b.y1, b.x2, b.y2], [51.0, 25.5, 151.0, 75.5]);

        let short = [v.word_id("rides"), v.word_id("horse"), Sentinel::At.id(), v.position_id(3), Sentinel::Sep.id()];
        let d = t.decode_prediction(&short, 200.0, 100.0);
        assert_eq!((d.relation.as_str(), d.object.as_str(), d.bbox, d.well_formed), ("rides", "horse", None, false));

        let no_at = [v.word_id("rides"), v.word_id("horse")];
        let d = t.decode_prediction(&no_at, 200.0, 100.0);
        assert_eq!((d.relation.as_str(), d.object.as_str(), d.bbox, d.well_formed), ("", "rides horse", None, false));

        let text_after_at =
            [v.word_id("rides"), v.word_id("horse"), Sentinel::At.id(), v.word_id("man"), Sentinel::Sep.id()];
        assert!(!t.decode_prediction(&text_after_at, 200.0, 100.0).well_formed);

        let multi = t.encode_target("sits on", "horse", None, 200.0, 100.0).unwrap().0;
        let d = t.decode_prediction(&multi, 200.0, 100.0);
        assert_eq!((d.relation.as_str(), d.object.as_str(), d.well_formed), ("sits on", "horse", false));
    }

    #[test]
    fn surface_round_trip_covers_every_id() {
        let v = tok().vocab().clone();
        for id in 0..v.len() as TokenId {
            assert_eq!(v.id_of_surface(&v.surface(id).unwrap()), Some(id));
        }
        assert_eq!(v.surface(v.len() as TokenId), None);
    }
}
