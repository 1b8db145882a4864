//! Word lists driving caption-to-triplet extraction, and the extractor itself.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{validation, Error, Result};

use super::record::Triplet;

/// Terms may span several words; matching always prefers the longest term.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    pub verbs: BTreeSet<String>,
    pub prepositions: BTreeSet<String>,
    pub ignorable: BTreeSet<String>,
    pub nouns: BTreeSet<String>,
}

const SECTIONS: [&str; 4] = ["verbs", "prepositions", "ignorable", "nouns"];

fn words_of(s: &str) -> Vec<String> {
    s.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn section(lex: &Lexicon, i: usize) -> &BTreeSet<String> {
    [&lex.verbs, &lex.prepositions, &lex.ignorable, &lex.nouns][i]
}

impl Lexicon {
    pub fn new<S: AsRef<str>>(verbs: &[S], prepositions: &[S], ignorable: &[S], nouns: &[S]) -> Result<Self> {
        let set = |xs: &[S]| xs.iter().map(|x| words_of(x.as_ref()).join(" ")).filter(|x| !x.is_empty()).collect();
        let lex = Lexicon { verbs: set(verbs), prepositions: set(prepositions), ignorable: set(ignorable), nouns: set(nouns) };
        lex.validate()?;
        Ok(lex)
    }

    /// The four sets must be pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            for j in i + 1..4 {
                if let Some(t) = section(self, i).intersection(section(self, j)).next() {
                    return Err(validation(format!("lexicon term {t:?} is in both [{}] and [{}]", SECTIONS[i], SECTIONS[j])));
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lists: [Vec<String>; 4] = Default::default();
        let mut current: Option<usize> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(
                    SECTIONS
                        .iter()
                        .position(|s| *s == name.trim())
                        .ok_or_else(|| Error::Parse(format!("lexicon line {}: unknown section [{name}]", n + 1)))?,
                );
                continue;
            }
            let i = current.ok_or_else(|| Error::Parse(format!("lexicon line {}: term before any section", n + 1)))?;
            lists[i].push(line.to_string());
        }
        let [v, p, i, nn] = lists;
        Lexicon::new(&v, &p, &i, &nn)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, name) in SECTIONS.iter().enumerate() {
            out.push_str(&format!("[{name}]\n"));
            for t in section(self, i) {
                out.push_str(t);
                out.push('\n');
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Lexicon::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }
}

/// Terms split into words, longest first.
struct Matcher(Vec<Vec<String>>);

impl Matcher {
    fn new(set: &BTreeSet<String>) -> Self {
        let mut terms: Vec<Vec<String>> = set.iter().map(|t| words_of(t)).collect();
        terms.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        Matcher(terms)
    }

    /// Length of the longest term starting at `words[i]`.
    fn at(&self, words: &[String], i: usize) -> Option<usize> {
        self.0.iter().find(|t| words[i..].starts_with(t)).map(Vec::len)
    }
}

struct Extractor {
    verbs: Matcher,
    preps: Matcher,
    ignorable: Matcher,
    nouns: Matcher,
}

impl Extractor {
    /// Ignorable words then one noun; returns (noun span, end).
    fn noun_phrase(&self, w: &[String], mut i: usize) -> Option<((usize, usize), usize)> {
        loop {
            if let Some(n) = self.nouns.at(w, i) {
                return Some(((i, i + n), i + n));
            }
            i += self.ignorable.at(w, i)?;
        }
    }

    fn triplet_at(&self, w: &[String], i: usize) -> Option<(Triplet, usize)> {
        let (subj, j) = self.noun_phrase(w, i)?;
        let v = self.verbs.at(w, j)?;
        let mut rel_end = j + v;
        if let Some(p) = self.preps.at(w, rel_end) {
            // Only take the preposition when an object still follows it.
            if self.noun_phrase(w, rel_end + p).is_some() {
                rel_end += p;
            }
        }
        let (obj, end) = self.noun_phrase(w, rel_end)?;
        let t = Triplet {
            subject: w[subj.0..subj.1].join(" "),
            relation: w[j..rel_end].join(" "),
            object: w[obj.0..obj.1].join(" "),
        };
        Some((t, end))
    }
}

/// Scans for `NP verb [preposition] NP` after lowercasing and stripping punctuation,
/// where a noun phrase is optional ignorable words followed by one noun. Matches do
/// not overlap and are reported left to right.
pub fn extract_triplets(caption: &str, lex: &Lexicon) -> Vec<Triplet> {
    let ex = Extractor {
        verbs: Matcher::new(&lex.verbs),
        preps: Matcher::new(&lex.prepositions),
        ignorable: Matcher::new(&lex.ignorable),
        nouns: Matcher::new(&lex.nouns),
    };
    let words = words_of(caption);
    let mut out = Vec::new();
    let mut i = 0;
    while i < words.len() {
        match ex.triplet_at(&words, i) {
            Some((t, end)) => {
                out.push(t);
                i = end;
            }
            None => i += 1,
        }
    }
    out
}
