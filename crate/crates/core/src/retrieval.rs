//! Boolean keyword retrieval over the sentence pool and iterative keyword
//! expansion.
//!
//! Matching is token-exact on lowercased tokens. Instead of stemming at
//! query time, inflections are materialized into the keyword set.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, SentenceId, SentencePool};
use crate::error::{Error, Result};

const ENGLISH_STOPWORDS: &str = include_str!("../data/stopwords_en.txt");

/// Default cap on keyword-expansion rounds.
pub const DEFAULT_MAX_EXPANSIONS: u32 = 10;

/// A fixed stopword list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Stopwords(BTreeSet<String>);

impl Stopwords {
    /// The vendored English list.
    pub fn english() -> Self {
        Self::parse(ENGLISH_STOPWORDS)
    }

    pub fn parse(text: &str) -> Self {
        Stopwords(
            text.lines().map(|l| l.trim().to_lowercase()).filter(|l| !l.is_empty() && !l.starts_with('#')).collect(),
        )
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn contains(&self, term: &str) -> bool {
        self.0.contains(term)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<S: Into<String>> FromIterator<S> for Stopwords {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Stopwords(iter.into_iter().map(|s| s.into().to_lowercase()).collect())
    }
}

/// Where a keyword came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeywordSource {
    Seed,
    Manual,
    Inflection,
}

/// The versioned keyword set; the on-disk `keywords.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSet {
    pub version: u32,
    pub keywords: BTreeSet<String>,
    pub provenance: BTreeMap<String, KeywordSource>,
}

impl KeywordSet {
    /// Initial set: the seed terms plus their inflections, version 0.
    pub fn from_seed<S: AsRef<str>>(terms: &[S]) -> Result<Self> {
        let mut ks = KeywordSet { version: 0, keywords: BTreeSet::new(), provenance: BTreeMap::new() };
        ks.absorb(terms, KeywordSource::Seed);
        if ks.keywords.is_empty() {
            return Err(Error::EmptyKeywords);
        }
        Ok(ks)
    }

    /// Next version: union with the accepted terms and their inflections.
    /// Existing keywords keep their original provenance.
    pub fn expand<S: AsRef<str>>(&self, accepted: &[S]) -> KeywordSet {
        let mut next = self.clone();
        next.version += 1;
        next.absorb(accepted, KeywordSource::Manual);
        next
    }

    fn absorb<S: AsRef<str>>(&mut self, terms: &[S], source: KeywordSource) {
        for term in terms {
            let term = term.as_ref().trim();
            if term.is_empty() {
                continue;
            }
            let forms = inflect_keyword(term);
            let base = term.to_lowercase();
            for form in forms {
                let src = if form == base { source } else { KeywordSource::Inflection };
                if self.keywords.insert(form.clone()) {
                    self.provenance.insert(form, src);
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    pub fn contains(&self, term: &str) -> bool {
        self.keywords.contains(term)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path.display().to_string(), e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn lowercase_terms(sentence: &Sentence) -> Vec<String> {
    sentence.token_strs().into_iter().map(str::to_lowercase).collect()
}

/// Term → sorted posting list of pool positions. Pool positions follow
/// sentence-id order, so postings are also sorted by sentence id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvertedIndex {
    postings: HashMap<String, Vec<u32>>,
    ids: Vec<SentenceId>,
}

/// Serialized form with sentence ids spelled out.
#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    pool_size: usize,
    postings: BTreeMap<String, Vec<SentenceId>>,
}

impl InvertedIndex {
    pub fn build(pool: &SentencePool) -> Result<Self> {
        build_inverted_index(pool)
    }

    pub fn pool_size(&self) -> usize {
        self.ids.len()
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    /// Sentence ids containing `term` (exact lowercase token match).
    pub fn postings(&self, term: &str) -> Vec<&str> {
        self.postings
            .get(&term.to_lowercase())
            .map(|p| p.iter().map(|&i| self.ids[i as usize].as_str()).collect())
            .unwrap_or_default()
    }

    /// `k_1 OR k_2 OR ... OR k_n`.
    pub fn query_any<'a>(&self, terms: impl IntoIterator<Item = &'a str>) -> BTreeSet<SentenceId> {
        let mut hits: BTreeSet<u32> = BTreeSet::new();
        for t in terms {
            if let Some(p) = self.postings.get(&t.to_lowercase()) {
                hits.extend(p.iter().copied());
            }
        }
        hits.into_iter().map(|i| self.ids[i as usize].clone()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = IndexFile {
            pool_size: self.ids.len(),
            postings: self
                .postings
                .iter()
                .map(|(t, p)| (t.clone(), p.iter().map(|&i| self.ids[i as usize].clone()).collect()))
                .collect(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::json(path.display().to_string(), e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn build_inverted_index(pool: &SentencePool) -> Result<InvertedIndex> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let term_sets: Vec<BTreeSet<String>> =
        pool.sentences().par_iter().map(|s| lowercase_terms(s).into_iter().collect()).collect();
    let mut postings: HashMap<String, Vec<u32>> = HashMap::new();
    for (i, terms) in term_sets.into_iter().enumerate() {
        for t in terms {
            postings.entry(t).or_default().push(i as u32);
        }
    }
    Ok(InvertedIndex { postings, ids: pool.ids().map(str::to_string).collect() })
}

pub fn query_any_keyword(index: &InvertedIndex, ks: &KeywordSet) -> Result<BTreeSet<SentenceId>> {
    if ks.is_empty() {
        return Err(Error::EmptyKeywords);
    }
    Ok(index.query_any(ks.keywords.iter().map(String::as_str)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermCount {
    pub term: String,
    pub frequency: usize,
}

/// Candidate keywords ranked by frequency (desc), ties by term.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermFrequencyReport {
    pub terms: Vec<TermCount>,
}

impl TermFrequencyReport {
    pub fn top(&self, n: usize) -> &[TermCount] {
        &self.terms[..n.min(self.terms.len())]
    }

    pub fn contains(&self, term: &str) -> bool {
        self.terms.iter().any(|t| t.term == term)
    }
}

/// Counts content-word occurrences over the retrieved sentences. Stopwords,
/// current keywords, pure digits and punctuation are excluded.
pub fn rank_candidate_keywords(
    retrieved: &BTreeSet<SentenceId>,
    pool: &SentencePool,
    ks: &KeywordSet,
    stopwords: &Stopwords,
) -> Result<TermFrequencyReport> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for id in retrieved {
        let s = pool.get(id).ok_or_else(|| Error::UnknownSentence(id.clone()))?;
        for term in lowercase_terms(s) {
            let content = term.chars().any(char::is_alphabetic);
            if !content || stopwords.contains(&term) || ks.contains(&term) {
                continue;
            }
            *counts.entry(term).or_default() += 1;
        }
    }
    let mut terms: Vec<TermCount> = counts.into_iter().map(|(term, frequency)| TermCount { term, frequency }).collect();
    terms.sort_by(|a, b| b.frequency.cmp(&a.frequency).then_with(|| a.term.cmp(&b.term)));
    Ok(TermFrequencyReport { terms })
}

/// One expansion round: retrieve with the current set, rank candidates, and
/// add the human-accepted terms with their inflections. Unless `force` is
/// set, every accepted term must appear in the round's report.
pub fn expand_keywords_iteration<S: AsRef<str>>(
    index: &InvertedIndex,
    pool: &SentencePool,
    ks: &KeywordSet,
    stopwords: &Stopwords,
    accepted: &[S],
    force: bool,
) -> Result<KeywordSet> {
    if !force {
        let retrieved = query_any_keyword(index, ks)?;
        let report = rank_candidate_keywords(&retrieved, pool, ks, stopwords)?;
        for term in accepted {
            let t = term.as_ref().trim().to_lowercase();
            if !ks.contains(&t) && !report.contains(&t) {
                return Err(Error::TermNotReported(t));
            }
        }
    }
    Ok(ks.expand(accepted))
}

fn is_vowel(c: u8) -> bool {
    matches!(c, b'a' | b'e' | b'i' | b'o' | b'u')
}

/// Monosyllable ending consonant-vowel-consonant (last not w/x/y): the final
/// consonant doubles before -ed/-ing.
fn doubles_final(w: &[u8]) -> bool {
    let n = w.len();
    if n < 3 {
        return false;
    }
    let (c1, v, c2) = (w[n - 3], w[n - 2], w[n - 1]);
    let vowel_groups = w.iter().enumerate().filter(|&(i, &c)| is_vowel(c) && (i == 0 || !is_vowel(w[i - 1]))).count();
    !is_vowel(c1) && is_vowel(v) && !is_vowel(c2) && !matches!(c2, b'w' | b'x' | b'y') && vowel_groups == 1
}

/// Rule-based inflections: -s/-es, -ed and -ing with consonant doubling and
/// e-drop. Input that is not lowercase ASCII alphabetic is returned
/// lowercased, without inflections.
pub fn inflect_keyword(term: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let lower = term.to_lowercase();
    out.insert(lower.clone());
    if term.is_empty() || !term.bytes().all(|b| b.is_ascii_lowercase()) {
        return out;
    }
    let w = term.as_bytes();
    let n = w.len();
    let last = w[n - 1];
    let prev = if n >= 2 { Some(w[n - 2]) } else { None };
    let consonant_y = last == b'y' && prev.is_some_and(|p| !is_vowel(p));
    let stem_no_last = &term[..n - 1];

    // third person / plural
    let s_form = if term.ends_with('s')
        || term.ends_with('x')
        || term.ends_with('z')
        || term.ends_with("ch")
        || term.ends_with("sh")
        || (last == b'o' && prev.is_some_and(|p| !is_vowel(p)))
    {
        format!("{term}es")
    } else if consonant_y {
        format!("{stem_no_last}ies")
    } else {
        format!("{term}s")
    };
    out.insert(s_form);

    let double = doubles_final(w);
    let ed = if last == b'e' {
        format!("{term}d")
    } else if consonant_y {
        format!("{stem_no_last}ied")
    } else if double {
        format!("{term}{}ed", last as char)
    } else {
        format!("{term}ed")
    };
    out.insert(ed);

    let ing = if term.ends_with("ie") {
        format!("{}ying", &term[..n - 2])
    } else if last == b'e' && n > 2 && !matches!(prev, Some(b'e' | b'o' | b'y')) {
        format!("{stem_no_last}ing")
    } else if double {
        format!("{term}{}ing", last as char)
    } else {
        format!("{term}ing")
    };
    out.insert(ing);
    out
}
