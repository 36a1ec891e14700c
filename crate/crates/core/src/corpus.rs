//! Document ingestion, sentence segmentation, tokenization and deduplication.
//!
//! All offsets in this crate are character offsets (Unicode scalar values)
//! into the owning text, half-open.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jsonl;

/// Hex content hash of a sentence's normalized text.
pub type SentenceId = String;

/// A raw input note.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub source_tag: String,
    pub text: String,
}

/// A pool element: sentence text with its token table and provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub sentence_id: SentenceId,
    pub text: String,
    pub tokens: Vec<(usize, usize)>,
    pub doc_ids: BTreeSet<String>,
}

impl Sentence {
    pub fn new(text: impl Into<String>, doc_ids: impl IntoIterator<Item = String>) -> Self {
        let text = text.into();
        Sentence {
            sentence_id: sentence_id(&text),
            tokens: tokenize(&text),
            doc_ids: doc_ids.into_iter().collect(),
            text,
        }
    }

    pub fn len_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    /// Token surface strings, in order.
    pub fn token_strs(&self) -> Vec<&str> {
        let bytes = char_byte_offsets(&self.text);
        self.tokens.iter().map(|&(s, e)| &self.text[bytes[s]..bytes[e]]).collect()
    }

    /// Substring by character offsets.
    pub fn slice(&self, start: usize, end: usize) -> &str {
        let bytes = char_byte_offsets(&self.text);
        &self.text[bytes[start]..bytes[end]]
    }
}

/// Byte offset of every char boundary, including the end of the string.
pub(crate) fn char_byte_offsets(text: &str) -> Vec<usize> {
    let mut v: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
    v.push(text.len());
    v
}

/// Lowercase and collapse whitespace runs; the dedup key.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().map(|w| w.to_lowercase()).collect::<Vec<_>>().join(" ")
}

/// 64-bit prefix of SHA-256 over the normalized text, hex encoded.
pub fn sentence_id(text: &str) -> SentenceId {
    let digest = Sha256::digest(normalize(text).as_bytes());
    hex(&digest[..8])
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Whitespace-plus-punctuation tokenization. Alphanumeric runs form one
/// token; every other non-space character is a token by itself.
pub fn tokenize(text: &str) -> Vec<(usize, usize)> {
    let mut tokens = Vec::new();
    let mut run_start: Option<usize> = None;
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        n = i + 1;
        if c.is_alphanumeric() {
            if run_start.is_none() {
                run_start = Some(i);
            }
            continue;
        }
        if let Some(s) = run_start.take() {
            tokens.push((s, i));
        }
        if !c.is_whitespace() {
            tokens.push((i, i + 1));
        }
    }
    if let Some(s) = run_start {
        tokens.push((s, n));
    }
    tokens
}

const ABBREVIATIONS: &[&str] = &[
    "approx", "apt", "appt", "ca", "cf", "dept", "dr", "e.g", "etc", "fig", "i.e", "inc", "jr", "mr", "mrs", "ms",
    "mt", "no", "prof", "sr", "st", "vs",
];

fn is_list_marker(line: &[char]) -> bool {
    let trimmed: Vec<char> = line.iter().copied().skip_while(|c| *c == ' ' || *c == '\t').collect();
    match trimmed.first() {
        Some('-' | '*' | '•') => true,
        Some(c) if c.is_ascii_digit() => {
            let digits = trimmed.iter().take_while(|c| c.is_ascii_digit()).count();
            matches!(trimmed.get(digits), Some('.' | ')')) && matches!(trimmed.get(digits + 1), Some(' ') | None)
        }
        _ => false,
    }
}

/// Character spans of the sentences in `text`, trimmed of surrounding
/// whitespace. Spans with no tokens are dropped.
pub fn segment_spans(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut cuts = Vec::new();
    let mut i = 0;
    while i < n {
        let c = chars[i];
        if c == '\n' {
            // blank line
            let mut j = i + 1;
            while j < n && chars[j] != '\n' && chars[j].is_whitespace() {
                j += 1;
            }
            if j < n && chars[j] == '\n' {
                cuts.push(i);
                i = j;
                continue;
            }
            // header line ending in a colon, or a list item on the next line
            let prev = chars[..i].iter().rev().find(|c| *c != &' ' && *c != &'\t' && *c != &'\r');
            let next_end = chars[i + 1..].iter().position(|c| *c == '\n').map_or(n, |p| i + 1 + p);
            if prev == Some(&':') || is_list_marker(&chars[i + 1..next_end]) {
                cuts.push(i);
            }
            i += 1;
            continue;
        }
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < n && matches!(chars[j], '.' | '!' | '?' | ')' | '"' | '\'' | '”' | '’') {
                j += 1;
            }
            let at_end = j >= n;
            if at_end || chars[j].is_whitespace() {
                if c == '.' && j == i + 1 && !is_sentence_final_period(&chars, i) {
                    i = j;
                    continue;
                }
                cuts.push(j);
            }
            i = j;
            continue;
        }
        i += 1;
    }
    cuts.push(n);

    let mut spans = Vec::new();
    let mut start = 0;
    for cut in cuts {
        if cut <= start {
            continue;
        }
        let mut s = start;
        let mut e = cut;
        while s < e && chars[s].is_whitespace() {
            s += 1;
        }
        while e > s && chars[e - 1].is_whitespace() {
            e -= 1;
        }
        if e > s {
            spans.push((s, e));
        }
        start = cut;
    }
    spans
}

fn is_sentence_final_period(chars: &[char], dot: usize) -> bool {
    // word immediately before the period, including inner dots ("e.g")
    let mut s = dot;
    while s > 0 && (chars[s - 1].is_alphanumeric() || chars[s - 1] == '.') {
        s -= 1;
    }
    let word: String = chars[s..dot].iter().collect::<String>().to_lowercase();
    if ABBREVIATIONS.contains(&word.as_str()) {
        return false;
    }
    // single-letter initials
    if word.chars().count() == 1 && word.chars().all(char::is_alphabetic) {
        return false;
    }
    // a lowercase continuation means the period was not terminal
    let next = chars[dot + 1..].iter().find(|c| !c.is_whitespace());
    !matches!(next, Some(c) if c.is_lowercase())
}

/// Splits a document into sentences. Sentence ids come from the text alone,
/// so repeated sentences collide.
pub fn segment_sentences(doc: &Document) -> Vec<Sentence> {
    let bytes = char_byte_offsets(&doc.text);
    segment_spans(&doc.text)
        .into_iter()
        .map(|(s, e)| Sentence::new(&doc.text[bytes[s]..bytes[e]], [doc.doc_id.clone()]))
        .filter(|s| !s.tokens.is_empty())
        .collect()
}

/// Segments many documents in parallel, keeping document order.
pub fn segment_documents(docs: &[Document]) -> Vec<Sentence> {
    docs.par_iter().map(segment_sentences).collect::<Vec<_>>().into_iter().flatten().collect()
}

/// The canonical, deduplicated sentence pool, ordered by sentence id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SentencePool {
    sentences: Vec<Sentence>,
    by_id: HashMap<SentenceId, usize>,
}

impl SentencePool {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn get(&self, id: &str) -> Option<&Sentence> {
        self.by_id.get(id).map(|&i| &self.sentences[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.sentences.iter().map(|s| s.sentence_id.as_str())
    }

    /// Content fingerprint: changes whenever any sentence is added, removed
    /// or its text changes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.sentences {
            h.update(s.sentence_id.as_bytes());
            h.update([0u8]);
            h.update(s.text.as_bytes());
            h.update([0u8]);
        }
        hex(&h.finalize()[..16])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sentences: Vec<Sentence> = jsonl::read_jsonl(path)?;
        Ok(deduplicate_sentences(sentences))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_jsonl(path, &self.sentences)
    }

    /// Sub-pool restricted to the given ids (unknown ids are ignored).
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> SentencePool {
        deduplicate_sentences(ids.into_iter().filter_map(|id| self.get(id).cloned()))
    }
}

impl FromIterator<Sentence> for SentencePool {
    fn from_iter<I: IntoIterator<Item = Sentence>>(iter: I) -> Self {
        deduplicate_sentences(iter)
    }
}

/// Collapses sentences with the same normalized text, unioning their
/// provenance. The first occurrence's surface text is kept.
pub fn deduplicate_sentences(sentences: impl IntoIterator<Item = Sentence>) -> SentencePool {
    let mut merged: BTreeMap<SentenceId, Sentence> = BTreeMap::new();
    for s in sentences {
        // re-derive the id so hand-built sentences cannot bypass the key
        let id = sentence_id(&s.text);
        match merged.get_mut(&id) {
            Some(existing) => existing.doc_ids.extend(s.doc_ids),
            None => {
                let mut s = s;
                s.sentence_id = id.clone();
                merged.insert(id, s);
            }
        }
    }
    let sentences: Vec<Sentence> = merged.into_values().collect();
    let by_id = sentences.iter().enumerate().map(|(i, s)| (s.sentence_id.clone(), i)).collect();
    SentencePool { sentences, by_id }
}

/// Result of reading a set of input files.
#[derive(Debug, Default)]
pub struct IngestReport {
    pub documents: Vec<Document>,
    pub errors: Vec<(PathBuf, String)>,
}

/// Reads one document per file. Unreadable or empty files are recorded and
/// skipped; it is an error only if nothing could be read.
pub fn ingest_documents(paths: &[PathBuf], source_tag: &str) -> Result<IngestReport> {
    let named: Vec<(PathBuf, String)> = paths
        .iter()
        .map(|p| {
            let name =
                p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string());
            (p.clone(), name)
        })
        .collect();
    ingest_named(named, source_tag)
}

/// Recursively ingests every regular file below `root`; doc ids use the
/// path relative to `root`.
pub fn ingest_dir(root: &Path, source_tag: &str) -> Result<IngestReport> {
    let mut files = Vec::new();
    collect_files(root, &mut files).map_err(|e| Error::io(root, e))?;
    let named = files
        .into_iter()
        .map(|p| {
            let rel = p
                .strip_prefix(root)
                .unwrap_or(&p)
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            (p, rel)
        })
        .collect();
    ingest_named(named, source_tag)
}

/// Ingests files listed in a `path,source_tag` CSV manifest. Relative paths
/// resolve against the manifest's directory.
pub fn ingest_manifest(manifest: &Path) -> Result<IngestReport> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(manifest)?;
    let mut by_tag: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let (Some(path), Some(tag)) = (row.get(0), row.get(1)) else {
            continue;
        };
        by_tag.entry(tag.to_string()).or_default().push(base.join(path));
    }
    let mut report = IngestReport::default();
    for (tag, paths) in by_tag {
        match ingest_documents(&paths, &tag) {
            Ok(r) => {
                report.documents.extend(r.documents);
                report.errors.extend(r.errors);
            }
            Err(Error::NoDocuments) => {
                report.errors.extend(paths.into_iter().map(|p| (p, "no readable content".to_string())))
            }
            Err(e) => return Err(e),
        }
    }
    if report.documents.is_empty() {
        return Err(Error::NoDocuments);
    }
    report.documents.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    Ok(report)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let ty = entry.file_type()?;
        if ty.is_dir() {
            collect_files(&entry.path(), out)?;
        } else if ty.is_file() {
            out.push(entry.path());
        }
    }
    Ok(())
}

fn ingest_named(mut named: Vec<(PathBuf, String)>, source_tag: &str) -> Result<IngestReport> {
    named.sort();
    let mut report = IngestReport::default();
    let mut seen = BTreeSet::new();
    for (path, name) in named {
        let text = match fs::read(&path) {
            Ok(bytes) => match String::from_utf8(bytes) {
                Ok(t) => t,
                Err(_) => {
                    report.errors.push((path, "not valid UTF-8".into()));
                    continue;
                }
            },
            Err(e) => {
                report.errors.push((path, e.to_string()));
                continue;
            }
        };
        if text.trim().is_empty() {
            report.errors.push((path, "empty document".into()));
            continue;
        }
        let doc_id = format!("{source_tag}/{name}");
        if !seen.insert(doc_id.clone()) {
            report.errors.push((path, format!("duplicate doc_id {doc_id}")));
            continue;
        }
        report.documents.push(Document { doc_id, source_tag: source_tag.to_string(), text });
    }
    if report.documents.is_empty() {
        return Err(Error::NoDocuments);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(text: &str) -> Document {
        Document { doc_id: "t/doc".into(), source_tag: "t".into(), text: text.into() }
    }

    fn texts(doc_text: &str) -> Vec<String> {
        segment_sentences(&doc(doc_text)).into_iter().map(|s| s.text).collect()
    }

    #[test]
    fn two_sentences() {
        assert_eq!(texts("He walks. She runs."), vec!["He walks.", "She runs."]);
    }

    #[test]
    fn no_terminal_punctuation() {
        assert_eq!(texts("no terminal punctuation"), vec!["no terminal punctuation"]);
    }

    #[test]
    fn abbreviation_guard() {
        assert_eq!(texts("Dr. Smith walked."), vec!["Dr. Smith walked."]);
        assert_eq!(texts("Walks e.g. to the door. Sits."), vec!["Walks e.g. to the door.", "Sits."]);
    }

    #[test]
    fn decimals_do_not_split() {
        assert_eq!(texts("Walked 2.5 miles. Tired."), vec!["Walked 2.5 miles.", "Tired."]);
    }

    #[test]
    fn note_style_newlines() {
        let t = "ASSESSMENT:\nPt ambulates with walker\n\nPLAN\n- PT daily\n- OT eval\nwrapped line\ncontinues.";
        assert_eq!(
            texts(t),
            vec![
                "ASSESSMENT:",
                "Pt ambulates with walker",
                "PLAN",
                "- PT daily",
                "- OT eval\nwrapped line\ncontinues."
            ]
        );
    }

    #[test]
    fn tokenization_offsets() {
        let s = Sentence::new("Pt ambulates 50ft, w/ walker.", Vec::<String>::new());
        assert_eq!(s.token_strs(), vec!["Pt", "ambulates", "50ft", ",", "w", "/", "walker", "."]);
    }

    #[test]
    fn non_ascii_offsets_are_chars() {
        let s = Sentence::new("Pt café ok", Vec::<String>::new());
        assert_eq!(s.tokens, vec![(0, 2), (3, 7), (8, 10)]);
        assert_eq!(s.token_strs(), vec!["Pt", "café", "ok"]);
    }

    #[test]
    fn dedup_examples() {
        let mk = |t: &str, d: &str| Sentence::new(t, [d.to_string()]);
        let pool = deduplicate_sentences(vec![mk("Pt walks.", "a"), mk("Pt walks.", "b"), mk("Pt sits.", "c")]);
        assert_eq!(pool.len(), 2);

        let pool = deduplicate_sentences(vec![mk("Pt  walks.", "a"), mk("pt walks.", "b")]);
        assert_eq!(pool.len(), 1);
        let s = &pool.sentences()[0];
        assert_eq!(s.doc_ids, ["a".to_string(), "b".to_string()].into_iter().collect());
        assert_eq!(s.text, "Pt  walks.");

        assert!(deduplicate_sentences(Vec::new()).is_empty());
    }

    #[test]
    fn ingest_orders_by_path_and_records_errors() {
        let dir = tempfile::tempdir().unwrap();
        for (name, body) in [("c.txt", "Third."), ("a.txt", "Pt ambulates."), ("b.txt", "Second.")] {
            fs::write(dir.path().join(name), body).unwrap();
        }
        fs::write(dir.path().join("empty.txt"), "").unwrap();
        let paths: Vec<PathBuf> = ["c.txt", "empty.txt", "a.txt", "b.txt"].iter().map(|n| dir.path().join(n)).collect();
        let report = ingest_documents(&paths, "2006").unwrap();
        let ids: Vec<_> = report.documents.iter().map(|d| d.doc_id.as_str()).collect();
        assert_eq!(ids, vec!["2006/a.txt", "2006/b.txt", "2006/c.txt"]);
        assert_eq!(report.documents[0].text, "Pt ambulates.");
        assert_eq!(report.errors.len(), 1);

        let only_empty = ingest_documents(&[dir.path().join("empty.txt")], "x");
        assert!(matches!(only_empty, Err(Error::NoDocuments)));
    }

    #[test]
    fn manifest_ingest() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "One.").unwrap();
        fs::write(dir.path().join("b.txt"), "Two.").unwrap();
        fs::write(dir.path().join("m.csv"), "path,source_tag\na.txt,2008\nb.txt,2010\n").unwrap();
        let r = ingest_manifest(&dir.path().join("m.csv")).unwrap();
        let ids: Vec<_> = r.documents.iter().map(|d| d.doc_id.as_str()).collect();
        assert_eq!(ids, vec!["2008/a.txt", "2010/b.txt"]);
    }

    proptest! {
        #[test]
        fn segmentation_covers_text(text in "[A-Za-z .!?\n:-]{0,80}") {
            let d = doc(&text);
            let joined: String = segment_sentences(&d).iter().map(|s| s.text.as_str()).collect();
            let strip = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>();
            prop_assert_eq!(strip(&joined), strip(&text));
        }

        #[test]
        fn tokens_are_ordered_and_in_bounds(text in "\\PC{0,40}") {
            let s = Sentence::new(text.clone(), Vec::<String>::new());
            let n = s.char_len();
            let mut prev_end = 0;
            for (i, &(a, b)) in s.tokens.iter().enumerate() {
                prop_assert!(a < b && b <= n);
                if i > 0 { prop_assert!(a >= prev_end); }
                prev_end = b;
            }
            for t in s.token_strs() {
                prop_assert!(!t.trim().is_empty());
            }
        }

        #[test]
        fn dedup_idempotent(words in proptest::collection::vec("(Pt|pt|walks|sits| |  )+", 0..20)) {
            let sents: Vec<Sentence> = words.iter().filter(|w| !w.trim().is_empty())
                .map(|w| Sentence::new(w.clone(), ["d".to_string()])).collect();
            let n = sents.len();
            let once = deduplicate_sentences(sents);
            prop_assert!(once.len() <= n);
            let twice = deduplicate_sentences(once.sentences().to_vec());
            prop_assert_eq!(once, twice);
        }
    }
}
