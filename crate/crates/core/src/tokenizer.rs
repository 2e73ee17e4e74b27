//! Uncased WordPiece tokenization, vocabulary files, fixed-length encoding
//! and corpus file reading.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const MASK_ID: usize = 4;

pub const RESERVED: [&str; 5] = [PAD, UNK, BOS, EOS, MASK];

const MAX_WORD_CHARS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary whose line order is the id order. The reserved
    /// entries must occupy ids 0..5.
    pub fn new(pieces: Vec<String>) -> Result<Self> {
        for (id, r) in RESERVED.iter().enumerate() {
            if pieces.get(id).map(String::as_str) != Some(*r) {
                return Err(Error::Config(format!("vocabulary must hold {r} at id {id}")));
            }
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (id, p) in pieces.iter().enumerate() {
            if p.is_empty() || p.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid piece {p:?} at id {id}")));
            }
            if index.insert(p.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate piece {p:?}")));
            }
        }
        Ok(Vocabulary { pieces, index })
    }

    /// Reserved entries followed by `words` in order, duplicates dropped.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut pieces: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.into();
            if !pieces.contains(&w) {
                pieces.push(w);
            }
        }
        Self::new(pieces)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.pieces.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    /// True when only the reserved entries are present.
    pub fn is_empty(&self) -> bool {
        self.pieces.len() <= RESERVED.len()
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn ids(&self, pieces: &[String]) -> Vec<usize> {
        pieces.iter().map(|p| self.id(p).unwrap_or(UNK_ID)).collect()
    }
}

/// Lowercases, splits on whitespace and isolates punctuation characters.
pub fn basic_split(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars().flat_map(char::to_lowercase) {
            if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_ascii()) {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
    }
    words
}

/// Greedy longest-match-first split of one word; `None` when no full split exists.
fn split_word(word: &str, vocab: &Vocabulary) -> Option<Vec<String>> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return None;
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let mut cand: String = chars[start..end].iter().collect();
            if start > 0 {
                cand.insert_str(0, "##");
            }
            if vocab.id(&cand).is_some() {
                found = Some(cand);
                break;
            }
            end -= 1;
        }
        out.push(found?);
        start = end;
    }
    Some(out)
}

pub fn wordpiece_tokenize(text: &str, vocab: &Vocabulary) -> Result<Vec<String>> {
    if vocab.is_empty() {
        return Err(Error::Config("vocabulary has no word pieces".into()));
    }
    Ok(basic_split(text)
        .into_iter()
        .flat_map(|w| split_word(&w, vocab).unwrap_or_else(|| vec![UNK.to_string()]))
        .collect())
}

pub fn tokenize_ids(text: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    Ok(vocab.ids(&wordpiece_tokenize(text, vocab)?))
}

/// Joins pieces with single spaces, merging `##` continuations. PAD, BOS and
/// EOS are dropped.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for &id in ids {
        if matches!(id, PAD_ID | BOS_ID | EOS_ID) {
            continue;
        }
        let piece = vocab.piece(id).unwrap_or(UNK);
        match piece.strip_prefix("##") {
            Some(rest) if !out.is_empty() => out.push_str(rest),
            _ => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(piece);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub source: usize,
    pub target: usize,
}

impl Limits {
    /// Short-form news limits (128/64).
    pub const SHORT_FORM: Limits = Limits {
        source: 128,
        target: 64,
    };
    /// Long-form news limits (640/96).
    pub const LONG_FORM: Limits = Limits {
        source: 640,
        target: 96,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub source_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub source_pad_mask: Vec<bool>,
    pub target_pad_mask: Vec<bool>,
    pub source_truncated: bool,
    pub target_truncated: bool,
}

impl EncodedExample {
    /// Builds an example from id sequences; the target gets EOS appended
    /// unless empty. Both sides are cut at the limit (keeping the start) and
    /// padded.
    pub fn from_ids(source: &[usize], summary: &[usize], limits: Limits) -> Result<Self> {
        if limits.source == 0 || limits.target == 0 {
            return Err(Error::Config("sequence limits must be positive".into()));
        }
        let mut target = summary.to_vec();
        if !target.is_empty() {
            target.push(EOS_ID);
        }
        let (source_ids, source_pad_mask, source_truncated) = fit(source, limits.source);
        let (target_ids, target_pad_mask, target_truncated) = fit(&target, limits.target);
        Ok(EncodedExample {
            source_ids,
            target_ids,
            source_pad_mask,
            target_pad_mask,
            source_truncated,
            target_truncated,
        })
    }

    pub fn source_content(&self) -> &[usize] {
        &self.source_ids[..crate::model::content_len(&self.source_pad_mask)]
    }

    /// Target ids up to but excluding EOS and padding.
    pub fn summary_content(&self) -> &[usize] {
        let t = crate::model::content_len(&self.target_pad_mask);
        let ids = &self.target_ids[..t];
        match ids.last() {
            Some(&EOS_ID) => &ids[..t - 1],
            _ => ids,
        }
    }
}

fn fit(ids: &[usize], limit: usize) -> (Vec<usize>, Vec<bool>, bool) {
    let truncated = ids.len() > limit;
    let kept = ids.len().min(limit);
    let mut out = ids[..kept].to_vec();
    out.resize(limit, PAD_ID);
    let mask = (0..limit).map(|i| i >= kept).collect();
    (out, mask, truncated)
}

pub fn encode_pair(doc: &str, summary: &str, vocab: &Vocabulary, limits: Limits) -> Result<EncodedExample> {
    let source = tokenize_ids(doc, vocab)?;
    let target = tokenize_ids(summary, vocab)?;
    EncodedExample::from_ids(&source, &target, limits)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationReport {
    pub input_trunc_rate: f64,
    pub output_trunc_rate: f64,
}

pub fn truncation_report(corpus: &[EncodedExample]) -> Result<TruncationReport> {
    if corpus.is_empty() {
        return Err(Error::Report("truncation report over an empty corpus".into()));
    }
    let n = corpus.len() as f64;
    let input = corpus.iter().filter(|e| e.source_truncated).count() as f64;
    let output = corpus.iter().filter(|e| e.target_truncated).count() as f64;
    Ok(TruncationReport {
        input_trunc_rate: input / n,
        output_trunc_rate: output / n,
    })
}

/// One document/summary pair as read from a corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub document: String,
    pub summary: String,
}

/// Reads a pair corpus: one record per line, either `document<TAB>summary`
/// or a JSON object with `document` and `summary` fields.
pub fn read_pairs(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| parse_record(line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1))))
        .collect()
}

fn parse_record(line: &str) -> std::result::Result<Record, String> {
    if line.trim_start().starts_with('{') {
        return serde_json::from_str(line).map_err(|e| e.to_string());
    }
    let mut fields = line.splitn(2, '\t');
    let document = fields.next().unwrap_or_default();
    let summary = fields.next().ok_or("expected document<TAB>summary")?;
    if summary.contains('\t') {
        return Err("more than one TAB separator".into());
    }
    Ok(Record {
        document: document.to_string(),
        summary: summary.to_string(),
    })
}

pub fn write_pairs(path: &Path, records: &[Record]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        if r.document.contains(['\t', '\n']) || r.summary.contains(['\t', '\n']) {
            return Err(Error::Validation("record fields may not contain TAB or newline".into()));
        }
        text.push_str(&r.document);
        text.push('\t');
        text.push_str(&r.summary);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a plain-text corpus, one sequence per line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn encode_records(records: &[Record], vocab: &Vocabulary, limits: Limits) -> Result<Vec<EncodedExample>> {
    records
        .iter()
        .map(|r| encode_pair(&r.document, &r.summary, vocab, limits))
        .collect()
}
