//! Rule-generated corpora for the three training stages.
//!
//! Every sentence is `DET ADJ NOUN VERB DET NOUN .` over a closed lexicon in
//! which each noun and verb has one synonym. Documents only use base words.
//! A summary keeps the subject, verb and object of the salient sentences and
//! swaps a word for its synonym when the word's index within its class falls
//! below `⌈α·|class|⌉`, so the abstraction rate tracks α and the right
//! summary always follows from the document and the synonym table.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{write_lines, write_pairs, Record, Vocabulary, RESERVED};

const DETERMINERS: [&str; 4] = ["the", "a", "this", "that"];

const ADJECTIVES: [&str; 12] = [
    "red", "big", "old", "new", "small", "green", "quiet", "bright", "heavy", "young", "cold", "happy",
];

const NOUNS: [(&str, &str); 32] = [
    ("car", "automobile"),
    ("house", "dwelling"),
    ("doctor", "physician"),
    ("child", "kid"),
    ("road", "street"),
    ("boat", "ship"),
    ("city", "town"),
    ("gift", "present"),
    ("shop", "store"),
    ("film", "movie"),
    ("job", "occupation"),
    ("baby", "infant"),
    ("stone", "rock"),
    ("river", "stream"),
    ("forest", "woods"),
    ("hill", "mound"),
    ("lawyer", "attorney"),
    ("pupil", "student"),
    ("teacher", "tutor"),
    ("friend", "companion"),
    ("journey", "trip"),
    ("hat", "cap"),
    ("garden", "yard"),
    ("rabbit", "bunny"),
    ("sofa", "couch"),
    ("rubbish", "trash"),
    ("story", "tale"),
    ("answer", "reply"),
    ("photo", "picture"),
    ("ocean", "sea"),
    ("coat", "jacket"),
    ("lorry", "truck"),
];

const VERBS: [(&str, &str); 24] = [
    ("bought", "purchased"),
    ("saw", "noticed"),
    ("built", "constructed"),
    ("fixed", "repaired"),
    ("found", "discovered"),
    ("helped", "assisted"),
    ("began", "started"),
    ("ended", "finished"),
    ("chose", "selected"),
    ("needed", "required"),
    ("wanted", "desired"),
    ("liked", "enjoyed"),
    ("hid", "concealed"),
    ("gave", "donated"),
    ("showed", "displayed"),
    ("sold", "traded"),
    ("kept", "retained"),
    ("moved", "relocated"),
    ("asked", "questioned"),
    ("tried", "attempted"),
    ("got", "obtained"),
    ("carried", "hauled"),
    ("painted", "coloured"),
    ("cleaned", "washed"),
];

const STOP: &str = ".";

/// Smallest vocabulary the fixed lexicon fits in.
pub const MIN_VOCAB: usize =
    RESERVED.len() + DETERMINERS.len() + ADJECTIVES.len() + 2 * NOUNS.len() + 2 * VERBS.len() + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Plain sentences mixing base words and synonyms, for denoising.
    Generic,
    /// Short document and a three-word headline of its lead sentence.
    Shortform,
    /// Long document and one bullet per sentence about the lead subject.
    Longform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub kind: TaskKind,
    /// Total vocabulary size including reserved entries; slots beyond the
    /// fixed lexicon become extra adjectives.
    pub vocab_size: usize,
    pub num_examples: usize,
    /// Inclusive range of document sentences.
    pub input_sentences: [usize; 2],
    /// Inclusive range of summarized sentences. Ignored for `generic`.
    pub output_sentences: [usize; 2],
    /// Fraction of each substitutable word class written as its synonym.
    pub alpha_abs: f64,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn generic(num_examples: usize, seed: u64) -> Self {
        CorpusSpec {
            kind: TaskKind::Generic,
            vocab_size: MIN_VOCAB,
            num_examples,
            input_sentences: [1, 3],
            output_sentences: [0, 0],
            alpha_abs: 0.5,
            seed,
        }
    }

    /// Up to 21 document pieces and a 3-piece headline.
    pub fn shortform(num_examples: usize, seed: u64) -> Self {
        CorpusSpec {
            kind: TaskKind::Shortform,
            vocab_size: MIN_VOCAB,
            num_examples,
            input_sentences: [2, 3],
            output_sentences: [1, 1],
            alpha_abs: 0.5,
            seed,
        }
    }

    /// 84 to 112 document pieces and 12 to 16 summary pieces.
    pub fn longform(num_examples: usize, seed: u64) -> Self {
        CorpusSpec {
            kind: TaskKind::Longform,
            vocab_size: MIN_VOCAB,
            num_examples,
            input_sentences: [12, 16],
            output_sentences: [3, 4],
            alpha_abs: 0.15,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size {} cannot hold the synonym table ({MIN_VOCAB} entries)",
                self.vocab_size
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha_abs) {
            return Err(Error::Config(format!("alpha_abs {} outside [0, 1]", self.alpha_abs)));
        }
        let [lo, hi] = self.input_sentences;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("bad input_sentences range [{lo}, {hi}]")));
        }
        let [olo, ohi] = self.output_sentences;
        match self.kind {
            TaskKind::Generic => {}
            TaskKind::Shortform => {
                if [olo, ohi] != [1, 1] || lo < 2 {
                    return Err(Error::Config(
                        "shortform needs output_sentences [1, 1] and at least 2 input sentences".into(),
                    ));
                }
            }
            TaskKind::Longform => {
                if olo == 0 || olo > ohi || ohi >= lo {
                    return Err(Error::Config(format!(
                        "longform output_sentences [{olo}, {ohi}] must be non-empty and shorter than the input"
                    )));
                }
                if ohi > NOUNS.len() {
                    return Err(Error::Config("too many summarized sentences".into()));
                }
            }
        }
        Ok(())
    }
}

/// The closed word list with its synonym table.
#[derive(Clone, Debug)]
pub struct Lexicon {
    adjectives: Vec<String>,
}

impl Lexicon {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size < MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} cannot hold the synonym table ({MIN_VOCAB} entries)"
            )));
        }
        let mut adjectives: Vec<String> = ADJECTIVES.iter().map(|s| s.to_string()).collect();
        adjectives.extend((0..vocab_size - MIN_VOCAB).map(|i| format!("shade{i}")));
        Ok(Lexicon { adjectives })
    }

    /// Every word in id order after the reserved entries.
    pub fn words(&self) -> Vec<String> {
        let mut w: Vec<String> = DETERMINERS.iter().map(|s| s.to_string()).collect();
        w.extend(self.adjectives.iter().cloned());
        w.extend(NOUNS.iter().map(|p| p.0.to_string()));
        w.extend(NOUNS.iter().map(|p| p.1.to_string()));
        w.extend(VERBS.iter().map(|p| p.0.to_string()));
        w.extend(VERBS.iter().map(|p| p.1.to_string()));
        w.push(STOP.to_string());
        w
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_words(self.words())
    }

    /// Synonym of a base noun or verb.
    pub fn synonym(word: &str) -> Option<&'static str> {
        NOUNS.iter().chain(VERBS.iter()).find(|p| p.0 == word).map(|p| p.1)
    }
}

/// Whether the word at `index` of a class of `size` is swapped for its synonym.
pub fn substituted(index: usize, size: usize, alpha: f64) -> bool {
    (index as f64) < (alpha * size as f64).ceil()
}

#[derive(Clone, Copy, Debug)]
struct Sentence {
    det: [usize; 2],
    adj: usize,
    subj: usize,
    verb: usize,
    obj: usize,
}

impl Sentence {
    fn sample<R: Rng>(rng: &mut R, adjectives: usize, subj: usize, excluded: Option<usize>) -> Self {
        let obj = loop {
            let o = rng.random_range(0..NOUNS.len());
            if o != subj && Some(o) != excluded {
                break o;
            }
        };
        Sentence {
            det: [
                rng.random_range(0..DETERMINERS.len()),
                rng.random_range(0..DETERMINERS.len()),
            ],
            adj: rng.random_range(0..adjectives),
            subj,
            verb: rng.random_range(0..VERBS.len()),
            obj,
        }
    }

    /// Words of the sentence; `synonyms` picks per-slot synonym use for the
    /// subject, verb and object.
    fn words<'a>(&self, lex: &'a Lexicon, synonyms: [bool; 3]) -> Vec<&'a str> {
        let noun = |i: usize, syn: bool| if syn { NOUNS[i].1 } else { NOUNS[i].0 };
        vec![
            DETERMINERS[self.det[0]],
            &lex.adjectives[self.adj],
            noun(self.subj, synonyms[0]),
            if synonyms[1] {
                VERBS[self.verb].1
            } else {
                VERBS[self.verb].0
            },
            DETERMINERS[self.det[1]],
            noun(self.obj, synonyms[2]),
            STOP,
        ]
    }

    fn summary(&self, alpha: f64) -> [&'static str; 3] {
        let n = |i: usize| {
            if substituted(i, NOUNS.len(), alpha) {
                NOUNS[i].1
            } else {
                NOUNS[i].0
            }
        };
        let v = if substituted(self.verb, VERBS.len(), alpha) {
            VERBS[self.verb].1
        } else {
            VERBS[self.verb].0
        };
        [n(self.subj), v, n(self.obj)]
    }
}

/// A generated corpus: pairs for the summarization kinds, plain lines for
/// the generic kind.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub vocab: Vocabulary,
    pub records: Vec<Record>,
    pub lines: Vec<String>,
}

fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let lex = Lexicon::new(spec.vocab_size)?;
    let vocab = lex.vocabulary()?;
    let mut records = Vec::new();
    let mut lines = Vec::new();
    for i in 0..spec.num_examples {
        let mut rng = example_rng(spec.seed, i);
        match spec.kind {
            TaskKind::Generic => lines.push(generic_line(&lex, spec, &mut rng)),
            TaskKind::Shortform => records.push(shortform_pair(&lex, spec, &mut rng)),
            TaskKind::Longform => records.push(longform_pair(&lex, spec, &mut rng)),
        }
    }
    Ok(Corpus {
        spec: spec.clone(),
        vocab,
        records,
        lines,
    })
}

fn range<R: Rng>(rng: &mut R, [lo, hi]: [usize; 2]) -> usize {
    rng.random_range(lo..=hi)
}

fn generic_line<R: Rng>(lex: &Lexicon, spec: &CorpusSpec, rng: &mut R) -> String {
    let n = range(rng, spec.input_sentences);
    let mut words = Vec::new();
    for _ in 0..n {
        let subj = rng.random_range(0..NOUNS.len());
        let s = Sentence::sample(rng, lex.adjectives.len(), subj, None);
        let syn = [
            rng.random_bool(spec.alpha_abs),
            rng.random_bool(spec.alpha_abs),
            rng.random_bool(spec.alpha_abs),
        ];
        words.extend(s.words(lex, syn));
    }
    words.join(" ")
}

fn shortform_pair<R: Rng>(lex: &Lexicon, spec: &CorpusSpec, rng: &mut R) -> Record {
    let n = range(rng, spec.input_sentences);
    let sentences: Vec<Sentence> = (0..n)
        .map(|_| {
            let subj = rng.random_range(0..NOUNS.len());
            Sentence::sample(rng, lex.adjectives.len(), subj, None)
        })
        .collect();
    let document = join_sentences(lex, &sentences);
    Record {
        document,
        summary: sentences[0].summary(spec.alpha_abs).join(" "),
    }
}

/// The lead subject is the topic noun. It is the subject of exactly the
/// summarized sentences (the lead included) and appears nowhere else.
fn longform_pair<R: Rng>(lex: &Lexicon, spec: &CorpusSpec, rng: &mut R) -> Record {
    let n = range(rng, spec.input_sentences);
    let m = range(rng, spec.output_sentences);
    let topic = rng.random_range(0..NOUNS.len());
    let slots: Vec<usize> = (1..n).collect();
    let mut topical = vec![false; n];
    topical[0] = true;
    for &i in slots.choose_multiple(rng, m - 1) {
        topical[i] = true;
    }
    let others: Vec<usize> = (0..NOUNS.len()).filter(|&i| i != topic).collect();
    let sentences: Vec<Sentence> = topical
        .iter()
        .map(|&t| {
            let subj = if t {
                topic
            } else {
                *others.choose(rng).expect("non-empty")
            };
            Sentence::sample(rng, lex.adjectives.len(), subj, Some(topic))
        })
        .collect();
    let document = join_sentences(lex, &sentences);
    let summary: Vec<String> = sentences
        .iter()
        .zip(&topical)
        .filter(|(_, &t)| t)
        .map(|(s, _)| format!("{} {STOP}", s.summary(spec.alpha_abs).join(" ")))
        .collect();
    Record {
        document,
        summary: summary.join(" "),
    }
}

fn join_sentences(lex: &Lexicon, sentences: &[Sentence]) -> String {
    sentences
        .iter()
        .flat_map(|s| s.words(lex, [false; 3]))
        .collect::<Vec<_>>()
        .join(" ")
}

impl Corpus {
    /// Writes `corpus.tsv` (or `corpus.txt` for generic text), `vocab.txt`
    /// and the `spec.json` sidecar into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        match self.spec.kind {
            TaskKind::Generic => write_lines(&dir.join("corpus.txt"), &self.lines)?,
            _ => write_pairs(&dir.join("corpus.tsv"), &self.records)?,
        }
        self.vocab.save(&dir.join("vocab.txt"))?;
        let spec = serde_json::to_string_pretty(&self.spec).map_err(|e| Error::Parse(e.to_string()))?;
        let path = dir.join("spec.json");
        fs::write(&path, spec + "\n").map_err(|e| Error::io(&path, e))
    }
}
