//! Greedy and beam-search decoding.

use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamStore;
use crate::error::{Error, Result};
use crate::model::{DecodeSession, ModelConfig};
use crate::tokenizer::{detokenize, EncodedExample, Vocabulary, EOS_ID};

/// Anything that yields next-token log-probabilities for a prefix.
pub trait StepScorer {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;

    /// Largest number of tokens that can be emitted.
    fn max_steps(&self) -> usize;
}

impl StepScorer for DecodeSession<'_> {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        DecodeSession::next_log_probs(self, prefix)
    }

    fn max_steps(&self) -> usize {
        self.decoder_positions()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Emitted tokens, including a final EOS when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens with the trailing EOS removed.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS_ID) if self.finished => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn penalized_score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.tokens.len(), alpha)
    }
}

/// `((5 + |Y|) / 6)^α`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// Index of the largest value; ties resolve to the lowest index.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_search<S: StepScorer>(scorer: &mut S, max_len: usize) -> Result<Hypothesis> {
    let limit = max_len.min(scorer.max_steps());
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while h.tokens.len() < limit {
        let lp = scorer.next_log_probs(&h.tokens)?;
        let tok = argmax(&lp);
        h.log_prob += lp[tok];
        h.tokens.push(tok);
        if tok == EOS_ID {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Beam search keeping the `width` best candidates of each step. Candidates
/// ending in EOS leave the beam and are ranked by length-penalized score;
/// the best finished hypothesis wins, else the best unfinished one.
pub fn beam_search<S: StepScorer>(scorer: &mut S, width: usize, alpha: f64, max_len: usize) -> Result<Hypothesis> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let limit = max_len.min(scorer.max_steps());
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..limit {
        // (score, beam index, token); order is deterministic.
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, h) in live.iter().enumerate() {
            let lp = scorer.next_log_probs(&h.tokens)?;
            cands.extend(lp.iter().enumerate().map(|(tok, &l)| (h.log_prob + l, b, tok)));
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        cands.truncate(width);
        let mut next = Vec::with_capacity(width);
        for (score, b, tok) in cands {
            let mut tokens = live[b].tokens.clone();
            tokens.push(tok);
            let h = Hypothesis {
                tokens,
                log_prob: score,
                finished: tok == EOS_ID,
            };
            if h.finished {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    let best = |pool: Vec<Hypothesis>| {
        pool.into_iter().reduce(|a, b| {
            if b.penalized_score(alpha) > a.penalized_score(alpha) {
                b
            } else {
                a
            }
        })
    };
    match best(finished) {
        Some(h) => Ok(h),
        None => best(live).ok_or_else(|| Error::Decode("beam search produced no hypothesis".into())),
    }
}

/// Decoding settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    /// `1` means greedy decoding.
    pub beam_width: usize,
    pub alpha: f64,
    /// Defaults to the decoder position limit.
    #[serde(default)]
    pub max_len: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 4,
            alpha: 0.6,
            max_len: None,
        }
    }
}

impl DecodeConfig {
    pub const GREEDY: DecodeConfig = DecodeConfig {
        beam_width: 1,
        alpha: 0.0,
        max_len: None,
    };
}

pub fn greedy_decode(
    params: &ParamStore,
    cfg: &ModelConfig,
    source_ids: &[usize],
    pad_mask: &[bool],
    selection: Option<&[bool]>,
    max_len: usize,
) -> Result<Hypothesis> {
    let mut session = DecodeSession::new(params, cfg, source_ids, pad_mask, selection)?;
    greedy_search(&mut session, max_len)
}

#[allow(clippy::too_many_arguments)]
pub fn beam_decode(
    params: &ParamStore,
    cfg: &ModelConfig,
    source_ids: &[usize],
    pad_mask: &[bool],
    selection: Option<&[bool]>,
    beam_width: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Hypothesis> {
    let mut session = DecodeSession::new(params, cfg, source_ids, pad_mask, selection)?;
    beam_search(&mut session, beam_width, alpha, max_len)
}

/// Greedy when the width is 1, beam search otherwise.
pub fn decode(
    params: &ParamStore,
    cfg: &ModelConfig,
    source_ids: &[usize],
    pad_mask: &[bool],
    selection: Option<&[bool]>,
    settings: &DecodeConfig,
) -> Result<Hypothesis> {
    let max_len = settings.max_len.unwrap_or(cfg.decoder_positions);
    if settings.beam_width == 1 {
        greedy_decode(params, cfg, source_ids, pad_mask, selection, max_len)
    } else {
        beam_decode(
            params,
            cfg,
            source_ids,
            pad_mask,
            selection,
            settings.beam_width,
            settings.alpha,
            max_len,
        )
    }
}

/// Decodes every example; `selections` holds one mask per example when given.
pub fn decode_corpus(
    params: &ParamStore,
    cfg: &ModelConfig,
    examples: &[EncodedExample],
    selections: Option<&[Vec<bool>]>,
    settings: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    if let Some(sel) = selections {
        if sel.len() != examples.len() {
            return Err(Error::Validation(format!(
                "{} selection masks for {} examples",
                sel.len(),
                examples.len()
            )));
        }
    }
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let sel = selections.map(|s| s[i].as_slice());
            decode(params, cfg, &ex.source_ids, &ex.source_pad_mask, sel, settings)
        })
        .collect()
}

/// Detokenized summary text of each hypothesis.
pub fn summaries(hyps: &[Hypothesis], vocab: &Vocabulary) -> Vec<String> {
    hyps.iter().map(|h| detokenize(h.content(), vocab)).collect()
}
