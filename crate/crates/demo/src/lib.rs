//! Browser bindings for three pieces of the summarizer that are easy to poke
//! at interactively: the copy gate, selection thresholding, and ROUGE.
//!
//! Slices cross the boundary as typed arrays; selections travel as `0`/`1`
//! bytes because wasm-bindgen has no `&[bool]`.

use wasm_bindgen::prelude::*;

use stagesum::metrics::rouge_scores;
use stagesum::model::mix_copy_logits;
use stagesum::selection::{calibrate_threshold, SelectionPrediction};
use stagesum::tensor::softmax_in_place;

fn mix(
    gen_logits: &[f64],
    copy_logits: &[f64],
    source_ids: &[u32],
    p_gen: f64,
    selected: &[u8],
) -> Result<Vec<f64>, String> {
    if !(0.0..=1.0).contains(&p_gen) {
        return Err(format!("p_gen {p_gen} outside [0, 1]"));
    }
    let ids: Vec<usize> = source_ids.iter().map(|&i| i as usize).collect();
    let pad = vec![false; ids.len()];
    let sel: Vec<bool> = selected.iter().map(|&s| s != 0).collect();
    let selection = (!sel.is_empty()).then_some(sel.as_slice());
    let mut z = mix_copy_logits(gen_logits, copy_logits, p_gen, &ids, &pad, selection).map_err(|e| e.to_string())?;
    softmax_in_place(&mut z);
    Ok(z)
}

/// Output distribution over the vocabulary for one decode step. An empty
/// `selected` leaves every source position copyable.
#[wasm_bindgen]
pub fn mix_distribution(
    gen_logits: &[f64],
    copy_logits: &[f64],
    source_ids: &[u32],
    p_gen: f64,
    selected: &[u8],
) -> Result<Vec<f64>, JsError> {
    mix(gen_logits, copy_logits, source_ids, p_gen, selected).map_err(|e| JsError::new(&e))
}

fn calibrate_pairs(scores: &[f64], labels: &[u8]) -> Result<Vec<f64>, String> {
    if scores.len() != labels.len() {
        return Err(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    let pairs: Vec<(f64, bool)> = scores.iter().zip(labels).map(|(&p, &y)| (p, y != 0)).collect();
    let (eps, f1) = calibrate_threshold(&pairs).map_err(|e| e.to_string())?;
    Ok(vec![eps, f1])
}

/// `[ε, F1]` of the F1-maximising threshold.
#[wasm_bindgen]
pub fn calibrate(scores: &[f64], labels: &[u8]) -> Result<Vec<f64>, JsError> {
    calibrate_pairs(scores, labels).map_err(|e| JsError::new(&e))
}

/// `1` where the score clears the threshold.
#[wasm_bindgen]
pub fn select(scores: &[f64], threshold: f64) -> Vec<u8> {
    SelectionPrediction {
        p: scores.to_vec(),
        threshold: Some(threshold),
    }
    .selected()
    .into_iter()
    .map(u8::from)
    .collect()
}

/// ROUGE-1, ROUGE-2 and ROUGE-L as `[p, r, f1]` triples, in that order.
#[wasm_bindgen]
pub fn rouge(reference: &str, hypothesis: &str) -> Vec<f64> {
    let s = rouge_scores(reference, hypothesis);
    [s.rouge1, s.rouge2, s.rouge_l]
        .iter()
        .flat_map(|p| [p.precision, p.recall, p.f1])
        .collect()
}
