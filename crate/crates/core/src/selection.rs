//! Content selection: alignment labels, the per-token selector head,
//! threshold calibration and copy-logit masking.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamStore;
use crate::error::{Error, Result};
use crate::model::{content_len, encode_on, Bound, Dropout, ModelConfig};
use crate::tape::{Tape, Var, MIN_LOG_PROB};
use crate::tensor::{sigmoid, Tensor, MASK_OFFSET};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelProvenance {
    Aligned,
    OracleInjected,
}

/// Binary labels over the non-pad source positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionLabels {
    pub y: Vec<bool>,
    pub provenance: LabelProvenance,
}

impl SelectionLabels {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Same labels marked for use as oracle selection.
    pub fn as_oracle(&self) -> SelectionLabels {
        SelectionLabels {
            y: self.y.clone(),
            provenance: LabelProvenance::OracleInjected,
        }
    }
}

/// Length and start of the longest run shared by the live part of `summary`
/// and `doc`. Ties go to the leftmost document start, then the leftmost
/// summary start.
fn longest_shared<T: PartialEq>(doc: &[T], summary: &[Option<&T>]) -> Option<(usize, usize, usize)> {
    let mut best: Option<(usize, usize, usize)> = None;
    for j in 0..doc.len() {
        for i in 0..summary.len() {
            let mut l = 0;
            while j + l < doc.len() && i + l < summary.len() && summary[i + l] == Some(&doc[j + l]) {
                l += 1;
            }
            if l > 0 && best.is_none_or(|(bl, _, _)| l > bl) {
                best = Some((l, j, i));
            }
        }
    }
    best
}

/// Greedy longest-n-gram alignment between a document and its summary.
///
/// Repeatedly takes the longest contiguous run shared by the remaining
/// summary and the document, marks the document positions and removes the
/// run from the summary, until nothing is shared.
pub fn build_labels<T: PartialEq>(doc: &[T], summary: &[T]) -> SelectionLabels {
    let mut y = vec![false; doc.len()];
    let mut live: Vec<Option<&T>> = summary.iter().map(Some).collect();
    while let Some((len, j, i)) = longest_shared(doc, &live) {
        y[j..j + len].iter_mut().for_each(|v| *v = true);
        live[i..i + len].iter_mut().for_each(|v| *v = None);
    }
    SelectionLabels {
        y,
        provenance: LabelProvenance::Aligned,
    }
}

/// Selector output over the non-pad source positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionPrediction {
    pub p: Vec<f64>,
    pub threshold: Option<f64>,
}

impl SelectionPrediction {
    /// `p_i > ε`; every position is kept when no threshold is set.
    pub fn selected(&self) -> Vec<bool> {
        match self.threshold {
            Some(eps) => self.p.iter().map(|&p| p > eps).collect(),
            None => vec![true; self.p.len()],
        }
    }
}

/// What decides which copy logits survive.
#[derive(Clone, Copy, Debug)]
pub enum MaskSource<'a> {
    Predicted(&'a SelectionPrediction),
    Oracle(&'a SelectionLabels),
}

impl MaskSource<'_> {
    pub fn selected(&self) -> Vec<bool> {
        match self {
            MaskSource::Predicted(p) => p.selected(),
            MaskSource::Oracle(l) => l.y.clone(),
        }
    }
}

/// `0` for kept positions, `-10000` for dropped ones.
pub fn mask_offsets(selected: &[bool]) -> Vec<f64> {
    selected.iter().map(|&s| if s { 0.0 } else { MASK_OFFSET }).collect()
}

/// Offsets dropped positions of `copy_logits` by `-10000`.
pub fn apply_mask(copy_logits: &[f64], selected: &[bool]) -> Result<Vec<f64>> {
    if copy_logits.len() != selected.len() {
        return Err(Error::Shape(format!(
            "{} copy logits against a selection over {}",
            copy_logits.len(),
            selected.len()
        )));
    }
    Ok(copy_logits
        .iter()
        .zip(mask_offsets(selected))
        .map(|(a, o)| a + o)
        .collect())
}

pub fn apply_selection_mask(copy_logits: &[f64], source: MaskSource<'_>) -> Result<Vec<f64>> {
    apply_mask(copy_logits, &source.selected())
}

/// `σ(x_sᵀ c_i + b_s)` for each row of the encoder outputs.
pub fn selector_head(weight: &Tensor, bias: &Tensor, encoded: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = encoded.dims2()?;
    if weight.len() != cols || bias.len() != 1 {
        return Err(Error::Shape(format!(
            "selector head {:?}/{:?} against hidden {cols}",
            weight.shape(),
            bias.shape()
        )));
    }
    let b = bias.data()[0];
    Ok((0..rows)
        .map(|i| {
            let z: f64 = encoded.row(i).iter().zip(weight.data()).map(|(c, w)| c * w).sum();
            sigmoid(z + b)
        })
        .collect())
}

/// Selection probabilities over the non-pad source positions.
pub fn selector_forward(
    params: &ParamStore,
    cfg: &ModelConfig,
    source_ids: &[usize],
    pad_mask: &[bool],
) -> Result<SelectionPrediction> {
    let s = content_len(pad_mask);
    let encoded = crate::model::encode(params, cfg, &source_ids[..s], &pad_mask[..s])?;
    let p = selector_head(
        params.require("selector.weight")?,
        params.require("selector.bias")?,
        &encoded,
    )?;
    Ok(SelectionPrediction { p, threshold: None })
}

fn clamped_ln(x: f64) -> f64 {
    x.ln().max(MIN_LOG_PROB)
}

/// Mean binary cross-entropy over labelled positions, logs clamped at
/// `ln 1e-30`.
pub fn selector_loss(prediction: &SelectionPrediction, labels: &SelectionLabels) -> Result<f64> {
    if prediction.p.len() != labels.y.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            prediction.p.len(),
            labels.y.len()
        )));
    }
    if labels.y.is_empty() {
        return Err(Error::Validation("selector loss over no positions".into()));
    }
    let total: f64 = prediction
        .p
        .iter()
        .zip(&labels.y)
        .map(|(&p, &y)| if y { -clamped_ln(p) } else { -clamped_ln(1.0 - p) })
        .sum();
    Ok(total / labels.y.len() as f64)
}

/// Selector loss of one example on a tape, summed and divided by `denom`.
#[allow(clippy::too_many_arguments)]
pub fn selector_example_loss<R: Rng>(
    tape: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    source_ids: &[usize],
    pad_mask: &[bool],
    labels: &SelectionLabels,
    dropout: &mut Option<Dropout<'_, R>>,
    denom: f64,
) -> Result<Var> {
    let s = content_len(pad_mask);
    if labels.y.len() != s {
        return Err(Error::Shape(format!(
            "{} labels for {s} source positions",
            labels.y.len()
        )));
    }
    let enc = encode_on(tape, b, cfg, &source_ids[..s], &pad_mask[..s], dropout)?;
    let z = tape.matmul_ext(enc, b.get("selector.weight")?, false, true)?;
    let z = tape.add_scalar(z, b.get("selector.bias")?)?;
    let y: Vec<Option<f64>> = labels.y.iter().map(|&v| Some(if v { 1.0 } else { 0.0 })).collect();
    tape.bce_logits(z, &y, denom)
}

fn f1(tp: usize, selected: usize, positives: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (selected + positives) as f64
    }
}

/// F1 of `p > eps` against the labels.
pub fn f1_at(pairs: &[(f64, bool)], eps: f64) -> f64 {
    let positives = pairs.iter().filter(|(_, y)| *y).count();
    let selected = pairs.iter().filter(|(p, _)| *p > eps).count();
    let tp = pairs.iter().filter(|(p, y)| *y && *p > eps).count();
    f1(tp, selected, positives)
}

/// Midpoint between consecutive distinct scores maximising F1 of `p > ε`;
/// ties go to the smaller ε. Returns `(ε, F1)`.
pub fn calibrate_threshold(pairs: &[(f64, bool)]) -> Result<(f64, f64)> {
    let positives = pairs.iter().filter(|(_, y)| *y).count();
    if positives == 0 || positives == pairs.len() {
        return Err(Error::Calibration(
            "threshold calibration needs both positive and negative labels".into(),
        ));
    }
    if pairs.iter().any(|(p, _)| !p.is_finite()) {
        return Err(Error::Calibration("non-finite selection score".into()));
    }
    let mut sorted: Vec<(f64, bool)> = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    // Walk from the highest score down; after consuming every entry equal to
    // the current value, the threshold just below it selects exactly those.
    let mut best: Option<(f64, f64)> = None;
    let (mut tp, mut sel) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            sel += 1;
            tp += usize::from(sorted[i].1);
            i += 1;
        }
        if i == sorted.len() {
            break;
        }
        let eps = (v + sorted[i].0) / 2.0;
        let score = f1(tp, sel, positives);
        if best.is_none_or(|(_, b)| score >= b) {
            best = Some((eps, score));
        }
    }
    best.ok_or_else(|| Error::Calibration("all scores are equal; no midpoint exists".into()))
}

/// One line per example: space-separated `0`/`1` over non-pad positions.
pub fn labels_to_text(labels: &[SelectionLabels]) -> String {
    let mut out = String::new();
    for l in labels {
        let line: Vec<&str> = l.y.iter().map(|&v| if v { "1" } else { "0" }).collect();
        writeln!(out, "{}", line.join(" ")).expect("writing to a String");
    }
    out
}

pub fn labels_from_text(text: &str) -> Result<Vec<SelectionLabels>> {
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            let y = line
                .split_whitespace()
                .map(|t| match t {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(Error::Parse(format!("line {}: bad label {other:?}", n + 1))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SelectionLabels {
                y,
                provenance: LabelProvenance::Aligned,
            })
        })
        .collect()
}

pub fn write_label_dump(path: &Path, labels: &[SelectionLabels]) -> Result<()> {
    fs::write(path, labels_to_text(labels)).map_err(|e| Error::io(path, e))
}

pub fn read_label_dump(path: &Path) -> Result<Vec<SelectionLabels>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    labels_from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(y: &[bool]) -> Vec<u8> {
        y.iter().map(|&v| u8::from(v)).collect()
    }

    #[test]
    fn alignment_examples() {
        let l = build_labels(&["a", "b", "c", "d"], &["b", "c", "e"]);
        assert_eq!(bits(&l.y), [0, 1, 1, 0]);
        assert_eq!(bits(&build_labels(&[1, 2], &[3, 4]).y), [0, 0]);
        assert_eq!(bits(&build_labels(&[1, 2, 3], &[1, 2, 3]).y), [1, 1, 1]);
    }

    #[test]
    fn alignment_prefers_longest_then_leftmost() {
        // "x y" occurs twice in the document; the leftmost wins.
        let l = build_labels(&[9, 1, 2, 9, 1, 2, 3], &[1, 2, 3]);
        assert_eq!(bits(&l.y), [0, 0, 0, 0, 1, 1, 1]);
        let l = build_labels(&[1, 2, 5, 1, 2], &[1, 2]);
        assert_eq!(bits(&l.y), [1, 1, 0, 0, 0]);
    }

    #[test]
    fn removed_spans_do_not_bridge() {
        // After [b c] is removed, [a d] is not contiguous in the summary.
        let l = build_labels(&["x", "b", "c", "y", "a", "d"], &["a", "b", "c", "d"]);
        assert_eq!(bits(&l.y), [0, 1, 1, 0, 1, 1]);
    }

    #[test]
    fn masking_example() {
        let pred = SelectionPrediction {
            p: vec![0.9, 0.1],
            threshold: Some(0.5),
        };
        let out = apply_selection_mask(&[2.0, 3.0], MaskSource::Predicted(&pred)).unwrap();
        assert_eq!(out, [2.0, -9997.0]);
        let oracle = SelectionLabels {
            y: vec![true, true],
            provenance: LabelProvenance::OracleInjected,
        };
        assert_eq!(
            apply_selection_mask(&[2.0, 3.0], MaskSource::Oracle(&oracle)).unwrap(),
            [2.0, 3.0]
        );
        let probs = crate::tensor::softmax(&Tensor::vector(out), 0).unwrap();
        assert!(probs.data()[1] < 1e-40);
    }

    #[test]
    fn head_saturation() {
        let enc = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let p = selector_head(&Tensor::vector(vec![0.0, 0.0]), &Tensor::vector(vec![0.0]), &enc).unwrap();
        assert_eq!(p, [0.5, 0.5]);
        let p = selector_head(&Tensor::vector(vec![0.0, 0.0]), &Tensor::vector(vec![-20.0]), &enc).unwrap();
        assert!(p.iter().all(|&v| v < 1e-8));
    }

    #[test]
    fn loss_values() {
        let labels = SelectionLabels {
            y: vec![true, false, true],
            provenance: LabelProvenance::Aligned,
        };
        let exact = SelectionPrediction {
            p: vec![1.0, 0.0, 1.0],
            threshold: None,
        };
        assert_eq!(selector_loss(&exact, &labels).unwrap(), 0.0);
        let half = SelectionPrediction {
            p: vec![0.5; 3],
            threshold: None,
        };
        assert!((selector_loss(&half, &labels).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let wrong = SelectionPrediction {
            p: vec![0.0, 1.0, 0.0],
            threshold: None,
        };
        assert!((selector_loss(&wrong, &labels).unwrap() + MIN_LOG_PROB).abs() < 1e-9);
        let empty = SelectionLabels {
            y: vec![],
            provenance: LabelProvenance::Aligned,
        };
        assert!(selector_loss(
            &SelectionPrediction {
                p: vec![],
                threshold: None
            },
            &empty
        )
        .is_err());
        assert!(selector_loss(&half, &empty).is_err());
    }

    #[test]
    fn tape_loss_gradient_matches_finite_differences() {
        let cfg = ModelConfig {
            num_layers: 1,
            hidden_size: 4,
            num_heads: 2,
            ffn_size: 6,
            vocab_size: 9,
            encoder_positions: 6,
            decoder_positions: 4,
            dropout_rate: 0.0,
            copy_enabled: true,
            copy_head_index: 0,
        };
        let mut store = crate::checkpoint::init_random(&cfg, crate::model::StoreKind::Selector, 4).unwrap();
        for (_, t) in store.iter_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.05 * ((i % 5) as f64 - 2.0);
            }
        }
        let ids = [5, 6, 7, 8];
        let pad = [false; 4];
        let labels = SelectionLabels {
            y: vec![true, false, false, true],
            provenance: LabelProvenance::Aligned,
        };
        let loss_of = |s: &ParamStore| -> (f64, Option<std::collections::BTreeMap<String, Tensor>>) {
            let mut tape = Tape::new();
            let b = Bound::new(&mut tape, s, true);
            let l = selector_example_loss::<rand_chacha::ChaCha8Rng>(
                &mut tape, &b, &cfg, &ids, &pad, &labels, &mut None, 4.0,
            )
            .unwrap();
            let g = tape.backward(l).unwrap();
            (tape.value(l).data()[0], Some(b.gradients(&g)))
        };
        let (l0, grads) = loss_of(&store);
        let grads = grads.unwrap();
        let direct = selector_loss(&selector_forward(&store, &cfg, &ids, &pad).unwrap(), &labels).unwrap();
        assert!((l0 - direct).abs() < 1e-12);
        for name in ["selector.weight", "selector.bias", "encoder.layer.0.ffn.in.weight"] {
            let n = store.get(name).unwrap().len();
            for i in 0..n.min(6) {
                let h = 1e-6;
                let mut plus = store.clone();
                plus.get_mut(name).unwrap().data_mut()[i] += h;
                let mut minus = store.clone();
                minus.get_mut(name).unwrap().data_mut()[i] -= h;
                let fd = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
                let an = grads[name].data()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{i}]: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn calibration_example() {
        let (eps, f) = calibrate_threshold(&[(0.2, false), (0.4, true), (0.9, true)]).unwrap();
        assert!((eps - 0.3).abs() < 1e-15);
        assert_eq!(f, 1.0);
        assert!(calibrate_threshold(&[(0.2, true), (0.4, true)]).is_err());
        assert!(calibrate_threshold(&[(0.2, false)]).is_err());
        assert!(calibrate_threshold(&[(0.5, true), (0.5, false)]).is_err());
    }

    #[test]
    fn calibration_tie_prefers_smaller_threshold() {
        // ε=0.7 gives tp 1, sel 1; ε=0.2 gives tp 3, sel 9: both F1 = 1/2.
        let mut pairs = vec![(0.9, true)];
        pairs.extend([(0.5, false); 6]);
        pairs.extend([(0.4, true); 2]);
        pairs.push((0.0, false));
        let (eps, f) = calibrate_threshold(&pairs).unwrap();
        assert_eq!(f, 0.5);
        assert_eq!(f1_at(&pairs, 0.7), 0.5);
        assert!((eps - 0.2).abs() < 1e-15);
    }

    #[test]
    fn label_dump_round_trip() {
        let ls = vec![
            SelectionLabels {
                y: vec![true, false, true],
                provenance: LabelProvenance::Aligned,
            },
            SelectionLabels {
                y: vec![false],
                provenance: LabelProvenance::Aligned,
            },
        ];
        let text = labels_to_text(&ls);
        assert_eq!(text, "1 0 1\n0\n");
        assert_eq!(labels_from_text(&text).unwrap(), ls);
        assert!(labels_from_text("1 2\n").is_err());
    }

    /// Every candidate ε checked directly.
    fn brute_force(pairs: &[(f64, bool)]) -> (f64, f64) {
        let mut vals: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        let mut best = (f64::NAN, -1.0);
        for w in vals.windows(2) {
            let eps = (w[0] + w[1]) / 2.0;
            let f = f1_at(pairs, eps);
            if f > best.1 {
                best = (eps, f);
            }
        }
        best
    }

    proptest! {
        #[test]
        fn calibration_matches_brute_force(
            pairs in prop::collection::vec((0u8..20, any::<bool>()), 2..40)
        ) {
            let pairs: Vec<(f64, bool)> = pairs.iter().map(|&(p, y)| (p as f64 / 19.0, y)).collect();
            match calibrate_threshold(&pairs) {
                Ok((eps, f)) => {
                    let (beps, bf) = brute_force(&pairs);
                    prop_assert_eq!(f, bf);
                    prop_assert_eq!(eps, beps);
                }
                Err(_) => {
                    let pos = pairs.iter().filter(|p| p.1).count();
                    let distinct = pairs.iter().any(|p| p.0 != pairs[0].0);
                    prop_assert!(pos == 0 || pos == pairs.len() || !distinct);
                }
            }
        }

        #[test]
        fn full_summary_is_all_ones(doc in prop::collection::vec(0u8..5, 1..15)) {
            let l = build_labels(&doc, &doc);
            prop_assert!(l.y.iter().all(|&v| v));
        }

        #[test]
        fn labels_only_mark_shared_tokens(
            doc in prop::collection::vec(0u8..6, 1..15),
            summary in prop::collection::vec(0u8..6, 1..8),
        ) {
            let l = build_labels(&doc, &summary);
            prop_assert_eq!(l.y.len(), doc.len());
            for (d, y) in doc.iter().zip(&l.y) {
                if *y {
                    prop_assert!(summary.contains(d));
                }
            }
        }
    }
}
