//! Maximum-likelihood training with dev-based checkpoint selection.
//!
//! One loop serves the three objectives: summarization, content selection
//! and masked-token denoising. Batch losses are summed over every scored
//! position in the batch and divided by their count.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{init_random, ParamStore};
use crate::error::{Error, Result};
use crate::metrics::rouge_report;
use crate::model::{content_len, encode_on, example_loss, Bound, Dropout, ModelConfig, StoreKind};
use crate::optim::{adam_step, AdamState};
use crate::search::{decode_corpus, summaries, DecodeConfig};
use crate::selection::{calibrate_threshold, selector_example_loss, selector_forward, SelectionLabels};
use crate::tape::{Tape, Var, MIN_LOG_PROB};
use crate::tensor::Tensor;
use crate::tokenizer::{detokenize, EncodedExample, Vocabulary, MASK_ID, RESERVED};

pub type TrainRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    Denoise,
    Summarize,
    Select,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Denoise => "denoise",
            StageKind::Summarize => "summarize",
            StageKind::Select => "select",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Applied to every sublayer output and to the embeddings.
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Dev evaluation cadence in epochs; the final epoch is always evaluated.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    pub stage: StageKind,
}

fn default_lr() -> f64 {
    2e-5
}

fn default_dropout() -> f64 {
    0.3
}

fn default_eval_every() -> usize {
    1
}

impl TrainConfig {
    pub fn new(stage: StageKind, batch_size: usize, max_epochs: usize) -> Self {
        TrainConfig {
            lr: default_lr(),
            dropout: default_dropout(),
            batch_size,
            max_epochs,
            eval_every: 1,
            seed: 0,
            stage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs and eval_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Position-weighted mean training loss over the epoch.
    pub train_loss: f64,
    pub dev_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: StageKind,
    /// `rougeL_f1`, `neg_loss` or `f1`.
    pub metric: String,
    pub epochs: Vec<EpochRecord>,
    /// 0 when the initial parameters beat every trained epoch.
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Where the harness stored the best parameters, if it did.
    #[serde(default)]
    pub checkpoint: Option<String>,
    /// Target probabilities clamped at 1e-30 during training.
    pub clamped: usize,
}

impl TrainReport {
    /// One JSON record per epoch followed by a summary record.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("plain data"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "stage": self.stage,
            "metric": self.metric,
            "best_epoch": self.best_epoch,
            "best_metric": self.best_metric,
            "checkpoint": self.checkpoint,
            "clamped": self.clamped,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }

    pub fn from_json_lines(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let (last, body) = lines
            .split_last()
            .ok_or_else(|| Error::Parse("empty training report".into()))?;
        let parse_err = |e: serde_json::Error| Error::Parse(format!("training report: {e}"));
        let epochs = body
            .iter()
            .map(|l| serde_json::from_str(l).map_err(parse_err))
            .collect::<Result<Vec<EpochRecord>>>()?;
        #[derive(Deserialize)]
        struct Summary {
            stage: StageKind,
            metric: String,
            best_epoch: usize,
            best_metric: f64,
            checkpoint: Option<String>,
            clamped: usize,
        }
        let s: Summary = serde_json::from_str(last).map_err(parse_err)?;
        Ok(TrainReport {
            stage: s.stage,
            metric: s.metric,
            epochs,
            best_epoch: s.best_epoch,
            best_metric: s.best_metric,
            checkpoint: s.checkpoint,
            clamped: s.clamped,
        })
    }
}

/// Mean negative log-likelihood with its clamp count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MleLoss {
    pub loss: f64,
    /// Target probabilities below 1e-30 that were clamped.
    pub clamped: usize,
}

/// `−log P_{w*}(t)` averaged over the non-pad positions of every sequence
/// jointly. Each item is a `[T × vocab]` distribution with its targets and
/// target pad mask.
pub fn mle_loss(batch: &[(&Tensor, &[usize], &[bool])]) -> Result<MleLoss> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut clamped = 0usize;
    for (probs, targets, pad) in batch {
        let (t, v) = probs.dims2()?;
        if targets.len() != t || pad.len() != t {
            return Err(Error::Shape(format!(
                "{t} distributions for {} targets and {} mask entries",
                targets.len(),
                pad.len()
            )));
        }
        for (i, (&y, &is_pad)) in targets.iter().zip(pad.iter()).enumerate() {
            let row = probs.row(i);
            let z: f64 = row.iter().sum();
            if (z - 1.0).abs() > 1e-6 || row.iter().any(|p| *p < 0.0) {
                return Err(Error::Numeric(format!("row {i} is not a distribution (sums to {z})")));
            }
            if is_pad {
                continue;
            }
            if y >= v {
                return Err(Error::Shape(format!("target {y} outside vocabulary of {v}")));
            }
            let lp = row[y].ln();
            if lp < MIN_LOG_PROB {
                clamped += 1;
            }
            total -= lp.max(MIN_LOG_PROB);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Validation("no non-pad target positions".into()));
    }
    Ok(MleLoss {
        loss: total / count as f64,
        clamped,
    })
}

/// A training objective over an indexed training set with a dev metric.
pub trait Objective {
    fn kind(&self) -> StageKind;

    fn store_kind(&self) -> StoreKind;

    fn metric_name(&self) -> &'static str;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Summed loss of example `index` and the number of scored positions.
    /// `noise` drives any input corruption.
    fn example_loss(
        &self,
        tape: &mut Tape,
        b: &Bound,
        cfg: &ModelConfig,
        index: usize,
        dropout: &mut Option<Dropout<'_, TrainRng>>,
        noise: &mut TrainRng,
    ) -> Result<Option<(Var, usize)>>;

    /// Higher is better.
    fn dev_metric(&self, params: &ParamStore, cfg: &ModelConfig) -> Result<f64>;
}

/// Summarization: teacher-forced MLE, dev ROUGE-L F1 of greedy or beam output.
pub struct Summarize<'a> {
    pub train: &'a [EncodedExample],
    pub dev: &'a [EncodedExample],
    pub vocab: &'a Vocabulary,
    pub decode: DecodeConfig,
}

impl Summarize<'_> {
    pub fn dev_rouge_l(&self, params: &ParamStore, cfg: &ModelConfig) -> Result<f64> {
        let hyps = decode_corpus(params, cfg, self.dev, None, &self.decode)?;
        let hyp_text = summaries(&hyps, self.vocab);
        let refs: Vec<String> = self
            .dev
            .iter()
            .map(|e| detokenize(e.summary_content(), self.vocab))
            .collect();
        Ok(rouge_report(&refs, &hyp_text)?.mean.rouge_l.f1)
    }
}

impl Objective for Summarize<'_> {
    fn kind(&self) -> StageKind {
        StageKind::Summarize
    }

    fn store_kind(&self) -> StoreKind {
        StoreKind::Seq2Seq
    }

    fn metric_name(&self) -> &'static str {
        "rougeL_f1"
    }

    fn len(&self) -> usize {
        self.train.len()
    }

    fn example_loss(
        &self,
        tape: &mut Tape,
        b: &Bound,
        cfg: &ModelConfig,
        index: usize,
        dropout: &mut Option<Dropout<'_, TrainRng>>,
        _noise: &mut TrainRng,
    ) -> Result<Option<(Var, usize)>> {
        let ex = &self.train[index];
        let n = content_len(&ex.target_pad_mask);
        Ok(example_loss(tape, b, cfg, ex, None, dropout, 1.0)?.map(|v| (v, n)))
    }

    fn dev_metric(&self, params: &ParamStore, cfg: &ModelConfig) -> Result<f64> {
        self.dev_rouge_l(params, cfg)
    }
}

/// Content selection: token-level BCE, dev F1 at the calibrated threshold.
pub struct Select<'a> {
    pub train: &'a [EncodedExample],
    pub train_labels: &'a [SelectionLabels],
    pub dev: &'a [EncodedExample],
    pub dev_labels: &'a [SelectionLabels],
}

/// `(p, label)` pairs over every dev position.
pub fn selection_pairs(
    params: &ParamStore,
    cfg: &ModelConfig,
    examples: &[EncodedExample],
    labels: &[SelectionLabels],
) -> Result<Vec<(f64, bool)>> {
    if examples.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} examples with {} label sets",
            examples.len(),
            labels.len()
        )));
    }
    let mut pairs = Vec::new();
    for (ex, l) in examples.iter().zip(labels) {
        let p = selector_forward(params, cfg, &ex.source_ids, &ex.source_pad_mask)?;
        if p.p.len() != l.y.len() {
            return Err(Error::Shape(format!("{} scores for {} labels", p.p.len(), l.y.len())));
        }
        pairs.extend(p.p.iter().copied().zip(l.y.iter().copied()));
    }
    Ok(pairs)
}

impl Objective for Select<'_> {
    fn kind(&self) -> StageKind {
        StageKind::Select
    }

    fn store_kind(&self) -> StoreKind {
        StoreKind::Selector
    }

    fn metric_name(&self) -> &'static str {
        "f1"
    }

    fn len(&self) -> usize {
        self.train.len()
    }

    fn example_loss(
        &self,
        tape: &mut Tape,
        b: &Bound,
        cfg: &ModelConfig,
        index: usize,
        dropout: &mut Option<Dropout<'_, TrainRng>>,
        _noise: &mut TrainRng,
    ) -> Result<Option<(Var, usize)>> {
        let ex = &self.train[index];
        let labels = &self.train_labels[index];
        if labels.is_empty() {
            return Ok(None);
        }
        let v = selector_example_loss(tape, b, cfg, &ex.source_ids, &ex.source_pad_mask, labels, dropout, 1.0)?;
        Ok(Some((v, labels.len())))
    }

    fn dev_metric(&self, params: &ParamStore, cfg: &ModelConfig) -> Result<f64> {
        let pairs = selection_pairs(params, cfg, self.dev, self.dev_labels)?;
        Ok(calibrate_threshold(&pairs)?.1)
    }
}

/// Fraction of positions chosen for corruption.
pub const MASK_RATE: f64 = 0.15;

/// Corrupted inputs and per-position targets (`None` where not scored).
/// At least one position is chosen; of those 80% become `[MASK]`, 10% a
/// random non-reserved token and 10% stay unchanged.
pub fn mask_tokens<R: Rng>(ids: &[usize], vocab_size: usize, rng: &mut R) -> (Vec<usize>, Vec<Option<usize>>) {
    let n = ids.len();
    let k = ((MASK_RATE * n as f64).round() as usize).clamp(1.min(n), n);
    let positions: Vec<usize> = (0..n).collect();
    let mut chosen: Vec<usize> = positions.choose_multiple(rng, k).copied().collect();
    chosen.sort_unstable();
    let mut input = ids.to_vec();
    let mut targets = vec![None; n];
    for i in chosen {
        targets[i] = Some(ids[i]);
        let r: f64 = rng.random();
        if r < 0.8 {
            input[i] = MASK_ID;
        } else if r < 0.9 {
            input[i] = rng.random_range(RESERVED.len()..vocab_size);
        }
    }
    (input, targets)
}

/// Masked-token loss of one sequence on a tape: encoder outputs projected
/// through the tied word embeddings plus `mlm.bias`.
pub fn masked_token_loss(
    tape: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    input: &[usize],
    targets: &[Option<usize>],
    dropout: &mut Option<Dropout<'_, TrainRng>>,
    denom: f64,
) -> Result<Var> {
    let pad = vec![false; input.len()];
    let enc = encode_on(tape, b, cfg, input, &pad, dropout)?;
    let logits = tape.matmul_ext(enc, b.get("embeddings.word")?, false, true)?;
    let logits = tape.add_row(logits, b.get("mlm.bias")?)?;
    tape.cross_entropy(logits, targets, denom)
}

/// Denoising: masked-token prediction; the dev metric is the negated mean
/// masked loss under a fixed corruption.
pub struct Denoise<'a> {
    pub train: &'a [Vec<usize>],
    pub dev: &'a [Vec<usize>],
    /// Seeds the fixed dev corruption.
    pub dev_seed: u64,
}

impl Denoise<'_> {
    pub fn dev_loss(&self, params: &ParamStore, cfg: &ModelConfig) -> Result<f64> {
        let mut rng = TrainRng::seed_from_u64(self.dev_seed);
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, params, false);
        let mark = tape.len();
        let (mut total, mut count) = (0.0, 0usize);
        for ids in self.dev {
            if ids.is_empty() {
                continue;
            }
            tape.truncate(mark);
            let (input, targets) = mask_tokens(ids, cfg.vocab_size, &mut rng);
            let v = masked_token_loss(&mut tape, &b, cfg, &input, &targets, &mut None, 1.0)?;
            total += tape.value(v).data()[0];
            count += targets.iter().flatten().count();
        }
        if count == 0 {
            return Err(Error::Validation("empty denoising dev set".into()));
        }
        Ok(total / count as f64)
    }
}

impl Objective for Denoise<'_> {
    fn kind(&self) -> StageKind {
        StageKind::Denoise
    }

    fn store_kind(&self) -> StoreKind {
        StoreKind::Encoder
    }

    fn metric_name(&self) -> &'static str {
        "neg_loss"
    }

    fn len(&self) -> usize {
        self.train.len()
    }

    fn example_loss(
        &self,
        tape: &mut Tape,
        b: &Bound,
        cfg: &ModelConfig,
        index: usize,
        dropout: &mut Option<Dropout<'_, TrainRng>>,
        noise: &mut TrainRng,
    ) -> Result<Option<(Var, usize)>> {
        let ids = &self.train[index];
        if ids.is_empty() {
            return Ok(None);
        }
        let (input, targets) = mask_tokens(ids, cfg.vocab_size, noise);
        let n = targets.iter().flatten().count();
        Ok(Some((
            masked_token_loss(tape, b, cfg, &input, &targets, dropout, 1.0)?,
            n,
        )))
    }

    fn dev_metric(&self, params: &ParamStore, cfg: &ModelConfig) -> Result<f64> {
        Ok(-self.dev_loss(params, cfg)?)
    }
}

/// Best parameters by dev metric together with the training record.
pub struct Trained {
    pub params: ParamStore,
    pub report: TrainReport,
}

fn stage_error(kind: StageKind, reason: impl Into<String>) -> Error {
    Error::Stage {
        stage: kind.name().to_string(),
        reason: reason.into(),
    }
}

/// Runs the loop from `init`: seeded shuffles each epoch, one Adam update
/// per mini-batch, dev evaluation every `eval_every` epochs and after the
/// last one. The initial parameters count as epoch 0 and later epochs must
/// strictly beat the best so far to replace it.
pub fn train_stage(
    init: ParamStore,
    objective: &dyn Objective,
    cfg: &ModelConfig,
    tc: &TrainConfig,
) -> Result<Trained> {
    tc.validate()?;
    cfg.validate()?;
    let kind = objective.kind();
    if objective.is_empty() {
        return Err(stage_error(kind, "empty training corpus"));
    }
    if init.meta.kind.is_some_and(|k| k != objective.store_kind()) {
        return Err(stage_error(
            kind,
            format!(
                "expected a {:?} store, got {:?}",
                objective.store_kind(),
                init.meta.kind
            ),
        ));
    }
    init.check_compatible(cfg)?;

    let mut params = init;
    let mut adam = AdamState::new(tc.lr);
    let mut order_rng = TrainRng::seed_from_u64(tc.seed);
    let mut dropout_rng = TrainRng::seed_from_u64(tc.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut noise_rng = TrainRng::seed_from_u64(tc.seed ^ 0x2545_f491_4f6c_dd1d);

    let mut best_metric = objective.dev_metric(&params, cfg)?;
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut epochs = Vec::with_capacity(tc.max_epochs);
    let mut clamped = 0;
    let mut order: Vec<usize> = (0..objective.len()).collect();

    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut order_rng);
        let (mut epoch_loss, mut epoch_count) = (0.0, 0usize);
        for batch in order.chunks(tc.batch_size) {
            let mut tape = Tape::new();
            let b = Bound::new(&mut tape, &params, true);
            let mut dropout = (tc.dropout > 0.0).then_some(Dropout {
                rate: tc.dropout,
                rng: &mut dropout_rng,
            });
            let mut terms = Vec::with_capacity(batch.len());
            let mut count = 0usize;
            for &i in batch {
                if let Some((v, n)) = objective.example_loss(&mut tape, &b, cfg, i, &mut dropout, &mut noise_rng)? {
                    terms.push(v);
                    count += n;
                }
            }
            if count == 0 {
                continue;
            }
            let sum = tape.add_all(&terms)?;
            let loss = tape.scale(sum, 1.0 / count as f64);
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(stage_error(kind, format!("non-finite loss at epoch {epoch}")));
            }
            clamped += tape.clamped_log_probs();
            let grads = tape.backward(loss)?;
            let mut named = b.gradients(&grads);
            for (name, t) in params.iter() {
                named.entry(name.clone()).or_insert_with(|| Tensor::zeros(t.shape()));
            }
            adam_step(&mut params, &named, &mut adam)?;
            epoch_loss += value * count as f64;
            epoch_count += count;
        }
        if !params.is_finite() {
            return Err(stage_error(kind, format!("non-finite parameters at epoch {epoch}")));
        }
        let evaluate = epoch % tc.eval_every == 0 || epoch == tc.max_epochs;
        let dev_metric = if evaluate {
            let m = objective.dev_metric(&params, cfg)?;
            if m > best_metric {
                best_metric = m;
                best_params = params.clone();
                best_epoch = epoch;
            }
            Some(m)
        } else {
            None
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss: if epoch_count == 0 {
                0.0
            } else {
                epoch_loss / epoch_count as f64
            },
            dev_metric,
        });
    }
    Ok(Trained {
        params: best_params,
        report: TrainReport {
            stage: kind,
            metric: objective.metric_name().to_string(),
            epochs,
            best_epoch,
            best_metric,
            checkpoint: None,
            clamped,
        },
    })
}

/// Trains an encoder with the masked-token objective from random init.
pub fn denoise_pretrain(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    train: &[Vec<usize>],
    dev: &[Vec<usize>],
) -> Result<Trained> {
    let init = init_random(cfg, StoreKind::Encoder, tc.seed)?;
    let objective = Denoise {
        train,
        dev,
        dev_seed: tc.seed.wrapping_add(1),
    };
    train_stage(
        init,
        &objective,
        cfg,
        &TrainConfig {
            stage: StageKind::Denoise,
            ..tc.clone()
        },
    )
}

/// Mean training loss trajectory, handy for curve checks.
pub fn loss_curve(report: &TrainReport) -> Vec<f64> {
    report.epochs.iter().map(|e| e.train_loss).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward_teacher_forced;
    use crate::tokenizer::{Limits, EOS_ID};

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            hidden_size: 16,
            num_heads: 2,
            ffn_size: 32,
            vocab_size: vocab,
            encoder_positions: 16,
            decoder_positions: 8,
            dropout_rate: 0.0,
            copy_enabled: true,
            copy_head_index: 0,
        }
    }

    fn vocab(n: usize) -> Vocabulary {
        Vocabulary::from_words((0..n - RESERVED.len()).map(|i| format!("w{i}"))).unwrap()
    }

    fn ex(src: &[usize], tgt: &[usize]) -> EncodedExample {
        EncodedExample::from_ids(src, tgt, Limits { source: 12, target: 6 }).unwrap()
    }

    #[test]
    fn uniform_distribution_costs_ln_vocab() {
        let p = Tensor::full(&[3, 4], 0.25);
        let l = mle_loss(&[(&p, &[0, 1, 2], &[false, false, false])]).unwrap();
        assert!((l.loss - 4f64.ln()).abs() < 1e-12);
        assert!((l.loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn certain_targets_cost_nothing() {
        let p = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let l = mle_loss(&[(&p, &[1, 0], &[false, false])]).unwrap();
        assert_eq!(l.loss, 0.0);
        assert_eq!(l.clamped, 0);
        let l = mle_loss(&[(&p, &[0, 0], &[false, false])]).unwrap();
        assert_eq!(l.clamped, 1);
        assert!((l.loss - (-MIN_LOG_PROB) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn pads_do_not_change_the_loss() {
        let p = Tensor::from_rows(&[vec![0.5, 0.25, 0.25], vec![0.1, 0.8, 0.1]]).unwrap();
        let base = mle_loss(&[(&p, &[0, 1], &[false, false])]).unwrap().loss;
        let padded = Tensor::from_rows(&[
            vec![0.5, 0.25, 0.25],
            vec![0.1, 0.8, 0.1],
            vec![0.9, 0.05, 0.05],
            vec![0.2, 0.2, 0.6],
        ])
        .unwrap();
        let l = mle_loss(&[(&padded, &[0, 1, 0, 0], &[false, false, true, true])])
            .unwrap()
            .loss;
        assert_eq!(base, l);
        // Positions average jointly across the batch, not per sequence.
        let q = Tensor::from_rows(&[vec![0.25, 0.75, 0.0]]).unwrap();
        let joint = mle_loss(&[(&p, &[0, 1], &[false, false]), (&q, &[0], &[false])])
            .unwrap()
            .loss;
        let want = -(0.5f64.ln() + 0.8f64.ln() + 0.25f64.ln()) / 3.0;
        assert!((joint - want).abs() < 1e-12);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let p = Tensor::full(&[2, 2], 0.4);
        assert!(mle_loss(&[(&p, &[0, 1], &[false, false])]).is_err());
        let p = Tensor::full(&[2, 2], 0.5);
        assert!(mle_loss(&[(&p, &[0, 1], &[true, true])]).is_err());
        assert!(mle_loss(&[(&p, &[0], &[false])]).is_err());
    }

    #[test]
    fn config_is_validated() {
        let mut tc = TrainConfig::new(StageKind::Summarize, 2, 1);
        assert_eq!(tc.lr, 2e-5);
        assert_eq!(tc.dropout, 0.3);
        tc.validate().unwrap();
        tc.dropout = 1.0;
        assert!(tc.validate().is_err());
        tc.dropout = 0.0;
        tc.lr = 0.0;
        assert!(tc.validate().is_err());
    }

    #[test]
    fn masking_follows_the_recipe() {
        let mut rng = TrainRng::seed_from_u64(3);
        let ids: Vec<usize> = (5..45).collect();
        let (mut masked, mut random, mut kept, mut total) = (0, 0, 0, 0);
        for _ in 0..2000 {
            let (input, targets) = mask_tokens(&ids, 50, &mut rng);
            assert_eq!(targets.iter().flatten().count(), 6);
            for (i, t) in targets.iter().enumerate() {
                match t {
                    None => assert_eq!(input[i], ids[i]),
                    Some(orig) => {
                        assert_eq!(*orig, ids[i]);
                        total += 1;
                        if input[i] == MASK_ID {
                            masked += 1;
                        } else if input[i] == ids[i] {
                            kept += 1;
                        } else {
                            random += 1;
                            assert!(input[i] >= RESERVED.len());
                        }
                    }
                }
            }
        }
        let frac = |c: usize| c as f64 / total as f64;
        assert!((frac(masked) - 0.8).abs() < 0.02);
        // Random replacements can land on the original token.
        assert!((frac(random) + frac(kept) - 0.2).abs() < 0.02);
        assert!(frac(kept) > 0.09);
        let (_, t) = mask_tokens(&[7], 50, &mut rng);
        assert_eq!(t, vec![Some(7)]);
    }

    #[test]
    fn unmasked_positions_carry_no_gradient_signal() {
        let cfg = tiny(12);
        let params = init_random(&cfg, StoreKind::Encoder, 1).unwrap();
        let input = [5, MASK_ID, 7, 8];
        let loss_with = |targets: &[Option<usize>]| {
            let mut tape = Tape::new();
            let b = Bound::new(&mut tape, &params, false);
            let v = masked_token_loss(&mut tape, &b, &cfg, &input, targets, &mut None, 1.0).unwrap();
            tape.value(v).data()[0]
        };
        assert_eq!(loss_with(&[None; 4]), 0.0);
        // Scored positions add up independently of each other.
        let one = loss_with(&[None, Some(6), None, None]);
        let two = loss_with(&[None, None, Some(7), None]);
        let both = loss_with(&[None, Some(6), Some(7), None]);
        assert!(one > 0.0 && two > 0.0);
        assert!((both - one - two).abs() < 1e-12);
    }

    fn summarize_setup() -> (ModelConfig, Vocabulary, Vec<EncodedExample>) {
        let cfg = tiny(12);
        let v = vocab(12);
        let data = vec![ex(&[5, 6, 7, 8, 9], &[7, 11, 9]), ex(&[10, 9, 8, 5], &[8, 6])];
        (cfg, v, data)
    }

    #[test]
    fn single_example_is_memorized() {
        let (cfg, v, data) = summarize_setup();
        let one = &data[..1];
        let obj = Summarize {
            train: one,
            dev: one,
            vocab: &v,
            decode: DecodeConfig::GREEDY,
        };
        let tc = TrainConfig {
            lr: 3e-3,
            dropout: 0.0,
            eval_every: 10,
            ..TrainConfig::new(StageKind::Summarize, 1, 80)
        };
        let init = init_random(&cfg, StoreKind::Seq2Seq, 0).unwrap();
        let out = train_stage(init, &obj, &cfg, &tc).unwrap();
        assert!(out.report.best_metric >= 0.99, "{:?}", out.report);
        assert!((obj.dev_rouge_l(&out.params, &cfg).unwrap() - out.report.best_metric).abs() < 1e-12);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (cfg, v, data) = summarize_setup();
        let obj = Summarize {
            train: &data,
            dev: &data,
            vocab: &v,
            decode: DecodeConfig::GREEDY,
        };
        let tc = TrainConfig {
            lr: 1e-3,
            ..TrainConfig::new(StageKind::Summarize, 1, 3)
        };
        let run = || {
            let init = init_random(&cfg, StoreKind::Seq2Seq, 4).unwrap();
            train_stage(init, &obj, &cfg, &tc).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.report, b.report);
        assert_eq!(a.params, b.params);
        let seeded = TrainConfig { seed: 9, ..tc.clone() };
        let init = init_random(&cfg, StoreKind::Seq2Seq, 4).unwrap();
        let c = train_stage(init, &obj, &cfg, &seeded).unwrap();
        assert_ne!(loss_curve(&a.report), loss_curve(&c.report));
    }

    #[test]
    fn full_batch_loss_decreases_for_small_steps() {
        let (cfg, v, data) = summarize_setup();
        let obj = Summarize {
            train: &data,
            dev: &data,
            vocab: &v,
            decode: DecodeConfig::GREEDY,
        };
        let tc = TrainConfig {
            lr: 1e-4,
            dropout: 0.0,
            eval_every: 100,
            ..TrainConfig::new(StageKind::Summarize, data.len(), 5)
        };
        let init = init_random(&cfg, StoreKind::Seq2Seq, 2).unwrap();
        let out = train_stage(init, &obj, &cfg, &tc).unwrap();
        let curve = loss_curve(&out.report);
        assert_eq!(curve.len(), 5);
        for w in curve.windows(2) {
            assert!(w[1] < w[0], "{curve:?}");
        }
        // The first recorded loss is the loss of the initial parameters.
        let init = init_random(&cfg, StoreKind::Seq2Seq, 2).unwrap();
        let mut rng = TrainRng::seed_from_u64(0);
        let items: Vec<_> = data
            .iter()
            .map(|e| {
                let tf = forward_teacher_forced(&init, &cfg, e, None, &mut rng, false).unwrap();
                let t = tf.probs.dims2().unwrap().0;
                (tf.probs, e.target_ids[..t].to_vec(), e.target_pad_mask[..t].to_vec())
            })
            .collect();
        let batch: Vec<_> = items.iter().map(|(p, t, m)| (p, t.as_slice(), m.as_slice())).collect();
        let want = mle_loss(&batch).unwrap().loss;
        assert!((curve[0] - want).abs() < 1e-9, "{} vs {want}", curve[0]);
    }

    #[test]
    fn best_epoch_attains_the_maximum() {
        let (cfg, v, data) = summarize_setup();
        let obj = Summarize {
            train: &data,
            dev: &data[1..],
            vocab: &v,
            decode: DecodeConfig::GREEDY,
        };
        let tc = TrainConfig {
            lr: 2e-3,
            dropout: 0.1,
            ..TrainConfig::new(StageKind::Summarize, 1, 6)
        };
        let init = init_random(&cfg, StoreKind::Seq2Seq, 8).unwrap();
        let out = train_stage(init, &obj, &cfg, &tc).unwrap();
        let recorded: Vec<f64> = out.report.epochs.iter().filter_map(|e| e.dev_metric).collect();
        let max = recorded.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(out.report.best_metric >= max);
        if out.report.best_epoch > 0 {
            assert_eq!(
                out.report.epochs[out.report.best_epoch - 1].dev_metric,
                Some(out.report.best_metric)
            );
        }
        let again = obj.dev_rouge_l(&out.params, &cfg).unwrap();
        assert_eq!(again, out.report.best_metric);
        let text = out.report.to_json_lines();
        assert_eq!(TrainReport::from_json_lines(&text).unwrap(), out.report);
    }

    #[test]
    fn nan_loss_aborts_the_stage() {
        let (cfg, v, data) = summarize_setup();
        let obj = Summarize {
            train: &data,
            dev: &data,
            vocab: &v,
            decode: DecodeConfig::GREEDY,
        };
        let mut init = init_random(&cfg, StoreKind::Seq2Seq, 0).unwrap();
        init.get_mut("output.bias").unwrap().data_mut()[EOS_ID] = f64::NAN;
        let tc = TrainConfig::new(StageKind::Summarize, 2, 1);
        let err = train_stage(init, &obj, &cfg, &tc).err().unwrap();
        assert!(matches!(err, Error::Stage { .. } | Error::Numeric(_)), "{err}");
    }

    #[test]
    fn wrong_store_kind_is_a_stage_error() {
        let (cfg, v, data) = summarize_setup();
        let obj = Summarize {
            train: &data,
            dev: &data,
            vocab: &v,
            decode: DecodeConfig::GREEDY,
        };
        let init = init_random(&cfg, StoreKind::Encoder, 0).unwrap();
        let tc = TrainConfig::new(StageKind::Summarize, 2, 1);
        assert!(matches!(train_stage(init, &obj, &cfg, &tc), Err(Error::Stage { .. })));
    }

    #[test]
    fn denoising_halves_the_masked_loss() {
        let cfg = ModelConfig {
            encoder_positions: 24,
            ..tiny(20)
        };
        let mut rng = TrainRng::seed_from_u64(5);
        // Sequences built from a fixed cycle, so every token is predictable
        // from its neighbours.
        let seqs: Vec<Vec<usize>> = (0..40)
            .map(|_| {
                let start = rng.random_range(0..15);
                (0..12).map(|j| 5 + (start + j) % 15).collect()
            })
            .collect();
        let tc = TrainConfig {
            lr: 3e-3,
            dropout: 0.0,
            eval_every: 100,
            ..TrainConfig::new(StageKind::Denoise, 8, 150)
        };
        let out = denoise_pretrain(&cfg, &tc, &seqs, &seqs[..10]).unwrap();
        let curve = loss_curve(&out.report);
        assert!(curve.last().unwrap() <= &(0.5 * curve[0]), "{curve:?}");
        assert_eq!(out.params.meta.kind, Some(StoreKind::Encoder));
    }

    #[test]
    fn selector_learns_a_positional_rule() {
        let cfg = tiny(12);
        let mut rng = TrainRng::seed_from_u64(1);
        let mut train = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..24 {
            let src: Vec<usize> = (0..6).map(|_| rng.random_range(5..12)).collect();
            // Token ids above 8 are "salient".
            labels.push(SelectionLabels {
                y: src.iter().map(|&t| t > 8).collect(),
                provenance: crate::selection::LabelProvenance::Aligned,
            });
            train.push(ex(&src, &[5]));
        }
        let obj = Select {
            train: &train,
            train_labels: &labels,
            dev: &train,
            dev_labels: &labels,
        };
        let tc = TrainConfig {
            lr: 3e-3,
            dropout: 0.0,
            eval_every: 5,
            ..TrainConfig::new(StageKind::Select, 8, 20)
        };
        let init = init_random(&cfg, StoreKind::Selector, 3).unwrap();
        let out = train_stage(init, &obj, &cfg, &tc).unwrap();
        assert!(out.report.best_metric > 0.95, "{:?}", out.report);
    }
}
