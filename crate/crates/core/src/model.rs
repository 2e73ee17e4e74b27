//! Transformer encoder-decoder in a post-norm BERT layout with tied input and
//! output embeddings and a logit-level copy head.
//!
//! Generation logits are `ŷ_t = V·d_t + b_v` with `V` the token embedding
//! table. With copying enabled the output logits become
//!
//! ```text
//! ẑ_t = p_gen(t)·ŷ_t + (1 − p_gen(t))·â_t X,   p_gen(t) = σ(x_gᵀ d_t + b_g)
//! ```
//!
//! where `â_t` are the pre-softmax logits of one cross-attention head of the
//! top decoder layer and `X` one-hot encodes the source ids, realised as a
//! scatter-add into vocabulary space.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamStore;
use crate::error::{Error, Result};
use crate::selection::mask_offsets;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{sigmoid, softmax_in_place, Tensor, MASK_OFFSET};
use crate::tokenizer::{EncodedExample, BOS_ID};

pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    #[serde(default)]
    pub vocab_size: usize,
    pub encoder_positions: usize,
    pub decoder_positions: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default = "default_true")]
    pub copy_enabled: bool,
    #[serde(default)]
    pub copy_head_index: usize,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Small geometry used throughout the tests and the synthetic pipeline.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 2,
            hidden_size: 32,
            num_heads: 4,
            ffn_size: 64,
            vocab_size,
            encoder_positions: 128,
            decoder_positions: 32,
            dropout_rate: 0.1,
            copy_enabled: true,
            copy_head_index: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
            ("encoder_positions", self.encoder_positions),
            ("decoder_positions", self.decoder_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.copy_enabled && self.copy_head_index >= self.num_heads {
            return Err(Error::Config(format!(
                "copy_head_index {} >= num_heads {}",
                self.copy_head_index, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_size(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

/// Which parameter groups a store carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoreKind {
    /// Full encoder-decoder summarizer.
    Seq2Seq,
    /// Encoder with a masked-token head (the denoising stage).
    Encoder,
    /// Encoder with the content-selection head.
    Selector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Name, shape and default initialiser of every parameter of `kind`.
pub fn param_layout(cfg: &ModelConfig, kind: StoreKind) -> Vec<(String, Vec<usize>, Init)> {
    let h = cfg.hidden_size;
    let f = cfg.ffn_size;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));

    let ln = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.gain"), vec![h], Init::Ones);
        push(format!("{p}.bias"), vec![h], Init::Zeros);
    };
    let attn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        for m in ["q", "k", "v", "o"] {
            push(format!("{p}.{m}.weight"), vec![h, h], Init::Normal);
            push(format!("{p}.{m}.bias"), vec![h], Init::Zeros);
        }
    };
    let ffn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.in.weight"), vec![h, f], Init::Normal);
        push(format!("{p}.in.bias"), vec![f], Init::Zeros);
        push(format!("{p}.out.weight"), vec![f, h], Init::Normal);
        push(format!("{p}.out.bias"), vec![h], Init::Zeros);
    };

    push("embeddings.word".into(), vec![cfg.vocab_size, h], Init::Normal);
    push(
        "embeddings.enc_pos".into(),
        vec![cfg.encoder_positions, h],
        Init::Normal,
    );
    ln(&mut push, "embeddings.enc_ln");
    for i in 0..cfg.num_layers {
        let p = format!("encoder.layer.{i}");
        attn(&mut push, &format!("{p}.self_attn"));
        ln(&mut push, &format!("{p}.self_attn_ln"));
        ffn(&mut push, &format!("{p}.ffn"));
        ln(&mut push, &format!("{p}.ffn_ln"));
    }
    match kind {
        StoreKind::Seq2Seq => {
            push(
                "embeddings.dec_pos".into(),
                vec![cfg.decoder_positions, h],
                Init::Normal,
            );
            ln(&mut push, "embeddings.dec_ln");
            for i in 0..cfg.num_layers {
                let p = format!("decoder.layer.{i}");
                attn(&mut push, &format!("{p}.self_attn"));
                ln(&mut push, &format!("{p}.self_attn_ln"));
                attn(&mut push, &format!("{p}.cross_attn"));
                ln(&mut push, &format!("{p}.cross_attn_ln"));
                ffn(&mut push, &format!("{p}.ffn"));
                ln(&mut push, &format!("{p}.ffn_ln"));
            }
            push("output.bias".into(), vec![cfg.vocab_size], Init::Zeros);
            push("copy_gate.weight".into(), vec![h], Init::Normal);
            push("copy_gate.bias".into(), vec![1], Init::Zeros);
        }
        StoreKind::Encoder => {
            push("mlm.bias".into(), vec![cfg.vocab_size], Init::Zeros);
        }
        StoreKind::Selector => {
            push("selector.weight".into(), vec![h], Init::Normal);
            push("selector.bias".into(), vec![1], Init::Zeros);
        }
    }
    out
}

/// Parameters of a store placed on a tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Registers every parameter; `trainable` decides whether they collect gradients.
    pub fn new(tape: &mut Tape, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Validation(format!("parameter `{name}` missing from store")))
    }

    /// Gradients for every bound parameter, keyed by name.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Token-level dropout state for a training forward pass.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

impl<R: Rng> Dropout<'_, R> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.dropout_rows(x, self.rate, self.rng)
    }
}

fn maybe_drop<R: Rng>(tape: &mut Tape, x: Var, dropout: &mut Option<Dropout<'_, R>>) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

fn linear(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{prefix}.weight"))?;
    let bias = b.get(&format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, bias)
}

fn layer_norm(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let g = b.get(&format!("{prefix}.gain"))?;
    let bias = b.get(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, bias, LAYER_NORM_EPS)
}

/// Additive attention bias.
enum AttnMask {
    None,
    /// One offset per key, shared by every query.
    Keys(Var),
    /// Full `queries × keys` offsets.
    Full(Var),
}

struct AttnOut {
    out: Var,
    /// Pre-mask, pre-softmax scores of every head.
    head_logits: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
fn attention(
    tape: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    prefix: &str,
    queries: Var,
    keys: Var,
    mask: &AttnMask,
    keep_logits: bool,
) -> Result<AttnOut> {
    let q = linear(tape, b, &format!("{prefix}.q"), queries)?;
    let k = linear(tape, b, &format!("{prefix}.k"), keys)?;
    let v = linear(tape, b, &format!("{prefix}.v"), keys)?;
    let dh = cfg.head_size();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut contexts = Vec::with_capacity(cfg.num_heads);
    let mut head_logits = Vec::new();
    for h in 0..cfg.num_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let raw = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(raw, scale);
        if keep_logits {
            head_logits.push(scores);
        }
        let masked = match *mask {
            AttnMask::None => scores,
            AttnMask::Keys(m) => tape.add_row(scores, m)?,
            AttnMask::Full(m) => tape.add(scores, m)?,
        };
        let probs = tape.softmax(masked)?;
        contexts.push(tape.matmul(probs, vh)?);
    }
    let ctx = if contexts.len() == 1 {
        contexts[0]
    } else {
        tape.concat_cols(&contexts)?
    };
    let out = linear(tape, b, &format!("{prefix}.o"), ctx)?;
    Ok(AttnOut { out, head_logits })
}

fn feed_forward(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let hdn = linear(tape, b, &format!("{prefix}.in"), x)?;
    let act = tape.gelu(hdn);
    linear(tape, b, &format!("{prefix}.out"), act)
}

fn key_mask(tape: &mut Tape, pad_mask: &[bool]) -> AttnMask {
    if pad_mask.iter().any(|&p| p) {
        let offsets = pad_mask.iter().map(|&p| if p { MASK_OFFSET } else { 0.0 }).collect();
        AttnMask::Keys(tape.constant(Tensor::vector(offsets)))
    } else {
        AttnMask::None
    }
}

fn validate_source(cfg: &ModelConfig, ids: &[usize], pad_mask: &[bool]) -> Result<()> {
    if ids.len() != pad_mask.len() {
        return Err(Error::Shape(format!(
            "{} source ids with {} mask entries",
            ids.len(),
            pad_mask.len()
        )));
    }
    if ids.is_empty() || pad_mask.iter().all(|&p| p) {
        return Err(Error::Validation("source has no unmasked position to attend to".into()));
    }
    if ids.len() > cfg.encoder_positions {
        return Err(Error::Shape(format!(
            "{} source positions exceed the encoder limit of {}",
            ids.len(),
            cfg.encoder_positions
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Shape(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Encoder stack: embeddings plus positions, then `num_layers` post-norm
/// self-attention and feed-forward blocks. Returns `[positions × hidden]`.
pub fn encode_on<R: Rng>(
    tape: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    ids: &[usize],
    pad_mask: &[bool],
    dropout: &mut Option<Dropout<'_, R>>,
) -> Result<Var> {
    validate_source(cfg, ids, pad_mask)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let words = tape.gather(b.get("embeddings.word")?, ids)?;
    let pos = tape.gather(b.get("embeddings.enc_pos")?, &positions)?;
    let sum = tape.add(words, pos)?;
    let normed = layer_norm(tape, b, "embeddings.enc_ln", sum)?;
    let mut x = maybe_drop(tape, normed, dropout)?;
    let mask = key_mask(tape, pad_mask);
    for i in 0..cfg.num_layers {
        let p = format!("encoder.layer.{i}");
        let a = attention(tape, b, cfg, &format!("{p}.self_attn"), x, x, &mask, false)?;
        let a = maybe_drop(tape, a.out, dropout)?;
        let r = tape.add(x, a)?;
        x = layer_norm(tape, b, &format!("{p}.self_attn_ln"), r)?;
        let f = feed_forward(tape, b, &format!("{p}.ffn"), x)?;
        let f = maybe_drop(tape, f, dropout)?;
        let r = tape.add(x, f)?;
        x = layer_norm(tape, b, &format!("{p}.ffn_ln"), r)?;
    }
    Ok(x)
}

/// Tape variables of one decoder pass over `T` positions.
pub struct DecoderVars {
    /// `d_t` for every position, `[T × hidden]`.
    pub hidden: Var,
    /// Pre-softmax cross-attention logits of each top-layer head, `[T × S]`.
    pub cross_logits: Vec<Var>,
    /// `ŷ`, `[T × vocab]`.
    pub gen_logits: Var,
    /// `â` after the optional selection mask, `[T × S]`.
    pub copy_logits: Option<Var>,
    /// `p_gen`, `[T × 1]`.
    pub gate: Option<Var>,
    /// Final logits fed to the softmax, `[T × vocab]`.
    pub logits: Var,
}

/// Source-side context for decoding.
pub struct SourceContext<'a> {
    pub ids: &'a [usize],
    pub pad_mask: &'a [bool],
    /// Selection decisions over source positions (`true` keeps the copy logit).
    pub selection: Option<&'a [bool]>,
}

/// Decoder stack and output head over input ids `[BOS, y_0, …]`.
pub fn decode_on<R: Rng>(
    tape: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    memory: Var,
    src: &SourceContext<'_>,
    dec_ids: &[usize],
    dropout: &mut Option<Dropout<'_, R>>,
) -> Result<DecoderVars> {
    let t = dec_ids.len();
    if t == 0 {
        return Err(Error::Decode("empty decoder input".into()));
    }
    if t > cfg.decoder_positions {
        return Err(Error::Decode(format!(
            "decoder position {} beyond the limit of {}",
            t - 1,
            cfg.decoder_positions
        )));
    }
    if let Some(sel) = src.selection {
        if sel.len() != src.ids.len() {
            return Err(Error::Shape(format!(
                "selection over {} positions for a source of {}",
                sel.len(),
                src.ids.len()
            )));
        }
    }
    let positions: Vec<usize> = (0..t).collect();
    let words = tape.gather(b.get("embeddings.word")?, dec_ids)?;
    let pos = tape.gather(b.get("embeddings.dec_pos")?, &positions)?;
    let sum = tape.add(words, pos)?;
    let normed = layer_norm(tape, b, "embeddings.dec_ln", sum)?;
    let mut x = maybe_drop(tape, normed, dropout)?;

    let causal = if t > 1 {
        let mut m = vec![0.0; t * t];
        for i in 0..t {
            for j in i + 1..t {
                m[i * t + j] = MASK_OFFSET;
            }
        }
        AttnMask::Full(tape.constant(Tensor::new(vec![t, t], m)?))
    } else {
        AttnMask::None
    };
    let src_mask = key_mask(tape, src.pad_mask);
    let mut cross_logits = Vec::new();
    for i in 0..cfg.num_layers {
        let p = format!("decoder.layer.{i}");
        let top = i + 1 == cfg.num_layers;
        let a = attention(tape, b, cfg, &format!("{p}.self_attn"), x, x, &causal, false)?;
        let a = maybe_drop(tape, a.out, dropout)?;
        let r = tape.add(x, a)?;
        x = layer_norm(tape, b, &format!("{p}.self_attn_ln"), r)?;
        let c = attention(tape, b, cfg, &format!("{p}.cross_attn"), x, memory, &src_mask, top)?;
        if top {
            cross_logits = c.head_logits;
        }
        let c = maybe_drop(tape, c.out, dropout)?;
        let r = tape.add(x, c)?;
        x = layer_norm(tape, b, &format!("{p}.cross_attn_ln"), r)?;
        let f = feed_forward(tape, b, &format!("{p}.ffn"), x)?;
        let f = maybe_drop(tape, f, dropout)?;
        let r = tape.add(x, f)?;
        x = layer_norm(tape, b, &format!("{p}.ffn_ln"), r)?;
    }
    let hidden = x;
    let proj = tape.matmul_t(hidden, b.get("embeddings.word")?)?;
    let gen_logits = tape.add_row(proj, b.get("output.bias")?)?;
    if !cfg.copy_enabled {
        return Ok(DecoderVars {
            hidden,
            cross_logits,
            gen_logits,
            copy_logits: None,
            gate: None,
            logits: gen_logits,
        });
    }

    let mut copy = cross_logits[cfg.copy_head_index];
    if let Some(sel) = src.selection {
        let offsets = tape.constant(Tensor::vector(mask_offsets(sel)));
        copy = tape.add_row(copy, offsets)?;
    }
    let scatter_ids: Vec<Option<usize>> = src
        .ids
        .iter()
        .zip(src.pad_mask)
        .map(|(&id, &pad)| (!pad).then_some(id))
        .collect();
    let copied = tape.scatter_cols(copy, &scatter_ids, cfg.vocab_size)?;
    let gate_w = b.get("copy_gate.weight")?;
    let gate_pre = tape.matmul_ext(hidden, gate_w, false, true)?;
    let gate_pre = tape.add_scalar(gate_pre, b.get("copy_gate.bias")?)?;
    let gate = tape.sigmoid(gate_pre);
    let keep = tape.one_minus(gate);
    let g_part = tape.mul_cols(gen_logits, gate)?;
    let c_part = tape.mul_cols(copied, keep)?;
    let logits = tape.add(g_part, c_part)?;
    Ok(DecoderVars {
        hidden,
        cross_logits,
        gen_logits,
        copy_logits: Some(copy),
        gate: Some(gate),
        logits,
    })
}

/// Decoder input for teacher forcing: targets shifted right behind BOS.
pub fn shift_right(targets: &[usize]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(targets.len());
    ids.push(BOS_ID);
    ids.extend_from_slice(&targets[..targets.len().saturating_sub(1)]);
    ids
}

/// Length of the non-pad prefix.
pub fn content_len(pad_mask: &[bool]) -> usize {
    pad_mask.iter().rposition(|&p| !p).map_or(0, |i| i + 1)
}

/// MLE loss of one example on an existing tape, as a sum of per-token
/// negative log-likelihoods divided by `denom`.
#[allow(clippy::too_many_arguments)]
pub fn example_loss<R: Rng>(
    tape: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    example: &EncodedExample,
    selection: Option<&[bool]>,
    dropout: &mut Option<Dropout<'_, R>>,
    denom: f64,
) -> Result<Option<Var>> {
    let s = content_len(&example.source_pad_mask);
    let t = content_len(&example.target_pad_mask);
    if t == 0 {
        return Ok(None);
    }
    let src_ids = &example.source_ids[..s];
    let src_pad = &example.source_pad_mask[..s];
    let memory = encode_on(tape, b, cfg, src_ids, src_pad, dropout)?;
    let targets = &example.target_ids[..t];
    let dec_in = shift_right(targets);
    let src = SourceContext {
        ids: src_ids,
        pad_mask: src_pad,
        selection: selection.map(|sel| &sel[..s]),
    };
    let out = decode_on(tape, b, cfg, memory, &src, &dec_in, dropout)?;
    let tgt: Vec<Option<usize>> = targets.iter().map(|&id| Some(id)).collect();
    Ok(Some(tape.cross_entropy(out.logits, &tgt, denom)?))
}

/// Everything computed at one decoder position.
#[derive(Clone, Debug)]
pub struct DecoderStepState {
    pub hidden: Vec<f64>,
    /// Pre-softmax logits of each top-layer cross-attention head.
    pub cross_logits: Vec<Vec<f64>>,
    /// `â_t` of the designated copy head, before any selection mask.
    pub copy_logits: Vec<f64>,
    pub gen_logits: Vec<f64>,
    /// `1.0` when copying is disabled.
    pub p_gen: f64,
    pub mixed_logits: Vec<f64>,
}

impl DecoderStepState {
    pub fn probabilities(&self) -> Vec<f64> {
        let mut p = self.mixed_logits.clone();
        softmax_in_place(&mut p);
        p
    }
}

fn row_of(tape: &Tape, v: Var, row: usize) -> Vec<f64> {
    tape.value(v).row(row).to_vec()
}

fn step_state(tape: &Tape, cfg: &ModelConfig, out: &DecoderVars, row: usize) -> DecoderStepState {
    let cross_logits: Vec<Vec<f64>> = out.cross_logits.iter().map(|&v| row_of(tape, v, row)).collect();
    let copy_logits = if cfg.copy_enabled {
        cross_logits[cfg.copy_head_index].clone()
    } else {
        Vec::new()
    };
    DecoderStepState {
        hidden: row_of(tape, out.hidden, row),
        cross_logits,
        copy_logits,
        gen_logits: row_of(tape, out.gen_logits, row),
        p_gen: out.gate.map_or(1.0, |g| tape.value(g).data()[row]),
        mixed_logits: row_of(tape, out.logits, row),
    }
}

type NoRng = rand_chacha::ChaCha8Rng;

/// Encoder outputs for a source, `[positions × hidden]`.
pub fn encode(params: &ParamStore, cfg: &ModelConfig, source_ids: &[usize], pad_mask: &[bool]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, params, false);
    let v = encode_on::<NoRng>(&mut tape, &b, cfg, source_ids, pad_mask, &mut None)?;
    Ok(tape.value(v).clone())
}

/// A reusable inference session: parameters bound and the source encoded once,
/// then any number of decoder passes.
pub struct DecodeSession<'a> {
    cfg: &'a ModelConfig,
    tape: Tape,
    bound: Bound,
    memory: Var,
    mark: usize,
    ids: Vec<usize>,
    pad_mask: Vec<bool>,
    selection: Option<Vec<bool>>,
}

impl<'a> DecodeSession<'a> {
    pub fn new(
        params: &ParamStore,
        cfg: &'a ModelConfig,
        source_ids: &[usize],
        pad_mask: &[bool],
        selection: Option<&[bool]>,
    ) -> Result<Self> {
        let s = content_len(pad_mask);
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params, false);
        let ids = source_ids[..s].to_vec();
        let pad = pad_mask[..s].to_vec();
        let memory = encode_on::<NoRng>(&mut tape, &bound, cfg, &ids, &pad, &mut None)?;
        let mark = tape.len();
        Ok(DecodeSession {
            cfg,
            tape,
            bound,
            memory,
            mark,
            ids,
            pad_mask: pad,
            selection: selection.map(|s_| s_[..s].to_vec()),
        })
    }

    pub fn source_len(&self) -> usize {
        self.ids.len()
    }

    pub fn decoder_positions(&self) -> usize {
        self.cfg.decoder_positions
    }

    /// Decoder state at position `t` given the `t` previously emitted tokens.
    pub fn step(&mut self, prefix: &[usize]) -> Result<DecoderStepState> {
        let t = prefix.len();
        if t >= self.cfg.decoder_positions {
            return Err(Error::Decode(format!(
                "step {t} at or beyond the decoder limit of {}",
                self.cfg.decoder_positions
            )));
        }
        self.tape.truncate(self.mark);
        let mut dec_in = Vec::with_capacity(t + 1);
        dec_in.push(BOS_ID);
        dec_in.extend_from_slice(prefix);
        let src = SourceContext {
            ids: &self.ids,
            pad_mask: &self.pad_mask,
            selection: self.selection.as_deref(),
        };
        let out = decode_on::<NoRng>(
            &mut self.tape,
            &self.bound,
            self.cfg,
            self.memory,
            &src,
            &dec_in,
            &mut None,
        )?;
        Ok(step_state(&self.tape, self.cfg, &out, t))
    }

    /// Log-probabilities of the next token after `prefix`.
    pub fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let st = self.step(prefix)?;
        let lse = crate::tensor::log_sum_exp(&st.mixed_logits);
        Ok(st.mixed_logits.iter().map(|z| z - lse).collect())
    }
}

/// Decoder state at step `t` for a given prefix of `t` tokens.
pub fn decode_step(
    params: &ParamStore,
    cfg: &ModelConfig,
    source_ids: &[usize],
    pad_mask: &[bool],
    prefix_ids: &[usize],
    selection: Option<&[bool]>,
) -> Result<DecoderStepState> {
    DecodeSession::new(params, cfg, source_ids, pad_mask, selection)?.step(prefix_ids)
}

/// `p_gen = σ(x_gᵀ d_t + b_g)`.
pub fn gate(params: &ParamStore, hidden: &[f64]) -> Result<f64> {
    let w = params.require("copy_gate.weight")?;
    let b = params.require("copy_gate.bias")?;
    if w.len() != hidden.len() {
        return Err(Error::Shape(format!(
            "gate weight of {} against hidden of {}",
            w.len(),
            hidden.len()
        )));
    }
    let z: f64 = w.data().iter().zip(hidden).map(|(a, b)| a * b).sum::<f64>() + b.data()[0];
    Ok(sigmoid(z))
}

/// `ẑ_t = p_gen·ŷ_t + (1 − p_gen)·â_t X`, with the selection mask applied to
/// `â_t` first when given. Pad positions are left out of the scatter.
pub fn mix_copy_logits(
    gen_logits: &[f64],
    copy_logits: &[f64],
    p_gen: f64,
    source_ids: &[usize],
    pad_mask: &[bool],
    selection: Option<&[bool]>,
) -> Result<Vec<f64>> {
    if copy_logits.len() != source_ids.len() || pad_mask.len() != source_ids.len() {
        return Err(Error::Shape(format!(
            "{} copy logits for {} source ids",
            copy_logits.len(),
            source_ids.len()
        )));
    }
    let masked = match selection {
        Some(sel) => crate::selection::apply_mask(copy_logits, sel)?,
        None => copy_logits.to_vec(),
    };
    let mut projected = vec![0.0; gen_logits.len()];
    for ((&id, &pad), a) in source_ids.iter().zip(pad_mask).zip(&masked) {
        if !pad {
            let slot = projected
                .get_mut(id)
                .ok_or_else(|| Error::Shape(format!("source id {id} outside vocabulary")))?;
            *slot += a;
        }
    }
    Ok(gen_logits
        .iter()
        .zip(&projected)
        .map(|(y, c)| p_gen * y + (1.0 - p_gen) * c)
        .collect())
}

/// Teacher-forced outputs for inspection and tests.
pub struct TeacherForced {
    /// `P(t)` for every target position, `[T × vocab]`.
    pub probs: Tensor,
    pub states: Vec<DecoderStepState>,
}

/// Runs the full pipeline over every target position with shifted-right
/// teacher forcing. Dropout is active only when `training` is set.
pub fn forward_teacher_forced<R: Rng>(
    params: &ParamStore,
    cfg: &ModelConfig,
    example: &EncodedExample,
    selection: Option<&[bool]>,
    rng: &mut R,
    training: bool,
) -> Result<TeacherForced> {
    let s = content_len(&example.source_pad_mask);
    let t = content_len(&example.target_pad_mask).max(1);
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, params, false);
    let mut dropout = (training && cfg.dropout_rate > 0.0).then_some(Dropout {
        rate: cfg.dropout_rate,
        rng,
    });
    let src_ids = &example.source_ids[..s];
    let src_pad = &example.source_pad_mask[..s];
    let memory = encode_on(&mut tape, &b, cfg, src_ids, src_pad, &mut dropout)?;
    let dec_in = shift_right(&example.target_ids[..t]);
    let src = SourceContext {
        ids: src_ids,
        pad_mask: src_pad,
        selection: selection.map(|sel| &sel[..s]),
    };
    let out = decode_on(&mut tape, &b, cfg, memory, &src, &dec_in, &mut dropout)?;
    let states: Vec<DecoderStepState> = (0..t).map(|i| step_state(&tape, cfg, &out, i)).collect();
    let mut probs = tape.value(out.logits).clone();
    let v = cfg.vocab_size;
    for row in probs.data_mut().chunks_mut(v) {
        softmax_in_place(row);
    }
    Ok(TeacherForced { probs, states })
}
