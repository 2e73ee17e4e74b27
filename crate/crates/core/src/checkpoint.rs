//! Named parameter stores, the binary checkpoint container and the
//! initialization schemes that build a model's starting point from earlier
//! stages.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! b"SSCK"  u32 version
//! u64 metadata length, metadata as UTF-8 JSON
//! u64 tensor count
//! per tensor: u32 name length, name bytes, u32 rank, rank × u64 dims,
//!             product(dims) × f64 payload
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{param_layout, Init, ModelConfig, StoreKind};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SSCK";
const VERSION: u32 = 1;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub kind: Option<StoreKind>,
    pub config: Option<ModelConfig>,
    /// Stage names in the order they were trained. Append-only.
    pub provenance: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    pub meta: StoreMeta,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    /// Replaces an existing parameter with a same-shaped value.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Validation(format!("parameter `{name}` missing from store")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "`{name}` has shape {:?}, replacement has {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Validation(format!("parameter `{name}` missing from store")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn provenance(&self) -> &[String] {
        &self.meta.provenance
    }

    pub fn push_stage(&mut self, stage: impl Into<String>) {
        self.meta.provenance.push(stage.into());
    }

    /// True when every value is finite.
    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// Checks that the store can be loaded into a model built from `cfg`,
    /// listing every differing dimension.
    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        let mut diffs = Vec::new();
        if let Some(own) = &self.meta.config {
            let mut cmp = |name: &str, a: usize, b: usize| {
                if a != b {
                    diffs.push(format!("{name}: checkpoint {a}, model {b}"));
                }
            };
            cmp("num_layers", own.num_layers, cfg.num_layers);
            cmp("hidden_size", own.hidden_size, cfg.hidden_size);
            cmp("num_heads", own.num_heads, cfg.num_heads);
            cmp("ffn_size", own.ffn_size, cfg.ffn_size);
            cmp("vocab_size", own.vocab_size, cfg.vocab_size);
            cmp("encoder_positions", own.encoder_positions, cfg.encoder_positions);
            if self.meta.kind == Some(StoreKind::Seq2Seq) {
                cmp("decoder_positions", own.decoder_positions, cfg.decoder_positions);
            }
        }
        if let Some(kind) = self.meta.kind {
            for (name, shape, _) in param_layout(cfg, kind) {
                match self.get(&name) {
                    None => diffs.push(format!("{name}: missing")),
                    Some(t) if t.shape() != shape.as_slice() => {
                        diffs.push(format!("{name}: checkpoint {:?}, model {:?}", t.shape(), shape))
                    }
                    Some(_) => {}
                }
            }
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            diffs.dedup();
            Err(Error::Incompatible(diffs.join("; ")))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.num_values() * 8 + 1024);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Parse(e.to_string()))?;
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(4).map_err(&bad)? != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.u32().map_err(&bad)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = r.u64().map_err(&bad)? as usize;
        let meta: StoreMeta =
            serde_json::from_slice(r.take(meta_len).map_err(&bad)?).map_err(|e| bad(e.to_string()))?;
        let count = r.u64().map_err(&bad)?;
        let mut store = ParamStore {
            tensors: BTreeMap::new(),
            meta,
        };
        for _ in 0..count {
            let name_len = r.u32().map_err(&bad)? as usize;
            let name = std::str::from_utf8(r.take(name_len).map_err(&bad)?)
                .map_err(|e| bad(e.to_string()))?
                .to_string();
            let rank = r.u32().map_err(&bad)? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(&bad)?;
            let n: usize = shape.iter().product();
            let raw = r
                .take(n.checked_mul(8).ok_or_else(|| bad("tensor too large".into()))?)
                .map_err(&bad)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
            store.insert(name, t).map_err(|e| bad(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes".into()));
        }
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Generator for one parameter: depends only on the run seed and the name,
/// so a tensor's draw is independent of which other tensors exist.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name).rotate_left(17))
}

/// Normal(0, σ) samples with anything beyond 2σ redrawn.
fn truncated_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let x: f64 = dist.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect()
}

fn random_tensor(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
        Init::Normal => {
            let n = shape.iter().product();
            let data = truncated_normal(&mut param_rng(seed, name), n, INIT_STD);
            Tensor::new(shape.to_vec(), data).expect("layout shapes are positive")
        }
    }
}

/// Fresh parameters: truncated-normal weights, zero biases, unit gains.
pub fn init_random(cfg: &ModelConfig, kind: StoreKind, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore {
        tensors: BTreeMap::new(),
        meta: StoreMeta {
            kind: Some(kind),
            config: Some(cfg.clone()),
            provenance: Vec::new(),
        },
    };
    for (name, shape, init) in param_layout(cfg, kind) {
        let t = random_tensor(seed, &name, &shape, init);
        store.insert(name, t)?;
    }
    Ok(store)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderSource {
    Random,
    Checkpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderSource {
    Random,
    /// Same-named decoder parameters of a full encoder-decoder checkpoint.
    Checkpoint,
    /// Decoder built from an encoder-only checkpoint, cross-attention taken
    /// from self-attention.
    Symmetric,
}

/// Where each side of the model starts from. Both sides read the same
/// source store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitScheme {
    pub encoder: EncoderSource,
    pub decoder: DecoderSource,
    /// Number of loadable units taken from the source; `None` loads all.
    #[serde(default)]
    pub layers_to_load: Option<usize>,
}

impl InitScheme {
    pub const RANDOM: InitScheme = InitScheme {
        encoder: EncoderSource::Random,
        decoder: DecoderSource::Random,
        layers_to_load: None,
    };
    /// Encoder from an encoder-only checkpoint, decoder random.
    pub const ENCODER_ONLY: InitScheme = InitScheme {
        encoder: EncoderSource::Checkpoint,
        decoder: DecoderSource::Random,
        layers_to_load: None,
    };
    /// Both sides from an encoder-only checkpoint.
    pub const SYMMETRIC: InitScheme = InitScheme {
        encoder: EncoderSource::Checkpoint,
        decoder: DecoderSource::Symmetric,
        layers_to_load: None,
    };
    /// Both sides from an encoder-decoder checkpoint.
    pub const FULL: InitScheme = InitScheme {
        encoder: EncoderSource::Checkpoint,
        decoder: DecoderSource::Checkpoint,
        layers_to_load: None,
    };

    pub fn needs_source(&self) -> bool {
        self.encoder != EncoderSource::Random || self.decoder != DecoderSource::Random
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "disposition", content = "from")]
pub enum Disposition {
    Copied(String),
    Randomized,
}

/// Per-parameter outcome of a surgery, in name order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurgeryReport {
    pub entries: Vec<(String, Disposition)>,
}

impl SurgeryReport {
    pub fn copied(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, d)| matches!(d, Disposition::Copied(_)))
            .map(|(n, _)| n.as_str())
    }

    pub fn randomized(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, d)| *d == Disposition::Randomized)
            .map(|(n, _)| n.as_str())
    }

    pub fn disposition(&self, name: &str) -> Option<&Disposition> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    /// One `name<TAB>copied-from <source>` or `name<TAB>randomized` line per parameter.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, d) in &self.entries {
            match d {
                Disposition::Copied(from) => writeln!(out, "{name}\tcopied-from {from}"),
                Disposition::Randomized => writeln!(out, "{name}\trandomized"),
            }
            .expect("writing to a String");
        }
        out
    }
}

/// Number of loadable units: embeddings, each encoder layer, each decoder layer.
pub fn loadable_units(cfg: &ModelConfig) -> usize {
    2 * cfg.num_layers + 1
}

/// Loadable unit a target parameter belongs to. The output bias travels with
/// the embeddings; the copy gate and selector head with the top layer of
/// their stack.
fn unit_of(name: &str, num_layers: usize) -> usize {
    let layer = |rest: &str| -> usize {
        rest.split('.')
            .next()
            .and_then(|s| s.parse().ok())
            .expect("layer index in layout name")
    };
    if let Some(rest) = name.strip_prefix("encoder.layer.") {
        1 + layer(rest)
    } else if let Some(rest) = name.strip_prefix("decoder.layer.") {
        1 + num_layers + layer(rest)
    } else if name.starts_with("copy_gate.") {
        2 * num_layers
    } else if name.starts_with("selector.") {
        num_layers
    } else {
        0
    }
}

/// Units loaded for a requested `k`. `k = 2L` means every unit, including
/// the top decoder layer, so the largest setting equals the full scheme.
fn units_for(k: usize, cfg: &ModelConfig) -> usize {
    if k >= 2 * cfg.num_layers {
        loadable_units(cfg)
    } else {
        k
    }
}

fn is_decoder_side(name: &str) -> bool {
    name.starts_with("decoder.")
        || name.starts_with("embeddings.dec_")
        || name == "output.bias"
        || name.starts_with("copy_gate.")
}

/// Source parameter name for `name` under symmetric decoder initialization;
/// `None` means the parameter has no counterpart and stays random.
fn symmetric_source(name: &str) -> Option<String> {
    if let Some(rest) = name.strip_prefix("embeddings.dec_ln.") {
        return Some(format!("embeddings.enc_ln.{rest}"));
    }
    let rest = name.strip_prefix("decoder.layer.")?;
    let (idx, sub) = rest.split_once('.')?;
    if sub.starts_with("cross_attn_ln.") {
        return None;
    }
    let sub = match sub.strip_prefix("cross_attn.") {
        Some(m) => format!("self_attn.{m}"),
        None => sub.to_string(),
    };
    Some(format!("encoder.layer.{idx}.{sub}"))
}

/// Builds a `kind` store for `cfg` under `scheme`, reading checkpoint
/// parameters from `source`. Everything not copied is exactly what
/// [`init_random`] produces for `seed`.
pub fn apply_scheme(
    scheme: &InitScheme,
    source: Option<&ParamStore>,
    cfg: &ModelConfig,
    kind: StoreKind,
    seed: u64,
) -> Result<(ParamStore, SurgeryReport)> {
    let mut store = init_random(cfg, kind, seed)?;
    let src = match (scheme.needs_source(), source) {
        (false, _) => {
            let names = store.names().map(|n| (n.clone(), Disposition::Randomized)).collect();
            return Ok((store, SurgeryReport { entries: names }));
        }
        (true, None) => return Err(Error::Config("scheme needs a source checkpoint".into())),
        (true, Some(s)) => s,
    };
    src.check_compatible_source(cfg)?;
    if scheme.decoder == DecoderSource::Symmetric && src.meta.kind == Some(StoreKind::Seq2Seq) {
        return Err(Error::Config(
            "symmetric decoder initialization needs an encoder-style checkpoint".into(),
        ));
    }
    let limit = match scheme.layers_to_load {
        None => loadable_units(cfg),
        Some(k) if k <= 2 * cfg.num_layers => units_for(k, cfg),
        Some(k) => {
            return Err(Error::Config(format!(
                "layers_to_load {k} outside 0..={}",
                2 * cfg.num_layers
            )))
        }
    };
    let layout = param_layout(cfg, kind);
    let mut entries = Vec::with_capacity(layout.len());
    for (name, shape, init) in layout {
        let decoder_side = is_decoder_side(&name);
        let loaded = unit_of(&name, cfg.num_layers) < limit;
        let plan: Option<(String, bool)> = if !loaded {
            None
        } else if !decoder_side {
            match scheme.encoder {
                EncoderSource::Random => None,
                // Task heads are copied only when the source carries them.
                EncoderSource::Checkpoint if is_head(&name) => src.contains(&name).then(|| (name.clone(), true)),
                EncoderSource::Checkpoint => Some((name.clone(), true)),
            }
        } else {
            match scheme.decoder {
                DecoderSource::Random => None,
                DecoderSource::Checkpoint if is_head(&name) => src.contains(&name).then(|| (name.clone(), true)),
                DecoderSource::Checkpoint => Some((name.clone(), true)),
                DecoderSource::Symmetric if name == "embeddings.dec_pos" => {
                    Some(("embeddings.enc_pos".to_string(), false))
                }
                DecoderSource::Symmetric => symmetric_source(&name).map(|s| (s, true)),
            }
        };
        let Some((from, exact)) = plan else {
            entries.push((name, Disposition::Randomized));
            continue;
        };
        let value = src
            .get(&from)
            .ok_or_else(|| Error::Surgery(format!("source checkpoint lacks `{from}` needed for `{name}`")))?;
        let (tensor, label) = if exact {
            if value.shape() != shape.as_slice() {
                return Err(Error::Incompatible(format!(
                    "`{from}` has shape {:?}, `{name}` needs {:?}",
                    value.shape(),
                    shape
                )));
            }
            (value.clone(), from)
        } else {
            let fresh = random_tensor(seed, &name, &shape, init);
            (
                resize_rows(value, &fresh)?,
                format!("{from}[..{}]", shape[0].min(value.shape()[0])),
            )
        };
        store.set(&name, tensor)?;
        entries.push((name, Disposition::Copied(label)));
    }
    // A store that copied nothing is a plain random init and has no history.
    if entries.iter().any(|(_, d)| matches!(d, Disposition::Copied(_))) {
        store.meta.provenance = src.meta.provenance.clone();
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    Ok((store, SurgeryReport { entries }))
}

fn is_head(name: &str) -> bool {
    name == "output.bias" || name == "mlm.bias" || name.starts_with("copy_gate.") || name.starts_with("selector.")
}

/// Leading rows of `src` over `fresh`; rows beyond the source stay fresh.
fn resize_rows(src: &Tensor, fresh: &Tensor) -> Result<Tensor> {
    let (rows_src, cols_src) = src.dims2()?;
    let (rows, cols) = fresh.dims2()?;
    if cols != cols_src {
        return Err(Error::Incompatible(format!(
            "row width {cols_src} cannot fill a table of width {cols}"
        )));
    }
    let mut out = fresh.clone();
    let n = rows.min(rows_src) * cols;
    out.data_mut()[..n].copy_from_slice(&src.data()[..n]);
    Ok(out)
}

impl ParamStore {
    /// Dimension check for a surgery source; decoder length may differ
    /// since it is rebuilt or truncated.
    fn check_compatible_source(&self, cfg: &ModelConfig) -> Result<()> {
        match &self.meta.config {
            Some(own) if self.meta.kind == Some(StoreKind::Seq2Seq) => self.check_compatible(&ModelConfig {
                decoder_positions: own.decoder_positions,
                ..cfg.clone()
            }),
            _ => {
                let mut relaxed = self.clone();
                relaxed.meta.kind = None;
                relaxed.check_compatible(cfg)
            }
        }
    }
}

/// Partial loading: the first `k` units (embeddings, then encoder layers
/// bottom-up, then decoder layers bottom-up) come from `source`, the rest
/// are random. The decoder is read symmetrically from encoder-style sources
/// and by name from encoder-decoder sources.
pub fn apply_partial(
    source: &ParamStore,
    cfg: &ModelConfig,
    k: usize,
    seed: u64,
) -> Result<(ParamStore, SurgeryReport)> {
    if k > 2 * cfg.num_layers {
        return Err(Error::Config(format!("k = {k} outside 0..={}", 2 * cfg.num_layers)));
    }
    let decoder = match source.meta.kind {
        Some(StoreKind::Seq2Seq) => DecoderSource::Checkpoint,
        _ => DecoderSource::Symmetric,
    };
    let scheme = InitScheme {
        encoder: EncoderSource::Checkpoint,
        decoder,
        layers_to_load: Some(k),
    };
    apply_scheme(&scheme, Some(source), cfg, StoreKind::Seq2Seq, seed)
}

/// Trains one stage starting from `prev` and records it in the provenance.
pub fn chain_stage<F>(prev: ParamStore, stage: &str, train: F) -> Result<ParamStore>
where
    F: FnOnce(ParamStore) -> Result<ParamStore>,
{
    let history = prev.meta.provenance.clone();
    let mut out = train(prev).map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: stage.to_string(),
            reason: other.to_string(),
        },
    })?;
    if !out.is_finite() {
        return Err(Error::Stage {
            stage: stage.to_string(),
            reason: "non-finite parameters after training".into(),
        });
    }
    out.meta.provenance = history;
    out.push_stage(stage);
    Ok(out)
}
