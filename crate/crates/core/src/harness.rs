//! Run configuration, the pipeline stages behind each CLI subcommand, and
//! experiment grids with their comparative reports.
//!
//! A run is described by one TOML file. Relative paths inside it resolve
//! against the output root, which is `$STAGESUM_OUTPUT_ROOT` or the working
//! directory. Every artifact of a run lands in its `output_dir`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{apply_scheme, chain_stage, InitScheme, ParamStore};
use crate::error::{Error, Result};
use crate::metrics::{
    auc, corpus_abstraction_rate, coverage_counts, format_report, mean, parse_report, pearson_r, report_value,
    rouge_lines, rouge_report, rouge_tokens, std_dev, CoverageCounts, SelectionEvalReport,
};
use crate::model::{ModelConfig, StoreKind};
use crate::search::{decode_corpus, summaries, DecodeConfig};
use crate::selection::{build_labels, calibrate_threshold, selector_forward, write_label_dump, SelectionLabels};
use crate::synth::{generate, CorpusSpec, TaskKind};
use crate::tokenizer::{
    detokenize, encode_records, read_lines, read_pairs, tokenize_ids, write_lines, EncodedExample, Limits, Record,
    Vocabulary,
};
use crate::train::{selection_pairs, train_stage, Denoise, Select, StageKind, Summarize, TrainConfig, TrainReport};

pub const OUTPUT_ROOT_ENV: &str = "STAGESUM_OUTPUT_ROOT";

/// `$STAGESUM_OUTPUT_ROOT`, or the working directory when unset.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum CorpusSource {
    /// Generated in memory from a spec.
    Synthetic(CorpusSpec),
    /// A pair file (`document<TAB>summary` or JSON lines) or, for denoising,
    /// one sequence per line, with its vocabulary file.
    Files { path: PathBuf, vocab: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Not needed by runs that only decode.
    #[serde(default)]
    pub train: Option<CorpusSource>,
    pub dev: CorpusSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub scheme: InitScheme,
    /// Checkpoint the scheme reads from.
    #[serde(default)]
    pub source: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Selector probabilities above its calibrated threshold.
    Predicted,
    /// Alignment labels built from the reference summary.
    Oracle,
}

/// Bottom-up masking of the copy pathway at decode time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub mode: SelectionMode,
    /// Output directory of a `select-train` run; needed for `predicted`.
    #[serde(default)]
    pub selector: Option<PathBuf>,
}

/// Explicit files for `eval`; defaults are the run's own decode outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFiles {
    pub references: PathBuf,
    pub hypotheses: PathBuf,
    #[serde(default)]
    pub sources: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    /// `vocab_size = 0` takes the size of the corpus vocabulary.
    pub model: ModelConfig,
    pub limits: Limits,
    pub data: DataConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    pub init: InitConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub selection: Option<SelectionConfig>,
    #[serde(default)]
    pub eval: Option<EvalFiles>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("run config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// A run config bound to an output root.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: RunConfig,
    pub root: PathBuf,
}

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const TRAIN_REPORT_FILE: &str = "train_report.jsonl";
pub const SURGERY_FILE: &str = "surgery.txt";
pub const SUMMARIES_FILE: &str = "summaries.txt";
pub const REFERENCES_FILE: &str = "references.txt";
pub const SOURCES_FILE: &str = "sources.txt";
pub const METRICS_FILE: &str = "metrics.txt";
pub const SELECTION_REPORT_FILE: &str = "selection_report.txt";
pub const LABELS_FILE: &str = "dev_labels.txt";
pub const CONFIG_FILE: &str = "config.toml";

enum Loaded {
    Pairs(Vec<Record>),
    Lines(Vec<String>),
}

struct Data {
    vocab: Vocabulary,
    train: Option<Loaded>,
    dev: Loaded,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl Run {
    pub fn new(config: RunConfig, root: impl Into<PathBuf>) -> Self {
        Run {
            config,
            root: root.into(),
        }
    }

    /// Loads a config file and binds it to [`output_root`].
    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(Run::new(RunConfig::load(path)?, output_root()))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.dir().join(name)
    }

    fn stage(&self) -> Option<StageKind> {
        self.config.train.as_ref().map(|t| t.stage)
    }

    fn record_config(&self) -> Result<()> {
        write_text(&self.artifact(CONFIG_FILE), &self.config.to_toml()?)
    }

    fn load_source(&self, src: &CorpusSource, lines: bool) -> Result<(Vocabulary, Loaded)> {
        match src {
            CorpusSource::Synthetic(spec) => {
                let c = generate(spec)?;
                let loaded = if spec.kind == TaskKind::Generic {
                    Loaded::Lines(c.lines)
                } else {
                    Loaded::Pairs(c.records)
                };
                Ok((c.vocab, loaded))
            }
            CorpusSource::Files { path, vocab } => {
                let vocab = Vocabulary::load(&self.resolve(vocab))?;
                let path = self.resolve(path);
                let loaded = if lines {
                    Loaded::Lines(read_lines(&path)?)
                } else {
                    Loaded::Pairs(read_pairs(&path)?)
                };
                Ok((vocab, loaded))
            }
        }
    }

    fn load_data(&self) -> Result<Data> {
        let lines = self.stage() == Some(StageKind::Denoise);
        let (vocab, dev) = self.load_source(&self.config.data.dev, lines)?;
        let train = match &self.config.data.train {
            Some(src) => {
                let (v, t) = self.load_source(src, lines)?;
                if v != vocab {
                    return Err(Error::Config("train and dev corpora use different vocabularies".into()));
                }
                Some(t)
            }
            None => None,
        };
        Ok(Data { vocab, train, dev })
    }

    /// Model config with the vocabulary size filled in.
    fn model_config(&self, vocab: &Vocabulary) -> Result<ModelConfig> {
        let mut cfg = self.config.model.clone();
        if cfg.vocab_size == 0 {
            cfg.vocab_size = vocab.len();
        } else if cfg.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model vocab_size {} but the corpus vocabulary has {} entries",
                cfg.vocab_size,
                vocab.len()
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Initial parameters under the configured scheme, with the surgery report.
    fn initial_params(&self, cfg: &ModelConfig, kind: StoreKind) -> Result<ParamStore> {
        let init = &self.config.init;
        let source = match &init.source {
            Some(p) => Some(ParamStore::load(&self.resolve(p))?),
            None => None,
        };
        let (store, report) = apply_scheme(&init.scheme, source.as_ref(), cfg, kind, self.config.seed)?;
        write_text(&self.artifact(SURGERY_FILE), &report.to_text())?;
        Ok(store)
    }

    /// The run's trained checkpoint, or its initialization when it has none.
    fn params_for_inference(&self, cfg: &ModelConfig) -> Result<ParamStore> {
        let trained = self.artifact(CHECKPOINT_FILE);
        let params = if trained.exists() {
            ParamStore::load(&trained)?
        } else {
            self.initial_params(cfg, StoreKind::Seq2Seq)?
        };
        params.check_compatible(cfg)?;
        Ok(params)
    }
}

fn pairs(loaded: Option<&Loaded>, what: &str) -> Result<Vec<Record>> {
    match loaded {
        Some(Loaded::Pairs(p)) => Ok(p.clone()),
        Some(Loaded::Lines(_)) => Err(Error::Config(format!("{what} corpus must hold document/summary pairs"))),
        None => Err(Error::Config(format!("{what} corpus is required"))),
    }
}

fn lines_ids(loaded: Option<&Loaded>, vocab: &Vocabulary, limit: usize, what: &str) -> Result<Vec<Vec<usize>>> {
    let lines: Vec<&str> = match loaded {
        Some(Loaded::Lines(l)) => l.iter().map(String::as_str).collect(),
        Some(Loaded::Pairs(p)) => p.iter().map(|r| r.document.as_str()).collect(),
        None => return Err(Error::Config(format!("{what} corpus is required"))),
    };
    lines
        .into_iter()
        .map(|l| {
            let mut ids = tokenize_ids(l, vocab)?;
            ids.truncate(limit);
            Ok(ids)
        })
        .collect()
}

/// Alignment labels between each example's source and reference summary.
pub fn oracle_labels(examples: &[EncodedExample]) -> Vec<SelectionLabels> {
    examples
        .iter()
        .map(|e| build_labels(e.source_content(), e.summary_content()))
        .collect()
}

/// Writes both corpora of a run that uses synthetic specs to
/// `output_dir/{train,dev}`.
pub fn cmd_generate(run: &Run) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let splits = [
        ("train", run.config.data.train.as_ref()),
        ("dev", Some(&run.config.data.dev)),
    ];
    for (split, src) in splits {
        if let Some(CorpusSource::Synthetic(spec)) = src {
            let dir = run.artifact(split);
            generate(spec)?.write(&dir)?;
            written.push(dir);
        }
    }
    if written.is_empty() {
        return Err(Error::Config(
            "generate needs at least one synthetic corpus spec".into(),
        ));
    }
    run.record_config()?;
    Ok(written)
}

fn require_stage(run: &Run, want: StageKind) -> Result<TrainConfig> {
    let tc = run
        .config
        .train
        .clone()
        .ok_or_else(|| Error::Config("this command needs a [train] section".into()))?;
    if tc.stage != want {
        return Err(Error::Config(format!(
            "[train] stage is {:?}, this command runs {:?}",
            tc.stage, want
        )));
    }
    Ok(tc)
}

fn finish_training(run: &Run, params: &ParamStore, mut report: TrainReport) -> Result<TrainReport> {
    let ckpt = run.artifact(CHECKPOINT_FILE);
    params.save(&ckpt)?;
    report.checkpoint = Some(CHECKPOINT_FILE.to_string());
    write_text(&run.artifact(TRAIN_REPORT_FILE), &report.to_json_lines())?;
    Ok(report)
}

/// Trains `params` through `train_stage` inside a provenance-recording stage.
fn run_stage(
    run: &Run,
    init: ParamStore,
    objective: &dyn crate::train::Objective,
    cfg: &ModelConfig,
    tc: &TrainConfig,
) -> Result<(ParamStore, TrainReport)> {
    let mut report = None;
    let params = chain_stage(init, &run.config.name, |p| {
        let t = train_stage(p, objective, cfg, tc)?;
        report = Some(t.report);
        Ok(t.params)
    })?;
    Ok((params, report.expect("set on success")))
}

/// Masked-token pretraining of an encoder.
pub fn cmd_pretrain(run: &Run) -> Result<TrainReport> {
    let tc = require_stage(run, StageKind::Denoise)?;
    run.record_config()?;
    let data = run.load_data()?;
    let cfg = run.model_config(&data.vocab)?;
    let train = lines_ids(data.train.as_ref(), &data.vocab, cfg.encoder_positions, "train")?;
    let dev = lines_ids(Some(&data.dev), &data.vocab, cfg.encoder_positions, "dev")?;
    let init = run.initial_params(&cfg, StoreKind::Encoder)?;
    let objective = Denoise {
        train: &train,
        dev: &dev,
        dev_seed: run.config.seed.wrapping_add(1),
    };
    let (params, report) = run_stage(run, init, &objective, &cfg, &tc)?;
    finish_training(run, &params, report)
}

/// Summarization training.
pub fn cmd_train(run: &Run) -> Result<TrainReport> {
    let tc = require_stage(run, StageKind::Summarize)?;
    run.record_config()?;
    let data = run.load_data()?;
    let cfg = run.model_config(&data.vocab)?;
    let limits = run.config.limits;
    let train = encode_records(&pairs(data.train.as_ref(), "train")?, &data.vocab, limits)?;
    let dev = encode_records(&pairs(Some(&data.dev), "dev")?, &data.vocab, limits)?;
    let init = run.initial_params(&cfg, StoreKind::Seq2Seq)?;
    let objective = Summarize {
        train: &train,
        dev: &dev,
        vocab: &data.vocab,
        decode: run.config.decode,
    };
    let (params, report) = run_stage(run, init, &objective, &cfg, &tc)?;
    finish_training(run, &params, report)
}

/// Selector evaluation on labelled examples: threshold, AUCs and coverage
/// for the model and for the oracle.
pub fn selection_eval_lines(
    params: &ParamStore,
    cfg: &ModelConfig,
    examples: &[EncodedExample],
    labels: &[SelectionLabels],
    threshold: f64,
) -> Result<Vec<(String, f64)>> {
    let scored = selection_pairs(params, cfg, examples, labels)?;
    let (scores, ys): (Vec<f64>, Vec<bool>) = scored.iter().copied().unzip();
    let a = auc(&scores, &ys)?;
    let mut model = CoverageCounts::default();
    let mut oracle = CoverageCounts::default();
    let mut offset = 0;
    for (ex, l) in examples.iter().zip(labels) {
        let n = l.y.len();
        let selected: Vec<bool> = scores[offset..offset + n].iter().map(|&p| p > threshold).collect();
        offset += n;
        model += coverage_counts(&selected, &l.y, ex.source_content(), ex.summary_content())?;
        oracle += coverage_counts(&l.y, &l.y, ex.source_content(), ex.summary_content())?;
    }
    let (m, o) = (model.prf(), oracle.prf());
    let mut lines = vec![("threshold".to_string(), threshold)];
    lines.extend(
        SelectionEvalReport {
            auc_pr: a.pr,
            auc_roc: a.roc,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        }
        .lines("model_"),
    );
    lines.push(("oracle_precision".into(), o.precision));
    lines.push(("oracle_recall".into(), o.recall));
    lines.push(("oracle_f1".into(), o.f1));
    Ok(lines)
}

/// Content-selector training, threshold calibration on dev and the
/// selection report.
pub fn cmd_select_train(run: &Run) -> Result<Vec<(String, f64)>> {
    let tc = require_stage(run, StageKind::Select)?;
    run.record_config()?;
    let data = run.load_data()?;
    let cfg = run.model_config(&data.vocab)?;
    let limits = run.config.limits;
    let train = encode_records(&pairs(data.train.as_ref(), "train")?, &data.vocab, limits)?;
    let dev = encode_records(&pairs(Some(&data.dev), "dev")?, &data.vocab, limits)?;
    let train_labels = oracle_labels(&train);
    let dev_labels = oracle_labels(&dev);
    write_label_dump(&run.artifact(LABELS_FILE), &dev_labels)?;
    let init = run.initial_params(&cfg, StoreKind::Selector)?;
    let objective = Select {
        train: &train,
        train_labels: &train_labels,
        dev: &dev,
        dev_labels: &dev_labels,
    };
    let (params, report) = run_stage(run, init, &objective, &cfg, &tc)?;
    finish_training(run, &params, report)?;
    let (threshold, _) = calibrate_threshold(&selection_pairs(&params, &cfg, &dev, &dev_labels)?)?;
    let lines = selection_eval_lines(&params, &cfg, &dev, &dev_labels, threshold)?;
    write_text(&run.artifact(SELECTION_REPORT_FILE), &format_report(&lines))?;
    Ok(lines)
}

fn selection_masks(run: &Run, cfg: &ModelConfig, dev: &[EncodedExample]) -> Result<Option<Vec<Vec<bool>>>> {
    let Some(sel) = &run.config.selection else {
        return Ok(None);
    };
    match sel.mode {
        SelectionMode::Oracle => Ok(Some(oracle_labels(dev).into_iter().map(|l| l.y).collect())),
        SelectionMode::Predicted => {
            let dir = run.resolve(
                sel.selector
                    .as_deref()
                    .ok_or_else(|| Error::Config("predicted selection needs `selector`".into()))?,
            );
            let params = ParamStore::load(&dir.join(CHECKPOINT_FILE))?;
            params.check_compatible(cfg)?;
            let report = parse_report(
                &fs::read_to_string(dir.join(SELECTION_REPORT_FILE))
                    .map_err(|e| Error::io(dir.join(SELECTION_REPORT_FILE), e))?,
            )?;
            let threshold = report_value(&report, "threshold")
                .ok_or_else(|| Error::Report("selection report lacks `threshold`".into()))?;
            dev.iter()
                .map(|ex| {
                    let mut p = selector_forward(&params, cfg, &ex.source_ids, &ex.source_pad_mask)?;
                    p.threshold = Some(threshold);
                    Ok(p.selected())
                })
                .collect::<Result<Vec<_>>>()
                .map(Some)
        }
    }
}

/// Decodes the dev corpus and writes summaries, references and sources,
/// one detokenized line per example.
pub fn cmd_decode(run: &Run) -> Result<Vec<String>> {
    run.record_config()?;
    let data = run.load_data()?;
    let cfg = run.model_config(&data.vocab)?;
    let dev = encode_records(&pairs(Some(&data.dev), "dev")?, &data.vocab, run.config.limits)?;
    let params = run.params_for_inference(&cfg)?;
    let masks = selection_masks(run, &cfg, &dev)?;
    let hyps = decode_corpus(&params, &cfg, &dev, masks.as_deref(), &run.config.decode)?;
    let out = summaries(&hyps, &data.vocab);
    let refs: Vec<String> = dev
        .iter()
        .map(|e| detokenize(e.summary_content(), &data.vocab))
        .collect();
    let srcs: Vec<String> = dev
        .iter()
        .map(|e| detokenize(e.source_content(), &data.vocab))
        .collect();
    write_lines(&run.artifact(SUMMARIES_FILE), &out)?;
    write_lines(&run.artifact(REFERENCES_FILE), &refs)?;
    write_lines(&run.artifact(SOURCES_FILE), &srcs)?;
    Ok(out)
}

fn read_all_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn abstraction(sources: &[String], texts: &[String]) -> Result<f64> {
    let toks: Vec<(Vec<String>, Vec<String>)> = sources
        .iter()
        .zip(texts)
        .map(|(s, t)| (rouge_tokens(s), rouge_tokens(t)))
        .collect();
    let pairs: Vec<(&[String], &[String])> = toks.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
    corpus_abstraction_rate(&pairs)
}

/// ROUGE, abstraction rates and the best dev epoch as a `key value` report.
pub fn cmd_eval(run: &Run) -> Result<Vec<(String, f64)>> {
    let (refs_path, hyps_path, srcs_path) = match &run.config.eval {
        Some(f) => (
            run.resolve(&f.references),
            run.resolve(&f.hypotheses),
            f.sources.as_ref().map(|p| run.resolve(p)),
        ),
        None => (
            run.artifact(REFERENCES_FILE),
            run.artifact(SUMMARIES_FILE),
            Some(run.artifact(SOURCES_FILE)),
        ),
    };
    let refs = read_all_lines(&refs_path)?;
    let hyps = read_all_lines(&hyps_path)?;
    let report = rouge_report(&refs, &hyps)?;
    let mut lines = vec![("num_examples".to_string(), refs.len() as f64)];
    lines.extend(rouge_lines("", &report.mean));
    if let Some(p) = srcs_path {
        let srcs = read_all_lines(&p)?;
        if srcs.len() != refs.len() {
            return Err(Error::Report(format!(
                "{} sources for {} references",
                srcs.len(),
                refs.len()
            )));
        }
        // An all-empty output has no tokens to classify; report it as zero.
        lines.push(("abstraction_rate".into(), abstraction(&srcs, &hyps).unwrap_or(0.0)));
        lines.push(("reference_abstraction_rate".into(), abstraction(&srcs, &refs)?));
    }
    let train_report = run.artifact(TRAIN_REPORT_FILE);
    if train_report.exists() {
        let text = fs::read_to_string(&train_report).map_err(|e| Error::io(&train_report, e))?;
        lines.push((
            "best_epoch".into(),
            TrainReport::from_json_lines(&text)?.best_epoch as f64,
        ));
    }
    write_text(&run.artifact(METRICS_FILE), &format_report(&lines))?;
    Ok(lines)
}

fn terminal_artifact(run: &Run) -> &'static str {
    match run.stage() {
        Some(StageKind::Denoise) => TRAIN_REPORT_FILE,
        Some(StageKind::Select) => SELECTION_REPORT_FILE,
        _ => METRICS_FILE,
    }
}

/// Whether the run directory already holds the finished run of exactly this
/// config.
pub fn is_complete(run: &Run) -> bool {
    let recorded = fs::read_to_string(run.artifact(CONFIG_FILE)).ok();
    let current = run.config.to_toml().ok();
    recorded.is_some() && recorded == current && run.artifact(terminal_artifact(run)).exists()
}

/// Every stage the config asks for: training of the configured kind, then
/// decode and eval for summarization runs.
pub fn run_pipeline(run: &Run) -> Result<()> {
    match run.stage() {
        Some(StageKind::Denoise) => {
            cmd_pretrain(run)?;
        }
        Some(StageKind::Select) => {
            cmd_select_train(run)?;
        }
        Some(StageKind::Summarize) => {
            cmd_train(run)?;
            cmd_decode(run)?;
            cmd_eval(run)?;
        }
        None => {
            cmd_decode(run)?;
            cmd_eval(run)?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    /// Short-form initialization schemes.
    GigawordTable,
    /// Long-form schemes including the multi-stage chain and bottom-up rows.
    CnndmTable,
    /// Partial loading of the short-form checkpoint for k = 0..=2L.
    LayerwiseSweep,
    /// Rows read from `runs`.
    Custom,
}

/// Corpus sizes and training budgets of the built-in grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskScale {
    /// `vocab_size = 0` is filled in from the corpus.
    pub model: ModelConfig,
    pub limits: Limits,
    pub generic_examples: usize,
    pub shortform_examples: usize,
    pub longform_examples: usize,
    pub dev_examples: usize,
    pub generic_epochs: usize,
    pub shortform_epochs: usize,
    pub longform_epochs: usize,
    pub selector_epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub longform_alpha: f64,
    pub decode: DecodeConfig,
}

impl Default for DeskScale {
    fn default() -> Self {
        DeskScale {
            model: ModelConfig::desk(0),
            limits: Limits {
                source: 128,
                target: 32,
            },
            generic_examples: 8000,
            shortform_examples: 3000,
            longform_examples: 600,
            dev_examples: 100,
            generic_epochs: 8,
            shortform_epochs: 8,
            longform_epochs: 10,
            selector_epochs: 6,
            lr: 1e-3,
            dropout: 0.1,
            batch_size: 16,
            longform_alpha: 0.15,
            decode: DecodeConfig::GREEDY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub grid: GridKind,
    /// Shared by grids that should reuse each other's runs.
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub scale: DeskScale,
    /// Run config files for `custom` grids, relative to the grid file.
    #[serde(default)]
    pub runs: Vec<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl GridConfig {
    pub fn new(grid: GridKind, output_dir: impl Into<PathBuf>) -> Self {
        GridConfig {
            grid,
            output_dir: output_dir.into(),
            seeds: default_seeds(),
            scale: DeskScale::default(),
            runs: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse(format!("grid config: {e}")))
    }
}

/// One table row: a scheme label and the run that fills it.
#[derive(Clone, Debug, PartialEq)]
pub struct GridEntry {
    pub label: String,
    /// Sweep position for layerwise rows.
    pub k: Option<usize>,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentGrid {
    pub kind: GridKind,
    pub output_dir: PathBuf,
    /// Runs whose checkpoints the rows start from, in execution order.
    pub prerequisites: Vec<RunConfig>,
    pub rows: Vec<GridEntry>,
}

const GENERIC_SEEDS: (u64, u64) = (10, 11);
const SHORTFORM_SEEDS: (u64, u64) = (1, 2);
const LONGFORM_SEEDS: (u64, u64) = (3, 4);

struct Builder<'a> {
    scale: &'a DeskScale,
    dir: PathBuf,
}

impl Builder<'_> {
    fn corpus(&self, kind: TaskKind, split_seed: u64, n: usize) -> CorpusSource {
        let spec = match kind {
            TaskKind::Generic => CorpusSpec::generic(n, split_seed),
            TaskKind::Shortform => CorpusSpec::shortform(n, split_seed),
            TaskKind::Longform => CorpusSpec {
                alpha_abs: self.scale.longform_alpha,
                ..CorpusSpec::longform(n, split_seed)
            },
        };
        CorpusSource::Synthetic(spec)
    }

    fn data(&self, kind: TaskKind) -> DataConfig {
        let s = self.scale;
        let (seeds, n) = match kind {
            TaskKind::Generic => (GENERIC_SEEDS, s.generic_examples),
            TaskKind::Shortform => (SHORTFORM_SEEDS, s.shortform_examples),
            TaskKind::Longform => (LONGFORM_SEEDS, s.longform_examples),
        };
        DataConfig {
            train: Some(self.corpus(kind, seeds.0, n)),
            dev: self.corpus(kind, seeds.1, s.dev_examples),
        }
    }

    fn train(&self, stage: StageKind, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.scale.lr,
            dropout: self.scale.dropout,
            batch_size: self.scale.batch_size,
            max_epochs: epochs,
            eval_every: 1,
            seed,
            stage,
        }
    }

    fn run(&self, name: &str, seed: u64, data: DataConfig, train: Option<TrainConfig>, init: InitConfig) -> RunConfig {
        RunConfig {
            name: name.to_string(),
            seed,
            output_dir: self.dir.join(name),
            model: self.scale.model.clone(),
            limits: self.scale.limits,
            data,
            train,
            init,
            decode: self.scale.decode,
            selection: None,
            eval: None,
        }
    }

    fn ckpt(&self, run: &str) -> PathBuf {
        self.dir.join(run).join(CHECKPOINT_FILE)
    }

    fn bert(&self) -> RunConfig {
        let tc = self.train(StageKind::Denoise, self.scale.generic_epochs, 0);
        let init = InitConfig {
            scheme: InitScheme::RANDOM,
            source: None,
        };
        self.run("bert", 0, self.data(TaskKind::Generic), Some(tc), init)
    }

    /// Short-form stage of the chain, started from the denoised encoder on
    /// both sides.
    fn shortform_stage(&self) -> RunConfig {
        let tc = self.train(StageKind::Summarize, self.scale.shortform_epochs, 0);
        let init = InitConfig {
            scheme: InitScheme::SYMMETRIC,
            source: Some(self.ckpt("bert")),
        };
        self.run("shortform", 0, self.data(TaskKind::Shortform), Some(tc), init)
    }

    fn selector(&self) -> RunConfig {
        let tc = self.train(StageKind::Select, self.scale.selector_epochs, 0);
        let init = InitConfig {
            scheme: InitScheme::ENCODER_ONLY,
            source: Some(self.ckpt("bert")),
        };
        self.run("selector", 0, self.data(TaskKind::Longform), Some(tc), init)
    }

    /// A summarization row on `kind` data.
    fn row(&self, label: &str, kind: TaskKind, seed: u64, scheme: InitScheme, source: Option<&str>) -> GridEntry {
        let epochs = match kind {
            TaskKind::Longform => self.scale.longform_epochs,
            _ => self.scale.shortform_epochs,
        };
        let tc = self.train(StageKind::Summarize, epochs, seed);
        let init = InitConfig {
            scheme,
            source: source.map(|s| self.ckpt(s)),
        };
        let name = format!("{label}-s{seed}");
        GridEntry {
            label: label.to_string(),
            k: None,
            config: self.run(&name, seed, self.data(kind), Some(tc), init),
        }
    }

    fn bottom_up(&self, label: &str, seed: u64, mode: SelectionMode) -> GridEntry {
        let data = DataConfig {
            train: None,
            dev: self.data(TaskKind::Longform).dev,
        };
        let init = InitConfig {
            scheme: InitScheme::FULL,
            source: Some(self.ckpt(&format!("two-step-s{seed}"))),
        };
        let mut config = self.run(&format!("{label}-s{seed}"), seed, data, None, init);
        config.selection = Some(SelectionConfig {
            mode,
            selector: Some(self.dir.join("selector")),
        });
        GridEntry {
            label: label.to_string(),
            k: None,
            config,
        }
    }
}

/// Expands a grid config into its runs.
pub fn build_grid(gc: &GridConfig, grid_file_dir: Option<&Path>) -> Result<ExperimentGrid> {
    let b = Builder {
        scale: &gc.scale,
        dir: gc.output_dir.clone(),
    };
    let two_l = 2 * gc.scale.model.num_layers;
    let mut rows = Vec::new();
    let prerequisites = match gc.grid {
        GridKind::GigawordTable => {
            for &seed in &gc.seeds {
                rows.push(b.row("random-random", TaskKind::Shortform, seed, InitScheme::RANDOM, None));
                rows.push(b.row(
                    "bert-random",
                    TaskKind::Shortform,
                    seed,
                    InitScheme::ENCODER_ONLY,
                    Some("bert"),
                ));
                rows.push(b.row(
                    "bert-bert",
                    TaskKind::Shortform,
                    seed,
                    InitScheme::SYMMETRIC,
                    Some("bert"),
                ));
            }
            vec![b.bert()]
        }
        GridKind::CnndmTable => {
            for &seed in &gc.seeds {
                rows.push(b.row("zero-step", TaskKind::Longform, seed, InitScheme::RANDOM, None));
                rows.push(b.row(
                    "bert-random",
                    TaskKind::Longform,
                    seed,
                    InitScheme::ENCODER_ONLY,
                    Some("bert"),
                ));
                rows.push(b.row(
                    "one-step",
                    TaskKind::Longform,
                    seed,
                    InitScheme::SYMMETRIC,
                    Some("bert"),
                ));
                rows.push(b.row(
                    "two-step",
                    TaskKind::Longform,
                    seed,
                    InitScheme::FULL,
                    Some("shortform"),
                ));
                rows.push(b.bottom_up("bottom-up", seed, SelectionMode::Predicted));
                rows.push(b.bottom_up("bottom-up-oracle", seed, SelectionMode::Oracle));
            }
            vec![b.bert(), b.shortform_stage(), b.selector()]
        }
        GridKind::LayerwiseSweep => {
            for &seed in &gc.seeds {
                for k in 0..=two_l {
                    // The end points are the zero-step and two-step runs.
                    let mut e = if k == 0 {
                        b.row("zero-step", TaskKind::Longform, seed, InitScheme::RANDOM, None)
                    } else if k == two_l {
                        b.row(
                            "two-step",
                            TaskKind::Longform,
                            seed,
                            InitScheme::FULL,
                            Some("shortform"),
                        )
                    } else {
                        let scheme = InitScheme {
                            layers_to_load: Some(k),
                            ..InitScheme::FULL
                        };
                        b.row(&format!("k{k}"), TaskKind::Longform, seed, scheme, Some("shortform"))
                    };
                    e.label = format!("k{k}");
                    e.k = Some(k);
                    rows.push(e);
                }
            }
            vec![b.bert(), b.shortform_stage()]
        }
        GridKind::Custom => {
            let base = grid_file_dir.unwrap_or(Path::new("."));
            for p in &gc.runs {
                let config = RunConfig::load(&base.join(p))?;
                rows.push(GridEntry {
                    label: config.name.clone(),
                    k: None,
                    config,
                });
            }
            Vec::new()
        }
    };
    Ok(ExperimentGrid {
        kind: gc.grid,
        output_dir: gc.output_dir.clone(),
        prerequisites,
        rows,
    })
}

/// Columns of the comparative report, in order.
pub const GRID_COLUMNS: [&str; 5] = ["rouge1_f1", "rouge2_f1", "rougeL_f1", "abstraction_rate", "best_epoch"];

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub label: String,
    pub run: String,
    pub seed: u64,
    pub k: Option<usize>,
    /// `None` when the run is absent or failed.
    pub metrics: Option<Vec<(String, f64)>>,
}

impl GridRow {
    pub fn value(&self, key: &str) -> Option<f64> {
        self.metrics.as_ref().and_then(|m| report_value(m, key))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchemeSummary {
    pub label: String,
    pub runs: usize,
    /// Mean and sample standard deviation per column over present runs.
    pub columns: Vec<(String, Option<(f64, f64)>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub k: usize,
    pub mean: f64,
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridReport {
    pub kind: GridKind,
    pub rows: Vec<GridRow>,
    pub schemes: Vec<SchemeSummary>,
    /// Layerwise sweeps only: mean ROUGE-L F1 and its spread per k.
    pub sweep: Vec<SweepPoint>,
    /// Between k and ROUGE-L F1 over every present run of the sweep.
    pub pearson_r: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x:.4}"))
}

impl GridReport {
    pub fn scheme(&self, label: &str) -> Option<&SchemeSummary> {
        self.schemes.iter().find(|s| s.label == label)
    }

    /// Per-seed values of `key` for a scheme, skipping absent runs.
    pub fn values(&self, label: &str, key: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.label == label)
            .filter_map(|r| r.value(key))
            .collect()
    }

    /// Tab-separated table: one line per run, then one mean line per scheme.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("scheme\trun\tseed\t{}\n", GRID_COLUMNS.join("\t"));
        for r in &self.rows {
            let cells: Vec<String> = GRID_COLUMNS.iter().map(|c| fmt_opt(r.value(c))).collect();
            writeln!(out, "{}\t{}\t{}\t{}", r.label, r.run, r.seed, cells.join("\t")).expect("String write");
        }
        for s in &self.schemes {
            let cells: Vec<String> = s
                .columns
                .iter()
                .map(|(_, v)| v.map_or_else(|| "absent".into(), |(m, sd)| format!("{m:.4}±{sd:.4}")))
                .collect();
            writeln!(out, "{}\tmean\t-\t{}", s.label, cells.join("\t")).expect("String write");
        }
        out
    }

    /// `k mean spread` lines for plotting, plus the correlation.
    pub fn sweep_tsv(&self) -> String {
        let mut out = String::from("k\trougeL_f1_mean\trougeL_f1_spread\n");
        for p in &self.sweep {
            writeln!(out, "{}\t{:.6}\t{:.6}", p.k, p.mean, p.spread).expect("String write");
        }
        if let Some(r) = self.pearson_r {
            writeln!(out, "# pearson_r {r:.6}").expect("String write");
        }
        out
    }
}

/// Runs prerequisites and rows in order, skipping runs already complete for
/// the same config. A failing row is reported as absent; a failing
/// prerequisite aborts the grid.
pub fn run_grid(grid: &ExperimentGrid, root: &Path, log: &mut dyn FnMut(&str)) -> Result<GridReport> {
    for config in &grid.prerequisites {
        let run = Run::new(config.clone(), root);
        if is_complete(&run) {
            log(&format!("{}: up to date", config.name));
            continue;
        }
        log(&format!("{}: running", config.name));
        run_pipeline(&run)?;
    }
    for entry in &grid.rows {
        let run = Run::new(entry.config.clone(), root);
        if is_complete(&run) {
            log(&format!("{}: up to date", entry.config.name));
            continue;
        }
        log(&format!("{}: running", entry.config.name));
        if let Err(e) = run_pipeline(&run) {
            log(&format!("{}: failed: {e}", entry.config.name));
        }
    }
    let report = grid_report(grid, root)?;
    let dir = if grid.output_dir.is_absolute() {
        grid.output_dir.clone()
    } else {
        root.join(&grid.output_dir)
    };
    let stem = match grid.kind {
        GridKind::GigawordTable => "gigaword-table",
        GridKind::CnndmTable => "cnndm-table",
        GridKind::LayerwiseSweep => "layerwise-sweep",
        GridKind::Custom => "custom",
    };
    write_text(&dir.join(format!("{stem}.tsv")), &report.to_tsv())?;
    if grid.kind == GridKind::LayerwiseSweep {
        write_text(&dir.join(format!("{stem}-plot.tsv")), &report.sweep_tsv())?;
    }
    Ok(report)
}

/// Collects each row's metric report as written by its run.
pub fn grid_report(grid: &ExperimentGrid, root: &Path) -> Result<GridReport> {
    let mut rows = Vec::with_capacity(grid.rows.len());
    for e in &grid.rows {
        let run = Run::new(e.config.clone(), root);
        let metrics = if is_complete(&run) {
            let path = run.artifact(METRICS_FILE);
            let text = fs::read_to_string(&path).map_err(|err| Error::io(&path, err))?;
            Some(parse_report(&text)?)
        } else {
            None
        };
        rows.push(GridRow {
            label: e.label.clone(),
            run: e.config.name.clone(),
            seed: e.config.seed,
            k: e.k,
            metrics,
        });
    }
    let mut labels: Vec<String> = Vec::new();
    for r in &rows {
        if !labels.contains(&r.label) {
            labels.push(r.label.clone());
        }
    }
    let schemes = labels
        .iter()
        .map(|label| {
            let present: Vec<&GridRow> = rows
                .iter()
                .filter(|r| &r.label == label && r.metrics.is_some())
                .collect();
            let columns = GRID_COLUMNS
                .iter()
                .map(|c| {
                    let xs: Vec<f64> = present.iter().filter_map(|r| r.value(c)).collect();
                    let stat = (!xs.is_empty()).then(|| (mean(&xs), std_dev(&xs)));
                    (c.to_string(), stat)
                })
                .collect();
            SchemeSummary {
                label: label.clone(),
                runs: present.len(),
                columns,
            }
        })
        .collect();
    let mut sweep = Vec::new();
    let mut pearson = None;
    if grid.kind == GridKind::LayerwiseSweep {
        let points: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| Some((r.k? as f64, r.value("rougeL_f1")?)))
            .collect();
        let mut ks: Vec<usize> = rows.iter().filter_map(|r| r.k).collect();
        ks.sort_unstable();
        ks.dedup();
        for k in ks {
            let ys: Vec<f64> = points.iter().filter(|(x, _)| *x == k as f64).map(|p| p.1).collect();
            if !ys.is_empty() {
                sweep.push(SweepPoint {
                    k,
                    mean: mean(&ys),
                    spread: std_dev(&ys),
                });
            }
        }
        let (xs, ys): (Vec<f64>, Vec<f64>) = points.into_iter().unzip();
        pearson = pearson_r(&xs, &ys).ok();
    }
    Ok(GridReport {
        kind: grid.kind,
        rows,
        schemes,
        sweep,
        pearson_r: pearson,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scale() -> DeskScale {
        DeskScale {
            model: ModelConfig {
                num_layers: 1,
                hidden_size: 16,
                num_heads: 2,
                ffn_size: 32,
                vocab_size: 0,
                encoder_positions: 128,
                decoder_positions: 24,
                dropout_rate: 0.0,
                copy_enabled: true,
                copy_head_index: 0,
            },
            limits: Limits {
                source: 128,
                target: 24,
            },
            generic_examples: 40,
            shortform_examples: 40,
            longform_examples: 12,
            dev_examples: 4,
            generic_epochs: 1,
            shortform_epochs: 1,
            longform_epochs: 1,
            selector_epochs: 1,
            ..DeskScale::default()
        }
    }

    #[test]
    fn run_config_round_trips_through_toml() {
        let gc = GridConfig {
            scale: tiny_scale(),
            ..GridConfig::new(GridKind::CnndmTable, "g")
        };
        let grid = build_grid(&gc, None).unwrap();
        for c in grid.prerequisites.iter().chain(grid.rows.iter().map(|e| &e.config)) {
            let text = c.to_toml().unwrap();
            assert_eq!(&RunConfig::from_toml(&text).unwrap(), c, "{text}");
        }
        assert!(RunConfig::from_toml("name = 1").is_err());
    }

    #[test]
    fn grids_have_the_expected_rows() {
        let gc = GridConfig::new(GridKind::CnndmTable, "g");
        let g = build_grid(&gc, None).unwrap();
        assert_eq!(g.rows.len(), 18);
        let names: Vec<&str> = g.prerequisites.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["bert", "shortform", "selector"]);
        // Every row evaluates on the same dev data.
        let dev = &g.rows[0].config.data.dev;
        assert!(g.rows.iter().all(|r| &r.config.data.dev == dev));

        let sweep = build_grid(&GridConfig::new(GridKind::LayerwiseSweep, "g"), None).unwrap();
        assert_eq!(sweep.rows.len(), 15);
        // The sweep's end points are the table's zero-step and two-step runs.
        let find =
            |g: &ExperimentGrid, name: &str| g.rows.iter().find(|r| r.config.name == name).unwrap().config.clone();
        assert_eq!(find(&sweep, "zero-step-s1"), find(&g, "zero-step-s1"));
        assert_eq!(find(&sweep, "two-step-s2"), find(&g, "two-step-s2"));
        let k2 = find(&sweep, "k2-s0");
        assert_eq!(k2.init.scheme.layers_to_load, Some(2));

        let giga = build_grid(&GridConfig::new(GridKind::GigawordTable, "h"), None).unwrap();
        assert_eq!(giga.rows.len(), 9);
    }

    #[test]
    fn missing_runs_are_listed_as_absent() {
        let root = tempfile::tempdir().unwrap();
        let gc = GridConfig {
            seeds: vec![0],
            scale: tiny_scale(),
            ..GridConfig::new(GridKind::GigawordTable, "g")
        };
        let grid = build_grid(&gc, None).unwrap();
        let report = grid_report(&grid, root.path()).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert!(report.rows.iter().all(|r| r.metrics.is_none()));
        let tsv = report.to_tsv();
        assert_eq!(tsv.lines().count(), 1 + 3 + 3);
        assert!(tsv.contains("absent"));
    }

    #[test]
    fn sweep_report_aggregates_over_seeds() {
        let root = tempfile::tempdir().unwrap();
        let gc = GridConfig {
            seeds: vec![0, 1],
            ..GridConfig::new(GridKind::LayerwiseSweep, "g")
        };
        let grid = build_grid(&gc, None).unwrap();
        // Fabricated finished runs: ROUGE-L = k/10 + seed/100.
        for e in &grid.rows {
            let run = Run::new(e.config.clone(), root.path());
            run.record_config().unwrap();
            let v = e.k.unwrap() as f64 / 10.0 + e.config.seed as f64 / 100.0;
            let lines = vec![("rougeL_f1".to_string(), v)];
            write_text(&run.artifact(METRICS_FILE), &format_report(&lines)).unwrap();
        }
        let report = grid_report(&grid, root.path()).unwrap();
        let ks: Vec<usize> = report.sweep.iter().map(|p| p.k).collect();
        assert_eq!(ks, [0, 1, 2, 3, 4]);
        assert!((report.sweep[2].mean - 0.205).abs() < 1e-12);
        assert!((report.sweep[2].spread - 0.01f64.hypot(0.0) / 2f64.sqrt()).abs() < 1e-12);
        assert!(report.pearson_r.unwrap() > 0.99);
        assert_eq!(report.sweep_tsv().lines().count(), 7);
    }

    #[test]
    fn eval_of_identical_files_scores_one() {
        let root = tempfile::tempdir().unwrap();
        let text = ["the red car saw a boat .", "a big dog"].map(String::from);
        write_lines(&root.path().join("ref.txt"), &text).unwrap();
        write_lines(&root.path().join("hyp.txt"), &text).unwrap();
        let config = RunConfig {
            eval: Some(EvalFiles {
                references: "ref.txt".into(),
                hypotheses: "hyp.txt".into(),
                sources: Some("ref.txt".into()),
            }),
            ..build_grid(&GridConfig::new(GridKind::GigawordTable, "g"), None)
                .unwrap()
                .rows[0]
                .config
                .clone()
        };
        let run = Run::new(config, root.path());
        let lines = cmd_eval(&run).unwrap();
        assert_eq!(report_value(&lines, "rougeL_f1"), Some(1.0));
        assert_eq!(report_value(&lines, "abstraction_rate"), Some(0.0));
        let written = fs::read_to_string(run.dir().join(METRICS_FILE)).unwrap();
        assert!(written.contains("rougeL_f1 1.0\n"), "{written}");
    }

    #[test]
    fn commands_check_their_stage() {
        let root = tempfile::tempdir().unwrap();
        let gc = GridConfig {
            scale: tiny_scale(),
            ..GridConfig::new(GridKind::GigawordTable, "g")
        };
        let grid = build_grid(&gc, None).unwrap();
        let run = Run::new(grid.rows[0].config.clone(), root.path());
        assert!(matches!(cmd_pretrain(&run), Err(Error::Config(_))));
        assert!(matches!(cmd_select_train(&run), Err(Error::Config(_))));
    }

    #[test]
    fn vocab_size_mismatch_is_a_config_error() {
        let root = tempfile::tempdir().unwrap();
        let gc = GridConfig {
            scale: tiny_scale(),
            ..GridConfig::new(GridKind::GigawordTable, "g")
        };
        let mut config = build_grid(&gc, None).unwrap().rows[0].config.clone();
        config.model.vocab_size = 50;
        let err = cmd_train(&Run::new(config, root.path())).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}
