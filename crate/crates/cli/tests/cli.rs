use std::fs;
use std::path::Path;
use std::process::Command;

fn stagesum(root: &Path, args: &[&str]) -> (bool, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_stagesum"))
        .args(args)
        .env("STAGESUM_OUTPUT_ROOT", root)
        .output()
        .unwrap();
    (
        out.status.success(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

const MODEL: &str = r#"
[model]
num_layers = 1
hidden_size = 8
num_heads = 2
ffn_size = 16
encoder_positions = 64
decoder_positions = 12

[limits]
source = 64
target = 12
"#;

fn shortform_run(name: &str) -> String {
    format!(
        r#"name = "{name}"
seed = 3
output_dir = "runs/{name}"
{MODEL}
[data.train.synthetic]
kind = "shortform"
vocab_size = 134
num_examples = 20
input_sentences = [2, 3]
output_sentences = [1, 1]
alpha_abs = 0.5
seed = 1

[data.dev.synthetic]
kind = "shortform"
vocab_size = 134
num_examples = 3
input_sentences = [2, 3]
output_sentences = [1, 1]
alpha_abs = 0.5
seed = 2

[train]
stage = "summarize"
lr = 0.001
batch_size = 4
max_epochs = 2

[init]
scheme = {{ encoder = "random", decoder = "random" }}

[decode]
beam_width = 2
alpha = 0.6
"#
    )
}

#[test]
fn eval_of_identical_files_is_perfect() {
    let root = tempfile::tempdir().unwrap();
    let text = "the old car was sold .\nthe red boat\n";
    fs::write(root.path().join("refs.txt"), text).unwrap();
    fs::write(root.path().join("hyps.txt"), text).unwrap();
    let mut config = shortform_run("scored");
    config.push_str("\n[eval]\nreferences = \"refs.txt\"\nhypotheses = \"hyps.txt\"\n");
    let cfg = root.path().join("eval.toml");
    fs::write(&cfg, config).unwrap();
    let (ok, out, err) = stagesum(root.path(), &["eval", cfg.to_str().unwrap()]);
    assert!(ok, "{err}");
    assert!(out.contains("rougeL_f1 1.0\n"), "{out}");
    assert!(out.contains("rouge2_f1 1.0\n"), "{out}");
    assert!(root.path().join("runs/scored/metrics.txt").exists());
}

#[test]
fn run_trains_decodes_and_scores() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("run.toml");
    fs::write(&cfg, shortform_run("tiny")).unwrap();
    let (ok, _, err) = stagesum(root.path(), &["run", cfg.to_str().unwrap()]);
    assert!(ok, "{err}");
    let dir = root.path().join("runs/tiny");
    for f in [
        "config.toml",
        "best.ckpt",
        "train_report.jsonl",
        "surgery.txt",
        "summaries.txt",
        "metrics.txt",
    ] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let summaries = fs::read_to_string(dir.join("summaries.txt")).unwrap();
    assert_eq!(summaries.lines().count(), 3);

    let (ok, out, err) = stagesum(root.path(), &["generate", cfg.to_str().unwrap()]);
    assert!(ok, "{err}");
    assert_eq!(out.lines().count(), 2);
    assert!(dir.join("dev/corpus.tsv").exists());
}

#[test]
fn wrong_stage_and_bad_config_fail_cleanly() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("run.toml");
    fs::write(&cfg, shortform_run("x")).unwrap();
    let (ok, _, err) = stagesum(root.path(), &["pretrain", cfg.to_str().unwrap()]);
    assert!(!ok);
    assert!(err.starts_with("error:"), "{err}");

    fs::write(&cfg, "name = \"x\"\nbogus = 1\n").unwrap();
    let (ok, _, err) = stagesum(root.path(), &["train", cfg.to_str().unwrap()]);
    assert!(!ok);
    assert!(err.contains("run config"), "{err}");
}

#[test]
fn grid_dry_run_lists_runs() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("grid.toml");
    fs::write(&cfg, "grid = \"layerwise-sweep\"\noutput_dir = \"g\"\nseeds = [0]\n").unwrap();
    let (ok, out, err) = stagesum(root.path(), &["grid", "--dry-run", cfg.to_str().unwrap()]);
    assert!(ok, "{err}");
    let names: Vec<&str> = out.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(
        names,
        [
            "bert",
            "shortform",
            "zero-step-s0",
            "k1-s0",
            "k2-s0",
            "k3-s0",
            "two-step-s0"
        ]
    );
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            stagesum::harness::RunConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            seen += 1;
        }
    }
    for entry in fs::read_dir(dir.join("grids")).unwrap() {
        let p = entry.unwrap().path();
        let gc = stagesum::harness::GridConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        stagesum::harness::build_grid(&gc, p.parent()).unwrap();
        seen += 1;
    }
    assert_eq!(seen, 8);
}
