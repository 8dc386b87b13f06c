use std::path::Path;
use std::process::{Command, Output};

use hoi_core::datamodel::Dataset;
use hoi_core::evalmod::EvalReport;

fn hoi(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hoi"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

const MICRO: &str = r#"
epochs = 2
batch_size = 2
backbone_lr_mult = 1.0
eval_every = 1

[data]
train = "train.json"

[model]
d = 8
encoder_layers = 1
refiner_layers = 1
decoder_layers = 1
heads = 2
num_queries = 4
top_k = 2
ffn_dim = 8
image_size = 16
map_size = 13
"#;

fn synth(dir: &Path, n: &str) -> String {
    let data = dir.join("train.json");
    let data = data.to_str().unwrap().to_string();
    ok(hoi(
        &["synth", "--seed", "3", "--n-images", n, "--image-size", "16", "--out", &data],
        &[],
    ));
    data
}

#[test]
fn synth_fit_stats_and_embed() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "6");
    let ds = Dataset::load(Path::new(&data)).unwrap();
    assert_eq!(ds.images.len(), 6);

    let stats = dir.path().join("stats.json");
    ok(hoi(
        &["fit-stats", "--data", &data, "--mode", "multivariate", "--out", stats.to_str().unwrap()],
        &[],
    ));
    let text = std::fs::read_to_string(&stats).unwrap();
    assert!(text.contains("multivariate"));

    let table = dir.path().join("onehot.json");
    ok(hoi(
        &["embed", "--provider", "one-hot", "--mode", "action-only", "--data", &data, "--out", table.to_str().unwrap()],
        &[],
    ));
    let copy = dir.path().join("copy.json");
    ok(hoi(
        &[
            "embed",
            "--provider",
            "table",
            "--table",
            table.to_str().unwrap(),
            "--out",
            copy.to_str().unwrap(),
        ],
        &[],
    ));
    let a: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&table).unwrap()).unwrap();
    let b: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&copy).unwrap()).unwrap();
    assert_eq!(a, b);

    let out = hoi(&["embed", "--provider", "table", "--out", copy.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 2);
    let out = hoi(
        &["embed", "--provider", "remote", "--endpoint", "http://127.0.0.1:9", "--timeout", "2", "--out", copy.to_str().unwrap()],
        &[],
    );
    assert_eq!(code(&out), 3);
}

#[test]
fn train_eval_and_dump_attention() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "4");
    let config = dir.path().join("micro.toml");
    std::fs::write(&config, MICRO).unwrap();
    let run = dir.path().join("run");
    let out = ok(hoi(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--model-top-k",
            "3",
            "--model-aggregation",
            "concat",
            "--set",
            "loss.giou=2",
        ],
        &[("HOI_SEED", "11"), ("HOI_MODEL__FFN_DIM", "12")],
    ));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["steps"], 4);
    let written = std::fs::read_to_string(run.join("config.toml")).unwrap();
    for needle in ["seed = 11", "top_k = 3", "ffn_dim = 12", "aggregation = \"concat\"", "giou = 2.0"] {
        assert!(written.contains(needle), "{needle} missing from\n{written}");
    }
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 6);

    let ckpt = run.join("final.ckpt");
    let report = dir.path().join("eval/report.json");
    ok(hoi(
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            &data,
            "--scenario",
            "1",
            "--class-mode",
            "pair",
            "--report",
            report.to_str().unwrap(),
        ],
        &[],
    ));
    let parsed: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed.n_images, 4);
    assert!(report.with_extension("csv").exists());

    let attn = dir.path().join("attn");
    ok(hoi(
        &["dump-attn", "--checkpoint", ckpt.to_str().unwrap(), "--image-id", "2", "--out", attn.to_str().unwrap()],
        &[],
    ));
    assert!(attn.join("query_3.csv").exists() && attn.join("refiner.csv").exists());
    let out = hoi(
        &["dump-attn", "--checkpoint", ckpt.to_str().unwrap(), "--image-id", "99", "--out", attn.to_str().unwrap()],
        &[],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn configuration_errors_exit_with_2_and_runtime_errors_with_3() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "2");
    let config = dir.path().join("micro.toml");
    std::fs::write(&config, MICRO).unwrap();
    let run = dir.path().join("run");
    let args = ["train", "--config", config.to_str().unwrap(), "--out", run.to_str().unwrap()];

    assert_eq!(code(&hoi(&args, &[("HOI_MODEL__D", "wide")])), 2);
    assert_eq!(code(&hoi(&args, &[("HOI_BOGUS", "1")])), 2);
    let mut with_flag = args.to_vec();
    with_flag.extend(["--model-heads", "3"]);
    assert_eq!(code(&hoi(&with_flag, &[])), 2);
    assert_eq!(code(&hoi(&["train", "--config"], &[])), 2);

    std::fs::write(&config, MICRO.replace("train.json", "missing.json")).unwrap();
    assert_eq!(code(&hoi(&args, &[])), 3);
    let report = dir.path().join("r.json");
    let out = hoi(
        &["eval", "--checkpoint", "/nonexistent.ckpt", "--data", "x.json", "--report", report.to_str().unwrap()],
        &[],
    );
    assert_eq!(code(&out), 3);
}

#[test]
fn ablation_grid_tabulates_runs() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "2");
    std::fs::write(dir.path().join("micro.toml"), MICRO.replace("epochs = 2", "epochs = 1")).unwrap();
    let grid = dir.path().join("grid.toml");
    std::fs::write(
        &grid,
        "base = \"micro.toml\"\nout = \"ablation\"\naggregation = [\"multiply\", \"concat\"]\nspatial_mode = [\"map\", \"params\"]\ntop_k = [0, 2]\n",
    )
    .unwrap();
    ok(hoi(&["ablate", "--grid", grid.to_str().unwrap()], &[]));
    let csv = std::fs::read_to_string(dir.path().join("ablation/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    let md = std::fs::read_to_string(dir.path().join("ablation/results.md")).unwrap();
    assert!(md.starts_with("| run |"));
}
