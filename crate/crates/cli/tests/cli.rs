use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn sceneloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sceneloc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = sceneloc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CATALOG: &str = "\
# video,begin,count,label
ep1.mkv,0,100,Kitchen
ep1.mkv,100,50,Hallway
ep2.mkv,10,40,Kitchen
";

const TINY_SYNTH: &str = "\
classes = 3
frames = 4
dim = 8
scenes_per_class = 4
distractor_spikes = 2
";

const TINY_TRAIN: &str = "\
steps = 40
batch_size = 4
";

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn extract_writes_feature_file_and_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = write(dir.path(), "catalog.csv", CATALOG);
    let out = dir.path().join("features.slrf");
    let args = [
        "extract", "--catalog", s(&catalog), "--frames", "5", "--dim", "16", "--out", s(&out),
    ];
    ok(&args);
    let first = fs::read(&out).unwrap();
    // header 28 bytes, then per scene: 4 + 2 + 7 + 8 + 8 + 5*16*4
    assert_eq!(first.len(), 28 + 3 * (4 + 2 + 7 + 8 + 8 + 5 * 16 * 4));
    assert_eq!(&first[..4], b"SLRF");

    let labels: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("features.slrf.labels.json")).unwrap())
            .unwrap();
    assert_eq!(labels["0"], "Kitchen");
    assert_eq!(labels["1"], "Hallway");

    let manifest: Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("features.slrf.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["command"], "extract");
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);

    ok(&args);
    assert_eq!(fs::read(&out).unwrap(), first, "rerun is byte-identical");
}

#[test]
fn extract_missing_catalog_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = sceneloc(&["extract", "--catalog", s(&missing), "--out", s(&dir.path().join("f.slrf"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));
}

#[test]
fn extract_bad_catalog_line_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = write(dir.path(), "c.csv", "a.mkv,0,30,X\na.mkv,5,zero,Y\n");
    let out = sceneloc(&[
        "extract", "--catalog", s(&catalog), "--dim", "4", "--out", s(&dir.path().join("f.slrf")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

fn synth(dir: &Path, episodes: usize) -> Vec<PathBuf> {
    let spec = write(dir, "synth.txt", TINY_SYNTH);
    let out = dir.join("episodes");
    ok(&[
        "synth", "--config", s(&spec), "--episodes", &episodes.to_string(), "--seed", "3", "--out", s(&out),
    ]);
    (1..=episodes).map(|i| out.join(format!("episode_{i:02}.slrf"))).collect()
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ea = synth(a.path(), 2);
    let eb = synth(b.path(), 2);
    for (x, y) in ea.iter().zip(&eb) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    assert_ne!(fs::read(&ea[0]).unwrap(), fs::read(&ea[1]).unwrap(), "episodes differ");
}

#[test]
fn train_writes_reproducible_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let episodes = synth(dir.path(), 1);
    let config = write(dir.path(), "train.txt", TINY_TRAIN);
    let ckpt = dir.path().join("model.slrm");
    let args = [
        "train", "--features", s(&episodes[0]), "--head", "bilstm", "--config", s(&config), "--seed", "9",
        "--out", s(&ckpt),
    ];
    ok(&args);
    let first = fs::read(&ckpt).unwrap();
    assert_eq!(&first[..4], b"SLRM");
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("model.slrm.report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["steps"], 40);
    assert_eq!(report["report"]["seed"], 9);
    assert_eq!(report["report"]["loss_curve"].as_array().unwrap().len(), 40);

    ok(&args);
    assert_eq!(fs::read(&ckpt).unwrap(), first);
}

#[test]
fn train_unknown_head_lists_valid_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let episodes = synth(dir.path(), 1);
    let out = sceneloc(&[
        "train", "--features", s(&episodes[0]), "--head", "maxx", "--out", s(&dir.path().join("m")),
    ]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    for kind in ["product", "flatten", "average", "max", "lstm", "bilstm"] {
        assert!(err.contains(kind), "{err}");
    }
}

#[test]
fn train_bad_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let episodes = synth(dir.path(), 1);
    let config = write(dir.path(), "bad.txt", "steps = 0\n");
    let out = sceneloc(&[
        "train", "--features", s(&episodes[0]), "--head", "max", "--config", s(&config), "--out",
        s(&dir.path().join("m")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let episodes = synth(dir.path(), 1);
    let config = write(dir.path(), "hot.txt", "optimizer = sgd\nlearning_rate = 1e308\nsteps = 20\n");
    let out = sceneloc(&[
        "train", "--features", s(&episodes[0]), "--head", "flatten", "--config", s(&config), "--out",
        s(&dir.path().join("m")),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn benchmark_produces_full_matrix_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let episodes = synth(dir.path(), 2);
    let config = write(dir.path(), "train.txt", TINY_TRAIN);
    let out = dir.path().join("bench");
    let args = [
        "benchmark", "--features", s(&episodes[0]), s(&episodes[1]), "--replicates", "2", "--config",
        s(&config), "--jobs", "2", "--out", s(&out),
    ];
    ok(&args);
    let csv = fs::read_to_string(out.join("run_matrix.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "model,episode,replicate,accuracy");
    assert_eq!(lines.len() - 1, 6 * 2 * 2);
    assert!(lines[1].starts_with("product,episode_01,0,"));
    let boxplot = fs::read_to_string(out.join("boxplot.csv")).unwrap();
    assert_eq!(boxplot.lines().count() - 1, 6 * 2);
    assert!(out.join("manifest.json").exists());

    // Drop some completion records: only those cells rerun, result unchanged.
    let cells: Vec<_> = fs::read_dir(out.join("cells")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(cells.len(), 24);
    for c in cells.iter().step_by(3) {
        fs::remove_file(c).unwrap();
    }
    let rerun = ok(&args);
    assert!(String::from_utf8_lossy(&rerun.stderr).contains("16 cells complete, 8 to run"));
    assert_eq!(fs::read_to_string(out.join("run_matrix.csv")).unwrap(), csv);

    // Fully cached rerun with a single worker is also identical.
    let mut single = args.to_vec();
    single[9] = "1";
    ok(&single);
    assert_eq!(fs::read_to_string(out.join("run_matrix.csv")).unwrap(), csv);
}

#[test]
fn benchmark_missing_episode_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sceneloc(&[
        "benchmark", "--features", s(&dir.path().join("gone.slrf")), "--out", s(&dir.path().join("b")),
    ]);
    assert_eq!(code(&out), 2);
}

fn matrix_csv(value: impl Fn(usize, usize, usize) -> f64) -> String {
    let heads = ["product", "flatten", "average", "max", "lstm", "bilstm"];
    let mut s = String::from("model,episode,replicate,accuracy\n");
    for (h, name) in heads.iter().enumerate() {
        for e in 0..5 {
            for r in 0..3 {
                s += &format!("{name},ep{e},{r},{}\n", value(h, e, r));
            }
        }
    }
    s
}

#[test]
fn compare_identical_models_has_no_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let matrix = write(dir.path(), "m.csv", &matrix_csv(|_, e, r| 0.3 + 0.05 * e as f64 + 0.01 * r as f64));
    let out = dir.path().join("cmp");
    ok(&["compare", "--matrix", s(&matrix), "--out", s(&out)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["friedman_rejects"], false);
    assert_eq!(report["manifest"], "manifest.json");
    for pair in report["pairs"].as_array().unwrap() {
        assert_eq!(pair["significant"], false);
    }
    assert_eq!(report["pairs"].as_array().unwrap().len(), 15);
}

#[test]
fn compare_dominant_model_tops_summary_score() {
    let dir = tempfile::tempdir().unwrap();
    // bilstm best, then lstm, ..., with per-episode jitter that keeps the order.
    let matrix = write(
        dir.path(),
        "m.csv",
        &matrix_csv(|h, e, r| 0.1 + 0.12 * h as f64 + 0.01 * ((e * 7 + r * 3) % 5) as f64),
    );
    let out = dir.path().join("cmp");
    let run = ok(&["compare", "--matrix", s(&matrix), "--out", s(&out)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["friedman_rejects"], true);
    let models = report["models"].as_array().unwrap();
    let best = models.iter().max_by_key(|m| m["summary_score"].as_u64().unwrap()).unwrap();
    assert_eq!(best["model"], "bilstm");
    assert_eq!(best["summary_score"], 5 * 5);

    let tables = String::from_utf8_lossy(&run.stdout).into_owned();
    assert_eq!(tables, fs::read_to_string(out.join("tables.txt")).unwrap());
    let header = tables.lines().find(|l| l.contains("SummaryScore")).unwrap();
    let order = ["Product", "Flatten", "Average", "Max", "LSTM", "BidirectionalLSTM", "SummaryScore"];
    let positions: Vec<usize> = order.iter().map(|c| header.find(c).unwrap()).collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]), "{header}");
}

#[test]
fn compare_incomplete_matrix_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let full = matrix_csv(|_, _, _| 0.5);
    let truncated: String = full.lines().take(40).map(|l| format!("{l}\n")).collect();
    let matrix = write(dir.path(), "m.csv", &truncated);
    let out = sceneloc(&["compare", "--matrix", s(&matrix), "--out", s(&dir.path().join("cmp"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
}
