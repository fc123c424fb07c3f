use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BASE: &str = r#"output_dir = "out"

[corpus.synthetic]
n_cases = 40
seed = 11

[encoder]
layers = 1
heads = 2
d = 8
ff = 16
max_len = 96

[train]
epochs = 2
learning_rate = 0.001
batch_size = 8

[protocol]
n_resamples = 2
n_repetitions = 1
seed = 5
ratios = [0.6, 0.2, 0.2]

[interpret]
k = [1, 2]
steps = 8
max_samples = 4
"#;

fn mmsi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmsi")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mmsi(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, format!("{BASE}{extra}")).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_is_deterministic() {
    let (dir, cfg) = setup("");
    ok(&["generate", "-c", s(&cfg)]);
    let a = fs::read(dir.path().join("out/corpus.jsonl")).unwrap();
    ok(&["generate", "-c", s(&cfg), "--out", s(&dir.path().join("again"))]);
    assert_eq!(a, fs::read(dir.path().join("again/corpus.jsonl")).unwrap());
    let effective = fs::read_to_string(dir.path().join("out/config.toml")).unwrap();
    assert!(effective.contains(&dir.path().join("out").display().to_string()));
    assert!(fs::read_to_string(dir.path().join("out/seeds.tsv")).unwrap().lines().count() == 3);
}

#[test]
fn config_errors_name_the_line() {
    let (_dir, cfg) = setup("[train]\nbogus = 1\n");
    let out = mmsi(&["train", "-c", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("exp.toml:"), "{err}");

    let (_dir, cfg) = setup("");
    let text = fs::read_to_string(&cfg).unwrap().replace("learning_rate = 0.001", "learning_rate = -1.0");
    fs::write(&cfg, &text).unwrap();
    let out = mmsi(&["train", "-c", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().position(|l| l.starts_with("[train]")).unwrap() + 1;
    assert!(err.contains(&format!("exp.toml:{line}:")), "{err}");

    let out = mmsi(&["train", "-c", s(&cfg), "--set", "train.learning_rate=0.01", "--set", "protocol.ratios=[0.5, 0.5, 0.5]"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--set protocol.ratios"), "{err}");

    let (_dir, cfg) = setup("[sweep]\naxis = \"alpha_beta\"\n");
    let out = mmsi(&["sweep", "-c", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let line = format!("{BASE}[sweep]").lines().count() + 1;
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&format!(":{line}:")), "{err}");
}

#[test]
fn guilt_pipeline_end_to_end() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("out");
    ok(&["preprocess", "-c", s(&cfg)]);
    for part in ["train", "val", "test"] {
        assert!(out.join(format!("samples/r1/{part}.jsonl")).exists());
    }
    assert!(out.join("samples/r0/vocab.txt").exists());

    ok(&["train", "-c", s(&cfg)]);
    let run = out.join("runs/r0_k0");
    for f in ["guilt_classifier.json", "history.json", "predictions.jsonl", "record.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let stamp = fs::metadata(run.join("guilt_classifier.json")).unwrap().modified().unwrap();
    ok(&["-v", "train", "-c", s(&cfg)]);
    assert_eq!(stamp, fs::metadata(run.join("guilt_classifier.json")).unwrap().modified().unwrap());

    let summary = ok(&["evaluate", "-c", s(&cfg)]);
    assert!(summary.contains("Acc"));
    let first = fs::read(out.join("metrics.json")).unwrap();

    // same config, fresh directory: byte-identical report
    let other = dir.path().join("other");
    ok(&["train", "-c", s(&cfg), "--out", s(&other)]);
    ok(&["evaluate", "-c", s(&cfg), "--out", s(&other)]);
    assert_eq!(first, fs::read(other.join("metrics.json")).unwrap());

    ok(&["attribute", "-c", s(&cfg)]);
    let interp = out.join("interpret");
    let lines = fs::read_to_string(interp.join("attributions.jsonl")).unwrap();
    assert!(lines.lines().next().unwrap().contains("\"score\""));
    let comp: serde_json::Value = serde_json::from_slice(&fs::read(interp.join("comp.json")).unwrap()).unwrap();
    assert_eq!(comp.as_array().unwrap().len(), 3);
    assert!(comp[0]["comp_metric"].as_object().unwrap().values().all(|v| v.as_f64() == Some(0.0)));
    for f in ["frequencies_k1.tsv", "frequencies_k2.tsv", "attention.jsonl", "completeness.tsv"] {
        assert!(interp.join(f).exists(), "{f}");
    }

    ok(&["report", "-c", s(&cfg)]);
    let table = fs::read_to_string(out.join("report/summary.tsv")).unwrap();
    assert!(table.starts_with("metric\tmean\tci_halfwidth\tn_runs\n"));
    assert!(table.contains("\nAcc\t"));
}

#[test]
fn prison_pipeline_writes_scatter_data() {
    let (dir, cfg) = setup("\n[task]\ntask = \"prison\"\nstrategy = \"mask\"\ntest_guilt = \"predicted\"\n");
    let out = dir.path().join("out");
    ok(&["train", "-c", s(&cfg), "--set", "protocol.n_resamples=1"]);
    assert!(out.join("runs/r0_k0/guilt_classifier.json").exists());
    assert!(out.join("runs/r0_k0/sentencing_regressor.json").exists());
    let summary = ok(&["evaluate", "-c", s(&cfg), "--set", "protocol.n_resamples=1"]);
    assert!(summary.contains("ImpScore") && summary.contains("Acc"));
    ok(&["attribute", "-c", s(&cfg), "--set", "protocol.n_resamples=1"]);
    let comp = fs::read_to_string(out.join("interpret/comp.json")).unwrap();
    assert!(comp.contains("ImpErr"));
    ok(&["report", "-c", s(&cfg), "--set", "protocol.n_resamples=1"]);
    let p = fs::read_to_string(out.join("report/scatter_principal.tsv")).unwrap();
    let a = fs::read_to_string(out.join("report/scatter_accomplice.tsv")).unwrap();
    assert!(p.starts_with("resample\trepetition\tcase_id\tdefendant\tmonths_true\tmonths_pred"));
    assert!(p.lines().count() + a.lines().count() > 2);

    // ablation: no fusion, so no stage-1 model
    let abl = dir.path().join("nofusion");
    ok(&["train", "-c", s(&cfg), "--set", "protocol.n_resamples=1", "--set", "ablation.fusion=false", "--out", s(&abl)]);
    assert!(!abl.join("runs/r0_k0/guilt_classifier.json").exists());
}

#[test]
fn perfect_prediction_file_scores_one() {
    let (dir, cfg) = setup("");
    let preds = dir.path().join("perfect.jsonl");
    fs::write(
        &preds,
        "{\"case_id\":\"a\",\"defendant\":\"x\",\"guilt_pred\":\"principal\",\"p\":0.9,\"guilt_true\":\"principal\",\"months_pred\":36.0,\"months_true\":36.0}\n\
         {\"case_id\":\"a\",\"defendant\":\"y\",\"guilt_pred\":\"accomplice\",\"p\":0.1,\"guilt_true\":\"accomplice\",\"months_pred\":6.0,\"months_true\":6.0}\n",
    )
    .unwrap();
    ok(&["evaluate", "-c", s(&cfg), "--predictions", s(&preds)]);
    let m: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("out/prediction_metrics.json")).unwrap()).unwrap();
    assert_eq!(m["ImpScore"].as_f64(), Some(1.0));
    assert_eq!(m["ImpErr"].as_f64(), Some(0.0));
    assert_eq!(m["Acc"].as_f64(), Some(1.0));
}

#[test]
fn alpha_beta_sweep_makes_seventeen_run_directories() {
    let (dir, cfg) = setup(
        "\n[task]\ntask = \"joint\"\nstrategy = \"mask\"\nalpha = 1.0\nbeta = 0.1\n\n[sweep]\naxis = \"alpha_beta\"\n",
    );
    let set = ["--set", "protocol.n_resamples=1", "--set", "train.epochs=1", "--set", "corpus.synthetic.n_cases=30"];
    let mut args = vec!["sweep", "-c", s(&cfg)];
    args.extend(set);
    ok(&args);
    let root = dir.path().join("out/sweep");
    let dirs: Vec<_> = fs::read_dir(&root).unwrap().filter_map(|e| e.ok()).filter(|e| e.path().is_dir()).collect();
    assert_eq!(dirs.len(), 17);
    assert!(root.join("alpha0.00_beta1.00/metrics.json").exists());
    assert!(root.join("alpha1.00_beta0.00/config.toml").exists());
    let mut args = vec!["report", "-c", s(&cfg)];
    args.extend(set);
    ok(&args);
    let table = fs::read_to_string(dir.path().join("out/report/sweep.tsv")).unwrap();
    assert_eq!(table.lines().count(), 18);
}

#[test]
fn missing_prerequisites_fail_with_status_one() {
    let (_dir, cfg) = setup("");
    assert_eq!(mmsi(&["evaluate", "-c", s(&cfg)]).status.code(), Some(1));
    assert_eq!(mmsi(&["report", "-c", s(&cfg)]).status.code(), Some(1));
    assert_eq!(mmsi(&["attribute", "-c", s(&cfg)]).status.code(), Some(1));
}
