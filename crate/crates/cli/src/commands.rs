//! One function per subcommand. Each reads only the config and files that
//! earlier commands left in the run directory.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use mmsi::corpus::{generate_synthetic_corpus, load_corpus_with, write_corpus, CaseCorpus, Task};
use mmsi::interpret::{self, CompModel, CompReport, TokenAttribution};
use mmsi::model::{
    load_checkpoint, read_predictions, save_checkpoint, write_predictions, Checkpoint, GuiltClassifier, PredictionRecord,
    SentencingRegressor,
};
use mmsi::preprocess::{write_sample_set, TextSource};
use mmsi::train::{
    aggregate, ground_truth_guilt, prediction_metrics, prepare_split, run_protocol, AggregateReport, LabelSource,
    ProtocolCounts, RunOutcome, RunRecord, TaskSpec, TrainedModel,
};
use mmsi::{Error, Mode, Result, Role};

use crate::config::{ExperimentConfig, SweepAxis};

const CLASSIFIER_FILE: &str = "guilt_classifier.json";
const REGRESSOR_FILE: &str = "sentencing_regressor.json";
const JOINT_FILE: &str = "joint.json";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn run_dir(cfg: &ExperimentConfig, r: usize, k: usize) -> PathBuf {
    cfg.output_dir.join("runs").join(format!("r{r}_k{k}"))
}

/// Writes the effective config and the seed log.
pub fn prepare_output(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml())?;
    let p = cfg.protocol_config();
    let mut w = create(&cfg.output_dir.join("seeds.tsv"))?;
    writeln!(w, "resample\trepetition\tsplit_seed\ttrain_seed")?;
    for r in 0..p.n_resamples {
        for k in 0..p.n_repetitions {
            writeln!(w, "{r}\t{k}\t{}\t{}", p.split_seed(r), p.train_seed(r, k))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn load_corpus(cfg: &ExperimentConfig) -> Result<CaseCorpus> {
    match (&cfg.corpus.path, &cfg.corpus.synthetic) {
        (Some(p), _) => load_corpus_with(p, cfg.prison_max()),
        (None, Some(spec)) => generate_synthetic_corpus(spec),
        (None, None) => Err(Error::Config("no corpus configured".into())),
    }
}

pub fn generate(cfg: &ExperimentConfig) -> Result<()> {
    let spec = cfg
        .corpus
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::Config("generate needs a [corpus.synthetic] table".into()))?;
    let corpus = generate_synthetic_corpus(spec)?;
    let path = cfg.output_dir.join("corpus.jsonl");
    write_corpus(&corpus, create(&path)?)?;
    println!("{} cases, {} defendants -> {}", corpus.len(), corpus.n_defendants(), path.display());
    Ok(())
}

pub fn preprocess(cfg: &ExperimentConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let task = cfg.effective_task();
    let p = cfg.protocol_config();
    for r in 0..p.n_resamples {
        let split = prepare_split(&corpus, &task, &p, r)?;
        let dir = cfg.output_dir.join("samples").join(format!("r{r}"));
        for (part, name) in ["train", "val", "test"].into_iter().enumerate() {
            let set = split.sample_set(part, &task, cfg.encoder.max_len)?;
            write_sample_set(&set, task.strategy(), split.split_seed, create(&dir.join(format!("{name}.jsonl")))?)?;
            log::info!("resample {r} {name}: {} samples", set.len());
        }
        split.tokenizer.save(dir.join("vocab.txt"))?;
    }
    println!("samples for {} resamples -> {}", p.n_resamples, cfg.output_dir.join("samples").display());
    Ok(())
}

fn save_run(cfg: &ExperimentConfig, out: &RunOutcome) -> Result<()> {
    let rec = &out.record;
    let dir = run_dir(cfg, rec.resample, rec.repetition);
    fs::create_dir_all(&dir)?;
    let strategy = cfg.effective_task().strategy();
    let max_len = cfg.encoder.max_len;
    for (model, &epoch) in out.models.iter().zip(&rec.best_epochs) {
        let tok = out.tokenizer.clone();
        match model {
            TrainedModel::Classifier(m) => {
                save_checkpoint(dir.join(CLASSIFIER_FILE), &Checkpoint::new(m.clone(), tok, strategy, max_len, epoch))?
            }
            TrainedModel::Regressor(m) => {
                save_checkpoint(dir.join(REGRESSOR_FILE), &Checkpoint::new(m.clone(), tok, strategy, max_len, epoch))?
            }
            TrainedModel::Joint(m) => {
                save_checkpoint(dir.join(JOINT_FILE), &Checkpoint::new(m.clone(), tok, strategy, max_len, epoch))?
            }
        }
    }
    write_json(&dir.join("history.json"), &out.histories)?;
    write_predictions(&out.predictions, create(&dir.join("predictions.jsonl"))?)?;
    // last, so a run only counts as done once everything else is on disk
    write_json(&dir.join("record.json"), rec)
}

fn finished_runs(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    let p = &cfg.protocol;
    let mut done = Vec::new();
    for r in 0..p.n_resamples {
        for k in 0..p.n_repetitions {
            let path = run_dir(cfg, r, k).join("record.json");
            if path.exists() {
                done.push(read_json(&path)?);
            }
        }
    }
    Ok(done)
}

pub fn train(cfg: &ExperimentConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let done = finished_runs(cfg)?;
    if !done.is_empty() {
        log::info!("resuming: {} runs already finished", done.len());
    }
    let report = run_protocol(&corpus, &cfg.effective_task(), &cfg.protocol_config(), &done, |out| {
        log::info!("run r{} k{} saved", out.record.resample, out.record.repetition);
        save_run(cfg, out)
    })?;
    println!("{} runs -> {}", report.runs.len(), cfg.output_dir.join("runs").display());
    Ok(())
}

fn print_summary(report: &AggregateReport) {
    for (name, m) in &report.metrics {
        match m.ci_halfwidth {
            Some(hw) => println!("{name}\t{:.4} ± {hw:.4} ({} runs)", m.mean, m.n_runs),
            None => println!("{name}\t{:.4} ({} run)", m.mean, m.n_runs),
        }
    }
}

pub fn evaluate(cfg: &ExperimentConfig, predictions: Option<&Path>) -> Result<()> {
    if let Some(path) = predictions {
        let metrics = prediction_metrics(&read_predictions(path)?, f64::from(cfg.prison_max()))?;
        let out = cfg.output_dir.join("prediction_metrics.json");
        write_json(&out, &metrics)?;
        for (name, v) in &metrics {
            println!("{name}\t{v:.4}");
        }
        return Ok(());
    }
    let p = &cfg.protocol;
    let runs = finished_runs(cfg)?;
    let expected = p.n_resamples * p.n_repetitions;
    if runs.len() != expected {
        return Err(Error::Validation(format!(
            "{} of {expected} runs finished under {}; run `mmsi train` first",
            runs.len(),
            cfg.output_dir.display()
        )));
    }
    let counts = ProtocolCounts { n_resamples: p.n_resamples, n_repetitions: p.n_repetitions };
    let report = aggregate(&runs, counts, &cfg.effective_task())?;
    write_json(&cfg.output_dir.join("metrics.json"), &report)?;
    print_summary(&report);
    Ok(())
}

#[derive(Serialize)]
struct SampleAttention<'a> {
    case_id: &'a str,
    defendant: &'a str,
    layer: usize,
    weights: Vec<interpret::AttentionWeight>,
}

fn load_model<M: mmsi::model::ModelKind + serde::de::DeserializeOwned>(
    path: &Path,
    tok: &mmsi::Tokenizer,
) -> Result<M> {
    if !path.exists() {
        return Err(Error::Validation(format!("{} is missing; run `mmsi train` first", path.display())));
    }
    let ck: Checkpoint<M> = load_checkpoint(path)?;
    if &ck.tokenizer != tok {
        return Err(Error::Checkpoint(format!("{}: vocabulary differs from the configured split", path.display())));
    }
    Ok(ck.model)
}

pub fn attribute(cfg: &ExperimentConfig) -> Result<()> {
    let icfg = &cfg.interpret;
    let task = cfg.effective_task();
    let (r, k) = icfg.run;
    let dir = run_dir(cfg, r, k);
    let corpus = load_corpus(cfg)?;
    let split = prepare_split(&corpus, &task, &cfg.protocol_config(), r)?;
    let max_len = cfg.encoder.max_len;
    let mut samples = split.sample_set(2, &task, max_len)?.samples;
    samples.truncate(icfg.max_samples.unwrap_or(usize::MAX));
    let tok = &split.tokenizer;

    let classifier: Option<GuiltClassifier>;
    let regressor: Option<SentencingRegressor>;
    let guilt_values: Vec<f64>;
    match task {
        TaskSpec::GuiltInference { .. } | TaskSpec::GuiltIdentification { .. } => {
            classifier = Some(load_model(&dir.join(CLASSIFIER_FILE), tok)?);
            regressor = None;
            guilt_values = Vec::new();
        }
        TaskSpec::Prison { strategy, test_guilt, .. } => {
            let reg: SentencingRegressor = load_model(&dir.join(REGRESSOR_FILE), tok)?;
            let clf_path = dir.join(CLASSIFIER_FILE);
            guilt_values = if test_guilt == LabelSource::Predicted && clf_path.exists() {
                let clf: GuiltClassifier = load_model(&clf_path, tok)?;
                let mut fd = split.samples(2, Task::Prison, TextSource::Fd, strategy, max_len)?;
                fd.truncate(samples.len());
                fd.iter().map(|s| Ok(reg.guilt_value(&clf.infer_guilt(s)?))).collect::<Result<_>>()?
            } else {
                ground_truth_guilt(&samples)
            };
            classifier = None;
            regressor = Some(reg);
        }
        TaskSpec::Joint { .. } => {
            return Err(Error::Config("attribute covers the guilt and prison tasks, not joint".into()));
        }
    }
    let (model, encoder) = match (&classifier, &regressor) {
        (Some(c), _) => (CompModel::Classifier(c), &c.encoder),
        (_, Some(m)) => (CompModel::Regressor { model: m, guilt_values: &guilt_values }, &m.encoder),
        _ => unreachable!("one model is loaded"),
    };

    let out = cfg.output_dir.join("interpret");
    log::info!("attributing {} samples with {} steps", samples.len(), icfg.steps);
    let attrs: Vec<TokenAttribution> = model.attribute_all(&samples, icfg.steps, icfg.baseline)?;
    interpret::write_attributions(&attrs, create(&out.join("attributions.jsonl"))?)?;

    let mut w = create(&out.join("completeness.tsv"))?;
    writeln!(w, "case_id\tdefendant\tprediction\tbaseline_prediction\tscore_sum\tresidual\trelative_residual")?;
    for a in &attrs {
        let sum: f64 = a.scores.iter().sum();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{sum}\t{}\t{}",
            a.case_id,
            a.defendant,
            a.prediction,
            a.baseline_prediction,
            a.residual,
            a.relative_residual()
        )?;
    }
    w.flush()?;

    let ks: BTreeSet<usize> = std::iter::once(0).chain(icfg.k.iter().copied()).collect();
    let mut comp: Vec<CompReport> = Vec::with_capacity(ks.len());
    for &kk in &ks {
        comp.push(interpret::comprehensiveness_from(model, &samples, &attrs, kk)?);
        if kk > 0 {
            let table = interpret::aggregate_token_frequencies(&attrs, kk)?;
            interpret::write_frequencies(&table, create(&out.join(format!("frequencies_k{kk}.tsv")))?)?;
        }
    }
    write_json(&out.join("comp.json"), &comp)?;

    let layer = icfg.attention_layer.unwrap_or(cfg.encoder.layers - 1);
    let mut w = create(&out.join("attention.jsonl"))?;
    for s in &samples {
        let enc = encoder.encode(&s.tokens, Mode::Eval)?;
        let rec = SampleAttention {
            case_id: &s.case_id,
            defendant: &s.target_name,
            layer,
            weights: interpret::export_attention(&enc, &s.tokens, layer)?,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    for c in &comp {
        let vals: Vec<String> = c.comp_metric.iter().map(|(n, v)| format!("{n} {v:+.4}")).collect();
        println!("k={}\t{}", c.k, vals.join("\t"));
    }
    println!("{} attributions -> {}", attrs.len(), out.display());
    Ok(())
}

fn fmt_value(v: f64) -> String {
    format!("{v}")
}

/// Grid points as (directory name, config).
pub fn sweep_points(cfg: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    let sweep = cfg.sweep.as_ref().ok_or_else(|| Error::Config("sweep needs a [sweep] table".into()))?;
    let base = ExperimentConfig { sweep: None, ..cfg.clone() };
    let root = cfg.output_dir.join("sweep");
    let mut points = Vec::new();
    let mut push = |name: String, mut c: ExperimentConfig| {
        c.output_dir = root.join(&name);
        points.push((name, c));
    };
    match sweep.axis {
        SweepAxis::AlphaBeta => {
            for jc in mmsi::model::JointConfig::sweep_grid() {
                let mut c = base.clone();
                if let TaskSpec::Joint { alpha, beta, .. } = &mut c.task {
                    *alpha = jc.alpha;
                    *beta = jc.beta;
                }
                push(format!("alpha{:.2}_beta{:.2}", jc.alpha, jc.beta), c);
            }
        }
        axis => {
            for v in sweep.points() {
                let mut c = base.clone();
                let name = match axis {
                    SweepAxis::Epochs => {
                        c.train.epochs = v as usize;
                        "epochs"
                    }
                    SweepAxis::LearningRate => {
                        c.train.learning_rate = v;
                        "learning_rate"
                    }
                    _ => {
                        c.train.dropout = v;
                        "dropout"
                    }
                };
                push(format!("{name}_{}", fmt_value(v)), c);
            }
        }
    }
    Ok(points)
}

pub fn sweep(cfg: &ExperimentConfig) -> Result<()> {
    let points = sweep_points(cfg)?;
    let mut w = create(&cfg.output_dir.join("sweep").join("points.tsv"))?;
    writeln!(w, "point")?;
    for (name, _) in &points {
        writeln!(w, "{name}")?;
    }
    w.flush()?;
    for (name, c) in &points {
        log::info!("sweep point {name}");
        prepare_output(c)?;
        train(c)?;
        evaluate(c, None)?;
    }
    println!("{} points -> {}", points.len(), cfg.output_dir.join("sweep").display());
    Ok(())
}

fn scatter_rows(cfg: &ExperimentConfig) -> Result<Vec<(usize, usize, PredictionRecord)>> {
    let p = &cfg.protocol;
    let mut rows = Vec::new();
    for r in 0..p.n_resamples {
        for k in 0..p.n_repetitions {
            let path = run_dir(cfg, r, k).join("predictions.jsonl");
            if path.exists() {
                rows.extend(read_predictions(&path)?.into_iter().map(|rec| (r, k, rec)));
            }
        }
    }
    Ok(rows)
}

pub fn report(cfg: &ExperimentConfig) -> Result<()> {
    let out = cfg.output_dir.join("report");
    let mut wrote = Vec::new();

    let metrics_path = cfg.output_dir.join("metrics.json");
    if metrics_path.exists() {
        let report: AggregateReport = read_json(&metrics_path)?;
        let path = out.join("summary.tsv");
        let mut w = create(&path)?;
        writeln!(w, "metric\tmean\tci_halfwidth\tn_runs")?;
        for (name, m) in &report.metrics {
            let hw = m.ci_halfwidth.map(|h| h.to_string()).unwrap_or_else(|| "NA".into());
            writeln!(w, "{name}\t{}\t{hw}\t{}", m.mean, m.n_runs)?;
        }
        w.flush()?;
        wrote.push(path);
    }

    let rows = scatter_rows(cfg)?;
    if rows.iter().any(|(_, _, rec)| rec.months_pred.is_some()) {
        for role in [Role::Principal, Role::Accomplice] {
            let path = out.join(format!("scatter_{}.tsv", role.as_str()));
            let mut w = create(&path)?;
            writeln!(w, "resample\trepetition\tcase_id\tdefendant\tmonths_true\tmonths_pred")?;
            for (r, k, rec) in rows.iter().filter(|(_, _, rec)| rec.guilt_true == Some(role)) {
                if let (Some(t), Some(p)) = (rec.months_true, rec.months_pred) {
                    writeln!(w, "{r}\t{k}\t{}\t{}\t{t}\t{p}", rec.case_id, rec.defendant)?;
                }
            }
            w.flush()?;
            wrote.push(path);
        }
    }

    let points_path = cfg.output_dir.join("sweep").join("points.tsv");
    if points_path.exists() {
        let names: Vec<String> = fs::read_to_string(&points_path)?.lines().skip(1).map(str::to_string).collect();
        let mut reports = Vec::with_capacity(names.len());
        for n in &names {
            let path = cfg.output_dir.join("sweep").join(n).join("metrics.json");
            if !path.exists() {
                return Err(Error::Validation(format!("{} is missing; finish `mmsi sweep` first", path.display())));
            }
            reports.push(read_json::<AggregateReport>(&path)?);
        }
        let columns: BTreeSet<&String> = reports.iter().flat_map(|r| r.metrics.keys()).collect();
        let path = out.join("sweep.tsv");
        let mut w = create(&path)?;
        let header: Vec<&str> = columns.iter().map(|s| s.as_str()).collect();
        writeln!(w, "point\t{}", header.join("\t"))?;
        for (n, rep) in names.iter().zip(&reports) {
            let cells: Vec<String> =
                columns.iter().map(|c| rep.metrics.get(*c).map(|m| m.mean.to_string()).unwrap_or_else(|| "NA".into())).collect();
            writeln!(w, "{n}\t{}", cells.join("\t"))?;
        }
        w.flush()?;
        wrote.push(path);
    }

    if wrote.is_empty() {
        return Err(Error::Validation(format!(
            "nothing to report under {}; run evaluate or sweep first",
            cfg.output_dir.display()
        )));
    }
    for p in wrote {
        println!("{}", p.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SweepSection;
    use mmsi::corpus::SyntheticSpec;
    use mmsi::preprocess::{Construction, Strategy};

    fn joint_cfg() -> ExperimentConfig {
        let src = "output_dir = \"/tmp/x\"\n[corpus.synthetic]\nn_cases = 10\n";
        let mut c: ExperimentConfig = toml::from_str(src).unwrap();
        c.task = TaskSpec::Joint { strategy: Strategy::Mask, construction: Construction::Pairs, alpha: 1.0, beta: 0.1 };
        c.corpus.synthetic = Some(SyntheticSpec { n_cases: 10, ..Default::default() });
        c
    }

    #[test]
    fn alpha_beta_sweep_has_seventeen_points() {
        let mut c = joint_cfg();
        c.sweep = Some(SweepSection { axis: SweepAxis::AlphaBeta, values: vec![] });
        let pts = sweep_points(&c).unwrap();
        assert_eq!(pts.len(), 17);
        assert_eq!(pts[0].0, "alpha0.00_beta1.00");
        assert_eq!(pts[16].0, "alpha1.00_beta0.00");
        let names: BTreeSet<&String> = pts.iter().map(|p| &p.0).collect();
        assert_eq!(names.len(), 17);
        assert!(pts.iter().all(|(_, c)| c.sweep.is_none() && c.output_dir.starts_with("/tmp/x/sweep")));
    }

    #[test]
    fn axis_sweeps_set_one_field() {
        let mut c = joint_cfg();
        c.sweep = Some(SweepSection { axis: SweepAxis::Dropout, values: vec![] });
        let pts = sweep_points(&c).unwrap();
        assert_eq!(pts.iter().map(|p| p.1.train.dropout).collect::<Vec<_>>(), [0.1, 0.3, 0.5]);
        assert_eq!(pts[1].0, "dropout_0.3");
        c.sweep = Some(SweepSection { axis: SweepAxis::Epochs, values: vec![3.0] });
        assert_eq!(sweep_points(&c).unwrap()[0].1.train.epochs, 3);
    }
}
