//! Resampling × repetition protocol and confidence intervals.
//!
//! Resample `r` draws a fresh seeded 8:1:1 case split (and pairing);
//! repetition `k` reuses that split and varies only the training seed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{
    evaluate_classifier, evaluate_regressor, ground_truth_guilt, record, train_classifier, train_joint,
    train_regressor, History, LabelSource, Stage1, TrainConfig,
};
use crate::corpus::{derive_samples, prune_corpus, split_corpus, CaseCorpus, Role, Task, DEFAULT_ROLE_KEYWORDS};
use crate::encoder::{EncoderConfig, Tokenizer};
use crate::error::{Error, Result};
use crate::metrics::{self, classification_metrics, regression_metrics};
use crate::model::{Fusion, GuiltClassifier, JointModel, PredictionRecord, SentencingRegressor, ATTENTION_READING};
use crate::preprocess::{
    build_pairs_dataset, mask_samples, Construction, MaskedSample, RoleTagged, SampleSet, Strategy, TextSource,
};
use crate::seed;

/// What one protocol run trains and scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// Role from the fact description.
    GuiltInference {
        strategy: Strategy,
        #[serde(default)]
        construction: Construction,
    },
    /// Role from the full court view.
    GuiltIdentification {
        strategy: Strategy,
        #[serde(default)]
        construction: Construction,
    },
    /// Months from the pruned court view. With `test_guilt = predicted`
    /// a Stage-1 classifier is trained on the fact description
    /// (`construction` shapes its training set).
    Prison {
        strategy: Strategy,
        #[serde(default)]
        fusion: Fusion,
        #[serde(default)]
        test_guilt: LabelSource,
        #[serde(default)]
        construction: Construction,
    },
    /// Multi-task model on balanced (fd, cv_d) inputs.
    Joint {
        strategy: Strategy,
        #[serde(default)]
        construction: Construction,
        alpha: f64,
        beta: f64,
    },
}

impl TaskSpec {
    pub fn strategy(&self) -> Strategy {
        match *self {
            TaskSpec::GuiltInference { strategy, .. }
            | TaskSpec::GuiltIdentification { strategy, .. }
            | TaskSpec::Prison { strategy, .. }
            | TaskSpec::Joint { strategy, .. } => strategy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub ratios: (f64, f64, f64),
    pub n_resamples: usize,
    pub n_repetitions: usize,
    /// Base seed for splits and training.
    pub seed: u64,
    /// Used when the corpus has not been pruned yet.
    pub role_keywords: Vec<String>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            ratios: (0.8, 0.1, 0.1),
            n_resamples: 10,
            n_repetitions: 5,
            seed: 0,
            role_keywords: DEFAULT_ROLE_KEYWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_resamples == 0 || self.n_repetitions == 0 {
            return Err(Error::Config("n_resamples and n_repetitions must be ≥ 1".into()));
        }
        self.train.validate()
    }

    pub fn split_seed(&self, resample: usize) -> u64 {
        seed::derive(self.seed, "split", resample as u64)
    }

    pub fn train_seed(&self, resample: usize, repetition: usize) -> u64 {
        seed::derive(self.split_seed(resample), "train", repetition as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolCounts {
    pub n_resamples: usize,
    pub n_repetitions: usize,
}

/// Seeds and test-set metrics of one (resample, repetition) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub resample: usize,
    pub repetition: usize,
    pub split_seed: u64,
    pub train_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Selected epoch of each trained model, in training order.
    pub best_epochs: Vec<usize>,
    pub metrics: BTreeMap<String, f64>,
}

/// A model produced by a run, in training order.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Classifier(GuiltClassifier),
    Regressor(SentencingRegressor),
    Joint(JointModel),
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub predictions: Vec<PredictionRecord>,
    pub histories: Vec<History>,
    pub tokenizer: Tokenizer,
    pub models: Vec<TrainedModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// `None` when fewer than two runs exist.
    pub ci_halfwidth: Option<f64>,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub protocol: ProtocolCounts,
    pub metrics: BTreeMap<String, MetricSummary>,
    pub metadata: BTreeMap<String, String>,
    /// Seed log, ordered by (resample, repetition).
    pub runs: Vec<RunRecord>,
}

/// `mean ± t_{(1+level)/2, n−1} · s / √n` with the sample standard deviation.
pub fn confidence_interval(values: &[f64], level: f64) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("a confidence interval needs at least 2 values, got {n}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {level} outside (0, 1)")));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Ok((values[0], 0.0));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?
        .inverse_cdf((1.0 + level) / 2.0);
    Ok((mean, t * var.sqrt() / (n as f64).sqrt()))
}

fn protocol_metadata(task: &TaskSpec) -> BTreeMap<String, String> {
    let mut m = BTreeMap::from([
        ("task".to_string(), serde_json::to_string(task).expect("task spec serializes")),
        ("ci_method".into(), "student_t over run-level values, level 0.95".into()),
        ("repetitions".into(), "reuse the resample's split; only the training seed changes".into()),
        ("classification_pooling".into(), "Acc/P/R/F1 computed per run, then averaged".into()),
        ("pair_reuse".into(), "false".into()),
        ("undefined_precision_recall".into(), "reported as 0".into()),
    ]);
    if matches!(task, TaskSpec::Joint { .. }) {
        m.insert("attention_reading".into(), ATTENTION_READING.into());
    }
    m
}

/// Pools run records. The result does not depend on the order of `runs`.
pub fn aggregate(runs: &[RunRecord], counts: ProtocolCounts, task: &TaskSpec) -> Result<AggregateReport> {
    let expected = counts.n_resamples * counts.n_repetitions;
    if runs.len() != expected {
        return Err(Error::Validation(format!("expected {expected} runs, got {}", runs.len())));
    }
    let mut runs = runs.to_vec();
    runs.sort_by_key(|r| (r.resample, r.repetition));
    if runs.windows(2).any(|w| (w[0].resample, w[0].repetition) == (w[1].resample, w[1].repetition)) {
        return Err(Error::Validation("duplicate (resample, repetition) run".into()));
    }
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &runs {
        for (k, &v) in &r.metrics {
            values.entry(k.as_str()).or_default().push(v);
        }
    }
    let mut metrics = BTreeMap::new();
    for (name, vals) in values {
        let summary = if vals.len() >= 2 {
            let (mean, hw) = confidence_interval(&vals, 0.95)?;
            MetricSummary { mean, ci_halfwidth: Some(hw), n_runs: vals.len() }
        } else {
            MetricSummary { mean: vals[0], ci_halfwidth: None, n_runs: 1 }
        };
        metrics.insert(name.to_string(), summary);
    }
    let mut metadata = protocol_metadata(task);
    if expected == 1 {
        metadata.insert("ci".into(), "not applicable for a single run".into());
    }
    Ok(AggregateReport { protocol: counts, metrics, metadata, runs })
}

fn classification_entries(m: &metrics::ClassificationMetrics, out: &mut BTreeMap<String, f64>) {
    out.insert(metrics::ACC.into(), m.acc);
    out.insert(metrics::PRECISION.into(), m.precision);
    out.insert(metrics::RECALL.into(), m.recall);
    out.insert(metrics::F1.into(), m.f1);
}

fn regression_entries(m: &metrics::RegressionMetrics, out: &mut BTreeMap<String, f64>) {
    out.insert(metrics::IMP_SCORE.into(), m.imp_score);
    out.insert(metrics::IMP_ACC.into(), m.imp_acc);
    out.insert(metrics::IMP_ERR.into(), m.imp_err);
}

/// Metrics recomputed from a prediction file: classification when every
/// record carries both guilt labels, regression when every record carries
/// both month values.
pub fn prediction_metrics(preds: &[PredictionRecord], prison_max: f64) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    let guilt: Option<(Vec<u8>, Vec<u8>)> =
        preds.iter().map(|r| Some((r.guilt_pred?.label(), r.guilt_true?.label()))).collect::<Option<Vec<_>>>().map(|v| v.into_iter().unzip());
    if let Some((p, y)) = guilt {
        classification_entries(&classification_metrics(&p, &y)?, &mut out);
    }
    let months: Option<(Vec<f64>, Vec<f64>)> =
        preds.iter().map(|r| Some((r.months_pred?, r.months_true?))).collect::<Option<Vec<_>>>().map(|v| v.into_iter().unzip());
    if let Some((p, y)) = months {
        regression_entries(&regression_metrics(&p, &y, prison_max)?, &mut out);
    }
    if out.is_empty() {
        return Err(Error::Validation("predictions carry neither complete guilt nor complete month pairs".into()));
    }
    Ok(out)
}

impl<A: RoleTagged, B> RoleTagged for (A, B) {
    fn case_id(&self) -> &str {
        self.0.case_id()
    }
    fn role(&self) -> Role {
        self.0.role()
    }
}

/// A resample's case split and the vocabulary built from its training part.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub train: CaseCorpus,
    pub val: CaseCorpus,
    pub test: CaseCorpus,
    pub tokenizer: Tokenizer,
    pub split_seed: u64,
}

impl PreparedSplit {
    pub fn each(&self) -> [&CaseCorpus; 3] {
        [&self.train, &self.val, &self.test]
    }

    /// Masked samples of one part (0 train, 1 val, 2 test) before construction.
    pub fn samples(&self, part: usize, task: Task, source: TextSource, strategy: Strategy, max_len: usize) -> Result<Vec<MaskedSample>> {
        masked(self.each()[part], task, source, strategy, &self.tokenizer, max_len)
    }

    /// One part as the task trains and evaluates on it: constructed for the
    /// classification tasks, every defendant's cv_d for prison, and the cv_d
    /// half of the constructed pairs for joint.
    pub fn sample_set(&self, part: usize, task: &TaskSpec, max_len: usize) -> Result<SampleSet> {
        let tok = &self.tokenizer;
        let c = self.each()[part];
        match *task {
            TaskSpec::GuiltInference { strategy, construction } => {
                construct_set(&masked(c, Task::GuiltInference, TextSource::Fd, strategy, tok, max_len)?, construction, self.split_seed, part)
            }
            TaskSpec::GuiltIdentification { strategy, construction } => {
                construct_set(&masked(c, Task::GuiltIdentification, TextSource::Cv, strategy, tok, max_len)?, construction, self.split_seed, part)
            }
            TaskSpec::Prison { strategy, .. } => {
                Ok(SampleSet::unconstructed(masked(c, Task::Prison, TextSource::CvD, strategy, tok, max_len)?))
            }
            TaskSpec::Joint { strategy, construction, .. } => {
                let fd = masked(c, Task::Prison, TextSource::Fd, strategy, tok, max_len)?;
                let cvd = masked(c, Task::Prison, TextSource::CvD, strategy, tok, max_len)?;
                let pairs: Vec<(MaskedSample, MaskedSample)> = fd.into_iter().zip(cvd).collect();
                construct_set(&pairs, construction, self.split_seed, part)?.map(|p| Ok(p.1))
            }
        }
    }
}

/// Splits (pruning first when the task needs cv_d) and builds the vocabulary.
pub fn prepare_split(corpus: &CaseCorpus, task: &TaskSpec, cfg: &ProtocolConfig, resample: usize) -> Result<PreparedSplit> {
    let split_seed = cfg.split_seed(resample);
    let needs_cvd = matches!(task, TaskSpec::Prison { .. } | TaskSpec::Joint { .. });
    let pruned;
    let corpus = if needs_cvd && corpus.cases.iter().any(|c| c.cv_d.is_none()) {
        pruned = prune_corpus(corpus, &cfg.role_keywords)?.0;
        &pruned
    } else {
        corpus
    };
    let (train, val, test) = split_corpus(corpus, cfg.ratios, split_seed)?;
    let tokenizer = Tokenizer::build(train.texts(), 1);
    let split = PreparedSplit { train, val, test, tokenizer, split_seed };
    audit(&split)?;
    Ok(split)
}

fn masked(
    corpus: &CaseCorpus,
    task: Task,
    source: TextSource,
    strategy: Strategy,
    tok: &Tokenizer,
    max_len: usize,
) -> Result<Vec<MaskedSample>> {
    mask_samples(&derive_samples(corpus, task)?, source, strategy, tok, max_len)
}

fn construct_set<T: RoleTagged + Clone>(items: &[T], c: Construction, seed: u64, part: usize) -> Result<SampleSet<T>> {
    let label = ["train", "val", "test"][part];
    build_pairs_dataset(items, c, seed::derive(seed, "construct", part as u64))
        .map_err(|e| Error::Validation(format!("{label} split: {e}")))
}

fn construct<T: RoleTagged + Clone>(items: &[T], c: Construction, seed: u64, part: usize) -> Result<Vec<T>> {
    construct_set(items, c, seed, part).map(|s| s.samples)
}

/// Test-case ids must never reach training or validation.
fn audit(splits: &PreparedSplit) -> Result<()> {
    let test: std::collections::HashSet<&str> = splits.test.cases.iter().map(|c| c.id.as_str()).collect();
    for c in splits.train.cases.iter().chain(&splits.val.cases) {
        if test.contains(c.id.as_str()) {
            return Err(Error::Validation(format!("case {} appears in both training and test data", c.id)));
        }
    }
    Ok(())
}

/// One (resample, repetition) run.
pub fn run_single(
    corpus: &CaseCorpus,
    task: &TaskSpec,
    cfg: &ProtocolConfig,
    resample: usize,
    repetition: usize,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let splits = prepare_split(corpus, task, cfg, resample)?;
    let split_seed = splits.split_seed;
    let train_seed = cfg.train_seed(resample, repetition);
    let tok = &splits.tokenizer;
    let prison_max = f64::from(corpus.prison_max);
    let enc = EncoderConfig { vocab_size: tok.vocab_size(), ..cfg.encoder.clone() };
    let tcfg = TrainConfig { seed: train_seed, ..cfg.train.clone() };
    let max_len = enc.max_len;
    let mut metrics = BTreeMap::new();
    let mut predictions = Vec::new();
    let mut histories = Vec::new();
    let mut models = Vec::new();
    let sizes;

    match *task {
        TaskSpec::GuiltInference { strategy, construction } | TaskSpec::GuiltIdentification { strategy, construction } => {
            let (t, source) = match task {
                TaskSpec::GuiltInference { .. } => (Task::GuiltInference, TextSource::Fd),
                _ => (Task::GuiltIdentification, TextSource::Cv),
            };
            let mut sets = Vec::with_capacity(3);
            for (part, c) in splits.each().into_iter().enumerate() {
                sets.push(construct(&masked(c, t, source, strategy, tok, max_len)?, construction, split_seed, part)?);
            }
            sizes = (sets[0].len(), sets[1].len(), sets[2].len());
            let (clf, h) = train_classifier(&sets[0], &sets[1], &enc, &tcfg)?;
            histories.push(h);
            let (cm, preds) = evaluate_classifier(&clf, &sets[2])?;
            classification_entries(&cm, &mut metrics);
            for (s, p) in sets[2].iter().zip(preds) {
                predictions.push(PredictionRecord { guilt_pred: Some(p.label), p: Some(p.p), ..record(s) });
            }
            models.push(TrainedModel::Classifier(clf));
        }
        TaskSpec::Prison { strategy, fusion, test_guilt, construction } => {
            let mut cvd = Vec::with_capacity(3);
            let mut fd = Vec::with_capacity(3);
            for c in splits.each() {
                cvd.push(masked(c, Task::Prison, TextSource::CvD, strategy, tok, max_len)?);
                fd.push(masked(c, Task::Prison, TextSource::Fd, strategy, tok, max_len)?);
            }
            sizes = (cvd[0].len(), cvd[1].len(), cvd[2].len());
            let wants_stage1 = fusion == Fusion::Broadcast
                && (test_guilt == LabelSource::Predicted || tcfg.label_source == LabelSource::Predicted);
            let classifier = if wants_stage1 {
                let tr = construct(&fd[0], construction, split_seed, 0)?;
                let va = construct(&fd[1], construction, split_seed, 1)?;
                let (clf, h) = train_classifier(&tr, &va, &enc, &TrainConfig { seed: seed::derive(train_seed, "stage1", 0), ..tcfg.clone() })?;
                histories.push(h);
                Some(clf)
            } else {
                None
            };
            let stage1 = classifier.as_ref().map(|c| Stage1 { classifier: c, fd_train: &fd[0], fd_val: &fd[1] });
            let (reg, h) = train_regressor(&cvd[0], &cvd[1], &enc, prison_max, fusion, &tcfg, stage1)?;
            histories.push(h);
            let mut guilt_preds = None;
            let guilt = match (&classifier, test_guilt) {
                (Some(clf), LabelSource::Predicted) => {
                    let (cm, preds) = evaluate_classifier(clf, &fd[2])?;
                    classification_entries(&cm, &mut metrics);
                    let values = preds.iter().map(|p| reg.guilt_value(p)).collect();
                    guilt_preds = Some(preds);
                    values
                }
                _ => ground_truth_guilt(&cvd[2]),
            };
            let (rm, months) = evaluate_regressor(&reg, &cvd[2], &guilt)?;
            regression_entries(&rm, &mut metrics);
            for (i, s) in cvd[2].iter().enumerate() {
                let (gp, p) = match &guilt_preds {
                    Some(g) => (Some(g[i].label), Some(g[i].p)),
                    None => (None, None),
                };
                predictions.push(PredictionRecord {
                    guilt_pred: gp,
                    p,
                    months_pred: Some(months[i]),
                    months_true: Some(s.months()),
                    ..record(s)
                });
            }
            models.extend(classifier.map(TrainedModel::Classifier));
            models.push(TrainedModel::Regressor(reg));
        }
        TaskSpec::Joint { strategy, construction, alpha, beta } => {
            let jc = crate::model::JointConfig { alpha, beta };
            let mut parts: Vec<(Vec<MaskedSample>, Vec<MaskedSample>)> = Vec::with_capacity(3);
            for (part, c) in splits.each().into_iter().enumerate() {
                let fd = masked(c, Task::Prison, TextSource::Fd, strategy, tok, max_len)?;
                let cvd = masked(c, Task::Prison, TextSource::CvD, strategy, tok, max_len)?;
                let pairs: Vec<(MaskedSample, MaskedSample)> = fd.into_iter().zip(cvd).collect();
                parts.push(construct(&pairs, construction, split_seed, part)?.into_iter().unzip());
            }
            sizes = (parts[0].0.len(), parts[1].0.len(), parts[2].0.len());
            let (model, h) = train_joint(
                &parts[0].0,
                &parts[0].1,
                &parts[1].0,
                &parts[1].1,
                &enc,
                prison_max,
                &tcfg,
                &jc,
            )?;
            histories.push(h);
            let (fd, cvd) = &parts[2];
            let mut labels = Vec::with_capacity(fd.len());
            let mut truths = Vec::with_capacity(fd.len());
            let (mut pl, mut pm) = (Vec::with_capacity(fd.len()), Vec::with_capacity(fd.len()));
            for (f, c) in fd.iter().zip(cvd) {
                let out = model.joint_forward(f, c)?;
                pl.push(out.guilt.label.label());
                pm.push(out.months);
                labels.push(c.guilt.label());
                truths.push(c.months());
                predictions.push(PredictionRecord {
                    guilt_pred: Some(out.guilt.label),
                    p: Some(out.guilt.p),
                    months_pred: Some(out.months),
                    months_true: Some(c.months()),
                    ..record(c)
                });
            }
            classification_entries(&classification_metrics(&pl, &labels)?, &mut metrics);
            regression_entries(&regression_metrics(&pm, &truths, prison_max)?, &mut metrics);
            models.push(TrainedModel::Joint(model));
        }
    }
    Ok(RunOutcome {
        record: RunRecord {
            resample,
            repetition,
            split_seed,
            train_seed,
            n_train: sizes.0,
            n_val: sizes.1,
            n_test: sizes.2,
            best_epochs: histories.iter().map(|h| h.best_epoch).collect(),
            metrics,
        },
        predictions,
        histories,
        tokenizer: splits.tokenizer.clone(),
        models,
    })
}

/// Runs every (resample, repetition) pair not already in `done`, calling
/// `on_run` after each, and pools everything into a report.
pub fn run_protocol(
    corpus: &CaseCorpus,
    task: &TaskSpec,
    cfg: &ProtocolConfig,
    done: &[RunRecord],
    mut on_run: impl FnMut(&RunOutcome) -> Result<()>,
) -> Result<AggregateReport> {
    cfg.validate()?;
    let mut runs: Vec<RunRecord> = Vec::with_capacity(cfg.n_resamples * cfg.n_repetitions);
    for r in 0..cfg.n_resamples {
        for k in 0..cfg.n_repetitions {
            if let Some(prev) = done.iter().find(|x| x.resample == r && x.repetition == k) {
                if prev.train_seed != cfg.train_seed(r, k) {
                    return Err(Error::Validation(format!(
                        "stored run ({r}, {k}) was produced with a different seed"
                    )));
                }
                runs.push(prev.clone());
                continue;
            }
            let out = run_single(corpus, task, cfg, r, k)?;
            log::info!("run ({r}, {k}) finished: {:?}", out.record.metrics);
            on_run(&out)?;
            runs.push(out.record);
        }
    }
    aggregate(&runs, ProtocolCounts { n_resamples: cfg.n_resamples, n_repetitions: cfg.n_repetitions }, task)
}
