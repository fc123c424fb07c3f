//! Experiment config: a TOML file, `--set` overrides, and the effective copy
//! written into every run directory.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mmsi::corpus::{SyntheticSpec, DEFAULT_PRISON_MAX, DEFAULT_ROLE_KEYWORDS};
use mmsi::encoder::EncoderConfig;
use mmsi::interpret::{Baseline, MIN_STEPS};
use mmsi::model::{Fusion, JointConfig};
use mmsi::preprocess::{Construction, Strategy};
use mmsi::train::{ProtocolConfig, TaskSpec, TrainConfig};

/// A config problem, pointed at the line that caused it when known.
#[derive(Debug)]
pub struct ConfigError {
    pub origin: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{l}: {}", self.origin, self.message),
            None => write!(f, "{}: {}", self.origin, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// JSONL corpus file.
    pub path: Option<PathBuf>,
    /// Generator settings, used when no path is given.
    pub synthetic: Option<SyntheticSpec>,
    /// Sentence cap for a corpus read from `path`.
    pub prison_max: Option<u32>,
}

/// Switches that override the task's strategy and fusion.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// `false` forces the original, unmasked text.
    pub mask: Option<bool>,
    /// `false` drops guilt fusion from the sentencing model.
    pub fusion: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub n_resamples: usize,
    pub n_repetitions: usize,
    pub seed: u64,
    pub ratios: (f64, f64, f64),
    pub role_keywords: Vec<String>,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        let p = ProtocolConfig::default();
        ProtocolSection {
            n_resamples: p.n_resamples,
            n_repetitions: p.n_repetitions,
            seed: p.seed,
            ratios: p.ratios,
            role_keywords: DEFAULT_ROLE_KEYWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretSection {
    /// Removal sizes for comprehensiveness; frequency tables use each too.
    pub k: Vec<usize>,
    pub steps: usize,
    pub baseline: Baseline,
    /// (resample, repetition) whose models are explained.
    pub run: (usize, usize),
    /// Cap on explained test samples, in test-set order.
    pub max_samples: Option<usize>,
    /// Encoder layer for the attention export; last layer when unset.
    pub attention_layer: Option<usize>,
}

impl Default for InterpretSection {
    fn default() -> Self {
        InterpretSection {
            k: vec![1, 3, 5],
            steps: 64,
            baseline: Baseline::default(),
            run: (0, 0),
            max_samples: None,
            attention_layer: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// The 17-point joint loss weighting grid.
    AlphaBeta,
    Epochs,
    LearningRate,
    Dropout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    /// Grid values; ignored for `alpha_beta`, defaulted for the others.
    #[serde(default)]
    pub values: Vec<f64>,
}

impl SweepSection {
    pub fn points(&self) -> Vec<f64> {
        if !self.values.is_empty() {
            return self.values.clone();
        }
        match self.axis {
            SweepAxis::AlphaBeta => Vec::new(),
            SweepAxis::Epochs => vec![5.0, 10.0, 20.0, 50.0],
            SweepAxis::LearningRate => vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
            SweepAxis::Dropout => vec![0.1, 0.3, 0.5],
        }
    }
}

fn default_task() -> TaskSpec {
    TaskSpec::GuiltInference { strategy: Strategy::Mask, construction: Construction::Pairs }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default = "default_task")]
    pub task: TaskSpec,
    #[serde(default)]
    pub ablation: AblationSection,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub interpret: InterpretSection,
    pub sweep: Option<SweepSection>,
}

impl ExperimentConfig {
    /// The task after ablation switches.
    pub fn effective_task(&self) -> TaskSpec {
        let mut task = self.task.clone();
        if self.ablation.mask == Some(false) {
            match &mut task {
                TaskSpec::GuiltInference { strategy, .. }
                | TaskSpec::GuiltIdentification { strategy, .. }
                | TaskSpec::Prison { strategy, .. }
                | TaskSpec::Joint { strategy, .. } => *strategy = Strategy::Original,
            }
        }
        if let (TaskSpec::Prison { fusion, .. }, Some(on)) = (&mut task, self.ablation.fusion) {
            *fusion = if on { Fusion::Broadcast } else { Fusion::None };
        }
        task
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        ProtocolConfig {
            encoder: self.encoder.clone(),
            train: self.train.clone(),
            ratios: self.protocol.ratios,
            n_resamples: self.protocol.n_resamples,
            n_repetitions: self.protocol.n_repetitions,
            seed: self.protocol.seed,
            role_keywords: self.protocol.role_keywords.clone(),
        }
    }

    pub fn prison_max(&self) -> u32 {
        match (&self.corpus.synthetic, self.corpus.prison_max) {
            (Some(s), _) => s.prison_max,
            (None, Some(p)) => p,
            (None, None) => DEFAULT_PRISON_MAX,
        }
    }

    /// Semantic checks as (dotted key, message).
    pub fn check(&self) -> Result<(), (String, String)> {
        let fail = |key: &str, msg: String| Err((key.to_string(), msg));
        match (&self.corpus.path, &self.corpus.synthetic) {
            (Some(_), Some(_)) => return fail("corpus.path", "give either corpus.path or corpus.synthetic, not both".into()),
            (None, None) => return fail("corpus", "needs corpus.path or a [corpus.synthetic] table".into()),
            (Some(p), None) if !p.exists() => return fail("corpus.path", format!("{} does not exist", p.display())),
            _ => {}
        }
        if let Some(s) = &self.corpus.synthetic {
            if let Err(e) = s.validate() {
                return fail("corpus.synthetic", e.to_string());
            }
        }
        if self.ablation.fusion.is_some() && !matches!(self.task, TaskSpec::Prison { .. }) {
            return fail("ablation.fusion", "fusion only applies to the prison task".into());
        }
        if let TaskSpec::Joint { alpha, beta, .. } = self.task {
            if let Err(e) = (JointConfig { alpha, beta }).validate() {
                return fail("task.alpha", e.to_string());
            }
        }
        if let Err(e) = (EncoderConfig { vocab_size: 5, ..self.encoder.clone() }).validate() {
            return fail("encoder", e.to_string());
        }
        if let Err(e) = self.train.validate() {
            return fail("train", e.to_string());
        }
        let p = &self.protocol;
        if p.n_resamples == 0 {
            return fail("protocol.n_resamples", "must be ≥ 1".into());
        }
        if p.n_repetitions == 0 {
            return fail("protocol.n_repetitions", "must be ≥ 1".into());
        }
        let (a, b, c) = p.ratios;
        if [a, b, c].iter().any(|r| !(*r > 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return fail("protocol.ratios", format!("ratios must be positive and sum to 1, got ({a}, {b}, {c})"));
        }
        let i = &self.interpret;
        if i.k.is_empty() {
            return fail("interpret.k", "needs at least one removal size".into());
        }
        if i.steps < MIN_STEPS {
            return fail("interpret.steps", format!("needs at least {MIN_STEPS} steps"));
        }
        if i.run.0 >= p.n_resamples || i.run.1 >= p.n_repetitions {
            return fail("interpret.run", format!("run {:?} is outside the protocol", i.run));
        }
        if let Some(l) = i.attention_layer {
            if l >= self.encoder.layers {
                return fail("interpret.attention_layer", format!("encoder has {} layers", self.encoder.layers));
            }
        }
        if let Some(s) = &self.sweep {
            if s.axis == SweepAxis::AlphaBeta && !matches!(self.task, TaskSpec::Joint { .. }) {
                return fail("sweep.axis", "the alpha_beta sweep needs task = \"joint\"".into());
            }
            let bad = match s.axis {
                SweepAxis::Epochs => {
                    s.points().iter().find(|v| !(**v >= 1.0 && v.fract() == 0.0)).map(|v| format!("epochs {v} is not a positive integer"))
                }
                SweepAxis::LearningRate => {
                    s.points().iter().find(|v| !(**v > 0.0)).map(|v| format!("learning rate {v} must be > 0"))
                }
                SweepAxis::Dropout => {
                    s.points().iter().find(|v| !(0.0..1.0).contains(*v)).map(|v| format!("dropout {v} outside [0, 1)"))
                }
                _ => None,
            };
            if let Some(msg) = bad {
                return fail("sweep.values", msg);
            }
        }
        Ok(())
    }

    /// Resolves relative paths against `base`.
    fn absolutize(&mut self, base: &Path) {
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        self.output_dir = abs(&self.output_dir);
        if let Some(p) = &self.corpus.path {
            self.corpus.path = Some(abs(p));
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Applies `key.path=value` to a parsed table. The value is read as TOML
/// and falls back to a plain string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), String> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| format!("`{spec}` is not key=value"))?;
    let key = key.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("bad key `{key}`"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| format!("`{p}` in `{key}` is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Line defining a dotted key, or of its nearest enclosing table header.
pub fn locate(src: &str, key: &str) -> Option<usize> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut header: Vec<String> = Vec::new();
    let mut best: Option<(usize, usize)> = None;
    for (i, line) in src.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            let name = t.trim_start_matches('[').split(']').next().unwrap_or("");
            header = name.split('.').map(|s| s.trim().to_string()).collect();
            let depth = header.len();
            if depth <= parts.len() && header.iter().zip(&parts).all(|(a, b)| a == b) && best.is_none_or(|b| depth > b.1) {
                best = Some((i + 1, depth));
            }
            continue;
        }
        let Some((lhs, _)) = t.split_once('=') else { continue };
        let full: Vec<String> = header.iter().cloned().chain(lhs.split('.').map(|s| s.trim().to_string())).collect();
        let depth = full.iter().zip(&parts).take_while(|(a, b)| a == *b).count();
        if depth == full.len() && depth > 0 && best.is_none_or(|b| depth > b.1) {
            best = Some((i + 1, depth));
        }
    }
    best.map(|b| b.0)
}

/// Reads `path`, applies overrides, resolves relative paths against the
/// file's directory and validates.
pub fn load(path: &Path, overrides: &[String], out: Option<&Path>) -> Result<ExperimentConfig, ConfigError> {
    let origin = path.display().to_string();
    let err = |line, message| ConfigError { origin: origin.clone(), line, message };
    let src = std::fs::read_to_string(path).map_err(|e| err(None, e.to_string()))?;
    let mut cfg: ExperimentConfig = toml::from_str(&src).map_err(|e| {
        err(e.span().map(|s| line_of(&src, s.start)), e.message().trim().to_string())
    })?;
    if !overrides.is_empty() {
        let mut table: toml::Table = toml::from_str(&src).expect("parsed above");
        for o in overrides {
            apply_override(&mut table, o)
                .map_err(|m| ConfigError { origin: format!("--set {o}"), line: None, message: m })?;
        }
        cfg = table.try_into().map_err(|e: toml::de::Error| ConfigError {
            origin: format!("--set {}", overrides.join(" --set ")),
            line: None,
            message: e.message().trim().to_string(),
        })?;
    }
    if let Some(o) = out {
        cfg.output_dir = std::env::current_dir().map(|d| d.join(o)).unwrap_or_else(|_| o.to_path_buf());
    }
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let base = std::fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
    cfg.absolutize(&base);
    cfg.check().map_err(|(key, message)| {
        match overrides.iter().find(|o| o.split('=').next().is_some_and(|k| k.trim() == key || key.starts_with(&format!("{}.", k.trim())))) {
            Some(o) => ConfigError { origin: format!("--set {o}"), line: None, message: format!("{key}: {message}") },
            None => ConfigError { origin: origin.clone(), line: locate(&src, &key), message: format!("{key}: {message}") },
        }
    })?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SRC: &str = "output_dir = \"out\"\n\n[corpus.synthetic]\nn_cases = 20\nseed = 3\n\n[train]\nepochs = 2\nlearning_rate = 0.001\n\n[protocol]\nn_resamples = 1\n";

    #[test]
    fn shipped_configs_load() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut n = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "toml") {
                let cfg = load(&path, &[], None).unwrap_or_else(|e| panic!("{e}"));
                assert_eq!(cfg.train.learning_rate, 1e-3, "{}", path.display());
                n += 1;
            }
        }
        assert_eq!(n, 3);
    }

    #[test]
    fn locate_finds_keys_and_sections() {
        assert_eq!(locate(SRC, "train.learning_rate"), Some(9));
        assert_eq!(locate(SRC, "train"), Some(7));
        assert_eq!(locate(SRC, "train.dropout"), Some(7));
        assert_eq!(locate(SRC, "corpus.synthetic.seed"), Some(5));
        assert_eq!(locate(SRC, "output_dir"), Some(1));
        assert_eq!(locate("a.b = 1\n", "a.b"), Some(1));
        assert_eq!(locate(SRC, "sweep"), None);
    }

    #[test]
    fn overrides_parse_values() {
        let mut t: toml::Table = toml::from_str(SRC).unwrap();
        apply_override(&mut t, "train.epochs=7").unwrap();
        apply_override(&mut t, "task.task = prison").unwrap();
        apply_override(&mut t, "interpret.k=[2, 4]").unwrap();
        assert_eq!(t["train"]["epochs"].as_integer(), Some(7));
        assert_eq!(t["task"]["task"].as_str(), Some("prison"));
        assert_eq!(t["interpret"]["k"].as_array().unwrap().len(), 2);
        assert!(apply_override(&mut t, "noequals").is_err());
        assert!(apply_override(&mut t, "output_dir.x=1").is_err());
    }

    #[test]
    fn effective_task_applies_ablation() {
        let mut cfg: ExperimentConfig = toml::from_str(SRC).unwrap();
        cfg.task = TaskSpec::Prison {
            strategy: Strategy::Mask,
            fusion: Fusion::Broadcast,
            test_guilt: Default::default(),
            construction: Construction::Pairs,
        };
        cfg.ablation = AblationSection { mask: Some(false), fusion: Some(false) };
        match cfg.effective_task() {
            TaskSpec::Prison { strategy, fusion, .. } => {
                assert_eq!(strategy, Strategy::Original);
                assert_eq!(fusion, Fusion::None);
            }
            t => panic!("{t:?}"),
        }
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg: ExperimentConfig = toml::from_str(SRC).unwrap();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
