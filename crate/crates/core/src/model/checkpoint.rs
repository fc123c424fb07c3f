//! Versioned JSON checkpoints and the line-delimited prediction file.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{GuiltClassifier, JointModel, MmsiPipeline, SentencingRegressor};
use crate::corpus::Role;
use crate::encoder::Tokenizer;
use crate::error::{Error, Result};
use crate::preprocess::Strategy;

pub const CHECKPOINT_FORMAT: &str = "mmsi-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

pub trait ModelKind {
    const KIND: &'static str;
}

impl ModelKind for GuiltClassifier {
    const KIND: &'static str = "guilt_classifier";
}

impl ModelKind for SentencingRegressor {
    const KIND: &'static str = "sentencing_regressor";
}

impl ModelKind for JointModel {
    const KIND: &'static str = "joint";
}

impl ModelKind for MmsiPipeline {
    const KIND: &'static str = "pipeline";
}

/// Self-describing header plus the model and the preprocessing it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<M> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub tokenizer: Tokenizer,
    pub strategy: Strategy,
    pub max_len: usize,
    /// Epoch the weights come from (1-based; 0 = untrained).
    pub epoch: usize,
    pub model: M,
}

impl<M: ModelKind> Checkpoint<M> {
    pub fn new(model: M, tokenizer: Tokenizer, strategy: Strategy, max_len: usize, epoch: usize) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: M::KIND.into(),
            tokenizer,
            strategy,
            max_len,
            epoch,
            model,
        }
    }
}

pub fn save_checkpoint<M: ModelKind + Serialize>(path: impl AsRef<Path>, ckpt: &Checkpoint<M>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<M: ModelKind + DeserializeOwned>(path: impl AsRef<Path>) -> Result<Checkpoint<M>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    #[derive(Deserialize)]
    struct Header {
        format: String,
        version: u32,
        kind: String,
    }
    let h: Header =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: unreadable header: {e}", path.display())))?;
    if h.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint (format `{}`)", path.display(), h.format)));
    }
    if h.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {} unsupported (expected {CHECKPOINT_VERSION})",
            path.display(),
            h.version
        )));
    }
    if h.kind != M::KIND {
        return Err(Error::Checkpoint(format!("{}: holds a {} model, expected {}", path.display(), h.kind, M::KIND)));
    }
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub case_id: String,
    pub defendant: String,
    pub guilt_pred: Option<Role>,
    pub p: Option<f64>,
    pub guilt_true: Option<Role>,
    pub months_pred: Option<f64>,
    pub months_true: Option<f64>,
}

pub fn write_predictions<W: Write>(records: &[PredictionRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::preprocess::TextSource;

    #[test]
    fn round_trip_is_bit_exact_and_kind_checked() {
        let tok = Tokenizer::build(["Zhang hit Wang."], 1);
        let cfg = EncoderConfig { layers: 1, heads: 2, d: 8, ff: 8, max_len: 16, dropout: 0.1, vocab_size: tok.vocab_size() };
        let m = GuiltClassifier::new(cfg, TextSource::Fd, 9).unwrap();
        let dir = std::env::temp_dir().join(format!("mmsi-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("clf.json");
        save_checkpoint(&path, &Checkpoint::new(m.clone(), tok, Strategy::Mask, 16, 3)).unwrap();
        let back: Checkpoint<GuiltClassifier> = load_checkpoint(&path).unwrap();
        assert_eq!(back.model, m);
        assert_eq!(back.epoch, 3);
        let err = load_checkpoint::<SentencingRegressor>(&path).unwrap_err();
        assert!(err.to_string().contains("guilt_classifier"));
        std::fs::write(&path, r#"{"format":"mmsi-checkpoint","version":99,"kind":"joint"}"#).unwrap();
        assert!(load_checkpoint::<JointModel>(&path).unwrap_err().to_string().contains("version 99"));
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn predictions_round_trip() {
        let recs = vec![PredictionRecord {
            case_id: "c1".into(),
            defendant: "Zhang".into(),
            guilt_pred: Some(Role::Principal),
            p: Some(0.75),
            guilt_true: Some(Role::Accomplice),
            months_pred: Some(12.5),
            months_true: Some(10.0),
        }];
        let dir = std::env::temp_dir().join(format!("mmsi-pred-{}.jsonl", std::process::id()));
        write_predictions(&recs, File::create(&dir).unwrap()).unwrap();
        assert_eq!(read_predictions(&dir).unwrap(), recs);
        std::fs::remove_file(dir).ok();
    }
}
