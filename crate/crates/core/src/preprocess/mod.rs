//! Oriented masking and training-set constructions.

mod construct;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::text::{segments, CLAUSE_TERMINATORS};
use crate::corpus::{DefendantSample, Label, Role};
use crate::encoder::{TokenSequence, Tokenizer, MASK};
use crate::error::{Error, Result};

pub use construct::{
    balance_classes, build_pairs_dataset, read_sample_set, write_sample_set, Construction, RoleTagged, SampleSet,
    SampleSetHeader,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Full text, untouched.
    Original,
    /// Only the sentences (and clauses) naming the target.
    Split,
    /// Every occurrence of the target name replaced by the mask token.
    Mask,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Original, Strategy::Split, Strategy::Mask];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Original => "original",
            Strategy::Split => "split",
            Strategy::Mask => "mask",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy `{s}` (original, split, mask)")))
    }
}

/// Which document field a sample was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    Fd,
    Cv,
    CvD,
}

impl fmt::Display for TextSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TextSource::Fd => "fd",
            TextSource::Cv => "cv",
            TextSource::CvD => "cv_d",
        })
    }
}

/// Applies a strategy to raw text.
pub fn mask_text(text: &str, target_name: &str, strategy: Strategy) -> Result<String> {
    if strategy == Strategy::Original {
        return Ok(text.to_string());
    }
    if target_name.is_empty() || !text.contains(target_name) {
        return Err(Error::NameNotFound { name: target_name.to_string(), context: "the text".into() });
    }
    Ok(match strategy {
        Strategy::Original => unreachable!(),
        Strategy::Mask => text.replace(target_name, MASK),
        Strategy::Split => segments(text, &CLAUSE_TERMINATORS)
            .into_iter()
            .filter(|s| s.contains(target_name))
            .collect::<String>()
            .trim_end()
            .to_string(),
    })
}

/// Masks and tokenizes `text` for one target defendant.
pub fn apply_masking(
    text: &str,
    target_name: &str,
    strategy: Strategy,
    tokenizer: &Tokenizer,
    max_len: usize,
) -> Result<TokenSequence> {
    Ok(tokenizer.tokenize(&mask_text(text, target_name, strategy)?, max_len))
}

/// A model-ready token sequence for one defendant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedSample {
    pub case_id: String,
    pub target_name: String,
    pub strategy: Strategy,
    pub source: TextSource,
    pub tokens: TokenSequence,
    pub label: Label,
    pub guilt: Role,
    pub prison_months: u32,
}

impl MaskedSample {
    /// Builds the sample for `source` (fd, cv, or the pruned cv carried by
    /// prison-task samples).
    pub fn from_defendant(
        sample: &DefendantSample,
        source: TextSource,
        strategy: Strategy,
        tokenizer: &Tokenizer,
        max_len: usize,
    ) -> Result<MaskedSample> {
        let text = match (source, &sample.cv_d) {
            (TextSource::CvD, Some(cv_d)) => cv_d.as_str(),
            (TextSource::CvD, None) => {
                return Err(Error::Validation(format!(
                    "sample {}/{} has no pruned court view",
                    sample.case_id, sample.defendant
                )))
            }
            _ => sample.text.as_str(),
        };
        let tokens = apply_masking(text, &sample.defendant, strategy, tokenizer, max_len).map_err(|e| match e {
            Error::NameNotFound { name, .. } => {
                Error::NameNotFound { name, context: format!("the {source} of case {}", sample.case_id) }
            }
            e => e,
        })?;
        Ok(MaskedSample {
            case_id: sample.case_id.clone(),
            target_name: sample.defendant.clone(),
            strategy,
            source,
            tokens,
            label: sample.label,
            guilt: sample.guilt,
            prison_months: sample.prison_months,
        })
    }

    pub fn months(&self) -> f64 {
        f64::from(self.prison_months)
    }

    pub fn same_defendant(&self, other: &MaskedSample) -> bool {
        self.case_id == other.case_id && self.target_name == other.target_name
    }
}

/// Masks a batch of defendant samples in order.
pub fn mask_samples(
    samples: &[DefendantSample],
    source: TextSource,
    strategy: Strategy,
    tokenizer: &Tokenizer,
    max_len: usize,
) -> Result<Vec<MaskedSample>> {
    samples.iter().map(|s| MaskedSample::from_defendant(s, source, strategy, tokenizer, max_len)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{MASK_ID, UNK_ID};

    const TEXT: &str = "Zhang invited Li; Zhang beat Wang.";

    fn tok() -> Tokenizer {
        Tokenizer::build([TEXT], 1)
    }

    #[test]
    fn mask_replaces_every_occurrence() {
        let t = tok();
        let s = apply_masking(TEXT, "Zhang", Strategy::Mask, &t, 64).unwrap();
        assert_eq!(s.count(MASK_ID), 2);
        assert!(!s.surface.iter().any(|x| x.contains("Zhang")));
        assert!(s.surface.contains(&"Li".to_string()) && s.surface.contains(&"Wang".to_string()));
    }

    #[test]
    fn split_keeps_target_clauses() {
        assert_eq!(mask_text(TEXT, "Li", Strategy::Split).unwrap(), "Zhang invited Li;");
        assert_eq!(mask_text(TEXT, "Wang", Strategy::Split).unwrap(), "Zhang beat Wang.");
        assert_eq!(mask_text(TEXT, "Zhang", Strategy::Split).unwrap(), TEXT);
    }

    #[test]
    fn original_is_plain_tokenization() {
        let t = tok();
        assert_eq!(apply_masking(TEXT, "Zhang", Strategy::Original, &t, 64).unwrap(), t.tokenize(TEXT, 64));
        assert_eq!(apply_masking(TEXT, "Nobody", Strategy::Original, &t, 64).unwrap(), t.tokenize(TEXT, 64));
    }

    #[test]
    fn absent_name_is_an_error() {
        let e = mask_text(TEXT, "Zhao", Strategy::Mask).unwrap_err();
        assert!(e.to_string().contains("Zhao"));
        assert!(mask_text(TEXT, "Zhao", Strategy::Split).is_err());
    }

    #[test]
    fn multi_token_name_collapses_to_one_mask() {
        let text = "Ou Yang hit him. Ou Yang left.";
        let t = Tokenizer::build([text], 1);
        let s = apply_masking(text, "Ou Yang", Strategy::Mask, &t, 64).unwrap();
        assert_eq!(s.count(MASK_ID), 2);
        assert_eq!(s.len(), t.tokenize(text, 64).len() - 2);
        assert_eq!(s.count(UNK_ID), 0);
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("split".parse::<Strategy>().unwrap(), Strategy::Split);
        assert!("masked".parse::<Strategy>().is_err());
    }
}
