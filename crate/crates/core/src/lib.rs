//! Masked multistage inference (MMSI) for multidefendant criminal cases.
//!
//! The pipeline runs in two stages:
//!
//! ```text
//! FD  + target name --[oriented mask]--> encoder --> guilt head --> ŷ_g ∈ {0,1}
//! CVd + target name --[oriented mask]--> encoder --> h_cls + ŷ_g·1 --> regression head --> months
//! ```
//!
//! Alongside the models the crate carries everything needed to run the
//! experiments end to end: a corpus format and synthetic generator, the
//! three preprocessing strategies and training-set constructions, a
//! desk-scale transformer encoder with hand-written backpropagation, the
//! resampling protocol with confidence intervals, the imprisonment metrics,
//! and integrated-gradients attribution with comprehensiveness scoring.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod seed;
pub mod train;

pub use corpus::{CaseCorpus, DefendantRecord, JudicialCase, Role};
pub use encoder::{Encoder, EncoderConfig, EncoderOutput, Mode, TokenSequence, Tokenizer};
pub use error::{Error, Result};
pub use model::{GuiltClassifier, GuiltPrediction, JointModel, JudgmentPrediction, MmsiPipeline, SentencingRegressor};
pub use preprocess::{MaskedSample, SampleSet, Strategy};
