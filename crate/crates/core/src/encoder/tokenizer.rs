//! Basic tokenizer with a corpus-built vocabulary.
//!
//! CJK characters and punctuation are single tokens; runs of other
//! non-whitespace characters form one token. Special-token literals such as
//! `[MASK]` are recognized anywhere in the text and always map to one id.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Token ids with their surface strings and a marker for special positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub surface: Vec<String>,
    /// True at class-summary, separator, mask and pad positions.
    pub special_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn count(&self, id: u32) -> usize {
        self.ids.iter().filter(|&&i| i == id).count()
    }

    /// Appends pad tokens (after the separator).
    pub fn padded(&self, extra: usize) -> TokenSequence {
        let mut out = self.clone();
        for _ in 0..extra {
            out.ids.push(PAD_ID);
            out.surface.push(PAD.to_string());
            out.special_mask.push(true);
        }
        out
    }

    /// Copy with the positions in `remove` deleted and the gap closed.
    pub fn without(&self, remove: &[usize]) -> TokenSequence {
        let keep = |i: &usize| !remove.contains(i);
        let idx: Vec<usize> = (0..self.len()).filter(keep).collect();
        TokenSequence {
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            surface: idx.iter().map(|&i| self.surface[i].clone()).collect(),
            special_mask: idx.iter().map(|&i| self.special_mask[i]).collect(),
        }
    }

    pub fn check(&self, max_len: usize) -> Result<()> {
        if self.ids.len() != self.surface.len() || self.ids.len() != self.special_mask.len() {
            return Err(Error::InvalidArgument("token sequence fields differ in length".into()));
        }
        if self.ids.len() > max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} tokens exceeds max_len {max_len}",
                self.ids.len()
            )));
        }
        if self.ids.first() != Some(&CLS_ID) {
            return Err(Error::InvalidArgument("sequence must start with the class-summary token".into()));
        }
        Ok(())
    }
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0x20000..=0x2A6DF | 0xF900..=0xFAFF | 0x2F800..=0x2FA1F)
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c as u32, 0x3000..=0x303F | 0xFF00..=0xFF65 | 0x2000..=0x206F)
}

/// Splits text into surface tokens (no specials added).
pub fn basic_tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        if let Some(special) = SPECIALS.iter().find(|s| rest.starts_with(**s)) {
            if let Some(s) = start.take() {
                out.push(&text[s..i]);
            }
            out.push(&text[i..i + special.len()]);
            i += special.len();
            continue;
        }
        let c = rest.chars().next().expect("nonempty rest");
        let w = c.len_utf8();
        if c.is_whitespace() || is_cjk(c) || is_punct(c) {
            if let Some(s) = start.take() {
                out.push(&text[s..i]);
            }
            if !c.is_whitespace() {
                out.push(&text[i..i + w]);
            }
        } else if start.is_none() {
            start = Some(i);
        }
        i += w;
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Tokenizer {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Tokenizer::from_tokens(tokens)
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.tokens
    }
}

impl Tokenizer {
    /// Builds a vocabulary from `texts`, keeping tokens seen at least
    /// `min_count` times. Ids are assigned by descending frequency, ties
    /// broken lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Tokenizer {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for tok in basic_tokenize(t) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> =
            counts.into_iter().filter(|(t, c)| *c >= min_count && !SPECIALS.contains(t)).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Tokenizer::from_tokens(tokens).expect("specials are in place")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Tokenizer> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Validation(format!("vocabulary must start with {SPECIALS:?}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Validation(format!("token `{t}` appears twice in vocabulary")));
            }
        }
        Ok(Tokenizer { tokens, index })
    }

    /// Reads a vocabulary file: one token per line, id = line number.
    pub fn load(path: impl AsRef<Path>) -> Result<Tokenizer> {
        let text = fs::read_to_string(path)?;
        Tokenizer::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out)?;
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(UNK)
    }

    pub fn mask_token(&self) -> &'static str {
        MASK
    }

    /// `[CLS] tokens… [SEP]`, head-truncated so the total is at most `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenSequence {
        assert!(max_len >= 2, "max_len must leave room for [CLS] and [SEP]");
        let body = basic_tokenize(text);
        let keep = body.len().min(max_len - 2);
        let mut seq = TokenSequence {
            ids: Vec::with_capacity(keep + 2),
            surface: Vec::with_capacity(keep + 2),
            special_mask: Vec::with_capacity(keep + 2),
        };
        let mut push = |id: u32, surface: &str| {
            seq.ids.push(id);
            seq.surface.push(surface.to_string());
            seq.special_mask.push(matches!(id, PAD_ID | CLS_ID | SEP_ID | MASK_ID));
        };
        push(CLS_ID, CLS);
        for tok in &body[..keep] {
            push(self.id(tok), tok);
        }
        push(SEP_ID, SEP);
        seq
    }
}
