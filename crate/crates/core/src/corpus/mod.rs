//! Multidefendant case corpora: types, the line-delimited record format,
//! court-view pruning, case-level splits and the synthetic generator.

mod io;
mod prune;
mod samples;
mod split;
pub mod synthetic;
pub mod text;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_corpus, load_corpus_with, read_corpus, write_corpus};
pub use prune::{prune_corpus, prune_court_view, prune_text, PruneReport, DEFAULT_ROLE_KEYWORDS};
pub use samples::{derive_samples, DefendantSample, Label, Task};
pub use split::{split_corpus, split_indices};
pub use synthetic::{generate_synthetic_corpus, SyntheticSpec};

/// Default ceiling on prison terms, in months.
pub const DEFAULT_PRISON_MAX: u32 = 180;

/// Legal role of a defendant in a joint crime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Principal,
    Accomplice,
}

impl Role {
    /// Binary label: principal = 1, accomplice = 0.
    pub fn label(self) -> u8 {
        match self {
            Role::Principal => 1,
            Role::Accomplice => 0,
        }
    }

    pub fn from_label(label: u8) -> Role {
        if label >= 1 {
            Role::Principal
        } else {
            Role::Accomplice
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Principal => "principal",
            Role::Accomplice => "accomplice",
        }
    }

    pub fn opposite(self) -> Role {
        match self {
            Role::Principal => Role::Accomplice,
            Role::Accomplice => Role::Principal,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "principal" => Ok(Role::Principal),
            "accomplice" => Ok(Role::Accomplice),
            other => Err(Error::Validation(format!("unknown guilt role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefendantRecord {
    pub name: String,
    pub prison_months: u32,
    pub probation_months: Option<u32>,
    pub guilt: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudicialCase {
    pub id: String,
    pub defendants: Vec<DefendantRecord>,
    /// Fact description.
    pub fd: String,
    /// Court view.
    pub cv: String,
    /// Court view with role sentences removed; absent until pruned.
    pub cv_d: Option<String>,
}

impl JudicialCase {
    pub fn defendant(&self, name: &str) -> Option<&DefendantRecord> {
        self.defendants.iter().find(|d| d.name == name)
    }

    pub fn roles(&self) -> impl Iterator<Item = Role> + '_ {
        self.defendants.iter().map(|d| d.guilt)
    }

    /// True when the case has at least one principal and one accomplice.
    pub fn is_mixed_role(&self) -> bool {
        let mut roles = self.roles();
        match roles.next() {
            Some(first) => roles.any(|r| r != first),
            None => false,
        }
    }

    /// Checks the per-case invariants. Returns warnings for name pairs where
    /// one name is a substring of another, which substring masking cannot
    /// tell apart.
    pub fn validate(&self, prison_max: u32) -> Result<Vec<String>> {
        if self.id.is_empty() {
            return Err(Error::Validation("case id is empty".into()));
        }
        if self.defendants.is_empty() {
            return Err(Error::Validation(format!("case {} has no defendants", self.id)));
        }
        let mut seen = HashSet::new();
        for d in &self.defendants {
            if d.name.is_empty() {
                return Err(Error::Validation(format!("case {}: empty defendant name", self.id)));
            }
            if !seen.insert(d.name.as_str()) {
                return Err(Error::Validation(format!(
                    "case {}: defendant `{}` listed twice",
                    self.id, d.name
                )));
            }
            if !self.fd.contains(&d.name) && !self.cv.contains(&d.name) {
                return Err(Error::Validation(format!(
                    "case {}: defendant `{}` occurs in neither FD nor CV",
                    self.id, d.name
                )));
            }
            if d.prison_months > prison_max {
                return Err(Error::Validation(format!(
                    "case {}: defendant `{}` has {} months, above the corpus maximum {}",
                    self.id, d.name, d.prison_months, prison_max
                )));
            }
        }
        let mut warnings = Vec::new();
        for a in &self.defendants {
            for b in &self.defendants {
                if a.name != b.name && b.name.contains(&a.name) {
                    warnings.push(format!(
                        "case {}: name `{}` is contained in `{}`",
                        self.id, a.name, b.name
                    ));
                }
            }
        }
        Ok(warnings)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Loaded,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseCorpus {
    pub cases: Vec<JudicialCase>,
    pub prison_max: u32,
    pub provenance: Provenance,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl CaseCorpus {
    /// Builds a corpus after validating every case and corpus-level invariant.
    pub fn new(cases: Vec<JudicialCase>, prison_max: u32, provenance: Provenance) -> Result<Self> {
        if prison_max == 0 {
            return Err(Error::Validation("prison_max must be positive".into()));
        }
        let mut ids = HashSet::new();
        let mut warnings = Vec::new();
        for case in &cases {
            if !ids.insert(case.id.as_str()) {
                return Err(Error::Validation(format!("duplicate case id `{}`", case.id)));
            }
            warnings.extend(case.validate(prison_max)?);
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(CaseCorpus { cases, prison_max, provenance, warnings })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn n_defendants(&self) -> usize {
        self.cases.iter().map(|c| c.defendants.len()).sum()
    }

    /// A sub-corpus holding the cases at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> CaseCorpus {
        CaseCorpus {
            cases: indices.iter().map(|&i| self.cases[i].clone()).collect(),
            prison_max: self.prison_max,
            provenance: self.provenance,
            warnings: Vec::new(),
        }
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.cases.iter().flat_map(|c| {
            [Some(c.fd.as_str()), Some(c.cv.as_str()), c.cv_d.as_deref()].into_iter().flatten()
        })
    }
}
