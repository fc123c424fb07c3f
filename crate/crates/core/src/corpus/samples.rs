use serde::{Deserialize, Serialize};

use super::{CaseCorpus, Role};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Role from the fact description.
    GuiltInference,
    /// Role from the full court view.
    GuiltIdentification,
    /// Prison months from the fact description and pruned court view.
    Prison,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Role(Role),
    Months(f64),
}

impl Label {
    pub fn role(&self) -> Option<Role> {
        match *self {
            Label::Role(r) => Some(r),
            Label::Months(_) => None,
        }
    }

    pub fn months(&self) -> Option<f64> {
        match *self {
            Label::Months(m) => Some(m),
            Label::Role(_) => None,
        }
    }
}

/// One (case, defendant, task) unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefendantSample {
    pub case_id: String,
    pub defendant: String,
    pub task: Task,
    /// FD for guilt inference and prison, CV for guilt identification.
    pub text: String,
    /// Pruned court view; present only for the prison task.
    pub cv_d: Option<String>,
    pub label: Label,
    /// Ground-truth role, kept for every task (fusion and pairing need it).
    pub guilt: Role,
    pub prison_months: u32,
}

pub fn derive_samples(corpus: &CaseCorpus, task: Task) -> Result<Vec<DefendantSample>> {
    let mut out = Vec::with_capacity(corpus.n_defendants());
    for case in &corpus.cases {
        let (text, cv_d) = match task {
            Task::GuiltInference => (&case.fd, None),
            Task::GuiltIdentification => (&case.cv, None),
            Task::Prison => {
                let cv_d = case.cv_d.as_ref().ok_or_else(|| {
                    Error::Validation(format!(
                        "case {} has no pruned court view; prune the corpus before deriving prison samples",
                        case.id
                    ))
                })?;
                (&case.fd, Some(cv_d.clone()))
            }
        };
        for d in &case.defendants {
            let label = match task {
                Task::Prison => Label::Months(f64::from(d.prison_months)),
                _ => Label::Role(d.guilt),
            };
            out.push(DefendantSample {
                case_id: case.id.clone(),
                defendant: d.name.clone(),
                task,
                text: text.clone(),
                cv_d: cv_d.clone(),
                label,
                guilt: d.guilt,
                prison_months: d.prison_months,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::case;
    use crate::corpus::{prune_corpus, Provenance, DEFAULT_ROLE_KEYWORDS};

    fn corpus() -> CaseCorpus {
        CaseCorpus::new(
            vec![case(
                "c1",
                &[("Zhang", Role::Principal, 30), ("Wang", Role::Accomplice, 12), ("Zhao", Role::Accomplice, 6)],
            )],
            180,
            Provenance::Loaded,
        )
        .unwrap()
    }

    #[test]
    fn one_sample_per_defendant() {
        let c = corpus();
        let s = derive_samples(&c, Task::GuiltInference).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|x| x.text == c.cases[0].fd));
        assert_eq!(s[1].label, Label::Role(Role::Accomplice));

        let s = derive_samples(&c, Task::GuiltIdentification).unwrap();
        assert!(s.iter().all(|x| x.text == c.cases[0].cv));
    }

    #[test]
    fn prison_requires_pruning() {
        let c = corpus();
        let err = derive_samples(&c, Task::Prison).unwrap_err();
        assert!(err.to_string().contains("prune"));
        let (pruned, _) = prune_corpus(&c, &DEFAULT_ROLE_KEYWORDS).unwrap();
        let s = derive_samples(&pruned, Task::Prison).unwrap();
        assert_eq!(s[0].label, Label::Months(30.0));
        assert_eq!(s[0].cv_d.as_deref(), Some("Zhang and Wang and Zhao are guilty."));
    }
}
