use serde::{Deserialize, Serialize};

use super::text::segments;
use super::{CaseCorpus, JudicialCase};
use crate::error::{Error, Result};

/// Role words removed by default: English and Chinese forms.
pub const DEFAULT_ROLE_KEYWORDS: [&str; 4] = ["principal", "accomplice", "主犯", "从犯"];

/// Removes every sentence containing any keyword (substring match).
/// Returns the pruned text and the number of sentences removed.
pub fn prune_text<S: AsRef<str>>(text: &str, keywords: &[S]) -> (String, usize) {
    let mut kept = String::with_capacity(text.len());
    let mut removed = 0;
    for seg in segments(text, &[]) {
        if keywords.iter().any(|k| seg.contains(k.as_ref())) {
            removed += 1;
        } else {
            kept.push_str(seg);
        }
    }
    (kept.trim_end().to_string(), removed)
}

/// Returns a copy of `case` with `cv_d` filled in. The original CV is kept.
pub fn prune_court_view<S: AsRef<str>>(case: &JudicialCase, role_keywords: &[S]) -> Result<JudicialCase> {
    if case.cv.trim().is_empty() {
        return Err(Error::Validation(format!("case {}: court view is empty", case.id)));
    }
    if role_keywords.is_empty() || role_keywords.iter().any(|k| k.as_ref().is_empty()) {
        return Err(Error::InvalidArgument("role keywords must be nonempty".into()));
    }
    let (cv_d, _) = prune_text(&case.cv, role_keywords);
    Ok(JudicialCase { cv_d: Some(cv_d), ..case.clone() })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub cases: usize,
    pub sentences_removed: usize,
    /// Cases whose pruned court view came out empty.
    pub emptied: Vec<String>,
}

pub fn prune_corpus<S: AsRef<str>>(corpus: &CaseCorpus, role_keywords: &[S]) -> Result<(CaseCorpus, PruneReport)> {
    let mut report = PruneReport::default();
    let mut cases = Vec::with_capacity(corpus.cases.len());
    for case in &corpus.cases {
        let pruned = prune_court_view(case, role_keywords)?;
        report.cases += 1;
        report.sentences_removed += prune_text(&case.cv, role_keywords).1;
        if pruned.cv_d.as_deref().is_some_and(str::is_empty) {
            report.emptied.push(case.id.clone());
        }
        cases.push(pruned);
    }
    Ok((CaseCorpus { cases, ..corpus.clone() }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::case;
    use crate::corpus::Role;

    #[test]
    fn removes_keyword_sentence() {
        let (t, n) = prune_text("A led. A is the principal. B helped.", &["principal"]);
        assert_eq!(t, "A led. B helped.");
        assert_eq!(n, 1);
    }

    #[test]
    fn no_keyword_is_noop() {
        let cv = "A led. B helped.";
        assert_eq!(prune_text(cv, &DEFAULT_ROLE_KEYWORDS).0, cv);
    }

    #[test]
    fn substring_match_in_unsegmented_script() {
        let (t, _) = prune_text("甲系主犯。乙赔偿了损失。", &DEFAULT_ROLE_KEYWORDS);
        assert_eq!(t, "乙赔偿了损失。");
    }

    #[test]
    fn all_removed_yields_empty_and_is_flagged() {
        let mut c = case("c1", &[("Zhang", Role::Principal, 30)]);
        c.cv = "Zhang is a principal.".into();
        let corpus = CaseCorpus::new(vec![c], 180, crate::corpus::Provenance::Loaded).unwrap();
        let (pruned, report) = prune_corpus(&corpus, &DEFAULT_ROLE_KEYWORDS).unwrap();
        assert_eq!(pruned.cases[0].cv_d.as_deref(), Some(""));
        assert_eq!(report.emptied, vec!["c1".to_string()]);
        assert_eq!(pruned.cases[0].cv, "Zhang is a principal.");
    }

    #[test]
    fn errors() {
        let mut c = case("c1", &[("Zhang", Role::Principal, 30)]);
        assert!(prune_court_view(&c, &[] as &[&str]).is_err());
        c.cv = "  ".into();
        assert!(prune_court_view(&c, &["principal"]).is_err());
    }

    #[test]
    fn idempotent() {
        let cv = "X hit. X and Y are principals! Z paid. Z is an accomplice.";
        let (once, _) = prune_text(cv, &DEFAULT_ROLE_KEYWORDS);
        let (twice, removed) = prune_text(&once, &DEFAULT_ROLE_KEYWORDS);
        assert_eq!(once, twice);
        assert_eq!(removed, 0);
    }
}
