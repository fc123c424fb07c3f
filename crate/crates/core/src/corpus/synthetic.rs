//! Seeded generator for multidefendant intentional-injury cases.
//!
//! Fact descriptions narrate role-dependent actions: principals get
//! initiating or instrument verbs, accomplices get assisting verbs. A case
//! either narrates each defendant in a sentence of their own or joins two
//! or three defendants' actions in one sentence, which is what separates
//! the split strategy from oriented masking. Court views restate roles in
//! exactly one sentence and list mitigating circumstances per defendant.
//! Prison terms come from a deterministic [`SentencingRule`].

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{CaseCorpus, DefendantRecord, JudicialCase, Provenance, Role, DEFAULT_PRISON_MAX};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

/// Word lists and sentence templates. `{victim}` and `{instrument}` are
/// substituted in action templates, `{name}` and `{victim}` in dispute and
/// mitigation templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub names: Vec<String>,
    pub victims: Vec<String>,
    pub places: Vec<String>,
    pub instruments: Vec<String>,
    pub principal_actions: Vec<String>,
    pub accomplice_actions: Vec<String>,
    pub disputes: Vec<String>,
    /// One list of outcome phrases per severity tier, mildest first.
    pub outcomes: Vec<Vec<String>>,
    /// One template per mitigating circumstance.
    pub mitigations: Vec<String>,
    pub fillers: Vec<String>,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon {
            names: strings(&[
                "Zhang", "Wang", "Zhao", "Chen", "Yang", "Huang", "Zhou", "Deng", "Feng", "Tang",
                "Song", "Xiao", "Peng", "Jiang", "Liang", "Shen", "Qian", "Kong", "Meng", "Tian",
                "Dong", "Yuan", "Cao", "Pan", "Xie", "Jin", "Wei", "Fang", "Duan", "Lei", "Hou",
                "Shao", "Mao", "Qin", "Gu", "Kang", "Niu", "Bai", "Cui", "Ren", "Zeng", "Xue",
            ]),
            victims: strings(&["the victim", "a passerby", "the shop owner", "a neighbor"]),
            places: strings(&["a restaurant", "a karaoke bar", "the night market", "a construction site", "a parking lot"]),
            instruments: strings(&["knife", "machete", "steel pipe", "brick", "wooden club"]),
            principal_actions: strings(&[
                "stabbed {victim} with a {instrument}",
                "struck {victim} on the head with a {instrument}",
                "slashed {victim} with a {instrument}",
                "organized the attack and ordered the others to strike",
                "summoned the others to retaliate against {victim}",
                "attacked {victim} first with a {instrument}",
            ]),
            accomplice_actions: strings(&[
                "held {victim} down",
                "kept watch at the entrance",
                "blocked the exit",
                "drove the others to the scene",
                "pushed {victim} once",
                "followed the others to the scene",
            ]),
            disputes: strings(&[
                "{name} quarreled with {victim} over a debt.",
                "{name} had an argument with {victim} earlier that day.",
                "{victim} insulted {name} during dinner.",
            ]),
            outcomes: vec![
                strings(&["minor bruises", "slight abrasions"]),
                strings(&["fractures", "broken ribs"]),
                strings(&["permanent disfigurement", "severe paralysis"]),
                strings(&["death", "fatal bleeding"]),
            ],
            mitigations: strings(&[
                "{name} surrendered voluntarily.",
                "{name} truthfully confessed.",
                "{name} compensated {victim} and obtained forgiveness.",
            ]),
            fillers: strings(&[
                "Witnesses called the police.",
                "The police arrived soon after.",
                "The defendants fled the scene.",
            ]),
        }
    }
}

impl Lexicon {
    fn validate(&self) -> Result<()> {
        let lists: [(&str, &Vec<String>); 9] = [
            ("names", &self.names),
            ("victims", &self.victims),
            ("places", &self.places),
            ("instruments", &self.instruments),
            ("principal_actions", &self.principal_actions),
            ("accomplice_actions", &self.accomplice_actions),
            ("disputes", &self.disputes),
            ("mitigations", &self.mitigations),
            ("fillers", &self.fillers),
        ];
        for (key, list) in lists {
            if list.is_empty() {
                return Err(Error::Validation(format!("lexicon `{key}` is empty")));
            }
        }
        if self.outcomes.is_empty() || self.outcomes.iter().any(Vec::is_empty) {
            return Err(Error::Validation("lexicon `outcomes` needs a nonempty list per tier".into()));
        }
        let others = lists[1..]
            .iter()
            .flat_map(|(_, l)| l.iter())
            .chain(self.outcomes.iter().flatten());
        let others: Vec<&String> = others.collect();
        for name in &self.names {
            if let Some(o) = self.names.iter().find(|o| *o != name && o.contains(name.as_str())) {
                return Err(Error::Validation(format!("name `{name}` is contained in name `{o}`")));
            }
            if let Some(o) = others.iter().find(|o| o.contains(name.as_str())) {
                return Err(Error::Validation(format!("name `{name}` occurs inside lexicon entry `{o}`")));
            }
        }
        Ok(())
    }
}

/// `months = round(base[tier] · role_factor · (1 − step · mitigations))`,
/// with role factor 1 for principals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentencingRule {
    pub base_months: Vec<u32>,
    pub accomplice_factor: f64,
    pub mitigation_step: f64,
}

impl Default for SentencingRule {
    fn default() -> Self {
        SentencingRule { base_months: vec![10, 36, 84, 150], accomplice_factor: 0.6, mitigation_step: 0.1 }
    }
}

impl SentencingRule {
    pub fn months(&self, tier: usize, role: Role, mitigations: usize) -> u32 {
        let base = f64::from(self.base_months[tier]);
        let role_factor = match role {
            Role::Principal => 1.0,
            Role::Accomplice => self.accomplice_factor,
        };
        let discount = (1.0 - self.mitigation_step * mitigations as f64).max(0.0);
        (base * role_factor * discount).round() as u32
    }

    fn validate(&self, n_mitigations: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.accomplice_factor) {
            return Err(Error::Validation("accomplice_factor must lie in [0, 1]".into()));
        }
        if !(self.mitigation_step >= 0.0 && self.mitigation_step * n_mitigations as f64 <= 1.0) {
            return Err(Error::Validation("mitigation_step too large for the mitigation count".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_cases: usize,
    /// Relative weights of 1, 2, ... defendants per case (at most 20 entries).
    pub defendant_weights: Vec<f64>,
    /// Probability that a case mixes principals and accomplices.
    pub role_mix_fraction: f64,
    pub seed: u64,
    /// Probability that a case narrates each defendant in a separate sentence.
    pub solo_narration: f64,
    /// Per-defendant probability of each mitigating circumstance.
    pub mitigation_prob: f64,
    /// Probability that a mixed-role case lists its principals first, as
    /// judgments usually order defendants by culpability.
    pub culpability_order: f64,
    pub prison_max: u32,
    pub vocabulary: Lexicon,
    pub sentencing_rule: SentencingRule,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        // 1 defendant 38.8%, 2-5 defendants 58.3%, long tail to 20.
        let mut weights = vec![0.388, 0.24, 0.16, 0.11, 0.073];
        weights.extend(std::iter::repeat_n(0.029 / 15.0, 15));
        SyntheticSpec {
            n_cases: 500,
            defendant_weights: weights,
            role_mix_fraction: 0.295,
            seed: 0,
            solo_narration: 0.5,
            mitigation_prob: 0.3,
            culpability_order: 0.9,
            prison_max: DEFAULT_PRISON_MAX,
            vocabulary: Lexicon::default(),
            sentencing_rule: SentencingRule::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_cases == 0 {
            return Err(Error::Validation("n_cases must be positive".into()));
        }
        let w = &self.defendant_weights;
        if w.is_empty() || w.len() > 20 || w.iter().any(|x| !(*x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Validation("defendant_weights must hold 1..=20 nonnegative weights with positive sum".into()));
        }
        if !(0.0..=1.0).contains(&self.role_mix_fraction) || !(0.0..=1.0).contains(&self.solo_narration) || !(0.0..=1.0).contains(&self.mitigation_prob)
            || !(0.0..=1.0).contains(&self.culpability_order)
        {
            return Err(Error::Validation("probabilities must lie in [0, 1]".into()));
        }
        if self.role_mix_fraction > 0.0 && w.iter().skip(1).all(|&x| x == 0.0) {
            return Err(Error::Validation("mixed-role cases need weight on two or more defendants".into()));
        }
        if self.role_mix_fraction < 1.0 && w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Validation("uniform-role cases need some defendant weight".into()));
        }
        self.vocabulary.validate()?;
        if self.vocabulary.names.len() < w.len() {
            return Err(Error::Validation(format!(
                "{} names cannot fill cases of up to {} defendants",
                self.vocabulary.names.len(),
                w.len()
            )));
        }
        if self.vocabulary.outcomes.len() != self.sentencing_rule.base_months.len() {
            return Err(Error::Validation("one outcome tier per sentencing base term is required".into()));
        }
        self.sentencing_rule.validate(self.vocabulary.mitigations.len())?;
        let worst = self.sentencing_rule.base_months.iter().max().copied().unwrap_or(0);
        if worst > self.prison_max {
            return Err(Error::Validation(format!("sentencing rule reaches {worst} months, above prison_max {}", self.prison_max)));
        }
        Ok(())
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn join_names(names: &[&str]) -> String {
    match names {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {}", init.join(", "), last),
    }
}

fn pick<'a>(list: &'a [String], rng: &mut Rng) -> &'a str {
    list.choose(rng).map(String::as_str).unwrap_or("")
}

struct CaseDraft<'a> {
    names: Vec<&'a str>,
    roles: Vec<Role>,
    tier: usize,
    victim: &'a str,
}

fn action(template: &str, victim: &str, lex: &Lexicon, rng: &mut Rng) -> String {
    template.replace("{victim}", victim).replace("{instrument}", pick(&lex.instruments, rng))
}

fn fact_description(draft: &CaseDraft<'_>, spec: &SyntheticSpec, rng: &mut Rng) -> String {
    let lex = &spec.vocabulary;
    let mut out: Vec<String> = Vec::new();
    out.push(format!("{} went to {}.", join_names(&draft.names), pick(&lex.places, rng)));
    let who = draft.names[rng.random_range(0..draft.names.len())];
    out.push(capitalize(&pick(&lex.disputes, rng).replace("{name}", who).replace("{victim}", draft.victim)));

    let acts: Vec<String> = draft
        .roles
        .iter()
        .map(|role| {
            let list = match role {
                Role::Principal => &lex.principal_actions,
                Role::Accomplice => &lex.accomplice_actions,
            };
            action(pick(list, rng), draft.victim, lex, rng)
        })
        .collect();
    let mut order: Vec<usize> = (0..draft.names.len()).collect();
    order.shuffle(rng);
    if draft.names.len() == 1 || rng.random_bool(spec.solo_narration) {
        for &i in &order {
            out.push(format!("{} {}.", draft.names[i], acts[i]));
        }
    } else {
        let mut groups: Vec<&[usize]> = order.chunks(2).collect();
        if groups.len() > 1 && groups.last().is_some_and(|g| g.len() == 1) {
            let n = order.len();
            groups.truncate(groups.len() - 2);
            groups.push(&order[n - 3..]);
        }
        for g in groups {
            let parts: Vec<String> = g.iter().map(|&i| format!("{} {}", draft.names[i], acts[i])).collect();
            out.push(match parts.as_slice() {
                [a] => format!("{a}."),
                [a, b] => format!("{a} while {b}."),
                [a, b, c] => format!("{a}, {b} and {c}."),
                _ => unreachable!("groups hold one to three defendants"),
            });
        }
    }
    out.push(format!("{} suffered {}.", capitalize(draft.victim), pick(&lex.outcomes[draft.tier], rng)));
    if rng.random_bool(0.5) {
        out.push(pick(&lex.fillers, rng).to_string());
    }
    out.join(" ")
}

fn role_sentence(draft: &CaseDraft<'_>) -> String {
    let of = |role: Role| -> Vec<&str> {
        draft.names.iter().zip(&draft.roles).filter(|(_, r)| **r == role).map(|(n, _)| *n).collect()
    };
    let (principals, accomplices) = (of(Role::Principal), of(Role::Accomplice));
    let verb = |n: usize| if n == 1 { "played" } else { "all played" };
    match (principals.is_empty(), accomplices.is_empty()) {
        (false, false) => format!(
            "In the joint crime, {} played a principal role and {} played an accomplice role.",
            join_names(&principals),
            join_names(&accomplices)
        ),
        (false, true) => format!("In the joint crime, {} {} a principal role.", join_names(&principals), verb(principals.len())),
        _ => format!("In the joint crime, {} {} an accomplice role.", join_names(&accomplices), verb(accomplices.len())),
    }
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<CaseCorpus> {
    spec.validate()?;
    let lex = &spec.vocabulary;
    let mut rng = seed::rng(spec.seed);
    let all = WeightedIndex::new(&spec.defendant_weights)
        .map_err(|e| Error::Validation(format!("defendant_weights: {e}")))?;
    let multi = if spec.defendant_weights.iter().skip(1).any(|&w| w > 0.0) {
        let mut w = spec.defendant_weights.clone();
        w[0] = 0.0;
        Some(WeightedIndex::new(&w).map_err(|e| Error::Validation(format!("defendant_weights: {e}")))?)
    } else {
        None
    };

    let mut cases = Vec::with_capacity(spec.n_cases);
    for idx in 0..spec.n_cases {
        let mixed = rng.random_bool(spec.role_mix_fraction);
        let n = match (&multi, mixed) {
            (Some(m), true) => m.sample(&mut rng) + 1,
            _ => all.sample(&mut rng) + 1,
        };
        let names: Vec<&str> = lex.names.choose_multiple(&mut rng, n).map(String::as_str).collect();
        let mut roles = if mixed && n >= 2 {
            let k = rng.random_range(1..n);
            let mut r = vec![Role::Principal; k];
            r.resize(n, Role::Accomplice);
            r.shuffle(&mut rng);
            if rng.random_bool(spec.culpability_order) {
                r.sort_by_key(|role| *role != Role::Principal);
            }
            r
        } else if rng.random_bool(0.5) {
            vec![Role::Principal; n]
        } else {
            vec![Role::Accomplice; n]
        };
        if !mixed && n >= 2 && roles.iter().any(|r| *r != roles[0]) {
            roles = vec![roles[0]; n];
        }
        let draft = CaseDraft {
            names,
            roles,
            tier: rng.random_range(0..lex.outcomes.len()),
            victim: pick(&lex.victims, &mut rng),
        };

        let fd = fact_description(&draft, spec, &mut rng);
        let mut cv = vec![format!(
            "The court holds that {} intentionally injured {}, causing {}.",
            join_names(&draft.names),
            draft.victim,
            pick(&lex.outcomes[draft.tier], &mut rng)
        )];
        cv.push(role_sentence(&draft));
        let mut defendants = Vec::with_capacity(n);
        for (name, &role) in draft.names.iter().zip(&draft.roles) {
            let mut flags = 0;
            for template in &lex.mitigations {
                if rng.random_bool(spec.mitigation_prob) {
                    flags += 1;
                    cv.push(capitalize(&template.replace("{name}", name).replace("{victim}", draft.victim)));
                }
            }
            let months = spec.sentencing_rule.months(draft.tier, role, flags);
            let probation = (months <= 24 && rng.random_bool(0.5)).then_some(months + 12);
            defendants.push(DefendantRecord {
                name: name.to_string(),
                prison_months: months,
                probation_months: probation,
                guilt: role,
            });
        }
        cv.push("The sentences are determined according to law.".to_string());

        cases.push(JudicialCase {
            id: format!("case-{idx:05}"),
            defendants,
            fd,
            cv: cv.join(" "),
            cv_d: None,
        });
    }
    CaseCorpus::new(cases, spec.prison_max, Provenance::Synthetic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{prune_text, text::sentences, write_corpus, DEFAULT_ROLE_KEYWORDS};

    fn small(n: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec { n_cases: n, seed, ..SyntheticSpec::default() }
    }

    #[test]
    fn two_defendant_mixed_case() {
        let spec = SyntheticSpec {
            n_cases: 1,
            defendant_weights: vec![0.0, 1.0],
            role_mix_fraction: 1.0,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic_corpus(&spec).unwrap();
        let case = &c.cases[0];
        assert_eq!(case.defendants.len(), 2);
        assert!(case.is_mixed_role());
        let p = case.defendants.iter().find(|d| d.guilt == Role::Principal).unwrap();
        let a = case.defendants.iter().find(|d| d.guilt == Role::Accomplice).unwrap();
        assert!(p.prison_months >= a.prison_months);
    }

    #[test]
    fn deterministic_bytes() {
        let write = |c: &CaseCorpus| {
            let mut buf = Vec::new();
            write_corpus(c, &mut buf).unwrap();
            buf
        };
        let a = generate_synthetic_corpus(&small(50, 9)).unwrap();
        let b = generate_synthetic_corpus(&small(50, 9)).unwrap();
        let c = generate_synthetic_corpus(&small(50, 10)).unwrap();
        assert_eq!(write(&a), write(&b));
        assert_ne!(write(&a), write(&c));
        assert_eq!(a.provenance, Provenance::Synthetic);
    }

    #[test]
    fn mixed_fraction_tracks_spec() {
        let c = generate_synthetic_corpus(&small(500, 3)).unwrap();
        let mixed = c.cases.iter().filter(|c| c.is_mixed_role()).count() as f64 / 500.0;
        assert!((mixed - 0.295).abs() <= 0.05, "mixed fraction {mixed}");
    }

    #[test]
    fn exactly_one_role_sentence_per_court_view() {
        let c = generate_synthetic_corpus(&small(100, 4)).unwrap();
        for case in &c.cases {
            let before = sentences(&case.cv);
            let with_role = before.iter().filter(|s| DEFAULT_ROLE_KEYWORDS.iter().any(|k| s.contains(k))).count();
            assert_eq!(with_role, 1, "{}", case.cv);
            let (pruned, _) = prune_text(&case.cv, &DEFAULT_ROLE_KEYWORDS);
            assert_eq!(sentences(&pruned).len() + 1, before.len());
        }
    }

    #[test]
    fn sentence_gap_within_mixed_cases() {
        // every case shares one severity tier, so the gap holds case-wide
        let c = generate_synthetic_corpus(&SyntheticSpec { role_mix_fraction: 1.0, ..small(300, 5) }).unwrap();
        for case in &c.cases {
            let min_p = case.defendants.iter().filter(|d| d.guilt == Role::Principal).map(|d| d.prison_months).min();
            let max_a = case.defendants.iter().filter(|d| d.guilt == Role::Accomplice).map(|d| d.prison_months).max();
            if let (Some(p), Some(a)) = (min_p, max_a) {
                assert!(p >= a, "case {}: {p} < {a}", case.id);
            }
        }
    }

    #[test]
    fn principal_never_below_accomplice() {
        let rule = SentencingRule::default();
        for tier in 0..4 {
            for flags in 0..=3 {
                assert!(rule.months(tier, Role::Principal, flags) >= rule.months(tier, Role::Accomplice, flags));
            }
        }
    }

    #[test]
    fn missing_lexicon_is_an_error() {
        let mut spec = small(5, 0);
        spec.vocabulary.accomplice_actions.clear();
        let err = generate_synthetic_corpus(&spec).unwrap_err();
        assert!(err.to_string().contains("accomplice_actions"));

        let mut spec = small(5, 0);
        spec.vocabulary.names.push("wood".into());
        assert!(generate_synthetic_corpus(&spec).is_err());
    }
}
