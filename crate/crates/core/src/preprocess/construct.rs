//! Pairs / random / full training-set constructions.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{MaskedSample, Strategy};
use crate::corpus::{DefendantSample, Role};
use crate::error::{invalid, Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Construction {
    /// Same-case (principal, accomplice) tuples from mixed-role cases.
    #[default]
    Pairs,
    /// Equal per-role counts drawn uniformly, sized to match `Pairs`.
    Random,
    /// Everything, majority role downsampled to the minority count.
    Full,
}

impl Construction {
    pub const ALL: [Construction; 3] = [Construction::Pairs, Construction::Random, Construction::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Construction::Pairs => "pairs",
            Construction::Random => "random",
            Construction::Full => "full",
        }
    }
}

impl fmt::Display for Construction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Construction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Construction::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown construction `{s}` (pairs, random, full)")))
    }
}

/// Anything carrying a case id and a ground-truth role.
pub trait RoleTagged {
    fn case_id(&self) -> &str;
    fn role(&self) -> Role;
}

impl RoleTagged for DefendantSample {
    fn case_id(&self) -> &str {
        &self.case_id
    }
    fn role(&self) -> Role {
        self.guilt
    }
}

impl RoleTagged for MaskedSample {
    fn case_id(&self) -> &str {
        &self.case_id
    }
    fn role(&self) -> Role {
        self.guilt
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet<T = MaskedSample> {
    /// For `Pairs`, consecutive (principal, accomplice) entries.
    pub samples: Vec<T>,
    /// `None` when every derived sample is kept as is.
    pub construction: Option<Construction>,
    pub class_counts: BTreeMap<Role, usize>,
}

impl<T: RoleTagged> SampleSet<T> {
    fn new(samples: Vec<T>, construction: Option<Construction>) -> Self {
        let mut class_counts = BTreeMap::from([(Role::Principal, 0), (Role::Accomplice, 0)]);
        for s in &samples {
            *class_counts.entry(s.role()).or_default() += 1;
        }
        SampleSet { samples, construction, class_counts }
    }

    pub fn unconstructed(samples: Vec<T>) -> Self {
        SampleSet::new(samples, None)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Consecutive 2-tuples; meaningful only for `Pairs`.
    pub fn pairs(&self) -> impl Iterator<Item = (&T, &T)> {
        self.samples.chunks_exact(2).map(|c| (&c[0], &c[1]))
    }

    pub fn map<U: RoleTagged>(self, f: impl FnMut(T) -> Result<U>) -> Result<SampleSet<U>> {
        let samples = self.samples.into_iter().map(f).collect::<Result<Vec<U>>>()?;
        Ok(SampleSet::new(samples, self.construction))
    }
}

fn by_role<T: RoleTagged>(idx: impl Iterator<Item = usize>, samples: &[T]) -> (Vec<usize>, Vec<usize>) {
    idx.partition(|&i| samples[i].role() == Role::Principal)
}

/// Same-case principal/accomplice matching: each minority-role sample in a
/// case gets a distinct, seeded-random majority-role partner. No sample is
/// used twice.
fn pair_indices<T: RoleTagged>(samples: &[T], seed: u64) -> Vec<(usize, usize)> {
    let mut cases: Vec<&str> = Vec::new();
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let e = members.entry(s.case_id()).or_default();
        if e.is_empty() {
            cases.push(s.case_id());
        }
        e.push(i);
    }
    let mut rng = seed::rng(seed::derive(seed, "pairs", 0));
    let mut out = Vec::new();
    for case in cases {
        let (mut p, mut a) = by_role(members[case].iter().copied(), samples);
        if p.is_empty() || a.is_empty() {
            continue;
        }
        if p.len() >= a.len() {
            p.shuffle(&mut rng);
        } else {
            a.shuffle(&mut rng);
        }
        out.extend(p.into_iter().zip(a));
    }
    out
}

fn draw(mut pool: Vec<usize>, n: usize, rng: &mut seed::Rng) -> Vec<usize> {
    pool.shuffle(rng);
    pool.truncate(n);
    pool
}

fn take<T: Clone>(samples: &[T], mut idx: Vec<usize>) -> Vec<T> {
    idx.sort_unstable();
    idx.into_iter().map(|i| samples[i].clone()).collect()
}

/// Downsamples the majority role (seeded, uniform) to the minority count.
/// Retained samples keep their input order.
pub fn balance_classes<T: RoleTagged + Clone>(samples: &[T], seed: u64) -> Result<SampleSet<T>> {
    let (p, a) = by_role(0..samples.len(), samples);
    if p.is_empty() || a.is_empty() {
        return Err(Error::Validation("balancing needs both principal and accomplice samples".into()));
    }
    let n = p.len().min(a.len());
    let mut rng = seed::rng(seed::derive(seed, "balance", 0));
    let keep: Vec<usize> = if p.len() > n {
        draw(p, n, &mut rng).into_iter().chain(a).collect()
    } else {
        draw(a, n, &mut rng).into_iter().chain(p).collect()
    };
    Ok(SampleSet::new(take(samples, keep), Some(Construction::Full)))
}

pub fn build_pairs_dataset<T: RoleTagged + Clone>(
    samples: &[T],
    mode: Construction,
    seed: u64,
) -> Result<SampleSet<T>> {
    let pairs = pair_indices(samples, seed);
    match mode {
        Construction::Full => balance_classes(samples, seed),
        _ if pairs.is_empty() => Err(Error::Validation(format!(
            "{mode} construction needs at least one case with both principal and accomplice defendants"
        ))),
        Construction::Pairs => {
            let flat = pairs.into_iter().flat_map(|(p, a)| [samples[p].clone(), samples[a].clone()]).collect();
            Ok(SampleSet::new(flat, Some(Construction::Pairs)))
        }
        Construction::Random => {
            let n = pairs.len();
            let (p, a) = by_role(0..samples.len(), samples);
            let mut rng = seed::rng(seed::derive(seed, "random", 0));
            let keep = draw(p, n, &mut rng).into_iter().chain(draw(a, n, &mut rng)).collect();
            Ok(SampleSet::new(take(samples, keep), Some(Construction::Random)))
        }
    }
}

/// First line of a serialized sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSetHeader {
    #[serde(rename = "@construction")]
    pub construction: Option<Construction>,
    #[serde(rename = "@strategy")]
    pub strategy: Strategy,
    #[serde(rename = "@seed")]
    pub seed: u64,
    /// Always false: a sample never joins two pairs.
    #[serde(rename = "@pair_reuse")]
    pub pair_reuse: bool,
    #[serde(rename = "@count")]
    pub count: usize,
}

/// Header line followed by one JSON record per sample.
pub fn write_sample_set<W: Write>(set: &SampleSet, strategy: Strategy, seed: u64, mut w: W) -> Result<()> {
    let header =
        SampleSetHeader { construction: set.construction, strategy, seed, pair_reuse: false, count: set.len() };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in &set.samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sample_set<R: BufRead>(r: R) -> Result<(SampleSetHeader, SampleSet)> {
    let mut lines = r.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| Error::Parse { line: 1, message: "empty sample set".into() })?;
    let header: SampleSetHeader =
        serde_json::from_str(&first?).map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    let mut samples = Vec::with_capacity(header.count);
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(
            serde_json::from_str::<MaskedSample>(&line)
                .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?,
        );
    }
    if samples.len() != header.count {
        return Err(Error::Validation(format!("header declares {} samples, found {}", header.count, samples.len())));
    }
    let construction = header.construction;
    Ok((header, SampleSet::new(samples, construction)))
}
