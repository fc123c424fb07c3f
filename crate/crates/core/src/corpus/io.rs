//! Line-delimited corpus records.
//!
//! One JSON object per line, one line per defendant, keyed exactly
//! `@id`, `@name`, `@FD`, `@CV`, `@prison`, `@probation`, `@guilt`.
//! Lines of the same case must be contiguous and repeat identical FD/CV.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CaseCorpus, DefendantRecord, JudicialCase, Provenance, Role, DEFAULT_PRISON_MAX};
use crate::error::{Error, Result};

#[derive(Serialize)]
struct RecordOut<'a> {
    #[serde(rename = "@id")]
    id: &'a str,
    #[serde(rename = "@name")]
    name: &'a str,
    #[serde(rename = "@FD")]
    fd: &'a str,
    #[serde(rename = "@CV")]
    cv: &'a str,
    #[serde(rename = "@prison")]
    prison: u32,
    #[serde(rename = "@probation")]
    probation: Option<u32>,
    #[serde(rename = "@guilt")]
    guilt: Role,
}

#[derive(Deserialize)]
struct RecordIn {
    #[serde(rename = "@id")]
    id: Option<String>,
    #[serde(rename = "@name")]
    name: Option<String>,
    #[serde(rename = "@FD")]
    fd: Option<String>,
    #[serde(rename = "@CV")]
    cv: Option<String>,
    #[serde(rename = "@prison")]
    prison: Option<u32>,
    #[serde(rename = "@probation", default)]
    probation: Option<u32>,
    #[serde(rename = "@guilt")]
    guilt: Option<String>,
}

fn required<T>(value: Option<T>, key: &'static str, line: usize) -> Result<T> {
    value.ok_or(Error::MissingKey { key, line })
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<CaseCorpus> {
    load_corpus_with(path, DEFAULT_PRISON_MAX)
}

pub fn load_corpus_with(path: impl AsRef<Path>, prison_max: u32) -> Result<CaseCorpus> {
    let file = File::open(path)?;
    read_corpus(BufReader::new(file), prison_max)
}

/// Streams records from `reader`, assembling one case at a time.
pub fn read_corpus<R: BufRead>(reader: R, prison_max: u32) -> Result<CaseCorpus> {
    let mut cases: Vec<JudicialCase> = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordIn = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let id = required(rec.id, "@id", line_no)?;
        let name = required(rec.name, "@name", line_no)?;
        let fd = required(rec.fd, "@FD", line_no)?;
        let cv = required(rec.cv, "@CV", line_no)?;
        let prison = required(rec.prison, "@prison", line_no)?;
        let guilt: Role = required(rec.guilt, "@guilt", line_no)?.parse().map_err(|e: Error| {
            Error::Parse { line: line_no, message: e.to_string() }
        })?;
        let defendant = DefendantRecord {
            name,
            prison_months: prison,
            probation_months: rec.probation,
            guilt,
        };
        match cases.last_mut() {
            Some(case) if case.id == id => {
                if case.fd != fd || case.cv != cv {
                    return Err(Error::Validation(format!(
                        "line {line_no}: case `{id}` repeats with different @FD/@CV"
                    )));
                }
                case.defendants.push(defendant);
            }
            _ => {
                if !seen_ids.insert(id.clone()) {
                    return Err(Error::Validation(format!(
                        "line {line_no}: duplicate case id `{id}` (case lines must be contiguous)"
                    )));
                }
                cases.push(JudicialCase { id, defendants: vec![defendant], fd, cv, cv_d: None });
            }
        }
    }
    CaseCorpus::new(cases, prison_max, Provenance::Loaded)
}

pub fn write_corpus<W: Write>(corpus: &CaseCorpus, mut writer: W) -> Result<()> {
    for case in &corpus.cases {
        for d in &case.defendants {
            let rec = RecordOut {
                id: &case.id,
                name: &d.name,
                fd: &case.fd,
                cv: &case.cv,
                prison: d.prison_months,
                probation: d.probation_months,
                guilt: d.guilt,
            };
            serde_json::to_writer(&mut writer, &rec)?;
            writer.write_all(b"\n")?;
        }
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::case;

    fn two_cases() -> CaseCorpus {
        CaseCorpus::new(
            vec![
                case("c1", &[("Zhang", Role::Principal, 30), ("Wang", Role::Accomplice, 12)]),
                case("c2", &[("Zhao", Role::Accomplice, 8)]),
            ],
            180,
            Provenance::Loaded,
        )
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let corpus = two_cases();
        let mut buf = Vec::new();
        write_corpus(&corpus, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with(r#"{"@id":"c1","@name":"Zhang","@FD":"#));
        let back = read_corpus(&buf[..], 180).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(back.provenance, Provenance::Loaded);
    }

    #[test]
    fn missing_guilt_names_key() {
        let line = r#"{"@id":"c1","@name":"Zhang","@FD":"Zhang hit.","@CV":"ok.","@prison":3}"#;
        let err = read_corpus(line.as_bytes(), 180).unwrap_err();
        assert!(matches!(err, Error::MissingKey { key: "@guilt", line: 1 }));
        assert!(err.to_string().contains("@guilt"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let mut buf = Vec::new();
        write_corpus(&two_cases(), &mut buf).unwrap();
        buf.extend_from_slice(b"{not json\n");
        match read_corpus(&buf[..], 180).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_contiguous_duplicate_id() {
        let mut buf = Vec::new();
        write_corpus(&two_cases(), &mut buf).unwrap();
        let first = String::from_utf8(buf.clone()).unwrap().lines().next().unwrap().to_string();
        buf.extend_from_slice(first.as_bytes());
        buf.push(b'\n');
        assert!(matches!(read_corpus(&buf[..], 180), Err(Error::Validation(m)) if m.contains("duplicate")));
    }

    #[test]
    fn prison_above_max_rejected() {
        let mut buf = Vec::new();
        write_corpus(&two_cases(), &mut buf).unwrap();
        assert!(read_corpus(&buf[..], 20).is_err());
    }
}
