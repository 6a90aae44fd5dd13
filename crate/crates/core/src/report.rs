//! Composition and mixture-audit reports rendered as JSON, CSV and plain
//! text tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Language, Source};
use crate::error::Result;
use crate::mixture::AuditRecord;
use crate::planner::{read_shard, ShardRecord};
use crate::util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionRow {
    pub stage: u8,
    pub language: Language,
    pub source: Source,
    pub documents: u64,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRow {
    pub source: Source,
    pub tokens: u64,
    pub share: f64,
    /// Reference share of the total, in percent.
    pub reference_percent: f64,
    /// Reference share applied to the configured total budget.
    pub reference_tokens: f64,
    pub max_document_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub total_budget: u64,
    pub total_tokens: u64,
    pub rows: Vec<CompositionRow>,
    pub by_source: Vec<SourceRow>,
}

/// Aggregates realized tokens per (stage, language, source) and per source.
pub fn composition<'a, I>(records: I, total_budget: u64) -> Composition
where
    I: IntoIterator<Item = &'a ShardRecord>,
{
    let mut cells: BTreeMap<(u8, Language, Source), (u64, u64)> = BTreeMap::new();
    let mut sources: BTreeMap<Source, (u64, u64)> = BTreeMap::new();
    for r in records {
        let c = cells.entry((r.stage, r.language, r.source)).or_default();
        c.0 += 1;
        c.1 += r.token_count;
        let s = sources.entry(r.source).or_default();
        s.0 += r.token_count;
        s.1 = s.1.max(r.token_count);
    }
    let total_tokens: u64 = sources.values().map(|v| v.0).sum();
    let by_source = Source::ALL
        .into_iter()
        .map(|source| {
            let (tokens, max_doc) = sources.get(&source).copied().unwrap_or_default();
            SourceRow {
                source,
                tokens,
                share: if total_tokens == 0 { 0.0 } else { tokens as f64 / total_tokens as f64 },
                reference_percent: source.reference_volume(),
                reference_tokens: total_budget as f64 * source.reference_volume() / 100.0,
                max_document_tokens: max_doc,
            }
        })
        .collect();
    Composition {
        total_budget,
        total_tokens,
        rows: cells
            .into_iter()
            .map(|((stage, language, source), (documents, tokens))| CompositionRow {
                stage,
                language,
                source,
                documents,
                tokens,
            })
            .collect(),
        by_source,
    }
}

/// Reads and verifies every `*.jsonl` shard in `dir` in file-name order.
pub fn load_shard_records(dir: &Path) -> Result<Vec<ShardRecord>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| crate::Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_shard(&p)?.records);
    }
    Ok(out)
}

pub fn composition_csv(c: &Composition) -> String {
    let mut s = String::from("section,stage,language,source,documents,tokens,share,reference_percent,reference_tokens\n");
    for r in &c.rows {
        let _ = writeln!(s, "cell,{},{},{},{},{},,,", r.stage, r.language, r.source, r.documents, r.tokens);
    }
    for r in &c.by_source {
        let _ = writeln!(
            s,
            "source,,,{},,{},{:.6},{:.2},{:.1}",
            r.source, r.tokens, r.share, r.reference_percent, r.reference_tokens
        );
    }
    s
}

pub fn composition_text(c: &Composition) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:>12} {:>9} {:>11} {:>14}", "source", "tokens", "share %", "reference %", "reference tok");
    for r in &c.by_source {
        let _ = writeln!(
            s,
            "{:<16} {:>12} {:>9.2} {:>11.2} {:>14.1}",
            r.source.as_str(),
            r.tokens,
            r.share * 100.0,
            r.reference_percent,
            r.reference_tokens
        );
    }
    let _ = writeln!(s, "{:<16} {:>12}", "total", c.total_tokens);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<6} {:<8} {:<16} {:>9} {:>12}", "stage", "language", "source", "docs", "tokens");
    for r in &c.rows {
        let _ = writeln!(
            s,
            "{:<6} {:<8} {:<16} {:>9} {:>12}",
            r.stage,
            r.language.as_str(),
            r.source.as_str(),
            r.documents,
            r.tokens
        );
    }
    s
}

pub fn mixture_csv(topics: &[String], audit: &[AuditRecord]) -> String {
    let mut s = String::from("round,topic,delta_p,delta_norm,f,r_prev,r_new\n");
    for a in audit {
        for (i, t) in topics.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                a.round,
                csv_field(t),
                a.delta_p[i],
                a.delta_norm[i],
                a.f[i],
                a.r_prev[i],
                a.r_new[i]
            );
        }
    }
    s
}

/// One row per topic, one column per round, cells holding the proportion
/// in force after that round.
pub fn mixture_text(topics: &[String], audit: &[AuditRecord]) -> String {
    let width = topics.iter().map(|t| t.chars().count()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}", "topic");
    if let Some(first) = audit.first() {
        let _ = write!(s, " {:>8}", format!("r{}", first.round - 1));
    }
    for a in audit {
        let _ = write!(s, " {:>8}", format!("r{}", a.round));
    }
    s.push('\n');
    for (i, t) in topics.iter().enumerate() {
        let _ = write!(s, "{t:<width$}");
        if let Some(first) = audit.first() {
            let _ = write!(s, " {:>8.4}", first.r_prev[i]);
        }
        for a in audit {
            let _ = write!(s, " {:>8.4}", a.r_new[i]);
        }
        s.push('\n');
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Audit log on disk: a header line naming the topics, then one record per
/// round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AuditLine {
    Header { language: Language, topics: Vec<String> },
    Step(AuditRecord),
}

pub fn write_audit(path: &Path, language: Language, topics: &[String], audit: &[AuditRecord]) -> Result<()> {
    let mut lines = vec![AuditLine::Header {
        language,
        topics: topics.to_vec(),
    }];
    lines.extend(audit.iter().cloned().map(AuditLine::Step));
    util::write_jsonl(path, &lines)
}

pub fn read_audit(path: &Path) -> Result<(Language, Vec<String>, Vec<AuditRecord>)> {
    let lines: Vec<AuditLine> = util::read_jsonl(path)?;
    let mut header = None;
    let mut steps = Vec::new();
    for l in lines {
        match l {
            AuditLine::Header { language, topics } => header = Some((language, topics)),
            AuditLine::Step(a) => steps.push(a),
        }
    }
    let (language, topics) =
        header.ok_or_else(|| crate::Error::invalid(format!("{}: audit log has no header line", path.display())))?;
    Ok((language, topics, steps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(stage: u8, source: Source, tokens: u64) -> ShardRecord {
        ShardRecord {
            id: "x".into(),
            text: "t".into(),
            language: Language::En,
            source,
            topic: None,
            stage,
            round: 1,
            position: 0,
            token_count: tokens,
        }
    }

    #[test]
    fn composition_sums() {
        let recs = [rec(1, Source::Books, 10), rec(1, Source::Books, 5), rec(2, Source::Code, 5)];
        let c = composition(&recs, 100);
        assert_eq!(c.total_tokens, 20);
        let books = c.by_source.iter().find(|r| r.source == Source::Books).unwrap();
        assert_eq!(books.tokens, 15);
        assert_eq!(books.max_document_tokens, 10);
        assert!((books.reference_tokens - 15.74).abs() < 1e-9);
        assert_eq!(c.rows.len(), 2);
        assert!(composition_csv(&c).lines().count() > 3);
        assert!(composition_text(&c).contains("books"));
    }

    #[test]
    fn audit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        let a = AuditRecord {
            round: 1,
            delta_p: vec![2.0, -2.0],
            delta_norm: vec![1.0, -1.0],
            f: vec![1.5, 0.5],
            r_prev: vec![0.5, 0.5],
            r_new: vec![0.75, 0.25],
        };
        let topics = vec!["a".to_string(), "b, c".to_string()];
        write_audit(&p, Language::En, &topics, std::slice::from_ref(&a)).unwrap();
        let (lang, t, steps) = read_audit(&p).unwrap();
        assert_eq!((lang, t.clone(), steps), (Language::En, topics.clone(), vec![a.clone()]));
        assert!(mixture_csv(&t, &[a.clone()]).contains("\"b, c\""));
        assert!(mixture_text(&t, &[a]).contains("0.7500"));
    }
}
