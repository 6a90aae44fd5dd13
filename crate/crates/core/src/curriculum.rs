//! Difficulty (PPL) and discipline curricula.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clients::PplScorer;
use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::util;

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// random mixing
    RM,
    /// low to high PPL
    LH,
    /// high to low PPL
    HL,
    /// physics, then biology/chemistry
    PB,
    BP,
    PBP,
}

impl Strategy {
    pub fn is_ppl_based(self) -> bool {
        matches!(self, Strategy::LH | Strategy::HL)
    }

    /// Discipline-set sequence for the discipline strategies.
    pub fn discipline_sequence(self) -> Option<Vec<Vec<String>>> {
        let p = vec!["physics".to_string()];
        let b = vec!["biology".to_string(), "chemistry".to_string()];
        match self {
            Strategy::PB => Some(vec![p, b]),
            Strategy::BP => Some(vec![b, p]),
            Strategy::PBP => Some(vec![p.clone(), b, p]),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RM" => Ok(Strategy::RM),
            "LH" => Ok(Strategy::LH),
            "HL" => Ok(Strategy::HL),
            "PB" => Ok(Strategy::PB),
            "BP" => Ok(Strategy::BP),
            "PBP" => Ok(Strategy::PBP),
            other => Err(Error::invalid(format!("unknown curriculum strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_ppl: Option<f64>,
}

/// Ordered bins of document ids. The emitted sequence is the bins
/// concatenated in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    pub strategy: Strategy,
    pub seed: u64,
    pub bins: Vec<Vec<String>>,
    pub bin_stats: Vec<BinStat>,
}

impl CurriculumPlan {
    pub fn sequence(&self) -> impl Iterator<Item = &str> {
        self.bins.iter().flatten().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.bins.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bin index per document id.
    pub fn bin_index(&self) -> HashMap<&str, usize> {
        self.bins
            .iter()
            .enumerate()
            .flat_map(|(b, ids)| ids.iter().map(move |id| (id.as_str(), b)))
            .collect()
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self).map_err(|e| Error::json("curriculum plan", e))?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_bytes(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        util::read_json(path)
    }

    /// Checks that the bins are a partition of `ids`.
    pub fn check_partition<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.sequence() {
            if !seen.insert(id) {
                return Err(Error::invalid(format!("plan lists {id:?} twice")));
            }
        }
        let mut expected = 0;
        for id in ids {
            expected += 1;
            if !seen.contains(id) {
                return Err(Error::invalid(format!("plan omits {id:?}")));
            }
        }
        if expected != seen.len() {
            return Err(Error::invalid(format!(
                "plan has {} ids, input has {expected}",
                seen.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ScoringReport {
    pub already_scored: usize,
    pub from_cache: usize,
    pub newly_scored: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheLine {
    id: String,
    ppl: f64,
}

/// Ensures every document has a PPL, consulting the sidecar cache first and
/// the scorer for the rest. New scores are merged back into the cache.
pub fn assign_ppl(docs: &mut [Document], scorer: Option<&dyn PplScorer>, cache: Option<&Path>) -> Result<ScoringReport> {
    let mut cached: BTreeMap<String, f64> = BTreeMap::new();
    if let Some(path) = cache {
        if path.exists() {
            for line in util::read_jsonl::<CacheLine>(path)? {
                cached.insert(line.id, line.ppl);
            }
        }
    }
    let mut report = ScoringReport::default();
    let mut pending = Vec::new();
    for (i, d) in docs.iter_mut().enumerate() {
        if d.ppl.is_some() {
            report.already_scored += 1;
        } else if let Some(p) = cached.get(&d.id).copied().filter(|p| p.is_finite() && *p > 0.0) {
            d.ppl = Some(p);
            report.from_cache += 1;
        } else {
            pending.push(i);
        }
    }
    if pending.is_empty() {
        return Ok(report);
    }
    let unscored = |pending: &[usize], docs: &[Document]| {
        let ids: Vec<&str> = pending.iter().take(20).map(|&i| docs[i].id.as_str()).collect();
        let more = pending.len().saturating_sub(ids.len());
        format!(
            "{} unscored documents: {}{}",
            pending.len(),
            ids.join(", "),
            if more > 0 { format!(" (+{more} more)") } else { String::new() }
        )
    };
    let Some(scorer) = scorer else {
        return Err(Error::invalid(format!("no scorer configured; {}", unscored(&pending, docs))));
    };
    let texts: Vec<String> = pending.iter().map(|&i| docs[i].text.clone()).collect();
    let scores = scorer
        .score_ppl(&texts)
        .map_err(|e| Error::from(e).context(unscored(&pending, docs)))?;
    for (&i, p) in pending.iter().zip(scores) {
        docs[i].ppl = Some(p);
        cached.insert(docs[i].id.clone(), p);
    }
    report.newly_scored = pending.len();
    if let Some(path) = cache {
        let lines: Vec<CacheLine> = cached.into_iter().map(|(id, ppl)| CacheLine { id, ppl }).collect();
        util::write_jsonl(path, &lines)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredId {
    pub id: String,
    pub ppl: f64,
}

/// Sorts by (ppl, id) and cuts into `k` contiguous equal-count bins. When the
/// count does not divide evenly the lower-PPL bins get the extra documents.
pub fn bin_by_ppl(docs: &[Document], k: usize) -> Result<Vec<Vec<ScoredId>>> {
    if k == 0 {
        return Err(Error::invalid("bin count must be positive"));
    }
    if k > docs.len() {
        return Err(Error::invalid(format!("cannot cut {} documents into {k} bins", docs.len())));
    }
    let mut items = docs
        .iter()
        .map(|d| match d.ppl {
            Some(ppl) if ppl.is_finite() && ppl > 0.0 => Ok(ScoredId { id: d.id.clone(), ppl }),
            _ => Err(Error::invalid(format!("document {} has no ppl", d.id))),
        })
        .collect::<Result<Vec<_>>>()?;
    items.sort_by(|a, b| a.ppl.total_cmp(&b.ppl).then_with(|| a.id.cmp(&b.id)));
    let base = items.len() / k;
    let extra = items.len() % k;
    let mut bins = Vec::with_capacity(k);
    let mut it = items.into_iter();
    for b in 0..k {
        let size = base + usize::from(b < extra);
        bins.push(it.by_ref().take(size).collect());
    }
    Ok(bins)
}

fn stat(items: &[ScoredId]) -> BinStat {
    BinStat {
        count: items.len(),
        mean_ppl: (!items.is_empty()).then(|| items.iter().map(|s| s.ppl).sum::<f64>() / items.len() as f64),
    }
}

/// Orders PPL bins: LH ascending, HL descending, RM one global shuffle.
/// Within-bin order is a seeded shuffle keyed by the bin's ascending rank,
/// so LH and HL list identical bins in reverse order.
pub fn order(bins: &[Vec<ScoredId>], strategy: Strategy, seed: u64) -> Result<CurriculumPlan> {
    match strategy {
        Strategy::RM => {
            let mut all: Vec<&ScoredId> = bins.iter().flatten().collect();
            all.sort_by(|a, b| a.id.cmp(&b.id));
            let mut rng = util::rng_for(seed, &["curriculum", "rm"]);
            all.shuffle(&mut rng);
            let flat: Vec<ScoredId> = all.into_iter().cloned().collect();
            Ok(CurriculumPlan {
                strategy,
                seed,
                bin_stats: vec![stat(&flat)],
                bins: vec![flat.into_iter().map(|s| s.id).collect()],
            })
        }
        Strategy::LH | Strategy::HL => {
            let mut out: Vec<(Vec<String>, BinStat)> = bins
                .iter()
                .enumerate()
                .map(|(b, items)| {
                    let mut ids: Vec<String> = items.iter().map(|s| s.id.clone()).collect();
                    let mut rng = util::rng_for(seed, &["curriculum", "bin", &b.to_string()]);
                    ids.shuffle(&mut rng);
                    (ids, stat(items))
                })
                .collect();
            if strategy == Strategy::HL {
                out.reverse();
            }
            let (bins, bin_stats) = out.into_iter().unzip();
            Ok(CurriculumPlan {
                strategy,
                seed,
                bins,
                bin_stats,
            })
        }
        other => Err(Error::invalid(format!("{other} is a discipline curriculum; use order_by_discipline"))),
    }
}

/// Convenience: score-sorted bins then ordering, for PPL strategies and RM.
pub fn plan_by_ppl(docs: &[Document], k: usize, strategy: Strategy, seed: u64) -> Result<CurriculumPlan> {
    let k = if strategy == Strategy::RM { 1 } else { k };
    order(&bin_by_ppl(docs, k)?, strategy, seed)
}

/// One bin per element of `sequence`, each element a set of disciplines
/// matched against `Document::topic`. A set repeated in the sequence has its
/// documents split evenly, in seeded order, across its occurrences.
pub fn order_by_discipline(
    docs: &[Document],
    sequence: &[Vec<String>],
    strategy: Strategy,
    seed: u64,
) -> Result<CurriculumPlan> {
    let key_of = |set: &[String]| {
        let mut s: Vec<String> = set.iter().map(|d| d.to_lowercase()).collect();
        s.sort();
        s.dedup();
        s.join("+")
    };
    // discipline -> set key
    let mut owner: HashMap<String, String> = HashMap::new();
    let mut occurrences: BTreeMap<String, usize> = BTreeMap::new();
    for set in sequence {
        let key = key_of(set);
        *occurrences.entry(key.clone()).or_default() += 1;
        for d in set {
            let d = d.to_lowercase();
            if let Some(prev) = owner.insert(d.clone(), key.clone()) {
                if prev != key {
                    return Err(Error::invalid(format!("discipline {d:?} appears in two different sets")));
                }
            }
        }
    }
    let mut members: BTreeMap<String, Vec<&Document>> = BTreeMap::new();
    for doc in docs {
        let disc = doc
            .topic
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("document {} has no discipline tag", doc.id)))?
            .to_lowercase();
        let key = owner
            .get(&disc)
            .ok_or_else(|| Error::invalid(format!("document {}: discipline {disc:?} is not in the sequence", doc.id)))?;
        members.entry(key.clone()).or_default().push(doc);
    }
    // split each set's documents into as many chunks as it has occurrences
    let mut chunks: HashMap<String, std::collections::VecDeque<Vec<&Document>>> = HashMap::new();
    for (key, count) in &occurrences {
        let mut ds = members.remove(key).unwrap_or_default();
        ds.sort_by(|a, b| a.id.cmp(&b.id));
        let mut rng = util::rng_for(seed, &["curriculum", "discipline", key]);
        ds.shuffle(&mut rng);
        let base = ds.len() / count;
        let extra = ds.len() % count;
        let mut it = ds.into_iter();
        let q = (0..*count)
            .map(|c| it.by_ref().take(base + usize::from(c < extra)).collect())
            .collect();
        chunks.insert(key.clone(), q);
    }
    let mut bins = Vec::with_capacity(sequence.len());
    let mut bin_stats = Vec::with_capacity(sequence.len());
    for set in sequence {
        let chunk = chunks
            .get_mut(&key_of(set))
            .and_then(|q| q.pop_front())
            .unwrap_or_default();
        let mean_ppl = if !chunk.is_empty() && chunk.iter().all(|d| d.ppl.is_some()) {
            Some(chunk.iter().filter_map(|d| d.ppl).sum::<f64>() / chunk.len() as f64)
        } else {
            None
        };
        bin_stats.push(BinStat {
            count: chunk.len(),
            mean_ppl,
        });
        bins.push(chunk.into_iter().map(|d| d.id.clone()).collect());
    }
    Ok(CurriculumPlan {
        strategy,
        seed,
        bins,
        bin_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Language, Source};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn scored(n: usize) -> Vec<Document> {
        (1..=n)
            .map(|i| {
                let mut d = Document::new(format!("d{i:02}"), "x".repeat(i), Language::Zh, Source::WebPages);
                d.ppl = Some(i as f64);
                d
            })
            .collect()
    }

    #[test]
    fn binning_splits_sorted_halves() {
        let bins = bin_by_ppl(&scored(10), 2).unwrap();
        let ppls: Vec<Vec<f64>> = bins.iter().map(|b| b.iter().map(|s| s.ppl).collect()).collect();
        assert_eq!(ppls, vec![vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![6.0, 7.0, 8.0, 9.0, 10.0]]);
        assert_eq!(bin_by_ppl(&scored(10), 1).unwrap()[0].len(), 10);
        let uneven = bin_by_ppl(&scored(11), 2).unwrap();
        assert_eq!((uneven[0].len(), uneven[1].len()), (6, 5));
    }

    #[test]
    fn binning_errors() {
        let mut docs = scored(3);
        assert!(bin_by_ppl(&docs, 4).is_err());
        assert!(bin_by_ppl(&docs, 0).is_err());
        docs[1].ppl = None;
        assert!(bin_by_ppl(&docs, 1).is_err());
    }

    #[test]
    fn lh_and_hl_are_reverses() {
        let bins = bin_by_ppl(&scored(10), 5).unwrap();
        let lh = order(&bins, Strategy::LH, 3).unwrap();
        let hl = order(&bins, Strategy::HL, 3).unwrap();
        let mut rev = hl.bins.clone();
        rev.reverse();
        assert_eq!(lh.bins, rev);
        let means: Vec<f64> = lh.bin_stats.iter().map(|s| s.mean_ppl.unwrap()).collect();
        assert!(means.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn rm_is_seeded() {
        let bins = bin_by_ppl(&scored(10), 2).unwrap();
        let a = order(&bins, Strategy::RM, 11).unwrap();
        assert_eq!(a, order(&bins, Strategy::RM, 11).unwrap());
        assert_eq!(a.bins.len(), 1);
        assert_ne!(a.bins, order(&bins, Strategy::RM, 12).unwrap().bins);
        assert!(order(&bins, Strategy::PB, 1).is_err());
    }

    fn tagged(n_phys: usize, n_bio: usize) -> Vec<Document> {
        let mut out = Vec::new();
        for i in 0..n_phys {
            let mut d = Document::new(format!("p{i}"), "t", Language::En, Source::Synthetic);
            d.topic = Some("physics".into());
            out.push(d);
        }
        for i in 0..n_bio {
            let mut d = Document::new(format!("b{i}"), "t", Language::En, Source::Synthetic);
            d.topic = Some(if i % 2 == 0 { "biology" } else { "chemistry" }.into());
            out.push(d);
        }
        out
    }

    #[test]
    fn discipline_sequences() {
        let docs = tagged(4, 4);
        let pb = order_by_discipline(&docs, &Strategy::PB.discipline_sequence().unwrap(), Strategy::PB, 1).unwrap();
        assert_eq!(pb.bins.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4]);
        assert!(pb.bins[0].iter().all(|id| id.starts_with('p')));
        let bp = order_by_discipline(&docs, &Strategy::BP.discipline_sequence().unwrap(), Strategy::BP, 1).unwrap();
        assert_eq!(bp.bins[0], pb.bins[1]);
        assert_eq!(bp.bins[1], pb.bins[0]);
        let pbp = order_by_discipline(&docs, &Strategy::PBP.discipline_sequence().unwrap(), Strategy::PBP, 1).unwrap();
        assert_eq!(pbp.bins.iter().map(Vec::len).collect::<Vec<_>>(), [2, 4, 2]);
        pbp.check_partition(docs.iter().map(|d| d.id.as_str())).unwrap();
    }

    #[test]
    fn discipline_missing_from_sequence_is_error() {
        let mut docs = tagged(1, 0);
        docs[0].topic = Some("astronomy".into());
        assert!(order_by_discipline(&docs, &Strategy::PB.discipline_sequence().unwrap(), Strategy::PB, 1).is_err());
    }

    struct CountingScorer(AtomicUsize);
    impl PplScorer for CountingScorer {
        fn score_ppl(&self, texts: &[String]) -> std::result::Result<Vec<f64>, crate::clients::ClientError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(texts.iter().map(|t| t.chars().count() as f64).collect())
        }
    }

    #[test]
    fn assign_ppl_uses_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("ppl.jsonl");
        let scorer = CountingScorer(AtomicUsize::new(0));
        let mut docs: Vec<Document> = scored(5).into_iter().map(|mut d| { d.ppl = None; d }).collect();
        let r = assign_ppl(&mut docs, Some(&scorer), Some(&cache)).unwrap();
        assert_eq!(r.newly_scored, 5);
        assert!(docs.iter().all(|d| d.ppl == Some(d.text.len() as f64)));
        let mut again: Vec<Document> = docs.iter().cloned().map(|mut d| { d.ppl = None; d }).collect();
        let r = assign_ppl(&mut again, Some(&scorer), Some(&cache)).unwrap();
        assert_eq!(r.from_cache, 5);
        assert_eq!(scorer.0.load(Ordering::SeqCst), 1);
        assert_eq!(again, docs);
    }

    #[test]
    fn assign_ppl_pass_through_and_missing_scorer() {
        let mut docs = scored(3);
        let r = assign_ppl(&mut docs, None, None).unwrap();
        assert_eq!(r.already_scored, 3);
        docs[0].ppl = None;
        let err = assign_ppl(&mut docs, None, None).unwrap_err();
        assert!(err.to_string().contains("d01"));
    }
}
