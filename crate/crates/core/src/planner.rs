//! Stage plans, per-round token targets, seeded sampling into shards, and
//! shard serialization with verifiable manifests.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Language, Source};
use crate::curriculum::CurriculumPlan;
use crate::error::{Error, Result};
use crate::mixture::MixtureState;
use crate::topic::OTHERS;
use crate::util;

pub const DEFAULT_ROUND_TOKENS: u64 = 10_000;
/// Round size of the reference run (about 40B tokens between adjustments).
pub const REFERENCE_ROUND_TOKENS: u64 = 40_000_000_000;
/// Share of the total budget given to stage 1 and stage 2.
pub const STAGE_SHARES: [f64; 2] = [0.925, 0.075];
const RATIO_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    BilingualAdaptation,
    SyntheticEnhancement,
}

impl Stage {
    pub const ALL: [Stage; 2] = [Stage::BilingualAdaptation, Stage::SyntheticEnhancement];

    pub fn number(self) -> u8 {
        match self {
            Stage::BilingualAdaptation => 1,
            Stage::SyntheticEnhancement => 2,
        }
    }

    pub fn label(self) -> String {
        format!("stage{}", self.number())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "stage1" | "bilingual_adaptation" => Ok(Stage::BilingualAdaptation),
            "2" | "stage2" | "synthetic_enhancement" => Ok(Stage::SyntheticEnhancement),
            other => Err(Error::invalid(format!("unknown stage {other:?}"))),
        }
    }
}

/// Data pool a document is drawn from: Chinese, English, or synthetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Zh,
    En,
    Syn,
}

impl Pool {
    pub const ALL: [Pool; 3] = [Pool::Zh, Pool::En, Pool::Syn];

    pub fn of(doc: &Document) -> Pool {
        if doc.source == Source::Synthetic {
            Pool::Syn
        } else {
            match doc.language {
                Language::Zh => Pool::Zh,
                Language::En => Pool::En,
            }
        }
    }

    pub fn language(self) -> Option<Language> {
        match self {
            Pool::Zh => Some(Language::Zh),
            Pool::En => Some(Language::En),
            Pool::Syn => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pool::Zh => "zh",
            Pool::En => "en",
            Pool::Syn => "syn",
        }
    }
}

impl fmt::Display for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn default_language_ratios(stage: Stage) -> BTreeMap<Pool, f64> {
    match stage {
        Stage::BilingualAdaptation => [(Pool::Zh, 0.2), (Pool::En, 0.8)].into(),
        Stage::SyntheticEnhancement => [(Pool::Zh, 0.1), (Pool::En, 0.7), (Pool::Syn, 0.2)].into(),
    }
}

fn run_pool_share(pool: Pool) -> f64 {
    Stage::ALL
        .iter()
        .zip(STAGE_SHARES)
        .map(|(s, share)| share * default_language_ratios(*s).get(&pool).copied().unwrap_or(0.0))
        .sum()
}

/// Source ratios within a pool such that a full default run reproduces the
/// reference per-source volumes. The Chinese pool takes the shared sources
/// in proportion to their volume; the English pool takes what remains of the
/// shared sources plus every English-only source.
pub fn default_source_ratios(pool: Pool) -> BTreeMap<Source, f64> {
    let natural: Vec<Source> = Source::ALL.into_iter().filter(|s| *s != Source::Synthetic).collect();
    let shared_volume: f64 = natural.iter().filter(|s| s.has_chinese()).map(|s| s.reference_volume()).sum();
    let zh_share = run_pool_share(Pool::Zh) * 100.0;
    let en_share = run_pool_share(Pool::En) * 100.0;
    match pool {
        Pool::Zh => natural
            .iter()
            .filter(|s| s.has_chinese())
            .map(|s| (*s, s.reference_volume() / shared_volume))
            .collect(),
        Pool::En => natural
            .iter()
            .map(|s| {
                let v = s.reference_volume();
                let en_volume = if s.has_chinese() { v * (1.0 - zh_share / shared_volume) } else { v };
                (*s, en_volume / en_share)
            })
            .collect(),
        Pool::Syn => [(Source::Synthetic, 1.0)].into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub token_budget: u64,
    pub round_tokens: u64,
    pub language_ratios: BTreeMap<Pool, f64>,
    pub source_ratios: BTreeMap<Pool, BTreeMap<Source, f64>>,
    pub use_topic_mixture: bool,
    pub use_ppl_curriculum: bool,
    /// Sources whose cells are subdivided by topic when the mixture is on.
    pub topic_sources: Vec<Source>,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanOverrides {
    pub token_budget: Option<u64>,
    pub round_tokens: Option<u64>,
    pub language_ratios: Option<BTreeMap<Pool, f64>>,
    pub source_ratios: Option<BTreeMap<Pool, BTreeMap<Source, f64>>>,
    pub use_topic_mixture: Option<bool>,
    pub use_ppl_curriculum: Option<bool>,
    pub topic_sources: Option<Vec<Source>>,
    pub seed: Option<u64>,
}

/// Stage budgets from the total by largest remainder over the stage shares.
pub fn stage_budgets(total_budget: u64) -> [u64; 2] {
    let v = util::apportion(total_budget, &STAGE_SHARES);
    [v[0], v[1]]
}

pub fn build_stage_plan(stage: Stage, total_budget: u64, overrides: &PlanOverrides) -> Result<StagePlan> {
    if total_budget == 0 {
        return Err(Error::invalid("total budget must be positive"));
    }
    let first = stage == Stage::BilingualAdaptation;
    let language_ratios = overrides
        .language_ratios
        .clone()
        .unwrap_or_else(|| default_language_ratios(stage));
    let mut source_ratios: BTreeMap<Pool, BTreeMap<Source, f64>> = language_ratios
        .keys()
        .map(|p| (*p, default_source_ratios(*p)))
        .collect();
    if let Some(o) = &overrides.source_ratios {
        for (pool, ratios) in o {
            source_ratios.insert(*pool, ratios.clone());
        }
    }
    let plan = StagePlan {
        stage,
        token_budget: overrides
            .token_budget
            .unwrap_or(stage_budgets(total_budget)[usize::from(stage.number() - 1)]),
        round_tokens: overrides.round_tokens.unwrap_or(DEFAULT_ROUND_TOKENS),
        language_ratios,
        source_ratios,
        use_topic_mixture: overrides.use_topic_mixture.unwrap_or(first),
        use_ppl_curriculum: overrides.use_ppl_curriculum.unwrap_or(first),
        topic_sources: overrides.topic_sources.clone().unwrap_or_else(|| vec![Source::WebPages]),
        seed: overrides.seed.unwrap_or(0),
    };
    plan.validate()?;
    Ok(plan)
}

fn check_ratio_map<K: fmt::Debug>(what: &str, map: &BTreeMap<K, f64>) -> Result<()> {
    if let Some((k, v)) = map.iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::invalid(format!("{what}: ratio for {k:?} must be a non-negative number, got {v}")));
    }
    let sum: f64 = map.values().sum();
    if (sum - 1.0).abs() > RATIO_TOLERANCE {
        return Err(Error::invalid(format!("{what}: ratios sum to {sum}, expected 1")));
    }
    Ok(())
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        let label = self.stage.label();
        if self.token_budget == 0 || self.round_tokens == 0 {
            return Err(Error::invalid(format!("{label}: token budget and round tokens must be positive")));
        }
        check_ratio_map(&format!("{label} language ratios"), &self.language_ratios)?;
        for (pool, ratio) in &self.language_ratios {
            if *ratio == 0.0 {
                continue;
            }
            let sources = self
                .source_ratios
                .get(pool)
                .ok_or_else(|| Error::invalid(format!("{label}: no source ratios for pool {pool}")))?;
            check_ratio_map(&format!("{label} {pool} source ratios"), sources)?;
            for (source, r) in sources {
                let ok = match pool {
                    Pool::Syn => *source == Source::Synthetic,
                    Pool::Zh => source.has_chinese(),
                    Pool::En => *source != Source::Synthetic,
                };
                if *r > 0.0 && !ok {
                    return Err(Error::invalid(format!("{label}: source {source} cannot feed pool {pool}")));
                }
            }
        }
        Ok(())
    }

    pub fn rounds(&self) -> u32 {
        self.token_budget.div_ceil(self.round_tokens) as u32
    }

    /// Tokens of round `round` (1-based); the last round takes the remainder.
    pub fn round_budget(&self, round: u32) -> u64 {
        let r = self.rounds();
        if round == 0 || round > r {
            0
        } else if round < r {
            self.round_tokens
        } else {
            self.token_budget - self.round_tokens * u64::from(r - 1)
        }
    }

    /// (pool, source) cells with positive weight, in canonical order.
    pub fn cells(&self) -> Vec<(Pool, Source, f64)> {
        let mut out = Vec::new();
        for pool in Pool::ALL {
            let lr = self.language_ratios.get(&pool).copied().unwrap_or(0.0);
            if lr <= 0.0 {
                continue;
            }
            for source in Source::ALL {
                let sr = self.source_ratios.get(&pool).and_then(|m| m.get(&source)).copied().unwrap_or(0.0);
                if sr > 0.0 {
                    out.push((pool, source, lr * sr));
                }
            }
        }
        out
    }

    /// Nominal per-cell targets of one round.
    pub fn round_cell_targets(&self, round: u32) -> Vec<(Pool, Source, u64)> {
        let cells = self.cells();
        let weights: Vec<f64> = cells.iter().map(|c| c.2).collect();
        let targets = util::apportion(self.round_budget(round), &weights);
        cells.into_iter().zip(targets).map(|((p, s, _), t)| (p, s, t)).collect()
    }

    /// Nominal per-source totals over the whole stage.
    pub fn source_targets(&self) -> BTreeMap<Source, u64> {
        let mut out = BTreeMap::new();
        for round in 1..=self.rounds() {
            for (_, source, t) in self.round_cell_targets(round) {
                *out.entry(source).or_insert(0) += t;
            }
        }
        out
    }

    /// Whether cells of this (pool, source) are subdivided by topic.
    pub fn splits_topics(&self, pool: Pool, source: Source) -> bool {
        self.use_topic_mixture && pool.language().is_some() && self.topic_sources.contains(&source)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub pool: Pool,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.pool, self.source)?;
        if let Some(t) = &self.topic {
            write!(f, "/{t}")?;
        }
        Ok(())
    }
}

/// Token-counted documents indexed by (pool, source, topic).
pub struct Pools {
    docs: Vec<Document>,
    by_cell: HashMap<(Pool, Source), Vec<usize>>,
    by_topic: HashMap<(Pool, Source, String), Vec<usize>>,
}

impl Pools {
    /// Documents without tokens are dropped; they cannot advance a target.
    pub fn new(mut docs: Vec<Document>) -> Result<Self> {
        let before = docs.len();
        docs.retain(|d| d.token_count != Some(0));
        if docs.len() < before {
            log::warn!("dropped {} zero-token documents from the sampling pools", before - docs.len());
        }
        docs.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = docs.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::invalid(format!("duplicate document id {:?} in pools", w[0].id)));
        }
        let mut by_cell: HashMap<(Pool, Source), Vec<usize>> = HashMap::new();
        let mut by_topic: HashMap<(Pool, Source, String), Vec<usize>> = HashMap::new();
        for (i, d) in docs.iter().enumerate() {
            if d.token_count.is_none() {
                return Err(Error::invalid(format!("document {} has no token count", d.id)));
            }
            let pool = Pool::of(d);
            by_cell.entry((pool, d.source)).or_default().push(i);
            let topic = d.topic.clone().unwrap_or_else(|| OTHERS.to_owned());
            by_topic.entry((pool, d.source, topic)).or_default().push(i);
        }
        Ok(Pools { docs, by_cell, by_topic })
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    fn members(&self, key: &CellKey) -> &[usize] {
        let found = match &key.topic {
            Some(t) => self.by_topic.get(&(key.pool, key.source, t.clone())),
            None => self.by_cell.get(&(key.pool, key.source)),
        };
        found.map_or(&[], Vec::as_slice)
    }

    /// Token mass per topic within one language pool, over `sources`.
    pub fn topic_tokens(&self, pool: Pool, sources: &[Source], topics: &[String]) -> Vec<f64> {
        topics
            .iter()
            .map(|t| {
                sources
                    .iter()
                    .flat_map(|s| self.by_topic.get(&(pool, *s, t.clone())).into_iter().flatten())
                    .map(|&i| self.docs[i].tokens() as f64)
                    .sum()
            })
            .collect()
    }
}

struct Queue {
    order: Vec<usize>,
    // curriculum bin of each entry in `order`, when ordered by a plan
    bins: Option<Vec<usize>>,
    cursor: usize,
    replace_rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardRecord {
    pub id: String,
    pub text: String,
    pub language: Language,
    pub source: Source,
    #[serde(default)]
    pub topic: Option<String>,
    pub stage: u8,
    pub round: u32,
    pub position: u64,
    pub token_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ManifestCell {
    pub language: Language,
    pub source: Source,
    pub topic: Option<String>,
    pub documents: u64,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellTarget {
    pub cell: String,
    pub target: u64,
    pub realized: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub stage: u8,
    pub round: u32,
    pub index: u32,
    pub records: u64,
    pub total_tokens: u64,
    pub cells: Vec<ManifestCell>,
    pub targets: Vec<CellTarget>,
    pub with_replacement_draws: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub stage: u8,
    pub round: u32,
    pub index: u32,
    pub records: Vec<ShardRecord>,
    pub manifest: ShardManifest,
}

/// Per-(language, source, topic) totals recomputed from records.
pub fn aggregate(records: &[ShardRecord]) -> Vec<ManifestCell> {
    let mut cells: BTreeMap<(Language, Source, Option<String>), (u64, u64)> = BTreeMap::new();
    for r in records {
        let e = cells.entry((r.language, r.source, r.topic.clone())).or_default();
        e.0 += 1;
        e.1 += r.token_count;
    }
    cells
        .into_iter()
        .map(|((language, source, topic), (documents, tokens))| ManifestCell {
            language,
            source,
            topic,
            documents,
            tokens,
        })
        .collect()
}

impl Shard {
    pub fn new(stage: u8, round: u32, index: u32, mut records: Vec<ShardRecord>, targets: Vec<CellTarget>, with_replacement_draws: u64) -> Result<Self> {
        for (i, r) in records.iter_mut().enumerate() {
            r.stage = stage;
            r.round = round;
            r.position = i as u64;
        }
        let bytes = util::to_jsonl(&records)?;
        let manifest = ShardManifest {
            stage,
            round,
            index,
            records: records.len() as u64,
            total_tokens: records.iter().map(|r| r.token_count).sum(),
            cells: aggregate(&records),
            targets,
            with_replacement_draws,
            sha256: util::sha256_hex(&bytes),
        };
        Ok(Shard {
            stage,
            round,
            index,
            records,
            manifest,
        })
    }

    pub fn file_stem(&self) -> String {
        format!("stage{}-r{:03}-s{:03}", self.stage, self.round, self.index)
    }

    pub fn total_tokens(&self) -> u64 {
        self.manifest.total_tokens
    }
}

pub fn manifest_path(shard_path: &Path) -> PathBuf {
    let mut p = shard_path.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

/// Writes `<stem>.jsonl` and its manifest sidecar into `dir`; returns the
/// JSONL path.
pub fn write_shard(shard: &Shard, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(format!("{}.jsonl", shard.file_stem()));
    util::write_bytes(&path, &util::to_jsonl(&shard.records)?)?;
    util::write_json_pretty(&manifest_path(&path), &shard.manifest)?;
    Ok(path)
}

/// Reads a shard and re-verifies its manifest against the records.
pub fn read_shard(path: &Path) -> Result<Shard> {
    let bytes = util::read_file(path)?;
    let manifest: ShardManifest = util::read_json(&manifest_path(path))?;
    let mismatch = |message: String| Error::ManifestMismatch {
        path: path.to_path_buf(),
        message,
    };
    let digest = util::sha256_hex(&bytes);
    if digest != manifest.sha256 {
        return Err(mismatch(format!("sha256 {digest} does not match manifest {}", manifest.sha256)));
    }
    let records: Vec<ShardRecord> = util::read_jsonl(path)?;
    if records.len() as u64 != manifest.records {
        return Err(mismatch(format!("{} records, manifest says {}", records.len(), manifest.records)));
    }
    if let Some((i, r)) = records.iter().enumerate().find(|(i, r)| r.position != *i as u64) {
        return Err(mismatch(format!("record {} has position {}, expected {i}", r.id, r.position)));
    }
    let total: u64 = records.iter().map(|r| r.token_count).sum();
    if total != manifest.total_tokens {
        return Err(mismatch(format!("records sum to {total} tokens, manifest says {}", manifest.total_tokens)));
    }
    if aggregate(&records) != manifest.cells {
        return Err(mismatch("per-cell totals differ from manifest".into()));
    }
    Ok(Shard {
        stage: manifest.stage,
        round: manifest.round,
        index: manifest.index,
        records,
        manifest,
    })
}

/// Draws the rounds of one stage. Queues and the per-source carry persist
/// across rounds, so consecutive rounds continue without replacement and
/// per-source totals stay within one document of the nominal targets.
pub struct StageSampler<'a> {
    pools: &'a Pools,
    plan: &'a StagePlan,
    curriculum: Option<&'a CurriculumPlan>,
    queues: BTreeMap<CellKey, Queue>,
    carry: BTreeMap<Source, u64>,
    with_replacement_draws: u64,
}

impl<'a> StageSampler<'a> {
    pub fn new(pools: &'a Pools, plan: &'a StagePlan, curriculum: Option<&'a CurriculumPlan>) -> Result<Self> {
        plan.validate()?;
        if plan.use_ppl_curriculum && curriculum.is_none() && plan.language_ratios.get(&Pool::Zh).is_some_and(|r| *r > 0.0) {
            return Err(Error::invalid(format!("{}: curriculum enabled but no plan given", plan.stage.label())));
        }
        Ok(StageSampler {
            pools,
            plan,
            curriculum: if plan.use_ppl_curriculum { curriculum } else { None },
            queues: BTreeMap::new(),
            carry: BTreeMap::new(),
            with_replacement_draws: 0,
        })
    }

    pub fn with_replacement_draws(&self) -> u64 {
        self.with_replacement_draws
    }

    fn queue(&mut self, key: &CellKey) -> Result<&mut Queue> {
        if !self.queues.contains_key(key) {
            let members = self.pools.members(key);
            let stage = self.plan.stage.label();
            let key_str = key.to_string();
            let mut order = members.to_vec();
            let mut bins = None;
            match self.curriculum.filter(|_| key.pool == Pool::Zh) {
                Some(plan) => {
                    let rank: HashMap<&str, (usize, usize)> = plan
                        .bins
                        .iter()
                        .enumerate()
                        .flat_map(|(b, ids)| ids.iter().map(move |id| (id.as_str(), b)))
                        .enumerate()
                        .map(|(pos, (id, b))| (id, (pos, b)))
                        .collect();
                    let missing = order.iter().filter(|&&i| !rank.contains_key(self.pools.docs[i].id.as_str())).count();
                    if missing > 0 {
                        log::warn!("{stage} {key_str}: {missing} documents absent from the curriculum plan go last");
                    }
                    let last_bin = plan.bins.len().saturating_sub(1);
                    order.sort_by_key(|&i| rank.get(self.pools.docs[i].id.as_str()).copied().unwrap_or((usize::MAX, last_bin)));
                    bins = Some(
                        order
                            .iter()
                            .map(|&i| rank.get(self.pools.docs[i].id.as_str()).map_or(last_bin, |r| r.1))
                            .collect(),
                    );
                }
                None => order.shuffle(&mut util::rng_for(self.plan.seed, &[&stage, &key_str, "order"])),
            }
            self.queues.insert(
                key.clone(),
                Queue {
                    order,
                    bins,
                    cursor: 0,
                    replace_rng: util::rng_for(self.plan.seed, &[&stage, &key_str, "replace"]),
                },
            );
        }
        Ok(self.queues.get_mut(key).expect("inserted above"))
    }

    /// Appends draws for `key` to `out` until at least `target` tokens.
    fn fill(&mut self, key: &CellKey, target: u64, round: u32, out: &mut Vec<ShardRecord>) -> Result<u64> {
        if target == 0 {
            return Ok(0);
        }
        let rounds = self.plan.rounds() as usize;
        let bins_total = self.curriculum.map_or(1, |c| c.bins.len().max(1));
        let stage = self.plan.stage;
        let pools = self.pools;
        let q = self.queue(key)?;
        if q.order.is_empty() {
            return Err(Error::invalid(format!(
                "{} round {round}: pool {key} is empty but has a target of {target} tokens",
                stage.label()
            )));
        }
        if let Some(bins) = &q.bins {
            // linearly advancing window: round r starts no earlier than bin floor((r-1)k/R)
            let first_bin = (round as usize - 1) * bins_total / rounds.max(1);
            let start = bins.partition_point(|&b| b < first_bin);
            q.cursor = q.cursor.max(start);
        }
        let mut realized = 0;
        let mut replaced = 0;
        while realized < target {
            let idx = if q.cursor < q.order.len() {
                q.cursor += 1;
                q.order[q.cursor - 1]
            } else {
                replaced += 1;
                q.order[q.replace_rng.gen_range(0..q.order.len())]
            };
            let d = &pools.docs[idx];
            realized += d.tokens();
            out.push(ShardRecord {
                id: d.id.clone(),
                text: d.text.clone(),
                language: d.language,
                source: d.source,
                topic: d.topic.clone(),
                stage: stage.number(),
                round,
                position: 0,
                token_count: d.tokens(),
            });
        }
        if replaced > 0 {
            log::warn!(
                "{} round {round}: pool {key} exhausted, drew {replaced} documents with replacement",
                stage.label()
            );
            self.with_replacement_draws += replaced;
        }
        Ok(realized)
    }

    /// Samples round `round` (1-based). `mixtures` maps each language to its
    /// current topic mixture; required for languages whose cells are split
    /// by topic.
    pub fn sample_round(&mut self, round: u32, mixtures: &BTreeMap<Language, MixtureState>) -> Result<Shard> {
        let plan = self.plan;
        if round == 0 || round > plan.rounds() {
            return Err(Error::invalid(format!("{}: round {round} outside 1..={}", plan.stage.label(), plan.rounds())));
        }
        let replaced_before = self.with_replacement_draws;
        let mut records = Vec::new();
        let mut targets = Vec::new();
        for (pool, source, nominal) in plan.round_cell_targets(round) {
            let carry = self.carry.get(&source).copied().unwrap_or(0);
            let adjusted = nominal.saturating_sub(carry);
            let mut realized = 0;
            let split = match pool.language() {
                Some(lang) if plan.splits_topics(pool, source) => Some(mixtures.get(&lang).ok_or_else(|| {
                    Error::invalid(format!("{} round {round}: no topic mixture for {lang}", plan.stage.label()))
                })?),
                _ => None,
            };
            match split {
                Some(state) => {
                    let topic_targets = util::apportion(adjusted, &state.proportions);
                    let mut cum_target = 0;
                    for (topic, t) in state.topics.iter().zip(topic_targets) {
                        cum_target += t;
                        let key = CellKey {
                            pool,
                            source,
                            topic: Some(topic.clone()),
                        };
                        let got = self.fill(&key, cum_target.saturating_sub(realized), round, &mut records)?;
                        realized += got;
                        targets.push(CellTarget {
                            cell: key.to_string(),
                            target: t,
                            realized: got,
                        });
                    }
                }
                None => {
                    let key = CellKey { pool, source, topic: None };
                    realized = self.fill(&key, adjusted, round, &mut records)?;
                    targets.push(CellTarget {
                        cell: key.to_string(),
                        target: adjusted,
                        realized,
                    });
                }
            }
            self.carry.insert(source, (carry + realized).saturating_sub(nominal));
        }
        Shard::new(
            plan.stage.number(),
            round,
            0,
            records,
            targets,
            self.with_replacement_draws - replaced_before,
        )
    }
}

/// Samples a single round with fresh sampler state.
pub fn sample_round(
    pools: &Pools,
    plan: &StagePlan,
    mixtures: &BTreeMap<Language, MixtureState>,
    curriculum: Option<&CurriculumPlan>,
    round: u32,
) -> Result<Shard> {
    StageSampler::new(pools, plan, curriculum)?.sample_round(round, mixtures)
}
