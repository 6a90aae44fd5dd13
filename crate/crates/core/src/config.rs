//! Run configuration: corpora, lexicons, budgets, per-stage settings,
//! endpoints and seeds. Relative paths resolve against the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clients::{CassetteMode, EndpointConfig};
use crate::corpus::{Language, Source, DEFAULT_VALIDATION_PER_TOPIC};
use crate::corruption::CorruptionSpec;
use crate::curriculum::{Strategy, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::mixture::DEFAULT_ALPHA;
use crate::planner::{PlanOverrides, Pool, DEFAULT_ROUND_TOKENS};
use crate::synthesis::{Discipline, DEFAULT_K_DEMOS, DEFAULT_SEPARATOR};
use crate::util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub path: PathBuf,
    pub language: Language,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub k: usize,
    pub strategy: Strategy,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            k: DEFAULT_BINS,
            strategy: Strategy::LH,
        }
    }
}

/// Per-round validation PPL snapshot files, index 0 being the baseline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnapshotPaths {
    pub en: Vec<PathBuf>,
    pub zh: Vec<PathBuf>,
}

impl SnapshotPaths {
    pub fn for_language(&self, language: Language) -> &[PathBuf] {
        match language {
            Language::En => &self.en,
            Language::Zh => &self.zh,
        }
    }
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_true() -> bool {
    true
}
fn default_validation() -> usize {
    DEFAULT_VALIDATION_PER_TOPIC
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    #[serde(default)]
    pub budget: Option<u64>,
    #[serde(default)]
    pub ratios: Option<BTreeMap<Pool, f64>>,
    #[serde(default)]
    pub source_ratios: Option<BTreeMap<Pool, BTreeMap<Source, f64>>>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Topic importance weights by label, per language; missing labels get 1.
    #[serde(default)]
    pub weights: BTreeMap<Language, BTreeMap<String, f64>>,
    #[serde(default = "default_true")]
    pub topic_mixture: bool,
    #[serde(default = "default_true")]
    pub ppl_curriculum: bool,
    #[serde(default)]
    pub topic_sources: Option<Vec<Source>>,
    #[serde(default)]
    pub curriculum: CurriculumConfig,
    #[serde(default = "default_validation")]
    pub validation_per_topic: usize,
    /// Imported snapshots; languages left empty are collected by scoring the
    /// validation split.
    #[serde(default)]
    pub ppl_snapshots: SnapshotPaths,
}

impl Default for Stage1Config {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

fn default_model() -> String {
    "mistralai/Mistral-7B-Instruct-v0.3".into()
}
fn default_temperature() -> f64 {
    0.7
}
fn default_max_tokens() -> u32 {
    1024
}
fn default_wave() -> usize {
    4
}
fn default_attempts() -> usize {
    4
}
fn default_k_demos() -> usize {
    DEFAULT_K_DEMOS
}
fn default_separator() -> String {
    DEFAULT_SEPARATOR.into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    /// Scientific QA pairs per discipline.
    #[serde(default)]
    pub quotas: BTreeMap<Discipline, u64>,
    #[serde(default)]
    pub code_quota: u64,
    #[serde(default = "default_k_demos")]
    pub k_demos: usize,
    #[serde(default)]
    pub domains_path: Option<PathBuf>,
    #[serde(default)]
    pub code_seed_path: Option<PathBuf>,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Fixed timestamp stamped on every pair; defaults to the run time.
    #[serde(default)]
    pub created_at: Option<String>,
    #[serde(default = "default_wave")]
    pub wave_size: usize,
    #[serde(default = "default_attempts")]
    pub attempts_per_pair: usize,
    #[serde(default)]
    pub strict: bool,
    #[serde(default = "default_separator")]
    pub separator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    #[serde(default)]
    pub budget: Option<u64>,
    #[serde(default)]
    pub ratios: Option<BTreeMap<Pool, f64>>,
    #[serde(default)]
    pub source_ratios: Option<BTreeMap<Pool, BTreeMap<Source, f64>>>,
    #[serde(default)]
    pub synthesis: Option<SynthesisConfig>,
    /// Previously synthesized QA pairs (JSONL of QA records) added to the
    /// synthetic pool.
    #[serde(default)]
    pub qa_paths: Vec<PathBuf>,
    #[serde(default)]
    pub corruption: Option<CorruptionSpec>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointsConfig {
    pub chat: Option<EndpointConfig>,
    pub scorer: Option<EndpointConfig>,
    pub classifier: Option<EndpointConfig>,
}

fn default_counter() -> String {
    "bytes4".into()
}
fn default_round_tokens() -> u64 {
    DEFAULT_ROUND_TOKENS
}
fn default_score_batch() -> usize {
    crate::clients::DEFAULT_SCORE_BATCH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpora: Vec<CorpusEntry>,
    #[serde(default)]
    pub taxonomy_path: Option<PathBuf>,
    #[serde(default)]
    pub keyword_weights_path: Option<PathBuf>,
    #[serde(default)]
    pub lexicon_path: Option<PathBuf>,
    /// `whitespace`, `bytes4`, or `vocab:<path>`.
    #[serde(default = "default_counter")]
    pub token_counter: String,
    pub total_budget: u64,
    /// Tokens per round. The reference run used about 40B; desk runs use
    /// 10,000.
    #[serde(default = "default_round_tokens")]
    pub round_tokens: u64,
    #[serde(default)]
    pub seed: u64,
    /// Per-component seed overrides: plan, validation, curriculum,
    /// synthesis, corruption.
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default)]
    pub endpoints: EndpointsConfig,
    #[serde(default = "default_score_batch")]
    pub score_batch: usize,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

pub const SEED_COMPONENTS: [&str; 5] = ["plan", "validation", "curriculum", "synthesis", "corruption"];

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = util::read_json(path)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths();
        cfg.validate().map_err(|e| e.context(format!("config {}", path.display())))?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self) {
        let base = self.base_dir.clone();
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for c in &mut self.corpora {
            fix(&mut c.path);
        }
        for p in [&mut self.taxonomy_path, &mut self.keyword_weights_path, &mut self.lexicon_path]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        for p in self.stage1.ppl_snapshots.en.iter_mut().chain(self.stage1.ppl_snapshots.zh.iter_mut()) {
            fix(p);
        }
        if let Some(s) = &mut self.stage2.synthesis {
            for p in [&mut s.domains_path, &mut s.code_seed_path].into_iter().flatten() {
                fix(p);
            }
        }
        for p in &mut self.stage2.qa_paths {
            fix(p);
        }
        for e in [&mut self.endpoints.chat, &mut self.endpoints.scorer, &mut self.endpoints.classifier]
            .into_iter()
            .flatten()
        {
            e.resolve_paths(&base);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpora.is_empty() {
            return Err(Error::config("no corpora configured"));
        }
        if self.total_budget == 0 || self.round_tokens == 0 {
            return Err(Error::config("total_budget and round_tokens must be positive"));
        }
        if let Some(k) = self.seeds.keys().find(|k| !SEED_COMPONENTS.contains(&k.as_str())) {
            return Err(Error::config(format!(
                "unknown seed component {k:?}; expected one of {}",
                SEED_COMPONENTS.join(", ")
            )));
        }
        if self.stage1.curriculum.k == 0 {
            return Err(Error::config("curriculum k must be positive"));
        }
        if self.stage1.validation_per_topic == 0 {
            return Err(Error::config("validation_per_topic must be positive"));
        }
        for e in [&self.endpoints.chat, &self.endpoints.scorer, &self.endpoints.classifier]
            .into_iter()
            .flatten()
        {
            e.validate().map_err(|e| Error::config(e.to_string()))?;
        }
        if let Some(c) = &self.stage2.corruption {
            c.validate()?;
            if self.lexicon_path.is_none() {
                return Err(Error::config("stage2.corruption requires lexicon_path"));
            }
        }
        if let Some(s) = &self.stage2.synthesis {
            if s.quotas.contains_key(&Discipline::Code) {
                return Err(Error::config("use code_quota for code pairs, not quotas.code"));
            }
            if s.code_quota > 0 && s.code_seed_path.is_none() {
                return Err(Error::config("code_quota requires code_seed_path"));
            }
        }
        Ok(())
    }

    /// Seed for one component: the explicit override, or one derived from
    /// the base seed.
    pub fn component_seed(&self, component: &str) -> u64 {
        self.seeds
            .get(component)
            .copied()
            .unwrap_or_else(|| util::derive_seed(self.seed, &[component]))
    }

    pub fn stage1_overrides(&self) -> PlanOverrides {
        PlanOverrides {
            token_budget: self.stage1.budget,
            round_tokens: Some(self.round_tokens),
            language_ratios: self.stage1.ratios.clone(),
            source_ratios: self.stage1.source_ratios.clone(),
            use_topic_mixture: Some(self.stage1.topic_mixture),
            use_ppl_curriculum: Some(self.stage1.ppl_curriculum),
            topic_sources: self.stage1.topic_sources.clone(),
            seed: Some(self.component_seed("plan")),
        }
    }

    pub fn stage2_overrides(&self) -> PlanOverrides {
        PlanOverrides {
            token_budget: self.stage2.budget,
            round_tokens: Some(self.round_tokens),
            language_ratios: self.stage2.ratios.clone(),
            source_ratios: self.stage2.source_ratios.clone(),
            use_topic_mixture: Some(false),
            use_ppl_curriculum: Some(false),
            topic_sources: None,
            seed: Some(self.component_seed("plan")),
        }
    }

    /// Forces a cassette mode on every endpoint that has a cassette path.
    pub fn override_cassette_mode(&mut self, mode: CassetteMode) {
        for e in [&mut self.endpoints.chat, &mut self.endpoints.scorer, &mut self.endpoints.classifier]
            .into_iter()
            .flatten()
        {
            if e.cassette.is_some() {
                e.cassette_mode = mode;
            }
        }
    }
}
