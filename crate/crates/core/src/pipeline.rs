//! End-to-end run: ingest, label, hold out validation, score, plan the
//! curriculum, sample stage 1 with per-round mixture updates, synthesize
//! QA, sample stage 2, and write reports.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clients::{ChatClient, ClassifierClient, Endpoint, PplScorer, ScoreClient};
use crate::config::{PipelineConfig, SynthesisConfig};
use crate::corpus::{self, Document, IngestMode, Language, Source, TokenCounter};
use crate::corruption::{self, ChangeReport, Corruptor, Lexicon};
use crate::curriculum::{self, CurriculumPlan};
use crate::error::{Error, Result};
use crate::mixture::{self, AuditRecord, MixtureState, PplSnapshot};
use crate::planner::{self, Pool, Shard, ShardRecord, Stage, StageSampler};
use crate::report;
use crate::synthesis::{self, Discipline, DomainLists, QaPair, SynthesisOptions, SynthesisReport};
use crate::topic::{self, Classifier, LexiconClassifier, TopicTaxonomy};
use crate::util;

/// Remote clients built from the endpoint section.
#[derive(Default)]
pub struct Services {
    pub chat: Option<ChatClient>,
    pub scorer: Option<ScoreClient>,
    pub classifier: Option<ClassifierClient>,
}

impl Services {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let ep = |c: &Option<crate::clients::EndpointConfig>| -> Result<Option<Endpoint>> {
            c.clone().map(Endpoint::from_config).transpose().map_err(Error::from)
        };
        Ok(Services {
            chat: ep(&cfg.endpoints.chat)?.map(ChatClient::new),
            scorer: ep(&cfg.endpoints.scorer)?.map(|e| ScoreClient::new(e, cfg.score_batch)),
            classifier: ep(&cfg.endpoints.classifier)?.map(ClassifierClient::new),
        })
    }

    /// Writes any recorded cassettes.
    pub fn flush(&self) -> Result<()> {
        let endpoints = [
            self.chat.as_ref().map(ChatClient::endpoint),
            self.scorer.as_ref().map(ScoreClient::endpoint),
            self.classifier.as_ref().map(ClassifierClient::endpoint),
        ];
        for e in endpoints.into_iter().flatten() {
            e.flush()?;
        }
        Ok(())
    }
}

pub fn taxonomy(cfg: &PipelineConfig) -> Result<TopicTaxonomy> {
    match &cfg.taxonomy_path {
        Some(p) => TopicTaxonomy::load(p),
        None => Ok(TopicTaxonomy::standard()),
    }
}

pub fn token_counter(cfg: &PipelineConfig) -> Result<TokenCounter> {
    TokenCounter::from_spec(&cfg.token_counter, Some(&cfg.base_dir))
}

/// Ingests every configured corpus strictly; ids must be unique across
/// files.
pub fn load_corpora(cfg: &PipelineConfig) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for entry in &cfg.corpora {
        let (batch, _) = corpus::ingest(&entry.path, entry.language, entry.source, IngestMode::Strict)?;
        for d in &batch {
            if !seen.insert(d.id.clone()) {
                return Err(Error::invalid(format!(
                    "document id {:?} in {} already appears in another corpus file",
                    d.id,
                    entry.path.display()
                )));
            }
        }
        docs.extend(batch);
    }
    Ok(docs)
}

/// Keyword lexicon when configured, else the remote classifier, else none.
pub fn build_classifier(cfg: &PipelineConfig, taxonomy: TopicTaxonomy, services: &mut Services) -> Result<Option<Classifier>> {
    if let Some(p) = &cfg.keyword_weights_path {
        return Ok(Some(Classifier::Lexicon(LexiconClassifier::load(p, taxonomy)?)));
    }
    Ok(services.classifier.take().map(|client| Classifier::Remote {
        client,
        taxonomy,
        batch_size: cfg.score_batch,
    }))
}

/// Fills missing topic labels on non-synthetic documents; returns how many
/// were labeled. Without a classifier they fall back to "Others".
pub fn label_topics(docs: &mut [Document], classifier: Option<&Classifier>) -> Result<usize> {
    let idx: Vec<usize> = (0..docs.len())
        .filter(|&i| docs[i].topic.is_none() && docs[i].source != Source::Synthetic)
        .collect();
    if idx.is_empty() {
        return Ok(0);
    }
    match classifier {
        Some(c) => {
            let subset: Vec<Document> = idx.iter().map(|&i| docs[i].clone()).collect();
            let labels = topic::classify_batch(&subset, c)?;
            for (&i, l) in idx.iter().zip(labels) {
                docs[i].topic = Some(l.label);
            }
        }
        None => {
            log::warn!("{} documents have no topic and no classifier is configured; labeled {}", idx.len(), topic::OTHERS);
            for &i in &idx {
                docs[i].topic = Some(topic::OTHERS.to_owned());
            }
        }
    }
    Ok(idx.len())
}

/// Mean PPL per topic over scored validation documents. Topics without
/// validation documents repeat the previous value (1.0 at the start), so
/// their change is zero.
pub fn collect_snapshot(validation: &[Document], topics: &[String], round: u32, previous: Option<&PplSnapshot>) -> Result<PplSnapshot> {
    let mut sums = vec![(0.0, 0usize); topics.len()];
    for d in validation {
        let (Some(t), Some(p)) = (d.topic.as_deref(), d.ppl) else { continue };
        if let Some(i) = topics.iter().position(|x| x == t) {
            sums[i].0 += p;
            sums[i].1 += 1;
        }
    }
    let ppl = sums
        .iter()
        .enumerate()
        .map(|(i, &(s, n))| {
            if n > 0 {
                s / n as f64
            } else {
                previous.map_or(1.0, |p| p.ppl[i])
            }
        })
        .collect();
    PplSnapshot::new(round, ppl)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: u8,
    pub token_budget: u64,
    pub rounds: u32,
    pub realized_tokens: u64,
    pub with_replacement_draws: u64,
    pub shards: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunSummary {
    pub total_budget: u64,
    pub token_counter: String,
    pub documents: usize,
    pub validation_documents: usize,
    pub stages: Vec<StageSummary>,
    pub synthesis: Vec<SynthesisReport>,
    /// Relative path to SHA-256 of every file the run wrote.
    pub outputs: BTreeMap<String, String>,
}

struct Outputs {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel);
        util::write_bytes(&p, bytes)?;
        self.written.push(p);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let p = self.path(rel);
        util::write_json_pretty(&p, value)?;
        self.written.push(p);
        Ok(())
    }

    fn jsonl<T: Serialize>(&mut self, rel: &str, items: &[T]) -> Result<()> {
        self.bytes(rel, &util::to_jsonl(items)?)
    }

    fn shard(&mut self, shard: &Shard) -> Result<String> {
        let p = planner::write_shard(shard, &self.path("shards"))?;
        self.written.push(planner::manifest_path(&p));
        self.written.push(p.clone());
        Ok(self.rel(&p))
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn digests(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for p in &self.written {
            out.insert(self.rel(p), util::sha256_hex(&util::read_file(p)?));
        }
        Ok(out)
    }
}

#[derive(Serialize)]
struct ValidationLine<'a> {
    id: &'a str,
    language: Language,
    topic: Option<&'a str>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotLine {
    language: Language,
    #[serde(flatten)]
    snapshot: mixture::LabeledPplSnapshot,
}

struct LanguageMixture {
    topics: Vec<String>,
    snapshots: Vec<PplSnapshot>,
    audit: Vec<AuditRecord>,
}

fn stage_ctx(stage: Stage, round: Option<u32>) -> impl Fn(Error) -> Error {
    move |e| match round {
        Some(r) => e.context(format!("{} round {r}", stage.label())),
        None => e.context(stage.label()),
    }
}

/// Runs both stages and writes every artifact under `out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<RunSummary> {
    let mut services = Services::from_config(cfg)?;
    let result = run_with(cfg, out_dir, &mut services);
    // keep recorded requests even when the run fails part-way
    services.flush()?;
    result
}

fn run_with(cfg: &PipelineConfig, out_dir: &Path, services: &mut Services) -> Result<RunSummary> {
    let mut out = Outputs {
        root: out_dir.to_path_buf(),
        written: Vec::new(),
    };
    let taxonomy = taxonomy(cfg)?;
    let counter = token_counter(cfg)?;
    let mut docs = load_corpora(cfg)?;
    corpus::count_all(&mut docs, &counter);
    let mut summary = RunSummary {
        total_budget: cfg.total_budget,
        token_counter: counter.name(),
        documents: docs.len(),
        ..Default::default()
    };

    let classifier = build_classifier(cfg, taxonomy.clone(), services)?;
    label_topics(&mut docs, classifier.as_ref())?;
    if let Some(Classifier::Remote { client, .. }) = &classifier {
        client.endpoint().flush()?;
    }

    let plan1 = planner::build_stage_plan(Stage::BilingualAdaptation, cfg.total_budget, &cfg.stage1_overrides())?;
    let plan2 = planner::build_stage_plan(Stage::SyntheticEnhancement, cfg.total_budget, &cfg.stage2_overrides())?;

    // validation hold-out, per language
    let (synthetic_in, natural): (Vec<Document>, Vec<Document>) =
        docs.into_iter().partition(|d| d.source == Source::Synthetic);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    if plan1.use_topic_mixture {
        let seed = cfg.component_seed("validation");
        for lang in Language::ALL {
            let subset: Vec<Document> = natural.iter().filter(|d| d.language == lang).cloned().collect();
            if subset.is_empty() {
                continue;
            }
            let split = corpus::split_validation(subset, cfg.stage1.validation_per_topic, seed)?;
            train.extend(split.train);
            validation.extend(split.validation);
        }
        let lines: Vec<ValidationLine> = validation
            .iter()
            .map(|d| ValidationLine {
                id: &d.id,
                language: d.language,
                topic: d.topic.as_deref(),
            })
            .collect();
        out.jsonl("validation.jsonl", &lines)?;
    } else {
        train = natural;
    }
    summary.validation_documents = validation.len();

    // stage 1 topic mixtures
    let pools1 = planner::Pools::new(train.clone())?;
    let mut mixtures: BTreeMap<Language, MixtureState> = BTreeMap::new();
    let mut lang_mix: BTreeMap<Language, LanguageMixture> = BTreeMap::new();
    let rounds1 = plan1.rounds();
    if plan1.use_topic_mixture {
        let scorer = services.scorer.as_ref().map(|s| s as &dyn PplScorer);
        let mut scored_validation = false;
        for lang in Language::ALL {
            let pool = if lang == Language::Zh { Pool::Zh } else { Pool::En };
            if !plan1.cells().iter().any(|(p, src, _)| *p == pool && plan1.splits_topics(*p, *src)) {
                continue;
            }
            let topics = taxonomy.labels(lang).to_vec();
            let masses = pools1.topic_tokens(pool, &plan1.topic_sources, &topics);
            let weights = cfg.stage1.weights.get(&lang);
            let w: Vec<f64> = topics
                .iter()
                .map(|t| weights.and_then(|m| m.get(t)).copied().unwrap_or(1.0))
                .collect();
            let state = MixtureState::from_masses(topics.clone(), &masses, cfg.stage1.alpha, Some(w))
                .map_err(|e| e.context(format!("initial {lang} topic mixture")))?;
            let paths = cfg.stage1.ppl_snapshots.for_language(lang);
            let snapshots = if !paths.is_empty() {
                if (paths.len() as u32) < rounds1 {
                    return Err(Error::config(format!(
                        "stage 1 has {rounds1} rounds but only {} {lang} PPL snapshots are configured",
                        paths.len()
                    )));
                }
                paths
                    .iter()
                    .take(rounds1 as usize)
                    .map(|p| PplSnapshot::load(p, &topics))
                    .collect::<Result<Vec<_>>>()?
            } else {
                if !scored_validation {
                    curriculum::assign_ppl(&mut validation, scorer, Some(&out.path("ppl_cache.jsonl")))
                        .map_err(|e| e.context("scoring validation split"))?;
                    scored_validation = true;
                }
                let subset: Vec<Document> = validation.iter().filter(|d| d.language == lang).cloned().collect();
                let mut snaps: Vec<PplSnapshot> = Vec::new();
                for r in 0..rounds1 {
                    let s = collect_snapshot(&subset, &topics, r, snaps.last())?;
                    snaps.push(s);
                }
                snaps
            };
            mixtures.insert(lang, state);
            lang_mix.insert(
                lang,
                LanguageMixture {
                    topics,
                    snapshots,
                    audit: Vec::new(),
                },
            );
        }
        let snapshot_lines: Vec<SnapshotLine> = lang_mix
            .iter()
            .flat_map(|(lang, m)| {
                m.snapshots.iter().map(|s| SnapshotLine {
                    language: *lang,
                    snapshot: s.to_labeled(&m.topics),
                })
            })
            .collect();
        out.jsonl("audit/ppl_snapshots.jsonl", &snapshot_lines)?;
    }

    // curriculum over the Chinese training pool
    let curriculum_plan = if plan1.use_ppl_curriculum && plan1.language_ratios.get(&Pool::Zh).is_some_and(|r| *r > 0.0) {
        Some(build_curriculum(cfg, &train, services, &out)?)
    } else {
        None
    };
    if let Some(p) = &curriculum_plan {
        out.bytes("curriculum/plan.json", &p.to_json()?)?;
    }
    let cache = out.path("ppl_cache.jsonl");
    if cache.exists() {
        out.written.push(cache);
    }

    // stage 1
    let mut records: Vec<ShardRecord> = Vec::new();
    let mut stage1 = StageSummary {
        stage: 1,
        token_budget: plan1.token_budget,
        rounds: rounds1,
        ..Default::default()
    };
    {
        let mut sampler = StageSampler::new(&pools1, &plan1, curriculum_plan.as_ref()).map_err(stage_ctx(Stage::BilingualAdaptation, None))?;
        for round in 1..=rounds1 {
            let shard = sampler
                .sample_round(round, &mixtures)
                .map_err(stage_ctx(Stage::BilingualAdaptation, Some(round)))?;
            stage1.realized_tokens += shard.total_tokens();
            stage1.shards.push(out.shard(&shard)?);
            records.extend(shard.records);
            if round < rounds1 {
                for (lang, m) in lang_mix.iter_mut() {
                    let state = &mixtures[lang];
                    let idx = round as usize;
                    let (next, audit) = mixture::mixture_step(state, &m.snapshots[idx - 1], &m.snapshots[idx])
                        .map_err(|e| e.context(format!("stage1 round {round}: {lang} mixture update")))?;
                    m.audit.push(audit);
                    mixtures.insert(*lang, next);
                }
            }
        }
        stage1.with_replacement_draws = sampler.with_replacement_draws();
    }
    for (lang, m) in &lang_mix {
        let rel = format!("audit/mixture_{}.jsonl", lang.as_str());
        let path = out.path(&rel);
        report::write_audit(&path, *lang, &m.topics, &m.audit)?;
        out.written.push(path);
        out.json(&format!("audit/mixture_{}_final.json", lang.as_str()), &mixtures[lang])?;
    }
    summary.stages.push(stage1);

    // stage 2: synthetic pool
    let mut synthetic: Vec<Document> = synthetic_in;
    let mut qa: Vec<QaPair> = Vec::new();
    for p in &cfg.stage2.qa_paths {
        qa.extend(util::read_jsonl::<QaPair>(p)?);
    }
    if let Some(sc) = &cfg.stage2.synthesis {
        let (sci, code, reports) = run_synthesis(cfg, sc, &train, services).map_err(stage_ctx(Stage::SyntheticEnhancement, None))?;
        out.jsonl("qa/sci.jsonl", &sci)?;
        out.jsonl("qa/code.jsonl", &code)?;
        out.json("qa/report.json", &reports)?;
        summary.synthesis = reports;
        qa.extend(sci);
        qa.extend(code);
    }
    let separator = cfg
        .stage2
        .synthesis
        .as_ref()
        .map_or(synthesis::DEFAULT_SEPARATOR, |s| s.separator.as_str());
    synthetic.extend(qa.iter().map(|q| synthesis::qa_to_training_text(q, separator)));
    if let Some(spec) = &cfg.stage2.corruption {
        let mut spec = spec.clone();
        if let Some(s) = cfg.seeds.get("corruption") {
            spec.seed = *s;
        }
        let lexicon = Lexicon::load(cfg.lexicon_path.as_deref().expect("validated"))?;
        let freq = corruption::document_frequencies(synthetic.iter().map(|d| d.text.as_str()));
        let corruptor = Corruptor::new(spec, &lexicon, &freq)?;
        let results = corruptor.corrupt_corpus(&synthetic);
        let mut reports: Vec<ChangeReport> = Vec::with_capacity(results.len());
        synthetic = results
            .into_iter()
            .map(|(d, r)| {
                reports.push(r);
                d
            })
            .collect();
        out.jsonl("corruption/changes.jsonl", &reports)?;
    }
    corpus::count_all(&mut synthetic, &counter);

    let mut pool2_docs = train;
    pool2_docs.extend(synthetic);
    let pools2 = planner::Pools::new(pool2_docs)?;
    let rounds2 = plan2.rounds();
    let mut stage2 = StageSummary {
        stage: 2,
        token_budget: plan2.token_budget,
        rounds: rounds2,
        ..Default::default()
    };
    {
        let mut sampler = StageSampler::new(&pools2, &plan2, None).map_err(stage_ctx(Stage::SyntheticEnhancement, None))?;
        for round in 1..=rounds2 {
            let shard = sampler
                .sample_round(round, &BTreeMap::new())
                .map_err(stage_ctx(Stage::SyntheticEnhancement, Some(round)))?;
            stage2.realized_tokens += shard.total_tokens();
            stage2.shards.push(out.shard(&shard)?);
            records.extend(shard.records);
        }
        stage2.with_replacement_draws = sampler.with_replacement_draws();
    }
    summary.stages.push(stage2);

    write_reports(&mut out, cfg.total_budget, &records, &lang_mix)?;
    out.json("plans.json", &[&plan1, &plan2])?;
    summary.outputs = out.digests()?;
    util::write_json_pretty(&out.path("run_summary.json"), &summary)?;
    Ok(summary)
}

fn write_reports(out: &mut Outputs, total_budget: u64, records: &[ShardRecord], lang_mix: &BTreeMap<Language, LanguageMixture>) -> Result<()> {
    let comp = report::composition(records, total_budget);
    out.json("reports/composition.json", &comp)?;
    out.bytes("reports/composition.csv", report::composition_csv(&comp).as_bytes())?;
    out.bytes("reports/composition.txt", report::composition_text(&comp).as_bytes())?;
    for (lang, m) in lang_mix {
        out.bytes(
            &format!("reports/mixture_{}.csv", lang.as_str()),
            report::mixture_csv(&m.topics, &m.audit).as_bytes(),
        )?;
        out.bytes(
            &format!("reports/mixture_{}.txt", lang.as_str()),
            report::mixture_text(&m.topics, &m.audit).as_bytes(),
        )?;
    }
    Ok(())
}

/// Scores the Chinese training documents (through the sidecar cache) and
/// orders them.
fn build_curriculum(cfg: &PipelineConfig, train: &[Document], services: &Services, out: &Outputs) -> Result<CurriculumPlan> {
    let mut zh: Vec<Document> = train.iter().filter(|d| Pool::of(d) == Pool::Zh).cloned().collect();
    let strategy = cfg.stage1.curriculum.strategy;
    let seed = cfg.component_seed("curriculum");
    if let Some(sequence) = strategy.discipline_sequence() {
        return curriculum::order_by_discipline(&zh, &sequence, strategy, seed);
    }
    let scorer = services.scorer.as_ref().map(|s| s as &dyn PplScorer);
    curriculum::assign_ppl(&mut zh, scorer, Some(&out.path("ppl_cache.jsonl"))).map_err(|e| e.context("scoring curriculum documents"))?;
    curriculum::plan_by_ppl(&zh, cfg.stage1.curriculum.k, strategy, seed)
}

pub fn synthesis_options(sc: &SynthesisConfig) -> SynthesisOptions {
    SynthesisOptions {
        model: sc.model.clone(),
        temperature: sc.temperature,
        max_tokens: sc.max_tokens,
        wave_size: sc.wave_size,
        attempts_per_pair: sc.attempts_per_pair,
        strict: sc.strict,
        created_at: sc.created_at.clone().unwrap_or_else(synthesis::default_created_at),
        ..SynthesisOptions::default()
    }
}

/// Scientific pairs per configured discipline, then code pairs.
pub fn run_synthesis(
    cfg: &PipelineConfig,
    sc: &SynthesisConfig,
    seed_corpus: &[Document],
    services: &Services,
) -> Result<(Vec<QaPair>, Vec<QaPair>, Vec<SynthesisReport>)> {
    let wants = sc.quotas.values().any(|q| *q > 0) || sc.code_quota > 0;
    if !wants {
        return Ok(Default::default());
    }
    let chat = services
        .chat
        .as_ref()
        .ok_or_else(|| Error::config("synthesis quotas are set but no chat endpoint is configured"))?;
    let opts = synthesis_options(sc);
    let base_seed = cfg.component_seed("synthesis");
    let lists = match &sc.domains_path {
        Some(p) => DomainLists::load(p)?,
        None => DomainLists::default(),
    };
    let seeds = synthesis::filter_seed_corpus(seed_corpus, &lists);
    let mut sci = Vec::new();
    let mut reports = Vec::new();
    for (disc, quota) in &sc.quotas {
        if *quota == 0 {
            continue;
        }
        let pool = seeds.by_discipline.get(disc).map_or(&[][..], Vec::as_slice);
        let run = synthesis::synth_sci(pool, *disc, chat, *quota as usize, util::derive_seed(base_seed, &[disc.as_str()]), &opts)
            .map_err(|e| e.context(format!("{disc} synthesis")))?;
        reports.push(run.report);
        sci.extend(run.pairs);
    }
    let mut code = Vec::new();
    if sc.code_quota > 0 {
        let problems = synthesis::load_seed_problems(sc.code_seed_path.as_deref().expect("validated"))?;
        let run = synthesis::synth_code(
            &problems,
            chat,
            sc.k_demos,
            sc.code_quota as usize,
            util::derive_seed(base_seed, &[Discipline::Code.as_str()]),
            &opts,
        )
        .map_err(|e| e.context("code synthesis"))?;
        reports.push(run.report);
        code = run.pairs;
    }
    Ok((sci, code, reports))
}
