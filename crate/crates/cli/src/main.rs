use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use cpt_curate::clients::{CassetteMode, ChatClient, Endpoint, EndpointConfig, PplScorer, ScoreClient};
use cpt_curate::config::PipelineConfig;
use cpt_curate::corpus::{self, Document, IngestMode, Language, Source, TokenCounter};
use cpt_curate::corruption::{self, CorruptionSpec, Corruptor, Lexicon};
use cpt_curate::curriculum::{self, Strategy};
use cpt_curate::mixture::{self, MixtureState, PplSnapshot};
use cpt_curate::pipeline::{self, Services};
use cpt_curate::planner::{self, PlanOverrides, Pools, Stage, StageSampler};
use cpt_curate::report;
use cpt_curate::synthesis::{self, Discipline, DomainLists, SynthesisOptions};
use cpt_curate::topic::{self, AnnotateOptions, Classifier, LexiconClassifier, TopicTaxonomy};
use cpt_curate::{util, Error, ErrorKind, Result};

#[derive(Parser, Debug)]
#[command(name = "cpt-curate", version, about = "Data curation for continual pre-training")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print one JSON object per line on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads for every internal pool.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override the cassette mode of every endpoint that has a cassette.
    #[arg(long, global = true, value_parser = parse_cassette_mode)]
    cassette_mode: Option<CassetteMode>,
}

fn parse_cassette_mode(s: &str) -> std::result::Result<CassetteMode, String> {
    match s {
        "off" => Ok(CassetteMode::Off),
        "record" => Ok(CassetteMode::Record),
        "replay" => Ok(CassetteMode::Replay),
        other => Err(format!("expected off, record or replay, got {other:?}")),
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a JSONL corpus file and write normalized, token-counted documents.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        language: Language,
        #[arg(long)]
        source: Source,
        /// Skip malformed lines instead of failing.
        #[arg(long)]
        lenient: bool,
        /// whitespace, bytes4 or vocab:<path>
        #[arg(long, default_value = "bytes4")]
        counter: String,
    },
    /// Document and token counts per (language, source).
    Stats {
        /// Normalized document files; defaults to the config corpora.
        #[arg(long)]
        input: Vec<PathBuf>,
    },
    /// Label documents with topics using the keyword lexicon or the classifier endpoint.
    Classify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        keywords: Option<PathBuf>,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
    },
    /// Label documents with topics through the chat endpoint.
    Annotate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long, default_value = "gpt-4")]
        model: String,
        /// Chat endpoint base URL; overrides the config.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Hold out a per-topic validation set.
    SplitVal {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = corpus::DEFAULT_VALIDATION_PER_TOPIC)]
        per_topic: usize,
    },
    /// Attach PPL scores from the scoring endpoint (with a sidecar cache).
    Score {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Scoring endpoint base URL; overrides the config.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value_t = cpt_curate::clients::DEFAULT_SCORE_BATCH)]
        batch: usize,
    },
    /// Advance a topic mixture state by one round.
    MixtureStep {
        #[arg(long)]
        prev: PathBuf,
        #[arg(long)]
        cur: PathBuf,
        #[arg(long)]
        state: PathBuf,
        /// Append the audit record to this JSONL file.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Order documents into a curriculum plan.
    Curriculum {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = curriculum::DEFAULT_BINS)]
        k: usize,
        #[arg(long, default_value = "LH")]
        strategy: Strategy,
    },
    /// Synthesize scientific QA pairs from seed pages.
    SynthSci {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        discipline: Discipline,
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        domains: Option<PathBuf>,
        /// Use every input document as a seed, skipping domain filtering.
        #[arg(long)]
        all_seeds: bool,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        created_at: Option<String>,
        #[arg(long)]
        strict: bool,
    },
    /// Synthesize code QA pairs from seed problems.
    SynthCode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value_t = synthesis::DEFAULT_K_DEMOS)]
        k_demos: usize,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        created_at: Option<String>,
    },
    /// Apply number, noun and adjective corruption to documents.
    Corrupt {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long, default_value_t = corruption::DEFAULT_TOP_K)]
        top_k: usize,
        /// Write per-document change reports here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Show stage budgets, rounds and per-source targets.
    Plan {
        #[arg(long)]
        total: Option<u64>,
        #[arg(long)]
        round_tokens: Option<u64>,
    },
    /// Sample one stage's rounds from token-counted documents into shards.
    Sample {
        #[arg(long)]
        input: Vec<PathBuf>,
        #[arg(long)]
        stage: Stage,
        #[arg(long)]
        total: Option<u64>,
        #[arg(long)]
        round_tokens: Option<u64>,
        /// Mixture state files, one per language (topics are split by them).
        #[arg(long)]
        mixture: Vec<PathBuf>,
        #[arg(long)]
        curriculum: Option<PathBuf>,
        /// Disable the topic mixture and curriculum regardless of stage.
        #[arg(long)]
        uniform: bool,
    },
    /// Run the whole pipeline from a config.
    Run,
    /// Render composition and mixture reports from a run directory.
    Report {
        /// Run output directory.
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = cli.global.workers {
        if let Err(e) = rayon_pool(n) {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Service => 3,
            })
        }
    }
}

fn rayon_pool(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::config("--workers must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(e.to_string()))
}

fn load_config(g: &Global) -> Result<Option<PipelineConfig>> {
    let Some(path) = &g.config else { return Ok(None) };
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(m) = g.cassette_mode {
        cfg.override_cassette_mode(m);
    }
    Ok(Some(cfg))
}

fn require_config(g: &Global) -> Result<PipelineConfig> {
    load_config(g)?.ok_or_else(|| Error::config("this command needs --config"))
}

fn require_out(g: &Global) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| Error::config("this command needs --out"))
}

fn seed_for(g: &Global, cfg: Option<&PipelineConfig>, component: &str) -> u64 {
    match (g.seed, cfg) {
        (_, Some(c)) => c.component_seed(component),
        (Some(s), None) => util::derive_seed(s, &[component]),
        (None, None) => util::derive_seed(0, &[component]),
    }
}

/// Endpoint from a URL override or the named config section.
fn endpoint(
    g: &Global,
    url: &Option<String>,
    cfg: Option<&PipelineConfig>,
    pick: fn(&PipelineConfig) -> &Option<EndpointConfig>,
    what: &str,
) -> Result<Endpoint> {
    let ec = match (url, cfg.and_then(|c| pick(c).clone())) {
        (Some(u), _) => EndpointConfig::new(u.clone()),
        (None, Some(ec)) => ec,
        (None, None) => return Err(Error::config(format!("no {what} endpoint: pass --endpoint or configure endpoints.{what}"))),
    };
    let mut ec = ec;
    if let Some(m) = g.cassette_mode {
        if ec.cassette.is_some() {
            ec.cassette_mode = m;
        }
    }
    Ok(Endpoint::from_config(ec)?)
}

fn read_docs(paths: &[PathBuf]) -> Result<Vec<Document>> {
    let mut out = Vec::new();
    for p in paths {
        let docs: Vec<Document> = util::read_jsonl(p)?;
        for d in &docs {
            d.validate().map_err(|e| e.context(p.display().to_string()))?;
        }
        out.extend(docs);
    }
    Ok(out)
}

fn emit(g: &Global, value: Value, human: impl FnOnce() -> String) {
    if g.json {
        println!("{value}");
    } else {
        print!("{}", human());
    }
}

fn taxonomy_from(path: &Option<PathBuf>, cfg: Option<&PipelineConfig>) -> Result<TopicTaxonomy> {
    match (path, cfg) {
        (Some(p), _) => TopicTaxonomy::load(p),
        (None, Some(c)) => pipeline::taxonomy(c),
        (None, None) => Ok(TopicTaxonomy::standard()),
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Ingest {
            input,
            language,
            source,
            lenient,
            counter,
        } => {
            let mode = if *lenient { IngestMode::Lenient } else { IngestMode::Strict };
            let (mut docs, rep) = corpus::ingest(input, *language, *source, mode)?;
            let counter = TokenCounter::from_spec(counter, None)?;
            corpus::count_all(&mut docs, &counter);
            if let Some(out) = &g.out {
                util::write_jsonl(out, &docs)?;
            }
            let tokens: u64 = docs.iter().map(Document::tokens).sum();
            emit(g, json!({"command": "ingest", "accepted": rep.accepted, "rejected": rep.rejected, "tokens": tokens}), || {
                let mut s = format!("accepted {} documents ({tokens} tokens), rejected {}\n", rep.accepted, rep.rejected.len());
                for r in &rep.rejected {
                    s.push_str(&format!("  line {}: {}\n", r.line, r.message));
                }
                s
            });
        }
        Command::Stats { input } => {
            let cfg = load_config(g)?;
            let docs = if input.is_empty() {
                let cfg = cfg.as_ref().ok_or_else(|| Error::config("stats needs --input or --config"))?;
                let mut d = pipeline::load_corpora(cfg)?;
                corpus::count_all(&mut d, &pipeline::token_counter(cfg)?);
                d
            } else {
                read_docs(input)?
            };
            let stats = corpus::source_stats(&docs)?;
            emit(g, json!({"command": "stats", "stats": stats}), || {
                let mut s = format!("{:<8} {:<16} {:>10} {:>14}\n", "language", "source", "documents", "tokens");
                for c in &stats.cells {
                    s.push_str(&format!("{:<8} {:<16} {:>10} {:>14}\n", c.language.as_str(), c.source.as_str(), c.documents, c.tokens));
                }
                s.push_str(&format!("{:<25} {:>10} {:>14}\n", "total", stats.total_documents, stats.total_tokens));
                s
            });
        }
        Command::Classify { input, keywords, taxonomy } => {
            let cfg = load_config(g)?;
            let tax = taxonomy_from(taxonomy, cfg.as_ref())?;
            let classifier = match (keywords, &cfg) {
                (Some(k), _) => Classifier::Lexicon(LexiconClassifier::load(k, tax)?),
                (None, Some(c)) => {
                    let mut services = Services::from_config(c)?;
                    pipeline::build_classifier(c, tax, &mut services)?
                        .ok_or_else(|| Error::config("no keyword file or classifier endpoint configured"))?
                }
                (None, None) => return Err(Error::config("classify needs --keywords or --config")),
            };
            let mut docs = read_docs(std::slice::from_ref(input))?;
            let labels = topic::classify_batch(&docs, &classifier)?;
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for (d, l) in docs.iter_mut().zip(&labels) {
                d.topic = Some(l.label.clone());
                *counts.entry(l.label.clone()).or_default() += 1;
            }
            if let Classifier::Remote { client, .. } = &classifier {
                client.endpoint().flush()?;
            }
            util::write_jsonl(require_out(g)?, &docs)?;
            emit(g, json!({"command": "classify", "labels": counts}), || {
                counts.iter().map(|(k, v)| format!("{k}\t{v}\n")).collect()
            });
        }
        Command::Annotate {
            input,
            taxonomy,
            model,
            endpoint: url,
        } => {
            let cfg = load_config(g)?;
            let tax = taxonomy_from(taxonomy, cfg.as_ref())?;
            let client = ChatClient::new(endpoint(g, url, cfg.as_ref(), |c| &c.endpoints.chat, "chat")?);
            let docs = read_docs(std::slice::from_ref(input))?;
            let opts = AnnotateOptions {
                model: model.clone(),
                ..Default::default()
            };
            let records = topic::annotate_batch(&docs, &client, &tax, &opts)?;
            client.endpoint().flush()?;
            util::write_jsonl(require_out(g)?, &records)?;
            let labeled = records.iter().filter(|r| r.label.is_some()).count();
            emit(g, json!({"command": "annotate", "records": records.len(), "labeled": labeled}), || {
                format!("{labeled} of {} documents labeled\n", records.len())
            });
        }
        Command::SplitVal { input, per_topic } => {
            let cfg = load_config(g)?;
            let docs = read_docs(std::slice::from_ref(input))?;
            let split = corpus::split_validation(docs, *per_topic, seed_for(g, cfg.as_ref(), "validation"))?;
            let out = require_out(g)?;
            util::write_jsonl(&out.join("train.jsonl"), &split.train)?;
            util::write_jsonl(&out.join("validation.jsonl"), &split.validation)?;
            emit(
                g,
                json!({"command": "split-val", "train": split.train.len(), "validation": split.validation.len(), "warnings": split.warnings}),
                || format!("train {} / validation {}\n", split.train.len(), split.validation.len()),
            );
        }
        Command::Score {
            input,
            cache,
            endpoint: url,
            batch,
        } => {
            let cfg = load_config(g)?;
            let scorer = ScoreClient::new(endpoint(g, url, cfg.as_ref(), |c| &c.endpoints.scorer, "scorer")?, *batch);
            let mut docs = read_docs(std::slice::from_ref(input))?;
            let rep = curriculum::assign_ppl(&mut docs, Some(&scorer as &dyn PplScorer), cache.as_deref())?;
            scorer.endpoint().flush()?;
            util::write_jsonl(require_out(g)?, &docs)?;
            emit(g, json!({"command": "score", "report": rep}), || {
                format!(
                    "{} scored, {} from cache, {} already scored\n",
                    rep.newly_scored, rep.from_cache, rep.already_scored
                )
            });
        }
        Command::MixtureStep { prev, cur, state, audit } => {
            let st = MixtureState::load(state)?;
            let p = PplSnapshot::load(prev, &st.topics)?;
            let c = PplSnapshot::load(cur, &st.topics)?;
            let (next, rec) = mixture::mixture_step(&st, &p, &c)?;
            next.save(g.out.as_deref().unwrap_or(state))?;
            if let Some(a) = audit {
                let mut lines: Vec<mixture::AuditRecord> = if a.exists() { util::read_jsonl(a)? } else { Vec::new() };
                lines.push(rec.clone());
                util::write_jsonl(a, &lines)?;
            }
            emit(g, json!({"command": "mixture-step", "round": next.round, "topics": next.topics, "proportions": next.proportions, "f": rec.f}), || {
                next.topics
                    .iter()
                    .zip(&next.proportions)
                    .map(|(t, r)| format!("{t}\t{r}\n"))
                    .collect()
            });
        }
        Command::Curriculum { input, k, strategy } => {
            let cfg = load_config(g)?;
            let docs = read_docs(std::slice::from_ref(input))?;
            let seed = seed_for(g, cfg.as_ref(), "curriculum");
            let plan = match strategy.discipline_sequence() {
                Some(seq) => curriculum::order_by_discipline(&docs, &seq, *strategy, seed)?,
                None => curriculum::plan_by_ppl(&docs, *k, *strategy, seed)?,
            };
            plan.save(require_out(g)?)?;
            emit(g, json!({"command": "curriculum", "strategy": strategy.to_string(), "bins": plan.bin_stats}), || {
                plan.bin_stats
                    .iter()
                    .enumerate()
                    .map(|(i, b)| match b.mean_ppl {
                        Some(m) => format!("bin {i}\t{}\tmean ppl {m:.4}\n", b.count),
                        None => format!("bin {i}\t{}\n", b.count),
                    })
                    .collect()
            });
        }
        Command::SynthSci {
            input,
            discipline,
            budget,
            domains,
            all_seeds,
            endpoint: url,
            created_at,
            strict,
        } => {
            let cfg = load_config(g)?;
            let client = ChatClient::new(endpoint(g, url, cfg.as_ref(), |c| &c.endpoints.chat, "chat")?);
            let docs = read_docs(std::slice::from_ref(input))?;
            let seeds = if *all_seeds {
                docs
            } else {
                let lists = match domains {
                    Some(p) => DomainLists::load(p)?,
                    None => DomainLists::default(),
                };
                synthesis::filter_seed_corpus(&docs, &lists)
                    .by_discipline
                    .remove(discipline)
                    .unwrap_or_default()
            };
            let mut opts = cfg
                .as_ref()
                .and_then(|c| c.stage2.synthesis.as_ref())
                .map(pipeline::synthesis_options)
                .unwrap_or_default();
            if let Some(t) = created_at {
                opts.created_at = t.clone();
            }
            opts.strict |= *strict;
            let base = seed_for(g, cfg.as_ref(), "synthesis");
            let run = synthesis::synth_sci(&seeds, *discipline, &client, *budget, util::derive_seed(base, &[discipline.as_str()]), &opts)?;
            client.endpoint().flush()?;
            write_qa(g, &run)?;
            emit(g, json!({"command": "synth-sci", "report": run.report}), || format!("{:?}\n", run.report));
        }
        Command::SynthCode {
            input,
            budget,
            k_demos,
            endpoint: url,
            created_at,
        } => {
            let cfg = load_config(g)?;
            let client = ChatClient::new(endpoint(g, url, cfg.as_ref(), |c| &c.endpoints.chat, "chat")?);
            let problems = synthesis::load_seed_problems(input)?;
            let mut opts: SynthesisOptions = cfg
                .as_ref()
                .and_then(|c| c.stage2.synthesis.as_ref())
                .map(pipeline::synthesis_options)
                .unwrap_or_default();
            if let Some(t) = created_at {
                opts.created_at = t.clone();
            }
            let base = seed_for(g, cfg.as_ref(), "synthesis");
            let run = synthesis::synth_code(&problems, &client, *k_demos, *budget, util::derive_seed(base, &[Discipline::Code.as_str()]), &opts)?;
            client.endpoint().flush()?;
            write_qa(g, &run)?;
            emit(g, json!({"command": "synth-code", "report": run.report}), || format!("{:?}\n", run.report));
        }
        Command::Corrupt {
            input,
            ratio,
            lexicon,
            top_k,
            report: report_path,
        } => {
            let cfg = load_config(g)?;
            let docs = read_docs(std::slice::from_ref(input))?;
            let lex = Lexicon::load(lexicon)?;
            let freq = corruption::document_frequencies(docs.iter().map(|d| d.text.as_str()));
            let spec = CorruptionSpec {
                ratio: *ratio,
                seed: seed_for(g, cfg.as_ref(), "corruption"),
                top_k_frequent: *top_k,
                ..Default::default()
            };
            let corruptor = Corruptor::new(spec, &lex, &freq)?;
            let results = corruptor.corrupt_corpus(&docs);
            let candidates: usize = results.iter().map(|r| r.1.candidates).sum();
            let changes: usize = results.iter().map(|r| r.1.changes.len()).sum();
            let (out_docs, reports): (Vec<_>, Vec<_>) = results.into_iter().unzip();
            util::write_jsonl(require_out(g)?, &out_docs)?;
            if let Some(p) = report_path {
                util::write_jsonl(p, &reports)?;
            }
            emit(g, json!({"command": "corrupt", "candidates": candidates, "changes": changes}), || {
                format!("replaced {changes} of {candidates} candidates\n")
            });
        }
        Command::Plan { total, round_tokens } => {
            let cfg = load_config(g)?;
            let total = total
                .or(cfg.as_ref().map(|c| c.total_budget))
                .ok_or_else(|| Error::config("plan needs --total or --config"))?;
            let mut plans = Vec::new();
            for stage in Stage::ALL {
                let mut o = match (&cfg, stage) {
                    (Some(c), Stage::BilingualAdaptation) => c.stage1_overrides(),
                    (Some(c), Stage::SyntheticEnhancement) => c.stage2_overrides(),
                    (None, _) => PlanOverrides::default(),
                };
                if round_tokens.is_some() {
                    o.round_tokens = *round_tokens;
                }
                plans.push(planner::build_stage_plan(stage, total, &o)?);
            }
            let value: Vec<Value> = plans
                .iter()
                .map(|p| {
                    json!({
                        "stage": p.stage.number(),
                        "token_budget": p.token_budget,
                        "rounds": p.rounds(),
                        "round_tokens": p.round_tokens,
                        "language_ratios": p.language_ratios,
                        "source_targets": p.source_targets(),
                        "use_topic_mixture": p.use_topic_mixture,
                        "use_ppl_curriculum": p.use_ppl_curriculum,
                    })
                })
                .collect();
            if let Some(out) = &g.out {
                util::write_json_pretty(out, &plans)?;
            }
            emit(g, json!({"command": "plan", "stages": value}), || {
                let mut s = String::new();
                for p in &plans {
                    s.push_str(&format!("stage {}: {} tokens in {} rounds\n", p.stage.number(), p.token_budget, p.rounds()));
                    for (src, t) in p.source_targets() {
                        s.push_str(&format!("  {:<16} {t}\n", src.as_str()));
                    }
                }
                s
            });
        }
        Command::Sample {
            input,
            stage,
            total,
            round_tokens,
            mixture,
            curriculum: curriculum_path,
            uniform,
        } => {
            let cfg = load_config(g)?;
            let total = total
                .or(cfg.as_ref().map(|c| c.total_budget))
                .ok_or_else(|| Error::config("sample needs --total or --config"))?;
            let mut o = match (&cfg, stage) {
                (Some(c), Stage::BilingualAdaptation) => c.stage1_overrides(),
                (Some(c), Stage::SyntheticEnhancement) => c.stage2_overrides(),
                (None, _) => PlanOverrides {
                    seed: Some(seed_for(g, None, "plan")),
                    ..Default::default()
                },
            };
            if round_tokens.is_some() {
                o.round_tokens = *round_tokens;
            }
            if *uniform {
                o.use_topic_mixture = Some(false);
                o.use_ppl_curriculum = Some(false);
            }
            if mixture.is_empty() {
                o.use_topic_mixture = Some(false);
            }
            if curriculum_path.is_none() {
                o.use_ppl_curriculum = Some(false);
            }
            let plan = planner::build_stage_plan(*stage, total, &o)?;
            let pools = Pools::new(read_docs(input)?)?;
            let mut mixtures = BTreeMap::new();
            for p in mixture {
                let st = MixtureState::load(p)?;
                let lang = infer_language(&pools, &st).ok_or_else(|| Error::invalid(format!("{}: cannot tell which language this mixture covers", p.display())))?;
                mixtures.insert(lang, st);
            }
            let plan_c = curriculum_path.as_deref().map(curriculum::CurriculumPlan::load).transpose()?;
            let out = require_out(g)?;
            let mut sampler = StageSampler::new(&pools, &plan, plan_c.as_ref())?;
            let mut shards = Vec::new();
            for round in 1..=plan.rounds() {
                let shard = sampler.sample_round(round, &mixtures)?;
                shards.push(json!({"path": planner::write_shard(&shard, out)?, "tokens": shard.total_tokens(), "records": shard.records.len()}));
            }
            emit(g, json!({"command": "sample", "shards": shards, "with_replacement_draws": sampler.with_replacement_draws()}), || {
                format!("wrote {} shards to {}\n", shards.len(), out.display())
            });
        }
        Command::Run => {
            let cfg = require_config(g)?;
            let out = require_out(g)?;
            let summary = pipeline::run_pipeline(&cfg, out)?;
            emit(g, json!({"command": "run", "stages": summary.stages, "outputs": summary.outputs.len()}), || {
                let mut s = String::new();
                for st in &summary.stages {
                    s.push_str(&format!(
                        "stage {}: {} rounds, {} tokens (budget {}), {} with-replacement draws\n",
                        st.stage, st.rounds, st.realized_tokens, st.token_budget, st.with_replacement_draws
                    ));
                }
                s.push_str(&format!("{} files written to {}\n", summary.outputs.len(), out.display()));
                s
            });
        }
        Command::Report { dir } => {
            let cfg = load_config(g)?;
            let records = report::load_shard_records(&dir.join("shards"))?;
            let budget = cfg.as_ref().map_or_else(|| records.iter().map(|r| r.token_count).sum(), |c| c.total_budget);
            let comp = report::composition(&records, budget);
            let out = g.out.clone().unwrap_or_else(|| dir.join("reports"));
            util::write_bytes(&out.join("composition.csv"), report::composition_csv(&comp).as_bytes())?;
            util::write_bytes(&out.join("composition.txt"), report::composition_text(&comp).as_bytes())?;
            let mut text = report::composition_text(&comp);
            let mut audits = Vec::new();
            for lang in Language::ALL {
                let p = dir.join("audit").join(format!("mixture_{}.jsonl", lang.as_str()));
                if !p.exists() {
                    continue;
                }
                let (_, topics, steps) = report::read_audit(&p)?;
                util::write_bytes(&out.join(format!("mixture_{}.csv", lang.as_str())), report::mixture_csv(&topics, &steps).as_bytes())?;
                let t = report::mixture_text(&topics, &steps);
                util::write_bytes(&out.join(format!("mixture_{}.txt", lang.as_str())), t.as_bytes())?;
                text.push_str(&format!("\n{} topic mixture\n{t}", lang.as_str()));
                audits.push(json!({"language": lang, "topics": topics, "rounds": steps}));
            }
            emit(g, json!({"command": "report", "composition": comp, "mixtures": audits}), || text);
        }
    }
    Ok(())
}

fn write_qa(g: &Global, run: &synthesis::SynthesisRun) -> Result<()> {
    let out = require_out(g)?;
    util::write_jsonl(out, &run.pairs)?;
    if !run.failures.is_empty() {
        let mut p = out.as_os_str().to_owned();
        p.push(".failures.jsonl");
        util::write_jsonl(Path::new(&p), &run.failures)?;
    }
    Ok(())
}

/// The language whose topic-split documents carry the state's labels.
fn infer_language(pools: &Pools, state: &MixtureState) -> Option<Language> {
    let mut best = None;
    let mut best_hits = 0;
    for lang in Language::ALL {
        let hits = pools
            .docs()
            .iter()
            .filter(|d| d.language == lang && d.topic.as_ref().is_some_and(|t| state.topics.contains(t)))
            .count();
        if hits > best_hits {
            best_hits = hits;
            best = Some(lang);
        }
    }
    best
}
