//! Scientific QA synthesis from web seed snippets and code QA synthesis from
//! in-context demonstrations.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::clients::{ChatCompletion, ChatMessage, ChatRequest, ClientError};
use crate::corpus::{Document, Language, Source};
use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discipline {
    Mathematics,
    Physics,
    Chemistry,
    Biology,
    Astronomy,
    EarthScience,
    MedicalScience,
    ComputerScience,
    GeneralEducation,
    Code,
}

impl Discipline {
    pub const SCIENTIFIC: [Discipline; 9] = [
        Discipline::Mathematics,
        Discipline::Physics,
        Discipline::Chemistry,
        Discipline::Biology,
        Discipline::Astronomy,
        Discipline::EarthScience,
        Discipline::MedicalScience,
        Discipline::ComputerScience,
        Discipline::GeneralEducation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Discipline::Mathematics => "mathematics",
            Discipline::Physics => "physics",
            Discipline::Chemistry => "chemistry",
            Discipline::Biology => "biology",
            Discipline::Astronomy => "astronomy",
            Discipline::EarthScience => "earth_science",
            Discipline::MedicalScience => "medical_science",
            Discipline::ComputerScience => "computer_science",
            Discipline::GeneralEducation => "general_education",
            Discipline::Code => "code",
        }
    }

    /// Name as it appears inside prompts.
    pub fn display_name(self) -> String {
        self.as_str().replace('_', " ")
    }

    /// Number of synthesized QA pairs in the reference run.
    pub fn reference_count(self) -> u64 {
        match self {
            Discipline::Mathematics => 207_448,
            Discipline::Physics => 241_516,
            Discipline::Chemistry => 30_838,
            Discipline::Biology => 25_103,
            Discipline::Astronomy => 24_060,
            Discipline::EarthScience => 7_936,
            Discipline::MedicalScience => 8_199,
            Discipline::ComputerScience => 475_566,
            Discipline::GeneralEducation => 572_478,
            Discipline::Code => 1_385_696,
        }
    }
}

impl fmt::Display for Discipline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Discipline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        Discipline::SCIENTIFIC
            .into_iter()
            .chain([Discipline::Code])
            .find(|d| d.as_str() == key)
            .ok_or_else(|| Error::invalid(format!("unknown discipline {s:?}")))
    }
}

/// Per-discipline quotas scaled from the reference counts, rounded to the
/// nearest integer.
pub fn scaled_quotas(scale: f64) -> BTreeMap<Discipline, u64> {
    Discipline::SCIENTIFIC
        .into_iter()
        .chain([Discipline::Code])
        .map(|d| (d, (d.reference_count() as f64 * scale).round() as u64))
        .collect()
}

/// Domain names per discipline used to select seed pages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainLists(pub BTreeMap<Discipline, Vec<String>>);

impl Default for DomainLists {
    fn default() -> Self {
        let entries: [(Discipline, &[&str]); 9] = [
            (Discipline::Mathematics, &["math.stackexchange.com", "mathoverflow.net"]),
            (Discipline::Physics, &["physicsforums.com", "physics.stackexchange.com"]),
            (Discipline::Chemistry, &["chemistry.stackexchange.com"]),
            (Discipline::Biology, &["biology.stackexchange.com"]),
            (Discipline::Astronomy, &["astronomy.stackexchange.com"]),
            (Discipline::EarthScience, &["earthscience.stackexchange.com"]),
            (Discipline::MedicalScience, &["medicalsciences.stackexchange.com"]),
            (Discipline::ComputerScience, &["cs.stackexchange.com"]),
            (Discipline::GeneralEducation, &[]),
        ];
        DomainLists(
            entries
                .into_iter()
                .map(|(d, hosts)| (d, hosts.iter().map(|h| h.to_string()).collect()))
                .collect(),
        )
    }
}

impl DomainLists {
    pub fn load(path: &Path) -> Result<Self> {
        let raw: BTreeMap<String, Vec<String>> = util::read_json(path)?;
        let mut out = BTreeMap::new();
        for (k, v) in raw {
            out.insert(k.parse()?, v.into_iter().map(|d| d.trim().to_lowercase()).collect());
        }
        Ok(DomainLists(out))
    }
}

fn host_matches(host: &str, domain: &str) -> bool {
    host == domain || (host.len() > domain.len() && host.ends_with(domain) && host[..host.len() - domain.len()].ends_with('.'))
}

#[derive(Debug, Clone, Default)]
pub struct SeedSets {
    pub by_discipline: BTreeMap<Discipline, Vec<Document>>,
    pub warnings: Vec<String>,
}

/// Selects seed pages per discipline by URL host. A host matches a listed
/// domain exactly or as a subdomain of it; pages may join several
/// disciplines.
pub fn filter_seed_corpus(corpus: &[Document], lists: &DomainLists) -> SeedSets {
    let mut out = SeedSets::default();
    for doc in corpus {
        let Some(raw) = doc.url.as_deref() else { continue };
        let host = match url::Url::parse(raw).ok().and_then(|u| u.host_str().map(str::to_lowercase)) {
            Some(h) => h.trim_end_matches('.').to_owned(),
            None => {
                let w = format!("{}: unparsable url {raw:?}", doc.id);
                log::warn!("{w}");
                out.warnings.push(w);
                continue;
            }
        };
        for (disc, domains) in &lists.0 {
            if domains.iter().any(|d| host_matches(&host, d)) {
                out.by_discipline.entry(*disc).or_default().push(doc.clone());
            }
        }
    }
    out
}

pub const DEFAULT_SNIPPET_MAX_CHARS: usize = 2000;
pub const DEFAULT_SNIPPET_MIN_CHARS: usize = 200;

/// Longest prefix of at most `max_chars` characters ending at a paragraph
/// break past the midpoint, or a hard cut when there is none.
pub fn extract_snippet(text: &str, max_chars: usize, min_chars: usize) -> Result<String> {
    let n = text.chars().count();
    if n < min_chars {
        return Err(Error::invalid(format!("seed text has {n} characters, need at least {min_chars}")));
    }
    if n <= max_chars {
        return Ok(text.to_owned());
    }
    let cut = text.char_indices().nth(max_chars).map_or(text.len(), |(b, _)| b);
    let half = text.char_indices().nth(max_chars / 2).map_or(text.len(), |(b, _)| b);
    let snippet = match text[..cut].rfind("\n\n") {
        Some(b) if b > half => &text[..b],
        _ => &text[..cut],
    };
    Ok(snippet.to_owned())
}

pub(crate) const SCI_OUTPUT_INSTRUCTION: &str = "Present your output in two distinct sections: [Problem] and [Solution].";
pub(crate) const SCI_CONTENT_HEADER_SUFFIX: &str = " Content\n\n";

pub fn render_sci_prompt(discipline: Discipline, snippet: &str) -> String {
    let d = discipline.display_name();
    format!(
        "Instruction\n\n\
Please gain inspiration from the following {d} content to create a high-quality {d} problem and solution. {SCI_OUTPUT_INSTRUCTION}\n\n\
{d}{SCI_CONTENT_HEADER_SUFFIX}{snippet}\n\n\
Guidelines\n\n\
[Problem]: This should be **completely self-contained**, providing all the contextual information one needs to understand and solve the problem.\n\n\
[Solution]: Present a comprehensive, step-by-step solution that solves the problem **correctly** and educates the student, around 250-350 words long. Clearly articulate the reasoning and methods used at each step, providing insight into the problem-solving process. Take care to format any equations properly using LaTeX or appropriate notation.\n"
    )
}

pub(crate) const CODE_PROBLEM_CUE: &str = "Write one new programming problem";
pub(crate) const CODE_SOLUTION_CUE: &str = "Solve the following programming problem.";

/// Problem-generation prompt for the code path. Not a published template;
/// override through configuration if needed.
pub fn render_code_problem_prompt(demos: &[&SeedProblem]) -> String {
    let mut s = format!("Here are {} programming problems:\n\n", demos.len());
    for (i, d) in demos.iter().enumerate() {
        s.push_str(&format!("Problem {}:\n{}\n\n", i + 1, d.problem.trim()));
    }
    s.push_str(CODE_PROBLEM_CUE);
    s.push_str(
        " that is inspired by the problems above but is not a copy of any of them. \
It must be self-contained, state the input and output precisely, and include constraints. \
Return only the problem statement.",
    );
    s
}

pub fn render_code_solution_prompt(problem: &str) -> String {
    format!(
        "{CODE_SOLUTION_CUE} Explain the approach step by step, then give a complete, correct implementation.\n\n{}",
        problem.trim()
    )
}

static PROBLEM_MARKER: LazyLock<Regex> = LazyLock::new(|| marker_regex("problem"));
static SOLUTION_MARKER: LazyLock<Regex> = LazyLock::new(|| marker_regex("solution"));

// `[Problem]` anywhere (optionally wrapped in markdown), or a line holding
// only the bare word with optional heading/emphasis and colon.
fn marker_regex(word: &str) -> Regex {
    Regex::new(&format!(
        r"(?im)(?:[*_#]*\[\s*{word}\s*\][*_]*:?|^[ \t>]*(?:#{{1,6}}[ \t]*)?[*_]{{0,3}}{word}[*_]{{0,3}}[ \t]*:?[ \t]*[*_]{{0,3}}[ \t]*$)"
    ))
    .expect("static regex")
}

pub const SOLUTION_WORDS_MIN: usize = 250;
pub const SOLUTION_WORDS_MAX: usize = 350;

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedQa {
    pub problem: String,
    pub solution: String,
    /// Solution word count falls outside 250..=350.
    pub length_warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParseFailure {
    pub reason: String,
    pub raw: String,
}

/// Splits a completion at the first problem marker and the first solution
/// marker after it.
pub fn parse_qa(completion: &str, strict: bool) -> std::result::Result<ParsedQa, ParseFailure> {
    let fail = |reason: &str| ParseFailure {
        reason: reason.to_owned(),
        raw: completion.to_owned(),
    };
    let p = PROBLEM_MARKER.find(completion).ok_or_else(|| fail("missing [Problem] marker"))?;
    let rest = &completion[p.end()..];
    let s = SOLUTION_MARKER.find(rest).ok_or_else(|| fail("missing [Solution] marker"))?;
    let problem = rest[..s.start()].trim();
    let solution = rest[s.end()..].trim();
    if problem.is_empty() {
        return Err(fail("empty problem"));
    }
    if solution.is_empty() {
        return Err(fail("empty solution"));
    }
    let words = solution.split_whitespace().count();
    let length_warning = !(SOLUTION_WORDS_MIN..=SOLUTION_WORDS_MAX).contains(&words);
    if strict && length_warning {
        return Err(fail(&format!("solution has {words} words, outside {SOLUTION_WORDS_MIN}-{SOLUTION_WORDS_MAX}")));
    }
    Ok(ParsedQa {
        problem: problem.to_owned(),
        solution: solution.to_owned(),
        length_warning,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub id: String,
    pub discipline: Discipline,
    pub problem: String,
    pub solution: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_doc_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demo_ids: Option<Vec<String>>,
    pub model_id: String,
    pub created_at: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub length_warning: bool,
}

impl QaPair {
    pub fn validate(&self) -> Result<()> {
        if self.problem.trim().is_empty() || self.solution.trim().is_empty() {
            return Err(Error::invalid(format!("qa {}: empty problem or solution", self.id)));
        }
        if self.seed_doc_id.is_some() == self.demo_ids.is_some() {
            return Err(Error::invalid(format!(
                "qa {}: exactly one of seed_doc_id and demo_ids must be set",
                self.id
            )));
        }
        Ok(())
    }
}

pub const DEFAULT_SEPARATOR: &str = "\n\n";

/// Training document for a QA pair: problem and solution joined by
/// `separator`, tagged synthetic English with the discipline as topic.
pub fn qa_to_training_text(qa: &QaPair, separator: &str) -> Document {
    let mut d = Document::new(
        format!("qa:{}", qa.id),
        format!("{}{separator}{}", qa.problem, qa.solution),
        Language::En,
        Source::Synthetic,
    );
    d.topic = Some(qa.discipline.as_str().to_owned());
    d
}

/// Marker-framed rendering that `parse_qa` maps back to the same pair.
pub fn qa_to_marked_text(qa: &QaPair) -> String {
    format!("[Problem]\n{}\n[Solution]\n{}", qa.problem, qa.solution)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedProblem {
    pub id: String,
    pub problem: String,
}

pub fn load_seed_problems(path: &Path) -> Result<Vec<SeedProblem>> {
    util::read_jsonl(path)
}

#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Requests issued per wave. Part of the output identity: changing it
    /// can change which attempts run, thread count never does.
    pub wave_size: usize,
    /// Attempt cap as a multiple of the budget.
    pub attempts_per_pair: usize,
    pub snippet_max_chars: usize,
    pub snippet_min_chars: usize,
    pub strict: bool,
    pub created_at: String,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            model: "mistralai/Mistral-7B-Instruct-v0.3".into(),
            temperature: 0.7,
            max_tokens: 1024,
            wave_size: 4,
            attempts_per_pair: 4,
            snippet_max_chars: DEFAULT_SNIPPET_MAX_CHARS,
            snippet_min_chars: DEFAULT_SNIPPET_MIN_CHARS,
            strict: false,
            created_at: default_created_at(),
        }
    }
}

/// `SOURCE_DATE_EPOCH` when set, otherwise the current time.
pub fn default_created_at() -> String {
    let now = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0))
        .unwrap_or_else(chrono::Utc::now);
    now.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SynthesisReport {
    pub discipline: Option<Discipline>,
    pub requested: usize,
    pub emitted: usize,
    pub attempts: usize,
    pub parse_failures: usize,
    pub duplicates: usize,
    pub request_failures: usize,
    pub length_warnings: usize,
    pub skipped_seeds: usize,
}

impl SynthesisReport {
    pub fn failure_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            (self.attempts - self.emitted) as f64 / self.attempts as f64
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SynthesisRun {
    pub pairs: Vec<QaPair>,
    pub failures: Vec<ParseFailure>,
    pub report: SynthesisReport,
}

enum AttemptOutcome {
    Parsed {
        problem: String,
        solution: String,
        length_warning: bool,
        provenance: Provenance,
    },
    ParseFailed(ParseFailure),
    RequestFailed(String),
}

#[derive(Clone)]
enum Provenance {
    Seed(String),
    Demos(Vec<String>),
}

impl Provenance {
    fn key(&self) -> String {
        match self {
            Provenance::Seed(id) => format!("seed:{id}"),
            Provenance::Demos(ids) => format!("demos:{}", ids.join(",")),
        }
    }
}

fn normalize_problem(p: &str) -> String {
    p.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Terminal client errors (auth, bad request, cassette miss) abort the run;
/// exhausted retries and malformed bodies only fail the attempt.
fn classify_request_error(e: ClientError) -> Result<AttemptOutcome> {
    match e {
        ClientError::Http { .. } | ClientError::Config(_) | ClientError::CassetteMiss { .. } | ClientError::Cassette { .. } => {
            Err(e.into())
        }
        other => Ok(AttemptOutcome::RequestFailed(other.to_string())),
    }
}

fn chat(llm: &dyn ChatCompletion, opts: &SynthesisOptions, prompt: String) -> std::result::Result<String, ClientError> {
    llm.chat_complete(&ChatRequest {
        model: opts.model.clone(),
        messages: vec![ChatMessage::user(prompt)],
        temperature: opts.temperature,
        max_tokens: opts.max_tokens,
    })
}

/// Runs attempts in fixed-size waves (parallel within a wave) and commits
/// results in attempt order until `budget` pairs are emitted.
fn drive<F>(
    budget: usize,
    opts: &SynthesisOptions,
    discipline: Discipline,
    id_prefix: &str,
    attempt: F,
) -> Result<SynthesisRun>
where
    F: Fn(usize) -> Result<AttemptOutcome> + Sync,
{
    let mut run = SynthesisRun {
        report: SynthesisReport {
            discipline: Some(discipline),
            requested: budget,
            ..Default::default()
        },
        ..Default::default()
    };
    if budget == 0 {
        return Ok(run);
    }
    let max_attempts = budget.saturating_mul(opts.attempts_per_pair.max(1));
    let wave = opts.wave_size.max(1);
    let mut seen = HashSet::new();
    let mut next = 0usize;
    while run.pairs.len() < budget && next < max_attempts {
        let end = (next + wave).min(max_attempts);
        let outcomes: Vec<Result<AttemptOutcome>> = (next..end).into_par_iter().map(&attempt).collect();
        for outcome in outcomes {
            if run.pairs.len() >= budget {
                break;
            }
            run.report.attempts += 1;
            match outcome? {
                AttemptOutcome::Parsed {
                    problem,
                    solution,
                    length_warning,
                    provenance,
                } => {
                    if !seen.insert((provenance.key(), normalize_problem(&problem))) {
                        run.report.duplicates += 1;
                        continue;
                    }
                    run.report.length_warnings += usize::from(length_warning);
                    let (seed_doc_id, demo_ids) = match provenance {
                        Provenance::Seed(id) => (Some(id), None),
                        Provenance::Demos(ids) => (None, Some(ids)),
                    };
                    run.pairs.push(QaPair {
                        id: format!("{id_prefix}-{:06}", run.pairs.len()),
                        discipline,
                        problem,
                        solution,
                        seed_doc_id,
                        demo_ids,
                        model_id: opts.model.clone(),
                        created_at: opts.created_at.clone(),
                        length_warning,
                    });
                }
                AttemptOutcome::ParseFailed(f) => {
                    run.report.parse_failures += 1;
                    run.failures.push(f);
                }
                AttemptOutcome::RequestFailed(msg) => {
                    log::warn!("{discipline}: request failed: {msg}");
                    run.report.request_failures += 1;
                }
            }
        }
        next = end;
    }
    run.report.emitted = run.pairs.len();
    if run.pairs.len() < budget {
        log::warn!(
            "{discipline}: emitted {} of {budget} pairs after {} attempts",
            run.pairs.len(),
            run.report.attempts
        );
    }
    Ok(run)
}

/// Synthesizes scientific QA pairs from seed pages of one discipline.
///
/// Seeds are visited in a seeded permutation (without replacement), then
/// drawn uniformly with replacement once exhausted. A completion that fails
/// to parse consumes its seed and emits nothing.
pub fn synth_sci(
    seeds: &[Document],
    discipline: Discipline,
    llm: &dyn ChatCompletion,
    budget: usize,
    seed: u64,
    opts: &SynthesisOptions,
) -> Result<SynthesisRun> {
    let mut usable: Vec<(&Document, String)> = Vec::new();
    let mut skipped = 0;
    let mut sorted: Vec<&Document> = seeds.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for d in sorted {
        match extract_snippet(&d.text, opts.snippet_max_chars, opts.snippet_min_chars) {
            Ok(s) => usable.push((d, s)),
            Err(_) => skipped += 1,
        }
    }
    if budget > 0 && usable.is_empty() {
        return Err(Error::invalid(format!("{discipline}: no usable seed documents")));
    }
    let disc = discipline.as_str();
    let mut perm: Vec<usize> = (0..usable.len()).collect();
    perm.shuffle(&mut util::rng_for(seed, &["sci", disc, "perm"]));
    let pick = |a: usize| -> usize {
        if a < perm.len() {
            perm[a]
        } else {
            util::rng_for(seed, &["sci", disc, "replace", &a.to_string()]).gen_range(0..usable.len())
        }
    };
    let mut run = drive(budget, opts, discipline, &format!("{disc}-{seed:x}"), |a| {
        let (doc, snippet) = &usable[pick(a)];
        match chat(llm, opts, render_sci_prompt(discipline, snippet)) {
            Ok(text) => Ok(match parse_qa(&text, opts.strict) {
                Ok(p) => AttemptOutcome::Parsed {
                    problem: p.problem,
                    solution: p.solution,
                    length_warning: p.length_warning,
                    provenance: Provenance::Seed(doc.id.clone()),
                },
                Err(f) => AttemptOutcome::ParseFailed(f),
            }),
            Err(e) => classify_request_error(e),
        }
    })?;
    run.report.skipped_seeds = skipped;
    Ok(run)
}

pub const DEFAULT_K_DEMOS: usize = 3;

/// Synthesizes code QA pairs: one call writes a new problem from `k_demos`
/// seeded-random demonstrations, a second call solves it.
pub fn synth_code(
    seed_problems: &[SeedProblem],
    llm: &dyn ChatCompletion,
    k_demos: usize,
    budget: usize,
    seed: u64,
    opts: &SynthesisOptions,
) -> Result<SynthesisRun> {
    if seed_problems.is_empty() {
        return Err(Error::invalid("code synthesis needs at least one seed problem"));
    }
    if k_demos == 0 || k_demos > seed_problems.len() {
        return Err(Error::invalid(format!(
            "k_demos must be in 1..={}, got {k_demos}",
            seed_problems.len()
        )));
    }
    let mut sorted: Vec<&SeedProblem> = seed_problems.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    drive(budget, opts, Discipline::Code, &format!("code-{seed:x}"), |a| {
        let mut rng = util::rng_for(seed, &["code", "demos", &a.to_string()]);
        let demos: Vec<&SeedProblem> = sorted.choose_multiple(&mut rng, k_demos).copied().collect();
        let demo_ids: Vec<String> = demos.iter().map(|d| d.id.clone()).collect();
        let problem = match chat(llm, opts, render_code_problem_prompt(&demos)) {
            Ok(p) => p.trim().to_owned(),
            Err(e) => return classify_request_error(e),
        };
        if problem.is_empty() || SOLUTION_MARKER.is_match(&problem) {
            return Ok(AttemptOutcome::ParseFailed(ParseFailure {
                reason: "generated problem is empty or contains a solution marker".into(),
                raw: problem,
            }));
        }
        let solution = match chat(llm, opts, render_code_solution_prompt(&problem)) {
            Ok(s) => s.trim().to_owned(),
            Err(e) => return classify_request_error(e),
        };
        if solution.is_empty() {
            return Ok(AttemptOutcome::ParseFailed(ParseFailure {
                reason: "empty solution".into(),
                raw: solution,
            }));
        }
        Ok(AttemptOutcome::Parsed {
            problem,
            solution,
            length_warning: false,
            provenance: Provenance::Demos(demo_ids),
        })
    })
}
