//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cpt_curate::clients::{ChatClient, Endpoint, EndpointConfig};
use cpt_curate::config::PipelineConfig;
use cpt_curate::corpus::{self, Document, Language, Source};
use cpt_curate::corruption::{self, CandidateClass, CorruptionSpec, Corruptor, Lexicon};
use cpt_curate::curriculum::{self, CurriculumPlan, Strategy};
use cpt_curate::mixture::{mixture_step, MixtureState, PplSnapshot};
use cpt_curate::pipeline;
use cpt_curate::planner::{self, PlanOverrides, Stage};
use cpt_curate::synthesis::{self, Discipline, SeedProblem, SynthesisOptions};

type Outcome = Result<String, String>;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// Independent scalar form of one mixture round.
fn oracle_step(r: &[f64], w: &[f64], alpha: f64, floor: f64, prev: &[f64], cur: &[f64]) -> Vec<f64> {
    let n = r.len();
    let mut dp = vec![0.0; n];
    let mut max_abs = 0.0f64;
    for i in 0..n {
        dp[i] = cur[i] - prev[i];
        if dp[i].abs() > max_abs {
            max_abs = dp[i].abs();
        }
    }
    let mut f = vec![0.0; n];
    for i in 0..n {
        let delta = if max_abs > 0.0 { dp[i] / max_abs } else { 0.0 };
        let raw = 1.0 + alpha * delta * w[i];
        f[i] = if raw < floor { floor } else { raw };
    }
    let mut z = 0.0;
    for i in 0..n {
        z += r[i] * f[i];
    }
    let mut out = vec![0.0; n];
    for i in 0..n {
        out[i] = r[i] * f[i] / z;
    }
    out
}

fn random_state(rng: &mut ChaCha8Rng, n: usize, alpha: f64) -> MixtureState {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    let w: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.2) { 1.0 } else { rng.gen_range(0.0..3.0) }).collect();
    MixtureState::new(
        (0..n).map(|i| format!("t{i}")).collect(),
        raw.iter().map(|x| x / sum).collect(),
        w,
        alpha,
        0.05,
    )
    .unwrap()
}

fn mixture_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = Vec::new();
    for k in 0..1000 {
        let n = rng.gen_range(1..=20);
        let alpha = if k % 10 == 0 { rng.gen_range(1.0..4.0) } else { rng.gen_range(0.0..1.0) };
        let st = random_state(&mut rng, n, alpha);
        let prev: Vec<f64> = (0..n).map(|_| rng.gen_range(1.5..80.0)).collect();
        let cur: Vec<f64> = if k % 17 == 0 {
            prev.clone()
        } else {
            prev.iter().map(|p| if rng.gen_bool(0.1) { *p } else { p * rng.gen_range(0.7..1.3) }).collect()
        };
        cases.push((st, prev, cur));
    }
    let t0 = Instant::now();
    let mut results = Vec::with_capacity(cases.len());
    for (st, prev, cur) in &cases {
        let p = PplSnapshot::new(0, prev.clone()).unwrap();
        let c = PplSnapshot::new(1, cur.clone()).unwrap();
        results.push(mixture_step(st, &p, &c).map_err(|e| e.to_string())?.0);
    }
    let elapsed = t0.elapsed();
    let mut max_rel = 0.0f64;
    let mut max_sum_err = 0.0f64;
    for ((st, prev, cur), next) in cases.iter().zip(&results) {
        let want = oracle_step(&st.proportions, &st.weights, st.alpha, st.floor, prev, cur);
        for (a, b) in next.proportions.iter().zip(&want) {
            max_rel = max_rel.max((a - b).abs() / b.abs().max(f64::MIN_POSITIVE));
        }
        max_sum_err = max_sum_err.max((next.proportions.iter().sum::<f64>() - 1.0).abs());
    }
    check(max_rel <= 1e-12, || format!("max relative error {max_rel:e}"))?;
    check(max_sum_err <= 1e-9, || format!("sum error {max_sum_err:e}"))?;
    check(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("1000 instances, max rel err {max_rel:.2e}, max |sum-1| {max_sum_err:.2e}, {elapsed:.2?}"))
}

fn mixture_fixed_points() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let start = random_state(&mut rng, 7, 0.8);
    let prev = PplSnapshot::new(0, (0..7).map(|_| rng.gen_range(2.0..30.0)).collect::<Vec<f64>>()).unwrap();

    let mut st = start.clone();
    for i in 0..100 {
        let p = PplSnapshot::new(i, prev.ppl.clone()).unwrap();
        let c = PplSnapshot::new(i + 1, prev.ppl.clone()).unwrap();
        st = mixture_step(&st, &p, &c).map_err(|e| e.to_string())?.0;
    }
    let same = st.proportions.iter().zip(&start.proportions).all(|(a, b)| a.to_bits() == b.to_bits());
    check(same, || "zero change altered proportions".into())?;

    let mut st = MixtureState { alpha: 0.0, ..start.clone() };
    for i in 0..100 {
        let p = PplSnapshot::new(i, (0..7).map(|_| rng.gen_range(2.0..30.0)).collect()).unwrap();
        let c = PplSnapshot::new(i + 1, (0..7).map(|_| rng.gen_range(2.0..30.0)).collect()).unwrap();
        st = mixture_step(&st, &p, &c).map_err(|e| e.to_string())?.0;
    }
    let same = st.proportions.iter().zip(&start.proportions).all(|(a, b)| a.to_bits() == b.to_bits());
    check(same, || "alpha = 0 altered proportions".into())?;
    Ok("zero change and alpha = 0 each bit-identical over 100 rounds".into())
}

fn worked_case() -> Outcome {
    let st = MixtureState::new(vec!["a".into(), "b".into()], vec![0.5, 0.5], vec![1.0, 1.0], 0.5, 0.05).unwrap();
    let prev = PplSnapshot::new(0, vec![10.0, 10.0]).unwrap();
    let cur = PplSnapshot::new(1, vec![8.0, 12.0]).unwrap();
    let (next, _) = mixture_step(&st, &prev, &cur).map_err(|e| e.to_string())?;
    check(next.proportions == vec![0.25, 0.75], || format!("got {:?}", next.proportions))?;
    Ok("r' = [0.25, 0.75] exactly".into())
}

fn curriculum_bins() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let docs: Vec<Document> = (0..10_000)
        .map(|i| {
            let mut d = Document::new(format!("c{i:05}"), "x", Language::Zh, Source::WebPages);
            d.ppl = Some(rng.gen_range(1.0..1000.0));
            d
        })
        .collect();
    let t0 = Instant::now();
    let lh = curriculum::plan_by_ppl(&docs, 10, Strategy::LH, 9).map_err(|e| e.to_string())?;
    let hl = curriculum::plan_by_ppl(&docs, 10, Strategy::HL, 9).map_err(|e| e.to_string())?;
    let replay = curriculum::plan_by_ppl(&docs, 10, Strategy::LH, 9).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();

    lh.check_partition(docs.iter().map(|d| d.id.as_str())).map_err(|e| e.to_string())?;
    let sizes: Vec<usize> = lh.bins.iter().map(Vec::len).collect();
    check(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1, || format!("sizes {sizes:?}"))?;
    let means: Vec<f64> = lh.bin_stats.iter().map(|b| b.mean_ppl.unwrap()).collect();
    check(means.windows(2).all(|w| w[0] <= w[1]), || format!("means {means:?}"))?;
    let mut rev = hl.bins.clone();
    rev.reverse();
    check(rev == lh.bins, || "HL is not the reverse of LH".into())?;
    let a = lh.to_json().map_err(|e| e.to_string())?;
    check(a == replay.to_json().map_err(|e| e.to_string())?, || "replay differs".into())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("plan.json");
    lh.save(&path).map_err(|e| e.to_string())?;
    let loaded = CurriculumPlan::load(&path).map_err(|e| e.to_string())?;
    check(loaded.to_json().map_err(|e| e.to_string())? == a, || "save/load differs".into())?;
    check(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("10000 docs, k=10, bin sizes {}..{}, {elapsed:.2?}", sizes.iter().min().unwrap(), sizes.iter().max().unwrap()))
}

// Letters only, so tags never split into extra number candidates.
fn tag(i: usize) -> String {
    let a = (b'a' + (i / 26) as u8) as char;
    let b = (b'a' + (i % 26) as u8) as char;
    format!("{a}{b}")
}

fn rate_fixture() -> (Vec<Document>, Lexicon) {
    let mut nouns = BTreeMap::new();
    let mut adjectives = BTreeMap::new();
    for g in 0..40 {
        let group: Vec<String> = (0..4).map(|j| format!("noun{}q{}", tag(g), tag(j))).collect();
        for w in &group {
            nouns.insert(
                w.clone(),
                corruption::NounEntry {
                    hypernym: format!("kind{g}"),
                    siblings: group.clone(),
                },
            );
        }
        adjectives.insert(format!("adj{}", tag(g)), vec![format!("adj{}z", tag(g))]);
    }
    let lex = Lexicon { nouns, adjectives };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let docs = (0..1000)
        .map(|i| {
            // 10 candidates per document, each noun and adjective at most once
            let g = rng.gen_range(0..40);
            let h = (g + 1 + rng.gen_range(0..39)) % 40;
            let (tg, th) = (tag(g), tag(h));
            let text = format!(
                "The noun{tg}qaa and noun{th}qab were adj{tg} while noun{tg}qac stayed adj{th}. \
                 We measured {} then {} and {}, later {} with {} as well.",
                rng.gen_range(1..1000),
                rng.gen_range(10..99),
                rng.gen_range(1..9),
                rng.gen_range(100..5000),
                rng.gen_range(1..50),
            );
            Document::new(format!("r{i:04}"), text, Language::En, Source::Synthetic)
        })
        .collect();
    (docs, lex)
}

fn corruption_rates() -> Outcome {
    let (docs, lex) = rate_fixture();
    let freq = corruption::document_frequencies(docs.iter().map(|d| d.text.as_str()));
    let mut parts = Vec::new();
    for ratio in [0.0, 0.3, 0.4, 0.5, 0.6, 0.7] {
        let spec = CorruptionSpec {
            ratio,
            seed: 17,
            top_k_frequent: 10_000,
            ..Default::default()
        };
        let c = Corruptor::new(spec, &lex, &freq).map_err(|e| e.to_string())?;
        let results = c.corrupt_corpus(&docs);
        let candidates: usize = results.iter().map(|r| r.1.candidates).sum();
        let changes: usize = results.iter().map(|r| r.1.changes.len()).sum();
        check(candidates == 10_000, || format!("fixture has {candidates} candidates"))?;
        let measured = changes as f64 / candidates as f64;
        if ratio == 0.0 {
            let identical = results.iter().zip(&docs).all(|((d, _), o)| d.text == o.text);
            check(identical && changes == 0, || "ratio 0 changed text".into())?;
        }
        check((measured - ratio).abs() <= 0.02, || format!("ratio {ratio}: measured {measured:.4}"))?;
        parts.push(format!("{ratio}->{measured:.4}"));
    }

    let fx: serde_json::Value = serde_json::from_slice(&std::fs::read(root().join("fixtures/acceptance/corruption_example.json")).unwrap()).unwrap();
    let before = fx["before"].as_str().unwrap();
    let after = fx["after"].as_str().unwrap();
    let lex: Lexicon = serde_json::from_value(fx["lexicon"].clone()).unwrap();
    let spec = CorruptionSpec::new(fx["ratio"].as_f64().unwrap(), fx["seed"].as_u64().unwrap());
    let freq = corruption::document_frequencies([before]);
    let (out, report) = corruption::corrupt(before, &spec, &lex, &freq).map_err(|e| e.to_string())?;
    check(out == after, || format!("worked example differs: {out}"))?;
    let mut by_class: HashMap<CandidateClass, Vec<(String, String)>> = HashMap::new();
    for ch in &report.changes {
        by_class.entry(ch.class).or_default().push((ch.before.clone(), ch.after.clone()));
    }
    let nouns = &by_class[&CandidateClass::Noun];
    check(nouns.len() == 4 && nouns.iter().all(|(b, a)| b == "chlorine" && a == "oxygen"), || format!("nouns {nouns:?}"))?;
    check(by_class[&CandidateClass::Adjective] == vec![("equal".into(), "unequal".into())], || "adjective swap".into())?;
    let nums: Vec<_> = by_class[&CandidateClass::Number].iter().map(|(b, a)| format!("{b}->{a}")).collect();
    check(nums == ["2->6", "2->3", "2->8"], || format!("numbers {nums:?}"))?;
    Ok(format!("rates {}; worked example reproduced", parts.join(" ")))
}

fn desk_min_doc_tokens() -> u64 {
    let cfg = PipelineConfig::load(&root().join("fixtures/desk/desk.json")).unwrap();
    let mut docs = pipeline::load_corpora(&cfg).unwrap();
    corpus::count_all(&mut docs, &pipeline::token_counter(&cfg).unwrap());
    docs.iter().map(Document::tokens).min().unwrap()
}

fn plan_arithmetic() -> Outcome {
    let budgets = planner::stage_budgets(100_000);
    check(budgets == [92_500, 7_500], || format!("stage budgets {budgets:?}"))?;
    let o = PlanOverrides::default();
    let s1 = planner::build_stage_plan(Stage::BilingualAdaptation, 100_000, &o).map_err(|e| e.to_string())?;
    let s2 = planner::build_stage_plan(Stage::SyntheticEnhancement, 100_000, &o).map_err(|e| e.to_string())?;
    let syn = s2.source_targets().get(&Source::Synthetic).copied().unwrap_or(0);
    check(syn == 1_500, || format!("synthetic allocation {syn}"))?;
    let reference: [(Source, f64); 8] = [
        (Source::WebPages, 45.18),
        (Source::Encyclopedia, 4.92),
        (Source::Books, 15.74),
        (Source::QaForums, 4.92),
        (Source::AcademicPapers, 7.93),
        (Source::MathCorpora, 7.93),
        (Source::Code, 11.88),
        (Source::Synthetic, 1.50),
    ];
    let doc = desk_min_doc_tokens();
    let mut worst = 0.0f64;
    for (source, pct) in reference {
        let total = s1.source_targets().get(&source).copied().unwrap_or(0) + s2.source_targets().get(&source).copied().unwrap_or(0);
        let dev = (total as f64 - pct * 1000.0).abs();
        worst = worst.max(dev);
        check(dev <= doc as f64, || format!("{source}: {total} vs {}", pct * 1000.0))?;
    }
    Ok(format!("92500/7500, synthetic 1500, worst source deviation {worst} tokens (one document >= {doc})"))
}

fn seed_pages() -> BTreeMap<Discipline, Vec<Document>> {
    Discipline::SCIENTIFIC
        .into_iter()
        .map(|d| {
            let docs = (0..600)
                .map(|i| {
                    let text = format!(
                        "Seed page {i} on {} asks how quantity {i} changes when the system is heated slowly. \
                         The discussion compares several measurements, lists assumptions, and works through \
                         a short derivation with units before checking the limiting cases carefully.",
                        d.display_name()
                    );
                    Document::new(format!("{}-{i:04}", d.as_str()), text, Language::En, Source::QaForums)
                })
                .collect();
            (d, docs)
        })
        .collect()
}

fn synthesis_round_trip() -> Outcome {
    let reference = [
        (Discipline::Mathematics, 207),
        (Discipline::Physics, 242),
        (Discipline::Chemistry, 31),
        (Discipline::Biology, 25),
        (Discipline::Astronomy, 24),
        (Discipline::EarthScience, 8),
        (Discipline::MedicalScience, 8),
        (Discipline::ComputerScience, 476),
        (Discipline::GeneralEducation, 572),
        (Discipline::Code, 1386),
    ];
    let quotas = synthesis::scaled_quotas(1e-3);
    for (d, q) in reference {
        check(quotas.get(&d) == Some(&q), || format!("{d} quota {:?}", quotas.get(&d)))?;
    }
    let sci_total: u64 = Discipline::SCIENTIFIC.iter().map(|d| quotas[d]).sum();
    check(sci_total == 1593 && sci_total + quotas[&Discipline::Code] == 2979, || format!("totals {sci_total}"))?;

    let llm = ChatClient::new(Endpoint::from_config(EndpointConfig::new("mock://chat")).unwrap());
    let opts = SynthesisOptions {
        created_at: "2024-01-01T00:00:00Z".into(),
        ..Default::default()
    };
    let seeds = seed_pages();
    let mut pairs = Vec::new();
    for d in Discipline::SCIENTIFIC {
        let run = synthesis::synth_sci(&seeds[&d], d, &llm, quotas[&d] as usize, 42, &opts).map_err(|e| e.to_string())?;
        check(run.pairs.len() as u64 == quotas[&d], || format!("{d}: emitted {} of {}", run.pairs.len(), quotas[&d]))?;
        pairs.extend(run.pairs);
    }
    let problems: Vec<SeedProblem> = (0..60)
        .map(|i| SeedProblem {
            id: format!("p{i:02}"),
            problem: format!("Problem {i}: given an array of integers, compute statistic number {i} of every window."),
        })
        .collect();
    let code = synthesis::synth_code(&problems, &llm, 3, quotas[&Discipline::Code] as usize, 42, &opts).map_err(|e| e.to_string())?;
    check(code.pairs.len() == 1386, || format!("code emitted {}", code.pairs.len()))?;
    pairs.extend(code.pairs);

    for qa in pairs.iter().take(1000) {
        let doc = synthesis::qa_to_training_text(qa, synthesis::DEFAULT_SEPARATOR);
        check(doc.text == format!("{}\n\n{}", qa.problem, qa.solution), || format!("{}: training text", qa.id))?;
        check(doc.source == Source::Synthetic && doc.language == Language::En, || "training doc tags".into())?;
        let parsed = synthesis::parse_qa(&synthesis::qa_to_marked_text(qa), false).map_err(|f| f.reason)?;
        check(parsed.problem == qa.problem && parsed.solution == qa.solution, || format!("{}: round trip", qa.id))?;
    }

    let good: serde_json::Value = serde_json::from_slice(&std::fs::read(root().join("fixtures/acceptance/qa_example.json")).unwrap()).unwrap();
    let parsed = synthesis::parse_qa(good["completion"].as_str().unwrap(), false).map_err(|f| f.reason)?;
    check(parsed.problem == good["problem"].as_str().unwrap(), || "example problem".into())?;
    check(parsed.solution == good["solution"].as_str().unwrap(), || "example solution".into())?;
    Ok(format!("{} mock pairs, quotas 1593 + 1386 = 2979 met, 1000 round trips, example split", pairs.len()))
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn end_to_end() -> Outcome {
    let cfg = root().join("fixtures/desk/desk.json");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let mut trees = Vec::new();
    for (name, workers) in [("a", "1"), ("b", "1"), ("c", "8")] {
        let out = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_cpt-curate"))
            .env("RUST_LOG", "error")
            .args(["--config", cfg.to_str().unwrap(), "--workers", workers, "--out", out.to_str().unwrap(), "run"])
            .output()
            .map_err(|e| e.to_string())?;
        check(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
        trees.push(files_under(&out));
    }
    let elapsed = t0.elapsed();
    let shards = trees[0].keys().filter(|p| p.starts_with("shards")).count();
    check(shards > 0 && trees[0].keys().any(|p| p.starts_with("audit")) && trees[0].keys().any(|p| p.starts_with("reports")), || {
        "missing outputs".into()
    })?;
    check(trees[0] == trees[1], || "two runs differ".into())?;
    check(trees[0] == trees[2], || "--workers 8 differs from --workers 1".into())?;
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{} files ({shards} shard files) identical across 3 runs, workers 1 and 8, {elapsed:.2?}", trees[0].len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("mixture oracle", mixture_oracle),
        ("mixture fixed points", mixture_fixed_points),
        ("worked case", worked_case),
        ("curriculum", curriculum_bins),
        ("corruption rate", corruption_rates),
        ("plan arithmetic", plan_arithmetic),
        ("synthesis round trip", synthesis_round_trip),
        ("end-to-end determinism", end_to_end),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS  {}. {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  {}. {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
