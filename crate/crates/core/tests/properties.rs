use std::collections::{BTreeMap, HashSet};

use cpt_curate::corpus::{split_validation, Document, Language, Source};
use cpt_curate::corruption::{document_frequencies, CorruptionSpec, Corruptor, Lexicon, NounEntry};
use cpt_curate::curriculum::{bin_by_ppl, plan_by_ppl, Strategy};
use cpt_curate::mixture::{mixture_step, MixtureState, PplSnapshot};
use cpt_curate::synthesis::{parse_qa, qa_to_marked_text, qa_to_training_text, Discipline, QaPair, DEFAULT_SEPARATOR};
use cpt_curate::util::apportion;
use proptest::prelude::*;

fn docs_with_ppl(ppl: &[f64]) -> Vec<Document> {
    ppl.iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d = Document::new(format!("d{i:05}"), "x", Language::Zh, Source::WebPages);
            d.ppl = Some(*p);
            d
        })
        .collect()
}

fn lexicon() -> Lexicon {
    let mut nouns = BTreeMap::new();
    nouns.insert(
        "oxygen".to_string(),
        NounEntry {
            hypernym: "element".into(),
            siblings: vec!["oxygen".into(), "neon".into(), "argon".into()],
        },
    );
    let mut adjectives = BTreeMap::new();
    adjectives.insert("hot".to_string(), vec!["cold".to_string()]);
    Lexicon { nouns, adjectives }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn apportion_sums_exactly(total in 0u64..1_000_000, weights in prop::collection::vec(0.0f64..10.0, 1..20)) {
        let out = apportion(total, &weights);
        prop_assert_eq!(out.len(), weights.len());
        if weights.iter().any(|w| *w > 0.0) {
            prop_assert_eq!(out.iter().sum::<u64>(), total);
            let sum: f64 = weights.iter().sum();
            for (o, w) in out.iter().zip(&weights) {
                let exact = total as f64 * w / sum;
                prop_assert!((*o as f64 - exact).abs() < 1.0 + 1e-6);
            }
        }
    }

    #[test]
    fn mixture_step_keeps_a_distribution(
        n in 2usize..12,
        seed in any::<u64>(),
        alpha in 0.0f64..2.0,
    ) {
        let mut rng = cpt_curate::util::rng_for(seed, &["prop"]);
        use rand::Rng;
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
        let total: f64 = r.iter().sum();
        let topics: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
        let st = MixtureState::new(topics, r.iter().map(|x| x / total).collect(), w, alpha, 0.05).unwrap();
        let prev = PplSnapshot::new(0, (0..n).map(|_| rng.gen_range(2.0..50.0)).collect()).unwrap();
        let cur = PplSnapshot::new(1, (0..n).map(|_| rng.gen_range(2.0..50.0)).collect()).unwrap();
        let (next, audit) = mixture_step(&st, &prev, &cur).unwrap();
        prop_assert!((next.proportions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(next.proportions.iter().all(|p| *p > 0.0));
        prop_assert!(audit.f.iter().all(|f| *f >= 0.05));
        prop_assert!(audit.delta_norm.iter().all(|d| d.abs() <= 1.0 + 1e-15));
        prop_assert_eq!(next.round, st.round + 1);
    }

    #[test]
    fn curriculum_bins_partition(ppl in prop::collection::vec(1.0f64..500.0, 10..300), k in 1usize..10, seed in any::<u64>()) {
        let docs = docs_with_ppl(&ppl);
        let bins = bin_by_ppl(&docs, k).unwrap();
        let sizes: Vec<usize> = bins.iter().map(Vec::len).collect();
        prop_assert_eq!(sizes.iter().sum::<usize>(), docs.len());
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        for w in bins.windows(2) {
            let hi = w[0].iter().map(|s| s.ppl).fold(f64::MIN, f64::max);
            let lo = w[1].iter().map(|s| s.ppl).fold(f64::MAX, f64::min);
            prop_assert!(hi <= lo);
        }
        let lh = plan_by_ppl(&docs, k, Strategy::LH, seed).unwrap();
        let ids: HashSet<&str> = lh.sequence().collect();
        prop_assert_eq!(ids.len(), docs.len());
        let hl = plan_by_ppl(&docs, k, Strategy::HL, seed).unwrap();
        let mut rev = hl.bins.clone();
        rev.reverse();
        prop_assert_eq!(rev, lh.bins);
    }

    #[test]
    fn validation_split_is_a_partition(n in 1usize..200, per_topic in 1usize..10, seed in any::<u64>()) {
        let docs: Vec<Document> = (0..n)
            .map(|i| {
                let mut d = Document::new(format!("v{i}"), "x", Language::En, Source::WebPages);
                d.topic = Some(format!("t{}", i % 4));
                d
            })
            .collect();
        let split = split_validation(docs.clone(), per_topic, seed).unwrap();
        prop_assert_eq!(split.train.len() + split.validation.len(), n);
        let mut per: BTreeMap<String, usize> = BTreeMap::new();
        for d in &split.validation {
            *per.entry(d.topic.clone().unwrap()).or_default() += 1;
        }
        for (t, c) in per {
            let available = docs.iter().filter(|d| d.topic.as_deref() == Some(t.as_str())).count();
            prop_assert_eq!(c, per_topic.min(available));
        }
        let mut shuffled = docs;
        shuffled.reverse();
        let again = split_validation(shuffled, per_topic, seed).unwrap();
        let a: HashSet<String> = split.validation.iter().map(|d| d.id.clone()).collect();
        let b: HashSet<String> = again.validation.iter().map(|d| d.id.clone()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn corruption_changes_only_candidates(words in prop::collection::vec(prop::sample::select(vec!["oxygen", "Oxygen", "hot", "HOT", "the", "12", "3.5", "gas"]), 1..60), ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let text = words.join(" ");
        let lex = lexicon();
        let freq = document_frequencies([text.as_str()]);
        let c = Corruptor::new(CorruptionSpec::new(ratio, seed), &lex, &freq).unwrap();
        let (out, report) = c.corrupt(&text);
        let out_words: Vec<&str> = out.split(' ').collect();
        prop_assert_eq!(out_words.len(), words.len());
        let mut mapping: BTreeMap<String, String> = BTreeMap::new();
        for (a, b) in words.iter().zip(&out_words) {
            if matches!(*a, "the" | "gas") {
                prop_assert_eq!(a, b);
            }
            if a.chars().all(|c| c.is_ascii_digit() || c == '.') {
                prop_assert_eq!(a.len(), b.len());
            } else {
                let prev = mapping.insert(a.to_lowercase(), b.to_lowercase());
                prop_assert!(prev.is_none() || prev.as_deref() == Some(&b.to_lowercase()));
            }
        }
        prop_assert!(report.changes.len() <= report.candidates);
        if ratio == 0.0 {
            prop_assert_eq!(out, text);
        }
    }

    #[test]
    fn marked_qa_text_round_trips(problem in "[A-Za-z0-9 ,.?]{1,80}", solution in "[A-Za-z0-9 ,.()=+]{1,300}") {
        prop_assume!(!problem.trim().is_empty() && !solution.trim().is_empty());
        let qa = QaPair {
            id: "p".into(),
            discipline: Discipline::Physics,
            problem: problem.trim().to_owned(),
            solution: solution.trim().to_owned(),
            seed_doc_id: Some("s".into()),
            demo_ids: None,
            model_id: "m".into(),
            created_at: "2024-01-01T00:00:00Z".into(),
            length_warning: false,
        };
        let parsed = parse_qa(&qa_to_marked_text(&qa), false).unwrap();
        prop_assert_eq!(&parsed.problem, &qa.problem);
        prop_assert_eq!(&parsed.solution, &qa.solution);
        let doc = qa_to_training_text(&qa, DEFAULT_SEPARATOR);
        prop_assert_eq!(doc.text, format!("{}\n\n{}", qa.problem, qa.solution));
    }
}
