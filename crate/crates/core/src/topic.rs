//! Bilingual topic taxonomy, the annotation prompt, and document topic
//! classifiers (keyword lexicon in-process, or a remote service).

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clients::{ChatCompletion, ChatMessage, ChatRequest, ClassifierClient};
use crate::corpus::{Document, Language};
use crate::error::{Error, Result};
use crate::util;

pub const OTHERS: &str = "Others";

const EN_TOPICS: [&str; 11] = [
    "Mathematics and Physics",
    "Computer Science and Engineering",
    "Biology and Chemistry",
    "History and Geography",
    "Law and Policy",
    "Philosophy and Logic",
    "Economics and Business",
    "Psychology and Sociology",
    "Security and International Relations",
    "Medicine and Health",
    "Others",
];

const ZH_TOPICS: [&str; 11] = [
    "Biology and Chemistry",
    "Computer Science and Engineering",
    "Economics and Business",
    "History and Geography",
    "Law and Policy",
    "Mathematics and Physics",
    "Medicine and Health",
    "Philosophy Arts and Culture",
    "Project and Practical Management",
    "Psychology Sociology and Education",
    "Others",
];

/// Ordered topic labels per language. "Others" is always last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicTaxonomy {
    pub en: Vec<String>,
    pub zh: Vec<String>,
}

impl Default for TopicTaxonomy {
    fn default() -> Self {
        Self::standard()
    }
}

/// Trim, lowercase, drop terminal punctuation.
pub fn normalize_label(s: &str) -> String {
    s.trim()
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || "。，！？；：".contains(c))
        .trim()
        .to_lowercase()
}

impl TopicTaxonomy {
    pub fn standard() -> Self {
        TopicTaxonomy {
            en: EN_TOPICS.iter().map(|s| s.to_string()).collect(),
            zh: ZH_TOPICS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: TopicTaxonomy = util::read_json(path)?;
        t.validate()?;
        Ok(t)
    }

    pub fn labels(&self, language: Language) -> &[String] {
        match language {
            Language::En => &self.en,
            Language::Zh => &self.zh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for lang in Language::ALL {
            let labels = self.labels(lang);
            if labels.last().map(String::as_str) != Some(OTHERS) {
                return Err(Error::invalid(format!("{lang} taxonomy must end with \"Others\"")));
            }
            let mut seen = std::collections::HashSet::new();
            for l in labels {
                if !seen.insert(normalize_label(l)) {
                    return Err(Error::invalid(format!("{lang} taxonomy repeats label {l:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn index_of(&self, language: Language, label: &str) -> Option<usize> {
        self.labels(language).iter().position(|l| l == label)
    }

    /// Exact match first, then normalized match.
    pub fn match_label(&self, language: Language, response: &str) -> Option<&str> {
        let labels = self.labels(language);
        if let Some(l) = labels.iter().find(|l| l.as_str() == response) {
            return Some(l);
        }
        let norm = normalize_label(response);
        labels.iter().find(|l| normalize_label(l) == norm).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicLabel {
    pub language: Language,
    pub label: String,
    pub confidence: f64,
}

pub const DEFAULT_ARTICLE_CHAR_CAP: usize = 6000;
pub(crate) const PROMPT_TAIL: &str = "Please only return the most related topic:";

/// Renders the zero-shot topic-labeling prompt for one article.
pub fn render_topic_prompt(
    taxonomy: &TopicTaxonomy,
    language: Language,
    article: &str,
    char_cap: usize,
) -> Result<String> {
    if article.is_empty() {
        return Err(Error::invalid("cannot build a topic prompt for an empty article"));
    }
    let labels = taxonomy.labels(language);
    let article: String = article.chars().take(char_cap).collect();
    Ok(format!(
        "I am categorizing a series of articles according to the following {n} topics. Next, I will give you an article, please select only one topic that the article is the most related to:\n\n[Topics]: {topics}\n\n[Article]: {article}\n\n{PROMPT_TAIL}",
        n = labels.len(),
        topics = labels.join(", "),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub text: String,
    pub language: Language,
    pub label: Option<String>,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone)]
pub struct AnnotateOptions {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub char_cap: usize,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        AnnotateOptions {
            model: "gpt-4".into(),
            temperature: 0.0,
            max_tokens: 32,
            char_cap: DEFAULT_ARTICLE_CHAR_CAP,
        }
    }
}

/// Maps a raw annotator response onto the taxonomy. Unmatched responses fall
/// back to "Others" with a warning.
pub fn parse_annotation(taxonomy: &TopicTaxonomy, language: Language, response: &str) -> (String, Option<String>) {
    match taxonomy.match_label(language, response) {
        Some(l) => (l.to_owned(), None),
        None => (
            OTHERS.to_owned(),
            Some(format!("response {:?} matched no topic; labeled Others", response.trim())),
        ),
    }
}

/// Labels documents with an LLM annotator.
///
/// Requests run concurrently (capped by the endpoint), records come back
/// sorted by document id. A document whose request still fails after the
/// client's retries is left unlabeled.
pub fn annotate_batch(
    docs: &[Document],
    llm: &dyn ChatCompletion,
    taxonomy: &TopicTaxonomy,
    opts: &AnnotateOptions,
) -> Result<Vec<AnnotationRecord>> {
    let mut order: Vec<&Document> = docs.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let records = order
        .par_iter()
        .map(|doc| -> Result<AnnotationRecord> {
            let prompt = render_topic_prompt(taxonomy, doc.language, &doc.text, opts.char_cap)?;
            let req = ChatRequest {
                model: opts.model.clone(),
                messages: vec![ChatMessage::user(prompt)],
                temperature: opts.temperature,
                max_tokens: opts.max_tokens,
            };
            let mut rec = AnnotationRecord {
                id: doc.id.clone(),
                text: doc.text.clone(),
                language: doc.language,
                label: None,
                confidence: 0.0,
                raw_response: None,
                warning: None,
            };
            match llm.chat_complete(&req) {
                Ok(resp) => {
                    let (label, warning) = parse_annotation(taxonomy, doc.language, &resp);
                    if let Some(w) = &warning {
                        log::warn!("{}: {w}", doc.id);
                    }
                    rec.label = Some(label);
                    rec.confidence = 1.0;
                    rec.raw_response = Some(resp);
                    rec.warning = warning;
                }
                Err(e) => {
                    log::warn!("{}: annotation failed: {e}", doc.id);
                    rec.warning = Some(format!("annotation failed: {e}"));
                }
            }
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(records)
}

#[derive(Debug, Clone)]
struct Keyword {
    tokens: Vec<String>,
    raw: String,
    weight: f64,
}

/// Keyword-weight topic classifier.
///
/// Scores each topic as the weighted sum of keyword term frequencies and
/// predicts the highest-scoring topic, ties going to the earlier label.
#[derive(Debug, Clone)]
pub struct LexiconClassifier {
    taxonomy: TopicTaxonomy,
    // per language, per taxonomy index
    keywords: BTreeMap<Language, Vec<Vec<Keyword>>>,
}

type KeywordFile = BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>>;

fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl LexiconClassifier {
    pub fn load(path: &Path, taxonomy: TopicTaxonomy) -> Result<Self> {
        let raw: KeywordFile = util::read_json(path)?;
        Self::from_weights(raw, taxonomy)
    }

    pub fn from_weights(raw: KeywordFile, taxonomy: TopicTaxonomy) -> Result<Self> {
        let mut keywords = BTreeMap::new();
        for lang in Language::ALL {
            keywords.insert(lang, vec![Vec::new(); taxonomy.labels(lang).len()]);
        }
        for (lang_key, topics) in raw {
            let lang: Language = lang_key.parse()?;
            for (topic, words) in topics {
                let idx = taxonomy
                    .index_of(lang, &topic)
                    .ok_or_else(|| Error::invalid(format!("keyword file: {topic:?} is not a {lang} topic")))?;
                let slot = &mut keywords.get_mut(&lang).expect("seeded")[idx];
                for (word, weight) in words {
                    if !weight.is_finite() {
                        return Err(Error::invalid(format!("keyword {word:?} has non-finite weight")));
                    }
                    slot.push(Keyword {
                        tokens: word_tokens(&word),
                        raw: word.to_lowercase(),
                        weight,
                    });
                }
            }
        }
        Ok(LexiconClassifier { taxonomy, keywords })
    }

    pub fn taxonomy(&self) -> &TopicTaxonomy {
        &self.taxonomy
    }

    fn term_frequency(kw: &Keyword, language: Language, tokens: &[String], lowered: &str) -> usize {
        match language {
            // Chinese text has no word delimiters
            Language::Zh => {
                if kw.raw.is_empty() {
                    0
                } else {
                    lowered.matches(kw.raw.as_str()).count()
                }
            }
            Language::En => {
                let n = kw.tokens.len();
                if n == 0 || tokens.len() < n {
                    return 0;
                }
                tokens.windows(n).filter(|w| *w == kw.tokens.as_slice()).count()
            }
        }
    }

    pub fn scores(&self, doc: &Document) -> Vec<f64> {
        let tokens = word_tokens(&doc.text);
        let lowered = doc.text.to_lowercase();
        self.keywords[&doc.language]
            .iter()
            .map(|kws| {
                kws.iter()
                    .map(|kw| kw.weight * Self::term_frequency(kw, doc.language, &tokens, &lowered) as f64)
                    .sum()
            })
            .collect()
    }

    pub fn classify(&self, doc: &Document) -> TopicLabel {
        let scores = self.scores(doc);
        let labels = self.taxonomy.labels(doc.language);
        let mut best = 0usize;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        if scores.is_empty() || scores[best] <= 0.0 {
            return TopicLabel {
                language: doc.language,
                label: OTHERS.into(),
                confidence: 0.0,
            };
        }
        let positive: f64 = scores.iter().filter(|s| **s > 0.0).sum();
        TopicLabel {
            language: doc.language,
            label: labels[best].clone(),
            confidence: scores[best] / positive,
        }
    }
}

pub enum Classifier {
    Lexicon(LexiconClassifier),
    Remote {
        client: ClassifierClient,
        taxonomy: TopicTaxonomy,
        batch_size: usize,
    },
}

impl Classifier {
    pub fn taxonomy(&self) -> &TopicTaxonomy {
        match self {
            Classifier::Lexicon(l) => l.taxonomy(),
            Classifier::Remote { taxonomy, .. } => taxonomy,
        }
    }
}

pub fn classify(doc: &Document, classifier: &Classifier) -> Result<TopicLabel> {
    Ok(classify_batch(std::slice::from_ref(doc), classifier)?.remove(0))
}

/// Classifies many documents; output aligned with input.
pub fn classify_batch(docs: &[Document], classifier: &Classifier) -> Result<Vec<TopicLabel>> {
    match classifier {
        Classifier::Lexicon(lex) => Ok(docs.par_iter().map(|d| lex.classify(d)).collect()),
        Classifier::Remote {
            client,
            taxonomy,
            batch_size,
        } => {
            let mut out: Vec<Option<TopicLabel>> = vec![None; docs.len()];
            for lang in Language::ALL {
                let idx: Vec<usize> = (0..docs.len()).filter(|&i| docs[i].language == lang).collect();
                for chunk in idx.chunks((*batch_size).max(1)) {
                    let texts: Vec<String> = chunk.iter().map(|&i| docs[i].text.clone()).collect();
                    let resp = client.classify(&texts, lang.as_str())?;
                    for ((&i, label), conf) in chunk.iter().zip(resp.labels).zip(resp.confidences) {
                        let (label, confidence) = match taxonomy.match_label(lang, &label) {
                            Some(l) => (l.to_owned(), conf.clamp(0.0, 1.0)),
                            None => {
                                log::warn!("{}: classifier returned unknown label {label:?}", docs[i].id);
                                (OTHERS.to_owned(), 0.0)
                            }
                        };
                        out[i] = Some(TopicLabel {
                            language: lang,
                            label,
                            confidence,
                        });
                    }
                }
            }
            Ok(out.into_iter().map(|l| l.expect("every language covered")).collect())
        }
    }
}
