//! Deterministic in-process stand-in for the chat, scoring and classifier
//! services. Selected with a `mock://<name>` base URL; responses depend only
//! on the request body, so runs against it are reproducible and recordable.

use rand::Rng;
use serde_json::{json, Value};

use super::{HttpResponse, Transport, TransportFailure, CHAT_PATH, CLASSIFY_PATH, SCORE_PATH};
use crate::{synthesis, topic, util};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PplMode {
    Hash,
    Length,
}

pub struct MockTransport {
    ppl_mode: PplMode,
}

impl MockTransport {
    /// `mock://length` scores each text by its character count; any other
    /// name uses a hash-derived perplexity in [2, 100).
    pub fn named(name: &str) -> Self {
        let ppl_mode = if name.trim_end_matches('/') == "length" {
            PplMode::Length
        } else {
            PplMode::Hash
        };
        MockTransport { ppl_mode }
    }

    fn ppl(&self, text: &str) -> f64 {
        match self.ppl_mode {
            PplMode::Length => text.chars().count().max(1) as f64,
            PplMode::Hash => mock_ppl(text),
        }
    }
}

pub fn mock_ppl(text: &str) -> f64 {
    2.0 + (util::derive_seed(0, &["ppl", text]) % 9800) as f64 / 100.0
}

const WORDS: &[&str] = &[
    "the", "energy", "system", "therefore", "we", "apply", "equation", "value", "result", "because",
    "first", "second", "consider", "force", "rate", "constant", "measure", "compute", "substitute",
    "gives", "total", "each", "step", "follows", "solution", "initial", "final", "condition",
    "relation", "ratio", "balance", "observe", "quantity", "unit", "assume", "small", "large",
    "change", "model", "process", "known", "unknown", "derive", "check", "answer", "estimate",
    "simplify", "combine", "term", "factor", "reaction", "particle", "field", "volume", "mass",
];

fn prose(seed: u64, words: usize) -> String {
    let mut rng = util::rng_for(seed, &["prose"]);
    let mut out = String::new();
    for i in 0..words {
        let w = WORDS[rng.gen_range(0..WORDS.len())];
        if i % 12 == 0 {
            if i > 0 {
                out.push_str(". ");
            }
            let mut c = w.chars();
            if let Some(first) = c.next() {
                out.extend(first.to_uppercase());
                out.push_str(c.as_str());
            }
        } else {
            out.push(' ');
            out.push_str(w);
        }
    }
    out.push('.');
    out
}

fn first_sentence(text: &str, max_chars: usize) -> String {
    let end = text.find(['.', '?', '!', '\n']).unwrap_or(text.len());
    text[..end].chars().take(max_chars).collect::<String>().trim().to_owned()
}

fn mock_chat(content: &str) -> String {
    let seed = util::derive_seed(0, &["chat", content]);
    let mut rng = util::rng_for(seed, &["shape"]);
    if content.contains(topic::PROMPT_TAIL) {
        let topics = content
            .split("[Topics]: ")
            .nth(1)
            .and_then(|rest| rest.lines().next())
            .unwrap_or("Others");
        let labels: Vec<&str> = topics.split(", ").collect();
        return labels[rng.gen_range(0..labels.len())].to_owned();
    }
    if content.contains(synthesis::SCI_OUTPUT_INSTRUCTION) {
        let snippet = content
            .split(synthesis::SCI_CONTENT_HEADER_SUFFIX)
            .nth(1)
            .unwrap_or(content)
            .trim_start();
        let words = rng.gen_range(260..=340);
        return format!(
            "[Problem]\nBased on the statement \"{}\", determine the governing quantity (variant {}).\n\n[Solution]\n{}",
            first_sentence(snippet, 160),
            seed % 10_000,
            prose(seed, words)
        );
    }
    if content.contains(synthesis::CODE_PROBLEM_CUE) {
        return format!(
            "Given an array of {} integers, return the length of the longest run whose sum is divisible by {} (case {}).",
            rng.gen_range(2..1000),
            rng.gen_range(2..50),
            seed % 100_000
        );
    }
    if content.contains(synthesis::CODE_SOLUTION_CUE) {
        let words = rng.gen_range(60..120);
        return format!(
            "{}\n\n```python\ndef solve(nums, k):\n    best = 0\n    seen = {{0: -1}}\n    total = 0\n    for i, x in enumerate(nums):\n        total = (total + x) % k\n        if total in seen:\n            best = max(best, i - seen[total])\n        else:\n            seen[total] = i\n    return best\n```",
            prose(seed, words)
        );
    }
    content.to_owned()
}

impl Transport for MockTransport {
    fn post(&self, path: &str, body: &str, _bearer: Option<&str>) -> Result<HttpResponse, TransportFailure> {
        let bad = |msg: &str| HttpResponse {
            status: 400,
            body: json!({ "error": msg }).to_string(),
        };
        let req: Value = match serde_json::from_str(body) {
            Ok(v) => v,
            Err(_) => return Ok(bad("body is not JSON")),
        };
        let body = match path {
            CHAT_PATH => {
                let content = req
                    .get("messages")
                    .and_then(Value::as_array)
                    .and_then(|m| m.last())
                    .and_then(|m| m.get("content"))
                    .and_then(Value::as_str);
                let Some(content) = content else {
                    return Ok(bad("missing messages"));
                };
                json!({ "choices": [{ "message": { "role": "assistant", "content": mock_chat(content) } }] })
            }
            SCORE_PATH => {
                let Some(texts) = req.get("texts").and_then(Value::as_array) else {
                    return Ok(bad("missing texts"));
                };
                let ppl: Vec<f64> = texts.iter().map(|t| self.ppl(t.as_str().unwrap_or(""))).collect();
                json!({ "ppl": ppl })
            }
            CLASSIFY_PATH => {
                let n = req.get("texts").and_then(Value::as_array).map_or(0, Vec::len);
                json!({ "labels": vec!["Others"; n], "confidences": vec![0.0; n] })
            }
            _ => {
                return Ok(HttpResponse {
                    status: 404,
                    body: "not found".into(),
                })
            }
        };
        Ok(HttpResponse {
            status: 200,
            body: body.to_string(),
        })
    }
}
