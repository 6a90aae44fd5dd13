#!/usr/bin/env python3
"""Generate the small synthetic desk corpus under fixtures/desk/.

Output is a pure function of SEED; rerunning overwrites the same bytes.
Cassettes are not produced here: record them with

    cpt-curate --config fixtures/desk/desk.json --cassette-mode record run --out <tmp>
"""

import json
import random
from pathlib import Path

SEED = 20240101
ROOT = Path(__file__).resolve().parent.parent / "fixtures" / "desk"

EN_TOPICS = {
    "Mathematics and Physics": ["theorem", "integral", "velocity", "quantum", "matrix", "proof", "momentum", "equation"],
    "Computer Science and Engineering": ["algorithm", "compiler", "database", "network", "software", "circuit", "processor", "kernel"],
    "Biology and Chemistry": ["protein", "enzyme", "molecule", "cell", "genome", "reaction", "organism", "catalyst"],
    "History and Geography": ["empire", "dynasty", "river", "continent", "century", "treaty", "province", "ancient"],
    "Law and Policy": ["statute", "court", "regulation", "contract", "legislation", "plaintiff", "ordinance", "verdict"],
    "Philosophy and Logic": ["ethics", "syllogism", "metaphysics", "argument", "premise", "virtue", "epistemology", "fallacy"],
    "Economics and Business": ["market", "inflation", "revenue", "investment", "supply", "demand", "profit", "tariff"],
    "Psychology and Sociology": ["behavior", "cognition", "society", "emotion", "identity", "community", "memory", "motivation"],
    "Security and International Relations": ["diplomacy", "alliance", "sanctions", "defense", "sovereignty", "conflict", "embassy", "deterrence"],
    "Medicine and Health": ["patient", "diagnosis", "therapy", "vaccine", "clinical", "symptom", "surgery", "dosage"],
    "Others": ["weather", "garden", "recipe", "holiday", "music", "travel", "sports", "fashion"],
}

ZH_TOPICS = {
    "Biology and Chemistry": ["蛋白质", "细胞", "分子", "化学反应", "基因", "催化剂"],
    "Computer Science and Engineering": ["算法", "编译器", "数据库", "网络", "软件", "处理器"],
    "Economics and Business": ["市场", "通货膨胀", "投资", "利润", "供给", "需求"],
    "History and Geography": ["朝代", "帝国", "河流", "大陆", "世纪", "古代"],
    "Law and Policy": ["法律", "法院", "合同", "法规", "立法", "判决"],
    "Mathematics and Physics": ["定理", "积分", "速度", "量子", "矩阵", "证明"],
    "Medicine and Health": ["患者", "诊断", "治疗", "疫苗", "临床", "症状"],
    "Philosophy Arts and Culture": ["哲学", "艺术", "文化", "诗歌", "美学", "伦理"],
    "Project and Practical Management": ["项目", "管理", "进度", "团队", "预算", "流程"],
    "Psychology Sociology and Education": ["心理", "社会", "教育", "学生", "情绪", "认知"],
    "Others": ["天气", "花园", "菜谱", "假期", "音乐", "旅行"],
}

FILLER_EN = ["the", "of", "and", "a", "in", "is", "that", "for", "with", "as", "was", "on", "this", "by", "are",
             "which", "from", "an", "be", "it", "new", "study", "report", "first", "shows", "many", "often"]
FILLER_ZH = ["的", "是", "在", "和", "了", "有", "这", "中", "对", "为", "研究", "发展", "问题", "方法", "重要"]

# Words the corruption lexicon knows about, sprinkled into seed pages so
# generated QA text carries corruptible nouns and adjectives.
LEXICON = {
    "nouns": {
        "chlorine": {"hypernym": "chemical element", "siblings": ["chlorine", "oxygen", "hydrogen", "neon"]},
        "proton": {"hypernym": "particle", "siblings": ["proton", "neutron", "electron"]},
        "mercury": {"hypernym": "planet", "siblings": ["mercury", "venus", "mars", "jupiter"]},
        "liver": {"hypernym": "organ", "siblings": ["liver", "kidney", "heart", "lung"]},
        "granite": {"hypernym": "rock", "siblings": ["granite", "basalt", "marble"]},
    },
    "adjectives": {
        "equal": ["unequal"],
        "large": ["small"],
        "small": ["large"],
        "initial": ["final"],
        "final": ["initial"],
        "constant": ["variable"],
    },
}

DOMAINS = {
    "mathematics": ["math.stackexchange.com"],
    "physics": ["physics.stackexchange.com"],
    "chemistry": ["chemistry.stackexchange.com"],
    "biology": ["biology.stackexchange.com"],
    "astronomy": ["astronomy.stackexchange.com"],
    "earth_science": ["earthscience.stackexchange.com"],
    "medical_science": ["medicalsciences.stackexchange.com"],
    "computer_science": ["cs.stackexchange.com"],
    "general_education": ["learn.example.edu"],
}

SEED_SENTENCES = [
    "A sample of chlorine reacts with 2 moles of sodium at a constant temperature of 300 K.",
    "The proton travels 12 meters in 4 seconds under a large uniform field.",
    "Mercury completes one orbit in 88 days while the initial distance stays equal to 0.39 units.",
    "The liver filters about 1.4 liters of blood per minute in a small adult.",
    "A block of granite with mass 27 kg rests on a final slope of 30 degrees.",
    "Two forces of equal size act on the body and the final velocity is 9 m/s.",
]

# (language, source) -> (documents, min words/chars, max words/chars)
PLAN = {
    ("en", "web_pages"): (540, 35, 70),
    ("en", "encyclopedia"): (70, 35, 70),
    ("en", "books"): (70, 120, 200),
    ("en", "qa_forums"): (70, 35, 70),
    ("en", "academic_papers"): (130, 40, 80),
    ("en", "math_corpora"): (130, 40, 80),
    ("en", "code"): (190, 40, 80),
    ("zh", "web_pages"): (220, 80, 160),
    ("zh", "encyclopedia"): (30, 80, 160),
    ("zh", "books"): (40, 200, 320),
    ("zh", "qa_forums"): (30, 80, 160),
}

SEEDS_PER_DISCIPLINE = 4
ROUNDS = 10


def en_text(rng, topic, lo, hi):
    n = rng.randint(lo, hi)
    kws = EN_TOPICS[topic]
    words = [rng.choice(kws) if rng.random() < 0.25 else rng.choice(FILLER_EN) for _ in range(n)]
    out, sentence = [], []
    for i, w in enumerate(words):
        sentence.append(w)
        if len(sentence) >= 10 or i == len(words) - 1:
            s = " ".join(sentence)
            out.append(s[0].upper() + s[1:] + ".")
            sentence = []
    return " ".join(out)


def zh_text(rng, topic, lo, hi):
    n = rng.randint(lo, hi)
    kws = ZH_TOPICS[topic]
    out = []
    while len("".join(out)) < n:
        out.append(rng.choice(kws) if rng.random() < 0.3 else rng.choice(FILLER_ZH))
        if rng.random() < 0.08:
            out.append("。")
    return "".join(out) + "。"


def write_jsonl(path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


def write_json(path, value):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(value, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def main():
    rng = random.Random(SEED)
    corpora = []
    for (lang, source), (count, lo, hi) in PLAN.items():
        topics = list(EN_TOPICS if lang == "en" else ZH_TOPICS)
        rows = []
        for i in range(count):
            # cycle topics first so each one is present in every file
            topic = topics[i % len(topics)] if i < 3 * len(topics) else rng.choice(topics)
            text = en_text(rng, topic, lo, hi) if lang == "en" else zh_text(rng, topic, lo, hi)
            rows.append({"id": f"{lang}-{source}-{i:05d}", "text": text})
        if (lang, source) == ("en", "qa_forums"):
            for disc, hosts in DOMAINS.items():
                for j in range(SEEDS_PER_DISCIPLINE):
                    topic = rng.choice(list(EN_TOPICS))
                    body = " ".join(rng.sample(SEED_SENTENCES, 3))
                    text = body + " " + en_text(rng, topic, 40, 70)
                    rows.append({
                        "id": f"en-seed-{disc}-{j}",
                        "text": text,
                        "url": f"https://{hosts[0]}/questions/{rng.randint(1000, 99999)}",
                    })
        name = f"corpus/{lang}_{source}.jsonl"
        write_jsonl(ROOT / name, rows)
        corpora.append({"path": name, "language": lang, "source": source})

    keywords = {
        "en": {t: {w: 1.0 for w in kws} for t, kws in EN_TOPICS.items() if t != "Others"},
        "zh": {t: {w: 1.0 for w in kws} for t, kws in ZH_TOPICS.items() if t != "Others"},
    }
    write_json(ROOT / "keywords.json", keywords)
    write_json(ROOT / "lexicon.json", LEXICON)
    write_json(ROOT / "domains.json", DOMAINS)

    problems = [
        "Given a list of integers, return the length of the longest strictly increasing subsequence.",
        "Given a string, return the number of distinct palindromic substrings it contains.",
        "Given an n by m grid of 0s and 1s, count the connected regions of 1s.",
        "Given a weighted directed graph, return the shortest distance from node 0 to every node.",
        "Given two sorted arrays, return the median of their union in logarithmic time.",
        "Given a set of intervals, merge all overlapping intervals and return the result sorted.",
        "Given coin denominations and a target, return the fewest coins summing to the target.",
        "Given a binary tree, return the maximum path sum between any two nodes.",
    ]
    write_jsonl(ROOT / "code_seeds.jsonl", [{"id": f"seed-{i}", "problem": p} for i, p in enumerate(problems)])

    snaps = {"en": [], "zh": []}
    for lang, topics in (("en", EN_TOPICS), ("zh", ZH_TOPICS)):
        start = {t: rng.uniform(8.0, 20.0) for t in topics}
        rate = {t: rng.uniform(0.01, 0.08) for t in topics}
        for r in range(ROUNDS):
            ppl = {t: round(start[t] * (1.0 - rate[t]) ** r + rng.uniform(-0.05, 0.05), 6) for t in topics}
            name = f"ppl/{lang}_r{r:02d}.json"
            write_json(ROOT / name, {"round": r, "ppl": ppl})
            snaps[lang].append(name)

    config = {
        "corpora": corpora,
        "keyword_weights_path": "keywords.json",
        "lexicon_path": "lexicon.json",
        "token_counter": "bytes4",
        "total_budget": 100000,
        "round_tokens": 10000,
        "seed": 7,
        "stage1": {
            "alpha": 0.5,
            "validation_per_topic": 3,
            "curriculum": {"k": 10, "strategy": "LH"},
            "ppl_snapshots": snaps,
        },
        "stage2": {
            "synthesis": {
                "quotas": {d: 2 for d in DOMAINS},
                "code_quota": 4,
                "k_demos": 3,
                "domains_path": "domains.json",
                "code_seed_path": "code_seeds.jsonl",
                "created_at": "2024-01-01T00:00:00Z",
            },
            "corruption": {"ratio": 0.3, "seed": 11},
        },
        "endpoints": {
            "chat": {"base_url": "mock://chat", "cassette": "cassettes/chat.json", "cassette_mode": "replay"},
            "scorer": {"base_url": "mock://scorer", "cassette": "cassettes/scorer.json", "cassette_mode": "replay"},
        },
    }
    write_json(ROOT / "desk.json", config)


if __name__ == "__main__":
    main()
