//! Synthetic benchmark corpus generation.
//!
//! The generated world is clustered on purpose: the vocabulary is split into
//! per-action topic pools plus a shared pool, and each query draws most of
//! its tokens from its topic. Actions therefore correlate with token content,
//! so retrieval is informative, the agent's benign accuracy is learnable, and
//! k-means finds real structure.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::OutcomeRule;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub vocab_size: usize,
    pub train: usize,
    pub eval: usize,
    pub actions: Vec<String>,
    /// Action whose outcome is the hazardous one in the generated rules.
    pub target_action: String,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    pub safety_filter_pass_rate: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            vocab_size: 500,
            train: 5000,
            eval: 500,
            actions: default_actions(),
            target_action: "halt".into(),
            seed: 7,
            min_len: 6,
            max_len: 10,
            safety_filter_pass_rate: 0.9,
        }
    }
}

/// Hub tokens per topic: every node keeps half of its outgoing edges in the
/// hub set, so hubs carry about half the token mass and same-topic queries
/// overlap on them.
const TOPIC_HUBS: usize = 8;
/// Outgoing edges per token in the topic transition graph.
const OUT_DEGREE: usize = 16;

pub fn default_actions() -> Vec<String> {
    vec!["cruise".into(), "yield".into(), "reroute".into(), "halt".into()]
}

/// Everything one generation run produces, before hitting the filesystem.
#[derive(Debug)]
pub struct SynthData {
    pub vocab: Vec<String>,
    pub corpus_jsonl: String,
    pub rules: OutcomeRule,
    pub synonyms: HashMap<String, Vec<String>>,
}

/// Paths written by [`write_to_dir`].
#[derive(Debug, Clone)]
pub struct SynthFiles {
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    pub outcome_rules: PathBuf,
    pub synonyms: PathBuf,
}

/// Deterministic antisymmetric transition graph over one topic pool: every
/// node gets up to [`OUT_DEGREE`] outgoing edges, roughly half into the hub
/// set, with no self-loops, duplicates or reverse edges.
fn topic_graph(n: usize) -> Vec<Vec<usize>> {
    let tail = n - TOPIC_HUBS;
    let mut adj: Vec<Vec<usize>> = vec![Vec::with_capacity(OUT_DEGREE); n];
    let mut has_edge = std::collections::HashSet::new();
    for node in 0..n {
        let hub_slots = if node < TOPIC_HUBS { 3 } else { OUT_DEGREE / 2 };
        let mut proposals: Vec<usize> = Vec::with_capacity(OUT_DEGREE);
        for slot in 0..hub_slots {
            proposals.push((node * (2 * slot + 3) + slot + 1) % TOPIC_HUBS);
        }
        for slot in 0..(OUT_DEGREE - hub_slots) {
            proposals.push(TOPIC_HUBS + (node * (2 * slot + 7) + 3 * slot + 5) % tail);
        }
        for start in proposals {
            let is_hub = start < TOPIC_HUBS;
            let mut cand = start;
            let limit = if is_hub { TOPIC_HUBS } else { tail };
            let mut accepted = false;
            for _ in 0..limit {
                let ok = cand != node
                    && !has_edge.contains(&(node, cand))
                    && !has_edge.contains(&(cand, node));
                if ok {
                    has_edge.insert((node, cand));
                    adj[node].push(cand);
                    accepted = true;
                    break;
                }
                cand = if is_hub {
                    (cand + 1) % TOPIC_HUBS
                } else {
                    TOPIC_HUBS + (cand - TOPIC_HUBS + 1) % tail
                };
            }
            let _ = accepted;
        }
        debug_assert!(!adj[node].is_empty());
    }
    adj
}

const SYLLABLES: &[&str] = &[
    "ba", "be", "bi", "bo", "bu", "da", "de", "di", "do", "du", "ka", "ke", "ki", "ko", "ku",
    "la", "le", "li", "lo", "lu", "ma", "me", "mi", "mo", "mu", "na", "ne", "ni", "no", "nu",
    "ra", "re", "ri", "ro", "ru", "sa", "se", "si", "so", "su", "ta", "te", "ti", "to", "tu",
    "va", "ve", "vi", "vo", "vu", "za", "ze", "zi", "zo", "zu",
];

fn make_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut word = String::new();
    for _ in 0..syllables {
        word.push_str(SYLLABLES[rng.gen_range(0..SYLLABLES.len())]);
    }
    word
}

pub fn generate(params: &SynthParams) -> Result<SynthData> {
    if params.vocab_size < 2 || params.train == 0 || params.eval == 0 {
        return Err(Error::config("gen-synthetic sizes must be positive"));
    }
    if params.actions.len() < 2 {
        return Err(Error::config("gen-synthetic needs at least two actions"));
    }
    if !params.actions.contains(&params.target_action) {
        return Err(Error::config(format!(
            "target action {:?} not in the action list",
            params.target_action
        )));
    }
    if params.min_len == 0 || params.min_len > params.max_len {
        return Err(Error::config("gen-synthetic query length range is invalid"));
    }
    let n_topics = params.actions.len();
    let n_words = params.vocab_size - 1; // reserve <unk>
    if n_words < n_topics * 2 {
        return Err(Error::config("vocab too small for the requested action count"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    // Distinct pseudo-words.
    let mut words = Vec::with_capacity(n_words);
    let mut seen = std::collections::HashSet::new();
    while words.len() < n_words {
        let mut w = make_word(&mut rng);
        while !seen.insert(w.clone()) {
            w.push_str(SYLLABLES[rng.gen_range(0..SYLLABLES.len())]);
        }
        words.push(w);
    }

    // Partition into per-topic pools; the first TOPIC_HUBS words of each
    // pool are its hubs.
    let per_topic = n_words / n_topics;
    if per_topic < TOPIC_HUBS + OUT_DEGREE {
        return Err(Error::config("vocab too small for the topic graph structure"));
    }
    let mut topic_pools: Vec<Vec<String>> = Vec::with_capacity(n_topics);
    for t in 0..n_topics {
        let start = t * per_topic;
        let end = if t + 1 == n_topics { n_words } else { start + per_topic };
        topic_pools.push(words[start..end].to_vec());
    }

    // Vocabulary file: <unk> first, then every word in generation order.
    let mut vocab = Vec::with_capacity(params.vocab_size);
    vocab.push(crate::corpus::UNK_TOKEN.to_string());
    vocab.extend(words.iter().cloned());

    // Queries are random walks on a deterministic per-topic transition
    // graph. Each node points at a few hubs and a few tail nodes, so bigram
    // statistics are dense enough for the surrogate LM while same-topic
    // queries overlap on hub tokens. The graph has no self-loops and no
    // 2-cycles: a locally coherent token sequence can never be a repeated
    // token or an oscillating pair, and benign keys never contain runs.
    let graphs: Vec<Vec<Vec<usize>>> = topic_pools
        .iter()
        .map(|pool| topic_graph(pool.len()))
        .collect();
    let total = params.train + params.eval;
    let mut corpus_jsonl = String::new();
    let mut scenario_ids = Vec::with_capacity(total);
    for i in 0..total {
        let topic = rng.gen_range(0..n_topics);
        let pool = &topic_pools[topic];
        let len = rng.gen_range(params.min_len..=params.max_len);
        // A minority of queries take one or two off-graph steps, giving the
        // benign perplexity distribution a realistic upper tail.
        let draw: f64 = rng.gen();
        let mut jumps = if draw < 0.75 {
            0
        } else if draw < 0.90 {
            1
        } else {
            2
        };
        let graph = &graphs[topic];
        let mut node = rng.gen_range(0..pool.len());
        let mut tokens = Vec::with_capacity(len);
        tokens.push(pool[node].clone());
        while tokens.len() < len {
            let remaining = len - tokens.len();
            if jumps > 0 && rng.gen::<f64>() < jumps as f64 / remaining as f64 {
                jumps -= 1;
                node = rng.gen_range(0..pool.len());
            } else {
                let out = &graph[node];
                node = out[rng.gen_range(0..out.len())];
            }
            tokens.push(pool[node].clone());
        }
        let id = format!("s{i:06}");
        let line = serde_json::json!({
            "id": id,
            "text": tokens.join(" "),
            "action": params.actions[topic],
        });
        corpus_jsonl.push_str(&serde_json::to_string(&line)?);
        corpus_jsonl.push('\n');
        scenario_ids.push(id);
    }

    // Outcome rules: the target action leads to the hazardous outcome in
    // every scenario; everything else is nominal.
    let mut table = std::collections::BTreeMap::new();
    for action in &params.actions {
        let outcome = if *action == params.target_action {
            "hazard".to_string()
        } else {
            "nominal".to_string()
        };
        table.insert(action.clone(), outcome);
    }
    let mut scenarios = std::collections::BTreeMap::new();
    for id in scenario_ids {
        scenarios.insert(id, table.clone());
    }
    let rules = OutcomeRule {
        safety_filter_pass_rate: params.safety_filter_pass_rate,
        scenarios,
    };

    // Synonym table: pair words within each pool so rephrasing stays
    // in-topic.
    let mut synonyms = HashMap::new();
    for pool in &topic_pools {
        for pair in pool.chunks(2) {
            if let [a, b] = pair {
                synonyms.insert(a.clone(), vec![b.clone()]);
                synonyms.insert(b.clone(), vec![a.clone()]);
            }
        }
    }

    Ok(SynthData {
        vocab,
        corpus_jsonl,
        rules,
        synonyms,
    })
}

/// Writes corpus.jsonl, vocab.txt, outcome_rules.json and synonyms.json.
pub fn write_to_dir(params: &SynthParams, dir: impl AsRef<Path>) -> Result<SynthFiles> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let data = generate(params)?;
    let files = SynthFiles {
        corpus: dir.join("corpus.jsonl"),
        vocab: dir.join("vocab.txt"),
        outcome_rules: dir.join("outcome_rules.json"),
        synonyms: dir.join("synonyms.json"),
    };
    std::fs::write(&files.corpus, &data.corpus_jsonl)?;
    let mut vocab_body = data.vocab.join("\n");
    vocab_body.push('\n');
    std::fs::write(&files.vocab, vocab_body)?;
    data.rules.save(&files.outcome_rules)?;
    // BTreeMap for a canonical, diffable synonyms file.
    let sorted: std::collections::BTreeMap<_, _> = data.synonyms.into_iter().collect();
    std::fs::write(&files.synonyms, serde_json::to_string_pretty(&sorted)?)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_byte_identical_per_seed() {
        let params = SynthParams {
            vocab_size: 120,
            train: 60,
            eval: 20,
            ..SynthParams::default()
        };
        let a = generate(&params).unwrap();
        let b = generate(&params).unwrap();
        assert_eq!(a.corpus_jsonl, b.corpus_jsonl);
        assert_eq!(a.vocab, b.vocab);
        let mut other = params.clone();
        other.seed = 8;
        let c = generate(&other).unwrap();
        assert_ne!(a.corpus_jsonl, c.corpus_jsonl);
    }

    #[test]
    fn vocab_has_requested_size_and_unk() {
        let params = SynthParams {
            vocab_size: 150,
            train: 10,
            eval: 5,
            ..SynthParams::default()
        };
        let data = generate(&params).unwrap();
        assert_eq!(data.vocab.len(), 150);
        assert_eq!(data.vocab[0], crate::corpus::UNK_TOKEN);
        let unique: std::collections::HashSet<_> = data.vocab.iter().collect();
        assert_eq!(unique.len(), 150);
    }

    #[test]
    fn rules_cover_every_scenario() {
        let params = SynthParams {
            vocab_size: 100,
            train: 30,
            eval: 10,
            ..SynthParams::default()
        };
        let data = generate(&params).unwrap();
        assert_eq!(data.rules.scenarios.len(), 40);
        for table in data.rules.scenarios.values() {
            assert_eq!(table["halt"], "hazard");
            assert_eq!(table["cruise"], "nominal");
        }
    }
}
