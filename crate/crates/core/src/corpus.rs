//! Tokenization, vocabulary management, query ingestion and trigger injection.
//!
//! Everything here is immutable after construction and safe to share across
//! worker threads.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved string for the shared out-of-vocabulary token.
pub const UNK_TOKEN: &str = "<unk>";

pub type TokenId = u32;

/// Ordered token list with a bijective token -> id map and a reserved
/// unknown-token id.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    unk: TokenId,
}

impl Vocabulary {
    /// Builds a vocabulary from tokens in id order. Appends the unknown token
    /// if the list does not already contain it.
    pub fn new(mut tokens: Vec<String>) -> Result<Self> {
        if !tokens.iter().any(|t| t == UNK_TOKEN) {
            tokens.push(UNK_TOKEN.to_string());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        let unk = index[UNK_TOKEN];
        Ok(Self { tokens, index, unk })
    }

    /// Builds a vocabulary from raw texts: `<unk>` first, then every distinct
    /// normalized token in order of first appearance.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut tokens = vec![UNK_TOKEN.to_string()];
        let mut seen: HashSet<String> = tokens.iter().cloned().collect();
        for text in texts {
            for word in split_words(text) {
                if seen.insert(word.clone()) {
                    tokens.push(word);
                }
            }
        }
        Self::new(tokens)
    }

    /// Reads a sidecar vocabulary file: one token per line in id order.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = body
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        if tokens.is_empty() {
            return Err(Error::invalid("empty vocabulary file"));
        }
        Self::new(tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> TokenId {
        self.unk
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Lowercases and splits on whitespace and punctuation. Digits and letters
/// survive; everything else separates words.
fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            for lower in ch.to_lowercase() {
                current.push(lower);
            }
        } else if !current.is_empty() {
            words.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Maps text to token ids; out-of-vocabulary words map to the unknown id.
///
/// Errors with "empty query" when nothing survives splitting.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    if vocab.is_empty() {
        return Err(Error::invalid("empty vocabulary"));
    }
    let words = split_words(text);
    if words.is_empty() {
        return Err(Error::invalid("empty query"));
    }
    Ok(words
        .iter()
        .map(|w| vocab.id(w).unwrap_or_else(|| vocab.unk_id()))
        .collect())
}

/// Canonical text for a token-id sequence (space-joined token strings).
pub fn detokenize(ids: &[TokenId], vocab: &Vocabulary) -> String {
    ids.iter()
        .map(|&id| vocab.token(id).unwrap_or(UNK_TOKEN))
        .collect::<Vec<_>>()
        .join(" ")
}

/// A user query: token ids plus the metadata needed for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub scenario_id: String,
    pub text: String,
    pub token_ids: Vec<TokenId>,
    pub benign_action: String,
}

impl Query {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// The attack payload: a short token-id sequence under optimization.
///
/// Length is fixed for the duration of one optimization run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trigger {
    token_ids: Vec<TokenId>,
}

impl Trigger {
    pub fn new(token_ids: Vec<TokenId>) -> Result<Self> {
        if token_ids.is_empty() {
            return Err(Error::invalid("trigger length must be >= 1"));
        }
        Ok(Self { token_ids })
    }

    pub fn token_ids(&self) -> &[TokenId] {
        &self.token_ids
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Copy with the token at `position` replaced.
    pub fn with_token(&self, position: usize, token: TokenId) -> Self {
        let mut ids = self.token_ids.clone();
        ids[position] = token;
        Self { token_ids: ids }
    }

    pub fn text(&self, vocab: &Vocabulary) -> String {
        detokenize(&self.token_ids, vocab)
    }
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.token_ids)
    }
}

/// Where a trigger is spliced into a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertPos {
    /// Suffix splice (the default).
    Append,
    /// Insert before the token currently at this index.
    At(usize),
}

impl InsertPos {
    pub fn resolve(&self, query_len: usize) -> Result<usize> {
        match *self {
            InsertPos::Append => Ok(query_len),
            InsertPos::At(p) if p <= query_len => Ok(p),
            InsertPos::At(p) => Err(Error::invalid(format!(
                "trigger position {p} out of range for query of length {query_len}"
            ))),
        }
    }
}

impl Default for InsertPos {
    fn default() -> Self {
        InsertPos::Append
    }
}

/// Token-level splice used by every triggered-query construction.
pub fn splice_ids(query_ids: &[TokenId], trigger_ids: &[TokenId], at: usize) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(query_ids.len() + trigger_ids.len());
    out.extend_from_slice(&query_ids[..at]);
    out.extend_from_slice(trigger_ids);
    out.extend_from_slice(&query_ids[at..]);
    out
}

/// Returns a copy of `q` with the trigger spliced in at `position`.
/// The original query is untouched; the new text is the canonical
/// detokenization of the spliced ids.
pub fn inject_trigger(
    q: &Query,
    trigger: &Trigger,
    position: InsertPos,
    vocab: &Vocabulary,
) -> Result<Query> {
    let at = position.resolve(q.len())?;
    let token_ids = splice_ids(&q.token_ids, trigger.token_ids(), at);
    let text = detokenize(&token_ids, vocab);
    Ok(Query {
        scenario_id: q.scenario_id.clone(),
        text,
        token_ids,
        benign_action: q.benign_action.clone(),
    })
}

/// How a poisoned record was constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoisonStrategy {
    Clean,
    /// Value rewritten to the target action, trigger injected into the key.
    AdversarialBackdoor,
    /// Key already carried the target action; only the trigger is added.
    SpuriousCorrelation,
}

/// One key-value demonstration in the knowledge base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationRecord {
    pub key: Query,
    pub value_action: String,
    pub poisoned: bool,
    pub strategy: PoisonStrategy,
}

impl DemonstrationRecord {
    pub fn clean(key: Query) -> Self {
        let value_action = key.benign_action.clone();
        Self {
            key,
            value_action,
            poisoned: false,
            strategy: PoisonStrategy::Clean,
        }
    }

    /// Checks the construction invariants of a record against the trigger and
    /// target action it was allegedly built with.
    pub fn validate(&self, trigger: Option<&Trigger>, target_action: Option<&str>) -> Result<()> {
        if !self.poisoned && self.strategy != PoisonStrategy::Clean {
            return Err(Error::invalid("unpoisoned record with a poison strategy"));
        }
        if self.poisoned {
            let trigger = trigger
                .ok_or_else(|| Error::invalid("poisoned record validated without a trigger"))?;
            if !contains_subsequence(&self.key.token_ids, trigger.token_ids()) {
                return Err(Error::invalid("poisoned key does not contain the trigger"));
            }
            let target = target_action
                .ok_or_else(|| Error::invalid("poisoned record validated without target action"))?;
            match self.strategy {
                PoisonStrategy::AdversarialBackdoor => {
                    if self.value_action != target {
                        return Err(Error::invalid("adversarial record value is not the target"));
                    }
                }
                PoisonStrategy::SpuriousCorrelation => {
                    if self.value_action != target || self.key.benign_action != target {
                        return Err(Error::invalid(
                            "spurious record must keep a benign action equal to the target",
                        ));
                    }
                }
                PoisonStrategy::Clean => {
                    return Err(Error::invalid("poisoned record flagged clean"));
                }
            }
        }
        Ok(())
    }
}

/// True when `needle` occurs as a contiguous subsequence of `haystack`.
pub fn contains_subsequence(haystack: &[TokenId], needle: &[TokenId]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Train/eval query split, disjoint by scenario id.
#[derive(Debug, Clone)]
pub struct QueryCorpus {
    pub train: Vec<Query>,
    pub eval: Vec<Query>,
    pub seed: u64,
}

/// One corpus line on disk.
#[derive(Debug, Serialize, Deserialize)]
struct CorpusLine {
    id: String,
    text: String,
    action: String,
}

/// Loads a JSONL corpus and splits it into train/eval.
///
/// When `vocab` is `None` the vocabulary is built from the file itself.
/// The split shuffles line indices with the seed and then restores file
/// order within each side, so re-running with the same inputs reproduces
/// the exact same corpus.
pub fn load_corpus(
    path: impl AsRef<Path>,
    vocab: Option<Vocabulary>,
    train_ratio: f64,
    seed: u64,
) -> Result<(QueryCorpus, Vocabulary)> {
    if !(0.0..=1.0).contains(&train_ratio) {
        return Err(Error::config(format!(
            "split.train_ratio must be in [0,1], got {train_ratio}"
        )));
    }
    let body = std::fs::read_to_string(path)?;
    let mut lines = Vec::new();
    for (lineno, raw) in body.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        lines.push((lineno + 1, parsed));
    }
    if lines.is_empty() {
        return Err(Error::invalid("corpus file contains no records"));
    }

    let vocab = match vocab {
        Some(v) => v,
        None => Vocabulary::from_texts(lines.iter().map(|(_, l)| l.text.as_str()))?,
    };

    let mut queries = Vec::with_capacity(lines.len());
    let mut seen_ids = HashSet::new();
    for (lineno, line) in &lines {
        if !seen_ids.insert(line.id.clone()) {
            return Err(Error::Parse {
                line: *lineno,
                message: format!("duplicate scenario_id {:?}", line.id),
            });
        }
        let token_ids = tokenize(&line.text, &vocab).map_err(|e| Error::Parse {
            line: *lineno,
            message: e.to_string(),
        })?;
        queries.push(Query {
            scenario_id: line.id.clone(),
            text: line.text.clone(),
            token_ids,
            benign_action: line.action.clone(),
        });
    }

    let n = queries.len();
    let n_train = ((train_ratio * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut train_idx: Vec<usize> = order[..n_train].to_vec();
    let mut eval_idx: Vec<usize> = order[n_train..].to_vec();
    train_idx.sort_unstable();
    eval_idx.sort_unstable();

    let mut train = Vec::with_capacity(train_idx.len());
    let mut eval = Vec::with_capacity(eval_idx.len());
    let mut queries: Vec<Option<Query>> = queries.into_iter().map(Some).collect();
    for i in train_idx {
        train.push(queries[i].take().expect("index used once"));
    }
    for i in eval_idx {
        eval.push(queries[i].take().expect("index used once"));
    }

    Ok((QueryCorpus { train, eval, seed }, vocab))
}
