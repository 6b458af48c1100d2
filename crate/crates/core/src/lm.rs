//! Additive-smoothing n-gram language model.
//!
//! Stands in for a small pretrained LM: it scores the coherence of triggered
//! queries (mean negative log-likelihood over the whole sequence) and backs
//! the perplexity-filter defense. Contexts are padded with a begin-of-sequence
//! marker that is not part of the vocabulary, so every position of a sequence
//! is scored, and additive smoothing keeps every probability finite.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Query, TokenId};
use crate::error::{Error, Result};

/// Sentinel context symbol for positions before the sequence start.
const BOS: TokenId = TokenId::MAX;

#[derive(Debug, Clone, Default)]
struct ContextCounts {
    total: u64,
    per_token: HashMap<TokenId, u64>,
}

/// Order-n model with additive-alpha smoothing over a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct NGramModel {
    order: usize,
    alpha: f64,
    vocab_size: usize,
    counts: HashMap<Vec<TokenId>, ContextCounts>,
}

impl NGramModel {
    /// Counts all order-n windows of the training sequences.
    pub fn fit_sequences(
        sequences: impl IntoIterator<Item = impl AsRef<[TokenId]>>,
        order: usize,
        alpha: f64,
        vocab_size: usize,
    ) -> Result<Self> {
        if order < 1 {
            return Err(Error::config("lm.order must be >= 1"));
        }
        if alpha <= 0.0 {
            return Err(Error::config("lm.alpha must be > 0"));
        }
        if vocab_size == 0 {
            return Err(Error::config("lm vocab_size must be positive"));
        }
        let mut counts: HashMap<Vec<TokenId>, ContextCounts> = HashMap::new();
        let mut any = false;
        for seq in sequences {
            let seq = seq.as_ref();
            any = any || !seq.is_empty();
            for i in 0..seq.len() {
                let ctx = context_window(seq, i, order);
                let entry = counts.entry(ctx).or_default();
                entry.total += 1;
                *entry.per_token.entry(seq[i]).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(Error::invalid("cannot fit a language model on an empty corpus"));
        }
        Ok(Self {
            order,
            alpha,
            vocab_size,
            counts,
        })
    }

    pub fn fit(corpus: &[Query], order: usize, alpha: f64, vocab_size: usize) -> Result<Self> {
        Self::fit_sequences(corpus.iter().map(|q| q.token_ids.as_slice()), order, alpha, vocab_size)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Smoothed probability of `token` after `context` (most recent last).
    pub fn prob(&self, context: &[TokenId], token: TokenId) -> f64 {
        let v = self.vocab_size as f64;
        match self.counts.get(context) {
            Some(c) => {
                let num = *c.per_token.get(&token).unwrap_or(&0) as f64 + self.alpha;
                num / (c.total as f64 + self.alpha * v)
            }
            None => 1.0 / v,
        }
    }

    pub fn log_prob(&self, context: &[TokenId], token: TokenId) -> f64 {
        self.prob(context, token).ln()
    }

    /// Mean negative log-likelihood of every position in the sequence.
    pub fn coherence_loss(&self, seq: &[TokenId]) -> Result<f64> {
        self.span_coherence(seq, 0..seq.len())
    }

    /// Mean negative log-likelihood restricted to `span` positions, with the
    /// surrounding tokens as context. The candidate-sampling step scores the
    /// trigger span this way so a single token swap is not diluted by the
    /// rest of the query.
    pub fn span_coherence(&self, seq: &[TokenId], span: std::ops::Range<usize>) -> Result<f64> {
        if seq.is_empty() || span.is_empty() || span.end > seq.len() {
            return Err(Error::invalid("cannot score an empty sequence or span"));
        }
        let mut acc = 0.0;
        for i in span.clone() {
            let ctx = context_window(seq, i, self.order);
            acc -= self.log_prob(&ctx, seq[i]);
        }
        Ok(acc / span.len() as f64)
    }

    /// `exp(coherence_loss)`.
    pub fn perplexity(&self, seq: &[TokenId]) -> Result<f64> {
        Ok(self.coherence_loss(seq)?.exp())
    }

    /// Draws one token from the smoothed next-token distribution.
    pub fn sample_token(&self, context: &[TokenId], rng: &mut ChaCha8Rng) -> TokenId {
        let v = self.vocab_size as f64;
        let (total, per_token) = match self.counts.get(context) {
            Some(c) => (c.total as f64, Some(&c.per_token)),
            None => (0.0, None),
        };
        let denom = total + self.alpha * v;
        let mut draw = rng.gen::<f64>() * denom;
        for t in 0..self.vocab_size as TokenId {
            let count = per_token.and_then(|m| m.get(&t)).copied().unwrap_or(0) as f64;
            draw -= count + self.alpha;
            if draw <= 0.0 {
                return t;
            }
        }
        self.vocab_size as TokenId - 1
    }

    /// Samples a length-`len` continuation of `prefix`.
    pub fn sample_sequence(
        &self,
        prefix: &[TokenId],
        len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<TokenId> {
        let mut seq: Vec<TokenId> = prefix.to_vec();
        for _ in 0..len {
            let i = seq.len();
            let ctx = context_window(&seq, i, self.order);
            seq.push(self.sample_token(&ctx, rng));
        }
        seq[prefix.len()..].to_vec()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = NGramFile::from(self);
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let file: NGramFile = serde_json::from_str(&body)?;
        file.try_into()
    }
}

fn context_window(seq: &[TokenId], pos: usize, order: usize) -> Vec<TokenId> {
    let need = order - 1;
    let mut ctx = Vec::with_capacity(need);
    for back in (1..=need).rev() {
        if pos >= back {
            ctx.push(seq[pos - back]);
        } else {
            ctx.push(BOS);
        }
    }
    ctx
}

/// JSON count file for experiment reproducibility.
#[derive(Debug, Serialize, Deserialize)]
struct NGramFile {
    order: usize,
    alpha: f64,
    vocab_size: usize,
    /// context (comma-joined ids, `^` for BOS) -> token -> count
    counts: std::collections::BTreeMap<String, std::collections::BTreeMap<String, u64>>,
}

impl From<&NGramModel> for NGramFile {
    fn from(m: &NGramModel) -> Self {
        let mut counts = std::collections::BTreeMap::new();
        for (ctx, c) in &m.counts {
            let key = ctx
                .iter()
                .map(|&t| {
                    if t == BOS {
                        "^".to_string()
                    } else {
                        t.to_string()
                    }
                })
                .collect::<Vec<_>>()
                .join(",");
            let mut per = std::collections::BTreeMap::new();
            for (&t, &n) in &c.per_token {
                per.insert(t.to_string(), n);
            }
            counts.insert(key, per);
        }
        Self {
            order: m.order,
            alpha: m.alpha,
            vocab_size: m.vocab_size,
            counts,
        }
    }
}

impl TryFrom<NGramFile> for NGramModel {
    type Error = Error;

    fn try_from(f: NGramFile) -> Result<Self> {
        let mut counts = HashMap::new();
        for (key, per) in f.counts {
            let ctx: Vec<TokenId> = if key.is_empty() {
                Vec::new()
            } else {
                key.split(',')
                    .map(|s| {
                        if s == "^" {
                            Ok(BOS)
                        } else {
                            s.parse::<TokenId>()
                                .map_err(|e| Error::invalid(format!("bad context key: {e}")))
                        }
                    })
                    .collect::<Result<_>>()?
            };
            let mut cc = ContextCounts::default();
            for (t, n) in per {
                let token = t
                    .parse::<TokenId>()
                    .map_err(|e| Error::invalid(format!("bad token key: {e}")))?;
                cc.per_token.insert(token, n);
                cc.total += n;
            }
            counts.insert(ctx, cc);
        }
        Ok(NGramModel {
            order: f.order,
            alpha: f.alpha,
            vocab_size: f.vocab_size,
            counts,
        })
    }
}
