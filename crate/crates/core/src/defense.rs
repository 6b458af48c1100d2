//! Defense and resilience protocols: perplexity filtering, trigger
//! perturbations, and synonym rephrasing.
//!
//! The poisoned store stays fixed throughout; defenses only transform or
//! reject the incoming queries.

use std::collections::HashMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DefenseConfig, RephraseScope};
use crate::corpus::{detokenize, tokenize, Query, TokenId, Trigger, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{evaluate_with, quantile_sorted, EvalPair, MetricsReport};
use crate::kbase::KnowledgeBase;
use crate::lm::NGramModel;
use crate::pipeline::World;

/// Query-side transformations applied to triggered inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    /// Insert three random lowercase letters inside the trigger span text.
    LetterInjection,
    /// Insert one random in-vocabulary word inside the trigger span.
    WordInjection,
    /// Replace trigger tokens (or the whole query) with table synonyms.
    Rephrase,
}

/// Defense protocols selectable from the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    PerplexityFilter,
    LetterInjection,
    WordInjection,
    Rephrase,
}

impl DefenseKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ppl" | "perplexity_filter" => Ok(Self::PerplexityFilter),
            "letter" | "letter_injection" => Ok(Self::LetterInjection),
            "word" | "word_injection" => Ok(Self::WordInjection),
            "rephrase" => Ok(Self::Rephrase),
            other => Err(Error::config(format!("unknown defense {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::PerplexityFilter => "perplexity_filter",
            Self::LetterInjection => "letter_injection",
            Self::WordInjection => "word_injection",
            Self::Rephrase => "rephrase",
        }
    }
}

/// Outcome of one defended evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseReport {
    pub defense: String,
    /// Fraction of triggered queries rejected before evaluation.
    pub filtered_fraction: f64,
    pub report: MetricsReport,
}

impl DefenseReport {
    pub fn csv_header() -> String {
        format!("defense,filtered_fraction,{}", MetricsReport::csv_header())
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.defense, self.filtered_fraction, self.report.csv_row())
    }
}

/// Splits queries into (kept, rejected) by perplexity against a threshold set
/// at the given quantile of the benign reference distribution. A quantile of
/// 1.0 keeps everything.
pub fn perplexity_filter(
    lm: &NGramModel,
    queries: &[Query],
    benign_reference: &[Query],
    quantile: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if benign_reference.is_empty() {
        return Err(Error::invalid("perplexity filter needs a benign reference set"));
    }
    if !(0.0 < quantile && quantile <= 1.0) {
        return Err(Error::config("defense.quantile must be in (0,1]"));
    }
    let threshold = if quantile >= 1.0 {
        f64::INFINITY
    } else {
        let mut ref_ppls = benign_reference
            .iter()
            .map(|q| lm.perplexity(&q.token_ids))
            .collect::<Result<Vec<_>>>()?;
        ref_ppls.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        quantile_sorted(&ref_ppls, quantile)
    };
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for (i, q) in queries.iter().enumerate() {
        if lm.perplexity(&q.token_ids)? > threshold {
            rejected.push(i);
        } else {
            kept.push(i);
        }
    }
    Ok((kept, rejected))
}

fn random_lowercase(rng: &mut ChaCha8Rng) -> char {
    (b'a' + rng.gen_range(0..26)) as char
}

/// Applies one perturbation to a triggered query. `span` is the token range
/// the trigger occupies. Tokens outside the span are untouched except in
/// whole-query rephrase mode. Returns the perturbed query and the new span.
pub fn perturb(
    q: &Query,
    span: Range<usize>,
    kind: PerturbationKind,
    vocab: &Vocabulary,
    cfg: &DefenseConfig,
    synonyms: Option<&HashMap<String, Vec<String>>>,
    rng: &mut ChaCha8Rng,
) -> Result<(Query, Range<usize>)> {
    if span.end > q.token_ids.len() || span.is_empty() {
        return Err(Error::invalid("perturbation needs a valid trigger span"));
    }
    let mut ids = q.token_ids.clone();
    let new_span;
    match kind {
        PerturbationKind::LetterInjection => {
            // Work on the span's text so an inserted letter can split or
            // corrupt a token on re-tokenization.
            let mut text: Vec<char> = detokenize(&ids[span.clone()], vocab).chars().collect();
            for _ in 0..cfg.letter_count {
                let at = rng.gen_range(0..=text.len());
                text.insert(at, random_lowercase(rng));
            }
            let respanned: String = text.into_iter().collect();
            let new_ids = tokenize(&respanned, vocab)?;
            let tail = ids.split_off(span.end);
            ids.truncate(span.start);
            ids.extend_from_slice(&new_ids);
            new_span = span.start..span.start + new_ids.len();
            ids.extend(tail);
        }
        PerturbationKind::WordInjection => {
            for _ in 0..cfg.word_count {
                let word = rng.gen_range(0..vocab.len() as TokenId);
                // Strictly inside the span, at any boundary between its tokens.
                let at = span.start + rng.gen_range(0..=span.len());
                ids.insert(at, word);
            }
            new_span = span.start..span.end + cfg.word_count;
        }
        PerturbationKind::Rephrase => {
            let table = synonyms
                .ok_or_else(|| Error::invalid("rephrase defense needs a synonym table"))?;
            let range = match cfg.rephrase_scope {
                RephraseScope::TriggerOnly => span.clone(),
                RephraseScope::WholeQuery => 0..ids.len(),
            };
            for i in range {
                let token = vocab
                    .token(ids[i])
                    .ok_or_else(|| Error::invalid("token id out of vocabulary"))?;
                if let Some(subs) = table.get(token) {
                    if !subs.is_empty() {
                        let pick = &subs[rng.gen_range(0..subs.len())];
                        ids[i] = vocab.id(pick).unwrap_or_else(|| vocab.unk_id());
                    }
                }
            }
            new_span = span;
        }
    }
    let text = detokenize(&ids, vocab);
    Ok((
        Query {
            scenario_id: q.scenario_id.clone(),
            text,
            token_ids: ids,
            benign_action: q.benign_action.clone(),
        },
        new_span,
    ))
}

/// Applies a defense to every triggered eval query and evaluates the
/// surviving or modified set against the fixed poisoned store.
pub fn evaluate_under_defense(
    world: &World,
    kb_poisoned: &KnowledgeBase,
    trigger: &Trigger,
    kind: DefenseKind,
) -> Result<DefenseReport> {
    let pairs = world.eval_pairs(trigger)?;
    let cfg = &world.cfg.defense;
    let mut rng = ChaCha8Rng::seed_from_u64(world.cfg.seeds.defense);
    let ctx = world.eval_context();

    let (surviving, filtered_fraction) = match kind {
        DefenseKind::PerplexityFilter => {
            let triggered: Vec<Query> = pairs.iter().map(|p| p.triggered.clone()).collect();
            let (kept, rejected) =
                perplexity_filter(&world.lm, &triggered, &world.corpus.eval, cfg.quantile)?;
            let fraction = rejected.len() as f64 / pairs.len() as f64;
            let kept_pairs: Vec<EvalPair> = kept.into_iter().map(|i| pairs[i].clone()).collect();
            (kept_pairs, fraction)
        }
        DefenseKind::LetterInjection | DefenseKind::WordInjection | DefenseKind::Rephrase => {
            let perturbation = match kind {
                DefenseKind::LetterInjection => PerturbationKind::LetterInjection,
                DefenseKind::WordInjection => PerturbationKind::WordInjection,
                _ => PerturbationKind::Rephrase,
            };
            let mut out = Vec::with_capacity(pairs.len());
            for pair in &pairs {
                let at = world.cfg.optimizer.position.resolve(pair.query.len())?;
                let span = at..at + trigger.len();
                let (perturbed, _) = perturb(
                    &pair.triggered,
                    span,
                    perturbation,
                    &world.vocab,
                    cfg,
                    world.synonyms.as_ref(),
                    &mut rng,
                )?;
                out.push(EvalPair {
                    query: pair.query.clone(),
                    triggered: perturbed,
                });
            }
            (out, 0.0)
        }
    };

    let report = if surviving.is_empty() {
        // The filter blocked every triggered query: the attack is fully
        // defeated, benign utility is unaffected.
        crate::eval::evaluate_blocked(&ctx, kb_poisoned, &pairs)?
    } else {
        evaluate_with(&ctx, kb_poisoned, trigger, &surviving)?
    };
    Ok(DefenseReport {
        defense: kind.name().to_string(),
        filtered_fraction,
        report,
    })
}
