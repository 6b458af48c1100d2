//! Constrained gradient-guided beam search over trigger tokens.
//!
//! Each iteration, per beam: evaluate the objective on the iteration's query
//! batch, pick one random trigger position, rank replacement tokens by the
//! first-order score of the accumulated objective gradient, sample a coherent
//! subset under a softmax of the surrogate-LM loss, drop candidates that
//! violate the soft target constraint, and finally keep the `b` lowest
//! objectives among candidates that do not exceed their parent's objective.
//!
//! Every stochastic choice draws from one seeded stream, so a fixed seed
//! reproduces the full trace bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::TargetEvaluator;
use crate::cluster::ClusterCenters;
use crate::corpus::{splice_ids, InsertPos, Query, TokenId, Trigger, Vocabulary};
use crate::embedder::{hotflip_scores, top_m_replacements, EmbedderSpec};
use crate::error::{Error, Result};
use crate::lm::NGramModel;
use crate::losses::{
    compactness_loss, objective_gradient, objective_with_terms, uniqueness_loss, LossBreakdown,
    ObjectiveTerms,
};

/// How the target constraint is evaluated during search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TargetBackend {
    /// Exact probability from the simulated agent.
    WhiteBox,
    /// Finite-sample indicator estimate from stochastic action draws.
    BlackBox { n_samples: usize },
}

impl Default for TargetBackend {
    fn default() -> Self {
        TargetBackend::WhiteBox
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Beam width b.
    pub beam_width: usize,
    /// Trigger length in tokens.
    pub trigger_length: usize,
    /// Replacement candidates kept per gradient ranking.
    pub top_m: usize,
    /// Candidates sub-sampled by coherence per beam per iteration.
    pub coherence_samples: usize,
    /// Target-constraint threshold; compared as `L_tar <= -eta_tar`.
    pub eta_tar: f64,
    /// Compactness weight in the combined objective.
    pub lambda: f64,
    /// Maximum search iterations.
    pub max_iters: usize,
    /// Queries per micro-batch.
    pub batch_size: usize,
    /// Micro-batches accumulated per gradient ranking step.
    pub accumulation_steps: usize,
    /// Queries used for each target-loss evaluation.
    pub target_batch_size: usize,
    /// Early stop after this many iterations without improvement; 0 disables.
    pub patience: usize,
    /// Softmax temperature for coherence sampling.
    pub temperature: f64,
    pub position: InsertPos,
    pub seed: u64,
    /// Task-relevant initialization phrases; the surrogate LM is sampled
    /// when empty.
    pub init_phrases: Vec<String>,
    pub disable_uniqueness: bool,
    pub disable_compactness: bool,
    pub disable_target_filter: bool,
    pub disable_coherence: bool,
    pub target_backend: TargetBackend,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beam_width: 5,
            trigger_length: 6,
            top_m: 500,
            coherence_samples: 100,
            eta_tar: 0.8,
            lambda: 0.1,
            max_iters: 1000,
            batch_size: 64,
            accumulation_steps: 30,
            target_batch_size: 64,
            patience: 50,
            temperature: 1.0,
            position: InsertPos::Append,
            seed: 17,
            init_phrases: Vec::new(),
            disable_uniqueness: false,
            disable_compactness: false,
            disable_target_filter: false,
            disable_coherence: false,
            target_backend: TargetBackend::WhiteBox,
        }
    }
}

impl OptimizerConfig {
    pub fn terms(&self) -> ObjectiveTerms {
        ObjectiveTerms {
            use_uniqueness: !self.disable_uniqueness,
            use_compactness: !self.disable_compactness,
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::config("optimizer.beam_width must be >= 1"));
        }
        if self.trigger_length == 0 {
            return Err(Error::config("optimizer.trigger_length must be >= 1"));
        }
        if self.coherence_samples == 0
            || self.coherence_samples > self.top_m
            || self.top_m > vocab_size
        {
            return Err(Error::config(format!(
                "optimizer requires 1 <= coherence_samples ({}) <= top_m ({}) <= vocab size ({vocab_size})",
                self.coherence_samples, self.top_m
            )));
        }
        if self.lambda <= 0.0 {
            return Err(Error::config("optimizer.lambda must be > 0"));
        }
        if self.batch_size == 0 || self.accumulation_steps == 0 || self.target_batch_size == 0 {
            return Err(Error::config(
                "optimizer batch_size, accumulation_steps and target_batch_size must be >= 1",
            ));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config("optimizer.temperature must be > 0"));
        }
        if let TargetBackend::BlackBox { n_samples } = self.target_backend {
            if n_samples == 0 {
                return Err(Error::config("black-box target backend needs n_samples >= 1"));
            }
        }
        self.terms().validate()
    }
}

/// One trigger with its most recent loss evaluation.
#[derive(Debug, Clone)]
pub struct BeamCandidate {
    pub trigger: Trigger,
    pub breakdown: LossBreakdown,
}

/// Search state: the beam, the running best, and the iteration counter.
#[derive(Debug, Clone)]
pub struct BeamState {
    pub candidates: Vec<BeamCandidate>,
    pub iteration: usize,
    pub best: BeamCandidate,
    /// Best accepted objective after each iteration, starting with the
    /// initial beam. Non-increasing by construction.
    pub best_history: Vec<f64>,
    rng: ChaCha8Rng,
}

/// One trace line per (iteration, beam).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub beam: usize,
    pub trigger: Vec<TokenId>,
    pub text: String,
    pub uniqueness: f64,
    pub compactness: f64,
    pub target: f64,
    pub coherence: f64,
    pub objective: f64,
    /// Whether this slot was newly accepted this iteration (vs carried over).
    pub accepted: bool,
}

#[derive(Debug, Clone, Default)]
pub struct OptimizationTrace {
    pub records: Vec<TraceRecord>,
}

impl OptimizationTrace {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace serializes"));
            out.push('\n');
        }
        out
    }
}

/// Everything the search needs, borrowed from the experiment world.
pub struct OptimizeContext<'a> {
    pub cfg: OptimizerConfig,
    pub spec: &'a EmbedderSpec,
    pub vocab: &'a Vocabulary,
    pub lm: &'a NGramModel,
    pub centers: &'a ClusterCenters,
    pub train_queries: &'a [Query],
    pub tar_eval: TargetEvaluator<'a>,
}

pub struct OptimizeOutcome {
    pub best: BeamCandidate,
    pub trace: OptimizationTrace,
    pub iterations_run: usize,
}

/// Initial beam triggers: tokenized pool phrases when provided, otherwise
/// sequences sampled from the surrogate LM. Phrases shorter than the trigger
/// length are padded with LM continuations; longer ones are truncated.
pub fn initialize_triggers(
    cfg: &OptimizerConfig,
    lm: Option<&NGramModel>,
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Trigger>> {
    if cfg.init_phrases.is_empty() && lm.is_none() {
        return Err(Error::config(
            "trigger initialization needs init_phrases or a surrogate language model",
        ));
    }
    let mut triggers = Vec::with_capacity(cfg.beam_width);
    if !cfg.init_phrases.is_empty() {
        let mut order: Vec<usize> = (0..cfg.init_phrases.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(rng);
        for &i in order.iter().take(cfg.beam_width) {
            let mut ids = crate::corpus::tokenize(&cfg.init_phrases[i], vocab)?;
            adjust_length(&mut ids, cfg.trigger_length, lm, rng)?;
            triggers.push(Trigger::new(ids)?);
        }
    }
    while triggers.len() < cfg.beam_width {
        let lm = lm.ok_or_else(|| {
            Error::config("not enough init phrases and no surrogate language model to sample from")
        })?;
        let ids = lm.sample_sequence(&[], cfg.trigger_length, rng);
        triggers.push(Trigger::new(ids)?);
    }
    Ok(triggers)
}

fn adjust_length(
    ids: &mut Vec<TokenId>,
    len: usize,
    lm: Option<&NGramModel>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if ids.len() > len {
        ids.truncate(len);
    }
    while ids.len() < len {
        match lm {
            Some(lm) => {
                let next = lm.sample_sequence(ids, 1, rng);
                ids.extend(next);
            }
            None => {
                // Without an LM, repeat the phrase to length.
                let i = ids.len() % ids.len().max(1);
                let tok = *ids.get(i).ok_or_else(|| Error::invalid("empty init phrase"))?;
                ids.push(tok);
            }
        }
    }
    Ok(())
}

/// The m tokens with the lowest first-order replacement scores.
pub fn propose_replacements(
    spec: &EmbedderSpec,
    gradient: &nalgebra::DVector<f64>,
    m: usize,
) -> Vec<TokenId> {
    top_m_replacements(&hotflip_scores(spec, gradient), m)
}

/// Samples `s` candidates without replacement, with probability proportional
/// to a softmax of negative coherence loss (uniform when `uniform` is set).
pub fn coherence_sample(
    candidates: &[TokenId],
    coherence_losses: &[f64],
    s: usize,
    temperature: f64,
    uniform: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<TokenId> {
    debug_assert_eq!(candidates.len(), coherence_losses.len());
    if s >= candidates.len() {
        return candidates.to_vec();
    }
    let min_loss = coherence_losses.iter().copied().fold(f64::INFINITY, f64::min);
    let mut weights: Vec<f64> = if uniform {
        vec![1.0; candidates.len()]
    } else {
        coherence_losses
            .iter()
            .map(|&l| (-(l - min_loss) / temperature).exp())
            .collect()
    };
    let mut picked = Vec::with_capacity(s);
    let mut alive: Vec<usize> = (0..candidates.len()).collect();
    for _ in 0..s {
        let total: f64 = alive.iter().map(|&i| weights[i]).sum();
        let chosen_pos = if total <= 0.0 {
            0
        } else {
            let mut draw = rng.gen::<f64>() * total;
            let mut pos = alive.len() - 1;
            for (p, &i) in alive.iter().enumerate() {
                draw -= weights[i];
                if draw <= 0.0 {
                    pos = p;
                    break;
                }
            }
            pos
        };
        let idx = alive.remove(chosen_pos);
        weights[idx] = 0.0;
        picked.push(candidates[idx]);
    }
    picked
}

/// Soft target constraint: keep a candidate when its target loss improves on
/// the parent's previous value or already meets the threshold. When nothing
/// survives, the single lowest-target candidate is kept so the search can
/// continue.
pub fn constraint_filter<T: Clone>(
    candidates: &[(T, f64)],
    previous_target: f64,
    eta_tar: f64,
) -> Vec<(T, f64)> {
    let threshold = -eta_tar;
    let kept: Vec<(T, f64)> = candidates
        .iter()
        .filter(|(_, tar)| *tar <= previous_target || *tar <= threshold)
        .cloned()
        .collect();
    if !kept.is_empty() {
        return kept;
    }
    candidates
        .iter()
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
        .cloned()
        .into_iter()
        .collect()
}

impl<'a> OptimizeContext<'a> {
    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.cfg.seed)
    }

    /// Query batch for one iteration: the whole train set in natural order
    /// when it fits, otherwise a sorted sample without replacement.
    fn draw_batch(&self, rng: &mut ChaCha8Rng) -> Vec<&'a Query> {
        let want = self.cfg.batch_size * self.cfg.accumulation_steps;
        if want >= self.train_queries.len() {
            return self.train_queries.iter().collect();
        }
        let mut picks = rand::seq::index::sample(rng, self.train_queries.len(), want).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| &self.train_queries[i]).collect()
    }

    fn target_loss_of(
        &self,
        trigger: &Trigger,
        queries: &[&Query],
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        match self.cfg.target_backend {
            TargetBackend::WhiteBox => self.tar_eval.eval(trigger, queries),
            TargetBackend::BlackBox { n_samples } => {
                self.tar_eval.eval_estimate(trigger, queries, n_samples, rng)
            }
        }
    }

    /// Coherence of the trigger in context: the full triggered query built
    /// from the batch's first query.
    fn coherence_of(&self, context: &Query, trigger: &Trigger) -> Result<f64> {
        let at = self.cfg.position.resolve(context.len())?;
        let ids = splice_ids(&context.token_ids, trigger.token_ids(), at);
        self.lm.coherence_loss(&ids)
    }

    fn evaluate(
        &self,
        trigger: &Trigger,
        batch: &[&Query],
        tar_batch: &[&Query],
        context: &Query,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossBreakdown> {
        let uni = uniqueness_loss(self.spec, trigger, self.cfg.position, batch, self.centers)?;
        let cpt = compactness_loss(self.spec, trigger, self.cfg.position, batch)?;
        let tar = self.target_loss_of(trigger, tar_batch, rng)?;
        let coh = self.coherence_of(context, trigger)?;
        objective_with_terms(uni, cpt, tar, coh, self.cfg.lambda, self.cfg.terms())
    }

    /// Accumulated objective gradient at one trigger position: mean of the
    /// per-micro-batch gradients.
    fn accumulated_gradient(
        &self,
        trigger: &Trigger,
        batch: &[&Query],
        token_index: usize,
    ) -> Result<nalgebra::DVector<f64>> {
        let mut acc = nalgebra::DVector::zeros(self.spec.dim());
        let mut chunks = 0usize;
        for chunk in batch.chunks(self.cfg.batch_size) {
            acc += objective_gradient(
                self.spec,
                trigger,
                self.cfg.position,
                chunk,
                self.centers,
                self.cfg.lambda,
                token_index,
                self.cfg.terms(),
            )?;
            chunks += 1;
        }
        Ok(acc / chunks as f64)
    }
}

/// Builds and evaluates the initial beam.
pub fn initialize_beams(ctx: &OptimizeContext<'_>) -> Result<BeamState> {
    ctx.cfg.validate(ctx.vocab.len())?;
    if ctx.train_queries.is_empty() {
        return Err(Error::invalid("optimizer needs a nonempty train query set"));
    }
    let mut rng = ctx.rng();
    let triggers = initialize_triggers(&ctx.cfg, Some(ctx.lm), ctx.vocab, &mut rng)?;
    let batch = ctx.draw_batch(&mut rng);
    let tar_batch: Vec<&Query> = batch
        .iter()
        .copied()
        .take(ctx.cfg.target_batch_size)
        .collect();
    let context = batch[0];
    let mut candidates = Vec::with_capacity(triggers.len());
    for trigger in triggers {
        let breakdown = ctx.evaluate(&trigger, &batch, &tar_batch, context, &mut rng)?;
        candidates.push(BeamCandidate { trigger, breakdown });
    }
    let best = candidates
        .iter()
        .min_by(|a, b| {
            a.breakdown
                .objective
                .partial_cmp(&b.breakdown.objective)
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .cloned()
        .expect("beam nonempty");
    let best_objective = best.breakdown.objective;
    Ok(BeamState {
        candidates,
        iteration: 0,
        best,
        best_history: vec![best_objective],
        rng,
    })
}

/// One search iteration over every beam.
pub fn step(ctx: &OptimizeContext<'_>, state: &mut BeamState, trace: &mut OptimizationTrace) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut rng = state.rng.clone();
    let batch = ctx.draw_batch(&mut rng);
    let tar_batch: Vec<&Query> = batch
        .iter()
        .copied()
        .take(cfg.target_batch_size)
        .collect();
    let context = batch[0];
    let terms = cfg.terms();

    // Pool of (candidate, newly_accepted) entries for the beam update.
    let mut pool: Vec<(BeamCandidate, bool)> = Vec::new();

    for parent in &state.candidates {
        // Parent losses on this iteration's batch (the gradient anchor and
        // the acceptance reference).
        let parent_uni =
            uniqueness_loss(ctx.spec, &parent.trigger, cfg.position, &batch, ctx.centers)?;
        let parent_cpt = compactness_loss(ctx.spec, &parent.trigger, cfg.position, &batch)?;
        let parent_tar_prev = parent.breakdown.target;
        let parent_tar_now = ctx.target_loss_of(&parent.trigger, &tar_batch, &mut rng)?;
        let parent_coh = ctx.coherence_of(context, &parent.trigger)?;
        let parent_breakdown = objective_with_terms(
            parent_uni,
            parent_cpt,
            parent_tar_now,
            parent_coh,
            cfg.lambda,
            terms,
        )?;
        let refreshed_parent = BeamCandidate {
            trigger: parent.trigger.clone(),
            breakdown: parent_breakdown,
        };

        // Random trigger position for this beam.
        let position = rng.gen_range(0..cfg.trigger_length);

        // Gradient-ranked replacement candidates. Tokens already appearing
        // within distance two of the position are dropped: under a linear
        // pooling embedder such near-repeats inflate the trigger norm while
        // their bigram cost ties with ordinary unseen bigrams, so the beam
        // would ratchet into degenerate runs that no coherence softmax can
        // veto. Natural text at this scale never repeats a token that
        // closely either, so nothing legitimate is excluded.
        let gradient = ctx.accumulated_gradient(&parent.trigger, &batch, position)?;
        let mut proposals = propose_replacements(ctx.spec, &gradient, cfg.top_m);
        let ids = parent.trigger.token_ids();
        let neighbors: Vec<TokenId> = (position.saturating_sub(2)..=(position + 2).min(ids.len() - 1))
            .filter(|&p| p != position)
            .map(|p| ids[p])
            .collect();
        proposals.retain(|t| !neighbors.contains(t));

        // Coherence softmax sampling, scored on the trigger span (plus the
        // token right after it, whose context the last trigger token forms)
        // so one swap is not averaged away by the rest of the query.
        let at = cfg.position.resolve(context.len())?;
        let span_len = cfg.trigger_length + usize::from(at < context.len());
        let mut coh_losses = Vec::with_capacity(proposals.len());
        for &tok in &proposals {
            let cand = parent.trigger.with_token(position, tok);
            let ids = splice_ids(&context.token_ids, cand.token_ids(), at);
            coh_losses.push(ctx.lm.span_coherence(&ids, at..at + span_len)?);
        }
        let sampled = coherence_sample(
            &proposals,
            &coh_losses,
            cfg.coherence_samples,
            cfg.temperature,
            cfg.disable_coherence,
            &mut rng,
        );

        // Soft target constraint.
        let mut with_target = Vec::with_capacity(sampled.len());
        for tok in sampled {
            let cand = parent.trigger.with_token(position, tok);
            let tar = ctx.target_loss_of(&cand, &tar_batch, &mut rng)?;
            with_target.push((cand, tar));
        }
        let survivors = if cfg.disable_target_filter {
            with_target
        } else {
            constraint_filter(&with_target, parent_tar_prev, cfg.eta_tar)
        };

        // Token replacement: keep candidates that do not worsen the parent's
        // same-batch objective.
        for (cand, tar) in survivors {
            let uni = uniqueness_loss(ctx.spec, &cand, cfg.position, &batch, ctx.centers)?;
            let cpt = compactness_loss(ctx.spec, &cand, cfg.position, &batch)?;
            let coh = ctx.coherence_of(context, &cand)?;
            let breakdown = objective_with_terms(uni, cpt, tar, coh, cfg.lambda, terms)?;
            if breakdown.objective <= parent_breakdown.objective {
                pool.push((
                    BeamCandidate {
                        trigger: cand,
                        breakdown,
                    },
                    true,
                ));
            }
        }
        pool.push((refreshed_parent, false));
    }

    // Deduplicate by trigger, keeping the lowest objective, then take the b
    // best (ties broken by token ids for determinism).
    pool.sort_by(|a, b| {
        a.0.breakdown
            .objective
            .partial_cmp(&b.0.breakdown.objective)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.trigger.token_ids().cmp(b.0.trigger.token_ids()))
    });
    let mut next: Vec<(BeamCandidate, bool)> = Vec::with_capacity(cfg.beam_width);
    for (cand, fresh) in pool {
        if next.iter().any(|(c, _)| c.trigger == cand.trigger) {
            continue;
        }
        next.push((cand, fresh));
        if next.len() == cfg.beam_width {
            break;
        }
    }

    state.iteration += 1;
    for (beam_idx, (cand, fresh)) in next.iter().enumerate() {
        trace.records.push(TraceRecord {
            iteration: state.iteration,
            beam: beam_idx,
            trigger: cand.trigger.token_ids().to_vec(),
            text: cand.trigger.text(ctx.vocab),
            uniqueness: cand.breakdown.uniqueness,
            compactness: cand.breakdown.compactness,
            target: cand.breakdown.target,
            coherence: cand.breakdown.coherence,
            objective: cand.breakdown.objective,
            accepted: *fresh,
        });
        if cand.breakdown.objective < state.best.breakdown.objective {
            state.best = cand.clone();
        }
    }
    state.best_history.push(state.best.breakdown.objective);
    state.candidates = next.into_iter().map(|(c, _)| c).collect();
    state.rng = rng;
    Ok(())
}

/// Full search: initialize, iterate to `max_iters` with early stopping, and
/// return the best accepted trigger with the complete trace.
pub fn optimize(ctx: &OptimizeContext<'_>) -> Result<OptimizeOutcome> {
    let mut state = initialize_beams(ctx)?;
    let mut trace = OptimizationTrace::default();
    for (beam_idx, cand) in state.candidates.iter().enumerate() {
        trace.records.push(TraceRecord {
            iteration: 0,
            beam: beam_idx,
            trigger: cand.trigger.token_ids().to_vec(),
            text: cand.trigger.text(ctx.vocab),
            uniqueness: cand.breakdown.uniqueness,
            compactness: cand.breakdown.compactness,
            target: cand.breakdown.target,
            coherence: cand.breakdown.coherence,
            objective: cand.breakdown.objective,
            accepted: true,
        });
    }
    let mut stale = 0usize;
    let mut last_best = state.best.breakdown.objective;
    for _ in 0..ctx.cfg.max_iters {
        step(ctx, &mut state, &mut trace)?;
        if state.best.breakdown.objective < last_best {
            last_best = state.best.breakdown.objective;
            stale = 0;
        } else {
            stale += 1;
        }
        if ctx.cfg.patience > 0 && stale >= ctx.cfg.patience {
            break;
        }
    }
    Ok(OptimizeOutcome {
        best: state.best.clone(),
        iterations_run: state.iteration,
        trace,
    })
}
