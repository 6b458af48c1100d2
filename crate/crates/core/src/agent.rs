//! Simulated retrieval-augmented agent.
//!
//! The agent mixes a per-query prior with a demonstration vote: retrieved
//! demonstrations vote for their stored action, and demonstrations whose keys
//! carry the active trigger get their vote scaled by `1 + gamma`. The
//! black-box target-loss estimator treats `act` as an action oracle and
//! averages indicator outcomes over repeated stochastic calls.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    contains_subsequence, splice_ids, DemonstrationRecord, InsertPos, Query, TokenId, Trigger,
};
use crate::embedder::{embed, EmbedderSpec};
use crate::error::{Error, Result};
use crate::kbase::{
    materialize_poison, resolve_records, retrieve, retrieve_batch_with_extra, KnowledgeBase,
    PoisonPlan, RetrievalResult,
};

/// Finite action label set; includes the target action and every benign one.
#[derive(Debug, Clone)]
pub struct ActionSet {
    actions: Vec<String>,
    index: HashMap<String, usize>,
    target: usize,
}

impl ActionSet {
    pub fn new(mut actions: Vec<String>, target_action: &str) -> Result<Self> {
        actions.sort();
        actions.dedup();
        if actions.len() < 2 {
            return Err(Error::invalid("an action set needs at least two actions"));
        }
        let index: HashMap<String, usize> = actions
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i))
            .collect();
        let target = *index
            .get(target_action)
            .ok_or_else(|| Error::config(format!("target action {target_action:?} not in action set")))?;
        Ok(Self {
            actions,
            index,
            target,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn target_label(&self) -> &str {
        &self.actions[self.target]
    }

    pub fn label(&self, i: usize) -> &str {
        &self.actions[i]
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn labels(&self) -> &[String] {
        &self.actions
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentMode {
    Deterministic,
    Stochastic,
}

/// Demonstration-vote mixture agent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentModel {
    pub mode: AgentMode,
    /// Demonstration weight in (0, 1]; 0 would ignore retrieval entirely.
    pub beta: f64,
    /// Prior mass on the query's own benign action.
    pub prior_strength: f64,
    /// Extra vote weight for demonstrations whose key carries the trigger.
    pub gamma: f64,
    pub seed: u64,
}

impl AgentModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config(format!("agent.beta must be in (0,1], got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.prior_strength) {
            return Err(Error::config("agent.prior_strength must be in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("agent.gamma must be in [0,1]"));
        }
        Ok(())
    }

    /// Prior over actions conditioned on the query's benign action.
    pub fn prior(&self, aset: &ActionSet, benign_action: &str) -> Result<Vec<f64>> {
        let own = aset
            .id(benign_action)
            .ok_or_else(|| Error::invalid(format!("benign action {benign_action:?} not in action set")))?;
        let rest = (1.0 - self.prior_strength) / (aset.len() - 1) as f64;
        let mut p = vec![rest; aset.len()];
        p[own] = self.prior_strength;
        Ok(p)
    }
}

/// What the agent sees of one retrieved demonstration.
#[derive(Debug, Clone, Copy)]
pub struct DemoView<'a> {
    pub value_action: &'a str,
    pub key_ids: &'a [TokenId],
}

impl<'a> DemoView<'a> {
    pub fn from_record(r: &'a DemonstrationRecord) -> Self {
        Self {
            value_action: &r.value_action,
            key_ids: &r.key.token_ids,
        }
    }
}

/// Mixture distribution over actions:
/// `(1 - beta) * prior + beta * weighted demo vote`, where a demonstration
/// whose key contains the active trigger votes with weight `1 + gamma`.
pub fn action_distribution(
    model: &AgentModel,
    aset: &ActionSet,
    benign_action: &str,
    demos: &[DemoView<'_>],
    trigger: Option<&[TokenId]>,
) -> Result<Vec<f64>> {
    if demos.is_empty() {
        return Err(Error::invalid("action distribution needs at least one demonstration"));
    }
    let prior = model.prior(aset, benign_action)?;
    let mut vote = vec![0.0; aset.len()];
    let mut total = 0.0;
    for demo in demos {
        let a = aset
            .id(demo.value_action)
            .ok_or_else(|| Error::invalid(format!("demo action {:?} not in action set", demo.value_action)))?;
        let boosted = trigger.map_or(false, |t| contains_subsequence(demo.key_ids, t));
        let w = if boosted { 1.0 + model.gamma } else { 1.0 };
        vote[a] += w;
        total += w;
    }
    let mut p = Vec::with_capacity(aset.len());
    for a in 0..aset.len() {
        p.push((1.0 - model.beta) * prior[a] + model.beta * vote[a] / total);
    }
    Ok(p)
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn sample(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let mut draw = rng.gen::<f64>();
    for (i, &v) in p.iter().enumerate() {
        draw -= v;
        if draw <= 0.0 {
            return i;
        }
    }
    p.len() - 1
}

/// One action step. Deterministic mode takes the argmax (ties go to the
/// lower action index); stochastic mode samples from the distribution.
pub fn act(
    model: &AgentModel,
    aset: &ActionSet,
    benign_action: &str,
    demos: &[DemoView<'_>],
    trigger: Option<&[TokenId]>,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let p = action_distribution(model, aset, benign_action, demos, trigger)?;
    Ok(match model.mode {
        AgentMode::Deterministic => argmax(&p),
        AgentMode::Stochastic => sample(&p, rng),
    })
}

/// Convenience for callers holding a retrieval result over a built KB.
pub fn demo_views<'a>(
    kb: &'a KnowledgeBase,
    extra: &'a [DemonstrationRecord],
    result: &RetrievalResult,
) -> Vec<DemoView<'a>> {
    resolve_records(result, kb, extra)
        .into_iter()
        .map(DemoView::from_record)
        .collect()
}

/// White-box target loss: negative mean probability of the target action for
/// triggered queries retrieving from the poisoned store. Range [-1, 0].
pub fn target_loss(
    model: &AgentModel,
    aset: &ActionSet,
    spec: &EmbedderSpec,
    trigger: &Trigger,
    position: InsertPos,
    queries: &[Query],
    kb_poisoned: &KnowledgeBase,
    k: usize,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::invalid("target loss needs at least one query"));
    }
    let mut acc = 0.0;
    for q in queries {
        let at = position.resolve(q.len())?;
        let ids = splice_ids(&q.token_ids, trigger.token_ids(), at);
        let emb = embed(spec, &ids)?;
        let result = retrieve(kb_poisoned, &emb, k)?;
        let views = demo_views(kb_poisoned, &[], &result);
        let p = action_distribution(model, aset, &q.benign_action, &views, Some(trigger.token_ids()))?;
        acc += p[aset.target()];
    }
    Ok(-acc / queries.len() as f64)
}

/// Black-box finite-sample estimate of the target loss: indicator frequency
/// of the target action over `n_samples` stochastic calls per query,
/// normalized by both sample count and query count.
pub fn target_loss_estimate(
    model: &AgentModel,
    aset: &ActionSet,
    spec: &EmbedderSpec,
    trigger: &Trigger,
    position: InsertPos,
    queries: &[Query],
    kb_poisoned: &KnowledgeBase,
    k: usize,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::invalid("target loss needs at least one query"));
    }
    if n_samples == 0 {
        return Err(Error::invalid("estimator needs n_samples >= 1"));
    }
    let mut hits = 0u64;
    for q in queries {
        let at = position.resolve(q.len())?;
        let ids = splice_ids(&q.token_ids, trigger.token_ids(), at);
        let emb = embed(spec, &ids)?;
        let result = retrieve(kb_poisoned, &emb, k)?;
        let views = demo_views(kb_poisoned, &[], &result);
        for _ in 0..n_samples {
            let a = act(model, aset, &q.benign_action, &views, Some(trigger.token_ids()), rng)?;
            if a == aset.target() {
                hits += 1;
            }
        }
    }
    Ok(-(hits as f64) / (n_samples as f64 * queries.len() as f64))
}

/// Target-loss backend used inside the optimizer: rebuilds only the poisoned
/// keys for each candidate trigger instead of re-embedding the whole store.
pub struct TargetEvaluator<'a> {
    pub model: &'a AgentModel,
    pub aset: &'a ActionSet,
    pub spec: &'a EmbedderSpec,
    pub kb_clean: &'a KnowledgeBase,
    pub plan: &'a PoisonPlan,
    pub k: usize,
}

impl<'a> TargetEvaluator<'a> {
    fn poison_views(
        &self,
        trigger: &Trigger,
    ) -> Result<(Vec<(nalgebra::DVector<f64>, bool)>, Vec<(Vec<TokenId>, String)>)> {
        let clean = self.kb_clean.records();
        let mut extra_embs = Vec::with_capacity(self.plan.source_indices.len());
        let mut extra_views = Vec::with_capacity(self.plan.source_indices.len());
        for &i in &self.plan.source_indices {
            let source = &clean[i];
            let at = self.plan.position.resolve(source.key.len())?;
            let ids = splice_ids(&source.key.token_ids, trigger.token_ids(), at);
            let action = match self.plan.strategy {
                crate::corpus::PoisonStrategy::SpuriousCorrelation => source.value_action.clone(),
                _ => self.plan.target_action.clone(),
            };
            extra_embs.push((embed(self.spec, &ids)?, true));
            extra_views.push((ids, action));
        }
        Ok((extra_embs, extra_views))
    }

    /// White-box loss for one candidate trigger over a query batch.
    pub fn eval(&self, trigger: &Trigger, queries: &[&Query]) -> Result<f64> {
        if queries.is_empty() {
            return Err(Error::invalid("target loss needs at least one query"));
        }
        let (extra_embs, extra_views) = self.poison_views(trigger)?;
        let mut triggered = Vec::with_capacity(queries.len());
        for q in queries {
            let at = self.plan.position.resolve(q.len())?;
            let ids = splice_ids(&q.token_ids, trigger.token_ids(), at);
            triggered.push(embed(self.spec, &ids)?);
        }
        let results = retrieve_batch_with_extra(self.kb_clean, &extra_embs, &triggered, self.k)?;
        let mut acc = 0.0;
        for (q, result) in queries.iter().zip(&results) {
            let views: Vec<DemoView<'_>> = result
                .indices
                .iter()
                .map(|&idx| {
                    if idx < self.kb_clean.len() {
                        DemoView::from_record(self.kb_clean.record(idx))
                    } else {
                        let (ids, action) = &extra_views[idx - self.kb_clean.len()];
                        DemoView {
                            value_action: action,
                            key_ids: ids,
                        }
                    }
                })
                .collect();
            let p = action_distribution(
                self.model,
                self.aset,
                &q.benign_action,
                &views,
                Some(trigger.token_ids()),
            )?;
            acc += p[self.aset.target()];
        }
        Ok(-acc / queries.len() as f64)
    }

    /// Black-box variant: indicator frequency over stochastic action draws.
    pub fn eval_estimate(
        &self,
        trigger: &Trigger,
        queries: &[&Query],
        n_samples: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if queries.is_empty() {
            return Err(Error::invalid("target loss needs at least one query"));
        }
        let (extra_embs, extra_views) = self.poison_views(trigger)?;
        let mut triggered = Vec::with_capacity(queries.len());
        for q in queries {
            let at = self.plan.position.resolve(q.len())?;
            let ids = splice_ids(&q.token_ids, trigger.token_ids(), at);
            triggered.push(embed(self.spec, &ids)?);
        }
        let results = retrieve_batch_with_extra(self.kb_clean, &extra_embs, &triggered, self.k)?;
        let mut hits = 0u64;
        for (q, result) in queries.iter().zip(&results) {
            let views: Vec<DemoView<'_>> = result
                .indices
                .iter()
                .map(|&idx| {
                    if idx < self.kb_clean.len() {
                        DemoView::from_record(self.kb_clean.record(idx))
                    } else {
                        let (ids, action) = &extra_views[idx - self.kb_clean.len()];
                        DemoView {
                            value_action: action,
                            key_ids: ids,
                        }
                    }
                })
                .collect();
            for _ in 0..n_samples {
                let a = act(
                    self.model,
                    self.aset,
                    &q.benign_action,
                    &views,
                    Some(trigger.token_ids()),
                    rng,
                )?;
                if a == self.aset.target() {
                    hits += 1;
                }
            }
        }
        Ok(-(hits as f64) / (n_samples as f64 * queries.len() as f64))
    }

    /// The same value computed through a fully rebuilt poisoned store; used
    /// to cross-check the fast path.
    pub fn eval_via_rebuild(
        &self,
        trigger: &Trigger,
        queries: &[Query],
        vocab: &crate::corpus::Vocabulary,
    ) -> Result<f64> {
        let mut records = self.kb_clean.records().to_vec();
        records.extend(materialize_poison(self.plan, self.kb_clean.records(), trigger, vocab)?);
        let kb = crate::kbase::build(records, self.spec)?;
        target_loss(
            self.model,
            self.aset,
            self.spec,
            trigger,
            self.plan.position,
            queries,
            &kb,
            self.k,
        )
    }
}

/// Per-scenario action-to-outcome tables plus the safety-filter pass rate.
/// Ordered maps keep the serialized file byte-stable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeRule {
    pub safety_filter_pass_rate: f64,
    pub scenarios: BTreeMap<String, BTreeMap<String, String>>,
}

impl OutcomeRule {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let rule: OutcomeRule = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        rule.validate()?;
        Ok(rule)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.safety_filter_pass_rate) {
            return Err(Error::config("safety_filter_pass_rate must be in [0,1]"));
        }
        Ok(())
    }
}

/// Maps an action through the scenario's outcome table. The adversarial
/// outcome succeeds only when the action is the target and the safety-filter
/// draw passes. The draw is consumed only for target actions with a
/// fractional pass rate, so rates of exactly 0 or 1 stay deterministic.
pub fn outcome(
    rule: &OutcomeRule,
    aset: &ActionSet,
    action: usize,
    scenario_id: &str,
    rng: &mut ChaCha8Rng,
) -> Result<(String, bool)> {
    let table = rule
        .scenarios
        .get(scenario_id)
        .ok_or_else(|| Error::invalid(format!("unknown scenario {scenario_id:?}")))?;
    let label = aset.label(action);
    let out = table
        .get(label)
        .ok_or_else(|| Error::invalid(format!("no outcome for action {label:?} in scenario {scenario_id:?}")))?
        .clone();
    let success = if action == aset.target() {
        let rate = rule.safety_filter_pass_rate;
        if rate >= 1.0 {
            true
        } else if rate <= 0.0 {
            false
        } else {
            rng.gen::<f64>() < rate
        }
    } else {
        false
    };
    Ok((out, success))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn aset() -> ActionSet {
        ActionSet::new(
            vec!["go".into(), "stop".into(), "yield".into()],
            "stop",
        )
        .unwrap()
    }

    fn model(mode: AgentMode, beta: f64, prior_strength: f64, gamma: f64) -> AgentModel {
        AgentModel {
            mode,
            beta,
            prior_strength,
            gamma,
            seed: 0,
        }
    }

    fn demos_with_actions<'a>(actions: &'a [&'a str], keys: &'a [Vec<TokenId>]) -> Vec<DemoView<'a>> {
        actions
            .iter()
            .zip(keys)
            .map(|(a, k)| DemoView {
                value_action: a,
                key_ids: k,
            })
            .collect()
    }

    #[test]
    fn pure_vote_with_all_poisoned_gives_target_prob_one() {
        let aset = aset();
        let m = model(AgentMode::Deterministic, 1.0, 0.9, 0.0);
        let keys = vec![vec![1, 2], vec![3, 4], vec![5, 6], vec![7, 8]];
        let demos = demos_with_actions(&["stop", "stop", "stop", "stop"], &keys);
        let p = action_distribution(&m, &aset, "go", &demos, None).unwrap();
        assert_eq!(p[aset.target()], 1.0);
    }

    #[test]
    fn beta_zero_mixture_endpoint_is_the_prior() {
        let aset = aset();
        // The config contract requires beta > 0, but the mixture itself is
        // well defined at the endpoint and must reduce to the prior.
        let bad = model(AgentMode::Deterministic, 0.0, 0.9, 0.0);
        assert!(bad.validate().is_err());
        let m = model(AgentMode::Deterministic, 0.0, 0.9, 0.0);
        let keys = vec![vec![1]];
        let demos = demos_with_actions(&["stop"], &keys);
        let p = action_distribution(&m, &aset, "go", &demos, None).unwrap();
        let prior = m.prior(&aset, "go").unwrap();
        assert_eq!(p, prior);
    }

    #[test]
    fn mixture_arithmetic() {
        // beta = 0.5, gamma = 0, prior puts all mass on the benign action,
        // demos vote 2-of-4 for the target: P(target) = 0.25, P(benign) = 0.75.
        let aset = aset();
        let m = model(AgentMode::Deterministic, 0.5, 1.0, 0.0);
        let keys = vec![vec![1], vec![2], vec![3], vec![4]];
        let demos = demos_with_actions(&["stop", "stop", "go", "go"], &keys);
        let p = action_distribution(&m, &aset, "go", &demos, None).unwrap();
        let go = aset.id("go").unwrap();
        assert!((p[aset.target()] - 0.25).abs() < 1e-12);
        assert!((p[go] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn distribution_normalizes_with_gamma_boost() {
        let aset = aset();
        let m = model(AgentMode::Deterministic, 0.8, 0.6, 0.7);
        let trigger = vec![9u32, 9];
        let keys = vec![vec![1, 9, 9], vec![2], vec![9, 9, 3]];
        let demos = demos_with_actions(&["stop", "go", "yield"], &keys);
        let p = action_distribution(&m, &aset, "go", &demos, Some(&trigger)).unwrap();
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn deterministic_act_matches_argmax_and_breaks_ties_low() {
        let aset = aset();
        let m = model(AgentMode::Deterministic, 1.0, 0.9, 0.0);
        let keys = vec![vec![1], vec![2]];
        // Tie between "go" and "stop": lower index wins ("go" sorts first).
        let demos = demos_with_actions(&["stop", "go"], &keys);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = act(&m, &aset, "yield", &demos, None, &mut rng).unwrap();
        assert_eq!(aset.label(a), "go");
    }

    #[test]
    fn stochastic_frequencies_match_distribution() {
        let aset = aset();
        let m = model(AgentMode::Stochastic, 1.0, 0.9, 0.0);
        let keys: Vec<Vec<TokenId>> = (0..10).map(|i| vec![i]).collect();
        let actions: Vec<&str> = (0..10).map(|i| if i < 7 { "stop" } else { "go" }).collect();
        let demos = demos_with_actions(&actions, &keys);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mut hits = 0;
        for _ in 0..n {
            if act(&m, &aset, "go", &demos, None, &mut rng).unwrap() == aset.target() {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.7).abs() < 0.02, "freq {freq}");
    }

    /// World where query 1 retrieves five demos voting 4-of-5 for the
    /// target and query 2 retrieves five voting 3-of-5: the white-box loss
    /// is the mean, -0.7. Axis-aligned embeddings route each query to its
    /// own block of the store.
    #[test]
    fn target_loss_is_mean_target_probability() {
        use crate::kbase::build;
        use nalgebra::DMatrix;

        // Tokens: 0 -> (1,0), 1 -> (0,1), 2 -> (0,0) (the trigger).
        let table = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let spec = crate::embedder::EmbedderSpec::from_parts(
            crate::embedder::EmbedderKind::MeanPool,
            table,
            DMatrix::identity(2, 2),
        );
        let aset = ActionSet::new(vec!["go".into(), "stop".into()], "stop").unwrap();
        let model = AgentModel {
            mode: AgentMode::Deterministic,
            beta: 1.0,
            prior_strength: 0.9,
            gamma: 0.0,
            seed: 0,
        };
        let query = |tok: u32, id: &str| Query {
            scenario_id: id.into(),
            text: String::new(),
            token_ids: vec![tok],
            benign_action: "go".into(),
        };
        let mut records = Vec::new();
        for i in 0..5 {
            let mut r = DemonstrationRecord::clean(query(0, &format!("a{i}")));
            r.value_action = if i < 4 { "stop" } else { "go" }.into();
            records.push(r);
        }
        for i in 0..5 {
            let mut r = DemonstrationRecord::clean(query(1, &format!("b{i}")));
            r.value_action = if i < 3 { "stop" } else { "go" }.into();
            records.push(r);
        }
        let kb = build(records, &spec).unwrap();
        let queries = vec![query(0, "q1"), query(1, "q2")];
        let trigger = Trigger::new(vec![2]).unwrap();
        let loss = target_loss(
            &model,
            &aset,
            &spec,
            &trigger,
            InsertPos::Append,
            &queries,
            &kb,
            5,
        )
        .unwrap();
        assert!((loss - (-0.7)).abs() < 1e-12, "loss {loss}");

        // Endpoints: an agent that always emits the target scores -1; one
        // that never does scores 0.
        let certain = AgentModel {
            prior_strength: 0.0,
            beta: 0.0,
            ..model.clone()
        };
        // prior_strength 0 puts all prior mass on the non-benign action,
        // which here is the target.
        let always = target_loss(
            &certain,
            &aset,
            &spec,
            &trigger,
            InsertPos::Append,
            &queries,
            &kb,
            5,
        )
        .unwrap();
        assert_eq!(always, -1.0);
        let never = AgentModel {
            prior_strength: 1.0,
            beta: 0.0,
            ..model
        };
        let zero = target_loss(
            &never,
            &aset,
            &spec,
            &trigger,
            InsertPos::Append,
            &queries,
            &kb,
            5,
        )
        .unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn outcome_gate_behaviour() {
        let aset = aset();
        let mut scenarios = BTreeMap::new();
        let mut table = BTreeMap::new();
        table.insert("stop".to_string(), "hazard".to_string());
        table.insert("go".to_string(), "nominal".to_string());
        table.insert("yield".to_string(), "nominal".to_string());
        scenarios.insert("s1".to_string(), table);
        let rule = OutcomeRule {
            safety_filter_pass_rate: 1.0,
            scenarios,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (label, success) = outcome(&rule, &aset, aset.target(), "s1", &mut rng).unwrap();
        assert_eq!(label, "hazard");
        assert!(success);
        let go = aset.id("go").unwrap();
        let (label, success) = outcome(&rule, &aset, go, "s1", &mut rng).unwrap();
        assert_eq!(label, "nominal");
        assert!(!success);
        assert!(outcome(&rule, &aset, go, "nope", &mut rng).is_err());
    }

    #[test]
    fn outcome_gate_frequency() {
        let aset = aset();
        let mut scenarios = BTreeMap::new();
        let mut table = BTreeMap::new();
        for a in ["stop", "go", "yield"] {
            table.insert(a.to_string(), "x".to_string());
        }
        scenarios.insert("s".to_string(), table);
        let rule = OutcomeRule {
            safety_filter_pass_rate: 0.8,
            scenarios,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let mut hits = 0;
        for _ in 0..n {
            let (_, success) = outcome(&rule, &aset, aset.target(), "s", &mut rng).unwrap();
            if success {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.8).abs() < 0.02, "freq {freq}");
    }
}
