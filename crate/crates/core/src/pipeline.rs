//! Assembles an experiment world from a configuration and runs the attack
//! pipeline end to end: corpus -> embeddings -> clusters -> poison plan ->
//! trigger optimization -> poisoned store.

use std::collections::HashMap;
use std::path::Path;

use crate::agent::{ActionSet, AgentModel, OutcomeRule, TargetEvaluator};
use crate::cluster::{kmeans, ClusterCenters};
use crate::config::{EmbedderConfig, ExperimentConfig};
use crate::corpus::{load_corpus, DemonstrationRecord, QueryCorpus, Trigger, Vocabulary};
use crate::embedder::EmbedderSpec;
use crate::error::{Error, Result};
use crate::kbase::{build, materialize_poison, plan_poison, KnowledgeBase, PoisonPlan};
use crate::lm::NGramModel;
use crate::optimizer::{optimize, OptimizeContext, OptimizeOutcome};

/// Seed offsets so one data seed drives independent streams.
const CLUSTER_SEED_SALT: u64 = 0x636c7573;
const POISON_SEED_SALT: u64 = 0x706f6973;

/// Immutable bundle of everything an experiment needs.
pub struct World {
    pub cfg: ExperimentConfig,
    pub vocab: Vocabulary,
    pub corpus: QueryCorpus,
    pub spec: EmbedderSpec,
    pub lm: NGramModel,
    pub centers: ClusterCenters,
    pub kb_clean: KnowledgeBase,
    pub plan: PoisonPlan,
    pub aset: ActionSet,
    pub agent: AgentModel,
    pub rules: OutcomeRule,
    /// Synonym table for the rephrasing defense, when configured.
    pub synonyms: Option<HashMap<String, Vec<String>>>,
}

impl World {
    pub fn target_action(&self) -> &str {
        self.aset.target_label()
    }

    /// Builds the poisoned store for a concrete trigger:
    /// clean records plus the materialized adversarial set.
    pub fn poisoned_kb(&self, trigger: &Trigger) -> Result<KnowledgeBase> {
        let mut records = self.kb_clean.records().to_vec();
        records.extend(materialize_poison(
            &self.plan,
            self.kb_clean.records(),
            trigger,
            &self.vocab,
        )?);
        build(records, &self.spec)
    }

    pub fn target_evaluator(&self) -> TargetEvaluator<'_> {
        TargetEvaluator {
            model: &self.agent,
            aset: &self.aset,
            spec: &self.spec,
            kb_clean: &self.kb_clean,
            plan: &self.plan,
            k: self.cfg.retrieval.k.min(self.kb_clean.len() + self.plan.source_indices.len()),
        }
    }

    /// Runs the trigger search with this world's optimizer configuration.
    pub fn optimize_trigger(&self) -> Result<OptimizeOutcome> {
        let mut cfg = self.cfg.optimizer.clone();
        cfg.seed = self.cfg.seeds.optimizer;
        let ctx = OptimizeContext {
            cfg,
            spec: &self.spec,
            vocab: &self.vocab,
            lm: &self.lm,
            centers: &self.centers,
            train_queries: &self.corpus.train,
            tar_eval: self.target_evaluator(),
        };
        optimize(&ctx)
    }

    /// Rebuilds the embedding-dependent parts under another embedder, keeping
    /// the corpus, poison plan and agent fixed. Used by transfer experiments.
    pub fn with_embedder(&self, embedder: &EmbedderConfig) -> Result<World> {
        let spec = EmbedderSpec::new(embedder.kind, embedder.dim, self.vocab.len(), embedder.seed)?;
        let kb_clean = build(self.kb_clean.records().to_vec(), &spec)?;
        let centers = cluster_keys(&kb_clean, &self.cfg)?;
        Ok(World {
            cfg: self.cfg.clone(),
            vocab: self.vocab.clone(),
            corpus: self.corpus.clone(),
            spec,
            lm: self.lm.clone(),
            centers,
            kb_clean,
            plan: self.plan.clone(),
            aset: self.aset.clone(),
            agent: self.agent.clone(),
            rules: self.rules.clone(),
            synonyms: self.synonyms.clone(),
        })
    }
}

fn cluster_keys(kb: &KnowledgeBase, cfg: &ExperimentConfig) -> Result<ClusterCenters> {
    let points: Vec<_> = (0..kb.len()).map(|i| kb.key_embedding(i)).collect();
    let n = cfg.clusters.n.min(points.len());
    kmeans(&points, n, cfg.clusters.max_iters, cfg.seeds.data ^ CLUSTER_SEED_SALT)
}

/// Loads data files and builds the full world for a configuration.
pub fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    cfg.validate()?;
    let cfg = cfg.resolved();

    let vocab = match &cfg.paths.vocab {
        Some(path) => Some(Vocabulary::load(path).map_err(|e| {
            Error::Config(format!("paths.vocab: {e}"))
        })?),
        None => None,
    };
    let (corpus, vocab) = load_corpus(
        &cfg.paths.corpus,
        vocab,
        cfg.split.train_ratio,
        cfg.seeds.data,
    )
    .map_err(|e| match e {
        Error::Io(io) => Error::Config(format!(
            "paths.corpus: cannot read {}: {io}",
            cfg.paths.corpus.display()
        )),
        other => other,
    })?;
    if corpus.train.is_empty() || corpus.eval.is_empty() {
        return Err(Error::Config(
            "split.train_ratio: both splits must be nonempty".into(),
        ));
    }

    let mut actions: Vec<String> = corpus
        .train
        .iter()
        .chain(&corpus.eval)
        .map(|q| q.benign_action.clone())
        .collect();
    actions.push(cfg.poison.target_action.clone());
    let aset = ActionSet::new(actions, &cfg.poison.target_action)?;

    cfg.optimizer.validate(vocab.len())?;

    let spec = EmbedderSpec::new(
        cfg.embedder.kind,
        cfg.embedder.dim,
        vocab.len(),
        cfg.embedder.seed,
    )?;

    let clean_records: Vec<DemonstrationRecord> = corpus
        .train
        .iter()
        .map(|q| DemonstrationRecord::clean(q.clone()))
        .collect();
    let kb_clean = build(clean_records, &spec)?;
    let centers = cluster_keys(&kb_clean, &cfg)?;

    let lm = NGramModel::fit(&corpus.train, cfg.lm.order, cfg.lm.alpha, vocab.len())?;

    let plan = plan_poison(
        kb_clean.records(),
        cfg.poison.count,
        cfg.poison.strategy,
        &cfg.poison.target_action,
        cfg.optimizer.position,
        cfg.seeds.data ^ POISON_SEED_SALT,
    )?;

    let mut rules = OutcomeRule::load(&cfg.paths.outcome_rules).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!(
            "paths.outcome_rules: cannot read {}: {io}",
            cfg.paths.outcome_rules.display()
        )),
        other => other,
    })?;
    if let Some(rate) = cfg.agent.safety_filter_pass_rate {
        rules.safety_filter_pass_rate = rate;
    }

    let synonyms = match &cfg.paths.synonyms {
        Some(path) => {
            let body = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("paths.synonyms: cannot read {}: {e}", path.display()))
            })?;
            Some(serde_json::from_str(&body)?)
        }
        None => None,
    };

    let agent = AgentModel {
        mode: cfg.agent.mode,
        beta: cfg.agent.beta,
        prior_strength: cfg.agent.prior_strength,
        gamma: cfg.agent.gamma,
        seed: cfg.seeds.agent,
    };
    agent.validate()?;

    Ok(World {
        cfg,
        vocab,
        corpus,
        spec,
        lm,
        centers,
        kb_clean,
        plan,
        aset,
        agent,
        rules,
        synonyms,
    })
}

/// Convenience: write synthetic data into `dir` and return a config wired to
/// those files. Tests and the benchmark harness build on this.
pub fn synthetic_config(
    params: &crate::synth::SynthParams,
    dir: impl AsRef<Path>,
) -> Result<ExperimentConfig> {
    let files = crate::synth::write_to_dir(params, &dir)?;
    let mut cfg = ExperimentConfig::default();
    cfg.paths.corpus = files.corpus;
    cfg.paths.vocab = Some(files.vocab);
    cfg.paths.outcome_rules = files.outcome_rules;
    cfg.paths.synonyms = Some(files.synonyms);
    cfg.paths.output_dir = dir.as_ref().join("runs");
    cfg.poison.target_action = params.target_action.clone();
    cfg.split.train_ratio = params.train as f64 / (params.train + params.eval) as f64;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthParams;

    fn tiny_params() -> SynthParams {
        SynthParams {
            vocab_size: 120,
            train: 120,
            eval: 30,
            ..SynthParams::default()
        }
    }

    fn tiny_config(dir: &std::path::Path) -> ExperimentConfig {
        let mut cfg = synthetic_config(&tiny_params(), dir).unwrap();
        cfg.optimizer.top_m = 60;
        cfg.optimizer.coherence_samples = 10;
        cfg
    }

    #[test]
    fn world_builds_from_synthetic_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let world = build_world(&cfg).unwrap();
        assert_eq!(world.corpus.train.len(), 120);
        assert_eq!(world.corpus.eval.len(), 30);
        assert_eq!(world.kb_clean.len(), 120);
        assert_eq!(world.centers.centers.len(), 8);
        assert_eq!(world.aset.target_label(), "halt");
        // Train/eval disjoint by scenario id.
        let train_ids: std::collections::HashSet<_> =
            world.corpus.train.iter().map(|q| &q.scenario_id).collect();
        assert!(world.corpus.eval.iter().all(|q| !train_ids.contains(&q.scenario_id)));
    }

    #[test]
    fn poisoned_kb_counts_and_invariants() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let world = build_world(&cfg).unwrap();
        let trigger = Trigger::new(vec![3, 4, 5]).unwrap();
        let kb = world.poisoned_kb(&trigger).unwrap();
        assert_eq!(kb.len(), 124);
        assert_eq!(kb.poison_count(), 4);
        assert_eq!(kb.clean_count(), 120);
        for r in kb.records().iter().filter(|r| r.poisoned) {
            r.validate(Some(&trigger), Some(world.target_action())).unwrap();
        }
    }

    #[test]
    fn missing_corpus_is_a_config_error() {
        let mut cfg = ExperimentConfig::default();
        cfg.paths.corpus = "/nonexistent/corpus.jsonl".into();
        let err = match build_world(&cfg) {
            Err(e) => e,
            Ok(_) => panic!("expected a config error"),
        };
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("paths.corpus"));
    }
}
