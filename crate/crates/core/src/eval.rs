//! Experiment harness: the four attack metrics, ablations, sweeps, transfer
//! matrices, and embedding-projection dumps.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{act, demo_views, ActionSet, AgentModel, OutcomeRule};
use crate::config::{EmbedderConfig, ExperimentConfig};
use crate::corpus::{inject_trigger, Query, Trigger};
use crate::embedder::{embed, EmbedderSpec};
use crate::error::{Error, Result};
use crate::kbase::{retrieve, KnowledgeBase};
use crate::lm::NGramModel;
use crate::optimizer::OptimizationTrace;
use crate::pipeline::{build_world, World};

/// The four paper metrics plus perplexity statistics for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Fraction of triggered eval queries whose entire top-K is poisoned.
    pub asr_r: f64,
    /// Fraction of retrieval successes where the agent emits the target.
    pub asr_a: f64,
    /// False when no query achieved full-poison retrieval (asr_a reads 0).
    pub asr_a_defined: bool,
    /// Fraction of all triggered queries with the adversarial outcome.
    pub asr_t: f64,
    /// Fraction of untriggered queries answered with their benign action.
    pub acc: f64,
    pub ppl_mean: f64,
    pub ppl_p95: f64,
    pub n_eval: usize,
    pub n_retrieval_success: usize,
    pub n_target_actions: usize,
    /// True when some untriggered query retrieved a poisoned entry.
    pub poison_leaked_into_benign: bool,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "config_hash,seed,asr_r,asr_a,asr_a_defined,asr_t,acc,ppl_mean,ppl_p95,n_eval,n_retrieval_success,n_target_actions"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.config_hash,
            self.seed,
            self.asr_r,
            self.asr_a,
            self.asr_a_defined,
            self.asr_t,
            self.acc,
            self.ppl_mean,
            self.ppl_p95,
            self.n_eval,
            self.n_retrieval_success,
            self.n_target_actions
        )
    }
}

/// An untriggered eval query paired with its triggered form.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub query: Query,
    pub triggered: Query,
}

/// Everything `evaluate_with` needs besides the store and the pairs.
pub struct EvalContext<'a> {
    pub spec: &'a EmbedderSpec,
    pub lm: &'a NGramModel,
    pub agent: &'a AgentModel,
    pub aset: &'a ActionSet,
    pub rules: &'a OutcomeRule,
    pub k: usize,
    pub metrics_seed: u64,
    pub config_hash: String,
}

impl World {
    pub fn eval_context(&self) -> EvalContext<'_> {
        EvalContext {
            spec: &self.spec,
            lm: &self.lm,
            agent: &self.agent,
            aset: &self.aset,
            rules: &self.rules,
            k: self.cfg.retrieval.k,
            metrics_seed: self.cfg.seeds.metrics,
            config_hash: self.cfg.hash(),
        }
    }

    /// Triggered/untriggered pairs for the whole eval split.
    pub fn eval_pairs(&self, trigger: &Trigger) -> Result<Vec<EvalPair>> {
        self.corpus
            .eval
            .iter()
            .map(|q| {
                Ok(EvalPair {
                    query: q.clone(),
                    triggered: inject_trigger(q, trigger, self.cfg.optimizer.position, &self.vocab)?,
                })
            })
            .collect()
    }
}

/// Value at quantile `q` of an ascending-sorted slice (smallest element
/// covering at least `q` of the mass).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len() as f64;
    let idx = ((q * n).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Core metric computation over explicit pairs.
///
/// ASR-r counts triggered queries whose entire top-K retrieval is poisoned;
/// ASR-a conditions on those; ASR-t runs every triggered query through the
/// outcome rule; ACC runs the untriggered side against the same store.
pub fn evaluate_with(
    ctx: &EvalContext<'_>,
    kb_poisoned: &KnowledgeBase,
    trigger: &Trigger,
    pairs: &[EvalPair],
) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("evaluation needs a nonempty eval set"));
    }
    let k = ctx.k.min(kb_poisoned.len());
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.metrics_seed);

    let mut retrieval_success = 0usize;
    let mut action_success = 0usize;
    let mut outcome_success = 0usize;
    let mut ppls = Vec::with_capacity(pairs.len());

    for pair in pairs {
        let emb = embed(ctx.spec, &pair.triggered.token_ids)?;
        let result = retrieve(kb_poisoned, &emb, k)?;
        let views = demo_views(kb_poisoned, &[], &result);
        let action = act(
            ctx.agent,
            ctx.aset,
            &pair.triggered.benign_action,
            &views,
            Some(trigger.token_ids()),
            &mut rng,
        )?;
        if result.all_poisoned {
            retrieval_success += 1;
            if action == ctx.aset.target() {
                action_success += 1;
            }
        }
        let (_label, success) = crate::agent::outcome(
            ctx.rules,
            ctx.aset,
            action,
            &pair.triggered.scenario_id,
            &mut rng,
        )?;
        if success {
            outcome_success += 1;
        }
        ppls.push(ctx.lm.perplexity(&pair.triggered.token_ids)?);
    }

    let mut benign_correct = 0usize;
    let mut poison_leaked = false;
    for pair in pairs {
        let emb = embed(ctx.spec, &pair.query.token_ids)?;
        let result = retrieve(kb_poisoned, &emb, k)?;
        if result
            .indices
            .iter()
            .any(|&i| kb_poisoned.record(i).poisoned)
        {
            poison_leaked = true;
        }
        let views = demo_views(kb_poisoned, &[], &result);
        let action = act(ctx.agent, ctx.aset, &pair.query.benign_action, &views, None, &mut rng)?;
        if ctx.aset.label(action) == pair.query.benign_action {
            benign_correct += 1;
        }
    }

    let n = pairs.len();
    ppls.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let ppl_mean = ppls.iter().sum::<f64>() / n as f64;
    let ppl_p95 = quantile_sorted(&ppls, 0.95);
    let asr_a_defined = retrieval_success > 0;

    Ok(MetricsReport {
        asr_r: retrieval_success as f64 / n as f64,
        asr_a: if asr_a_defined {
            action_success as f64 / retrieval_success as f64
        } else {
            0.0
        },
        asr_a_defined,
        asr_t: outcome_success as f64 / n as f64,
        acc: benign_correct as f64 / n as f64,
        ppl_mean,
        ppl_p95,
        n_eval: n,
        n_retrieval_success: retrieval_success,
        n_target_actions: action_success,
        poison_leaked_into_benign: poison_leaked,
        config_hash: ctx.config_hash.clone(),
        seed: ctx.metrics_seed,
    })
}

/// Report for a fully blocked attack: no triggered query survived the
/// defense. Attack metrics are zero (with the asr_a-undefined flag); ACC and
/// the perplexity statistics still describe the original pair set.
pub fn evaluate_blocked(
    ctx: &EvalContext<'_>,
    kb_poisoned: &KnowledgeBase,
    pairs: &[EvalPair],
) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("evaluation needs a nonempty eval set"));
    }
    let k = ctx.k.min(kb_poisoned.len());
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.metrics_seed);
    let mut benign_correct = 0usize;
    let mut poison_leaked = false;
    let mut ppls = Vec::with_capacity(pairs.len());
    for pair in pairs {
        ppls.push(ctx.lm.perplexity(&pair.triggered.token_ids)?);
        let emb = embed(ctx.spec, &pair.query.token_ids)?;
        let result = retrieve(kb_poisoned, &emb, k)?;
        if result.indices.iter().any(|&i| kb_poisoned.record(i).poisoned) {
            poison_leaked = true;
        }
        let views = demo_views(kb_poisoned, &[], &result);
        let action = act(ctx.agent, ctx.aset, &pair.query.benign_action, &views, None, &mut rng)?;
        if ctx.aset.label(action) == pair.query.benign_action {
            benign_correct += 1;
        }
    }
    let n = pairs.len();
    ppls.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Ok(MetricsReport {
        asr_r: 0.0,
        asr_a: 0.0,
        asr_a_defined: false,
        asr_t: 0.0,
        acc: benign_correct as f64 / n as f64,
        ppl_mean: ppls.iter().sum::<f64>() / n as f64,
        ppl_p95: quantile_sorted(&ppls, 0.95),
        n_eval: 0,
        n_retrieval_success: 0,
        n_target_actions: 0,
        poison_leaked_into_benign: poison_leaked,
        config_hash: ctx.config_hash.clone(),
        seed: ctx.metrics_seed,
    })
}

/// Full evaluation of one trigger against a poisoned store.
pub fn evaluate(world: &World, kb_poisoned: &KnowledgeBase, trigger: &Trigger) -> Result<MetricsReport> {
    let pairs = world.eval_pairs(trigger)?;
    evaluate_with(&world.eval_context(), kb_poisoned, trigger, &pairs)
}

/// Benign accuracy of the agent against an arbitrary store, no trigger
/// anywhere. This is the non-attack baseline ACC.
pub fn baseline_accuracy(world: &World, kb: &KnowledgeBase) -> Result<f64> {
    let ctx = world.eval_context();
    let k = ctx.k.min(kb.len());
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.metrics_seed);
    let mut correct = 0usize;
    for q in &world.corpus.eval {
        let emb = embed(ctx.spec, &q.token_ids)?;
        let result = retrieve(kb, &emb, k)?;
        let views = demo_views(kb, &[], &result);
        let action = act(ctx.agent, ctx.aset, &q.benign_action, &views, None, &mut rng)?;
        if ctx.aset.label(action) == q.benign_action {
            correct += 1;
        }
    }
    Ok(correct as f64 / world.corpus.eval.len() as f64)
}

/// One complete attack run: world build, trigger search, poisoned store,
/// evaluation, and the non-attack baseline.
pub struct AttackRun {
    pub report: MetricsReport,
    pub baseline_acc: f64,
    pub trigger: Trigger,
    pub objective: f64,
    pub trace: OptimizationTrace,
    pub best_history: Vec<f64>,
    pub iterations_run: usize,
}

pub fn run_attack(cfg: &ExperimentConfig) -> Result<AttackRun> {
    let world = build_world(cfg)?;
    run_attack_in(&world)
}

pub fn run_attack_in(world: &World) -> Result<AttackRun> {
    let outcome = world.optimize_trigger()?;
    let kb_poisoned = world.poisoned_kb(&outcome.best.trigger)?;
    let report = evaluate(world, &kb_poisoned, &outcome.best.trigger)?;
    let baseline_acc = baseline_accuracy(world, &world.kb_clean)?;
    // Running minimum of accepted objectives, per iteration.
    let mut history = Vec::new();
    let mut best = f64::INFINITY;
    for r in &outcome.trace.records {
        if r.objective < best {
            best = r.objective;
        }
        if history.len() <= r.iteration {
            history.resize(r.iteration + 1, best);
        }
        history[r.iteration] = best;
    }
    Ok(AttackRun {
        report,
        baseline_acc,
        trigger: outcome.best.trigger,
        objective: outcome.best.breakdown.objective,
        trace: outcome.trace,
        best_history: history,
        iterations_run: outcome.iterations_run,
    })
}

/// Loss components that can be ablated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationComponent {
    Uniqueness,
    Compactness,
    Target,
    Coherence,
}

impl AblationComponent {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uni" | "uniqueness" => Ok(Self::Uniqueness),
            "cpt" | "compactness" => Ok(Self::Compactness),
            "tar" | "target" => Ok(Self::Target),
            "coh" | "coherence" => Ok(Self::Coherence),
            other => Err(Error::config(format!("unknown ablation component {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Uniqueness => "uni",
            Self::Compactness => "cpt",
            Self::Target => "tar",
            Self::Coherence => "coh",
        }
    }
}

/// Applies the ablation switches to a copy of the config.
pub fn ablated_config(cfg: &ExperimentConfig, disable: &[AblationComponent]) -> Result<ExperimentConfig> {
    let mut out = cfg.clone();
    for c in disable {
        match c {
            AblationComponent::Uniqueness => out.optimizer.disable_uniqueness = true,
            AblationComponent::Compactness => out.optimizer.disable_compactness = true,
            AblationComponent::Target => out.optimizer.disable_target_filter = true,
            AblationComponent::Coherence => out.optimizer.disable_coherence = true,
        }
    }
    if out.optimizer.disable_uniqueness && out.optimizer.disable_compactness {
        return Err(Error::config(
            "cannot disable both uniqueness and compactness: the objective would be empty",
        ));
    }
    Ok(out)
}

/// Reruns the attack with the selected loss components removed.
pub fn ablate(cfg: &ExperimentConfig, disable: &[AblationComponent]) -> Result<AttackRun> {
    run_attack(&ablated_config(cfg, disable)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PoisonCount,
    TriggerLength,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "poison_count" => Ok(Self::PoisonCount),
            "trigger_length" => Ok(Self::TriggerLength),
            other => Err(Error::config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

pub struct SweepPoint {
    pub value: usize,
    pub run: AttackRun,
}

/// One full optimize-and-evaluate per axis value. When sweeping the poison
/// count the trigger length is pinned to 4 tokens and the retrieval depth is
/// clamped once, for every point, to the smallest poison count in the sweep
/// (an all-K-poisoned retrieval is impossible with fewer poisons than K, and
/// varying K across points would confound the curve); when sweeping trigger
/// length the poison count stays at its configured value.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[usize]) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::config("sweep.values must be nonempty"));
    }
    if values.contains(&0) {
        return Err(Error::config("sweep.values must be positive"));
    }
    let mut out = Vec::with_capacity(values.len());
    for &value in values {
        let mut point_cfg = cfg.clone();
        match axis {
            SweepAxis::PoisonCount => {
                point_cfg.poison.count = value;
                point_cfg.optimizer.trigger_length = 4;
                let k_cap = *values.iter().min().expect("nonempty");
                point_cfg.retrieval.k = point_cfg.retrieval.k.min(k_cap);
            }
            SweepAxis::TriggerLength => {
                point_cfg.optimizer.trigger_length = value;
            }
        }
        out.push(SweepPoint {
            value,
            run: run_attack(&point_cfg)?,
        });
    }
    Ok(out)
}

pub fn sweep_csv(axis: SweepAxis, points: &[SweepPoint]) -> String {
    let axis_name = match axis {
        SweepAxis::PoisonCount => "poison_count",
        SweepAxis::TriggerLength => "trigger_length",
    };
    let mut out = format!("{axis_name},{}\n", MetricsReport::csv_header());
    for p in points {
        out.push_str(&format!("{},{}\n", p.value, p.run.report.csv_row()));
    }
    out
}

/// Source x target transfer results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferCell {
    pub source: String,
    pub target: String,
    pub asr_r: f64,
    pub asr_a: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub embedder_ids: Vec<String>,
    /// Row-major: `cells[source][target]`.
    pub cells: Vec<Vec<TransferCell>>,
}

impl TransferMatrix {
    pub fn csv(&self) -> String {
        let mut out = String::from("source,target,asr_r,asr_a,acc\n");
        for row in &self.cells {
            for cell in row {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    cell.source, cell.target, cell.asr_r, cell.asr_a, cell.acc
                ));
            }
        }
        out
    }
}

/// Optimizes a trigger on every source embedder and evaluates the same token
/// sequence against every target embedder (store and centers rebuilt under
/// the target).
pub fn transfer(cfg: &ExperimentConfig, embedders: &[EmbedderConfig]) -> Result<TransferMatrix> {
    if embedders.is_empty() {
        return Err(Error::config("transfer needs at least one embedder"));
    }
    let base_world = build_world(cfg)?;
    let mut worlds = Vec::with_capacity(embedders.len());
    for e in embedders {
        worlds.push(base_world.with_embedder(e)?);
    }
    let ids: Vec<String> = worlds.iter().map(|w| w.spec.id()).collect();

    let mut cells = Vec::with_capacity(worlds.len());
    for source in &worlds {
        let outcome = source.optimize_trigger()?;
        let trigger = outcome.best.trigger;
        let mut row = Vec::with_capacity(worlds.len());
        for target in &worlds {
            let kb = target.poisoned_kb(&trigger)?;
            let report = evaluate(target, &kb, &trigger)?;
            row.push(TransferCell {
                source: source.spec.id(),
                target: target.spec.id(),
                asr_r: report.asr_r,
                asr_a: report.asr_a,
                acc: report.acc,
            });
        }
        cells.push(row);
    }
    Ok(TransferMatrix {
        embedder_ids: ids,
        cells,
    })
}

/// A 2-D projected point with its class label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub label: String,
}

/// PCA to two components via the covariance eigendecomposition, with a
/// deterministic sign convention: each component's largest-magnitude
/// coordinate is positive.
pub fn project(points: &[(DVector<f64>, String)], dims: usize) -> Result<Vec<ProjectedPoint>> {
    if dims != 2 {
        return Err(Error::config("projection supports dims = 2"));
    }
    if points.len() < dims + 1 {
        return Err(Error::invalid(format!(
            "projection needs at least {} points, got {}",
            dims + 1,
            points.len()
        )));
    }
    let n = points.len();
    let d = points[0].0.len();
    if d < dims {
        return Err(Error::invalid("projection input dimension below output dims"));
    }
    let mut mean = DVector::zeros(d);
    for (p, _) in points {
        mean += p;
    }
    mean /= n as f64;

    let mut centered = DMatrix::zeros(n, d);
    for (i, (p, _)) in points.iter().enumerate() {
        centered.row_mut(i).copy_from(&(p - &mean).transpose());
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = cov.symmetric_eigen();

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut components = Vec::with_capacity(dims);
    for &idx in order.iter().take(dims) {
        let mut v: DVector<f64> = eig.eigenvectors.column(idx).into();
        let mut max_i = 0;
        for i in 0..v.len() {
            if v[i].abs() > v[max_i].abs() {
                max_i = i;
            }
        }
        if v[max_i] < 0.0 {
            v = -v;
        }
        components.push(v);
    }

    Ok(points
        .iter()
        .enumerate()
        .map(|(i, (_, label))| {
            let row = centered.row(i).transpose();
            ProjectedPoint {
                x: components[0].dot(&row),
                y: components[1].dot(&row),
                label: label.clone(),
            }
        })
        .collect())
}

pub fn projection_csv(points: &[ProjectedPoint]) -> String {
    let mut out = String::from("x,y,label\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.x, p.y, p.label));
    }
    out
}

/// Labeled embedding set for the standard projection dump: benign eval
/// queries, triggered eval queries, cluster centers, and poisoned keys.
pub fn projection_dataset(
    world: &World,
    kb_poisoned: &KnowledgeBase,
    trigger: &Trigger,
) -> Result<Vec<(DVector<f64>, String)>> {
    let mut out = Vec::new();
    for q in &world.corpus.eval {
        out.push((embed(&world.spec, &q.token_ids)?, "benign".to_string()));
    }
    for pair in world.eval_pairs(trigger)? {
        out.push((
            embed(&world.spec, &pair.triggered.token_ids)?,
            "triggered".to_string(),
        ));
    }
    for c in &world.centers.centers {
        out.push((c.clone(), "center".to_string()));
    }
    for i in 0..kb_poisoned.len() {
        if kb_poisoned.record(i).poisoned {
            out.push((kb_poisoned.key_embedding(i), "poisoned_key".to_string()));
        }
    }
    Ok(out)
}
