//! The agent's memory: key-value storage, kNN retrieval over cosine
//! similarity, and poison injection.
//!
//! A [`KnowledgeBase`] is immutable after build. Retrieval maximizes cosine
//! similarity and breaks ties by lower entry index so every query has exactly
//! one correct answer, which the brute-force oracle tests rely on.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    inject_trigger, DemonstrationRecord, InsertPos, PoisonStrategy, Trigger, Vocabulary,
};
use crate::embedder::{embed, EmbedderSpec};
use crate::error::{Error, Result};

/// Immutable store of demonstration records with pre-embedded keys.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    records: Vec<DemonstrationRecord>,
    /// Row i = embedding of records[i].key.
    keys: DMatrix<f64>,
    key_norms: Vec<f64>,
    embedder_id: String,
    clean_count: usize,
    poison_count: usize,
}

impl KnowledgeBase {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, i: usize) -> &DemonstrationRecord {
        &self.records[i]
    }

    pub fn records(&self) -> &[DemonstrationRecord] {
        &self.records
    }

    pub fn key_embedding(&self, i: usize) -> DVector<f64> {
        self.keys.row(i).transpose()
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn clean_count(&self) -> usize {
        self.clean_count
    }

    pub fn poison_count(&self) -> usize {
        self.poison_count
    }
}

/// Embeds every key once and freezes the store. Records keep input order.
pub fn build(records: Vec<DemonstrationRecord>, spec: &EmbedderSpec) -> Result<KnowledgeBase> {
    if records.is_empty() {
        return Err(Error::invalid("cannot build a knowledge base from zero records"));
    }
    let dim = spec.dim();
    let mut keys = DMatrix::zeros(records.len(), dim);
    let mut key_norms = Vec::with_capacity(records.len());
    for (i, record) in records.iter().enumerate() {
        let v = embed(spec, &record.key.token_ids)?;
        key_norms.push(v.norm());
        keys.row_mut(i).copy_from(&v.transpose());
    }
    let poison_count = records.iter().filter(|r| r.poisoned).count();
    let clean_count = records.len() - poison_count;
    Ok(KnowledgeBase {
        records,
        keys,
        key_norms,
        embedder_id: spec.id(),
        clean_count,
        poison_count,
    })
}

/// Top-K retrieval result. Entry indices address the knowledge base (and the
/// extra block, when one was supplied, with indices past `kb.len()`).
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub indices: Vec<usize>,
    pub similarities: Vec<f64>,
    pub all_poisoned: bool,
}

impl RetrievalResult {
    pub fn k(&self) -> usize {
        self.indices.len()
    }
}

/// Borrowed view of retrieved records, resolved against the KB and an
/// optional extra block.
pub fn resolve_records<'a>(
    result: &RetrievalResult,
    kb: &'a KnowledgeBase,
    extra: &'a [DemonstrationRecord],
) -> Vec<&'a DemonstrationRecord> {
    result
        .indices
        .iter()
        .map(|&i| {
            if i < kb.len() {
                kb.record(i)
            } else {
                &extra[i - kb.len()]
            }
        })
        .collect()
}

/// Fixed-size top-K accumulator ordered by (similarity desc, index asc).
struct TopK {
    k: usize,
    entries: Vec<(f64, usize)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            entries: Vec::with_capacity(k + 1),
        }
    }

    fn push(&mut self, sim: f64, idx: usize) {
        let pos = self
            .entries
            .partition_point(|&(s, i)| s > sim || (s == sim && i < idx));
        if pos < self.k {
            self.entries.insert(pos, (sim, idx));
            self.entries.truncate(self.k);
        }
    }
}

fn finish_retrieval(top: TopK, is_poisoned: impl Fn(usize) -> bool) -> RetrievalResult {
    let all_poisoned = !top.entries.is_empty() && top.entries.iter().all(|&(_, i)| is_poisoned(i));
    RetrievalResult {
        indices: top.entries.iter().map(|&(_, i)| i).collect(),
        similarities: top.entries.iter().map(|&(s, _)| s).collect(),
        all_poisoned,
    }
}

/// Exactly the K entries with the highest cosine similarity to the query.
pub fn retrieve(kb: &KnowledgeBase, query: &DVector<f64>, k: usize) -> Result<RetrievalResult> {
    retrieve_with_extra(kb, &[], query, k)
}

/// Extra poisoned entries appended past the knowledge base, embedded on the
/// fly. Equivalent to retrieving from `build(kb.records + extra)` but without
/// re-embedding the clean keys; the trigger optimizer leans on this.
pub fn retrieve_with_extra(
    kb: &KnowledgeBase,
    extra: &[(DVector<f64>, bool)],
    query: &DVector<f64>,
    k: usize,
) -> Result<RetrievalResult> {
    let total = kb.len() + extra.len();
    if k == 0 || k > total {
        return Err(Error::invalid(format!(
            "retrieval K={k} out of range for a store of {total} entries"
        )));
    }
    let qn = query.norm();
    if qn <= 0.0 {
        return Err(Error::invalid("degenerate embedding"));
    }
    let sims = &kb.keys * query;
    let mut top = TopK::new(k);
    for i in 0..kb.len() {
        let denom = kb.key_norms[i] * qn;
        if denom <= 0.0 {
            return Err(Error::invalid("degenerate embedding"));
        }
        top.push(sims[i] / denom, i);
    }
    for (j, (emb, _)) in extra.iter().enumerate() {
        let denom = emb.norm() * qn;
        if denom <= 0.0 {
            return Err(Error::invalid("degenerate embedding"));
        }
        top.push(emb.dot(query) / denom, kb.len() + j);
    }
    Ok(finish_retrieval(top, |i| {
        if i < kb.len() {
            kb.records[i].poisoned
        } else {
            extra[i - kb.len()].1
        }
    }))
}

/// Batched form of [`retrieve_with_extra`]: one matrix product against the
/// key table serves every query, which is what the optimizer's inner loop
/// needs to stay fast.
pub fn retrieve_batch_with_extra(
    kb: &KnowledgeBase,
    extra: &[(DVector<f64>, bool)],
    queries: &[DVector<f64>],
    k: usize,
) -> Result<Vec<RetrievalResult>> {
    let total = kb.len() + extra.len();
    if k == 0 || k > total {
        return Err(Error::invalid(format!(
            "retrieval K={k} out of range for a store of {total} entries"
        )));
    }
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let dim = kb.keys.ncols();
    let qmat = DMatrix::from_fn(dim, queries.len(), |r, c| queries[c][r]);
    let sims = &kb.keys * &qmat;
    let mut out = Vec::with_capacity(queries.len());
    for (j, query) in queries.iter().enumerate() {
        let qn = query.norm();
        if qn <= 0.0 {
            return Err(Error::invalid("degenerate embedding"));
        }
        let col = sims.column(j);
        let mut top = TopK::new(k);
        for i in 0..kb.len() {
            let denom = kb.key_norms[i] * qn;
            if denom <= 0.0 {
                return Err(Error::invalid("degenerate embedding"));
            }
            top.push(col[i] / denom, i);
        }
        for (e, (emb, _)) in extra.iter().enumerate() {
            let denom = emb.norm() * qn;
            if denom <= 0.0 {
                return Err(Error::invalid("degenerate embedding"));
            }
            top.push(emb.dot(query) / denom, kb.len() + e);
        }
        out.push(finish_retrieval(top, |i| {
            if i < kb.len() {
                kb.records[i].poisoned
            } else {
                extra[i - kb.len()].1
            }
        }));
    }
    Ok(out)
}

/// Which clean records get poisoned, fixed once per run so that candidate
/// triggers are compared against a stable adversarial set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonPlan {
    pub source_indices: Vec<usize>,
    pub strategy: PoisonStrategy,
    pub target_action: String,
    pub position: InsertPos,
}

/// Samples `n` source records for poisoning. For the spurious-correlation
/// strategy only records whose action already equals the target are eligible.
pub fn plan_poison(
    clean: &[DemonstrationRecord],
    n: usize,
    strategy: PoisonStrategy,
    target_action: &str,
    position: InsertPos,
    seed: u64,
) -> Result<PoisonPlan> {
    if strategy == PoisonStrategy::Clean {
        return Err(Error::config("poison.strategy must not be clean"));
    }
    if n == 0 {
        return Err(Error::config("poison.count must be >= 1"));
    }
    let eligible: Vec<usize> = match strategy {
        PoisonStrategy::SpuriousCorrelation => clean
            .iter()
            .enumerate()
            .filter(|(_, r)| r.value_action == target_action)
            .map(|(i, _)| i)
            .collect(),
        _ => (0..clean.len()).collect(),
    };
    if eligible.len() < n {
        return Err(Error::invalid(format!(
            "need {n} eligible records for {strategy:?}, found {}",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, eligible.len(), n);
    let mut source_indices: Vec<usize> = picks.iter().map(|i| eligible[i]).collect();
    source_indices.sort_unstable();
    Ok(PoisonPlan {
        source_indices,
        strategy,
        target_action: target_action.to_string(),
        position,
    })
}

/// Materializes the plan for a concrete trigger: keys are the sampled
/// training queries with the trigger injected. Sources are never mutated.
pub fn materialize_poison(
    plan: &PoisonPlan,
    clean: &[DemonstrationRecord],
    trigger: &Trigger,
    vocab: &Vocabulary,
) -> Result<Vec<DemonstrationRecord>> {
    let mut out = Vec::with_capacity(plan.source_indices.len());
    for &i in &plan.source_indices {
        let source = &clean[i];
        let key = inject_trigger(&source.key, trigger, plan.position, vocab)?;
        let value_action = match plan.strategy {
            PoisonStrategy::AdversarialBackdoor => plan.target_action.clone(),
            PoisonStrategy::SpuriousCorrelation => source.value_action.clone(),
            PoisonStrategy::Clean => unreachable!("rejected by plan_poison"),
        };
        out.push(DemonstrationRecord {
            key,
            value_action,
            poisoned: true,
            strategy: plan.strategy,
        });
    }
    Ok(out)
}

/// One-shot poison operation: sample sources, then inject the trigger.
pub fn poison(
    clean: &[DemonstrationRecord],
    trigger: &Trigger,
    n: usize,
    strategy: PoisonStrategy,
    target_action: &str,
    position: InsertPos,
    seed: u64,
    vocab: &Vocabulary,
) -> Result<Vec<DemonstrationRecord>> {
    let plan = plan_poison(clean, n, strategy, target_action, position, seed)?;
    materialize_poison(&plan, clean, trigger, vocab)
}

/// Serialized record line for KB export.
#[derive(Debug, Serialize, Deserialize)]
struct KbLine {
    record: DemonstrationRecord,
}

/// Writes the knowledge base as JSONL plus a sidecar embedder-spec JSON.
pub fn export_kb(kb: &KnowledgeBase, records_path: impl AsRef<Path>, spec: &EmbedderSpec) -> Result<()> {
    let mut body = String::new();
    for record in &kb.records {
        body.push_str(&serde_json::to_string(&KbLine {
            record: record.clone(),
        })?);
        body.push('\n');
    }
    std::fs::write(&records_path, body)?;
    let spec_path = records_path.as_ref().with_extension("embedder.json");
    std::fs::write(spec_path, serde_json::to_string_pretty(&spec.params())?)?;
    Ok(())
}

/// Reads an exported knowledge base, re-embedding keys with the sidecar spec.
pub fn import_kb(records_path: impl AsRef<Path>) -> Result<(KnowledgeBase, EmbedderSpec)> {
    let spec_path = records_path.as_ref().with_extension("embedder.json");
    let params: crate::embedder::EmbedderParams =
        serde_json::from_str(&std::fs::read_to_string(spec_path)?)?;
    let spec = EmbedderSpec::from_params(&params)?;
    let body = std::fs::read_to_string(records_path)?;
    let mut records = Vec::new();
    for (lineno, raw) in body.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: KbLine = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        records.push(line.record);
    }
    let kb = build(records, &spec)?;
    Ok((kb, spec))
}

/// CSV rows for retrieval traces: query_id, rank, entry_id, similarity, poisoned.
pub fn trace_csv_header() -> &'static str {
    "query_id,rank,entry_id,similarity,poisoned"
}

pub fn trace_csv_rows(query_id: &str, kb: &KnowledgeBase, result: &RetrievalResult) -> String {
    let mut out = String::new();
    for (rank, (&idx, &sim)) in result
        .indices
        .iter()
        .zip(&result.similarities)
        .enumerate()
    {
        let poisoned = idx < kb.len() && kb.records[idx].poisoned;
        out.push_str(&format!("{query_id},{rank},{idx},{sim},{poisoned}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Query;
    use crate::embedder::EmbedderKind;
    use nalgebra::DMatrix;

    fn record(ids: &[u32], action: &str) -> DemonstrationRecord {
        DemonstrationRecord::clean(Query {
            scenario_id: format!("s{ids:?}"),
            text: String::new(),
            token_ids: ids.to_vec(),
            benign_action: action.into(),
        })
    }

    fn axis_spec() -> EmbedderSpec {
        // Token table: rows are axis vectors so keys hit known directions.
        let table = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        EmbedderSpec::from_parts(EmbedderKind::MeanPool, table, DMatrix::identity(2, 2))
    }

    #[test]
    fn build_counts_and_preserves_order() {
        let spec = axis_spec();
        let records = vec![record(&[0], "a"), record(&[1], "b"), record(&[0, 1], "a")];
        let kb = build(records, &spec).unwrap();
        assert_eq!(kb.len(), 3);
        assert_eq!(kb.clean_count(), 3);
        assert_eq!(kb.poison_count(), 0);
        assert_eq!(kb.record(1).key.token_ids, vec![1]);
    }

    #[test]
    fn build_rejects_empty() {
        let spec = axis_spec();
        assert!(build(Vec::new(), &spec).is_err());
    }

    #[test]
    fn rebuild_reproduces_embeddings() {
        let spec = EmbedderSpec::new(EmbedderKind::MeanPool, 8, 40, 3).unwrap();
        let records: Vec<_> = (0..20)
            .map(|i| record(&[i % 40, (i * 7) % 40], "a"))
            .collect();
        let kb1 = build(records.clone(), &spec).unwrap();
        let kb2 = build(records, &spec).unwrap();
        for i in 0..kb1.len() {
            assert_eq!(kb1.key_embedding(i), kb2.key_embedding(i));
        }
    }

    #[test]
    fn stored_embeddings_equal_fresh_embed_calls() {
        let spec = EmbedderSpec::new(EmbedderKind::BigramProjection, 32, 64, 5).unwrap();
        let records: Vec<_> = (0..5000)
            .map(|i| {
                record(
                    &[
                        (i % 64) as u32,
                        ((i * 13 + 7) % 64) as u32,
                        ((i * 29 + 3) % 64) as u32,
                    ],
                    "a",
                )
            })
            .collect();
        let kb = build(records, &spec).unwrap();
        for i in (0..kb.len()).step_by(331) {
            let fresh = embed(&spec, &kb.record(i).key.token_ids).unwrap();
            assert_eq!(kb.key_embedding(i), fresh);
        }
    }

    #[test]
    fn retrieve_picks_higher_cosine() {
        let spec = axis_spec();
        let kb = build(vec![record(&[0], "a"), record(&[1], "b")], &spec).unwrap();
        // Query (1, 0.1): cosine with (1,0) = 0.995, with (0,1) = 0.0995.
        let q = DVector::from_vec(vec![1.0, 0.1]);
        let result = retrieve(&kb, &q, 1).unwrap();
        assert_eq!(result.indices, vec![0]);
        assert!(result.similarities[0] > 0.99);
    }

    #[test]
    fn retrieve_k_equals_len_returns_everything() {
        let spec = axis_spec();
        let kb = build(vec![record(&[0], "a"), record(&[1], "b")], &spec).unwrap();
        let q = DVector::from_vec(vec![0.3, 0.9]);
        let result = retrieve(&kb, &q, 2).unwrap();
        assert_eq!(result.indices.len(), 2);
        assert!(result.similarities[0] >= result.similarities[1]);
    }

    #[test]
    fn retrieve_rejects_oversized_k() {
        let spec = axis_spec();
        let kb = build(vec![record(&[0], "a")], &spec).unwrap();
        let q = DVector::from_vec(vec![1.0, 0.0]);
        assert!(retrieve(&kb, &q, 2).is_err());
    }

    #[test]
    fn ties_break_by_lower_index() {
        let spec = axis_spec();
        // Two identical keys; the lower index must win.
        let kb = build(vec![record(&[0], "a"), record(&[0], "b")], &spec).unwrap();
        let q = DVector::from_vec(vec![1.0, 0.0]);
        let result = retrieve(&kb, &q, 1).unwrap();
        assert_eq!(result.indices, vec![0]);
    }

    /// Brute-force oracle: full stable sort by (similarity desc, index asc).
    fn oracle_retrieve(
        keys: &[DVector<f64>],
        poisoned: &[bool],
        q: &DVector<f64>,
        k: usize,
    ) -> RetrievalResult {
        let mut order: Vec<usize> = (0..keys.len()).collect();
        let sims: Vec<f64> = keys
            .iter()
            .map(|key| crate::embedder::cosine(key, q).unwrap())
            .collect();
        order.sort_by(|&a, &b| {
            sims[b]
                .partial_cmp(&sims[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        order.truncate(k);
        RetrievalResult {
            similarities: order.iter().map(|&i| sims[i]).collect(),
            all_poisoned: order.iter().all(|&i| poisoned[i]),
            indices: order,
        }
    }

    #[test]
    fn retrieve_matches_bruteforce_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let spec = EmbedderSpec::new(EmbedderKind::MeanPool, 6, 80, 1).unwrap();
        for _ in 0..100 {
            let n = rng.gen_range(2..=500);
            let k = rng.gen_range(1..=8.min(n));
            let records: Vec<_> = (0..n)
                .map(|_| {
                    let len = rng.gen_range(1..6);
                    let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(0..80)).collect();
                    let mut r = record(&ids, "a");
                    r.poisoned = rng.gen_bool(0.2);
                    if r.poisoned {
                        r.strategy = PoisonStrategy::AdversarialBackdoor;
                    }
                    r
                })
                .collect();
            let kb = build(records, &spec).unwrap();
            let q_ids: Vec<u32> = (0..4).map(|_| rng.gen_range(0..80)).collect();
            let q = embed(&spec, &q_ids).unwrap();
            let keys: Vec<DVector<f64>> = (0..kb.len()).map(|i| kb.key_embedding(i)).collect();
            let poisoned: Vec<bool> = kb.records().iter().map(|r| r.poisoned).collect();
            let got = retrieve(&kb, &q, k).unwrap();
            let want = oracle_retrieve(&keys, &poisoned, &q, k);
            assert_eq!(got.indices, want.indices);
            assert_eq!(got.all_poisoned, want.all_poisoned);
            for (a, b) in got.similarities.iter().zip(&want.similarities) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn with_extra_equals_full_rebuild() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let spec = EmbedderSpec::new(EmbedderKind::PositionWeightedPool, 8, 50, 2).unwrap();
        for _ in 0..20 {
            let clean: Vec<_> = (0..rng.gen_range(5..60))
                .map(|_| {
                    let ids: Vec<u32> = (0..rng.gen_range(2..6)).map(|_| rng.gen_range(0..50)).collect();
                    record(&ids, "a")
                })
                .collect();
            let mut poisoned: Vec<_> = (0..rng.gen_range(1..5))
                .map(|_| {
                    let ids: Vec<u32> = (0..rng.gen_range(2..6)).map(|_| rng.gen_range(0..50)).collect();
                    let mut r = record(&ids, "a");
                    r.poisoned = true;
                    r.strategy = PoisonStrategy::AdversarialBackdoor;
                    r
                })
                .collect();
            let kb_clean = build(clean.clone(), &spec).unwrap();
            let extras: Vec<(DVector<f64>, bool)> = poisoned
                .iter()
                .map(|r| (embed(&spec, &r.key.token_ids).unwrap(), true))
                .collect();
            let mut all = clean;
            all.append(&mut poisoned);
            let kb_full = build(all, &spec).unwrap();

            let q_ids: Vec<u32> = (0..3).map(|_| rng.gen_range(0..50)).collect();
            let q = embed(&spec, &q_ids).unwrap();
            let k = rng.gen_range(1..=4.min(kb_full.len()));
            let fast = retrieve_with_extra(&kb_clean, &extras, &q, k).unwrap();
            let slow = retrieve(&kb_full, &q, k).unwrap();
            assert_eq!(fast.indices, slow.indices);
            assert_eq!(fast.all_poisoned, slow.all_poisoned);
        }
    }

    #[test]
    fn batch_retrieval_equals_single_query_path() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = EmbedderSpec::new(EmbedderKind::MeanPool, 8, 40, 6).unwrap();
        let records: Vec<_> = (0..120)
            .map(|_| {
                let ids: Vec<u32> = (0..rng.gen_range(2..6)).map(|_| rng.gen_range(0..40)).collect();
                record(&ids, "a")
            })
            .collect();
        let kb = build(records, &spec).unwrap();
        let extras: Vec<(DVector<f64>, bool)> = (0..3)
            .map(|_| {
                let ids: Vec<u32> = (0..3).map(|_| rng.gen_range(0..40)).collect();
                (embed(&spec, &ids).unwrap(), true)
            })
            .collect();
        let queries: Vec<DVector<f64>> = (0..10)
            .map(|_| {
                let ids: Vec<u32> = (0..4).map(|_| rng.gen_range(0..40)).collect();
                embed(&spec, &ids).unwrap()
            })
            .collect();
        let batched = retrieve_batch_with_extra(&kb, &extras, &queries, 5).unwrap();
        for (q, got) in queries.iter().zip(&batched) {
            let want = retrieve_with_extra(&kb, &extras, q, 5).unwrap();
            assert_eq!(got.indices, want.indices);
            assert_eq!(got.all_poisoned, want.all_poisoned);
        }
    }

    #[test]
    fn all_poisoned_false_for_clean_kb() {
        let spec = EmbedderSpec::new(EmbedderKind::MeanPool, 4, 20, 0).unwrap();
        let records: Vec<_> = (0..10).map(|i| record(&[i % 20, (i + 3) % 20], "a")).collect();
        let kb = build(records, &spec).unwrap();
        for t in 0..10u32 {
            let q = embed(&spec, &[t, (t + 1) % 20]).unwrap();
            assert!(!retrieve(&kb, &q, 3).unwrap().all_poisoned);
        }
    }

    fn vocab_n(n: usize) -> Vocabulary {
        Vocabulary::new((0..n).map(|i| format!("w{i}")).collect()).unwrap()
    }

    #[test]
    fn adversarial_poison_rewrites_action() {
        let vocab = vocab_n(10);
        let clean: Vec<_> = (0..5).map(|i| record(&[i], "go")).collect();
        let trigger = Trigger::new(vec![9]).unwrap();
        let out = poison(
            &clean,
            &trigger,
            1,
            PoisonStrategy::AdversarialBackdoor,
            "sudden_stop",
            InsertPos::Append,
            0,
            &vocab,
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].value_action, "sudden_stop");
        assert!(out[0].poisoned);
        out[0].validate(Some(&trigger), Some("sudden_stop")).unwrap();
    }

    #[test]
    fn spurious_poison_keeps_action_and_needs_eligible_pool() {
        let vocab = vocab_n(10);
        let mut clean: Vec<_> = (0..5).map(|i| record(&[i], "sudden_stop")).collect();
        clean.push(record(&[7], "go"));
        let trigger = Trigger::new(vec![9, 8]).unwrap();
        let out = poison(
            &clean,
            &trigger,
            2,
            PoisonStrategy::SpuriousCorrelation,
            "sudden_stop",
            InsertPos::Append,
            1,
            &vocab,
        )
        .unwrap();
        assert_eq!(out.len(), 2);
        for r in &out {
            assert_eq!(r.value_action, "sudden_stop");
            r.validate(Some(&trigger), Some("sudden_stop")).unwrap();
        }
        // Only one record carries the "go" action: spurious with n=2 fails.
        let err = poison(
            &clean,
            &trigger,
            2,
            PoisonStrategy::SpuriousCorrelation,
            "go",
            InsertPos::Append,
            1,
            &vocab,
        );
        assert!(err.is_err());
    }

    #[test]
    fn poison_never_mutates_clean_records() {
        let vocab = vocab_n(10);
        let clean: Vec<_> = (0..5000).map(|i| record(&[(i % 9) as u32], "go")).collect();
        let before = clean.clone();
        let trigger = Trigger::new(vec![9]).unwrap();
        let out = poison(
            &clean,
            &trigger,
            4,
            PoisonStrategy::AdversarialBackdoor,
            "sudden_stop",
            InsertPos::Append,
            3,
            &vocab,
        )
        .unwrap();
        assert_eq!(clean, before);
        // 4 of 5000: poison ratio under 0.1%.
        let ratio = out.len() as f64 / (clean.len() + out.len()) as f64;
        assert!(ratio < 0.001, "ratio {ratio}");
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        let spec = EmbedderSpec::new(EmbedderKind::MeanPool, 4, 20, 0).unwrap();
        let records: Vec<_> = (0..6).map(|i| record(&[i % 20, (i + 1) % 20], "a")).collect();
        let kb = build(records, &spec).unwrap();
        export_kb(&kb, &path, &spec).unwrap();
        let (loaded, loaded_spec) = import_kb(&path).unwrap();
        assert_eq!(loaded.len(), kb.len());
        assert_eq!(loaded_spec.params(), spec.params());
        for i in 0..kb.len() {
            assert_eq!(loaded.key_embedding(i), kb.key_embedding(i));
            assert_eq!(loaded.record(i), kb.record(i));
        }
    }
}
