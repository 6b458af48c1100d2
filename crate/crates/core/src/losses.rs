//! The attack's analytic losses and their gradients.
//!
//! Uniqueness pushes triggered-query embeddings away from the benign cluster
//! centers; compactness pulls them toward their own batch mean. The combined
//! objective is `uniqueness + lambda * compactness`; the target and coherence
//! losses enter the optimization only as constraints and are carried in the
//! breakdown for bookkeeping.
//!
//! Distances are unsquared Euclidean norms. At an exact zero distance the
//! norm is not differentiable and the zero subgradient is used.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterCenters;
use crate::corpus::{splice_ids, InsertPos, Query, Trigger};
use crate::embedder::{embed, token_embedding_gradient, BatchLoss, EmbedderSpec};
use crate::error::{Error, Result};

/// All four loss values for one candidate trigger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub uniqueness: f64,
    pub compactness: f64,
    pub target: f64,
    pub coherence: f64,
    pub lambda: f64,
    /// `uniqueness + lambda * compactness` (restricted to the enabled terms
    /// under ablation).
    pub objective: f64,
}

/// Ablation switches for the two objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub use_uniqueness: bool,
    pub use_compactness: bool,
}

impl Default for ObjectiveTerms {
    fn default() -> Self {
        Self {
            use_uniqueness: true,
            use_compactness: true,
        }
    }
}

impl ObjectiveTerms {
    pub fn validate(&self) -> Result<()> {
        if !self.use_uniqueness && !self.use_compactness {
            return Err(Error::config(
                "cannot disable both the uniqueness and compactness terms",
            ));
        }
        Ok(())
    }

    pub fn combine(&self, uniqueness: f64, compactness: f64, lambda: f64) -> f64 {
        let u = if self.use_uniqueness { uniqueness } else { 0.0 };
        let c = if self.use_compactness { compactness } else { 0.0 };
        u + lambda * c
    }
}

fn unit_or_zero(v: DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        DVector::zeros(v.len())
    }
}

/// Negative mean distance from every embedding to every center. Always <= 0.
pub fn uniqueness_of_embeddings(embeddings: &[DVector<f64>], centers: &[DVector<f64>]) -> f64 {
    let mut acc = 0.0;
    for v in embeddings {
        for c in centers {
            acc += (v - c).norm();
        }
    }
    -acc / (centers.len() as f64 * embeddings.len() as f64)
}

/// Mean distance of each embedding to the batch mean. Always >= 0.
pub fn compactness_of_embeddings(embeddings: &[DVector<f64>]) -> f64 {
    let mean = batch_mean(embeddings);
    embeddings.iter().map(|v| (v - &mean).norm()).sum::<f64>() / embeddings.len() as f64
}

fn batch_mean(embeddings: &[DVector<f64>]) -> DVector<f64> {
    let mut mean = DVector::zeros(embeddings[0].len());
    for v in embeddings {
        mean += v;
    }
    mean / embeddings.len() as f64
}

/// Embeds every query with the trigger spliced in.
pub fn triggered_embeddings(
    spec: &EmbedderSpec,
    trigger: &Trigger,
    position: InsertPos,
    queries: &[&Query],
) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let at = position.resolve(q.len())?;
        let ids = splice_ids(&q.token_ids, trigger.token_ids(), at);
        out.push(embed(spec, &ids)?);
    }
    Ok(out)
}

/// Uniqueness loss for a trigger over a query batch.
pub fn uniqueness_loss(
    spec: &EmbedderSpec,
    trigger: &Trigger,
    position: InsertPos,
    queries: &[&Query],
    centers: &ClusterCenters,
) -> Result<f64> {
    if queries.is_empty() || centers.centers.is_empty() {
        return Err(Error::invalid("uniqueness loss needs queries and centers"));
    }
    let embs = triggered_embeddings(spec, trigger, position, queries)?;
    Ok(uniqueness_of_embeddings(&embs, &centers.centers))
}

/// Compactness loss for a trigger over a query batch.
pub fn compactness_loss(
    spec: &EmbedderSpec,
    trigger: &Trigger,
    position: InsertPos,
    queries: &[&Query],
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::invalid("compactness loss needs at least one query"));
    }
    let embs = triggered_embeddings(spec, trigger, position, queries)?;
    Ok(compactness_of_embeddings(&embs))
}

/// Assembles the four losses into a breakdown with the combined objective.
pub fn objective(
    uniqueness: f64,
    compactness: f64,
    target: f64,
    coherence: f64,
    lambda: f64,
) -> Result<LossBreakdown> {
    objective_with_terms(uniqueness, compactness, target, coherence, lambda, ObjectiveTerms::default())
}

pub fn objective_with_terms(
    uniqueness: f64,
    compactness: f64,
    target: f64,
    coherence: f64,
    lambda: f64,
    terms: ObjectiveTerms,
) -> Result<LossBreakdown> {
    if lambda <= 0.0 {
        return Err(Error::config(format!("lambda must be > 0, got {lambda}")));
    }
    terms.validate()?;
    Ok(LossBreakdown {
        uniqueness,
        compactness,
        target,
        coherence,
        lambda,
        objective: terms.combine(uniqueness, compactness, lambda),
    })
}

/// The combined objective as a differentiable batch loss.
pub struct ObjectiveLoss<'a> {
    pub centers: &'a [DVector<f64>],
    pub lambda: f64,
    pub terms: ObjectiveTerms,
}

impl BatchLoss for ObjectiveLoss<'_> {
    fn value(&self, embeddings: &[DVector<f64>]) -> f64 {
        let uni = uniqueness_of_embeddings(embeddings, self.centers);
        let cpt = compactness_of_embeddings(embeddings);
        self.terms.combine(uni, cpt, self.lambda)
    }

    fn grad(&self, embeddings: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let nq = embeddings.len() as f64;
        let dim = embeddings[0].len();
        let mut grads = vec![DVector::zeros(dim); embeddings.len()];

        if self.terms.use_uniqueness {
            let nc = self.centers.len() as f64;
            for (g, v) in grads.iter_mut().zip(embeddings) {
                for c in self.centers {
                    *g -= unit_or_zero(v - c) / (nc * nq);
                }
            }
        }

        if self.terms.use_compactness {
            let mean = batch_mean(embeddings);
            let units: Vec<DVector<f64>> = embeddings
                .iter()
                .map(|v| unit_or_zero(v - &mean))
                .collect();
            let mut unit_mean = DVector::zeros(dim);
            for u in &units {
                unit_mean += u;
            }
            unit_mean /= nq;
            for (g, u) in grads.iter_mut().zip(&units) {
                *g += (u - &unit_mean) * (self.lambda / nq);
            }
        }

        grads
    }
}

/// Exact gradient of the combined objective with respect to the embedding
/// row of the trigger token at `token_index`, chained through the embedder.
/// The dependence of the batch mean on the token is included.
pub fn objective_gradient(
    spec: &EmbedderSpec,
    trigger: &Trigger,
    position: InsertPos,
    queries: &[&Query],
    centers: &ClusterCenters,
    lambda: f64,
    token_index: usize,
    terms: ObjectiveTerms,
) -> Result<DVector<f64>> {
    if token_index >= trigger.len() {
        return Err(Error::invalid(format!(
            "token index {token_index} out of range for trigger of length {}",
            trigger.len()
        )));
    }
    if lambda <= 0.0 {
        return Err(Error::config(format!("lambda must be > 0, got {lambda}")));
    }
    terms.validate()?;
    let mut seqs = Vec::with_capacity(queries.len());
    for q in queries {
        let at = position.resolve(q.len())?;
        seqs.push(splice_ids(&q.token_ids, trigger.token_ids(), at));
    }
    let loss = ObjectiveLoss {
        centers: &centers.centers,
        lambda,
        terms,
    };
    token_embedding_gradient(spec, &loss, &seqs, trigger.token_ids()[token_index])
}
