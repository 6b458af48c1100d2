//! Deterministic differentiable text embedders.
//!
//! An [`EmbedderSpec`] is a token-embedding table plus a projection matrix,
//! both derived from `(kind, dim, vocab_size, seed)`. The table is built as a
//! shared pseudo-random base (a function of `dim` and `vocab_size` only) mixed
//! with seed-dependent jitter, so two embedders with different seeds induce
//! related but distinct geometries, the way retrievers trained on the same
//! data distribution do. Pooling differs per kind, which is what distinguishes
//! the embedder families.
//!
//! All gradients here are exact analytic derivatives with respect to a single
//! token-embedding row, chained through the pooling rule and the projection.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};

/// Relative weight of the seed-dependent jitter mixed into the shared base
/// table. Geometry correlation between two seeds is `1 / (1 + ε²)`.
const SEED_JITTER: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    MeanPool,
    PositionWeightedPool,
    BigramProjection,
}

impl EmbedderKind {
    fn salt(self) -> u64 {
        match self {
            EmbedderKind::MeanPool => 0x6d65616e,
            EmbedderKind::PositionWeightedPool => 0x706f7377,
            EmbedderKind::BigramProjection => 0x62696772,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EmbedderKind::MeanPool => "mean_pool",
            EmbedderKind::PositionWeightedPool => "position_weighted_pool",
            EmbedderKind::BigramProjection => "bigram_projection",
        }
    }
}

/// Serialized form: the four parameters that fully determine an embedder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedderParams {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub seed: u64,
    pub vocab_size: usize,
}

/// A deterministic text embedder: token table, projection and pooling rule.
#[derive(Debug, Clone)]
pub struct EmbedderSpec {
    kind: EmbedderKind,
    dim: usize,
    seed: u64,
    token_table: DMatrix<f64>,
    projection: DMatrix<f64>,
    normalize: bool,
}

/// Deterministic standard normal draws via Box-Muller over ChaCha uniforms.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| gaussian(&mut rng) * scale)
}

fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e3779b97f4a7c15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_mul(0xbf58476d1ce4e5b9);
        h ^= h >> 31;
    }
    h
}

impl EmbedderSpec {
    pub fn new(kind: EmbedderKind, dim: usize, vocab_size: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("embedder.dim must be positive"));
        }
        if vocab_size == 0 {
            return Err(Error::config("embedder vocab_size must be positive"));
        }
        let scale = 1.0 / (dim as f64).sqrt();
        let base = gaussian_matrix(vocab_size, dim, scale, mix(&[dim as u64, vocab_size as u64]));
        let jitter = gaussian_matrix(
            vocab_size,
            dim,
            scale,
            mix(&[seed, dim as u64, vocab_size as u64, 0x6a697474]),
        );
        let norm = 1.0 / (1.0 + SEED_JITTER * SEED_JITTER).sqrt();
        let token_table = (base + jitter * SEED_JITTER) * norm;
        let projection = gaussian_matrix(dim, dim, scale, mix(&[seed, dim as u64, kind.salt()]));
        Ok(Self {
            kind,
            dim,
            seed,
            token_table,
            projection,
            normalize: false,
        })
    }

    pub fn from_params(p: &EmbedderParams) -> Result<Self> {
        Self::new(p.kind, p.dim, p.vocab_size, p.seed)
    }

    /// Test constructor with explicit table and projection.
    pub fn from_parts(kind: EmbedderKind, token_table: DMatrix<f64>, projection: DMatrix<f64>) -> Self {
        Self {
            kind,
            dim: projection.nrows(),
            seed: 0,
            token_table,
            projection,
            normalize: false,
        }
    }

    /// Returns a copy that L2-normalizes embed outputs.
    pub fn with_normalization(mut self) -> Self {
        self.normalize = true;
        self
    }

    pub fn params(&self) -> EmbedderParams {
        EmbedderParams {
            kind: self.kind,
            dim: self.dim,
            seed: self.seed,
            vocab_size: self.token_table.nrows(),
        }
    }

    pub fn kind(&self) -> EmbedderKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocab_size(&self) -> usize {
        self.token_table.nrows()
    }

    /// Identifier used to tag knowledge bases with the spec that embedded
    /// their keys.
    pub fn id(&self) -> String {
        format!(
            "{}-d{}-v{}-s{}",
            self.kind.name(),
            self.dim,
            self.vocab_size(),
            self.seed
        )
    }

    pub fn token_row(&self, token: TokenId) -> DVector<f64> {
        self.token_table.row(token as usize).transpose()
    }

    fn check_seq(&self, seq: &[TokenId]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::invalid("cannot embed an empty sequence"));
        }
        if let Some(&bad) = seq.iter().find(|&&t| (t as usize) >= self.vocab_size()) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocab of {}",
                self.vocab_size()
            )));
        }
        Ok(())
    }

    /// Pooled (pre-projection) vector for a sequence.
    fn pool(&self, seq: &[TokenId]) -> DVector<f64> {
        let len = seq.len();
        let mut p = DVector::zeros(self.dim);
        match self.kind {
            EmbedderKind::MeanPool => {
                for &t in seq {
                    p += self.token_table.row(t as usize).transpose();
                }
                p /= len as f64;
            }
            EmbedderKind::PositionWeightedPool => {
                for (i, &t) in seq.iter().enumerate() {
                    p += self.token_table.row(t as usize).transpose() * position_weight(i, len);
                }
            }
            EmbedderKind::BigramProjection => {
                for &t in seq {
                    p += self.token_table.row(t as usize).transpose();
                }
                p /= len as f64;
                if len >= 2 {
                    let mut b = DVector::zeros(self.dim);
                    for w in seq.windows(2) {
                        let slot = bigram_slot(w[0], w[1], self.vocab_size());
                        b += self.token_table.row(slot as usize).transpose();
                    }
                    p += b / (len - 1) as f64;
                }
            }
        }
        p
    }

    /// How strongly the embedding of `seq` depends on the table row of
    /// `token`: `d pool / d e_token = coefficient * I`.
    fn row_coefficient(&self, seq: &[TokenId], token: TokenId) -> f64 {
        let len = seq.len();
        let mut c = 0.0;
        match self.kind {
            EmbedderKind::MeanPool => {
                let occ = seq.iter().filter(|&&t| t == token).count();
                c = occ as f64 / len as f64;
            }
            EmbedderKind::PositionWeightedPool => {
                for (i, &t) in seq.iter().enumerate() {
                    if t == token {
                        c += position_weight(i, len);
                    }
                }
            }
            EmbedderKind::BigramProjection => {
                let occ = seq.iter().filter(|&&t| t == token).count();
                c = occ as f64 / len as f64;
                if len >= 2 {
                    let hits = seq
                        .windows(2)
                        .filter(|w| bigram_slot(w[0], w[1], self.vocab_size()) == token)
                        .count();
                    c += hits as f64 / (len - 1) as f64;
                }
            }
        }
        c
    }
}

/// Fixed deterministic position weights, increasing with position and
/// summing to one.
fn position_weight(i: usize, len: usize) -> f64 {
    2.0 * (i as f64 + 1.0) / (len as f64 * (len as f64 + 1.0))
}

/// Hashes a consecutive token-id pair into the token table.
pub fn bigram_slot(a: TokenId, b: TokenId, vocab_size: usize) -> TokenId {
    let h = mix(&[a as u64 + 1, (b as u64) << 20]);
    (h % vocab_size as u64) as TokenId
}

/// Embeds a token-id sequence. Deterministic for a fixed spec.
pub fn embed(spec: &EmbedderSpec, seq: &[TokenId]) -> Result<DVector<f64>> {
    spec.check_seq(seq)?;
    let v = &spec.projection * spec.pool(seq);
    if spec.normalize {
        let n = v.norm();
        if n <= 0.0 {
            return Err(Error::invalid("degenerate embedding"));
        }
        Ok(v / n)
    } else {
        Ok(v)
    }
}

/// Cosine similarity; errors on zero-norm inputs.
pub fn cosine(u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
    let nu = u.norm();
    let nv = v.norm();
    if nu <= 0.0 || nv <= 0.0 {
        return Err(Error::invalid("degenerate embedding"));
    }
    Ok(u.dot(v) / (nu * nv))
}

/// A scalar loss over a batch of embeddings, with its exact gradient with
/// respect to each embedding vector.
pub trait BatchLoss {
    fn value(&self, embeddings: &[DVector<f64>]) -> f64;
    fn grad(&self, embeddings: &[DVector<f64>]) -> Vec<DVector<f64>>;
}

/// Exact gradient of `loss` with respect to the token-table row of `token`,
/// aggregated over every occurrence (unigram and hashed-bigram) of that row
/// in every sequence of the batch.
pub fn token_embedding_gradient(
    spec: &EmbedderSpec,
    loss: &dyn BatchLoss,
    seqs: &[Vec<TokenId>],
    token: TokenId,
) -> Result<DVector<f64>> {
    if spec.normalize {
        return Err(Error::invalid(
            "analytic gradient is not defined for normalized embeddings",
        ));
    }
    let mut embeddings = Vec::with_capacity(seqs.len());
    for seq in seqs {
        embeddings.push(embed(spec, seq)?);
    }
    let upstream = loss.grad(&embeddings);
    let mut acc = DVector::zeros(spec.dim);
    for (seq, g) in seqs.iter().zip(&upstream) {
        let c = spec.row_coefficient(seq, token);
        if c != 0.0 {
            acc += spec.projection.tr_mul(g) * c;
        }
    }
    Ok(acc)
}

/// First-order replacement scores: `score(t') = e_{t'} . g` for every
/// vocabulary token. Lower score predicts lower loss after replacement.
pub fn hotflip_scores(spec: &EmbedderSpec, gradient: &DVector<f64>) -> Vec<f64> {
    let scores = &spec.token_table * gradient;
    scores.iter().copied().collect()
}

/// The `m` tokens with the lowest scores; ties broken by token id.
pub fn top_m_replacements(scores: &[f64], m: usize) -> Vec<TokenId> {
    let mut order: Vec<TokenId> = (0..scores.len() as TokenId).collect();
    order.sort_by(|&a, &b| {
        scores[a as usize]
            .partial_cmp(&scores[b as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(m);
    order
}
