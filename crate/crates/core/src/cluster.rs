//! Lloyd's k-means with k-means++ seeding over key embeddings.
//!
//! The resulting centers are what the uniqueness loss measures distance to.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Final cluster centers plus the inertia trajectory of the run.
#[derive(Debug, Clone)]
pub struct ClusterCenters {
    pub centers: Vec<DVector<f64>>,
    pub n: usize,
    /// Sum of squared assignment distances at convergence.
    pub inertia: f64,
    /// Inertia after each assignment step; non-increasing by construction.
    pub inertia_history: Vec<f64>,
}

impl ClusterCenters {
    /// Single-center constructor used by tests and degenerate configs.
    pub fn single(center: DVector<f64>) -> Self {
        Self {
            centers: vec![center],
            n: 1,
            inertia: 0.0,
            inertia_history: Vec::new(),
        }
    }
}

fn squared_distance(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

fn nearest_center(point: &DVector<f64>, centers: &[DVector<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    (best, best_d)
}

/// k-means++ seeding: first center uniform, the rest D²-weighted.
fn seed_centers(points: &[DVector<f64>], n: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let mut centers = Vec::with_capacity(n);
    centers.push(points[rng.gen_range(0..points.len())].clone());
    let mut dist2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centers[0]))
        .collect();
    while centers.len() < n {
        let total: f64 = dist2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a center; any choice works.
            rng.gen_range(0..points.len())
        } else {
            let mut draw = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in dist2.iter().enumerate() {
                draw -= d;
                if draw <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centers.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            let d = squared_distance(p, centers.last().expect("just pushed"));
            if d < dist2[i] {
                dist2[i] = d;
            }
        }
    }
    centers
}

/// Lloyd's algorithm. Stops on unchanged assignments or `max_iters`.
/// Empty clusters are re-seeded to the point farthest from its center.
pub fn kmeans(
    points: &[DVector<f64>],
    n: usize,
    max_iters: usize,
    seed: u64,
) -> Result<ClusterCenters> {
    if n == 0 {
        return Err(Error::config("cluster count must be positive"));
    }
    if n > points.len() {
        return Err(Error::invalid(format!(
            "cannot form {n} clusters from {} points",
            points.len()
        )));
    }
    if max_iters == 0 {
        return Err(Error::config("kmeans max_iters must be >= 1"));
    }
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_centers(points, n, &mut rng);
    let mut assignment = vec![usize::MAX; points.len()];
    let mut inertia_history: Vec<f64> = Vec::new();

    for _ in 0..max_iters {
        // Assignment step.
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (k, d) = nearest_center(p, &centers);
            inertia += d;
            if assignment[i] != k {
                assignment[i] = k;
                changed = true;
            }
        }
        if let Some(&prev) = inertia_history.last() {
            debug_assert!(inertia <= prev + 1e-9 * prev.max(1.0));
        }
        inertia_history.push(inertia);
        if !changed {
            break;
        }

        // Update step.
        let mut sums = vec![DVector::<f64>::zeros(dim); n];
        let mut counts = vec![0usize; n];
        for (i, p) in points.iter().enumerate() {
            sums[assignment[i]] += p;
            counts[assignment[i]] += 1;
        }
        for k in 0..n {
            if counts[k] > 0 {
                centers[k] = &sums[k] / counts[k] as f64;
            }
        }
        // Re-seed any empty cluster to the point farthest from its assigned
        // center; each rescued point is used at most once.
        if counts.iter().any(|&c| c == 0) {
            let mut residual: Vec<f64> = points
                .iter()
                .enumerate()
                .map(|(i, p)| squared_distance(p, &centers[assignment[i]]))
                .collect();
            for k in 0..n {
                if counts[k] == 0 {
                    let far = residual
                        .iter()
                        .enumerate()
                        .max_by(|(_, a), (_, b)| {
                            a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal)
                        })
                        .map(|(i, _)| i)
                        .expect("points nonempty");
                    centers[k] = points[far].clone();
                    residual[far] = f64::NEG_INFINITY;
                }
            }
        }
    }

    let inertia = *inertia_history.last().expect("at least one iteration");
    Ok(ClusterCenters {
        centers,
        n,
        inertia,
        inertia_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(raw: &[(f64, f64)]) -> Vec<DVector<f64>> {
        raw.iter()
            .map(|&(x, y)| DVector::from_vec(vec![x, y]))
            .collect()
    }

    /// Exhaustive search over all 2-partitions of the points.
    fn best_two_partition(points: &[DVector<f64>]) -> (Vec<DVector<f64>>, f64) {
        let n = points.len();
        let mut best: Option<(Vec<DVector<f64>>, f64)> = None;
        for mask in 1..(1u32 << n) - 1 {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (i, p) in points.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    a.push(p.clone());
                } else {
                    b.push(p.clone());
                }
            }
            let mean = |side: &[DVector<f64>]| {
                let mut m = DVector::zeros(points[0].len());
                for p in side {
                    m += p;
                }
                m / side.len() as f64
            };
            let (ca, cb) = (mean(&a), mean(&b));
            let inertia: f64 = a.iter().map(|p| squared_distance(p, &ca)).sum::<f64>()
                + b.iter().map(|p| squared_distance(p, &cb)).sum::<f64>();
            if best.as_ref().map_or(true, |(_, bi)| inertia < *bi) {
                best = Some((vec![ca, cb], inertia));
            }
        }
        best.unwrap()
    }

    #[test]
    fn four_point_instance_matches_partition_oracle() {
        let points = pts(&[(0.0, 0.0), (0.0, 1.0), (10.0, 0.0), (10.0, 1.0)]);
        let (oracle_centers, oracle_inertia) = best_two_partition(&points);
        for seed in 0..5 {
            let result = kmeans(&points, 2, 100, seed).unwrap();
            assert!((result.inertia - oracle_inertia).abs() < 1e-9);
            let mut got: Vec<_> = result.centers.iter().map(|c| (c[0], c[1])).collect();
            let mut want: Vec<_> = oracle_centers.iter().map(|c| (c[0], c[1])).collect();
            got.sort_by(|a, b| a.partial_cmp(b).unwrap());
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (g, w) in got.iter().zip(&want) {
                assert!((g.0 - w.0).abs() < 1e-9 && (g.1 - w.1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn n_equals_points_gives_zero_inertia() {
        let points = pts(&[(0.0, 0.0), (1.0, 1.0), (2.0, 0.5)]);
        let result = kmeans(&points, 3, 50, 3).unwrap();
        assert_eq!(result.inertia, 0.0);
        for p in &points {
            assert!(result
                .centers
                .iter()
                .any(|c| squared_distance(c, p) < 1e-18));
        }
    }

    #[test]
    fn inertia_history_non_increasing() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let points: Vec<DVector<f64>> = (0..200)
            .map(|_| DVector::from_fn(4, |_, _| rng.gen::<f64>() * 10.0))
            .collect();
        for seed in 0..4 {
            let result = kmeans(&points, 7, 60, seed).unwrap();
            for w in result.inertia_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0), "{:?}", result.inertia_history);
            }
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let points = pts(&[(0.0, 0.0), (0.1, 0.2), (5.0, 5.0), (5.2, 4.9), (9.0, 0.1)]);
        let a = kmeans(&points, 2, 50, 42).unwrap();
        let b = kmeans(&points, 2, 50, 42).unwrap();
        assert_eq!(a.centers, b.centers);
        assert_eq!(a.inertia_history, b.inertia_history);
    }

    #[test]
    fn too_many_clusters_rejected() {
        let points = pts(&[(0.0, 0.0)]);
        assert!(kmeans(&points, 2, 10, 0).is_err());
    }
}
