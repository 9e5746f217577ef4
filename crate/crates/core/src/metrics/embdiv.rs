//! Distributional quality: how differently generated and reference documents
//! populate the clusters of a joint k-means over the model's own mean hidden
//! states. Score is `1 - JSD(P, Q) / ln 2`.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{mean_hidden_states, ModelParams};
use crate::numeric::Scalar;

pub const KMEANS_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Array2<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(point, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

/// Lloyd's algorithm with k-means++ seeding from a seeded generator.
/// Distance ties go to the lower cluster index; empty clusters keep their centroid.
pub fn kmeans(points: ArrayView2<f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} clusters for {n} points")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite embedding"));
    }
    let rows: Vec<Vec<f64>> = points.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::zeros((k, points.ncols()));
    let mut chosen = vec![rng.random_range(0..n)];
    centroids.row_mut(0).assign(&points.row(chosen[0]));
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut cum = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                cum += d;
                if d > 0.0 && u < cum {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(pick);
        centroids.row_mut(c).assign(&points.row(pick));
        for (d, r) in d2.iter_mut().zip(&rows) {
            *d = d.min(sq_dist(r, centroids.row(c)));
        }
    }

    let mut assignments: Vec<usize> = rows.iter().map(|r| nearest(r, &centroids)).collect();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (r, &a) in rows.iter().zip(&assignments) {
            counts[a] += 1;
            let mut s = sums.row_mut(a);
            for (x, v) in s.iter_mut().zip(r) {
                *x += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = sums.row(c).mapv(|v| v / counts[c] as f64);
                centroids.row_mut(c).assign(&mean);
            }
        }
        let next: Vec<usize> = rows.iter().map(|r| nearest(r, &centroids)).collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok(KMeans {
        centroids,
        assignments,
        iterations,
    })
}

/// Jensen–Shannon divergence in nats.
pub fn jensen_shannon(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("jensen_shannon", p.len(), q.len()));
    }
    let half = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (x / y).ln())
            .sum::<f64>()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * half(p, &m) + 0.5 * half(q, &m)).max(0.0))
}

fn histogram(assign: &[usize], k: usize) -> Result<Vec<f64>> {
    if assign.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut h = vec![0.0; k];
    for &a in assign {
        *h.get_mut(a).ok_or_else(|| Error::invalid(format!("cluster {a} out of range")))? += 1.0;
    }
    let n = assign.len() as f64;
    Ok(h.into_iter().map(|c| c / n).collect())
}

/// `1 - JSD(P, Q) / ln 2` for the cluster histograms of two assignment lists.
pub fn histogram_score(assign_a: &[usize], assign_b: &[usize], k: usize) -> Result<f64> {
    let p = histogram(assign_a, k)?;
    let q = histogram(assign_b, k)?;
    Ok((1.0 - jensen_shannon(&p, &q)? / std::f64::consts::LN_2).clamp(0.0, 1.0))
}

/// Cluster-histogram similarity of generated and reference documents in the
/// model's mean-hidden-state space. `1` means identical histograms, `0`
/// disjoint cluster sets.
pub fn embdiv_quality<F: Scalar>(
    params: &ModelParams<F>,
    generated: &[Vec<usize>],
    references: &[Vec<usize>],
    k_clusters: usize,
    seed: u64,
) -> Result<f64> {
    if generated.is_empty() || references.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if k_clusters < 2 {
        return Err(Error::invalid("k_clusters must be at least 2"));
    }
    let total = generated.len() + references.len();
    if k_clusters > total {
        return Err(Error::invalid(format!("k_clusters {k_clusters} exceeds {total} documents")));
    }
    if generated.iter().chain(references).any(Vec::is_empty) {
        return Err(Error::invalid("empty document"));
    }
    let joint: Vec<Vec<usize>> = generated.iter().chain(references).cloned().collect();
    let emb = mean_hidden_states(params, &joint)?;
    let km = kmeans(emb.view(), k_clusters, seed, KMEANS_MAX_ITER)?;
    let (a, b) = km.assignments.split_at(generated.len());
    histogram_score(a, b, k_clusters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};
    use ndarray::array;

    #[test]
    fn kmeans_separates_obvious_clusters() {
        let pts = array![[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0], [0.0, 0.1], [10.0, 10.1]];
        let km = kmeans(pts.view(), 2, 7, KMEANS_MAX_ITER).unwrap();
        let a = &km.assignments;
        assert_eq!(a[0], a[1]);
        assert_eq!(a[0], a[4]);
        assert_eq!(a[2], a[3]);
        assert_eq!(a[2], a[5]);
        assert_ne!(a[0], a[2]);
        assert_eq!(km, kmeans(pts.view(), 2, 7, KMEANS_MAX_ITER).unwrap());
    }

    #[test]
    fn kmeans_handles_duplicates_and_bad_k() {
        let pts = array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]];
        let km = kmeans(pts.view(), 2, 0, 10).unwrap();
        assert_eq!(km.assignments, vec![0, 0, 0]);
        assert!(kmeans(pts.view(), 4, 0, 10).is_err());
    }

    #[test]
    fn forced_assignments_match_direct_jsd() {
        // gen: clusters [0, 0, 1, 2]; ref: [0, 1, 1, 1]
        let p = [0.5f64, 0.25, 0.25];
        let q = [0.25f64, 0.75, 0.0];
        let m = [0.375f64, 0.5, 0.125];
        let mut jsd = 0.0;
        for i in 0..3 {
            if p[i] > 0.0 {
                jsd += 0.5 * p[i] * (p[i] / m[i]).ln();
            }
            if q[i] > 0.0 {
                jsd += 0.5 * q[i] * (q[i] / m[i]).ln();
            }
        }
        let s = histogram_score(&[0, 0, 1, 2], &[0, 1, 1, 1], 3).unwrap();
        assert!((s - (1.0 - jsd / 2f64.ln())).abs() < 1e-12);
        assert_eq!(s, histogram_score(&[0, 1, 1, 1], &[0, 0, 1, 2], 3).unwrap());
    }

    #[test]
    fn identical_and_disjoint_histograms() {
        assert_eq!(histogram_score(&[0, 1, 1], &[1, 0, 1], 2).unwrap(), 1.0);
        assert!(histogram_score(&[0, 0], &[1, 1], 2).unwrap().abs() < 1e-12);
    }

    fn model() -> ModelParams<f64> {
        let c = ModelConfig {
            variant: Variant::Causal,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
            vocab_size: 12,
            ln_epsilon: 1e-5,
        };
        ModelParams::init(&c, 3).unwrap()
    }

    #[test]
    fn same_documents_score_one() {
        let docs: Vec<Vec<usize>> = (0..8).map(|i| vec![i % 12, (i * 5) % 12, (i * 7 + 1) % 12]).collect();
        let s = embdiv_quality(&model(), &docs, &docs, 3, 11).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn argument_errors() {
        let docs = vec![vec![1, 2], vec![3]];
        assert!(embdiv_quality(&model(), &docs, &[], 2, 0).is_err());
        assert!(embdiv_quality(&model(), &docs, &docs, 1, 0).is_err());
        assert!(embdiv_quality(&model(), &docs, &docs, 5, 0).is_err());
    }
}
