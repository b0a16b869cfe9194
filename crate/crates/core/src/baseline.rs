//! Random-substitution baseline: cluster the character embeddings with
//! K-means, then replace a couple of randomly chosen characters with random
//! characters from other clusters.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::{TokenSeq, NUM_SPECIALS};
use crate::Float;

/// K-means clustering of the non-special embedding rows. Point `p`
/// corresponds to vocabulary id `p + 3`.
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub k: usize,
    /// k x d_c centroid matrix.
    pub centroids: Array2<Float>,
    /// Cluster index per non-special vocabulary id (index = id - 3).
    assignment: Vec<usize>,
    /// Vocabulary ids per cluster; never empty.
    members: Vec<Vec<u32>>,
}

impl ClusterAssignment {
    pub fn cluster_of(&self, id: u32) -> Option<usize> {
        if id < NUM_SPECIALS {
            return None;
        }
        self.assignment.get((id - NUM_SPECIALS) as usize).copied()
    }

    pub fn members(&self, cluster: usize) -> &[u32] {
        &self.members[cluster]
    }

    /// Sum of squared distances of every point to its centroid.
    pub fn inertia(&self, embedding: &Array2<Float>) -> Float {
        let mut total = 0.0;
        for (p, &c) in self.assignment.iter().enumerate() {
            let row = embedding.row(p + NUM_SPECIALS as usize);
            let cent = self.centroids.row(c);
            total += row
                .iter()
                .zip(cent.iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<Float>();
        }
        total
    }
}

fn sq_dist(a: ndarray::ArrayView1<Float>, b: ndarray::ArrayView1<Float>) -> Float {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// Lloyd's algorithm with k-means++ seeding over the non-special rows of the
/// embedding matrix. Deterministic given (embedding, k, seed, max_iters):
/// ties in assignment go to the lowest cluster index, empty clusters steal
/// the farthest point from the largest cluster.
pub fn cluster_embeddings(
    embedding: &Array2<Float>,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<ClusterAssignment> {
    let n_points = embedding.nrows().saturating_sub(NUM_SPECIALS as usize);
    if k < 2 || k > n_points {
        return Err(Error::Config(format!(
            "cluster count {k} out of range 2..={n_points}"
        )));
    }
    let d = embedding.ncols();
    let point = |p: usize| embedding.row(p + NUM_SPECIALS as usize);
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);

    // k-means++ seeding: first centroid uniform, then proportional to the
    // squared distance to the nearest chosen centroid.
    let mut centroids: Array2<Float> = Array2::zeros((k, d));
    let first = rng.gen_range(0..n_points);
    centroids.row_mut(0).assign(&point(first));
    let mut chosen = vec![first];
    let mut d2: Vec<Float> = (0..n_points)
        .map(|p| sq_dist(point(p), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: Float = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen_range(0.0..1.0) * total;
            let mut picked = n_points - 1;
            for (p, &w) in d2.iter().enumerate() {
                if r < w {
                    picked = p;
                    break;
                }
                r -= w;
            }
            picked
        } else {
            // All remaining points coincide with a centroid; take the lowest
            // index not yet chosen.
            (0..n_points)
                .find(|p| !chosen.contains(p))
                .expect("k <= n_points")
        };
        centroids.row_mut(c).assign(&point(next));
        chosen.push(next);
        for (p, w) in d2.iter_mut().enumerate() {
            let dist = sq_dist(point(p), centroids.row(c));
            if dist < *w {
                *w = dist;
            }
        }
    }

    let mut assignment = vec![0usize; n_points];
    for _ in 0..max_iters {
        // Assignment step, ties to the lowest cluster index.
        let mut next_assignment = vec![0usize; n_points];
        for p in 0..n_points {
            let mut best = (Float::INFINITY, 0usize);
            for c in 0..k {
                let dist = sq_dist(point(p), centroids.row(c));
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            next_assignment[p] = best.1;
        }

        // Repair empty clusters: steal the farthest point from the largest
        // cluster (all ties to the lowest index).
        loop {
            let mut counts = vec![0usize; k];
            for &c in &next_assignment {
                counts[c] += 1;
            }
            let Some(empty) = counts.iter().position(|&n| n == 0) else {
                break;
            };
            let largest = counts
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(c, _)| c)
                .expect("k >= 2");
            let farthest = (0..n_points)
                .filter(|&p| next_assignment[p] == largest)
                .max_by(|&a, &b| {
                    let da = sq_dist(point(a), centroids.row(largest));
                    let db = sq_dist(point(b), centroids.row(largest));
                    da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                })
                .expect("largest cluster is non-empty");
            next_assignment[farthest] = empty;
        }

        let converged = next_assignment == assignment;
        assignment = next_assignment;

        // Update step: centroid = mean of members.
        let mut sums: Array2<Float> = Array2::zeros((k, d));
        let mut counts = vec![0usize; k];
        for p in 0..n_points {
            let c = assignment[p];
            let mut row = sums.row_mut(c);
            row += &point(p);
            counts[c] += 1;
        }
        for c in 0..k {
            let mut row = sums.row_mut(c);
            row.mapv_inplace(|x| x / counts[c] as Float);
        }
        centroids = sums;

        if converged {
            break;
        }
    }

    let mut members = vec![Vec::new(); k];
    for (p, &c) in assignment.iter().enumerate() {
        members[c].push(p as u32 + NUM_SPECIALS);
    }
    debug_assert!(members.iter().all(|m| !m.is_empty()));
    Ok(ClusterAssignment {
        k,
        centroids,
        assignment,
        members,
    })
}

/// Default cluster count for a vocabulary: min(1000, non-special/2).
pub fn default_cluster_count(vocab_size: usize) -> usize {
    let non_special = vocab_size.saturating_sub(NUM_SPECIALS as usize);
    (non_special / 2).clamp(2, 1000)
}

/// Replaces two or three (uniformly chosen, capped at the perturbable count)
/// distinct non-special positions with a random character from a random
/// cluster different from the character's own. Position 0 is untouched.
pub fn baseline_attack(
    x: &TokenSeq,
    clusters: &ClusterAssignment,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSeq> {
    let perturbable: Vec<usize> = (1..x.len())
        .filter(|&i| x.ids()[i] >= NUM_SPECIALS)
        .collect();
    if perturbable.is_empty() {
        return Err(Error::Data("no perturbable position in input".into()));
    }
    let r = rng.gen_range(2..=3usize).min(perturbable.len());
    let picks = sample(rng, perturbable.len(), r);
    let mut out = x.ids().to_vec();
    for pick in picks.iter() {
        let pos = perturbable[pick];
        let own = clusters
            .cluster_of(out[pos])
            .ok_or_else(|| Error::Data(format!("token id {} has no cluster", out[pos])))?;
        // Uniform over the k-1 other clusters.
        let mut c = rng.gen_range(0..clusters.k - 1);
        if c >= own {
            c += 1;
        }
        let members = clusters.members(c);
        out[pos] = members[rng.gen_range(0..members.len())];
    }
    Ok(TokenSeq(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Embedding with two well-separated blobs of 10 points each (plus the
    /// 3 special rows, which clustering ignores).
    fn blob_embedding() -> Array2<Float> {
        let mut e = Array2::zeros((23, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for p in 0..20usize {
            let base = if p < 10 { -10.0 } else { 10.0 };
            for j in 0..4 {
                e[(p + 3, j)] = base + rng.gen_range(-0.5..0.5);
            }
        }
        e
    }

    /// Plain reimplementation of the documented clustering scheme, used as
    /// an independent oracle.
    fn oracle_lloyd(
        embedding: &Array2<Float>,
        k: usize,
        seed: u64,
        max_iters: usize,
    ) -> Vec<usize> {
        let n = embedding.nrows() - 3;
        let pts: Vec<Vec<Float>> = (0..n)
            .map(|p| embedding.row(p + 3).iter().copied().collect())
            .collect();
        let dist = |a: &[Float], b: &[Float]| -> Float {
            a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cents: Vec<Vec<Float>> = Vec::new();
        let first = rng.gen_range(0..n);
        cents.push(pts[first].clone());
        let mut chosen = vec![first];
        let mut d2: Vec<Float> = pts.iter().map(|p| dist(p, &cents[0])).collect();
        for _ in 1..k {
            let total: Float = d2.iter().sum();
            let next = if total > 0.0 {
                let mut r = rng.gen_range(0.0..1.0) * total;
                let mut picked = n - 1;
                for (p, &w) in d2.iter().enumerate() {
                    if r < w {
                        picked = p;
                        break;
                    }
                    r -= w;
                }
                picked
            } else {
                (0..n).find(|p| !chosen.contains(p)).unwrap()
            };
            cents.push(pts[next].clone());
            chosen.push(next);
            for (p, w) in d2.iter_mut().enumerate() {
                *w = (*w).min(dist(&pts[p], cents.last().unwrap()));
            }
        }
        let mut assign = vec![0usize; n];
        for _ in 0..max_iters {
            let mut next: Vec<usize> = pts
                .iter()
                .map(|p| {
                    let mut best = (Float::INFINITY, 0usize);
                    for (c, cent) in cents.iter().enumerate() {
                        let d = dist(p, cent);
                        if d < best.0 {
                            best = (d, c);
                        }
                    }
                    best.1
                })
                .collect();
            loop {
                let mut counts = vec![0usize; k];
                for &c in &next {
                    counts[c] += 1;
                }
                let Some(empty) = counts.iter().position(|&c| c == 0) else {
                    break;
                };
                let largest = counts
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                    .map(|(c, _)| c)
                    .unwrap();
                let farthest = (0..n)
                    .filter(|&p| next[p] == largest)
                    .max_by(|&a, &b| {
                        dist(&pts[a], &cents[largest])
                            .partial_cmp(&dist(&pts[b], &cents[largest]))
                            .unwrap()
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                next[farthest] = empty;
            }
            let converged = next == assign;
            assign = next;
            let mut sums = vec![vec![0.0 as Float; pts[0].len()]; k];
            let mut counts = vec![0usize; k];
            for (p, &c) in assign.iter().enumerate() {
                for j in 0..pts[p].len() {
                    sums[c][j] += pts[p][j];
                }
                counts[c] += 1;
            }
            for c in 0..k {
                for s in &mut sums[c] {
                    *s /= counts[c] as Float;
                }
            }
            cents = sums;
            if converged {
                break;
            }
        }
        assign
    }

    #[test]
    fn separates_two_blobs_and_matches_oracle() {
        let e = blob_embedding();
        let ca = cluster_embeddings(&e, 2, 7, 50).unwrap();
        let oracle = oracle_lloyd(&e, 2, 7, 50);
        for p in 0..20u32 {
            assert_eq!(ca.cluster_of(p + 3), Some(oracle[p as usize]));
        }
        // Blob membership: first ten in one cluster, rest in the other.
        let c0 = ca.cluster_of(3).unwrap();
        for id in 3..13 {
            assert_eq!(ca.cluster_of(id), Some(c0));
        }
        for id in 13..23 {
            assert_eq!(ca.cluster_of(id), Some(1 - c0));
        }
    }

    #[test]
    fn k_equals_points_gives_singleton_clusters_with_zero_inertia() {
        let mut e = Array2::zeros((8, 3));
        for p in 0..5usize {
            for j in 0..3 {
                e[(p + 3, j)] = (p * 3 + j) as Float;
            }
        }
        let ca = cluster_embeddings(&e, 5, 1, 50).unwrap();
        for c in 0..5 {
            assert_eq!(ca.members(c).len(), 1);
        }
        assert_eq!(ca.inertia(&e), 0.0);
    }

    #[test]
    fn clustering_is_deterministic() {
        let e = blob_embedding();
        let a = cluster_embeddings(&e, 4, 123, 50).unwrap();
        let b = cluster_embeddings(&e, 4, 123, 50).unwrap();
        assert_eq!(a.assignment, b.assignment);
        assert_eq!(a.centroids, b.centroids);
    }

    #[test]
    fn rejects_out_of_range_k() {
        let e = blob_embedding();
        assert!(matches!(
            cluster_embeddings(&e, 1, 0, 10),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            cluster_embeddings(&e, 21, 0, 10),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attack_caps_replacements_at_perturbable_count() {
        let e = blob_embedding();
        let ca = cluster_embeddings(&e, 4, 5, 50).unwrap();
        let x = TokenSeq(vec![0, 7]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = baseline_attack(&x, &ca, &mut rng).unwrap();
        assert_eq!(x.diff_positions(&out).unwrap().len(), 1);
    }

    #[test]
    fn attack_changes_exactly_r_positions_from_other_clusters() {
        let e = blob_embedding();
        let ca = cluster_embeddings(&e, 4, 5, 50).unwrap();
        let x = TokenSeq(vec![0, 5, 2, 8, 11, 14, 17]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let out = baseline_attack(&x, &ca, &mut rng).unwrap();
            let diff = x.diff_positions(&out).unwrap();
            assert!(
                diff.len() == 2 || diff.len() == 3,
                "changed {} positions",
                diff.len()
            );
            assert_eq!(out.ids()[0], 0, "sentinel untouched");
            assert_eq!(out.ids()[2], 2, "special position untouched");
            for &i in &diff {
                let old = x.ids()[i];
                let new = out.ids()[i];
                assert!(new >= NUM_SPECIALS, "specials never produced");
                assert_ne!(
                    ca.cluster_of(new).unwrap(),
                    ca.cluster_of(old).unwrap(),
                    "replacement from the source cluster"
                );
            }
        }
    }

    #[test]
    fn attack_positions_are_uniform_over_trials() {
        let e = blob_embedding();
        let ca = cluster_embeddings(&e, 4, 5, 50).unwrap();
        let x = TokenSeq(vec![0, 5, 8, 11, 14, 17, 20]);
        let n_pos = 6;
        let trials = 10_000;
        let mut counts = vec![0usize; x.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut total_picks = 0usize;
        for _ in 0..trials {
            let out = baseline_attack(&x, &ca, &mut rng).unwrap();
            for i in x.diff_positions(&out).unwrap() {
                counts[i] += 1;
                total_picks += 1;
            }
        }
        // Each trial picks each position with probability E[r]/n = 2.5/6.
        let p = total_picks as f64 / (trials * n_pos) as f64;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        let expected = trials as f64 * p;
        for i in 1..x.len() {
            let dev = (counts[i] as f64 - expected).abs();
            assert!(
                dev <= 3.0 * sigma,
                "position {i}: count {} vs expected {expected}",
                counts[i]
            );
        }
    }

    #[test]
    fn default_cluster_count_tracks_vocab_size() {
        assert_eq!(default_cluster_count(203), 100);
        assert_eq!(default_cluster_count(5000), 1000);
        assert_eq!(default_cluster_count(7), 2);
    }
}
