//! Lloyd's k-means with k-means++ seeding.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SelectionError;

pub const MAX_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    pub seed: u64,
    /// Cluster id per input vector.
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f32>>,
    pub iterations: usize,
}

impl Clustering {
    /// Positions of the vectors assigned to `cluster`, ascending.
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == cluster)
            .map(|(i, _)| i)
            .collect()
    }

    /// Nearest center by squared Euclidean distance; ties go to the lower id.
    pub fn nearest_center(&self, v: &[f32]) -> usize {
        nearest(&self.centers, v).0
    }

    /// Within-cluster sum of squared distances for `vectors`.
    pub fn sse(&self, vectors: &[Vec<f32>]) -> f64 {
        vectors
            .iter()
            .zip(&self.assignments)
            .map(|(v, &c)| sq_dist(v, &self.centers[c]))
            .sum()
    }
}

pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum()
}

fn nearest(centers: &[Vec<f32>], v: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(v, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(vectors: &[Vec<f32>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let n = vectors.len();
    let mut centers = vec![vectors[rng.random_range(0..n)].clone()];
    let mut weights: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in weights.iter().enumerate() {
                if *w <= 0.0 {
                    continue;
                }
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // every point coincides with a center; any choice is as good
            rng.random_range(0..n)
        };
        centers.push(vectors[pick].clone());
        for (w, v) in weights.iter_mut().zip(vectors) {
            *w = w.min(sq_dist(v, centers.last().unwrap()));
        }
    }
    centers
}

/// Clusters `vectors` into `k` groups. Deterministic for a given seed.
///
/// Runs until the assignment stops changing or [`MAX_ITERATIONS`] is hit.
/// A cluster that empties is re-seeded with the point farthest from its
/// current center so every cluster ends non-empty.
pub fn kmeans(vectors: &[Vec<f32>], k: usize, seed: u64) -> Result<Clustering, SelectionError> {
    if k == 0 || k > vectors.len() {
        return Err(SelectionError::TooFewPoints {
            k,
            points: vectors.len(),
        });
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(SelectionError::DimensionMismatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(vectors, k, &mut rng);
    let mut assignments: Vec<usize> = vectors.iter().map(|v| nearest(&centers, v).0).collect();
    fill_empty_clusters(vectors, &mut assignments, &mut centers);
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        centers = update_centers(vectors, &assignments, &centers);
        let mut next: Vec<usize> = vectors.iter().map(|v| nearest(&centers, v).0).collect();
        fill_empty_clusters(vectors, &mut next, &mut centers);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok(Clustering {
        k,
        seed,
        assignments,
        centers,
        iterations,
    })
}

fn update_centers(vectors: &[Vec<f32>], assignments: &[usize], old: &[Vec<f32>]) -> Vec<Vec<f32>> {
    let dim = old[0].len();
    let mut sums = vec![vec![0f64; dim]; old.len()];
    let mut counts = vec![0usize; old.len()];
    for (v, &c) in vectors.iter().zip(assignments) {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(v) {
            *s += f64::from(*x);
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(old)
        .map(|((sum, count), prev)| {
            if count == 0 {
                prev.clone()
            } else {
                sum.into_iter().map(|s| (s / count as f64) as f32).collect()
            }
        })
        .collect()
}

fn fill_empty_clusters(vectors: &[Vec<f32>], assignments: &mut [usize], centers: &mut [Vec<f32>]) {
    let k = centers.len();
    loop {
        let mut counts = vec![0usize; k];
        for &c in assignments.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        // farthest point among clusters that can spare one
        let donor = (0..vectors.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .max_by(|&a, &b| {
                let da = sq_dist(&vectors[a], &centers[assignments[a]]);
                let db = sq_dist(&vectors[b], &centers[assignments[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            });
        let Some(donor) = donor else { return };
        centers[empty] = vectors[donor].clone();
        assignments[donor] = empty;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimum SSE over every assignment of points to k nonempty groups.
    fn exhaustive_min_sse(points: &[Vec<f32>], k: usize) -> f64 {
        fn rec(points: &[Vec<f32>], k: usize, i: usize, labels: &mut Vec<usize>, best: &mut f64) {
            if i == points.len() {
                if (0..k).all(|c| labels.contains(&c)) {
                    let mut sse = 0.0;
                    for c in 0..k {
                        let members: Vec<&Vec<f32>> =
                            points.iter().zip(labels.iter()).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                        let dim = members[0].len();
                        let mean: Vec<f64> = (0..dim)
                            .map(|d| members.iter().map(|m| f64::from(m[d])).sum::<f64>() / members.len() as f64)
                            .collect();
                        sse += members
                            .iter()
                            .map(|m| m.iter().zip(&mean).map(|(x, y)| (f64::from(*x) - y).powi(2)).sum::<f64>())
                            .sum::<f64>();
                    }
                    *best = best.min(sse);
                }
                return;
            }
            for c in 0..k {
                labels.push(c);
                rec(points, k, i + 1, labels, best);
                labels.pop();
            }
        }
        let mut best = f64::INFINITY;
        rec(points, k, 0, &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![5.0, 5.0], vec![9.0, 1.0]];
        let c = kmeans(&pts, 4, 3).unwrap();
        let mut a = c.assignments.clone();
        a.sort_unstable();
        a.dedup();
        assert_eq!(a.len(), 4);
        assert!(c.sse(&pts) < 1e-12);
    }

    #[test]
    fn separated_pairs_match_exhaustive_oracle() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![0.2, 0.1],
            vec![10.0, 10.0],
            vec![10.1, 9.7],
            vec![0.1, -0.2],
            vec![9.9, 10.2],
        ];
        for seed in 0..20 {
            let c = kmeans(&pts, 2, seed).unwrap();
            assert_eq!(c.assignments[0], c.assignments[1]);
            assert_eq!(c.assignments[0], c.assignments[4]);
            assert_eq!(c.assignments[2], c.assignments[3]);
            assert_ne!(c.assignments[0], c.assignments[2]);
            assert!((c.sse(&pts) - exhaustive_min_sse(&pts, 2)).abs() < 1e-4);
        }
    }

    #[test]
    fn same_seed_same_result() {
        let pts: Vec<Vec<f32>> = (0..40).map(|i| vec![(i * 7 % 13) as f32, (i * 3 % 11) as f32]).collect();
        assert_eq!(kmeans(&pts, 5, 9).unwrap(), kmeans(&pts, 5, 9).unwrap());
    }

    #[test]
    fn errors() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(matches!(kmeans(&pts, 3, 0), Err(SelectionError::TooFewPoints { .. })));
        assert!(matches!(kmeans(&pts, 0, 0), Err(SelectionError::TooFewPoints { .. })));
        assert!(matches!(
            kmeans(&[vec![0.0], vec![1.0, 2.0]], 1, 0),
            Err(SelectionError::DimensionMismatch)
        ));
    }

    #[test]
    fn coincident_points_still_fill_every_cluster() {
        let pts = vec![vec![1.0, 1.0]; 5];
        let c = kmeans(&pts, 3, 1).unwrap();
        for cl in 0..3 {
            assert!(!c.members(cl).is_empty());
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(120))]

            #[test]
            fn assignments_are_nearest_and_small_cases_are_near_optimal(
                pts in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 2), 3..7),
                seed in any::<u64>(),
            ) {
                let k = 2.min(pts.len());
                let c = kmeans(&pts, k, seed).unwrap();
                for (v, &a) in pts.iter().zip(&c.assignments) {
                    let d = sq_dist(v, &c.centers[a]);
                    for center in &c.centers {
                        prop_assert!(d <= sq_dist(v, center) + 1e-9);
                    }
                }
                // Lloyd only guarantees a local optimum; it never beats the oracle
                prop_assert!(c.sse(&pts) + 1e-6 >= exhaustive_min_sse(&pts, k));
            }
        }

        #[test]
        fn sse_is_non_increasing_across_iterations() {
            let pts: Vec<Vec<f32>> = (0..60)
                .map(|i| vec![((i * 37) % 101) as f32 / 10.0, ((i * 53) % 89) as f32 / 10.0])
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut centers = plus_plus_init(&pts, 6, &mut rng);
            let mut assign: Vec<usize> = pts.iter().map(|v| nearest(&centers, v).0).collect();
            let sse = |a: &[usize], c: &[Vec<f32>]| -> f64 {
                pts.iter().zip(a).map(|(v, &k)| sq_dist(v, &c[k])).sum()
            };
            let mut prev = sse(&assign, &centers);
            for _ in 0..30 {
                centers = update_centers(&pts, &assign, &centers);
                let after_update = sse(&assign, &centers);
                assert!(after_update <= prev + 1e-6);
                assign = pts.iter().map(|v| nearest(&centers, v).0).collect();
                let after_assign = sse(&assign, &centers);
                assert!(after_assign <= after_update + 1e-6);
                prev = after_assign;
            }
        }
    }
}
