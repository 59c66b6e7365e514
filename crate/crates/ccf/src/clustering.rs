//! Trajectory classes: k-means anchors over training futures and the
//! class-probability targets derived from them.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// K cluster-mean future trajectories acting as class anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryClassSet {
    /// `k` anchor trajectories, each `t_pred` points.
    pub means: Vec<Vec<[f64; 2]>>,
    pub k: usize,
    pub seed: u64,
}

impl TrajectoryClassSet {
    pub fn t_pred(&self) -> usize {
        self.means[0].len()
    }

    /// Anchors flattened to `(k, t_pred*2)` row-major.
    pub fn flat(&self) -> Vec<f64> {
        self.means
            .iter()
            .flat_map(|m| m.iter().flat_map(|p| [p[0], p[1]]))
            .collect()
    }
}

fn flatten(traj: &[[f64; 2]]) -> Vec<f64> {
    traj.iter().flat_map(|p| [p[0], p[1]]).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ initialization over flattened futures.
///
/// Runs to an assignment fixpoint or 100 iterations. An empty cluster is
/// re-seeded to the point currently farthest from its own centroid.
/// Deterministic given the rng.
pub fn fit_classes(
    futures: &[Vec<[f64; 2]>],
    k: usize,
    rng: &mut Rng,
) -> Result<TrajectoryClassSet> {
    let (set, _) = fit_classes_traced(futures, k, rng)?;
    Ok(set)
}

/// As [`fit_classes`], additionally returning the clustering objective (sum
/// of squared distances to assigned centroids) after each assignment step.
pub fn fit_classes_traced(
    futures: &[Vec<[f64; 2]>],
    k: usize,
    rng: &mut Rng,
) -> Result<(TrajectoryClassSet, Vec<f64>)> {
    if k < 2 {
        return Err(Error::Validation(format!("k must be at least 2, got {k}")));
    }
    if futures.len() < k {
        return Err(Error::Validation(format!(
            "need at least k={k} futures to fit classes, got {}",
            futures.len()
        )));
    }
    let t_pred = futures[0].len();
    if futures.iter().any(|f| f.len() != t_pred) {
        return Err(Error::Validation(
            "futures must share one prediction horizon".into(),
        ));
    }
    let seed = rng.seed();
    let points: Vec<Vec<f64>> = futures.iter().map(|f| flatten(f)).collect();
    let dim = t_pred * 2;
    let m = points.len();

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.below(m)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.next_f64() * total;
            let mut chosen = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All points coincide with some centroid; any pick works.
            rng.below(m)
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.last().unwrap()));
        }
    }

    let mut assign = vec![usize::MAX; m];
    let mut objectives = Vec::new();
    for _ in 0..100 {
        // Assignment step.
        let mut changed = false;
        let mut objective = 0.0;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(p, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            objective += best_d;
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        objectives.push(objective);
        if !changed {
            break;
        }
        // Update step.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut stolen: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                for s in sums[c].iter_mut() {
                    *s /= counts[c] as f64;
                }
                centroids[c] = sums[c].clone();
            } else {
                // Re-seed to the point farthest from its own centroid.
                let far = points
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !stolen.contains(i))
                    .max_by(|(ia, a), (ib, b)| {
                        let da = sq_dist(a, &centroids[assign[*ia]]);
                        let db = sq_dist(b, &centroids[assign[*ib]]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .map(|(i, _)| i)
                    .expect("nonempty points");
                stolen.push(far);
                centroids[c] = points[far].clone();
            }
        }
    }

    let means: Vec<Vec<[f64; 2]>> = centroids
        .iter()
        .map(|c| c.chunks_exact(2).map(|p| [p[0], p[1]]).collect())
        .collect();
    Ok((TrajectoryClassSet { means, k, seed }, objectives))
}

/// Ground-truth class probabilities: softmax over classes of the negative
/// squared Euclidean distance between the future and each anchor, taken over
/// all `t_pred * 2` coordinates.
pub fn ground_truth_class_probs(y: &[[f64; 2]], classes: &TrajectoryClassSet) -> Vec<f64> {
    let yf = flatten(y);
    let logits: Vec<f64> = classes
        .means
        .iter()
        .map(|c| -sq_dist(&yf, &flatten(c)))
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Index of the most probable class for `y`; ties break to the lowest index.
pub fn nearest_class(y: &[[f64; 2]], classes: &TrajectoryClassSet) -> usize {
    let probs = ground_truth_class_probs(y, classes);
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(points: &[(f64, f64)]) -> Vec<[f64; 2]> {
        points.iter().map(|&(x, y)| [x, y]).collect()
    }

    fn line(t_pred: usize, vx: f64, vy: f64, offset: f64) -> Vec<[f64; 2]> {
        (0..t_pred)
            .map(|t| [offset + vx * t as f64, offset + vy * t as f64])
            .collect()
    }

    #[test]
    fn degenerate_m_equals_k_recovers_points() {
        let futures = vec![
            line(12, 0.5, 0.0, 0.0),
            line(12, 0.0, 0.5, 10.0),
            line(12, -0.5, 0.0, -10.0),
        ];
        let set = fit_classes(&futures, 3, &mut Rng::seed_from(2)).unwrap();
        // Each future must be one of the centroids, within 1e-9.
        for f in &futures {
            let found = set.means.iter().any(|m| {
                m.iter()
                    .zip(f)
                    .all(|(a, b)| (a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9)
            });
            assert!(found);
        }
    }

    #[test]
    fn two_blobs_recover_blob_means() {
        let mut rng = Rng::seed_from(8);
        let mut futures = Vec::new();
        let mut blob_sums = [vec![0.0; 24], vec![0.0; 24]];
        for blob in 0..2 {
            let center = if blob == 0 { -20.0 } else { 20.0 };
            for _ in 0..40 {
                let f: Vec<[f64; 2]> = (0..12)
                    .map(|t| {
                        [
                            center + 0.3 * t as f64 + rng.uniform(-0.5, 0.5),
                            center + rng.uniform(-0.5, 0.5),
                        ]
                    })
                    .collect();
                for (i, p) in f.iter().enumerate() {
                    blob_sums[blob][2 * i] += p[0];
                    blob_sums[blob][2 * i + 1] += p[1];
                }
                futures.push(f);
            }
        }
        // Oracle: closed-form blob means.
        for s in blob_sums.iter_mut() {
            for v in s.iter_mut() {
                *v /= 40.0;
            }
        }
        let set = fit_classes(&futures, 2, &mut Rng::seed_from(3)).unwrap();
        for expect in &blob_sums {
            let matched = set.means.iter().any(|m| {
                m.iter().enumerate().all(|(i, p)| {
                    (p[0] - expect[2 * i]).abs() < 1e-6 && (p[1] - expect[2 * i + 1]).abs() < 1e-6
                })
            });
            assert!(matched);
        }
    }

    #[test]
    fn same_seed_identical_means() {
        let futures: Vec<Vec<[f64; 2]>> = (0..30)
            .map(|i| line(12, 0.1 * i as f64, 0.05 * (i % 7) as f64, i as f64))
            .collect();
        let a = fit_classes(&futures, 5, &mut Rng::seed_from(4)).unwrap();
        let b = fit_classes(&futures, 5, &mut Rng::seed_from(4)).unwrap();
        assert_eq!(a.means, b.means);
    }

    #[test]
    fn fewer_points_than_k_is_error() {
        let futures = vec![line(12, 0.1, 0.1, 0.0)];
        assert!(fit_classes(&futures, 2, &mut Rng::seed_from(1)).is_err());
    }

    #[test]
    fn objective_is_non_increasing() {
        let mut rng = Rng::seed_from(17);
        let futures: Vec<Vec<[f64; 2]>> = (0..200)
            .map(|_| {
                (0..12)
                    .map(|_| [rng.uniform(-10.0, 10.0), rng.uniform(-10.0, 10.0)])
                    .collect()
            })
            .collect();
        let (_, objectives) = fit_classes_traced(&futures, 8, &mut Rng::seed_from(18)).unwrap();
        assert!(objectives.len() >= 2);
        for pair in objectives.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "{pair:?}");
        }
    }

    #[test]
    fn means_are_pairwise_distinct() {
        let mut rng = Rng::seed_from(21);
        let futures: Vec<Vec<[f64; 2]>> = (0..100)
            .map(|_| {
                (0..12)
                    .map(|_| [rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0)])
                    .collect()
            })
            .collect();
        let set = fit_classes(&futures, 10, &mut Rng::seed_from(22)).unwrap();
        for i in 0..set.k {
            for j in i + 1..set.k {
                assert_ne!(set.means[i], set.means[j], "clusters {i} and {j} collide");
            }
        }
    }

    #[test]
    fn gcp_uniform_when_equidistant() {
        let classes = TrajectoryClassSet {
            means: vec![traj(&[(1.0, 0.0)]), traj(&[(-1.0, 0.0)]), traj(&[(0.0, 1.0)])],
            k: 3,
            seed: 0,
        };
        // Origin is equidistant from all three anchors.
        let probs = ground_truth_class_probs(&traj(&[(0.0, 0.0)]), &classes);
        for p in &probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gcp_dominant_when_on_anchor() {
        let classes = TrajectoryClassSet {
            means: vec![traj(&[(0.0, 0.0)]), traj(&[(10.0, 0.0)]), traj(&[(0.0, 10.0)])],
            k: 3,
            seed: 0,
        };
        let probs = ground_truth_class_probs(&traj(&[(0.0, 0.0)]), &classes);
        assert!(probs[0] > 0.999);
    }

    #[test]
    fn gcp_matches_scalar_softmax_oracle() {
        // Distances 0, 1, 2 => logits 0, -1, -4.
        let classes = TrajectoryClassSet {
            means: vec![traj(&[(0.0, 0.0)]), traj(&[(1.0, 0.0)]), traj(&[(2.0, 0.0)])],
            k: 3,
            seed: 0,
        };
        let probs = ground_truth_class_probs(&traj(&[(0.0, 0.0)]), &classes);
        let exps = [0.0f64.exp(), (-1.0f64).exp(), (-4.0f64).exp()];
        let sum: f64 = exps.iter().sum();
        for (p, e) in probs.iter().zip(&exps) {
            assert!((p - e / sum).abs() < 1e-12);
        }
    }

    #[test]
    fn gcp_sums_to_one_and_positive() {
        // Spread kept small enough that exp of the most negative logit stays
        // representable in f64; softmax is strictly positive there.
        let mut rng = Rng::seed_from(33);
        let futures: Vec<Vec<[f64; 2]>> = (0..40)
            .map(|_| {
                (0..12)
                    .map(|_| [rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)])
                    .collect()
            })
            .collect();
        let classes = fit_classes(&futures, 6, &mut Rng::seed_from(34)).unwrap();
        for f in &futures {
            let probs = ground_truth_class_probs(f, &classes);
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(probs.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn nearest_class_examples_and_oracle() {
        let classes = TrajectoryClassSet {
            means: vec![
                traj(&[(1.0, 0.0)]),
                traj(&[(-1.0, 0.0)]),
                traj(&[(5.0, 5.0)]),
            ],
            k: 3,
            seed: 0,
        };
        // Exactly on anchor 2.
        assert_eq!(nearest_class(&traj(&[(5.0, 5.0)]), &classes), 2);
        // Symmetric tie between anchors 0 and 1 breaks low.
        assert_eq!(nearest_class(&traj(&[(0.0, 0.0)]), &classes), 0);
        // Random points agree with a brute-force distance scan.
        let mut rng = Rng::seed_from(55);
        for _ in 0..200 {
            let y = traj(&[(rng.uniform(-6.0, 6.0), rng.uniform(-6.0, 6.0))]);
            let got = nearest_class(&y, &classes);
            let dists: Vec<f64> = classes
                .means
                .iter()
                .map(|m| (y[0][0] - m[0][0]).powi(2) + (y[0][1] - m[0][1]).powi(2))
                .collect();
            let mut best = 0;
            for (i, &d) in dists.iter().enumerate() {
                if d < dists[best] {
                    best = i;
                }
            }
            assert_eq!(got, best);
            // argmax(GCP) = argmin distance.
            let probs = ground_truth_class_probs(&y, &classes);
            let mut pbest = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[pbest] {
                    pbest = i;
                }
            }
            assert_eq!(pbest, best);
        }
    }

    #[test]
    fn scaling_preserves_argmax() {
        let mut rng = Rng::seed_from(66);
        let futures: Vec<Vec<[f64; 2]>> = (0..30)
            .map(|_| {
                (0..6)
                    .map(|_| [rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0)])
                    .collect()
            })
            .collect();
        let classes = fit_classes(&futures, 4, &mut Rng::seed_from(67)).unwrap();
        let scaled = TrajectoryClassSet {
            means: classes
                .means
                .iter()
                .map(|m| m.iter().map(|p| [p[0] * 3.0, p[1] * 3.0]).collect())
                .collect(),
            k: classes.k,
            seed: classes.seed,
        };
        for f in &futures {
            let fs: Vec<[f64; 2]> = f.iter().map(|p| [p[0] * 3.0, p[1] * 3.0]).collect();
            assert_eq!(nearest_class(f, &classes), nearest_class(&fs, &scaled));
        }
    }
}
