use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Result of Lloyd's algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// Row-major `k x dim` centers.
    pub centers: Vec<f32>,
    pub dim: usize,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to assigned centers.
    pub inertia: f64,
    pub iterations: usize,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn center(&self, i: usize) -> &[f32] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }
}

/// k-means++ seeding followed by Lloyd iterations. Empty clusters are
/// re-seeded from the point currently farthest from its center.
/// `features` is row-major `n x dim`.
pub fn kmeans(features: &[f32], dim: usize, k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    if dim == 0 || k == 0 {
        return Err(Error::Config("k-means needs k >= 1 and dim >= 1".into()));
    }
    if features.len() % dim != 0 {
        return Err(Error::Shape(format!("{} values is not a multiple of dim {dim}", features.len())));
    }
    let n = features.len() / dim;
    if n < k {
        return Err(Error::Config(format!("k-means with k={k} needs at least {k} features, got {n}")));
    }
    let x: Vec<f64> = features.iter().map(|&v| v as f64).collect();
    let point = |i: usize| &x[i * dim..(i + 1) * dim];
    let dist2 = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum() };

    let mut r = rng::stream(seed, "kmeans++");
    let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
    let first = r.random_range(0..n);
    centers.extend_from_slice(point(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(point(i), point(first))).collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut t = r.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 && t < d {
                    chosen = i;
                    break;
                }
                t -= d;
            }
            // guard against the rounding tail landing on a zero-weight point
            if nearest[chosen] == 0.0 {
                chosen = nearest
                    .iter()
                    .enumerate()
                    .rev()
                    .find(|(_, &d)| d > 0.0)
                    .map(|(i, _)| i)
                    .unwrap_or(chosen);
            }
            chosen
        } else {
            r.random_range(0..n)
        };
        let c = point(pick).to_vec();
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist2(point(i), &c));
        }
        centers.extend_from_slice(&c);
    }

    let mut assignments = vec![usize::MAX; n];
    let mut iterations = 0;
    let mut inertia;
    loop {
        iterations += 1;
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let p = point(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..k {
                let d = dist2(p, &centers[j * dim..(j + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
            dists[i] = best_d;
        }
        inertia = dists.iter().sum();
        if !changed || iterations >= max_iters {
            break;
        }

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let a = assignments[i];
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                for t in 0..dim {
                    centers[j * dim + t] = sums[j * dim + t] / counts[j] as f64;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken[far] = true;
                centers[j * dim..(j + 1) * dim].copy_from_slice(point(far));
                dists[far] = 0.0;
            }
        }
    }

    Ok(KMeans {
        centers: centers.iter().map(|&v| v as f32).collect(),
        dim,
        assignments,
        inertia,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive optimum for 1-D two-means: best split of the sorted data.
    fn best_split_1d(xs: &[f64]) -> (f64, f64, f64) {
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for cut in 1..s.len() {
            let (l, r) = s.split_at(cut);
            let ml = l.iter().sum::<f64>() / l.len() as f64;
            let mr = r.iter().sum::<f64>() / r.len() as f64;
            let cost: f64 = l.iter().map(|v| (v - ml).powi(2)).sum::<f64>() + r.iter().map(|v| (v - mr).powi(2)).sum::<f64>();
            if cost < best.0 {
                best = (cost, ml, mr);
            }
        }
        best
    }

    #[test]
    fn two_clusters_in_one_dimension() {
        let pts = [0.0f32, 0.0, 0.0, 10.0, 10.0, 10.0];
        let (cost, lo, hi) = best_split_1d(&pts.iter().map(|&v| v as f64).collect::<Vec<_>>());
        let km = kmeans(&pts, 1, 2, 3, 100).unwrap();
        let mut c = vec![km.centers[0] as f64, km.centers[1] as f64];
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![lo, hi]);
        assert_eq!(c, vec![0.0, 10.0]);
        assert!((km.inertia - cost).abs() < 1e-12);
    }

    #[test]
    fn distinct_points_become_centers() {
        let pts = [1.0f32, 2.0, -3.0, 4.0, 0.5, 0.5, 7.0, -1.0];
        let km = kmeans(&pts, 2, 4, 9, 50).unwrap();
        assert_eq!(km.inertia, 0.0);
        let mut got: Vec<(i64, i64)> = (0..4)
            .map(|i| ((km.center(i)[0] * 10.0) as i64, (km.center(i)[1] * 10.0) as i64))
            .collect();
        got.sort();
        let mut want = vec![(10, 20), (-30, 40), (5, 5), (70, -10)];
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let pts: Vec<f32> = (0..300).map(|i| ((i * 37 % 101) as f32).sin() * 3.0).collect();
        let a = kmeans(&pts, 3, 8, 42, 30).unwrap();
        let b = kmeans(&pts, 3, 8, 42, 30).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_features_is_rejected() {
        assert!(matches!(kmeans(&[1.0, 2.0], 1, 3, 0, 10), Err(Error::Config(_))));
    }

    #[test]
    fn empty_clusters_are_reseeded() {
        // Duplicated points make k-means++ fall back to random picks; every
        // center must still end up owning at least one point.
        let pts = [0.0f32, 0.0, 0.0, 0.0, 5.0, 5.0, 9.0];
        let km = kmeans(&pts, 1, 3, 1, 50).unwrap();
        for j in 0..3 {
            assert!(km.assignments.contains(&j), "cluster {j} empty: {km:?}");
        }
    }
}
