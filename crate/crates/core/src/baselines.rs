//! Model-agnostic subset selection: uniform sampling, k-means++ centers and
//! greedy k-center, on raw features or on Nyström proxy features.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::WeightedDataset;
use crate::error::{invalid, Result};
use crate::linalg::sq_dist;
use crate::proxy::{nystrom_fit, ProxyConfig};

/// Lloyd iterations stop after this many rounds or once no center moves
/// more than `LLOYD_TOL`.
pub const LLOYD_MAX_ITERS: usize = 100;
pub const LLOYD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Uniform,
    Kmeanspp,
    Kcenter,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "space", rename_all = "snake_case")]
pub enum FeatureSpace {
    #[default]
    Raw,
    Proxy(ProxyConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub method: BaselineMethod,
    #[serde(default)]
    pub space: FeatureSpace,
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn check_size(n: usize, m: usize) -> Result<()> {
    if m > n {
        return invalid(format!("cannot select {m} of {n} points"));
    }
    Ok(())
}

fn rows(points: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..points.nrows()).map(|i| points.row(i).iter().copied().collect()).collect()
}

/// `m` distinct indices drawn uniformly without replacement.
pub fn uniform_select(ds: &WeightedDataset, m: usize, seed: u64) -> Result<Vec<usize>> {
    check_size(ds.len(), m)?;
    Ok(sample(&mut ChaCha8Rng::seed_from_u64(seed), ds.len(), m).into_vec())
}

/// D² seeding followed by weighted Lloyd iterations; returns the point
/// nearest each final center, skipping points already taken.
pub fn kmeanspp_select(ds: &WeightedDataset, m: usize, seed: u64) -> Result<Vec<usize>> {
    check_size(ds.len(), m)?;
    kmeanspp_points(&rows(ds.features()), ds.weights(), m, seed)
}

/// Farthest-point traversal from a seeded random start.
pub fn kcenter_select(ds: &WeightedDataset, m: usize, seed: u64) -> Result<Vec<usize>> {
    check_size(ds.len(), m)?;
    Ok(kcenter_points(&rows(ds.features()), m, seed))
}

/// Largest distance from a point to its nearest chosen center.
pub fn covering_radius(points: &DMatrix<f64>, centers: &[usize]) -> f64 {
    let pts = rows(points);
    nearest_sq(&pts, centers).into_iter().fold(0.0, f64::max).sqrt()
}

fn nearest_sq(pts: &[Vec<f64>], centers: &[usize]) -> Vec<f64> {
    pts.par_iter()
        .map(|p| centers.iter().map(|&c| sq_dist(p, &pts[c])).fold(f64::INFINITY, f64::min))
        .collect()
}

fn kcenter_points(pts: &[Vec<f64>], m: usize, seed: u64) -> Vec<usize> {
    let n = pts.len();
    if m == 0 {
        return Vec::new();
    }
    let mut chosen = vec![ChaCha8Rng::seed_from_u64(seed).random_range(0..n)];
    let mut dist: Vec<f64> = pts.par_iter().map(|p| sq_dist(p, &pts[chosen[0]])).collect();
    while chosen.len() < m {
        let next = (0..n)
            .filter(|i| !chosen.contains(i))
            .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
            .expect("fewer centers than points");
        chosen.push(next);
        let c = &pts[next];
        dist.par_iter_mut().zip(pts.par_iter()).for_each(|(d, p)| *d = d.min(sq_dist(p, c)));
    }
    chosen
}

fn kmeanspp_points(pts: &[Vec<f64>], mass: &[f64], m: usize, seed: u64) -> Result<Vec<usize>> {
    let n = pts.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = pts.par_iter().map(|p| sq_dist(p, &pts[seeds[0]])).collect();
    while seeds.len() < m {
        let total: f64 = dist.iter().zip(mass).map(|(d, w)| d * w).sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for i in 0..n {
                u -= dist[i] * mass[i];
                if u <= 0.0 && dist[i] * mass[i] > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| (0..n).rev().find(|&i| dist[i] * mass[i] > 0.0).expect("positive total"))
        } else {
            // all remaining points coincide with a seed
            (0..n).find(|i| !seeds.contains(i)).expect("fewer seeds than points")
        };
        seeds.push(next);
        let c = &pts[next];
        dist.par_iter_mut().zip(pts.par_iter()).for_each(|(d, p)| *d = d.min(sq_dist(p, c)));
    }

    let centers = lloyd(pts, mass, seeds.iter().map(|&i| pts[i].clone()).collect()).0;

    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(m);
    for c in &centers {
        let best = (0..n)
            .filter(|&i| !taken[i])
            .min_by(|&a, &b| sq_dist(&pts[a], c).total_cmp(&sq_dist(&pts[b], c)))
            .expect("fewer centers than points");
        taken[best] = true;
        out.push(best);
    }
    Ok(out)
}

/// Weighted Lloyd iterations from `centers`; returns the final centers and
/// the nearest-center assignment of every point.
pub(crate) fn lloyd(pts: &[Vec<f64>], mass: &[f64], mut centers: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<usize>) {
    let m = centers.len();
    let dim = pts.first().map_or(0, |p| p.len());
    let nearest = |centers: &[Vec<f64>]| -> Vec<usize> {
        pts.par_iter()
            .map(|p| {
                (0..m)
                    .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                    .expect("m > 0")
            })
            .collect()
    };
    for _ in 0..LLOYD_MAX_ITERS {
        let assign = nearest(&centers);
        let mut sums = vec![vec![0.0; dim]; m];
        let mut masses = vec![0.0; m];
        for (i, &a) in assign.iter().enumerate() {
            masses[a] += mass[i];
            for (s, x) in sums[a].iter_mut().zip(&pts[i]) {
                *s += mass[i] * x;
            }
        }
        let mut moved: f64 = 0.0;
        for k in 0..m {
            if masses[k] > 0.0 {
                let new: Vec<f64> = sums[k].iter().map(|s| s / masses[k]).collect();
                moved = moved.max(sq_dist(&new, &centers[k]).sqrt());
                centers[k] = new;
            }
        }
        if moved <= LLOYD_TOL {
            break;
        }
    }
    let assign = nearest(&centers);
    (centers, assign)
}

/// Runs a baseline in its feature space.
pub fn run_baseline(ds: &WeightedDataset, spec: &BaselineSpec) -> Result<Vec<usize>> {
    let ds = match spec.space {
        FeatureSpace::Raw => ds.clone(),
        FeatureSpace::Proxy(proxy) => {
            let q = proxy.landmarks.min(ds.len());
            nystrom_fit(ds, q, &proxy.kernel, spec.seed)?.transform(ds)?
        }
    };
    match spec.method {
        BaselineMethod::Uniform => uniform_select(&ds, spec.size, spec.seed),
        BaselineMethod::Kmeanspp => kmeanspp_select(&ds, spec.size, spec.seed),
        BaselineMethod::Kcenter => kcenter_select(&ds, spec.size, spec.seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Labels;

    fn dataset(points: &[[f64; 2]]) -> WeightedDataset {
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        WeightedDataset::unweighted(DMatrix::from_row_slice(points.len(), 2, &flat), Labels::None).unwrap()
    }

    fn two_clusters() -> WeightedDataset {
        let mut pts = Vec::new();
        for i in 0..10 {
            let t = i as f64 * 0.05;
            pts.push([t, -t]);
            pts.push([100.0 + t, 100.0 + t]);
        }
        dataset(&pts)
    }

    #[test]
    fn uniform_full_size_is_permutation() {
        let ds = two_clusters();
        let mut idx = uniform_select(&ds, 20, 3).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
        assert_eq!(uniform_select(&ds, 5, 9).unwrap(), uniform_select(&ds, 5, 9).unwrap());
    }

    #[test]
    fn uniform_inclusion_chi_square() {
        let ds = dataset(&[[0.0, 0.0]; 20]);
        let draws = 10_000;
        let mut counts = [0usize; 20];
        for seed in 0..draws {
            for i in uniform_select(&ds, 5, seed).unwrap() {
                counts[i] += 1;
            }
        }
        let expected = draws as f64 * 5.0 / 20.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 0.999 quantile of chi-square with 19 degrees of freedom
        assert!(chi2 < 43.82, "chi2 = {chi2}");
    }

    #[test]
    fn one_index_per_cluster() {
        let ds = two_clusters();
        for seed in 0..5 {
            for idx in [kmeanspp_select(&ds, 2, seed).unwrap(), kcenter_select(&ds, 2, seed).unwrap()] {
                let sides: Vec<bool> = idx.iter().map(|&i| ds.features()[(i, 0)] > 50.0).collect();
                assert_ne!(sides[0], sides[1]);
            }
        }
    }

    #[test]
    fn kmeans_picks_medoid_like_points() {
        let ds = dataset(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [50.0, 0.0], [51.0, 0.0], [52.0, 0.0]]);
        let mut idx = kmeanspp_select(&ds, 2, 1).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, vec![1, 4]);
    }

    #[test]
    fn kcenter_radius_non_increasing() {
        let pts: Vec<[f64; 2]> = (0..40).map(|i| [(i as f64 * 0.7).sin() * 5.0, (i as f64 * 1.3).cos() * 3.0]).collect();
        let ds = dataset(&pts);
        let full = kcenter_select(&ds, 40, 4).unwrap();
        let mut last = f64::INFINITY;
        for m in 1..=40 {
            let r = covering_radius(ds.features(), &full[..m]);
            assert!(r <= last + 1e-12);
            last = r;
        }
        assert_eq!(last, 0.0);
    }

    #[test]
    fn kcenter_two_approximation() {
        let ds = dataset(&[[0.0, 0.0], [1.0, 0.5], [4.0, 4.0], [5.0, 3.0], [-3.0, 6.0], [9.0, -1.0], [2.0, 8.0]]);
        for m in 1..=6 {
            let mut best = f64::INFINITY;
            for mask in 0u32..(1 << 7) {
                if mask.count_ones() as usize == m {
                    let centers: Vec<usize> = (0..7).filter(|i| mask >> i & 1 == 1).collect();
                    best = best.min(covering_radius(ds.features(), &centers));
                }
            }
            for seed in 0..7 {
                let r = covering_radius(ds.features(), &kcenter_select(&ds, m, seed).unwrap());
                assert!(r <= 2.0 * best + 1e-12, "m = {m}: {r} vs optimum {best}");
            }
        }
    }

    #[test]
    fn oversized_request_fails() {
        assert!(kcenter_select(&two_clusters(), 21, 0).is_err());
    }

    #[test]
    fn proxy_space_runs() {
        let spec = BaselineSpec {
            method: BaselineMethod::Kmeanspp,
            space: FeatureSpace::Proxy(ProxyConfig::default()),
            size: 4,
            seed: 2,
        };
        let idx = run_baseline(&two_clusters(), &spec).unwrap();
        assert_eq!(idx.len(), 4);
    }
}
