//! Gaussian mixture negative log-likelihood in an unconstrained
//! parameterization, with a weighted EM solver.
//!
//! Parameter layout: `k` mixture logits, then `k` means of length `d`, then
//! `k` lower-triangular Cholesky factors of the covariances, each stored row
//! by row (`(0,0), (1,0), (1,1), (2,0), ...`).

use nalgebra::{DMatrix, DVector};
use num_dual::{Dual64, DualNum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::linalg::sq_dist;

/// Added to every covariance estimate.
pub const COVARIANCE_FLOOR: f64 = 1e-6;
const MAX_REINITS: usize = 3;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
pub struct Gmm {
    points: DMatrix<f64>,
    components: usize,
}

/// Mixture weights, means and covariance Cholesky factors.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub chol: Vec<DMatrix<f64>>,
}

fn tri(d: usize) -> usize {
    d * (d + 1) / 2
}

fn tri_index(a: usize, b: usize) -> usize {
    a * (a + 1) / 2 + b
}

impl GmmParams {
    pub fn to_theta(&self) -> DVector<f64> {
        let k = self.weights.len();
        let d = self.means[0].len();
        let mut theta = DVector::zeros(k * (1 + d + tri(d)));
        for j in 0..k {
            theta[j] = self.weights[j].max(1e-300).ln();
            for a in 0..d {
                theta[k + j * d + a] = self.means[j][a];
                for b in 0..=a {
                    theta[k + k * d + j * tri(d) + tri_index(a, b)] = self.chol[j][(a, b)];
                }
            }
        }
        theta
    }

    pub fn from_theta(theta: &DVector<f64>, k: usize, d: usize) -> Self {
        let logits = &theta.as_slice()[..k];
        let lse = crate::linalg::log_sum_exp(logits);
        let weights = logits.iter().map(|l| (l - lse).exp()).collect();
        let means = (0..k)
            .map(|j| DVector::from_column_slice(&theta.as_slice()[k + j * d..k + (j + 1) * d]))
            .collect();
        let chol = (0..k)
            .map(|j| {
                let off = k + k * d + j * tri(d);
                DMatrix::from_fn(d, d, |a, b| if b <= a { theta[off + tri_index(a, b)] } else { 0.0 })
            })
            .collect();
        Self {
            weights,
            means,
            chol,
        }
    }

    pub fn covariances(&self) -> Vec<DMatrix<f64>> {
        self.chol.iter().map(|l| l * l.transpose()).collect()
    }
}

/// Loss of one point and optionally its gradient, generic over the scalar so
/// that a dual-number pass yields Hessian-vector products.
fn point_loss_grad<D: DualNum<Primitive = f64> + Copy>(
    theta: &[D],
    x: &[f64],
    k: usize,
    d: usize,
    grad: Option<&mut [D]>,
) -> D {
    let t = tri(d);
    let mean_off = k;
    let chol_off = k + k * d;
    let lse_logits = {
        let m = theta[..k].iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
        let s: D = theta[..k].iter().map(|&l| (l - m).exp()).sum();
        s.ln() + m
    };
    let mut zs = vec![D::from(0.0); k * d];
    let mut scores = vec![D::from(0.0); k];
    for j in 0..k {
        let l = &theta[chol_off + j * t..chol_off + (j + 1) * t];
        let z = &mut zs[j * d..(j + 1) * d];
        let mut log_det = D::from(0.0);
        for a in 0..d {
            let mut acc = D::from(x[a]) - theta[mean_off + j * d + a];
            for b in 0..a {
                acc -= l[tri_index(a, b)] * z[b];
            }
            let diag = l[tri_index(a, a)];
            z[a] = acc / diag;
            log_det += diag.abs().ln();
        }
        let sq: D = z.iter().map(|&v| v * v).sum();
        scores[j] = theta[j] - lse_logits - log_det - sq * 0.5 - 0.5 * d as f64 * LN_2PI;
    }
    let m = scores.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
    let total: D = scores.iter().map(|&s| (s - m).exp()).sum();
    let lse = total.ln() + m;
    if let Some(g) = grad {
        for j in 0..k {
            let r = (scores[j] - lse).exp();
            let pi = (theta[j] - lse_logits).exp();
            g[j] = pi - r;
            let l = &theta[chol_off + j * t..chol_off + (j + 1) * t];
            let z = &zs[j * d..(j + 1) * d];
            let mut u = vec![D::from(0.0); d];
            for a in (0..d).rev() {
                let mut acc = z[a];
                for b in a + 1..d {
                    acc -= l[tri_index(b, a)] * u[b];
                }
                u[a] = acc / l[tri_index(a, a)];
            }
            for a in 0..d {
                g[mean_off + j * d + a] = -(r * u[a]);
                for b in 0..=a {
                    let mut v = u[a] * z[b];
                    if a == b {
                        v -= l[tri_index(a, a)].recip();
                    }
                    g[chol_off + j * t + tri_index(a, b)] = -(r * v);
                }
            }
        }
    }
    -lse
}

impl Gmm {
    /// `features` is `n × d`.
    pub fn new(features: &DMatrix<f64>, components: usize) -> Result<Self> {
        if components == 0 {
            return invalid("a mixture needs at least one component");
        }
        if features.ncols() == 0 {
            return invalid("mixture data must have at least one feature");
        }
        Ok(Self {
            points: features.transpose(),
            components,
        })
    }

    /// The points in `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Gmm {
        Gmm {
            points: self.points.select_columns(idx),
            components: self.components,
        }
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn data_dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        let d = self.data_dim();
        self.components * (1 + d + tri(d))
    }

    fn point(&self, i: usize) -> &[f64] {
        let d = self.data_dim();
        &self.points.as_slice()[i * d..(i + 1) * d]
    }

    pub fn losses(&self, theta: &DVector<f64>) -> Vec<f64> {
        let (k, d) = (self.components, self.data_dim());
        (0..self.len())
            .map(|i| point_loss_grad::<f64>(theta.as_slice(), self.point(i), k, d, None))
            .collect()
    }

    fn point_grad(&self, theta: &DVector<f64>, i: usize, out: &mut [f64]) {
        point_loss_grad::<f64>(theta.as_slice(), self.point(i), self.components, self.data_dim(), Some(out));
    }

    pub fn weighted_grad(&self, theta: &DVector<f64>, w: &[f64]) -> DVector<f64> {
        let mut total = DVector::zeros(self.dim());
        let mut g = vec![0.0; self.dim()];
        for (i, &wi) in w.iter().enumerate() {
            if wi != 0.0 {
                self.point_grad(theta, i, &mut g);
                for (t, gi) in total.iter_mut().zip(&g) {
                    *t += wi * gi;
                }
            }
        }
        total
    }

    pub fn grad_dots(&self, theta: &DVector<f64>, u: &DVector<f64>) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        (0..self.len())
            .map(|i| {
                self.point_grad(theta, i, &mut g);
                g.iter().zip(u.iter()).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    pub fn per_point_grads(&self, theta: &DVector<f64>, idx: &[usize]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(idx.len(), self.dim());
        let mut g = vec![0.0; self.dim()];
        for (row, &i) in idx.iter().enumerate() {
            self.point_grad(theta, i, &mut g);
            for (c, v) in g.iter().enumerate() {
                out[(row, c)] = *v;
            }
        }
        out
    }

    /// Exact `Σ w_i ∇²ℓ_i v` by forward-mode differentiation of the gradient.
    pub fn hvp(&self, theta: &DVector<f64>, w: &[f64], v: &DVector<f64>) -> DVector<f64> {
        let (k, d) = (self.components, self.data_dim());
        let dual: Vec<Dual64> = theta.iter().zip(v.iter()).map(|(&t, &e)| Dual64::new(t, e)).collect();
        let mut g = vec![Dual64::from(0.0); self.dim()];
        let mut out = DVector::zeros(self.dim());
        for (i, &wi) in w.iter().enumerate() {
            if wi != 0.0 {
                point_loss_grad(&dual, self.point(i), k, d, Some(&mut g));
                for (o, gi) in out.iter_mut().zip(&g) {
                    *o += wi * gi.eps;
                }
            }
        }
        out
    }

    fn weighted_nll(&self, theta: &DVector<f64>, w: &[f64]) -> f64 {
        let (k, d) = (self.components, self.data_dim());
        w.iter()
            .enumerate()
            .filter(|(_, &wi)| wi != 0.0)
            .map(|(i, &wi)| wi * point_loss_grad::<f64>(theta.as_slice(), self.point(i), k, d, None))
            .sum()
    }

    /// Isotropic covariance with the average per-coordinate weighted variance.
    fn spread_covariance(&self, w: &[f64], total: f64) -> DMatrix<f64> {
        let d = self.data_dim();
        let mut mean = DVector::zeros(d);
        for (i, &wi) in w.iter().enumerate() {
            mean += self.points.column(i) * wi;
        }
        mean /= total;
        let mut cov = DMatrix::zeros(d, d);
        for (i, &wi) in w.iter().enumerate() {
            if wi > 0.0 {
                let e = self.points.column(i) - &mean;
                cov += &e * e.transpose() * wi;
            }
        }
        DMatrix::identity(d, d) * ((cov / total).trace() / d as f64)
    }

    /// Seeded D²-weighted choice of initial means among positive-weight
    /// points, refined by weighted Lloyd iterations; components start from
    /// their cluster's mass, mean and covariance.
    fn seed_params(&self, w: &[f64], total: f64, seed: u64) -> Result<GmmParams> {
        let (k, d) = (self.components, self.data_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let active: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 0.0).collect();
        let draw = |rng: &mut ChaCha8Rng, mass: &[f64]| -> usize {
            let s: f64 = mass.iter().sum();
            let mut u = rng.random::<f64>() * s;
            for (pos, m) in mass.iter().enumerate() {
                if u < *m {
                    return pos;
                }
                u -= m;
            }
            mass.len() - 1
        };
        let base: Vec<f64> = active.iter().map(|&i| w[i]).collect();
        let mut centers = vec![active[draw(&mut rng, &base)]];
        let mut dist: Vec<f64> = active
            .iter()
            .map(|&i| sq_dist(self.point(i), self.point(centers[0])))
            .collect();
        while centers.len() < k {
            let mass: Vec<f64> = base.iter().zip(&dist).map(|(b, d)| b * d).collect();
            let pick = if mass.iter().sum::<f64>() > 0.0 {
                draw(&mut rng, &mass)
            } else {
                draw(&mut rng, &base)
            };
            let c = active[pick];
            centers.push(c);
            for (dd, &i) in dist.iter_mut().zip(&active) {
                *dd = dd.min(sq_dist(self.point(i), self.point(c)));
            }
        }
        let pts: Vec<Vec<f64>> = active.iter().map(|&i| self.point(i).to_vec()).collect();
        let (centers, assign) =
            crate::baselines::lloyd(&pts, &base, centers.iter().map(|&c| self.point(c).to_vec()).collect());
        let spread = self.spread_covariance(w, total) + DMatrix::identity(d, d) * COVARIANCE_FLOOR;
        let mut params = GmmParams {
            weights: vec![0.0; k],
            means: centers.iter().map(|c| DVector::from_column_slice(c)).collect(),
            chol: Vec::with_capacity(k),
        };
        for j in 0..k {
            let members: Vec<usize> = (0..active.len()).filter(|&a| assign[a] == j).collect();
            let mass: f64 = members.iter().map(|&a| base[a]).sum();
            params.weights[j] = mass.max(total / active.len() as f64) / total;
            let cov = if members.len() > d {
                let mut cov = DMatrix::identity(d, d) * COVARIANCE_FLOOR;
                for &a in &members {
                    let e = DVector::from_column_slice(&pts[a]) - &params.means[j];
                    cov += &e * e.transpose() * (base[a] / mass);
                }
                cov
            } else {
                spread.clone()
            };
            params.chol.push(crate::linalg::cholesky(cov, "initial mixture covariance")?.l());
        }
        let s: f64 = params.weights.iter().sum();
        params.weights.iter_mut().for_each(|p| *p /= s);
        Ok(params)
    }

    /// Weighted EM from `init` (or a seeded initialization). Stops when the
    /// change in weighted NLL is at most `tolerance · max(1, |NLL|)`.
    pub fn em_fit(
        &self,
        w: &[f64],
        init: Option<&DVector<f64>>,
        max_iters: usize,
        tolerance: f64,
        seed: u64,
    ) -> Result<(DVector<f64>, bool, usize)> {
        let (k, d, n) = (self.components, self.data_dim(), self.len());
        if w.len() != n {
            return invalid(format!("{} weights for {n} points", w.len()));
        }
        if w.iter().any(|&v| v < 0.0) {
            return invalid("mixture weights must be nonnegative");
        }
        let total: f64 = w.iter().sum();
        if !(total > 0.0) {
            return invalid("mixture fit needs positive total weight");
        }
        let mut params = match init {
            Some(t) => GmmParams::from_theta(t, k, d),
            None => self.seed_params(w, total, seed)?,
        };
        let global_cov = self.spread_covariance(w, total) + DMatrix::identity(d, d) * COVARIANCE_FLOOR;
        let mut theta = params.to_theta();
        let mut nll = self.weighted_nll(&theta, w);
        let mut reinits = 0;
        let mut resp = DMatrix::zeros(k, n);
        for iter in 1..=max_iters {
            for i in 0..n {
                if w[i] == 0.0 {
                    continue;
                }
                let mut logp = vec![0.0; k];
                for j in 0..k {
                    logp[j] = component_log_density(&params, j, self.point(i));
                }
                let lse = crate::linalg::log_sum_exp(&logp);
                for j in 0..k {
                    resp[(j, i)] = w[i] * (logp[j] - lse).exp();
                }
            }
            for j in 0..k {
                let mass: f64 = resp.row(j).sum();
                if !(mass > 1e-12 * total) {
                    reinits += 1;
                    if reinits > MAX_REINITS {
                        return Err(Error::ComponentCollapse {
                            component: j,
                            reinits: MAX_REINITS,
                        });
                    }
                    let losses = self.losses(&theta);
                    let worst = (0..n)
                        .filter(|&i| w[i] > 0.0)
                        .max_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(b.cmp(&a)))
                        .expect("positive total weight");
                    params.means[j] = self.points.column(worst).into_owned();
                    params.chol[j] = crate::linalg::cholesky(global_cov.clone(), "mixture covariance")?.l();
                    params.weights[j] = 1.0 / k as f64;
                    continue;
                }
                let mut mean = DVector::zeros(d);
                for i in 0..n {
                    if resp[(j, i)] != 0.0 {
                        mean += self.points.column(i) * resp[(j, i)];
                    }
                }
                mean /= mass;
                let mut cov = DMatrix::identity(d, d) * COVARIANCE_FLOOR;
                for i in 0..n {
                    let r = resp[(j, i)];
                    if r != 0.0 {
                        let e = self.points.column(i) - &mean;
                        cov += &e * e.transpose() * (r / mass);
                    }
                }
                params.weights[j] = mass / total;
                params.means[j] = mean;
                params.chol[j] = crate::linalg::cholesky(cov, "mixture covariance")?.l();
            }
            let s: f64 = params.weights.iter().sum();
            params.weights.iter_mut().for_each(|p| *p /= s);
            theta = params.to_theta();
            let next = self.weighted_nll(&theta, w);
            let change = (nll - next).abs();
            nll = next;
            if change <= tolerance * nll.abs().max(1.0) {
                return Ok((theta, true, iter));
            }
        }
        Ok((theta, false, max_iters))
    }
}

fn component_log_density(p: &GmmParams, j: usize, x: &[f64]) -> f64 {
    let d = x.len();
    let l = &p.chol[j];
    let mut z = vec![0.0; d];
    let mut log_det = 0.0;
    for a in 0..d {
        let mut acc = x[a] - p.means[j][a];
        for b in 0..a {
            acc -= l[(a, b)] * z[b];
        }
        z[a] = acc / l[(a, a)];
        log_det += l[(a, a)].abs().ln();
    }
    p.weights[j].ln() - log_det - 0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * d as f64 * LN_2PI
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_theta(k: usize, d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let params = GmmParams {
            weights: {
                let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.2).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|r| r / s).collect()
            },
            means: (0..k).map(|_| DVector::from_fn(d, |_, _| rng.random::<f64>() * 2.0 - 1.0)).collect(),
            chol: (0..k)
                .map(|_| {
                    DMatrix::from_fn(d, d, |a, b| match a.cmp(&b) {
                        std::cmp::Ordering::Equal => 0.7 + rng.random::<f64>(),
                        std::cmp::Ordering::Greater => rng.random::<f64>() * 0.6 - 0.3,
                        std::cmp::Ordering::Less => 0.0,
                    })
                })
                .collect(),
        };
        params.to_theta()
    }

    fn random_points(n: usize, d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 3.0 - 1.5)
    }

    #[test]
    fn theta_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = random_theta(3, 2, &mut rng);
        let p = GmmParams::from_theta(&theta, 3, 2);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let back = p.to_theta();
        let p2 = GmmParams::from_theta(&back, 3, 2);
        assert_eq!(p.means, p2.means);
        assert_eq!(p.chol, p2.chol);
    }

    #[test]
    fn loss_matches_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = random_theta(2, 2, &mut rng);
        let pts = random_points(4, 2, &mut rng);
        let gmm = Gmm::new(&pts, 2).unwrap();
        let p = GmmParams::from_theta(&theta, 2, 2);
        let covs = p.covariances();
        for (i, loss) in gmm.losses(&theta).iter().enumerate() {
            let x = pts.row(i).transpose();
            let mut dens = 0.0;
            for j in 0..2 {
                let e = &x - &p.means[j];
                let q = e.dot(&(covs[j].clone().try_inverse().unwrap() * &e));
                dens += p.weights[j] * (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * covs[j].determinant().sqrt());
            }
            assert!((loss + dens.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = random_theta(2, 3, &mut rng);
        let pts = random_points(6, 3, &mut rng);
        let gmm = Gmm::new(&pts, 2).unwrap();
        let w: Vec<f64> = (0..6).map(|_| rng.random::<f64>() + 0.1).collect();
        let g = gmm.weighted_grad(&theta, &w);
        let h = 1e-6;
        let mut fd = DVector::zeros(theta.len());
        for c in 0..theta.len() {
            let mut tp = theta.clone();
            tp[c] += h;
            let mut tm = theta.clone();
            tm[c] -= h;
            fd[c] = (gmm.weighted_nll(&tp, &w) - gmm.weighted_nll(&tm, &w)) / (2.0 * h);
        }
        assert!((&g - &fd).norm() <= 1e-5 * fd.norm().max(1.0), "{g} vs {fd}");
    }

    #[test]
    fn hvp_matches_gradient_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta = random_theta(2, 2, &mut rng);
        let pts = random_points(7, 2, &mut rng);
        let gmm = Gmm::new(&pts, 2).unwrap();
        let w = vec![1.0; 7];
        let v = DVector::from_fn(theta.len(), |_, _| rng.random::<f64>() - 0.5);
        let hv = gmm.hvp(&theta, &w, &v);
        let h = 1e-6;
        let fd = (gmm.weighted_grad(&(&theta + &v * h), &w) - gmm.weighted_grad(&(&theta - &v * h), &w)) / (2.0 * h);
        assert!((&hv - &fd).norm() <= 1e-6 * fd.norm().max(1.0));
    }

    #[test]
    fn single_component_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_points(30, 2, &mut rng);
        let gmm = Gmm::new(&pts, 1).unwrap();
        let w = vec![1.0; 30];
        let (theta, converged, _) = gmm.em_fit(&w, None, 100, 1e-12, 0).unwrap();
        assert!(converged);
        let p = GmmParams::from_theta(&theta, 1, 2);
        let mean = pts.row_mean().transpose();
        assert!((&p.means[0] - &mean).amax() < 1e-12);
        let centered = DMatrix::from_fn(30, 2, |i, j| pts[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / 30.0 + DMatrix::identity(2, 2) * COVARIANCE_FLOOR;
        assert!((&p.covariances()[0] - cov).amax() < 1e-12);
    }

    #[test]
    fn em_is_monotone_and_separates_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts = DMatrix::from_fn(60, 2, |i, j| {
            let c = if i % 2 == 0 { 10.0 } else { -10.0 };
            (if j == 0 { c } else { 0.0 }) + rng.random::<f64>() - 0.5
        });
        let gmm = Gmm::new(&pts, 2).unwrap();
        let w = vec![1.0; 60];
        let mut theta = None;
        let mut prev = f64::INFINITY;
        for _ in 0..20 {
            let (t, _, _) = gmm.em_fit(&w, theta.as_ref(), 1, 0.0, 9).unwrap();
            let nll = gmm.weighted_nll(&t, &w);
            assert!(nll <= prev + 1e-9 * prev.abs().max(1.0));
            prev = nll;
            theta = Some(t);
        }
        let p = GmmParams::from_theta(&theta.unwrap(), 2, 2);
        let mut xs: Vec<f64> = p.means.iter().map(|m| m[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] + 10.0).abs() < 0.5 && (xs[1] - 10.0).abs() < 0.5);
        for m in &p.means {
            assert!(m[1].abs() < 0.5);
        }
    }

    #[test]
    fn doubling_weights_keeps_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts = random_points(25, 2, &mut rng);
        let gmm = Gmm::new(&pts, 2).unwrap();
        let w: Vec<f64> = (0..25).map(|_| rng.random::<f64>() + 0.5).collect();
        let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let (a, _, _) = gmm.em_fit(&w, None, 500, 1e-12, 3).unwrap();
        let (b, _, _) = gmm.em_fit(&w2, None, 500, 1e-12, 3).unwrap();
        assert!((&a - &b).amax() < 1e-6);
        let ratio = gmm.weighted_nll(&a, &w2) / gmm.weighted_nll(&a, &w);
        assert!((ratio - 2.0).abs() < 1e-12);
    }
}
