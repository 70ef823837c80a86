//! Kernel proxies: kernel functions, Nyström feature maps and proxy inner
//! problems over the mapped features. Precomputed Gram matrices can be read
//! from a small binary format so externally computed kernels plug in.
//!
//! Gram file layout (all little-endian): 8 magic bytes `GRAMF64\0`, the
//! order `n` as `u64`, then `n²` `f64` entries in row-major order.

use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::WeightedDataset;
use crate::error::{invalid, Error, Result};
use crate::models::{InnerProblem, ModelSpec};

pub const GRAM_MAGIC: [u8; 8] = *b"GRAMF64\0";
/// Eigenvalues of the landmark Gram matrix at or below this are dropped.
pub const DEFAULT_EIG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `exp(−γ‖x − y‖²)`
    Rbf { gamma: f64 },
    /// `xᵀy`
    Linear,
    /// `(xᵀy + coef)^degree`
    Polynomial { degree: u32, coef: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Rbf { gamma } if !(gamma > 0.0) => invalid("RBF bandwidth must be positive"),
            KernelSpec::Polynomial { degree: 0, .. } => invalid("polynomial degree must be at least 1"),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            KernelSpec::Rbf { gamma } => (-gamma * crate::linalg::sq_dist(a, b)).exp(),
            KernelSpec::Linear => dot(a, b),
            KernelSpec::Polynomial { degree, coef } => (dot(a, b) + coef).powi(degree as i32),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `K[i][j] = κ(a_i, b_j)` for row-wise point matrices.
pub fn kernel_matrix_points(a: &DMatrix<f64>, b: &DMatrix<f64>, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if a.ncols() != b.ncols() {
        return invalid(format!("dimension mismatch: {} vs {}", a.ncols(), b.ncols()));
    }
    let at = a.transpose();
    let bt = b.transpose();
    let d = a.ncols();
    let rows: Vec<Vec<f64>> = (0..a.nrows())
        .into_par_iter()
        .map(|i| {
            let x = &at.as_slice()[i * d..(i + 1) * d];
            (0..b.nrows())
                .map(|j| spec.eval(x, &bt.as_slice()[j * d..(j + 1) * d]))
                .collect()
        })
        .collect();
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| rows[i][j]))
}

pub fn kernel_matrix(a: &WeightedDataset, b: &WeightedDataset, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    kernel_matrix_points(a.features(), b.features(), spec)
}

/// `z(x) = D^{-1/2} Uᵀ [κ(x, x_j)]_{j ∈ Q}` from the eigendecomposition
/// `K_{Q,Q} = U D Uᵀ`, keeping eigenvalues above the floor.
#[derive(Debug, Clone)]
pub struct NystromMap {
    pub landmarks: Vec<usize>,
    landmark_points: DMatrix<f64>,
    transform: DMatrix<f64>,
    pub kernel: KernelSpec,
    pub eig_floor: f64,
}

fn landmark_transform(kqq: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    let sym = (kqq + kqq.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] > floor).collect();
    if keep.is_empty() {
        return Err(Error::InvalidInput(
            "degenerate kernel: every landmark eigenvalue is below the floor".into(),
        ));
    }
    let q = kqq.nrows();
    let mut t = DMatrix::zeros(keep.len(), q);
    for (r, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        for c in 0..q {
            t[(r, c)] = eig.eigenvectors[(c, i)] / s;
        }
    }
    Ok(t)
}

impl NystromMap {
    pub fn fit_points(points: &DMatrix<f64>, landmarks: Vec<usize>, spec: KernelSpec, eig_floor: f64) -> Result<Self> {
        if landmarks.is_empty() {
            return invalid("at least one landmark is required");
        }
        if let Some(&i) = landmarks.iter().find(|&&i| i >= points.nrows()) {
            return invalid(format!("landmark {i} out of range"));
        }
        let landmark_points = points.select_rows(&landmarks);
        let kqq = kernel_matrix_points(&landmark_points, &landmark_points, &spec)?;
        Ok(Self {
            transform: landmark_transform(&kqq, eig_floor)?,
            landmarks,
            landmark_points,
            kernel: spec,
            eig_floor,
        })
    }

    /// Feature dimension after dropping small eigenvalues.
    pub fn dim(&self) -> usize {
        self.transform.nrows()
    }

    /// `n × dim` matrix of mapped points.
    pub fn features(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let k = kernel_matrix_points(points, &self.landmark_points, &self.kernel)?;
        Ok(k * self.transform.transpose())
    }

    /// Same labels and weights with mapped features.
    pub fn transform(&self, ds: &WeightedDataset) -> Result<WeightedDataset> {
        WeightedDataset::new(self.features(ds.features())?, ds.labels().clone(), ds.weights().to_vec())
    }
}

/// Kernel and landmark count for a Nyström proxy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProxyConfig {
    pub kernel: KernelSpec,
    /// Nyström landmarks, capped at the data size.
    pub landmarks: usize,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            kernel: KernelSpec::Rbf { gamma: 0.5 },
            landmarks: 100,
        }
    }
}

/// Nyström map with `q` landmarks sampled uniformly without replacement.
pub fn nystrom_fit(ds: &WeightedDataset, q: usize, spec: &KernelSpec, seed: u64) -> Result<NystromMap> {
    let n = ds.len();
    if q == 0 || q > n {
        return invalid(format!("landmark count {q} must be in 1..={n}"));
    }
    let mut landmarks = sample(&mut ChaCha8Rng::seed_from_u64(seed), n, q).into_vec();
    landmarks.sort_unstable();
    NystromMap::fit_points(ds.features(), landmarks, *spec, DEFAULT_EIG_FLOOR)
}

/// Inner problem over Nyström features of `ds`.
pub fn proxy_problem(ds: &WeightedDataset, map: &NystromMap, spec: &ModelSpec) -> Result<InnerProblem> {
    InnerProblem::new(&map.transform(ds)?, spec)
}

/// Nyström features of every point from a precomputed `n × n` Gram matrix.
pub fn nystrom_features_from_gram(gram: &DMatrix<f64>, q: usize, seed: u64, eig_floor: f64) -> Result<(Vec<usize>, DMatrix<f64>)> {
    let n = gram.nrows();
    if gram.ncols() != n {
        return invalid("Gram matrix must be square");
    }
    if q == 0 || q > n {
        return invalid(format!("landmark count {q} must be in 1..={n}"));
    }
    let mut landmarks = sample(&mut ChaCha8Rng::seed_from_u64(seed), n, q).into_vec();
    landmarks.sort_unstable();
    let kqq = gram.select_rows(&landmarks).select_columns(&landmarks);
    let t = landmark_transform(&kqq, eig_floor)?;
    let knq = gram.select_columns(&landmarks);
    Ok((landmarks, knq * t.transpose()))
}

pub fn write_gram<W: Write>(mut out: W, gram: &DMatrix<f64>) -> Result<()> {
    let n = gram.nrows();
    if gram.ncols() != n {
        return invalid("Gram matrix must be square");
    }
    out.write_all(&GRAM_MAGIC)?;
    out.write_all(&(n as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(n * n * 8);
    for i in 0..n {
        for j in 0..n {
            buf.extend_from_slice(&gram[(i, j)].to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_gram<R: Read>(mut input: R) -> Result<DMatrix<f64>> {
    let mut header = [0u8; 16];
    input.read_exact(&mut header)?;
    if header[..8] != GRAM_MAGIC {
        return invalid("not a Gram matrix file (bad magic)");
    }
    let n = u64::from_le_bytes(header[8..].try_into().expect("8 bytes")) as usize;
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != n * n * 8 {
        return invalid(format!("Gram file holds {} bytes of entries, expected {}", bytes.len(), n * n * 8));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return invalid("Gram matrix contains non-finite entries");
    }
    Ok(DMatrix::from_row_slice(n, n, &vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Labels;

    #[test]
    fn kernel_examples() {
        let x = DMatrix::<f64>::identity(2, 2);
        assert_eq!(kernel_matrix_points(&x, &x, &KernelSpec::Linear).unwrap(), x);
        let rbf = KernelSpec::Rbf { gamma: 0.5 };
        let k = kernel_matrix_points(&x, &x, &rbf).unwrap();
        assert!(k.diagonal().iter().all(|&v| v == 1.0));
        let a = DMatrix::from_row_slice(1, 1, &[0.0]);
        let b = DMatrix::from_row_slice(1, 1, &[2.0]);
        let v = kernel_matrix_points(&a, &b, &rbf).unwrap()[(0, 0)];
        assert!((v - (-2.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.1353).abs() < 1e-4);
        let poly = KernelSpec::Polynomial { degree: 2, coef: 1.0 };
        assert_eq!(poly.eval(&[1.0, 2.0], &[3.0, 1.0]), 36.0);
    }

    #[test]
    fn invalid_kernels() {
        assert!(KernelSpec::Rbf { gamma: 0.0 }.validate().is_err());
        assert!(KernelSpec::Polynomial { degree: 0, coef: 1.0 }.validate().is_err());
    }

    #[test]
    fn landmark_rows_reproduce_kernel() {
        let pts = DMatrix::from_fn(12, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        let ds = WeightedDataset::unweighted(pts.clone(), Labels::None).unwrap();
        let spec = KernelSpec::Rbf { gamma: 0.3 };
        let map = nystrom_fit(&ds, 5, &spec, 1).unwrap();
        let z = map.features(&pts).unwrap();
        let k = kernel_matrix_points(&pts, &pts, &spec).unwrap();
        for &a in &map.landmarks {
            for b in 0..12 {
                let approx = z.row(a).dot(&z.row(b));
                assert!((approx - k[(a, b)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn degenerate_kernel_errors() {
        let pts = DMatrix::zeros(4, 2);
        assert!(NystromMap::fit_points(&pts, vec![0, 1], KernelSpec::Linear, DEFAULT_EIG_FLOOR).is_err());
    }

    #[test]
    fn gram_round_trip_and_layout() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        let mut buf = Vec::new();
        write_gram(&mut buf, &g).unwrap();
        assert_eq!(buf.len(), 16 + 32);
        assert_eq!(&buf[..8], b"GRAMF64\0");
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(buf[24..32].try_into().unwrap()), 0.5);
        assert_eq!(read_gram(&buf[..]).unwrap(), g);
        assert!(read_gram(&buf[..40]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_gram(&bad[..]).is_err());
    }

    #[test]
    fn gram_features_match_point_features() {
        let pts = DMatrix::from_fn(10, 2, |i, j| (i as f64 * 0.3 + j as f64).sin());
        let spec = KernelSpec::Rbf { gamma: 1.0 };
        let k = kernel_matrix_points(&pts, &pts, &spec).unwrap();
        let (landmarks, z) = nystrom_features_from_gram(&k, 4, 3, DEFAULT_EIG_FLOOR).unwrap();
        let map = NystromMap::fit_points(&pts, landmarks, spec, DEFAULT_EIG_FLOOR).unwrap();
        let z2 = map.features(&pts).unwrap();
        assert!((&z * z.transpose() - &z2 * z2.transpose()).amax() < 1e-10);
    }
}
