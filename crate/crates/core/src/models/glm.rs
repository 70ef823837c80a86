//! Generalized linear losses: squared error, binary logistic and softmax
//! cross-entropy, all over a shared (optionally intercept-augmented) design.

use nalgebra::{DMatrix, DMatrixView, DVector};

use crate::data::{Labels, WeightedDataset};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GlmKind {
    /// `ℓ = (xᵀθ − y)²`
    Ridge,
    /// `ℓ = log(1 + e^{xᵀθ}) − y·xᵀθ`, `y ∈ [0, 1]`
    Binary,
    /// Cross-entropy of `softmax(Θᵀx)` against a (soft) label distribution.
    Multiclass { classes: usize },
}

/// Points are stored transposed (`p × n`) so each point is a contiguous
/// column; targets are `1 × n` for scalar kinds and `c × n` for softmax.
#[derive(Debug, Clone)]
pub struct Glm {
    kind: GlmKind,
    xt: DMatrix<f64>,
    targets: DMatrix<f64>,
    intercept: bool,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(col: &mut [f64]) {
    let m = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in col.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in col.iter_mut() {
        *v /= s;
    }
}

/// Design matrix transposed, with a trailing row of ones for the intercept.
pub(crate) fn design(features: &DMatrix<f64>, intercept: bool) -> DMatrix<f64> {
    let (n, d) = features.shape();
    let p = d + usize::from(intercept);
    let mut xt = DMatrix::zeros(p, n);
    xt.rows_mut(0, d).copy_from(&features.transpose());
    if intercept {
        xt.row_mut(d).fill(1.0);
    }
    xt
}

impl Glm {
    pub fn new(ds: &WeightedDataset, kind: GlmKind, intercept: bool) -> Result<Self> {
        let n = ds.len();
        let targets = match (kind, ds.labels()) {
            (GlmKind::Ridge, Labels::Real(y)) => DMatrix::from_row_slice(1, n, y),
            (GlmKind::Ridge, Labels::Class(y)) => {
                DMatrix::from_iterator(1, n, y.iter().map(|&c| c as f64))
            }
            (GlmKind::Binary, Labels::Class(y)) => {
                if y.iter().any(|&c| c > 1) {
                    return invalid("binary logistic needs class labels in {0, 1}");
                }
                DMatrix::from_iterator(1, n, y.iter().map(|&c| c as f64))
            }
            (GlmKind::Binary, Labels::Real(y)) => {
                if y.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return invalid("binary logistic targets must lie in [0, 1]");
                }
                DMatrix::from_row_slice(1, n, y)
            }
            (GlmKind::Multiclass { classes }, Labels::Class(y)) => {
                if classes < 2 {
                    return invalid("multiclass logistic needs at least 2 classes");
                }
                if let Some(&c) = y.iter().find(|&&c| c >= classes) {
                    return invalid(format!("class id {c} out of range for {classes} classes"));
                }
                let mut t = DMatrix::zeros(classes, n);
                for (i, &c) in y.iter().enumerate() {
                    t[(c, i)] = 1.0;
                }
                t
            }
            (GlmKind::Multiclass { classes }, Labels::Soft(m)) => {
                if m.ncols() != classes {
                    return invalid(format!(
                        "soft labels have {} columns, expected {classes}",
                        m.ncols()
                    ));
                }
                m.transpose()
            }
            (kind, labels) => {
                return invalid(format!(
                    "labels of kind {} are not usable with {kind:?}",
                    match labels {
                        Labels::None => "none",
                        Labels::Class(_) => "class",
                        Labels::Real(_) => "real",
                        Labels::Soft(_) => "soft",
                    }
                ))
            }
        };
        Ok(Self {
            kind,
            xt: design(ds.features(), intercept),
            targets,
            intercept,
        })
    }

    /// The points in `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Glm {
        Glm {
            kind: self.kind,
            xt: self.xt.select_columns(idx),
            targets: self.targets.select_columns(idx),
            intercept: self.intercept,
        }
    }

    pub fn kind(&self) -> GlmKind {
        self.kind
    }

    pub fn intercept(&self) -> bool {
        self.intercept
    }

    pub fn len(&self) -> usize {
        self.xt.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Width of the augmented design (features plus intercept).
    pub fn width(&self) -> usize {
        self.xt.nrows()
    }

    fn outputs(&self) -> usize {
        match self.kind {
            GlmKind::Multiclass { classes } => classes,
            _ => 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.width() * self.outputs()
    }

    pub fn design_t(&self) -> &DMatrix<f64> {
        &self.xt
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.targets
    }

    /// Parameters viewed as the `outputs × width` matrix `Θᵀ`; the flat
    /// vector is `Θ` (width × outputs) in row-major order.
    fn theta_t<'a>(&self, theta: &'a DVector<f64>) -> DMatrixView<'a, f64> {
        DMatrixView::from_slice(theta.as_slice(), self.outputs(), self.width())
    }

    /// Linear predictor, `outputs × n`.
    pub fn scores(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        self.theta_t(theta) * &self.xt
    }

    /// Mean prediction per point: `xᵀθ` (ridge), `σ(xᵀθ)` (binary) or the
    /// softmax column (multiclass).
    pub fn predict(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut s = self.scores(theta);
        match self.kind {
            GlmKind::Ridge => {}
            GlmKind::Binary => s.apply(|v| *v = sigmoid(*v)),
            GlmKind::Multiclass { .. } => {
                for mut col in s.column_iter_mut() {
                    softmax_in_place(col.as_mut_slice());
                }
            }
        }
        s
    }

    pub fn losses(&self, theta: &DVector<f64>) -> Vec<f64> {
        let s = self.scores(theta);
        match self.kind {
            GlmKind::Ridge => s
                .iter()
                .zip(self.targets.iter())
                .map(|(a, y)| (a - y) * (a - y))
                .collect(),
            GlmKind::Binary => s
                .iter()
                .zip(self.targets.iter())
                .map(|(a, y)| softplus(*a) - y * a)
                .collect(),
            GlmKind::Multiclass { .. } => s
                .column_iter()
                .zip(self.targets.column_iter())
                .map(|(a, y)| {
                    let lse = crate::linalg::log_sum_exp(a.as_slice());
                    y.iter().zip(a.iter()).map(|(yk, ak)| yk * (lse - ak)).sum()
                })
                .collect(),
        }
    }

    /// Per-point gradient factors: `∇ℓ_i = r_i ⊗ x_i` with `r` returned as
    /// `outputs × n`.
    pub fn residuals(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut r = self.predict(theta) - &self.targets;
        if self.kind == GlmKind::Ridge {
            r *= 2.0;
        }
        r
    }

    /// `Σ w_i ∇ℓ_i`.
    pub fn weighted_grad(&self, theta: &DVector<f64>, w: &[f64]) -> DVector<f64> {
        let mut r = self.residuals(theta);
        for (mut col, &wi) in r.column_iter_mut().zip(w) {
            col *= wi;
        }
        let g = r * self.xt.transpose();
        DVector::from_column_slice(g.as_slice())
    }

    /// `∇ℓ_iᵀ u` for every point.
    pub fn grad_dots(&self, theta: &DVector<f64>, u: &DVector<f64>) -> Vec<f64> {
        let r = self.residuals(theta);
        let a = self.theta_t(u) * &self.xt;
        r.column_iter()
            .zip(a.column_iter())
            .map(|(rc, ac)| rc.dot(&ac))
            .collect()
    }

    /// Rows are `∇ℓ_i` for `i` in `idx`.
    pub fn per_point_grads(&self, theta: &DVector<f64>, idx: &[usize]) -> DMatrix<f64> {
        let r = self.residuals(theta);
        let (p, c) = (self.width(), self.outputs());
        let mut out = DMatrix::zeros(idx.len(), p * c);
        for (row, &i) in idx.iter().enumerate() {
            for j in 0..p {
                for k in 0..c {
                    out[(row, j * c + k)] = self.xt[(j, i)] * r[(k, i)];
                }
            }
        }
        out
    }

    /// `Σ w_i ∇²ℓ_i v`.
    pub fn hvp(&self, theta: &DVector<f64>, w: &[f64], v: &DVector<f64>) -> DVector<f64> {
        let a = self.theta_t(v) * &self.xt;
        let b = match self.kind {
            GlmKind::Ridge => {
                let mut b = a;
                for (mut col, &wi) in b.column_iter_mut().zip(w) {
                    col *= 2.0 * wi;
                }
                b
            }
            GlmKind::Binary => {
                let p = self.predict(theta);
                let mut b = a;
                for ((mut col, &wi), pi) in b.column_iter_mut().zip(w).zip(p.iter()) {
                    col *= wi * pi * (1.0 - pi);
                }
                b
            }
            GlmKind::Multiclass { .. } => {
                let p = self.predict(theta);
                let mut b = a;
                for ((mut col, &wi), pc) in b.column_iter_mut().zip(w).zip(p.column_iter()) {
                    let pa = pc.dot(&col);
                    for (v, pk) in col.iter_mut().zip(pc.iter()) {
                        *v = wi * pk * (*v - pa);
                    }
                }
                b
            }
        };
        let h = b * self.xt.transpose();
        DVector::from_column_slice(h.as_slice())
    }

    /// Dense `Σ w_i ∇²ℓ_i`; used by the Newton solver at small dimension.
    pub fn hessian(&self, theta: &DVector<f64>, w: &[f64]) -> DMatrix<f64> {
        match self.kind {
            GlmKind::Ridge => crate::linalg::weighted_gram(&self.xt, w) * 2.0,
            GlmKind::Binary => {
                let p = self.predict(theta);
                let curv: Vec<f64> = w.iter().zip(p.iter()).map(|(wi, pi)| wi * pi * (1.0 - pi)).collect();
                crate::linalg::weighted_gram(&self.xt, &curv)
            }
            GlmKind::Multiclass { .. } => {
                let dim = self.dim();
                let mut h = DMatrix::zeros(dim, dim);
                for j in 0..dim {
                    let mut e = DVector::zeros(dim);
                    e[j] = 1.0;
                    h.set_column(j, &self.hvp(theta, w, &e));
                }
                h
            }
        }
    }
}
