//! Linear arc subspaces ("eigenarcs").
//!
//! Components are the leading right singular vectors of the mean-centered
//! data matrix, computed from the `n × n` Gram matrix so memory stays at
//! `O(n²)` rather than `O(cells²)`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::arcdata::{NormalizationSpec, NormalizedArc, ARC_CELLS};
use crate::checkpoint::{Container, TensorEntry};
use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{self, gemm, Op};
use crate::stats::median_in_place;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    /// `d × ARC_CELLS`, row-major; rows are orthonormal.
    components: Vec<f64>,
    singular_values: Vec<f64>,
}

impl PcaModel {
    /// Fit `d` components to normalized arcs.
    pub fn fit(data: &[NormalizedArc], d: usize) -> Result<Self> {
        let n = data.len();
        if n < 2 {
            return Err(Error::InsufficientData(format!("PCA needs at least 2 arcs, got {n}")));
        }
        if d > n.min(ARC_CELLS) {
            return Err(Error::Config(format!("PCA dimension {d} exceeds min(n = {n}, {ARC_CELLS})")));
        }
        let p = ARC_CELLS;
        let mut mean = vec![0.0; p];
        for x in data {
            linalg::axpy(1.0, x.as_slice(), &mut mean);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);

        let mut centered = Vec::with_capacity(n * p);
        for x in data {
            centered.extend(x.as_slice().iter().zip(&mean).map(|(v, m)| v - m));
        }

        let mut gram = vec![0.0; n * n];
        gemm(n, p, n, 1.0, &centered, Op::N, &centered, Op::T, 0.0, &mut gram);
        // symmetrize against rounding
        for i in 0..n {
            for j in 0..i {
                let s = 0.5 * (gram[i * n + j] + gram[j * n + i]);
                gram[i * n + j] = s;
                gram[j * n + i] = s;
            }
        }
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &gram));
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

        let s_max = eig.eigenvalues[order[0]].max(0.0).sqrt();
        let tol = (s_max * 1e-7).max(1e-12);

        let mut components = Vec::with_capacity(d * p);
        let mut singular_values = Vec::with_capacity(d);
        let mut next_basis = 0usize;
        for &idx in order.iter().take(d) {
            let s = eig.eigenvalues[idx].max(0.0).sqrt();
            let mut v = if s > tol {
                let u: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
                let mut v = linalg::matvec(n, p, &centered, Op::T, &u);
                v.iter_mut().for_each(|x| *x /= s);
                v
            } else {
                Vec::new()
            };
            let accepted = !v.is_empty() && orthonormalize_against(&mut v, &components);
            if accepted {
                singular_values.push(s);
            } else {
                // Null direction: complete the basis with standard unit vectors.
                loop {
                    assert!(next_basis < p, "basis completion exhausted");
                    let mut e = vec![0.0; p];
                    e[next_basis] = 1.0;
                    next_basis += 1;
                    if orthonormalize_against(&mut e, &components) {
                        v = e;
                        break;
                    }
                }
                singular_values.push(0.0);
            }
            fix_sign(&mut v);
            components.extend(v);
        }
        Ok(Self {
            mean,
            components,
            singular_values,
        })
    }

    pub fn dim(&self) -> usize {
        self.singular_values.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Row `j` is eigenarc `j`.
    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn component(&self, j: usize) -> &[f64] {
        &self.components[j * ARC_CELLS..(j + 1) * ARC_CELLS]
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Keep the leading `d` components.
    pub fn truncate(&self, d: usize) -> Result<Self> {
        if d > self.dim() {
            return Err(dim_mismatch(format!("<= {}", self.dim()), d));
        }
        Ok(Self {
            mean: self.mean.clone(),
            components: self.components[..d * ARC_CELLS].to_vec(),
            singular_values: self.singular_values[..d].to_vec(),
        })
    }

    pub fn encode(&self, x: &NormalizedArc) -> Vec<f64> {
        let centered: Vec<f64> = x.as_slice().iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        linalg::matvec(self.dim(), ARC_CELLS, &self.components, Op::N, &centered)
    }

    pub fn decode(&self, z: &[f64]) -> Result<NormalizedArc> {
        if z.len() != self.dim() {
            return Err(dim_mismatch(self.dim(), z.len()));
        }
        let mut x = self.mean.clone();
        for (zj, row) in z.iter().zip(self.components.chunks_exact(ARC_CELLS)) {
            if *zj != 0.0 {
                linalg::axpy(*zj, row, &mut x);
            }
        }
        NormalizedArc::from_vec(x)
    }

    pub fn reconstruct(&self, x: &NormalizedArc) -> NormalizedArc {
        self.decode(&self.encode(x)).expect("encode yields d coordinates")
    }

    pub fn to_container(&self, norm: &NormalizationSpec) -> Result<Container> {
        let d = self.dim();
        Container::from_tensors(
            "pca",
            serde_json::json!({ "d": d, "normalization": norm }),
            serde_json::Value::Null,
            &[
                (TensorEntry::new("mean", &[ARC_CELLS]), &self.mean),
                (TensorEntry::new("components", &[d, ARC_CELLS]), &self.components),
                (TensorEntry::new("singular_values", &[d]), &self.singular_values),
            ],
        )
    }

    pub fn from_container(c: &Container) -> Result<(Self, NormalizationSpec)> {
        if c.meta.kind != "pca" {
            return Err(Error::Checkpoint(format!("expected kind pca, found {}", c.meta.kind)));
        }
        let norm: NormalizationSpec = serde_json::from_value(c.meta.config["normalization"].clone())?;
        let model = Self {
            mean: c.tensor("mean")?,
            components: c.tensor("components")?,
            singular_values: c.tensor("singular_values")?,
        };
        if model.mean.len() != ARC_CELLS || model.components.len() != model.dim() * ARC_CELLS {
            return Err(Error::Checkpoint("inconsistent PCA tensor shapes".into()));
        }
        Ok((model, norm))
    }
}

/// Two passes of Gram-Schmidt against the rows of `basis`, then normalize.
/// Returns false when `v` is (numerically) inside their span.
fn orthonormalize_against(v: &mut [f64], basis: &[f64]) -> bool {
    let start = linalg::norm(v);
    if start == 0.0 {
        return false;
    }
    for _ in 0..2 {
        for row in basis.chunks_exact(v.len()) {
            let proj = linalg::dot(v, row);
            linalg::axpy(-proj, row, v);
        }
    }
    let len = linalg::norm(v);
    if len <= 1e-6 * start {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= len);
    true
}

/// Make the largest-magnitude entry positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Pooled per-cell absolute errors in mm between arcs and reconstructions.
pub fn abs_errors_mm(
    originals: &[NormalizedArc],
    reconstructions: &[NormalizedArc],
    norm: &NormalizationSpec,
) -> Vec<f64> {
    let mut errs = Vec::with_capacity(originals.len() * ARC_CELLS);
    for (x, y) in originals.iter().zip(reconstructions) {
        errs.extend(
            x.as_slice()
                .iter()
                .zip(y.as_slice())
                .enumerate()
                .map(|(i, (a, b))| (a - b).abs() * norm.scale_of(i)),
        );
    }
    errs
}

/// Median over every cell of every arc of |x − x̂| in mm.
pub fn median_abs_error(model: &PcaModel, data: &[NormalizedArc], norm: &NormalizationSpec) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let recon: Vec<NormalizedArc> = data.iter().map(|x| model.reconstruct(x)).collect();
    Ok(median_in_place(&mut abs_errors_mm(data, &recon, norm)))
}

/// Reconstruction error for each dimension in `dims` from one fit at the
/// largest; `eval` defaults to the fitting set.
pub fn dimension_sweep(
    fit_data: &[NormalizedArc],
    eval: Option<&[NormalizedArc]>,
    dims: &[usize],
    norm: &NormalizationSpec,
) -> Result<Vec<(usize, f64)>> {
    if dims.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("dims must be sorted ascending".into()));
    }
    let Some(&max_d) = dims.last() else {
        return Ok(Vec::new());
    };
    let full = PcaModel::fit(fit_data, max_d)?;
    let eval = eval.unwrap_or(fit_data);
    dims.iter()
        .map(|&d| Ok((d, median_abs_error(&full.truncate(d)?, eval, norm)?)))
        .collect()
}
