//! Decoder Jacobians, chain-rule assembly and latent-space gradients of
//! dosimetric objectives.

use crate::arcdata::{NormalizationSpec, NormalizedArc, ARC_CELLS, CHANNEL_CELLS};
use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{gemm, Op, SparseMatrix};
use crate::nn::layers::{Layer, KERNEL, UPSAMPLE};
use crate::nn::{Checkpoint, Tensor};
use crate::pca::PcaModel;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// `∂x_i/∂z_j` with one row per output cell and one column per latent
/// coordinate.
pub type JacobianMatrix = Matrix;

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in diag.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(dim_mismatch(self.cols, other.rows));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(self.rows, self.cols, other.cols, 1.0, &self.data, Op::N, &other.data, Op::N, 0.0, &mut out.data);
        Ok(out)
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        crate::linalg::matvec(self.rows, self.cols, &self.data, Op::N, v)
    }

    /// `selfᵀ · v`.
    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        crate::linalg::matvec(self.rows, self.cols, &self.data, Op::T, v)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Scale each row of a normalized-unit Jacobian to mm.
pub fn denormalize_jacobian(j: &JacobianMatrix, norm: &NormalizationSpec) -> Result<JacobianMatrix> {
    if j.rows != ARC_CELLS {
        return Err(dim_mismatch(ARC_CELLS, j.rows));
    }
    let mut out = j.clone();
    for (r, row) in out.data.chunks_exact_mut(j.cols).enumerate() {
        let s = norm.scale_of(r);
        row.iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

/// The stacked eigenarcs; independent of the latent point.
pub fn pca_jacobian(model: &PcaModel) -> JacobianMatrix {
    let d = model.dim();
    let mut j = Matrix::zeros(ARC_CELLS, d);
    for c in 0..d {
        for (r, v) in model.component(c).iter().enumerate() {
            j.data[r * d + c] = *v;
        }
    }
    j
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train,
}

fn single(input: &Tensor) -> Result<()> {
    if input.batch() != 1 {
        return Err(Error::ShapeMismatch(format!("layer Jacobian needs a single input, got {:?}", input.shape())));
    }
    Ok(())
}

/// Dense Jacobian of one layer at `input` (batch of one), built from the
/// layer's matrix form.
pub fn layer_jacobian(layer: &Layer, input: &Tensor, mode: Mode) -> Result<Matrix> {
    single(input)?;
    let n_in = input.item_len();
    match layer {
        Layer::Linear(l) => Ok(Matrix {
            rows: l.out_f,
            cols: l.in_f,
            data: l.weight.value.clone(),
        }),
        Layer::Conv2d(l) => {
            let s = input.shape();
            let (h, w) = (s[2], s[3]);
            let (ho, wo) = (l.win.conv_out(h), l.win.conv_out(w));
            let mut m = Matrix::zeros(l.out_c * ho * wo, n_in);
            for o in 0..l.out_c {
                for ci in 0..l.in_c {
                    for ki in 0..KERNEL {
                        for kj in 0..KERNEL {
                            let wv = l.weight.value[((o * l.in_c + ci) * KERNEL + ki) * KERNEL + kj];
                            for i in 0..ho {
                                let ii = (i * l.win.stride + ki) as isize - l.win.pad as isize;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                for j in 0..wo {
                                    let jj = (j * l.win.stride + kj) as isize - l.win.pad as isize;
                                    if jj < 0 || jj >= w as isize {
                                        continue;
                                    }
                                    let r = (o * ho + i) * wo + j;
                                    let c = (ci * h + ii as usize) * w + jj as usize;
                                    m.data[r * n_in + c] += wv;
                                }
                            }
                        }
                    }
                }
            }
            Ok(m)
        }
        Layer::ConvTranspose2d(l) => {
            // Kᵀ: each input cell scatters its kernel into the upsampled map.
            let s = input.shape();
            let (h, w) = (s[2], s[3]);
            let (ho, wo) = (2 * h, 2 * w);
            let mut m = Matrix::zeros(l.out_c * ho * wo, n_in);
            for ci in 0..l.in_c {
                for co in 0..l.out_c {
                    for ki in 0..KERNEL {
                        for kj in 0..KERNEL {
                            let wv = l.weight.value[((ci * l.out_c + co) * KERNEL + ki) * KERNEL + kj];
                            for i in 0..h {
                                let oi = (i * UPSAMPLE.stride + ki) as isize - UPSAMPLE.pad as isize;
                                if oi < 0 || oi >= ho as isize {
                                    continue;
                                }
                                for j in 0..w {
                                    let oj = (j * UPSAMPLE.stride + kj) as isize - UPSAMPLE.pad as isize;
                                    if oj < 0 || oj >= wo as isize {
                                        continue;
                                    }
                                    let r = (co * ho + oi as usize) * wo + oj as usize;
                                    let c = (ci * h + i) * w + j;
                                    m.data[r * n_in + c] += wv;
                                }
                            }
                        }
                    }
                }
            }
            Ok(m)
        }
        Layer::MaxPool2d(l) => {
            let arg = l.argmax(input)?;
            let mut m = Matrix::zeros(arg.len(), n_in);
            for (r, &c) in arg.iter().enumerate() {
                m.data[r * n_in + c] = 1.0;
            }
            Ok(m)
        }
        Layer::Relu(_) => Ok(Matrix::diagonal(
            &input.data().iter().map(|&v| if v >= 0.0 { 1.0 } else { 0.0 }).collect::<Vec<_>>(),
        )),
        Layer::OutputHead(_) => {
            let gate = crate::nn::layers::OutputHead::gate(input.shape(), input.data());
            Ok(Matrix::diagonal(&gate.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect::<Vec<_>>()))
        }
        Layer::Reshape(_) => Ok(Matrix::identity(n_in)),
        Layer::DropBlock(_) | Layer::BatchNorm2d(_) if mode == Mode::Train => {
            Err(Error::UnsupportedLayer(layer.name().to_string()))
        }
        Layer::DropBlock(_) => Ok(Matrix::identity(n_in)),
        Layer::BatchNorm2d(bn) => {
            let (scale, _) = bn.eval_affine();
            let plane = input.shape()[2] * input.shape()[3];
            Ok(Matrix::diagonal(&(0..n_in).map(|i| scale[i / plane]).collect::<Vec<_>>()))
        }
    }
}

/// Push a batch of tangent vectors through the linearization of `layer` at
/// the single primal `input`.
pub fn tangent(layer: &Layer, input: &Tensor, tangents: &Tensor) -> Result<Tensor> {
    single(input)?;
    if tangents.item_len() != input.item_len() {
        return Err(dim_mismatch(input.item_len(), tangents.item_len()));
    }
    let mut shape = vec![tangents.batch()];
    shape.extend_from_slice(&input.shape()[1..]);
    let t = tangents.clone().reshape(&shape)?;
    let gated = |gate: &[bool]| -> Result<Tensor> {
        let per = gate.len();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| if gate[i % per] { *v } else { 0.0 })
            .collect();
        Tensor::new(t.shape(), data)
    };
    match layer {
        Layer::Linear(l) => l.linear_part(&t),
        Layer::Conv2d(l) => l.linear_part(&t),
        Layer::ConvTranspose2d(l) => l.linear_part(&t),
        Layer::MaxPool2d(l) => {
            let arg = l.argmax(input)?;
            let per = input.item_len();
            let s = input.shape();
            let mut out_shape = vec![t.batch(), s[1], s[2] / 2, s[3] / 2];
            let data = (0..t.batch())
                .flat_map(|b| arg.iter().map(move |&a| b * per + a))
                .map(|i| t.data()[i])
                .collect();
            out_shape.truncate(4);
            Tensor::new(&out_shape, data)
        }
        Layer::Relu(_) => gated(&input.data().iter().map(|&v| v >= 0.0).collect::<Vec<_>>()),
        Layer::OutputHead(_) => gated(&crate::nn::layers::OutputHead::gate(input.shape(), input.data())),
        Layer::Reshape(r) => {
            let mut s = vec![t.batch()];
            s.extend(&r.to);
            t.reshape(&s)
        }
        Layer::DropBlock(_) => Ok(t),
        Layer::BatchNorm2d(bn) => {
            let (scale, _) = bn.eval_affine();
            let plane = input.shape()[2] * input.shape()[3];
            let c = bn.channels;
            let data = t.data().iter().enumerate().map(|(i, v)| v * scale[(i / plane) % c]).collect();
            Tensor::new(t.shape(), data)
        }
    }
}

/// Jacobian of an evaluation-mode layer stack at latent point `z`, by
/// forward propagation of the `d` coordinate tangents.
pub fn stack_jacobian(layers: &[Layer], z: &[f64]) -> Result<JacobianMatrix> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent point".into()));
    }
    let d = z.len();
    let mut h = Tensor::new(&[1, d], z.to_vec())?;
    let eye = Matrix::identity(d);
    let mut t = Tensor::new(&[d, d], eye.data)?;
    for l in layers {
        t = tangent(l, &h, &t)?;
        h = l.infer(&h)?;
    }
    let rows = t.item_len();
    let mut j = Matrix::zeros(rows, d);
    for c in 0..d {
        for (r, v) in t.item(c).iter().enumerate() {
            j.data[r * d + c] = *v;
        }
    }
    if !j.all_finite() {
        return Err(Error::NonFinite("decoder Jacobian".into()));
    }
    Ok(j)
}

/// Decoder Jacobian in normalized units (batch norm folded, dropblock off).
pub fn decoder_jacobian(ckpt: &Checkpoint, z: &[f64]) -> Result<JacobianMatrix> {
    let d = ckpt.model().latent_dim();
    if z.len() != d {
        return Err(dim_mismatch(d, z.len()));
    }
    stack_jacobian(ckpt.model().decoder_layers(), z)
}

/// Product of layer Jacobians listed from input to output:
/// `J_n · … · J_2 · J_1`.
pub fn chain(jacobians: &[Matrix]) -> Result<Matrix> {
    let (first, rest) = jacobians
        .split_first()
        .ok_or_else(|| Error::ShapeMismatch("empty Jacobian chain".into()))?;
    rest.iter().try_fold(first.clone(), |acc, j| j.matmul(&acc))
}

/// `∂f/∂z = Jᵀ · (D · ∂f/∂d)`: `influence` maps arc cells (rows, in the
/// units of `j`'s rows) to voxels (columns).
pub fn latent_gradient(dose_grad: &[f64], influence: &SparseMatrix, j: &JacobianMatrix) -> Result<Vec<f64>> {
    if influence.cols() != dose_grad.len() {
        return Err(Error::ShapeMismatch(format!(
            "influence has {} voxels, gradient has {}",
            influence.cols(),
            dose_grad.len()
        )));
    }
    if influence.rows() != j.rows {
        return Err(Error::ShapeMismatch(format!(
            "influence has {} cells, Jacobian has {} rows",
            influence.rows(),
            j.rows
        )));
    }
    Ok(j.matvec_t(&influence.matvec(dose_grad)))
}

/// A compressor whose latent space can be searched.
pub trait LatentDecoder: Sync {
    fn latent_dim(&self) -> usize;
    fn normalization(&self) -> &NormalizationSpec;
    /// Decoded arc with non-negative gaps.
    fn decode_latent(&self, z: &[f64]) -> Result<NormalizedArc>;
    fn encode_latent(&self, x: &NormalizedArc) -> Result<Vec<f64>>;
    /// Jacobian of the decoder in normalized units.
    fn jacobian(&self, z: &[f64]) -> Result<JacobianMatrix>;
}

impl LatentDecoder for Checkpoint {
    fn latent_dim(&self) -> usize {
        self.model().latent_dim()
    }

    fn normalization(&self) -> &NormalizationSpec {
        Checkpoint::normalization(self)
    }

    fn decode_latent(&self, z: &[f64]) -> Result<NormalizedArc> {
        self.model().decode_one(z)
    }

    fn encode_latent(&self, x: &NormalizedArc) -> Result<Vec<f64>> {
        self.model().encode_one(x)
    }

    fn jacobian(&self, z: &[f64]) -> Result<JacobianMatrix> {
        decoder_jacobian(self, z)
    }
}

/// PCA model paired with the normalization it was fit under. Decoded gaps
/// are clamped at zero.
#[derive(Debug, Clone)]
pub struct PcaLatent {
    pub model: PcaModel,
    pub norm: NormalizationSpec,
}

impl LatentDecoder for PcaLatent {
    fn latent_dim(&self) -> usize {
        self.model.dim()
    }

    fn normalization(&self) -> &NormalizationSpec {
        &self.norm
    }

    fn decode_latent(&self, z: &[f64]) -> Result<NormalizedArc> {
        Ok(self.model.decode(z)?.clamp_gaps())
    }

    fn encode_latent(&self, x: &NormalizedArc) -> Result<Vec<f64>> {
        Ok(self.model.encode(x))
    }

    fn jacobian(&self, _z: &[f64]) -> Result<JacobianMatrix> {
        Ok(pca_jacobian(&self.model))
    }
}

/// Dose-objective value and latent gradient at `z`: the arc is decoded to
/// mm, dose is `influenceᵀ · x`, and `objective` returns `(f, ∂f/∂d)`.
pub fn latent_dose_gradient(
    decoder: &dyn LatentDecoder,
    influence: &SparseMatrix,
    objective: &dyn Fn(&[f64]) -> (f64, Vec<f64>),
    z: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let x = decoder.decode_latent(z)?.to_mm(decoder.normalization());
    let dose = influence.matvec_t(&x);
    let (f, g) = objective(&dose);
    let j = denormalize_jacobian(&decoder.jacobian(z)?, decoder.normalization())?;
    Ok((f, latent_gradient(&g, influence, &j)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRule {
    pub initial_step: f64,
    pub max_halvings: usize,
    /// Step multiplier after an accepted step.
    pub growth: f64,
}

impl Default for StepRule {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            max_halvings: 30,
            growth: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentOutcome {
    pub z: Vec<f64>,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
    /// True when the last line search exhausted its halvings; `z` is then
    /// the best iterate found.
    pub line_search_failed: bool,
}

/// Gradient descent in latent space with backtracking: the step is halved
/// until the objective decreases, at most `rule.max_halvings` times.
pub fn gradient_descend_latent(
    mut objective: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    z0: &[f64],
    steps: usize,
    rule: StepRule,
) -> Result<DescentOutcome> {
    let mut z = z0.to_vec();
    let (mut f, mut g) = objective(&z)?;
    if !f.is_finite() {
        return Err(Error::NonFiniteObjective { iteration: 0 });
    }
    let mut trace = vec![f];
    let mut step = rule.initial_step;
    for iteration in 1..=steps {
        if g.iter().all(|&v| v == 0.0) {
            break;
        }
        let mut s = step;
        let mut accepted = None;
        for _ in 0..=rule.max_halvings {
            let cand: Vec<f64> = z.iter().zip(&g).map(|(zi, gi)| zi - s * gi).collect();
            let (fc, gc) = objective(&cand)?;
            if !fc.is_finite() {
                return Err(Error::NonFiniteObjective { iteration });
            }
            if fc < f {
                accepted = Some((cand, fc, gc));
                break;
            }
            s *= 0.5;
        }
        match accepted {
            Some((cand, fc, gc)) => {
                z = cand;
                f = fc;
                g = gc;
                trace.push(f);
                step = s * rule.growth;
            }
            None => {
                return Ok(DescentOutcome {
                    z,
                    trace,
                    line_search_failed: true,
                })
            }
        }
    }
    Ok(DescentOutcome {
        z,
        trace,
        line_search_failed: false,
    })
}

/// Rows of the gap channel in a flattened arc Jacobian.
pub fn gap_rows() -> std::ops::Range<usize> {
    CHANNEL_CELLS..ARC_CELLS
}
