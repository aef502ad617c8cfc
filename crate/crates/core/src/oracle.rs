//! Brute-force reference computations.
//!
//! Everything here is dense and cubic or worse, guarded by parameter-count
//! limits, and independent of the factored code paths it is used to check.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kfac::{sample_categorical, LayerStats};
use crate::linalg::{gemm, kron, symmetrize};
use crate::nn::{softmax, Model};
use crate::tensor::Tensor;

pub const FISHER_PARAM_LIMIT: usize = 2000;
pub const HESSIAN_PARAM_LIMIT: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureKind {
    FisherExact,
    HessianFd,
    KfacReconstructed,
}

/// A dense symmetric matrix over a set of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCurvature {
    pub matrix: Vec<f64>,
    pub n: usize,
    pub kind: CurvatureKind,
    /// `(layer, row, col)` of the weight behind each position.
    pub index: Vec<(usize, usize, usize)>,
}

impl DenseCurvature {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.matrix[r * self.n + c]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|k| self.at(k, k)).collect()
    }

    pub fn position(&self, key: (usize, usize, usize)) -> Option<usize> {
        self.index.iter().position(|&k| k == key)
    }

    /// The sub-matrix over the positions of `layer`, in this matrix's order.
    pub fn layer_block(&self, layer: usize) -> DenseCurvature {
        let pos: Vec<usize> = (0..self.n).filter(|&k| self.index[k].0 == layer).collect();
        let m = pos.len();
        let mut matrix = vec![0.0; m * m];
        for (a, &p) in pos.iter().enumerate() {
            for (b, &q) in pos.iter().enumerate() {
                matrix[a * m + b] = self.at(p, q);
            }
        }
        DenseCurvature {
            matrix,
            n: m,
            kind: self.kind,
            index: pos.iter().map(|&p| self.index[p]).collect(),
        }
    }

    /// Frobenius norm of `self - other` over the norm of `other`.
    pub fn relative_gap(&self, other: &DenseCurvature) -> f64 {
        let num: f64 = self
            .matrix
            .iter()
            .zip(&other.matrix)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let den: f64 = other.matrix.iter().map(|b| b * b).sum();
        (num / den).sqrt()
    }
}

/// Unmasked parameters in layer order, row-major within a layer.
pub fn param_index(model: &Model) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for l in model.param_layers() {
        let layer = model.layer(l);
        let cols = layer.cols();
        for (q, &m) in layer.mask.data().iter().enumerate() {
            if m != 0.0 {
                out.push((l, q / cols, q % cols));
            }
        }
    }
    out
}

fn guard(what: &'static str, count: usize, limit: usize) -> Result<()> {
    if count > limit {
        Err(Error::GuardRail { what, count, limit })
    } else {
        Ok(())
    }
}

/// Gradients of each sample's own loss, one row per sample, over
/// [`param_index`].
pub fn per_sample_gradients(model: &mut Model, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let index = param_index(model);
    let p = index.len();
    let n = x.rows();
    model.forward(x)?;
    let capture = model.backward_with(labels, false)?.capture;
    let mut g = vec![0.0; n * p];
    for (pos, &(l, i, j)) in index.iter().enumerate() {
        let cap = capture.layers[l].as_ref().expect("parameterized layer captured");
        let (rows_out, cols) = (model.layer(l).rows(), model.layer(l).cols());
        let per = cap.rows / n;
        for s in 0..n {
            let mut acc = 0.0;
            for r in s * per..(s + 1) * per {
                acc += cap.preact_grads[r * rows_out + i] * cap.activations[r * cols + j];
            }
            g[s * p + pos] = acc;
        }
    }
    Ok(g)
}

/// Monte-Carlo Fisher `E[g gᵀ]` with labels drawn from the model's own
/// predictive distribution, one draw per input per pass.
pub fn exact_fisher<R: Rng + ?Sized>(
    model: &Model,
    inputs: &Tensor,
    passes: usize,
    rng: &mut R,
) -> Result<DenseCurvature> {
    let index = param_index(model);
    let p = index.len();
    guard("exact Fisher", p, FISHER_PARAM_LIMIT)?;
    let mut work = model.clone();
    let n = inputs.rows();
    let logits = model.infer(inputs)?;
    let probs: Vec<Vec<f64>> = (0..n).map(|r| softmax(logits.row(r))).collect();
    let count = (passes * n) as f64;
    let mut fisher = vec![0.0; p * p];
    let chunk = 512;
    for _ in 0..passes {
        let labels: Vec<usize> = probs.iter().map(|pr| sample_categorical(pr, rng)).collect();
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let rows: Vec<f64> = (start..end).flat_map(|r| inputs.row(r).iter().copied()).collect();
            let xb = Tensor::from_parts(vec![end - start, inputs.row_len()], rows);
            let g = per_sample_gradients(&mut work, &xb, &labels[start..end])?;
            gemm(p, end - start, p, 1.0 / count, &g, true, &g, false, 1.0, &mut fisher);
        }
    }
    symmetrize(&mut fisher, p);
    Ok(DenseCurvature {
        matrix: fisher,
        n: p,
        kind: CurvatureKind::FisherExact,
        index,
    })
}

/// Fisher with the expectation over the model's predictive distribution
/// taken exactly, by enumerating every class.
pub fn expected_fisher(model: &Model, inputs: &Tensor) -> Result<DenseCurvature> {
    let index = param_index(model);
    let p = index.len();
    guard("expected Fisher", p, FISHER_PARAM_LIMIT)?;
    let mut work = model.clone();
    let n = inputs.rows();
    let logits = model.infer(inputs)?;
    let probs: Vec<Vec<f64>> = (0..n).map(|r| softmax(logits.row(r))).collect();
    let mut fisher = vec![0.0; p * p];
    for c in 0..model.num_classes() {
        let mut g = per_sample_gradients(&mut work, inputs, &vec![c; n])?;
        for (s, pr) in probs.iter().enumerate() {
            let scale = (pr[c] / n as f64).sqrt();
            g[s * p..(s + 1) * p].iter_mut().for_each(|v| *v *= scale);
        }
        gemm(p, n, p, 1.0, &g, true, &g, false, 1.0, &mut fisher);
    }
    symmetrize(&mut fisher, p);
    Ok(DenseCurvature {
        matrix: fisher,
        n: p,
        kind: CurvatureKind::FisherExact,
        index,
    })
}

/// Central-difference Jacobian of `grad` at `w`, symmetrized.
pub fn finite_diff_jacobian<F>(w: &[f64], eps: f64, mut grad: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = w.len();
    let mut h = vec![0.0; n * n];
    let mut probe = w.to_vec();
    for k in 0..n {
        probe[k] = w[k] + eps;
        let plus = grad(&probe)?;
        probe[k] = w[k] - eps;
        let minus = grad(&probe)?;
        probe[k] = w[k];
        for r in 0..n {
            h[r * n + k] = (plus[r] - minus[r]) / (2.0 * eps);
        }
    }
    symmetrize(&mut h, n);
    if let Some(bad) = h.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("finite-difference Hessian entry {bad}")));
    }
    Ok(h)
}

/// Hessian of the mean loss over `(x, labels)` by central differences of the
/// analytic gradient, over the unmasked parameters.
pub fn finite_diff_hessian(model: &Model, x: &Tensor, labels: &[usize], eps: f64) -> Result<DenseCurvature> {
    let index = param_index(model);
    guard("finite-difference Hessian", index.len(), HESSIAN_PARAM_LIMIT)?;
    let mut work = model.clone();
    let w: Vec<f64> = index
        .iter()
        .map(|&(l, i, j)| model.layer(l).weights.at2(i, j))
        .collect();
    let matrix = finite_diff_jacobian(&w, eps, |probe| {
        for (&(l, i, j), &v) in index.iter().zip(probe) {
            let cols = work.layer(l).cols();
            work.layer_mut(l).weights.data_mut()[i * cols + j] = v;
        }
        work.forward(x)?;
        let grads = work.backward(labels)?.grads;
        Ok(index
            .iter()
            .map(|&(l, i, j)| grads[l].as_ref().expect("parameterized").at2(i, j))
            .collect())
    })?;
    Ok(DenseCurvature {
        matrix,
        n: index.len(),
        kind: CurvatureKind::HessianFd,
        index,
    })
}

/// `A ⊗ DS` for one layer, with positions in column-stacked weight order
/// (`q = j·rows + i`).
pub fn kfac_block(layer: usize, stats: &LayerStats) -> DenseCurvature {
    let (p, r) = (stats.a_side(), stats.ds_side());
    let mut index = vec![(0, 0, 0); p * r];
    for j in 0..p {
        for i in 0..r {
            index[j * r + i] = (layer, i, j);
        }
    }
    DenseCurvature {
        matrix: kron(stats.a(), p, stats.ds(), r),
        n: p * r,
        kind: CurvatureKind::KfacReconstructed,
        index,
    }
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan_inverse(m: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut a = m.to_vec();
    let mut inv = vec![0.0; n * n];
    for d in 0..n {
        inv[d * n + d] = 1.0;
    }
    let scale = m.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))
            .expect("nonempty");
        if a[pivot * n + col].abs() <= 1e-14 * scale {
            return Err(Error::SingularMatrix(format!("pivot {col} vanishes")));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(pivot * n + k, col * n + k);
                inv.swap(pivot * n + k, col * n + k);
            }
        }
        let d = a[col * n + col];
        for k in 0..n {
            a[col * n + k] /= d;
            inv[col * n + k] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f == 0.0 {
                continue;
            }
            for k in 0..n {
                a[r * n + k] -= f * a[col * n + k];
                inv[r * n + k] -= f * inv[col * n + k];
            }
        }
    }
    Ok(inv)
}

/// Minimum of `½ δᵀ H δ` subject to `δ_q = −w_q`: the loss increase
/// `w_q² / (2·[H⁻¹]_qq)` and the full update `−(w_q/[H⁻¹]_qq)·H⁻¹ e_q`.
/// `damping` is added to the diagonal first.
pub fn obs_quadratic(h: &[f64], n: usize, w: &[f64], q: usize, damping: f64) -> Result<(f64, Vec<f64>)> {
    let mut damped = h.to_vec();
    for d in 0..n {
        damped[d * n + d] += damping;
    }
    let inv = gauss_jordan_inverse(&damped, n)?;
    let hqq = inv[q * n + q];
    if !(hqq > 0.0) {
        return Err(Error::SingularMatrix(format!(
            "inverse diagonal {hqq} at {q} is not positive"
        )));
    }
    let loss = w[q] * w[q] / (2.0 * hqq);
    let delta = (0..n).map(|r| -w[q] / hqq * inv[r * n + q]).collect();
    Ok((loss, delta))
}

/// The same constrained minimum by eliminating the fixed coordinate and
/// solving the reduced normal equations `H_rr δ_r = −H_rq δ_q`.
pub fn constrained_min(h: &[f64], n: usize, w: &[f64], q: usize) -> Result<(f64, Vec<f64>)> {
    let free: Vec<usize> = (0..n).filter(|&k| k != q).collect();
    let m = free.len();
    let dq = -w[q];
    // Augmented system [H_rr | -H_rq dq], solved by Gaussian elimination.
    let mut sys = vec![0.0; m * (m + 1)];
    for (a, &r) in free.iter().enumerate() {
        for (b, &c) in free.iter().enumerate() {
            sys[a * (m + 1) + b] = h[r * n + c];
        }
        sys[a * (m + 1) + m] = -h[r * n + q] * dq;
    }
    for col in 0..m {
        let pivot = (col..m)
            .max_by(|&x, &y| sys[x * (m + 1) + col].abs().total_cmp(&sys[y * (m + 1) + col].abs()))
            .expect("nonempty");
        if sys[pivot * (m + 1) + col] == 0.0 {
            return Err(Error::SingularMatrix("reduced system".into()));
        }
        for k in 0..=m {
            sys.swap(pivot * (m + 1) + k, col * (m + 1) + k);
        }
        for r in col + 1..m {
            let f = sys[r * (m + 1) + col] / sys[col * (m + 1) + col];
            for k in col..=m {
                sys[r * (m + 1) + k] -= f * sys[col * (m + 1) + k];
            }
        }
    }
    let mut x = vec![0.0; m];
    for r in (0..m).rev() {
        let mut acc = sys[r * (m + 1) + m];
        for k in r + 1..m {
            acc -= sys[r * (m + 1) + k] * x[k];
        }
        x[r] = acc / sys[r * (m + 1) + r];
    }
    let mut delta = vec![0.0; n];
    delta[q] = dq;
    for (a, &r) in free.iter().enumerate() {
        delta[r] = x[a];
    }
    Ok((quadratic_form(h, n, &delta) / 2.0, delta))
}

pub fn quadratic_form(h: &[f64], n: usize, v: &[f64]) -> f64 {
    (0..n)
        .map(|r| v[r] * (0..n).map(|c| h[r * n + c] * v[c]).sum::<f64>())
        .sum()
}

/// Spearman rank correlation with average ranks for ties.
pub fn rank_agreement(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::UndefinedCorrelation(format!(
            "lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two scores".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean) * (x - mean);
        sbb += (y - mean) * (y - mean);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant scores".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&x, &y| v[x].total_cmp(&v[y]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    ranks
}
