//! Masked feed-forward model with forward/backward passes.
//!
//! Parameterized layers compute `s = (W ⊙ Γ) · [a; 1]`. The backward pass
//! returns masked weight gradients and, for every parameterized layer, the
//! augmented inputs and the per-sample pre-activation gradients consumed by
//! the curvature statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{Architecture, LayerKind};
use super::conv::{col2im, im2col, ConvGeometry};
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

/// One layer: its kind, weights and binary mask.
///
/// Weights are `(out, in + 1)` for dense layers and
/// `(out_ch, in_ch·kh·kw + 1)` for convolutions; the last column is the bias.
/// Parameterless layers hold empty tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub kind: LayerKind,
    pub weights: Tensor,
    pub mask: Tensor,
}

impl LayerState {
    pub fn rows(&self) -> usize {
        self.kind.weight_dims().map_or(0, |d| d.0)
    }

    pub fn cols(&self) -> usize {
        self.kind.weight_dims().map_or(0, |d| d.1)
    }

    pub fn remaining(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != 0.0).count()
    }

    /// Zeroes every weight whose mask entry is 0.
    pub fn project(&mut self) {
        let mask = self.mask.data().to_vec();
        for (w, m) in self.weights.data_mut().iter_mut().zip(mask) {
            if m == 0.0 {
                *w = 0.0;
            }
        }
    }

    /// Prunes entry `flat` (row-major index into the weight matrix).
    pub fn kill(&mut self, flat: usize) {
        self.weights.data_mut()[flat] = 0.0;
        self.mask.data_mut()[flat] = 0.0;
    }

    fn effective_weights(&self) -> Vec<f64> {
        self.weights
            .data()
            .iter()
            .zip(self.mask.data())
            .map(|(w, m)| w * m)
            .collect()
    }
}

/// Per-layer tensors captured by [`Model::backward`] for curvature estimation.
#[derive(Debug, Clone, Default)]
pub struct LayerCapture {
    /// `rows x (in + 1)` augmented inputs (one row per sample, or per sample
    /// and output location for convolutions).
    pub activations: Vec<f64>,
    /// `rows x out` gradients of the per-sample loss with respect to the
    /// pre-activations.
    pub preact_grads: Vec<f64>,
    pub rows: usize,
}

/// Capture for every layer; `None` at parameterless layers.
#[derive(Debug, Clone, Default)]
pub struct BatchCapture {
    pub layers: Vec<Option<LayerCapture>>,
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Masked gradient of the mean loss, `None` at parameterless layers.
    pub grads: Vec<Option<Tensor>>,
    pub capture: BatchCapture,
}

#[derive(Debug, Clone)]
enum LayerCache {
    /// Augmented input (dense) or patch matrix (conv).
    Inputs(Vec<f64>),
    /// Output of a relu, kept to recover its active set.
    Relu(Vec<f64>),
    None,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    batch: usize,
    layers: Vec<LayerCache>,
    logits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    arch: Architecture,
    layers: Vec<LayerState>,
    /// Per-sample output shape of every layer.
    shapes: Vec<Vec<usize>>,
    cache: Option<Box<ForwardCache>>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.layers == other.layers
    }
}

impl Model {
    /// Builds a model with Kaiming-uniform (fan-in) weights and zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let shapes = infer_shapes(&arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layers
            .iter()
            .map(|&kind| match kind.weight_dims() {
                Some((rows, cols)) => {
                    let fan_in = cols - 1;
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let mut w = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..fan_in {
                            w[r * cols + c] = rng.random_range(-bound..bound);
                        }
                    }
                    LayerState {
                        kind,
                        weights: Tensor::from_parts(vec![rows, cols], w),
                        mask: Tensor::from_parts(vec![rows, cols], vec![1.0; rows * cols]),
                    }
                }
                None => LayerState {
                    kind,
                    weights: Tensor::empty(),
                    mask: Tensor::empty(),
                },
            })
            .collect();
        Ok(Self {
            arch,
            layers,
            shapes,
            cache: None,
        })
    }

    /// Assembles a model from explicit weights and masks. Weights under a
    /// zero mask are projected to zero.
    pub fn from_parts(arch: Architecture, weights: Vec<(Tensor, Tensor)>) -> Result<Self> {
        let shapes = infer_shapes(&arch)?;
        let mut pairs = weights.into_iter();
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (idx, &kind) in arch.layers.iter().enumerate() {
            let state = match kind.weight_dims() {
                Some((rows, cols)) => {
                    let (w, m) = pairs
                        .next()
                        .ok_or_else(|| Error::Architecture(format!("missing weights for layer {idx}")))?;
                    for t in [&w, &m] {
                        if t.shape() != [rows, cols] {
                            return Err(Error::ShapeMismatch {
                                layer: idx,
                                expected: format!("[{rows}, {cols}]"),
                                found: format!("{:?}", t.shape()),
                            });
                        }
                    }
                    if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                        return Err(Error::InvalidTensor(format!(
                            "layer {idx}: mask entries must be 0 or 1"
                        )));
                    }
                    let mut s = LayerState {
                        kind,
                        weights: w,
                        mask: m,
                    };
                    s.project();
                    s
                }
                None => LayerState {
                    kind,
                    weights: Tensor::empty(),
                    mask: Tensor::empty(),
                },
            };
            layers.push(state);
        }
        if pairs.next().is_some() {
            return Err(Error::Architecture("more weight tensors than layers".into()));
        }
        Ok(Self {
            arch,
            layers,
            shapes,
            cache: None,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerState] {
        &self.layers
    }

    pub fn layer(&self, idx: usize) -> &LayerState {
        &self.layers[idx]
    }

    /// Mutable access to a layer. Callers must keep the mask invariant
    /// (call [`LayerState::project`] after editing weights).
    pub fn layer_mut(&mut self, idx: usize) -> &mut LayerState {
        self.cache = None;
        &mut self.layers[idx]
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_shape.iter().product()
    }

    /// Per-sample output shape of layer `idx`.
    pub fn output_shape(&self, idx: usize) -> &[usize] {
        &self.shapes[idx]
    }

    /// Per-sample input shape of layer `idx`.
    pub fn layer_input_shape(&self, idx: usize) -> &[usize] {
        if idx == 0 {
            &self.arch.input_shape
        } else {
            &self.shapes[idx - 1]
        }
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.iter().product())
    }

    /// Indices of layers that carry weights.
    pub fn param_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].kind.is_parameterized())
            .collect()
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn remaining_params(&self) -> usize {
        self.layers.iter().map(LayerState::remaining).sum()
    }

    /// Spatial locations per sample seen by a parameterized layer
    /// (1 for dense layers).
    pub fn locations(&self, idx: usize) -> usize {
        match self.layers[idx].kind {
            LayerKind::Conv2d { .. } => self.shapes[idx][1] * self.shapes[idx][2],
            _ => 1,
        }
    }

    fn conv_geometry(&self, idx: usize) -> ConvGeometry {
        let LayerKind::Conv2d {
            in_ch,
            kh,
            kw,
            stride,
            pad,
            ..
        } = self.layers[idx].kind
        else {
            unreachable!("not a convolution")
        };
        let input = self.layer_input_shape(idx);
        ConvGeometry {
            in_ch,
            height: input[1],
            width: input[2],
            kh,
            kw,
            stride,
            pad,
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let n = batch.rows();
        if batch.shape().len() < 2 || batch.row_len() != self.input_len() || n == 0 {
            return Err(Error::ShapeMismatch {
                layer: 0,
                expected: format!("[batch, {:?}]", self.arch.input_shape),
                found: format!("{:?}", batch.shape()),
            });
        }
        Ok(n)
    }

    /// Forward pass that retains the activations needed by [`Model::backward`].
    pub fn forward(&mut self, batch: &Tensor) -> Result<Tensor> {
        let n = self.check_batch(batch)?;
        let mut cache = ForwardCache {
            batch: n,
            layers: Vec::with_capacity(self.layers.len()),
            logits: Vec::new(),
        };
        let out = self.run(batch.data(), n, Some(&mut cache));
        cache.logits = out.clone();
        self.cache = Some(Box::new(cache));
        Ok(Tensor::from_parts(vec![n, self.num_classes()], out))
    }

    /// Forward pass without caching.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        let n = self.check_batch(batch)?;
        let out = self.run(batch.data(), n, None);
        Ok(Tensor::from_parts(vec![n, self.num_classes()], out))
    }

    fn run(&self, input: &[f64], n: usize, mut cache: Option<&mut ForwardCache>) -> Vec<f64> {
        let skip_sources: Vec<bool> = {
            let mut v = vec![false; self.layers.len()];
            for l in &self.layers {
                if let LayerKind::Add { from } = l.kind {
                    v[from] = true;
                }
            }
            v
        };
        let mut saved: Vec<Option<Vec<f64>>> = vec![None; self.layers.len()];
        let mut x = input.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            let (next, entry) = match layer.kind {
                LayerKind::Dense { inputs, outputs } => {
                    let cols = inputs + 1;
                    let mut aug = vec![1.0; n * cols];
                    for r in 0..n {
                        aug[r * cols..r * cols + inputs].copy_from_slice(&x[r * inputs..(r + 1) * inputs]);
                    }
                    let w = layer.effective_weights();
                    let mut s = vec![0.0; n * outputs];
                    gemm(n, cols, outputs, 1.0, &aug, false, &w, true, 0.0, &mut s);
                    (s, LayerCache::Inputs(aug))
                }
                LayerKind::Conv2d { out_ch, .. } => {
                    let g = self.conv_geometry(idx);
                    let patches = im2col(&x, n, &g);
                    let locs = g.locations();
                    let rows = n * locs;
                    let w = layer.effective_weights();
                    let mut s_rows = vec![0.0; rows * out_ch];
                    gemm(
                        rows,
                        g.patch_cols(),
                        out_ch,
                        1.0,
                        &patches,
                        false,
                        &w,
                        true,
                        0.0,
                        &mut s_rows,
                    );
                    let mut s = vec![0.0; n * out_ch * locs];
                    for b in 0..n {
                        for p in 0..locs {
                            let src = &s_rows[(b * locs + p) * out_ch..][..out_ch];
                            for (o, v) in src.iter().enumerate() {
                                s[(b * out_ch + o) * locs + p] = *v;
                            }
                        }
                    }
                    (s, LayerCache::Inputs(patches))
                }
                LayerKind::Relu => {
                    for v in x.iter_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                    let entry = if cache.is_some() {
                        LayerCache::Relu(x.clone())
                    } else {
                        LayerCache::None
                    };
                    (x, entry)
                }
                LayerKind::Flatten => (x, LayerCache::None),
                LayerKind::Add { from } => {
                    let other = saved[from].as_ref().expect("skip source saved");
                    for (v, o) in x.iter_mut().zip(other) {
                        *v += o;
                    }
                    (x, LayerCache::None)
                }
            };
            x = next;
            if skip_sources[idx] {
                saved[idx] = Some(x.clone());
            }
            if let Some(c) = cache.as_deref_mut() {
                c.layers.push(entry);
            }
        }
        x
    }

    /// Backward pass of mean softmax cross-entropy against `labels`, using the
    /// activations of the last [`Model::forward`].
    pub fn backward(&mut self, labels: &[usize]) -> Result<BackwardOutput> {
        self.backward_with(labels, true)
    }

    /// As [`Model::backward`]; with `want_grads == false` only the loss and
    /// the capture are produced.
    pub fn backward_with(&mut self, labels: &[usize], want_grads: bool) -> Result<BackwardOutput> {
        let cache = self.cache.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let n = cache.batch;
        let classes = self.num_classes();
        if labels.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {classes})")));
        }
        let (loss, mut grad) = softmax_cross_entropy(&cache.logits, labels, classes);

        let count = self.layers.len();
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; count];
        let mut grads: Vec<Option<Tensor>> = vec![None; count];
        let mut capture = BatchCapture {
            layers: vec![None; count],
        };
        for idx in (0..count).rev() {
            if let Some(extra) = pending[idx].take() {
                for (g, e) in grad.iter_mut().zip(extra) {
                    *g += e;
                }
            }
            let layer = &self.layers[idx];
            let input_grad = match (&layer.kind, &cache.layers[idx]) {
                (LayerKind::Dense { inputs, outputs }, LayerCache::Inputs(aug)) => {
                    let (inputs, outputs) = (*inputs, *outputs);
                    let cols = inputs + 1;
                    if want_grads {
                        let mut dw = vec![0.0; outputs * cols];
                        gemm(outputs, n, cols, 1.0, &grad, true, aug, false, 0.0, &mut dw);
                        mask_in_place(&mut dw, layer.mask.data());
                        grads[idx] = Some(Tensor::from_parts(vec![outputs, cols], dw));
                    }
                    capture.layers[idx] = Some(LayerCapture {
                        activations: aug.clone(),
                        preact_grads: grad.iter().map(|g| g * n as f64).collect(),
                        rows: n,
                    });
                    if idx == 0 {
                        None
                    } else {
                        let w = layer.effective_weights();
                        let mut daug = vec![0.0; n * cols];
                        gemm(n, outputs, cols, 1.0, &grad, false, &w, false, 0.0, &mut daug);
                        let mut dx = vec![0.0; n * inputs];
                        for r in 0..n {
                            dx[r * inputs..(r + 1) * inputs].copy_from_slice(&daug[r * cols..r * cols + inputs]);
                        }
                        Some(dx)
                    }
                }
                (LayerKind::Conv2d { out_ch, .. }, LayerCache::Inputs(patches)) => {
                    let out_ch = *out_ch;
                    let g = self.conv_geometry(idx);
                    let locs = g.locations();
                    let rows = n * locs;
                    let cols = g.patch_cols();
                    let mut g_rows = vec![0.0; rows * out_ch];
                    for b in 0..n {
                        for o in 0..out_ch {
                            let src = &grad[(b * out_ch + o) * locs..][..locs];
                            for (p, v) in src.iter().enumerate() {
                                g_rows[(b * locs + p) * out_ch + o] = *v;
                            }
                        }
                    }
                    if want_grads {
                        let mut dw = vec![0.0; out_ch * cols];
                        gemm(out_ch, rows, cols, 1.0, &g_rows, true, patches, false, 0.0, &mut dw);
                        mask_in_place(&mut dw, layer.mask.data());
                        grads[idx] = Some(Tensor::from_parts(vec![out_ch, cols], dw));
                    }
                    let dx = if idx == 0 {
                        None
                    } else {
                        let w = layer.effective_weights();
                        let mut dpatch = vec![0.0; rows * cols];
                        gemm(rows, out_ch, cols, 1.0, &g_rows, false, &w, false, 0.0, &mut dpatch);
                        Some(col2im(&dpatch, n, &g))
                    };
                    for v in g_rows.iter_mut() {
                        *v *= n as f64;
                    }
                    capture.layers[idx] = Some(LayerCapture {
                        activations: patches.clone(),
                        preact_grads: g_rows,
                        rows,
                    });
                    dx
                }
                (LayerKind::Relu, LayerCache::Relu(out)) => {
                    for (g, o) in grad.iter_mut().zip(out) {
                        if *o <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    Some(grad)
                }
                (LayerKind::Flatten, _) => Some(grad),
                (LayerKind::Add { from }, _) => {
                    let from = *from;
                    match pending[from].as_mut() {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                        None => pending[from] = Some(grad.clone()),
                    }
                    Some(grad)
                }
                _ => unreachable!("cache kind matches layer kind"),
            };
            match input_grad {
                Some(g) => grad = g,
                None => break,
            }
        }
        Ok(BackwardOutput { loss, grads, capture })
    }

    /// Mean cross-entropy of the model on `(batch, labels)` without caching.
    pub fn loss(&self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.infer(batch)?;
        Ok(softmax_cross_entropy(logits.data(), labels, self.num_classes()).0)
    }

    /// All weights (masked entries included) concatenated over parameterized
    /// layers in row-major order.
    pub fn flat_weights(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.data().iter().copied())
            .collect()
    }

    /// Inverse of [`Model::flat_weights`]; masked entries are re-projected.
    pub fn set_flat_weights(&mut self, flat: &[f64]) {
        self.cache = None;
        let mut offset = 0;
        for layer in &mut self.layers {
            let len = layer.weights.len();
            layer.weights.data_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
            layer.project();
        }
    }
}

fn mask_in_place(values: &mut [f64], mask: &[f64]) {
    for (v, m) in values.iter_mut().zip(mask) {
        *v *= m;
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let n = labels.len();
    let mut grad = vec![0.0; n * classes];
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let probs = softmax(row);
        loss -= probs[y].max(f64::MIN_POSITIVE).ln();
        let g = &mut grad[r * classes..(r + 1) * classes];
        for (k, p) in probs.iter().enumerate() {
            g[k] = (p - if k == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn infer_shapes(arch: &Architecture) -> Result<Vec<Vec<usize>>> {
    if arch.input_shape.is_empty() || arch.input_shape.contains(&0) {
        return Err(Error::Architecture("input extents must be positive".into()));
    }
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(arch.layers.len());
    let mut cur = arch.input_shape.clone();
    for (idx, kind) in arch.layers.iter().enumerate() {
        let mismatch = |expected: String, found: &[usize]| Error::ShapeMismatch {
            layer: idx,
            expected,
            found: format!("{found:?}"),
        };
        cur = match *kind {
            LayerKind::Dense { inputs, outputs } => {
                if cur != [inputs] {
                    return Err(mismatch(format!("[{inputs}]"), &cur));
                }
                if outputs == 0 {
                    return Err(Error::Architecture(format!("layer {idx}: zero outputs")));
                }
                vec![outputs]
            }
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kh,
                kw,
                stride,
                pad,
            } => {
                if cur.len() != 3 || cur[0] != in_ch {
                    return Err(mismatch(format!("[{in_ch}, h, w]"), &cur));
                }
                let g = ConvGeometry {
                    in_ch,
                    height: cur[1],
                    width: cur[2],
                    kh,
                    kw,
                    stride,
                    pad,
                };
                if !g.fits() || kh == 0 || kw == 0 || out_ch == 0 {
                    return Err(mismatch(format!("kernel {kh}x{kw} to fit"), &cur));
                }
                vec![out_ch, g.out_height(), g.out_width()]
            }
            LayerKind::Relu => cur,
            LayerKind::Flatten => vec![cur.iter().product()],
            LayerKind::Add { from } => {
                if from >= idx {
                    return Err(Error::Architecture(format!(
                        "layer {idx}: skip source {from} does not precede it"
                    )));
                }
                if shapes[from] != cur {
                    return Err(mismatch(format!("{:?}", shapes[from]), &cur));
                }
                cur
            }
        };
        shapes.push(cur.clone());
    }
    if shapes.last().is_none_or(|s| s.len() != 1) {
        return Err(Error::Architecture("model must end in a flat logit vector".into()));
    }
    Ok(shapes)
}
