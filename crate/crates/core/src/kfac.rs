//! Kronecker-factored curvature statistics.
//!
//! Each parameterized layer keeps two running second moments: `A` over the
//! augmented layer inputs and `DS` over the per-sample pre-activation
//! gradients. The layer's Fisher block is approximated by `A ⊗ DS`, acting
//! on column-stacked weights, so weight `(i, j)` (output row `i`, input
//! column `j`) sits at position `j·out + i` of the block.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{gemm, spd_inverse, symmetrize};
use crate::nn::{softmax, BatchCapture, LayerCapture, LayerState, Model};
use crate::tensor::Tensor;

pub const DEFAULT_DECAY: f64 = 0.95;
pub const DEFAULT_DAMPING: f64 = 1e-3;

/// Exponential moving averages of `a aᵀ` and `ds dsᵀ` for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    a: Vec<f64>,
    a_side: usize,
    ds: Vec<f64>,
    ds_side: usize,
    decay: f64,
    steps_seen: u64,
}

impl LayerStats {
    pub fn new(a_side: usize, ds_side: usize, decay: f64) -> Self {
        Self {
            a: vec![0.0; a_side * a_side],
            a_side,
            ds: vec![0.0; ds_side * ds_side],
            ds_side,
            decay,
            steps_seen: 0,
        }
    }

    pub fn for_layer(layer: &LayerState, decay: f64) -> Self {
        Self::new(layer.cols(), layer.rows(), decay)
    }

    /// Restores saved statistics.
    pub fn from_parts(
        a: Vec<f64>,
        a_side: usize,
        ds: Vec<f64>,
        ds_side: usize,
        decay: f64,
        steps_seen: u64,
    ) -> Result<Self> {
        if a.len() != a_side * a_side || ds.len() != ds_side * ds_side {
            return Err(Error::InvalidTensor(
                "statistics factor sizes disagree with sides".into(),
            ));
        }
        Ok(Self {
            a,
            a_side,
            ds,
            ds_side,
            decay,
            steps_seen,
        })
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn ds(&self) -> &[f64] {
        &self.ds
    }

    pub fn a_side(&self) -> usize {
        self.a_side
    }

    pub fn ds_side(&self) -> usize {
        self.ds_side
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn steps_seen(&self) -> u64 {
        self.steps_seen
    }

    /// Folds one batch into the running moments. The first batch initializes
    /// the moments directly to its own means.
    pub fn update(&mut self, capture: &LayerCapture) -> Result<()> {
        let rows = capture.rows;
        if rows == 0 {
            return Err(Error::InvalidArgument("empty capture".into()));
        }
        for (side, data, _name) in [
            (self.a_side, &capture.activations, "activations"),
            (self.ds_side, &capture.preact_grads, "gradients"),
        ] {
            if data.len() != rows * side {
                return Err(Error::WidthMismatch {
                    expected: side,
                    found: data.len() / rows,
                });
            }
        }
        let keep = if self.steps_seen == 0 { 0.0 } else { self.decay };
        let fresh = (1.0 - keep) / rows as f64;
        ema_second_moment(&mut self.a, self.a_side, &capture.activations, rows, keep, fresh);
        ema_second_moment(&mut self.ds, self.ds_side, &capture.preact_grads, rows, keep, fresh);
        self.steps_seen += 1;
        Ok(())
    }
}

/// `m ← keep·m + fresh·xᵀx`, then symmetrized.
fn ema_second_moment(m: &mut [f64], side: usize, x: &[f64], rows: usize, keep: f64, fresh: f64) {
    gemm(side, rows, side, fresh, x, true, x, false, keep, m);
    symmetrize(m, side);
}

/// Statistics for every parameterized layer of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelStats {
    pub layers: Vec<Option<LayerStats>>,
}

impl ModelStats {
    pub fn new(model: &Model, decay: f64) -> Self {
        Self {
            layers: model
                .layers()
                .iter()
                .map(|l| l.kind.is_parameterized().then(|| LayerStats::for_layer(l, decay)))
                .collect(),
        }
    }

    pub fn update(&mut self, capture: &BatchCapture) -> Result<()> {
        for (idx, (stats, cap)) in self.layers.iter_mut().zip(&capture.layers).enumerate() {
            match (stats, cap) {
                (Some(s), Some(c)) => s.update(c)?,
                (None, None) => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "capture and statistics disagree at layer {idx}"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Smallest number of updates seen by any layer.
    pub fn steps_seen(&self) -> u64 {
        self.layers
            .iter()
            .flatten()
            .map(LayerStats::steps_seen)
            .min()
            .unwrap_or(0)
    }

    pub fn get(&self, layer: usize) -> Result<&LayerStats> {
        match self.layers.get(layer) {
            Some(Some(s)) if s.steps_seen > 0 => Ok(s),
            _ => Err(Error::MissingStats { layer }),
        }
    }
}

/// Damped inverses of the two Kronecker factors of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerBlockInverse {
    pub a_inv: Vec<f64>,
    pub a_side: usize,
    pub ds_inv: Vec<f64>,
    pub ds_side: usize,
    pub damping: f64,
}

impl KroneckerBlockInverse {
    /// `[F⁻¹]_(q,q)` for weight `(i, j)`: `A⁻¹[j,j] · DS⁻¹[i,i]`.
    pub fn inv_diag(&self, i: usize, j: usize) -> f64 {
        self.a_inv[j * self.a_side + j] * self.ds_inv[i * self.ds_side + i]
    }

    /// Position of weight `(i, j)` inside the column-stacked block.
    pub fn vec_index(&self, i: usize, j: usize) -> usize {
        j * self.ds_side + i
    }
}

/// Inverts `A + γI` and `DS + γI` for the statistics of `layer`.
pub fn block_inverse(layer: usize, stats: &LayerStats, damping: f64) -> Result<KroneckerBlockInverse> {
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "damping must be nonnegative, got {damping}"
        )));
    }
    if stats.steps_seen == 0 {
        return Err(Error::MissingStats { layer });
    }
    let invert = |m: &[f64], n: usize, factor: &'static str| {
        let mut damped = m.to_vec();
        symmetrize(&mut damped, n);
        for d in 0..n {
            damped[d * n + d] += damping;
        }
        spd_inverse(&damped, n).map_err(|condition| Error::Singular {
            layer,
            factor,
            condition,
        })
    };
    Ok(KroneckerBlockInverse {
        a_inv: invert(&stats.a, stats.a_side, "A")?,
        a_side: stats.a_side,
        ds_inv: invert(&stats.ds, stats.ds_side, "DS")?,
        ds_side: stats.ds_side,
        damping,
    })
}

/// Where the labels of the curvature backward pass come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FisherMode {
    /// Labels drawn from the model's own predictive distribution.
    #[default]
    Sampled,
    /// Dataset labels.
    Empirical,
}

impl FromStr for FisherMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled" => Ok(Self::Sampled),
            "empirical" => Ok(Self::Empirical),
            _ => Err(Error::Config(format!("fisher mode `{s}` is not sampled|empirical"))),
        }
    }
}

impl fmt::Display for FisherMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sampled => "sampled",
            Self::Empirical => "empirical",
        })
    }
}

/// Labels for the curvature pass given the logits of a forward pass.
pub fn fisher_labels<R: Rng + ?Sized>(mode: FisherMode, logits: &Tensor, truth: &[usize], rng: &mut R) -> Vec<usize> {
    match mode {
        FisherMode::Empirical => truth.to_vec(),
        FisherMode::Sampled => (0..logits.rows())
            .map(|r| sample_categorical(&softmax(logits.row(r)), rng))
            .collect(),
    }
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // Rounding left u above the cumulative sum; take the last class with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{kron, min_eigenvalue};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cap(rows: Vec<Vec<f64>>, grads: Vec<Vec<f64>>) -> LayerCapture {
        LayerCapture {
            rows: rows.len(),
            activations: rows.concat(),
            preact_grads: grads.concat(),
        }
    }

    #[test]
    fn first_update_initializes_to_batch_moment() {
        let mut s = LayerStats::new(3, 1, DEFAULT_DECAY);
        s.update(&cap(vec![vec![1.0, 2.0, 1.0]], vec![vec![2.0]])).unwrap();
        assert_eq!(s.a(), &[1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0]);
        assert_eq!(s.ds(), &[4.0]);
        assert_eq!(s.steps_seen(), 1);
    }

    #[test]
    fn second_update_is_ema() {
        let mut s = LayerStats::new(3, 1, DEFAULT_DECAY);
        s.update(&cap(vec![vec![1.0, 2.0, 1.0]], vec![vec![2.0]])).unwrap();
        s.update(&cap(vec![vec![0.0, 0.0, 1.0]], vec![vec![0.0]])).unwrap();
        let prev = [1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0];
        for (k, v) in s.a().iter().enumerate() {
            let e3 = if k == 8 { 1.0 } else { 0.0 };
            assert!((v - (0.95 * prev[k] + 0.05 * e3)).abs() < 1e-15);
        }
        assert!((s.ds()[0] - 0.95 * 4.0).abs() < 1e-15);
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut s = LayerStats::new(3, 1, DEFAULT_DECAY);
        let err = s.update(&cap(vec![vec![1.0, 2.0]], vec![vec![2.0]])).unwrap_err();
        assert!(matches!(err, Error::WidthMismatch { expected: 3, found: 2 }));
    }

    #[test]
    fn repeated_batch_converges_geometrically() {
        let batch = cap(
            vec![vec![1.0, 0.5, 1.0], vec![-1.0, 2.0, 1.0]],
            vec![vec![0.3], vec![-0.1]],
        );
        let mut s = LayerStats::new(3, 1, DEFAULT_DECAY);
        s.update(&cap(vec![vec![0.0, 0.0, 1.0]], vec![vec![5.0]])).unwrap();
        let target: Vec<f64> = {
            let mut t = LayerStats::new(3, 1, DEFAULT_DECAY);
            t.update(&batch).unwrap();
            t.a().to_vec()
        };
        let dist = |s: &LayerStats| -> f64 {
            s.a()
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut prev = dist(&s);
        for _ in 0..20 {
            s.update(&batch).unwrap();
            let d = dist(&s);
            assert!((d / prev - DEFAULT_DECAY).abs() < 1e-9);
            prev = d;
        }
    }

    #[test]
    fn factors_stay_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = LayerStats::new(5, 4, DEFAULT_DECAY);
        for _ in 0..30 {
            let rows: Vec<Vec<f64>> = (0..7)
                .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let grads: Vec<Vec<f64>> = (0..7)
                .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            s.update(&cap(rows, grads)).unwrap();
            assert!(crate::linalg::asymmetry(s.a(), 5) <= 1e-12);
            assert!(crate::linalg::asymmetry(s.ds(), 4) <= 1e-12);
            assert!(min_eigenvalue(s.a(), 5) >= -1e-10);
            assert!(min_eigenvalue(s.ds(), 4) >= -1e-10);
        }
    }

    #[test]
    fn diagonal_inverse() {
        let s = LayerStats::from_parts(
            vec![2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0],
            3,
            vec![4.0, 0.0, 0.0, 4.0],
            2,
            DEFAULT_DECAY,
            1,
        )
        .unwrap();
        let inv = block_inverse(0, &s, 0.0).unwrap();
        let close = |got: &[f64], want: &[f64]| got.iter().zip(want).all(|(g, w)| (g - w).abs() < 1e-15);
        assert!(close(&inv.a_inv, &[0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.5]));
        assert!(close(&inv.ds_inv, &[0.25, 0.0, 0.0, 0.25]));
    }

    #[test]
    fn inv_diag_diagonal_case() {
        let inv = KroneckerBlockInverse {
            a_inv: vec![0.5, 0.0, 0.0, 0.2],
            a_side: 2,
            ds_inv: vec![4.0],
            ds_side: 1,
            damping: 0.0,
        };
        assert!((inv.inv_diag(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn rank_deficient_factor_needs_damping() {
        // A = v vᵀ has a zero eigenvalue.
        let v = [1.0, 2.0, -1.0];
        let a: Vec<f64> = (0..9).map(|k| v[k / 3] * v[k % 3]).collect();
        let s = LayerStats::from_parts(a.clone(), 3, vec![1.0], 1, DEFAULT_DECAY, 1).unwrap();
        assert!(matches!(
            block_inverse(4, &s, 0.0),
            Err(Error::Singular { layer: 4, .. })
        ));
        let inv = block_inverse(4, &s, 1e-3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    let damped = a[k * 3 + j] + if k == j { 1e-3 } else { 0.0 };
                    acc += inv.a_inv[i * 3 + k] * damped;
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((acc - want).abs() < 1e-8, "({i},{j}) = {acc}");
            }
        }
        for i in 0..3 {
            assert!(inv.inv_diag(0, i) > 0.0);
        }
    }

    #[test]
    fn missing_stats_rejected() {
        let s = LayerStats::new(2, 2, DEFAULT_DECAY);
        assert!(matches!(
            block_inverse(1, &s, 1e-3),
            Err(Error::MissingStats { layer: 1 })
        ));
    }

    #[test]
    fn degenerate_softmax_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = Tensor::matrix(1, 3, vec![1e9, 0.0, 0.0]).unwrap();
        for _ in 0..100 {
            assert_eq!(fisher_labels(FisherMode::Sampled, &logits, &[2], &mut rng), vec![0]);
        }
    }

    #[test]
    fn empirical_mode_passes_labels_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = Tensor::matrix(3, 2, vec![0.0; 6]).unwrap();
        assert_eq!(
            fisher_labels(FisherMode::Empirical, &logits, &[1, 0, 1], &mut rng),
            vec![1, 0, 1]
        );
    }

    #[test]
    fn uniform_logits_sample_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let logits = Tensor::matrix(n, 4, vec![0.0; n * 4]).unwrap();
        let labels = fisher_labels(FisherMode::Sampled, &logits, &vec![0; n], &mut rng);
        let p = 0.25;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for k in 0..4 {
            let count = labels.iter().filter(|&&y| y == k).count() as f64;
            assert!((count - n as f64 * p).abs() <= 3.0 * sigma, "class {k}: {count}");
        }
    }

    #[test]
    fn kron_of_inverses_inverts_dense_kron() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spd = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let m: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut out = vec![0.0; n * n];
            gemm(n, n, n, 1.0, &m, false, &m, true, 0.0, &mut out);
            for d in 0..n {
                out[d * n + d] += 0.5;
            }
            out
        };
        let a = spd(5, &mut rng);
        let ds = spd(4, &mut rng);
        let s = LayerStats::from_parts(a.clone(), 5, ds.clone(), 4, DEFAULT_DECAY, 1).unwrap();
        let inv = block_inverse(0, &s, 0.0).unwrap();
        let dense = kron(&a, 5, &ds, 4);
        let dense_inv = kron(&inv.a_inv, 5, &inv.ds_inv, 4);
        let mut prod = vec![0.0; 400];
        gemm(20, 20, 20, 1.0, &dense, false, &dense_inv, false, 0.0, &mut prod);
        for i in 0..20 {
            for j in 0..20 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[i * 20 + j] - want).abs() < 1e-8);
            }
        }
        for i in 0..4 {
            for j in 0..5 {
                let q = inv.vec_index(i, j);
                assert!((inv.inv_diag(i, j) - dense_inv[q * 20 + q]).abs() < 1e-12);
            }
        }
    }
}
