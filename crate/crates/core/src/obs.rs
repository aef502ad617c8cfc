//! Fine-grained pruning with second-order importances.
//!
//! For an unmasked weight `w` at `(i, j)` the loss increase of removing it
//! (with the optimal compensation of the remaining weights in its layer) is
//! `w² / (2·[F⁻¹]_qq)`. Importances are normalized within each layer, the
//! `k = ⌊p·N⌋` globally smallest are pruned and every layer receives the sum
//! of its victims' compensating updates.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::kfac::{block_inverse, KroneckerBlockInverse, ModelStats};
use crate::linalg::gemm;
use crate::nn::{LayerState, Model};

/// Importances of the unmasked weights of one layer, keyed by row-major
/// index into the weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerImportance {
    pub layer: usize,
    /// Width of the layer's weight matrix, to map indices back to `(row, col)`.
    pub cols: usize,
    pub raw: Vec<(usize, f64)>,
    pub normalized: Vec<(usize, f64)>,
}

impl LayerImportance {
    pub fn raw_sum(&self) -> f64 {
        self.raw.iter().map(|e| e.1).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    pub layers: Vec<LayerImportance>,
}

impl ImportanceMap {
    pub fn layer(&self, layer: usize) -> Option<&LayerImportance> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.normalized.len()).sum()
    }
}

/// Raw importances `w² / (2·A⁻¹[j,j]·DS⁻¹[i,i])` for the unmasked weights.
pub fn importance(layer_idx: usize, layer: &LayerState, inv: &KroneckerBlockInverse) -> Result<Vec<(usize, f64)>> {
    let cols = layer.cols();
    let mut out = Vec::with_capacity(layer.remaining());
    for (flat, (&w, &m)) in layer.weights.data().iter().zip(layer.mask.data()).enumerate() {
        if m == 0.0 {
            continue;
        }
        let d = inv.inv_diag(flat / cols, flat % cols);
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::NonPositiveCurvature {
                layer: layer_idx,
                value: d,
            });
        }
        out.push((flat, w * w / (2.0 * d)));
    }
    Ok(out)
}

/// Divides by the layer sum; an all-zero layer becomes uniform.
pub fn normalize_layer(raw: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let sum: f64 = raw.iter().map(|e| e.1).sum();
    if sum > 0.0 {
        raw.iter().map(|&(q, v)| (q, v / sum)).collect()
    } else {
        let u = 1.0 / raw.len() as f64;
        raw.iter().map(|&(q, _)| (q, u)).collect()
    }
}

/// Inverts every parameterized layer's factors.
pub fn block_inverses(model: &Model, stats: &ModelStats, damping: f64) -> Result<Vec<Option<KroneckerBlockInverse>>> {
    (0..model.layers().len())
        .map(|idx| {
            if model.layer(idx).kind.is_parameterized() {
                block_inverse(idx, stats.get(idx)?, damping).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// Raw and normalized importances for every parameterized layer with at
/// least one remaining weight.
pub fn importance_map(model: &Model, inverses: &[Option<KroneckerBlockInverse>]) -> Result<ImportanceMap> {
    let mut layers = Vec::new();
    for (idx, inv) in inverses.iter().enumerate() {
        let Some(inv) = inv else { continue };
        let raw = importance(idx, model.layer(idx), inv)?;
        if raw.is_empty() {
            continue;
        }
        let normalized = normalize_layer(&raw);
        layers.push(LayerImportance {
            layer: idx,
            cols: model.layer(idx).cols(),
            raw,
            normalized,
        });
    }
    Ok(ImportanceMap { layers })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Victim {
    pub layer: usize,
    pub index: usize,
    pub weight: f64,
    pub score: f64,
}

/// Threshold λ and the chosen `(layer, index, score)` triples.
pub type Selection = (f64, Vec<(usize, usize, f64)>);

/// Picks the `⌊p·N⌋` smallest normalized importances across all layers,
/// ties broken by layer then index. Returns the threshold (largest victim
/// score, or 0 when nothing is picked) and the victims in ascending order.
pub fn select_victims(imap: &ImportanceMap, p: f64) -> Result<Selection> {
    check_fraction(p)?;
    let total = imap.total();
    if total == 0 {
        return Err(Error::InvalidArgument("no remaining parameters to prune".into()));
    }
    Ok(select_smallest(imap, (p * total as f64).floor() as usize))
}

/// The `k` smallest normalized importances under the same ordering.
pub fn select_smallest(imap: &ImportanceMap, k: usize) -> Selection {
    let mut all: Vec<(f64, usize, usize)> = imap
        .layers
        .iter()
        .flat_map(|l| l.normalized.iter().map(move |&(q, s)| (s, l.layer, q)))
        .collect();
    if k < all.len() {
        all.select_nth_unstable_by(k, rank_order);
        all.truncate(k);
    }
    all.sort_unstable_by(rank_order);
    let lambda = all.last().map_or(0.0, |v| v.0);
    (lambda, all.into_iter().map(|(s, l, q)| (l, q, s)).collect())
}

fn rank_order(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

pub(crate) fn check_fraction(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "pruning fraction must lie in (0, 1), got {p}"
        )))
    }
}

/// Compensating update for removing weight `(i, j)` alone:
/// `−w/(A⁻¹[j,j]·DS⁻¹[i,i]) · DS⁻¹[:,i] · A⁻¹[j,:]`, as a dense
/// `rows x cols` matrix. Entry `(i, j)` equals `−w`.
pub fn delta_w(layer: &LayerState, i: usize, j: usize, inv: &KroneckerBlockInverse) -> Vec<f64> {
    let (rows, cols) = (layer.rows(), layer.cols());
    let w = layer.weights.data()[i * cols + j];
    let scale = -w / inv.inv_diag(i, j);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let dr = scale * inv.ds_inv[r * rows + i];
        let a_row = &inv.a_inv[j * cols..(j + 1) * cols];
        for (o, a) in out[r * cols..(r + 1) * cols].iter_mut().zip(a_row) {
            *o = dr * a;
        }
    }
    out
}

/// Sum of [`delta_w`] over `victims` (row-major indices) computed as
/// `−DS⁻¹ · C · A⁻¹` with `C` holding the per-victim coefficients.
pub fn summed_delta_w(layer: &LayerState, victims: &[usize], inv: &KroneckerBlockInverse) -> Vec<f64> {
    let (rows, cols) = (layer.rows(), layer.cols());
    let mut coef = vec![0.0; rows * cols];
    for &q in victims {
        let (i, j) = (q / cols, q % cols);
        coef[q] = -layer.weights.data()[q] / inv.inv_diag(i, j);
    }
    let mut tmp = vec![0.0; rows * cols];
    gemm(rows, cols, cols, 1.0, &coef, false, &inv.a_inv, false, 0.0, &mut tmp);
    let mut out = vec![0.0; rows * cols];
    gemm(rows, rows, cols, 1.0, &inv.ds_inv, false, &tmp, false, 0.0, &mut out);
    out
}

/// Record of one fine-grained pruning step.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunePlan {
    pub lambda: f64,
    pub victims: Vec<Victim>,
    /// Victims per layer (zero at parameterless layers).
    pub counts: Vec<usize>,
    /// Applied (masked) update per layer.
    pub delta_w: Vec<Option<Vec<f64>>>,
    /// Pre-normalization importance sums per layer.
    pub raw_sums: Vec<(usize, f64)>,
    pub remaining_before: usize,
    pub remaining_after: usize,
}

impl PrunePlan {
    /// Tab-separated audit listing: a summary comment, a header, then one
    /// victim per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# lambda={} victims={} remaining_before={} remaining_after={}",
            self.lambda,
            self.victims.len(),
            self.remaining_before,
            self.remaining_after
        );
        for (layer, sum) in &self.raw_sums {
            let _ = writeln!(out, "# raw_sum layer={layer} {sum}");
        }
        out.push_str("layer\tindex\tweight\tscore\n");
        for v in &self.victims {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", v.layer, v.index, v.weight, v.score);
        }
        out
    }
}

/// Removes the `⌊p·N⌋` least important weights and applies their summed
/// compensating updates, layer by layer.
pub fn prune_step(model: &mut Model, stats: &ModelStats, p: f64, damping: f64) -> Result<PrunePlan> {
    check_fraction(p)?;
    let inverses = block_inverses(model, stats, damping)?;
    let imap = importance_map(model, &inverses)?;
    let (lambda, picked) = select_victims(&imap, p)?;
    Ok(apply_victims(model, &inverses, &imap, lambda, &picked))
}

/// As [`prune_step`] with an explicit victim count.
pub fn prune_count(model: &mut Model, stats: &ModelStats, k: usize, damping: f64) -> Result<PrunePlan> {
    let inverses = block_inverses(model, stats, damping)?;
    let imap = importance_map(model, &inverses)?;
    if k > imap.total() {
        return Err(Error::InvalidArgument(format!(
            "{k} victims requested, {} parameters remain",
            imap.total()
        )));
    }
    let (lambda, picked) = select_smallest(&imap, k);
    Ok(apply_victims(model, &inverses, &imap, lambda, &picked))
}

pub(crate) fn apply_victims(
    model: &mut Model,
    inverses: &[Option<KroneckerBlockInverse>],
    imap: &ImportanceMap,
    lambda: f64,
    picked: &[(usize, usize, f64)],
) -> PrunePlan {
    let count = model.layers().len();
    let remaining_before = model.remaining_params();
    let mut per_layer: Vec<Vec<usize>> = vec![Vec::new(); count];
    let victims: Vec<Victim> = picked
        .iter()
        .map(|&(layer, index, score)| {
            per_layer[layer].push(index);
            Victim {
                layer,
                index,
                weight: model.layer(layer).weights.data()[index],
                score,
            }
        })
        .collect();
    let mut delta = vec![None; count];
    for (idx, indices) in per_layer.iter().enumerate() {
        if indices.is_empty() {
            continue;
        }
        let inv = inverses[idx].as_ref().expect("victims only in parameterized layers");
        let layer = model.layer_mut(idx);
        let mut dw = summed_delta_w(layer, indices, inv);
        for (d, m) in dw.iter_mut().zip(layer.mask.data()) {
            *d *= m;
        }
        for (w, d) in layer.weights.data_mut().iter_mut().zip(&dw) {
            *w += d;
        }
        for &q in indices {
            layer.kill(q);
        }
        layer.project();
        delta[idx] = Some(dw);
    }
    PrunePlan {
        lambda,
        counts: per_layer.iter().map(Vec::len).collect(),
        victims,
        delta_w: delta,
        raw_sums: imap.layers.iter().map(|l| (l.layer, l.raw_sum())).collect(),
        remaining_before,
        remaining_after: model.remaining_params(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kfac::{LayerStats, DEFAULT_DECAY};
    use crate::linalg::kron;
    use crate::nn::Architecture;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn imap(layers: Vec<(usize, Vec<f64>)>) -> ImportanceMap {
        ImportanceMap {
            layers: layers
                .into_iter()
                .map(|(layer, scores)| {
                    let raw: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
                    LayerImportance {
                        layer,
                        cols: raw.len(),
                        normalized: raw.clone(),
                        raw,
                    }
                })
                .collect(),
        }
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let m: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut out = vec![0.0; n * n];
        gemm(n, n, n, 1.0, &m, false, &m, true, 0.0, &mut out);
        for d in 0..n {
            out[d * n + d] += 0.3;
        }
        out
    }

    fn dense_layer(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Model {
        let arch = Architecture::parse(&format!("input {inp}; dense {inp} {out}")).unwrap();
        let cols = inp + 1;
        let w: Vec<f64> = (0..out * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Model::from_parts(
            arch,
            vec![(
                Tensor::matrix(out, cols, w).unwrap(),
                Tensor::matrix(out, cols, vec![1.0; out * cols]).unwrap(),
            )],
        )
        .unwrap()
    }

    #[test]
    fn zero_weight_costs_nothing() {
        let mut layer = dense_layer(2, 2, &mut ChaCha8Rng::seed_from_u64(1)).layer(0).clone();
        layer.weights.data_mut()[4] = 0.0;
        let inv = KroneckerBlockInverse {
            a_inv: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            a_side: 3,
            ds_inv: vec![1.0, 0.0, 0.0, 1.0],
            ds_side: 2,
            damping: 0.0,
        };
        let raw = importance(0, &layer, &inv).unwrap();
        assert_eq!(raw[4], (4, 0.0));
    }

    #[test]
    fn hand_evaluated_importance() {
        let mut layer = dense_layer(1, 1, &mut ChaCha8Rng::seed_from_u64(1)).layer(0).clone();
        layer.weights.data_mut()[0] = 2.0;
        let inv = KroneckerBlockInverse {
            a_inv: vec![0.5, 0.0, 0.0, 0.5],
            a_side: 2,
            ds_inv: vec![0.25],
            ds_side: 1,
            damping: 0.0,
        };
        let raw = importance(0, &layer, &inv).unwrap();
        assert_eq!(raw[0], (0, 16.0));
    }

    #[test]
    fn nonpositive_curvature_is_an_error() {
        let layer = dense_layer(1, 1, &mut ChaCha8Rng::seed_from_u64(1)).layer(0).clone();
        let inv = KroneckerBlockInverse {
            a_inv: vec![0.0, 0.0, 0.0, 1.0],
            a_side: 2,
            ds_inv: vec![1.0],
            ds_side: 1,
            damping: 0.0,
        };
        assert!(matches!(
            importance(7, &layer, &inv),
            Err(Error::NonPositiveCurvature { layer: 7, .. })
        ));
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_layer(&[(0, 4.0), (1, 12.0)]), vec![(0, 0.25), (1, 0.75)]);
        assert_eq!(normalize_layer(&[(3, 0.0); 4]), vec![(3, 0.25); 4]);
    }

    #[test]
    fn global_two_smallest() {
        let m = imap(vec![(0, vec![0.1, 0.9]), (1, vec![0.2, 0.8])]);
        let (lambda, v) = select_victims(&m, 0.5).unwrap();
        assert_eq!(v, vec![(0, 0, 0.1), (1, 0, 0.2)]);
        assert_eq!(lambda, 0.2);
    }

    #[test]
    fn floor_can_pick_nothing() {
        let m = imap(vec![(0, vec![0.1, 0.9]), (1, vec![0.2, 0.8])]);
        let (lambda, v) = select_victims(&m, 0.2).unwrap();
        assert!(v.is_empty());
        assert_eq!(lambda, 0.0);
    }

    #[test]
    fn fraction_bounds() {
        let m = imap(vec![(0, vec![0.1])]);
        for p in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(select_victims(&m, p).is_err());
        }
    }

    #[test]
    fn ties_break_by_layer_then_index() {
        let m = imap(vec![(2, vec![0.5, 0.5]), (1, vec![0.5, 0.5])]);
        let (_, v) = select_victims(&m, 0.75).unwrap();
        assert_eq!(v, vec![(1, 0, 0.5), (1, 1, 0.5), (2, 0, 0.5)]);
    }

    #[test]
    fn diagonal_curvature_reduces_to_deletion() {
        let model = dense_layer(2, 2, &mut ChaCha8Rng::seed_from_u64(4));
        let layer = model.layer(0);
        let inv = KroneckerBlockInverse {
            a_inv: vec![2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.5],
            a_side: 3,
            ds_inv: vec![1.5, 0.0, 0.0, 0.7],
            ds_side: 2,
            damping: 0.0,
        };
        let dw = delta_w(layer, 1, 2, &inv);
        for (q, d) in dw.iter().enumerate() {
            if q == 5 {
                assert!((d + layer.weights.data()[5]).abs() < 1e-15);
            } else {
                assert_eq!(*d, 0.0);
            }
        }
    }

    #[test]
    fn summed_update_matches_rank_one_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = dense_layer(3, 4, &mut rng);
        let layer = model.layer(0);
        let s =
            LayerStats::from_parts(random_spd(5, &mut rng), 5, random_spd(3, &mut rng), 3, DEFAULT_DECAY, 1).unwrap();
        let inv = block_inverse(0, &s, 1e-3).unwrap();
        let victims = [0usize, 7, 14];
        let mut expect = vec![0.0; 15];
        for &q in &victims {
            for (e, d) in expect.iter_mut().zip(delta_w(layer, q / 5, q % 5, &inv)) {
                *e += d;
            }
        }
        let got = summed_delta_w(layer, &victims, &inv);
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// ½ vec(W−W0)ᵀ (Ã ⊗ D̃) vec(W−W0) with column-stacked vec.
    fn quadratic(w: &[f64], w0: &[f64], h: &[f64], rows: usize, cols: usize) -> f64 {
        let n = rows * cols;
        let d: Vec<f64> = (0..n)
            .map(|q| {
                let (i, j) = (q % rows, q / rows);
                w[i * cols + j] - w0[i * cols + j]
            })
            .collect();
        let mut acc = 0.0;
        for a in 0..n {
            for b in 0..n {
                acc += d[a] * h[a * n + b] * d[b];
            }
        }
        0.5 * acc
    }

    #[test]
    fn single_victim_step_matches_quadratic_loss_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let (out, inp) = (3, 3);
            let (rows, cols) = (out, inp + 1);
            let mut model = dense_layer(out, inp, &mut rng);
            let a = random_spd(cols, &mut rng);
            let ds = random_spd(rows, &mut rng);
            let damping = 1e-3;
            let stats = ModelStats {
                layers: vec![Some(
                    LayerStats::from_parts(a.clone(), cols, ds.clone(), rows, DEFAULT_DECAY, 1).unwrap(),
                )],
            };
            let damp = |m: &[f64], n: usize| -> Vec<f64> {
                let mut m = m.to_vec();
                for k in 0..n {
                    m[k * n + k] += damping;
                }
                m
            };
            let h = kron(&damp(&a, cols), cols, &damp(&ds, rows), rows);
            let w0 = model.layer(0).weights.data().to_vec();
            let inv = block_inverse(0, stats.get(0).unwrap(), damping).unwrap();
            let raw = importance(0, model.layer(0), &inv).unwrap();
            // p just large enough for k = 1 out of 12.
            let plan = prune_step(&mut model, &stats, 0.1, damping).unwrap();
            assert_eq!(plan.victims.len(), 1);
            let v = plan.victims[0];
            let increase = quadratic(model.layer(0).weights.data(), &w0, &h, rows, cols);
            let expected = raw.iter().find(|e| e.0 == v.index).unwrap().1;
            assert!(
                (increase - expected).abs() <= 1e-6 * expected.max(1.0),
                "{increase} vs {expected}"
            );
            assert_eq!(model.layer(0).weights.data()[v.index], 0.0);
            assert_eq!(model.layer(0).mask.data()[v.index], 0.0);
        }
    }

    #[test]
    fn repeated_halving_follows_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = dense_layer(5, 6, &mut rng);
        let stats = ModelStats {
            layers: vec![Some(
                LayerStats::from_parts(random_spd(7, &mut rng), 7, random_spd(5, &mut rng), 5, DEFAULT_DECAY, 1)
                    .unwrap(),
            )],
        };
        let mut remaining = model.remaining_params();
        while remaining > 1 {
            let plan = prune_step(&mut model, &stats, 0.5, 1e-3).unwrap();
            let expect = remaining - remaining / 2;
            assert_eq!(plan.remaining_after, expect);
            assert_eq!(plan.remaining_before - plan.victims.len(), plan.remaining_after);
            assert_eq!(model.remaining_params(), expect);
            remaining = expect;
        }
    }

    #[test]
    fn plan_text_has_one_line_per_victim() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = dense_layer(2, 2, &mut rng);
        let stats = ModelStats {
            layers: vec![Some(
                LayerStats::from_parts(random_spd(3, &mut rng), 3, random_spd(2, &mut rng), 2, DEFAULT_DECAY, 1)
                    .unwrap(),
            )],
        };
        let plan = prune_step(&mut model, &stats, 0.5, 1e-3).unwrap();
        let text = plan.to_text();
        let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body[0], "layer\tindex\tweight\tscore");
        assert_eq!(body.len(), 1 + 3);
        for (line, v) in body[1..].iter().zip(&plan.victims) {
            let f: Vec<&str> = line.split('\t').collect();
            assert_eq!(f[0].parse::<usize>().unwrap(), v.layer);
            assert_eq!(f[1].parse::<usize>().unwrap(), v.index);
            assert_eq!(f[2].parse::<f64>().unwrap(), v.weight);
            assert_eq!(f[3].parse::<f64>().unwrap(), v.score);
        }
    }
}
