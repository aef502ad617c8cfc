//! Text report for a checkpoint: sparsity, FLOPs, weight histogram and the
//! rank agreement between weight magnitude and importance.

use std::fmt::Write as _;

use crate::channel::flops_report;
use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::kfac::DEFAULT_DAMPING;
use crate::nn::Model;
use crate::obs::{block_inverses, importance_map};
use crate::oracle::rank_agreement;

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// Bins cover `[-range, range]`.
    pub range: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn bin_center(&self, b: usize) -> f64 {
        let width = 2.0 * self.range / self.counts.len() as f64;
        -self.range + (b as f64 + 0.5) * width
    }

    /// Fraction of the mass in the central `bins` bins.
    pub fn central_mass(&self, bins: usize) -> f64 {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let mid = self.counts.len() / 2;
        let half = bins / 2;
        let inner: u64 = self.counts[mid - half..mid + half].iter().sum();
        inner as f64 / total as f64
    }
}

/// Histogram of the unmasked, non-bias weights. `range` defaults to the
/// largest magnitude present.
pub fn weight_histogram(model: &Model, range: Option<f64>) -> Histogram {
    let mut values = Vec::new();
    for l in model.param_layers() {
        let layer = model.layer(l);
        let cols = layer.cols();
        for (q, (&w, &m)) in layer.weights.data().iter().zip(layer.mask.data()).enumerate() {
            if m != 0.0 && q % cols != cols - 1 {
                values.push(w);
            }
        }
    }
    let range = range
        .unwrap_or_else(|| values.iter().fold(0.0f64, |a, w| a.max(w.abs())))
        .max(f64::MIN_POSITIVE);
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for w in values {
        let b = ((w + range) / (2.0 * range) * HISTOGRAM_BINS as f64).floor();
        counts[(b.max(0.0) as usize).min(HISTOGRAM_BINS - 1)] += 1;
    }
    Histogram { range, counts }
}

/// Per-layer and pooled rank correlations; undefined ones keep their error.
pub type Agreement = (Vec<(usize, Result<f64>)>, Result<f64>);

/// Spearman ρ between |w| and importance, per layer and pooled over layers.
/// `None` when the checkpoint carries no statistics.
pub fn magnitude_importance(model: &Model, ck_stats: Option<&crate::kfac::ModelStats>) -> Result<Option<Agreement>> {
    let Some(stats) = ck_stats else {
        return Ok(None);
    };
    let inverses = block_inverses(model, stats, DEFAULT_DAMPING)?;
    let imap = importance_map(model, &inverses)?;
    let mut per_layer = Vec::new();
    let (mut all_mag, mut all_imp) = (Vec::new(), Vec::new());
    for li in &imap.layers {
        let w = model.layer(li.layer).weights.data();
        let mag: Vec<f64> = li.normalized.iter().map(|&(q, _)| w[q].abs()).collect();
        let imp: Vec<f64> = li.normalized.iter().map(|&(_, s)| s).collect();
        per_layer.push((li.layer, rank_agreement(&mag, &imp)));
        all_mag.extend(mag);
        all_imp.extend(imp);
    }
    Ok(Some((per_layer, rank_agreement(&all_mag, &all_imp))))
}

pub fn report_text(ck: &Checkpoint) -> Result<String> {
    let model = &ck.model;
    let mut out = String::new();
    out.push_str("# sparsity\nlayer\tremaining\ttotal\tsparsity\n");
    for l in model.param_layers() {
        let layer = model.layer(l);
        let total = layer.weights.len();
        let rem = layer.remaining();
        let _ = writeln!(out, "{l}\t{rem}\t{total}\t{:.6}", 1.0 - rem as f64 / total as f64);
    }
    let (rem, total) = (model.remaining_params(), model.total_params());
    let _ = writeln!(out, "all\t{rem}\t{total}\t{:.6}", 1.0 - rem as f64 / total as f64);

    out.push_str("\n# flops\n");
    out.push_str(&flops_report(model).to_text());

    let h = weight_histogram(model, None);
    out.push_str("\n# weight histogram\nbin\tcenter\tcount\n");
    for (b, c) in h.counts.iter().enumerate() {
        let _ = writeln!(out, "{b}\t{:.6e}\t{c}", h.bin_center(b));
    }

    out.push_str("\n# magnitude vs importance\n");
    match magnitude_importance(model, ck.stats.as_ref())? {
        None => out.push_str("unavailable\tcheckpoint has no curvature statistics\n"),
        Some((per_layer, pooled)) => {
            out.push_str("layer\tspearman\n");
            for (l, rho) in per_layer {
                match rho {
                    Ok(r) => writeln!(out, "{l}\t{r:.6}"),
                    Err(e) => writeln!(out, "{l}\tundefined ({e})"),
                }
                .expect("writing to a string");
            }
            match pooled {
                Ok(r) => writeln!(out, "all\t{r:.6}"),
                Err(e) => writeln!(out, "all\tundefined ({e})"),
            }
            .expect("writing to a string");
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    #[test]
    fn dense_model_has_no_sparsity() {
        let model = Model::new(Architecture::parse("input 4; dense 4 8; relu; dense 8 3").unwrap(), 1).unwrap();
        let text = report_text(&Checkpoint::new(model)).unwrap();
        assert!(text.contains("all\t67\t67\t0.000000"));
        assert!(text.contains("unavailable"));
    }

    #[test]
    fn histogram_counts_every_live_weight() {
        let model = Model::new(Architecture::parse("input 4; dense 4 8; relu; dense 8 3").unwrap(), 1).unwrap();
        let h = weight_histogram(&model, None);
        assert_eq!(h.counts.len(), HISTOGRAM_BINS);
        assert_eq!(h.counts.iter().sum::<u64>(), 32 + 24);
        assert!((h.bin_center(0) + h.range * (1.0 - 1.0 / 64.0)).abs() < 1e-12);
    }
}
