//! Browser bindings: train a small 2-D classifier, prune it with
//! second-order importances or by magnitude, and inspect the result.

use kfprune::config::RunConfig;
use kfprune::data::{accuracy, argmax, Dataset};
use kfprune::kfac::{FisherMode, ModelStats};
use kfprune::nn::Model;
use kfprune::obs::prune_count;
use kfprune::pipeline::{load_data, stream_rng, Session};
use kfprune::report::weight_histogram;
use kfprune::Tensor;
use wasm_bindgen::prelude::*;

const ARCH: &str = "input 2; dense 2 24; relu; dense 24 24; relu; dense 24 3";

fn js(e: kfprune::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    trained: Model,
    stats: ModelStats,
    train: Dataset,
    test: Dataset,
    pruned: Model,
}

#[wasm_bindgen]
impl Demo {
    /// Trains on points labelled by a random teacher network with `hidden`
    /// units, then gathers curvature statistics.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, hidden: u32) -> Result<Demo, JsError> {
        let cfg = RunConfig::parse(&format!(
            "arch={ARCH}\ndata=teacher:800:2:3:{hidden}\nseed={seed}\nbatch=50\nepochs=150\nlr=0.1\nmomentum=0.9\n"
        ))
        .map_err(js)?;
        let (train, test) = load_data(&cfg).map_err(js)?;
        let mut s = Session::new(cfg).map_err(js)?;
        s.pretrain(&train).map_err(js)?;
        let mut rng = stream_rng(seed as u64, 30, 0);
        s.run_steps(&train, 32, Some((FisherMode::Sampled, &mut rng)))
            .map_err(js)?;
        Ok(Demo {
            pruned: s.model.clone(),
            trained: s.model,
            stats: s.stats,
            train,
            test,
        })
    }

    pub fn total_params(&self) -> usize {
        self.trained.total_params()
    }

    /// Prunes a copy of the trained net to `sparsity` in one step. Returns
    /// `[test accuracy, remaining, magnitude-pruned test accuracy]`; the
    /// magnitude baseline zeroes the same number of smallest weights with
    /// no compensation.
    pub fn prune(&mut self, sparsity: f64, damping: f64) -> Result<Vec<f64>, JsError> {
        let total = self.trained.total_params();
        let k = ((sparsity.clamp(0.0, 0.99) * total as f64).floor() as usize).min(total - 1);
        let mut model = self.trained.clone();
        if k > 0 {
            prune_count(&mut model, &self.stats, k, damping).map_err(js)?;
        }
        let by_magnitude = magnitude_prune(&self.trained, k);
        let out = vec![
            accuracy(&model, &self.test).map_err(js)?,
            model.remaining_params() as f64,
            accuracy(&by_magnitude, &self.test).map_err(js)?,
        ];
        self.pruned = model;
        Ok(out)
    }

    /// Predicted class of the pruned net on an `n x n` grid over the unit
    /// square, row by row from the top.
    pub fn regions(&self, n: usize) -> Result<Vec<u8>, JsError> {
        let mut x = Vec::with_capacity(n * n * 2);
        for r in 0..n {
            for c in 0..n {
                x.push((c as f64 + 0.5) / n as f64);
                x.push(1.0 - (r as f64 + 0.5) / n as f64);
            }
        }
        let logits = self
            .pruned
            .infer(&Tensor::new(vec![n * n, 2], x).map_err(js)?)
            .map_err(js)?;
        Ok((0..n * n).map(|i| argmax(logits.row(i)) as u8).collect())
    }

    /// Training points as `x, y, label` triples.
    pub fn points(&self) -> Vec<f64> {
        (0..self.train.len())
            .flat_map(|i| {
                let p = self.train.images.row(i);
                [p[0], p[1], self.train.labels[i] as f64]
            })
            .collect()
    }

    /// Weight histogram of the pruned net on the trained net's range:
    /// `[range, count_0, count_1, ...]`.
    pub fn histogram(&self) -> Vec<f64> {
        let range = weight_histogram(&self.trained, None).range;
        let h = weight_histogram(&self.pruned, Some(range));
        std::iter::once(range)
            .chain(h.counts.iter().map(|&c| c as f64))
            .collect()
    }
}

/// Zeroes the `k` smallest-magnitude weights of `model`.
pub fn magnitude_prune(model: &Model, k: usize) -> Model {
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for l in model.param_layers() {
        let layer = model.layer(l);
        for (q, (&w, &m)) in layer.weights.data().iter().zip(layer.mask.data()).enumerate() {
            if m != 0.0 {
                all.push((w.abs(), l, q));
            }
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = model.clone();
    for &(_, l, q) in all.iter().take(k) {
        out.layer_mut(l).kill(q);
        out.layer_mut(l).project();
    }
    out
}
