//! Train, iteratively prune and fine-tune.
//!
//! Every pruning iteration runs `T` SGD steps whose forward passes also feed
//! the curvature statistics, then removes weights or channels. Randomness is
//! drawn from streams keyed by `(seed, purpose, counter)` so a run resumed
//! from a checkpoint continues exactly as an uninterrupted one.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::{channel_prune_step_to, flops_report};
use crate::checkpoint::{Checkpoint, RunMeta};
use crate::config::{PruneMode, RunConfig, Schedule, StopRule, LADDER};
use crate::data::{accuracy, load_mnist_dir, synth_with_teacher, Dataset, SynthMode, SynthSpec};
use crate::error::{Error, Result};
use crate::kfac::{fisher_labels, FisherMode, ModelStats};
use crate::nn::{Architecture, Model, Sgd};
use crate::obs::prune_count;

const STREAM_SHUFFLE: u64 = 1;
const STREAM_FISHER: u64 = 2;
const STREAM_DATA: u64 = 3;

/// Independent deterministic generator for `(seed, stream, index)`.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Train and test splits for the configured data source.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    if let Some(dir) = cfg.data.strip_prefix("mnist:") {
        return load_mnist_dir(dir);
    }
    let parts: Vec<&str> = cfg.data.split(':').collect();
    let bad = || Error::Config(format!("unrecognized data source `{}`", cfg.data));
    if parts.len() != 5 {
        return Err(bad());
    }
    let n: usize = parts[1].parse().map_err(|_| bad())?;
    let features: usize = parts[2].parse().map_err(|_| bad())?;
    let classes: usize = parts[3].parse().map_err(|_| bad())?;
    let mode = match parts[0] {
        "gaussian" => SynthMode::GaussianClusters {
            separation: parts[4].parse().map_err(|_| bad())?,
        },
        "teacher" => SynthMode::TeacherNet {
            hidden: parts[4].parse().map_err(|_| bad())?,
        },
        _ => return Err(bad()),
    };
    let test_n = (n / 4).max(1);
    let (all, _) = synth_with_teacher(
        cfg.seed ^ STREAM_DATA,
        SynthSpec {
            n: n + test_n,
            features,
            classes,
            mode,
        },
    )?;
    let train = all.head(n);
    let idx: Vec<usize> = (n..n + test_n).collect();
    let (images, labels) = all.batch(&idx);
    let test = Dataset {
        images,
        labels,
        num_classes: all.num_classes,
        sample_shape: all.sample_shape.clone(),
        split: crate::data::Split::Test,
    };
    Ok((train, test))
}

/// One row of the pruning trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRow {
    pub iteration: u64,
    /// Victims over candidates (weights in fine mode, groups in channel mode).
    pub fraction: f64,
    pub lambda: f64,
    pub victims: usize,
    pub remaining_before: usize,
    pub remaining_after: usize,
    pub flops_before: u64,
    pub flops_after: u64,
    /// Mean training loss over the iteration's statistics steps.
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// `train_loss + lambda · victims`, reported only.
    pub psi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneSummary {
    pub rows: Vec<IterationRow>,
    pub stop_reason: String,
    pub baseline_accuracy: f64,
    pub pruned_accuracy: f64,
    pub final_accuracy: f64,
    pub finetune_steps: u64,
    /// `(layer, remaining, total)` for every parameterized layer.
    pub layer_remaining: Vec<(usize, usize, usize)>,
    pub flops_ratio: f64,
    pub compression: f64,
}

impl PruneSummary {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("iteration\tfraction\tlambda\tvictims\tremaining_before\tremaining_after\tflops_before\tflops_after\ttrain_loss\ttest_accuracy\tpsi\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6e}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.4}\t{:.6}",
                r.iteration,
                r.fraction,
                r.lambda,
                r.victims,
                r.remaining_before,
                r.remaining_after,
                r.flops_before,
                r.flops_after,
                r.train_loss,
                r.test_accuracy,
                r.psi
            );
        }
        out.push_str("\nlayer\tremaining\ttotal\tfraction\n");
        for &(l, rem, tot) in &self.layer_remaining {
            let _ = writeln!(out, "{l}\t{rem}\t{tot}\t{:.6}", rem as f64 / tot as f64);
        }
        let _ = write!(
            out,
            "\nstop\t{}\nbaseline_accuracy\t{:.4}\npruned_accuracy\t{:.4}\nfinal_accuracy\t{:.4}\nfinetune_steps\t{}\nflops_ratio\t{:.4}\ncompression\t{:.4}\n",
            self.stop_reason,
            self.baseline_accuracy,
            self.pruned_accuracy,
            self.final_accuracy,
            self.finetune_steps,
            self.flops_ratio,
            self.compression
        );
        out
    }
}

pub fn layer_remaining(model: &Model) -> Vec<(usize, usize, usize)> {
    model
        .param_layers()
        .into_iter()
        .map(|l| (l, model.layer(l).remaining(), model.layer(l).weights.len()))
        .collect()
}

/// Everything a run carries between steps.
#[derive(Debug, Clone)]
pub struct Session {
    pub cfg: RunConfig,
    pub model: Model,
    pub sgd: Sgd,
    pub stats: ModelStats,
    pub meta: RunMeta,
    perm: Option<(u64, Vec<usize>)>,
}

impl Session {
    /// A freshly initialized model.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(Architecture::resolve(&cfg.arch)?, cfg.seed)?;
        let stats = ModelStats::new(&model, cfg.decay);
        Ok(Self {
            sgd: Sgd::new(cfg.lr, cfg.momentum)?,
            cfg,
            model,
            stats,
            meta: RunMeta::default(),
            perm: None,
        })
    }

    /// Continues from a checkpoint under `cfg`.
    pub fn resume(cfg: RunConfig, ck: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let mut sgd = Sgd::new(cfg.lr, cfg.momentum)?;
        if let Some(v) = ck.velocity {
            sgd.set_velocity(v);
        }
        let stats = match ck.stats {
            Some(s) if !cfg.reset_stats => s,
            _ => ModelStats::new(&ck.model, cfg.decay),
        };
        Ok(Self {
            cfg,
            model: ck.model,
            sgd,
            stats,
            meta: ck.meta,
            perm: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let has_stats = self.stats.steps_seen() > 0;
        Checkpoint {
            model: self.model.clone(),
            config: self.cfg.to_text(),
            stats: has_stats.then(|| self.stats.clone()),
            velocity: (!self.sgd.velocity().is_empty()).then(|| self.sgd.velocity().to_vec()),
            meta: self.meta.clone(),
            matrices: Vec::new(),
        }
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.features() != self.model.input_len() || data.num_classes != self.model.num_classes() {
            return Err(Error::Config(format!(
                "data has {} features and {} classes; model expects {} and {}",
                data.features(),
                data.num_classes,
                self.model.input_len(),
                self.model.num_classes()
            )));
        }
        if data.len() < self.cfg.batch {
            return Err(Error::Config(format!("{} samples is fewer than one batch", data.len())));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, data: &Dataset) -> u64 {
        (data.len() / self.cfg.batch) as u64
    }

    /// Sample indices of global step `step`: epoch-wise permutations, last
    /// partial batch dropped.
    fn batch_indices(&mut self, data: &Dataset, step: u64) -> Vec<usize> {
        let per_epoch = self.steps_per_epoch(data);
        let epoch = step / per_epoch;
        if self
            .perm
            .as_ref()
            .is_none_or(|(e, p)| *e != epoch || p.len() != data.len())
        {
            let mut p: Vec<usize> = (0..data.len()).collect();
            p.shuffle(&mut stream_rng(self.cfg.seed, STREAM_SHUFFLE, epoch));
            self.perm = Some((epoch, p));
        }
        let start = ((step % per_epoch) as usize) * self.cfg.batch;
        self.perm.as_ref().expect("set above").1[start..start + self.cfg.batch].to_vec()
    }

    /// Runs `count` SGD steps; with `fisher` set, each step's forward pass
    /// also updates the curvature statistics. Returns the mean loss.
    pub fn run_steps(
        &mut self,
        data: &Dataset,
        count: u64,
        fisher: Option<(FisherMode, &mut ChaCha8Rng)>,
    ) -> Result<f64> {
        self.check_data(data)?;
        let mut fisher = fisher;
        let mut total = 0.0;
        for _ in 0..count {
            let idx = self.batch_indices(data, self.meta.train_steps);
            let (x, y) = data.batch(&idx);
            let logits = self.model.forward(&x)?;
            let out = self.model.backward(&y)?;
            if let Some((mode, rng)) = fisher.as_mut() {
                let capture = match mode {
                    FisherMode::Empirical => out.capture,
                    FisherMode::Sampled => {
                        let labels = fisher_labels(*mode, &logits, &y, &mut **rng);
                        self.model.backward_with(&labels, false)?.capture
                    }
                };
                self.stats.update(&capture)?;
            }
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at step {}",
                    self.meta.train_steps
                )));
            }
            self.sgd.step(&mut self.model, &out.grads)?;
            total += out.loss;
            self.meta.train_steps += 1;
        }
        Ok(total / count.max(1) as f64)
    }

    /// Trains for the configured number of epochs.
    pub fn pretrain(&mut self, data: &Dataset) -> Result<f64> {
        self.check_data(data)?;
        let steps = (self.cfg.epochs * self.steps_per_epoch(data) as f64).round() as u64;
        self.run_steps(data, steps, None)
    }

    fn stop_reached(&self, rule: StopRule) -> bool {
        match rule {
            StopRule::TargetSparsity(s) => {
                let total = self.model.total_params();
                let removed = total - self.model.remaining_params();
                removed >= (s * total as f64).floor() as usize
            }
            StopRule::TargetFlopsRatio(r) => flops_report(&self.model).flops_ratio() >= r,
            StopRule::MaxIterations(m) => self.meta.iteration >= m,
        }
    }

    /// Victim count for the next fine-grained iteration.
    fn fine_victims(&self) -> usize {
        let total = self.model.total_params();
        let remaining = self.model.remaining_params();
        if self.cfg.schedule == Schedule::Ladder {
            for t in LADDER {
                let keep = total - ((1.0 - t) * total as f64).floor() as usize;
                if keep < remaining {
                    return remaining - keep;
                }
            }
        }
        (self.cfg.p * remaining as f64).floor() as usize
    }

    /// One statistics phase followed by one pruning step. Returns the row
    /// and the plan text, or the reason pruning cannot continue.
    pub fn prune_iteration(
        &mut self,
        train: &Dataset,
        test: &Dataset,
    ) -> Result<std::result::Result<(IterationRow, String), String>> {
        if self.meta.iteration == 0 && self.meta.lambda_history.is_empty() {
            self.meta.prune_start = self.meta.train_steps;
        }
        if self.cfg.reset_stats {
            self.stats = ModelStats::new(&self.model, self.cfg.decay);
        }
        let t = self.cfg.steps.resolve(self.steps_per_epoch(train));
        let mut rng = stream_rng(self.cfg.seed, STREAM_FISHER, self.meta.iteration);
        let loss = self.run_steps(train, t, Some((self.cfg.fisher, &mut rng)))?;
        let flops_before = flops_report(&self.model).total_flops;
        let (fraction, lambda, victims, before, after, text) = match self.cfg.mode {
            PruneMode::Fine => {
                let k = self.fine_victims();
                if k == 0 {
                    return Ok(Err("no victims: the fraction rounds down to zero".into()));
                }
                let plan = prune_count(&mut self.model, &self.stats, k, self.cfg.damping)?;
                (
                    k as f64 / plan.remaining_before as f64,
                    plan.lambda,
                    plan.victims.len(),
                    plan.remaining_before,
                    plan.remaining_after,
                    plan.to_text(),
                )
            }
            PruneMode::Channel => {
                let target = match self.cfg.stop_rule()? {
                    StopRule::TargetFlopsRatio(r) => Some(r),
                    _ => None,
                };
                let plan = channel_prune_step_to(&mut self.model, &self.stats, self.cfg.p, self.cfg.damping, target)?;
                if plan.removed.is_empty() {
                    return Ok(Err(if plan.k == 0 {
                        "no victims: the fraction rounds down to zero groups".into()
                    } else {
                        "channel floor: every candidate would empty a layer".into()
                    }));
                }
                (
                    plan.removed.len() as f64 / plan.candidates as f64,
                    plan.lambda,
                    plan.removed.len(),
                    plan.remaining_before,
                    plan.remaining_after,
                    plan.to_text(),
                )
            }
        };
        let flops_after = flops_report(&self.model).total_flops;
        let row = IterationRow {
            iteration: self.meta.iteration,
            fraction,
            lambda,
            victims,
            remaining_before: before,
            remaining_after: after,
            flops_before,
            flops_after,
            train_loss: loss,
            test_accuracy: accuracy(&self.model, test)?,
            psi: loss + lambda * victims as f64,
        };
        self.meta.iteration += 1;
        self.meta.lambda_history.push(lambda);
        self.meta.flops_history.push(flops_after);
        self.meta.remaining_history.push(after as u64);
        Ok(Ok((row, text)))
    }

    /// Prunes until the stop rule holds (or pruning cannot continue), then
    /// fine-tunes. `on_iteration` sees the session after every iteration.
    pub fn prune<F>(&mut self, train: &Dataset, test: &Dataset, mut on_iteration: F) -> Result<PruneSummary>
    where
        F: FnMut(&Session, &IterationRow, &str) -> Result<()>,
    {
        let rule = self.cfg.stop_rule()?;
        let baseline_accuracy = accuracy(&self.model, test)?;
        let mut rows = Vec::new();
        let stop_reason = loop {
            if self.stop_reached(rule) {
                break "stop rule reached".to_string();
            }
            match self.prune_iteration(train, test)? {
                Ok((row, text)) => {
                    on_iteration(self, &row, &text)?;
                    rows.push(row);
                }
                Err(reason) => break reason,
            }
        };
        let pruned_accuracy = accuracy(&self.model, test)?;
        let steps = match self.cfg.budget_steps {
            Some(b) => b.saturating_sub(self.meta.train_steps - self.meta.prune_start),
            None => self.cfg.finetune.resolve(self.steps_per_epoch(train)),
        };
        self.finetune(train, steps)?;
        let report = flops_report(&self.model);
        Ok(PruneSummary {
            rows,
            stop_reason,
            baseline_accuracy,
            pruned_accuracy,
            final_accuracy: accuracy(&self.model, test)?,
            finetune_steps: steps,
            layer_remaining: layer_remaining(&self.model),
            flops_ratio: report.flops_ratio(),
            compression: report.compression(),
        })
    }

    /// Plain SGD on the remaining weights at the fine-tuning rate.
    pub fn finetune(&mut self, train: &Dataset, steps: u64) -> Result<f64> {
        if steps == 0 {
            return Ok(0.0);
        }
        let lr = self.sgd.lr();
        self.sgd.set_lr(self.cfg.finetune_lr.unwrap_or(lr))?;
        let loss = self.run_steps(train, steps, None);
        self.sgd.set_lr(lr)?;
        loss
    }
}
