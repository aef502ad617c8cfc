//! Flat `key=value` run configuration.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kfac::{FisherMode, DEFAULT_DAMPING, DEFAULT_DECAY};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMode {
    Fine,
    Channel,
}

impl FromStr for PruneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine" => Ok(Self::Fine),
            "channel" => Ok(Self::Channel),
            _ => Err(Error::Config(format!("mode must be fine or channel, got `{s}`"))),
        }
    }
}

impl fmt::Display for PruneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fine => "fine",
            Self::Channel => "channel",
        })
    }
}

/// How the pruning fraction evolves over iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Prune fraction `p` of what remains every iteration.
    Constant,
    /// Prune down to 50%, 25%, 12.5%, 6.25%, 5% and 4% of the original
    /// parameters in turn, then continue with `p`.
    Ladder,
}

pub const LADDER: [f64; 6] = [0.5, 0.25, 0.125, 0.0625, 0.05, 0.04];

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "ladder" => Ok(Self::Ladder),
            _ => Err(Error::Config(format!("schedule must be constant or ladder, got `{s}`"))),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Ladder => "ladder",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Stop once at least this fraction of all parameters is pruned.
    TargetSparsity(f64),
    /// Stop once dense FLOPs over current FLOPs reaches this value.
    TargetFlopsRatio(f64),
    MaxIterations(u64),
}

/// A step count, either absolute or as a fraction of an epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Steps {
    Count(u64),
    Epochs(f64),
}

impl Steps {
    pub fn resolve(&self, steps_per_epoch: u64) -> u64 {
        match *self {
            Steps::Count(n) => n,
            Steps::Epochs(e) => ((e * steps_per_epoch as f64).round() as u64).max(1),
        }
    }
}

impl FromStr for Steps {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("steps must be an integer or `<fraction>ep`, got `{s}`"));
        if let Some(e) = s.strip_suffix("ep") {
            let e: f64 = e.parse().map_err(|_| bad())?;
            if !(e > 0.0 && e.is_finite()) {
                return Err(bad());
            }
            Ok(Steps::Epochs(e))
        } else {
            s.parse().map(Steps::Count).map_err(|_| bad())
        }
    }
}

impl fmt::Display for Steps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Steps::Count(n) => write!(f, "{n}"),
            Steps::Epochs(e) => write!(f, "{e}ep"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Preset name or inline architecture.
    pub arch: String,
    /// `mnist:<dir>`, `gaussian:<n>:<features>:<classes>:<separation>` or
    /// `teacher:<n>:<features>:<classes>:<hidden>`.
    pub data: String,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: f64,
    pub mode: PruneMode,
    pub p: f64,
    pub schedule: Schedule,
    /// Statistics and fine-tuning steps per pruning iteration.
    pub steps: Steps,
    pub damping: f64,
    pub decay: f64,
    pub fisher: FisherMode,
    pub target_sparsity: Option<f64>,
    pub target_flops_ratio: Option<f64>,
    pub max_iterations: Option<u64>,
    /// Final fine-tuning length after the pruning loop.
    pub finetune: Steps,
    /// When set, the pruning loop plus final fine-tuning use exactly this
    /// many SGD steps; fine-tuning gets whatever the loop left over.
    pub budget_steps: Option<u64>,
    pub finetune_lr: Option<f64>,
    pub reset_stats: bool,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: "lenet-300-100".into(),
            data: "mnist:data/mnist".into(),
            seed: 0,
            lr: 0.05,
            momentum: 0.9,
            batch: 64,
            epochs: 10.0,
            mode: PruneMode::Fine,
            p: 0.5,
            schedule: Schedule::Constant,
            steps: Steps::Epochs(1.0),
            damping: DEFAULT_DAMPING,
            decay: DEFAULT_DECAY,
            fisher: FisherMode::Sampled,
            target_sparsity: None,
            target_flops_ratio: None,
            max_iterations: None,
            finetune: Steps::Count(0),
            budget_steps: None,
            finetune_lr: None,
            reset_stats: false,
            threads: 1,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

impl RunConfig {
    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies `key=value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let opt = |v: &str| v == "none" || v.is_empty();
        match key {
            "arch" => self.arch = v.to_string(),
            "data" => self.data = v.to_string(),
            "seed" => self.seed = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "mode" => self.mode = v.parse()?,
            "p" => self.p = num(key, v)?,
            "schedule" => self.schedule = v.parse()?,
            "steps" => self.steps = v.parse()?,
            "damping" => self.damping = num(key, v)?,
            "decay" => self.decay = num(key, v)?,
            "fisher" => {
                self.fisher = v
                    .parse()
                    .map_err(|_| Error::Config(format!("fisher must be sampled or empirical, got `{v}`")))?
            }
            "target_sparsity" => self.target_sparsity = if opt(v) { None } else { Some(num(key, v)?) },
            "target_flops_ratio" => self.target_flops_ratio = if opt(v) { None } else { Some(num(key, v)?) },
            "max_iterations" => self.max_iterations = if opt(v) { None } else { Some(num(key, v)?) },
            "finetune" => self.finetune = v.parse()?,
            "budget_steps" => self.budget_steps = if opt(v) { None } else { Some(num(key, v)?) },
            "finetune_lr" => self.finetune_lr = if opt(v) { None } else { Some(num(key, v)?) },
            "reset_stats" => self.reset_stats = boolean(key, v)?,
            "threads" => self.threads = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Checks the values every command relies on.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch == 0 {
            return fail("batch must be positive".into());
        }
        if !(self.epochs >= 0.0) {
            return fail(format!("epochs must be nonnegative, got {}", self.epochs));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return fail(format!("p must lie in (0, 1), got {}", self.p));
        }
        if matches!(self.steps, Steps::Count(0)) {
            return fail("steps must be at least 1".into());
        }
        if !(self.damping >= 0.0) {
            return fail(format!("damping must be nonnegative, got {}", self.damping));
        }
        if !(self.decay >= 0.0 && self.decay < 1.0) {
            return fail(format!("decay must lie in [0, 1), got {}", self.decay));
        }
        if self.threads != 1 {
            return fail(format!("only threads=1 is supported, got {}", self.threads));
        }
        Ok(())
    }

    /// The single stop rule a pruning run needs.
    pub fn stop_rule(&self) -> Result<StopRule> {
        let rules: Vec<StopRule> = [
            self.target_sparsity.map(StopRule::TargetSparsity),
            self.target_flops_ratio.map(StopRule::TargetFlopsRatio),
            self.max_iterations.map(StopRule::MaxIterations),
        ]
        .into_iter()
        .flatten()
        .collect();
        match rules.as_slice() {
            [StopRule::TargetSparsity(s)] if !(*s > 0.0 && *s < 1.0) => {
                Err(Error::Config(format!("target_sparsity must lie in (0, 1), got {s}")))
            }
            [StopRule::TargetFlopsRatio(r)] if !(*r > 1.0) => {
                Err(Error::Config(format!("target_flops_ratio must exceed 1, got {r}")))
            }
            [rule] => Ok(*rule),
            [] => Err(Error::Config(
                "set exactly one of target_sparsity, target_flops_ratio, max_iterations".into(),
            )),
            _ => Err(Error::Config("more than one stop rule set".into())),
        }
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        format!(
            "arch={}\ndata={}\nseed={}\nlr={}\nmomentum={}\nbatch={}\nepochs={}\nmode={}\np={}\nschedule={}\nsteps={}\n\
             damping={}\ndecay={}\nfisher={}\ntarget_sparsity={}\ntarget_flops_ratio={}\nmax_iterations={}\n\
             finetune={}\nbudget_steps={}\nfinetune_lr={}\nreset_stats={}\nthreads={}\n",
            self.arch.replace('\n', ";"),
            self.data,
            self.seed,
            self.lr,
            self.momentum,
            self.batch,
            self.epochs,
            self.mode,
            self.p,
            self.schedule,
            self.steps,
            self.damping,
            self.decay,
            self.fisher,
            opt(self.target_sparsity.map(|v| v.to_string())),
            opt(self.target_flops_ratio.map(|v| v.to_string())),
            opt(self.max_iterations.map(|v| v.to_string())),
            self.finetune,
            opt(self.budget_steps.map(|v| v.to_string())),
            opt(self.finetune_lr.map(|v| v.to_string())),
            self.reset_stats,
            self.threads,
        )
    }
}
