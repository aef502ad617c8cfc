//! One PASS/FAIL line per acceptance criterion. Criteria can be selected by
//! number: `cargo test --test acceptance -- 1 5 10`.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use kfprune::checkpoint::Checkpoint;
use kfprune::config::RunConfig;
use kfprune::data::{dataset_from_idx, load_mnist_dir, Dataset, Split};
use kfprune::kfac::DEFAULT_DAMPING;
use kfprune::nn::Model;
use kfprune::pipeline::{stream_rng, PruneSummary, Session};
use kfprune::verify::{
    closed_form_vs_elimination, compare_curvatures, factored_vs_dense, gradient_check, gradient_nets,
    importance_trials, independent_factorization, kronecker_identities, trained_toy,
};
use kfprune::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

const SEED: u64 = 0;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn timed<F: FnOnce() -> Result<Outcome, String>>(f: F) -> (Outcome, Duration) {
    let t = Instant::now();
    let o = f().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    (o, t.elapsed())
}

fn closed_form() -> Result<Outcome, String> {
    let t = Instant::now();
    let e = closed_form_vs_elimination(200, 20, SEED).map_err(|e| e.to_string())?;
    Ok(outcome(
        e <= 1e-8 && within(t.elapsed(), 10),
        format!("max rel error {e:.2e} (<= 1e-8), limit 10 s"),
    ))
}

fn factored() -> Result<Outcome, String> {
    let t = Instant::now();
    let (model, stats, data) = trained_toy(SEED).map_err(|e| e.to_string())?;
    let e = factored_vs_dense(&model, &stats, DEFAULT_DAMPING).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let cmp = compare_curvatures(&model, &stats, &data).map_err(|e| e.to_string())?;
    println!(
        "INFO  curvature: fisher-hessian Frobenius gap {:.4}, k-fac vs fisher gaps {}, diagonal rank agreement {:.3}",
        cmp.fisher_hessian_gap,
        cmp.kfac_fisher_gap
            .iter()
            .map(|(l, g)| format!("layer {l} {g:.3}"))
            .collect::<Vec<_>>()
            .join(", "),
        cmp.kfac_fisher_diag_rho
    );
    Ok(outcome(
        e <= 1e-8 && within(elapsed, 30),
        format!("max rel error {e:.2e} (<= 1e-8), limit 30 s"),
    ))
}

fn kronecker() -> Result<Outcome, String> {
    let t = Instant::now();
    let e = kronecker_identities(50, 8, SEED).map_err(|e| e.to_string())?;
    let gap = independent_factorization(50_000, 4, 3, SEED);
    Ok(outcome(
        e <= 1e-8 && gap <= 0.03 && within(t.elapsed(), 60),
        format!("identities {e:.2e} (<= 1e-8), factorization gap {gap:.4} (<= 0.03), limit 60 s"),
    ))
}

fn gradients() -> Result<Outcome, String> {
    let t = Instant::now();
    let mut rng = stream_rng(SEED, 40, 0);
    let mut worst = 0.0f64;
    let mut largest = 0;
    for (_, arch) in gradient_nets() {
        let m = Model::new(arch, SEED).map_err(|e| e.to_string())?;
        largest = largest.max(m.total_params());
        let n = 5;
        let x: Vec<f64> = (0..n * m.input_len()).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..m.num_classes())).collect();
        let x = Tensor::new(vec![n, m.input_len()], x).map_err(|e| e.to_string())?;
        worst = worst.max(gradient_check(&m, &x, &y, 1e-5, 1e-4).map_err(|e| e.to_string())?);
    }
    Ok(outcome(
        worst <= 1e-6 && largest <= 200 && within(t.elapsed(), 60),
        format!("max rel error {worst:.2e} (<= 1e-6), largest net {largest} params, limit 60 s"),
    ))
}

fn importance() -> Result<Outcome, String> {
    let t = Instant::now();
    let wins = importance_trials(100, SEED).map_err(|e| e.to_string())?;
    Ok(outcome(
        wins >= 95 && within(t.elapsed(), 300),
        format!("{wins}/100 paired trials (>= 95), limit 5 min"),
    ))
}

fn mnist() -> Result<(Dataset, Dataset), String> {
    let dir = common::mnist_dir().ok_or("MNIST not found; run scripts/fetch-mnist.sh or set KFPRUNE_MNIST")?;
    load_mnist_dir(&dir).map_err(|e| e.to_string())
}

fn mnist_cfg(extra: &str) -> Result<RunConfig, String> {
    RunConfig::parse(&format!("seed={SEED}\nthreads=1\n{extra}")).map_err(|e| e.to_string())
}

/// The fine-grained ladder run behind criteria 6 and 7.
fn fine_run() -> Result<(PruneSummary, Duration), String> {
    let t = Instant::now();
    let (train, test) = mnist()?;
    let cfg =
        mnist_cfg("arch=lenet-300-100\nepochs=10\nschedule=ladder\ntarget_sparsity=0.96\nsteps=1ep\nfinetune=2ep\n")?;
    let mut s = Session::new(cfg).map_err(|e| e.to_string())?;
    s.pretrain(&train).map_err(|e| e.to_string())?;
    let summary = s.prune(&train, &test, |_, _, _| Ok(())).map_err(|e| e.to_string())?;
    Ok((summary, t.elapsed()))
}

fn fine_compression(run: &Result<(PruneSummary, Duration), String>) -> Result<Outcome, String> {
    let (s, elapsed) = run.as_ref().map_err(Clone::clone)?;
    let drop = s.baseline_accuracy - s.final_accuracy;
    Ok(outcome(
        s.compression >= 20.0 && drop <= 0.015 && within(*elapsed, 1800),
        format!(
            "compression {:.2}x (>= 20), accuracy {:.4} -> {:.4}, drop {:.4} (<= 0.015), {:.0} s (<= 1800)",
            s.compression,
            s.baseline_accuracy,
            s.final_accuracy,
            drop,
            elapsed.as_secs_f64()
        ),
    ))
}

fn layer_ratios(run: &Result<(PruneSummary, Duration), String>) -> Result<Outcome, String> {
    let (s, _) = run.as_ref().map_err(Clone::clone)?;
    let frac = |e: &(usize, usize, usize)| e.1 as f64 / e.2 as f64;
    let first = frac(s.layer_remaining.first().ok_or("no layers")?);
    let last = frac(s.layer_remaining.last().ok_or("no layers")?);
    Ok(outcome(
        first < last,
        format!(
            "first layer {:.2}% remaining, last layer {:.2}%",
            100.0 * first,
            100.0 * last
        ),
    ))
}

/// Channel runs of criteria 8 and 9 from one pretrained LeNet-5, every run
/// spending the same number of SGD steps after pretraining.
struct ChannelRuns {
    pretrain: Duration,
    runs: Vec<(&'static str, PruneSummary, Duration)>,
}

fn channel_runs(all: bool) -> Result<ChannelRuns, String> {
    let t = Instant::now();
    let (train, test) = mnist()?;
    let cfg =
        mnist_cfg("arch=lenet5\nepochs=10\nmode=channel\ntarget_flops_ratio=2\nbudget_steps=9370\nfinetune_lr=0.01\n")?;
    let mut base = Session::new(cfg).map_err(|e| e.to_string())?;
    base.pretrain(&train).map_err(|e| e.to_string())?;
    let pretrain = t.elapsed();
    let mut configs = vec![("p=1%, T=0.2 epoch", "p=0.01\nsteps=0.2ep")];
    if all {
        configs.push(("p=0.5%, T=0.1 epoch", "p=0.005\nsteps=0.1ep"));
        configs.push(("p=2%, T=0.4 epoch", "p=0.02\nsteps=0.4ep"));
    }
    let mut runs = Vec::new();
    for (name, extra) in configs {
        let t = Instant::now();
        let mut s = base.clone();
        s.cfg.apply_text(extra).map_err(|e| e.to_string())?;
        let summary = s.prune(&train, &test, |_, _, _| Ok(())).map_err(|e| e.to_string())?;
        println!(
            "INFO  channel run {name}: {} iterations, flops ratio {:.3}, accuracy {:.4} -> {:.4} (pruned {:.4}), {:.0} s",
            summary.rows.len(),
            summary.flops_ratio,
            summary.baseline_accuracy,
            summary.final_accuracy,
            summary.pruned_accuracy,
            t.elapsed().as_secs_f64()
        );
        runs.push((name, summary, t.elapsed()));
    }
    Ok(ChannelRuns { pretrain, runs })
}

fn channel_single(runs: &Result<ChannelRuns, String>) -> Result<Outcome, String> {
    let r = runs.as_ref().map_err(Clone::clone)?;
    let (_, s, elapsed) = &r.runs[0];
    let total = r.pretrain + *elapsed;
    let drop = s.baseline_accuracy - s.final_accuracy;
    Ok(outcome(
        s.flops_ratio >= 2.0 && drop <= 0.01 && within(total, 2700),
        format!(
            "flops ratio {:.3} (>= 2), accuracy {:.4} -> {:.4}, drop {:.4} (<= 0.01), {:.0} s (<= 2700)",
            s.flops_ratio,
            s.baseline_accuracy,
            s.final_accuracy,
            drop,
            total.as_secs_f64()
        ),
    ))
}

fn channel_robust(runs: &Result<ChannelRuns, String>) -> Result<Outcome, String> {
    let r = runs.as_ref().map_err(Clone::clone)?;
    if r.runs.len() < 3 {
        return Err("requires all three channel runs".into());
    }
    let accs: Vec<f64> = r.runs.iter().map(|(_, s, _)| s.final_accuracy).collect();
    let hi = accs.iter().cloned().fold(f64::MIN, f64::max);
    let lo = accs.iter().cloned().fold(f64::MAX, f64::min);
    let all_reached = r.runs.iter().all(|(_, s, _)| s.flops_ratio >= 2.0);
    let listing: Vec<String> = r
        .runs
        .iter()
        .map(|(n, s, _)| format!("{n}: {:.4}", s.final_accuracy))
        .collect();
    Ok(outcome(
        hi - lo <= 0.005 && all_reached,
        format!("{}; spread {:.4} (<= 0.005)", listing.join(", "), hi - lo),
    ))
}

fn formats() -> Result<Outcome, String> {
    let mut notes = Vec::new();
    let mut ok = true;
    match mnist().and_then(|(train, test)| {
        (train.len() == 60_000
            && test.len() == 10_000
            && train.sample_shape == [1, 28, 28]
            && test.split == Split::Test)
            .then_some(())
            .ok_or_else(|| "unexpected MNIST shape".to_string())
    }) {
        Ok(()) => notes.push("canonical MNIST accepted".to_string()),
        Err(e) => {
            ok = false;
            notes.push(e);
        }
    }
    let mut rejected = 0;
    for (name, img, lab, expected) in common::mutated_corpora() {
        match dataset_from_idx(&img, &lab, Split::Train) {
            Err(e) if expected(&e) => rejected += 1,
            Err(e) => notes.push(format!("{name}: wrong class {e}")),
            Ok(_) => notes.push(format!("{name}: accepted")),
        }
    }
    ok &= rejected == 10;
    notes.push(format!(
        "{rejected}/10 mutated corpora rejected with the expected class"
    ));

    let cfg = RunConfig::parse(
        "arch=input 4; dense 4 8; relu; dense 8 3\ndata=gaussian:300:4:3:6\nbatch=20\nepochs=3\nlr=0.05\nsteps=5\np=0.2\n",
    )
    .map_err(|e| e.to_string())?;
    let (train, test) = kfprune::pipeline::load_data(&cfg).map_err(|e| e.to_string())?;
    let mut a = Session::new(cfg.clone()).map_err(|e| e.to_string())?;
    a.pretrain(&train).map_err(|e| e.to_string())?;
    let mut b = a.clone();
    let step = |s: &mut Session| -> Result<String, String> {
        s.prune_iteration(&train, &test)
            .map_err(|e| e.to_string())?
            .map(|r| r.1)
    };
    let mut plans_a = Vec::new();
    for _ in 0..4 {
        plans_a.push(step(&mut a)?);
    }
    let mut plans_b = vec![step(&mut b)?, step(&mut b)?];
    let bytes = b.checkpoint().to_bytes();
    let back = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let exact = back.to_bytes() == bytes && back == b.checkpoint();
    let mut c = Session::resume(cfg, back).map_err(|e| e.to_string())?;
    plans_b.push(step(&mut c)?);
    plans_b.push(step(&mut c)?);
    let resumed = plans_a == plans_b && a.checkpoint().to_bytes() == c.checkpoint().to_bytes();
    notes.push(format!(
        "round trip bit-exact: {exact}, resume deterministic: {resumed}"
    ));
    ok &= exact && resumed;
    Ok(outcome(ok, notes.join("; ")))
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut results: Vec<(u32, &str, Outcome, Duration)> = Vec::new();
    let mut report = |n: u32, name: &'static str, (o, d): (Outcome, Duration)| {
        println!(
            "{}  {n:>2}  {name}: {} [{:.1} s]",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            d.as_secs_f64()
        );
        results.push((n, name, o, d));
    };

    if want(1) {
        report(
            1,
            "closed-form removal equals constrained minimization",
            timed(closed_form),
        );
    }
    if want(2) {
        report(2, "factored importance equals dense block", timed(factored));
    }
    if want(3) {
        report(3, "Kronecker algebra and factorization", timed(kronecker));
    }
    if want(4) {
        report(4, "gradients match central differences", timed(gradients));
    }
    if want(5) {
        report(5, "importance beats random removal", timed(importance));
    }
    if want(6) || want(7) {
        let run = fine_run();
        if let Ok((s, _)) = &run {
            print!(
                "{}",
                s.to_text().lines().map(|l| format!("INFO  {l}\n")).collect::<String>()
            );
        }
        if want(6) {
            report(
                6,
                "LeNet-300-100 fine-grained compression",
                timed(|| fine_compression(&run)),
            );
        }
        if want(7) {
            report(7, "first layer pruned harder than last", timed(|| layer_ratios(&run)));
        }
    }
    if want(8) || want(9) {
        let runs = channel_runs(want(9));
        if want(8) {
            report(
                8,
                "LeNet-5 channel pruning to 2x FLOPs",
                timed(|| channel_single(&runs)),
            );
        }
        if want(9) {
            report(9, "channel pruning robust to p and T", timed(|| channel_robust(&runs)));
        }
    }
    if want(10) {
        report(10, "IDX and checkpoint format conformance", timed(formats));
    }

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
