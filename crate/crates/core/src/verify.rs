//! Numerical self-checks comparing the fast code paths with the dense
//! oracles. Each check returns what it measured; callers decide tolerances.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::RunConfig;
use crate::data::{dataset_loss, Dataset};
use crate::error::{Error, Result};
use crate::kfac::{block_inverse, FisherMode, ModelStats};
use crate::linalg::{gemm, kron, spd_inverse, symmetrize};
use crate::nn::{Architecture, Model};
use crate::obs::{apply_victims, block_inverses, delta_w, importance, importance_map};
use crate::oracle::{
    constrained_min, expected_fisher, finite_diff_hessian, gauss_jordan_inverse, obs_quadratic, param_index,
    rank_agreement, DenseCurvature,
};
use crate::pipeline::{load_data, stream_rng, Session};
use crate::tensor::Tensor;

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `B Bᵀ / n + shift·I` for a Gaussian `B`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> Vec<f64> {
    let b = gaussian(rng, n * n);
    let mut m = vec![0.0; n * n];
    gemm(n, n, n, 1.0 / n as f64, &b, false, &b, true, 0.0, &mut m);
    for d in 0..n {
        m[d * n + d] += shift;
    }
    symmetrize(&mut m, n);
    m
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max(rel(*x, *y)))
}

/// Largest disagreement between the closed-form removal cost and update
/// and direct constrained minimization, over random SPD problems.
pub fn closed_form_vs_elimination(trials: usize, max_n: usize, seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, 10, 0);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(2..=max_n);
        let h = random_spd(&mut rng, n, 0.1);
        let w = gaussian(&mut rng, n);
        let q = rng.random_range(0..n);
        let (loss, delta) = obs_quadratic(&h, n, &w, q, 0.0)?;
        let (loss2, delta2) = constrained_min(&h, n, &w, q)?;
        worst = worst.max(rel(loss, loss2)).max(max_rel(&delta, &delta2));
    }
    Ok(worst)
}

/// Largest disagreement between the factored importance and update of each
/// layer and the dense computation on the reconstructed damped block.
pub fn factored_vs_dense(model: &Model, stats: &ModelStats, damping: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for l in model.param_layers() {
        let st = stats.get(l)?;
        let inv = block_inverse(l, st, damping)?;
        let (p, r) = (st.a_side(), st.ds_side());
        let damp = |m: &[f64], n: usize| {
            let mut d = m.to_vec();
            symmetrize(&mut d, n);
            for k in 0..n {
                d[k * n + k] += damping;
            }
            d
        };
        let block = kron(&damp(st.a(), p), p, &damp(st.ds(), r), r);
        let n = p * r;
        let layer = model.layer(l);
        let mut w = vec![0.0; n];
        for i in 0..r {
            for j in 0..p {
                w[inv.vec_index(i, j)] = layer.weights.data()[i * p + j];
            }
        }
        for (q, score) in importance(l, layer, &inv)? {
            let (i, j) = (q / p, q % p);
            let (loss, delta) = obs_quadratic(&block, n, &w, inv.vec_index(i, j), 0.0)?;
            let factored = delta_w(layer, i, j, &inv);
            let mut dense = vec![0.0; r * p];
            for ii in 0..r {
                for jj in 0..p {
                    dense[ii * p + jj] = delta[inv.vec_index(ii, jj)];
                }
            }
            worst = worst.max(rel(score, loss)).max(max_rel(&factored, &dense));
        }
    }
    Ok(worst)
}

/// Largest violation of `(A⊗B)⁻¹ = A⁻¹⊗B⁻¹`, `(A⊗B)(C⊗D) = AC⊗BD` and
/// `(A⊗B)·vec(X) = vec(B X Aᵀ)` (column-stacked) for random factors.
pub fn kronecker_identities(trials: usize, max_side: usize, seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, 11, 0);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let p = rng.random_range(1..=max_side);
        let r = rng.random_range(1..=max_side);
        let a = random_spd(&mut rng, p, 0.5);
        let b = random_spd(&mut rng, r, 0.5);
        let n = p * r;
        let big = kron(&a, p, &b, r);

        let dense_inv = gauss_jordan_inverse(&big, n)?;
        let ai = spd_inverse(&a, p).map_err(|c| Error::SingularMatrix(format!("condition {c}")))?;
        let bi = spd_inverse(&b, r).map_err(|c| Error::SingularMatrix(format!("condition {c}")))?;
        worst = worst.max(max_rel(&dense_inv, &kron(&ai, p, &bi, r)));

        let c = gaussian(&mut rng, p * p);
        let d = gaussian(&mut rng, r * r);
        let mut lhs = vec![0.0; n * n];
        gemm(n, n, n, 1.0, &big, false, &kron(&c, p, &d, r), false, 0.0, &mut lhs);
        let (mut ac, mut bd) = (vec![0.0; p * p], vec![0.0; r * r]);
        gemm(p, p, p, 1.0, &a, false, &c, false, 0.0, &mut ac);
        gemm(r, r, r, 1.0, &b, false, &d, false, 0.0, &mut bd);
        worst = worst.max(max_rel(&lhs, &kron(&ac, p, &bd, r)));

        // X is r x p; vec stacks its columns.
        let x = gaussian(&mut rng, r * p);
        let vec_x: Vec<f64> = (0..p)
            .flat_map(|j| (0..r).map(move |i| (i, j)))
            .map(|(i, j)| x[i * p + j])
            .collect();
        let mut prod = vec![0.0; n];
        gemm(n, n, 1, 1.0, &big, false, &vec_x, false, 0.0, &mut prod);
        let (mut bx, mut bxa) = (vec![0.0; r * p], vec![0.0; r * p]);
        gemm(r, r, p, 1.0, &b, false, &x, false, 0.0, &mut bx);
        gemm(r, p, p, 1.0, &bx, false, &a, true, 0.0, &mut bxa);
        let vec_bxa: Vec<f64> = (0..p)
            .flat_map(|j| (0..r).map(move |i| (i, j)))
            .map(|(i, j)| bxa[i * p + j])
            .collect();
        worst = worst.max(max_rel(&prod, &vec_bxa));
    }
    Ok(worst)
}

/// Relative Frobenius gap between the second moment of `a ⊗ g` and the
/// Kronecker product of the separate second moments, for independently
/// drawn correlated Gaussian `a` (side `p`) and `g` (side `r`).
pub fn independent_factorization(samples: usize, p: usize, r: usize, seed: u64) -> f64 {
    let mut rng = stream_rng(seed, 12, 0);
    let la = gaussian(&mut rng, p * p);
    let lg = gaussian(&mut rng, r * r);
    let n = p * r;
    let (mut a_mom, mut g_mom, mut full) = (vec![0.0; p * p], vec![0.0; r * r], vec![0.0; n * n]);
    let chunk = 1000;
    let mut done = 0;
    while done < samples {
        let m = chunk.min(samples - done);
        let (za, zg) = (gaussian(&mut rng, m * p), gaussian(&mut rng, m * r));
        let (mut a, mut g) = (vec![0.0; m * p], vec![0.0; m * r]);
        gemm(m, p, p, 1.0, &za, false, &la, true, 0.0, &mut a);
        gemm(m, r, r, 1.0, &zg, false, &lg, true, 0.0, &mut g);
        let mut outer = vec![0.0; m * n];
        for s in 0..m {
            for j in 0..p {
                for i in 0..r {
                    outer[s * n + j * r + i] = a[s * p + j] * g[s * r + i];
                }
            }
        }
        let inv = 1.0 / samples as f64;
        gemm(p, m, p, inv, &a, true, &a, false, 1.0, &mut a_mom);
        gemm(r, m, r, inv, &g, true, &g, false, 1.0, &mut g_mom);
        gemm(n, m, n, inv, &outer, true, &outer, false, 1.0, &mut full);
        done += m;
    }
    let fac = kron(&a_mom, p, &g_mom, r);
    let diff: f64 = full.iter().zip(&fac).map(|(x, y)| (x - y) * (x - y)).sum();
    let norm: f64 = full.iter().map(|x| x * x).sum();
    (diff / norm).sqrt()
}

/// Largest relative disagreement between backpropagated gradients and
/// central differences of the loss, with the denominator floored at `floor`.
pub fn gradient_check(model: &Model, x: &Tensor, labels: &[usize], eps: f64, floor: f64) -> Result<f64> {
    let mut work = model.clone();
    work.forward(x)?;
    let grads = work.backward(labels)?.grads;
    let mut worst = 0.0f64;
    for (l, i, j) in param_index(model) {
        let cols = model.layer(l).cols();
        let q = i * cols + j;
        let w0 = model.layer(l).weights.data()[q];
        work.layer_mut(l).weights.data_mut()[q] = w0 + eps;
        let plus = work.loss(x, labels)?;
        work.layer_mut(l).weights.data_mut()[q] = w0 - eps;
        let minus = work.loss(x, labels)?;
        work.layer_mut(l).weights.data_mut()[q] = w0;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads[l].as_ref().expect("parameterized").data()[q];
        worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(floor));
    }
    Ok(worst)
}

/// Small networks covering every layer kind, each under 200 parameters.
pub fn gradient_nets() -> Vec<(&'static str, Architecture)> {
    [
        ("dense", "input 6; dense 6 8; relu; dense 8 4"),
        (
            "conv",
            "input 2 5 5; conv2d 2 3 3 3 stride=2 pad=1; relu; flatten; dense 27 3",
        ),
        (
            "residual",
            "input 1 4 4; conv2d 1 2 3 3 pad=1; relu; conv2d 2 2 3 3 pad=1; add 1; relu; flatten; dense 32 3",
        ),
    ]
    .into_iter()
    .map(|(name, text)| (name, Architecture::parse(text).expect("valid test architecture")))
    .collect()
}

/// The tiny 4-8-3 classifier trained full-batch on teacher-labelled data,
/// with curvature statistics gathered over a few further steps.
pub fn trained_toy(seed: u64) -> Result<(Model, ModelStats, Dataset)> {
    let cfg = RunConfig::parse(&format!(
        "arch=mlp-4-8-3\ndata=teacher:400:4:3:8\nseed={seed}\nbatch=400\nepochs=3000\nlr=0.1\nmomentum=0.9\n"
    ))?;
    let (train, _) = load_data(&cfg)?;
    let mut s = Session::new(cfg)?;
    s.pretrain(&train)?;
    let mut rng = stream_rng(seed, 13, 0);
    s.run_steps(&train, 20, Some((FisherMode::Sampled, &mut rng)))?;
    Ok((s.model, s.stats, train))
}

/// Training-loss increases of pruning the `frac` least important weights
/// (with their compensating update) and of zeroing the same number of
/// uniformly random weights.
pub fn importance_vs_random(
    model: &Model,
    stats: &ModelStats,
    data: &Dataset,
    frac: f64,
    rng: &mut ChaCha8Rng,
    damping: f64,
) -> Result<(f64, f64)> {
    let base = dataset_loss(model, data)?;
    let inverses = block_inverses(model, stats, damping)?;
    let imap = importance_map(model, &inverses)?;
    let k = (frac * imap.total() as f64).floor() as usize;
    let (lambda, picked) = crate::obs::select_smallest(&imap, k);
    let mut by_importance = model.clone();
    apply_victims(&mut by_importance, &inverses, &imap, lambda, &picked);

    let all: Vec<(usize, usize)> = imap
        .layers
        .iter()
        .flat_map(|l| l.normalized.iter().map(move |&(q, _)| (l.layer, q)))
        .collect();
    let mut by_chance = model.clone();
    for t in sample(rng, all.len(), k) {
        let (l, q) = all[t];
        by_chance.layer_mut(l).kill(q);
        by_chance.layer_mut(l).project();
    }
    Ok((
        dataset_loss(&by_importance, data)? - base,
        dataset_loss(&by_chance, data)? - base,
    ))
}

/// Paired trials, each on its own trained toy network: how often the
/// importance-selected removal raises the training loss strictly less than
/// random removal.
pub fn importance_trials(trials: u64, seed: u64) -> Result<usize> {
    let mut wins = 0;
    for t in 0..trials {
        let (model, stats, data) = trained_toy(seed.wrapping_add(t))?;
        let mut rng = stream_rng(seed.wrapping_add(t), 16, 0);
        let (di, dr) = importance_vs_random(&model, &stats, &data, 0.05, &mut rng, crate::kfac::DEFAULT_DAMPING)?;
        if di < dr {
            wins += 1;
        }
    }
    Ok(wins)
}

/// Dense exact Fisher, finite-difference Hessian and per-layer K-FAC blocks
/// for a small model, with their relative gaps and the Spearman agreement
/// of the K-FAC and exact-Fisher diagonals.
#[derive(Debug, Clone)]
pub struct CurvatureComparison {
    pub fisher_hessian_gap: f64,
    pub kfac_fisher_gap: Vec<(usize, f64)>,
    pub kfac_fisher_diag_rho: f64,
}

pub fn compare_curvatures(model: &Model, stats: &ModelStats, data: &Dataset) -> Result<CurvatureComparison> {
    let fisher = expected_fisher(model, &data.images)?;
    let hessian = finite_diff_hessian(model, &data.images, &data.labels, 1e-4)?;
    let mut gaps = Vec::new();
    let (mut kd, mut fd) = (Vec::new(), Vec::new());
    for l in model.param_layers() {
        let block: DenseCurvature = crate::oracle::kfac_block(l, stats.get(l)?);
        let exact = fisher.layer_block(l);
        let mut reordered = vec![0.0; exact.n * exact.n];
        for (r, key) in exact.index.iter().enumerate() {
            let br = block.position(*key).expect("same parameters");
            for (c, key2) in exact.index.iter().enumerate() {
                reordered[r * exact.n + c] = block.at(br, block.position(*key2).expect("same parameters"));
            }
            kd.push(reordered[r * exact.n + r]);
            fd.push(exact.at(r, r));
        }
        let kfac = DenseCurvature {
            matrix: reordered,
            n: exact.n,
            kind: block.kind,
            index: exact.index.clone(),
        };
        gaps.push((l, kfac.relative_gap(&exact)));
    }
    Ok(CurvatureComparison {
        fisher_hessian_gap: fisher.relative_gap(&hessian),
        kfac_fisher_gap: gaps,
        kfac_fisher_diag_rho: rank_agreement(&kd, &fd)?,
    })
}

/// One line of a verification run.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// The full self-check suite with fixed tolerances.
pub fn run_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let e = closed_form_vs_elimination(200, 20, seed)?;
    out.push(Check {
        name: "closed-form removal matches constrained minimization",
        passed: e <= 1e-8,
        detail: format!("max relative error {e:.3e}"),
    });

    let (model, stats, data) = trained_toy(seed)?;
    let e = factored_vs_dense(&model, &stats, crate::kfac::DEFAULT_DAMPING)?;
    out.push(Check {
        name: "factored importance matches dense block",
        passed: e <= 1e-8,
        detail: format!("max relative error {e:.3e}"),
    });

    let e = kronecker_identities(50, 8, seed)?;
    out.push(Check {
        name: "Kronecker identities",
        passed: e <= 1e-8,
        detail: format!("max relative error {e:.3e}"),
    });

    let gap = independent_factorization(50_000, 4, 3, seed);
    out.push(Check {
        name: "independent samples factorize",
        passed: gap <= 0.03,
        detail: format!("relative Frobenius gap {gap:.4}"),
    });

    let mut worst = 0.0f64;
    let mut rng = stream_rng(seed, 15, 0);
    for (_, arch) in gradient_nets() {
        let m = Model::new(arch, seed)?;
        let x = Tensor::from_parts(vec![5, m.input_len()], gaussian(&mut rng, 5 * m.input_len()));
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..m.num_classes())).collect();
        worst = worst.max(gradient_check(&m, &x, &labels, 1e-5, 1e-4)?);
    }
    out.push(Check {
        name: "gradients match central differences",
        passed: worst <= 1e-6,
        detail: format!("max relative error {worst:.3e}"),
    });

    let wins = importance_trials(100, seed)?;
    out.push(Check {
        name: "importance beats random selection",
        passed: wins >= 95,
        detail: format!("{wins}/100 trials"),
    });

    let cmp = compare_curvatures(&model, &stats, &data)?;
    out.push(Check {
        name: "curvature comparison (reported)",
        passed: true,
        detail: format!(
            "fisher-hessian gap {:.3}, kfac-fisher gaps {:?}, diagonal rank agreement {:.3}",
            cmp.fisher_hessian_gap, cmp.kfac_fisher_gap, cmp.kfac_fisher_diag_rho
        ),
    });
    Ok(out)
}
