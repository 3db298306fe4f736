//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.
//!
//! The MNIST criteria read the IDX files from `WOODPRUNE_MNIST_DIR`
//! (default `data/mnist` at the workspace root; see `scripts/fetch_mnist.sh`).

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

mod common;

use common::write_idx_fixture;
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use woodprune::cli::load_mnist_dir;
use woodprune::fisher::{
    chunk_ranges, woodfisher_build, BlockStorage, DiagonalFisher, EmpiricalFisher, ExplicitInverse,
    FisherConfig, GradSample, InverseCurvature, IsotropicInverse, FULL_LAYER,
};
use woodprune::io::Dataset;
use woodprune::model::{sgd_train, MlpModel, TrainConfig};
use woodprune::objective::{Objective, Quadratic};
use woodprune::oracle::{
    dense_empirical_fisher, dense_inverse, exact_pair_removal, exact_single_removal, kkt_solve,
    DenseMatrix,
};
use woodprune::pruner::one_shot_prune;
use woodprune::pruner::{
    flops_normalize, pruning_direction, pruning_scan, quad_scan, select_quotas, stat_magnitude,
    stat_obd, stat_structured, stat_woodfisher, stat_woodtaylor, structured_direction,
    woodtaylor_direction, GroupMode, GroupSpec, Method, OneShotConfig, PruneStat, Quota, Scope,
    StatKind,
};
use woodprune::schedule::{gradual_prune, sparsity_at, GradualConfig};
use woodprune::space::{
    count_for_fraction, flops_per_param, FlopEntry, FlopTable, LayerLayout, Mask, ParamSpace,
};

type Outcome = Result<String, String>;

fn check(pass: bool, detail: String) -> Outcome {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- helpers

fn normal_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `B Bᵀ / d + shift I` with standard normal `B`.
fn random_spd<R: Rng>(d: usize, shift: f64, rng: &mut R) -> DenseMatrix<f64> {
    let b = normal_vec(d * d, rng);
    let mut h = DenseMatrix::zeros(d);
    for i in 0..d {
        for j in 0..d {
            let v: f64 = (0..d).map(|k| b[i * d + k] * b[j * d + k]).sum::<f64>() / d as f64;
            h.set(i, j, v + if i == j { shift } else { 0.0 });
        }
    }
    h
}

fn flat(w: &[f64]) -> ParamSpace<f64> {
    ParamSpace::new(w.to_vec(), LayerLayout::weight_blocks(&[w.len()]).unwrap()).unwrap()
}

fn explicit_inverse(h: &DenseMatrix<f64>) -> ExplicitInverse<f64> {
    ExplicitInverse::new(h.n(), dense_inverse(h).unwrap().into_vec()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Removes `k` weights from the single segment of `w`.
fn pick(stat: &PruneStat<f64>, w: &ParamSpace<f64>, k: usize) -> Vec<usize> {
    let q = [Quota {
        segments: vec![0],
        remove: k,
    }];
    select_quotas(stat, w, &Mask::all_active(w.dim()), &q).unwrap()
}

/// Indices ordered by ascending value, ties by index.
fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let order = argsort(v);
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn deterministic_runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        PtConfig {
            cases,
            failure_persistence: None,
            ..PtConfig::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

// ------------------------------------------------------------------ MNIST

const SEEDS: [u64; 3] = [0, 1, 2];
const MLP: [usize; 4] = [784, 40, 20, 10];

struct Mnist {
    train: Dataset<f64>,
    test: Dataset<f64>,
    /// Dense networks trained with the default SGD settings, one per seed.
    models: Vec<MlpModel<f64>>,
    accuracy: Vec<f64>,
    train_time: Duration,
}

fn mnist_dir() -> PathBuf {
    match std::env::var_os("WOODPRUNE_MNIST_DIR") {
        Some(d) => PathBuf::from(d),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

fn mnist() -> Result<&'static Mnist, String> {
    static CELL: OnceLock<Result<Mnist, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = mnist_dir();
        let (train, test) = load_mnist_dir(&dir, None, None).map_err(|e| {
            format!(
                "MNIST not available in {} ({e}); run scripts/fetch_mnist.sh",
                dir.display()
            )
        })?;
        let start = Instant::now();
        let mut models = Vec::new();
        let mut accuracy = Vec::new();
        for seed in SEEDS {
            let mut m = MlpModel::init(&MLP, seed).map_err(|e| e.to_string())?;
            let cfg = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let mask = Mask::all_active(m.space().dim());
            sgd_train(&mut m, &train, None, &cfg, &mask).map_err(|e| e.to_string())?;
            accuracy.push(m.evaluate(&test).map_err(|e| e.to_string())?.accuracy);
            models.push(m);
        }
        Ok(Mnist {
            train,
            test,
            models,
            accuracy,
            train_time: start.elapsed(),
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn one_shot_accuracy(data: &Mnist, k: usize, cfg: &OneShotConfig) -> f64 {
    let m = &data.models[k];
    one_shot_prune(
        m,
        &Mask::from_zeros(m.space()),
        &data.train,
        &data.test,
        cfg,
        None,
    )
    .unwrap()
    .report
    .accuracy_after
}

// --------------------------------------------------------------- criteria

/// Chunked WoodFisher blocks against the dense inverse of the same
/// dampened empirical Fisher.
fn c01_woodbury_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let storages = [
        BlockStorage::Auto,
        BlockStorage::Dense,
        BlockStorage::Factored,
    ];
    for inst in 0..50 {
        let damp = if inst % 2 == 0 { 1e-5 } else { 1e-1 };
        let d = rng.random_range(2..=64usize);
        let m = rng.random_range(1..=128usize);
        let nseg = rng.random_range(1..=d.min(3));
        let mut cuts: Vec<usize> = (0..nseg - 1).map(|_| rng.random_range(1..d)).collect();
        cuts.sort_unstable();
        cuts.dedup();
        let mut lens = Vec::new();
        let mut prev = 0;
        for c in cuts.into_iter().chain([d]) {
            lens.push(c - prev);
            prev = c;
        }
        let layout = LayerLayout::weight_blocks(&lens).unwrap();
        let chunk = if rng.random_bool(0.25) {
            FULL_LAYER
        } else {
            rng.random_range(1..=d)
        };
        let cfg = FisherConfig {
            damp,
            chunk_size: chunk,
            storage: storages[inst % 3],
            ..FisherConfig::default()
        };
        let samples: Vec<GradSample<f64>> = (0..m)
            .map(|_| GradSample {
                grad: normal_vec(d, &mut rng),
                weight: 1,
            })
            .collect();
        let inv = woodfisher_build(&samples, &layout, &cfg).unwrap();
        let ranges: Vec<_> = inv.chunks().iter().map(|c| c.range.clone()).collect();
        if ranges != chunk_ranges(&layout, chunk) {
            return Err(format!(
                "instance {inst}: chunk ranges {ranges:?} do not tile the layout"
            ));
        }
        for c in inv.chunks() {
            let sub: Vec<GradSample<f64>> = samples
                .iter()
                .map(|s| GradSample {
                    grad: s.grad[c.range.clone()].to_vec(),
                    weight: s.weight,
                })
                .collect();
            let oracle =
                dense_inverse(&dense_empirical_fisher(&sub, c.range.len(), damp).unwrap()).unwrap();
            let err = max_abs_diff(&c.to_dense(), oracle.as_slice());
            let e = worst.entry(format!("λ={damp:e}")).or_insert(0.0);
            *e = e.max(err);
        }
    }
    let elapsed = start.elapsed();
    let max = worst.values().copied().fold(0.0, f64::max);
    check(
        max <= 1e-8 && elapsed < Duration::from_secs(5),
        format!(
            "max-abs error by dampening {worst:?} (tol 1e-8), {:.2?} (limit 5 s)",
            elapsed
        ),
    )
}

/// Single-removal multiplier, perturbation and loss change against the KKT
/// solution, and the selected index against the exact argmin.
fn c02_closed_form_obs() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (mut worst, mut matched) = (0.0f64, 0);
    for _ in 0..100 {
        let d = rng.random_range(2..=12usize);
        let h = random_spd(d, 0.1, &mut rng);
        let w = normal_vec(d, &mut rng);
        let space = flat(&w);
        let mask = Mask::all_active(d);
        let inv = explicit_inverse(&h);
        let diag = inv.inverse_diagonal();
        let stat = stat_woodfisher(&space, &inv, &mask).unwrap();
        let table = exact_single_removal(&w, &h).unwrap();
        for q in 0..d {
            let mut e = vec![0.0; d];
            e[q] = 1.0;
            let kkt = kkt_solve(&h, &vec![0.0; d], &[e], &[-w[q]]).unwrap();
            let delta = pruning_direction(&space, &inv, &mask, &[q]).unwrap();
            worst = worst
                .max((w[q] / diag[q] - kkt.multipliers[0]).abs())
                .max(max_abs_diff(&delta, &kkt.x))
                .max((stat.rho[q] - kkt.objective).abs())
                .max((stat.rho[q] - table.delta_loss[q]).abs());
        }
        if pick(&stat, &space, 1) == vec![table.best] {
            matched += 1;
        }
    }
    check(
        worst <= 1e-10 && matched == 100,
        format!("max deviation {worst:.3e} (tol 1e-10), argmin matched {matched}/100"),
    )
}

/// Identity inverse gives the magnitude ranking; a diagonal Hessian gives
/// the OBD ranking.
fn c03_reductions() -> Outcome {
    let strategy = (2usize..40).prop_flat_map(|n| {
        (
            proptest::collection::vec(-3.0f64..3.0, n),
            proptest::collection::vec(0.01f64..10.0, n),
        )
    });
    let mut runner = deterministic_runner(1000);
    let result = runner.run(&strategy, |(w, h)| {
        let n = w.len();
        let space = flat(&w);
        let mask = Mask::all_active(n);
        let id = IsotropicInverse { dim: n, scale: 1.0 };
        let wf = stat_woodfisher(&space, &id, &mask).unwrap();
        let mag = stat_magnitude(&space, &mask).unwrap();
        prop_assert_eq!(argsort(&wf.rho), argsort(&mag.rho));
        let diag = DiagonalFisher { diag: h.clone() };
        let wf = stat_woodfisher(&space, &diag, &mask).unwrap();
        let obd = stat_obd(&space, &h, &mask, StatKind::Obd).unwrap();
        prop_assert_eq!(argsort(&wf.rho), argsort(&obd.rho));
        for k in [1, n / 2, n] {
            prop_assert_eq!(pick(&wf, &space, k), pick(&obd, &space, k));
        }
        Ok(())
    });
    match result {
        Ok(()) => Ok("1000 random weight vectors: identical argsorts for both reductions".into()),
        Err(e) => Err(format!("{e}")),
    }
}

fn random_chunked_inverse<R: Rng>(d: usize, rng: &mut R) -> woodprune::WoodFisher {
    let m = rng.random_range(1..=2 * d);
    let samples: Vec<GradSample<f64>> = (0..m)
        .map(|_| GradSample {
            grad: normal_vec(d, rng),
            weight: 1,
        })
        .collect();
    let cfg = FisherConfig {
        damp: 1e-1,
        chunk_size: rng.random_range(1..=d),
        ..FisherConfig::default()
    };
    woodfisher_build(&samples, &LayerLayout::weight_blocks(&[d]).unwrap(), &cfg).unwrap()
}

/// Zero gradient: WoodTaylor equals WoodFisher.
fn c04_woodtaylor_degeneration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = 0.0f64;
    let mut same_selection = 0;
    for _ in 0..1000 {
        let d = rng.random_range(2..=24usize);
        let inv = random_chunked_inverse(d, &mut rng);
        let w = normal_vec(d, &mut rng);
        let space = flat(&w);
        let mask = Mask::all_active(d);
        let zero = vec![0.0; d];
        let wf = stat_woodfisher(&space, &inv, &mask).unwrap();
        let wt = stat_woodtaylor(&space, &inv, &zero, &mask).unwrap();
        worst = worst.max(max_abs_diff(&wf.rho, &wt.rho));
        let k = rng.random_range(1..=d);
        let (sf, st) = (pick(&wf, &space, k), pick(&wt, &space, k));
        if sf == st {
            same_selection += 1;
        }
        let df = pruning_direction(&space, &inv, &mask, &sf).unwrap();
        let dt = woodtaylor_direction(&space, &inv, &zero, &mask, &sf).unwrap();
        worst = worst.max(max_abs_diff(&df, &dt));
    }
    check(
        worst <= 1e-12 && same_selection == 1000,
        format!(
            "max deviation {worst:.3e} (tol 1e-12), identical selections {same_selection}/1000"
        ),
    )
}

/// The WoodTaylor step for the selected weight changes a quadratic by the
/// predicted amount.
fn c05_woodtaylor_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.random_range(2..=12usize);
        let h = random_spd(d, 0.1, &mut rng);
        let w = normal_vec(d, &mut rng);
        let g: Vec<f64> = normal_vec(d, &mut rng).iter().map(|x| 0.5 * x).collect();
        let space = flat(&w);
        let mask = Mask::all_active(d);
        let inv = explicit_inverse(&h);
        let stat = stat_woodtaylor(&space, &inv, &g, &mask).unwrap();
        let q = pick(&stat, &space, 1)[0];
        let delta = woodtaylor_direction(&space, &inv, &g, &mask, &[q]).unwrap();
        let hg = inv.ihvp(&g).unwrap();
        let predicted = stat.rho[q] - 0.5 * dot(&g, &hg);
        // L(x) = ½(x-w)ᵀH(x-w) + gᵀ(x-w), evaluated at w and w + δ.
        let hw = h.matvec(&w);
        let objective = Quadratic {
            a: h.as_slice().to_vec(),
            b: g.iter().zip(&hw).map(|(a, b)| a - b).collect(),
            c: 0.5 * dot(&w, &hw) - dot(&g, &w),
        };
        let moved: Vec<f64> = w.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let actual = objective.loss(&moved).unwrap() - objective.loss(&w).unwrap();
        let mut e = vec![0.0; d];
        e[q] = 1.0;
        let kkt = kkt_solve(&h, &g, &[e], &[-w[q]]).unwrap();
        worst = worst
            .max((actual - predicted).abs())
            .max((kkt.objective - predicted).abs())
            .max(max_abs_diff(&kkt.x, &delta));
    }
    check(
        worst <= 1e-10,
        format!("max deviation {worst:.3e} (tol 1e-10)"),
    )
}

/// Exact pair removal never loses to the summed single-removal step, and
/// coincides with two single removals when the Hessian is diagonal.
fn c06_pair_dominance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut excess = f64::NEG_INFINITY;
    let mut separable = 0.0f64;
    for _ in 0..100 {
        let d = rng.random_range(3..=12usize);
        let h = random_spd(d, 0.1, &mut rng);
        let w = normal_vec(d, &mut rng);
        let space = flat(&w);
        let mask = Mask::all_active(d);
        let inv = explicit_inverse(&h);
        let stat = stat_woodfisher(&space, &inv, &mask).unwrap();
        let pair = pick(&stat, &space, 2);
        let greedy = pruning_direction(&space, &inv, &mask, &pair).unwrap();
        let greedy_loss = 0.5 * h.quad_form(&greedy);
        let exact = exact_pair_removal(&w, &h, pair[0], pair[1]).unwrap();
        excess = excess.max(exact.delta_loss - greedy_loss);

        let hd: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..5.0)).collect();
        let hdiag = DenseMatrix::diagonal(&hd);
        let dinv = explicit_inverse(&hdiag);
        let stat = stat_woodfisher(&space, &dinv, &mask).unwrap();
        let pair = pick(&stat, &space, 2);
        let exact = exact_pair_removal(&w, &hdiag, pair[0], pair[1]).unwrap();
        let singles = exact_single_removal(&w, &hdiag).unwrap();
        let delta = pruning_direction(&space, &dinv, &mask, &pair).unwrap();
        separable = separable
            .max(
                (exact.delta_loss - singles.delta_loss[pair[0]] - singles.delta_loss[pair[1]])
                    .abs(),
            )
            .max((exact.delta_loss - stat.rho[pair[0]] - stat.rho[pair[1]]).abs())
            .max(max_abs_diff(&exact.delta_w, &delta));
    }
    check(
        excess <= 1e-12 && separable <= 1e-12,
        format!("max(exact - greedy) {excess:.3e} (tol 1e-12), separable deviation {separable:.3e} (tol 1e-12)"),
    )
}

/// Correlated group removal against the KKT oracle with one sum constraint.
fn c07_structured_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let (mut constraint, mut oracle) = (0.0f64, 0.0f64);
    let mut singleton_exact = true;
    for _ in 0..100 {
        let d = rng.random_range(2..=12usize);
        let h = random_spd(d, 0.1, &mut rng);
        let w = normal_vec(d, &mut rng);
        let space = flat(&w);
        let mask = Mask::all_active(d);
        let inv = explicit_inverse(&h);
        // random disjoint groups of size 1..=4 covering every index
        let mut perm: Vec<usize> = (0..d).collect();
        for i in (1..d).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut groups = Vec::new();
        let mut rest = &perm[..];
        while !rest.is_empty() {
            let k = rng.random_range(1..=rest.len().min(4));
            groups.push(rest[..k].to_vec());
            rest = &rest[k..];
        }
        let spec = GroupSpec::new(groups.clone(), GroupMode::Correlated, space.layout()).unwrap();
        let rho = stat_structured(&space, &inv, &spec).unwrap();
        for (g, members) in groups.iter().enumerate() {
            let delta = structured_direction(&space, &inv, members).unwrap();
            let total: f64 = members.iter().map(|&q| w[q] + delta[q]).sum();
            constraint = constraint.max(total.abs());
            let mut e = vec![0.0; d];
            for &q in members {
                e[q] = 1.0;
            }
            let s: f64 = members.iter().map(|&q| w[q]).sum();
            let kkt = kkt_solve(&h, &vec![0.0; d], &[e], &[-s]).unwrap();
            oracle = oracle
                .max(max_abs_diff(&delta, &kkt.x))
                .max((rho[g] - kkt.objective).abs())
                .max((rho[g] - 0.5 * h.quad_form(&delta)).abs());
        }
        let singles: Vec<Vec<usize>> = (0..d).map(|q| vec![q]).collect();
        let spec = GroupSpec::new(singles, GroupMode::Correlated, space.layout()).unwrap();
        let rho = stat_structured(&space, &inv, &spec).unwrap();
        let wf = stat_woodfisher(&space, &inv, &mask).unwrap();
        singleton_exact &= rho == wf.rho;
    }
    check(
        constraint <= 1e-12 && oracle <= 1e-10 && singleton_exact,
        format!(
            "constraint residual {constraint:.3e} (tol 1e-12), oracle deviation {oracle:.3e} (tol 1e-10), singletons bit-identical: {singleton_exact}"
        ),
    )
}

/// Loss along the pruning direction against its quadratic model.
fn c08_quadratic_scan() -> Outcome {
    // Synthetic quadratic with Hessian equal to the dampened empirical Fisher.
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let d = 40;
    let samples: Vec<GradSample<f64>> = (0..60)
        .map(|_| GradSample {
            grad: normal_vec(d, &mut rng),
            weight: 1,
        })
        .collect();
    let damp = 1e-2;
    let fisher = dense_empirical_fisher(&samples, d, damp).unwrap();
    let w = normal_vec(d, &mut rng);
    let fw = fisher.matvec(&w);
    let objective = Quadratic {
        a: fisher.as_slice().to_vec(),
        b: fw.iter().map(|x| -x).collect(),
        c: 0.5 * dot(&w, &fw) + 1.0,
    };
    let layout = LayerLayout::weight_blocks(&[d]).unwrap();
    let space = ParamSpace::new(w.clone(), layout.clone()).unwrap();
    let cfg = FisherConfig {
        damp,
        chunk_size: FULL_LAYER,
        ..FisherConfig::default()
    };
    let inv = woodfisher_build(&samples, &layout, &cfg).unwrap();
    let mask = Mask::all_active(d);
    let stat = stat_woodfisher(&space, &inv, &mask).unwrap();
    let removed = pick(&stat, &space, d / 2);
    let delta = pruning_direction(&space, &inv, &mask, &removed).unwrap();
    let curve = quad_scan(
        &objective,
        &w,
        &delta,
        21,
        &EmpiricalFisher {
            samples: &samples,
            damp,
        },
    )
    .unwrap();
    let synth = curve
        .iter()
        .map(|p| (p.actual - p.predicted).abs())
        .fold(0.0, f64::max);

    // MNIST network, 50% of each weight layer.
    let data = mnist()?;
    let model = &data.models[0];
    let fisher = FisherConfig {
        subsample_size: 1000,
        minibatch_size: 1,
        ..FisherConfig::default()
    };
    let mut worst_t0 = 0.0f64;
    let mut worst_rel = 0.0f64;
    let mut rows = Vec::new();
    for layer in ["fc1.weight", "fc2.weight", "fc3.weight"] {
        let pts = pruning_scan(model, &data.train, &fisher, Some(layer), 0.5, 21, 0)
            .map_err(|e| e.to_string())?;
        worst_t0 = worst_t0.max((pts[0].actual - pts[0].predicted).abs());
        let p = pts
            .iter()
            .find(|p| p.t == 0.25)
            .ok_or("no t = 0.25 point")?;
        let rel = (p.predicted - p.actual).abs() / p.actual.abs();
        worst_rel = worst_rel.max(rel);
        rows.push(format!("{layer} {rel:.4}"));
    }
    check(
        synth <= 1e-10 && worst_t0 == 0.0 && worst_rel <= 0.15,
        format!(
            "synthetic max |actual - predicted| {synth:.3e} (tol 1e-10); MNIST t=0 gap {worst_t0:e}, relative loss gap at t=0.25 [{}] (tol 0.15)",
            rows.join(", ")
        ),
    )
}

/// One-shot pruning of the trained MLP at 50% and 70%.
fn c09_one_shot_ranking() -> Outcome {
    let start = Instant::now();
    let data = mnist()?;
    let dense_ok = data.accuracy.iter().all(|&a| a >= 0.90);
    let mut lines = vec![format!("dense accuracy {:?}", data.accuracy)];
    let mut pass = dense_ok;
    for target in [0.5, 0.7] {
        let mut acc = BTreeMap::new();
        for method in [
            Method::WoodFisher,
            Method::GlobalMagnitude,
            Method::DiagFisher,
        ] {
            let v: Vec<f64> = SEEDS
                .iter()
                .enumerate()
                .map(|(k, &seed)| {
                    let cfg = OneShotConfig {
                        method,
                        scope: Scope::Joint,
                        target,
                        seed,
                        ..OneShotConfig::default()
                    };
                    one_shot_accuracy(data, k, &cfg)
                })
                .collect();
            acc.insert(method.name(), mean(&v));
        }
        let (wf, gm, df) = (
            acc["woodfisher"],
            acc["global-magnitude"],
            acc["diag-fisher"],
        );
        pass &= wf >= gm - 0.002;
        if target == 0.7 {
            pass &= df < wf;
        }
        lines.push(format!(
            "{:.0}%: woodfisher {:.2}, global-magnitude {:.2}, diag-fisher {:.2}",
            target * 100.0,
            100.0 * wf,
            100.0 * gm,
            100.0 * df
        ));
    }
    let elapsed = start.elapsed() + data.train_time;
    pass &= elapsed < Duration::from_secs(15 * 60);
    lines.push(format!("{elapsed:.1?} including training"));
    check(pass, lines.join("; "))
}

/// Accuracy at 70% joint sparsity as the chunk size grows.
fn c10_chunk_trend() -> Outcome {
    let data = mnist()?;
    let chunks = [8usize, 32, 128, FULL_LAYER];
    let mut means = Vec::new();
    for &chunk in &chunks {
        let v: Vec<f64> = SEEDS
            .iter()
            .enumerate()
            .map(|(k, &seed)| {
                let cfg = OneShotConfig {
                    target: 0.7,
                    seed,
                    fisher: FisherConfig {
                        subsample_size: 1000,
                        minibatch_size: 50,
                        damp: 1e-3,
                        chunk_size: chunk,
                        ..FisherConfig::default()
                    },
                    ..OneShotConfig::default()
                };
                one_shot_accuracy(data, k, &cfg)
            })
            .collect();
        means.push(mean(&v));
    }
    // full layer ranks as the largest size
    let sizes = [8.0, 32.0, 128.0, f64::INFINITY];
    let rho = spearman(&sizes, &means);
    let shown: Vec<String> = means.iter().map(|a| format!("{:.2}", 100.0 * a)).collect();
    check(
        rho >= 0.7,
        format!(
            "mean accuracy for chunks 8/32/128/full: {}; Spearman {rho:.2} (need >= 0.7)",
            shown.join("/")
        ),
    )
}

/// WoodFisher against global magnitude under the same gradual schedule.
fn c11_gradual() -> Outcome {
    let data = mnist()?;
    let mut finals: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut endpoints = true;
    let n = data.models[0].space().layout().n_prunable();
    for (k, &seed) in SEEDS.iter().enumerate() {
        for method in [Method::WoodFisher, Method::GlobalMagnitude] {
            let cfg = GradualConfig {
                method,
                scope: Scope::Joint,
                train: TrainConfig {
                    seed,
                    ..TrainConfig::default()
                },
                ..GradualConfig::default()
            };
            let model = &data.models[k];
            let out = gradual_prune(
                model,
                &Mask::from_zeros(model.space()),
                &data.train,
                Some(&data.test),
                &cfg,
                None,
            )
            .map_err(|e| e.to_string())?;
            let steps: Vec<_> = out
                .trace
                .rows
                .iter()
                .filter(|r| r.prune_step.is_some())
                .collect();
            let last = steps.len() - 1;
            endpoints &= steps[0].sparsity == 0.05 && steps[last].sparsity == 0.9;
            for r in &steps {
                let s = sparsity_at(&cfg.schedule, r.prune_step.unwrap(), last).unwrap();
                endpoints &= r.sparsity == count_for_fraction(s, n) as f64 / n as f64;
            }
            let acc = out
                .model
                .evaluate(&data.test)
                .map_err(|e| e.to_string())?
                .accuracy;
            finals.entry(method.name()).or_default().push(acc);
        }
    }
    let (wf, gm) = (
        mean(&finals["woodfisher"]),
        mean(&finals["global-magnitude"]),
    );
    check(
        wf >= gm - 0.002 && endpoints,
        format!(
            "final accuracy woodfisher {:.2} {:?}, global-magnitude {:.2} {:?}; schedule endpoints exact: {endpoints}",
            100.0 * wf,
            finals["woodfisher"],
            100.0 * gm,
            finals["global-magnitude"]
        ),
    )
}

/// FLOPs-normalized statistic on a two-layer toy.
fn c12_flops_aware() -> Outcome {
    // β = 0 is bit-exact on a random statistic.
    let mut rng = ChaCha8Rng::seed_from_u64(112);
    let layout = LayerLayout::weight_blocks(&[30, 20]).unwrap();
    let space = ParamSpace::new(normal_vec(50, &mut rng), layout.clone()).unwrap();
    let mask = Mask::all_active(50);
    let inv = random_chunked_inverse(50, &mut rng);
    let stat = stat_woodfisher(&space, &inv, &mask).unwrap();
    let table = FlopTable {
        entries: vec![
            FlopEntry {
                layer: "w0".into(),
                flops_total: 300.0,
                active_params: 30,
            },
            FlopEntry {
                layer: "w1".into(),
                flops_total: 20.0,
                active_params: 20,
            },
        ],
    };
    let fpp: Vec<f64> = flops_per_param(&table, &layout).unwrap();
    let joint = |s: &PruneStat<f64>, sp: &ParamSpace<f64>, k: usize| {
        let q = [Quota {
            segments: vec![0, 1],
            remove: k,
        }];
        select_quotas(s, sp, &Mask::all_active(sp.dim()), &q).unwrap()
    };
    let same = flops_normalize(&stat, &fpp, 0.0).unwrap();
    let bit_exact = same
        .rho
        .iter()
        .zip(&stat.rho)
        .all(|(a, b)| a.to_bits() == b.to_bits())
        && (1..=50).all(|k| joint(&same, &space, k) == joint(&stat, &space, k));

    // Constructed: the cheap layer holds the two smallest weights, the
    // expensive one (10 FLOPs per parameter) slightly larger ones.
    let layout = LayerLayout::weight_blocks(&[4, 4]).unwrap();
    let w = vec![0.8, 0.9, 3.0, 3.0, 0.5, 0.6, 2.0, 2.0];
    let space = ParamSpace::new(w, layout.clone()).unwrap();
    let table = FlopTable {
        entries: vec![
            FlopEntry {
                layer: "w0".into(),
                flops_total: 40.0,
                active_params: 4,
            },
            FlopEntry {
                layer: "w1".into(),
                flops_total: 4.0,
                active_params: 4,
            },
        ],
    };
    let fpp: Vec<f64> = flops_per_param(&table, &layout).unwrap();
    let id = IsotropicInverse { dim: 8, scale: 1.0 };
    let stat = stat_woodfisher(&space, &id, &Mask::all_active(8)).unwrap();
    let plain = joint(&stat, &space, 2);
    let normalized = joint(&flops_normalize(&stat, &fpp, 0.3).unwrap(), &space, 2);
    let in_expensive = |sel: &[usize]| sel.iter().filter(|&&q| q < 4).count();
    let shift = in_expensive(&normalized) as i64 - in_expensive(&plain) as i64;
    check(
        bit_exact && in_expensive(&plain) == 0 && shift >= 1,
        format!(
            "β=0 bit-exact: {bit_exact}; removals from the expensive layer {} -> {} (β = 0.3)",
            in_expensive(&plain),
            in_expensive(&normalized)
        ),
    )
}

fn run_cli(dir: &Path, threads: usize, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_woodprune"))
        .current_dir(dir)
        .arg("--threads")
        .arg(threads.to_string())
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn strip_timestamps(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.remove("timestamp");
            map.values_mut().for_each(strip_timestamps);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_timestamps),
        _ => {}
    }
}

/// Every command run with one and with four threads.
fn c13_determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = root.path().join("data");
    std::fs::create_dir(&data).unwrap();
    write_idx_fixture(&data);
    let data = data.to_str().unwrap().to_owned();
    let fisher = [
        "--fisher-subsample",
        "40",
        "--fisher-minibatch",
        "5",
        "--chunk-size",
        "64",
    ];
    let groups = root.path().join("groups.json");
    // rows of the first weight matrix (fan-in 16)
    let rows: Vec<Vec<usize>> = (0..12).map(|r| (r * 16..(r + 1) * 16).collect()).collect();
    std::fs::write(
        &groups,
        serde_json::json!({"mode": "correlated", "groups": rows}).to_string(),
    )
    .unwrap();
    let groups = groups.to_str().unwrap().to_owned();
    let commands: Vec<Vec<&str>> = vec![
        vec![
            "train",
            "--layers",
            "16,12,10",
            "--epochs",
            "4",
            "--seed",
            "3",
            "--out",
            "model.json",
            "--metrics",
            "metrics.csv",
        ],
        [
            &[
                "prune-oneshot",
                "--model",
                "model.json",
                "--sparsity",
                "0.6",
                "--recompute-steps",
                "2",
                "--seed",
                "3",
            ][..],
            &[
                "--out",
                "oneshot.json",
                "--save-model",
                "oneshot-model.json",
                "--dump-grads",
                "grads.bin",
            ],
            &fisher,
        ]
        .concat(),
        [
            &[
                "prune-oneshot",
                "--model",
                "model.json",
                "--method",
                "woodtaylor",
                "--mode",
                "independent",
            ][..],
            &[
                "--beta",
                "0.3",
                "--label-mode",
                "sampled",
                "--out",
                "woodtaylor.json",
            ],
            &fisher,
        ]
        .concat(),
        [
            &[
                "prune-oneshot",
                "--model",
                "model.json",
                "--groups",
                &groups,
                "--sparsity",
                "0.25",
                "--out",
                "groups.json",
            ][..],
            &fisher,
        ]
        .concat(),
        [
            &[
                "prune-gradual",
                "--model",
                "model.json",
                "--epochs",
                "6",
                "--prune-interval",
                "1",
                "--last-prune-epoch",
                "4",
            ][..],
            &[
                "--lr-decay-start",
                "4",
                "--seed",
                "3",
                "--out",
                "trace.csv",
                "--save-model",
                "gradual.json",
            ],
            &fisher,
        ]
        .concat(),
        [
            &[
                "quad-scan",
                "--model",
                "model.json",
                "--layer",
                "fc1.weight",
                "--steps",
                "11",
                "--out",
                "scan.csv",
            ][..],
            &fisher,
        ]
        .concat(),
    ];
    let mut outputs = Vec::new();
    for threads in [1, 4] {
        let dir = root.path().join(format!("threads-{threads}"));
        std::fs::create_dir(&dir).unwrap();
        for cmd in &commands {
            let mut args = cmd.clone();
            args.extend(["--data-dir", &data]);
            run_cli(&dir, threads, &args)?;
        }
        let mut files = BTreeMap::new();
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            let bytes = std::fs::read(&path).unwrap();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            let content = if name.ends_with(".json") {
                let mut v: serde_json::Value =
                    serde_json::from_slice(&bytes).map_err(|e| format!("{name}: {e}"))?;
                strip_timestamps(&mut v);
                v.to_string().into_bytes()
            } else {
                bytes
            };
            files.insert(name, content);
        }
        outputs.push(files);
    }
    let names: Vec<&String> = outputs[0].keys().collect();
    let differing: Vec<&String> = names
        .iter()
        .copied()
        .filter(|n| outputs[0].get(*n) != outputs[1].get(*n))
        .collect();
    check(
        differing.is_empty() && outputs[0].len() == outputs[1].len() && names.len() >= 12,
        format!(
            "{} result files compared, differing: {differing:?}",
            names.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("woodbury exactness", c01_woodbury_exactness),
        ("closed-form OBS", c02_closed_form_obs),
        ("reductions", c03_reductions),
        ("woodtaylor degeneration", c04_woodtaylor_degeneration),
        ("woodtaylor optimality", c05_woodtaylor_optimality),
        ("pair dominance", c06_pair_dominance),
        ("structured consistency", c07_structured_consistency),
        ("quadratic-model scan", c08_quadratic_scan),
        ("one-shot ranking", c09_one_shot_ranking),
        ("chunk-size trend", c10_chunk_trend),
        ("gradual pruning", c11_gradual),
        ("flops-aware", c12_flops_aware),
        ("determinism", c13_determinism),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = format!("{:02}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|p| id == *p || name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed();
        match outcome {
            Ok(d) => println!("criterion {id} PASS {name} ({secs:.2?}): {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {id} FAIL {name} ({secs:.2?}): {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
