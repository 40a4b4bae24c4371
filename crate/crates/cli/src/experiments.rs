//! Experiment drivers behind the subcommands. Each returns a [`Table`].

use std::time::Instant;

use rayon::prelude::*;
use wideformer::attention::{attention_entropy, closed_form_attn_grad, project_qkv, Projections};
use wideformer::autograd::{rel_err, Tape};
use wideformer::model::{train, AttentionKind, CenterMode, ModelConfig, TrainReport};
use wideformer::numerics::{matmul, matmul_nt, random_matrix, row_softmax, Dist};
use wideformer::theory::{lower_bound_derivative, verify_monotone_bound, BoundQuery};
use wideformer::wideformer::{wideformer_forward, CenterVariant};
use wideformer::{Matrix, Result, Rng};

use crate::alloc;
use crate::args::GraphSource;
use crate::csv::{Cell, Table};

/// Worker pool capped by `WIDEFORMER_THREADS`.
pub fn pool() -> rayon::ThreadPool {
    let threads = std::env::var("WIDEFORMER_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(rayon::current_num_threads);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
}

/// Entropy of dense attention at random initialization, one row per (n, seed).
pub fn entropy_scan(ns: &[usize], seeds: &[u64], feat_dim: usize, head_dim: usize, scale: bool) -> Result<Table> {
    let mut t = Table::new(&["n", "seed", "mean_entropy", "mean_normalized_entropy"]);
    let a = (6.0 / (feat_dim + head_dim) as f64).sqrt();
    for &n in ns {
        for &seed in seeds {
            let mut rng = Rng::new(seed).fork(n as u64);
            let x = random_matrix(&mut rng, n, feat_dim, Dist::Gaussian(1.0))?;
            let wq = random_matrix(&mut rng, feat_dim, head_dim, Dist::Uniform(a))?;
            let wk = random_matrix(&mut rng, feat_dim, head_dim, Dist::Uniform(a))?;
            let mut logits = matmul_nt(&matmul(&x, &wq)?, &matmul(&x, &wk)?)?;
            if scale {
                logits = logits.scale(1.0 / (head_dim as f64).sqrt());
            }
            let rep = attention_entropy(&row_softmax(&logits, None)?)?;
            t.push(vec![n.into(), seed.into(), rep.mean_raw().into(), rep.mean_normalized.into()]);
        }
    }
    Ok(t)
}

pub fn verify_theory(eps: &[f64], ns: &[usize], draws: usize, seed: u64) -> Result<(Table, bool)> {
    let mut t = Table::new(&[
        "epsilon",
        "n_min",
        "n_max",
        "strictly_increasing",
        "min_derivative",
        "draws",
        "min_slack",
        "draw_violations",
        "extremal_gap",
        "passed",
    ]);
    let mut all = true;
    for &e in eps {
        let r = verify_monotone_bound(e, ns, draws, seed)?;
        let min_derivative = ns
            .iter()
            .map(|&n| lower_bound_derivative(BoundQuery::new(n, e)?))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        let passed = r.passed() && min_derivative > 0.0;
        all &= passed;
        t.push(vec![
            e.into(),
            ns.iter().copied().min().into(),
            ns.iter().copied().max().into(),
            r.monotone_violation.is_none().into(),
            min_derivative.into(),
            draws.into(),
            if draws == 0 { Cell::Empty } else { r.min_slack.into() },
            r.draw_violations.into(),
            r.extremal_gap.into(),
            passed.into(),
        ]);
    }
    Ok((t, all))
}

/// `α_ij` of `softmax((X W_Q)(X W_K)ᵀ)`.
fn alpha_ij(x: &Matrix, wq: &Matrix, wk: &Matrix, i: usize, j: usize) -> Result<f64> {
    let p = project_qkv(x, wq, wk, wk)?;
    let logits = matmul_nt(&p.q.select_rows(&[i]), &p.k)?;
    Ok(row_softmax(&logits, None)?[(0, j)])
}

fn tape_attn_grad(x: &Matrix, wq: &Matrix, wk: &Matrix, i: usize, j: usize) -> Result<Matrix> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wqv = tape.param(wq.clone());
    let wkv = tape.constant(wk.clone());
    let q = tape.matmul(xv, wqv)?;
    let k = tape.matmul(xv, wkv)?;
    let s = tape.matmul_nt(q, k)?;
    let a = tape.row_softmax(s, None)?;
    let mut pick = Matrix::zeros(x.rows(), x.rows());
    pick[(i, j)] = 1.0;
    let sel = tape.mul_const(a, pick)?;
    let out = tape.sum(sel);
    Ok(tape.backward(out)?.param(&tape, wqv))
}

fn max_rel(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

pub struct GradCheckSummary {
    pub table: Table,
    pub max_fd_err: f64,
    pub max_tape_err: f64,
}

/// Closed form vs. central differences and vs. the tape on random instances.
pub fn grad_check(instances: usize, seed: u64, max_n: usize, h: f64) -> Result<GradCheckSummary> {
    let mut t = Table::new(&["instance", "n", "feat_dim", "head_dim", "i", "j", "fd_rel_err", "tape_rel_err"]);
    let (mut max_fd_err, mut max_tape_err) = (0.0f64, 0.0f64);
    for inst in 0..instances {
        let mut rng = Rng::new(seed).fork(inst as u64);
        let n = 2 + rng.below(max_n.max(2) - 1);
        let d = 1 + rng.below(5);
        let dh = 1 + rng.below(4);
        let x = random_matrix(&mut rng, n, d, Dist::Gaussian(1.0))?;
        let wq = random_matrix(&mut rng, d, dh, Dist::Gaussian(0.7))?;
        let wk = random_matrix(&mut rng, d, dh, Dist::Gaussian(0.7))?;
        let (i, j) = (rng.below(n), rng.below(n));

        let closed = closed_form_attn_grad(&x, &wq, &wk, i, j)?;
        let mut fd = Matrix::zeros(d, dh);
        for a in 0..d {
            for b in 0..dh {
                let mut plus = wq.clone();
                plus[(a, b)] += h;
                let mut minus = wq.clone();
                minus[(a, b)] -= h;
                fd[(a, b)] = (alpha_ij(&x, &plus, &wk, i, j)? - alpha_ij(&x, &minus, &wk, i, j)?) / (2.0 * h);
            }
        }
        let tape = tape_attn_grad(&x, &wq, &wk, i, j)?;
        let (e_fd, e_tape) = (max_rel(&closed, &fd), max_rel(&closed, &tape));
        max_fd_err = max_fd_err.max(e_fd);
        max_tape_err = max_tape_err.max(e_tape);
        t.push(vec![inst.into(), n.into(), d.into(), dh.into(), i.into(), j.into(), e_fd.into(), e_tape.into()]);
    }
    Ok(GradCheckSummary {
        table: t,
        max_fd_err,
        max_tape_err,
    })
}

pub fn train_table(report: &TrainReport, cfg: &ModelConfig) -> Table {
    let mut header: Vec<String> = ["epoch", "loss", "train_acc", "val_acc", "test_acc"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..cfg.layers).map(|l| format!("attn_entropy_l{l}")));
    let cluster = matches!(cfg.attention, AttentionKind::Wideformer { guided: true, .. });
    if cluster {
        header.extend((0..cfg.layers).map(|l| format!("cluster_entropy_l{l}")));
    }
    let mut t = Table::new(&header);
    for e in &report.epochs {
        let mut row: Vec<Cell> = vec![e.epoch.into(), e.loss.into(), e.train_acc.into(), e.val_acc.into(), e.test_acc.into()];
        row.extend(e.attn_entropy.iter().map(|&h| Cell::from(h)));
        if cluster {
            let ce = e.cluster_entropy.clone().unwrap_or_default();
            row.extend((0..cfg.layers).map(|l| Cell::from(ce.get(l).copied())));
        }
        t.push(row);
    }
    t
}

/// Trains every (config, seed) job in parallel; results keep job order.
pub fn run_jobs(source: &GraphSource, jobs: &[ModelConfig]) -> Result<Vec<TrainReport>> {
    pool().install(|| {
        jobs.par_iter()
            .map(|cfg| {
                let g = source.for_seed(cfg.seed)?;
                Ok(train(&g, cfg)?.report)
            })
            .collect()
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn summary_cells(r: &TrainReport) -> [Cell; 4] {
    [
        r.test_acc.into(),
        r.best_val_acc.into(),
        r.final_attention_entropy().into(),
        r.final_cluster_entropy().into(),
    ]
}

fn mean_cells(rs: &[&TrainReport]) -> [Cell; 4] {
    let f = |g: &dyn Fn(&TrainReport) -> f64| mean(&rs.iter().map(|r| g(r)).collect::<Vec<_>>());
    let cl: Option<Vec<f64>> = rs.iter().map(|r| r.final_cluster_entropy()).collect();
    [
        f(&|r| r.test_acc).into(),
        f(&|r| r.best_val_acc).into(),
        f(&|r| r.final_attention_entropy()).into(),
        cl.map(|v| mean(&v)).into(),
    ]
}

/// Cluster-count sweep; m = 1 is always trained as the reference.
/// `gain` is `(p_m − p_1)/p_1` per seed, and its seed mean on `mean` rows.
pub fn ablate_m(base: &ModelConfig, source: &GraphSource, m_values: &[usize], seeds: &[u64]) -> Result<Table> {
    let mut ms = vec![1];
    ms.extend(m_values.iter().copied().filter(|&m| m != 1));
    let jobs: Vec<ModelConfig> = ms
        .iter()
        .flat_map(|&m| {
            seeds.iter().map(move |&seed| ModelConfig {
                attention: AttentionKind::wideformer(m),
                seed,
                ..base.clone()
            })
        })
        .collect();
    let reports = run_jobs(source, &jobs)?;
    let by_m: Vec<&[TrainReport]> = reports.chunks(seeds.len()).collect();
    let baseline = by_m[0];

    let mut t = Table::new(&["m", "seed", "test_acc", "best_val_acc", "attn_entropy", "cluster_entropy", "gain"]);
    let emit = m_values.contains(&1);
    for (mi, &m) in ms.iter().enumerate() {
        if m == 1 && !emit {
            continue;
        }
        let mut gains = Vec::new();
        for (s, r) in by_m[mi].iter().enumerate() {
            let p1 = baseline[s].test_acc;
            let gain = (r.test_acc - p1) / p1;
            gains.push(gain);
            let mut row = vec![m.into(), seeds[s].into()];
            row.extend(summary_cells(r));
            row.push(gain.into());
            t.push(row);
        }
        let mut row = vec![m.into(), "mean".into()];
        row.extend(mean_cells(&by_m[mi].iter().collect::<Vec<_>>()));
        row.push(mean(&gains).into());
        t.push(row);
    }
    Ok(t)
}

/// Named attention variants over a seed set, with per-variant mean rows.
pub fn ablate_variants(
    base: &ModelConfig,
    source: &GraphSource,
    variants: &[(String, AttentionKind)],
    seeds: &[u64],
) -> Result<Table> {
    let jobs: Vec<ModelConfig> = variants
        .iter()
        .flat_map(|(_, kind)| {
            seeds.iter().map(move |&seed| ModelConfig {
                attention: *kind,
                seed,
                ..base.clone()
            })
        })
        .collect();
    let reports = run_jobs(source, &jobs)?;
    let mut t = Table::new(&["variant", "seed", "test_acc", "best_val_acc", "attn_entropy", "cluster_entropy"]);
    for ((name, _), rs) in variants.iter().zip(reports.chunks(seeds.len())) {
        for (r, &seed) in rs.iter().zip(seeds) {
            let mut row = vec![name.as_str().into(), seed.into()];
            row.extend(summary_cells(r));
            t.push(row);
        }
        let mut row = vec![name.as_str().into(), "mean".into()];
        row.extend(mean_cells(&rs.iter().collect::<Vec<_>>()));
        t.push(row);
    }
    Ok(t)
}

pub fn module_variants(m: usize) -> Vec<(String, AttentionKind)> {
    vec![
        ("dense".into(), AttentionKind::Dense),
        (
            "divided".into(),
            AttentionKind::Wideformer {
                m,
                centers: CenterMode::OneShot,
                guided: false,
            },
        ),
        ("divided+guided".into(), AttentionKind::wideformer(m)),
    ]
}

pub fn center_variants(m: usize, iters: usize) -> Vec<(String, AttentionKind)> {
    [
        ("one_shot".to_string(), CenterMode::OneShot),
        (format!("iterative({iters})"), CenterMode::Iterative(iters)),
        ("learnable".to_string(), CenterMode::Learnable),
    ]
    .into_iter()
    .map(|(name, centers)| {
        (
            name,
            AttentionKind::Wideformer {
                m,
                centers,
                guided: true,
            },
        )
    })
    .collect()
}

pub struct BenchSummary {
    pub table: Table,
    pub slope: f64,
    /// Sizes where a single allocation reached `n²` doubles.
    pub quadratic_allocs: Vec<usize>,
    pub tracked: bool,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

/// Best-of-`reps` wall time of the clustered forward pass per size, plus
/// its allocation footprint on the first repetition.
pub fn bench(ns: &[usize], m: usize, head_dim: usize, reps: usize, seed: u64) -> Result<BenchSummary> {
    let mut t = Table::new(&["n", "m", "head_dim", "seconds", "peak_bytes", "largest_alloc_bytes", "nxn_bytes"]);
    let mut times = Vec::new();
    let mut quadratic_allocs = Vec::new();
    let mut tracked = true;
    for &n in ns {
        let mut rng = Rng::new(seed).fork(n as u64);
        let mut mk = || random_matrix(&mut rng, n, head_dim, Dist::Gaussian(1.0));
        let p = Projections::new(mk()?, mk()?, mk()?)?;
        let mut best = f64::INFINITY;
        let mut stats = None;
        for rep in 0..reps.max(1) {
            let start = Instant::now();
            let (out, s) = alloc::measure(|| wideformer_forward(&p, m, &CenterVariant::OneShot));
            let secs = start.elapsed().as_secs_f64();
            drop(out?);
            best = best.min(secs);
            if rep == 0 {
                stats = s;
            }
        }
        let nn = n * n * std::mem::size_of::<f64>();
        match stats {
            Some(s) if s.largest_alloc >= nn => quadratic_allocs.push(n),
            None => tracked = false,
            _ => {}
        }
        times.push(best);
        t.push(vec![
            n.into(),
            m.into(),
            head_dim.into(),
            best.into(),
            stats.map(|s| s.peak_growth).into(),
            stats.map(|s| s.largest_alloc).into(),
            nn.into(),
        ]);
    }
    let slope = if ns.len() >= 2 {
        loglog_slope(&ns.iter().map(|&n| n as f64).collect::<Vec<_>>(), &times)
    } else {
        f64::NAN
    };
    Ok(BenchSummary {
        table: t,
        slope,
        quadratic_allocs,
        tracked,
    })
}
