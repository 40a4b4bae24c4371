//! Command-line front end for the global-attention experiments.
//!
//! Exit codes: 0 success, 1 usage error, 2 failed verification,
//! 3 runtime failure.

pub mod alloc;
pub mod args;
pub mod csv;
pub mod experiments;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::Parser;
use wideformer::model::{save_checkpoint, ModelConfig};

use args::*;
use csv::{emit_csv, Table};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Verification(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Verification(_) => EXIT_VERIFY,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<wideformer::Error> for CliError {
    fn from(e: wideformer::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

/// Parses `argv` (including the program name), runs it and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}

fn write(table: &Table, out: &Option<PathBuf>) -> Result<(), CliError> {
    emit_csv(table, out.as_deref()).map_err(|e| CliError::Runtime(format!("cannot write report: {e}")))
}

fn seeds(r: &Resolver, flag: &Option<String>) -> Result<Vec<u64>, CliError> {
    list_or(r, flag, "seeds", (0..5).collect())
}

fn validated(cfg: ModelConfig) -> Result<ModelConfig, CliError> {
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let r = Resolver::load(cli.config.as_deref())?;
    match cli.command {
        Command::EntropyScan(a) => {
            let out = r.path(&a.output.out, "out");
            check_output(&out)?;
            let ns = list_or(&r, &a.n, "n", vec![8usize, 32, 128, 512])?;
            let seeds = list_or(&r, &a.seeds, "seeds", (0..20).collect())?;
            let feat_dim = r.get(a.feat_dim, "feat-dim", 16)?;
            let head_dim = r.get(a.head_dim, "head-dim", 16)?;
            let scale = r.get(a.scale_scores, "scale-scores", true)?;
            if feat_dim == 0 || head_dim == 0 || ns.contains(&0) {
                return Err(CliError::Usage("sizes must be positive".into()));
            }
            write(&experiments::entropy_scan(&ns, &seeds, feat_dim, head_dim, scale)?, &out)
        }
        Command::VerifyTheory(a) => {
            let out = r.path(&a.output.out, "out");
            check_output(&out)?;
            let eps = match a.eps.as_deref().or(r.raw("eps")) {
                Some(s) => parse_floats(s)?,
                None => vec![1e-4, 1e-3, 4e-3],
            };
            let ns = list_or(&r, &a.n, "n", (2..=200).collect())?;
            let draws = r.get(a.draws, "draws", 10_000)?;
            let seed = r.get(a.seed, "seed", 0)?;
            for &e in &eps {
                for &n in &ns {
                    wideformer::theory::BoundQuery::new(n, e).map_err(|err| CliError::Usage(err.to_string()))?;
                }
            }
            let (table, ok) = experiments::verify_theory(&eps, &ns, draws, seed)?;
            write(&table, &out)?;
            for (e, row) in eps.iter().zip(&table.rows) {
                eprintln!("epsilon {e}: {}", if row[9] == true.into() { "PASS" } else { "FAIL" });
            }
            if ok {
                Ok(())
            } else {
                Err(CliError::Verification("entropy bound checks failed".into()))
            }
        }
        Command::GradCheck(a) => {
            let out = r.path(&a.output.out, "out");
            check_output(&out)?;
            let tol = r.get(a.tol, "tol", 1e-4)?;
            let s = experiments::grad_check(
                r.get(a.instances, "instances", 100)?,
                r.get(a.seed, "seed", 0)?,
                r.get(a.max_n, "max-n", 8)?,
                r.get(a.step, "step", 1e-5)?,
            )?;
            write(&s.table, &out)?;
            eprintln!("max rel err: closed vs fd {:e}, closed vs tape {:e}", s.max_fd_err, s.max_tape_err);
            if s.max_fd_err <= tol && s.max_tape_err <= tol {
                Ok(())
            } else {
                Err(CliError::Verification(format!("gradient error exceeds {tol}")))
            }
        }
        Command::Train(a) => {
            let out = r.path(&a.output.out, "out");
            check_output(&out)?;
            let ckpt = r.path(&a.checkpoint, "checkpoint");
            check_output(&ckpt)?;
            let plan = graph_plan(&r, &a.graph)?;
            let cfg = validated(ModelConfig {
                attention: attention_kind(&r, &a.cluster)?,
                seed: r.get(a.seed, "seed", 0)?,
                ..model_config(&r, &a.model)?
            })?;
            let graph = load_source(plan)?.for_seed(cfg.seed)?;
            let trained = wideformer::model::train(&graph, &cfg)?;
            write(&experiments::train_table(&trained.report, &cfg), &out)?;
            if let Some(p) = ckpt {
                save_checkpoint(trained.model.params(), p)?;
            }
            let rep = &trained.report;
            eprintln!(
                "best epoch {} val {:.4} test {:.4} ({:.2}s)",
                rep.best_epoch, rep.best_val_acc, rep.test_acc, rep.wall_time_secs
            );
            Ok(())
        }
        Command::AblateM(a) => {
            let out = r.path(&a.output.out, "out");
            check_output(&out)?;
            let plan = graph_plan(&r, &a.graph)?;
            let base = validated(model_config(&r, &a.model)?)?;
            let ms = list_or(&r, &a.m_values, "m-values", (1..=8).collect())?;
            if ms.contains(&0) {
                return Err(CliError::Usage("cluster counts must be positive".into()));
            }
            let seeds = seeds(&r, &a.seeds)?;
            let t = experiments::ablate_m(&base, &load_source(plan)?, &ms, &seeds)?;
            write(&t, &out)
        }
        Command::AblateModules(a) => {
            let out = r.path(&a.output.out, "out");
            check_output(&out)?;
            let plan = graph_plan(&r, &a.graph)?;
            let base = validated(model_config(&r, &a.model)?)?;
            let m = r.get(a.m, "m", 4)?;
            let seeds = seeds(&r, &a.seeds)?;
            let variants = experiments::module_variants(m);
            for (_, kind) in &variants {
                validated(ModelConfig {
                    attention: *kind,
                    ..base.clone()
                })?;
            }
            let t = experiments::ablate_variants(&base, &load_source(plan)?, &variants, &seeds)?;
            write(&t, &out)
        }
        Command::AblateCenters(a) => {
            let out = r.path(&a.output.out, "out");
            check_output(&out)?;
            let plan = graph_plan(&r, &a.graph)?;
            let base = validated(model_config(&r, &a.model)?)?;
            let m = r.get(a.m, "m", 4)?;
            let iters = r.get(a.iters, "iters", 3)?;
            let seeds = seeds(&r, &a.seeds)?;
            let variants = experiments::center_variants(m, iters);
            for (_, kind) in &variants {
                validated(ModelConfig {
                    attention: *kind,
                    ..base.clone()
                })?;
            }
            let t = experiments::ablate_variants(&base, &load_source(plan)?, &variants, &seeds)?;
            write(&t, &out)
        }
        Command::Bench(a) => {
            let out = r.path(&a.output.out, "out");
            check_output(&out)?;
            let ns = list_or(&r, &a.n, "n", vec![1024usize, 2048, 4096, 8192])?;
            let m = r.get(a.m, "m", 4)?;
            let head_dim = r.get(a.head_dim, "head-dim", 16)?;
            if m == 0 || head_dim == 0 || ns.iter().any(|&n| n < m) {
                return Err(CliError::Usage("need 1 <= m <= n and a positive head dim".into()));
            }
            let s = experiments::bench(&ns, m, head_dim, r.get(a.reps, "reps", 3)?, r.get(a.seed, "seed", 0)?)?;
            write(&s.table, &out)?;
            eprintln!("log-log slope {:.3}", s.slope);
            if !s.tracked {
                eprintln!("allocation tracking unavailable; memory columns left empty");
            }
            if !s.quadratic_allocs.is_empty() {
                return Err(CliError::Verification(format!("n x n allocation at n = {:?}", s.quadratic_allocs)));
            }
            match r.opt(a.max_slope, "max-slope")? {
                Some(max) if !(s.slope <= max) => Err(CliError::Verification(format!(
                    "slope {:.3} exceeds {max}",
                    s.slope
                ))),
                _ => Ok(()),
            }
        }
    }
}
