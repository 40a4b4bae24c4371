//! Command-line flags and `key = value` config files.
//!
//! Every option can also come from the config file under its long flag
//! name (`hidden-dim = 16`; underscores are accepted). Flags win over the
//! file, the file wins over built-in defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use wideformer::data::{generate_planted_partition, load_graph, Graph, PlantedPartition};
use wideformer::model::{AttentionKind, CenterMode, ModelConfig, ReductionInit};

use crate::CliError;

#[derive(Parser, Debug)]
#[command(name = "wideformer", about = "Global graph attention experiments", arg_required_else_help = true)]
pub struct Cli {
    /// Config file with `key = value` lines; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Entropy of randomly initialized dense attention across graph sizes.
    EntropyScan(EntropyScanArgs),
    /// Checks the attention-entropy lower bound and its growth in n.
    VerifyTheory(VerifyTheoryArgs),
    /// Compares the closed-form attention gradient with finite differences and the tape.
    GradCheck(GradCheckArgs),
    /// Trains one model and writes the per-epoch report.
    Train(TrainArgs),
    /// Sweeps the number of clusters.
    AblateM(AblateMArgs),
    /// Dense vs. divided-only vs. divided+guided attention.
    AblateModules(AblateModulesArgs),
    /// One-shot vs. iterative vs. learnable centers.
    AblateCenters(AblateCentersArgs),
    /// Times the clustered forward pass over graph sizes.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Output {
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Divide attention logits by sqrt(head dim).
    #[arg(long)]
    pub scale_scores: Option<bool>,
    /// `selector` or `random`.
    #[arg(long)]
    pub reduction_init: Option<String>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub entropy_reg: Option<f64>,
    #[arg(long)]
    pub cluster_entropy_reg: Option<f64>,
    #[arg(long)]
    pub reg_batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GraphArgs {
    /// Graph file; a planted-partition graph is generated when omitted.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub p_in: Option<f64>,
    #[arg(long)]
    pub p_out: Option<f64>,
    #[arg(long)]
    pub feat_dim: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Fixed generator seed; defaults to each run's seed.
    #[arg(long)]
    pub graph_seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ClusterArgs {
    /// `dense` or `wideformer`.
    #[arg(long)]
    pub attention: Option<String>,
    #[arg(long)]
    pub m: Option<usize>,
    /// `one-shot`, `iterative` or `learnable`.
    #[arg(long)]
    pub centers: Option<String>,
    /// Refinement rounds for iterative centers.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub guided: Option<bool>,
}

#[derive(Args, Debug)]
pub struct EntropyScanArgs {
    /// Graph sizes, e.g. `8,32,128,512` or `8..16`.
    #[arg(long)]
    pub n: Option<String>,
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub feat_dim: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    /// Divide attention logits by sqrt(head dim) (default true).
    #[arg(long)]
    pub scale_scores: Option<bool>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Debug)]
pub struct VerifyTheoryArgs {
    /// Comma-separated ε values.
    #[arg(long)]
    pub eps: Option<String>,
    /// Node counts, e.g. `2..200` (inclusive).
    #[arg(long)]
    pub n: Option<String>,
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Largest node count drawn per instance.
    #[arg(long)]
    pub max_n: Option<usize>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub cluster: ClusterArgs,
    #[command(flatten)]
    pub graph: GraphArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where to write the best-validation parameters.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Debug)]
pub struct AblateMArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub graph: GraphArgs,
    /// Cluster counts; m = 1 always runs as the baseline.
    #[arg(long)]
    pub m_values: Option<String>,
    #[arg(long)]
    pub seeds: Option<String>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Debug)]
pub struct AblateModulesArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub graph: GraphArgs,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub seeds: Option<String>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Debug)]
pub struct AblateCentersArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub graph: GraphArgs,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seeds: Option<String>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub n: Option<String>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fail when the fitted log-log slope exceeds this.
    #[arg(long)]
    pub max_slope: Option<f64>,
    #[command(flatten)]
    pub output: Output,
}

const KNOWN_KEYS: &[&str] = &[
    "hidden-dim", "layers", "heads", "scale-scores", "reduction-init", "dropout", "entropy-reg",
    "cluster-entropy-reg", "reg-batch-size", "lr", "beta1", "beta2", "adam-eps", "weight-decay", "epochs",
    "graph", "nodes", "classes", "p-in", "p-out", "feat-dim", "noise", "graph-seed", "attention", "m",
    "centers", "iters", "guided", "n", "seeds", "head-dim", "eps", "draws", "seed", "instances", "max-n",
    "step", "tol", "checkpoint", "m-values", "reps", "max-slope", "out",
];

/// Parsed config file.
#[derive(Debug, Default)]
pub struct Resolver {
    file: BTreeMap<String, String>,
}

impl Resolver {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Resolver::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut file = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", i + 1)))?;
            let key = k.trim().replace('_', "-");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CliError::Usage(format!("config line {}: unknown key '{}'", i + 1, k.trim())));
            }
            file.insert(key, v.trim().to_string());
        }
        Ok(Resolver { file })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.file.get(key).map(String::as_str)
    }

    pub fn opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError> {
        if flag.is_some() {
            return Ok(flag);
        }
        self.raw(key)
            .map(|s| {
                s.parse()
                    .map_err(|_| CliError::Usage(format!("config key {key}: bad value '{s}'")))
            })
            .transpose()
    }

    pub fn get<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    pub fn path(&self, flag: &Option<PathBuf>, key: &str) -> Option<PathBuf> {
        flag.clone().or_else(|| self.raw(key).map(PathBuf::from))
    }
}

/// Parses `1,2,5..8` (ranges inclusive).
pub fn parse_list<T>(s: &str) -> Result<Vec<T>, CliError>
where
    T: FromStr + Copy + PartialOrd + std::ops::Add<Output = T> + From<u8>,
{
    let bad = || CliError::Usage(format!("bad list '{s}'"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (T, T) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            if a > b {
                return Err(bad());
            }
            let mut x = a;
            while x <= b {
                out.push(x);
                x = x + T::from(1);
            }
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

pub fn list_or<T>(r: &Resolver, flag: &Option<String>, key: &str, default: Vec<T>) -> Result<Vec<T>, CliError>
where
    T: FromStr + Copy + PartialOrd + std::ops::Add<Output = T> + From<u8>,
{
    match flag.as_deref().or(r.raw(key)) {
        Some(s) => parse_list(s),
        None => Ok(default),
    }
}

pub fn parse_floats(s: &str) -> Result<Vec<f64>, CliError> {
    let v: Result<Vec<f64>, _> = s.split(',').map(|p| p.trim().parse::<f64>()).collect();
    match v {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::Usage(format!("bad number list '{s}'"))),
    }
}

pub fn model_config(r: &Resolver, a: &ModelArgs) -> Result<ModelConfig, CliError> {
    let d = ModelConfig::default();
    let reduction_init = match r.get(a.reduction_init.clone(), "reduction-init", "selector".to_string())?.as_str() {
        "selector" => ReductionInit::Selector,
        "random" => ReductionInit::Random,
        other => return Err(CliError::Usage(format!("unknown reduction init '{other}'"))),
    };
    Ok(ModelConfig {
        hidden_dim: r.get(a.hidden_dim, "hidden-dim", d.hidden_dim)?,
        layers: r.get(a.layers, "layers", d.layers)?,
        heads: r.get(a.heads, "heads", d.heads)?,
        attention: d.attention,
        scale_scores: r.get(a.scale_scores, "scale-scores", d.scale_scores)?,
        reduction_init,
        dropout: r.get(a.dropout, "dropout", d.dropout)?,
        entropy_reg: r.get(a.entropy_reg, "entropy-reg", d.entropy_reg)?,
        cluster_entropy_reg: r.get(a.cluster_entropy_reg, "cluster-entropy-reg", d.cluster_entropy_reg)?,
        reg_batch_size: r.get(a.reg_batch_size, "reg-batch-size", d.reg_batch_size)?,
        lr: r.get(a.lr, "lr", d.lr)?,
        beta1: r.get(a.beta1, "beta1", d.beta1)?,
        beta2: r.get(a.beta2, "beta2", d.beta2)?,
        adam_eps: r.get(a.adam_eps, "adam-eps", d.adam_eps)?,
        weight_decay: r.get(a.weight_decay, "weight-decay", d.weight_decay)?,
        epochs: r.get(a.epochs, "epochs", d.epochs)?,
        seed: d.seed,
    })
}

pub fn center_mode(r: &Resolver, centers: &Option<String>, iters: Option<usize>) -> Result<CenterMode, CliError> {
    match r.get(centers.clone(), "centers", "one-shot".to_string())?.as_str() {
        "one-shot" | "one_shot" => Ok(CenterMode::OneShot),
        "iterative" => Ok(CenterMode::Iterative(r.get(iters, "iters", 3)?)),
        "learnable" => Ok(CenterMode::Learnable),
        other => Err(CliError::Usage(format!("unknown center mode '{other}'"))),
    }
}

pub fn attention_kind(r: &Resolver, a: &ClusterArgs) -> Result<AttentionKind, CliError> {
    match r.get(a.attention.clone(), "attention", "dense".to_string())?.as_str() {
        "dense" => Ok(AttentionKind::Dense),
        "wideformer" => Ok(AttentionKind::Wideformer {
            m: r.get(a.m, "m", 4)?,
            centers: center_mode(r, &a.centers, a.iters)?,
            guided: r.get(a.guided, "guided", true)?,
        }),
        other => Err(CliError::Usage(format!("unknown attention kind '{other}'"))),
    }
}

/// Where each run's graph comes from.
#[derive(Clone, Debug)]
pub enum GraphSource {
    Loaded(Graph),
    Planted { spec: PlantedPartition, fixed_seed: Option<u64> },
}

impl GraphSource {
    pub fn for_seed(&self, seed: u64) -> wideformer::Result<Graph> {
        match self {
            GraphSource::Loaded(g) => Ok(g.clone()),
            GraphSource::Planted { spec, fixed_seed } => generate_planted_partition(&PlantedPartition {
                seed: fixed_seed.unwrap_or(seed),
                ..spec.clone()
            }),
        }
    }
}

/// Resolves graph flags; a graph file is checked for existence only.
pub fn graph_plan(r: &Resolver, a: &GraphArgs) -> Result<(Option<PathBuf>, PlantedPartition, Option<u64>), CliError> {
    let path = r.path(&a.graph, "graph");
    if let Some(p) = &path {
        if !p.is_file() {
            return Err(CliError::Usage(format!("graph file {} does not exist", p.display())));
        }
    }
    let spec = PlantedPartition {
        n: r.get(a.nodes, "nodes", 800)?,
        n_classes: r.get(a.classes, "classes", 4)?,
        p_in: r.get(a.p_in, "p-in", 0.02)?,
        p_out: r.get(a.p_out, "p-out", 0.002)?,
        feat_dim: r.get(a.feat_dim, "feat-dim", 16)?,
        noise: r.get(a.noise, "noise", 0.5)?,
        seed: 0,
    };
    Ok((path, spec, r.opt(a.graph_seed, "graph-seed")?))
}

pub fn load_source(plan: (Option<PathBuf>, PlantedPartition, Option<u64>)) -> wideformer::Result<GraphSource> {
    match plan {
        (Some(p), _, _) => Ok(GraphSource::Loaded(load_graph(p)?)),
        (None, spec, fixed_seed) => Ok(GraphSource::Planted { spec, fixed_seed }),
    }
}

/// The output path's directory must already exist.
pub fn check_output(path: &Option<PathBuf>) -> Result<(), CliError> {
    if let Some(p) = path {
        let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("output directory {} does not exist", dir.display())));
        }
        if p.is_dir() {
            return Err(CliError::Usage(format!("output path {} is a directory", p.display())));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_and_ranges() {
        assert_eq!(parse_list::<usize>("2..5").unwrap(), vec![2, 3, 4, 5]);
        assert_eq!(parse_list::<u64>("0, 3,7..8").unwrap(), vec![0, 3, 7, 8]);
        assert!(parse_list::<usize>("5..2").is_err());
        assert!(parse_list::<usize>("").is_err());
        assert!(parse_list::<usize>("a").is_err());
        assert_eq!(parse_floats("1e-4, 0.001").unwrap(), vec![1e-4, 1e-3]);
    }

    #[test]
    fn config_file_precedence() {
        let r = Resolver::parse("# comment\nhidden_dim = 12\nlr = 0.5 # trailing\n\nepochs=3\n").unwrap();
        let flags = ModelArgs {
            lr: Some(0.25),
            ..ModelArgs::default()
        };
        let cfg = model_config(&r, &flags).unwrap();
        assert_eq!(cfg.hidden_dim, 12);
        assert_eq!(cfg.lr, 0.25);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.layers, ModelConfig::default().layers);
    }

    #[test]
    fn config_file_errors() {
        assert!(Resolver::parse("bogus = 1").is_err());
        assert!(Resolver::parse("no equals sign").is_err());
        let r = Resolver::parse("epochs = many").unwrap();
        assert!(model_config(&r, &ModelArgs::default()).is_err());
    }

    #[test]
    fn attention_kinds() {
        let r = Resolver::default();
        let a = ClusterArgs {
            attention: Some("wideformer".into()),
            m: Some(3),
            centers: Some("iterative".into()),
            iters: Some(2),
            guided: Some(false),
        };
        assert_eq!(
            attention_kind(&r, &a).unwrap(),
            AttentionKind::Wideformer {
                m: 3,
                centers: CenterMode::Iterative(2),
                guided: false
            }
        );
        assert_eq!(attention_kind(&r, &ClusterArgs::default()).unwrap(), AttentionKind::Dense);
        let bad = ClusterArgs {
            attention: Some("sparse".into()),
            ..ClusterArgs::default()
        };
        assert!(attention_kind(&r, &bad).is_err());
    }
}
