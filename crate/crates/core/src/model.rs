//! Toy global-attention node classifier.
//!
//! `input affine → L × [multi-head attention → output projection →
//! residual → ELU → dropout] → affine classifier`. Each head is either
//! dense softmax attention or the clustered variant; a clustered head's
//! `n × (m·d_k)` output is mapped back to `d_k` by a learned affine
//! reduction before heads are concatenated.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use crate::attention::{attention_entropy, attention_entropy_streaming, EntropyReport};
use crate::autograd::{Gradients, Tape, Var};
use crate::data::Graph;
use crate::error::{Error, Result};
use crate::numerics::{random_matrix, Dist, Matrix, Rng};
use crate::wideformer::{ascending_order, plan_clusters, CenterVariant};

/// How cluster centers are obtained inside a clustered head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CenterMode {
    OneShot,
    Iterative(usize),
    /// Centers are trainable parameters.
    Learnable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Dense,
    Wideformer {
        m: usize,
        centers: CenterMode,
        /// Sort and weight clusters by cluster attention; `false` keeps the
        /// raw per-cluster outputs in cluster order.
        guided: bool,
    },
}

impl AttentionKind {
    pub fn wideformer(m: usize) -> Self {
        AttentionKind::Wideformer {
            m,
            centers: CenterMode::OneShot,
            guided: true,
        }
    }
}

/// Initial value of a clustered head's reduction map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReductionInit {
    /// Identity on the last slot, zero elsewhere.
    Selector,
    /// Xavier-uniform.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub attention: AttentionKind,
    /// Divide attention logits by `√d_k`. Off by default.
    pub scale_scores: bool,
    pub reduction_init: ReductionInit,
    pub dropout: f64,
    /// Weight of the mean normalized full-attention entropy.
    pub entropy_reg: f64,
    /// Weight of the mean normalized cluster-attention entropy.
    pub cluster_entropy_reg: f64,
    /// Target rows per block when the full-attention entropy is computed.
    pub reg_batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 32,
            layers: 1,
            heads: 1,
            attention: AttentionKind::Dense,
            scale_scores: false,
            reduction_init: ReductionInit::Selector,
            dropout: 0.0,
            entropy_reg: 0.0,
            cluster_entropy_reg: 0.0,
            reg_batch_size: 1024,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            epochs: 200,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.entropy_reg >= 0.0) || !(self.cluster_entropy_reg >= 0.0) {
            return bad("entropy regularization weights must be nonnegative".into());
        }
        if self.reg_batch_size == 0 {
            return bad("reg_batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("optimizer needs lr > 0 and betas in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps must be positive and weight_decay nonnegative".into());
        }
        if let AttentionKind::Wideformer { m, .. } = self.attention {
            if m == 0 {
                return bad("cluster count must be at least 1".into());
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub value: Matrix,
}

#[derive(Clone, Debug)]
struct HeadIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    reduce: Option<(usize, usize)>,
    centers: Option<usize>,
}

#[derive(Clone, Debug)]
struct LayerIdx {
    heads: Vec<HeadIdx>,
    out_w: usize,
    out_b: usize,
}

/// A parameterized forward function.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    feat_dim: usize,
    n_classes: usize,
    params: Vec<NamedParam>,
    input: (usize, usize),
    layers: Vec<LayerIdx>,
    classifier: (usize, usize),
}

/// Per-head intermediate values recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct HeadArtifacts {
    pub q: Var,
    pub k: Var,
    /// Dense attention scores (dense heads only).
    pub scores: Option<Var>,
    /// Cluster attention `ᾱ` (guided clustered heads only).
    pub cluster_attn: Option<Var>,
    pub m: Option<usize>,
}

pub struct Forward {
    pub logits: Var,
    pub layers: Vec<Vec<HeadArtifacts>>,
    pub param_vars: Vec<Var>,
}

fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    random_matrix(rng, fan_in, fan_out, Dist::Uniform(a)).expect("positive dims")
}

pub fn build_model(cfg: &ModelConfig, feat_dim: usize, n_classes: usize) -> Result<Model> {
    cfg.validate()?;
    if feat_dim == 0 || n_classes == 0 {
        return Err(Error::param("feature dimension and class count must be positive"));
    }
    let hd = cfg.hidden_dim;
    let dk = cfg.head_dim();
    let mut params = Vec::new();
    let mut push = |name: String, value: Matrix| {
        params.push(NamedParam { name, value });
        params.len() - 1
    };

    // Shared parameters come from one stream in a fixed order so that dense
    // and clustered models with the same seed start from identical weights.
    let mut rng = Rng::new(cfg.seed).fork(0x11);
    let input = (
        push("input.w".into(), xavier(&mut rng, feat_dim, hd)),
        push("input.b".into(), Matrix::zeros(1, hd)),
    );
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            heads.push(HeadIdx {
                wq: push(format!("layer{l}.head{h}.wq"), xavier(&mut rng, hd, dk)),
                wk: push(format!("layer{l}.head{h}.wk"), xavier(&mut rng, hd, dk)),
                wv: push(format!("layer{l}.head{h}.wv"), xavier(&mut rng, hd, dk)),
                reduce: None,
                centers: None,
            });
        }
        layers.push(LayerIdx {
            heads,
            out_w: push(format!("layer{l}.out.w"), xavier(&mut rng, hd, hd)),
            out_b: push(format!("layer{l}.out.b"), Matrix::zeros(1, hd)),
        });
    }
    let classifier = (
        push("classifier.w".into(), xavier(&mut rng, hd, n_classes)),
        push("classifier.b".into(), Matrix::zeros(1, n_classes)),
    );

    if let AttentionKind::Wideformer { m, centers, .. } = cfg.attention {
        let mut rng = Rng::new(cfg.seed).fork(0x22);
        for (l, layer) in layers.iter_mut().enumerate() {
            for (h, head) in layer.heads.iter_mut().enumerate() {
                let w = match cfg.reduction_init {
                    ReductionInit::Selector => {
                        let mut w = Matrix::zeros(m * dk, dk);
                        for c in 0..dk {
                            w[((m - 1) * dk + c, c)] = 1.0;
                        }
                        w
                    }
                    ReductionInit::Random => xavier(&mut rng, m * dk, dk),
                };
                head.reduce = Some((
                    push(format!("layer{l}.head{h}.reduce.w"), w),
                    push(format!("layer{l}.head{h}.reduce.b"), Matrix::zeros(1, dk)),
                ));
                if centers == CenterMode::Learnable {
                    let c = random_matrix(&mut rng, m, dk, Dist::Gaussian(1.0))?;
                    head.centers = Some(push(format!("layer{l}.head{h}.centers"), c));
                }
            }
        }
    }

    Ok(Model {
        cfg: cfg.clone(),
        feat_dim,
        n_classes,
        params,
        input,
        layers,
        classifier,
    })
}

fn dropout_mask(rng: &mut Rng, rows: usize, cols: usize, p: f64) -> Matrix {
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols)
        .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("finite mask")
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Matrix> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Replaces parameter values; names and shapes must match exactly.
    pub fn set_params(&mut self, values: Vec<NamedParam>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Validation {
                line: None,
                msg: format!("expected {} parameters, got {}", self.params.len(), values.len()),
            });
        }
        for (have, new) in self.params.iter().zip(&values) {
            if have.name != new.name || have.value.shape() != new.value.shape() {
                return Err(Error::Validation {
                    line: None,
                    msg: format!(
                        "parameter {} {:?} does not match {} {:?}",
                        new.name,
                        new.value.shape(),
                        have.name,
                        have.value.shape()
                    ),
                });
            }
        }
        self.params = values;
        Ok(())
    }

    /// Records the forward pass. `dropout_rng` enables dropout (training mode).
    pub fn forward(&self, tape: &mut Tape, x: &Matrix, dropout_rng: Option<&mut Rng>) -> Result<Forward> {
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        self.forward_with(tape, vars, x, dropout_rng)
    }

    /// Like [`Model::forward`] but reads parameters from existing tape
    /// variables, given in [`Model::params`] order.
    pub fn forward_with(&self, tape: &mut Tape, vars: Vec<Var>, x: &Matrix, dropout_rng: Option<&mut Rng>) -> Result<Forward> {
        if x.cols() != self.feat_dim {
            return Err(Error::shape("model input", x.shape(), (x.rows(), self.feat_dim)));
        }
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!("expected {} parameter variables, got {}", self.params.len(), vars.len())));
        }
        let n = x.rows();
        let xv = tape.constant(x.clone());
        let mut h = tape.matmul(xv, vars[self.input.0])?;
        h = tape.add_row(h, vars[self.input.1])?;

        let p_drop = self.cfg.dropout;
        let mut dropout_rng = dropout_rng.filter(|_| p_drop > 0.0);
        let dk = self.cfg.head_dim();
        let mut artifacts = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut head_outs = Vec::with_capacity(layer.heads.len());
            let mut layer_art = Vec::with_capacity(layer.heads.len());
            for head in &layer.heads {
                let mut q = tape.matmul(h, vars[head.wq])?;
                if self.cfg.scale_scores {
                    q = tape.scale(q, 1.0 / (dk as f64).sqrt());
                }
                let k = tape.matmul(h, vars[head.wk])?;
                let v = tape.matmul(h, vars[head.wv])?;
                let (out, art) = match self.cfg.attention {
                    AttentionKind::Dense => {
                        let s = tape.matmul_nt(q, k)?;
                        let a = tape.row_softmax(s, None)?;
                        let out = tape.matmul(a, v)?;
                        let art = HeadArtifacts {
                            q,
                            k,
                            scores: Some(a),
                            cluster_attn: None,
                            m: None,
                        };
                        (out, art)
                    }
                    AttentionKind::Wideformer { m, centers, guided } => {
                        if m > n {
                            return Err(Error::param(format!("cluster count {m} exceeds node count {n}")));
                        }
                        let center_var = head.centers.map(|i| vars[i]);
                        let variant = match centers {
                            CenterMode::OneShot => CenterVariant::OneShot,
                            CenterMode::Iterative(r) => CenterVariant::Iterative(r),
                            CenterMode::Learnable => CenterVariant::Learnable(
                                tape.value(center_var.expect("learnable centers")).clone(),
                            ),
                        };
                        let proj = crate::attention::Projections::new(
                            tape.value(q).clone(),
                            tape.value(k).clone(),
                            tape.value(v).clone(),
                        )?;
                        let plan = plan_clusters(&proj, m, &variant)?;
                        let mask = plan.non_empty();
                        let members = Rc::new(plan.members);
                        let agg = tape.segment_softmax_aggregate(q, k, v, members.clone())?;
                        let (slots, cluster_attn) = if guided {
                            let k_bar = tape.segment_mean(k, members, center_var)?;
                            let logits = tape.matmul_nt(q, k_bar)?;
                            let att = tape.row_softmax(logits, Some(&mask))?;
                            let av = tape.value(att);
                            let order: Vec<Vec<usize>> = (0..n).map(|i| ascending_order(av.row(i))).collect();
                            (tape.sort_weight(agg, att, Rc::new(order))?, Some(att))
                        } else {
                            (agg, None)
                        };
                        let (rw, rb) = head.reduce.expect("clustered head has a reduction");
                        let red = tape.matmul(slots, vars[rw])?;
                        let out = tape.add_row(red, vars[rb])?;
                        let art = HeadArtifacts {
                            q,
                            k,
                            scores: None,
                            cluster_attn,
                            m: Some(m),
                        };
                        (out, art)
                    }
                };
                head_outs.push(out);
                layer_art.push(art);
            }
            let cat = if head_outs.len() == 1 {
                head_outs[0]
            } else {
                tape.concat_cols(&head_outs)?
            };
            let o = tape.matmul(cat, vars[layer.out_w])?;
            let o = tape.add_row(o, vars[layer.out_b])?;
            let res = tape.add(h, o)?;
            h = tape.elu(res);
            if let Some(rng) = dropout_rng.as_deref_mut() {
                let mask = dropout_mask(rng, n, self.cfg.hidden_dim, p_drop);
                h = tape.mul_const(h, mask)?;
            }
            artifacts.push(layer_art);
        }
        let logits = tape.matmul(h, vars[self.classifier.0])?;
        let logits = tape.add_row(logits, vars[self.classifier.1])?;
        Ok(Forward {
            logits,
            layers: artifacts,
            param_vars: vars,
        })
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, x, None)?;
        Ok(tape.value(f.logits).clone())
    }
}

/// Cross-entropy over `rows` plus the optional entropy penalties.
///
/// The full-attention term is the mean over layers, heads and target nodes
/// of `H(α_i)/ln n`, built from `reg_batch_size`-row blocks of `Q` against
/// all of `K`. The cluster term is the mean of `H(ᾱ_i)/ln m` over guided
/// clustered heads. Zero-weight terms record nothing on the tape.
pub fn loss_with_entropy_reg(
    tape: &mut Tape,
    fwd: &Forward,
    labels: &[usize],
    rows: &[usize],
    cfg: &ModelConfig,
) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::param("loss mask selects no nodes"));
    }
    let mut loss = tape.cross_entropy(fwd.logits, labels, rows)?;
    let n = tape.value(fwd.logits).rows();

    if cfg.entropy_reg > 0.0 && n >= 2 {
        let heads: Vec<&HeadArtifacts> = fwd.layers.iter().flatten().collect();
        if !heads.is_empty() {
            let mut total: Option<Var> = None;
            let all: Vec<usize> = (0..n).collect();
            for head in &heads {
                for block in all.chunks(cfg.reg_batch_size) {
                    let qb = if block.len() == n {
                        head.q
                    } else {
                        tape.gather_rows(head.q, block)?
                    };
                    let s = tape.matmul_nt(qb, head.k)?;
                    let a = tape.row_softmax(s, None)?;
                    let h = tape.row_entropy(a);
                    let part = tape.sum(h);
                    total = Some(match total {
                        Some(t) => tape.add(t, part)?,
                        None => part,
                    });
                }
            }
            let denom = (n as f64).ln() * n as f64 * heads.len() as f64;
            let reg = tape.scale(total.expect("at least one head"), cfg.entropy_reg / denom);
            loss = tape.add(loss, reg)?;
        }
    }

    if cfg.cluster_entropy_reg > 0.0 {
        let mut terms = Vec::new();
        for head in fwd.layers.iter().flatten() {
            if let (Some(att), Some(m)) = (head.cluster_attn, head.m) {
                if m >= 2 {
                    let h = tape.row_entropy(att);
                    let mean = tape.mean(h);
                    terms.push(tape.scale(mean, 1.0 / (m as f64).ln()));
                }
            }
        }
        if !terms.is_empty() {
            let count = terms.len() as f64;
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t)?;
            }
            let reg = tape.scale(acc, cfg.cluster_entropy_reg / count);
            loss = tape.add(loss, reg)?;
        }
    }
    Ok(loss)
}

#[derive(Clone, Debug)]
pub struct HeadEntropy {
    /// Entropy of the full softmax attention `softmax(Q Kᵀ)`.
    pub attention: EntropyReport,
    /// Entropy of the cluster attention, for guided clustered heads.
    pub cluster: Option<EntropyReport>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Indexed by layer, then head.
    pub layers: Vec<Vec<HeadEntropy>>,
}

impl Evaluation {
    /// Mean normalized attention entropy per layer (averaged over heads).
    pub fn attention_entropy(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|hs| hs.iter().map(|h| h.attention.mean_normalized).sum::<f64>() / hs.len() as f64)
            .collect()
    }

    /// Mean normalized cluster-attention entropy per layer, if available.
    pub fn cluster_entropy(&self) -> Option<Vec<f64>> {
        self.layers
            .iter()
            .map(|hs| {
                let vals: Option<Vec<f64>> = hs.iter().map(|h| h.cluster.as_ref().map(|c| c.mean_normalized)).collect();
                vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect()
    }
}

fn predictions(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Fraction of `rows` where the predicted class equals the label.
pub fn accuracy(pred: &[usize], labels: &[usize], rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::param("accuracy over an empty mask"));
    }
    let hits = rows.iter().filter(|&&i| pred[i] == labels[i]).count();
    Ok(hits as f64 / rows.len() as f64)
}

fn head_entropies(tape: &Tape, fwd: &Forward) -> Result<Vec<Vec<HeadEntropy>>> {
    fwd.layers
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|h| {
                    let attention = match h.scores {
                        Some(a) => attention_entropy(tape.value(a))?,
                        None => attention_entropy_streaming(tape.value(h.q), tape.value(h.k))?,
                    };
                    let cluster = h.cluster_attn.map(|c| attention_entropy(tape.value(c))).transpose()?;
                    Ok(HeadEntropy { attention, cluster })
                })
                .collect()
        })
        .collect()
}

/// Accuracy on `mask` and entropy reports for every attention head,
/// computed in evaluation mode without gradient recording.
pub fn evaluate(model: &Model, graph: &Graph, mask: &[bool]) -> Result<Evaluation> {
    let rows = Graph::indices(mask);
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &graph.features, None)?;
    let pred = predictions(tape.value(fwd.logits));
    Ok(Evaluation {
        accuracy: accuracy(&pred, &graph.labels, &rows)?,
        layers: head_entropies(&tape, &fwd)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Training objective at the start of the epoch.
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub attn_entropy: Vec<f64>,
    pub cluster_entropy: Option<Vec<f64>>,
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Metrics of the untrained model (loss is NaN).
    pub initial: EpochRecord,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Test accuracy of the best-validation checkpoint.
    pub test_acc: f64,
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().unwrap_or(&self.initial)
    }

    pub fn final_attention_entropy(&self) -> f64 {
        mean(&self.last().attn_entropy)
    }

    pub fn final_cluster_entropy(&self) -> Option<f64> {
        self.last().cluster_entropy.as_deref().map(mean)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub struct Trained {
    /// Best-validation checkpoint.
    pub model: Model,
    pub report: TrainReport,
}

struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    wd: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    fn new(cfg: &ModelConfig, params: &[NamedParam]) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        Adam {
            lr: cfg.lr,
            b1: cfg.beta1,
            b2: cfg.beta2,
            eps: cfg.adam_eps,
            wd: cfg.weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn step(&mut self, params: &mut [NamedParam], grads: &[Matrix]) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.value.data_mut();
            for (idx, &gi) in g.data().iter().enumerate() {
                let gi = gi + self.wd * pd[idx];
                let mi = &mut m.data_mut()[idx];
                *mi = self.b1 * *mi + (1.0 - self.b1) * gi;
                let vi = &mut v.data_mut()[idx];
                *vi = self.b2 * *vi + (1.0 - self.b2) * gi * gi;
                let mhat = m.data()[idx] / c1;
                let vhat = v.data()[idx] / c2;
                pd[idx] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

fn record(epoch: usize, loss: f64, tape: &Tape, fwd: &Forward, graph: &Graph, splits: &[Vec<usize>; 3], started: Instant) -> Result<EpochRecord> {
    let pred = predictions(tape.value(fwd.logits));
    let acc = |rows: &Vec<usize>| {
        if rows.is_empty() {
            Ok(f64::NAN)
        } else {
            accuracy(&pred, &graph.labels, rows)
        }
    };
    let ent = Evaluation {
        accuracy: 0.0,
        layers: head_entropies(tape, fwd)?,
    };
    Ok(EpochRecord {
        epoch,
        loss,
        train_acc: acc(&splits[0])?,
        val_acc: acc(&splits[1])?,
        test_acc: acc(&splits[2])?,
        attn_entropy: ent.attention_entropy(),
        cluster_entropy: ent.cluster_entropy(),
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}

/// Full-batch Adam training; deterministic given `cfg.seed`.
pub fn train(graph: &Graph, cfg: &ModelConfig) -> Result<Trained> {
    let mut model = build_model(cfg, graph.feat_dim(), graph.n_classes)?;
    graph.validate()?;
    let splits = [
        Graph::indices(&graph.train),
        Graph::indices(&graph.val),
        Graph::indices(&graph.test),
    ];
    if splits[0].is_empty() {
        return Err(Error::param("training mask is empty"));
    }
    let started = Instant::now();
    let mut opt = Adam::new(cfg, model.params());
    let mut drop_rng = Rng::new(cfg.seed).fork(0x33);
    let training_dropout = cfg.dropout > 0.0;

    let mut eval_tape = Tape::new();
    let eval_fwd = model.forward(&mut eval_tape, &graph.features, None)?;
    let initial = record(0, f64::NAN, &eval_tape, &eval_fwd, graph, &splits, started)?;
    let mut best = (0usize, initial.val_acc, initial.test_acc, model.params.clone());

    let (mut tape, mut fwd) = if training_dropout {
        let mut t = Tape::new();
        let f = model.forward(&mut t, &graph.features, Some(&mut drop_rng))?;
        (t, f)
    } else {
        (eval_tape, eval_fwd)
    };

    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let loss = loss_with_entropy_reg(&mut tape, &fwd, &graph.labels, &splits[0], cfg)?;
        let loss_value = tape.value(loss)[(0, 0)];
        if !loss_value.is_finite() {
            return Err(Error::Divergence { epoch, loss: loss_value });
        }
        let grads: Gradients = tape.backward(loss)?;
        let g: Vec<Matrix> = fwd.param_vars.iter().map(|&v| grads.param(&tape, v)).collect();
        opt.step(&mut model.params, &g);

        let mut next_tape = Tape::new();
        let next_fwd = model.forward(&mut next_tape, &graph.features, None)?;
        let rec = record(epoch, loss_value, &next_tape, &next_fwd, graph, &splits, started)?;
        if rec.val_acc > best.1 {
            best = (epoch, rec.val_acc, rec.test_acc, model.params.clone());
        }
        epochs.push(rec);

        if training_dropout {
            tape = Tape::new();
            fwd = model.forward(&mut tape, &graph.features, Some(&mut drop_rng))?;
        } else {
            tape = next_tape;
            fwd = next_fwd;
        }
    }

    let (best_epoch, best_val_acc, test_acc, best_params) = best;
    model.set_params(best_params)?;
    Ok(Trained {
        model,
        report: TrainReport {
            epochs,
            initial,
            best_epoch,
            best_val_acc,
            test_acc,
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
    })
}

const CKPT_MAGIC: &str = "wideformer-checkpoint v1";

/// Writes named matrices: a text header (`name rows cols` per entry)
/// followed by the little-endian `f64` payload in header order.
pub fn save_checkpoint(params: &[NamedParam], path: impl AsRef<Path>) -> Result<()> {
    let mut header = String::new();
    writeln!(header, "{CKPT_MAGIC}").unwrap();
    writeln!(header, "{}", params.len()).unwrap();
    for p in params {
        if p.name.is_empty() || p.name.contains(char::is_whitespace) {
            return Err(Error::param(format!("parameter name '{}' must be non-empty without whitespace", p.name)));
        }
        writeln!(header, "{} {} {}", p.name, p.value.rows(), p.value.cols()).unwrap();
    }
    let mut out = fs::File::create(path)?;
    out.write_all(header.as_bytes())?;
    for p in params {
        let mut buf = Vec::with_capacity(p.value.len() * 8);
        for x in p.value.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<NamedParam>> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut line_no = 0;
    let mut next_line = |pos: &mut usize| -> Result<String> {
        line_no += 1;
        let rest = &bytes[*pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or(Error::Parse {
            line: line_no,
            msg: "truncated header".into(),
        })?;
        let s = std::str::from_utf8(&rest[..end]).map_err(|_| Error::Parse {
            line: line_no,
            msg: "header is not UTF-8".into(),
        })?;
        *pos += end + 1;
        Ok(s.to_string())
    };
    if next_line(&mut pos)? != CKPT_MAGIC {
        return Err(Error::Parse {
            line: 1,
            msg: "not a wideformer checkpoint".into(),
        });
    }
    let count: usize = next_line(&mut pos)?.trim().parse().map_err(|_| Error::Parse {
        line: 2,
        msg: "bad entry count".into(),
    })?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let l = next_line(&mut pos)?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        let parsed = match toks.as_slice() {
            [name, r, c] => r.parse::<usize>().ok().zip(c.parse::<usize>().ok()).map(|rc| (name.to_string(), rc)),
            _ => None,
        };
        let (name, (r, c)) = parsed.ok_or(Error::Parse {
            line: i + 3,
            msg: format!("bad entry '{l}'"),
        })?;
        entries.push((name, r, c));
    }
    let mut out = Vec::with_capacity(count);
    for (name, r, c) in entries {
        let len = r * c * 8;
        if bytes.len() < pos + len {
            return Err(Error::Validation {
                line: None,
                msg: format!("payload for {name} is truncated"),
            });
        }
        let data = bytes[pos..pos + len]
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().expect("8 bytes")))
            .collect();
        pos += len;
        out.push(NamedParam {
            name,
            value: Matrix::from_vec(r, c, data)?,
        });
    }
    if pos != bytes.len() {
        return Err(Error::Validation {
            line: None,
            msg: "trailing bytes after payload".into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_planted_partition, PlantedPartition};

    fn toy_graph(n: usize, noise: f64, seed: u64) -> Graph {
        generate_planted_partition(&PlantedPartition {
            n,
            n_classes: 3,
            p_in: 0.1,
            p_out: 0.02,
            feat_dim: 6,
            noise,
            seed,
        })
        .unwrap()
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            heads: 2,
            layers: 1,
            epochs: 5,
            lr: 1e-2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg();
        c.hidden_dim = 9;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.entropy_reg = -0.1;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.attention = AttentionKind::wideformer(0);
        assert!(c.validate().is_err());
        assert!(small_cfg().validate().is_ok());
    }

    #[test]
    fn zero_layers_is_affine() {
        let cfg = ModelConfig {
            layers: 0,
            ..small_cfg()
        };
        let g = toy_graph(30, 0.5, 1);
        let model = build_model(&cfg, 6, 3).unwrap();
        let logits = model.logits(&g.features).unwrap();
        // affine in the input: f(x) + f(y) - f(0) == f(x + y)
        let mut x2 = g.features.clone();
        for r in 0..30 {
            x2.row_mut(r).copy_from_slice(g.features.row((r + 1) % 30));
        }
        let sum = g.features.add(&x2).unwrap();
        let zero = model.logits(&Matrix::zeros(30, 6)).unwrap();
        let lhs = logits.add(&model.logits(&x2).unwrap()).unwrap().sub(&zero).unwrap();
        assert!(lhs.max_abs_diff(&model.logits(&sum).unwrap()) < 1e-12);
        assert_eq!(model.params().len(), 4);
    }

    #[test]
    fn forward_shapes() {
        let mut rng = Rng::new(4);
        for trial in 0..6 {
            let heads = 1 + rng.below(3);
            let cfg = ModelConfig {
                hidden_dim: heads * (1 + rng.below(4)),
                heads,
                layers: rng.below(3),
                attention: if trial % 2 == 0 { AttentionKind::Dense } else { AttentionKind::wideformer(1 + rng.below(4)) },
                ..small_cfg()
            };
            let (n, f, c) = (5 + rng.below(10), 1 + rng.below(5), 1 + rng.below(4));
            let model = build_model(&cfg, f, c).unwrap();
            let x = random_matrix(&mut rng, n, f, Dist::Gaussian(1.0)).unwrap();
            assert_eq!(model.logits(&x).unwrap().shape(), (n, c));
        }
    }

    #[test]
    fn single_cluster_model_matches_dense() {
        let g = toy_graph(24, 0.5, 2);
        let dense_cfg = ModelConfig {
            layers: 2,
            ..small_cfg()
        };
        let wide_cfg = ModelConfig {
            attention: AttentionKind::wideformer(1),
            ..dense_cfg.clone()
        };
        let dense = build_model(&dense_cfg, 6, 3).unwrap();
        let wide = build_model(&wide_cfg, 6, 3).unwrap();
        let a = dense.logits(&g.features).unwrap();
        let b = wide.logits(&g.features).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);

        let rd = train(&g, &dense_cfg).unwrap().report;
        let rw = train(&g, &wide_cfg).unwrap().report;
        assert!((rd.epochs[0].loss - rw.epochs[0].loss).abs() <= 1e-12);
    }

    #[test]
    fn plain_cross_entropy_without_regularizers() {
        let g = toy_graph(20, 0.5, 3);
        let cfg = small_cfg();
        let model = build_model(&cfg, 6, 3).unwrap();
        let rows = Graph::indices(&g.train);
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &g.features, None).unwrap();
        let before = tape.len();
        let loss = loss_with_entropy_reg(&mut tape, &fwd, &g.labels, &rows, &cfg).unwrap();
        assert_eq!(tape.len(), before + 1);
        let mut t2 = Tape::new();
        let l2 = t2.constant(tape.value(fwd.logits).clone());
        let ce = t2.cross_entropy(l2, &g.labels, &rows).unwrap();
        assert_eq!(tape.value(loss), t2.value(ce));
        assert!(loss_with_entropy_reg(&mut tape, &fwd, &g.labels, &[], &cfg).is_err());
    }

    #[test]
    fn confident_correct_logits_give_near_zero_loss() {
        let mut tape = Tape::new();
        let mut logits = Matrix::zeros(3, 2);
        for (i, y) in [0usize, 1, 1].iter().enumerate() {
            logits[(i, *y)] = 50.0;
        }
        let l = tape.constant(logits);
        let ce = tape.cross_entropy(l, &[0, 1, 1], &[0, 1, 2]).unwrap();
        assert!(tape.value(ce)[(0, 0)] < 1e-20);
    }

    #[test]
    fn regularized_loss_matches_hand_sum() {
        // 3-node toy, one dense head, λ = 0.1
        let g = generate_planted_partition(&PlantedPartition {
            n: 3,
            n_classes: 1,
            p_in: 0.0,
            p_out: 0.0,
            feat_dim: 2,
            noise: 1.0,
            seed: 9,
        })
        .unwrap();
        let cfg = ModelConfig {
            hidden_dim: 2,
            heads: 1,
            entropy_reg: 0.1,
            reg_batch_size: 2,
            ..ModelConfig::default()
        };
        let model = build_model(&cfg, 2, 1).unwrap();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &g.features, None).unwrap();
        let rows = vec![0, 1, 2];
        let loss = loss_with_entropy_reg(&mut tape, &fwd, &g.labels, &rows, &cfg).unwrap();

        let alpha = tape.value(fwd.layers[0][0].scores.unwrap()).clone();
        let mut ent = 0.0;
        for i in 0..3 {
            ent -= (0..3).map(|j| alpha[(i, j)] * alpha[(i, j)].ln()).sum::<f64>();
        }
        let mean_norm = ent / 3.0 / 3f64.ln();
        let logits = tape.value(fwd.logits);
        let ce: f64 = (0..3).map(|i| {
            let r = logits.row(i);
            let lse = r.iter().map(|x| x.exp()).sum::<f64>().ln();
            lse - r[g.labels[i]]
        }).sum::<f64>() / 3.0;
        assert!((tape.value(loss)[(0, 0)] - (ce + 0.1 * mean_norm)).abs() <= 1e-10);
    }

    #[test]
    fn entropy_penalty_changes_query_gradient_and_passes_grad_check() {
        let g = toy_graph(12, 0.5, 4);
        let rows = Graph::indices(&g.train);
        let base = ModelConfig {
            hidden_dim: 4,
            heads: 1,
            ..ModelConfig::default()
        };
        let grad_wq = |cfg: &ModelConfig| {
            let model = build_model(cfg, 6, 3).unwrap();
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &g.features, None).unwrap();
            let loss = loss_with_entropy_reg(&mut tape, &fwd, &g.labels, &rows, cfg).unwrap();
            let grads = tape.backward(loss).unwrap();
            let idx = model.params().iter().position(|p| p.name == "layer0.head0.wq").unwrap();
            grads.param(&tape, fwd.param_vars[idx])
        };
        let reg = ModelConfig {
            entropy_reg: 0.5,
            reg_batch_size: 5,
            ..base.clone()
        };
        assert!(grad_wq(&base).max_abs_diff(&grad_wq(&reg)) > 1e-6);

        for cfg in [
            reg.clone(),
            ModelConfig {
                attention: AttentionKind::wideformer(3),
                cluster_entropy_reg: 0.3,
                ..reg.clone()
            },
        ] {
            let model = build_model(&cfg, 6, 3).unwrap();
            let init: Vec<Matrix> = model.params().iter().map(|p| p.value.clone()).collect();
            let f = |tape: &mut Tape, vars: &[Var]| {
                let fwd = model.forward_with(tape, vars.to_vec(), &g.features, None)?;
                loss_with_entropy_reg(tape, &fwd, &g.labels, &rows, &cfg)
            };
            let rep = crate::autograd::grad_check(f, &init, 1e-5, 1e-4).unwrap();
            assert!(rep.passed(), "{rep:?}");
        }
    }

    #[test]
    fn training_is_deterministic_and_reports_every_epoch() {
        let g = toy_graph(30, 0.6, 5);
        let cfg = ModelConfig {
            attention: AttentionKind::wideformer(3),
            dropout: 0.2,
            ..small_cfg()
        };
        let a = train(&g, &cfg).unwrap();
        let b = train(&g, &cfg).unwrap();
        assert_eq!(a.report.epochs.len(), 5);
        for (x, y) in a.report.epochs.iter().zip(&b.report.epochs) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
            assert_eq!(x.val_acc, y.val_acc);
            assert_eq!(x.attn_entropy, y.attn_entropy);
            assert!(x.cluster_entropy.is_some());
        }
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn zero_epochs_gives_empty_report() {
        let g = toy_graph(30, 0.6, 6);
        let cfg = ModelConfig {
            epochs: 0,
            ..small_cfg()
        };
        let r = train(&g, &cfg).unwrap().report;
        assert!(r.epochs.is_empty());
        assert_eq!(r.best_epoch, 0);
        assert_eq!(r.test_acc, r.initial.test_acc);
    }

    #[test]
    fn dense_evaluation_reports_alpha_entropy() {
        let g = toy_graph(15, 0.6, 7);
        let model = build_model(&small_cfg(), 6, 3).unwrap();
        let ev = evaluate(&model, &g, &g.test).unwrap();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &g.features, None).unwrap();
        for (h, head) in fwd.layers[0].iter().enumerate() {
            let direct = attention_entropy(tape.value(head.scores.unwrap())).unwrap();
            assert!((direct.mean_normalized - ev.layers[0][h].attention.mean_normalized).abs() <= 1e-12);
        }
        assert!(ev.cluster_entropy().is_none());
        assert!(evaluate(&model, &g, &vec![false; 15]).is_err());
    }

    #[test]
    fn accuracy_edge_cases() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 2], &[1, 1, 1], &[0, 2]).unwrap(), 0.0);
        assert!(accuracy(&[0], &[0], &[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig {
            attention: AttentionKind::Wideformer {
                m: 2,
                centers: CenterMode::Learnable,
                guided: true,
            },
            ..small_cfg()
        };
        let model = build_model(&cfg, 6, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(model.params(), &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, model.params());
        let mut m2 = build_model(&cfg, 6, 3).unwrap();
        m2.set_params(back).unwrap();

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&path).is_err());
        fs::write(&path, b"nope\n").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Parse { line: 1, .. })));
    }
}
