//! Synthetic graphs and the plain-text graph file format.
//!
//! File layout (UTF-8, whitespace separated):
//!
//! ```text
//! n d n_classes
//! <label> <d features>        # n lines
//! E
//! i j                         # E lines, i < j
//! <n 0/1 flags>               # train
//! <n 0/1 flags>               # val
//! <n 0/1 flags>               # test
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub features: Matrix,
    /// Undirected edges stored as `(i, j)` with `i < j`.
    pub edges: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Graph {
    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }

    /// Indices where `mask` is set.
    pub fn indices(mask: &[bool]) -> Vec<usize> {
        mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let invalid = |msg: String| Error::Validation { line: None, msg };
        if self.labels.len() != n || self.train.len() != n || self.val.len() != n || self.test.len() != n {
            return Err(invalid("label or mask length differs from node count".into()));
        }
        if let Some((i, &y)) = self.labels.iter().enumerate().find(|(_, &y)| y >= self.n_classes) {
            return Err(invalid(format!("label {y} of node {i} outside [0, {})", self.n_classes)));
        }
        let mut seen = HashSet::with_capacity(self.edges.len());
        for &(i, j) in &self.edges {
            if i >= n || j >= n {
                return Err(invalid(format!("edge ({i}, {j}) out of range")));
            }
            if i == j {
                return Err(invalid(format!("self-loop at node {i}")));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(invalid(format!("duplicate edge ({i}, {j})")));
            }
        }
        for i in 0..n {
            if [self.train[i], self.val[i], self.test[i]].iter().filter(|&&b| b).count() > 1 {
                return Err(invalid(format!("node {i} is in more than one split")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantedPartition {
    pub n: usize,
    pub n_classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feat_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Planted-partition graph with class-mean features plus gaussian noise
/// and a stratified 50/25/25 split.
pub fn generate_planted_partition(spec: &PlantedPartition) -> Result<Graph> {
    let PlantedPartition {
        n,
        n_classes,
        p_in,
        p_out,
        feat_dim,
        noise,
        seed,
    } = *spec;
    for (name, p) in [("p_in", p_in), ("p_out", p_out)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::param(format!("{name} = {p} is not a probability")));
        }
    }
    if n_classes == 0 || n_classes > n {
        return Err(Error::param(format!("need 1 <= n_classes <= n, got {n_classes} classes for {n} nodes")));
    }
    if feat_dim == 0 {
        return Err(Error::param("feature dimension must be positive"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::param(format!("noise {noise} must be a finite nonnegative number")));
    }
    let root = Rng::new(seed);

    let mut labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    root.fork(1).shuffle(&mut labels);

    let mut rng = root.fork(2);
    let mut means = Matrix::zeros(n_classes, feat_dim);
    for c in 0..n_classes {
        let row = means.row_mut(c);
        row.iter_mut().for_each(|x| *x = rng.gaussian());
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        row.iter_mut().for_each(|x| *x /= norm);
    }

    let mut rng = root.fork(3);
    let mut features = Matrix::zeros(n, feat_dim);
    for i in 0..n {
        let mean = means.row(labels[i]).to_vec();
        for (x, mu) in features.row_mut(i).iter_mut().zip(mean) {
            *x = mu + noise * rng.gaussian();
        }
    }

    let mut rng = root.fork(4);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] { p_in } else { p_out };
            if p > 0.0 && rng.bernoulli(p) {
                edges.push((i, j));
            }
        }
    }

    let g = Graph {
        features,
        edges,
        labels,
        n_classes,
        train: vec![false; n],
        val: vec![false; n],
        test: vec![false; n],
    };
    make_splits(&g, [0.5, 0.25, 0.25], seed)
}

/// Stratified train/val/test split.
///
/// Per split, the classes are laid end to end and each class receives the
/// integer cells of `[r·P_c, r·(P_c + n_c))` where `P_c` counts the nodes of
/// earlier classes, so per-split totals are `⌊r·n⌋` and per-class counts
/// differ by at most one from `r·n_c`.
pub fn make_splits(g: &Graph, ratios: [f64; 3], seed: u64) -> Result<Graph> {
    if ratios.iter().any(|&r| !(r >= 0.0)) || ratios.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::param(format!("split ratios {ratios:?} must be nonnegative and sum to at most 1")));
    }
    if ratios.iter().all(|&r| r == 0.0) {
        return Err(Error::param("all split ratios are zero"));
    }
    let slots = ratios.iter().filter(|&&r| r > 0.0).count();
    let n = g.n();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); g.n_classes];
    for (i, &y) in g.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = Rng::new(seed).fork(17);
    let mut masks = [vec![false; n], vec![false; n], vec![false; n]];
    let cumulative = [ratios[0], ratios[0] + ratios[1], (ratios[0] + ratios[1] + ratios[2]).min(1.0)];
    let mut before = 0usize;
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < slots {
            return Err(Error::param(format!(
                "class {c} has {} nodes but {slots} splits need one each",
                members.len()
            )));
        }
        rng.shuffle(members);
        let after = before + members.len();
        let mut start = 0;
        for (s, &cum) in cumulative.iter().enumerate() {
            let end = ((cum * after as f64 + 1e-9).floor() - (cum * before as f64 + 1e-9).floor()) as usize;
            let end = end.min(members.len());
            for &i in &members[start..end.max(start)] {
                masks[s][i] = true;
            }
            start = start.max(end);
        }
        before = after;
    }
    let [train, val, test] = masks;
    Ok(Graph {
        train,
        val,
        test,
        ..g.clone()
    })
}

fn mask_line(mask: &[bool]) -> String {
    mask.iter().map(|&b| if b { "1" } else { "0" }).collect::<Vec<_>>().join(" ")
}

pub fn save_graph(g: &Graph, path: impl AsRef<Path>) -> Result<()> {
    g.validate()?;
    let mut out = String::new();
    writeln!(out, "{} {} {}", g.n(), g.feat_dim(), g.n_classes).unwrap();
    for i in 0..g.n() {
        out.push_str(&g.labels[i].to_string());
        for x in g.features.row(i) {
            // shortest representation that round-trips
            write!(out, " {x}").unwrap();
        }
        out.push('\n');
    }
    writeln!(out, "{}", g.edges.len()).unwrap();
    for &(i, j) in &g.edges {
        writeln!(out, "{} {}", i.min(j), i.max(j)).unwrap();
    }
    for mask in [&g.train, &g.val, &g.test] {
        writeln!(out, "{}", mask_line(mask)).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        let mut last = 0;
        for (i, l) in self.inner.by_ref() {
            last = i + 1;
            if !l.trim().is_empty() {
                return Ok((i + 1, l));
            }
        }
        Err(Error::Parse {
            line: last + 1,
            msg: format!("unexpected end of file, expected {what}"),
        })
    }
}

fn parse_field<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid {what} '{tok}'"),
    })
}

fn parse_usizes(line: usize, text: &str, expect: usize, what: &str) -> Result<Vec<usize>> {
    let vals: Vec<usize> = text
        .split_whitespace()
        .map(|t| parse_field(t, line, what))
        .collect::<Result<_>>()?;
    if vals.len() != expect {
        return Err(Error::Parse {
            line,
            msg: format!("expected {expect} {what} values, found {}", vals.len()),
        });
    }
    Ok(vals)
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<Graph> {
    let text = fs::read_to_string(path)?;
    parse_graph(&text)
}

pub fn parse_graph(text: &str) -> Result<Graph> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (ln, header) = lines.next("header")?;
    let h = parse_usizes(ln, header, 3, "header")?;
    let (n, d, n_classes) = (h[0], h[1], h[2]);

    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let (ln, l) = lines.next("node line")?;
        let mut toks = l.split_whitespace();
        let y: usize = parse_field(toks.next().unwrap_or(""), ln, "label")?;
        if y >= n_classes {
            return Err(Error::Validation {
                line: Some(ln),
                msg: format!("label {y} outside [0, {n_classes})"),
            });
        }
        labels.push(y);
        let before = data.len();
        for t in toks {
            let x: f64 = parse_field(t, ln, "feature")?;
            if !x.is_finite() {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("non-finite feature '{t}'"),
                });
            }
            data.push(x);
        }
        if data.len() - before != d {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected {d} features, found {}", data.len() - before),
            });
        }
    }

    let (ln, e_line) = lines.next("edge count")?;
    let e = parse_usizes(ln, e_line, 1, "edge count")?[0];
    let mut edges = Vec::with_capacity(e);
    let mut seen = HashSet::with_capacity(e);
    for _ in 0..e {
        let (ln, l) = lines.next("edge line")?;
        let ij = parse_usizes(ln, l, 2, "edge endpoint")?;
        let (i, j) = (ij[0], ij[1]);
        let bad = |msg: String| Error::Validation { line: Some(ln), msg };
        if i >= n || j >= n {
            return Err(bad(format!("edge ({i}, {j}) out of range for {n} nodes")));
        }
        if i == j {
            return Err(bad(format!("self-loop at node {i}")));
        }
        let key = (i.min(j), i.max(j));
        if !seen.insert(key) {
            return Err(bad(format!("duplicate edge ({i}, {j})")));
        }
        edges.push(key);
    }

    let mut masks = Vec::with_capacity(3);
    for name in ["train mask", "val mask", "test mask"] {
        let (ln, l) = lines.next(name)?;
        let flags = parse_usizes(ln, l, n, name)?;
        if let Some(bad) = flags.iter().find(|&&f| f > 1) {
            return Err(Error::Parse {
                line: ln,
                msg: format!("mask flag {bad} is not 0 or 1"),
            });
        }
        masks.push(flags.into_iter().map(|f| f == 1).collect::<Vec<bool>>());
    }
    if let Ok((ln, _)) = lines.next("") {
        return Err(Error::Parse {
            line: ln,
            msg: "trailing content after test mask".into(),
        });
    }
    let test = masks.pop().unwrap();
    let val = masks.pop().unwrap();
    let train = masks.pop().unwrap();
    let g = Graph {
        features: Matrix::from_vec(n, d, data)?,
        edges,
        labels,
        n_classes,
        train,
        val,
        test,
    };
    g.validate()?;
    Ok(g)
}
