//! Divided aggregation with attention guidance.
//!
//! Source nodes are split into `m` clusters around centers picked from the
//! query rows, each cluster is aggregated with its own softmax, and the
//! per-cluster results are reordered and weighted by how strongly each
//! target attends to the cluster's mean key.
//!
//! All tie-breaks (seed row, argmin, argmax, argsort) resolve to the lowest
//! index. Nothing here allocates an `n × n` buffer: per-target scratch is
//! `O(n)` and cluster-level state is `O(n m)`.

use crate::attention::Projections;
use crate::error::{Error, Result};
use crate::numerics::{axpy_slice, dot, matmul_nt, row_softmax, softmax_in_place, Matrix};

/// Centers plus the induced partition of source nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterPlan {
    pub centers: Matrix,
    pub assignment: Vec<usize>,
    pub members: Vec<Vec<usize>>,
    pub m: usize,
}

impl ClusterPlan {
    /// Builds a plan from an assignment vector, deriving member lists.
    pub fn from_assignment(centers: Matrix, assignment: Vec<usize>, m: usize) -> Result<Self> {
        let mut members = vec![Vec::new(); m];
        for (i, &t) in assignment.iter().enumerate() {
            if t >= m {
                return Err(Error::IndexOutOfRange { index: t, len: m });
            }
            members[t].push(i);
        }
        Ok(ClusterPlan {
            centers,
            assignment,
            members,
            m,
        })
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    /// `true` for clusters with at least one member.
    pub fn non_empty(&self) -> Vec<bool> {
        self.members.iter().map(|m| !m.is_empty()).collect()
    }
}

/// Center-selection strategy.
#[derive(Clone, Debug, PartialEq)]
pub enum CenterVariant {
    /// Single greedy max-min pass over the query rows.
    OneShot,
    /// Greedy pass followed by `r` Lloyd-style refinements.
    Iterative(usize),
    /// Externally supplied (trainable) center matrix.
    Learnable(Matrix),
}

#[derive(Clone, Debug)]
pub struct WideOutput {
    pub plan: ClusterPlan,
    /// `H^(t)` for each cluster, in cluster-id order.
    pub per_cluster: Vec<Matrix>,
    /// `ᾱ`, `n × m`.
    pub cluster_attn: Matrix,
    /// Per target, cluster ids in ascending attention order.
    pub sort_idx: Vec<Vec<usize>>,
    /// `Ĥ^(t)` per slot.
    pub weighted: Vec<Matrix>,
    /// Slot-major concatenation of `weighted`, `n × (m · d_v)`.
    pub concat: Matrix,
}

impl WideOutput {
    /// Cluster-order concatenation of the raw per-cluster aggregates
    /// (divided aggregation without guidance).
    pub fn concat_unguided(&self) -> Matrix {
        let parts: Vec<&Matrix> = self.per_cluster.iter().collect();
        Matrix::hconcat(&parts).expect("per-cluster aggregates share row count")
    }
}

fn check_cluster_count(n: usize, m: usize) -> Result<()> {
    if m < 1 {
        return Err(Error::param("cluster count must be at least 1"));
    }
    if m > n {
        return Err(Error::param(format!("cluster count {m} exceeds node count {n}")));
    }
    Ok(())
}

fn argmax_lowest(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Row indices picked by the greedy center selection, in selection order.
///
/// The seed (largest row sum) only drives the first round; after that the
/// max ranges over the centers chosen so far, and chosen rows are never
/// eligible again.
pub fn select_center_indices(q: &Matrix, m: usize) -> Result<Vec<usize>> {
    let n = q.rows();
    check_cluster_count(n, m)?;
    let seed = argmax_lowest((0..n).map(|i| q.row(i).iter().sum())).expect("n >= 1");
    let seed_row = q.row(seed);
    let mut max_sim: Vec<f64> = (0..n).map(|i| dot(q.row(i), seed_row)).collect();
    let mut taken = vec![false; n];
    let mut picked = Vec::with_capacity(m);
    for round in 0..m {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            if best.is_none_or(|(_, b)| max_sim[i] < b) {
                best = Some((i, max_sim[i]));
            }
        }
        let (idx, _) = best.expect("m <= n leaves a candidate");
        taken[idx] = true;
        picked.push(idx);
        let c = q.row(idx);
        for (i, s) in max_sim.iter_mut().enumerate() {
            let sim = dot(q.row(i), c);
            *s = if round == 0 { sim } else { s.max(sim) };
        }
    }
    Ok(picked)
}

pub fn select_centers(q: &Matrix, m: usize) -> Result<Matrix> {
    Ok(q.select_rows(&select_center_indices(q, m)?))
}

/// Assigns each source node to the center its key is most similar to.
pub fn assign_clusters(k: &Matrix, centers: &Matrix) -> Result<ClusterPlan> {
    if k.cols() != centers.cols() {
        return Err(Error::shape("assign_clusters", k.shape(), centers.shape()));
    }
    let m = centers.rows();
    if m == 0 {
        return Err(Error::param("no centers supplied"));
    }
    let assignment = (0..k.rows())
        .map(|i| {
            let ki = k.row(i);
            argmax_lowest((0..m).map(|t| dot(ki, centers.row(t)))).expect("m >= 1")
        })
        .collect();
    ClusterPlan::from_assignment(centers.clone(), assignment, m)
}

fn check_plan(p: &Projections, plan: &ClusterPlan) -> Result<()> {
    if plan.n() != p.n() {
        return Err(Error::shape("cluster plan", (plan.n(), plan.m), (p.n(), p.head_dim())));
    }
    Ok(())
}

/// Per-cluster softmax aggregation written as one `n × (m · d_v)` matrix
/// with cluster-major column blocks. Empty clusters leave zero blocks.
pub(crate) fn segment_aggregate(q: &Matrix, k: &Matrix, v: &Matrix, members: &[Vec<usize>]) -> Matrix {
    let n = q.rows();
    let dv = v.cols();
    let m = members.len();
    let mut out = Matrix::zeros(n, m * dv);
    let mut buf = Vec::new();
    for i in 0..n {
        let qi = q.row(i);
        let orow = out.row_mut(i);
        for (t, mem) in members.iter().enumerate() {
            if mem.is_empty() {
                continue;
            }
            buf.clear();
            buf.extend(mem.iter().map(|&j| dot(qi, k.row(j))));
            softmax_in_place(&mut buf, None);
            let block = &mut orow[t * dv..(t + 1) * dv];
            for (&w, &j) in buf.iter().zip(mem) {
                axpy_slice(block, w, v.row(j));
            }
        }
    }
    out
}

/// `H^(t)` for every cluster: softmax over the cluster's members only.
pub fn cluster_aggregate(p: &Projections, plan: &ClusterPlan) -> Result<Vec<Matrix>> {
    check_plan(p, plan)?;
    let fused = segment_aggregate(&p.q, &p.k, &p.v, &plan.members);
    let dv = p.value_dim();
    Ok((0..plan.m).map(|t| fused.col_block(t * dv, dv)).collect())
}

/// Mean key per cluster; empty clusters get a zero row.
pub fn cluster_mean_keys(k: &Matrix, plan: &ClusterPlan) -> Matrix {
    let mut means = Matrix::zeros(plan.m, k.cols());
    for (t, mem) in plan.members.iter().enumerate() {
        if mem.is_empty() {
            continue;
        }
        let row = means.row_mut(t);
        for &j in mem {
            axpy_slice(row, 1.0, k.row(j));
        }
        let inv = 1.0 / mem.len() as f64;
        row.iter_mut().for_each(|x| *x *= inv);
    }
    means
}

/// `ᾱ = softmax(Q K̄ᵀ)` with empty clusters masked to exactly zero.
pub fn cluster_attention(p: &Projections, plan: &ClusterPlan) -> Result<Matrix> {
    check_plan(p, plan)?;
    let mask = plan.non_empty();
    if !mask.iter().any(|&b| b) {
        return Err(Error::Contract("every cluster is empty".into()));
    }
    let k_bar = cluster_mean_keys(&p.k, plan);
    row_softmax(&matmul_nt(&p.q, &k_bar)?, Some(&mask))
}

/// Stable ascending argsort of one attention row.
pub fn ascending_order(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
    idx
}

/// Reorders each target's cluster outputs by ascending cluster attention
/// and scales each by its attention weight.
pub fn sort_and_weight(per_cluster: &[Matrix], cluster_attn: &Matrix) -> Result<(Vec<Vec<usize>>, Vec<Matrix>)> {
    let m = per_cluster.len();
    if cluster_attn.cols() != m {
        return Err(Error::shape("sort_and_weight", cluster_attn.shape(), (cluster_attn.rows(), m)));
    }
    let n = cluster_attn.rows();
    let dv = per_cluster.first().map_or(0, Matrix::cols);
    for h in per_cluster {
        if h.shape() != (n, dv) {
            return Err(Error::shape("sort_and_weight", h.shape(), (n, dv)));
        }
    }
    let mut weighted = vec![Matrix::zeros(n, dv); m];
    let mut sort_idx = Vec::with_capacity(n);
    for i in 0..n {
        let a = cluster_attn.row(i);
        let order = ascending_order(a);
        for (slot, &t) in order.iter().enumerate() {
            let dst = weighted[slot].row_mut(i);
            for (d, &h) in dst.iter_mut().zip(per_cluster[t].row(i)) {
                *d = a[t] * h;
            }
        }
        sort_idx.push(order);
    }
    Ok((sort_idx, weighted))
}

/// Produces the cluster plan for a variant: centers from the queries,
/// assignment from the keys.
pub fn plan_clusters(p: &Projections, m: usize, variant: &CenterVariant) -> Result<ClusterPlan> {
    check_cluster_count(p.n(), m)?;
    match variant {
        CenterVariant::OneShot => assign_clusters(&p.k, &select_centers(&p.q, m)?),
        CenterVariant::Iterative(rounds) => {
            let mut centers = select_centers(&p.q, m)?;
            for _ in 0..*rounds {
                let plan = assign_clusters(&p.k, &centers)?;
                for (t, mem) in plan.members.iter().enumerate() {
                    if mem.is_empty() {
                        continue;
                    }
                    let row = centers.row_mut(t);
                    row.iter_mut().for_each(|x| *x = 0.0);
                    for &j in mem {
                        axpy_slice(row, 1.0, p.q.row(j));
                    }
                    let inv = 1.0 / mem.len() as f64;
                    row.iter_mut().for_each(|x| *x *= inv);
                }
            }
            assign_clusters(&p.k, &centers)
        }
        CenterVariant::Learnable(c) => {
            if c.rows() != m {
                return Err(Error::param(format!("learnable centers have {} rows, expected {m}", c.rows())));
            }
            assign_clusters(&p.k, c)
        }
    }
}

pub fn wideformer_forward(p: &Projections, m: usize, variant: &CenterVariant) -> Result<WideOutput> {
    let plan = plan_clusters(p, m, variant)?;
    let per_cluster = cluster_aggregate(p, &plan)?;
    let cluster_attn = cluster_attention(p, &plan)?;
    let (sort_idx, weighted) = sort_and_weight(&per_cluster, &cluster_attn)?;
    let parts: Vec<&Matrix> = weighted.iter().collect();
    let concat = Matrix::hconcat(&parts)?;
    Ok(WideOutput {
        plan,
        per_cluster,
        cluster_attn,
        sort_idx,
        weighted,
        concat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::dense_attention;
    use crate::numerics::{matmul, random_matrix, Dist, Rng};

    fn random_proj(rng: &mut Rng, n: usize, d: usize) -> Projections {
        Projections::new(
            random_matrix(rng, n, d, Dist::Gaussian(1.0)).unwrap(),
            random_matrix(rng, n, d, Dist::Gaussian(1.0)).unwrap(),
            random_matrix(rng, n, d, Dist::Gaussian(1.0)).unwrap(),
        )
        .unwrap()
    }

    /// Materializes α, zeroes out-of-cluster columns, renormalizes.
    fn masked_dense_oracle(p: &Projections, plan: &ClusterPlan) -> Vec<Matrix> {
        let alpha = dense_attention(p).unwrap().scores;
        plan.members
            .iter()
            .map(|mem| {
                let mut a = alpha.clone();
                for i in 0..a.rows() {
                    let row = a.row_mut(i);
                    for (j, x) in row.iter_mut().enumerate() {
                        if !mem.contains(&j) {
                            *x = 0.0;
                        }
                    }
                    let z: f64 = row.iter().sum();
                    if z > 0.0 {
                        row.iter_mut().for_each(|x| *x /= z);
                    }
                }
                matmul(&a, &p.v).unwrap()
            })
            .collect()
    }

    #[test]
    fn select_centers_hand_trace() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(select_center_indices(&q, 2).unwrap(), vec![0, 1]);
        let c = select_centers(&q, 2).unwrap();
        assert_eq!(c.row(0), &[1.0, 0.0]);
        assert_eq!(c.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn select_all_rows_once() {
        let q = random_matrix(&mut Rng::new(1), 9, 3, Dist::Gaussian(1.0)).unwrap();
        let mut idx = select_center_indices(&q, 9).unwrap();
        let c = select_centers(&q, 9).unwrap();
        for (r, &i) in idx.iter().enumerate() {
            assert_eq!(c.row(r), q.row(i));
        }
        idx.sort();
        assert_eq!(idx, (0..9).collect::<Vec<_>>());
        assert_eq!(select_centers(&q, 4).unwrap(), select_centers(&q, 4).unwrap());
    }

    #[test]
    fn select_centers_rejects_bad_m() {
        let q = Matrix::zeros(3, 2);
        assert!(matches!(select_centers(&q, 0), Err(Error::Parameter(_))));
        assert!(matches!(select_centers(&q, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn assign_examples() {
        let k = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let c = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let plan = assign_clusters(&k, &c).unwrap();
        assert_eq!(plan.assignment, vec![0, 1, 0]);
        assert_eq!(plan.members, vec![vec![0, 2], vec![1]]);

        let one = assign_clusters(&k, &Matrix::filled(1, 2, 0.3)).unwrap();
        assert_eq!(one.assignment, vec![0; 3]);
        assert!(assign_clusters(&k, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn assignment_relabels_with_center_permutation() {
        let mut rng = Rng::new(2);
        let k = random_matrix(&mut rng, 20, 3, Dist::Gaussian(1.0)).unwrap();
        let c = random_matrix(&mut rng, 4, 3, Dist::Gaussian(1.0)).unwrap();
        let perm = [2, 0, 3, 1];
        let base = assign_clusters(&k, &c).unwrap();
        let swapped = assign_clusters(&k, &c.select_rows(&perm)).unwrap();
        for i in 0..20 {
            assert_eq!(perm[swapped.assignment[i]], base.assignment[i]);
        }
    }

    #[test]
    fn single_cluster_aggregate_is_dense_attention() {
        let p = random_proj(&mut Rng::new(3), 7, 3);
        let plan = ClusterPlan::from_assignment(Matrix::zeros(1, 3), vec![0; 7], 1).unwrap();
        let h = cluster_aggregate(&p, &plan).unwrap();
        assert!(h[0].max_abs_diff(&dense_attention(&p).unwrap().output) <= 1e-14);
    }

    #[test]
    fn singleton_cluster_copies_value_row() {
        let p = random_proj(&mut Rng::new(4), 5, 2);
        let plan = ClusterPlan::from_assignment(Matrix::zeros(3, 2), vec![0, 0, 2, 0, 0], 3).unwrap();
        let h = cluster_aggregate(&p, &plan).unwrap();
        for i in 0..5 {
            assert_eq!(h[2].row(i), p.v.row(2));
            assert!(h[1].row(i).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn aggregate_matches_masked_oracle() {
        let mut rng = Rng::new(5);
        let p = random_proj(&mut rng, 4, 3);
        let plan = ClusterPlan::from_assignment(Matrix::zeros(2, 3), vec![1, 0, 1, 0], 2).unwrap();
        let got = cluster_aggregate(&p, &plan).unwrap();
        for (g, w) in got.iter().zip(masked_dense_oracle(&p, &plan)) {
            assert!(g.max_abs_diff(&w) <= 1e-10);
        }
        let bad = ClusterPlan::from_assignment(Matrix::zeros(2, 3), vec![0, 1, 0], 2).unwrap();
        assert!(cluster_aggregate(&p, &bad).is_err());
    }

    #[test]
    fn cluster_attention_examples() {
        let mut rng = Rng::new(6);
        let p = random_proj(&mut rng, 3, 2);
        let plan = ClusterPlan::from_assignment(Matrix::zeros(1, 2), vec![0; 3], 1).unwrap();
        assert!(cluster_attention(&p, &plan).unwrap().data().iter().all(|&a| a == 1.0));

        // equal mean keys in both clusters
        let k = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let q = random_matrix(&mut rng, 4, 2, Dist::Gaussian(1.0)).unwrap();
        let p2 = Projections::new(q, k, Matrix::zeros(4, 1)).unwrap();
        let plan = ClusterPlan::from_assignment(Matrix::zeros(2, 2), vec![0, 0, 1, 1], 2).unwrap();
        let a = cluster_attention(&p2, &plan).unwrap();
        assert!(a.data().iter().all(|&x| (x - 0.5).abs() < 1e-15));

        let plan = ClusterPlan::from_assignment(Matrix::zeros(2, 2), vec![1, 0, 1], 2).unwrap();
        let a = cluster_attention(&p, &plan).unwrap();
        let kb0 = p.k.row(1).to_vec();
        let kb1: Vec<f64> = (0..2).map(|c| (p.k[(0, c)] + p.k[(2, c)]) / 2.0).collect();
        for i in 0..3 {
            let l0: f64 = (0..2).map(|c| p.q[(i, c)] * kb0[c]).sum();
            let l1: f64 = (0..2).map(|c| p.q[(i, c)] * kb1[c]).sum();
            let w0 = l0.exp() / (l0.exp() + l1.exp());
            assert!((a[(i, 0)] - w0).abs() <= 1e-12);
            assert!((a[(i, 1)] - (1.0 - w0)).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_cluster_is_masked() {
        let p = random_proj(&mut Rng::new(7), 4, 2);
        let plan = ClusterPlan::from_assignment(Matrix::zeros(3, 2), vec![0, 2, 2, 0], 3).unwrap();
        let a = cluster_attention(&p, &plan).unwrap();
        for i in 0..4 {
            assert_eq!(a[(i, 1)], 0.0);
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let h = cluster_aggregate(&p, &plan).unwrap();
        let (s, w) = sort_and_weight(&h, &a).unwrap();
        for i in 0..4 {
            assert_eq!(s[i][0], 1);
            assert!(w[0].row(i).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn sort_and_weight_examples() {
        let h0 = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let h1 = Matrix::from_rows(&[vec![-3.0, 4.0]]).unwrap();
        let a = Matrix::from_rows(&[vec![0.2, 0.8]]).unwrap();
        let (s, w) = sort_and_weight(&[h0.clone(), h1.clone()], &a).unwrap();
        assert_eq!(s[0], vec![0, 1]);
        assert_eq!(w[1].row(0), &[0.8 * -3.0, 0.8 * 4.0]);
        assert_eq!(w[0].row(0), &[0.2, 0.4]);

        let a = Matrix::from_rows(&[vec![0.7, 0.3]]).unwrap();
        let (s, w) = sort_and_weight(&[h0.clone(), h1.clone()], &a).unwrap();
        assert_eq!(s[0], vec![1, 0]);
        assert_eq!(w[1].row(0), &[0.7, 1.4]);

        let uni = Matrix::from_rows(&[vec![0.25; 4]]).unwrap();
        let hs: Vec<Matrix> = (0..4).map(|t| Matrix::filled(1, 1, t as f64)).collect();
        let (s, w) = sort_and_weight(&hs, &uni).unwrap();
        assert_eq!(s[0], vec![0, 1, 2, 3]);
        for (t, wt) in w.iter().enumerate() {
            assert_eq!(wt[(0, 0)], 0.25 * t as f64);
        }

        let (s, w) = sort_and_weight(&[h0.clone()], &Matrix::filled(1, 1, 1.0)).unwrap();
        assert_eq!(s[0], vec![0]);
        assert_eq!(w[0], h0);
        assert!(sort_and_weight(&[h0], &a).is_err());
    }

    #[test]
    fn single_cluster_forward_is_dense_for_every_variant() {
        let mut rng = Rng::new(8);
        let p = random_proj(&mut rng, 12, 4);
        let dense = dense_attention(&p).unwrap().output;
        let variants = [
            CenterVariant::OneShot,
            CenterVariant::Iterative(3),
            CenterVariant::Learnable(random_matrix(&mut rng, 1, 4, Dist::Gaussian(1.0)).unwrap()),
        ];
        for v in &variants {
            let out = wideformer_forward(&p, 1, v).unwrap();
            assert!(out.concat.max_abs_diff(&dense) <= 1e-12);
        }
    }

    #[test]
    fn zero_refinements_match_one_shot_bitwise() {
        let p = random_proj(&mut Rng::new(9), 20, 3);
        let a = wideformer_forward(&p, 4, &CenterVariant::OneShot).unwrap();
        let b = wideformer_forward(&p, 4, &CenterVariant::Iterative(0)).unwrap();
        assert_eq!(a.plan, b.plan);
        assert_eq!(a.concat.data(), b.concat.data());
    }

    #[test]
    fn forward_matches_manual_composition() {
        let p = random_proj(&mut Rng::new(10), 16, 3);
        let out = wideformer_forward(&p, 3, &CenterVariant::OneShot).unwrap();
        let c = select_centers(&p.q, 3).unwrap();
        let plan = assign_clusters(&p.k, &c).unwrap();
        let h = cluster_aggregate(&p, &plan).unwrap();
        let a = cluster_attention(&p, &plan).unwrap();
        let (_, w) = sort_and_weight(&h, &a).unwrap();
        let refs: Vec<&Matrix> = w.iter().collect();
        assert_eq!(out.concat, Matrix::hconcat(&refs).unwrap());
        assert_eq!(out.plan.members.iter().map(Vec::len).sum::<usize>(), 16);
        assert_eq!(out.concat_unguided(), Matrix::hconcat(&h.iter().collect::<Vec<_>>()).unwrap());
    }

    #[test]
    fn learnable_center_count_checked() {
        let p = random_proj(&mut Rng::new(11), 6, 2);
        assert!(wideformer_forward(&p, 2, &CenterVariant::Learnable(Matrix::zeros(3, 2))).is_err());
    }
}
