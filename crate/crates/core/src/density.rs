//! HDBSCAN over confidence-change vectors.
//!
//! Pipeline: core distances, a minimum spanning tree under mutual
//! reachability (Prim), the single-linkage hierarchy condensed by
//! `min_cluster_size`, and excess-of-mass cluster selection. Labels are
//! `1..=Q` for clusters and `-1` for noise.
//!
//! `min_samples` counts neighbors excluding the point itself.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{sq_dist, Matrix};

/// Floor on merge distances so duplicate points give a finite lambda.
const MIN_DISTANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DensityError {
    #[error("core distances need more than min_samples = {min_samples} points, got {n}")]
    TooFewPoints { n: usize, min_samples: usize },
    #[error("invalid parameters: {0}")]
    BadParams(String),
}

pub type Result<T> = std::result::Result<T, DensityError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HdbscanParams {
    pub min_samples: usize,
    pub min_cluster_size: usize,
}

impl HdbscanParams {
    /// `min_cluster_size = max(5, N / 200)`, `min_samples = 5`.
    pub fn defaults_for(n: usize) -> Self {
        Self {
            min_samples: 5,
            min_cluster_size: (n / 200).max(5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_samples == 0 {
            return Err(DensityError::BadParams(
                "min_samples must be at least 1".into(),
            ));
        }
        if self.min_cluster_size < 2 {
            return Err(DensityError::BadParams(
                "min_cluster_size must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    /// Mutual-reachability distance.
    pub weight: f64,
    /// Plain Euclidean distance, used to order equal weights.
    pub raw: f64,
}

impl MstEdge {
    fn key(&self) -> (f64, f64) {
        (self.weight, self.raw)
    }
}

fn key_lt(x: (f64, f64), y: (f64, f64)) -> bool {
    x.0 < y.0 || (x.0 == y.0 && x.1 < y.1)
}

/// One row of the condensed tree. Point ids are `0..N`; cluster ids start at `N` (the root).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CondensedNode {
    pub parent: usize,
    pub child: usize,
    pub lambda: f64,
    pub child_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CondensedTree {
    pub n_points: usize,
    pub nodes: Vec<CondensedNode>,
}

impl CondensedTree {
    pub fn root(&self) -> usize {
        self.n_points
    }

    /// Cluster-to-cluster rows.
    pub fn cluster_edges(&self) -> impl Iterator<Item = &CondensedNode> {
        self.nodes.iter().filter(|n| n.child >= self.n_points)
    }

    fn cluster_count(&self) -> usize {
        self.cluster_edges().count() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLabels {
    /// `-1` for noise, otherwise `1..=q`.
    pub labels: Vec<i32>,
    pub q: usize,
}

impl ClusterLabels {
    pub fn all_noise(n: usize) -> Self {
        Self {
            labels: vec![-1; n],
            q: 0,
        }
    }

    /// Indices of cluster `label` (1-based).
    pub fn members(&self, label: i32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l < 0).count()
    }
}

/// Distance from each point to its `min_samples`-th nearest other point.
pub fn core_distances(points: &Matrix, min_samples: usize) -> Result<Vec<f64>> {
    let n = points.rows();
    if min_samples == 0 {
        return Err(DensityError::BadParams(
            "min_samples must be at least 1".into(),
        ));
    }
    if n <= min_samples {
        return Err(DensityError::TooFewPoints { n, min_samples });
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| sq_dist(points.row(i), points.row(j)))
                .collect();
            let (_, kth, _) = d.select_nth_unstable_by(min_samples - 1, f64::total_cmp);
            kth.sqrt()
        })
        .collect())
}

/// `(mutual reachability, euclidean)` between two points.
fn mutual_reachability(points: &Matrix, cores: &[f64], a: usize, b: usize) -> (f64, f64) {
    let raw = sq_dist(points.row(a), points.row(b)).sqrt();
    (raw.max(cores[a]).max(cores[b]), raw)
}

/// Prim's algorithm from point 0 on the complete mutual-reachability graph.
///
/// Mutual reachability ties are common (every edge of a sparse point weighs
/// its core distance), so equal weights are ordered by Euclidean distance,
/// which keeps the tree independent of input order. Remaining ties go to
/// the lower index.
pub fn mutual_reachability_mst(points: &Matrix, cores: &[f64]) -> Vec<MstEdge> {
    let n = points.rows();
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![(f64::INFINITY, f64::INFINITY); n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        for v in 0..n {
            if in_tree[v] {
                continue;
            }
            let w = mutual_reachability(points, cores, current, v);
            if key_lt(w, best[v]) || (w == best[v] && current < from[v]) {
                best[v] = w;
                from[v] = current;
            }
        }
        let mut next = usize::MAX;
        for v in 0..n {
            if !in_tree[v] && (next == usize::MAX || key_lt(best[v], best[next])) {
                next = v;
            }
        }
        in_tree[next] = true;
        let (a, b) = (from[next].min(next), from[next].max(next));
        edges.push(MstEdge {
            a,
            b,
            weight: best[next].0,
            raw: best[next].1,
        });
        current = next;
    }
    edges
}

struct Dendrogram {
    /// Row `i` describes internal node `n + i`: `(left, right, distance, size)`.
    merges: Vec<(usize, usize, f64, usize)>,
    n: usize,
}

impl Dendrogram {
    fn size(&self, node: usize) -> usize {
        if node < self.n {
            1
        } else {
            self.merges[node - self.n].3
        }
    }

    fn descendants(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut queue = VecDeque::from([node]);
        while let Some(x) = queue.pop_front() {
            out.push(x);
            if x >= self.n {
                let (l, r, _, _) = self.merges[x - self.n];
                queue.push_back(l);
                queue.push_back(r);
            }
        }
        out
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn single_linkage(mst: &[MstEdge], n: usize) -> Dendrogram {
    let mut edges = mst.to_vec();
    edges.sort_by(|x, y| {
        let (xk, yk) = (x.key(), y.key());
        xk.0.total_cmp(&yk.0)
            .then(xk.1.total_cmp(&yk.1))
            .then((x.a, x.b).cmp(&(y.a, y.b)))
    });
    let mut parent: Vec<usize> = (0..2 * n).collect();
    let mut size = vec![1usize; 2 * n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for (i, e) in edges.iter().enumerate() {
        let ra = find(&mut parent, e.a);
        let rb = find(&mut parent, e.b);
        let node = n + i;
        parent[ra] = node;
        parent[rb] = node;
        size[node] = size[ra] + size[rb];
        merges.push((ra, rb, e.weight, size[node]));
    }
    Dendrogram { merges, n }
}

/// Condenses the single-linkage hierarchy of `mst`: a split where a side has
/// fewer than `min_cluster_size` points records those points as falling out
/// of the parent at `lambda = 1 / distance`.
pub fn condense_tree(mst: &[MstEdge], n_points: usize, min_cluster_size: usize) -> CondensedTree {
    let n = n_points;
    if n < 2 {
        return CondensedTree {
            n_points: n,
            nodes: Vec::new(),
        };
    }
    let dendro = single_linkage(mst, n);
    let root = 2 * n - 2;
    let mut relabel = vec![0usize; 2 * n - 1];
    relabel[root] = n;
    let mut next_label = n + 1;
    let mut ignore = vec![false; 2 * n - 1];
    let mut nodes = Vec::new();
    for node in dendro.descendants(root) {
        if ignore[node] || node < n {
            continue;
        }
        let (left, right, dist, _) = dendro.merges[node - n];
        let lambda = 1.0 / dist.max(MIN_DISTANCE);
        let (lc, rc) = (dendro.size(left), dendro.size(right));
        let parent = relabel[node];
        let fall_out = |side: usize, nodes: &mut Vec<CondensedNode>, ignore: &mut [bool]| {
            for sub in dendro.descendants(side) {
                if sub < n {
                    nodes.push(CondensedNode {
                        parent,
                        child: sub,
                        lambda,
                        child_size: 1,
                    });
                }
                ignore[sub] = true;
            }
        };
        match (lc >= min_cluster_size, rc >= min_cluster_size) {
            (true, true) => {
                for (side, count) in [(left, lc), (right, rc)] {
                    relabel[side] = next_label;
                    nodes.push(CondensedNode {
                        parent,
                        child: next_label,
                        lambda,
                        child_size: count,
                    });
                    next_label += 1;
                }
            }
            (false, false) => {
                fall_out(left, &mut nodes, &mut ignore);
                fall_out(right, &mut nodes, &mut ignore);
            }
            (false, true) => {
                relabel[right] = parent;
                fall_out(left, &mut nodes, &mut ignore);
            }
            (true, false) => {
                relabel[left] = parent;
                fall_out(right, &mut nodes, &mut ignore);
            }
        }
    }
    CondensedTree { n_points: n, nodes }
}

/// Stability of each cluster id (`index - n_points`): `sum over rows of (lambda - birth) * size`.
pub fn stabilities(tree: &CondensedTree) -> Vec<f64> {
    let n = tree.n_points;
    let count = tree.cluster_count();
    let mut birth = vec![0.0; count];
    for e in tree.cluster_edges() {
        birth[e.child - n] = e.lambda;
    }
    let mut stability = vec![0.0; count];
    for e in &tree.nodes {
        stability[e.parent - n] += (e.lambda - birth[e.parent - n]) * e.child_size as f64;
    }
    stability
}

/// Excess-of-mass selection; the root is only returned as a cluster when it has no child clusters.
pub fn extract_clusters(tree: &CondensedTree) -> ClusterLabels {
    let n = tree.n_points;
    if tree.nodes.is_empty() {
        return ClusterLabels::all_noise(n);
    }
    let count = tree.cluster_count();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); count];
    for e in tree.cluster_edges() {
        children[e.parent - n].push(e.child - n);
    }
    let mut selected = vec![false; count];
    if count == 1 {
        selected[0] = true;
    } else {
        let mut stability = stabilities(tree);
        for c in 0..count {
            selected[c] = c != 0;
        }
        // Children always have larger ids than their parent.
        for c in (1..count).rev() {
            let subtree: f64 = children[c].iter().map(|&k| stability[k]).sum();
            if !children[c].is_empty() && stability[c] <= subtree {
                selected[c] = false;
                stability[c] = subtree;
            } else {
                let mut stack = children[c].clone();
                while let Some(k) = stack.pop() {
                    selected[k] = false;
                    stack.extend(children[k].iter().copied());
                }
            }
        }
    }
    // Owning selected cluster of every point: walk the parent chain.
    let mut cluster_parent = vec![usize::MAX; count];
    for e in tree.cluster_edges() {
        cluster_parent[e.child - n] = e.parent - n;
    }
    let mut owner = vec![None; n];
    for e in tree.nodes.iter().filter(|e| e.child < n) {
        let mut c = e.parent - n;
        loop {
            if selected[c] {
                owner[e.child] = Some(c);
                break;
            }
            if cluster_parent[c] == usize::MAX {
                break;
            }
            c = cluster_parent[c];
        }
    }
    let mut renumber = vec![0i32; count];
    let mut q = 0;
    let labels = owner
        .iter()
        .map(|o| match o {
            None => -1,
            Some(c) => {
                if renumber[*c] == 0 {
                    q += 1;
                    renumber[*c] = q;
                }
                renumber[*c]
            }
        })
        .collect();
    ClusterLabels {
        labels,
        q: q as usize,
    }
}

/// Full clustering. `min_samples` is clamped to `N - 1`; fewer than
/// `min_cluster_size` points are all noise.
pub fn hdbscan(points: &Matrix, params: &HdbscanParams) -> Result<ClusterLabels> {
    params.validate()?;
    let n = points.rows();
    if n < params.min_cluster_size || n < 2 {
        return Ok(ClusterLabels::all_noise(n));
    }
    let cores = core_distances(points, params.min_samples.min(n - 1))?;
    let mst = mutual_reachability_mst(points, &cores);
    Ok(extract_clusters(&condense_tree(
        &mst,
        n,
        params.min_cluster_size,
    )))
}

/// Two 20-point Gaussian blobs (std 0.5 around (0,0) and (5,5)) followed by
/// 5 outliers at least 8 from both centers and 6 from each other. Returns the points and the outlier indices.
pub fn two_blobs_with_outliers(seed: u64) -> (Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(45);
    for center in [(0.0, 0.0), (5.0, 5.0)] {
        for _ in 0..20 {
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            rows.push(vec![center.0 + 0.5 * dx, center.1 + 0.5 * dy]);
        }
    }
    while rows.len() < 45 {
        let p = [rng.random_range(-12.0..17.0), rng.random_range(-12.0..17.0)];
        let far = [(0.0, 0.0), (5.0, 5.0)]
            .iter()
            .all(|c: &(f64, f64)| ((p[0] - c.0).powi(2) + (p[1] - c.1).powi(2)).sqrt() >= 8.0);
        let apart = rows[40..]
            .iter()
            .all(|q: &Vec<f64>| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() >= 6.0);
        if far && apart {
            rows.push(p.to_vec());
        }
    }
    (
        Matrix::from_rows(&rows).expect("finite"),
        (40..45).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> Matrix {
        Matrix::from_rows(&xs.iter().map(|&x| vec![x]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn core_distances_by_hand() {
        assert_eq!(
            core_distances(&line(&[0.0, 1.0, 10.0]), 1).unwrap(),
            vec![1.0, 1.0, 9.0]
        );
        assert_eq!(core_distances(&line(&[2.0; 4]), 2).unwrap(), vec![0.0; 4]);
        assert!(matches!(
            core_distances(&line(&[0.0, 1.0]), 2),
            Err(DensityError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn chain_mst() {
        let p = line(&[0.0, 1.0, 10.0]);
        let cores = core_distances(&p, 1).unwrap();
        let mst = mutual_reachability_mst(&p, &cores);
        let pairs: Vec<_> = mst.iter().map(|e| (e.a, e.b, e.weight)).collect();
        assert_eq!(pairs, vec![(0, 1, 1.0), (1, 2, 9.0)]);
        let two = line(&[0.0, 3.0]);
        let mst = mutual_reachability_mst(&two, &[4.0, 1.0]);
        assert_eq!(
            mst,
            vec![MstEdge {
                a: 0,
                b: 1,
                weight: 4.0,
                raw: 3.0
            }]
        );
    }

    #[test]
    fn equal_distances_give_single_root() {
        // Vertices of a regular simplex: all pairwise distances equal.
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..6).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        let p = Matrix::from_rows(&rows).unwrap();
        let cores = core_distances(&p, 2).unwrap();
        let tree = condense_tree(&mutual_reachability_mst(&p, &cores), 6, 3);
        assert_eq!(tree.cluster_edges().count(), 0);
        let labels = extract_clusters(&tree);
        assert_eq!(labels.q, 1);
        assert_eq!(labels.noise_count(), 0);
    }

    #[test]
    fn two_far_blobs_split_once() {
        let mut xs: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        xs.extend((0..8).map(|i| 100.0 + i as f64 * 0.1));
        let p = line(&xs);
        let cores = core_distances(&p, 2).unwrap();
        let tree = condense_tree(&mutual_reachability_mst(&p, &cores), 16, 4);
        let splits: Vec<_> = tree.cluster_edges().collect();
        assert_eq!(splits.len(), 2);
        assert!(splits.iter().all(|e| e.parent == 16 && e.child_size == 8));
        let labels = extract_clusters(&tree);
        assert_eq!(labels.q, 2);
        assert!(labels.labels[..8].iter().all(|&l| l == 1));
        assert!(labels.labels[8..].iter().all(|&l| l == 2));
    }

    #[test]
    fn tiny_inputs_are_noise() {
        let one = line(&[1.0]);
        let params = HdbscanParams {
            min_samples: 1,
            min_cluster_size: 2,
        };
        assert_eq!(hdbscan(&one, &params).unwrap(), ClusterLabels::all_noise(1));
        let few = line(&[0.0, 1.0, 2.0]);
        let params = HdbscanParams {
            min_samples: 5,
            min_cluster_size: 5,
        };
        assert_eq!(hdbscan(&few, &params).unwrap().labels, vec![-1; 3]);
    }

    #[test]
    fn defaults_scale_with_n() {
        assert_eq!(HdbscanParams::defaults_for(100).min_cluster_size, 5);
        assert_eq!(HdbscanParams::defaults_for(6000).min_cluster_size, 30);
        assert_eq!(HdbscanParams::defaults_for(6000).min_samples, 5);
    }
}
