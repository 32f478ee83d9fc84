//! Shared and specialized prototypes, key checkpoints, opposing classes,
//! uncertain prototypes, the checkpoint graph and the evolution matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Matrix;
use crate::prototypes::{kmeans_restarts, prototype_name, PrototypeError};
use crate::trajectory::ResponsibilityTrajectory;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("prototype {prototype} does not support class {class} (beta = {value})")]
    NotSupporting {
        prototype: usize,
        class: usize,
        value: f64,
    },
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
}

pub type Result<T> = std::result::Result<T, ExplainError>;

/// Sign changes below this magnitude are ignored.
pub const FLIP_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplainParams {
    pub eps_conf: f64,
    pub rho: f64,
    pub flip_min: usize,
    pub subgroup_k: usize,
    pub seed: u64,
}

impl Default for ExplainParams {
    fn default() -> Self {
        Self {
            eps_conf: 0.02,
            rho: 0.25,
            flip_min: 2,
            subgroup_k: 4,
            seed: 0,
        }
    }
}

impl ExplainParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_conf > 0.0 && self.eps_conf.is_finite()) {
            return Err(ExplainError::BadParam(format!(
                "eps_conf {} must be > 0",
                self.eps_conf
            )));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(ExplainError::BadParam(format!(
                "rho {} outside (0, 1]",
                self.rho
            )));
        }
        if self.subgroup_k == 0 {
            return Err(ExplainError::BadParam("subgroup_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedPrototypeSet {
    pub class: usize,
    pub prototypes: BTreeSet<usize>,
}

fn class_members(
    class: usize,
    labels: &[usize],
    presence: &[BTreeSet<usize>],
) -> Result<Vec<usize>> {
    if labels.len() != presence.len() {
        return Err(ExplainError::LengthMismatch(format!(
            "{} labels, {} presence sets",
            labels.len(),
            presence.len()
        )));
    }
    let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
    if members.is_empty() {
        return Err(ExplainError::EmptyClass(class));
    }
    Ok(members)
}

fn intersect<'a>(mut sets: impl Iterator<Item = &'a BTreeSet<usize>>) -> BTreeSet<usize> {
    let Some(first) = sets.next() else {
        return BTreeSet::new();
    };
    sets.fold(first.clone(), |acc, s| {
        acc.intersection(s).copied().collect()
    })
}

/// Prototypes present in every sample of `class`.
pub fn shared_prototypes(
    class: usize,
    labels: &[usize],
    presence: &[BTreeSet<usize>],
) -> Result<SharedPrototypeSet> {
    let members = class_members(class, labels, presence)?;
    Ok(SharedPrototypeSet {
        class,
        prototypes: intersect(members.iter().map(|&i| &presence[i])),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgroup {
    pub members: Vec<u64>,
    pub prototypes: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecializedPrototypeReport {
    pub class: usize,
    pub subgroups: Vec<Subgroup>,
}

/// Clusters the class's binary presence vectors and reports what each
/// subgroup has in common beyond the shared set.
pub fn specialized_prototypes(
    class: usize,
    labels: &[usize],
    sample_ids: &[u64],
    presence: &[BTreeSet<usize>],
    shared: &SharedPrototypeSet,
    subgroup_k: usize,
    seed: u64,
) -> Result<SpecializedPrototypeReport> {
    if subgroup_k == 0 {
        return Err(ExplainError::BadParam("subgroup_k must be >= 1".into()));
    }
    let members = class_members(class, labels, presence)?;
    if sample_ids.len() != labels.len() {
        return Err(ExplainError::LengthMismatch(format!(
            "{} sample ids, {} labels",
            sample_ids.len(),
            labels.len()
        )));
    }
    let universe: Vec<usize> = members
        .iter()
        .flat_map(|&i| presence[i].iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let rows: Vec<Vec<f64>> = members
        .iter()
        .map(|&i| {
            universe
                .iter()
                .map(|k| f64::from(u8::from(presence[i].contains(k))))
                .collect()
        })
        .collect();
    let distinct = rows
        .iter()
        .map(|r| r.iter().map(|v| *v as u8).collect::<Vec<_>>())
        .collect::<BTreeSet<_>>()
        .len();
    let k = subgroup_k.min(distinct);
    let assignment: Vec<usize> = if k <= 1 || universe.is_empty() {
        vec![0; members.len()]
    } else {
        let points = Matrix::from_rows(&rows).expect("rectangular presence rows");
        kmeans_restarts(&points, k, seed, 300, 10)?.labels
    };
    // Subgroups in order of first member.
    let mut order: Vec<usize> = Vec::new();
    for &g in &assignment {
        if !order.contains(&g) {
            order.push(g);
        }
    }
    let subgroups = order
        .iter()
        .map(|&g| {
            let idx: Vec<usize> = members
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == g)
                .map(|(&i, _)| i)
                .collect();
            let common = intersect(idx.iter().map(|&i| &presence[i]));
            Subgroup {
                members: idx.iter().map(|&i| sample_ids[i]).collect(),
                prototypes: common.difference(&shared.prototypes).copied().collect(),
            }
        })
        .collect();
    Ok(SpecializedPrototypeReport { class, subgroups })
}

/// Transition indices whose largest cluster-mean confidence change for
/// `class` reaches `eps_conf`.
pub fn key_checkpoints(traj: &ResponsibilityTrajectory, class: usize, eps_conf: f64) -> Vec<usize> {
    traj.transitions
        .iter()
        .enumerate()
        .filter(|(_, t)| (0..t.c.rows()).any(|q| t.c[(q, class)].abs() >= eps_conf))
        .map(|(i, _)| i)
        .collect()
}

/// Classes whose confidence moves against `class` under prototype `k`,
/// strongest first.
pub fn opposing_classes(beta: &Matrix, k: usize, class: usize, rho: f64) -> Result<Vec<usize>> {
    let own = beta[(k, class)];
    if own <= 0.0 {
        return Err(ExplainError::NotSupporting {
            prototype: k,
            class,
            value: own,
        });
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(ExplainError::BadParam(format!("rho {rho} outside (0, 1]")));
    }
    let mut out: Vec<usize> = (0..beta.cols())
        .filter(|&a| a != class && beta[(k, a)] < 0.0 && beta[(k, a)].abs() >= rho * own)
        .collect();
    out.sort_by(|&x, &y| {
        beta[(k, y)]
            .abs()
            .total_cmp(&beta[(k, x)].abs())
            .then(x.cmp(&y))
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertainPrototypeFinding {
    pub pair: (usize, usize),
    pub prototype: usize,
    /// Start iteration of each key transition.
    pub checkpoints: Vec<u64>,
    /// `beta[k, b] - beta[k, a]` at each key transition.
    pub contributions: Vec<f64>,
    pub flip_count: usize,
    pub supported: bool,
}

/// Positions `(i, j)` of consecutive significant entries with opposite signs.
fn flips(d: &[f64]) -> Vec<(usize, usize)> {
    let significant: Vec<usize> = (0..d.len()).filter(|&i| d[i].abs() >= FLIP_FLOOR).collect();
    significant
        .windows(2)
        .filter(|w| d[w[0]].signum() != d[w[1]].signum())
        .map(|w| (w[0], w[1]))
        .collect()
}

/// Prototypes whose contribution to the pair changes sign at least `flip_min` times.
pub fn detect_uncertain(
    traj: &ResponsibilityTrajectory,
    pair: (usize, usize),
    eps_conf: f64,
    flip_min: usize,
) -> Vec<UncertainPrototypeFinding> {
    let (a, b) = pair;
    if a == b || a >= traj.m || b >= traj.m {
        return Vec::new();
    }
    let keys: Vec<usize> = key_checkpoints(traj, a, eps_conf)
        .into_iter()
        .chain(key_checkpoints(traj, b, eps_conf))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let checkpoints: Vec<u64> = keys.iter().map(|&t| traj.transitions[t].from).collect();
    let d: Vec<Vec<f64>> = (0..traj.k)
        .map(|k| {
            keys.iter()
                .map(|&t| {
                    let beta = &traj.transitions[t].beta;
                    beta[(k, b)] - beta[(k, a)]
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for k in 0..traj.k {
        let f = flips(&d[k]);
        if f.len() < flip_min.max(1) {
            continue;
        }
        let at: BTreeSet<usize> = f.iter().flat_map(|&(i, j)| [i, j]).collect();
        let supported = (0..traj.k).filter(|&o| o != k).any(|o| {
            let signs: BTreeSet<i8> = at
                .iter()
                .map(|&i| {
                    if d[o][i].abs() >= eps_conf {
                        d[o][i].signum() as i8
                    } else {
                        0
                    }
                })
                .collect();
            signs.len() == 1 && !signs.contains(&0)
        });
        out.push(UncertainPrototypeFinding {
            pair,
            prototype: k,
            checkpoints: checkpoints.clone(),
            contributions: d[k].clone(),
            flip_count: f.len(),
            supported,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub transition: usize,
    pub iteration: u64,
}

impl GraphNode {
    pub fn name(&self) -> String {
        format!("T{}", self.iteration)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphEdge {
    /// Classes losing confidence, strongest first.
    pub sources: Vec<usize>,
    /// Index into the graph's nodes.
    pub target: usize,
    pub prototypes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedCheckpointGraph {
    pub class: usize,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

/// One node per key checkpoint; prototypes supporting `class` that share the
/// same opposing classes are merged into a single edge.
pub fn build_graph(
    traj: &ResponsibilityTrajectory,
    class: usize,
    eps_conf: f64,
    rho: f64,
) -> AnnotatedCheckpointGraph {
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for t in key_checkpoints(traj, class, eps_conf) {
        let tr = &traj.transitions[t];
        let target = nodes.len();
        nodes.push(GraphNode {
            transition: t,
            iteration: tr.from,
        });
        let mut grouped: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
        for k in 0..traj.k {
            if tr.beta[(k, class)] < eps_conf {
                continue;
            }
            let Ok(sources) = opposing_classes(&tr.beta, k, class, rho) else {
                continue;
            };
            if sources.is_empty() {
                continue;
            }
            match grouped.iter_mut().find(|(s, _)| *s == sources) {
                Some((_, protos)) => protos.push(k),
                None => grouped.push((sources, vec![k])),
            }
        }
        edges.extend(grouped.into_iter().map(|(sources, prototypes)| GraphEdge {
            sources,
            target,
            prototypes,
        }));
    }
    AnnotatedCheckpointGraph {
        class,
        nodes,
        edges,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatrixCell {
    /// `|beta| < eps_conf` for a prototype the class shares.
    NoChange,
    /// `|beta| < eps_conf` for a prototype not shared by every sample of the class.
    LacksPrototype,
    Effect {
        value: f64,
        /// 1, 2 or 3 for `|beta|` in `[eps, 2 eps)`, `[2 eps, 4 eps)`, `[4 eps, inf)`.
        bucket: u8,
        /// Class with the largest opposite-sign entry in the same row.
        opposer: Option<usize>,
        /// Shared by the class but not by the opposer.
        contrast: bool,
    },
}

impl MatrixCell {
    pub fn is_blank(&self) -> bool {
        !matches!(self, MatrixCell::Effect { .. })
    }

    pub fn render(&self) -> String {
        match *self {
            MatrixCell::NoChange => String::new(),
            MatrixCell::LacksPrototype => "#".into(),
            MatrixCell::Effect {
                value,
                bucket,
                opposer,
                contrast,
            } => {
                let mut s = format!("{}{bucket}", if value > 0.0 { '+' } else { '-' });
                if let Some(o) = opposer {
                    let _ = write!(s, ":{o}");
                }
                if contrast {
                    s.push('*');
                }
                s
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionMatrix {
    pub class: usize,
    /// Start iteration of each transition.
    pub rows: Vec<u64>,
    pub columns: Vec<usize>,
    /// `rows x columns`.
    pub cells: Vec<Vec<MatrixCell>>,
}

impl EvolutionMatrix {
    pub fn nonblank(&self) -> usize {
        self.cells
            .iter()
            .flatten()
            .filter(|c| !c.is_blank())
            .count()
    }
}

pub fn bucket(magnitude: f64, eps_conf: f64) -> u8 {
    if magnitude >= 4.0 * eps_conf {
        3
    } else if magnitude >= 2.0 * eps_conf {
        2
    } else {
        1
    }
}

/// Cell per (transition, prototype) of the class's column of beta.
/// `shared` maps each class to its shared set.
pub fn evolution_matrix(
    traj: &ResponsibilityTrajectory,
    class: usize,
    prototypes: &[usize],
    eps_conf: f64,
    shared: &BTreeMap<usize, BTreeSet<usize>>,
) -> EvolutionMatrix {
    let empty = BTreeSet::new();
    let own = shared.get(&class).unwrap_or(&empty);
    let cells = traj
        .transitions
        .iter()
        .map(|t| {
            prototypes
                .iter()
                .map(|&k| {
                    let v = t.beta[(k, class)];
                    if v.abs() < eps_conf {
                        return if own.contains(&k) {
                            MatrixCell::NoChange
                        } else {
                            MatrixCell::LacksPrototype
                        };
                    }
                    let opposer = (0..traj.m)
                        .filter(|&a| a != class && t.beta[(k, a)] * v < 0.0)
                        .max_by(|&x, &y| {
                            t.beta[(k, x)]
                                .abs()
                                .total_cmp(&t.beta[(k, y)].abs())
                                .then(y.cmp(&x))
                        });
                    let contrast = own.contains(&k)
                        && opposer.is_some_and(|o| !shared.get(&o).unwrap_or(&empty).contains(&k));
                    MatrixCell::Effect {
                        value: v,
                        bucket: bucket(v.abs(), eps_conf),
                        opposer,
                        contrast,
                    }
                })
                .collect()
        })
        .collect();
    EvolutionMatrix {
        class,
        rows: traj.transitions.iter().map(|t| t.from).collect(),
        columns: prototypes.to_vec(),
        cells,
    }
}

pub fn render_dot(graph: &AnnotatedCheckpointGraph) -> String {
    let mut s = format!("// i2x checkpoint graph for class {}\n", graph.class);
    if graph.nodes.is_empty() {
        s.push_str("digraph i2x {}\n");
        return s;
    }
    s.push_str("digraph i2x {\n  rankdir=LR;\n");
    for n in &graph.nodes {
        let _ = writeln!(s, "  \"{}\" [shape=box];", n.name());
    }
    for e in &graph.edges {
        let src: Vec<String> = e.sources.iter().map(|c| c.to_string()).collect();
        let label: Vec<String> = e.prototypes.iter().map(|&k| prototype_name(k)).collect();
        let _ = writeln!(
            s,
            "  \"{}\" -> \"{}\" [label=\"{}\"];",
            src.join(","),
            graph.nodes[e.target].name(),
            label.join(",")
        );
    }
    s.push_str("}\n");
    s
}

pub fn render_csv(matrix: &EvolutionMatrix) -> String {
    let mut s = String::from("checkpoint");
    for &k in &matrix.columns {
        let _ = write!(s, ",{}", prototype_name(k));
    }
    s.push('\n');
    for (row, cells) in matrix.rows.iter().zip(&matrix.cells) {
        let _ = write!(s, "T{row}");
        for c in cells {
            let _ = write!(s, ",{}", c.render());
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassExplanation {
    pub class: usize,
    pub shared: SharedPrototypeSet,
    pub specialized: SpecializedPrototypeReport,
    pub key_checkpoints: Vec<u64>,
    pub graph: AnnotatedCheckpointGraph,
    pub matrix: EvolutionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub params: ExplainParams,
    pub classes: Vec<ClassExplanation>,
    pub uncertain: Vec<UncertainPrototypeFinding>,
}

/// Sample-level inputs needed next to the trajectory.
#[derive(Debug, Clone, Copy)]
pub struct SampleView<'a> {
    pub labels: &'a [usize],
    pub sample_ids: &'a [u64],
    pub presence: &'a [BTreeSet<usize>],
}

/// Shared sets of every class with at least one sample.
pub fn all_shared(view: SampleView<'_>, classes: usize) -> BTreeMap<usize, BTreeSet<usize>> {
    (0..classes)
        .filter_map(|c| {
            shared_prototypes(c, view.labels, view.presence)
                .ok()
                .map(|s| (c, s.prototypes))
        })
        .collect()
}

pub fn explain_class(
    traj: &ResponsibilityTrajectory,
    view: SampleView<'_>,
    class: usize,
    params: &ExplainParams,
) -> Result<ClassExplanation> {
    params.validate()?;
    if class >= traj.m {
        return Err(ExplainError::BadParam(format!(
            "class {class} with {} classes",
            traj.m
        )));
    }
    let shared = shared_prototypes(class, view.labels, view.presence)?;
    let specialized = specialized_prototypes(
        class,
        view.labels,
        view.sample_ids,
        view.presence,
        &shared,
        params.subgroup_k,
        params.seed,
    )?;
    let graph = build_graph(traj, class, params.eps_conf, params.rho);
    let columns: Vec<usize> = (0..traj.k).collect();
    let matrix = evolution_matrix(
        traj,
        class,
        &columns,
        params.eps_conf,
        &all_shared(view, traj.m),
    );
    Ok(ClassExplanation {
        class,
        key_checkpoints: key_checkpoints(traj, class, params.eps_conf)
            .into_iter()
            .map(|t| traj.transitions[t].from)
            .collect(),
        shared,
        specialized,
        graph,
        matrix,
    })
}

/// Report for `classes`, plus uncertain findings when `pair` is given.
pub fn explain(
    traj: &ResponsibilityTrajectory,
    view: SampleView<'_>,
    classes: &[usize],
    pair: Option<(usize, usize)>,
    params: &ExplainParams,
) -> Result<ExplanationReport> {
    let classes = classes
        .iter()
        .map(|&c| explain_class(traj, view, c, params))
        .collect::<Result<Vec<_>>>()?;
    let uncertain = match pair {
        Some(p) => detect_uncertain(traj, p, params.eps_conf, params.flip_min),
        None => Vec::new(),
    };
    Ok(ExplanationReport {
        params: *params,
        classes,
        uncertain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn intersection_of_presence() {
        let p = vec![set(&[1, 2, 3]), set(&[1, 3]), set(&[1, 3, 4]), set(&[9])];
        let s = shared_prototypes(0, &[0, 0, 0, 1], &p).unwrap();
        assert_eq!(s.prototypes, set(&[1, 3]));
        assert!(matches!(
            shared_prototypes(2, &[0, 0, 0, 1], &p),
            Err(ExplainError::EmptyClass(2))
        ));
    }

    #[test]
    fn two_patterns_two_subgroups() {
        let p = vec![set(&[1, 2]), set(&[1, 3]), set(&[1, 2]), set(&[1, 3])];
        let labels = [0; 4];
        let shared = shared_prototypes(0, &labels, &p).unwrap();
        let r = specialized_prototypes(0, &labels, &[10, 11, 12, 13], &p, &shared, 2, 0).unwrap();
        assert_eq!(r.subgroups.len(), 2);
        assert_eq!(r.subgroups[0].members, vec![10, 12]);
        assert_eq!(r.subgroups[0].prototypes, set(&[2]));
        assert_eq!(r.subgroups[1].prototypes, set(&[3]));
        let one = specialized_prototypes(0, &labels, &[10, 11, 12, 13], &p, &shared, 1, 0).unwrap();
        assert_eq!(one.subgroups.len(), 1);
        assert!(one.subgroups[0].prototypes.is_empty());
    }

    #[test]
    fn opposition_threshold() {
        let beta = Matrix::from_rows(&[vec![0.4, -0.3, -0.05]]).unwrap();
        assert_eq!(opposing_classes(&beta, 0, 0, 0.25).unwrap(), vec![1]);
        let pos = Matrix::from_rows(&[vec![0.4, 0.3]]).unwrap();
        assert!(opposing_classes(&pos, 0, 0, 0.25).unwrap().is_empty());
        assert!(matches!(
            opposing_classes(&beta, 0, 1, 0.25),
            Err(ExplainError::NotSupporting { .. })
        ));
    }

    #[test]
    fn flip_rule() {
        assert_eq!(flips(&[0.1, -0.1, 0.1]).len(), 2);
        assert_eq!(flips(&[0.1, 0.2, 0.3]).len(), 0);
        assert_eq!(flips(&[0.1, 1e-9, 0.1]).len(), 0);
        assert_eq!(flips(&[0.1, 0.0, -0.1]), vec![(0, 2)]);
    }

    #[test]
    fn csv_cells() {
        let e = MatrixCell::Effect {
            value: -0.05,
            bucket: 2,
            opposer: Some(3),
            contrast: true,
        };
        assert_eq!(e.render(), "-2:3*");
        assert_eq!(MatrixCell::NoChange.render(), "");
        assert_eq!(MatrixCell::LacksPrototype.render(), "#");
    }
}
