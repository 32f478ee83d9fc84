//! Prototype intensities, checkpoint-to-checkpoint deltas, cluster
//! aggregates and the ridge responsibility map `beta` (`K x M`) per transition.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{ArtifactError, RunArchive};
use crate::container::{Container, ContainerError, ContainerWriter};
use crate::density::{hdbscan, ClusterLabels, DensityError, HdbscanParams};
use crate::numerics::{solve_spd, Matrix, NumericsError};
use crate::prototypes::{assign, AssignmentMap, PrototypeBook, PrototypeError};

pub const TRAJECTORY_KIND: &str = "trajectory";

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("need at least two checkpoints, got {0}")]
    InsufficientCheckpoints(usize),
    #[error("cluster {0} has no members")]
    EmptyCluster(i32),
    #[error("every sample is noise; no clusters to aggregate")]
    NoClusters,
    #[error("normal matrix is singular; use lambda > 0")]
    Singular,
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, TrajectoryError>;

#[derive(Debug, Clone, PartialEq)]
pub struct IntensityVector {
    /// Mean saliency over the locations assigned to each prototype.
    pub values: Vec<f64>,
    /// Prototypes with no assigned location in this sample.
    pub absent: BTreeSet<usize>,
}

/// Mean saliency per prototype over its assigned locations; 0 when absent.
pub fn prototype_intensity(
    saliency: &[f64],
    assignment: &[usize],
    k: usize,
) -> Result<IntensityVector> {
    if saliency.len() != assignment.len() {
        return Err(TrajectoryError::LengthMismatch(format!(
            "{} saliency values, {} assignments",
            saliency.len(),
            assignment.len()
        )));
    }
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (&s, &a) in saliency.iter().zip(assignment) {
        if a >= k {
            return Err(TrajectoryError::LengthMismatch(format!(
                "prototype id {a} with K = {k}"
            )));
        }
        sums[a] += s;
        counts[a] += 1;
    }
    let mut absent = BTreeSet::new();
    let values = sums
        .iter()
        .zip(&counts)
        .enumerate()
        .map(|(i, (&s, &c))| {
            if c == 0 {
                absent.insert(i);
                0.0
            } else {
                s / c as f64
            }
        })
        .collect();
    Ok(IntensityVector { values, absent })
}

/// `N x K` intensities of one checkpoint.
pub fn intensity_matrix(saliency: &[f32], assignments: &AssignmentMap) -> Result<Matrix> {
    let hw = assignments.locations;
    let n = assignments.sample_count();
    if saliency.len() != n * hw {
        return Err(TrajectoryError::LengthMismatch(format!(
            "{} saliency values for {n} samples of {hw} locations",
            saliency.len()
        )));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s: Vec<f64> = saliency[i * hw..(i + 1) * hw]
                .iter()
                .map(|&v| f64::from(v))
                .collect();
            prototype_intensity(&s, assignments.sample(i), assignments.k).map(|v| v.values)
        })
        .collect::<Result<_>>()?;
    Ok(Matrix::new(
        n,
        assignments.k,
        rows.into_iter().flatten().collect(),
    )?)
}

/// Changes between two consecutive checkpoints, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDeltas {
    pub from: u64,
    pub to: u64,
    /// `N x K`.
    pub dp: Matrix,
    /// `N x M`.
    pub dy: Matrix,
}

/// Consecutive differences of intensities (`N x K` each) and confidences (`N x M` each).
pub fn deltas(
    checkpoints: &[u64],
    intensities: &[Matrix],
    confidences: &[Matrix],
) -> Result<Vec<TransitionDeltas>> {
    let t = checkpoints.len();
    if t < 2 {
        return Err(TrajectoryError::InsufficientCheckpoints(t));
    }
    if intensities.len() != t || confidences.len() != t {
        return Err(TrajectoryError::LengthMismatch(format!(
            "{t} checkpoints, {} intensity and {} confidence matrices",
            intensities.len(),
            confidences.len()
        )));
    }
    let diff = |a: &Matrix, b: &Matrix| -> Result<Matrix> {
        if a.shape() != b.shape() {
            return Err(TrajectoryError::LengthMismatch(format!(
                "{:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = b
            .as_slice()
            .iter()
            .zip(a.as_slice())
            .map(|(y, x)| y - x)
            .collect();
        Ok(Matrix::new(a.rows(), a.cols(), data)?)
    };
    (0..t - 1)
        .map(|i| {
            Ok(TransitionDeltas {
                from: checkpoints[i],
                to: checkpoints[i + 1],
                dp: diff(&intensities[i], &intensities[i + 1])?,
                dy: diff(&confidences[i], &confidences[i + 1])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAggregates {
    /// `Q x M` mean confidence change per cluster.
    pub c: Matrix,
    /// `Q x K` mean of `ReLU(dP - sigma)` per cluster.
    pub pi: Matrix,
    pub sizes: Vec<usize>,
    pub noise: usize,
}

/// Cluster means of `dy` and thresholded `dp`; noise rows are ignored.
pub fn cluster_aggregates(
    dp: &Matrix,
    dy: &Matrix,
    labels: &ClusterLabels,
    sigma: f64,
) -> Result<ClusterAggregates> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(TrajectoryError::BadParam(format!(
            "sigma {sigma} outside [0, 1]"
        )));
    }
    let n = labels.labels.len();
    if dp.rows() != n || dy.rows() != n {
        return Err(TrajectoryError::LengthMismatch(format!(
            "{n} labels, {} intensity rows, {} confidence rows",
            dp.rows(),
            dy.rows()
        )));
    }
    let q = labels.q;
    if q == 0 {
        return Err(TrajectoryError::NoClusters);
    }
    let (k, m) = (dp.cols(), dy.cols());
    let mut c = vec![0.0; q * m];
    let mut pi = vec![0.0; q * k];
    let mut sizes = vec![0usize; q];
    let mut noise = 0;
    for (i, &l) in labels.labels.iter().enumerate() {
        if l < 1 {
            noise += 1;
            continue;
        }
        let row = (l - 1) as usize;
        if row >= q {
            return Err(TrajectoryError::LengthMismatch(format!(
                "label {l} exceeds Q = {q}"
            )));
        }
        sizes[row] += 1;
        for (acc, v) in c[row * m..(row + 1) * m].iter_mut().zip(dy.row(i)) {
            *acc += v;
        }
        for (acc, v) in pi[row * k..(row + 1) * k].iter_mut().zip(dp.row(i)) {
            *acc += (v - sigma).max(0.0);
        }
    }
    if let Some(row) = sizes.iter().position(|&s| s == 0) {
        return Err(TrajectoryError::EmptyCluster(row as i32 + 1));
    }
    for row in 0..q {
        let s = sizes[row] as f64;
        c[row * m..(row + 1) * m].iter_mut().for_each(|v| *v /= s);
        pi[row * k..(row + 1) * k].iter_mut().for_each(|v| *v /= s);
    }
    Ok(ClusterAggregates {
        c: Matrix::new(q, m, c)?,
        pi: Matrix::new(q, k, pi)?,
        sizes,
        noise,
    })
}

/// `beta = (pi^T pi + lambda I)^-1 pi^T C`, solved by Cholesky.
pub fn fit_responsibility(agg: &ClusterAggregates, lambda: f64) -> Result<Matrix> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(TrajectoryError::BadParam(format!("lambda {lambda}")));
    }
    let k = agg.pi.cols();
    let mut a = agg.pi.gram();
    for i in 0..k {
        let v = a[(i, i)] + lambda;
        a.row_mut(i)[i] = v;
    }
    let rhs = agg.pi.transpose().matmul(&agg.c)?;
    solve_spd(&a, &rhs).map_err(|e| match e {
        NumericsError::NotPositiveDefinite { .. } => TrajectoryError::Singular,
        other => other.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryParams {
    pub sigma: f64,
    pub lambda: f64,
    /// `None` picks [`HdbscanParams::defaults_for`] the sample count.
    pub hdbscan: Option<HdbscanParams>,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            sigma: 0.05,
            lambda: 1.0,
            hdbscan: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub from: u64,
    pub to: u64,
    /// `K x M`; all zero when `empty`.
    pub beta: Matrix,
    pub c: Matrix,
    pub pi: Matrix,
    pub sizes: Vec<usize>,
    pub noise: usize,
    pub labels: Vec<i32>,
    /// HDBSCAN found no cluster, so the transition carries no signal.
    pub empty: bool,
}

impl Transition {
    pub fn q(&self) -> usize {
        self.sizes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponsibilityTrajectory {
    pub checkpoints: Vec<u64>,
    pub k: usize,
    pub m: usize,
    pub sigma: f64,
    pub lambda: f64,
    pub hdbscan: HdbscanParams,
    pub sample_ids: Vec<u64>,
    pub transitions: Vec<Transition>,
}

/// Per-checkpoint `N x M` confidences in f64.
pub fn confidence_matrices(archive: &RunArchive) -> Result<Vec<Matrix>> {
    let n = archive.manifest.sample_count();
    let m = archive.manifest.class_count;
    archive
        .checkpoints
        .iter()
        .map(|c| Ok(Matrix::from_f32(n, m, &c.confidences)?))
        .collect()
}

/// Full analysis of a run against a prototype book.
pub fn analyze_run(
    archive: &RunArchive,
    book: &PrototypeBook,
    params: &TrajectoryParams,
) -> Result<ResponsibilityTrajectory> {
    let assignments = assign(&archive.features, archive.manifest.feature_shape, book)?;
    analyze_with_assignments(archive, &assignments, params)
}

pub fn analyze_with_assignments(
    archive: &RunArchive,
    assignments: &AssignmentMap,
    params: &TrajectoryParams,
) -> Result<ResponsibilityTrajectory> {
    let man = &archive.manifest;
    let n = man.sample_count();
    if assignments.sample_count() != n {
        return Err(TrajectoryError::LengthMismatch(format!(
            "{} assignment rows for {n} samples",
            assignments.sample_count()
        )));
    }
    if !(0.0..=1.0).contains(&params.sigma) {
        return Err(TrajectoryError::BadParam(format!(
            "sigma {} outside [0, 1]",
            params.sigma
        )));
    }
    let hp = params
        .hdbscan
        .unwrap_or_else(|| HdbscanParams::defaults_for(n));
    hp.validate()?;
    let intensities: Vec<Matrix> = archive
        .checkpoints
        .iter()
        .map(|c| intensity_matrix(&c.saliency, assignments))
        .collect::<Result<_>>()?;
    let confidences = confidence_matrices(archive)?;
    let all = deltas(&man.checkpoints, &intensities, &confidences)?;
    let (k, m) = (assignments.k, man.class_count);
    let transitions = all
        .par_iter()
        .map(|d| {
            let labels = hdbscan(&d.dy, &hp)?;
            match cluster_aggregates(&d.dp, &d.dy, &labels, params.sigma) {
                Ok(agg) => Ok(Transition {
                    from: d.from,
                    to: d.to,
                    beta: fit_responsibility(&agg, params.lambda)?,
                    c: agg.c,
                    pi: agg.pi,
                    sizes: agg.sizes,
                    noise: agg.noise,
                    labels: labels.labels,
                    empty: false,
                }),
                Err(TrajectoryError::NoClusters) => Ok(Transition {
                    from: d.from,
                    to: d.to,
                    beta: Matrix::zeros(k, m),
                    c: Matrix::zeros(0, m),
                    pi: Matrix::zeros(0, k),
                    sizes: Vec::new(),
                    noise: n,
                    labels: labels.labels,
                    empty: true,
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResponsibilityTrajectory {
        checkpoints: man.checkpoints.clone(),
        k,
        m,
        sigma: params.sigma,
        lambda: params.lambda,
        hdbscan: hp,
        sample_ids: man.sample_ids.clone(),
        transitions,
    })
}

#[derive(Serialize, Deserialize)]
struct TransitionMeta {
    from: u64,
    to: u64,
    q: usize,
    noise: usize,
    sizes: Vec<usize>,
    empty: bool,
    labels: Vec<i32>,
}

impl ResponsibilityTrajectory {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let metas: Vec<TransitionMeta> = self
            .transitions
            .iter()
            .map(|t| TransitionMeta {
                from: t.from,
                to: t.to,
                q: t.q(),
                noise: t.noise,
                sizes: t.sizes.clone(),
                empty: t.empty,
                labels: t.labels.clone(),
            })
            .collect();
        let mut w = ContainerWriter::new(TRAJECTORY_KIND);
        w.meta("checkpoints", &self.checkpoints)
            .meta("k", self.k)
            .meta("m", self.m)
            .meta("sigma", self.sigma)
            .meta("lambda", self.lambda)
            .meta("hdbscan", self.hdbscan)
            .meta("sample_ids", &self.sample_ids)
            .meta("transitions", &metas);
        for (i, t) in self.transitions.iter().enumerate() {
            w.add_f64(
                format!("t/{i}/beta"),
                &[self.k, self.m],
                t.beta.as_slice().to_vec(),
            )
            .add_f64(
                format!("t/{i}/c"),
                &[t.q(), self.m],
                t.c.as_slice().to_vec(),
            )
            .add_f64(
                format!("t/{i}/pi"),
                &[t.q(), self.k],
                t.pi.as_slice().to_vec(),
            );
        }
        Ok(w.write(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = Container::open(path)?;
        c.expect_kind(TRAJECTORY_KIND)?;
        let k: usize = c.meta("k")?;
        let m: usize = c.meta("m")?;
        let metas: Vec<TransitionMeta> = c.meta("transitions")?;
        let transitions = metas
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                Ok(Transition {
                    from: t.from,
                    to: t.to,
                    beta: Matrix::new(k, m, c.read_f64(&format!("t/{i}/beta"))?)?,
                    c: Matrix::new(t.q, m, c.read_f64(&format!("t/{i}/c"))?)?,
                    pi: Matrix::new(t.q, k, c.read_f64(&format!("t/{i}/pi"))?)?,
                    sizes: t.sizes,
                    noise: t.noise,
                    labels: t.labels,
                    empty: t.empty,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            checkpoints: c.meta("checkpoints")?,
            k,
            m,
            sigma: c.meta("sigma")?,
            lambda: c.meta("lambda")?,
            hdbscan: c.meta("hdbscan")?,
            sample_ids: c.meta("sample_ids")?,
            transitions,
        })
    }
}
