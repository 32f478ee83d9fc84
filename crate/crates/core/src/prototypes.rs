//! Abstract prototypes: PCA over spatial feature vectors of the final model,
//! K-Means in the reduced space, and hard assignment of every feature-map
//! location to its nearest centroid.
//!
//! Prototype ids are 0-based here; [`prototype_name`] gives the 1-based
//! `P-<k>` display form.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError, ContainerWriter};
use crate::numerics::{sq_dist, sym_eig, Matrix, NumericsError};

pub const BOOK_KIND: &str = "prototypes";
const CUMULATIVE_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum PrototypeError {
    #[error("need at least two rows, got {0}")]
    TooFewRows(usize),
    #[error("variance target {0} outside (0, 1]")]
    BadVarianceTarget(f64),
    #[error("feature covariance is all zero")]
    DegenerateData,
    #[error(
        "k-means needs k >= 2 and at least k distinct points (k = {k}, distinct = {distinct})"
    )]
    TooFewPoints { k: usize, distinct: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

pub type Result<T> = std::result::Result<T, PrototypeError>;

/// Display name of 0-based prototype `k`.
pub fn prototype_name(k: usize) -> String {
    format!("P-{}", k + 1)
}

/// Parses `P-<k>` (or a bare 1-based number) into a 0-based id.
pub fn parse_prototype_name(s: &str) -> Option<usize> {
    let t = s.trim();
    let num = t
        .strip_prefix("P-")
        .or_else(|| t.strip_prefix("p-"))
        .unwrap_or(t);
    num.parse::<usize>().ok().filter(|&k| k >= 1).map(|k| k - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `d x r`, orthonormal columns.
    pub basis: Matrix,
    /// Explained-variance ratio of each retained component, descending.
    pub ratios: Vec<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn dim(&self) -> usize {
        self.basis.cols()
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let (d, r) = self.basis.shape();
        let b = self.basis.as_slice();
        let mut out = vec![0.0; r];
        for i in 0..d {
            let xi = x[i] - self.mean[i];
            for (j, o) in out.iter_mut().enumerate() {
                *o += xi * b[i * r + j];
            }
        }
        out
    }

    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let (d, r) = self.basis.shape();
        let b = self.basis.as_slice();
        (0..d)
            .map(|i| self.mean[i] + (0..r).map(|j| b[i * r + j] * z[j]).sum::<f64>())
            .collect()
    }

    /// Projects every row.
    pub fn project_rows(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(PrototypeError::ShapeMismatch(format!(
                "rows have {} columns, PCA expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let rows: Vec<Vec<f64>> = (0..x.rows())
            .into_par_iter()
            .map(|i| self.project(x.row(i)))
            .collect();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(Matrix::new(x.rows(), self.dim(), data)?)
    }
}

/// Mean and covariance (divided by `n - 1`) of the rows of `x`.
pub fn covariance(x: &Matrix) -> (Vec<f64>, Matrix) {
    let (n, d) = x.shape();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for i in 0..n {
        for (c, (v, m)) in centered.iter_mut().zip(x.row(i).iter().zip(&mean)) {
            *c = v - m;
        }
        for a in 0..d {
            let ca = centered[a];
            for b in a..d {
                cov[a * d + b] += ca * centered[b];
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / denom;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    (mean, Matrix::new(d, d, cov).expect("finite covariance"))
}

/// Keeps the fewest leading components whose cumulative explained variance
/// reaches `variance_target`.
pub fn fit_pca(x: &Matrix, variance_target: f64) -> Result<PcaModel> {
    if x.rows() < 2 {
        return Err(PrototypeError::TooFewRows(x.rows()));
    }
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(PrototypeError::BadVarianceTarget(variance_target));
    }
    let (mean, cov) = covariance(x);
    let eig = sym_eig(&cov)?;
    let vals: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = vals.iter().sum();
    if total <= 0.0 {
        return Err(PrototypeError::DegenerateData);
    }
    let ratios_all: Vec<f64> = vals.iter().map(|v| v / total).collect();
    let mut cumulative = 0.0;
    let mut r = ratios_all.len();
    for (i, ratio) in ratios_all.iter().enumerate() {
        cumulative += ratio;
        if cumulative >= variance_target - CUMULATIVE_TOL {
            r = i + 1;
            break;
        }
    }
    let d = x.cols();
    let mut basis = Vec::with_capacity(d * r);
    for i in 0..d {
        basis.extend_from_slice(&eig.eigenvectors.row(i)[..r]);
    }
    Ok(PcaModel {
        mean,
        basis: Matrix::new(d, r, basis)?,
        ratios: ratios_all[..r].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// `k x r`.
    pub centroids: Matrix,
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Inertia after the initial assignment and after every Lloyd step.
    pub history: Vec<f64>,
    pub iterations: usize,
}

/// Nearest centroid by squared Euclidean distance; ties go to the lowest index.
pub fn nearest(centroids: &Matrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centroids.rows() {
        let d = sq_dist(centroids.row(k), x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign_all(points: &Matrix, centroids: &Matrix) -> (Vec<usize>, Vec<f64>) {
    (0..points.rows())
        .into_par_iter()
        .map(|i| nearest(centroids, points.row(i)))
        .unzip()
}

fn distinct_rows(points: &Matrix, cap: usize) -> usize {
    let mut seen: BTreeSet<Vec<u64>> = BTreeSet::new();
    for i in 0..points.rows() {
        seen.insert(points.row(i).iter().map(|v| (v + 0.0).to_bits()).collect());
        if seen.len() >= cap {
            break;
        }
    }
    seen.len()
}

fn kmeans_pp(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let (n, r) = points.shape();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if target < w {
                pick = Some(i);
                break;
            }
            target -= w;
        }
        // Rounding can run past the end; fall back to the last positive weight.
        let pick = pick.unwrap_or_else(|| {
            d2.iter()
                .rposition(|&w| w > 0.0)
                .expect("a distinct point remains")
        });
        chosen.push(pick);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    let mut data = Vec::with_capacity(k * r);
    for &c in &chosen {
        data.extend_from_slice(points.row(c));
    }
    Matrix::new(k, r, data).expect("finite seeds")
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iter` steps have run.
///
/// A cluster that loses all its points is moved onto the point farthest from
/// its currently assigned centroid.
pub fn kmeans(points: &Matrix, k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    kmeans_restarts(points, k, seed, max_iter, 1)
}

/// Best of `n_init` independent k-means++ starts by final inertia (earliest wins ties).
/// Start `i` draws from stream `i` of the ChaCha8 generator seeded with `seed`.
pub fn kmeans_restarts(
    points: &Matrix,
    k: usize,
    seed: u64,
    max_iter: usize,
    n_init: usize,
) -> Result<KMeansResult> {
    let n = points.rows();
    let distinct = distinct_rows(points, k);
    if k < 2 || n < k || distinct < k {
        return Err(PrototypeError::TooFewPoints { k, distinct });
    }
    let mut best: Option<KMeansResult> = None;
    for i in 0..n_init.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let run = lloyd(points, k, max_iter, &mut rng)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one start"))
}

fn lloyd(points: &Matrix, k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> Result<KMeansResult> {
    let (n, r) = points.shape();
    let mut centroids = kmeans_pp(points, k, rng);
    let (mut labels, mut dists) = assign_all(points, &centroids);
    let mut history = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![0.0; k * r];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l * r..(l + 1) * r].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut data = sums;
        let mut taken: BTreeSet<usize> = BTreeSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                data[c * r..(c + 1) * r]
                    .iter_mut()
                    .for_each(|v| *v /= counts[c] as f64);
            } else {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .fold(None::<(usize, f64)>, |best, i| match best {
                        Some((_, bd)) if dists[i] <= bd => best,
                        _ => Some((i, dists[i])),
                    })
                    .map(|(i, _)| i)
                    .expect("n >= k");
                taken.insert(far);
                data[c * r..(c + 1) * r].copy_from_slice(points.row(far));
            }
        }
        centroids = Matrix::new(k, r, data)?;
        let (new_labels, new_dists) = assign_all(points, &centroids);
        history.push(new_dists.iter().sum());
        let stable = new_labels == labels;
        labels = new_labels;
        dists = new_dists;
        if stable {
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        labels,
        inertia: *history.last().expect("nonempty"),
        history,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeConfig {
    pub k: usize,
    pub variance_target: f64,
    pub seed: u64,
    pub max_iter: usize,
    /// Independent k-means++ starts; the lowest final inertia is kept.
    pub n_init: usize,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self {
            k: 32,
            variance_target: 0.95,
            seed: 0,
            max_iter: 300,
            n_init: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBook {
    pub pca: PcaModel,
    /// `K x r` in PCA space.
    pub centroids: Matrix,
    pub inertia: f64,
    pub inertia_history: Vec<f64>,
    pub seed: u64,
    pub variance_target: f64,
}

impl PrototypeBook {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let d = self.pca.input_dim();
        let r = self.pca.dim();
        let mut w = ContainerWriter::new(BOOK_KIND);
        w.meta("k", self.k())
            .meta("r", r)
            .meta("input_dim", d)
            .meta("seed", self.seed)
            .meta("variance_target", self.variance_target)
            .meta("inertia", self.inertia)
            .meta("inertia_history", &self.inertia_history)
            .add_f64("mean", &[d], self.pca.mean.clone())
            .add_f64("basis", &[d, r], self.pca.basis.as_slice().to_vec())
            .add_f64("ratios", &[r], self.pca.ratios.clone())
            .add_f64(
                "centroids",
                &[self.k(), r],
                self.centroids.as_slice().to_vec(),
            );
        Ok(w.write(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = Container::open(path)?;
        c.expect_kind(BOOK_KIND)?;
        let k: usize = c.meta("k")?;
        let r: usize = c.meta("r")?;
        let d: usize = c.meta("input_dim")?;
        let mean = c.read_f64("mean")?;
        let ratios = c.read_f64("ratios")?;
        if mean.len() != d || ratios.len() != r {
            return Err(PrototypeError::ShapeMismatch(
                "mean or ratios length disagrees with manifest".into(),
            ));
        }
        Ok(Self {
            pca: PcaModel {
                mean,
                basis: Matrix::new(d, r, c.read_f64("basis")?)?,
                ratios,
            },
            centroids: Matrix::new(k, r, c.read_f64("centroids")?)?,
            inertia: c.meta("inertia")?,
            inertia_history: c.meta("inertia_history")?,
            seed: c.meta("seed")?,
            variance_target: c.meta("variance_target")?,
        })
    }
}

/// Rows are every spatial location of every sample: `(N*h*w) x d`.
pub fn stack_features(features: &[f32], d: usize) -> Result<Matrix> {
    if d == 0 || features.len() % d != 0 {
        return Err(PrototypeError::ShapeMismatch(format!(
            "{} values is not a multiple of d = {d}",
            features.len()
        )));
    }
    Ok(Matrix::from_f32(features.len() / d, d, features)?)
}

/// PCA then K-Means over stacked feature vectors.
pub fn fit_prototypes(stacked: &Matrix, cfg: &PrototypeConfig) -> Result<PrototypeBook> {
    let pca = fit_pca(stacked, cfg.variance_target)?;
    let reduced = pca.project_rows(stacked)?;
    let km = kmeans_restarts(&reduced, cfg.k, cfg.seed, cfg.max_iter, cfg.n_init)?;
    Ok(PrototypeBook {
        pca,
        centroids: km.centroids,
        inertia: km.inertia,
        inertia_history: km.history,
        seed: cfg.seed,
        variance_target: cfg.variance_target,
    })
}

/// Per-sample prototype id at each of the `h*w` feature locations, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMap {
    pub locations: usize,
    pub k: usize,
    /// `N x locations`.
    pub labels: Vec<usize>,
}

impl AssignmentMap {
    pub fn sample_count(&self) -> usize {
        self.labels.len() / self.locations.max(1)
    }

    pub fn sample(&self, i: usize) -> &[usize] {
        &self.labels[i * self.locations..(i + 1) * self.locations]
    }

    pub fn samples(&self) -> impl Iterator<Item = &[usize]> {
        self.labels.chunks(self.locations)
    }
}

/// Labels every location of every sample (`N x h x w x d` features) with its nearest centroid.
pub fn assign(
    features: &[f32],
    feature_shape: (usize, usize, usize),
    book: &PrototypeBook,
) -> Result<AssignmentMap> {
    let (h, w, d) = feature_shape;
    if d != book.pca.input_dim() {
        return Err(PrototypeError::ShapeMismatch(format!(
            "features have d = {d}, prototypes were fit on d = {}",
            book.pca.input_dim()
        )));
    }
    let locations = h * w;
    if locations == 0 || features.len() % (locations * d) != 0 {
        return Err(PrototypeError::ShapeMismatch(format!(
            "{} values is not a whole number of {h}x{w}x{d} maps",
            features.len()
        )));
    }
    let labels: Vec<usize> = features
        .par_chunks(d)
        .map(|v| {
            let x: Vec<f64> = v.iter().map(|&f| f64::from(f)).collect();
            nearest(&book.centroids, &book.pca.project(&x)).0
        })
        .collect();
    Ok(AssignmentMap {
        locations,
        k: book.k(),
        labels,
    })
}

/// Prototypes occurring at least once in each sample.
pub fn presence(assignments: &AssignmentMap) -> Vec<BTreeSet<usize>> {
    assignments
        .samples()
        .map(|s| s.iter().copied().collect())
        .collect()
}

/// Location closest to a prototype's centroid, for rendering exemplar patches.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exemplar {
    pub prototype: String,
    pub sample_index: usize,
    pub row: usize,
    pub col: usize,
    pub distance: f64,
}

/// Nearest assigned location per prototype; prototypes never assigned are skipped.
pub fn exemplars(
    features: &[f32],
    feature_shape: (usize, usize, usize),
    book: &PrototypeBook,
) -> Result<Vec<Exemplar>> {
    let (_, w, d) = feature_shape;
    let map = assign(features, feature_shape, book)?;
    let mut best: Vec<Option<(usize, f64)>> = vec![None; book.k()];
    for (pos, (v, &k)) in features.chunks(d).zip(&map.labels).enumerate() {
        let x: Vec<f64> = v.iter().map(|&f| f64::from(f)).collect();
        let dist = sq_dist(book.centroids.row(k), &book.pca.project(&x));
        if best[k].is_none_or(|(_, bd)| dist < bd) {
            best[k] = Some((pos, dist));
        }
    }
    Ok(best
        .into_iter()
        .enumerate()
        .filter_map(|(k, b)| {
            b.map(|(pos, dist)| {
                let loc = pos % map.locations;
                Exemplar {
                    prototype: prototype_name(k),
                    sample_index: pos / map.locations,
                    row: loc / w,
                    col: loc % w,
                    distance: dist.sqrt(),
                }
            })
        })
        .collect())
}
