//! Run archives: per-checkpoint confidences and saliency plus final-model
//! features for one training run, stored as a `run` container (`.i2x`).
//!
//! Tensor names:
//!
//! | name                      | dtype | shape       |
//! |---------------------------|-------|-------------|
//! | `ckpt/<iter>/confidences` | f32   | `[N, M]`    |
//! | `ckpt/<iter>/saliency`    | f32   | `[N, h, w]` |
//! | `final/features`          | f32   | `[N, h, w, d]` |

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::container::{Container, ContainerError, ContainerWriter, DType};
use crate::datasets::LabeledDataset;
use crate::refnet::{train, ModelState, RefnetError, TrainHyper, TrainOutcome};

pub const RUN_KIND: &str = "run";
const ROW_SUM_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error(transparent)]
    Model(#[from] RefnetError),
}

pub type Result<T> = std::result::Result<T, ArtifactError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub dataset_id: String,
    pub sample_ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    /// `(h, w, d)` of the feature map.
    pub feature_shape: (usize, usize, usize),
    /// Checkpoint iterations, strictly increasing.
    pub checkpoints: Vec<u64>,
    /// Free-form settings that produced the run (seeds, fractions, hyperparameters).
    #[serde(default)]
    pub provenance: Map<String, Value>,
}

impl RunManifest {
    pub fn sample_count(&self) -> usize {
        self.sample_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointArtifacts {
    pub iteration: u64,
    /// `N x M`, softmax rows.
    pub confidences: Vec<f32>,
    /// `N x h x w`, values in `[0,1]`.
    pub saliency: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArchive {
    pub manifest: RunManifest,
    /// One entry per manifest checkpoint, same order.
    pub checkpoints: Vec<CheckpointArtifacts>,
    /// `N x h x w x d` from the final model.
    pub features: Vec<f32>,
}

pub fn confidences_name(iteration: u64) -> String {
    format!("ckpt/{iteration}/confidences")
}

pub fn saliency_name(iteration: u64) -> String {
    format!("ckpt/{iteration}/saliency")
}

pub const FEATURES_NAME: &str = "final/features";

/// One named check in a validation report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// First offending location when failed.
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn push(&mut self, name: &str, failure: Option<String>) {
        self.checks.push(CheckResult {
            name: name.into(),
            passed: failure.is_none(),
            detail: failure.unwrap_or_default(),
        });
    }

    /// One `PASS name` / `FAIL name: detail` line per check.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            if c.passed {
                out.push_str(&format!("PASS {}\n", c.name));
            } else {
                out.push_str(&format!("FAIL {}: {}\n", c.name, c.detail));
            }
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        out.push_str(&format!("{} checks, {failed} failed\n", self.checks.len()));
        out
    }
}

fn check_manifest(m: &RunManifest) -> Vec<(&'static str, Option<String>)> {
    let n = m.sample_ids.len();
    let mut out = Vec::new();
    out.push((
        "samples",
        if n == 0 {
            Some("no samples".into())
        } else if m.labels.len() != n {
            Some(format!("{} labels for {n} sample ids", m.labels.len()))
        } else if let Some(i) = m.labels.iter().position(|&l| l >= m.class_count) {
            Some(format!(
                "sample {} has label {} >= class_count {}",
                m.sample_ids[i], m.labels[i], m.class_count
            ))
        } else {
            let mut ids = m.sample_ids.clone();
            ids.sort_unstable();
            ids.windows(2)
                .find(|w| w[0] == w[1])
                .map(|w| format!("sample id {} repeated", w[0]))
        },
    ));
    out.push((
        "checkpoints_increasing",
        if m.checkpoints.is_empty() {
            Some("no checkpoints".into())
        } else {
            m.checkpoints
                .windows(2)
                .find(|w| w[0] >= w[1])
                .map(|w| format!("checkpoint {} follows {}", w[1], w[0]))
        },
    ));
    let (h, w, d) = m.feature_shape;
    out.push((
        "feature_shape",
        (h == 0 || w == 0 || d == 0).then(|| format!("degenerate feature shape {h}x{w}x{d}")),
    ));
    out
}

fn check_confidences(iteration: u64, c: &[f32], n: usize, m: usize, ids: &[u64]) -> Option<String> {
    if c.len() != n * m {
        return Some(format!(
            "checkpoint {iteration}: {} confidence values, expected {n}x{m}",
            c.len()
        ));
    }
    for (i, row) in c.chunks(m).enumerate() {
        if let Some(v) = row
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Some(format!(
                "checkpoint {iteration}, sample {}: confidence {v} outside [0,1]",
                ids[i]
            ));
        }
        let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Some(format!(
                "checkpoint {iteration}, sample {}: confidences sum to {sum}",
                ids[i]
            ));
        }
    }
    None
}

fn check_saliency(
    iteration: u64,
    s: &[f32],
    n: usize,
    plane: usize,
    ids: &[u64],
) -> Option<String> {
    if s.len() != n * plane {
        return Some(format!(
            "checkpoint {iteration}: {} saliency values, expected {n}x{plane}",
            s.len()
        ));
    }
    s.iter().position(|v| !(0.0..=1.0).contains(v)).map(|p| {
        format!(
            "checkpoint {iteration}, sample {}: saliency {} outside [0,1]",
            ids[p / plane],
            s[p]
        )
    })
}

fn check_features(
    f: &[f32],
    n: usize,
    (h, w, d): (usize, usize, usize),
    ids: &[u64],
) -> Option<String> {
    let per = h * w * d;
    if f.len() != n * per {
        return Some(format!(
            "{} feature values, expected {n}x{h}x{w}x{d}",
            f.len()
        ));
    }
    f.iter()
        .position(|v| !v.is_finite())
        .map(|p| format!("sample {}: non-finite feature", ids[p / per]))
}

impl RunArchive {
    /// First invariant violation, if any.
    pub fn check(&self) -> Result<()> {
        let m = &self.manifest;
        for (name, failure) in check_manifest(m) {
            if let Some(f) = failure {
                return Err(ArtifactError::InvariantViolation(format!("{name}: {f}")));
            }
        }
        if self.checkpoints.len() != m.checkpoints.len()
            || self
                .checkpoints
                .iter()
                .zip(&m.checkpoints)
                .any(|(c, &it)| c.iteration != it)
        {
            return Err(ArtifactError::InvariantViolation(
                "checkpoint tensors do not match manifest iterations".into(),
            ));
        }
        let n = m.sample_count();
        let (h, w, _) = m.feature_shape;
        for c in &self.checkpoints {
            let failure =
                check_confidences(c.iteration, &c.confidences, n, m.class_count, &m.sample_ids)
                    .or_else(|| check_saliency(c.iteration, &c.saliency, n, h * w, &m.sample_ids));
            if let Some(f) = failure {
                return Err(ArtifactError::InvariantViolation(f));
            }
        }
        if let Some(f) = check_features(&self.features, n, m.feature_shape, &m.sample_ids) {
            return Err(ArtifactError::InvariantViolation(f));
        }
        Ok(())
    }

    /// Checkpoint with the given iteration.
    pub fn checkpoint(&self, iteration: u64) -> Option<&CheckpointArtifacts> {
        self.checkpoints.iter().find(|c| c.iteration == iteration)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        Ok(self.writer().to_bytes())
    }

    fn writer(&self) -> ContainerWriter {
        let m = &self.manifest;
        let n = m.sample_count();
        let (h, w, d) = m.feature_shape;
        let mut wr = ContainerWriter::new(RUN_KIND);
        wr.meta("dataset_id", &m.dataset_id)
            .meta("sample_ids", &m.sample_ids)
            .meta("labels", &m.labels)
            .meta("class_count", m.class_count)
            .meta("feature_shape", [h, w, d])
            .meta("checkpoints", &m.checkpoints)
            .meta("provenance", &m.provenance);
        for c in &self.checkpoints {
            wr.add_f32(
                confidences_name(c.iteration),
                &[n, m.class_count],
                c.confidences.clone(),
            );
            wr.add_f32(saliency_name(c.iteration), &[n, h, w], c.saliency.clone());
        }
        wr.add_f32(FEATURES_NAME, &[n, h, w, d], self.features.clone());
        wr
    }
}

/// Writes `archive` after checking its invariants. Output bytes depend only on the archive.
pub fn write_run(archive: &RunArchive, path: impl AsRef<Path>) -> Result<()> {
    archive.check()?;
    Ok(archive.writer().write(path)?)
}

/// Lazy view of a run file: the manifest is parsed up front, tensors are read on demand.
#[derive(Debug)]
pub struct RunReader {
    container: Container,
    manifest: RunManifest,
}

impl RunReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::open(path)?)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }

    fn from_container(container: Container) -> Result<Self> {
        container.expect_kind(RUN_KIND)?;
        let fs: [usize; 3] = container.meta("feature_shape")?;
        let manifest = RunManifest {
            dataset_id: container.meta("dataset_id")?,
            sample_ids: container.meta("sample_ids")?,
            labels: container.meta("labels")?,
            class_count: container.meta("class_count")?,
            feature_shape: (fs[0], fs[1], fs[2]),
            checkpoints: container.meta("checkpoints")?,
            provenance: container
                .meta::<Option<Map<String, Value>>>("provenance")
                .ok()
                .flatten()
                .unwrap_or_default(),
        };
        Ok(Self {
            container,
            manifest,
        })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn container(&self) -> &Container {
        &self.container
    }

    fn read_shaped(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let info = self.container.tensor_info(name)?;
        if info.shape != shape {
            return Err(ContainerError::CorruptBlob {
                tensor: name.into(),
                detail: format!("shape {:?}, manifest implies {shape:?}", info.shape),
            }
            .into());
        }
        Ok(self.container.read_f32(name)?)
    }

    /// Reads only the two tensors of one checkpoint.
    pub fn checkpoint(&self, iteration: u64) -> Result<CheckpointArtifacts> {
        let m = &self.manifest;
        if !m.checkpoints.contains(&iteration) {
            return Err(ContainerError::MissingTensor(confidences_name(iteration)).into());
        }
        let n = m.sample_count();
        let (h, w, _) = m.feature_shape;
        Ok(CheckpointArtifacts {
            iteration,
            confidences: self.read_shaped(&confidences_name(iteration), &[n, m.class_count])?,
            saliency: self.read_shaped(&saliency_name(iteration), &[n, h, w])?,
        })
    }

    pub fn features(&self) -> Result<Vec<f32>> {
        let m = &self.manifest;
        let (h, w, d) = m.feature_shape;
        self.read_shaped(FEATURES_NAME, &[m.sample_count(), h, w, d])
    }

    pub fn read_all(&self) -> Result<RunArchive> {
        let checkpoints = self
            .manifest
            .checkpoints
            .iter()
            .map(|&it| self.checkpoint(it))
            .collect::<Result<Vec<_>>>()?;
        Ok(RunArchive {
            manifest: self.manifest.clone(),
            checkpoints,
            features: self.features()?,
        })
    }
}

pub fn read_run(path: impl AsRef<Path>) -> Result<RunArchive> {
    RunReader::open(path)?.read_all()
}

/// Checks every invariant of a run file and reports each one; never fails.
pub fn validate(path: impl AsRef<Path>) -> ValidationReport {
    validate_with(|| RunReader::open(path.as_ref()))
}

pub fn validate_bytes(bytes: Vec<u8>) -> ValidationReport {
    validate_with(|| RunReader::from_bytes(bytes))
}

fn validate_with(open: impl FnOnce() -> Result<RunReader>) -> ValidationReport {
    let mut report = ValidationReport { checks: Vec::new() };
    let reader = match open() {
        Ok(r) => {
            report.push("container", None);
            r
        }
        Err(e) => {
            report.push("container", Some(e.to_string()));
            return report;
        }
    };
    let m = reader.manifest().clone();
    for (name, failure) in check_manifest(&m) {
        report.push(name, failure);
    }
    if !report.passed() {
        return report;
    }
    let n = m.sample_count();
    let (h, w, d) = m.feature_shape;
    let mut tensors = None;
    let mut conf = None;
    let mut sal = None;
    for &it in &m.checkpoints {
        match reader.checkpoint(it) {
            Ok(c) => {
                conf = conf.or_else(|| {
                    check_confidences(it, &c.confidences, n, m.class_count, &m.sample_ids)
                });
                sal = sal.or_else(|| check_saliency(it, &c.saliency, n, h * w, &m.sample_ids));
            }
            Err(e) => tensors = tensors.or(Some(e.to_string())),
        }
    }
    let feats = match reader.features() {
        Ok(f) => check_features(&f, n, (h, w, d), &m.sample_ids),
        Err(e) => {
            tensors = tensors.or(Some(e.to_string()));
            None
        }
    };
    let expected = 2 * m.checkpoints.len() + 1;
    if tensors.is_none() && reader.container().tensors().len() != expected {
        tensors = Some(format!(
            "{} tensors, manifest implies {expected}",
            reader.container().tensors().len()
        ));
    }
    if tensors.is_none() {
        if let Some(t) = reader
            .container()
            .tensors()
            .iter()
            .find(|t| t.dtype != DType::F32)
        {
            tensors = Some(format!("tensor '{}' is not f32", t.name));
        }
    }
    report.push("tensor_shapes", tensors);
    report.push("confidence_rows", conf);
    report.push("saliency_range", sal);
    report.push("features_finite", feats);
    report
}

/// Confidences and GradCAM saliency (targeted at the argmax) for every sample.
pub fn capture_checkpoint(
    model: &ModelState,
    data: &LabeledDataset,
) -> Result<CheckpointArtifacts> {
    let per_sample: Vec<_> = (0..data.len())
        .into_par_iter()
        .map(|i| model.explain(data.image(i)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut confidences = Vec::with_capacity(data.len() * model.spec().classes);
    let mut saliency = Vec::new();
    for (rec, map) in per_sample {
        confidences.extend(rec.confidences.iter().map(|&p| p as f32));
        saliency.extend(map.values.iter().map(|&v| v as f32));
    }
    Ok(CheckpointArtifacts {
        iteration: model.iteration(),
        confidences,
        saliency,
    })
}

/// Final-model feature maps, `N x h x w x d`.
pub fn capture_features(model: &ModelState, data: &LabeledDataset) -> Result<Vec<f32>> {
    let records = model.forward(data.images())?;
    Ok(records
        .into_iter()
        .flat_map(|r| r.features.into_iter().map(|v| v as f32))
        .collect())
}

/// Collects checkpoint artifacts as a training sink and assembles the archive.
pub struct RunRecorder<'a> {
    data: &'a LabeledDataset,
    checkpoints: Vec<CheckpointArtifacts>,
    error: Option<ArtifactError>,
}

impl<'a> RunRecorder<'a> {
    pub fn new(data: &'a LabeledDataset) -> Self {
        Self {
            data,
            checkpoints: Vec::new(),
            error: None,
        }
    }

    pub fn record(&mut self, model: &ModelState) {
        if self.error.is_some() {
            return;
        }
        match capture_checkpoint(model, self.data) {
            Ok(c) => self.checkpoints.push(c),
            Err(e) => self.error = Some(e),
        }
    }

    /// Builds the archive with features from `final_model`.
    pub fn finish(
        self,
        final_model: &ModelState,
        provenance: Map<String, Value>,
    ) -> Result<RunArchive> {
        if let Some(e) = self.error {
            return Err(e);
        }
        let features = capture_features(final_model, self.data)?;
        let archive = RunArchive {
            manifest: RunManifest {
                dataset_id: self.data.id().to_string(),
                sample_ids: self.data.sample_ids().to_vec(),
                labels: self.data.labels().to_vec(),
                class_count: final_model.spec().classes,
                feature_shape: final_model.spec().feature_shape(),
                checkpoints: self.checkpoints.iter().map(|c| c.iteration).collect(),
                provenance,
            },
            checkpoints: self.checkpoints,
            features,
        };
        archive.check()?;
        Ok(archive)
    }
}

/// Trains on `train_data` while recording artifacts of `explain_data` at every checkpoint.
pub fn record_training(
    model: ModelState,
    train_data: &LabeledDataset,
    explain_data: &LabeledDataset,
    hyper: &TrainHyper,
    provenance: Map<String, Value>,
) -> Result<(TrainOutcome, RunArchive)> {
    let mut recorder = RunRecorder::new(explain_data);
    let outcome = train(model, train_data, hyper, &mut |m| recorder.record(m))?;
    let archive = recorder.finish(&outcome.state, provenance)?;
    Ok((outcome, archive))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn minimal() -> RunArchive {
        RunArchive {
            manifest: RunManifest {
                dataset_id: "toy".into(),
                sample_ids: vec![10, 11],
                labels: vec![0, 1],
                class_count: 2,
                feature_shape: (2, 2, 1),
                checkpoints: vec![0, 5],
                provenance: Map::new(),
            },
            checkpoints: vec![
                CheckpointArtifacts {
                    iteration: 0,
                    confidences: vec![0.5, 0.5, 0.5, 0.5],
                    saliency: vec![0.0, 0.5, 1.0, 0.25, 0.1, 0.2, 0.3, 0.4],
                },
                CheckpointArtifacts {
                    iteration: 5,
                    confidences: vec![0.9, 0.1, 0.2, 0.8],
                    saliency: vec![1.0; 8],
                },
            ],
            features: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
        }
    }

    #[test]
    fn round_trip_and_determinism() {
        let a = minimal();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.i2x");
        write_run(&a, &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        write_run(&a, &p).unwrap();
        assert_eq!(first, std::fs::read(&p).unwrap());
        assert_eq!(read_run(&p).unwrap(), a);
        assert!(validate(&p).passed());
    }

    #[test]
    fn bad_row_sum_rejected() {
        let mut a = minimal();
        a.checkpoints[1].confidences = vec![0.7, 0.1, 0.2, 0.8];
        assert!(matches!(
            a.check(),
            Err(ArtifactError::InvariantViolation(_))
        ));
    }

    #[test]
    fn non_increasing_checkpoints_rejected() {
        let mut a = minimal();
        a.manifest.checkpoints = vec![5, 5];
        a.checkpoints[0].iteration = 5;
        assert!(a.check().is_err());
    }

    #[test]
    fn lazy_checkpoint_read() {
        let a = minimal();
        let r = RunReader::from_bytes(a.to_bytes().unwrap()).unwrap();
        assert_eq!(r.checkpoint(5).unwrap(), a.checkpoints[1]);
        assert!(r.checkpoint(3).is_err());
    }
}
