//! Labeled image datasets: MNIST-style IDX ingestion, seeded explanation
//! subsets, and a synthetic glyph generator with per-stroke ground truth.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("image file holds {images} records but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: truncated, expected {expected} bytes of payload, found {found}")]
    TruncatedFile {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid glyph spec: {0}")]
    BadSpec(String),
    #[error("stroke {stroke} of {owner} leaves the {size}x{size} canvas")]
    SpecOverflow {
        owner: String,
        stroke: usize,
        size: usize,
    },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Images in `[0,1]` stored `N x H x W x C`, with labels and stable sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    id: String,
    height: usize,
    width: usize,
    channels: usize,
    images: Vec<f32>,
    labels: Vec<usize>,
    sample_ids: Vec<u64>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(
        id: impl Into<String>,
        (height, width, channels): (usize, usize, usize),
        images: Vec<f32>,
        labels: Vec<usize>,
        sample_ids: Vec<u64>,
        class_count: usize,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(DatasetError::EmptyDataset);
        }
        let per = height * width * channels;
        if per == 0 || images.len() != n * per {
            return Err(DatasetError::Invalid(format!(
                "{} pixel values for {n} images of {height}x{width}x{channels}",
                images.len()
            )));
        }
        if sample_ids.len() != n {
            return Err(DatasetError::Invalid(format!(
                "{} sample ids for {n} labels",
                sample_ids.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DatasetError::Invalid(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        if let Some(p) = images.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(DatasetError::Invalid(format!(
                "pixel {} of image {} is {} (outside [0,1])",
                p % per,
                p / per,
                images[p]
            )));
        }
        let unique: BTreeSet<u64> = sample_ids.iter().copied().collect();
        if unique.len() != n {
            return Err(DatasetError::Invalid("sample ids are not unique".into()));
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            channels,
            images,
            labels,
            sample_ids,
            class_count,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, C)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.image_len();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_ids(&self) -> &[u64] {
        &self.sample_ids
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Samples at `indices` (in the given order) as a new dataset.
    pub fn subset(&self, indices: &[usize], id: impl Into<String>) -> Result<Self> {
        let per = self.image_len();
        let mut images = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(DatasetError::Invalid(format!("index {i} out of range")));
            }
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
            ids.push(self.sample_ids[i]);
        }
        Self::new(
            id,
            self.image_shape(),
            images,
            labels,
            ids,
            self.class_count,
        )
    }

    /// Keeps samples whose id is in `ids`, preserving order. Unknown ids are an error.
    pub fn select_ids(&self, ids: &[u64], id: impl Into<String>) -> Result<Self> {
        let wanted: BTreeSet<u64> = ids.iter().copied().collect();
        let indices: Vec<usize> = (0..self.len())
            .filter(|&i| wanted.contains(&self.sample_ids[i]))
            .collect();
        if indices.len() != wanted.len() {
            return Err(DatasetError::Invalid(format!(
                "{} of {} requested sample ids are not in dataset {}",
                wanted.len() - indices.len(),
                wanted.len(),
                self.id
            )));
        }
        self.subset(&indices, id)
    }

    /// Drops samples whose id is in `excluded`, preserving order.
    pub fn without_ids(&self, excluded: &BTreeSet<u64>, id: impl Into<String>) -> Result<Self> {
        let indices: Vec<usize> = (0..self.len())
            .filter(|&i| !excluded.contains(&self.sample_ids[i]))
            .collect();
        self.subset(&indices, id)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(io_err(path))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(io_err(path))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DatasetError::TruncatedFile {
            path: path.display().to_string(),
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Loads an IDX image/label pair (optionally gzipped); pixels are scaled by `1/255`.
///
/// Sample ids are the record positions in the files; the class count is
/// `max(label) + 1`.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<LabeledDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = read_maybe_gz(ip)?;
    let lab = read_maybe_gz(lp)?;

    let magic = be_u32(&img, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DatasetError::BadMagic {
            path: ip.display().to_string(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let magic = be_u32(&lab, 0, lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DatasetError::BadMagic {
            path: lp.display().to_string(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = be_u32(&img, 4, ip)? as usize;
    let rows = be_u32(&img, 8, ip)? as usize;
    let cols = be_u32(&img, 12, ip)? as usize;
    let n_labels = be_u32(&lab, 4, lp)? as usize;
    if n != n_labels {
        return Err(DatasetError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let pixels = &img[16..];
    if pixels.len() < n * rows * cols {
        return Err(DatasetError::TruncatedFile {
            path: ip.display().to_string(),
            expected: n * rows * cols,
            found: pixels.len(),
        });
    }
    let label_bytes = &lab[8..];
    if label_bytes.len() < n {
        return Err(DatasetError::TruncatedFile {
            path: lp.display().to_string(),
            expected: n,
            found: label_bytes.len(),
        });
    }
    if n == 0 {
        return Err(DatasetError::EmptyDataset);
    }
    let images = pixels[..n * rows * cols]
        .iter()
        .map(|&b| f32::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = label_bytes[..n].iter().map(|&b| usize::from(b)).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    let id = ip
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    LabeledDataset::new(
        id,
        (rows, cols, 1),
        images,
        labels,
        (0..n as u64).collect(),
        class_count,
    )
}

/// Writes a single-channel dataset as an IDX pair. Paths ending in `.gz` are gzipped.
pub fn write_idx(
    d: &LabeledDataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (h, w, c) = d.image_shape();
    if c != 1 {
        return Err(DatasetError::Invalid(format!(
            "IDX export needs single-channel images, got {c} channels"
        )));
    }
    if d.class_count() > 256 {
        return Err(DatasetError::Invalid("labels do not fit in a byte".into()));
    }
    let mut img = Vec::with_capacity(16 + d.images().len());
    for v in [IDX_IMAGES_MAGIC, d.len() as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(d.images().iter().map(|&v| (v * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + d.len());
    for v in [IDX_LABELS_MAGIC, d.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(d.labels().iter().map(|&l| l as u8));
    write_maybe_gz(images_path.as_ref(), &img)?;
    write_maybe_gz(labels_path.as_ref(), &lab)
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(bytes)
            .and_then(|_| enc.finish())
            .and_then(|mut w| w.flush())
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(bytes).and_then(|_| w.flush())
    };
    res.map_err(io_err(path))
}

/// Draws `floor(fraction * N)` samples without replacement.
///
/// Indices are Fisher–Yates shuffled with a ChaCha8 stream seeded by `seed`;
/// the prefix is kept and re-sorted so retained samples keep their original
/// order.
pub fn sample_explanation_set(
    d: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::BadFraction(fraction));
    }
    let n = d.len();
    // Guard against 0.1 * 6000 = 599.999... style rounding.
    let take = ((fraction * n as f64) + 1e-9).floor() as usize;
    if take == 0 {
        return Err(DatasetError::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut keep = order[..take].to_vec();
    keep.sort_unstable();
    d.subset(&keep, format!("{}/explain-{fraction}-seed{seed}", d.id()))
}

// ---------------------------------------------------------------------------
// Synthetic glyphs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CornerOrientation {
    /// Vertex at the top-left; arms run right and down.
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

/// Stroke primitives. `row`/`col` give the top-left anchor in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stroke {
    HorizontalBar {
        row: i32,
        col: i32,
        length: i32,
        thickness: i32,
    },
    VerticalBar {
        row: i32,
        col: i32,
        length: i32,
        thickness: i32,
    },
    /// Runs down-right from the anchor, or down-left from `col + length - 1`
    /// when `anti` is set.
    Diagonal {
        row: i32,
        col: i32,
        length: i32,
        thickness: i32,
        #[serde(default)]
        anti: bool,
    },
    /// An L shape inside the `arm x arm` box anchored at `row`/`col`.
    Corner {
        row: i32,
        col: i32,
        arm: i32,
        thickness: i32,
        orientation: CornerOrientation,
    },
}

impl Stroke {
    /// Pixel coordinates covered by the stroke (may repeat, may be off-canvas).
    pub fn pixels(&self) -> Vec<(i32, i32)> {
        let mut out = Vec::new();
        match *self {
            Stroke::HorizontalBar {
                row,
                col,
                length,
                thickness,
            } => {
                for r in row..row + thickness {
                    for c in col..col + length {
                        out.push((r, c));
                    }
                }
            }
            Stroke::VerticalBar {
                row,
                col,
                length,
                thickness,
            } => {
                for r in row..row + length {
                    for c in col..col + thickness {
                        out.push((r, c));
                    }
                }
            }
            Stroke::Diagonal {
                row,
                col,
                length,
                thickness,
                anti,
            } => {
                for i in 0..length {
                    let c0 = if anti { col + length - 1 - i } else { col + i };
                    for t in 0..thickness {
                        out.push((row + i, c0 + t));
                    }
                }
            }
            Stroke::Corner {
                row,
                col,
                arm,
                thickness,
                orientation,
            } => {
                let (top, left) = match orientation {
                    CornerOrientation::TopLeft => (true, true),
                    CornerOrientation::TopRight => (true, false),
                    CornerOrientation::BottomLeft => (false, true),
                    CornerOrientation::BottomRight => (false, false),
                };
                let hr = if top { row } else { row + arm - thickness };
                let vc = if left { col } else { col + arm - thickness };
                for r in hr..hr + thickness {
                    for c in col..col + arm {
                        out.push((r, c));
                    }
                }
                for r in row..row + arm {
                    for c in vc..vc + thickness {
                        out.push((r, c));
                    }
                }
            }
        }
        out
    }

    fn is_degenerate(&self) -> bool {
        match *self {
            Stroke::HorizontalBar {
                length, thickness, ..
            }
            | Stroke::VerticalBar {
                length, thickness, ..
            }
            | Stroke::Diagonal {
                length, thickness, ..
            } => length < 1 || thickness < 1,
            Stroke::Corner { arm, thickness, .. } => arm < 1 || thickness < 1 || thickness > arm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphClass {
    pub name: String,
    pub strokes: Vec<Stroke>,
}

/// A stroke carried by exactly `floor(per_class * fraction)` samples of each
/// designated class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedStroke {
    pub stroke: Stroke,
    pub classes: Vec<usize>,
    pub fraction: f64,
}

/// JSON-serializable description of a glyph dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphSpec {
    /// Square canvas side in pixels.
    pub size: usize,
    /// Standard deviation of additive Gaussian pixel noise (clamped to `[0,1]`).
    pub noise: f64,
    /// Maximum per-sample shift of the whole glyph, in pixels.
    #[serde(default)]
    pub jitter: i32,
    pub classes: Vec<GlyphClass>,
    #[serde(default)]
    pub shared_stroke: Option<SharedStroke>,
}

impl GlyphSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(DatasetError::BadSpec("need at least two classes".into()));
        }
        if self.size == 0 {
            return Err(DatasetError::BadSpec("canvas size is zero".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(DatasetError::BadSpec(format!(
                "noise {} is invalid",
                self.noise
            )));
        }
        if self.jitter < 0 {
            return Err(DatasetError::BadSpec("jitter must be >= 0".into()));
        }
        for class in &self.classes {
            if class.strokes.is_empty() {
                return Err(DatasetError::BadSpec(format!(
                    "class {} has no strokes",
                    class.name
                )));
            }
        }
        let size = self.size as i32;
        let check = |owner: &str, idx: usize, s: &Stroke| -> Result<()> {
            if s.is_degenerate() {
                return Err(DatasetError::BadSpec(format!(
                    "stroke {idx} of {owner} is degenerate"
                )));
            }
            let fits = s.pixels().iter().all(|&(r, c)| {
                r - self.jitter >= 0
                    && c - self.jitter >= 0
                    && r + self.jitter < size
                    && c + self.jitter < size
            });
            if fits {
                Ok(())
            } else {
                Err(DatasetError::SpecOverflow {
                    owner: owner.to_string(),
                    stroke: idx,
                    size: self.size,
                })
            }
        };
        for class in &self.classes {
            for (i, s) in class.strokes.iter().enumerate() {
                check(&class.name, i, s)?;
            }
        }
        if let Some(shared) = &self.shared_stroke {
            if !(0.0..=1.0).contains(&shared.fraction) {
                return Err(DatasetError::BadSpec(format!(
                    "shared-stroke fraction {} outside [0,1]",
                    shared.fraction
                )));
            }
            let distinct: BTreeSet<usize> = shared.classes.iter().copied().collect();
            if shared.classes.is_empty()
                || distinct.len() != shared.classes.len()
                || distinct.iter().any(|&c| c >= self.classes.len())
            {
                return Err(DatasetError::BadSpec(
                    "shared-stroke classes are invalid".into(),
                ));
            }
            check("shared", 0, &shared.stroke)?;
        }
        Ok(())
    }

    /// Names of all strokes in global index order: class strokes, then the shared one.
    pub fn stroke_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .classes
            .iter()
            .flat_map(|c| (0..c.strokes.len()).map(move |i| format!("{}/{i}", c.name)))
            .collect();
        if self.shared_stroke.is_some() {
            names.push("shared".to_string());
        }
        names
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: GlyphSpec =
            serde_json::from_str(text).map_err(|e| DatasetError::BadSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

impl GlyphSpec {
    /// Four 28x28 classes with one corner stroke each, plus a centre bar carried
    /// by half of classes 0 and 1.
    pub fn shared_stroke_demo() -> Self {
        let corner = |row, col, orientation| Stroke::Corner {
            row,
            col,
            arm: 10,
            thickness: 3,
            orientation,
        };
        let class = |name: &str, stroke| GlyphClass {
            name: name.to_string(),
            strokes: vec![stroke],
        };
        GlyphSpec {
            size: 28,
            noise: 0.15,
            jitter: 1,
            classes: vec![
                class("A", corner(1, 1, CornerOrientation::TopLeft)),
                class("B", corner(17, 17, CornerOrientation::BottomRight)),
                class("C", corner(1, 17, CornerOrientation::TopRight)),
                class("D", corner(17, 1, CornerOrientation::BottomLeft)),
            ],
            shared_stroke: Some(SharedStroke {
                stroke: Stroke::HorizontalBar {
                    row: 12,
                    col: 6,
                    length: 16,
                    thickness: 4,
                },
                classes: vec![0, 1],
                fraction: 0.5,
            }),
        }
    }
}

/// Pixels (row-major indices into the canvas) claimed by one stroke in one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrokeMask {
    pub stroke: usize,
    pub pixels: Vec<u32>,
}

/// Ground truth returned alongside a generated glyph dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphTruth {
    pub size: usize,
    pub stroke_names: Vec<String>,
    /// Global index of the shared stroke, if any.
    pub shared_stroke: Option<usize>,
    /// Per sample, the masks of the strokes it carries. Masks are disjoint:
    /// an overlapping pixel belongs to the stroke drawn first.
    pub masks: Vec<Vec<StrokeMask>>,
}

impl GlyphTruth {
    /// Samples carrying stroke `stroke`.
    pub fn carriers(&self, stroke: usize) -> Vec<usize> {
        (0..self.masks.len())
            .filter(|&i| self.masks[i].iter().any(|m| m.stroke == stroke))
            .collect()
    }
}

/// Generates `per_class` samples per class, interleaved by class (sample `i`
/// has label `i % M`). Sample ids are positions.
pub fn gen_glyphs(
    spec: &GlyphSpec,
    per_class: usize,
    seed: u64,
) -> Result<(LabeledDataset, GlyphTruth)> {
    spec.validate()?;
    if per_class == 0 {
        return Err(DatasetError::EmptyDataset);
    }
    let m = spec.classes.len();
    let size = spec.size;
    let n = per_class * m;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Stroke offsets in the global index.
    let mut first_stroke = Vec::with_capacity(m);
    let mut next = 0;
    for c in &spec.classes {
        first_stroke.push(next);
        next += c.strokes.len();
    }
    let shared_index = spec.shared_stroke.as_ref().map(|_| next);

    // carriers[class][instance] -> carries the shared stroke
    let mut carriers = vec![vec![false; per_class]; m];
    if let Some(shared) = &spec.shared_stroke {
        let count = ((per_class as f64 * shared.fraction) + 1e-9).floor() as usize;
        for &class in &shared.classes {
            let mut inst: Vec<usize> = (0..per_class).collect();
            inst.shuffle(&mut rng);
            for &i in &inst[..count] {
                carriers[class][i] = true;
            }
        }
    }

    let mut images = vec![0f32; n * size * size];
    let mut labels = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for s in 0..n {
        let (instance, class) = (s / m, s % m);
        labels.push(class);
        let (dy, dx) = if spec.jitter > 0 {
            (
                rng.random_range(-spec.jitter..=spec.jitter),
                rng.random_range(-spec.jitter..=spec.jitter),
            )
        } else {
            (0, 0)
        };
        let mut strokes: Vec<(usize, &Stroke)> = spec.classes[class]
            .strokes
            .iter()
            .enumerate()
            .map(|(i, st)| (first_stroke[class] + i, st))
            .collect();
        if carriers[class][instance] {
            let shared = spec
                .shared_stroke
                .as_ref()
                .expect("carrier without shared stroke");
            strokes.push((shared_index.expect("shared index"), &shared.stroke));
        }

        let canvas = &mut images[s * size * size..(s + 1) * size * size];
        let mut claimed = vec![false; size * size];
        let mut sample_masks = Vec::with_capacity(strokes.len());
        for (global, stroke) in strokes {
            let mut pixels: Vec<u32> = stroke
                .pixels()
                .into_iter()
                .map(|(r, c)| ((r + dy) as usize * size + (c + dx) as usize) as u32)
                .filter(|&p| !claimed[p as usize])
                .collect();
            pixels.sort_unstable();
            pixels.dedup();
            for &p in &pixels {
                claimed[p as usize] = true;
                canvas[p as usize] = 1.0;
            }
            sample_masks.push(StrokeMask {
                stroke: global,
                pixels,
            });
        }
        if spec.noise > 0.0 {
            for v in canvas.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = (f64::from(*v) + spec.noise * z).clamp(0.0, 1.0) as f32;
            }
        }
        masks.push(sample_masks);
    }
    let dataset = LabeledDataset::new(
        format!("glyphs-seed{seed}"),
        (size, size, 1),
        images,
        labels,
        (0..n as u64).collect(),
        m,
    )?;
    let truth = GlyphTruth {
        size,
        stroke_names: spec.stroke_names(),
        shared_stroke: shared_index,
        masks,
    };
    Ok((dataset, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bars_spec(noise: f64) -> GlyphSpec {
        GlyphSpec {
            size: 12,
            noise,
            jitter: 0,
            classes: vec![
                GlyphClass {
                    name: "A".into(),
                    strokes: vec![Stroke::VerticalBar {
                        row: 1,
                        col: 5,
                        length: 10,
                        thickness: 2,
                    }],
                },
                GlyphClass {
                    name: "B".into(),
                    strokes: vec![Stroke::HorizontalBar {
                        row: 5,
                        col: 1,
                        length: 10,
                        thickness: 2,
                    }],
                },
            ],
            shared_stroke: None,
        }
    }

    fn toy(n: usize) -> LabeledDataset {
        LabeledDataset::new(
            "toy",
            (1, 1, 1),
            (0..n).map(|i| (i % 7) as f32 / 7.0).collect(),
            (0..n).map(|i| i % 10).collect(),
            (0..n as u64).collect(),
            10,
        )
        .unwrap()
    }

    #[test]
    fn dataset_invariants_enforced() {
        assert!(matches!(
            LabeledDataset::new("x", (1, 1, 1), vec![], vec![], vec![], 2),
            Err(DatasetError::EmptyDataset)
        ));
        assert!(LabeledDataset::new("x", (1, 1, 1), vec![1.5], vec![0], vec![0], 2).is_err());
        assert!(LabeledDataset::new("x", (1, 1, 1), vec![0.5], vec![2], vec![0], 2).is_err());
        assert!(
            LabeledDataset::new("x", (1, 1, 1), vec![0.5, 0.5], vec![0, 1], vec![3, 3], 2).is_err()
        );
    }

    #[test]
    fn explanation_subset_size_and_order() {
        let d = toy(60_000);
        let e = sample_explanation_set(&d, 0.1, 42).unwrap();
        assert_eq!(e.len(), 6000);
        assert!(e.sample_ids().windows(2).all(|w| w[0] < w[1]));

        let whole = sample_explanation_set(&d, 1.0, 42).unwrap();
        assert_eq!(whole.sample_ids(), d.sample_ids());
        assert_eq!(whole.images(), d.images());
    }

    #[test]
    fn explanation_subset_is_seeded() {
        let d = toy(100);
        let a = sample_explanation_set(&d, 0.1, 7).unwrap();
        let b = sample_explanation_set(&d, 0.1, 7).unwrap();
        let c = sample_explanation_set(&d, 0.1, 8).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a.sample_ids(), b.sample_ids());
        assert_ne!(a.sample_ids(), c.sample_ids());
    }

    #[test]
    fn explanation_subset_keeps_every_class() {
        let d = toy(1000);
        for seed in [1, 2, 3, 42, 99] {
            let e = sample_explanation_set(&d, 0.1, seed).unwrap();
            assert!(e.class_counts().iter().all(|&c| c > 0), "seed {seed}");
        }
    }

    #[test]
    fn bad_fraction() {
        let d = toy(10);
        for f in [0.0, -0.5, 1.5, f64::NAN] {
            assert!(matches!(
                sample_explanation_set(&d, f, 1),
                Err(DatasetError::BadFraction(_))
            ));
        }
    }

    #[test]
    fn noiseless_glyphs_match_rasterized_strokes() {
        let spec = bars_spec(0.0);
        let (d, truth) = gen_glyphs(&spec, 3, 1).unwrap();
        assert_eq!(d.len(), 6);
        for s in 0..d.len() {
            let class = d.labels()[s];
            let mut expected = vec![0f32; 144];
            for (r, c) in spec.classes[class].strokes[0].pixels() {
                expected[(r * 12 + c) as usize] = 1.0;
            }
            assert_eq!(d.image(s), &expected[..]);
            assert_eq!(truth.masks[s].len(), 1);
            assert_eq!(truth.masks[s][0].stroke, class);
        }
    }

    #[test]
    fn shared_stroke_exact_fraction() {
        let mut spec = bars_spec(0.1);
        spec.shared_stroke = Some(SharedStroke {
            stroke: Stroke::Diagonal {
                row: 0,
                col: 0,
                length: 4,
                thickness: 1,
                anti: false,
            },
            classes: vec![0, 1],
            fraction: 0.5,
        });
        let (d, truth) = gen_glyphs(&spec, 9, 5).unwrap();
        let shared = truth.shared_stroke.unwrap();
        for class in 0..2 {
            let carriers = truth
                .carriers(shared)
                .into_iter()
                .filter(|&s| d.labels()[s] == class)
                .count();
            assert_eq!(carriers, 4);
        }
    }

    #[test]
    fn glyph_masks_partition_claimed_pixels() {
        let mut spec = bars_spec(0.0);
        // crosses the vertical bar of A
        spec.shared_stroke = Some(SharedStroke {
            stroke: Stroke::HorizontalBar {
                row: 3,
                col: 2,
                length: 8,
                thickness: 1,
            },
            classes: vec![0, 1],
            fraction: 1.0,
        });
        let (d, truth) = gen_glyphs(&spec, 2, 0).unwrap();
        for s in 0..d.len() {
            let mut seen = BTreeSet::new();
            for m in &truth.masks[s] {
                for &p in &m.pixels {
                    assert!(seen.insert(p), "pixel {p} claimed twice");
                }
            }
            let lit: BTreeSet<u32> = d
                .image(s)
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .map(|(i, _)| i as u32)
                .collect();
            assert_eq!(seen, lit);
        }
    }

    #[test]
    fn glyphs_are_deterministic() {
        let mut spec = bars_spec(0.2);
        spec.jitter = 1;
        let a = gen_glyphs(&spec, 5, 3).unwrap();
        let b = gen_glyphs(&spec, 5, 3).unwrap();
        assert_eq!(a, b);
        let c = gen_glyphs(&spec, 5, 4).unwrap();
        assert_ne!(a.0.images(), c.0.images());
    }

    #[test]
    fn glyph_overflow_and_bad_specs() {
        let mut spec = bars_spec(0.0);
        spec.classes[0].strokes[0] = Stroke::VerticalBar {
            row: 5,
            col: 5,
            length: 10,
            thickness: 1,
        };
        assert!(matches!(
            gen_glyphs(&spec, 1, 0),
            Err(DatasetError::SpecOverflow { .. })
        ));
        let mut spec = bars_spec(0.0);
        spec.classes.pop();
        assert!(matches!(
            gen_glyphs(&spec, 1, 0),
            Err(DatasetError::BadSpec(_))
        ));
        let mut spec = bars_spec(0.0);
        spec.classes[1].strokes.clear();
        assert!(matches!(
            gen_glyphs(&spec, 1, 0),
            Err(DatasetError::BadSpec(_))
        ));
    }

    #[test]
    fn glyph_spec_json_round_trip() {
        let text = r#"{
            "size": 12, "noise": 0.0,
            "classes": [
                {"name": "A", "strokes": [{"kind": "vertical_bar", "row": 1, "col": 5, "length": 10, "thickness": 2}]},
                {"name": "B", "strokes": [{"kind": "corner", "row": 2, "col": 2, "arm": 6, "thickness": 2, "orientation": "top_left"}]}
            ]
        }"#;
        let spec = GlyphSpec::from_json(text).unwrap();
        assert_eq!(spec.jitter, 0);
        let again = GlyphSpec::from_json(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(spec, again);
    }
}
