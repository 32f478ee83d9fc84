//! Compact reference CNN with hand-written reverse-mode gradients.
//!
//! Architecture: a stack of `3x3 same conv -> ReLU -> 2x2 max-pool` stages,
//! then global average pooling and a linear layer producing `M` logits.
//! The output of the last stage is the spatial feature map `F` (`h x w x d`),
//! which is also where GradCAM is evaluated.
//!
//! Images arrive as `H x W x C` (channel last); internally everything is
//! channel-first.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError, ContainerWriter};
use crate::datasets::LabeledDataset;

#[derive(Debug, Error)]
pub enum RefnetError {
    #[error("invalid model spec: {0}")]
    BadSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss {loss} at iteration {iteration}")]
    NonFiniteLoss { iteration: u64, loss: f64 },
    #[error("fine-tuning stage {0} is empty")]
    EmptyStage(usize),
    #[error("invalid hyperparameters: {0}")]
    BadHyper(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

pub type Result<T> = std::result::Result<T, RefnetError>;

/// Layer layout of the reference network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Output channels of each conv stage.
    pub stages: Vec<usize>,
    pub classes: usize,
}

impl ModelSpec {
    /// Two stages of 8 and 16 channels.
    pub fn reference(height: usize, width: usize, channels: usize, classes: usize) -> Self {
        Self {
            height,
            width,
            channels,
            stages: vec![8, 16],
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(RefnetError::BadSpec("need at least one conv stage".into()));
        }
        if self.channels == 0 || self.stages.contains(&0) {
            return Err(RefnetError::BadSpec(
                "channel counts must be positive".into(),
            ));
        }
        if self.classes < 2 {
            return Err(RefnetError::BadSpec("need at least two classes".into()));
        }
        let (h, w, _) = self.feature_shape();
        if h < 2 || w < 2 {
            return Err(RefnetError::BadSpec(format!(
                "{}x{} input leaves a {h}x{w} feature map after {} stages",
                self.height,
                self.width,
                self.stages.len()
            )));
        }
        Ok(())
    }

    /// `(h, w, d)` of the final feature map.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let (mut h, mut w) = (self.height, self.width);
        for _ in &self.stages {
            h /= 2;
            w /= 2;
        }
        (h, w, *self.stages.last().unwrap_or(&0))
    }

    fn input_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Element counts of each parameter tensor, in storage order:
    /// per stage `weight [out][in][3][3]`, `bias [out]`; then head `weight [M][d]`, `bias [M]`.
    pub fn parameter_shapes(&self) -> Vec<usize> {
        let mut shapes = Vec::new();
        let mut cin = self.channels;
        for &cout in &self.stages {
            shapes.push(cout * cin * 9);
            shapes.push(cout);
            cin = cout;
        }
        shapes.push(self.classes * cin);
        shapes.push(self.classes);
        shapes
    }
}

/// Parameters plus training position of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    spec: ModelSpec,
    params: Vec<Vec<f64>>,
    iteration: u64,
    seed: u64,
}

/// Per-parameter-tensor gradients, laid out like [`ModelState::params`].
pub type Gradients = Vec<Vec<f64>>;

/// He-initialized weights (`N(0, 2/fan_in)`), zero biases.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<ModelState> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut cin = spec.channels;
    let he = |len: usize, fan_in: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let std = (2.0 / fan_in as f64).sqrt();
        (0..len)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    for &cout in &spec.stages {
        params.push(he(cout * cin * 9, cin * 9, &mut rng));
        params.push(vec![0.0; cout]);
        cin = cout;
    }
    params.push(he(spec.classes * cin, cin, &mut rng));
    params.push(vec![0.0; spec.classes]);
    Ok(ModelState {
        spec: spec.clone(),
        params,
        iteration: 0,
        seed,
    })
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    /// `h x w x d`, channel last.
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
    /// Softmax of `logits`.
    pub confidences: Vec<f64>,
}

impl ForwardRecord {
    /// Predicted class; ties go to the lowest index.
    pub fn predicted(&self) -> usize {
        argmax(&self.confidences)
    }
}

/// GradCAM map over the final feature grid, normalized to `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub target_class: usize,
    /// Row-major `h x w`.
    pub values: Vec<f64>,
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

struct StageTrace {
    input: Vec<f64>,
    pre: Vec<f64>,
    pool_idx: Vec<u32>,
    cin: usize,
    height: usize,
    width: usize,
}

struct Trace {
    stages: Vec<StageTrace>,
    /// `d x h x w`, channel first.
    features: Vec<f64>,
    pooled: Vec<f64>,
    logits: Vec<f64>,
}

fn conv_forward(input: &[f64], w: &[f64], b: &[f64], cin: usize, h: usize, wd: usize) -> Vec<f64> {
    let cout = b.len();
    let plane = h * wd;
    let mut out = vec![0.0; cout * plane];
    for o in 0..cout {
        let oplane = &mut out[o * plane..(o + 1) * plane];
        oplane.fill(b[o]);
        for i in 0..cin {
            let iplane = &input[i * plane..(i + 1) * plane];
            for kh in 0..3 {
                for kw in 0..3 {
                    let wv = w[((o * cin + i) * 3 + kh) * 3 + kw];
                    let (y0, y1) = valid_range(kh, h);
                    let (x0, x1) = valid_range(kw, wd);
                    for y in y0..y1 {
                        let iy = y + kh - 1;
                        let orow = &mut oplane[y * wd + x0..y * wd + x1];
                        let irow = &iplane[iy * wd + x0 + kw - 1..iy * wd + x1 + kw - 1];
                        for (o_, &i_) in orow.iter_mut().zip(irow) {
                            *o_ += wv * i_;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output positions whose tap `k` (0..3, offset k-1) lands inside `[0, n)`.
fn valid_range(k: usize, n: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { n.saturating_sub(1) } else { n };
    (lo, hi.max(lo))
}

fn conv_backward(
    trace: &StageTrace,
    dz: &[f64],
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let (cin, h, wd) = (trace.cin, trace.height, trace.width);
    let cout = db.len();
    let plane = h * wd;
    let mut din = want_input_grad.then(|| vec![0.0; cin * plane]);
    for o in 0..cout {
        let dplane = &dz[o * plane..(o + 1) * plane];
        db[o] += dplane.iter().sum::<f64>();
        for i in 0..cin {
            let iplane = &trace.input[i * plane..(i + 1) * plane];
            for kh in 0..3 {
                for kw in 0..3 {
                    let widx = ((o * cin + i) * 3 + kh) * 3 + kw;
                    let (y0, y1) = valid_range(kh, h);
                    let (x0, x1) = valid_range(kw, wd);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y + kh - 1;
                        let drow = &dplane[y * wd + x0..y * wd + x1];
                        let irow = &iplane[iy * wd + x0 + kw - 1..iy * wd + x1 + kw - 1];
                        acc += drow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dw[widx] += acc;
                    if let Some(din) = din.as_mut() {
                        let wv = w[widx];
                        let dinplane = &mut din[i * plane..(i + 1) * plane];
                        for y in y0..y1 {
                            let iy = y + kh - 1;
                            let drow = &dplane[y * wd + x0..y * wd + x1];
                            let dirow = &mut dinplane[iy * wd + x0 + kw - 1..iy * wd + x1 + kw - 1];
                            for (di, &d) in dirow.iter_mut().zip(drow) {
                                *di += wv * d;
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

impl ModelState {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    fn head_weights(&self) -> &[f64] {
        &self.params[self.params.len() - 2]
    }

    fn head_bias(&self) -> &[f64] {
        &self.params[self.params.len() - 1]
    }

    fn check_image(&self, image: &[f32]) -> Result<()> {
        if image.len() != self.spec.input_len() {
            return Err(RefnetError::ShapeMismatch(format!(
                "image has {} values, model expects {}x{}x{}",
                image.len(),
                self.spec.height,
                self.spec.width,
                self.spec.channels
            )));
        }
        Ok(())
    }

    fn trace(&self, image: &[f32]) -> Trace {
        let spec = &self.spec;
        let (mut h, mut w, mut cin) = (spec.height, spec.width, spec.channels);
        // HWC -> CHW
        let mut x = vec![0.0; image.len()];
        for y in 0..h {
            for xx in 0..w {
                for c in 0..cin {
                    x[c * h * w + y * w + xx] = f64::from(image[(y * w + xx) * cin + c]);
                }
            }
        }
        let mut stages = Vec::with_capacity(spec.stages.len());
        for (s, &cout) in spec.stages.iter().enumerate() {
            let pre = conv_forward(&x, &self.params[2 * s], &self.params[2 * s + 1], cin, h, w);
            let (ph, pw) = (h / 2, w / 2);
            let mut pooled = vec![0.0; cout * ph * pw];
            let mut idx = vec![0u32; cout * ph * pw];
            for c in 0..cout {
                for py in 0..ph {
                    for px in 0..pw {
                        let mut best = usize::MAX;
                        let mut best_v = f64::NEG_INFINITY;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let at = c * h * w + (2 * py + dy) * w + 2 * px + dx;
                            let v = pre[at].max(0.0);
                            if v > best_v {
                                best_v = v;
                                best = at;
                            }
                        }
                        let o = c * ph * pw + py * pw + px;
                        pooled[o] = best_v;
                        idx[o] = best as u32;
                    }
                }
            }
            stages.push(StageTrace {
                input: x,
                pre,
                pool_idx: idx,
                cin,
                height: h,
                width: w,
            });
            x = pooled;
            h = ph;
            w = pw;
            cin = cout;
        }
        let d = cin;
        let area = (h * w) as f64;
        let pooled: Vec<f64> = (0..d)
            .map(|c| x[c * h * w..(c + 1) * h * w].iter().sum::<f64>() / area)
            .collect();
        let hw = self.head_weights();
        let logits: Vec<f64> = self
            .head_bias()
            .iter()
            .enumerate()
            .map(|(k, &b)| b + (0..d).map(|c| hw[k * d + c] * pooled[c]).sum::<f64>())
            .collect();
        Trace {
            stages,
            features: x,
            pooled,
            logits,
        }
    }

    /// Gradient of `sum_k dlogits[k] * logit_k` with respect to the feature map (channel first).
    fn feature_grad(&self, dlogits: &[f64]) -> Vec<f64> {
        let (h, w, d) = self.spec.feature_shape();
        let area = (h * w) as f64;
        let hw = self.head_weights();
        let mut out = vec![0.0; d * h * w];
        for c in 0..d {
            let g: f64 = dlogits
                .iter()
                .enumerate()
                .map(|(k, &dl)| dl * hw[k * d + c])
                .sum::<f64>()
                / area;
            out[c * h * w..(c + 1) * h * w].fill(g);
        }
        out
    }

    fn backward(&self, trace: &Trace, dlogits: &[f64], grads: &mut Gradients) {
        let n_params = self.params.len();
        let d = trace.pooled.len();
        {
            let (gw, gb) = grads[n_params - 2..].split_at_mut(1);
            for (k, &dl) in dlogits.iter().enumerate() {
                gb[0][k] += dl;
                for c in 0..d {
                    gw[0][k * d + c] += dl * trace.pooled[c];
                }
            }
        }
        let mut dx = self.feature_grad(dlogits);
        for (s, st) in trace.stages.iter().enumerate().rev() {
            let cout = self.spec.stages[s];
            // unpool + ReLU
            let mut dz = vec![0.0; cout * st.height * st.width];
            for (o, &at) in st.pool_idx.iter().enumerate() {
                if st.pre[at as usize] > 0.0 {
                    dz[at as usize] += dx[o];
                }
            }
            let (head, tail) = grads.split_at_mut(2 * s + 1);
            let din = conv_backward(
                st,
                &dz,
                &self.params[2 * s],
                &mut head[2 * s],
                &mut tail[0],
                s > 0,
            );
            if let Some(din) = din {
                dx = din;
            }
        }
    }

    /// Forward pass for one `H x W x C` image.
    pub fn forward_one(&self, image: &[f32]) -> Result<ForwardRecord> {
        self.check_image(image)?;
        let t = self.trace(image);
        Ok(self.record(&t))
    }

    fn record(&self, t: &Trace) -> ForwardRecord {
        let (h, w, d) = self.spec.feature_shape();
        let mut features = vec![0.0; h * w * d];
        for c in 0..d {
            for p in 0..h * w {
                features[p * d + c] = t.features[c * h * w + p];
            }
        }
        ForwardRecord {
            features,
            logits: t.logits.clone(),
            confidences: softmax(&t.logits),
        }
    }

    /// Forward pass over a batch of concatenated images; data-parallel, order preserved.
    pub fn forward(&self, images: &[f32]) -> Result<Vec<ForwardRecord>> {
        let len = self.spec.input_len();
        if images.len() % len != 0 {
            return Err(RefnetError::ShapeMismatch(format!(
                "{} values is not a whole number of {len}-value images",
                images.len()
            )));
        }
        Ok(images
            .par_chunks(len)
            .map(|img| self.record(&self.trace(img)))
            .collect())
    }

    /// GradCAM for `target_class` at the final feature map.
    ///
    /// `alpha_c` is the spatial mean of `d logit_target / d F_c`; the raw map
    /// `ReLU(sum_c alpha_c F_c)` is divided by its maximum. An all-zero raw
    /// map is returned as zeros.
    pub fn grad_cam(&self, image: &[f32], target_class: usize) -> Result<SaliencyMap> {
        self.check_image(image)?;
        let t = self.trace(image);
        self.cam_from_trace(&t, target_class)
    }

    /// Forward record plus GradCAM targeted at the predicted class.
    pub fn explain(&self, image: &[f32]) -> Result<(ForwardRecord, SaliencyMap)> {
        self.check_image(image)?;
        let t = self.trace(image);
        let rec = self.record(&t);
        let map = self.cam_from_trace(&t, rec.predicted())?;
        Ok((rec, map))
    }

    fn cam_from_trace(&self, t: &Trace, target_class: usize) -> Result<SaliencyMap> {
        let m = self.spec.classes;
        if target_class >= m {
            return Err(RefnetError::ShapeMismatch(format!(
                "target class {target_class} but model has {m} classes"
            )));
        }
        let (h, w, d) = self.spec.feature_shape();
        let mut onehot = vec![0.0; m];
        onehot[target_class] = 1.0;
        let grad = self.feature_grad(&onehot);
        let plane = h * w;
        let alpha: Vec<f64> = (0..d)
            .map(|c| grad[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let mut values: Vec<f64> = (0..plane)
            .map(|p| {
                (0..d)
                    .map(|c| alpha[c] * t.features[c * plane + p])
                    .sum::<f64>()
                    .max(0.0)
            })
            .collect();
        let max = values.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            values.iter_mut().for_each(|v| *v /= max);
        } else {
            values.fill(0.0);
        }
        Ok(SaliencyMap {
            height: h,
            width: w,
            target_class,
            values,
        })
    }

    /// Mean cross-entropy over `batch` and its gradient.
    pub fn loss_and_gradients(&self, batch: &[(&[f32], usize)]) -> Result<(f64, Gradients)> {
        let mut grads: Gradients = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut loss = 0.0;
        for &(image, label) in batch {
            self.check_image(image)?;
            if label >= self.spec.classes {
                return Err(RefnetError::ShapeMismatch(format!(
                    "label {label} out of range"
                )));
            }
            let t = self.trace(image);
            let p = softmax(&t.logits);
            loss -= p[label].max(f64::MIN_POSITIVE).ln() * scale;
            let dlogits: Vec<f64> = p
                .iter()
                .enumerate()
                .map(|(k, &pk)| (pk - f64::from(u8::from(k == label))) * scale)
                .collect();
            self.backward(&t, &dlogits, &mut grads);
        }
        Ok((loss, grads))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = ContainerWriter::new("model");
        w.meta("spec", &self.spec)
            .meta("iteration", self.iteration)
            .meta("seed", self.seed);
        for (i, p) in self.params.iter().enumerate() {
            w.add_f64(format!("param/{i}"), &[p.len()], p.clone());
        }
        Ok(w.write(path)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let c = Container::open(path)?;
        c.expect_kind("model")?;
        let spec: ModelSpec = c.meta("spec")?;
        spec.validate()?;
        let shapes = spec.parameter_shapes();
        let mut params = Vec::with_capacity(shapes.len());
        for (i, &len) in shapes.iter().enumerate() {
            let p = c.read_f64(&format!("param/{i}"))?;
            if p.len() != len || p.iter().any(|v| !v.is_finite()) {
                return Err(RefnetError::ShapeMismatch(format!(
                    "parameter tensor {i} is malformed"
                )));
            }
            params.push(p);
        }
        Ok(Self {
            spec,
            params,
            iteration: c.meta("iteration")?,
            seed: c.meta("seed")?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain minibatch SGD.
    Sgd,
    /// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8; moments reset per `train` call.
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Emit a checkpoint every this many iterations.
    pub ckpt_every: u64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl TrainHyper {
    fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(RefnetError::BadHyper(format!("learning rate {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.ckpt_every == 0 {
            return Err(RefnetError::BadHyper(
                "epochs, batch size and checkpoint interval must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Total optimizer steps for `n` samples: `epochs * ceil(n / batch)`.
    pub fn total_iterations(&self, n: usize) -> u64 {
        (self.epochs * n.div_ceil(self.batch_size)) as u64
    }
}

/// Checkpoint steps (relative to the start of training) for `total` iterations.
pub fn checkpoint_schedule(total: u64, every: u64) -> Vec<u64> {
    let mut out: Vec<u64> = (0..=total).step_by(every.max(1) as usize).collect();
    if out.last() != Some(&total) {
        out.push(total);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: ModelState,
    /// Mean minibatch loss per iteration.
    pub losses: Vec<f64>,
    /// Iterations at which the sink was called.
    pub checkpoints: Vec<u64>,
}

struct AdamState {
    m: Gradients,
    v: Gradients,
    t: i32,
}

/// Minibatch training on cross-entropy.
///
/// Shuffles with a ChaCha8 stream seeded by `hyper.seed`, one permutation per
/// epoch. The sink sees the model before the first update, every
/// `ckpt_every` updates, and after the last one.
pub fn train(
    model: ModelState,
    data: &LabeledDataset,
    hyper: &TrainHyper,
    sink: &mut dyn FnMut(&ModelState),
) -> Result<TrainOutcome> {
    hyper.validate()?;
    let (h, w, c) = data.image_shape();
    let spec = model.spec();
    if (h, w, c) != (spec.height, spec.width, spec.channels) {
        return Err(RefnetError::ShapeMismatch(format!(
            "dataset images are {h}x{w}x{c}, model expects {}x{}x{}",
            spec.height, spec.width, spec.channels
        )));
    }
    if data.class_count() > spec.classes {
        return Err(RefnetError::ShapeMismatch(format!(
            "dataset has {} classes, model {}",
            data.class_count(),
            spec.classes
        )));
    }
    let mut state = model;
    let total = hyper.total_iterations(data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut adam = AdamState {
        m: state.params.iter().map(|p| vec![0.0; p.len()]).collect(),
        v: state.params.iter().map(|p| vec![0.0; p.len()]).collect(),
        t: 0,
    };
    let mut losses = Vec::with_capacity(total as usize);
    let mut checkpoints = Vec::new();
    let mut step = 0u64;
    let mut emit = |state: &ModelState, checkpoints: &mut Vec<u64>| {
        sink(state);
        checkpoints.push(state.iteration);
    };
    emit(&state, &mut checkpoints);

    let mut order: Vec<usize> = (0..data.len()).collect();
    for _epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<(&[f32], usize)> = chunk
                .iter()
                .map(|&i| (data.image(i), data.labels()[i]))
                .collect();
            let (loss, grads) = state.loss_and_gradients(&batch)?;
            if !loss.is_finite() {
                return Err(RefnetError::NonFiniteLoss {
                    iteration: state.iteration,
                    loss,
                });
            }
            apply_update(&mut state.params, &grads, hyper, &mut adam);
            state.iteration += 1;
            step += 1;
            losses.push(loss);
            if step % hyper.ckpt_every == 0 || step == total {
                emit(&state, &mut checkpoints);
            }
        }
    }
    Ok(TrainOutcome {
        state,
        losses,
        checkpoints,
    })
}

fn apply_update(
    params: &mut [Vec<f64>],
    grads: &Gradients,
    hyper: &TrainHyper,
    adam: &mut AdamState,
) {
    match hyper.optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (pi, gi) in p.iter_mut().zip(g) {
                    *pi -= hyper.lr * gi;
                }
            }
        }
        Optimizer::Adam => {
            const B1: f64 = 0.9;
            const B2: f64 = 0.999;
            const EPS: f64 = 1e-8;
            adam.t += 1;
            let c1 = 1.0 - B1.powi(adam.t);
            let c2 = 1.0 - B2.powi(adam.t);
            for (((p, g), m), v) in params
                .iter_mut()
                .zip(grads)
                .zip(&mut adam.m)
                .zip(&mut adam.v)
            {
                for i in 0..p.len() {
                    m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                    v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    p[i] -= hyper.lr * mhat / (vhat.sqrt() + EPS);
                }
            }
        }
    }
}

/// Trains on each stage in order with the same settings; stage `s` shuffles
/// with seed `hyper.seed + s`. The iteration counter carries over.
pub fn finetune(
    model: ModelState,
    schedule: &[&LabeledDataset],
    hyper: &TrainHyper,
) -> Result<ModelState> {
    if let Some(i) = schedule.iter().position(|d| d.is_empty()) {
        return Err(RefnetError::EmptyStage(i));
    }
    let mut state = model;
    for (s, stage) in schedule.iter().enumerate() {
        let stage_hyper = TrainHyper {
            seed: hyper.seed.wrapping_add(s as u64),
            ckpt_every: u64::MAX,
            ..hyper.clone()
        };
        state = train(state, stage, &stage_hyper, &mut |_| {})?.state;
    }
    Ok(state)
}

/// `M x M` counts; rows are true labels, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Self {
        assert_eq!(
            counts.len(),
            classes * classes,
            "confusion counts must be M x M"
        );
        Self { classes, counts }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    /// Fraction correct in `[0,1]`.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.correct() as f64 / total as f64
        }
    }

    /// Unordered pair with the most cross-confusions `cm[a][b] + cm[b][a]`, `a < b`.
    pub fn most_confused_pair(&self) -> Option<(usize, usize)> {
        let mut best: Option<((usize, usize), u64)> = None;
        for a in 0..self.classes {
            for b in (a + 1)..self.classes {
                let v = self.get(a, b) + self.get(b, a);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some(((a, b), v));
                }
            }
        }
        best.map(|(p, _)| p)
    }
}

/// Confusion matrix of argmax predictions on `data`.
pub fn evaluate(model: &ModelState, data: &LabeledDataset) -> Result<ConfusionMatrix> {
    if data.is_empty() {
        return Err(RefnetError::ShapeMismatch("empty evaluation set".into()));
    }
    let records = model.forward(data.images())?;
    let mut cm = ConfusionMatrix::new(model.spec.classes);
    for (rec, &label) in records.iter().zip(data.labels()) {
        if label >= cm.classes {
            return Err(RefnetError::ShapeMismatch(format!(
                "label {label} out of range"
            )));
        }
        cm.record(label, rec.predicted());
    }
    Ok(cm)
}
