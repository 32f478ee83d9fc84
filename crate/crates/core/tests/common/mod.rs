#![allow(dead_code)]

use i2x_core::artifact::{record_training, RunArchive};
use i2x_core::datasets::{gen_glyphs, GlyphSpec, GlyphTruth, LabeledDataset};
use i2x_core::density::HdbscanParams;
use i2x_core::numerics::Matrix;
use i2x_core::prototypes::{
    assign, fit_prototypes, stack_features, AssignmentMap, PrototypeBook, PrototypeConfig,
};
use i2x_core::refnet::{init_model, ModelSpec, Optimizer, TrainHyper};
use i2x_core::trajectory::{ResponsibilityTrajectory, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct GlyphRun {
    pub data: LabeledDataset,
    pub truth: GlyphTruth,
    pub archive: RunArchive,
    pub book: PrototypeBook,
    pub assignments: AssignmentMap,
}

/// Small seeded glyph training run with recorded checkpoints and a fitted book.
pub fn glyph_run(per_class: usize, k: usize, seed: u64) -> GlyphRun {
    let (data, truth) = gen_glyphs(&GlyphSpec::shared_stroke_demo(), per_class, 3).unwrap();
    let model = init_model(&ModelSpec::reference(28, 28, 1, 4), seed).unwrap();
    let hyper = TrainHyper {
        lr: 3e-3,
        epochs: 6,
        batch_size: 16,
        ckpt_every: 10,
        seed,
        optimizer: Optimizer::Adam,
    };
    let (_, archive) = record_training(model, &data, &data, &hyper, Default::default()).unwrap();
    let shape = archive.manifest.feature_shape;
    let stacked = stack_features(&archive.features, shape.2).unwrap();
    let book = fit_prototypes(
        &stacked,
        &PrototypeConfig {
            k,
            seed,
            ..Default::default()
        },
    )
    .unwrap();
    let assignments = assign(&archive.features, shape, &book).unwrap();
    GlyphRun {
        data,
        truth,
        archive,
        book,
        assignments,
    }
}

/// Dominant ground-truth stroke of each prototype, `None` for background.
/// A feature cell belongs to the stroke with the most pixels inside it (at least 4).
pub fn stroke_of_prototype(
    truth: &GlyphTruth,
    assignments: &AssignmentMap,
    shape: (usize, usize, usize),
) -> Vec<Option<usize>> {
    let (fh, fw, _) = shape;
    let cell = truth.size / fh;
    let strokes = truth.stroke_names.len();
    let mut counts = vec![vec![0usize; strokes + 1]; assignments.k];
    for (i, masks) in truth.masks.iter().enumerate() {
        let mut owner = vec![strokes; fh * fw];
        let mut best = vec![0usize; fh * fw];
        for mask in masks {
            let mut per = vec![0usize; fh * fw];
            for &p in &mask.pixels {
                let (r, c) = (p as usize / truth.size, p as usize % truth.size);
                per[(r / cell).min(fh - 1) * fw + (c / cell).min(fw - 1)] += 1;
            }
            for l in 0..fh * fw {
                if per[l] >= 4 && per[l] > best[l] {
                    best[l] = per[l];
                    owner[l] = mask.stroke;
                }
            }
        }
        for (l, &p) in assignments.sample(i).iter().enumerate() {
            counts[p][owner[l]] += 1;
        }
    }
    counts
        .iter()
        .map(|c| {
            let s = (0..=strokes)
                .max_by_key(|&s| (c[s], std::cmp::Reverse(s)))
                .unwrap();
            (s < strokes).then_some(s)
        })
        .collect()
}

/// Random trajectory with `t` transitions, dense beta and C.
pub fn random_trajectory(t: usize, k: usize, m: usize, seed: u64) -> ResponsibilityTrajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mat = |r: usize, c: usize, scale: f64| {
        Matrix::new(
            r,
            c,
            (0..r * c)
                .map(|_| rng.random_range(-scale..scale))
                .collect(),
        )
        .unwrap()
    };
    let transitions = (0..t)
        .map(|i| {
            let q = 1 + i % 3;
            Transition {
                from: 10 * i as u64,
                to: 10 * (i as u64 + 1),
                beta: mat(k, m, 0.2),
                c: mat(q, m, 0.1),
                pi: mat(q, k, 0.1),
                sizes: vec![5; q],
                noise: 0,
                labels: Vec::new(),
                empty: false,
            }
        })
        .collect();
    ResponsibilityTrajectory {
        checkpoints: (0..=t as u64).map(|i| 10 * i).collect(),
        k,
        m,
        sigma: 0.05,
        lambda: 1.0,
        hdbscan: HdbscanParams::defaults_for(100),
        sample_ids: Vec::new(),
        transitions,
    }
}
