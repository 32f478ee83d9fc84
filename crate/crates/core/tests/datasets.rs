use std::fs;
use std::io::Write;

use flate2::write::GzEncoder;
use flate2::Compression;
use i2x_core::datasets::{
    gen_glyphs, load_idx, write_idx, DatasetError, GlyphSpec, LabeledDataset,
};
use i2x_core::refnet::{init_model, train, ModelSpec, Optimizer, TrainHyper};

fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x0803, n, rows, cols] {
        b.extend_from_slice(&u32::to_be_bytes(v));
    }
    b.extend_from_slice(pixels);
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x0801, labels.len() as u32] {
        b.extend_from_slice(&u32::to_be_bytes(v));
    }
    b.extend_from_slice(labels);
    b
}

#[test]
fn hand_written_idx_pair() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    fs::write(
        &ip,
        idx_images(2, 2, 3, &[0, 51, 102, 153, 204, 255, 255, 0, 0, 0, 0, 255]),
    )
    .unwrap();
    fs::write(&lp, idx_labels(&[4, 1])).unwrap();
    let d = load_idx(&ip, &lp).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.image_shape(), (2, 3, 1));
    assert_eq!(d.labels(), &[4, 1]);
    assert_eq!(d.class_count(), 5);
    assert_eq!(d.sample_ids(), &[0, 1]);
    assert_eq!(&d.images()[..6], &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
    assert_eq!(d.images()[11], 1.0);
}

#[test]
fn gzipped_idx_reads_like_plain() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..=255).collect();
    let gz = |name: &str, bytes: &[u8]| {
        let path = dir.path().join(name);
        let mut enc = GzEncoder::new(fs::File::create(&path).unwrap(), Compression::default());
        enc.write_all(bytes).unwrap();
        enc.finish().unwrap();
        path
    };
    let a = load_idx(
        gz("i.gz", &idx_images(4, 8, 8, &pixels)),
        gz("l.gz", &idx_labels(&[0, 1, 2, 3])),
    )
    .unwrap();
    fs::write(dir.path().join("i"), idx_images(4, 8, 8, &pixels)).unwrap();
    fs::write(dir.path().join("l"), idx_labels(&[0, 1, 2, 3])).unwrap();
    let b = load_idx(dir.path().join("i"), dir.path().join("l")).unwrap();
    assert_eq!(a.images(), b.images());
    assert_eq!(a.labels(), b.labels());
}

#[test]
fn malformed_idx_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    fs::write(p("img"), idx_images(2, 2, 2, &[0; 8])).unwrap();
    fs::write(p("lab"), idx_labels(&[0, 1])).unwrap();
    fs::write(p("short"), idx_images(2, 2, 2, &[0; 7])).unwrap();
    fs::write(p("three"), idx_labels(&[0, 1, 2])).unwrap();
    fs::write(p("stub"), [0u8, 0, 8]).unwrap();

    assert!(matches!(
        load_idx(p("lab"), p("lab")),
        Err(DatasetError::BadMagic { found: 0x0801, .. })
    ));
    assert!(matches!(
        load_idx(p("img"), p("img")),
        Err(DatasetError::BadMagic { found: 0x0803, .. })
    ));
    assert!(matches!(
        load_idx(p("short"), p("lab")),
        Err(DatasetError::TruncatedFile {
            expected: 8,
            found: 7,
            ..
        })
    ));
    assert!(matches!(
        load_idx(p("img"), p("three")),
        Err(DatasetError::CountMismatch {
            images: 2,
            labels: 3
        })
    ));
    assert!(matches!(
        load_idx(p("stub"), p("lab")),
        Err(DatasetError::TruncatedFile { .. })
    ));
    assert!(matches!(
        load_idx(p("missing"), p("lab")),
        Err(DatasetError::Io { .. })
    ));
}

#[test]
fn write_then_load_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (glyphs, _) = gen_glyphs(&GlyphSpec::shared_stroke_demo(), 5, 8).unwrap();
    for ext in ["", ".gz"] {
        let (ip, lp) = (
            dir.path().join(format!("i{ext}")),
            dir.path().join(format!("l{ext}")),
        );
        write_idx(&glyphs, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.labels(), glyphs.labels());
        assert_eq!(back.image_shape(), glyphs.image_shape());
        for (a, b) in back.images().iter().zip(glyphs.images()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
    let rgb = LabeledDataset::new("rgb", (1, 1, 3), vec![0.0; 3], vec![0], vec![0], 1).unwrap();
    assert!(write_idx(&rgb, dir.path().join("x"), dir.path().join("y")).is_err());
}

#[test]
fn glyph_training_loss_trends_down() {
    let (data, _) = gen_glyphs(&GlyphSpec::shared_stroke_demo(), 60, 3).unwrap();
    let hyper = TrainHyper {
        lr: 3e-3,
        epochs: 3,
        batch_size: 16,
        ckpt_every: 1000,
        seed: 1,
        optimizer: Optimizer::Adam,
    };
    let out = train(
        init_model(&ModelSpec::reference(28, 28, 1, 4), 1).unwrap(),
        &data,
        &hyper,
        &mut |_| {},
    )
    .unwrap();
    assert_eq!(out.losses.len(), 45);
    // Window means over 15 iterations (one epoch) never rise.
    let means: Vec<f64> = out
        .losses
        .chunks(15)
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect();
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "{means:?}");
    }
    assert!(means[2] < means[0]);
}
