#![allow(dead_code)]

use std::path::PathBuf;

use kfprune::data::IdxError;

pub fn idx_images(n: u32, rows: u32, cols: u32) -> Vec<u8> {
    let mut b = 0x0803u32.to_be_bytes().to_vec();
    for v in [n, rows, cols] {
        b.extend(v.to_be_bytes());
    }
    b.extend((0..n * rows * cols).map(|i| (i * 37 % 256) as u8));
    b
}

pub fn idx_labels(n: u32) -> Vec<u8> {
    let mut b = 0x0801u32.to_be_bytes().to_vec();
    b.extend(n.to_be_bytes());
    b.extend((0..n).map(|i| (i % 10) as u8));
    b
}

type Check = fn(&IdxError) -> bool;

/// `(name, images, labels, expected error)` for ten malformed pairs.
pub fn mutated_corpora() -> Vec<(&'static str, Vec<u8>, Vec<u8>, Check)> {
    let (img, lab) = (idx_images(6, 4, 3), idx_labels(6));
    let mut out: Vec<(&'static str, Vec<u8>, Vec<u8>, Check)> = Vec::new();

    out.push(("empty images", Vec::new(), lab.clone(), |e| {
        matches!(
            e,
            IdxError::Truncated {
                file: "images",
                offset: 0,
                needed: 4
            }
        )
    }));

    let mut m = img.clone();
    m[3] = 0x04;
    out.push(("bad image magic", m, lab.clone(), |e| {
        matches!(
            e,
            IdxError::BadMagic {
                file: "images",
                found: 0x0804,
                ..
            }
        )
    }));

    let mut m = lab.clone();
    m[3] = 0x03;
    out.push(("image magic in label file", img.clone(), m, |e| {
        matches!(
            e,
            IdxError::BadMagic {
                file: "labels",
                expected: 0x0801,
                found: 0x0803
            }
        )
    }));

    out.push(("truncated header", img[..10].to_vec(), lab.clone(), |e| {
        matches!(
            e,
            IdxError::Truncated {
                file: "images",
                offset: 10,
                needed: 2
            }
        )
    }));

    out.push(("truncated pixels", img[..img.len() - 5].to_vec(), lab.clone(), |e| {
        matches!(
            e,
            IdxError::Truncated {
                file: "images",
                offset: 83,
                needed: 5
            }
        )
    }));

    out.push(("zero extent", idx_images(6, 0, 3), lab.clone(), |e| {
        matches!(
            e,
            IdxError::ZeroExtent {
                file: "images",
                offset: 8
            }
        )
    }));

    let mut m = img.clone();
    m.extend([1, 2, 3]);
    out.push(("trailing bytes", m, lab.clone(), |e| {
        matches!(
            e,
            IdxError::TrailingBytes {
                file: "images",
                extra: 3,
                ..
            }
        )
    }));

    out.push(("count mismatch", img.clone(), idx_labels(5), |e| {
        matches!(e, IdxError::CountMismatch { images: 6, labels: 5 })
    }));

    let mut m = lab.clone();
    m[8 + 4] = 10;
    out.push(("label out of range", img.clone(), m, |e| {
        matches!(
            e,
            IdxError::LabelOutOfRange {
                offset: 12,
                value: 10,
                ..
            }
        )
    }));

    out.push(("truncated labels", img, lab[..lab.len() - 1].to_vec(), |e| {
        matches!(
            e,
            IdxError::Truncated {
                file: "labels",
                offset: 13,
                needed: 1
            }
        )
    }));
    out
}

/// Directory with the four MNIST IDX files, if present.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("KFPRUNE_MNIST")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}
