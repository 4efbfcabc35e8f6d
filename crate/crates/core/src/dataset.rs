//! EMNIST ingestion from IDX files, class-balanced splits, 28×28 → 8×8
//! area-weighted downsampling, and synthetic stand-ins for when no data
//! files are available.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Image, CLASSES, IMAGE_PIXELS, IMAGE_SIDE};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const SOURCE_SIDE: usize = 28;
pub const SOURCE_PIXELS: usize = SOURCE_SIDE * SOURCE_SIDE;

/// The four letters of the experiment, in class-index order.
pub const DEFAULT_LETTERS: [char; CLASSES] = ['m', 'a', 'n', 'c'];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl LabeledImages {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::dims("LabeledImages::new", images.len(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= CLASSES) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range")));
        }
        if images.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("pixel outside [0, 1]".into()));
        }
        Ok(LabeledImages { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_counts(&self) -> [usize; CLASSES] {
        let mut c = [0; CLASSES];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Subset in the given index order.
    pub fn select(&self, idx: &[usize]) -> LabeledImages {
        LabeledImages {
            images: idx.iter().map(|&i| self.images[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }
}

/// Decoded IDX image and label files, before class selection.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImages {
    /// 28×28 images in row-major order, scaled to `[0, 1]`, EMNIST
    /// transposition already undone.
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset: bytes.len(),
            msg: format!("header truncated, need {} bytes", offset + 4),
        })
}

fn expect_len(bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated: header implies {expected} bytes"),
        })
    } else if bytes.len() > expected {
        Err(Error::Parse {
            offset: expected,
            msg: format!("{} trailing bytes after payload", bytes.len() - expected),
        })
    } else {
        Ok(())
    }
}

/// Image payload of an IDX3 file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad image magic {magic:#010x}"),
        });
    }
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let expected = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| Error::Parse {
            offset: 4,
            msg: "image dimensions overflow".into(),
        })?;
    expect_len(bytes, expected)?;
    Ok((n, rows, cols, &bytes[16..]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad label magic {magic:#010x}"),
        });
    }
    let n = read_u32(bytes, 4)? as usize;
    let expected = n.checked_add(8).ok_or_else(|| Error::Parse {
        offset: 4,
        msg: "label count overflow".into(),
    })?;
    expect_len(bytes, expected)?;
    Ok(&bytes[8..])
}

/// Decodes an image/label file pair already in memory.
pub fn decode_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<RawImages> {
    let (n, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    if rows != SOURCE_SIDE || cols != SOURCE_SIDE {
        return Err(Error::Parse {
            offset: 8,
            msg: format!("expected {SOURCE_SIDE}x{SOURCE_SIDE} images, got {rows}x{cols}"),
        });
    }
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(Error::Parse {
            offset: 4,
            msg: format!("{n} images but {} labels", labels.len()),
        });
    }
    let images = pixels
        .chunks_exact(SOURCE_PIXELS)
        .map(|img| {
            // EMNIST stores images transposed
            (0..SOURCE_PIXELS)
                .map(|k| {
                    let (r, c) = (k / SOURCE_SIDE, k % SOURCE_SIDE);
                    f64::from(img[c * SOURCE_SIDE + r]) / 255.0
                })
                .collect()
        })
        .collect();
    Ok(RawImages {
        images,
        labels: labels.to_vec(),
    })
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let gz_ext = path.extension().is_some_and(|e| e == "gz");
    if gz_ext || raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Reads an IDX image/label pair from disk; gzip input is detected by
/// extension or magic bytes.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RawImages> {
    decode_idx(&read_maybe_gzip(images_path)?, &read_maybe_gzip(labels_path)?)
}

/// Label of a letter in the EMNIST "letters" split (a = 1 … z = 26).
pub fn emnist_letter_label(letter: char) -> Option<u8> {
    let l = letter.to_ascii_lowercase();
    l.is_ascii_lowercase().then(|| l as u8 - b'a' + 1)
}

/// Draws a class-balanced, disjoint train/test pair. Class `k` is
/// `letters[k]`.
pub fn build_split(
    raw: &RawImages,
    letters: &[char],
    per_class_train: usize,
    per_class_test: usize,
    seed: u64,
) -> Result<(LabeledImages, LabeledImages)> {
    if letters.len() != CLASSES {
        return Err(Error::InvalidArgument(format!("need {CLASSES} letters, got {}", letters.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let needed = per_class_train + per_class_test;
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for (class, &letter) in letters.iter().enumerate() {
        let label = emnist_letter_label(letter)
            .ok_or_else(|| Error::InvalidArgument(format!("'{letter}' is not a letter")))?;
        let mut idx: Vec<usize> = (0..raw.labels.len()).filter(|&i| raw.labels[i] == label).collect();
        if idx.len() < needed {
            return Err(Error::InsufficientClass {
                class: letter,
                available: idx.len(),
                needed,
            });
        }
        idx.shuffle(&mut rng);
        for (k, &i) in idx[..needed].iter().enumerate() {
            let img = downsample(&raw.images[i]);
            let (imgs, labels) = if k < per_class_train { &mut train } else { &mut test };
            imgs.push(img);
            labels.push(class);
        }
    }
    Ok((
        LabeledImages::new(train.0, train.1, Split::Train)?,
        LabeledImages::new(test.0, test.1, Split::Test)?,
    ))
}

/// Overlap of source pixels with `[lo, hi)` along one axis.
fn axis_weights(lo: f64, hi: f64) -> impl Iterator<Item = (usize, f64)> {
    let first = lo.floor() as usize;
    let last = (hi.ceil() as usize).min(SOURCE_SIDE);
    (first..last).map(move |p| {
        let a = (p as f64).max(lo);
        let b = ((p + 1) as f64).min(hi);
        (p, (b - a).max(0.0))
    })
}

/// Area-weighted 28×28 → 8×8 downsampling; every output cell averages a
/// 3.5×3.5 source window.
pub fn downsample(image: &[f64]) -> Image {
    assert_eq!(image.len(), SOURCE_PIXELS, "downsample expects a 28x28 image");
    let w = SOURCE_SIDE as f64 / IMAGE_SIDE as f64;
    let mut out = [0.0; IMAGE_PIXELS];
    for i in 0..IMAGE_SIDE {
        for j in 0..IMAGE_SIDE {
            let mut acc = 0.0;
            for (r, wr) in axis_weights(i as f64 * w, (i + 1) as f64 * w) {
                for (c, wc) in axis_weights(j as f64 * w, (j + 1) as f64 * w) {
                    acc += wr * wc * image[r * SOURCE_SIDE + c];
                }
            }
            out[i * IMAGE_SIDE + j] = (acc / (w * w)).clamp(0.0, 1.0);
        }
    }
    out
}

/// Blob centre (row, col) of each class template.
const BLOB_CENTRES: [(f64, f64); CLASSES] = [(2.0, 2.0), (2.0, 5.0), (5.0, 2.0), (5.0, 5.0)];
const BLOB_SIGMA: f64 = 1.0;

pub fn blob_template(class: usize) -> Image {
    let (cr, cc) = BLOB_CENTRES[class];
    std::array::from_fn(|k| {
        let (r, c) = ((k / IMAGE_SIDE) as f64, (k % IMAGE_SIDE) as f64);
        (-((r - cr).powi(2) + (c - cc).powi(2)) / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp()
    })
}

/// Four Gaussian-blob classes plus i.i.d. pixel noise of standard
/// deviation `noise`, clipped to `[0, 1]`.
pub fn synthetic_blobs(n_per_class: usize, noise: f64, seed: u64, split: Split) -> Result<LabeledImages> {
    if n_per_class == 0 || !(noise >= 0.0) {
        return Err(Error::InvalidArgument("synthetic_blobs needs n_per_class >= 1 and noise >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut images = Vec::with_capacity(n_per_class * CLASSES);
    let mut labels = Vec::with_capacity(n_per_class * CLASSES);
    for class in 0..CLASSES {
        let t = blob_template(class);
        for _ in 0..n_per_class {
            let img: Image = std::array::from_fn(|k| {
                let n = if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                (t[k] + n).clamp(0.0, 1.0)
            });
            images.push(img);
            labels.push(class);
        }
    }
    LabeledImages::new(images, labels, split)
}

/// 8×8 stroke templates for m, a, n, c (class order of [`DEFAULT_LETTERS`]).
const GLYPHS: [[&str; IMAGE_SIDE]; CLASSES] = [
    [
        "........", "........", "##.#.#..", "#.#.#.#.", "#..#..#.", "#..#..#.", "#..#..#.", "........",
    ],
    [
        "........", "........", ".###....", "....#...", ".####...", "#...#...", ".####...", "........",
    ],
    [
        "........", "........", "#.##....", "##..#...", "#...#...", "#...#...", "#...#...", "........",
    ],
    [
        "........", "........", ".###....", "#...#...", "#.......", "#...#...", ".###....", "........",
    ],
];

pub fn glyph_template(class: usize) -> Image {
    std::array::from_fn(|k| {
        let row = GLYPHS[class][k / IMAGE_SIDE].as_bytes();
        if row[k % IMAGE_SIDE] == b'#' {
            1.0
        } else {
            0.0
        }
    })
}

/// Handwriting-like stand-in for the four-letter task: stroke glyphs with
/// random translation (up to `max_shift` pixels each way), per-sample
/// stroke intensity in `[0.6, 1]`, a 3×3 blur of random strength, and
/// pixel noise. Classes m/n and a/c overlap heavily after jitter.
pub fn synthetic_letters(
    n_per_class: usize,
    noise: f64,
    max_shift: i32,
    seed: u64,
    split: Split,
) -> Result<LabeledImages> {
    if n_per_class == 0 || !(noise >= 0.0) || max_shift < 0 {
        return Err(Error::InvalidArgument("synthetic_letters needs n_per_class >= 1, noise >= 0, shift >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let side = IMAGE_SIDE as i32;
    let mut images = Vec::with_capacity(n_per_class * CLASSES);
    let mut labels = Vec::with_capacity(n_per_class * CLASSES);
    for class in 0..CLASSES {
        let t = glyph_template(class);
        for _ in 0..n_per_class {
            let dr = rng.random_range(-max_shift..=max_shift);
            let dc = rng.random_range(-max_shift..=max_shift);
            let ink = rng.random_range(0.6..=1.0);
            let blur = rng.random_range(0.0..0.5);
            let shifted = |r: i32, c: i32| -> f64 {
                let (sr, sc) = (r - dr, c - dc);
                if (0..side).contains(&sr) && (0..side).contains(&sc) {
                    t[(sr * side + sc) as usize]
                } else {
                    0.0
                }
            };
            let img: Image = std::array::from_fn(|k| {
                let (r, c) = ((k / IMAGE_SIDE) as i32, (k % IMAGE_SIDE) as i32);
                let centre = shifted(r, c);
                let neigh = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .map(|(a, b)| shifted(r + a, c + b))
                    .sum::<f64>()
                    / 4.0;
                let v = ink * ((1.0 - blur) * centre + blur * neigh);
                let n = if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                (v + n).clamp(0.0, 1.0)
            });
            images.push(img);
            labels.push(class);
        }
    }
    LabeledImages::new(images, labels, split)
}
