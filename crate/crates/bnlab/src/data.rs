//! Dataset ingestion and mini-batching.
//!
//! Images load from IDX files (the MNIST container format): big-endian u32
//! magic + dims, then raw u8 payload. Gzip-compressed files are detected by
//! their magic bytes and decompressed transparently. Pixels are scaled to
//! [0, 1] on load; [`binarize`] thresholds them to {0, 1}.
//!
//! The module also ships a deterministic synthetic digit generator that
//! writes the same IDX layout, so the full pipeline can run in environments
//! without the real dataset.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[n, rows*cols]`, values in [0, 1].
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Reads a whole file, decompressing if the gzip magic bytes lead it.
fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| {
            Error::Format(format!("{}: gzip decompression failed: {e}", path.display()))
        })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> IdxReader<'a> {
    fn u32(&mut self, field: &str) -> Result<u32> {
        let end = self.pos + 4;
        if end > self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated while reading {field}",
                self.path.display()
            )));
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..end].try_into().expect("4 bytes"));
        self.pos = end;
        Ok(v)
    }

    fn payload(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated {field}: expected {n} bytes, found {}",
                self.path.display(),
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

/// Loads an images/labels IDX file pair into a dataset with [0, 1] pixels.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img_bytes = read_maybe_gzip(images_path)?;
    let mut r = IdxReader {
        bytes: &img_bytes,
        pos: 0,
        path: images_path,
    };
    let magic = r.u32("images magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad images magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let n = r.u32("image count")? as usize;
    let rows = r.u32("image rows")? as usize;
    let cols = r.u32("image cols")? as usize;
    let pixels = r.payload(n * rows * cols, "image pixels")?;
    let images = Tensor::from_vec(
        &[n, rows * cols],
        pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    )?;

    let lbl_bytes = read_maybe_gzip(labels_path)?;
    let mut r = IdxReader {
        bytes: &lbl_bytes,
        pos: 0,
        path: labels_path,
    };
    let magic = r.u32("labels magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad labels magic {magic:#010x}, expected {LABELS_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let n_labels = r.u32("label count")? as usize;
    if n_labels != n {
        return Err(Error::Format(format!(
            "label count {n_labels} does not match image count {n}"
        )));
    }
    let raw_labels = r.payload(n, "label bytes")?;
    let mut labels = Vec::with_capacity(n);
    for (i, &b) in raw_labels.iter().enumerate() {
        if b > 9 {
            return Err(Error::Format(format!(
                "{}: label {b} at index {i} exceeds 9",
                labels_path.display()
            )));
        }
        labels.push(b as usize);
    }
    Ok(Dataset {
        images,
        labels,
        split,
    })
}

/// Thresholds [0, 1] pixels to {0, 1}: `v >= threshold` maps to 1.
pub fn binarize(images: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "binarize: threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Ok(images.map(|v| if v >= threshold { 1.0 } else { 0.0 }))
}

/// Canonical file stems, tried with and without a .gz suffix.
const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

fn resolve(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::Format(format!(
        "missing dataset file {stem}[.gz] in {}",
        dir.display()
    )))
}

/// Loads the train and test splits from a directory holding the four
/// conventionally named IDX files (optionally gzipped).
pub fn load_dataset_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &resolve(dir, TRAIN_IMAGES)?,
        &resolve(dir, TRAIN_LABELS)?,
        Split::Train,
    )?;
    let test = load_idx(
        &resolve(dir, TEST_IMAGES)?,
        &resolve(dir, TEST_LABELS)?,
        Split::Test,
    )?;
    Ok((train, test))
}

/// Seeded mini-batch stream: shuffles once per epoch and drops the ragged
/// tail, so every batch has exactly `batch_size` examples and each epoch
/// visits each example at most once.
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
    pub epoch: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyBatch("BatchIterator::new"));
        }
        if batch_size == 0 || batch_size > dataset.len() {
            return Err(Error::Config(format!(
                "batch size {batch_size} invalid for dataset of {}",
                dataset.len()
            )));
        }
        let mut it = BatchIterator {
            dataset,
            batch_size,
            rng,
            perm: (0..dataset.len()).collect(),
            pos: 0,
            epoch: 0,
        };
        it.perm.shuffle(&mut it.rng);
        Ok(it)
    }

    pub fn next_batch(&mut self) -> (Tensor, Vec<usize>) {
        if self.pos + self.batch_size > self.perm.len() {
            self.perm.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let idx = &self.perm[self.pos..self.pos + self.batch_size];
        self.pos += self.batch_size;
        let images = self.dataset.images.take_rows(idx);
        let labels = idx.iter().map(|&i| self.dataset.labels[i]).collect();
        (images, labels)
    }
}

// --- synthetic digit corpus ---------------------------------------------

/// 7x7 stroke templates, one per digit, upscaled 3x onto a 28x28 canvas.
const GLYPHS: [&str; 10] = [
    "\
.#####.
#.....#
#.....#
#.....#
#.....#
#.....#
.#####.",
    "\
...#...
..##...
.#.#...
...#...
...#...
...#...
.#####.",
    "\
.#####.
#.....#
......#
....##.
..##...
.#.....
#######",
    "\
.#####.
......#
......#
..####.
......#
......#
.#####.",
    "\
....##.
...#.#.
..#..#.
.#...#.
#######
.....#.
.....#.",
    "\
#######
#......
#......
######.
......#
......#
######.",
    "\
.#####.
#......
#......
######.
#.....#
#.....#
.#####.",
    "\
#######
......#
.....#.
....#..
...#...
..#....
..#....",
    "\
.#####.
#.....#
#.....#
.#####.
#.....#
#.....#
.#####.",
    "\
.#####.
#.....#
#.....#
.######
......#
......#
.#####.",
];

const CANVAS: usize = 28;
const GLYPH_SCALE: usize = 2;
/// Centers the 14x14 scaled glyph, leaving 7 pixels of shift headroom.
const GLYPH_OFFSET: usize = (CANVAS - 7 * GLYPH_SCALE) / 2;

/// Controls how hard the synthetic problem is.
#[derive(Clone, Copy, Debug)]
pub struct SynthConfig {
    /// Per-pixel flip probability after rendering.
    pub noise: f64,
    /// Glyphs translate uniformly in [-max_shift, max_shift] on both axes.
    pub max_shift: i32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            noise: 0.12,
            max_shift: 7,
        }
    }
}

fn render_glyph(digit: usize, dx: i32, dy: i32, out: &mut [u8]) {
    out.fill(0);
    let rows: Vec<&str> = GLYPHS[digit].lines().collect();
    for (gy, row) in rows.iter().enumerate() {
        for (gx, ch) in row.bytes().enumerate() {
            if ch != b'#' {
                continue;
            }
            for sy in 0..GLYPH_SCALE {
                for sx in 0..GLYPH_SCALE {
                    let y = (gy * GLYPH_SCALE + sy + GLYPH_OFFSET) as i32 + dy;
                    let x = (gx * GLYPH_SCALE + sx + GLYPH_OFFSET) as i32 + dx;
                    if (0..CANVAS as i32).contains(&y) && (0..CANVAS as i32).contains(&x) {
                        out[y as usize * CANVAS + x as usize] = 255;
                    }
                }
            }
        }
    }
}

/// Generates `n` noisy shifted digit images with uniform labels.
/// Deterministic for a given (n, seed, config).
pub fn generate_synthetic(n: usize, seed: u64, cfg: SynthConfig) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = vec![0u8; n * CANVAS * CANVAS];
    let mut labels = vec![0u8; n];
    let mut canvas = vec![0u8; CANVAS * CANVAS];
    for i in 0..n {
        let digit = rng.gen_range(0..10usize);
        labels[i] = digit as u8;
        let dx = rng.gen_range(-cfg.max_shift..=cfg.max_shift);
        let dy = rng.gen_range(-cfg.max_shift..=cfg.max_shift);
        render_glyph(digit, dx, dy, &mut canvas);
        for px in canvas.iter_mut() {
            if rng.gen_bool(cfg.noise) {
                *px = if *px == 0 { 255 } else { 0 };
            }
        }
        images[i * CANVAS * CANVAS..(i + 1) * CANVAS * CANVAS].copy_from_slice(&canvas);
    }
    (images, labels)
}

pub fn write_idx_images(path: &Path, pixels: &[u8], n: usize) -> Result<()> {
    if pixels.len() != n * CANVAS * CANVAS {
        return Err(Error::dim(
            "write_idx_images",
            format!("{} pixels for {n} images", pixels.len()),
        ));
    }
    let mut f = File::create(path)?;
    f.write_all(&IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&(n as u32).to_be_bytes())?;
    f.write_all(&(CANVAS as u32).to_be_bytes())?;
    f.write_all(&(CANVAS as u32).to_be_bytes())?;
    f.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(&LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)?;
    Ok(())
}

/// Writes a full synthetic train/test corpus into `dir` using the canonical
/// IDX filenames. Train and test draws use distinct derived seeds.
pub fn write_synthetic_dataset(
    dir: &Path,
    n_train: usize,
    n_test: usize,
    seed: u64,
    cfg: SynthConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (train_images, train_labels) = generate_synthetic(n_train, seed, cfg);
    let (test_images, test_labels) = generate_synthetic(n_test, seed.wrapping_add(1), cfg);
    write_idx_images(&dir.join(TRAIN_IMAGES), &train_images, n_train)?;
    write_idx_labels(&dir.join(TRAIN_LABELS), &train_labels)?;
    write_idx_images(&dir.join(TEST_IMAGES), &test_images, n_test)?;
    write_idx_labels(&dir.join(TEST_LABELS), &test_labels)?;
    Ok(())
}
