//! AMAT datasets, per-image contrast normalization, batching and a
//! synthetic two-class fixture.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const IMAGE_SIDE: usize = 28;
pub const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const AMAT_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Grayscale 28×28 images with integer labels. Pixels are stored in single
/// precision and converted when a batch is drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let n = images.shape().n;
        if images.shape().sample_len() != PIXELS || images.shape().c != 1 {
            return Err(Error::shape(format!(
                "dataset images must be (n,1,28,28), got {}",
                images.shape()
            )));
        }
        if labels.len() != n {
            return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Dataset { images, labels, classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        self.images.sample(i)
    }

    /// Gathers the given samples into a batch in the requested precision.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let x = self.images.gather(indices)?.cast::<T>();
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.batch::<f32>(indices)?;
        Dataset::new(images, labels, self.classes, self.split)
    }

    /// Indices of samples whose label is `class`.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), line, msg: msg.into() }
}

/// Reads an AMAT file: one sample per line, 784 row-major pixels in [0, 1]
/// followed by the label. Blank lines are ignored.
pub fn load_amat(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let start = pixels.len();
        let mut fields = 0;
        let mut label = None;
        for token in line.split_whitespace() {
            fields += 1;
            if fields > PIXELS + 1 {
                continue;
            }
            let v: f64 = token
                .parse()
                .map_err(|_| parse_error(path, lineno, format!("field {fields}: not a number: {token:?}")))?;
            if fields <= PIXELS {
                if !(0.0..=1.0).contains(&v) {
                    return Err(parse_error(path, lineno, format!("field {fields}: pixel {v} outside [0, 1]")));
                }
                pixels.push(v as f32);
            } else {
                label = Some(v);
            }
        }
        if fields != PIXELS + 1 {
            pixels.truncate(start);
            return Err(parse_error(path, lineno, format!("expected {} fields, found {fields}", PIXELS + 1)));
        }
        let label = label.unwrap_or(f64::NAN);
        if label.fract() != 0.0 || !(0.0..AMAT_CLASSES as f64).contains(&label) {
            return Err(parse_error(path, lineno, format!("label {label} is not an integer in [0, {AMAT_CLASSES})")));
        }
        labels.push(label as usize);
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{} contains no samples", path.display())));
    }
    let shape = Shape::new(labels.len(), 1, IMAGE_SIDE, IMAGE_SIDE)?;
    Dataset::new(Tensor::from_vec(shape, pixels)?, labels, AMAT_CLASSES, split)
}

/// Writes a dataset in AMAT layout. Pixels use the shortest representation
/// that parses back to the same single-precision value.
pub fn save_amat(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for i in 0..data.len() {
        for &p in data.image(i) {
            write!(out, "{p} ")?;
        }
        writeln!(out, "{}", data.labels[i])?;
    }
    out.flush()?;
    Ok(())
}

/// Per image: subtract the mean and divide by `max(std, epsilon)`.
pub fn contrast_normalize(data: &Dataset, epsilon: f64) -> Result<Dataset> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut images = data.images.clone();
    for i in 0..data.len() {
        let img = images.sample_mut(i);
        let n = img.len() as f64;
        let mean = img.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = img.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let scale = var.sqrt().max(epsilon);
        img.iter_mut().for_each(|v| *v = ((*v as f64 - mean) / scale) as f32);
    }
    Ok(Dataset { images, ..data.clone() })
}

/// Mirrors every sample `i` with `flip[i]` about the vertical axis.
pub fn flip_horizontal<T: Scalar>(batch: &mut Tensor<T>, flip: &[bool]) -> Result<()> {
    let shape = batch.shape();
    if flip.len() != shape.n {
        return Err(Error::shape(format!("{} flip flags for batch {shape}", flip.len())));
    }
    for (i, _) in flip.iter().enumerate().filter(|(_, &f)| f) {
        for row in batch.sample_mut(i).chunks_exact_mut(shape.w) {
            row.reverse();
        }
    }
    Ok(())
}

/// Epoch-wise shuffled mini-batches. The permutation of epoch `e` depends
/// only on `(seed, e)`, so resuming needs nothing beyond the epoch counter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchIterator {
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
}

impl BatchIterator {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "batching needs samples and a positive batch size (n={len}, batch={batch_size})"
            )));
        }
        Ok(BatchIterator { len, batch_size, seed, epoch: 0 })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
    }

    /// Generator for per-epoch randomness other than the permutation.
    pub fn epoch_rng(&self, purpose: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(self.epoch);
        rng
    }

    /// Batches of the current epoch, then advances the epoch counter. The
    /// last batch may be smaller.
    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut self.epoch_rng(0));
        self.epoch += 1;
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Two classes sharing a jittered square blob on a noisy background. Class 0
/// carries a faint 3×3 mark above-left of the blob, class 1 the same mark
/// below-right; both classes also carry a decoy mark of the same size at a
/// random position. The classes have the same intensity statistics and
/// differ only in where the faint mark sits.
pub fn synthetic_confusable(n_per_class: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * n_per_class;
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let mut img: Vec<f32> = (0..PIXELS).map(|_| rng.gen_range(0.0..0.5)).collect();
        let r0 = 9 + rng.gen_range(0..5) - 2;
        let c0 = 9 + rng.gen_range(0..5) - 2;
        let level = rng.gen_range(0.5..0.8);
        let mark = rng.gen_range(0.55..0.9);
        let (dr, dc) = (rng.gen_range(0..IMAGE_SIDE - 2), rng.gen_range(0..IMAGE_SIDE - 2));
        let mut paint = |r: usize, c: usize, size: usize, v: f32| {
            for rr in r..r + size {
                for cc in c..c + size {
                    let p = &mut img[rr * IMAGE_SIDE + cc];
                    *p = p.max(v);
                }
            }
        };
        paint(r0, c0, 10, level);
        let (mr, mc) = if label == 0 { (r0 - 4, c0 - 4) } else { (r0 + 11, c0 + 11) };
        paint(mr, mc, 3, mark);
        paint(dr, dc, 3, mark);
        pixels.extend(img);
        labels.push(label);
    }
    let shape = Shape::new(n, 1, IMAGE_SIDE, IMAGE_SIDE)?;
    Dataset::new(Tensor::from_vec(shape, pixels)?, labels, 2, Split::Train)
}
