//! Emphasis vectors of two classes, split by first-pass confidence.

use std::fmt;
use std::io::Write;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::unroll::{infer, Model};

pub const CSV_HEADER: &str = "row,sample,label,top1_conf_t1,bucket,head,channel_mean,argmax,argmin,values";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bucket {
    /// First-pass top-1 confidence at or above the threshold.
    High,
    Low,
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bucket::High => "high",
            Bucket::Low => "low",
        })
    }
}

#[derive(Clone, Debug)]
pub struct InspectOptions {
    pub classes: (usize, usize),
    pub threshold: f64,
    pub batch_size: usize,
}

/// Per-class mean emphasis of one head within one confidence bucket.
#[derive(Clone, Debug)]
pub struct BucketSummary {
    pub bucket: Bucket,
    pub head: String,
    pub counts: (usize, usize),
    pub mean_a: Vec<f64>,
    pub mean_b: Vec<f64>,
    /// Cosine similarity of the two class means; NaN when a class has no
    /// sample in the bucket.
    pub cosine: f64,
}

#[derive(Clone, Debug)]
pub struct InspectSummary {
    pub samples: usize,
    pub buckets: Vec<BucketSummary>,
    /// Largest `|channel mean − 1|` over all emitted vectors.
    pub max_mean_deviation: f64,
    /// Smallest emitted emphasis value.
    pub min_value: f64,
}

impl InspectSummary {
    pub fn cosine(&self, bucket: Bucket, head: &str) -> Option<f64> {
        self.buckets.iter().find(|b| b.bucket == bucket && b.head == head).map(|b| b.cosine)
    }
}

impl fmt::Display for InspectSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples {}", self.samples)?;
        for b in &self.buckets {
            writeln!(
                f,
                "{:<5} {:<10} n=({}, {}) cosine {:.6}",
                b.bucket.to_string(),
                b.head,
                b.counts.0,
                b.counts.1,
                b.cosine
            )?;
        }
        write!(f, "max |mean - 1| {:.3e}, min value {:.6}", self.max_mean_deviation, self.min_value)
    }
}

/// Sample count and per-channel sum.
type Accumulator = (usize, Vec<f64>);

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn argmin(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] < v[b] { i } else { b })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(";")
}

/// Writes one CSV row per (sample, head) for samples of the two classes,
/// holding the emphasis vector used by the second iteration, followed by
/// per-class, per-bucket mean rows and the class-mean cosine similarities.
pub fn inspect_emphasis<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    opts: &InspectOptions,
    csv: &mut dyn Write,
) -> Result<InspectSummary> {
    if model.iterations() < 2 || model.spec().heads.is_empty() {
        return Err(Error::InvalidArgument(
            "emphasis inspection needs a rethinking model with at least two iterations".into(),
        ));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let (ca, cb) = opts.classes;
    let mut members = Vec::new();
    for c in [ca, cb] {
        let idx = data.indices_of(c);
        if idx.is_empty() {
            return Err(Error::Data(format!("class {c} has no samples in the dataset")));
        }
        members.extend(idx);
    }
    members.sort_unstable();
    let heads: Vec<String> = model.spec().heads.iter().map(|h| h.name.clone()).collect();
    // sums[bucket][class][head] = (count, per-channel sum)
    let mut sums: Vec<Vec<Vec<Accumulator>>> = vec![vec![Vec::new(); 2]; 2];
    for b in &mut sums {
        for c in b.iter_mut() {
            *c = model.heads.iter().map(|h| (0, vec![0.0; h.channels])).collect();
        }
    }
    let (mut max_dev, mut min_value) = (0.0f64, f64::INFINITY);
    writeln!(csv, "{CSV_HEADER}")?;
    for chunk in members.chunks(opts.batch_size) {
        let (x, labels) = data.batch::<T>(chunk)?;
        let inf = infer(model, &x)?;
        let p1 = &inf.posteriors[0];
        let k = p1.shape().c;
        for (i, (&sample, &label)) in chunk.iter().zip(&labels).enumerate() {
            let conf = p1.data()[i * k..(i + 1) * k].iter().fold(0.0f64, |a, &b| a.max(b.as_f64()));
            let bucket = if conf >= opts.threshold { Bucket::High } else { Bucket::Low };
            let class_slot = if label == ca { 0 } else { 1 };
            for (h, name) in heads.iter().enumerate() {
                let v: Vec<f64> = inf.emphasis[1][h].row(i).iter().map(|x| x.as_f64()).collect();
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                max_dev = max_dev.max((mean - 1.0).abs());
                min_value = v.iter().fold(min_value, |a, &b| a.min(b));
                writeln!(
                    csv,
                    "sample,{sample},{label},{conf:.6},{bucket},{name},{mean:.6},{},{},{}",
                    argmax(&v),
                    argmin(&v),
                    join(&v)
                )?;
                let slot = &mut sums[bucket as usize][class_slot][h];
                slot.0 += 1;
                slot.1.iter_mut().zip(&v).for_each(|(s, x)| *s += x);
            }
        }
    }
    let mut buckets = Vec::new();
    for bucket in [Bucket::High, Bucket::Low] {
        for (h, name) in heads.iter().enumerate() {
            let mean = |slot: usize| {
                let (n, s) = &sums[bucket as usize][slot][h];
                s.iter().map(|x| x / *n as f64).collect::<Vec<f64>>()
            };
            let (mean_a, mean_b) = (mean(0), mean(1));
            for (class, m, n) in [(ca, &mean_a, sums[bucket as usize][0][h].0), (cb, &mean_b, sums[bucket as usize][1][h].0)] {
                if n > 0 {
                    let avg = m.iter().sum::<f64>() / m.len() as f64;
                    writeln!(csv, "class_mean,,{class},,{bucket},{name},{avg:.6},{},{},{}", argmax(m), argmin(m), join(m))?;
                }
            }
            let cos = cosine(&mean_a, &mean_b);
            writeln!(csv, "cosine,,,,{bucket},{name},,,,{cos:.6}")?;
            buckets.push(BucketSummary {
                bucket,
                head: name.clone(),
                counts: (sums[bucket as usize][0][h].0, sums[bucket as usize][1][h].0),
                mean_a,
                mean_b,
                cosine: cos,
            });
        }
    }
    Ok(InspectSummary { samples: members.len(), buckets, max_mean_deviation: max_dev, min_value })
}
