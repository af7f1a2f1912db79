//! Single-file binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "RTHKCKPT" | version u32 | dtype u8 | phase u8 | epoch u64
//! rng_seed u64 | rng_epoch u64 | spec text (u64 len + bytes)
//! tensor count u32, then per tensor:
//!     name (u32 len + bytes) | kind u8 | dims 4×u64 | values
//! optimizer flag u8, then if set:
//!     lr f64 | momentum f64 | weight_decay f64 | exempt_biases u8
//!     buffer count u32, then per buffer: dims 4×u64 | values
//! config text (u64 len + bytes)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Shape, Tensor};
use crate::unroll::{Model, NetworkSpec, OptimState, Param, ParamKind};

const MAGIC: &[u8; 8] = b"RTHKCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub optim: Option<OptimState<T>>,
    /// 1 for baseline training, 2 for rethinking fine-tuning.
    pub phase: u8,
    /// Epochs completed within `phase`.
    pub epoch: u64,
    /// Seed and epoch counter of the batch shuffler.
    pub rng_seed: u64,
    pub rng_epoch: u64,
    pub config: String,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn text(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        for d in t.shape().dims() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            v.write_le(&mut self.0);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(len, what)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))
    }
    fn text(&mut self, what: &str) -> Result<String> {
        let len = self.u64(what)? as usize;
        self.string(len, what)
    }
    fn tensor<T: Scalar>(&mut self, what: &str) -> Result<Tensor<T>> {
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = self.u64(what)? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])
            .map_err(|e| Error::Checkpoint(format!("{what}: {e}")))?;
        let width = T::DTYPE.tag() as usize;
        let raw = self.take(shape.len().saturating_mul(width), what)?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        Tensor::from_vec(shape, data)
    }
}

fn header(bytes: &[u8]) -> Result<(Reader<'_>, DType)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let tag = r.u8("dtype")?;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
    Ok((r, dtype))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))
}

/// Precision a checkpoint was written in.
pub fn peek_dtype(path: impl AsRef<Path>) -> Result<DType> {
    let bytes = read_file(path.as_ref())?;
    Ok(header(&bytes)?.1)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u8(T::DTYPE.tag());
        w.u8(self.phase);
        w.u64(self.epoch);
        w.u64(self.rng_seed);
        w.u64(self.rng_epoch);
        w.text(&self.model.spec().to_text());
        w.u32(self.model.params().len() as u32);
        for p in self.model.params() {
            w.u32(p.name.len() as u32);
            w.0.extend_from_slice(p.name.as_bytes());
            w.u8(match p.kind {
                ParamKind::Weight => 0,
                ParamKind::Bias => 1,
            });
            w.tensor(&p.value);
        }
        match &self.optim {
            None => w.u8(0),
            Some(o) => {
                w.u8(1);
                w.f64(o.lr);
                w.f64(o.momentum);
                w.f64(o.weight_decay);
                w.u8(o.exempt_biases as u8);
                w.u32(o.velocity.len() as u32);
                for v in &o.velocity {
                    w.tensor(v);
                }
            }
        }
        w.text(&self.config);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, dtype) = header(bytes)?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("checkpoint holds {dtype} precision, expected {}", T::DTYPE)));
        }
        let phase = r.u8("phase")?;
        let epoch = r.u64("epoch")?;
        let rng_seed = r.u64("rng seed")?;
        let rng_epoch = r.u64("rng epoch")?;
        let spec = NetworkSpec::from_text(&r.text("network spec")?)
            .map_err(|e| Error::Checkpoint(format!("network spec: {e}")))?;
        let count = r.u32("tensor count")?;
        let mut params = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u32("tensor name length")? as usize;
            let name = r.string(len, "tensor name")?;
            let kind = match r.u8("tensor kind")? {
                0 => ParamKind::Weight,
                1 => ParamKind::Bias,
                k => return Err(Error::Checkpoint(format!("{name}: unknown kind {k}"))),
            };
            let value = r.tensor(&name)?;
            params.push(Param { name, kind, value });
        }
        let model = Model::from_params(spec, params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let optim = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let lr = r.f64("lr")?;
                let momentum = r.f64("momentum")?;
                let weight_decay = r.f64("weight decay")?;
                let exempt_biases = r.u8("bias exemption")? != 0;
                let n = r.u32("buffer count")? as usize;
                if n != model.params().len() {
                    return Err(Error::Checkpoint(format!(
                        "{n} momentum buffers for {} parameters",
                        model.params().len()
                    )));
                }
                let mut velocity = Vec::with_capacity(n);
                for p in model.params() {
                    let v: Tensor<T> = r.tensor("momentum buffer")?;
                    if v.shape() != p.value.shape() {
                        return Err(Error::Checkpoint(format!("momentum buffer shape mismatch for {}", p.name)));
                    }
                    velocity.push(v);
                }
                Some(OptimState { lr, momentum, weight_decay, exempt_biases, velocity })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        let config = r.text("config")?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { model, optim, phase, epoch, rng_seed, rng_epoch, config })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

/// Name, kind and element count of every tensor in a checkpoint file,
/// read without rebuilding the model.
pub fn tensor_inventory(path: impl AsRef<Path>) -> Result<Vec<(String, ParamKind, Shape)>> {
    let bytes = read_file(path.as_ref())?;
    let (mut r, dtype) = header(&bytes)?;
    r.take(1 + 8 * 3, "counters")?;
    r.text("network spec")?;
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32("tensor name length")? as usize;
        let name = r.string(len, "tensor name")?;
        let kind = if r.u8("tensor kind")? == 0 { ParamKind::Weight } else { ParamKind::Bias };
        let shape = match dtype {
            DType::F32 => r.tensor::<f32>(&name)?.shape(),
            DType::F64 => r.tensor::<f64>(&name)?.shape(),
        };
        out.push((name, kind, shape));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample<T: Scalar>() -> Checkpoint<T> {
        let mut model = Model::<T>::new(NetworkSpec::tiny(3, 2), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in model.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = T::lit(rng.gen_range(-1.0..1.0)));
        }
        let mut optim = OptimState::new(&model, 0.01, 0.9, 1e-4).unwrap();
        for v in &mut optim.velocity {
            v.data_mut().iter_mut().for_each(|x| *x = T::lit(rng.gen_range(-0.1..0.1)));
        }
        Checkpoint { model, optim: Some(optim), phase: 2, epoch: 3, rng_seed: 9, rng_epoch: 67, config: "lr = 0.01\n".into() }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample::<f64>();
        assert_eq!(Checkpoint::<f64>::from_bytes(&c.to_bytes()).unwrap(), c);
        let c = sample::<f32>();
        assert_eq!(Checkpoint::<f32>::from_bytes(&c.to_bytes()).unwrap(), c);
        let mut no_optim = sample::<f64>();
        no_optim.optim = None;
        assert_eq!(Checkpoint::<f64>::from_bytes(&no_optim.to_bytes()).unwrap(), no_optim);
    }

    #[test]
    fn file_round_trip_and_inventory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample::<f32>();
        c.save(&path).unwrap();
        assert_eq!(peek_dtype(&path).unwrap(), DType::F32);
        assert_eq!(Checkpoint::<f32>::load(&path).unwrap(), c);
        assert!(Checkpoint::<f64>::load(&path).is_err());
        let inv = tensor_inventory(&path).unwrap();
        let expected: Vec<_> = c.model.params().iter().map(|p| (p.name.clone(), p.kind, p.value.shape())).collect();
        assert_eq!(inv, expected);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample::<f64>().to_bytes();
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::<f64>::from_bytes(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut version = bytes;
        version[8] = 99;
        assert!(Checkpoint::<f64>::from_bytes(&version).is_err());
    }
}
