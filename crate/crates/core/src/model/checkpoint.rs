//! Binary checkpoint container.
//!
//! All integers and floats are little-endian. `E` is the element width
//! (4 for `f32`, 8 for `f64`); a tensor is `u32 ndim, u32 dims[ndim]`
//! followed by its values as `E`-byte floats.
//!
//! ```text
//! "IACK" u32 version=1  u32 E  u32 step
//! u32 n_mels  u32 n_frames  u32 channels[3]
//! f64 dropout  f64 eta_init  f64 bn_eps  f64 bn_momentum
//! u32 n_layers, per layer:
//!     tensor weight, tensor bias, tensor gamma, tensor beta,
//!     tensor running_mean, tensor running_var, u64 stat_updates
//! tensor class_weights [K, D]   tensor scale [1]
//! u32 K, per unit: u32 task_id, u8 head (0 softmax, 1 sigmoid), u32 len, utf-8 name
//! u32 n_seeds, u64 seed[n_seeds]
//! u32 n_records, per record: u32 task_id, f64 first_value
//! ```

use std::fs;
use std::path::Path;

use super::learner::{ConvLayer, CosineClassifier, InputSpec, Learner, ModelConfig};
use super::registry::{ClassRegistry, Head};
use crate::error::{Error, Result};
use crate::tensor::{Real, RunningStats, Tensor};

const MAGIC: &[u8; 4] = b"IACK";
const VERSION: u32 = 1;

/// First evaluation value of a task (accuracy or F1, in percent), kept so a
/// checkpoint can recompute forgetting on its own.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub task_id: u32,
    pub first_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub step: u32,
    pub learner: Learner<T>,
    pub history: Vec<EvalRecord>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn values<T: Real>(&mut self, vals: &[T]) {
        for &v in vals {
            v.write_le(&mut self.0);
        }
    }
    fn tensor<T: Real>(&mut self, t: &Tensor<T>) {
        self.u32(t.shape().len());
        for &d in t.shape() {
            self.u32(d);
        }
        self.values(t.data());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.origin, "truncated checkpoint"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn values<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(n.checked_mul(T::BYTES).ok_or_else(|| self.bad("size overflow"))?)?;
        Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
    }
    fn tensor<T: Real>(&mut self) -> Result<Tensor<T>> {
        let ndim = self.u32()?;
        if ndim > 8 {
            return Err(self.bad("tensor rank out of range"));
        }
        let shape = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| self.bad("tensor size overflow"))?;
        Tensor::new(shape, self.values(n)?)
    }
    fn bad(&self, msg: &str) -> Error {
        Error::format(self.origin, msg)
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let l = &self.learner;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        w.u32(T::BYTES);
        w.u32(self.step as usize);
        w.u32(l.input.n_mels);
        w.u32(l.input.n_frames);
        for c in l.config.channels {
            w.u32(c);
        }
        for v in [
            l.config.dropout,
            l.config.eta_init,
            l.config.bn_eps,
            l.config.bn_momentum,
        ] {
            w.f64(v);
        }
        w.u32(l.layers.len());
        for layer in &l.layers {
            w.tensor(&layer.weight);
            w.tensor(&layer.bias);
            w.tensor(&layer.gamma);
            w.tensor(&layer.beta);
            let c = layer.stats.mean.len();
            w.tensor(&Tensor::new(vec![c], layer.stats.mean.clone()).expect("sized"));
            w.tensor(&Tensor::new(vec![c], layer.stats.var.clone()).expect("sized"));
            w.u64(layer.stats.updates);
        }
        w.tensor(&l.classifier.weights);
        w.tensor(&l.classifier.scale);
        w.u32(l.registry.len());
        for e in l.registry.entries() {
            w.u32(e.task_id as usize);
            w.0.push(match e.head {
                Head::Softmax => 0,
                Head::Sigmoid => 1,
            });
            w.u32(e.name.len());
            w.0.extend_from_slice(e.name.as_bytes());
        }
        w.u32(l.seeds.len());
        for &s in &l.seeds {
            w.u64(s);
        }
        w.u32(self.history.len());
        for r in &self.history {
            w.u32(r.task_id as usize);
            w.f64(r.first_value);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            origin,
        };
        if r.take(4)? != MAGIC {
            return Err(r.bad("bad magic, expected IACK"));
        }
        if r.u32()? != VERSION as usize {
            return Err(r.bad("unsupported checkpoint version"));
        }
        if r.u32()? != T::BYTES {
            return Err(r.bad("checkpoint precision does not match the requested element type"));
        }
        let step = r.u32()? as u32;
        let input = InputSpec {
            n_mels: r.u32()?,
            n_frames: r.u32()?,
        };
        let channels = [r.u32()?, r.u32()?, r.u32()?];
        let config = ModelConfig {
            channels,
            dropout: r.f64()?,
            eta_init: r.f64()?,
            bn_eps: r.f64()?,
            bn_momentum: r.f64()?,
        };
        let n_layers = r.u32()?;
        if n_layers != 6 {
            return Err(r.bad("checkpoint must hold six conv layers"));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let weight = r.tensor()?;
            let bias = r.tensor()?;
            let gamma = r.tensor()?;
            let beta = r.tensor()?;
            let mean = r.tensor()?.into_data();
            let var = r.tensor()?.into_data();
            let updates = r.u64()?;
            layers.push(ConvLayer {
                weight,
                bias,
                gamma,
                beta,
                stats: RunningStats { mean, var, updates },
            });
        }
        let classifier = CosineClassifier {
            weights: r.tensor()?,
            scale: r.tensor()?,
        };
        let n_classes = r.u32()?;
        let mut registry = ClassRegistry::new();
        for _ in 0..n_classes {
            let task_id = r.u32()? as u32;
            let head = match r.u8()? {
                0 => Head::Softmax,
                1 => Head::Sigmoid,
                _ => return Err(r.bad("unknown head tag")),
            };
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.bad("class name is not utf-8"))?
                .to_owned();
            registry.push_raw(task_id, name, head);
        }
        let n_seeds = r.u32()?;
        let seeds = (0..n_seeds).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n_records = r.u32()?;
        let mut history = Vec::with_capacity(n_records.min(1024));
        for _ in 0..n_records {
            history.push(EvalRecord {
                task_id: r.u32()? as u32,
                first_value: r.f64()?,
            });
        }
        if r.pos != bytes.len() {
            return Err(r.bad("trailing bytes after checkpoint"));
        }
        if classifier.weights.shape() != [n_classes, config.flatten_dim(&input)?] {
            return Err(r.bad("classifier shape does not match registry and input"));
        }
        Ok(Checkpoint {
            step,
            learner: Learner {
                config,
                input,
                layers,
                classifier,
                registry,
                seeds,
            },
            history,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// FNV-1a hash of the serialized form.
    pub fn fingerprint(&self) -> u64 {
        fingerprint(&self.to_bytes())
    }
}

pub(crate) fn fingerprint(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl<T: Real> Learner<T> {
    /// Hash over all learned and tracked state, registry included.
    pub fn fingerprint(&self) -> u64 {
        Checkpoint {
            step: 0,
            learner: self.clone(),
            history: Vec::new(),
        }
        .fingerprint()
    }
}
