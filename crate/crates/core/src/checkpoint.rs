//! Binary checkpoint format.
//!
//! Little-endian: magic `RMA1`, `u32` version, `u32` tensor count, then per
//! tensor a `u16` name length, the UTF-8 name, a `u8` rank, one `u32` per
//! dimension and the `f32` data. Model checkpoints add a few small tensors
//! describing the architecture so a file can be loaded without outside
//! configuration.

use std::path::Path;

use crate::attention::{AttentionWeights, CellOutput};
use crate::backbone::{BackboneArch, BackboneWeights, ConvLayer};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RMA1";
pub const VERSION: u32 = 1;

pub type NamedTensor = (String, Tensor<f32>);

/// Serializes named tensors.
pub fn encode(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::config(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::config(format!("tensor {name} has rank {}", t.rank())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::config(format!("tensor {name} dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }

    fn fail(&self, at: usize, message: String) -> Error {
        Error::Format {
            offset: at,
            message,
        }
    }
}

/// Parses named tensors; nothing is returned unless the whole file is valid.
pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(c.fail(0, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    let count = c.u32("tensor count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let start = c.pos;
        let len = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|e| c.fail(start + 2, format!("tensor {i} name is not UTF-8: {e}")))?
            .to_string();
        let rank = c.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dimension")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n
            .filter(|&n| n.checked_mul(4).is_some())
            .ok_or_else(|| c.fail(start, format!("tensor {name} shape {shape:?} overflows")))?;
        let raw = c.take(n * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| c.fail(start, format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(c.fail(c.pos, format!("{} trailing bytes after the last tensor", bytes.len() - c.pos)));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let bytes = encode(tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

const ARCH_CHANNELS: &str = "config.backbone.channels";
const ARCH_KERNEL_POOL: &str = "config.backbone.kernel_pool";
const MODEL_DIMS: &str = "config.model.dims";
const ADAM_HYPER: &str = "adam.hyper";
const ADAM_STEP: &str = "adam.step";

fn ints(values: &[usize]) -> Tensor<f32> {
    Tensor::from_vec(values.iter().map(|&v| v as f32).collect())
}

/// Each `f64` as four 16-bit chunks, all exact in `f32`.
fn f64_bits(values: &[f64]) -> Tensor<f32> {
    Tensor::from_vec(
        values
            .iter()
            .flat_map(|v| {
                let b = v.to_bits();
                [48, 32, 16, 0].map(|shift| ((b >> shift) & 0xffff) as f32)
            })
            .collect(),
    )
}

fn from_f64_bits(t: &Tensor<f32>, name: &str) -> Result<Vec<f64>> {
    let chunks = to_ints(t, name)?;
    if chunks.len() % 4 != 0 || chunks.iter().any(|&c| c > 0xffff) {
        return Err(Error::Incompatible(format!("{name} is not a packed f64 list")));
    }
    Ok(chunks
        .chunks(4)
        .map(|c| f64::from_bits(c.iter().fold(0u64, |acc, &x| (acc << 16) | x as u64)))
        .collect())
}

fn to_ints(t: &Tensor<f32>, name: &str) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                Ok(v as usize)
            } else {
                Err(Error::Incompatible(format!("{name} holds a non-integer value {v}")))
            }
        })
        .collect()
}

/// Model weights plus optional optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub adam: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let cfg = &self.model.config;
        let mut out = vec![
            (ARCH_CHANNELS.to_string(), ints(&cfg.backbone.channels)),
            (ARCH_KERNEL_POOL.to_string(), ints(&[cfg.backbone.kernel, cfg.backbone.pool])),
            (
                MODEL_DIMS.to_string(),
                ints(&[
                    cfg.region_h,
                    cfg.region_w,
                    cfg.embed,
                    cfg.hidden,
                    cfg.head,
                    cfg.classes,
                    cfg.steps,
                    cfg.cell.code() as usize,
                ]),
            ),
        ];
        let names = self.model.names();
        out.extend(names.iter().cloned().zip(self.model.tensors().into_iter().cloned()));
        if let Some(adam) = &self.adam {
            let c = adam.config;
            out.push((ADAM_HYPER.to_string(), f64_bits(&[c.lr, c.beta1, c.beta2, c.eps])));
            // Split across two f32 slots so step counts beyond 2^24 survive.
            let (hi, lo) = ((adam.step >> 24) as f32, (adam.step & 0xff_ffff) as f32);
            out.push((ADAM_STEP.to_string(), Tensor::from_vec(vec![hi, lo])));
            for (name, m) in names.iter().zip(&adam.m) {
                out.push((format!("adam.m.{name}"), m.clone()));
            }
            for (name, v) in names.iter().zip(&adam.v) {
                out.push((format!("adam.v.{name}"), v.clone()));
            }
        }
        out
    }

    pub fn from_tensors(tensors: Vec<NamedTensor>) -> Result<Self> {
        let mut map: std::collections::BTreeMap<String, Tensor<f32>> = std::collections::BTreeMap::new();
        for (name, t) in tensors {
            if map.insert(name.clone(), t).is_some() {
                return Err(Error::Incompatible(format!("checkpoint repeats tensor {name}")));
            }
        }
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::Incompatible(format!("checkpoint has no tensor {name}")))
        };
        let channels = to_ints(&take(ARCH_CHANNELS)?, ARCH_CHANNELS)?;
        let kp = to_ints(&take(ARCH_KERNEL_POOL)?, ARCH_KERNEL_POOL)?;
        let dims = to_ints(&take(MODEL_DIMS)?, MODEL_DIMS)?;
        let (&[kernel, pool], &[region_h, region_w, embed, hidden, head, classes, steps, cell]) = (&kp[..], &dims[..]) else {
            return Err(Error::Incompatible("checkpoint architecture record has the wrong length".into()));
        };
        let config = ModelConfig {
            backbone: BackboneArch { channels, kernel, pool },
            region_h,
            region_w,
            embed,
            hidden,
            head,
            classes,
            steps,
            cell: CellOutput::from_code(cell as u32).map_err(|e| Error::Incompatible(e.to_string()))?,
        };
        config.validate().map_err(|e| Error::Incompatible(e.to_string()))?;

        let blocks = config.backbone.blocks();
        let mut layers = Vec::with_capacity(blocks);
        for i in 0..blocks {
            layers.push(ConvLayer {
                kernel: take(&format!("backbone.{i}.kernel"))?,
                bias: take(&format!("backbone.{i}.bias"))?,
            });
        }
        let backbone = BackboneWeights {
            arch: config.backbone.clone(),
            layers,
        };
        let att_names = AttentionWeights::<f32>::zeros(config.attention())?.names();
        let att_tensors = att_names.iter().map(|n| take(n)).collect::<Result<Vec<_>>>()?;
        let attention = AttentionWeights::from_tensors(config.attention(), att_tensors)
            .map_err(|e| Error::Incompatible(e.to_string()))?;
        let model = Model {
            config,
            backbone,
            attention,
        };
        model.validate().map_err(|e| Error::Incompatible(e.to_string()))?;

        let adam = match take(ADAM_HYPER) {
            Err(_) => None,
            Ok(h) => {
                let [lr, beta1, beta2, eps] = from_f64_bits(&h, ADAM_HYPER)?[..] else {
                    return Err(Error::Incompatible("adam.hyper must hold four values".into()));
                };
                let step = to_ints(&take(ADAM_STEP)?, ADAM_STEP)?;
                let [hi, lo] = step[..] else {
                    return Err(Error::Incompatible("adam.step must hold two values".into()));
                };
                let names = model.names();
                let mut m = Vec::with_capacity(names.len());
                let mut v = Vec::with_capacity(names.len());
                for (name, p) in names.iter().zip(model.tensors()) {
                    for (store, prefix) in [(&mut m, "adam.m"), (&mut v, "adam.v")] {
                        let t = take(&format!("{prefix}.{name}"))?;
                        if t.shape() != p.shape() {
                            return Err(Error::Incompatible(format!("{prefix}.{name} does not match its parameter shape")));
                        }
                        store.push(t);
                    }
                }
                Some(AdamState {
                    config: AdamConfig {
                        lr,
                        beta1,
                        beta2,
                        eps,
                    },
                    step: ((hi as u64) << 24) | lo as u64,
                    m,
                    v,
                })
            }
        };
        if let Some(extra) = map.keys().next() {
            return Err(Error::Incompatible(format!("checkpoint has unexpected tensor {extra}")));
        }
        Ok(Self { model, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensors(path, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(read_tensors(path)?)
    }
}
