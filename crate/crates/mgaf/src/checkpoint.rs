//! Binary checkpoints for trained CNNs and SVMs.
//!
//! CNN: `MGAFCNN1`, u32 length + UTF-8 `key=value` config block, u64 seed,
//! u32 blob count, then per blob a u64 length and little-endian f64 values.
//! SVM: `MGAFSVM1`, u32 classes, u64 dim, f64 C, then weights (class-major),
//! biases, means and scales as little-endian f64.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mgaf_core::cnn::{CnnConfig, CnnModel, ConvSpec, Padding};
use mgaf_core::svm::SvmModel;
use mgaf_core::tensor::Pooling;

use crate::error::{Context, Error, Result};
use crate::formats::write_bytes;

const CNN_MAGIC: &[u8; 8] = b"MGAFCNN1";
const SVM_MAGIC: &[u8; 8] = b"MGAFSVM1";

struct Reader<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::format(self.path, format!("truncated {what}")));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::format(self.path, format!("{what}: length overflows")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(Error::format(self.path, format!("{} trailing bytes", self.bytes.len())))
        }
    }
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn config_block(c: &CnnConfig) -> String {
    let convs: Vec<String> = c
        .convs
        .iter()
        .map(|s| format!("{}:{}:{}", s.filters, s.kernel, u8::from(s.pool_after)))
        .collect();
    let mut s = String::new();
    let _ = writeln!(s, "input_size={}", c.input_size);
    let _ = writeln!(s, "convs={}", convs.join(","));
    let _ = writeln!(s, "padding={}", if c.padding == Padding::Same { "same" } else { "valid" });
    let _ = writeln!(s, "pooling={}", if c.pooling == Pooling::Average { "average" } else { "max" });
    let _ = writeln!(s, "pool_size={}", c.pool_size);
    let _ = writeln!(s, "pool_stride={}", c.pool_stride);
    let _ = writeln!(s, "fc_width={}", c.fc_width);
    let _ = writeln!(s, "n_classes={}", c.n_classes);
    let _ = writeln!(s, "learning_rate={}", c.learning_rate);
    let _ = writeln!(s, "momentum={}", c.momentum);
    let _ = writeln!(s, "l2={}", c.l2);
    let _ = writeln!(s, "batch_size={}", c.batch_size);
    let _ = writeln!(s, "epochs={}", c.epochs);
    let _ = writeln!(s, "patience={}", c.patience);
    s
}

fn parse_config_block(text: &str, path: &Path) -> Result<CnnConfig> {
    let mut c = CnnConfig::standard(1);
    let bad = |k: &str, v: &str| Error::format(path, format!("bad checkpoint field {k}={v}"));
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("malformed config line '{line}'")))?;
        let num = || v.parse::<usize>().map_err(|_| bad(k, v));
        let real = || v.parse::<f64>().map_err(|_| bad(k, v));
        match k {
            "input_size" => c.input_size = num()?,
            "convs" => {
                c.convs = v
                    .split(',')
                    .map(|spec| {
                        let parts: Vec<&str> = spec.split(':').collect();
                        match parts.as_slice() {
                            [f, k2, p] => Ok(ConvSpec {
                                filters: f.parse().map_err(|_| bad(k, v))?,
                                kernel: k2.parse().map_err(|_| bad(k, v))?,
                                pool_after: *p == "1",
                            }),
                            _ => Err(bad(k, v)),
                        }
                    })
                    .collect::<Result<_>>()?;
            }
            "padding" => {
                c.padding = match v {
                    "same" => Padding::Same,
                    "valid" => Padding::Valid,
                    _ => return Err(bad(k, v)),
                }
            }
            "pooling" => {
                c.pooling = match v {
                    "average" => Pooling::Average,
                    "max" => Pooling::Max,
                    _ => return Err(bad(k, v)),
                }
            }
            "pool_size" => c.pool_size = num()?,
            "pool_stride" => c.pool_stride = num()?,
            "fc_width" => c.fc_width = num()?,
            "n_classes" => c.n_classes = num()?,
            "learning_rate" => c.learning_rate = real()?,
            "momentum" => c.momentum = real()?,
            "l2" => c.l2 = real()?,
            "batch_size" => c.batch_size = num()?,
            "epochs" => c.epochs = num()?,
            "patience" => c.patience = num()?,
            _ => return Err(Error::format(path, format!("unknown checkpoint field '{k}'"))),
        }
    }
    Ok(c)
}

pub fn encode_cnn(model: &CnnModel) -> Vec<u8> {
    let block = config_block(model.config());
    let mut out = Vec::new();
    out.extend_from_slice(CNN_MAGIC);
    out.extend_from_slice(&(block.len() as u32).to_le_bytes());
    out.extend_from_slice(block.as_bytes());
    out.extend_from_slice(&model.seed().to_le_bytes());
    let params = model.parameters();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        push_f64s(&mut out, p);
    }
    out
}

pub fn decode_cnn(bytes: &[u8], path: &Path) -> Result<CnnModel> {
    let mut r = Reader { bytes, path };
    if r.take(8, "magic")? != CNN_MAGIC {
        return Err(Error::format(path, "bad magic, expected MGAFCNN1"));
    }
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config block")?)
        .map_err(|_| Error::format(path, "config block is not UTF-8"))?;
    let config = parse_config_block(text, path)?;
    let seed = r.u64("seed")?;
    let count = r.u32("blob count")? as usize;
    let mut blobs = Vec::with_capacity(count.min(64));
    for i in 0..count {
        let n = r.u64("blob length")? as usize;
        blobs.push(r.f64s(n, &format!("blob {i}"))?);
    }
    r.finish()?;
    CnnModel::from_parameters(config, seed, blobs).context(|| format!("{}", path.display()))
}

pub fn save_cnn(path: &Path, model: &CnnModel) -> Result<()> {
    write_bytes(path, &encode_cnn(model))
}

pub fn load_cnn(path: &Path) -> Result<CnnModel> {
    decode_cnn(&fs::read(path).map_err(|e| Error::io(path, e))?, path)
}

pub fn encode_svm(model: &SvmModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SVM_MAGIC);
    out.extend_from_slice(&(model.n_classes as u32).to_le_bytes());
    out.extend_from_slice(&(model.dim() as u64).to_le_bytes());
    out.extend_from_slice(&model.c.to_le_bytes());
    for w in &model.weights {
        push_f64s(&mut out, w);
    }
    push_f64s(&mut out, &model.bias);
    push_f64s(&mut out, &model.mean);
    push_f64s(&mut out, &model.scale);
    out
}

pub fn decode_svm(bytes: &[u8], path: &Path) -> Result<SvmModel> {
    let mut r = Reader { bytes, path };
    if r.take(8, "magic")? != SVM_MAGIC {
        return Err(Error::format(path, "bad magic, expected MGAFSVM1"));
    }
    let n_classes = r.u32("class count")? as usize;
    let dim = r.u64("dimension")? as usize;
    let c = f64::from_le_bytes(r.take(8, "C")?.try_into().expect("8 bytes"));
    let weights = (0..n_classes)
        .map(|k| r.f64s(dim, &format!("weights of class {k}")))
        .collect::<Result<Vec<_>>>()?;
    let bias = r.f64s(n_classes, "biases")?;
    let mean = r.f64s(dim, "means")?;
    let scale = r.f64s(dim, "scales")?;
    r.finish()?;
    Ok(SvmModel {
        c,
        n_classes,
        weights,
        bias,
        mean,
        scale,
    })
}

pub fn save_svm(path: &Path, model: &SvmModel) -> Result<()> {
    write_bytes(path, &encode_svm(model))
}

pub fn load_svm(path: &Path) -> Result<SvmModel> {
    decode_svm(&fs::read(path).map_err(|e| Error::io(path, e))?, path)
}
