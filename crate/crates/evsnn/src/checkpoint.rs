//! `SEW1` parameter checkpoints.
//!
//! Layout (little-endian): magic `SEW1`; `u32` manifest length and that many
//! bytes of `key=value` lines; `u32` tensor count; per tensor a `u32` name
//! length, the UTF-8 name, a `u32` rank, `rank` `u32` dims and the values as
//! `f32`. The manifest of a model checkpoint records the model configuration
//! and which parameter prefix belongs to which sub-network.

use std::fs;
use std::path::Path;

use evsnn_core::descriptor::{Model, ModelConfig, CDA_PREFIX, MCS_PREFIX, SMLP_PREFIX, TSS_PREFIX};
use evsnn_core::snn::lif::LifParams;
use evsnn_core::Tensor;

use crate::error::{Error, Result};

pub const SEW_MAGIC: &[u8; 4] = b"SEW1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub manifest: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.manifest.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(SEW_MAGIC);
        let manifest: String = self.manifest.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_u32(&mut out, manifest.len());
        out.extend_from_slice(manifest.as_bytes());
        put_u32(&mut out, self.tensors.len());
        for t in &self.tensors {
            put_u32(&mut out, t.name.len());
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.shape.len());
            for &d in &t.shape {
                put_u32(&mut out, d);
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { path, bytes, pos: 0 };
        if r.take(4)? != SEW_MAGIC {
            return Err(Error::format(path, "offset 0", "missing SEW1 header"));
        }
        let mlen = r.u32()?;
        let text = std::str::from_utf8(r.take(mlen)?).map_err(|_| r.err("manifest is not UTF-8"))?;
        let mut manifest = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| r.err(format!("bad manifest line {line:?}")))?;
            manifest.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u32()?;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| r.err("name is not UTF-8"))?.to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.err("shape overflows"))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.err("shape overflows"))?)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(NamedTensor { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(path, &bytes)
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, format!("offset {}", self.pos), msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("unexpected end of file"));
        }
        let bytes: &'a [u8] = self.bytes;
        let s = &bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

fn config_manifest(c: &ModelConfig) -> Vec<(String, String)> {
    let kv = |k: &str, v: String| (k.to_string(), v);
    vec![
        kv("format", "evsnn-model".into()),
        kv("model.steps", c.steps.to_string()),
        kv("model.scale", format!("{:?}", c.scale)),
        kv("model.smlp_hidden", c.smlp_hidden.to_string()),
        kv("model.cda_hidden", c.cda_hidden.to_string()),
        kv("model.eta_s", format!("{:?}", c.eta_s)),
        kv("lif.v_threshold", format!("{:?}", c.lif.v_threshold)),
        kv("lif.decay", format!("{:?}", c.lif.decay)),
        kv("lif.alpha", format!("{:?}", c.lif.alpha)),
        kv("lif.detach_reset", c.lif.detach_reset.to_string()),
        kv("subnet.smlp", SMLP_PREFIX.into()),
        kv("subnet.sr13_mcs", MCS_PREFIX.into()),
        kv("subnet.sr13_tss", TSS_PREFIX.into()),
        kv("subnet.cda", CDA_PREFIX.into()),
    ]
}

fn parse_config(path: &Path, ck: &Checkpoint) -> Result<ModelConfig> {
    fn field<T: std::str::FromStr>(path: &Path, ck: &Checkpoint, key: &str) -> Result<T> {
        let v = ck.get(key).ok_or_else(|| Error::format(path, "manifest", format!("missing {key}")))?;
        v.parse().map_err(|_| Error::format(path, "manifest", format!("bad {key}={v}")))
    }
    if ck.get("format") != Some("evsnn-model") {
        return Err(Error::format(path, "manifest", "not a model checkpoint"));
    }
    Ok(ModelConfig {
        steps: field(path, ck, "model.steps")?,
        scale: field(path, ck, "model.scale")?,
        smlp_hidden: field(path, ck, "model.smlp_hidden")?,
        cda_hidden: field(path, ck, "model.cda_hidden")?,
        eta_s: field(path, ck, "model.eta_s")?,
        lif: LifParams {
            v_threshold: field(path, ck, "lif.v_threshold")?,
            decay: field(path, ck, "lif.decay")?,
            alpha: field(path, ck, "lif.alpha")?,
            detach_reset: field(path, ck, "lif.detach_reset")?,
        },
    })
}

/// Snapshot a model; values are rounded to `f32`.
pub fn model_checkpoint(model: &Model) -> Checkpoint {
    let tensors = model
        .store
        .entries()
        .iter()
        .map(|e| NamedTensor {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            values: e.value.data().iter().map(|&v| v as f32).collect(),
        })
        .collect();
    Checkpoint { manifest: config_manifest(&model.config), tensors }
}

/// Rebuild a model: the manifest fixes the architecture, tensors must match
/// it by name and shape in registration order.
pub fn model_from_checkpoint(path: &Path, ck: &Checkpoint) -> Result<Model> {
    let config = parse_config(path, ck)?;
    let mut model = Model::new(config, 0).map_err(|e| Error::format(path, "manifest", e.to_string()))?;
    if ck.tensors.len() != model.store.len() {
        return Err(Error::format(
            path,
            "tensors",
            format!("expected {} tensors, found {}", model.store.len(), ck.tensors.len()),
        ));
    }
    for (i, t) in ck.tensors.iter().enumerate() {
        let expected = &model.store.entries()[i].name;
        if &t.name != expected {
            return Err(Error::format(path, format!("tensor {i}"), format!("expected {expected}, found {}", t.name)));
        }
        let value = Tensor::from_vec(&t.shape, t.values.iter().map(|&v| v as f64).collect())
            .map_err(|e| Error::format(path, format!("tensor {}", t.name), e.to_string()))?;
        model
            .store
            .assign(&t.name, value)
            .map_err(|e| Error::format(path, format!("tensor {}", t.name), e.to_string()))?;
    }
    Ok(model)
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    model_checkpoint(model).save(path)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let ck = Checkpoint::load(path)?;
    model_from_checkpoint(path, &ck)
}
