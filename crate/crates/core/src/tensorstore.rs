//! Bit-exact checkpoint persistence (RMCK container) and architecture
//! configuration validation.
//!
//! Layout: `b"RMCK1\n"`, an 8-byte little-endian manifest length, a UTF-8
//! JSON manifest (config, tensor table, optional provenance), then packed
//! row-major little-endian f32 payloads in manifest order with no padding.
//! Storage dtype is f32; merge arithmetic elsewhere runs in f64 and rounds
//! on write.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const RMCK_MAGIC: &[u8; 6] = b"RMCK1\n";

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::DimensionMismatch(format!(
                "zero dimension in shape {shape:?}"
            )));
        }
        if data.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor with shape {shape:?}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// View a 2-d tensor as an f64 matrix.
    pub fn to_mat(&self) -> Mat {
        assert_eq!(self.shape.len(), 2, "to_mat needs a 2-d tensor");
        Mat {
            rows: self.shape[0],
            cols: self.shape[1],
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }

    /// Round an f64 matrix to storage dtype.
    pub fn from_mat(m: &Mat) -> Result<Self> {
        let data: Vec<f32> = m.data.iter().map(|&v| v as f32).collect();
        Tensor::new(vec![m.rows, m.cols], data)
    }
}

/// Decoder-only transformer dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub norm_eps: f64,
}

impl ModelConfig {
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        d_ff: usize,
        vocab_size: usize,
        max_seq: usize,
    ) -> Result<Self> {
        let cfg = ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_head: if n_heads == 0 { 0 } else { d_model / n_heads },
            d_ff,
            vocab_size,
            max_seq,
            norm_eps: 1e-5,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_head != self.d_model / self.n_heads {
            return Err(Error::InvalidArgument(format!(
                "d_head {} != d_model/n_heads {}",
                self.d_head,
                self.d_model / self.n_heads
            )));
        }
        if !(self.norm_eps > 0.0) || !self.norm_eps.is_finite() {
            return Err(Error::InvalidArgument("norm_eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Deterministic enumeration of every tensor name and shape for a config.
pub fn canonical_schema(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let f = config.d_ff;
    let mut out = Vec::with_capacity(config.n_layers * 12 + 5);
    out.push(("embed.tok".into(), vec![config.vocab_size, d]));
    out.push(("embed.pos".into(), vec![config.max_seq, d]));
    for i in 0..config.n_layers {
        out.push((format!("layer.{i}.ln1.gamma"), vec![d]));
        out.push((format!("layer.{i}.ln1.beta"), vec![d]));
        out.push((format!("layer.{i}.attn.wq"), vec![d, d]));
        out.push((format!("layer.{i}.attn.wk"), vec![d, d]));
        out.push((format!("layer.{i}.attn.wv"), vec![d, d]));
        out.push((format!("layer.{i}.attn.wo"), vec![d, d]));
        out.push((format!("layer.{i}.ln2.gamma"), vec![d]));
        out.push((format!("layer.{i}.ln2.beta"), vec![d]));
        out.push((format!("layer.{i}.ffn.win"), vec![f, d]));
        out.push((format!("layer.{i}.ffn.bin"), vec![f]));
        out.push((format!("layer.{i}.ffn.wout"), vec![d, f]));
        out.push((format!("layer.{i}.ffn.bout"), vec![d]));
    }
    out.push(("final_ln.gamma".into(), vec![d]));
    out.push(("final_ln.beta".into(), vec![d]));
    out.push(("lmhead.w".into(), vec![config.vocab_size, d]));
    out
}

/// Validated checkpoint: config plus the exact canonical tensor set.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
    /// Recipe or pipeline config that produced this checkpoint, if any.
    pub provenance: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let ckpt = Checkpoint {
            config,
            tensors,
            provenance: None,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// All-zero checkpoint for a config.
    pub fn zeros(config: ModelConfig) -> Self {
        let tensors = canonical_schema(&config)
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(shape)))
            .collect();
        Checkpoint {
            config,
            tensors,
            provenance: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let schema = canonical_schema(&self.config);
        if self.tensors.len() != schema.len() {
            return Err(Error::SchemaMismatch(format!(
                "expected {} tensors, found {}",
                schema.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in &schema {
            match self.tensors.get(name) {
                None => {
                    return Err(Error::SchemaMismatch(format!("missing tensor {name}")));
                }
                Some(t) => {
                    if &t.shape != shape {
                        return Err(Error::SchemaMismatch(format!(
                            "tensor {name}: shape {:?} != schema {:?}",
                            t.shape, shape
                        )));
                    }
                    if !t.data.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFinite(name.clone()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::SchemaMismatch(format!("missing tensor {name}")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::SchemaMismatch(format!("missing tensor {name}")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<ManifestEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.validate()?;
    let schema = canonical_schema(&ckpt.config);
    let mut entries = Vec::with_capacity(schema.len());
    let mut offset = 0u64;
    for (name, _) in &schema {
        let t = &ckpt.tensors[name];
        let len = (t.len() * 4) as u64;
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            offset,
            len,
        });
        offset += len;
    }
    let manifest = Manifest {
        config: ckpt.config.clone(),
        tensors: entries,
        provenance: ckpt.provenance.clone(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut buf =
        Vec::with_capacity(RMCK_MAGIC.len() + 8 + manifest_bytes.len() + offset as usize);
    buf.extend_from_slice(RMCK_MAGIC);
    buf.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest_bytes);
    for (name, _) in &schema {
        for v in &ckpt.tensors[name].data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let (manifest, payload) = split_container(&bytes, RMCK_MAGIC)?;
    let manifest: Manifest = serde_json::from_slice(manifest)?;
    manifest.config.validate()?;

    // Verify the tensor table before touching any payload bytes.
    let mut expect_offset = 0u64;
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.len != (n * 4) as u64 {
            return Err(Error::Format(format!(
                "tensor {}: manifest len {} disagrees with shape {:?}",
                e.name, e.len, e.shape
            )));
        }
        if e.offset != expect_offset {
            return Err(Error::Format(format!(
                "tensor {}: offset {} should be {expect_offset} (packed, no padding)",
                e.name, e.offset
            )));
        }
        expect_offset += e.len;
    }
    if payload.len() as u64 != expect_offset {
        return Err(Error::Format(format!(
            "payload is {} bytes, manifest claims {expect_offset}",
            payload.len()
        )));
    }

    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let start = e.offset as usize;
        let end = start + e.len as usize;
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(e.name.clone()));
        }
        let t = Tensor::new(e.shape.clone(), data)?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {}", e.name)));
        }
    }
    let mut ckpt = Checkpoint::new(manifest.config, tensors)?;
    ckpt.provenance = manifest.provenance;
    Ok(ckpt)
}

/// Split a container into (manifest bytes, payload bytes) after checking the
/// magic and manifest length. Shared by the RMCK/RMGF/RMPJ/RMTV readers.
pub(crate) fn split_container<'a>(bytes: &'a [u8], magic: &[u8; 6]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < magic.len() + 8 {
        return Err(Error::Format("file too short for header".into()));
    }
    if &bytes[..magic.len()] != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}",
            String::from_utf8_lossy(magic).trim_end()
        )));
    }
    let len_bytes: [u8; 8] = bytes[magic.len()..magic.len() + 8].try_into().unwrap();
    let mlen = u64::from_le_bytes(len_bytes) as usize;
    let mstart = magic.len() + 8;
    let mend = mstart
        .checked_add(mlen)
        .ok_or_else(|| Error::Format("manifest length overflows".into()))?;
    if bytes.len() < mend {
        return Err(Error::Format(format!(
            "truncated manifest: want {mlen} bytes, file has {}",
            bytes.len() - mstart
        )));
    }
    Ok((&bytes[mstart..mend], &bytes[mend..]))
}

/// Write a generic container (used for gram stores, projectors, and task
/// vectors) with an arbitrary manifest and raw payload.
pub(crate) fn write_container(
    path: &Path,
    magic: &[u8; 6],
    manifest: &[u8],
    payload: &[u8],
) -> Result<()> {
    let mut buf = Vec::with_capacity(magic.len() + 8 + manifest.len() + payload.len());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    buf.extend_from_slice(manifest);
    buf.extend_from_slice(payload);
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> ModelConfig {
        ModelConfig::new(1, 2, 8, 16, 32, 64).unwrap()
    }

    #[test]
    fn schema_contains_expected_entries() {
        let schema = canonical_schema(&toy_config());
        let find = |name: &str| schema.iter().find(|(n, _)| n == name).map(|(_, s)| s);
        assert_eq!(find("layer.0.attn.wq"), Some(&vec![8, 8]));
        assert_eq!(find("layer.0.ffn.win"), Some(&vec![16, 8]));
        assert_eq!(find("layer.0.ffn.bin"), Some(&vec![16]));
        assert_eq!(find("embed.tok"), Some(&vec![32, 8]));
        assert_eq!(find("lmhead.w"), Some(&vec![32, 8]));
    }

    #[test]
    fn schema_counts_scale_with_layers() {
        let one = canonical_schema(&toy_config()).len();
        let two = canonical_schema(&ModelConfig::new(2, 2, 8, 16, 32, 64).unwrap()).len();
        // 12 per-layer names plus embed.tok, embed.pos, final_ln.gamma,
        // final_ln.beta, lmhead.w.
        assert_eq!(one, 12 + 5);
        assert_eq!(two, 2 * 12 + 5);
    }

    #[test]
    fn zero_checkpoint_validates_and_names_are_unique() {
        let ckpt = Checkpoint::zeros(toy_config());
        ckpt.validate().unwrap();
        let schema = canonical_schema(&ckpt.config);
        let mut names: Vec<&str> = schema.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), schema.len());
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        assert!(ModelConfig::new(1, 3, 8, 16, 32, 64).is_err());
    }

    #[test]
    fn tensor_rejects_nan_and_bad_shape() {
        assert!(Tensor::new(vec![2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::new(vec![3], vec![1.0, 2.0]).is_err());
    }
}
