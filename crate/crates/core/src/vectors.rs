//! Task-vector extraction, submodule addressing, and principal-subspace
//! orthogonality analysis.
//!
//! A task vector holds per-submodule weight deltas Δ = θ_task − θ_base over
//! the merged kinds (Q, K, V, O, FFN_in, FFN_out) only; biases, norms,
//! embeddings, and the lm head never carry a delta. Deltas live in f64 so
//! that extract followed by apply reproduces the task weights bit-exactly
//! after storage rounding.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, Mat};
use crate::nanoformer::CaptureSite;
use crate::tensorstore::{self, Checkpoint, ModelConfig, Tensor};

pub const RMTV_MAGIC: &[u8; 6] = b"RMTV1\n";

/// One merged weight matrix kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmoduleKind {
    Q,
    K,
    V,
    O,
    FfnIn,
    FfnOut,
}

impl SubmoduleKind {
    pub const ALL: [SubmoduleKind; 6] = [
        SubmoduleKind::Q,
        SubmoduleKind::K,
        SubmoduleKind::V,
        SubmoduleKind::O,
        SubmoduleKind::FfnIn,
        SubmoduleKind::FfnOut,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            SubmoduleKind::Q => "q",
            SubmoduleKind::K => "k",
            SubmoduleKind::V => "v",
            SubmoduleKind::O => "o",
            SubmoduleKind::FfnIn => "ffn_in",
            SubmoduleKind::FfnOut => "ffn_out",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.tag() == tag)
    }

    /// Canonical checkpoint tensor name for this kind at a layer.
    pub fn tensor_name(&self, layer: usize) -> String {
        match self {
            SubmoduleKind::Q => format!("layer.{layer}.attn.wq"),
            SubmoduleKind::K => format!("layer.{layer}.attn.wk"),
            SubmoduleKind::V => format!("layer.{layer}.attn.wv"),
            SubmoduleKind::O => format!("layer.{layer}.attn.wo"),
            SubmoduleKind::FfnIn => format!("layer.{layer}.ffn.win"),
            SubmoduleKind::FfnOut => format!("layer.{layer}.ffn.wout"),
        }
    }

    /// Capture site of the input feature this kind's weight multiplies.
    pub fn capture_site(&self) -> CaptureSite {
        match self {
            SubmoduleKind::Q | SubmoduleKind::K | SubmoduleKind::V => CaptureSite::AttnIn,
            SubmoduleKind::O => CaptureSite::AttnOIn,
            SubmoduleKind::FfnIn => CaptureSite::FfnIn,
            SubmoduleKind::FfnOut => CaptureSite::FfnAct,
        }
    }

    /// (d_out, d_in) of the weight matrix.
    pub fn dims(&self, config: &ModelConfig) -> (usize, usize) {
        let d = config.d_model;
        match self {
            SubmoduleKind::FfnIn => (config.d_ff, d),
            SubmoduleKind::FfnOut => (d, config.d_ff),
            _ => (d, d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubmoduleId {
    pub layer: usize,
    pub kind: SubmoduleKind,
}

impl SubmoduleId {
    pub fn new(layer: usize, kind: SubmoduleKind) -> Self {
        SubmoduleId { layer, kind }
    }

    /// Every merged submodule of a config, in (layer, kind) order.
    pub fn enumerate(config: &ModelConfig) -> Vec<SubmoduleId> {
        (0..config.n_layers)
            .flat_map(|layer| {
                SubmoduleKind::ALL
                    .iter()
                    .map(move |&kind| SubmoduleId { layer, kind })
            })
            .collect()
    }
}

impl std::fmt::Display for SubmoduleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "layer.{}.{}", self.layer, self.kind.tag())
    }
}

/// Per-submodule weight delta in f64.
#[derive(Debug, Clone)]
pub struct TaskVector {
    pub config: ModelConfig,
    pub deltas: BTreeMap<SubmoduleId, Mat>,
}

impl TaskVector {
    pub fn zeros(config: &ModelConfig) -> Self {
        let deltas = SubmoduleId::enumerate(config)
            .into_iter()
            .map(|id| {
                let (r, c) = id.kind.dims(config);
                (id, Mat::zeros(r, c))
            })
            .collect();
        TaskVector {
            config: config.clone(),
            deltas,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ids = SubmoduleId::enumerate(&self.config);
        if self.deltas.len() != ids.len() {
            return Err(Error::SchemaMismatch(format!(
                "task vector has {} submodules, expected {}",
                self.deltas.len(),
                ids.len()
            )));
        }
        for id in ids {
            let (r, c) = id.kind.dims(&self.config);
            let m = self
                .deltas
                .get(&id)
                .ok_or_else(|| Error::SchemaMismatch(format!("missing delta {id}")))?;
            if m.rows != r || m.cols != c {
                return Err(Error::SchemaMismatch(format!(
                    "delta {id}: {}x{} != schema {r}x{c}",
                    m.rows, m.cols
                )));
            }
        }
        Ok(())
    }

    pub fn delta(&self, id: &SubmoduleId) -> Result<&Mat> {
        self.deltas
            .get(id)
            .ok_or_else(|| Error::SchemaMismatch(format!("missing delta {id}")))
    }
}

fn check_config_match(a: &ModelConfig, b: &ModelConfig) -> Result<()> {
    if a != b {
        return Err(Error::ConfigMismatch(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Δ = θ_task − θ_base over the merged kinds, element-wise in f64.
pub fn extract_task_vector(task: &Checkpoint, base: &Checkpoint) -> Result<TaskVector> {
    check_config_match(&task.config, &base.config)?;
    let mut deltas = BTreeMap::new();
    for id in SubmoduleId::enumerate(&task.config) {
        let name = id.kind.tensor_name(id.layer);
        let t = task.tensor(&name)?.to_mat();
        let mut d = t;
        d.add_scaled(&base.tensor(&name)?.to_mat(), -1.0);
        deltas.insert(id, d);
    }
    Ok(TaskVector {
        config: task.config.clone(),
        deltas,
    })
}

/// merged = anchor + scale·Δ on covered kinds; everything else copied from
/// the anchor. Arithmetic in f64, rounded to storage dtype.
pub fn apply_delta(anchor: &Checkpoint, tv: &TaskVector, scale: f64) -> Result<Checkpoint> {
    check_config_match(&anchor.config, &tv.config)?;
    tv.validate()?;
    let mut out = anchor.clone();
    out.provenance = None;
    for (id, delta) in &tv.deltas {
        let name = id.kind.tensor_name(id.layer);
        let mut w = anchor.tensor(&name)?.to_mat();
        w.add_scaled(delta, scale);
        if !w.is_finite() {
            return Err(Error::NonFinite(format!("merged tensor {name}")));
        }
        *out.tensor_mut(&name)? = Tensor::from_mat(&w)?;
    }
    Ok(out)
}

/// Similarity entry for one submodule.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SubspaceEntry {
    /// Mean cosine of principal angles between the top-S left subspaces.
    pub mean_cosine: f64,
    /// S after truncation to the effective ranks of both deltas.
    pub rank_used: usize,
}

#[derive(Debug, Clone)]
pub struct SubspaceReport {
    /// Requested subspace dimension S.
    pub rank_s: usize,
    pub entries: BTreeMap<SubmoduleId, SubspaceEntry>,
    /// Submodules skipped because one delta was all-zero.
    pub skipped: Vec<SubmoduleId>,
}

impl SubspaceReport {
    /// Flat table rows (layer, kind, mean_cosine, rank_used) in id order.
    pub fn rows(&self) -> Vec<(usize, &'static str, f64, usize)> {
        self.entries
            .iter()
            .map(|(id, e)| (id.layer, id.kind.tag(), e.mean_cosine, e.rank_used))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,mean_cosine,rank_used\n");
        for (layer, kind, cos, rank) in self.rows() {
            s.push_str(&format!("{layer},{kind},{cos},{rank}\n"));
        }
        s
    }

    /// Flat-table JSON mirroring the CSV columns.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "rank_s": self.rank_s,
            "rows": self
                .rows()
                .iter()
                .map(|(layer, kind, cos, rank)| serde_json::json!({
                    "layer": layer,
                    "kind": kind,
                    "mean_cosine": cos,
                    "rank_used": rank,
                }))
                .collect::<Vec<_>>(),
            "skipped": self.skipped.iter().map(|id| id.to_string()).collect::<Vec<_>>(),
        })
    }
}

/// Default subspace dimension; clamped to the matrix dimensions at toy scale.
pub const DEFAULT_SUBSPACE_S: usize = 16;

/// Effective numerical rank: singular values above 1e-10·σ_max.
fn effective_rank(sigma: &[f64]) -> usize {
    let smax = sigma.first().copied().unwrap_or(0.0);
    if smax <= 0.0 {
        return 0;
    }
    sigma.iter().filter(|&&s| s > 1e-10 * smax).count()
}

/// Mean cosine of principal angles between the top-S left singular subspaces
/// of two equally shaped deltas, per submodule.
pub fn principal_subspace_similarity(
    a: &TaskVector,
    b: &TaskVector,
    s: usize,
) -> Result<SubspaceReport> {
    check_config_match(&a.config, &b.config)?;
    if s == 0 {
        return Err(Error::InvalidArgument("S must be >= 1".into()));
    }
    let mut entries = BTreeMap::new();
    let mut skipped = Vec::new();
    for id in SubmoduleId::enumerate(&a.config) {
        let da = a.delta(&id)?;
        let db = b.delta(&id)?;
        if da.frob_norm() == 0.0 || db.frob_norm() == 0.0 {
            skipped.push(id);
            continue;
        }
        let (ua, sa, _) = svd(da)?;
        let (ub, sb, _) = svd(db)?;
        let cap = s.min(da.rows).min(da.cols);
        let rank_used = cap.min(effective_rank(&sa)).min(effective_rank(&sb));
        if rank_used == 0 {
            skipped.push(id);
            continue;
        }
        let mean_cosine = mean_principal_cosine(&ua, &ub, rank_used)?;
        entries.insert(
            id,
            SubspaceEntry {
                mean_cosine,
                rank_used,
            },
        );
    }
    Ok(SubspaceReport {
        rank_s: s,
        entries,
        skipped,
    })
}

/// Mean singular value of U_aᵀU_b over the leading `s` columns of each basis.
pub fn mean_principal_cosine(ua: &Mat, ub: &Mat, s: usize) -> Result<f64> {
    if ua.rows != ub.rows {
        return Err(Error::DimensionMismatch(format!(
            "bases live in different spaces: {} vs {}",
            ua.rows, ub.rows
        )));
    }
    let mut align = Mat::zeros(s, s);
    for i in 0..s {
        let ci = ua.col(i);
        for j in 0..s {
            align.set(i, j, crate::linalg::dot(&ci, &ub.col(j)));
        }
    }
    let (_, sigma, _) = svd(&align)?;
    let mean = sigma.iter().take(s).sum::<f64>() / s as f64;
    Ok(mean.clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// Task-vector container (RMTV): f64 payload so stage artifacts roundtrip
// bit-exactly between pipeline commands.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TvEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TvManifest {
    config: ModelConfig,
    entries: Vec<TvEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

pub fn write_task_vector(
    path: &Path,
    tv: &TaskVector,
    mode: Option<&str>,
    provenance: Option<serde_json::Value>,
) -> Result<()> {
    tv.validate()?;
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0u64;
    for (id, m) in &tv.deltas {
        let len = (m.data.len() * 8) as u64;
        entries.push(TvEntry {
            name: format!("delta.layer.{}.{}", id.layer, id.kind.tag()),
            rows: m.rows,
            cols: m.cols,
            offset,
            len,
        });
        for v in &m.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += len;
    }
    let manifest = TvManifest {
        config: tv.config.clone(),
        entries,
        mode: mode.map(|s| s.to_string()),
        provenance,
    };
    tensorstore::write_container(path, RMTV_MAGIC, &serde_json::to_vec(&manifest)?, &payload)
}

pub fn read_task_vector(path: &Path) -> Result<(TaskVector, Option<String>)> {
    let bytes = std::fs::read(path)?;
    let (manifest, payload) = tensorstore::split_container(&bytes, RMTV_MAGIC)?;
    let manifest: TvManifest = serde_json::from_slice(manifest)?;
    manifest.config.validate()?;
    let mut deltas = BTreeMap::new();
    for e in &manifest.entries {
        let id = parse_delta_name(&e.name)?;
        let n = e.rows * e.cols;
        if e.len != (n * 8) as u64 {
            return Err(Error::Format(format!(
                "delta {}: len {} disagrees with {}x{}",
                e.name, e.len, e.rows, e.cols
            )));
        }
        let start = e.offset as usize;
        let end = start + e.len as usize;
        if end > payload.len() {
            return Err(Error::Format(format!("delta {} overruns payload", e.name)));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(e.name.clone()));
        }
        deltas.insert(
            id,
            Mat {
                rows: e.rows,
                cols: e.cols,
                data,
            },
        );
    }
    let tv = TaskVector {
        config: manifest.config,
        deltas,
    };
    tv.validate()?;
    Ok((tv, manifest.mode))
}

fn parse_delta_name(name: &str) -> Result<SubmoduleId> {
    let rest = name
        .strip_prefix("delta.layer.")
        .ok_or_else(|| Error::Format(format!("bad delta name {name}")))?;
    let (layer, kind) = rest
        .split_once('.')
        .ok_or_else(|| Error::Format(format!("bad delta name {name}")))?;
    let layer: usize = layer
        .parse()
        .map_err(|_| Error::Format(format!("bad layer in {name}")))?;
    let kind = SubmoduleKind::from_tag(kind)
        .ok_or_else(|| Error::Format(format!("bad kind in {name}")))?;
    Ok(SubmoduleId { layer, kind })
}
