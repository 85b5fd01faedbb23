//! Stage 1: accumulate input-feature Grams at thinking-token positions and
//! project the instruction task vector onto their null space.
//!
//! Per capture point the store keeps K = Σ_t h_t h_tᵀ in f64. The exact
//! projector eigendecomposes K and removes the span of eigenvectors above
//! tol·λ_max, so Δ·P annihilates every calibration feature; under the
//! Kronecker structure Φ = H ⊗ I this right-multiplication equals applying
//! the full vec-space projector. The ridge variant P = (K + I)⁻¹ is the
//! damped, non-idempotent form and equals I − Hᵀ(HHᵀ + I)⁻¹H by the
//! Woodbury identity.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::ReasoningSample;
use crate::error::{Error, Result};
use crate::linalg::{norm2, sym_eigh, Mat};
use crate::nanoformer::{CaptureSite, CapturePoint, Model};
use crate::tensorstore::{self, Checkpoint, ModelConfig};
use crate::vectors::{SubmoduleId, TaskVector};

pub const RMGF_MAGIC: &[u8; 6] = b"RMGF1\n";
pub const RMPJ_MAGIC: &[u8; 6] = b"RMPJ1\n";

/// Accumulated feature Grams per capture point.
#[derive(Debug, Clone)]
pub struct FeatureGramStore {
    pub config: ModelConfig,
    pub grams: BTreeMap<CapturePoint, Mat>,
    pub counts: BTreeMap<CapturePoint, u64>,
}

impl FeatureGramStore {
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut grams = BTreeMap::new();
        let mut counts = BTreeMap::new();
        for layer in 0..config.n_layers {
            for site in CaptureSite::ALL {
                let d = site.dim(config);
                grams.insert(CapturePoint::new(layer, site), Mat::zeros(d, d));
                counts.insert(CapturePoint::new(layer, site), 0);
            }
        }
        FeatureGramStore {
            config: config.clone(),
            grams,
            counts,
        }
    }

    /// Matrix addition of partial stores; associative and commutative.
    pub fn merge(&mut self, other: &FeatureGramStore) {
        for (point, gram) in &mut self.grams {
            gram.add_scaled(&other.grams[point], 1.0);
        }
        for (point, count) in &mut self.counts {
            *count += other.counts[point];
        }
    }
}

/// Positions contributing to the Gram: each thinking index plus a window of
/// `radius` positions on either side, clamped to the sequence.
fn gram_positions(sample: &ReasoningSample, radius: usize) -> Result<BTreeSet<usize>> {
    let len = sample.tokens.len();
    let mut positions = BTreeSet::new();
    for &t in &sample.think_positions {
        if t >= len {
            return Err(Error::IndexOutOfRange {
                index: t,
                context: format!("think position in sample of length {len}"),
            });
        }
        let lo = t.saturating_sub(radius);
        let hi = (t + radius).min(len - 1);
        positions.extend(lo..=hi);
    }
    Ok(positions)
}

/// Run the anchor model over the reasoning set and accumulate h_t h_tᵀ at
/// every capture point for each thinking position (optionally widened by
/// `window_radius`). Samples are processed in fixed chunks folded in order,
/// so results are identical for any worker count.
pub fn collect_think_grams(
    anchor: &Checkpoint,
    reasoning_set: &[ReasoningSample],
    window_radius: usize,
) -> Result<FeatureGramStore> {
    if reasoning_set.is_empty() {
        return Err(Error::EmptySet("no reasoning samples".into()));
    }
    let model = Model::new(anchor)?;
    let config = model.config.clone();
    for sample in reasoning_set {
        gram_positions(sample, window_radius)?;
    }

    use rayon::prelude::*;
    let partials: Vec<Result<FeatureGramStore>> = reasoning_set
        .par_chunks(8)
        .map(|chunk| {
            let mut store = FeatureGramStore::zeros(&config);
            for sample in chunk {
                let positions = gram_positions(sample, window_radius)?;
                if positions.is_empty() {
                    continue;
                }
                let trace = model.forward(&sample.tokens, &CaptureSite::ALL, false)?;
                for (point, feats) in &trace.features {
                    let gram = store.grams.get_mut(point).expect("point exists");
                    for &t in &positions {
                        gram.rank1_update(&feats[t], &feats[t], 1.0);
                    }
                    *store.counts.get_mut(point).unwrap() += positions.len() as u64;
                }
            }
            Ok(store)
        })
        .collect();

    let mut total = FeatureGramStore::zeros(&config);
    for p in partials {
        total.merge(&p?);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectorMode {
    Exact,
    Ridge,
}

impl ProjectorMode {
    pub fn tag(&self) -> &'static str {
        match self {
            ProjectorMode::Exact => "exact",
            ProjectorMode::Ridge => "ridge",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "exact" => Some(ProjectorMode::Exact),
            "ridge" => Some(ProjectorMode::Ridge),
            _ => None,
        }
    }
}

/// Per-capture-point input-side projector P_in.
#[derive(Debug, Clone)]
pub struct Projector {
    pub config: ModelConfig,
    pub mode: ProjectorMode,
    pub tol: f64,
    pub mats: BTreeMap<CapturePoint, Mat>,
}

/// Build per-point projectors from accumulated Grams.
///
/// Exact mode: eigendecompose K = VΛVᵀ, keep the r eigenvectors with
/// λ > tol·λ_max, and set P = I − V_r V_rᵀ. Ridge mode: P = (K + I)⁻¹ via
/// the same eigenbasis.
pub fn build_projector(
    store: &FeatureGramStore,
    mode: ProjectorMode,
    tol: f64,
) -> Result<Projector> {
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(Error::InvalidArgument("tol must be a positive number".into()));
    }
    let mut mats = BTreeMap::new();
    for (point, gram) in &store.grams {
        let d = gram.rows;
        let (vals, vecs) = sym_eigh(gram)?;
        let trace: f64 = (0..d).map(|i| gram.get(i, i)).sum();
        if let Some(&min) = vals.last() {
            if min < -1e-9 * trace.max(1.0) {
                return Err(Error::NotPsd(format!(
                    "gram at layer {} site {} has eigenvalue {min:.3e}",
                    point.layer,
                    point.site.tag()
                )));
            }
        }
        let lambda_max = vals.first().copied().unwrap_or(0.0).max(0.0);
        let p = match mode {
            ProjectorMode::Exact => {
                if lambda_max <= 0.0 {
                    Mat::identity(d)
                } else {
                    let r = vals.iter().filter(|&&l| l > tol * lambda_max).count();
                    let mut p = Mat::identity(d);
                    for j in 0..r {
                        let col = vecs.col(j);
                        p.rank1_update(&col, &col, -1.0);
                    }
                    p
                }
            }
            ProjectorMode::Ridge => {
                let mut p = Mat::zeros(d, d);
                for j in 0..d {
                    let col = vecs.col(j);
                    let weight = 1.0 / (1.0 + vals[j].max(0.0));
                    p.rank1_update(&col, &col, weight);
                }
                p
            }
        };
        mats.insert(*point, p);
    }
    Ok(Projector {
        config: store.config.clone(),
        mode,
        tol,
        mats,
    })
}

/// Task vector plus the projector mode that produced it.
#[derive(Debug, Clone)]
pub struct ProjectedTaskVector {
    pub tv: TaskVector,
    pub mode: ProjectorMode,
}

/// Δ⊥_k = Δ_k · P_in(capture(k)). Q, K, V share the attn_in projector; O
/// uses attn_o_in; FFN_in uses ffn_in; FFN_out uses ffn_act.
pub fn project_task_vector(tv: &TaskVector, proj: &Projector) -> Result<ProjectedTaskVector> {
    if tv.config != proj.config {
        return Err(Error::ConfigMismatch(
            "task vector and projector configs differ".into(),
        ));
    }
    tv.validate()?;
    let mut out = tv.clone();
    for (id, delta) in &tv.deltas {
        let point = CapturePoint::new(id.layer, id.kind.capture_site());
        let p = proj
            .mats
            .get(&point)
            .ok_or_else(|| Error::DimensionMismatch(format!("no projector for {id}")))?;
        if p.rows != delta.cols {
            return Err(Error::DimensionMismatch(format!(
                "projector dim {} vs delta input dim {} at {id}",
                p.rows, delta.cols
            )));
        }
        out.deltas.insert(*id, delta.matmul(p));
    }
    Ok(ProjectedTaskVector {
        tv: out,
        mode: proj.mode,
    })
}

/// Relative annihilation residual per capture point:
/// max over thinking positions t (and kinds sharing the point) of
/// ‖Δ⊥_k h_t‖ / (‖Δ_k h_t‖ + ε).
pub fn verify_annihilation(
    ptv: &ProjectedTaskVector,
    original: &TaskVector,
    anchor: &Checkpoint,
    reasoning_set: &[ReasoningSample],
) -> Result<BTreeMap<CapturePoint, f64>> {
    const EPS: f64 = 1e-30;
    let model = Model::new(anchor)?;
    let config = &model.config;
    let mut residuals: BTreeMap<CapturePoint, f64> = BTreeMap::new();
    for layer in 0..config.n_layers {
        for site in CaptureSite::ALL {
            residuals.insert(CapturePoint::new(layer, site), 0.0);
        }
    }
    for sample in reasoning_set {
        if sample.think_positions.is_empty() {
            continue;
        }
        let trace = model.forward(&sample.tokens, &CaptureSite::ALL, false)?;
        for id in SubmoduleId::enumerate(config) {
            let point = CapturePoint::new(id.layer, id.kind.capture_site());
            let feats = &trace.features[&point];
            let projected = ptv.tv.delta(&id)?;
            let unprojected = original.delta(&id)?;
            let slot = residuals.get_mut(&point).unwrap();
            for &t in &sample.think_positions {
                let h = &feats[t];
                let num = norm2(&projected.matvec(h));
                let den = norm2(&unprojected.matvec(h)) + EPS;
                let ratio = num / den;
                if ratio > *slot {
                    *slot = ratio;
                }
            }
        }
    }
    Ok(residuals)
}

// ---------------------------------------------------------------------------
// Persistence: RMGF (gram store) and RMPJ (projector) containers, f64 payload
// so pipeline stages roundtrip bit-exactly.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct GramEntry {
    name: String,
    dim: usize,
    count: u64,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct GramManifest {
    config: ModelConfig,
    entries: Vec<GramEntry>,
}

fn point_name(prefix: &str, point: &CapturePoint) -> String {
    format!("{prefix}.layer.{}.{}", point.layer, point.site.tag())
}

fn parse_point_name(prefix: &str, name: &str) -> Result<CapturePoint> {
    let rest = name
        .strip_prefix(prefix)
        .and_then(|s| s.strip_prefix(".layer."))
        .ok_or_else(|| Error::Format(format!("bad entry name {name}")))?;
    let (layer, site) = rest
        .split_once('.')
        .ok_or_else(|| Error::Format(format!("bad entry name {name}")))?;
    let layer: usize = layer
        .parse()
        .map_err(|_| Error::Format(format!("bad layer in {name}")))?;
    let site =
        CaptureSite::from_tag(site).ok_or_else(|| Error::Format(format!("bad site in {name}")))?;
    Ok(CapturePoint::new(layer, site))
}

fn mats_payload<'a>(mats: impl Iterator<Item = &'a Mat>) -> Vec<u8> {
    let mut payload = Vec::new();
    for m in mats {
        for v in &m.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    payload
}

fn read_square_mat(payload: &[u8], offset: u64, dim: usize, name: &str) -> Result<Mat> {
    let start = offset as usize;
    let end = start + dim * dim * 8;
    if end > payload.len() {
        return Err(Error::Format(format!("{name} overruns payload")));
    }
    let data: Vec<f64> = payload[start..end]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(name.to_string()));
    }
    Ok(Mat {
        rows: dim,
        cols: dim,
        data,
    })
}

pub fn write_gram_store(path: &Path, store: &FeatureGramStore) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (point, gram) in &store.grams {
        let len = (gram.data.len() * 8) as u64;
        entries.push(GramEntry {
            name: point_name("gram", point),
            dim: gram.rows,
            count: store.counts[point],
            offset,
            len,
        });
        offset += len;
    }
    let manifest = GramManifest {
        config: store.config.clone(),
        entries,
    };
    let payload = mats_payload(store.grams.values());
    tensorstore::write_container(path, RMGF_MAGIC, &serde_json::to_vec(&manifest)?, &payload)
}

pub fn read_gram_store(path: &Path) -> Result<FeatureGramStore> {
    let bytes = std::fs::read(path)?;
    let (manifest, payload) = tensorstore::split_container(&bytes, RMGF_MAGIC)?;
    let manifest: GramManifest = serde_json::from_slice(manifest)?;
    manifest.config.validate()?;
    let mut store = FeatureGramStore::zeros(&manifest.config);
    for e in &manifest.entries {
        let point = parse_point_name("gram", &e.name)?;
        let expect = point.site.dim(&manifest.config);
        if e.dim != expect {
            return Err(Error::Format(format!(
                "{}: dim {} should be {expect}",
                e.name, e.dim
            )));
        }
        store
            .grams
            .insert(point, read_square_mat(payload, e.offset, e.dim, &e.name)?);
        store.counts.insert(point, e.count);
    }
    Ok(store)
}

#[derive(Debug, Serialize, Deserialize)]
struct ProjEntry {
    name: String,
    dim: usize,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProjManifest {
    config: ModelConfig,
    mode: ProjectorMode,
    tol: f64,
    entries: Vec<ProjEntry>,
}

pub fn write_projector(path: &Path, proj: &Projector) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (point, mat) in &proj.mats {
        let len = (mat.data.len() * 8) as u64;
        entries.push(ProjEntry {
            name: point_name("proj", point),
            dim: mat.rows,
            offset,
            len,
        });
        offset += len;
    }
    let manifest = ProjManifest {
        config: proj.config.clone(),
        mode: proj.mode,
        tol: proj.tol,
        entries,
    };
    let payload = mats_payload(proj.mats.values());
    tensorstore::write_container(path, RMPJ_MAGIC, &serde_json::to_vec(&manifest)?, &payload)
}

pub fn read_projector(path: &Path) -> Result<Projector> {
    let bytes = std::fs::read(path)?;
    let (manifest, payload) = tensorstore::split_container(&bytes, RMPJ_MAGIC)?;
    let manifest: ProjManifest = serde_json::from_slice(manifest)?;
    manifest.config.validate()?;
    let mut mats = BTreeMap::new();
    for e in &manifest.entries {
        let point = parse_point_name("proj", &e.name)?;
        mats.insert(point, read_square_mat(payload, e.offset, e.dim, &e.name)?);
    }
    Ok(Projector {
        config: manifest.config,
        mode: manifest.mode,
        tol: manifest.tol,
        mats,
    })
}
