//! Final merge assembly and the baseline merge algorithms.
//!
//! The rain assembly scales each head's slice of the projected delta by its
//! solved coefficient (rows of Q/K/V, columns of O), whole FFN matrices by
//! the layer's head mean, and adds λ times the result onto the anchor in
//! f64. Baselines: task arithmetic, per-tensor SLERP and Karcher means on
//! the unit sphere of flattened weights, TIES magnitude trimming, and DARE
//! drop-and-rescale with per-tensor seed substreams.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attncoef::CoefficientMap;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm2};
use crate::nullproj::ProjectedTaskVector;
use crate::tensorstore::{Checkpoint, Tensor};
use crate::vectors::{apply_delta, extract_task_vector, SubmoduleId, SubmoduleKind, TaskVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMethod {
    Rain,
    TaskArithmetic,
    Slerp,
    Karcher,
    Ties,
    Dare,
    DareTies,
}

impl MergeMethod {
    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag.replace('_', "-").as_str() {
            "rain" => Some(MergeMethod::Rain),
            "task-arithmetic" => Some(MergeMethod::TaskArithmetic),
            "slerp" => Some(MergeMethod::Slerp),
            "karcher" => Some(MergeMethod::Karcher),
            "ties" => Some(MergeMethod::Ties),
            "dare" => Some(MergeMethod::Dare),
            "dare-ties" => Some(MergeMethod::DareTies),
            _ => None,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            MergeMethod::Rain => "rain",
            MergeMethod::TaskArithmetic => "task-arithmetic",
            MergeMethod::Slerp => "slerp",
            MergeMethod::Karcher => "karcher",
            MergeMethod::Ties => "ties",
            MergeMethod::Dare => "dare",
            MergeMethod::DareTies => "dare-ties",
        }
    }
}

fn default_lambda() -> f64 {
    1.0
}
fn default_t() -> f64 {
    0.5
}
fn default_trim_k() -> f64 {
    0.8
}
fn default_drop_p() -> f64 {
    0.3
}
fn default_max_iter() -> usize {
    100
}
fn default_tol() -> f64 {
    1e-10
}

/// Merge method plus its parameters; stacked methods compose left to right
/// (drop, then trim, then scale by λ).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_t")]
    pub t: f64,
    #[serde(default = "default_trim_k")]
    pub trim_k: f64,
    #[serde(default = "default_drop_p")]
    pub drop_p: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
}

impl MergeRecipe {
    pub fn new(method: MergeMethod) -> Self {
        MergeRecipe {
            method,
            lambda: default_lambda(),
            t: default_t(),
            trim_k: default_trim_k(),
            drop_p: default_drop_p(),
            max_iter: default_max_iter(),
            tol: default_tol(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::InvalidArgument("lambda must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.drop_p) {
            return Err(Error::InvalidArgument("drop rate p must be in [0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.trim_k) {
            return Err(Error::InvalidArgument("trim ratio k must be in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::InvalidArgument("slerp t must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// θ_⋆ = anchor + λ · (per-head / per-module scaled Δ⊥).
pub fn rain_assemble(
    anchor: &Checkpoint,
    ptv: &ProjectedTaskVector,
    coeffs: &CoefficientMap,
    lambda: f64,
) -> Result<Checkpoint> {
    if anchor.config != ptv.tv.config {
        return Err(Error::ConfigMismatch(
            "anchor and projected delta configs differ".into(),
        ));
    }
    let config = &anchor.config;
    let dh = config.d_head;
    let mut scaled = ptv.tv.clone();
    for (id, delta) in &mut scaled.deltas {
        match id.kind {
            SubmoduleKind::Q | SubmoduleKind::K | SubmoduleKind::V => {
                for head in 0..config.n_heads {
                    let alpha = coeffs.head_alpha(id.layer, head).ok_or_else(|| {
                        Error::MissingCoefficient(format!("layer {} head {head}", id.layer))
                    })?;
                    for r in head * dh..(head + 1) * dh {
                        for c in 0..delta.cols {
                            delta.set(r, c, delta.get(r, c) * alpha);
                        }
                    }
                }
            }
            SubmoduleKind::O => {
                for head in 0..config.n_heads {
                    let alpha = coeffs.head_alpha(id.layer, head).ok_or_else(|| {
                        Error::MissingCoefficient(format!("layer {} head {head}", id.layer))
                    })?;
                    for r in 0..delta.rows {
                        for c in head * dh..(head + 1) * dh {
                            delta.set(r, c, delta.get(r, c) * alpha);
                        }
                    }
                }
            }
            SubmoduleKind::FfnIn | SubmoduleKind::FfnOut => {
                let alpha = coeffs
                    .module_alpha(id)
                    .ok_or_else(|| Error::MissingCoefficient(id.to_string()))?;
                delta.scale(alpha);
            }
        }
    }
    apply_delta(anchor, &scaled, lambda)
}

/// θ = anchor + λ·Δ.
pub fn task_arithmetic(anchor: &Checkpoint, tv: &TaskVector, lambda: f64) -> Result<Checkpoint> {
    apply_delta(anchor, tv, lambda)
}

fn flatten_f64(t: &Tensor) -> Vec<f64> {
    t.data.iter().map(|&v| v as f64).collect()
}

fn tensor_from_f64(shape: &[usize], data: &[f64]) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), data.iter().map(|&v| v as f32).collect())
}

/// Spherical interpolation of two equally shaped tensors: unit directions
/// follow the geodesic, the norm interpolates linearly. Endpoints are
/// returned exactly; geodesics shorter than 1e-6 fall back to linear
/// interpolation of the unit directions.
pub fn slerp_merge(wr: &Tensor, wi: &Tensor, t: f64) -> Result<Tensor> {
    if wr.shape != wi.shape {
        return Err(Error::DimensionMismatch(format!(
            "slerp shapes {:?} vs {:?}",
            wr.shape, wi.shape
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument("slerp t must be in [0,1]".into()));
    }
    if t == 0.0 {
        return Ok(wr.clone());
    }
    if t == 1.0 {
        return Ok(wi.clone());
    }
    let a = flatten_f64(wr);
    let b = flatten_f64(wi);
    let na = norm2(&a);
    let nb = norm2(&b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("slerp of a zero tensor".into()));
    }
    let ua: Vec<f64> = a.iter().map(|v| v / na).collect();
    let ub: Vec<f64> = b.iter().map(|v| v / nb).collect();
    let cos = dot(&ua, &ub).clamp(-1.0, 1.0);
    if cos <= -1.0 + 1e-12 {
        return Err(Error::InvalidArgument(
            "slerp of an antipodal pair is undefined".into(),
        ));
    }
    let omega = cos.acos();
    let dir: Vec<f64> = if omega < 1e-6 {
        ua.iter()
            .zip(&ub)
            .map(|(x, y)| (1.0 - t) * x + t * y)
            .collect()
    } else {
        let sin_omega = omega.sin();
        let fa = ((1.0 - t) * omega).sin() / sin_omega;
        let fb = (t * omega).sin() / sin_omega;
        ua.iter().zip(&ub).map(|(x, y)| fa * x + fb * y).collect()
    };
    let norm_out = (1.0 - t) * na + t * nb;
    let out: Vec<f64> = dir.iter().map(|v| v * norm_out).collect();
    tensor_from_f64(&wr.shape, &out)
}

fn sphere_log(p: &[f64], q: &[f64]) -> Vec<f64> {
    let cos = dot(p, q).clamp(-1.0, 1.0);
    let theta = cos.acos();
    if theta < 1e-12 {
        return vec![0.0; p.len()];
    }
    let factor = theta / theta.sin();
    q.iter()
        .zip(p)
        .map(|(qi, pi)| factor * (qi - cos * pi))
        .collect()
}

fn sphere_exp(p: &[f64], v: &[f64]) -> Vec<f64> {
    let n = norm2(v);
    if n < 1e-300 {
        return p.to_vec();
    }
    let (c, s) = (n.cos(), n.sin() / n);
    p.iter().zip(v).map(|(pi, vi)| c * pi + s * vi).collect()
}

/// Fréchet mean of unit-normalized flattened tensors on the sphere, rescaled
/// by the arithmetic mean of the input norms.
pub fn karcher_merge(tensors: &[Tensor], max_iter: usize, tol: f64) -> Result<Tensor> {
    if tensors.len() < 2 {
        return Err(Error::InvalidArgument(
            "karcher mean needs at least two tensors".into(),
        ));
    }
    let shape = &tensors[0].shape;
    for t in tensors {
        if &t.shape != shape {
            return Err(Error::DimensionMismatch("karcher shapes differ".into()));
        }
    }
    let mut units = Vec::with_capacity(tensors.len());
    let mut norm_sum = 0.0;
    for t in tensors {
        let flat = flatten_f64(t);
        let n = norm2(&flat);
        if n == 0.0 {
            return Err(Error::InvalidArgument("karcher mean of a zero tensor".into()));
        }
        norm_sum += n;
        units.push(flat.into_iter().map(|v| v / n).collect::<Vec<f64>>());
    }
    let mean_norm = norm_sum / tensors.len() as f64;

    // Initialize at the normalized extrinsic mean; fall back to the first
    // direction when the inputs cancel.
    let dim = units[0].len();
    let mut mean = vec![0.0f64; dim];
    for u in &units {
        for (m, &x) in mean.iter_mut().zip(u) {
            *m += x;
        }
    }
    let n0 = norm2(&mean);
    if n0 < 1e-12 {
        mean = units[0].clone();
    } else {
        for m in &mut mean {
            *m /= n0;
        }
    }

    let inv_n = 1.0 / units.len() as f64;
    let mut residual = f64::INFINITY;
    for _ in 0..=max_iter {
        let mut tangent = vec![0.0f64; dim];
        for u in &units {
            let log = sphere_log(&mean, u);
            for (t, &l) in tangent.iter_mut().zip(&log) {
                *t += inv_n * l;
            }
        }
        residual = norm2(&tangent);
        if residual < tol {
            let out: Vec<f64> = mean.iter().map(|v| v * mean_norm).collect();
            return tensor_from_f64(shape, &out);
        }
        mean = sphere_exp(&mean, &tangent);
        let n = norm2(&mean);
        for m in &mut mean {
            *m /= n;
        }
    }
    Err(Error::NonConvergence {
        iters: max_iter,
        residual,
    })
}

/// Zero the floor(k·N) smallest-magnitude entries of every delta. With a
/// single task vector the sign-election step is vacuous; retained entries
/// are untouched and nothing is rescaled.
pub fn ties_trim(tv: &TaskVector, k: f64) -> Result<TaskVector> {
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::InvalidArgument("trim ratio k must be in [0,1]".into()));
    }
    let mut out = tv.clone();
    for delta in out.deltas.values_mut() {
        let n = delta.data.len();
        let count = (k * n as f64).floor() as usize;
        if count == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            delta.data[i]
                .abs()
                .partial_cmp(&delta.data[j].abs())
                .unwrap()
                .then(i.cmp(&j))
        });
        for &i in order.iter().take(count.min(n)) {
            delta.data[i] = 0.0;
        }
    }
    Ok(out)
}

fn fnv1a64(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Per element: zero with probability p, otherwise rescale by 1/(1−p).
/// Each tensor draws from a substream keyed by (seed, canonical tensor
/// name), so parallel evaluation order cannot change results.
pub fn dare_drop(tv: &TaskVector, p: f64, seed: u64) -> Result<TaskVector> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument("drop rate p must be in [0,1)".into()));
    }
    let mut out = tv.clone();
    let rescale = 1.0 / (1.0 - p);
    for (id, delta) in &mut out.deltas {
        let name = id.kind.tensor_name(id.layer);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(&name));
        for v in &mut delta.data {
            if rng.gen::<f64>() < p {
                *v = 0.0;
            } else {
                *v *= rescale;
            }
        }
    }
    Ok(out)
}

/// Everything a recipe might need; methods check for what they use.
pub struct MergeInputs<'a> {
    pub anchor: &'a Checkpoint,
    pub base: Option<&'a Checkpoint>,
    pub itm: Option<&'a Checkpoint>,
    pub projected: Option<&'a ProjectedTaskVector>,
    pub coeffs: Option<&'a CoefficientMap>,
}

fn require<'a, T: ?Sized>(opt: Option<&'a T>, what: &str) -> Result<&'a T> {
    opt.ok_or_else(|| Error::MissingInput(what.to_string()))
}

/// Per-tensor geodesic merge across the merged kinds, leaving every other
/// tensor at the anchor's value.
fn merge_kinds_with(
    anchor: &Checkpoint,
    f: impl Fn(&SubmoduleId, &Tensor) -> Result<Tensor>,
) -> Result<Checkpoint> {
    let mut out = anchor.clone();
    out.provenance = None;
    for id in SubmoduleId::enumerate(&anchor.config) {
        let name = id.kind.tensor_name(id.layer);
        let merged = f(&id, anchor.tensor(&name)?)?;
        *out.tensor_mut(&name)? = merged;
    }
    out.validate()?;
    Ok(out)
}

/// Blend a merged checkpoint toward the anchor by λ on the merged kinds:
/// anchor + λ·(merged − anchor) in f64. λ = 1 returns `merged` unchanged.
fn lambda_blend(anchor: &Checkpoint, merged: Checkpoint, lambda: f64) -> Result<Checkpoint> {
    if lambda == 1.0 {
        return Ok(merged);
    }
    let diff = extract_task_vector(&merged, anchor)?;
    apply_delta(anchor, &diff, lambda)
}

/// Execute a merge recipe end to end.
pub fn run_recipe(recipe: &MergeRecipe, inputs: &MergeInputs) -> Result<Checkpoint> {
    recipe.validate()?;
    let anchor = inputs.anchor;
    match recipe.method {
        MergeMethod::Rain => {
            let ptv = require(inputs.projected, "projected delta (stage1 output)")?;
            let coeffs = require(inputs.coeffs, "coefficient map (stage2 output)")?;
            rain_assemble(anchor, ptv, coeffs, recipe.lambda)
        }
        MergeMethod::TaskArithmetic => {
            let tv = extract_itm_delta(inputs)?;
            task_arithmetic(anchor, &tv, recipe.lambda)
        }
        MergeMethod::Slerp => {
            let itm = require(inputs.itm, "instruction checkpoint")?;
            check_same_config(anchor, itm)?;
            let merged = merge_kinds_with(anchor, |id, wr| {
                let wi = itm.tensor(&id.kind.tensor_name(id.layer))?;
                slerp_merge(wr, wi, recipe.t)
            })?;
            lambda_blend(anchor, merged, recipe.lambda)
        }
        MergeMethod::Karcher => {
            let itm = require(inputs.itm, "instruction checkpoint")?;
            check_same_config(anchor, itm)?;
            let merged = merge_kinds_with(anchor, |id, wr| {
                let wi = itm.tensor(&id.kind.tensor_name(id.layer))?;
                karcher_merge(
                    &[wr.clone(), wi.clone()],
                    recipe.max_iter,
                    recipe.tol,
                )
            })?;
            lambda_blend(anchor, merged, recipe.lambda)
        }
        MergeMethod::Ties => {
            let tv = extract_itm_delta(inputs)?;
            let trimmed = ties_trim(&tv, recipe.trim_k)?;
            apply_delta(anchor, &trimmed, recipe.lambda)
        }
        MergeMethod::Dare => {
            let tv = extract_itm_delta(inputs)?;
            let dropped = dare_drop(&tv, recipe.drop_p, recipe.seed)?;
            apply_delta(anchor, &dropped, recipe.lambda)
        }
        MergeMethod::DareTies => {
            let tv = extract_itm_delta(inputs)?;
            let dropped = dare_drop(&tv, recipe.drop_p, recipe.seed)?;
            let trimmed = ties_trim(&dropped, recipe.trim_k)?;
            apply_delta(anchor, &trimmed, recipe.lambda)
        }
    }
}

fn extract_itm_delta(inputs: &MergeInputs) -> Result<TaskVector> {
    let base = require(inputs.base, "base checkpoint")?;
    let itm = require(inputs.itm, "instruction checkpoint")?;
    extract_task_vector(itm, base)
}

fn check_same_config(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    if a.config != b.config {
        return Err(Error::ConfigMismatch("checkpoint configs differ".into()));
    }
    Ok(())
}
