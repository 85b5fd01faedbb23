//! Calibration-set schemas, thinking-token extraction, and the synthetic
//! desk-scale generators for corpora and model triples.
//!
//! Everything is token-id level: the merge method consumes only token
//! positions, so the generators plant controllable structure (low-rank
//! deltas with a chosen left-subspace overlap, attention-steering head
//! deltas, prefix-pooled reasoning corpora) instead of training anything.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attncoef::SpanSets;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, Mat};
use crate::nanoformer::{CaptureSite, CapturePoint, Model, TokenSequence};
use crate::tensorstore::{canonical_schema, Checkpoint, ModelConfig, Tensor};
use crate::vectors::{apply_delta, SubmoduleId, SubmoduleKind, TaskVector};

/// Special token ids shared by a model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokenRegistry {
    pub think_open: u32,
    pub think_close: u32,
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
}

impl SpecialTokenRegistry {
    pub fn default_toy() -> Self {
        SpecialTokenRegistry {
            think_open: 3,
            think_close: 4,
            bos: 1,
            eos: 2,
            pad: 0,
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let ids = [
            self.think_open,
            self.think_close,
            self.bos,
            self.eos,
            self.pad,
        ];
        for &id in &ids {
            if id as usize >= vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: vocab_size,
                });
            }
        }
        let mut sorted = ids;
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(
                "special token ids must be distinct".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(serde_json::to_string(self)?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Token sequence plus the thinking-marker index set Ω_think.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningSample {
    pub tokens: TokenSequence,
    pub think_positions: Vec<usize>,
}

/// Token sequence plus instruction/constrained/unrelated spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionSample {
    pub tokens: TokenSequence,
    pub prompt_len: usize,
    pub spans: SpanSets,
}

/// Flags raised while scanning for thinking markers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ThinkFlags {
    /// Open/close markers do not pair up.
    pub unbalanced: bool,
    /// A close marker appeared with no open marker pending.
    pub order_violation: bool,
}

/// Positions of every thinking marker, sorted ascending, plus flags.
/// Positions are returned even when the flags fire.
pub fn extract_think_positions(
    tokens: &[u32],
    reg: &SpecialTokenRegistry,
) -> (Vec<usize>, ThinkFlags) {
    let mut positions = Vec::new();
    let mut flags = ThinkFlags::default();
    let mut depth = 0i64;
    for (i, &id) in tokens.iter().enumerate() {
        if id == reg.think_open {
            positions.push(i);
            depth += 1;
        } else if id == reg.think_close {
            positions.push(i);
            if depth == 0 {
                flags.order_violation = true;
            } else {
                depth -= 1;
            }
        }
    }
    if depth != 0 {
        flags.unbalanced = true;
    }
    (positions, flags)
}

#[derive(Debug, Serialize, Deserialize)]
struct ReasoningRecord {
    tokens: Vec<u32>,
    think_positions: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct InstructionRecord {
    tokens: Vec<u32>,
    prompt_len: usize,
    instruction: Vec<usize>,
    constrained: Vec<usize>,
    unrelated: Vec<usize>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path)?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        lines.push(line?);
    }
    Ok(lines)
}

/// Load a line-delimited reasoning calibration file, validating every record.
pub fn load_reasoning_set(path: &Path, reg: &SpecialTokenRegistry) -> Result<Vec<ReasoningSample>> {
    let lines = read_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ReasoningRecord =
            serde_json::from_str(line).map_err(|e| Error::InvalidRecord {
                line: lineno,
                reason: format!("parse: {e}"),
            })?;
        let sample = validate_reasoning_record(rec, reg)
            .map_err(|reason| Error::InvalidRecord { line: lineno, reason })?;
        out.push(sample);
    }
    if out.is_empty() {
        log::warn!("reasoning set {} is empty", path.display());
    }
    Ok(out)
}

fn validate_reasoning_record(
    rec: ReasoningRecord,
    reg: &SpecialTokenRegistry,
) -> std::result::Result<ReasoningSample, String> {
    if rec.tokens.is_empty() {
        return Err("empty token sequence".into());
    }
    let mut last: Option<usize> = None;
    for &p in &rec.think_positions {
        if p >= rec.tokens.len() {
            return Err(format!("think position {p} out of range"));
        }
        if p == 0 {
            return Err("think position 0 has no predicting step".into());
        }
        if let Some(prev) = last {
            if p <= prev {
                return Err("think positions must be strictly ascending".into());
            }
        }
        last = Some(p);
        let id = rec.tokens[p];
        if id != reg.think_open && id != reg.think_close {
            return Err(format!(
                "think position {p} points at token {id}, not a thinking marker"
            ));
        }
    }
    // The first marker among the listed positions must be an open.
    if let Some(&first) = rec.think_positions.first() {
        if rec.tokens[first] == reg.think_close {
            return Err("think_close listed before any think_open".into());
        }
    }
    Ok(ReasoningSample {
        tokens: TokenSequence { ids: rec.tokens },
        think_positions: rec.think_positions,
    })
}

/// Load a line-delimited instruction calibration file, validating spans.
pub fn load_instruction_set(path: &Path) -> Result<Vec<InstructionSample>> {
    let lines = read_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstructionRecord =
            serde_json::from_str(line).map_err(|e| Error::InvalidRecord {
                line: lineno,
                reason: format!("parse: {e}"),
            })?;
        let sample = validate_instruction_record(rec)
            .map_err(|reason| Error::InvalidRecord { line: lineno, reason })?;
        out.push(sample);
    }
    if out.is_empty() {
        log::warn!("instruction set {} is empty", path.display());
    }
    Ok(out)
}

fn validate_instruction_record(
    rec: InstructionRecord,
) -> std::result::Result<InstructionSample, String> {
    if rec.tokens.is_empty() {
        return Err("empty token sequence".into());
    }
    if rec.prompt_len == 0 || rec.prompt_len > rec.tokens.len() {
        return Err(format!("prompt_len {} out of range", rec.prompt_len));
    }
    for &i in &rec.instruction {
        if i >= rec.prompt_len {
            return Err(format!("span outside prompt: instruction index {i}"));
        }
    }
    for (name, set) in [("constrained", &rec.constrained), ("unrelated", &rec.unrelated)] {
        for &i in set {
            if i < rec.prompt_len {
                return Err(format!("{name} index {i} inside prompt"));
            }
        }
    }
    let spans = SpanSets {
        instruction: rec.instruction,
        constrained: rec.constrained,
        unrelated: rec.unrelated,
    };
    spans.validate(rec.tokens.len()).map_err(|e| e.to_string())?;
    Ok(InstructionSample {
        tokens: TokenSequence { ids: rec.tokens },
        prompt_len: rec.prompt_len,
        spans,
    })
}

pub fn save_reasoning_set(path: &Path, samples: &[ReasoningSample]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for s in samples {
        let rec = ReasoningRecord {
            tokens: s.tokens.ids.clone(),
            think_positions: s.think_positions.clone(),
        };
        f.write_all(serde_json::to_string(&rec)?.as_bytes())?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_instruction_set(path: &Path, samples: &[InstructionSample]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for s in samples {
        let rec = InstructionRecord {
            tokens: s.tokens.ids.clone(),
            prompt_len: s.prompt_len,
            instruction: s.spans.instruction.clone(),
            constrained: s.spans.constrained.clone(),
            unrelated: s.spans.unrelated.clone(),
        };
        f.write_all(serde_json::to_string(&rec)?.as_bytes())?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Truncate each reasoning sample just after its first think-open marker,
/// yielding prompts that start generation inside the thinking segment.
pub fn derive_endthink_prompts(
    samples: &[ReasoningSample],
    reg: &SpecialTokenRegistry,
) -> Vec<TokenSequence> {
    samples
        .iter()
        .filter_map(|s| {
            s.tokens
                .ids
                .iter()
                .position(|&id| id == reg.think_open)
                .map(|p| TokenSequence {
                    ids: s.tokens.ids[..=p].to_vec(),
                })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic model triples
// ---------------------------------------------------------------------------

/// Token-id bands carved out of the non-special vocabulary; the generators
/// draw instruction, constrained-response, unrelated-response, and filler
/// tokens from disjoint bands so attention structure is plantable.
#[derive(Debug, Clone, Copy)]
pub struct IdRanges {
    pub instruction: (u32, u32),
    pub constrained: (u32, u32),
    pub unrelated: (u32, u32),
    pub filler: (u32, u32),
}

pub fn id_ranges(vocab_size: usize) -> Result<IdRanges> {
    const SPECIAL_END: u32 = 8;
    if vocab_size < 40 {
        return Err(Error::InvalidArgument(format!(
            "vocab_size {vocab_size} too small for the toy id bands"
        )));
    }
    let start = SPECIAL_END;
    let width = (vocab_size as u32 - start) / 4;
    Ok(IdRanges {
        instruction: (start, start + width),
        constrained: (start + width, start + 2 * width),
        unrelated: (start + 2 * width, start + 3 * width),
        filler: (start + 3 * width, vocab_size as u32),
    })
}

fn draw(rng: &mut ChaCha8Rng, range: (u32, u32), n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(range.0..range.1)).collect()
}

/// Controls for the planted model triple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyProfile {
    pub config: ModelConfig,
    /// Rank of each planted per-submodule delta.
    pub delta_rank: usize,
    /// Fraction of shared left directions between Δ_R and Δ_I in [0, 1].
    pub overlap: f64,
    /// Singular-value scale of the planted deltas.
    pub delta_scale: f64,
    /// Strength of the attention-leakage plant added to Δ_I's Q rows on the
    /// first half of each layer's heads (0 disables).
    pub leak_plant: f64,
    /// Strength of the instruction-alignment plant on the third head of each
    /// layer (0 disables).
    pub align_plant: f64,
}

impl ToyProfile {
    pub fn default_toy() -> Self {
        let config = ModelConfig::new(4, 4, 64, 128, 256, 256).expect("valid toy config");
        ToyProfile {
            config,
            delta_rank: 4,
            overlap: 0.0,
            delta_scale: 0.35,
            leak_plant: 8.0,
            align_plant: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.delta_rank == 0 {
            return Err(Error::InvalidArgument("delta_rank must be >= 1".into()));
        }
        for id in SubmoduleId::enumerate(&self.config) {
            let (d_out, d_in) = id.kind.dims(&self.config);
            if 2 * self.delta_rank > d_out || self.delta_rank > d_in {
                return Err(Error::InvalidArgument(format!(
                    "delta_rank {} exceeds dimensions of {id}",
                    self.delta_rank
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::InvalidArgument("overlap must be in [0,1]".into()));
        }
        if !(self.delta_scale > 0.0) {
            return Err(Error::InvalidArgument("delta_scale must be > 0".into()));
        }
        Ok(())
    }
}

/// Planted ground truth for one submodule.
#[derive(Debug, Clone)]
pub struct PlantedSubspaces {
    /// Left basis of Δ_R (d_out × rank, orthonormal columns).
    pub u_reasoning: Mat,
    /// Left basis of Δ_I before any attention plant.
    pub u_instruct: Mat,
    /// Number of shared columns.
    pub shared: usize,
}

#[derive(Debug, Clone)]
pub struct GeneratorReport {
    pub seed: u64,
    pub profile: ToyProfile,
    pub shared_directions: usize,
    pub planted: BTreeMap<SubmoduleId, PlantedSubspaces>,
}

impl GeneratorReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "overlap": self.profile.overlap,
            "delta_rank": self.profile.delta_rank,
            "delta_scale": self.profile.delta_scale,
            "leak_plant": self.profile.leak_plant,
            "align_plant": self.profile.align_plant,
            "shared_directions": self.shared_directions,
            "submodules": self
                .planted
                .keys()
                .map(|id| id.to_string())
                .collect::<Vec<_>>(),
        })
    }
}

/// Base, reasoning-anchor, and instruction checkpoints plus the planted
/// ground truth.
#[derive(Debug, Clone)]
pub struct ToyTriple {
    pub base: Checkpoint,
    pub reasoning: Checkpoint,
    pub instruct: Checkpoint,
    pub report: GeneratorReport,
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f32 {
    let g: f64 = standard_normal(rng);
    (g * sigma) as f32
}

/// Box-Muller on ChaCha output; avoids pulling in a distributions crate for
/// one primitive and stays bit-stable across platforms.
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
}

/// Random base checkpoint. Attention q/k weights are drawn small so toy
/// attention stays diffuse; norms start near identity so activations keep
/// an O(1) scale through the stack.
pub fn random_checkpoint(seed: u64, config: &ModelConfig) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model as f64;
    let dff = config.d_ff as f64;
    let base_sigma = 1.0 / d.sqrt();
    let qk_sigma = 0.3 / d.sqrt();
    let mut tensors = BTreeMap::new();
    for (name, shape) in canonical_schema(config) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if name.ends_with("gamma") {
            (0..n).map(|_| 1.0 + gaussian(&mut rng, 0.02)).collect()
        } else if name.ends_with("beta") || name.ends_with("bin") || name.ends_with("bout") {
            (0..n).map(|_| gaussian(&mut rng, 0.02)).collect()
        } else if name.contains("attn.wq") || name.contains("attn.wk") {
            (0..n).map(|_| gaussian(&mut rng, qk_sigma)).collect()
        } else if name.contains("ffn.wout") {
            (0..n).map(|_| gaussian(&mut rng, 1.0 / dff.sqrt())).collect()
        } else {
            (0..n).map(|_| gaussian(&mut rng, base_sigma)).collect()
        };
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Checkpoint::new(config.clone(), tensors)
}

/// Orthonormal columns (dim × count) via modified Gram-Schmidt with one
/// reorthogonalization pass.
pub fn orthonormal_columns(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> Mat {
    assert!(count <= dim, "cannot fit {count} orthonormal columns in R^{dim}");
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(count);
    while cols.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        for _ in 0..2 {
            for c in &cols {
                let proj = dot(&v, c);
                for (vi, ci) in v.iter_mut().zip(c) {
                    *vi -= proj * ci;
                }
            }
        }
        let n = norm2(&v);
        if n < 1e-8 {
            continue;
        }
        for vi in &mut v {
            *vi /= n;
        }
        cols.push(v);
    }
    let mut m = Mat::zeros(dim, count);
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            m.set(i, j, v);
        }
    }
    m
}

fn low_rank_delta(u: &Mat, v: &Mat, scale: f64) -> Mat {
    let rank = u.cols;
    let mut delta = Mat::zeros(u.rows, v.rows);
    for j in 0..rank {
        let sigma = scale * (1.0 - 0.05 * j as f64);
        delta.rank1_update(&u.col(j), &v.col(j), sigma);
    }
    delta
}

/// Generate (θ_B, θ_R, θ_I) with planted low-rank task vectors whose left
/// subspaces share `round(overlap·rank)` directions, plus optional
/// attention-steering plants in Δ_I.
pub fn gen_toy_triple(seed: u64, profile: &ToyProfile) -> Result<ToyTriple> {
    profile.validate()?;
    let config = &profile.config;
    let base = random_checkpoint(seed ^ 0x9e3779b97f4a7c15, config)?;

    let rank = profile.delta_rank;
    let shared = (profile.overlap * rank as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09e667f3bcc908);

    let mut delta_r = TaskVector::zeros(config);
    let mut delta_i = TaskVector::zeros(config);
    let mut planted = BTreeMap::new();
    for id in SubmoduleId::enumerate(config) {
        let (d_out, d_in) = id.kind.dims(config);
        let frame = orthonormal_columns(&mut rng, d_out, 2 * rank - shared);
        let mut u_r = Mat::zeros(d_out, rank);
        let mut u_i = Mat::zeros(d_out, rank);
        for j in 0..rank {
            for i in 0..d_out {
                u_r.set(i, j, frame.get(i, j));
            }
            // Shared directions first, then fresh ones from the same frame.
            let src = if j < shared { j } else { rank + j - shared };
            for i in 0..d_out {
                u_i.set(i, j, frame.get(i, src));
            }
        }
        let v_r = orthonormal_columns(&mut rng, d_in, rank);
        let v_i = orthonormal_columns(&mut rng, d_in, rank);
        *delta_r.deltas.get_mut(&id).unwrap() = low_rank_delta(&u_r, &v_r, profile.delta_scale);
        *delta_i.deltas.get_mut(&id).unwrap() = low_rank_delta(&u_i, &v_i, profile.delta_scale);
        planted.insert(
            id,
            PlantedSubspaces {
                u_reasoning: u_r,
                u_instruct: u_i,
                shared,
            },
        );
    }

    let reasoning = apply_delta(&base, &delta_r, 1.0)?;

    if profile.leak_plant > 0.0 || profile.align_plant > 0.0 {
        plant_attention_steering(&mut delta_i, &reasoning, profile, seed ^ 0xbb67ae8584caa73b)?;
    }
    let instruct = apply_delta(&base, &delta_i, 1.0)?;

    Ok(ToyTriple {
        base,
        reasoning,
        instruct,
        report: GeneratorReport {
            seed,
            profile: profile.clone(),
            shared_directions: shared,
            planted,
        },
    })
}

/// Add rank-1 head blocks to Δ_I's Q matrices that steer merged attention.
///
/// Leak heads (the first half of each layer's heads) get queries pushed
/// toward the anchor keys of unrelated-band tokens; the align head (index
/// n_heads−2) toward instruction-band keys. Directions are estimated from
/// probe forwards of the anchor model, so the plant survives merging at a
/// predictable strength.
fn plant_attention_steering(
    delta_i: &mut TaskVector,
    anchor: &Checkpoint,
    profile: &ToyProfile,
    seed: u64,
) -> Result<()> {
    let config = &profile.config;
    let ranges = id_ranges(config.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(anchor)?;
    let dh = config.d_head;

    // Probe sequences shaped like the instruction corpus.
    let mut probes = Vec::new();
    for _ in 0..4 {
        let mut ids = vec![1u32];
        ids.extend(draw(&mut rng, ranges.filler, 4));
        let instr_start = ids.len();
        ids.extend(draw(&mut rng, ranges.instruction, 8));
        let instr_end = ids.len();
        ids.extend(draw(&mut rng, ranges.filler, 2));
        let resp_start = ids.len();
        ids.extend(draw(&mut rng, ranges.constrained, 8));
        let unrel_start = ids.len();
        ids.extend(draw(&mut rng, ranges.unrelated, 8));
        let unrel_end = ids.len();
        probes.push((ids, instr_start..instr_end, resp_start..unrel_end, unrel_start..unrel_end));
    }

    for layer in 0..config.n_layers {
        let wk = anchor
            .tensor(&SubmoduleKind::K.tensor_name(layer))?
            .to_mat();
        // Accumulate probe statistics at this layer.
        let d = config.d_model;
        let mut mean_ctx = vec![0.0f64; d];
        let mut ctx_count = 0usize;
        let mut mean_k_instr = vec![0.0f64; d];
        let mut instr_count = 0usize;
        let mut mean_k_unrel = vec![0.0f64; d];
        let mut unrel_count = 0usize;
        for (ids, instr, resp, unrel) in &probes {
            let seq = TokenSequence { ids: ids.clone() };
            let trace = model.forward(&seq, &[CaptureSite::AttnIn], false)?;
            let feats = &trace.features[&CapturePoint::new(layer, CaptureSite::AttnIn)];
            for t in resp.clone() {
                for (m, &x) in mean_ctx.iter_mut().zip(&feats[t]) {
                    *m += x;
                }
                ctx_count += 1;
            }
            for tau in instr.clone() {
                let k = wk.matvec(&feats[tau]);
                for (m, &x) in mean_k_instr.iter_mut().zip(&k) {
                    *m += x;
                }
                instr_count += 1;
            }
            for tau in unrel.clone() {
                let k = wk.matvec(&feats[tau]);
                for (m, &x) in mean_k_unrel.iter_mut().zip(&k) {
                    *m += x;
                }
                unrel_count += 1;
            }
        }
        for m in &mut mean_ctx {
            *m /= ctx_count as f64;
        }
        for m in &mut mean_k_instr {
            *m /= instr_count as f64;
        }
        for m in &mut mean_k_unrel {
            *m /= unrel_count as f64;
        }
        // Scale the context direction so m̂·x ≈ 1 for typical features.
        let ctx_norm2 = dot(&mean_ctx, &mean_ctx).max(1e-12);
        let m_hat: Vec<f64> = mean_ctx.iter().map(|&v| v / ctx_norm2).collect();

        let dq = delta_i
            .deltas
            .get_mut(&SubmoduleId::new(layer, SubmoduleKind::Q))
            .unwrap();
        let mut plant_head = |head: usize, target_k: &[f64], strength: f64| {
            let lo = head * dh;
            let slice = &target_k[lo..lo + dh];
            let n = norm2(slice).max(1e-12);
            for (r, &w) in (lo..lo + dh).zip(slice) {
                let wn = w / n;
                for c in 0..dq.cols {
                    let v = dq.get(r, c) + strength * wn * m_hat[c];
                    dq.set(r, c, v);
                }
            }
        };
        if profile.leak_plant > 0.0 {
            for head in 0..config.n_heads / 2 {
                plant_head(head, &mean_k_unrel, profile.leak_plant);
            }
        }
        if profile.align_plant > 0.0 && config.n_heads >= 2 {
            plant_head(config.n_heads - 2, &mean_k_instr, profile.align_plant);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

/// Shape of the generated corpora.
///
/// Reasoning samples reuse a small pool of (prompt, chain) prefixes so the
/// thinking-position features span far fewer directions than d_model;
/// without the pooling, 150 samples × 2 markers would saturate the toy
/// feature space and the exact null-space projector would collapse to zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusProfile {
    pub n_prefix_pool: usize,
    pub prompt_len: (usize, usize),
    pub chain_len: (usize, usize),
    pub answer_len: (usize, usize),
    pub instr_pre_len: (usize, usize),
    pub instr_span_len: (usize, usize),
    pub instr_post_len: (usize, usize),
    pub constrained_len: (usize, usize),
    pub unrelated_len: (usize, usize),
}

impl CorpusProfile {
    pub fn default_toy() -> Self {
        CorpusProfile {
            n_prefix_pool: 8,
            prompt_len: (20, 28),
            chain_len: (22, 30),
            answer_len: (6, 10),
            instr_pre_len: (3, 6),
            instr_span_len: (6, 10),
            instr_post_len: (3, 6),
            constrained_len: (8, 12),
            unrelated_len: (8, 12),
        }
    }
}

fn draw_len(rng: &mut ChaCha8Rng, range: (usize, usize)) -> usize {
    rng.gen_range(range.0..=range.1)
}

/// Deterministically generate reasoning and instruction corpora.
pub fn gen_toy_corpora(
    seed: u64,
    reg: &SpecialTokenRegistry,
    config: &ModelConfig,
    counts: (usize, usize),
    profile: &CorpusProfile,
) -> Result<(Vec<ReasoningSample>, Vec<InstructionSample>)> {
    reg.validate(config.vocab_size)?;
    let ranges = id_ranges(config.vocab_size)?;
    let (n_reasoning, n_instruction) = counts;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3c6ef372fe94f82b);
    // Prefix pool shared across reasoning samples.
    let mut pool = Vec::with_capacity(profile.n_prefix_pool);
    for _ in 0..profile.n_prefix_pool {
        let prompt_len = draw_len(&mut rng, profile.prompt_len);
        let prompt = draw(&mut rng, ranges.filler, prompt_len);
        let chain_len = draw_len(&mut rng, profile.chain_len);
        let chain = draw(&mut rng, ranges.filler, chain_len);
        pool.push((prompt, chain));
    }

    let mut reasoning = Vec::with_capacity(n_reasoning);
    for _ in 0..n_reasoning {
        let (prompt, chain) = &pool[rng.gen_range(0..pool.len())];
        let answer_len = draw_len(&mut rng, profile.answer_len);
        let answer = draw(&mut rng, ranges.filler, answer_len);
        let mut ids = vec![reg.bos];
        ids.extend_from_slice(prompt);
        let open_pos = ids.len();
        ids.push(reg.think_open);
        ids.extend_from_slice(chain);
        let close_pos = ids.len();
        ids.push(reg.think_close);
        ids.extend_from_slice(&answer);
        ids.push(reg.eos);
        if ids.len() > config.max_seq {
            return Err(Error::CapacityExceeded(format!(
                "reasoning sample of {} tokens exceeds max_seq {}",
                ids.len(),
                config.max_seq
            )));
        }
        reasoning.push(ReasoningSample {
            tokens: TokenSequence { ids },
            think_positions: vec![open_pos, close_pos],
        });
    }

    let mut instruction = Vec::with_capacity(n_instruction);
    for _ in 0..n_instruction {
        let pre = draw_len(&mut rng, profile.instr_pre_len);
        let span = draw_len(&mut rng, profile.instr_span_len);
        let post = draw_len(&mut rng, profile.instr_post_len);
        let n_con = draw_len(&mut rng, profile.constrained_len);
        let n_unr = draw_len(&mut rng, profile.unrelated_len);

        let mut ids = vec![reg.bos];
        ids.extend(draw(&mut rng, ranges.filler, pre));
        let instr_start = ids.len();
        ids.extend(draw(&mut rng, ranges.instruction, span));
        let instr_end = ids.len();
        ids.extend(draw(&mut rng, ranges.filler, post));
        let prompt_len = ids.len();
        let con_start = ids.len();
        ids.extend(draw(&mut rng, ranges.constrained, n_con));
        let unr_start = ids.len();
        ids.extend(draw(&mut rng, ranges.unrelated, n_unr));
        let unr_end = ids.len();
        ids.push(reg.eos);
        if ids.len() > config.max_seq {
            return Err(Error::CapacityExceeded(format!(
                "instruction sample of {} tokens exceeds max_seq {}",
                ids.len(),
                config.max_seq
            )));
        }
        instruction.push(InstructionSample {
            tokens: TokenSequence { ids },
            prompt_len,
            spans: SpanSets {
                instruction: (instr_start..instr_end).collect(),
                constrained: (con_start..unr_start).collect(),
                unrelated: (unr_start..unr_end).collect(),
            },
        });
    }

    Ok((reasoning, instruction))
}
