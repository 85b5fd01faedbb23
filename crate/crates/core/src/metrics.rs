//! Evaluation quantities: the thinking-token KL aggregate, the layer-wise
//! instruction-attention score, the end-think miss rate, and the quadratic
//! KL bound audit.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attncoef::{accumulate_stats, SpanSets};
use crate::calibration::{standard_normal, InstructionSample, ReasoningSample, SpecialTokenRegistry};
use crate::error::{Error, Result};
use crate::linalg::norm2;
use crate::nanoformer::{greedy_decode, next_token_log_softmax, Model, TokenSequence};
use crate::tensorstore::Checkpoint;

/// KL(q ‖ p) from two logits rows, computed via stable log-softmax in f64.
/// Rounding can leave a tiny negative residue near zero; it is clamped.
pub fn kl_from_logits(z_q: &[f64], z_p: &[f64]) -> Result<f64> {
    if z_q.len() != z_p.len() {
        return Err(Error::DimensionMismatch(format!(
            "kl rows of length {} vs {}",
            z_q.len(),
            z_p.len()
        )));
    }
    let lq = next_token_log_softmax(z_q)?;
    let lp = next_token_log_softmax(z_p)?;
    let kl: f64 = lq
        .iter()
        .zip(&lp)
        .map(|(&q, &p)| q.exp() * (q - p))
        .sum();
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PositionKl {
    pub position: usize,
    pub kl: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleKl {
    pub sample: usize,
    pub total: f64,
    pub positions: Vec<PositionKl>,
}

/// Per-sample per-position KL values and the aggregate: mean over samples of
/// the per-sample sum at thinking positions.
#[derive(Debug, Clone, Serialize)]
pub struct ThinkKlReport {
    pub l_think: f64,
    pub position_count: usize,
    pub samples: Vec<SampleKl>,
}

impl ThinkKlReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,position,kl\n");
        for sample in &self.samples {
            for p in &sample.positions {
                s.push_str(&format!("{},{},{}\n", sample.sample, p.position, p.kl));
            }
        }
        s
    }
}

/// Teacher-forced KL between a model and the anchor at thinking positions.
/// The divergence for position t is measured on the log-softmax rows at
/// t − 1, the step that predicts token t.
pub fn l_think(
    theta: &Checkpoint,
    anchor: &Checkpoint,
    set: &[ReasoningSample],
) -> Result<ThinkKlReport> {
    if theta.config != anchor.config {
        return Err(Error::ConfigMismatch(
            "model and anchor configs differ".into(),
        ));
    }
    if set.is_empty() {
        return Err(Error::EmptySet("no reasoning samples".into()));
    }
    let model_theta = Model::new(theta)?;
    let model_anchor = Model::new(anchor)?;

    use rayon::prelude::*;
    let per_sample: Vec<Result<SampleKl>> = set
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            for &t in &sample.think_positions {
                if t == 0 {
                    return Err(Error::InvalidArgument(
                        "think position 0 has no predicting step".into(),
                    ));
                }
            }
            let trace_q = model_theta.forward(&sample.tokens, &[], false)?;
            let trace_p = model_anchor.forward(&sample.tokens, &[], false)?;
            let mut positions = Vec::with_capacity(sample.think_positions.len());
            let mut total = 0.0;
            for &t in &sample.think_positions {
                let kl = kl_from_logits(&trace_q.logits[t - 1], &trace_p.logits[t - 1])?;
                positions.push(PositionKl { position: t, kl });
                total += kl;
            }
            Ok(SampleKl {
                sample: i,
                total,
                positions,
            })
        })
        .collect();

    let mut samples = Vec::with_capacity(per_sample.len());
    for s in per_sample {
        samples.push(s?);
    }
    let l_think = samples.iter().map(|s| s.total).sum::<f64>() / samples.len() as f64;
    let position_count = samples.iter().map(|s| s.positions.len()).sum();
    Ok(ThinkKlReport {
        l_think,
        position_count,
        samples,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LayerScore {
    pub layer: usize,
    pub a_bar: f64,
    pub u_bar: f64,
    pub score: f64,
}

/// Per-layer instruction-attention score ā − ρ·ū and the global sum.
#[derive(Debug, Clone, Serialize)]
pub struct AttnScoreReport {
    pub rho: f64,
    pub total: f64,
    pub layers: Vec<LayerScore>,
}

impl AttnScoreReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,a_bar,u_bar,score\n");
        for l in &self.layers {
            s.push_str(&format!("{},{},{},{}\n", l.layer, l.a_bar, l.u_bar, l.score));
        }
        s
    }
}

/// Layer-wise instruction-attention score of a model over an instruction
/// set; reuses the stage-2 accumulation path and averages over heads.
pub fn attn_score(
    theta: &Checkpoint,
    set: &[InstructionSample],
    rho: f64,
) -> Result<AttnScoreReport> {
    if set.is_empty() {
        return Err(Error::EmptySet("no instruction samples".into()));
    }
    if !rho.is_finite() || rho < 0.0 {
        return Err(Error::InvalidArgument("rho must be >= 0".into()));
    }
    let pairs: Vec<(TokenSequence, SpanSets)> = set
        .iter()
        .map(|s| (s.tokens.clone(), s.spans.clone()))
        .collect();
    let stats = accumulate_stats(theta, &pairs)?;
    let mut layers = Vec::with_capacity(stats.n_layers);
    let mut total = 0.0;
    for layer in 0..stats.n_layers {
        let mut a_sum = 0.0;
        let mut u_sum = 0.0;
        for head in 0..stats.n_heads {
            let i = stats.idx(layer, head);
            a_sum += stats.sum_a[i] / stats.n_a[i].max(1) as f64;
            if stats.n_u[i] > 0 {
                u_sum += stats.sum_u[i] / stats.n_u[i] as f64;
            }
        }
        let a_bar = a_sum / stats.n_heads as f64;
        let u_bar = u_sum / stats.n_heads as f64;
        let score = a_bar - rho * u_bar;
        total += score;
        layers.push(LayerScore {
            layer,
            a_bar,
            u_bar,
            score,
        });
    }
    Ok(AttnScoreReport { rho, total, layers })
}

/// Fraction of greedy generations missing the closing thinking marker
/// within `max_new` tokens. Every prompt must end with the open marker.
pub fn endthink_rate(
    theta: &Checkpoint,
    prompts: &[TokenSequence],
    reg: &SpecialTokenRegistry,
    max_new: usize,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::EmptySet("no prompts".into()));
    }
    let mut missing = 0usize;
    for prompt in prompts {
        if prompt.ids.last() != Some(&reg.think_open) {
            return Err(Error::InvalidArgument(
                "endthink prompt must end with the think-open marker".into(),
            ));
        }
        let decoded = greedy_decode(theta, prompt, max_new, Some(reg.think_close))?;
        let closed = decoded.ids[prompt.len()..]
            .iter()
            .any(|&id| id == reg.think_close);
        if !closed {
            missing += 1;
        }
    }
    Ok(missing as f64 / prompts.len() as f64)
}

/// Monte-Carlo audit of the quadratic KL bound: over random (z, u) pairs
/// with ‖u‖₂ ≤ norm_cap, returns the worst KL / (‖u‖²/8).
pub fn kl_bound_check(trials: usize, norm_cap: f64, dim: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    if dim < 2 {
        return Err(Error::InvalidArgument("dim must be >= 2".into()));
    }
    if !(norm_cap > 0.0) {
        return Err(Error::InvalidArgument("norm_cap must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let z: Vec<f64> = (0..dim).map(|_| standard_normal(&mut rng)).collect();
        let mut u: Vec<f64> = (0..dim).map(|_| standard_normal(&mut rng)).collect();
        let n = norm2(&u);
        if n == 0.0 {
            continue;
        }
        let target = norm_cap * rng.gen::<f64>();
        for v in &mut u {
            *v *= target / n;
        }
        let zu: Vec<f64> = z.iter().zip(&u).map(|(a, b)| a + b).collect();
        let kl = kl_from_logits(&zu, &z)?;
        let bound = target * target / 8.0;
        if bound > 0.0 {
            worst = worst.max(kl / bound);
        }
    }
    Ok(worst)
}
