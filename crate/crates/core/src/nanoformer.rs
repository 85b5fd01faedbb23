//! Minimal instrumented decoder-only transformer forward engine.
//!
//! Pre-norm residual blocks with LayerNorm, learned absolute positional
//! embeddings, scaled dot-product attention with a strict causal mask (no
//! attention biases), FFN = W_out·GELU(W_in·h + b_in) + b_out with exact-erf
//! GELU, untied lm head. Arithmetic accumulates in f64 over f32 weights.
//!
//! Capture hooks record the exact vector each merged weight matrix
//! multiplies: the post-norm hidden state for `attn_in` and `ffn_in`, the
//! concatenated head outputs for `attn_o_in`, and the post-activation vector
//! for `ffn_act`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};
use crate::tensorstore::{Checkpoint, ModelConfig};

/// Validated token id sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, config: &ModelConfig) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if ids.len() > config.max_seq {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: config.max_seq,
            });
        }
        for &id in &ids {
            if id as usize >= config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: config.vocab_size,
                });
            }
        }
        Ok(TokenSequence { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Where a feature vector is captured inside a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum CaptureSite {
    /// Shared input of W_Q / W_K / W_V (post-ln1 hidden state).
    AttnIn,
    /// Input of W_O (concatenated head outputs).
    AttnOIn,
    /// Input of W_in (post-ln2 hidden state).
    FfnIn,
    /// Input of W_out (post-activation vector).
    FfnAct,
}

impl CaptureSite {
    pub const ALL: [CaptureSite; 4] = [
        CaptureSite::AttnIn,
        CaptureSite::AttnOIn,
        CaptureSite::FfnIn,
        CaptureSite::FfnAct,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            CaptureSite::AttnIn => "attn_in",
            CaptureSite::AttnOIn => "attn_o_in",
            CaptureSite::FfnIn => "ffn_in",
            CaptureSite::FfnAct => "ffn_act",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "attn_in" => Some(CaptureSite::AttnIn),
            "attn_o_in" => Some(CaptureSite::AttnOIn),
            "ffn_in" => Some(CaptureSite::FfnIn),
            "ffn_act" => Some(CaptureSite::FfnAct),
            _ => None,
        }
    }

    /// Input dimension of the weight fed by this site.
    pub fn dim(&self, config: &ModelConfig) -> usize {
        match self {
            CaptureSite::FfnAct => config.d_ff,
            _ => config.d_model,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CapturePoint {
    pub layer: usize,
    pub site: CaptureSite,
}

impl CapturePoint {
    pub fn new(layer: usize, site: CaptureSite) -> Self {
        CapturePoint { layer, site }
    }
}

/// Output of a single instrumented forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Per-position logits, `[seq_len][vocab_size]`.
    pub logits: Vec<Vec<f64>>,
    /// Captured per-position feature vectors for each requested point.
    pub features: BTreeMap<CapturePoint, Vec<Vec<f64>>>,
    /// Row-stochastic causal attention probabilities per (layer, head).
    pub attn: BTreeMap<(usize, usize), Mat>,
}

/// f64 weights unpacked from a checkpoint once, reused across forwards.
pub struct Model {
    pub config: ModelConfig,
    embed_tok: Mat,
    embed_pos: Mat,
    layers: Vec<LayerWeights>,
    final_ln: (Vec<f64>, Vec<f64>),
    lmhead: Mat,
}

struct LayerWeights {
    ln1: (Vec<f64>, Vec<f64>),
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
    ln2: (Vec<f64>, Vec<f64>),
    win: Mat,
    bin: Vec<f64>,
    wout: Mat,
    bout: Vec<f64>,
}

fn vec_f64(data: &[f32]) -> Vec<f64> {
    data.iter().map(|&v| v as f64).collect()
}

impl Model {
    pub fn new(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.validate()?;
        let cfg = ckpt.config.clone();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let t = |name: String| ckpt.tensor(&name);
            layers.push(LayerWeights {
                ln1: (
                    vec_f64(&t(format!("layer.{i}.ln1.gamma"))?.data),
                    vec_f64(&t(format!("layer.{i}.ln1.beta"))?.data),
                ),
                wq: t(format!("layer.{i}.attn.wq"))?.to_mat(),
                wk: t(format!("layer.{i}.attn.wk"))?.to_mat(),
                wv: t(format!("layer.{i}.attn.wv"))?.to_mat(),
                wo: t(format!("layer.{i}.attn.wo"))?.to_mat(),
                ln2: (
                    vec_f64(&t(format!("layer.{i}.ln2.gamma"))?.data),
                    vec_f64(&t(format!("layer.{i}.ln2.beta"))?.data),
                ),
                win: t(format!("layer.{i}.ffn.win"))?.to_mat(),
                bin: vec_f64(&t(format!("layer.{i}.ffn.bin"))?.data),
                wout: t(format!("layer.{i}.ffn.wout"))?.to_mat(),
                bout: vec_f64(&t(format!("layer.{i}.ffn.bout"))?.data),
            });
        }
        Ok(Model {
            embed_tok: ckpt.tensor("embed.tok")?.to_mat(),
            embed_pos: ckpt.tensor("embed.pos")?.to_mat(),
            layers,
            final_ln: (
                vec_f64(&ckpt.tensor("final_ln.gamma")?.data),
                vec_f64(&ckpt.tensor("final_ln.beta")?.data),
            ),
            lmhead: ckpt.tensor("lmhead.w")?.to_mat(),
            config: cfg,
        })
    }

    pub fn forward(
        &self,
        tokens: &TokenSequence,
        want_features: &[CaptureSite],
        want_attn: bool,
    ) -> Result<ForwardTrace> {
        let cfg = &self.config;
        if tokens.len() > cfg.max_seq {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: cfg.max_seq,
            });
        }
        for &id in &tokens.ids {
            if id as usize >= cfg.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: cfg.vocab_size,
                });
            }
        }
        let seq = tokens.len();
        let d = cfg.d_model;
        let dh = cfg.d_head;
        let scale = 1.0 / (dh as f64).sqrt();
        let want = |site: CaptureSite| want_features.contains(&site);

        let mut features: BTreeMap<CapturePoint, Vec<Vec<f64>>> = BTreeMap::new();
        let mut attn_maps: BTreeMap<(usize, usize), Mat> = BTreeMap::new();

        // Token + positional embeddings.
        let mut h: Vec<Vec<f64>> = (0..seq)
            .map(|t| {
                let tok = self.embed_tok.row(tokens.ids[t] as usize);
                let pos = self.embed_pos.row(t);
                tok.iter().zip(pos).map(|(a, b)| a + b).collect()
            })
            .collect();

        for (li, layer) in self.layers.iter().enumerate() {
            // Attention block.
            let x: Vec<Vec<f64>> = h
                .iter()
                .map(|row| layer_norm(row, &layer.ln1.0, &layer.ln1.1, cfg.norm_eps))
                .collect();
            if want(CaptureSite::AttnIn) {
                features.insert(CapturePoint::new(li, CaptureSite::AttnIn), x.clone());
            }
            let q: Vec<Vec<f64>> = x.iter().map(|v| layer.wq.matvec(v)).collect();
            let k: Vec<Vec<f64>> = x.iter().map(|v| layer.wk.matvec(v)).collect();
            let v: Vec<Vec<f64>> = x.iter().map(|v| layer.wv.matvec(v)).collect();

            let mut concat: Vec<Vec<f64>> = vec![vec![0.0; d]; seq];
            for head in 0..cfg.n_heads {
                let lo = head * dh;
                let hi = lo + dh;
                let mut probs = if want_attn {
                    Some(Mat::zeros(seq, seq))
                } else {
                    None
                };
                for t in 0..seq {
                    let qh = &q[t][lo..hi];
                    let mut scores: Vec<f64> = (0..=t)
                        .map(|tau| scale * dot(qh, &k[tau][lo..hi]))
                        .collect();
                    softmax_inplace(&mut scores);
                    if let Some(p) = probs.as_mut() {
                        for (tau, &pr) in scores.iter().enumerate() {
                            p.set(t, tau, pr);
                        }
                    }
                    let out = &mut concat[t][lo..hi];
                    for (tau, &pr) in scores.iter().enumerate() {
                        let vh = &v[tau][lo..hi];
                        for (o, &vv) in out.iter_mut().zip(vh) {
                            *o += pr * vv;
                        }
                    }
                }
                if let Some(p) = probs {
                    attn_maps.insert((li, head), p);
                }
            }
            if want(CaptureSite::AttnOIn) {
                features.insert(CapturePoint::new(li, CaptureSite::AttnOIn), concat.clone());
            }
            for t in 0..seq {
                let o = layer.wo.matvec(&concat[t]);
                for (hh, oo) in h[t].iter_mut().zip(&o) {
                    *hh += oo;
                }
            }

            // FFN block.
            let y: Vec<Vec<f64>> = h
                .iter()
                .map(|row| layer_norm(row, &layer.ln2.0, &layer.ln2.1, cfg.norm_eps))
                .collect();
            if want(CaptureSite::FfnIn) {
                features.insert(CapturePoint::new(li, CaptureSite::FfnIn), y.clone());
            }
            let mut act: Vec<Vec<f64>> = Vec::with_capacity(seq);
            for row in &y {
                let mut a = layer.win.matvec(row);
                for (ai, bi) in a.iter_mut().zip(&layer.bin) {
                    *ai = gelu(*ai + bi);
                }
                act.push(a);
            }
            if want(CaptureSite::FfnAct) {
                features.insert(CapturePoint::new(li, CaptureSite::FfnAct), act.clone());
            }
            for t in 0..seq {
                let o = layer.wout.matvec(&act[t]);
                for ((hh, oo), bb) in h[t].iter_mut().zip(&o).zip(&layer.bout) {
                    *hh += oo + bb;
                }
            }
        }

        let mut logits = Vec::with_capacity(seq);
        for row in &h {
            let z = layer_norm(row, &self.final_ln.0, &self.final_ln.1, cfg.norm_eps);
            let l = self.lmhead.matvec(&z);
            if !l.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("logits".into()));
            }
            logits.push(l);
        }

        Ok(ForwardTrace {
            logits,
            features,
            attn: attn_maps,
        })
    }
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| g * (v - mean) * inv + b)
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn softmax_inplace(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Instrumented forward pass over a checkpoint.
pub fn forward(
    ckpt: &Checkpoint,
    tokens: &TokenSequence,
    want_features: &[CaptureSite],
    want_attn: bool,
) -> Result<ForwardTrace> {
    Model::new(ckpt)?.forward(tokens, want_features, want_attn)
}

/// Greedy argmax decoding; ties break toward the lowest token id. The stop
/// token, when hit, is appended before decoding ends.
pub fn greedy_decode(
    ckpt: &Checkpoint,
    prompt: &TokenSequence,
    max_new: usize,
    stop_id: Option<u32>,
) -> Result<TokenSequence> {
    let model = Model::new(ckpt)?;
    if prompt.len() + max_new > model.config.max_seq {
        return Err(Error::CapacityExceeded(format!(
            "prompt {} + max_new {max_new} exceeds max_seq {}",
            prompt.len(),
            model.config.max_seq
        )));
    }
    let mut ids = prompt.ids.clone();
    for _ in 0..max_new {
        let seq = TokenSequence {
            ids: ids.clone(),
        };
        let trace = model.forward(&seq, &[], false)?;
        let last = trace.logits.last().expect("nonempty sequence");
        let mut best = 0usize;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        ids.push(best as u32);
        if stop_id == Some(best as u32) {
            break;
        }
    }
    Ok(TokenSequence { ids })
}

/// Numerically stable log-softmax of a logits row.
pub fn next_token_log_softmax(logits_row: &[f64]) -> Result<Vec<f64>> {
    if logits_row.is_empty() {
        return Err(Error::InvalidArgument("empty logits row".into()));
    }
    if !logits_row.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("logits row".into()));
    }
    let max = logits_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits_row
        .iter()
        .map(|v| (v - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    Ok(logits_row.iter().map(|v| v - lse).collect())
}
