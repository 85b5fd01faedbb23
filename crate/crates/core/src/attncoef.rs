//! Instruction-attention statistics and the per-head coefficient solve.
//!
//! On the directly merged model, every attention head accumulates a
//! normalized alignment a (attention mass flowing from constrained response
//! tokens onto the instruction span) and a leakage u (the same mass from
//! unrelated response tokens). The boxed quadratic surrogate with first-order
//! term g = ā − ρ·ū and diagonal curvature H̃ = 1 + ū has the closed-form
//! per-head solution α̃ = clip(g / H̃). Modules shared across heads (the FFN
//! matrices) take the mean over the layer's head coefficients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::nanoformer::{Model, TokenSequence};
use crate::tensorstore::Checkpoint;
use crate::vectors::{SubmoduleId, SubmoduleKind};

/// Index sets of an instruction-following sample: instruction tokens within
/// the prompt, constrained and unrelated tokens within the response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanSets {
    pub instruction: Vec<usize>,
    pub constrained: Vec<usize>,
    pub unrelated: Vec<usize>,
}

impl SpanSets {
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.instruction.is_empty() {
            return Err(Error::InvalidSpans("instruction span is empty".into()));
        }
        if self.constrained.is_empty() {
            return Err(Error::InvalidSpans("constrained span is empty".into()));
        }
        let mut seen = vec![0u8; seq_len];
        for (name, set) in [
            ("instruction", &self.instruction),
            ("constrained", &self.constrained),
            ("unrelated", &self.unrelated),
        ] {
            for &i in set {
                if i >= seq_len {
                    return Err(Error::InvalidSpans(format!(
                        "{name} index {i} out of range (len {seq_len})"
                    )));
                }
                if seen[i] != 0 {
                    return Err(Error::InvalidSpans(format!(
                        "index {i} appears in more than one span"
                    )));
                }
                seen[i] = 1;
            }
        }
        Ok(())
    }
}

/// Accumulated per-head alignment/leakage sums and sample counts.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStats {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Flattened per (layer, head): layer * n_heads + head.
    pub sum_a: Vec<f64>,
    pub n_a: Vec<u64>,
    pub sum_u: Vec<f64>,
    pub n_u: Vec<u64>,
}

impl HeadStats {
    pub fn zeros(n_layers: usize, n_heads: usize) -> Self {
        let n = n_layers * n_heads;
        HeadStats {
            n_layers,
            n_heads,
            sum_a: vec![0.0; n],
            n_a: vec![0; n],
            sum_u: vec![0.0; n],
            n_u: vec![0; n],
        }
    }

    #[inline]
    pub fn idx(&self, layer: usize, head: usize) -> usize {
        layer * self.n_heads + head
    }

    /// Field-wise addition; accumulation over sample subsets is associative.
    pub fn merge(&mut self, other: &HeadStats) {
        assert_eq!(self.n_layers, other.n_layers);
        assert_eq!(self.n_heads, other.n_heads);
        for i in 0..self.sum_a.len() {
            self.sum_a[i] += other.sum_a[i];
            self.n_a[i] += other.n_a[i];
            self.sum_u[i] += other.sum_u[i];
            self.n_u[i] += other.n_u[i];
        }
    }
}

/// Per-sample normalized alignment and leakage of one head's attention
/// matrix. Returns (a, Some(u)) or (a, None) when the unrelated set is empty.
pub fn head_sample_stats(att: &Mat, spans: &SpanSets) -> (f64, Option<f64>) {
    let norm_a = (spans.instruction.len() * spans.constrained.len()) as f64;
    let mut a = 0.0;
    for &t in &spans.constrained {
        for &tau in &spans.instruction {
            a += att.get(t, tau);
        }
    }
    a /= norm_a;
    let u = if spans.unrelated.is_empty() {
        None
    } else {
        let norm_u = (spans.instruction.len() * spans.unrelated.len()) as f64;
        let mut u = 0.0;
        for &t in &spans.unrelated {
            for &tau in &spans.instruction {
                u += att.get(t, tau);
            }
        }
        Some(u / norm_u)
    };
    (a, u)
}

/// Accumulate alignment/leakage statistics for every head over a sample set,
/// running the instrumented forward on the given (stage-1 merged) model.
///
/// Samples are processed in fixed-size chunks whose partial statistics are
/// folded in order, so the result is identical for any worker count.
pub fn accumulate_stats(
    merged: &Checkpoint,
    samples: &[(TokenSequence, SpanSets)],
) -> Result<HeadStats> {
    if samples.is_empty() {
        return Err(Error::EmptySet("no instruction samples".into()));
    }
    let model = Model::new(merged)?;
    let cfg = &model.config;
    for (tokens, spans) in samples {
        spans.validate(tokens.len())?;
    }

    use rayon::prelude::*;
    let partials: Vec<Result<HeadStats>> = samples
        .par_chunks(8)
        .map(|chunk| {
            let mut stats = HeadStats::zeros(cfg.n_layers, cfg.n_heads);
            for (tokens, spans) in chunk {
                let trace = model.forward(tokens, &[], true)?;
                for layer in 0..cfg.n_layers {
                    for head in 0..cfg.n_heads {
                        let att = &trace.attn[&(layer, head)];
                        let (a, u) = head_sample_stats(att, spans);
                        debug_assert!(a * spans.instruction.len() as f64 <= 1.0 + 1e-6);
                        let i = stats.idx(layer, head);
                        stats.sum_a[i] += a;
                        stats.n_a[i] += 1;
                        if let Some(u) = u {
                            debug_assert!(u * spans.instruction.len() as f64 <= 1.0 + 1e-6);
                            stats.sum_u[i] += u;
                            stats.n_u[i] += 1;
                        }
                    }
                }
            }
            Ok(stats)
        })
        .collect();

    let mut total = HeadStats::zeros(cfg.n_layers, cfg.n_heads);
    for p in partials {
        total.merge(&p?);
    }
    Ok(total)
}

/// Leakage trade-off and clip bounds for the coefficient solve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageTwoConfig {
    pub rho: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for StageTwoConfig {
    fn default() -> Self {
        StageTwoConfig {
            rho: 10.0,
            lower: 0.0,
            upper: 1.0,
        }
    }
}

impl StageTwoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(Error::InvalidArgument("rho must be > 0".into()));
        }
        if !(self.lower < self.upper) {
            return Err(Error::InvalidArgument(
                "lower bound must be below upper bound".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HeadCoefficient {
    pub layer: usize,
    pub head: usize,
    pub a_bar: f64,
    pub u_bar: f64,
    pub g: f64,
    pub h: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModuleCoefficient {
    pub layer: usize,
    pub kind: SubmoduleKind,
    pub alpha: f64,
}

/// Per-head scalars α̃ plus per-submodule scalars for head-shared modules.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientMap {
    pub rho: f64,
    pub bounds: (f64, f64),
    pub heads: Vec<HeadCoefficient>,
    pub modules: Vec<ModuleCoefficient>,
}

impl CoefficientMap {
    pub fn head_alpha(&self, layer: usize, head: usize) -> Option<f64> {
        self.heads
            .iter()
            .find(|h| h.layer == layer && h.head == head)
            .map(|h| h.alpha)
    }

    pub fn module_alpha(&self, id: &SubmoduleId) -> Option<f64> {
        self.modules
            .iter()
            .find(|m| m.layer == id.layer && m.kind == id.kind)
            .map(|m| m.alpha)
    }

    /// A map with unit coefficients everywhere; rain assembly with it
    /// reduces to the direct merge.
    pub fn unit(n_layers: usize, n_heads: usize) -> Self {
        let heads = (0..n_layers)
            .flat_map(|layer| {
                (0..n_heads).map(move |head| HeadCoefficient {
                    layer,
                    head,
                    a_bar: 0.0,
                    u_bar: 0.0,
                    g: 0.0,
                    h: 1.0,
                    alpha: 1.0,
                })
            })
            .collect();
        let modules = (0..n_layers)
            .flat_map(|layer| {
                [SubmoduleKind::FfnIn, SubmoduleKind::FfnOut]
                    .into_iter()
                    .map(move |kind| ModuleCoefficient {
                        layer,
                        kind,
                        alpha: 1.0,
                    })
            })
            .collect();
        CoefficientMap {
            rho: 0.0,
            bounds: (0.0, 1.0),
            heads,
            modules,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("coefficient map serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("scope,layer,head_or_kind,a_bar,u_bar,g,h,alpha\n");
        for h in &self.heads {
            s.push_str(&format!(
                "head,{},{},{},{},{},{},{}\n",
                h.layer, h.head, h.a_bar, h.u_bar, h.g, h.h, h.alpha
            ));
        }
        for m in &self.modules {
            s.push_str(&format!(
                "module,{},{},,,,,{}\n",
                m.layer,
                m.kind.tag(),
                m.alpha
            ));
        }
        s
    }
}

/// Closed-form boxed solve: per head ā = sum_a/n_a, ū = sum_u/n_u (0 when no
/// sample had an unrelated span), g = ā − ρ·ū, H̃ = 1 + ū,
/// α̃ = clip(g/H̃, bounds). FFN modules get the layer's head mean.
pub fn solve_coefficients(stats: &HeadStats, cfg: &StageTwoConfig) -> Result<CoefficientMap> {
    cfg.validate()?;
    if stats.sum_a.is_empty() {
        return Err(Error::EmptySet("empty head statistics".into()));
    }
    let mut heads = Vec::with_capacity(stats.sum_a.len());
    for layer in 0..stats.n_layers {
        for head in 0..stats.n_heads {
            let i = stats.idx(layer, head);
            if stats.n_a[i] == 0 {
                return Err(Error::EmptySet(format!(
                    "no alignment samples for layer {layer} head {head}"
                )));
            }
            let a_bar = stats.sum_a[i] / stats.n_a[i] as f64;
            let u_bar = if stats.n_u[i] > 0 {
                stats.sum_u[i] / stats.n_u[i] as f64
            } else {
                0.0
            };
            let g = a_bar - cfg.rho * u_bar;
            let h = 1.0 + u_bar;
            let alpha = (g / h).clamp(cfg.lower, cfg.upper);
            heads.push(HeadCoefficient {
                layer,
                head,
                a_bar,
                u_bar,
                g,
                h,
                alpha,
            });
        }
    }
    let mut modules = Vec::with_capacity(stats.n_layers * 2);
    for layer in 0..stats.n_layers {
        let layer_heads: Vec<f64> = heads
            .iter()
            .filter(|h| h.layer == layer)
            .map(|h| h.alpha)
            .collect();
        let mean = layer_heads.iter().sum::<f64>() / layer_heads.len() as f64;
        for kind in [SubmoduleKind::FfnIn, SubmoduleKind::FfnOut] {
            modules.push(ModuleCoefficient {
                layer,
                kind,
                alpha: mean,
            });
        }
    }
    Ok(CoefficientMap {
        rho: cfg.rho,
        bounds: (cfg.lower, cfg.upper),
        heads,
        modules,
    })
}

/// gᵀα − ½ αᵀ diag(H) α
pub fn qp_objective(alpha: &[f64], g: &[f64], h: &[f64]) -> Result<f64> {
    if alpha.len() != g.len() || alpha.len() != h.len() {
        return Err(Error::DimensionMismatch(format!(
            "qp_objective lengths {} / {} / {}",
            alpha.len(),
            g.len(),
            h.len()
        )));
    }
    Ok(alpha
        .iter()
        .zip(g.iter().zip(h))
        .map(|(&a, (&gi, &hi))| gi * a - 0.5 * hi * a * a)
        .sum())
}
