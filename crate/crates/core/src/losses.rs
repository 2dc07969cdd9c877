//! The rate-distortion objective: differentiable soft rate, measured
//! hard rate, distortion assembly, the Lagrangian combination, and the
//! piecewise temperature/lambda schedule.
//!
//! Rate is measured in bits everywhere (log base 2), per token inside
//! the objective, so training estimates line up with what the range
//! coder actually writes.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::vq::HardAssignment;

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Low,
    High,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Regime::Low => write!(f, "low"),
            Regime::High => write!(f, "high"),
        }
    }
}

/// One (τ, λ) operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RDConfig {
    pub lambda: f64,
    pub tau: f64,
    pub regime: Regime,
}

const LOW_LAMBDAS: [f64; 3] = [4.8, 7.2, 12.0];
const HIGH_LAMBDAS: [f64; 2] = [0.8, 1.2];

/// The closed schedule table: low bitrate pairs τ = 0.1 with
/// λ ∈ {4.8, 7.2, 12}, high bitrate pairs τ = 0.01 with λ ∈ {0.8, 1.2}.
pub fn schedule(regime: &str, level: usize) -> Result<RDConfig> {
    match regime {
        "low" => LOW_LAMBDAS
            .get(level)
            .map(|&lambda| RDConfig {
                lambda,
                tau: 0.1,
                regime: Regime::Low,
            })
            .ok_or_else(|| {
                Error::config(format!(
                    "low-regime level {level} out of range 0..{}",
                    LOW_LAMBDAS.len()
                ))
            }),
        "high" => HIGH_LAMBDAS
            .get(level)
            .map(|&lambda| RDConfig {
                lambda,
                tau: 0.01,
                regime: Regime::High,
            })
            .ok_or_else(|| {
                Error::config(format!(
                    "high-regime level {level} out of range 0..{}",
                    HIGH_LAMBDAS.len()
                ))
            }),
        other => Err(Error::config(format!(
            "unknown schedule regime {other:?} (expected \"low\" or \"high\")"
        ))),
    }
}

/// Every valid (regime, level) pair in the table.
pub fn schedule_entries() -> Vec<(&'static str, usize)> {
    let mut v: Vec<(&'static str, usize)> =
        (0..LOW_LAMBDAS.len()).map(|i| ("low", i)).collect();
    v.extend((0..HIGH_LAMBDAS.len()).map(|i| ("high", i)));
    v
}

// ---------------------------------------------------------------------------
// Rate terms
// ---------------------------------------------------------------------------

/// Differentiable rate estimate in bits per token:
/// -E_{b,l}[ sum_k p_soft * log2 q ].
pub fn rate_soft(g: &mut Graph, p_soft: NodeId, log_q: NodeId) -> Result<NodeId> {
    let pv = g.value(p_soft);
    if pv.rank() != 3 {
        return Err(Error::shape(format!(
            "rate_soft expects [B, L, K] distributions, got {:?}",
            pv.shape()
        )));
    }
    let tokens = (pv.shape()[0] * pv.shape()[1]) as f64;
    let nats = g.cross_entropy(p_soft, log_q)?;
    Ok(g.scale(nats, 1.0 / (tokens * LN_2)))
}

/// Measured coding cost in total bits: -sum log2 q at the chosen indices.
/// Not differentiable; used for reporting and as the coder's target.
pub fn rate_hard(y_ind: &[u32], log_q: &Tensor) -> Result<f64> {
    if log_q.rank() != 3 {
        return Err(Error::shape(format!(
            "rate_hard expects [B, L, K] log-probabilities, got {:?}",
            log_q.shape()
        )));
    }
    let (b, l, k) = (log_q.shape()[0], log_q.shape()[1], log_q.shape()[2]);
    if y_ind.len() != b * l {
        return Err(Error::shape(format!(
            "{} indices for a {b}x{l} token field",
            y_ind.len()
        )));
    }
    let qd = log_q.data();
    let mut bits = 0.0;
    for (t, &i) in y_ind.iter().enumerate() {
        if i as usize >= k {
            return Err(Error::contract(format!(
                "index {i} out of range for {k} symbols"
            )));
        }
        bits -= qd[t * k + i as usize] / LN_2;
    }
    Ok(bits)
}

// ---------------------------------------------------------------------------
// Distortion
// ---------------------------------------------------------------------------

/// Distortion assembly: pixel MSE plus the codebook loss, with an
/// optional extra term (a hook for perceptual losses, unused by the
/// shipped configs).
pub struct Distortion {
    pub total: NodeId,
    pub mse: NodeId,
    pub codebook: NodeId,
}

pub fn distortion(
    g: &mut Graph,
    x: NodeId,
    x_hat: NodeId,
    y: NodeId,
    hard: &HardAssignment,
    beta: f64,
    extra: Option<NodeId>,
) -> Result<Distortion> {
    let mse = g.mse(x_hat, x)?;
    let codebook = crate::vq::codebook_loss(g, y, hard, beta)?;
    let mut total = g.add(mse, codebook)?;
    if let Some(e) = extra {
        total = g.add(total, e)?;
    }
    Ok(Distortion {
        total,
        mse,
        codebook,
    })
}

// ---------------------------------------------------------------------------
// Lagrangian and reporting
// ---------------------------------------------------------------------------

/// Scalar loss summary for one step. `rate_bits_estimate` is the soft
/// rate in bits per token; `total` always equals
/// `distortion + lambda * rate_bits_estimate`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub rate_bits_estimate: f64,
    pub rate_bpp: f64,
    pub distortion: f64,
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

/// Combine distortion and rate into the Lagrangian node and its report.
/// `tokens_per_image` and `pixels_per_image` convert the per-token rate
/// into bits per pixel for logging.
pub fn lagrangian(
    g: &mut Graph,
    dist: &Distortion,
    rate_bits_per_token: NodeId,
    rd: &RDConfig,
    tokens_per_image: usize,
    pixels_per_image: usize,
) -> Result<(NodeId, LossReport)> {
    let scaled_rate = g.scale(rate_bits_per_token, rd.lambda);
    let total = g.add(dist.total, scaled_rate)?;

    let rate = g.value(rate_bits_per_token).item()?;
    let d = g.value(dist.total).item()?;
    let mut components = BTreeMap::new();
    components.insert("mse".to_string(), g.value(dist.mse).item()?);
    components.insert("codebook".to_string(), g.value(dist.codebook).item()?);
    components.insert("lambda".to_string(), rd.lambda);
    components.insert("tau".to_string(), rd.tau);
    let report = LossReport {
        rate_bits_estimate: rate,
        rate_bpp: rate * tokens_per_image as f64 / pixels_per_image as f64,
        distortion: d,
        total: d + rd.lambda * rate,
        components,
    };
    debug_assert!(
        (g.value(total).item()? - report.total).abs() <= 1e-9 * (1.0 + report.total.abs())
    );
    Ok((total, report))
}

/// One row of the per-step training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRow {
    pub step: usize,
    pub rate_bits: f64,
    pub bpp: f64,
    pub mse: f64,
    pub codebook_loss: f64,
    pub total: f64,
}

pub const TRAIN_CSV_HEADER: &str = "step,rate_bits,bpp,mse,codebook_loss,total";

pub fn train_csv(rows: &[TrainRow]) -> String {
    let mut out = String::from(TRAIN_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.step, r.rate_bits, r.bpp, r.mse, r.codebook_loss, r.total
        ));
    }
    out
}

// ---------------------------------------------------------------------------
