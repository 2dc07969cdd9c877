//! Codebook quantization: hard nearest-neighbor assignment with
//! straight-through gradients, the temperature-controlled soft
//! relaxation, and the codebook/commitment loss.
//!
//! The plain nearest-neighbor scan here computes squared distances with
//! the same expanded form and summation order as the graph's distance
//! op, so the hard index always agrees with argmax of the soft
//! distribution, for any temperature.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Differentiable soft assignment over codewords.
pub struct SoftAssignment {
    /// [B, L, K], rows sum to 1.
    pub p_soft: NodeId,
    /// [B, L, K] squared L2 distances.
    pub distances: NodeId,
    pub tau: f64,
}

/// Hard nearest-codeword assignment.
pub struct HardAssignment {
    /// [B, L, C]; forward value is the assigned codeword rows bit-exactly,
    /// backward routes the gradient straight through to the encoder output.
    pub y_q: NodeId,
    /// [B, L, C] gathered codeword rows with gradient flowing into the
    /// codebook; used by the codebook loss, never by reconstruction.
    pub y_q_codebook: NodeId,
    /// Row-major [B, L] codeword indices.
    pub y_ind: Vec<u32>,
    pub batch: usize,
    pub len: usize,
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Draw a [K, C] codebook with rows uniform in [-1/K, 1/K], re-drawing
/// any row that exactly collides with an earlier one.
pub fn init_codebook<R: Rng>(k: usize, c: usize, rng: &mut R) -> Result<Tensor> {
    if k < 2 || c == 0 {
        return Err(Error::contract(format!(
            "codebook needs k >= 2 and c >= 1, got {k}x{c}"
        )));
    }
    let bound = 1.0 / k as f64;
    let mut data = vec![0.0f64; k * c];
    for row in 0..k {
        loop {
            for v in &mut data[row * c..(row + 1) * c] {
                *v = rng.random_range(-bound..bound);
            }
            let dup = (0..row).any(|prev| {
                data[prev * c..(prev + 1) * c] == data[row * c..(row + 1) * c]
            });
            if !dup {
                break;
            }
        }
    }
    Tensor::new(vec![k, c], data)
}

// ---------------------------------------------------------------------------
// Assignment
// ---------------------------------------------------------------------------

/// Nearest-codeword index per token with lowest-index tie-break.
/// `y` is [B, L, C] (or any [.., C] with numel divisible by C).
pub fn nearest_indices(y: &Tensor, cb: &Tensor) -> Result<Vec<u32>> {
    if cb.rank() != 2 {
        return Err(Error::shape(format!(
            "codebook must be [K, C], got {:?}",
            cb.shape()
        )));
    }
    let k = cb.shape()[0];
    let c = cb.shape()[1];
    if y.shape().last() != Some(&c) {
        return Err(Error::shape(format!(
            "token dim {:?} does not end in codebook width {c}",
            y.shape()
        )));
    }
    let tokens = y.numel() / c;
    let yd = y.data();
    let cd = cb.data();
    let mut cnorm = vec![0.0; k];
    for kk in 0..k {
        cnorm[kk] = cd[kk * c..(kk + 1) * c].iter().map(|v| v * v).sum();
    }
    let mut out = Vec::with_capacity(tokens);
    for t in 0..tokens {
        let yrow = &yd[t * c..(t + 1) * c];
        let ynorm: f64 = yrow.iter().map(|v| v * v).sum();
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for kk in 0..k {
            let crow = &cd[kk * c..(kk + 1) * c];
            let dot: f64 = yrow.iter().zip(crow).map(|(a, b)| a * b).sum();
            let d = (ynorm + cnorm[kk] - 2.0 * dot).max(0.0);
            if d < best_d {
                best_d = d;
                best = kk;
            }
        }
        out.push(best as u32);
    }
    Ok(out)
}

/// Embed indices as exact codeword rows, shape [batch, len, C].
pub fn embed_indices(cb: &Tensor, idx: &[u32], batch: usize, len: usize) -> Result<Tensor> {
    if cb.rank() != 2 {
        return Err(Error::shape(format!(
            "codebook must be [K, C], got {:?}",
            cb.shape()
        )));
    }
    let k = cb.shape()[0];
    let c = cb.shape()[1];
    if idx.len() != batch * len {
        return Err(Error::shape(format!(
            "{} indices for a {batch}x{len} token field",
            idx.len()
        )));
    }
    let cd = cb.data();
    let mut data = Vec::with_capacity(batch * len * c);
    for &i in idx {
        let i = i as usize;
        if i >= k {
            return Err(Error::contract(format!(
                "index {i} out of range for codebook of {k} rows"
            )));
        }
        data.extend_from_slice(&cd[i * c..(i + 1) * c]);
    }
    Tensor::new(vec![batch, len, c], data)
}

/// Quantize every token of `y` [B, L, C] to its nearest codeword.
pub fn assign_hard(g: &mut Graph, y: NodeId, cb: NodeId) -> Result<HardAssignment> {
    let yv = g.value(y);
    if yv.rank() != 3 {
        return Err(Error::shape(format!(
            "assign_hard expects [B, L, C] tokens, got {:?}",
            yv.shape()
        )));
    }
    let (batch, len, c) = (yv.shape()[0], yv.shape()[1], yv.shape()[2]);
    let cbv = g.value(cb);
    if cbv.rank() != 2 || cbv.shape()[1] != c {
        return Err(Error::shape(format!(
            "codebook {:?} does not match token width {c}",
            cbv.shape()
        )));
    }
    let y_ind = nearest_indices(yv, cbv)?;
    let usize_idx: Vec<usize> = y_ind.iter().map(|&i| i as usize).collect();
    let gathered = g.gather_rows(cb, &usize_idx)?;
    let y_q_codebook = g.reshape(gathered, &[batch, len, c])?;
    let y_q = g.ste(y, y_q_codebook)?;
    Ok(HardAssignment {
        y_q,
        y_q_codebook,
        y_ind,
        batch,
        len,
    })
}

/// Temperature-τ softmax over negative squared distances.
pub fn soft_distribution(g: &mut Graph, y: NodeId, cb: NodeId, tau: f64) -> Result<SoftAssignment> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::contract(format!(
            "soft_distribution needs tau > 0, got {tau}"
        )));
    }
    let distances = g.sq_dist(y, cb)?;
    let scaled = g.scale(distances, -1.0 / tau);
    let p_soft = g.softmax(scaled, 2)?;
    Ok(SoftAssignment {
        p_soft,
        distances,
        tau,
    })
}

/// VQ codebook loss: ||sg(y) - y_q||^2 + beta * ||y - sg(y_q)||^2,
/// summed over channels and averaged over tokens. The first term moves
/// only the codebook, the second only the encoder.
pub fn codebook_loss(g: &mut Graph, y: NodeId, hard: &HardAssignment, beta: f64) -> Result<NodeId> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::contract(format!(
            "codebook_loss needs beta >= 0, got {beta}"
        )));
    }
    let tokens = (hard.batch * hard.len) as f64;
    let y_sg = g.stop_grad(y);
    let q_sg = g.stop_grad(hard.y_q_codebook);

    let d_cb = g.sub(y_sg, hard.y_q_codebook)?;
    let sq_cb = g.mul(d_cb, d_cb)?;
    let term_cb = g.sum_all(sq_cb);

    let d_commit = g.sub(y, q_sg)?;
    let sq_commit = g.mul(d_commit, d_commit)?;
    let term_commit = g.sum_all(sq_commit);

    let scaled_commit = g.scale(term_commit, beta);
    let total = g.add(term_cb, scaled_commit)?;
    Ok(g.scale(total, 1.0 / tokens))
}

// ---------------------------------------------------------------------------
// Usage statistics
// ---------------------------------------------------------------------------

/// Codeword usage counts and normalized entropy H/log2(K).
pub fn usage_histogram(indices: &[u32], k: usize) -> Result<(Vec<u64>, f64)> {
    if k < 2 {
        return Err(Error::contract("usage_histogram needs k >= 2"));
    }
    let mut counts = vec![0u64; k];
    for &i in indices {
        let i = i as usize;
        if i >= k {
            return Err(Error::contract(format!(
                "index {i} out of range for {k} codewords"
            )));
        }
        counts[i] += 1;
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Ok((counts, 0.0));
    }
    let mut h = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.log2();
        }
    }
    Ok((counts, h / (k as f64).log2()))
}

// ---------------------------------------------------------------------------
