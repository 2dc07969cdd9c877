//! Dependency-aware autoregressive ordering over multi-scale tokens:
//! per-token decoding numbers, the strict-predecessor attention mask,
//! conditional model inputs, and the window partition that lets one
//! trained plan generalize across resolutions.
//!
//! Scale i (1-based, coarsest first) splits its row-major token list
//! into n_i = 2^(i+1) contiguous segments; all tokens of one segment
//! share one decoding number, and numbers accumulate across scales, so
//! every coarser token strictly precedes every finer token. When a
//! scale's token count is not divisible by n_i, the first
//! (count mod n_i) segments carry one extra token and trailing segments
//! may be empty.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::tokenizer::{ScaleEntry, ScaleLayout};

// ---------------------------------------------------------------------------
// Order plan
// ---------------------------------------------------------------------------

/// One segment's slice of the flattened token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentSpan {
    /// First token position (flatten order).
    pub start: usize,
    pub len: usize,
}

/// The complete decoding-order description for one token layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderPlan {
    /// Decoding number per token, indexed by flatten position.
    pub order: Vec<u32>,
    /// Row-major L x L strict-predecessor mask: entry (i, j) says token i
    /// may attend to token j.
    pub mask: Vec<bool>,
    pub segments_per_scale: Vec<usize>,
    /// Cumulative segment counts: scale i's numbers start at offsets[i].
    pub offsets: Vec<usize>,
    /// Total number of order levels (including levels left empty by the
    /// remainder rule).
    pub levels: usize,
    /// Per scale, per segment: which tokens hold that decoding number.
    pub segments: Vec<Vec<SegmentSpan>>,
    /// Conditional-input source per token position; `None` means the
    /// learnable start token.
    pub sources: Vec<Option<usize>>,
    pub layout: ScaleLayout,
}

impl OrderPlan {
    pub fn num_tokens(&self) -> usize {
        self.order.len()
    }

    /// Distinct decoding numbers that actually hold tokens, ascending.
    pub fn populated_levels(&self) -> Vec<u32> {
        let mut seen = vec![false; self.levels];
        for &o in &self.order {
            seen[o as usize] = true;
        }
        (0..self.levels as u32)
            .filter(|&v| seen[v as usize])
            .collect()
    }

    /// Token positions with decoding number strictly below `cut`.
    pub fn tokens_below(&self, cut: u32) -> Vec<usize> {
        (0..self.order.len())
            .filter(|&t| self.order[t] < cut)
            .collect()
    }
}

fn segment_spans(entry: &ScaleEntry, n: usize) -> Vec<SegmentSpan> {
    let base = entry.len / n;
    let extra = entry.len % n;
    let mut spans = Vec::with_capacity(n);
    let mut pos = entry.offset;
    for s in 0..n {
        let len = base + usize::from(s < extra);
        spans.push(SegmentSpan { start: pos, len });
        pos += len;
    }
    spans
}

/// Strict pairwise-order mask M[i][j] = (o[i] > o[j]).
pub fn build_mask(order: &[u32]) -> Vec<bool> {
    let l = order.len();
    let mut m = vec![false; l * l];
    for i in 0..l {
        for j in 0..l {
            m[i * l + j] = order[i] > order[j];
        }
    }
    m
}

/// Build the decoding order, mask, and conditional-input sources for a
/// token layout.
pub fn build_order(layout: &ScaleLayout) -> Result<OrderPlan> {
    if layout.entries.is_empty() {
        return Err(Error::contract("build_order: empty layout"));
    }
    let num_scales = layout.entries.len();
    let segments_per_scale: Vec<usize> = (1..=num_scales).map(|i| 1usize << (i + 1)).collect();
    let mut offsets = Vec::with_capacity(num_scales);
    let mut acc = 0;
    for &n in &segments_per_scale {
        offsets.push(acc);
        acc += n;
    }
    let levels = acc;

    let mut order = vec![0u32; layout.total];
    let mut segments = Vec::with_capacity(num_scales);
    for (i, entry) in layout.entries.iter().enumerate() {
        let spans = segment_spans(entry, segments_per_scale[i]);
        for (s, span) in spans.iter().enumerate() {
            for t in span.start..span.start + span.len {
                order[t] = (offsets[i] + s) as u32;
            }
        }
        segments.push(spans);
    }

    let sources = conditional_sources(layout, &segments)?;
    let mask = build_mask(&order);
    Ok(OrderPlan {
        order,
        mask,
        segments_per_scale,
        offsets,
        levels,
        segments,
        sources,
        layout: layout.clone(),
    })
}

/// Where each token's model input comes from: the same intra-segment
/// position one segment earlier; for a scale's first segment, the
/// spatial parent resampled into the previous scale's last non-empty
/// segment; for the very first segment, the start token.
fn conditional_sources(
    layout: &ScaleLayout,
    segments: &[Vec<SegmentSpan>],
) -> Result<Vec<Option<usize>>> {
    let mut sources = vec![None; layout.total];
    for (i, entry) in layout.entries.iter().enumerate() {
        let spans = &segments[i];
        for (s, span) in spans.iter().enumerate() {
            if span.len == 0 {
                continue;
            }
            if s > 0 {
                let prev = &spans[s - 1];
                if prev.len < span.len {
                    return Err(Error::contract(
                        "segment lengths must be non-increasing within a scale",
                    ));
                }
                for j in 0..span.len {
                    sources[span.start + j] = Some(prev.start + j);
                }
            } else if i > 0 {
                let prev_entry = &layout.entries[i - 1];
                let last = segments[i - 1]
                    .iter()
                    .rev()
                    .find(|sp| sp.len > 0)
                    .ok_or_else(|| {
                        Error::contract(format!("scale {} has no populated segment", i - 1))
                    })?;
                for j in 0..span.len {
                    let pos = span.start + j - entry.offset;
                    let (r, c) = (pos / entry.width, pos % entry.width);
                    let pr = r * prev_entry.height / entry.height;
                    let pc = c * prev_entry.width / entry.width;
                    let parent = prev_entry.offset + pr * prev_entry.width + pc;
                    let clamped = parent.clamp(last.start, last.start + last.len - 1);
                    sources[span.start + j] = Some(clamped);
                }
            }
        }
    }
    Ok(sources)
}

// ---------------------------------------------------------------------------
// Conditional inputs
// ---------------------------------------------------------------------------

/// The reordered model-input sequence. The permutation maps sequence
/// position to original token position; segment construction makes it
/// the identity, which the constructor asserts rather than assumes.
pub struct ConditionalSequence {
    /// [B, L, C] input embeddings.
    pub inputs: NodeId,
    pub permutation: Vec<usize>,
}

/// Assemble per-token model inputs from quantized embeddings and the
/// learnable start token, following `plan.sources`.
pub fn build_conditional_inputs(
    g: &mut Graph,
    y_q: NodeId,
    plan: &OrderPlan,
    start: NodeId,
) -> Result<ConditionalSequence> {
    let yv = g.value(y_q);
    if yv.rank() != 3 || yv.shape()[1] != plan.num_tokens() {
        return Err(Error::shape(format!(
            "conditional inputs: y_q {:?} vs plan over {} tokens",
            yv.shape(),
            plan.num_tokens()
        )));
    }
    let (b, l, c) = (yv.shape()[0], yv.shape()[1], yv.shape()[2]);
    let sv = g.value(start);
    if sv.shape() != [c] {
        return Err(Error::shape(format!(
            "start token shape {:?}, expected [{c}]",
            sv.shape()
        )));
    }

    let mut permutation: Vec<usize> = (0..l).collect();
    permutation.sort_by_key(|&t| (plan.order[t], t));
    debug_assert!(permutation.iter().enumerate().all(|(a, &b)| a == b));

    let selected = g.select_tokens(y_q, &plan.sources)?;
    let mut indicator = Tensor::zeros(&[b, l, c]);
    {
        let id = indicator.data_mut();
        for bb in 0..b {
            for (t, src) in plan.sources.iter().enumerate() {
                if src.is_none() {
                    let base = (bb * l + t) * c;
                    for v in &mut id[base..base + c] {
                        *v = 1.0;
                    }
                }
            }
        }
    }
    let ind = g.constant(indicator);
    let zeros = g.constant(Tensor::zeros(&[b, l, c]));
    let start_rows = g.add_suffix(zeros, start)?;
    let masked_start = g.mul(ind, start_rows)?;
    let inputs = g.add(selected, masked_start)?;
    Ok(ConditionalSequence {
        inputs,
        permutation,
    })
}

// ---------------------------------------------------------------------------
// Window partition
// ---------------------------------------------------------------------------

/// Token groups for window-based resolution generalization. Every group
/// is a spatially co-located stack of windows, one per scale, and reads
/// as a mini-image with the shared `group_layout`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPartition {
    /// Flatten-order token indices per group, group-local flatten order
    /// inside each.
    pub groups: Vec<Vec<usize>>,
    /// The per-group token layout (identical across groups).
    pub group_layout: ScaleLayout,
    /// Group grid (rows, cols) in window units.
    pub grid: (usize, usize),
}

impl WindowPartition {
    /// Scatter per-group sequences back into flatten order.
    pub fn reassemble<T: Copy + Default>(&self, per_group: &[Vec<T>], total: usize) -> Result<Vec<T>> {
        if per_group.len() != self.groups.len() {
            return Err(Error::contract(format!(
                "{} group payloads for {} groups",
                per_group.len(),
                self.groups.len()
            )));
        }
        let mut out = vec![T::default(); total];
        let mut seen = vec![false; total];
        for (group, payload) in self.groups.iter().zip(per_group) {
            if group.len() != payload.len() {
                return Err(Error::contract(format!(
                    "group of {} tokens got {} values",
                    group.len(),
                    payload.len()
                )));
            }
            for (&t, &v) in group.iter().zip(payload) {
                if t >= total || seen[t] {
                    return Err(Error::contract("window partition is not a bijection"));
                }
                seen[t] = true;
                out[t] = v;
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::contract("window partition misses tokens"));
        }
        Ok(out)
    }
}

/// Split a token layout into spatially co-located window groups.
/// `window_sides` is coarsest first, matching the layout.
pub fn window_partition(layout: &ScaleLayout, window_sides: &[usize]) -> Result<WindowPartition> {
    if window_sides.len() != layout.entries.len() {
        return Err(Error::shape(format!(
            "{} window sides for {} scales",
            window_sides.len(),
            layout.entries.len()
        )));
    }
    let mut grid = None;
    for (entry, &ws) in layout.entries.iter().zip(window_sides) {
        if ws == 0 || entry.height % ws != 0 || entry.width % ws != 0 {
            return Err(Error::shape(format!(
                "scale /{} grid {}x{} not divisible by window side {ws}",
                entry.factor, entry.height, entry.width
            )));
        }
        let g = (entry.height / ws, entry.width / ws);
        match grid {
            None => grid = Some(g),
            Some(prev) if prev == g => {}
            Some(prev) => {
                return Err(Error::shape(format!(
                    "window grids disagree across scales: {prev:?} vs {g:?}"
                )));
            }
        }
    }
    let (rows, cols) = grid.unwrap();

    let mut group_entries = Vec::with_capacity(layout.entries.len());
    let mut offset = 0;
    for (entry, &ws) in layout.entries.iter().zip(window_sides) {
        group_entries.push(ScaleEntry {
            factor: entry.factor,
            height: ws,
            width: ws,
            offset,
            len: ws * ws,
        });
        offset += ws * ws;
    }
    let group_layout = ScaleLayout {
        entries: group_entries,
        total: offset,
    };

    let mut groups = Vec::with_capacity(rows * cols);
    for gr in 0..rows {
        for gc in 0..cols {
            let mut idx = Vec::with_capacity(group_layout.total);
            for (entry, &ws) in layout.entries.iter().zip(window_sides) {
                for r in 0..ws {
                    for c in 0..ws {
                        let row = gr * ws + r;
                        let col = gc * ws + c;
                        idx.push(entry.offset + row * entry.width + col);
                    }
                }
            }
            groups.push(idx);
        }
    }
    Ok(WindowPartition {
        groups,
        group_layout,
        grid: (rows, cols),
    })
}

/// Gather one group's tokens from a [B, L, C] sequence into [B, Lg, C].
pub fn gather_group(g: &mut Graph, seq: NodeId, group: &[usize]) -> Result<NodeId> {
    let sources: Vec<Option<usize>> = group.iter().map(|&t| Some(t)).collect();
    g.select_tokens(seq, &sources)
}

// ---------------------------------------------------------------------------
