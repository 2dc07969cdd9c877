//! Multi-scale convolutional tokenizer: analysis transform with latent
//! taps at several downsampling depths, residual coarse-to-fine latent
//! hierarchy, flattening into one token sequence, and the mirrored
//! synthesis transform.
//!
//! Scale lists are always coarsest first: `scales[0]` lives on the
//! smallest grid and later scales store residuals against the
//! nearest-neighbor upsampling of the previous feature map.

use rand::Rng;

use crate::config::TokenizerConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{BoundParams, ParamSet};
use crate::tensor::Tensor;

pub const GN_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

/// One scale's slice of the flattened token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleEntry {
    pub factor: usize,
    pub height: usize,
    pub width: usize,
    pub offset: usize,
    pub len: usize,
}

/// Coarsest-first description of how scales pack into one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleLayout {
    pub entries: Vec<ScaleEntry>,
    pub total: usize,
}

impl ScaleLayout {
    /// Token layout for a padded image of the given size.
    pub fn for_image(cfg: &TokenizerConfig, padded_h: usize, padded_w: usize) -> Result<ScaleLayout> {
        let mut entries = Vec::with_capacity(cfg.num_scales);
        let mut offset = 0;
        for &factor in &cfg.factors_coarse_first() {
            if padded_h % factor != 0 || padded_w % factor != 0 {
                return Err(Error::shape(format!(
                    "{padded_h}x{padded_w} image is not divisible by scale factor {factor}"
                )));
            }
            let height = padded_h / factor;
            let width = padded_w / factor;
            let len = height * width;
            entries.push(ScaleEntry {
                factor,
                height,
                width,
                offset,
                len,
            });
            offset += len;
        }
        Ok(ScaleLayout {
            entries,
            total: offset,
        })
    }

    /// Grid dims per scale, coarsest first.
    pub fn grids(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|e| (e.height, e.width)).collect()
    }
}

/// Maximum bitrate under uniform coding of every token:
/// L * log2(K) / (H * W).
pub fn max_bpp(layout: &ScaleLayout, k: usize, h: usize, w: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::contract(format!("max_bpp needs K >= 2, got {k}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::contract("max_bpp needs a non-empty image"));
    }
    Ok(layout.total as f64 * (k as f64).log2() / (h * w) as f64)
}

// ---------------------------------------------------------------------------
// Padding
// ---------------------------------------------------------------------------

/// Smallest (h, w) at or above the input dims divisible by `multiple`.
pub fn padded_dims(h: usize, w: usize, multiple: usize) -> (usize, usize) {
    let round = |v: usize| v.div_ceil(multiple) * multiple;
    (round(h), round(w))
}

fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let j = i % period;
    if j < n {
        j
    } else {
        period - j
    }
}

/// Reflect-pad a [B, C, H, W] tensor on the right/bottom to the target size.
pub fn pad_reflect(x: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::shape(format!(
            "pad_reflect expects [B, C, H, W], got {:?}",
            x.shape()
        )));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if target_h < h || target_w < w {
        return Err(Error::shape(format!(
            "cannot pad {h}x{w} down to {target_h}x{target_w}"
        )));
    }
    if target_h == h && target_w == w {
        return Ok(x.clone());
    }
    let mut out = Tensor::zeros(&[b, c, target_h, target_w]);
    {
        let xd = x.data();
        let od = out.data_mut();
        for bc in 0..b * c {
            let ib = bc * h * w;
            let ob = bc * target_h * target_w;
            for y in 0..target_h {
                let sy = mirror(y, h);
                for xcol in 0..target_w {
                    od[ob + y * target_w + xcol] = xd[ib + sy * w + mirror(xcol, w)];
                }
            }
        }
    }
    Ok(out)
}

/// Crop a [B, C, H, W] tensor to its top-left h x w corner.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::shape(format!(
            "crop expects [B, C, H, W], got {:?}",
            x.shape()
        )));
    }
    let (b, c, fh, fw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if h > fh || w > fw {
        return Err(Error::shape(format!(
            "cannot crop {fh}x{fw} up to {h}x{w}"
        )));
    }
    let mut out = Tensor::zeros(&[b, c, h, w]);
    {
        let xd = x.data();
        let od = out.data_mut();
        for bc in 0..b * c {
            for y in 0..h {
                let src = bc * fh * fw + y * fw;
                let dst = bc * h * w + y * w;
                od[dst..dst + w].copy_from_slice(&xd[src..src + w]);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

fn conv_w<R: Rng>(rng: &mut R, cout: usize, cin: usize, k: usize) -> Tensor {
    let bound = (1.0 / (cin * k * k) as f64).sqrt();
    Tensor::rand_uniform(&[cout, cin, k, k], -bound, bound, rng)
}

fn convt_w<R: Rng>(rng: &mut R, cin: usize, cout: usize, k: usize) -> Tensor {
    let bound = (1.0 / (cin * k * k) as f64).sqrt();
    Tensor::rand_uniform(&[cin, cout, k, k], -bound, bound, rng)
}

fn insert_res_block(params: &mut ParamSet, rng: &mut impl Rng, prefix: &str, ch: usize) {
    for half in ["1", "2"] {
        params.insert(format!("{prefix}.gn{half}.g"), Tensor::full(&[ch], 1.0));
        params.insert(format!("{prefix}.gn{half}.b"), Tensor::zeros(&[ch]));
        params.insert(format!("{prefix}.c{half}.w"), conv_w(rng, ch, ch, 3));
        params.insert(format!("{prefix}.c{half}.b"), Tensor::zeros(&[ch]));
    }
}

/// Fresh tokenizer parameters (biases and normalization offsets at zero).
pub fn init_params<R: Rng>(cfg: &TokenizerConfig, rng: &mut R) -> Result<ParamSet> {
    cfg.validate()?;
    let widths = cfg.channel_widths();
    let mut p = ParamSet::new();

    p.insert("tok.enc.stem.w", conv_w(rng, widths[0], 3, 3));
    p.insert("tok.enc.stem.b", Tensor::zeros(&[widths[0]]));
    for s in 1..=cfg.num_stages {
        let cin = widths[s - 1];
        let cout = widths[s];
        insert_res_block(&mut p, rng, &format!("tok.enc.s{s}.rb1"), cin);
        insert_res_block(&mut p, rng, &format!("tok.enc.s{s}.rb2"), cin);
        p.insert(format!("tok.enc.s{s}.down.w"), conv_w(rng, cout, cin, 3));
        p.insert(format!("tok.enc.s{s}.down.b"), Tensor::zeros(&[cout]));
        let f = 1usize << s;
        if cfg.scale_factors.contains(&f) {
            p.insert(format!("tok.enc.tap{f}.w"), conv_w(rng, cfg.latent_dim, cout, 1));
            p.insert(format!("tok.enc.tap{f}.b"), Tensor::zeros(&[cfg.latent_dim]));
        }
    }

    for &f in &cfg.scale_factors {
        let ch = widths[f.trailing_zeros() as usize];
        p.insert(format!("tok.dec.in{f}.w"), conv_w(rng, ch, cfg.latent_dim, 1));
        p.insert(format!("tok.dec.in{f}.b"), Tensor::zeros(&[ch]));
    }
    for s in (1..=cfg.num_stages).rev() {
        let cin = widths[s];
        let cout = widths[s - 1];
        insert_res_block(&mut p, rng, &format!("tok.dec.s{s}.rb1"), cin);
        insert_res_block(&mut p, rng, &format!("tok.dec.s{s}.rb2"), cin);
        p.insert(format!("tok.dec.s{s}.up.w"), convt_w(rng, cin, cout, 4));
        p.insert(format!("tok.dec.s{s}.up.b"), Tensor::zeros(&[cout]));
    }
    p.insert("tok.dec.head.gn.g", Tensor::full(&[widths[0]], 1.0));
    p.insert("tok.dec.head.gn.b", Tensor::zeros(&[widths[0]]));
    p.insert("tok.dec.head.w", conv_w(rng, 3, widths[0], 3));
    p.insert("tok.dec.head.b", Tensor::zeros(&[3]));
    Ok(p)
}

// ---------------------------------------------------------------------------
// Transforms
// ---------------------------------------------------------------------------

/// Multi-scale latent nodes, coarsest first; `residual` records that
/// scales after the first store differences against the upsampled
/// previous feature map.
pub struct MultiScaleLatents {
    pub scales: Vec<NodeId>,
    pub residual: bool,
}

fn conv_layer(
    g: &mut Graph,
    p: &BoundParams,
    prefix: &str,
    x: NodeId,
    stride: usize,
    pad: usize,
) -> Result<NodeId> {
    let w = p.id(&format!("{prefix}.w"))?;
    let b = p.id(&format!("{prefix}.b"))?;
    let y = g.conv2d(x, w, stride, pad)?;
    g.add_bias(y, b, 1)
}

fn res_block(
    g: &mut Graph,
    p: &BoundParams,
    prefix: &str,
    x: NodeId,
    groups: usize,
) -> Result<NodeId> {
    let mut h = x;
    for half in ["1", "2"] {
        let gamma = p.id(&format!("{prefix}.gn{half}.g"))?;
        let beta = p.id(&format!("{prefix}.gn{half}.b"))?;
        let n = g.group_norm(h, gamma, beta, groups, GN_EPS)?;
        let a = g.silu(n);
        h = conv_layer(g, p, &format!("{prefix}.c{half}"), a, 1, 1)?;
    }
    g.add(x, h)
}

/// Analysis transform: image [B, 3, H, W] to residual multi-scale latents.
/// H and W must already be multiples of the coarsest scale factor.
pub fn encode(
    g: &mut Graph,
    x: NodeId,
    cfg: &TokenizerConfig,
    p: &BoundParams,
) -> Result<MultiScaleLatents> {
    let xv = g.value(x);
    if xv.rank() != 4 || xv.shape()[1] != 3 {
        return Err(Error::shape(format!(
            "encode expects [B, 3, H, W], got {:?}",
            xv.shape()
        )));
    }
    let (h, w) = (xv.shape()[2], xv.shape()[3]);
    let max_f = *cfg.scale_factors.last().unwrap();
    if h % max_f != 0 || w % max_f != 0 {
        return Err(Error::shape(format!(
            "encode input {h}x{w} not padded to a multiple of {max_f}"
        )));
    }

    let mut feat = conv_layer(g, p, "tok.enc.stem", x, 1, 1)?;
    let mut taps: Vec<(usize, NodeId)> = Vec::with_capacity(cfg.num_scales);
    for s in 1..=cfg.num_stages {
        feat = res_block(g, p, &format!("tok.enc.s{s}.rb1"), feat, cfg.groupnorm_groups)?;
        feat = res_block(g, p, &format!("tok.enc.s{s}.rb2"), feat, cfg.groupnorm_groups)?;
        feat = conv_layer(g, p, &format!("tok.enc.s{s}.down"), feat, 2, 1)?;
        let f = 1usize << s;
        if cfg.scale_factors.contains(&f) {
            let tap = conv_layer(g, p, &format!("tok.enc.tap{f}"), feat, 1, 0)?;
            taps.push((f, tap));
        }
    }
    taps.reverse();

    let mut scales = Vec::with_capacity(taps.len());
    for (i, &(_, tap)) in taps.iter().enumerate() {
        if i == 0 {
            scales.push(tap);
        } else {
            let ratio = taps[i - 1].0 / taps[i].0;
            let up = g.upsample_nearest(taps[i - 1].1, ratio)?;
            scales.push(g.sub(tap, up)?);
        }
    }
    Ok(MultiScaleLatents {
        scales,
        residual: true,
    })
}

/// Cumulative upsample-add: recover per-scale feature maps from residuals.
pub fn deresidualize(g: &mut Graph, latents: &MultiScaleLatents, cfg: &TokenizerConfig) -> Result<Vec<NodeId>> {
    if latents.scales.len() != cfg.num_scales {
        return Err(Error::shape(format!(
            "{} latent scales for a {}-scale config",
            latents.scales.len(),
            cfg.num_scales
        )));
    }
    if !latents.residual {
        return Ok(latents.scales.clone());
    }
    let desc = cfg.factors_coarse_first();
    let mut feats = Vec::with_capacity(latents.scales.len());
    for (i, &s) in latents.scales.iter().enumerate() {
        if i == 0 {
            feats.push(s);
        } else {
            let ratio = desc[i - 1] / desc[i];
            let up = g.upsample_nearest(feats[i - 1], ratio)?;
            feats.push(g.add(s, up)?);
        }
    }
    Ok(feats)
}

/// Synthesis transform: quantized multi-scale latents to an image on the
/// padded grid, values in (-1, 1).
pub fn decode(
    g: &mut Graph,
    latents: &MultiScaleLatents,
    cfg: &TokenizerConfig,
    p: &BoundParams,
) -> Result<NodeId> {
    let feats = deresidualize(g, latents, cfg)?;
    let desc = cfg.factors_coarse_first();
    let max_f = desc[0];

    let mut h = conv_layer(g, p, &format!("tok.dec.in{max_f}"), feats[0], 1, 0)?;
    for s in (1..=cfg.num_stages).rev() {
        h = res_block(g, p, &format!("tok.dec.s{s}.rb1"), h, cfg.groupnorm_groups)?;
        h = res_block(g, p, &format!("tok.dec.s{s}.rb2"), h, cfg.groupnorm_groups)?;
        let wname = format!("tok.dec.s{s}.up");
        let w = p.id(&format!("{wname}.w"))?;
        let b = p.id(&format!("{wname}.b"))?;
        let up = g.conv_t2d(h, w, 2, 1)?;
        h = g.add_bias(up, b, 1)?;
        let f = 1usize << (s - 1);
        if f < max_f {
            if let Some(pos) = desc.iter().position(|&d| d == f) {
                let inj = conv_layer(g, p, &format!("tok.dec.in{f}"), feats[pos], 1, 0)?;
                h = g.add(h, inj)?;
            }
        }
    }
    let gamma = p.id("tok.dec.head.gn.g")?;
    let beta = p.id("tok.dec.head.gn.b")?;
    let n = g.group_norm(h, gamma, beta, cfg.groupnorm_groups, GN_EPS)?;
    let a = g.silu(n);
    let out = conv_layer(g, p, "tok.dec.head", a, 1, 1)?;
    Ok(g.tanh(out))
}

// ---------------------------------------------------------------------------
// Flatten / unflatten
// ---------------------------------------------------------------------------

/// Flatten multi-scale latents into one [B, L, C] sequence, coarsest
/// scale first and row-major within each scale.
pub fn flatten(
    g: &mut Graph,
    latents: &MultiScaleLatents,
    cfg: &TokenizerConfig,
) -> Result<(NodeId, ScaleLayout)> {
    if latents.scales.is_empty() {
        return Err(Error::shape("flatten: no scales"));
    }
    let desc = cfg.factors_coarse_first();
    if latents.scales.len() != desc.len() {
        return Err(Error::shape(format!(
            "{} latent scales for a {}-scale config",
            latents.scales.len(),
            desc.len()
        )));
    }
    let mut entries = Vec::with_capacity(latents.scales.len());
    let mut parts = Vec::with_capacity(latents.scales.len());
    let mut offset = 0;
    for (i, &s) in latents.scales.iter().enumerate() {
        let sv = g.value(s);
        if sv.rank() != 4 || sv.shape()[1] != cfg.latent_dim {
            return Err(Error::shape(format!(
                "scale {i} has shape {:?}, expected [B, {}, h, w]",
                sv.shape(),
                cfg.latent_dim
            )));
        }
        let (b, c, hh, ww) = (sv.shape()[0], sv.shape()[1], sv.shape()[2], sv.shape()[3]);
        entries.push(ScaleEntry {
            factor: desc[i],
            height: hh,
            width: ww,
            offset,
            len: hh * ww,
        });
        offset += hh * ww;
        let flat = g.reshape(s, &[b, c, hh * ww])?;
        parts.push(g.permute(flat, &[0, 2, 1])?);
    }
    let seq = g.concat_tokens(&parts)?;
    Ok((
        seq,
        ScaleLayout {
            entries,
            total: offset,
        },
    ))
}

/// Inverse of [`flatten`] on plain tensors: [B, L, C] back to
/// per-scale [B, C, h, w] maps.
pub fn unflatten(seq: &Tensor, layout: &ScaleLayout) -> Result<Vec<Tensor>> {
    if seq.rank() != 3 {
        return Err(Error::shape(format!(
            "unflatten expects [B, L, C], got {:?}",
            seq.shape()
        )));
    }
    let (b, l, c) = (seq.shape()[0], seq.shape()[1], seq.shape()[2]);
    if l != layout.total {
        return Err(Error::shape(format!(
            "sequence length {l} does not match layout total {}",
            layout.total
        )));
    }
    let sd = seq.data();
    let mut out = Vec::with_capacity(layout.entries.len());
    for e in &layout.entries {
        let mut t = Tensor::zeros(&[b, c, e.height, e.width]);
        {
            let td = t.data_mut();
            for bb in 0..b {
                for pos in 0..e.len {
                    let src = (bb * l + e.offset + pos) * c;
                    for ch in 0..c {
                        td[bb * c * e.len + ch * e.len + pos] = sd[src + ch];
                    }
                }
            }
        }
        out.push(t);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
