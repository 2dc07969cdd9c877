//! End-to-end orchestration: model bundles on disk, compression and
//! decompression with prefix-based rate control, the three-stage
//! trainer, and the evaluation sweep.
//!
//! The coding contract that everything below leans on: the encoder
//! prices tokens with a single teacher-forced pass, the decoder
//! re-predicts level by level from what it has decoded so far, and the
//! two see bit-identical distributions because masked attention rows
//! cannot observe the positions that differ.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_params, save_params};
use crate::coder::{
    encode_sequence, measure_rate, Bitstream, QuantizedCdf, RangeDecoder, ScaleDim, StreamHeader,
};
use crate::config::Config;
use crate::entropy_model::{self, CompletionMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::{self, RDConfig, TrainRow};
use crate::ordering::{build_order, gather_group, window_partition, OrderPlan, WindowPartition};
use crate::params::{sgd_step, BoundParams, ParamSet};
use crate::tensor::Tensor;
use crate::tokenizer::{self, MultiScaleLatents, ScaleLayout};
use crate::vq;

// ---------------------------------------------------------------------------
// Model bundle
// ---------------------------------------------------------------------------

/// Everything inference needs: configuration plus one parameter set
/// holding tokenizer (`tok.*`), codebook (`cb.*`), and entropy-model
/// (`em.*`) tensors. `stage` records the furthest completed training
/// stage.
#[derive(Clone)]
pub struct ModelBundle {
    pub config: Config,
    pub params: ParamSet,
    pub stage: u8,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    stage: u8,
    seed: String,
    param_hash: String,
    config_hash: String,
}

impl ModelBundle {
    pub fn init(config: Config, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let tok = &config.tokenizer;
        let mut params = tokenizer::init_params(tok, &mut rng)?;
        params.insert(
            "cb.codebook",
            vq::init_codebook(tok.codebook_size, tok.latent_dim, &mut rng)?,
        );
        let em = entropy_model::init_params(tok, &config.entropy_model, &mut rng)?;
        for (name, t) in em.iter() {
            params.insert(name, t.clone());
        }
        Ok(Self {
            config,
            params,
            stage: 0,
            seed,
        })
    }

    /// Pixel footprint of one window group; images are padded to a
    /// multiple of this before encoding.
    pub fn footprint(&self) -> usize {
        let tok = &self.config.tokenizer;
        tok.window_sides[0] * tok.factors_coarse_first()[0]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), self.config.to_toml_string())?;
        save_params(&dir.join("params.ckpt"), &self.params)?;
        let meta = BundleMeta {
            stage: self.stage,
            seed: self.seed.to_string(),
            param_hash: format!("{:016x}", self.params.content_hash()),
            config_hash: format!("{:016x}", self.config.content_hash()),
        };
        let text = toml::to_string(&meta)
            .map_err(|e| Error::format(format!("meta serialization: {e}")))?;
        fs::write(dir.join("meta.toml"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = Config::from_file(&dir.join("config.toml"))?;
        let params = load_params(&dir.join("params.ckpt"))?;
        let text = fs::read_to_string(dir.join("meta.toml"))?;
        let meta: BundleMeta =
            toml::from_str(&text).map_err(|e| Error::format(format!("meta parse: {e}")))?;
        let seed = meta
            .seed
            .parse::<u64>()
            .map_err(|_| Error::format(format!("meta seed {:?} is not a u64", meta.seed)))?;
        let want_params = format!("{:016x}", params.content_hash());
        if meta.param_hash != want_params {
            return Err(Error::format(format!(
                "checkpoint hash {want_params} does not match recorded {}",
                meta.param_hash
            )));
        }
        let want_config = format!("{:016x}", config.content_hash());
        if meta.config_hash != want_config {
            return Err(Error::format(format!(
                "config hash {want_config} does not match recorded {}",
                meta.config_hash
            )));
        }
        Ok(Self {
            config,
            params,
            stage: meta.stage,
            seed,
        })
    }

    fn codebook(&self) -> Result<&Tensor> {
        self.params.get("cb.codebook")
    }
}

/// Which parameter prefixes a training stage may update.
fn stage_learnable(stage: u8) -> impl Fn(&str) -> bool {
    move |name: &str| match stage {
        1 => name.starts_with("tok.") || name.starts_with("cb."),
        2 => name.starts_with("em."),
        _ => name.starts_with("tok.") || name.starts_with("em."),
    }
}

// ---------------------------------------------------------------------------
// Shared forward pass
// ---------------------------------------------------------------------------

/// Reshape a flattened token sequence back into per-scale feature maps
/// without leaving the graph.
pub fn unflatten_graph(
    g: &mut Graph,
    seq: NodeId,
    layout: &ScaleLayout,
) -> Result<Vec<NodeId>> {
    let shape = g.value(seq).shape().to_vec();
    if shape.len() != 3 || shape[1] != layout.total {
        return Err(Error::shape(format!(
            "unflatten: sequence {shape:?} vs layout of {}",
            layout.total
        )));
    }
    let (b, c) = (shape[0], shape[2]);
    let mut feats = Vec::with_capacity(layout.entries.len());
    for entry in &layout.entries {
        let rows = g.slice_tokens(seq, entry.offset, entry.len)?;
        let chan = g.permute(rows, &[0, 2, 1])?;
        feats.push(g.reshape(chan, &[b, c, entry.height, entry.width])?);
    }
    Ok(feats)
}

/// One differentiable pass over a batch: reconstruction through the
/// straight-through estimator, the soft rate through the entropy model,
/// and the measured hard rate for reporting.
pub struct StageForward {
    pub x_hat: NodeId,
    pub dist: losses::Distortion,
    /// Soft rate in bits per token, averaged over the batch.
    pub rate_bits: NodeId,
    /// Measured index cost in bits, summed over the batch.
    pub rate_hard_total: f64,
    pub y_ind: Vec<u32>,
    pub layout: ScaleLayout,
}

pub fn stage_forward(
    g: &mut Graph,
    bp: &BoundParams,
    cfg: &Config,
    x: NodeId,
    rd: &RDConfig,
) -> Result<StageForward> {
    let tok = &cfg.tokenizer;
    let latents = tokenizer::encode(g, x, tok, bp)?;
    let (seq, layout) = tokenizer::flatten(g, &latents, tok)?;
    let cb = bp.id("cb.codebook")?;
    let hard = vq::assign_hard(g, seq, cb)?;
    let soft = vq::soft_distribution(g, seq, cb, rd.tau)?;

    let part = window_partition(&layout, &tok.window_sides)?;
    let plan = build_order(&part.group_layout)?;
    let batch = hard.batch;
    let total = layout.total;

    let mut rate_node: Option<NodeId> = None;
    let mut rate_hard_total = 0.0;
    for group in &part.groups {
        let p_g = gather_group(g, soft.p_soft, group)?;
        let yq_g = gather_group(g, hard.y_q, group)?;
        let log_q = entropy_model::predict_sequence(g, yq_g, &plan, &cfg.entropy_model, bp)?;
        let bits = losses::rate_soft(g, p_g, log_q)?;
        let weighted = g.scale(bits, group.len() as f64 / total as f64);
        rate_node = Some(match rate_node {
            None => weighted,
            Some(r) => g.add(r, weighted)?,
        });

        let mut idx = Vec::with_capacity(batch * group.len());
        for b in 0..batch {
            for &t in group {
                idx.push(hard.y_ind[b * total + t]);
            }
        }
        rate_hard_total += losses::rate_hard(&idx, g.value(log_q))?;
    }
    let rate_bits = rate_node.ok_or_else(|| Error::contract("no window groups"))?;

    let feats = unflatten_graph(g, hard.y_q, &layout)?;
    let recon_latents = MultiScaleLatents {
        scales: feats,
        residual: true,
    };
    let x_hat = tokenizer::decode(g, &recon_latents, tok, bp)?;
    let dist = losses::distortion(g, x, x_hat, seq, &hard, tok.commitment_beta, None)?;

    Ok(StageForward {
        x_hat,
        dist,
        rate_bits,
        rate_hard_total,
        y_ind: hard.y_ind,
        layout,
    })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Run one training stage over a fixed image set with deterministic
/// batch cycling. Stage 1 optimizes distortion (tokenizer + codebook),
/// stage 2 the rate (entropy model), stage 3 the joint Lagrangian with
/// the codebook frozen.
pub fn train_stage(
    bundle: &mut ModelBundle,
    stage: u8,
    rd: &RDConfig,
    images: &[Tensor],
) -> Result<Vec<TrainRow>> {
    if !(1..=3).contains(&stage) {
        return Err(Error::contract(format!("unknown training stage {stage}")));
    }
    if stage > bundle.stage + 1 {
        return Err(Error::contract(format!(
            "stage {stage} requested but bundle has only completed stage {}",
            bundle.stage
        )));
    }
    if images.is_empty() {
        return Err(Error::contract("training corpus is empty"));
    }
    let footprint = bundle.footprint();
    for img in images {
        let s = img.shape();
        if s.len() != 3 || s[0] != 3 || s[1] % footprint != 0 || s[2] % footprint != 0 {
            return Err(Error::shape(format!(
                "training image {s:?} must be [3, H, W] with sides divisible by {footprint}"
            )));
        }
    }
    let run = bundle.config.run.clone();
    let steps = run.steps[stage as usize - 1];
    let lr = run.lr[stage as usize - 1];
    let batch = run.batch_size.min(images.len());
    let pixels = images[0].shape()[1] * images[0].shape()[2];

    let mut rows = Vec::with_capacity(steps);
    for step in 0..steps {
        let picks: Vec<&Tensor> = (0..batch)
            .map(|j| &images[(step * batch + j) % images.len()])
            .collect();
        let stacked = stack_images(&picks)?;

        let mut g = Graph::new();
        let bp = BoundParams::bind(&mut g, &bundle.params, stage_learnable(stage));
        let x = g.constant(stacked);
        let fwd = stage_forward(&mut g, &bp, &bundle.config, x, rd)?;
        let root = match stage {
            1 => fwd.dist.total,
            2 => fwd.rate_bits,
            _ => {
                let scaled = g.scale(fwd.rate_bits, rd.lambda);
                g.add(fwd.dist.total, scaled)?
            }
        };
        let rate_bits = g.value(fwd.rate_bits).item()?;
        let mse = g.value(fwd.dist.mse).item()?;
        let codebook_loss = g.value(fwd.dist.codebook).item()?;
        let total = g.value(root).item()?;
        rows.push(TrainRow {
            step,
            rate_bits,
            bpp: rate_bits * fwd.layout.total as f64 / pixels as f64,
            mse,
            codebook_loss,
            total,
        });

        let grads = g.backward(root)?;
        let named = bp.grad_map(&grads);
        sgd_step(&mut bundle.params, &named, lr, run.clip_norm)?;
    }
    bundle.stage = bundle.stage.max(stage);
    Ok(rows)
}

fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let s = images[0].shape().to_vec();
    let mut out = Tensor::zeros(&[images.len(), s[0], s[1], s[2]]);
    let n = s.iter().product::<usize>();
    for (i, img) in images.iter().enumerate() {
        if img.shape() != s {
            return Err(Error::shape("stack: images differ in shape"));
        }
        out.data_mut()[i * n..(i + 1) * n].copy_from_slice(img.data());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Compression
// ---------------------------------------------------------------------------

/// Order levels transmitted for a prefix fraction. Exact multiples stay
/// put under the small nudge that absorbs float noise in `fraction`.
pub fn prefix_cut(fraction: f64, levels: usize) -> u32 {
    let cut = (fraction * levels as f64 - 1e-9).ceil() as i64;
    cut.clamp(1, levels as i64) as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodingStats {
    /// Σ ideal code length under the quantized per-token models.
    pub ideal_bits: f64,
    pub payload_bits: f64,
    pub coded_tokens: usize,
    pub total_tokens: usize,
    pub levels: usize,
    pub prefix_cut: u32,
    pub bpp: f64,
}

struct TokenView {
    y_ind: Vec<u32>,
    layout: ScaleLayout,
}

fn image_tokens(bundle: &ModelBundle, image: &Tensor) -> Result<TokenView> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("expected [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let (ph, pw) = tokenizer::padded_dims(h, w, bundle.footprint());
    let batched = image.reshaped(&[1, 3, h, w])?;
    let padded = tokenizer::pad_reflect(&batched, ph, pw)?;

    let mut g = Graph::new();
    let bp = BoundParams::bind_frozen(&mut g, &bundle.params);
    let x = g.constant(padded);
    let latents = tokenizer::encode(&mut g, x, &bundle.config.tokenizer, &bp)?;
    let (seq, layout) = tokenizer::flatten(&mut g, &latents, &bundle.config.tokenizer)?;
    let y_ind = vq::nearest_indices(g.value(seq), bundle.codebook()?)?;
    Ok(TokenView { y_ind, layout })
}

/// Teacher-forced log-probabilities for every window group, batched
/// into one [G, Lg, K] pass over the true quantized embeddings.
fn group_log_probs(
    bundle: &ModelBundle,
    view: &TokenView,
    part: &WindowPartition,
    plan: &OrderPlan,
) -> Result<Tensor> {
    let tok = &bundle.config.tokenizer;
    let cb = bundle.codebook()?;
    let c = tok.latent_dim;
    let lg = part.group_layout.total;
    let mut grouped = Tensor::zeros(&[part.groups.len(), lg, c]);
    {
        let cbd = cb.data();
        let d = grouped.data_mut();
        for (gi, group) in part.groups.iter().enumerate() {
            for (t, &src) in group.iter().enumerate() {
                let idx = view.y_ind[src] as usize;
                let dst = (gi * lg + t) * c;
                d[dst..dst + c].copy_from_slice(&cbd[idx * c..(idx + 1) * c]);
            }
        }
    }
    let mut g = Graph::new();
    let bp = BoundParams::bind_frozen(&mut g, &bundle.params);
    let y = g.constant(grouped);
    let log_q = entropy_model::predict_sequence(&mut g, y, plan, &bundle.config.entropy_model, &bp)?;
    Ok(g.value(log_q).clone())
}

fn cdf_from_row(row: &[f64], precision: u32) -> Result<QuantizedCdf> {
    let probs: Vec<f64> = row.iter().map(|&lp| lp.exp()).collect();
    QuantizedCdf::from_probs(&probs, precision)
}

/// Compress an image, transmitting only the first
/// `ceil(prefix_fraction * levels)` order levels.
pub fn compress(
    bundle: &ModelBundle,
    image: &Tensor,
    prefix_fraction: f64,
) -> Result<(Bitstream, CodingStats)> {
    if bundle.stage < 2 {
        return Err(Error::contract(format!(
            "bundle has only completed stage {}; coding needs a trained entropy model",
            bundle.stage
        )));
    }
    if !(prefix_fraction > 0.0 && prefix_fraction <= 1.0) {
        return Err(Error::contract(format!(
            "prefix fraction {prefix_fraction} outside (0, 1]"
        )));
    }
    let view = image_tokens(bundle, image)?;
    let tok = &bundle.config.tokenizer;
    let part = window_partition(&view.layout, &tok.window_sides)?;
    let plan = build_order(&part.group_layout)?;
    let cut = prefix_cut(prefix_fraction, plan.levels);
    let log_q = group_log_probs(bundle, &view, &part, &plan)?;

    let k = tok.codebook_size;
    let lg = part.group_layout.total;
    let precision = bundle.config.coder.precision;
    let mut symbols = Vec::new();
    let mut cdfs = Vec::new();
    let mut ideal_bits = 0.0;
    for (gi, group) in part.groups.iter().enumerate() {
        for (t, &src) in group.iter().enumerate() {
            if plan.order[t] >= cut {
                continue;
            }
            let base = (gi * lg + t) * k;
            let cdf = cdf_from_row(&log_q.data()[base..base + k], precision)?;
            let sym = view.y_ind[src];
            ideal_bits += cdf.bits(sym as usize);
            symbols.push(sym);
            cdfs.push(cdf);
        }
    }
    let payload = encode_sequence(&symbols, &cdfs)?;

    let s = image.shape();
    let mut scales = Vec::with_capacity(view.layout.entries.len());
    for e in &view.layout.entries {
        if e.factor > u16::MAX as usize || e.height > u16::MAX as usize || e.width > u16::MAX as usize {
            return Err(Error::format("scale dimensions overflow the header"));
        }
        scales.push(ScaleDim {
            factor: e.factor as u16,
            height: e.height as u16,
            width: e.width as u16,
        });
    }
    let stream = Bitstream {
        header: StreamHeader {
            orig_h: s[1] as u32,
            orig_w: s[2] as u32,
            scales,
            prefix_cut: cut,
            model_hash: bundle.params.content_hash(),
        },
        payload,
    };
    let stats = CodingStats {
        ideal_bits,
        payload_bits: 8.0 * stream.payload.len() as f64,
        coded_tokens: symbols.len(),
        total_tokens: view.layout.total,
        levels: plan.levels,
        prefix_cut: cut,
        bpp: measure_rate(&stream, s[1] as u32, s[2] as u32),
    };
    Ok((stream, stats))
}

// ---------------------------------------------------------------------------
// Decompression
// ---------------------------------------------------------------------------

/// What to do with tokens beyond the transmitted prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuffixMode {
    /// Autoregressive deterministic completion.
    Complete,
    /// Zero embeddings for every missing token.
    ZeroPad,
}

fn decode_group_prefix(
    bundle: &ModelBundle,
    plan: &OrderPlan,
    cut: u32,
    dec: &mut RangeDecoder,
) -> Result<Vec<Option<u32>>> {
    let tok = &bundle.config.tokenizer;
    let cb = bundle.codebook()?;
    let cbd = cb.data();
    let (k, c) = (tok.codebook_size, tok.latent_dim);
    let lg = plan.num_tokens();
    let precision = bundle.config.coder.precision;
    let mut current: Vec<Option<u32>> = vec![None; lg];
    for level in plan.populated_levels() {
        if level >= cut {
            break;
        }
        let mut emb = Tensor::zeros(&[1, lg, c]);
        {
            let d = emb.data_mut();
            for (t, idx) in current.iter().enumerate() {
                if let Some(i) = idx {
                    let row = &cbd[*i as usize * c..(*i as usize + 1) * c];
                    d[t * c..(t + 1) * c].copy_from_slice(row);
                }
            }
        }
        let mut g = Graph::new();
        let bp = BoundParams::bind_frozen(&mut g, &bundle.params);
        let y = g.constant(emb);
        let log_q =
            entropy_model::predict_sequence(&mut g, y, plan, &bundle.config.entropy_model, &bp)?;
        let data = g.value(log_q).data();
        for t in 0..lg {
            if plan.order[t] != level {
                continue;
            }
            let cdf = cdf_from_row(&data[t * k..(t + 1) * k], precision)?;
            current[t] = Some(dec.decode(&cdf)? as u32);
        }
    }
    Ok(current)
}

fn layout_for_stream(bundle: &ModelBundle, header: &StreamHeader) -> Result<ScaleLayout> {
    let (ph, pw) = tokenizer::padded_dims(
        header.orig_h as usize,
        header.orig_w as usize,
        bundle.footprint(),
    );
    let layout = ScaleLayout::for_image(&bundle.config.tokenizer, ph, pw)?;
    if layout.entries.len() != header.scales.len() {
        return Err(Error::mismatch(format!(
            "stream carries {} scales, model expects {}",
            header.scales.len(),
            layout.entries.len()
        )));
    }
    for (e, s) in layout.entries.iter().zip(&header.scales) {
        if e.factor != s.factor as usize
            || e.height != s.height as usize
            || e.width != s.width as usize
        {
            return Err(Error::mismatch(format!(
                "stream scale /{} is {}x{}, model expects /{} {}x{}",
                s.factor, s.height, s.width, e.factor, e.height, e.width
            )));
        }
    }
    Ok(layout)
}

fn image_from_tokens(
    bundle: &ModelBundle,
    tokens: &[Option<u32>],
    layout: &ScaleLayout,
    orig_h: usize,
    orig_w: usize,
) -> Result<Tensor> {
    let tok = &bundle.config.tokenizer;
    let cb = bundle.codebook()?;
    let cbd = cb.data();
    let c = tok.latent_dim;
    let mut seq = Tensor::zeros(&[1, layout.total, c]);
    {
        let d = seq.data_mut();
        for (t, idx) in tokens.iter().enumerate() {
            if let Some(i) = idx {
                let row = &cbd[*i as usize * c..(*i as usize + 1) * c];
                d[t * c..(t + 1) * c].copy_from_slice(row);
            }
        }
    }
    let feats = tokenizer::unflatten(&seq, layout)?;
    let mut g = Graph::new();
    let bp = BoundParams::bind_frozen(&mut g, &bundle.params);
    let scales = feats.into_iter().map(|f| g.constant(f)).collect();
    let latents = MultiScaleLatents {
        scales,
        residual: true,
    };
    let x_hat = tokenizer::decode(&mut g, &latents, tok, &bp)?;
    let full = g.value(x_hat);
    let cropped = tokenizer::crop(full, orig_h, orig_w)?;
    cropped.reshaped(&[3, orig_h, orig_w])
}

/// Decode a stream back to an image. Tokens beyond the transmitted
/// prefix are filled per `mode`.
pub fn decompress(bundle: &ModelBundle, stream: &Bitstream, mode: SuffixMode) -> Result<Tensor> {
    let header = &stream.header;
    let have = bundle.params.content_hash();
    if header.model_hash != have {
        return Err(Error::mismatch(format!(
            "stream was coded with model {:016x}, loaded model is {have:016x}",
            header.model_hash
        )));
    }
    let layout = layout_for_stream(bundle, header)?;
    let tok = &bundle.config.tokenizer;
    let part = window_partition(&layout, &tok.window_sides)?;
    let plan = build_order(&part.group_layout)?;
    if header.prefix_cut == 0 || header.prefix_cut > plan.levels as u32 {
        return Err(Error::format(format!(
            "prefix cut {} outside 1..={}",
            header.prefix_cut, plan.levels
        )));
    }

    let mut dec = RangeDecoder::new(&stream.payload);
    let mut per_group: Vec<Vec<Option<u32>>> = Vec::with_capacity(part.groups.len());
    for _ in 0..part.groups.len() {
        per_group.push(decode_group_prefix(bundle, &plan, header.prefix_cut, &mut dec)?);
    }
    if mode == SuffixMode::Complete {
        let cb = bundle.codebook()?;
        for group in per_group.iter_mut() {
            let full = entropy_model::complete_suffix(
                group,
                &plan,
                cb,
                &bundle.config.entropy_model,
                &bundle.params,
                CompletionMode::Deterministic,
            )?;
            *group = full.into_iter().map(Some).collect();
        }
    }
    let tokens = part.reassemble(&per_group, layout.total)?;
    image_from_tokens(
        bundle,
        &tokens,
        &layout,
        header.orig_h as usize,
        header.orig_w as usize,
    )
}

/// The zero-padding ablation: like `decompress`, but missing tokens
/// stay at zero embeddings instead of being completed.
pub fn baseline_zero_pad(bundle: &ModelBundle, stream: &Bitstream) -> Result<Tensor> {
    decompress(bundle, stream, SuffixMode::ZeroPad)
}

/// Encoder-side reconstruction: quantize and decode without coding.
/// Bit-identical to `decompress(compress(image, 1.0))`.
pub fn reconstruct(bundle: &ModelBundle, image: &Tensor) -> Result<Tensor> {
    let view = image_tokens(bundle, image)?;
    let tokens: Vec<Option<u32>> = view.y_ind.iter().map(|&i| Some(i)).collect();
    let s = image.shape();
    image_from_tokens(bundle, &tokens, &view.layout, s[1], s[2])
}

/// Expose the hard token indices of one image (analysis helper).
pub fn token_indices(bundle: &ModelBundle, image: &Tensor) -> Result<(Vec<u32>, ScaleLayout)> {
    let view = image_tokens(bundle, image)?;
    Ok((view.y_ind, view.layout))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "mse: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.numel().max(1);
    Ok(a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64)
}

/// Peak signal-to-noise ratio for signals in [-1, 1].
pub fn psnr(mse: f64) -> f64 {
    10.0 * (4.0 / mse).log10()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image_id: String,
    pub bpp: f64,
    pub mse: f64,
    pub psnr: f64,
    pub prefix_fraction: f64,
    pub mode: String,
}

pub const EVAL_CSV_HEADER: &str = "image_id,bpp,mse,psnr,prefix_fraction,mode";

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.image_id, r.bpp, r.mse, r.psnr, r.prefix_fraction, r.mode
        ));
    }
    out
}

fn eval_one(
    bundle: &ModelBundle,
    id: &str,
    image: &Tensor,
    sweep_prefix: bool,
) -> Result<Vec<EvalRow>> {
    let view = image_tokens(bundle, image)?;
    let part = window_partition(&view.layout, &bundle.config.tokenizer.window_sides)?;
    let plan = build_order(&part.group_layout)?;
    let fractions: Vec<f64> = if sweep_prefix {
        plan.populated_levels()
            .iter()
            .map(|&v| (v + 1) as f64 / plan.levels as f64)
            .collect()
    } else {
        vec![1.0]
    };
    let max_level = plan.populated_levels().last().copied().unwrap_or(0);
    let mut rows = Vec::new();
    for f in fractions {
        let (stream, stats) = compress(bundle, image, f)?;
        // once every populated level is transmitted the suffix modes
        // coincide, so emit just one row
        let modes: &[SuffixMode] = if stats.prefix_cut > max_level {
            &[SuffixMode::Complete]
        } else {
            &[SuffixMode::Complete, SuffixMode::ZeroPad]
        };
        for &mode in modes {
            let out = decompress(bundle, &stream, mode)?;
            let m = mse(image, &out)?;
            rows.push(EvalRow {
                image_id: id.to_string(),
                bpp: stats.bpp,
                mse: m,
                psnr: psnr(m),
                prefix_fraction: f,
                mode: match mode {
                    SuffixMode::Complete => "complete".to_string(),
                    SuffixMode::ZeroPad => "zeropad".to_string(),
                },
            });
        }
    }
    Ok(rows)
}

fn eval_threads(n_images: usize) -> usize {
    std::env::var("RDVQ_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&t| t >= 1)
        .unwrap_or(1)
        .min(n_images.max(1))
}

/// Evaluate a set of images, optionally sweeping every populated prefix
/// level with both suffix modes. Parallelism is capped by RDVQ_THREADS;
/// output order never depends on it.
pub fn eval_images(
    bundle: &ModelBundle,
    images: &[(String, Tensor)],
    sweep_prefix: bool,
) -> Result<Vec<EvalRow>> {
    let threads = eval_threads(images.len());
    if threads <= 1 || images.len() <= 1 {
        let mut rows = Vec::new();
        for (id, img) in images {
            rows.extend(eval_one(bundle, id, img, sweep_prefix)?);
        }
        return Ok(rows);
    }
    let chunk = images.len().div_ceil(threads);
    let results: Vec<Result<Vec<EvalRow>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .map(|slice| {
                scope.spawn(move || {
                    let mut rows = Vec::new();
                    for (id, img) in slice {
                        rows.extend(eval_one(bundle, id, img, sweep_prefix)?);
                    }
                    Ok(rows)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
