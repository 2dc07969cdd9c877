//! Deterministic synthetic image corpora.
//!
//! Four families keep the acceptance runs hermetic: linear gradients,
//! checkerboards, Gaussian blobs, and spatially correlated textures,
//! plus a round-robin "mixed" kind. Every image is a pure function of
//! (seed, index), so a corpus can be generated lazily, in any order,
//! and in parallel without changing a single pixel.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::config::CorpusConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

fn image_rng(seed: u64, index: usize) -> ChaCha12Rng {
    let mixed = seed ^ (index as u64).wrapping_mul(0x9e3779b97f4a7c15);
    ChaCha12Rng::seed_from_u64(mixed)
}

fn gradient_image(size: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let mut data = vec![0.0; 3 * size * size];
    for ch in 0..3 {
        let ax: f64 = rng.random_range(-1.0..1.0);
        let ay: f64 = rng.random_range(-1.0..1.0);
        let c: f64 = rng.random_range(-0.4..0.4);
        let denom = (size.max(2) - 1) as f64;
        for r in 0..size {
            for col in 0..size {
                let v = ax * (col as f64 / denom - 0.5) + ay * (r as f64 / denom - 0.5) + c;
                data[ch * size * size + r * size + col] = v.clamp(-1.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, size, size], data).unwrap()
}

fn checkerboard_image(size: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let cells = [2usize, 4, 8];
    let mut cell = cells[rng.random_range(0..cells.len())];
    while cell > size {
        cell /= 2;
    }
    let cell = cell.max(1);
    let phase_r: usize = rng.random_range(0..cell);
    let phase_c: usize = rng.random_range(0..cell);
    let a: [f64; 3] = [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ];
    let b: [f64; 3] = [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ];
    let mut data = vec![0.0; 3 * size * size];
    for r in 0..size {
        for col in 0..size {
            let parity = (((r + phase_r) / cell) + ((col + phase_c) / cell)) % 2;
            for ch in 0..3 {
                data[ch * size * size + r * size + col] =
                    if parity == 0 { a[ch] } else { b[ch] };
            }
        }
    }
    Tensor::new(vec![3, size, size], data).unwrap()
}

fn blob_image(size: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let base: [f64; 3] = [
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    ];
    let n_blobs = rng.random_range(1..=3usize);
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let cx: f64 = rng.random_range(0.15..0.85) * size as f64;
        let cy: f64 = rng.random_range(0.15..0.85) * size as f64;
        let sigma: f64 = rng.random_range(0.08..0.3) * size as f64;
        let amp: [f64; 3] = [
            rng.random_range(-1.2..1.2),
            rng.random_range(-1.2..1.2),
            rng.random_range(-1.2..1.2),
        ];
        blobs.push((cx, cy, sigma, amp));
    }
    let mut data = vec![0.0; 3 * size * size];
    for r in 0..size {
        for col in 0..size {
            for ch in 0..3 {
                let mut v = base[ch];
                for &(cx, cy, sigma, amp) in &blobs {
                    let dx = col as f64 - cx;
                    let dy = r as f64 - cy;
                    v += amp[ch] * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                }
                data[ch * size * size + r * size + col] = v.clamp(-1.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, size, size], data).unwrap()
}

fn texture_image(size: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let passes = rng.random_range(1..=3usize);
    let mut data = vec![0.0; 3 * size * size];
    for ch in 0..3 {
        let mut plane: Vec<f64> = (0..size * size)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        for _ in 0..passes {
            let mut next = vec![0.0; size * size];
            for r in 0..size {
                for col in 0..size {
                    let mut sum = 0.0;
                    let mut weight = 0.0;
                    for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            let rr = r as i64 + dr;
                            let cc = col as i64 + dc;
                            if rr < 0 || cc < 0 || rr >= size as i64 || cc >= size as i64 {
                                continue;
                            }
                            let w = if dr == 0 && dc == 0 { 4.0 } else { 1.0 };
                            sum += w * plane[rr as usize * size + cc as usize];
                            weight += w;
                        }
                    }
                    next[r * size + col] = sum / weight;
                }
            }
            plane = next;
        }
        let peak = plane
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs()))
            .max(1e-9);
        let gain: f64 = rng.random_range(0.5..1.0);
        for (dst, &v) in data[ch * size * size..(ch + 1) * size * size]
            .iter_mut()
            .zip(plane.iter())
        {
            *dst = gain * v / peak;
        }
    }
    Tensor::new(vec![3, size, size], data).unwrap()
}

/// Generate image `index` of the corpus described by `cfg`; shape
/// [3, size, size], values in [-1, 1].
pub fn generate_image(cfg: &CorpusConfig, index: usize) -> Result<Tensor> {
    let mut rng = image_rng(cfg.seed, index);
    let kind = if cfg.kind == "mixed" {
        ["gradients", "checkerboards", "blobs", "textures"][index % 4]
    } else {
        cfg.kind.as_str()
    };
    let size = cfg.image_size;
    match kind {
        "gradients" => Ok(gradient_image(size, &mut rng)),
        "checkerboards" => Ok(checkerboard_image(size, &mut rng)),
        "blobs" => Ok(blob_image(size, &mut rng)),
        "textures" => Ok(texture_image(size, &mut rng)),
        other => Err(Error::config(format!("unknown corpus kind {other:?}"))),
    }
}

/// Generate the whole corpus eagerly.
pub fn synthetic_corpus(cfg: &CorpusConfig) -> Result<Vec<Tensor>> {
    (0..cfg.count).map(|i| generate_image(cfg, i)).collect()
}

/// Stack [C, H, W] images into one [B, C, H, W] batch.
pub fn stack(images: &[Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::contract("cannot stack an empty image list"));
    }
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for im in images {
        if im.shape() != shape.as_slice() {
            return Err(Error::shape(format!(
                "stack: {:?} vs {:?}",
                im.shape(),
                shape
            )));
        }
        data.extend_from_slice(im.data());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(&shape);
    Tensor::new(full, data)
}

// ---------------------------------------------------------------------------
