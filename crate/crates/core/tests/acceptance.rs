//! System-level acceptance checks. Each test exercises one end-to-end
//! guarantee of the codec and prints the measured numbers it judged.
//!
//! The rate-distortion and prefix-control checks share a set of trained
//! bundles built once per test run (see `trained_runs`), so this target
//! carries real training time; everything else is fast.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use rdvq_core::analysis::usage_over_images;
use rdvq_core::coder::{decode_sequence, encode_sequence, QuantizedCdf};
use rdvq_core::config::{Config, CorpusConfig, EntropyModelConfig, TokenizerConfig};
use rdvq_core::corpus::generate_image;
use rdvq_core::entropy_model::{self, CompletionMode};
use rdvq_core::graph::Graph;
use rdvq_core::losses::{self, RDConfig};
use rdvq_core::ordering::{build_conditional_inputs, build_order, window_partition, OrderPlan};
use rdvq_core::params::{BoundParams, ParamSet};
use rdvq_core::pipeline::{
    compress, decompress, mse, train_stage, ModelBundle, SuffixMode,
};
use rdvq_core::tensor::Tensor;
use rdvq_core::tokenizer::{max_bpp, ScaleLayout};
use rdvq_core::vq;

// ---------------------------------------------------------------------------
// Small shared builders
// ---------------------------------------------------------------------------

fn corpus_images(count: usize, size: usize, seed: u64) -> Vec<Tensor> {
    let cfg = CorpusConfig {
        kind: "mixed".into(),
        count,
        image_size: size,
        seed,
        path: None,
    };
    (0..count).map(|i| generate_image(&cfg, i).unwrap()).collect()
}

/// Two-scale 4x4-pixel token layout used by the gradient checks: one
/// coarse token plus a 2x2 fine grid.
fn small_tokenizer() -> TokenizerConfig {
    TokenizerConfig {
        num_stages: 2,
        base_channels: 4,
        channel_multipliers: vec![1, 1],
        latent_dim: 4,
        num_scales: 2,
        scale_factors: vec![2, 4],
        window_sides: vec![1, 2],
        groupnorm_groups: 2,
        codebook_size: 8,
        commitment_beta: 0.25,
    }
}

fn small_entropy() -> EntropyModelConfig {
    EntropyModelConfig {
        depth: 2,
        heads: 2,
        model_dim: 16,
        mlp_ratio: 2,
    }
}

/// Entropy-model parameters with a non-degenerate head, so predictions
/// actually depend on context.
fn lively_em_params(
    tok: &TokenizerConfig,
    em: &EntropyModelConfig,
    seed: u64,
) -> ParamSet {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut params = entropy_model::init_params(tok, em, &mut rng).unwrap();
    let head = Tensor::rand_uniform(
        &[em.model_dim, tok.codebook_size],
        -0.5,
        0.5,
        &mut rng,
    );
    *params.get_mut("em.head.w").unwrap() = head;
    params.insert(
        "cb.codebook",
        vq::init_codebook(tok.codebook_size, tok.latent_dim, &mut rng).unwrap(),
    );
    params
}

fn one_hot(indices: &[u32], k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[1, indices.len(), k]);
    for (row, &i) in indices.iter().enumerate() {
        t.data_mut()[row * k + i as usize] = 1.0;
    }
    t
}

// ---------------------------------------------------------------------------
// 1. The soft rate really is the differentiable bridge
// ---------------------------------------------------------------------------

fn soft_rate_value(
    params: &ParamSet,
    plan: &OrderPlan,
    tok: &TokenizerConfig,
    em: &EntropyModelConfig,
    tau: f64,
) -> (f64, Vec<u32>) {
    let mut g = Graph::new();
    let bp = BoundParams::bind_frozen(&mut g, params);
    let y = bp.id("probe.y").unwrap();
    let cb = bp.id("cb.codebook").unwrap();
    let soft = vq::soft_distribution(&mut g, y, cb, tau).unwrap();
    let hard = vq::assign_hard(&mut g, y, cb).unwrap();
    let log_q = entropy_model::predict_sequence(&mut g, hard.y_q, plan, em, &bp).unwrap();
    let rate = losses::rate_soft(&mut g, soft.p_soft, log_q).unwrap();
    let _ = tok;
    (g.value(rate).item().unwrap(), hard.y_ind)
}

#[test]
fn rate_gradient_matches_finite_differences_and_hard_path_is_flat() {
    let tok = small_tokenizer();
    let em = small_entropy();
    let layout = ScaleLayout::for_image(&tok, 4, 4).unwrap();
    let plan = build_order(&layout).unwrap();
    let tau = 0.5;
    let h = 1e-5;
    let mut worst = 0.0f64;

    for seed in 0..10u64 {
        let mut params = lively_em_params(&tok, &em, 100 + seed);
        let mut rng = ChaCha12Rng::seed_from_u64(500 + seed);
        params.insert(
            "probe.y",
            Tensor::rand_uniform(&[1, plan.num_tokens(), tok.latent_dim], -1.0, 1.0, &mut rng),
        );

        // analytic gradient of the soft rate with respect to the
        // encoder output
        let (base_val, base_ind) = {
            let mut g = Graph::new();
            let bp = BoundParams::bind(&mut g, &params, |n| n == "probe.y");
            let y = bp.id("probe.y").unwrap();
            let cb = bp.id("cb.codebook").unwrap();
            let soft = vq::soft_distribution(&mut g, y, cb, tau).unwrap();
            let hard = vq::assign_hard(&mut g, y, cb).unwrap();
            let log_q =
                entropy_model::predict_sequence(&mut g, hard.y_q, &plan, &em, &bp).unwrap();
            let rate = losses::rate_soft(&mut g, soft.p_soft, log_q).unwrap();
            let grads = g.backward(rate).unwrap();
            let named = bp.grad_map(&grads);
            let gy = named.get("probe.y").unwrap().clone();

            // the hard-index rate reaches the encoder through nothing:
            // its index distribution is a constant and the transformer
            // context is detached
            let p_hard = g.constant(one_hot(&hard.y_ind, tok.codebook_size));
            let rate_hard_node = losses::rate_soft(&mut g, p_hard, log_q).unwrap();
            let hard_grads = g.backward(rate_hard_node).unwrap();
            let hard_named = bp.grad_map(&hard_grads);
            if let Some(ghy) = hard_named.get("probe.y") {
                assert!(
                    ghy.data().iter().all(|&v| v == 0.0),
                    "hard rate path leaked gradient into the encoder output"
                );
            }

            let val = g.value(rate).item().unwrap();
            let ind = hard.y_ind.clone();
            let n = gy.numel();
            let mut coords: Vec<usize> = Vec::new();
            let mut cr = ChaCha12Rng::seed_from_u64(900 + seed);
            while coords.len() < 6 {
                let c = cr.random_range(0..n);
                if !coords.contains(&c) {
                    coords.push(c);
                }
            }
            for &c in &coords {
                let mut plus = params.clone();
                plus.get_mut("probe.y").unwrap().data_mut()[c] += h;
                let (fp, ip) = soft_rate_value(&plus, &plan, &tok, &em, tau);
                let mut minus = params.clone();
                minus.get_mut("probe.y").unwrap().data_mut()[c] -= h;
                let (fm, im) = soft_rate_value(&minus, &plan, &tok, &em, tau);
                assert_eq!(ip, ind, "probe crossed a quantization boundary");
                assert_eq!(im, ind, "probe crossed a quantization boundary");
                let fd = (fp - fm) / (2.0 * h);
                let an = gy.data()[c];
                let denom = an.abs().max(fd.abs());
                let rel = if denom > 1e-7 {
                    (an - fd).abs() / denom
                } else {
                    assert!((an - fd).abs() < 1e-9);
                    0.0
                };
                assert!(
                    rel < 1e-4,
                    "seed {seed} coord {c}: analytic {an} vs fd {fd} (rel {rel:.2e})"
                );
                worst = worst.max(rel);
            }
            (val, ind)
        };
        let _ = (base_val, base_ind);
    }
    println!("PASS soft-rate gradient: worst relative error {worst:.3e} over 10 seeds, hard path exactly zero");
}

// ---------------------------------------------------------------------------
// 2. Soft assignment converges to the hard one-hot as tau drops
// ---------------------------------------------------------------------------

#[test]
fn soft_distribution_approaches_one_hot_as_temperature_drops() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let (l, c, k) = (40, 8, 32);
    let y = Tensor::rand_uniform(&[1, l, c], -1.0, 1.0, &mut rng);
    let cb = Tensor::rand_uniform(&[k, c], -1.0, 1.0, &mut rng);

    let taus = [1.0, 0.1, 0.01, 1e-4, 1e-6];
    let mut maxima = Vec::new();
    for &tau in &taus {
        let mut g = Graph::new();
        let yn = g.constant(y.clone());
        let cn = g.constant(cb.clone());
        let hard = vq::assign_hard(&mut g, yn, cn).unwrap();
        let soft = vq::soft_distribution(&mut g, yn, cn, tau).unwrap();
        let p = g.value(soft.p_soft).data().to_vec();
        let mut max_l1 = 0.0f64;
        for row in 0..l {
            let slice = &p[row * k..(row + 1) * k];
            let hard_idx = hard.y_ind[row] as usize;
            let argmax = slice
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, hard_idx, "argmax drifted at tau={tau}");
            let l1: f64 = slice
                .iter()
                .enumerate()
                .map(|(i, &v)| if i == hard_idx { (1.0 - v).abs() } else { v })
                .sum();
            max_l1 = max_l1.max(l1);
        }
        maxima.push(max_l1);
    }
    for w in maxima.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "sharpening not monotone: {maxima:?}");
    }
    assert!(
        maxima[4] < 1e-5,
        "tau=1e-6 still {} away from one-hot",
        maxima[4]
    );
    println!("PASS relaxation limit: max L1 per tau = {maxima:?}");
}

// ---------------------------------------------------------------------------
// 3. Ordering plan and end-to-end causality at desk scale
// ---------------------------------------------------------------------------

#[test]
fn ordering_segments_mask_and_causality_hold_at_desk_scale() {
    let tok = TokenizerConfig::default();
    let layout = ScaleLayout::for_image(&tok, 16, 16).unwrap();
    let plan = build_order(&layout).unwrap();
    assert_eq!(plan.segments_per_scale, vec![4, 8, 16]);
    assert_eq!(plan.offsets, vec![0, 4, 12]);

    let l = plan.num_tokens();
    assert_eq!(l, 21);
    for i in 0..l {
        for j in 0..l {
            assert_eq!(
                plan.mask[i * l + j],
                plan.order[i] > plan.order[j],
                "mask disagrees with strict order comparison at ({i},{j})"
            );
        }
    }

    // predictions at or below a perturbed token's order never move
    let em = EntropyModelConfig::default();
    let params = lively_em_params(&tok, &em, 42);
    let cb = params.get("cb.codebook").unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(43);
    let indices: Vec<u32> = (0..l)
        .map(|_| rng.random_range(0..tok.codebook_size as u32))
        .collect();
    let base_emb = vq::embed_indices(cb, &indices, 1, l).unwrap();

    let predict_all = |emb: Tensor| -> Vec<f64> {
        let mut g = Graph::new();
        let bp = BoundParams::bind_frozen(&mut g, &params);
        let y = g.constant(emb);
        let log_q = entropy_model::predict_sequence(&mut g, y, &plan, &em, &bp).unwrap();
        g.value(log_q).data().to_vec()
    };
    let base = predict_all(base_emb.clone());
    let k = tok.codebook_size;

    for t in 0..l {
        let mut pert = base_emb.clone();
        pert.data_mut()[t * tok.latent_dim] += 0.75;
        let moved = predict_all(pert);
        for r in 0..l {
            if plan.order[r] <= plan.order[t] {
                assert_eq!(
                    &base[r * k..(r + 1) * k],
                    &moved[r * k..(r + 1) * k],
                    "perturbing token {t} (order {}) moved row {r} (order {})",
                    plan.order[t],
                    plan.order[r]
                );
            }
        }
    }
    println!("PASS ordering: segments [4,8,16], offsets [0,4,12], mask oracle, causality over all 21 tokens");
}

// ---------------------------------------------------------------------------
// 4. Parallel teacher forcing equals sequential prediction
// ---------------------------------------------------------------------------

#[test]
fn parallel_and_sequential_predictions_agree() {
    let tok = TokenizerConfig::default();
    let em = EntropyModelConfig::default();
    let layout = ScaleLayout::for_image(&tok, 16, 16).unwrap();
    let plan = build_order(&layout).unwrap();
    let l = plan.num_tokens();
    let k = tok.codebook_size;
    let mut worst = 0.0f64;

    for seed in 0..5u64 {
        let params = lively_em_params(&tok, &em, 1000 + seed);
        let cb = params.get("cb.codebook").unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2000 + seed);
        let indices: Vec<u32> = (0..l).map(|_| rng.random_range(0..k as u32)).collect();
        let emb = vq::embed_indices(cb, &indices, 1, l).unwrap();

        let mut g = Graph::new();
        let bp = BoundParams::bind_frozen(&mut g, &params);
        let y = g.constant(emb);
        let start = bp.id("em.start").unwrap();
        let cs = build_conditional_inputs(&mut g, y, &plan, start).unwrap();
        let positions: Vec<usize> = (0..l).collect();
        let full = entropy_model::predict(&mut g, cs.inputs, &plan.mask, &positions, &em, &bp)
            .unwrap();
        let full_v = g.value(full).data().to_vec();

        for i in 0..l {
            let mut js: Vec<usize> = (0..l).filter(|&j| plan.order[j] < plan.order[i]).collect();
            js.push(i);
            js.sort_unstable();
            let sel: Vec<Option<usize>> = js.iter().map(|&j| Some(j)).collect();
            let sub_inputs = g.select_tokens(cs.inputs, &sel).unwrap();
            let mut sub_mask = vec![false; js.len() * js.len()];
            for (a, &ja) in js.iter().enumerate() {
                for (b, &jb) in js.iter().enumerate() {
                    sub_mask[a * js.len() + b] = plan.mask[ja * l + jb];
                }
            }
            let sub = entropy_model::predict(&mut g, sub_inputs, &sub_mask, &js, &em, &bp)
                .unwrap();
            let sub_v = g.value(sub).data().to_vec();
            let at = js.iter().position(|&j| j == i).unwrap();
            for s in 0..k {
                let diff = (full_v[i * k + s] - sub_v[at * k + s]).abs();
                worst = worst.max(diff);
                assert!(
                    diff <= 1e-10,
                    "seed {seed} token {i} symbol {s}: parallel vs sequential diff {diff}"
                );
            }
        }
    }
    println!("PASS parallel-sequential equivalence: worst |diff| {worst:.3e} over 5 models");
}

// ---------------------------------------------------------------------------
// 5. Range coder exactness and rate fidelity
// ---------------------------------------------------------------------------

#[test]
fn coder_round_trips_losslessly_within_rate_bounds() {
    let mut rng = ChaCha12Rng::seed_from_u64(77);
    let mut total_overhead = 0.0f64;
    for trip in 0..500 {
        let k = rng.random_range(2..=64usize);
        let len = rng.random_range(0..=96usize);
        let precision = rng.random_range(10..=16u32);
        let probs: Vec<f64> = (0..k)
            .map(|_| {
                let u: f64 = rng.random();
                u * u * u + 1e-4
            })
            .collect();
        let cdf = QuantizedCdf::from_probs(&probs, precision).unwrap();
        let symbols: Vec<u32> = (0..len).map(|_| rng.random_range(0..k as u32)).collect();
        let cdfs: Vec<QuantizedCdf> = vec![cdf.clone(); len];
        let payload = encode_sequence(&symbols, &cdfs).unwrap();
        let decoded =
            decode_sequence(&payload, len, |_i, _prev| Ok(cdf.clone())).unwrap();
        assert_eq!(decoded, symbols, "trip {trip} not lossless");

        let ideal: f64 = symbols.iter().map(|&s| cdf.bits(s as usize)).sum();
        let actual = 8.0 * payload.len() as f64;
        assert!(
            actual >= ideal - 8.0 && actual <= ideal + 64.0,
            "trip {trip}: {actual} bits vs ideal {ideal}"
        );
        total_overhead += actual - ideal;
    }
    println!(
        "PASS coder: 500 lossless round trips, mean overhead {:.2} bits",
        total_overhead / 500.0
    );
}

// ---------------------------------------------------------------------------
// 6. Maximum-rate formula at the reference operating point
// ---------------------------------------------------------------------------

#[test]
fn max_rate_formula_reproduces_reference_value() {
    let tok = TokenizerConfig {
        num_stages: 6,
        scale_factors: vec![16, 32, 64],
        ..TokenizerConfig::default()
    };
    let layout = ScaleLayout::for_image(&tok, 256, 256).unwrap();
    let grids: Vec<(usize, usize)> = layout
        .entries
        .iter()
        .map(|e| (e.height, e.width))
        .collect();
    assert_eq!(grids, vec![(4, 4), (8, 8), (16, 16)]);
    let bpp = max_bpp(&layout, 4096, 256, 256).unwrap();
    assert!(
        (bpp - 0.0615).abs() < 1e-4,
        "max bpp {bpp} not within 1e-4 of 0.0615"
    );
    println!("PASS max-rate formula: 256x256 with 4096 codewords gives {bpp:.6} bpp");
}

// ---------------------------------------------------------------------------
// Shared trained bundles for the rate-distortion checks
// ---------------------------------------------------------------------------

struct TrainedRuns {
    lambdas: Vec<f64>,
    bundles: Vec<ModelBundle>,
    /// Joint bundle tuned at a rate weight gentle enough to keep tokens
    /// informative while making them predictable; used for the prefix sweep.
    sweep: ModelBundle,
    eval: Vec<(String, Tensor)>,
    /// Larger eval images exercising the window-based multi-group path.
    eval32: Vec<Tensor>,
    bpps: Vec<f64>,
    entropies: Vec<f64>,
}

static RUNS: OnceLock<TrainedRuns> = OnceLock::new();

fn trained_runs() -> &'static TrainedRuns {
    RUNS.get_or_init(|| {
        let mut cfg = Config::default();
        cfg.run.steps = [4000, 3000, 200];
        cfg.run.lr = [0.1, 1.0, 0.02];
        cfg.run.batch_size = 8;
        cfg.validate().unwrap();

        let train = corpus_images(192, 16, 41);
        let eval: Vec<(String, Tensor)> = corpus_images(20, 16, 990)
            .into_iter()
            .enumerate()
            .map(|(i, t)| (format!("eval{i:02}"), t))
            .collect();
        let eval32 = corpus_images(20, 32, 990);

        let mut base = ModelBundle::init(cfg, 123).unwrap();
        let warm = losses::schedule("low", 0).unwrap();
        let rows1 = train_stage(&mut base, 1, &warm, &train).unwrap();
        eprintln!(
            "stage 1: mse {:.4} -> {:.4}",
            rows1.first().unwrap().mse,
            rows1.last().unwrap().mse
        );
        let rows2 = train_stage(&mut base, 2, &warm, &train).unwrap();
        eprintln!(
            "stage 2: rate {:.3} -> {:.3} bits/token",
            rows2.first().unwrap().rate_bits,
            rows2.last().unwrap().rate_bits
        );

        let points = [("high", 0), ("high", 1), ("low", 0), ("low", 2)];
        let mut lambdas = Vec::new();
        let mut bundles = Vec::new();
        let mut bpps = Vec::new();
        let mut entropies = Vec::new();
        for (regime, level) in points {
            let rd: RDConfig = losses::schedule(regime, level).unwrap();
            let mut b = base.clone();
            b.config.run.lr[2] = 0.1;
            train_stage(&mut b, 3, &rd, &train).unwrap();
            let mut bpp_sum = 0.0;
            for (_, img) in &eval {
                let (_, stats) = compress(&b, img, 1.0).unwrap();
                bpp_sum += stats.bpp;
            }
            let plain: Vec<Tensor> = eval.iter().map(|(_, t)| t.clone()).collect();
            let usage = usage_over_images(&b, &plain).unwrap();
            eprintln!(
                "trained lambda={:.1}: mean bpp {:.4}, usage entropy {:.4}",
                rd.lambda,
                bpp_sum / eval.len() as f64,
                usage.normalized_entropy
            );
            lambdas.push(rd.lambda);
            bpps.push(bpp_sum / eval.len() as f64);
            entropies.push(usage.normalized_entropy);
            bundles.push(b);
        }

        // Prefix-sweep bundle: joint tuning on a corpus that includes the
        // larger eval resolution, first at a moderate rate weight so the
        // encoder settles on tokens the entropy model can predict, then a
        // short low-weight pass so every order level keeps a nonzero cost.
        let mut mixed = corpus_images(160, 16, 41);
        mixed.extend(corpus_images(32, 32, 77));
        let mut sweep = base.clone();
        sweep.config.run.steps = [4000, 3000, 600];
        let align = RDConfig {
            lambda: 0.08,
            tau: 0.1,
            regime: losses::Regime::Low,
        };
        train_stage(&mut sweep, 3, &align, &mixed).unwrap();
        sweep.config.run.steps = [4000, 3000, 120];
        let refresh = RDConfig {
            lambda: 0.01,
            tau: 0.1,
            regime: losses::Regime::Low,
        };
        train_stage(&mut sweep, 3, &refresh, &mixed).unwrap();

        TrainedRuns {
            lambdas,
            bundles,
            sweep,
            eval,
            eval32,
            bpps,
            entropies,
        }
    })
}

// ---------------------------------------------------------------------------
// 7. Stronger rate pressure lowers measured rate and usage entropy
// ---------------------------------------------------------------------------

#[test]
fn higher_lambda_yields_lower_rate_and_more_concentrated_usage() {
    let runs = trained_runs();
    assert_eq!(runs.lambdas, vec![0.8, 1.2, 4.8, 12.0]);
    let inversions = runs
        .bpps
        .windows(2)
        .filter(|w| w[1] > w[0] + 1e-12)
        .count();
    assert!(
        inversions <= 1,
        "bpp not non-increasing in lambda: {:?} ({} inversions)",
        runs.bpps,
        inversions
    );
    assert!(
        runs.entropies[3] < runs.entropies[0],
        "usage entropy at lambda=12 ({}) not below lambda=0.8 ({})",
        runs.entropies[3],
        runs.entropies[0]
    );
    println!(
        "PASS rate-distortion trend: bpp {:?} over lambda {:?}, entropy {:.4} -> {:.4}",
        runs.bpps, runs.lambdas, runs.entropies[0], runs.entropies[3]
    );
}

// ---------------------------------------------------------------------------
// 8. Prefix length trades rate for distortion monotonically
// ---------------------------------------------------------------------------

#[test]
fn prefix_sweep_trades_rate_for_distortion_monotonically() {
    let runs = trained_runs();
    let bundle = &runs.sweep;
    let tok = &bundle.config.tokenizer;
    let layout = ScaleLayout::for_image(tok, 32, 32).unwrap();
    let part = window_partition(&layout, &tok.window_sides).unwrap();
    let plan = build_order(&part.group_layout).unwrap();
    let populated = plan.populated_levels();
    let max_level = *populated.last().unwrap();

    let mut bytes_per_cut = Vec::new();
    let mut mse_complete = Vec::new();
    let mut mse_zeropad = Vec::new();
    for &v in &populated {
        let f = (v + 1) as f64 / plan.levels as f64;
        let mut total_bytes = 0usize;
        let mut mc = 0.0;
        let mut mz = 0.0;
        for img in &runs.eval32 {
            let (stream, _) = compress(bundle, img, f).unwrap();
            total_bytes += stream.total_bytes();
            let dc = decompress(bundle, &stream, SuffixMode::Complete).unwrap();
            mc += mse(img, &dc).unwrap();
            if v < max_level {
                let dz = decompress(bundle, &stream, SuffixMode::ZeroPad).unwrap();
                mz += mse(img, &dz).unwrap();
            }
        }
        let n = runs.eval32.len() as f64;
        bytes_per_cut.push(total_bytes);
        mse_complete.push(mc / n);
        mse_zeropad.push(if v < max_level { mz / n } else { mc / n });
        eprintln!(
            "prefix {:5.3}: {} bytes total, mse complete {:.5}, zeropad {:.5}",
            f,
            total_bytes,
            mc / n,
            if v < max_level { mz / n } else { mc / n }
        );
    }

    for w in bytes_per_cut.windows(2) {
        assert!(
            w[1] > w[0],
            "aggregate stream size not strictly increasing with prefix: {bytes_per_cut:?}"
        );
    }
    let inversions = mse_complete
        .windows(2)
        .filter(|w| w[1] > w[0] + 1e-12)
        .count();
    assert!(
        inversions <= 2,
        "completed MSE rose {inversions} times along the sweep: {mse_complete:?}"
    );
    for (i, &v) in populated.iter().enumerate() {
        if v < max_level {
            assert!(
                mse_complete[i] <= mse_zeropad[i],
                "at level {v} completion ({}) lost to zero padding ({})",
                mse_complete[i],
                mse_zeropad[i]
            );
        }
    }
    println!(
        "PASS prefix control: {} cut points, bytes {:?}, completion never worse than zero padding",
        populated.len(),
        bytes_per_cut
    );
}

// ---------------------------------------------------------------------------
// 9. Coding is bit-identical across repeats
// ---------------------------------------------------------------------------

#[test]
fn coding_is_bit_identical_across_repeats() {
    let runs = trained_runs();
    let bundle = &runs.bundles[0];
    for (id, img) in runs.eval.iter().take(3) {
        for f in [0.4, 1.0] {
            let (s1, st1) = compress(bundle, img, f).unwrap();
            let (s2, st2) = compress(bundle, img, f).unwrap();
            assert_eq!(s1.to_bytes().unwrap(), s2.to_bytes().unwrap(), "{id} at {f}");
            assert_eq!(st1, st2);
            for mode in [SuffixMode::Complete, SuffixMode::ZeroPad] {
                let d1 = decompress(bundle, &s1, mode).unwrap();
                let d2 = decompress(bundle, &s2, mode).unwrap();
                assert_eq!(d1.data(), d2.data(), "{id} at {f} mode {mode:?}");
            }
        }
    }
    println!("PASS determinism: repeated compress/decompress bit-identical on 3 images x 2 prefixes");
}

// ---------------------------------------------------------------------------
// 10. The entropy model learns planted token dependencies
// ---------------------------------------------------------------------------

/// Single-scale 4x4 token layout: four segments of four tokens, so each
/// token's conditional source is the same slot one segment earlier.
fn chain_tokenizer() -> TokenizerConfig {
    TokenizerConfig {
        num_stages: 2,
        base_channels: 4,
        channel_multipliers: vec![1, 1],
        latent_dim: 8,
        num_scales: 1,
        scale_factors: vec![4],
        window_sides: vec![4],
        groupnorm_groups: 2,
        codebook_size: 16,
        commitment_beta: 0.25,
    }
}

/// Token sequences where segment s repeats a fixed permutation of
/// segment s-1; only the first segment carries fresh randomness.
fn chain_sequence(perm: &[u32], rng: &mut ChaCha12Rng) -> Vec<u32> {
    let k = perm.len() as u32;
    let mut seq = vec![0u32; 16];
    for j in 0..4 {
        seq[j] = rng.random_range(0..k);
    }
    for s in 1..4 {
        for j in 0..4 {
            seq[s * 4 + j] = perm[seq[(s - 1) * 4 + j] as usize];
        }
    }
    seq
}

#[test]
fn entropy_model_learns_deterministic_dependencies() {
    let tok = chain_tokenizer();
    let em = EntropyModelConfig {
        depth: 2,
        heads: 2,
        model_dim: 32,
        mlp_ratio: 2,
    };
    let layout = ScaleLayout::for_image(&tok, 16, 16).unwrap();
    let plan = build_order(&layout).unwrap();
    assert_eq!(plan.num_tokens(), 16);
    assert_eq!(plan.levels, 4);

    let k = tok.codebook_size;
    let mut rng = ChaCha12Rng::seed_from_u64(314);
    let mut perm: Vec<u32> = (0..k as u32).collect();
    for i in (1..k).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let mut params = ParamSet::new();
    params.insert(
        "cb.codebook",
        Tensor::rand_uniform(&[k, tok.latent_dim], -1.0, 1.0, &mut rng),
    );
    let mut em_rng = ChaCha12Rng::seed_from_u64(315);
    for (name, t) in entropy_model::init_params(&tok, &em, &mut em_rng).unwrap().iter() {
        params.insert(name, t.clone());
    }

    // train only the entropy model against the planted chains
    let steps = 500;
    let batch = 8;
    let lr = 0.4;
    let mut last_loss = f64::INFINITY;
    for step in 0..steps {
        let mut flat = Vec::with_capacity(batch * 16);
        let mut seq_rng = ChaCha12Rng::seed_from_u64(10_000 + step as u64);
        for _ in 0..batch {
            flat.extend(chain_sequence(&perm, &mut seq_rng));
        }
        let cb = params.get("cb.codebook").unwrap();
        let emb = vq::embed_indices(cb, &flat, batch, 16).unwrap();
        let mut oh = Tensor::zeros(&[batch, 16, k]);
        for (row, &i) in flat.iter().enumerate() {
            oh.data_mut()[row * k + i as usize] = 1.0;
        }
        let mut g = Graph::new();
        let bp = BoundParams::bind(&mut g, &params, |n| n.starts_with("em."));
        let y = g.constant(emb);
        let log_q = entropy_model::predict_sequence(&mut g, y, &plan, &em, &bp).unwrap();
        let p = g.constant(oh);
        let loss = losses::rate_soft(&mut g, p, log_q).unwrap();
        last_loss = g.value(loss).item().unwrap();
        let grads = g.backward(loss).unwrap();
        let named = bp.grad_map(&grads);
        rdvq_core::params::sgd_step(&mut params, &named, lr, 1.0).unwrap();
    }

    // held-out: measured rate and suffix recovery
    let held = 20;
    let mut flat = Vec::with_capacity(held * 16);
    let mut ho_rng = ChaCha12Rng::seed_from_u64(99_000);
    let seqs: Vec<Vec<u32>> = (0..held)
        .map(|_| chain_sequence(&perm, &mut ho_rng))
        .collect();
    for s in &seqs {
        flat.extend(s.iter().copied());
    }
    let cb = params.get("cb.codebook").unwrap().clone();
    let emb = vq::embed_indices(&cb, &flat, held, 16).unwrap();
    let mut g = Graph::new();
    let bp = BoundParams::bind_frozen(&mut g, &params);
    let y = g.constant(emb);
    let log_q = entropy_model::predict_sequence(&mut g, y, &plan, &em, &bp).unwrap();
    let rate_total = losses::rate_hard(&flat, g.value(log_q)).unwrap();
    let per_token = rate_total / (held * 16) as f64;
    let budget = 0.8 * (k as f64).log2();
    assert!(
        per_token <= budget,
        "held-out rate {per_token:.3} bits/token exceeds 0.8 log2 K = {budget:.3}"
    );

    let mut correct = 0usize;
    let mut total = 0usize;
    for s in &seqs {
        let mut prefix: Vec<Option<u32>> = vec![None; 16];
        for j in 0..4 {
            prefix[j] = Some(s[j]);
        }
        let done = entropy_model::complete_suffix(
            &prefix,
            &plan,
            &cb,
            &em,
            &params,
            CompletionMode::Deterministic,
        )
        .unwrap();
        for t in 4..16 {
            total += 1;
            if done[t] == s[t] {
                correct += 1;
            }
        }
    }
    let acc = correct as f64 / total as f64;
    assert!(
        acc >= 0.95,
        "suffix recovery {acc:.3} below 0.95 (rate {per_token:.3} bits/token, final loss {last_loss:.3})"
    );
    println!(
        "PASS dependency learning: {per_token:.3} bits/token (budget {budget:.2}), suffix accuracy {:.1}%",
        100.0 * acc
    );
}
