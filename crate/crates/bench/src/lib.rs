//! Shared fixtures for the criterion benchmarks.

use rdvq_core::config::Config;
use rdvq_core::config::CorpusConfig;
use rdvq_core::corpus::generate_image;
use rdvq_core::pipeline::ModelBundle;
use rdvq_core::tensor::Tensor;

/// Default desk-scale bundle. The parameters are freshly initialized;
/// throughput does not depend on training, so benchmarks mark the stage
/// by hand instead of running the optimizer.
pub fn desk_bundle(stage: u8) -> ModelBundle {
    let cfg = Config::default();
    cfg.validate().expect("default config");
    let mut bundle = ModelBundle::init(cfg, 9001).expect("init");
    bundle.stage = stage;
    bundle
}

/// Deterministic [3, size, size] test image.
pub fn sample_image(size: usize, seed: u64) -> Tensor {
    let cfg = CorpusConfig {
        kind: "mixed".into(),
        count: 1,
        image_size: size,
        seed,
        path: None,
    };
    generate_image(&cfg, 0).expect("image")
}
