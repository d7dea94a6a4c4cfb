//! Shared fixtures for the criterion benches.

use jepagrasp_core::datasets::{generate_objects, GeneratorConfig};
use jepagrasp_core::encoder::{init_backbone, init_pool, EncoderConfig};
use jepagrasp_core::jepatrain::{prepare_object, ObjectTokens};
use jepagrasp_core::pointops::{PointCloud, TokenizerConfig};
use jepagrasp_core::rng;
use jepagrasp_core::tensorcore::ParamStore;

/// One generated object cloud of `n` points.
pub fn cloud(n: usize) -> PointCloud {
    let cfg = GeneratorConfig {
        categories: 2,
        objects_per_category: 2,
        samples_per_object: 1,
        cloud_size: n,
        ..Default::default()
    };
    generate_objects(&cfg).expect("generator").remove(0).cloud
}

/// Desk-scale backbone plus pool and the tokens of one object.
pub fn backbone(tok: &TokenizerConfig, enc: &EncoderConfig) -> (ParamStore<f32>, ObjectTokens) {
    let mut r = rng::stream(0, &[rng::tag("bench")]);
    let mut store = ParamStore::new();
    init_backbone(&mut store, tok, enc, &mut r);
    init_pool(&mut store, enc.embed_dim, &mut r);
    let obj = prepare_object(&cloud(tok.cloud_size), tok).expect("tokens");
    (store, obj)
}
