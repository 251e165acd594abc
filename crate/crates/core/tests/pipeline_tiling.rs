//! Overlapping-tile inference properties: tiled application equals
//! whole-image application, window mode agrees with full-sequence mode on
//! unclamped windows, and evaluation is bitwise deterministic.

use ansg_core::autograd::ParamSet;
use ansg_core::pipeline::{tiled_apply, FeatureStack, PipelineConfig, SequenceMode};
use ansg_core::recurrent::{BdcLstmStackConfig, BdcLstmStackParams, InitScheme};
use ansg_core::rng::Rng;
use ansg_core::tensor::Tensor;

fn test_stack(seed: u64) -> (ParamSet<f32>, BdcLstmStackConfig, BdcLstmStackParams) {
    let mut rng = Rng::substream(seed, "tiling.params");
    let cfg = BdcLstmStackConfig::with_widths(4, 2, 3, 4);
    let mut ps = ParamSet::new();
    let params =
        BdcLstmStackParams::init(&mut ps, "deep", &cfg, InitScheme::Uniform(0.02), &mut rng)
            .unwrap();
    (ps, cfg, params)
}

fn random_features(seed: u64, n_z: usize, extent: usize) -> FeatureStack<f32> {
    let mut rng = Rng::substream(seed, "tiling.features");
    FeatureStack::new(
        (0..n_z)
            .map(|_| Tensor::from_fn(&[4, extent, extent], |_| rng.uniform(-1.0, 1.0) as f32))
            .collect(),
    )
    .unwrap()
}

fn config(tile: usize) -> PipelineConfig {
    PipelineConfig {
        rho: 1,
        tile,
        margin: 14,
        sequence_mode: SequenceMode::Window,
        feature_working: 512,
        feature_context: 32,
    }
}

#[test]
fn tiled_equals_whole_image() {
    for seed in 0..3u64 {
        let (ps, cfg, params) = test_stack(seed);
        let features = random_features(seed, 3, 160);

        let tiled = tiled_apply(&features, &ps, &cfg, &params, &config(50)).unwrap();
        let whole = tiled_apply(&features, &ps, &cfg, &params, &config(160)).unwrap();

        assert_eq!(tiled.len(), 3);
        assert_eq!(tiled.slice_shape(), &[2, 160, 160]);
        for z in 0..3 {
            let diff = tiled.slice(z).max_abs_diff(whole.slice(z));
            assert!(diff < 1e-5, "seed {seed} slice {z}: max diff {diff}");
        }
    }
}

#[test]
fn tiled_handles_images_smaller_than_one_tile() {
    let (ps, cfg, params) = test_stack(7);
    let features = random_features(7, 2, 36);
    let out = tiled_apply(&features, &ps, &cfg, &params, &config(50)).unwrap();
    assert_eq!(out.slice_shape(), &[2, 36, 36]);
}

#[test]
fn tiled_handles_odd_extents() {
    let (ps, cfg, params) = test_stack(9);
    let mut rng = Rng::substream(9, "odd");
    let features = FeatureStack::new(
        (0..2)
            .map(|_| Tensor::from_fn(&[4, 73, 61], |_| rng.uniform(-1.0, 1.0) as f32))
            .collect(),
    )
    .unwrap();
    let tiled = tiled_apply(&features, &ps, &cfg, &params, &config(24)).unwrap();
    let whole = tiled_apply(&features, &ps, &cfg, &params, &config(74)).unwrap();
    assert_eq!(tiled.slice_shape(), &[2, 73, 61]);
    for z in 0..2 {
        let diff = tiled.slice(z).max_abs_diff(whole.slice(z));
        assert!(diff < 1e-5, "slice {z}: max diff {diff}");
    }
}

#[test]
fn window_mode_with_full_coverage_matches_full_mode_at_center() {
    // A window that spans the entire stack without clamping is the same
    // sequence the full mode sees, so the center slice must agree.
    let (ps, cfg, params) = test_stack(11);
    let features = random_features(11, 5, 48);
    let pcfg = config(48);

    let full = tiled_apply(&features, &ps, &cfg, &params, &pcfg).unwrap();

    // Center slice z = 2 with rho = 2: indices 0..5 unclamped.
    let window = FeatureStack::new((0..5).map(|z| features.slice(z).clone()).collect()).unwrap();
    let windowed = tiled_apply(&window, &ps, &cfg, &params, &pcfg).unwrap();

    let diff = windowed.slice(2).max_abs_diff(full.slice(2));
    assert!(diff < 1e-5, "center disagreement {diff}");
}

#[test]
fn tiled_apply_is_bitwise_deterministic() {
    let (ps, cfg, params) = test_stack(13);
    let features = random_features(13, 3, 96);
    let a = tiled_apply(&features, &ps, &cfg, &params, &config(40)).unwrap();
    let b = tiled_apply(&features, &ps, &cfg, &params, &config(40)).unwrap();
    for z in 0..3 {
        for (x, y) in a.slice(z).data().iter().zip(b.slice(z).data().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
