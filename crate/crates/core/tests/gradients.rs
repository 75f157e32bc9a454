//! Finite-difference checks of the composite modules (float64, step 1e-3,
//! tolerance 1e-4).

use pcq_core::autodiff::GradCheckConfig;
use pcq_core::diagnostics::run_case;

fn assert_case(name: &str, seeds: std::ops::Range<u64>) {
    for seed in seeds {
        let r = run_case(
            name,
            seed,
            GradCheckConfig {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.passed(), "{name} seed {seed}: worst {:?}", r.worst());
        assert!(r.checked() > 0);
    }
}

#[test]
fn pdc_block_six_channels() {
    assert_case("pdc", 0..3);
}

#[test]
fn two_layer_mlcnn() {
    assert_case("mlcnn_two_layer", 0..3);
}

#[test]
fn csq_module_small() {
    assert_case("csq", 0..3);
}

#[test]
fn query_token_construction() {
    assert_case("query_tokens", 0..3);
}

#[test]
fn primitive_ops() {
    for name in [
        "conv2d",
        "conv2d_dilated7",
        "conv2d_depthwise",
        "bilinear_up",
        "bilinear_down",
        "adaptive_avg_pool",
        "global_avg_pool",
    ] {
        assert_case(name, 0..3);
    }
}

#[test]
fn miniature_full_model() {
    // The acceptance suite covers seeds 0..3; one extra seed here.
    assert_case("pcq_miniature", 3..4);
}

#[test]
fn unknown_case_is_config_error() {
    assert!(matches!(
        run_case("nope", 0, GradCheckConfig::default()),
        Err(pcq_core::PcqError::Config(_))
    ));
}
