//! Exercise the C ABI end to end from Rust: load, attribute, select, free.

use std::ffi::{CStr, CString};

use igprobe_ffi::*;

fn toy_spec_file(dir: &std::path::Path) -> CString {
    let spec = r#"{
        "layer_count": 2,
        "intermediate_dim": 6,
        "vocab_size": 10,
        "planted": [
            {"layer": 1, "index": 3, "trigger": [2, 3], "value_token": 4, "strength": 2.0}
        ],
        "seed": 9,
        "noise_magnitude": 0.001
    }"#;
    let path = dir.join("toy.json");
    std::fs::write(&path, spec).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn load_attribute_select_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = toy_spec_file(dir.path());

    unsafe {
        let mut status = IgpStatus::IgpPanic;
        let model = igp_model_load(path.as_ptr(), &mut status);
        assert_eq!(status, IgpStatus::IgpOk);
        assert!(!model.is_null());
        assert_eq!(igp_model_layer_count(model), 2);
        assert_eq!(igp_model_intermediate_dim(model), 6);
        assert_eq!(igp_model_vocab_size(model), 10);

        let prompt = CString::new("a b [MASK]").unwrap();
        let target = CString::new("c").unwrap();
        let attribution = igp_attribute(model, prompt.as_ptr(), target.as_ptr(), 8, false, &mut status);
        assert_eq!(status, IgpStatus::IgpOk);
        assert!(!attribution.is_null());
        assert_eq!(igp_attribution_layer_count(attribution), 2);
        assert_eq!(igp_attribution_intermediate_dim(attribution), 6);

        let scores = igp_attribution_scores(attribution);
        assert!(!scores.is_null());
        let flat = std::slice::from_raw_parts(scores, 12);
        // Planted neuron (layer 1, index 3): activation 1.0 x strength 2.0.
        let planted = flat[6 + 3];
        assert!((planted - 2.0).abs() < 1e-6, "{planted}");

        let set = igp_select_coarse(attribution, 0.5, &mut status);
        assert_eq!(status, IgpStatus::IgpOk);
        assert_eq!(igp_neuron_set_len(set), 1);
        let (mut layer, mut index, mut support) = (0usize, 0usize, 0u32);
        let code = igp_neuron_set_member(set, 0, &mut layer, &mut index, &mut support);
        assert_eq!(code, IgpStatus::IgpOk);
        assert_eq!((layer, index, support), (1, 3, 1));

        let adaptive = igp_select_adaptive(attribution, 1.0, &mut status);
        assert_eq!(status, IgpStatus::IgpOk);
        assert_eq!(igp_neuron_set_len(adaptive), 1);

        igp_neuron_set_free(set);
        igp_neuron_set_free(adaptive);
        igp_attribution_free(attribution);
        igp_model_free(model);
    }
}

#[test]
fn errors_surface_status_and_message() {
    unsafe {
        let mut status = IgpStatus::IgpOk;
        let missing = CString::new("/nonexistent/toy.json").unwrap();
        let model = igp_model_load(missing.as_ptr(), &mut status);
        assert!(model.is_null());
        assert_eq!(status, IgpStatus::IgpLoadError);
        let message = CStr::from_ptr(igp_last_error_message());
        assert!(!message.to_bytes().is_empty());

        let model = igp_model_load(std::ptr::null(), &mut status);
        assert!(model.is_null());
        assert_eq!(status, IgpStatus::IgpNullPointer);
    }

    // Structure errors map to their own code.
    let dir = tempfile::tempdir().unwrap();
    let path = toy_spec_file(dir.path());
    unsafe {
        let mut status = IgpStatus::IgpOk;
        let model = igp_model_load(path.as_ptr(), &mut status);
        assert_eq!(status, IgpStatus::IgpOk);

        let prompt = CString::new("no mask").unwrap();
        let target = CString::new("c").unwrap();
        let attribution =
            igp_attribute(model, prompt.as_ptr(), target.as_ptr(), 4, false, &mut status);
        assert!(attribution.is_null());
        assert_eq!(status, IgpStatus::IgpPromptStructureError);

        let prompt = CString::new("a [MASK]").unwrap();
        let target = CString::new("ab").unwrap();
        let attribution =
            igp_attribute(model, prompt.as_ptr(), target.as_ptr(), 4, false, &mut status);
        assert!(attribution.is_null());
        assert_eq!(status, IgpStatus::IgpMultiTokenTarget);

        igp_model_free(model);
    }
}

#[test]
fn version_is_exposed() {
    let version = unsafe { CStr::from_ptr(igp_version()) };
    assert_eq!(version.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
