//! Exercises the C ABI exactly as a foreign caller would: through the
//! exported extern "C" functions, opaque handles, and status codes.

use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::ptr;

use pointdiffusion::condition::ConditionParams;
use pointdiffusion::config::ModelConfig;
use pointdiffusion::network::{init_params, save_model};
use pointdiffusion_ffi::*;

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pointdiffusion-ffi-{tag}"));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn c_path(path: &std::path::Path) -> CString {
    CString::new(path.to_str().unwrap()).unwrap()
}

fn micro_config() -> ModelConfig {
    ModelConfig {
        n_classes: 3,
        channels: vec![6, 8, 10],
        k: 4,
        ratios: vec![0.5, 0.5],
        time_dim: 8,
        label_scale: 1.0,
        feature_dim: 0,
        cond_levels: 2,
        use_logits: false,
    }
}

#[test]
fn version_is_a_static_string() {
    let v = unsafe { CStr::from_ptr(pd_version()) };
    assert!(!v.to_str().unwrap().is_empty());
}

#[test]
fn cloud_generate_save_load_round_trip() {
    let dir = temp_dir("cloud-roundtrip");
    let path = dir.join("scene.pdpc");

    let preset = CString::new("separable").unwrap();
    let mut cloud: *mut PdCloud = ptr::null_mut();
    let code = unsafe { pd_cloud_generate(preset.as_ptr(), 3, 31, 7, &mut cloud) };
    assert_eq!(code, PD_OK);
    assert!(!cloud.is_null());

    let mut n = 0u64;
    assert_eq!(unsafe { pd_cloud_points(cloud, &mut n) }, PD_OK);
    assert_eq!(n, 31);
    let mut m = 0u32;
    assert_eq!(unsafe { pd_cloud_classes(cloud, &mut m) }, PD_OK);
    assert_eq!(m, 3);

    let mut labels = vec![0u16; n as usize];
    assert_eq!(
        unsafe { pd_cloud_labels(cloud, labels.as_mut_ptr(), labels.len()) },
        PD_OK
    );
    // 31 points over 3 classes: 11/10/10.
    assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 11);

    let mut positions = vec![0f32; n as usize * 3];
    assert_eq!(
        unsafe { pd_cloud_positions(cloud, positions.as_mut_ptr(), positions.len()) },
        PD_OK
    );
    assert!(positions.iter().all(|v| v.is_finite()));

    let cp = c_path(&path);
    assert_eq!(unsafe { pd_cloud_save(cloud, cp.as_ptr()) }, PD_OK);

    let mut loaded: *mut PdCloud = ptr::null_mut();
    assert_eq!(unsafe { pd_cloud_load(cp.as_ptr(), &mut loaded) }, PD_OK);
    let mut labels2 = vec![0u16; n as usize];
    assert_eq!(
        unsafe { pd_cloud_labels(loaded, labels2.as_mut_ptr(), labels2.len()) },
        PD_OK
    );
    assert_eq!(labels, labels2);

    unsafe {
        pd_cloud_free(cloud);
        pd_cloud_free(loaded);
    }
}

#[test]
fn null_arguments_are_reported() {
    let mut out: *mut PdCloud = ptr::null_mut();
    assert_eq!(
        unsafe { pd_cloud_load(ptr::null(), &mut out) },
        PD_NULL_ARGUMENT
    );
    let preset = CString::new("separable").unwrap();
    assert_eq!(
        unsafe { pd_cloud_generate(preset.as_ptr(), 3, 30, 0, ptr::null_mut()) },
        PD_NULL_ARGUMENT
    );
    assert_eq!(unsafe { pd_cloud_points(ptr::null(), ptr::null_mut()) }, PD_NULL_ARGUMENT);
    let msg = unsafe { CStr::from_ptr(pd_last_error()) };
    assert!(!msg.to_bytes().is_empty());
}

#[test]
fn invalid_preset_and_small_buffers_are_invalid_arguments() {
    let preset = CString::new("bogus").unwrap();
    let mut cloud: *mut PdCloud = ptr::null_mut();
    assert_eq!(
        unsafe { pd_cloud_generate(preset.as_ptr(), 3, 30, 0, &mut cloud) },
        PD_INVALID_ARGUMENT
    );

    let preset = CString::new("separable").unwrap();
    assert_eq!(
        unsafe { pd_cloud_generate(preset.as_ptr(), 3, 30, 0, &mut cloud) },
        PD_OK
    );
    let mut tiny = vec![0u16; 3];
    assert_eq!(
        unsafe { pd_cloud_labels(cloud, tiny.as_mut_ptr(), tiny.len()) },
        PD_INVALID_ARGUMENT
    );
    unsafe { pd_cloud_free(cloud) };
}

#[test]
fn missing_and_malformed_files_get_distinct_codes() {
    let missing = CString::new("/nonexistent/nothing.pdpc").unwrap();
    let mut out: *mut PdCloud = ptr::null_mut();
    assert_eq!(unsafe { pd_cloud_load(missing.as_ptr(), &mut out) }, PD_IO_ERROR);

    let dir = temp_dir("bad-file");
    let path = dir.join("garbage.pdpc");
    std::fs::write(&path, b"NOPE").unwrap();
    let cp = c_path(&path);
    assert_eq!(unsafe { pd_cloud_load(cp.as_ptr(), &mut out) }, PD_FORMAT_ERROR);
    let msg = unsafe { CStr::from_ptr(pd_last_error()) }
        .to_str()
        .unwrap()
        .to_string();
    assert!(msg.contains("magic"), "{msg}");
}

#[test]
fn miou_matches_hand_count() {
    let pred = [0u16, 0, 1, 1];
    let gt = [0u16, 1, 1, 1];
    let mut out = 0.0f64;
    assert_eq!(
        unsafe { pd_miou(pred.as_ptr(), gt.as_ptr(), 4, 2, &mut out) },
        PD_OK
    );
    assert!((out - 7.0 / 12.0).abs() < 1e-12);
}

#[test]
fn model_load_and_sampling_are_deterministic() {
    let dir = temp_dir("model");
    let ckpt = dir.join("model.pdck");
    let cfg = micro_config();
    let cond = ConditionParams::init(&cfg, 3).unwrap();
    let dnet = init_params(&cfg, 4).unwrap();
    save_model(&ckpt, &cfg, &cond, Some(&dnet)).unwrap();

    let cp = c_path(&ckpt);
    let mut model: *mut PdModel = ptr::null_mut();
    assert_eq!(unsafe { pd_model_load(cp.as_ptr(), &mut model) }, PD_OK);
    let mut m = 0u32;
    assert_eq!(unsafe { pd_model_classes(model, &mut m) }, PD_OK);
    assert_eq!(m, 3);

    let preset = CString::new("separable").unwrap();
    let mut cloud: *mut PdCloud = ptr::null_mut();
    assert_eq!(
        unsafe { pd_cloud_generate(preset.as_ptr(), 3, 24, 11, &mut cloud) },
        PD_OK
    );
    let mut a = vec![0u16; 24];
    let mut b = vec![0u16; 24];
    assert_eq!(
        unsafe { pd_sample(model, cloud, 4, 99, a.as_mut_ptr(), a.len()) },
        PD_OK
    );
    assert_eq!(
        unsafe { pd_sample(model, cloud, 4, 99, b.as_mut_ptr(), b.len()) },
        PD_OK
    );
    assert_eq!(a, b);

    unsafe {
        pd_cloud_free(cloud);
        pd_model_free(model);
    }
}

#[test]
fn condition_only_checkpoint_cannot_sample() {
    let dir = temp_dir("cond-only");
    let ckpt = dir.join("cond.pdck");
    let cfg = micro_config();
    let cond = ConditionParams::init(&cfg, 5).unwrap();
    save_model(&ckpt, &cfg, &cond, None).unwrap();

    let cp = c_path(&ckpt);
    let mut model: *mut PdModel = ptr::null_mut();
    assert_eq!(unsafe { pd_model_load(cp.as_ptr(), &mut model) }, PD_OK);

    let preset = CString::new("separable").unwrap();
    let mut cloud: *mut PdCloud = ptr::null_mut();
    assert_eq!(
        unsafe { pd_cloud_generate(preset.as_ptr(), 3, 12, 1, &mut cloud) },
        PD_OK
    );
    let mut buf = vec![0u16; 12];
    assert_eq!(
        unsafe { pd_sample(model, cloud, 4, 0, buf.as_mut_ptr(), buf.len()) },
        PD_INVALID_ARGUMENT
    );
    unsafe {
        pd_cloud_free(cloud);
        pd_model_free(model);
    }
}
