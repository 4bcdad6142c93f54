use std::ffi::{CStr, CString};
use std::ptr;

use stnet_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(stnet_last_error()) }.to_string_lossy().into_owned()
}

fn new_stnet(classes: usize, seed: u64) -> *mut StnetModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { stnet_model_new_stnet(ptr::null(), classes, seed, &mut m) }, StnetStatus::Ok, "{}", last_error());
    m
}

fn clips(len: usize) -> Vec<f32> {
    (0..len).map(|i| ((i * 37 % 101) as f32) / 101.0).collect()
}

#[test]
fn stnet_forward_and_param_roundtrip() {
    let m = new_stnet(4, 1);
    let mut k = 0;
    let mut count = 0;
    unsafe {
        assert_eq!(stnet_model_num_classes(m, &mut k), StnetStatus::Ok);
        assert_eq!(stnet_model_param_count(m, &mut count), StnetStatus::Ok);
    }
    assert_eq!(k, 4);
    assert!(count > 0);

    let (b, t, c, h, w) = (2, 3, 15, 16, 16);
    let x = clips(b * t * c * h * w);
    let mut y = vec![0f32; b * k];
    let st = unsafe { stnet_model_forward_clips(m, x.as_ptr(), b, t, c, h, w, y.as_mut_ptr(), y.len()) };
    assert_eq!(st, StnetStatus::Ok, "{}", last_error());
    assert!(y.iter().all(|v| v.is_finite()));

    // Same architecture, different init: loading the saved params reproduces the logits.
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let other = new_stnet(4, 99);
    let mut y2 = vec![0f32; b * k];
    unsafe {
        assert_eq!(stnet_model_save_params(m, path.as_ptr()), StnetStatus::Ok, "{}", last_error());
        assert_eq!(stnet_model_load_params(other, path.as_ptr()), StnetStatus::Ok, "{}", last_error());
        assert_eq!(stnet_model_forward_clips(other, x.as_ptr(), b, t, c, h, w, y2.as_mut_ptr(), y2.len()), StnetStatus::Ok);
        stnet_model_free(m);
        stnet_model_free(other);
    }
    assert_eq!(y.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn errors_are_reported_by_code_and_message() {
    let m = new_stnet(3, 0);
    let x = clips(2 * 12 * 16 * 16);
    let mut y = vec![0f32; 3];
    // 12 channels is not 3N for N = 5.
    let st = unsafe { stnet_model_forward_clips(m, x.as_ptr(), 1, 2, 12, 16, 16, y.as_mut_ptr(), y.len()) };
    assert_eq!(st, StnetStatus::ShapeMismatch);
    assert!(last_error().contains("3N"), "{}", last_error());

    let x = clips(2 * 15 * 16 * 16);
    let mut short = vec![0f32; 2];
    let st = unsafe { stnet_model_forward_clips(m, x.as_ptr(), 1, 2, 15, 16, 16, short.as_mut_ptr(), short.len()) };
    assert_eq!(st, StnetStatus::ShapeMismatch);

    let st = unsafe { stnet_model_forward_clips(m, ptr::null(), 1, 2, 15, 16, 16, y.as_mut_ptr(), y.len()) };
    assert_eq!(st, StnetStatus::NullPointer);

    let bad = CString::new(r#"{"n_frames": 0}"#).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { stnet_model_new_stnet(bad.as_ptr(), 3, 0, &mut h) }, StnetStatus::InvalidArgument);
    assert!(h.is_null());
    let unknown = CString::new(r#"{"no_such_field": 1}"#).unwrap();
    assert_eq!(unsafe { stnet_model_new_stnet(unknown.as_ptr(), 3, 0, &mut h) }, StnetStatus::InvalidArgument);

    let missing = CString::new("/nonexistent/params").unwrap();
    assert_eq!(unsafe { stnet_model_load_params(m, missing.as_ptr()) }, StnetStatus::Io);
    unsafe { stnet_model_free(m) };
}

#[test]
fn itxn_forward_on_a_bundle() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { stnet_model_new_itxn(ptr::null(), 2, 3, &mut m) }, StnetStatus::Ok, "{}", last_error());
    let names: Vec<CString> = ["rgb", "flow_a", "flow_b", "audio"].iter().map(|s| CString::new(*s).unwrap()).collect();
    let dims = [32usize, 32, 32, 16];
    let lengths = [9usize, 12, 7, 15];
    let bufs: Vec<Vec<f32>> = (0..4).map(|i| clips(dims[i] * lengths[i])).collect();
    let name_ptrs: Vec<_> = names.iter().map(|n| n.as_ptr()).collect();
    let data_ptrs: Vec<_> = bufs.iter().map(|b| b.as_ptr()).collect();
    let mut y = [0f32; 2];
    let st = unsafe { stnet_model_forward_bundle(m, name_ptrs.as_ptr(), data_ptrs.as_ptr(), lengths.as_ptr(), dims.as_ptr(), 4, y.as_mut_ptr(), 2) };
    assert_eq!(st, StnetStatus::Ok, "{}", last_error());

    // Dropping a modality the graph needs is an argument error naming it.
    let st = unsafe { stnet_model_forward_bundle(m, name_ptrs.as_ptr(), data_ptrs.as_ptr(), lengths.as_ptr(), dims.as_ptr(), 3, y.as_mut_ptr(), 2) };
    assert_eq!(st, StnetStatus::InvalidArgument);
    assert!(last_error().contains("audio"), "{}", last_error());

    let x = clips(15 * 8 * 8);
    let st = unsafe { stnet_model_forward_clips(m, x.as_ptr(), 1, 1, 15, 8, 8, y.as_mut_ptr(), 2) };
    assert_eq!(st, StnetStatus::InvalidArgument);

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { stnet_model_describe_json(m, &mut json) }, StnetStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    unsafe {
        stnet_string_free(json);
        stnet_model_free(m);
    }
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v["total_params"].as_u64().unwrap() > 0);
}

#[test]
fn sample_segments_through_the_abi() {
    let mut a = [0usize; 7];
    let mut b = [0usize; 7];
    unsafe {
        assert_eq!(stnet_sample_segments(35, 7, 5, StnetSampleMode::Eval, 1, a.as_mut_ptr(), 7), StnetStatus::Ok);
        assert_eq!(stnet_sample_segments(35, 7, 5, StnetSampleMode::Eval, 2, b.as_mut_ptr(), 7), StnetStatus::Ok);
    }
    assert_eq!(a, [0, 5, 10, 15, 20, 25, 30]);
    assert_eq!(a, b);
    let mut wrong = [0usize; 3];
    assert_eq!(unsafe { stnet_sample_segments(35, 7, 5, StnetSampleMode::Train, 1, wrong.as_mut_ptr(), 3) }, StnetStatus::ShapeMismatch);
    assert_eq!(unsafe { stnet_sample_segments(0, 7, 5, StnetSampleMode::Train, 1, wrong.as_mut_ptr(), 3) }, StnetStatus::InvalidArgument);
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(stnet_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/stnet.h");
    let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .output()
    else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
