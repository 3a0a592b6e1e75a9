use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use glpdepth_ffi::*;

const TOY: &str = "stage_channels = 16,32,48,64\nstage_heads = 1,2,4,8\ndecoder_width = 16\n";

fn new_model(seed: u64) -> *mut GlpModel {
    let cfg = CString::new(TOY).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { glp_model_new(cfg.as_ptr(), seed, &mut m) }, GlpStatus::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let p = glp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn predict(m: *const GlpModel, h: usize, w: usize) -> Vec<f32> {
    let rgb: Vec<f32> = (0..h * w * 3).map(|i| (i % 17) as f32 / 17.0).collect();
    let mut depth = vec![0.0f32; h * w];
    let st = unsafe { glp_model_predict(m, rgb.as_ptr(), h, w, depth.as_mut_ptr()) };
    assert_eq!(st, GlpStatus::Ok);
    depth
}

#[test]
fn predict_save_load_roundtrip() {
    let m = new_model(4);
    let (mut enc, mut dec) = (0u64, 0u64);
    assert_eq!(unsafe { glp_model_param_counts(m, &mut enc, &mut dec) }, GlpStatus::Ok);
    assert!(enc > 0 && dec > 0);

    let depth = predict(m, 32, 64);
    assert!(depth.iter().all(|&d| d > 0.0 && d < 10.0));
    // off-grid sizes are resized internally
    assert_eq!(predict(m, 30, 50).len(), 1500);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { glp_model_save(m, path.as_ptr()) }, GlpStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { glp_model_load(path.as_ptr(), &mut back) }, GlpStatus::Ok);
    assert_eq!(predict(back, 32, 64), depth);
    unsafe {
        glp_model_free(m);
        glp_model_free(back);
        glp_model_free(ptr::null_mut());
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut m = ptr::null_mut();
    let bad = CString::new("bogus_key = 1\n").unwrap();
    assert_eq!(unsafe { glp_model_new(bad.as_ptr(), 0, &mut m) }, GlpStatus::Config);
    assert!(last_error().contains("bogus_key"));
    assert!(m.is_null());

    assert_eq!(unsafe { glp_model_new(ptr::null(), 0, &mut m) }, GlpStatus::NullPointer);

    let missing = CString::new("/nonexistent/dir/x.ckpt").unwrap();
    assert_eq!(unsafe { glp_model_load(missing.as_ptr(), &mut m) }, GlpStatus::Io);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk.ckpt");
    std::fs::write(&p, b"GLPN not really a checkpoint").unwrap();
    let junk = CString::new(p.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { glp_model_load(junk.as_ptr(), &mut m) }, GlpStatus::Checksum);

    let model = new_model(0);
    let mut out = [0.0f32; 4];
    let rgb = [0.5f32; 12];
    let st = unsafe { glp_model_predict(model, rgb.as_ptr(), 0, 4, out.as_mut_ptr()) };
    assert_eq!(st, GlpStatus::InvalidArgument);
    let st = unsafe { glp_model_predict(model, ptr::null(), 2, 2, out.as_mut_ptr()) };
    assert_eq!(st, GlpStatus::NullPointer);
    unsafe { glp_model_free(model) };
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/glpdepth.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "glp_model_new",
        "glp_model_load",
        "glp_model_predict",
        "glp_model_free",
        "glp_last_error",
        "GLP_STATUS_OK",
    ] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-xc"])
        .arg(&header)
        .output()
    else {
        eprintln!("no C compiler, syntax check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
