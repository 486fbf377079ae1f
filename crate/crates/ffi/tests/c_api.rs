use std::ffi::{CStr, CString};
use std::ptr;

use vif_ffi::*;

fn small_options(seed: u64) -> VifModelOptions {
    VifModelOptions {
        seed,
        grid_side: 3,
        n_symbols: 4,
        d_vision: 8,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        ffn_mult: 2,
        max_seq_len: 32,
        ..vif_model_options_default()
    }
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(vif_last_error_message()) }.to_string_lossy().into_owned()
}

fn new_model(opts: &VifModelOptions) -> *mut VifModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { vif_model_new(opts, &mut m) }, VifStatus::Ok, "{}", last_error());
    assert!(!m.is_null());
    m
}

fn run(m: *const VifModel, cells: &[u32], mode: u32) -> (VifStatus, Vec<u32>) {
    let mut buf = vec![0u32; 16];
    let mut len = 0usize;
    let st = unsafe { vif_generate(m, cells.as_ptr(), cells.len(), 3, mode, 10, buf.as_mut_ptr(), buf.len(), &mut len) };
    buf.truncate(len.min(16));
    (st, buf)
}

#[test]
fn model_lifecycle_and_generation() {
    let m = new_model(&small_options(1));
    unsafe {
        assert_eq!(vif_model_vocab_size(m), 8);
        assert!(vif_model_num_params(m) > 0);
    }
    let cells = [0u32, 1, 2, 3, 0, 1, 2, 3, 0];
    let (st, a) = run(m, &cells, VIF_MODE_VIF);
    assert_eq!(st, VifStatus::Ok, "{}", last_error());
    assert!(!a.is_empty() && a.len() <= 10);
    assert!(a.iter().all(|&t| (t as usize) < 8));
    let (_, b) = run(m, &cells, VIF_MODE_VIF);
    assert_eq!(a, b);
    // passthrough decodes like the plain decoder
    let (_, base) = run(m, &cells, VIF_MODE_BASELINE);
    let (_, pass) = run(m, &cells, VIF_MODE_PASSTHROUGH);
    assert_eq!(base, pass);
    unsafe { vif_model_free(m) };
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let m = new_model(&small_options(2));
    let cells = [3u32, 3, 1, 0, 2, 2, 1, 0, 3];
    unsafe {
        assert_eq!(vif_model_save(m, path.as_ptr()), VifStatus::Ok, "{}", last_error());
        let mut back = ptr::null_mut();
        assert_eq!(vif_model_load(path.as_ptr(), &mut back), VifStatus::Ok);
        assert_eq!(vif_model_num_params(back), vif_model_num_params(m));
        assert_eq!(run(m, &cells, VIF_MODE_VIF).1, run(back, &cells, VIF_MODE_VIF).1);
        vif_model_free(back);
        vif_model_free(m);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let m = new_model(&small_options(3));
    unsafe {
        assert_eq!(vif_model_new(ptr::null(), ptr::null_mut()), VifStatus::NullPointer);
        assert!(last_error().contains("null"));
        assert_eq!(run(ptr::null(), &[0; 9], VIF_MODE_VIF).0, VifStatus::NullPointer);
        assert_eq!(run(m, &[0; 9], 7).0, VifStatus::InvalidArgument);
        assert_eq!(run(m, &[0; 8], VIF_MODE_VIF).0, VifStatus::Shape);
        assert_eq!(run(m, &[9; 9], VIF_MODE_VIF).0, VifStatus::InvalidArgument);

        let mut one = [0u32; 1];
        let mut len = 0usize;
        let st = vif_generate(m, [0u32; 9].as_ptr(), 9, 3, VIF_MODE_VIF, 10, one.as_mut_ptr(), 0, &mut len);
        assert_eq!(st, VifStatus::BufferTooSmall);
        assert!(len > 0);

        let missing = CString::new("/nonexistent/dir/m.ckpt").unwrap();
        let mut out = ptr::null_mut();
        assert_ne!(vif_model_load(missing.as_ptr(), &mut out), VifStatus::Ok);
        assert!(out.is_null());

        let mut bad = small_options(0);
        bad.n_heads = 5;
        assert_eq!(vif_model_new(&bad, &mut out), VifStatus::Config);
        bad = small_options(0);
        bad.vif_heads = 3;
        assert_eq!(vif_model_new(&bad, &mut out), VifStatus::Config);

        // success clears the message
        assert_eq!(run(m, &[0; 9], VIF_MODE_VIF).0, VifStatus::Ok);
        assert_eq!(last_error(), "");
        vif_model_free(m);
        vif_model_free(ptr::null_mut());
    }
}

#[test]
fn baseline_only_model_rejects_vif_mode() {
    let mut o = small_options(4);
    o.with_vif = false;
    let m = new_model(&o);
    assert_eq!(run(m, &[0; 9], VIF_MODE_BASELINE).0, VifStatus::Ok);
    assert_ne!(run(m, &[0; 9], VIF_MODE_VIF).0, VifStatus::Ok);
    unsafe { vif_model_free(m) };
}

#[test]
fn mi_check_copy_channel() {
    // o = z uniform over 2 values, a and t trivial: I(o;z|t) = 1 bit
    let p = [0.5, 0.0, 0.0, 0.5];
    let dims = [2usize, 2, 1, 1];
    let mut r = VifMiReport::default();
    assert_eq!(unsafe { vif_mi_check(p.as_ptr(), dims.as_ptr(), &mut r) }, VifStatus::Ok);
    assert!((r.i_oz_t - 1.0).abs() < 1e-12);
    assert!(r.i_oa_zt.abs() < 1e-12);
    assert!(r.passed);

    let unnormalized = [0.5, 0.5, 0.5, 0.5];
    assert_ne!(unsafe { vif_mi_check(unnormalized.as_ptr(), dims.as_ptr(), &mut r) }, VifStatus::Ok);
    let big = [7usize, 1, 1, 1];
    assert_eq!(unsafe { vif_mi_check(p.as_ptr(), big.as_ptr(), &mut r) }, VifStatus::InvalidArgument);
}

#[test]
fn savgol_keeps_quadratics_and_rejects_bad_windows() {
    let xs: Vec<f64> = (0..20).map(|i| 0.5 * (i * i) as f64 - 3.0 * i as f64 + 1.0).collect();
    let mut out = vec![0.0; xs.len()];
    assert_eq!(unsafe { vif_savgol(xs.as_ptr(), xs.len(), 7, 2, out.as_mut_ptr()) }, VifStatus::Ok);
    for (a, b) in xs.iter().zip(&out) {
        assert!((a - b).abs() < 1e-9);
    }
    assert_eq!(unsafe { vif_savgol(xs.as_ptr(), xs.len(), 6, 2, out.as_mut_ptr()) }, VifStatus::InvalidArgument);
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(vif_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_entry_point() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/vif.h")).unwrap();
    for name in [
        "vif_model_new",
        "vif_model_load",
        "vif_model_save",
        "vif_model_free",
        "vif_generate",
        "vif_mi_check",
        "vif_savgol",
        "vif_last_error_message",
        "typedef struct VifModel VifModel",
        "VIF_STATUS_OK = 0",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}
