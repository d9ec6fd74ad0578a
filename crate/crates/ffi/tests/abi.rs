use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use homog_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    unsafe { homog_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn map(kind: &str, gamma: f64) -> *mut HomogMap {
    let kind = CString::new(kind).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { homog_map_new(kind.as_ptr(), gamma, 0.0, &mut m) }, HomogStatus::Ok);
    m
}

fn obs(name: &str, m: *const HomogMap) -> *mut HomogObservable {
    let name = CString::new(name).unwrap();
    let mut o = ptr::null_mut();
    assert_eq!(unsafe { homog_observable_new(name.as_ptr(), m, &mut o) }, HomogStatus::Ok);
    o
}

#[test]
fn map_step_and_errors() {
    let m = map("doubling", 0.0);
    let mut y = 0.0;
    assert_eq!(unsafe { homog_map_step(m, 0.75, &mut y) }, HomogStatus::Ok);
    assert_eq!(y, 0.5);
    assert_eq!(unsafe { homog_map_step(m, 1.5, &mut y) }, HomogStatus::Config);
    assert!(last_error().contains("outside"));
    assert_eq!(unsafe { homog_map_step(ptr::null(), 0.5, &mut y) }, HomogStatus::NullPointer);
    unsafe { homog_map_free(m) };

    let kind = CString::new("lsv").unwrap();
    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { homog_map_new(kind.as_ptr(), 0.7, 0.0, &mut bad) }, HomogStatus::Config);
    assert!(bad.is_null());
    assert!(last_error().contains("gamma"));
}

#[test]
fn iterated_sums_pair_identity() {
    let m = map("lsv", 0.25);
    let o = obs("mixed3", m);
    assert_eq!(unsafe { homog_observable_dim(o) }, 3);
    let mut s = [0.0; 3];
    let mut ss = [0.0; 9];
    let mut r = 1.0;
    let st = unsafe { homog_iterated_sums(m, o, 0.3, 1000, s.as_mut_ptr(), 3, ss.as_mut_ptr(), 9, &mut r) };
    assert_eq!(st, HomogStatus::Ok);
    assert!(r < 1e-10);
    let st = unsafe { homog_iterated_sums(m, o, 0.3, 10, s.as_mut_ptr(), 3, ss.as_mut_ptr(), 4, ptr::null_mut()) };
    assert_eq!(st, HomogStatus::BufferTooSmall);
    unsafe {
        homog_observable_free(o);
        homog_map_free(m);
    }
}

#[test]
fn doubling_coefficients() {
    let m = map("doubling", 0.0);
    let o = obs("cos", m);
    let (mut sigma, mut e, mut se) = ([0.0], [0.0], [0.0]);
    let st = unsafe {
        homog_tower_coefficients(m, o, 256, sigma.as_mut_ptr(), e.as_mut_ptr(), se.as_mut_ptr(), ptr::null_mut(), 1)
    };
    assert_eq!(st, HomogStatus::Ok);
    assert!((sigma[0] - 0.5).abs() < 1e-5);
    assert!(e[0].abs() < 1e-8);
    let st = unsafe {
        homog_direct_coefficients(m, o, 1000, 2000, 3, sigma.as_mut_ptr(), e.as_mut_ptr(), se.as_mut_ptr(), ptr::null_mut(), 1)
    };
    assert_eq!(st, HomogStatus::Ok);
    assert!((sigma[0] - 0.5).abs() < 4.0 * se[0]);
    unsafe {
        homog_observable_free(o);
        homog_map_free(m);
    }
}

#[test]
fn run_json_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        r#"{{"subcommand":"orbit","map":"doubling","obs":"cos","n":"100","out":{:?}}}"#,
        dir.path().to_str().unwrap()
    );
    let c = CString::new(cfg).unwrap();
    assert_eq!(unsafe { homog_run_json(c.as_ptr()) }, HomogStatus::Ok);
    assert!(dir.path().join("manifest.json").exists());
    let bad = CString::new(r#"{"subcommand":"orbit","samples":0}"#).unwrap();
    assert_eq!(unsafe { homog_run_json(bad.as_ptr()) }, HomogStatus::Config);
    assert!(last_error().contains("samples"));
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(homog_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_is_valid_c() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(root.join("include/homog.h")).unwrap();
    for sym in ["homog_map_new", "homog_tower_coefficients", "homog_run_json", "HOMOG_STATUS_GATE_FAILED"] {
        assert!(header.contains(sym), "{sym} missing from header");
    }
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(root.join("include"))
        .arg(root.join("examples/smoke.c"))
        .status()
    else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(status.success());
}
