use std::ffi::{CStr, CString};
use std::ptr;

use carreg::io::checkpoint::{save, Checkpoint};
use carreg::simnet::{ArchSpec, CarModel};
use carreg_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(car_last_error()) }.to_string_lossy().into_owned()
}

fn ramp(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i % 17) as f64 / 16.0).collect()
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(car_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn fresh_model_registers_to_identity() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { car_model_init(5, &mut h) }, CarStatus::Ok);
    assert_eq!(unsafe { car_model_levels(h) }, 4);
    let img = ramp(32 * 32);
    let mut field = vec![1.0; 2 * 32 * 32];
    let mut warped = vec![0.0; 32 * 32];
    let s = unsafe { car_register(h, img.as_ptr(), img.as_ptr(), 32, 32, field.as_mut_ptr(), warped.as_mut_ptr()) };
    assert_eq!(s, CarStatus::Ok);
    assert!(field.iter().all(|&v| v == 0.0));
    assert_eq!(warped, img);
    unsafe { car_model_free(h) };
}

#[test]
fn errors_set_status_and_message() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { car_model_init(5, &mut h) }, CarStatus::Ok);
    let img = ramp(30 * 30);
    let mut field = vec![0.0; 2 * 30 * 30];
    let s = unsafe { car_register(h, img.as_ptr(), img.as_ptr(), 30, 30, field.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(s, CarStatus::Shape);
    assert!(last_error().contains("30x30"), "{}", last_error());
    let s = unsafe { car_register(h, ptr::null(), img.as_ptr(), 30, 30, field.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(s, CarStatus::NullPointer);
    unsafe { car_model_free(h) };
    unsafe { car_model_free(ptr::null_mut()) };
    assert_eq!(unsafe { car_model_levels(ptr::null()) }, 0);
    let mut bad = vec![0.5; 4];
    bad[1] = 2.0;
    let mut out = vec![0.0; 4];
    assert_eq!(unsafe { car_augment(bad.as_ptr(), 2, 2, 0, 1, 4, out.as_mut_ptr()) }, CarStatus::InvalidArgument);
}

#[test]
fn load_checkpoint_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let arch = ArchSpec { levels: 2, enc_channels: 3, dec_channels: 4, proj_channels: 2, ..ArchSpec::default() };
    let path = dir.path().join("m.carc");
    save(&path, &Checkpoint { model: CarModel::init(arch, 1).unwrap(), config_digest: [0; 32], rng_seed: 1, epoch: 0 }).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { car_model_load(c.as_ptr(), &mut h) }, CarStatus::Ok);
    assert_eq!(unsafe { car_model_levels(h) }, 2);
    unsafe { car_model_free(h) };
    let missing = CString::new(dir.path().join("none.carc").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { car_model_load(missing.as_ptr(), &mut h) }, CarStatus::Io);
    assert!(last_error().contains("none.carc"));
}

#[test]
fn metrics_and_augment() {
    let (h, w) = (8, 8);
    let mask: Vec<u32> = (0..h * w).map(|i| ((i / w) >= 4) as u32).collect();
    let field = vec![0.0; 2 * h * w];
    let mut m = CarMetrics::default();
    assert_eq!(unsafe { car_metrics(mask.as_ptr(), mask.as_ptr(), field.as_ptr(), h, w, &mut m) }, CarStatus::Ok);
    assert_eq!((m.dice, m.hd95, m.folding_pct, m.grad_jac), (1.0, 0.0, 0.0, 0.0));
    let img = ramp(h * w);
    let mut a = vec![0.0; h * w];
    let mut b = vec![0.0; h * w];
    assert_eq!(unsafe { car_augment(img.as_ptr(), h, w, 3, 1, 4, a.as_mut_ptr()) }, CarStatus::Ok);
    assert_eq!(unsafe { car_augment(img.as_ptr(), h, w, 3, 1, 4, b.as_mut_ptr()) }, CarStatus::Ok);
    assert_eq!(a, b);
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/carreg.h")).unwrap();
    for sym in ["car_model_load", "car_model_free", "car_register", "car_metrics", "car_augment", "car_last_error", "CAR_STATUS_NON_FINITE", "CarModelHandle"] {
        assert!(header.contains(sym), "missing {}", sym);
    }
    if let Ok(st) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", "-std=c99"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include/carreg.h"))
        .status()
    {
        assert!(st.success(), "header does not compile as C99");
    }
}
