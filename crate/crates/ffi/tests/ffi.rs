use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use meshcap::data::generate_synthetic;
use meshcap::model::Variant;
use meshcap::train::{Profile, RunConfig, Trainer};
use meshcap_ffi::*;

fn write_checkpoint(dir: &Path) -> (PathBuf, Trainer) {
    let records = generate_synthetic(20, 2).unwrap();
    let trainer = Trainer::new(RunConfig::preset(Profile::Toy, Variant::M5), records).unwrap();
    let path = dir.join("m.ckpt");
    trainer.checkpoint().unwrap().save(&path).unwrap();
    (path, trainer)
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(meshcap_last_error()) }.to_str().unwrap().to_string()
}

#[test]
fn caption_matches_the_rust_model() {
    let dir = tempfile::tempdir().unwrap();
    let (path, trainer) = write_checkpoint(dir.path());
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { meshcap_model_load(cstr(&path).as_ptr(), &mut model) }, MeshcapStatus::Ok);
    let (mut h, mut w, mut c) = (0, 0, 0);
    assert_eq!(unsafe { meshcap_model_image_shape(model, &mut h, &mut w, &mut c) }, MeshcapStatus::Ok);
    assert_eq!((h, w, c), (32, 32, 3));

    let image = trainer.train[0].pixels().unwrap();
    let mut out: *mut c_char = ptr::null_mut();
    let status = unsafe { meshcap_caption(model, image.data().as_ptr(), image.numel(), 0, &mut out) };
    assert_eq!(status, MeshcapStatus::Ok, "{}", last_error());
    let got = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_string();
    unsafe { meshcap_string_free(out) };
    let want = trainer.model.greedy_decode(&image, 16).unwrap();
    assert_eq!(got, trainer.vocab.decode(&want.ids).unwrap());

    let status = unsafe { meshcap_caption(model, image.data().as_ptr(), 5, 0, &mut out) };
    assert_eq!(status, MeshcapStatus::InvalidInput);
    assert!(out.is_null());
    assert!(last_error().contains("pixel values"), "{}", last_error());
    unsafe { meshcap_model_free(model) };
}

#[test]
fn load_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = ptr::null_mut();
    let missing = cstr(&dir.path().join("missing.ckpt"));
    assert_eq!(unsafe { meshcap_model_load(missing.as_ptr(), &mut model) }, MeshcapStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("missing.ckpt"));

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"MESHCAP\0\x01").unwrap();
    assert_eq!(
        unsafe { meshcap_model_load(cstr(&junk).as_ptr(), &mut model) },
        MeshcapStatus::CorruptCheckpoint
    );
    assert_eq!(unsafe { meshcap_model_load(ptr::null(), &mut model) }, MeshcapStatus::NullPointer);
    unsafe { meshcap_model_free(ptr::null_mut()) };
}

#[test]
fn bleu_and_version() {
    let cand = CString::new("the cat").unwrap();
    let r = CString::new("the cat sat").unwrap();
    let refs = [r.as_ptr()];
    let mut out = 0.0;
    assert_eq!(unsafe { meshcap_bleu(cand.as_ptr(), refs.as_ptr(), 1, 1, &mut out) }, MeshcapStatus::Ok);
    assert!((out - (-0.5f64).exp()).abs() < 1e-12);
    assert_eq!(unsafe { meshcap_bleu(cand.as_ptr(), refs.as_ptr(), 0, 1, &mut out) }, MeshcapStatus::Metric);
    let bad = [0xffu8, 0];
    let status = unsafe { meshcap_bleu(bad.as_ptr().cast(), refs.as_ptr(), 1, 1, &mut out) };
    assert_eq!(status, MeshcapStatus::InvalidUtf8);
    let v = unsafe { CStr::from_ptr(meshcap_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/meshcap.h")).unwrap();
    for f in [
        "meshcap_model_load",
        "meshcap_model_free",
        "meshcap_model_image_shape",
        "meshcap_caption",
        "meshcap_bleu",
        "meshcap_string_free",
        "meshcap_last_error",
        "meshcap_version",
        "typedef struct MeshcapModel MeshcapModel",
        "MESHCAP_STATUS_CORRUPT_CHECKPOINT = 4",
    ] {
        assert!(header.contains(f), "header lacks {f}");
    }
}

#[test]
fn c_program_links_against_the_static_library() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let target = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = target.join("libmeshcap_ffi.a");
    assert!(lib.is_file(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = write_checkpoint(dir.path());
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = dir.path().join("smoke");
    let status = Command::new(cc)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).arg(&ckpt).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("caption: "));
    assert!(stdout.contains("bleu1: 0.6065"));
    assert!(stdout.contains("error: expected 3072 pixel values"), "{stdout}");
}

fn which_cc() -> Result<String, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok_and(|o| o.status.success()) {
            return Ok(cc.to_string());
        }
    }
    Err(())
}
