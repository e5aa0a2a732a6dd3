use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use spade_ffi::*;

const CONFIG: &str = "[run]\nseed = 9\n[model]\nvocab = 10\nd = 8\ndepth = 2\nheads = 2\nwindow = 3\nd_state = 4\n";

fn last_error() -> String {
    unsafe { CStr::from_ptr(spade_last_error()) }.to_string_lossy().into_owned()
}

fn new_model(cfg: &str) -> (SpadeStatus, *mut SpadeModel) {
    let c = CString::new(cfg).unwrap();
    let mut m = ptr::null_mut();
    let s = unsafe { spade_model_from_config(c.as_ptr(), &mut m) };
    (s, m)
}

fn logits(m: *const SpadeModel, tokens: &[u32]) -> Vec<f32> {
    let mut out = vec![0f32; tokens.len() * 10];
    let s = unsafe { spade_model_logits(m, tokens.as_ptr(), tokens.len(), out.as_mut_ptr(), out.len()) };
    assert_eq!(s, SpadeStatus::Ok, "{}", last_error());
    out
}

#[test]
fn model_lifecycle_and_forward() {
    let (s, m) = new_model(CONFIG);
    assert_eq!(s, SpadeStatus::Ok);
    let (mut vocab, mut d, mut depth) = (0, 0, 0);
    assert_eq!(unsafe { spade_model_shape(m, &mut vocab, &mut d, &mut depth) }, SpadeStatus::Ok);
    assert_eq!((vocab, d, depth), (10, 8, 2));
    let (mut total, mut trainable) = (0, 0);
    unsafe { spade_model_param_count(m, &mut total, &mut trainable) };
    assert!(total > trainable && trainable > 0);

    let tokens = [1u32, 5, 2, 9, 0, 3];
    let a = logits(m, &tokens);
    assert!(a.iter().all(|x| x.is_finite()));

    // matches the Rust API directly
    let mut cfg = spade::cli::RunConfig::from_ini(CONFIG).unwrap();
    cfg.finalize().unwrap();
    let mut mc = cfg.model.clone();
    mc.seed = 9;
    let direct = spade::model::SpadeModel::<f32>::new(mc).unwrap();
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    assert_eq!(direct.forward(&ids, spade::model::Mode::Lm).unwrap().data(), &a[..]);

    let mut loss = 0.0;
    assert_eq!(unsafe { spade_model_sequence_loss(m, tokens.as_ptr(), tokens.len(), &mut loss) }, SpadeStatus::Ok);
    assert!(loss > 0.0 && loss.is_finite());
    unsafe { spade_model_free(m) };
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.spade").to_str().unwrap()).unwrap();
    let (_, m) = new_model(CONFIG);
    assert_eq!(unsafe { spade_model_save(m, path.as_ptr()) }, SpadeStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { spade_model_load(path.as_ptr(), &mut back) }, SpadeStatus::Ok);
    let tokens = [3u32, 3, 7];
    assert_eq!(logits(m, &tokens), logits(back, &tokens));
    unsafe {
        spade_model_free(m);
        spade_model_free(back);
    }
}

#[test]
fn errors_are_codes_with_messages() {
    let (s, m) = new_model("[model]\nheads = 3\n");
    assert_eq!(s, SpadeStatus::Config);
    assert!(m.is_null());
    assert!(last_error().contains("model.heads"), "{}", last_error());

    let (s, _) = new_model("[model]\nnope = 1\n");
    assert_eq!(s, SpadeStatus::Config);

    let missing = CString::new("/no/such/file.spade").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { spade_model_load(missing.as_ptr(), &mut out) }, SpadeStatus::Resource);

    let (_, m) = new_model(CONFIG);
    let tokens = [1u32, 2];
    let mut small = [0f32; 5];
    let s = unsafe { spade_model_logits(m, tokens.as_ptr(), 2, small.as_mut_ptr(), small.len()) };
    assert_eq!(s, SpadeStatus::BufferTooSmall);
    assert_eq!(small, [0.0; 5]);

    let oov = [1u32, 99];
    let mut buf = [0f32; 20];
    let s = unsafe { spade_model_logits(m, oov.as_ptr(), 2, buf.as_mut_ptr(), buf.len()) };
    assert_eq!(s, SpadeStatus::InvalidArgument);
    assert!(last_error().contains("99"));

    // success clears the message
    logits(m, &tokens);
    assert_eq!(last_error(), "");

    let s = unsafe { spade_model_logits(ptr::null(), tokens.as_ptr(), 2, buf.as_mut_ptr(), buf.len()) };
    assert_eq!(s, SpadeStatus::NullPointer);
    assert_eq!(unsafe { spade_model_from_config(ptr::null(), &mut out) }, SpadeStatus::NullPointer);
    unsafe {
        spade_model_free(m);
        spade_model_free(ptr::null_mut());
    }
}

#[test]
fn cli_entry_point() {
    let args: Vec<CString> = ["spade", "--version"].iter().map(|s| CString::new(*s).unwrap()).collect();
    let ptrs: Vec<*const c_char> = args.iter().map(|a| a.as_ptr()).collect();
    assert_eq!(unsafe { spade_run_cli(ptrs.len(), ptrs.as_ptr()) }, 0);
    let bad: Vec<CString> = ["spade", "train", "--set", "x.y=1"].iter().map(|s| CString::new(*s).unwrap()).collect();
    let ptrs: Vec<*const c_char> = bad.iter().map(|a| a.as_ptr()).collect();
    assert_eq!(unsafe { spade_run_cli(ptrs.len(), ptrs.as_ptr()) }, 2);
    let v = unsafe { CStr::from_ptr(spade_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/spade.h")
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(header()).unwrap();
    for f in [
        "spade_last_error", "spade_version", "spade_model_from_config", "spade_model_load", "spade_model_save",
        "spade_model_free", "spade_model_shape", "spade_model_param_count", "spade_model_logits",
        "spade_model_sequence_loss", "spade_run_cli",
    ] {
        assert!(h.contains(&format!("{f}(")), "{f}");
    }
    assert!(h.contains("typedef struct SpadeModel SpadeModel;"));
    assert!(h.contains("SPADE_STATUS_BUFFER_TOO_SMALL = 7"));
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "spade.h"

int main(void) {
    SpadeModel *m = NULL;
    const char *cfg = "[model]\nvocab = 10\nd = 8\ndepth = 1\nheads = 2\nwindow = 2\nd_state = 4\n";
    if (spade_model_from_config(cfg, &m) != SPADE_STATUS_OK) { fprintf(stderr, "%s\n", spade_last_error()); return 1; }
    uint32_t toks[4] = {1, 2, 3, 4};
    float out[40];
    if (spade_model_logits(m, toks, 4, out, 40) != SPADE_STATUS_OK) return 2;
    if (spade_model_logits(m, toks, 4, out, 39) != SPADE_STATUS_BUFFER_TOO_SMALL) return 3;
    spade_model_free(m);
    printf("ok %s\n", spade_version());
    return 0;
}
"#;

/// Compiles and runs a C client when a C compiler and the static library
/// are available; otherwise only checks the header parses.
#[test]
fn c_client_compiles_and_runs() {
    let Ok(cc) = which("cc") else {
        eprintln!("no C compiler; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let include = header().parent().unwrap().to_path_buf();
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success(), "header does not compile as C99");

    // target/<profile>/deps/abi-xxxx -> target/<profile>/libspade_ffi.a
    let exe = std::env::current_exe().unwrap();
    let lib = exe.parent().and_then(Path::parent).map(|p| p.join("libspade_ffi.a"));
    let Some(lib) = lib.filter(|l| l.exists()) else {
        eprintln!("static library not built for this profile; skipping link");
        return;
    };
    let bin = dir.path().join("client");
    let status = Command::new(&cc)
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "link failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "client exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}

fn which(name: &str) -> Result<PathBuf, ()> {
    std::env::var_os("PATH")
        .and_then(|p| std::env::split_paths(&p).map(|d| d.join(name)).find(|c| c.exists()))
        .ok_or(())
}
