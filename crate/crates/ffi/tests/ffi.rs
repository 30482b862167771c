use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use butterfly_moe::analysis;
use butterfly_moe::autodiff::Tensor;
use butterfly_moe::checkpoint;
use butterfly_moe::model::{Model, ModelConfig, Variant};
use butterfly_moe::moe::{MoEConfig, MoELayer};
use butterfly_moe_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    // SAFETY: buf holds 512 bytes.
    let n = unsafe { bmoe_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0, "no error recorded");
    // SAFETY: bmoe_last_error NUL-terminates within the buffer.
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn new_layer(d: usize, f: usize, n_e: usize, k: usize, li: usize, lo: usize, seed: u64) -> *mut BmoeLayer {
    let mut out = ptr::null_mut();
    // SAFETY: out is a valid pointer slot.
    let st = unsafe { bmoe_layer_new(d, f, n_e, k, li, lo, seed, &mut out) };
    assert_eq!(st, BmoeStatus::Ok, "{}", last_error());
    out
}

#[test]
fn layer_forward_matches_the_rust_layer() {
    let layer = new_layer(16, 32, 4, 2, 3, 0, 11);
    let (mut d, mut f, mut n, mut k) = (0, 0, 0, 0);
    // SAFETY: live handle and writable outputs.
    assert_eq!(unsafe { bmoe_layer_dims(layer, &mut d, &mut f, &mut n, &mut k) }, BmoeStatus::Ok);
    assert_eq!((d, f, n, k), (16, 32, 4, 2));

    let tokens = 5;
    let x: Vec<f32> = (0..tokens * 16).map(|i| (i as f32 * 0.37).cos()).collect();
    let mut y = vec![0f32; tokens * 32];
    // SAFETY: buffer sizes match the declared lengths.
    assert_eq!(unsafe { bmoe_layer_forward(layer, x.as_ptr(), tokens, y.as_mut_ptr(), y.len()) }, BmoeStatus::Ok);

    let config = MoEConfig {
        layers_in: 3,
        ..MoEConfig::new(16, 32, 4, 2)
    };
    let rust = MoELayer::<f32>::new(config, 11).unwrap();
    let (want, _) = rust.moe_forward(&Tensor::new([tokens, 16], x.clone()).unwrap()).unwrap();
    assert_eq!(want.data(), &y[..]);

    // freezing reuses the quantized substrate and must not change outputs
    // SAFETY: live handle.
    assert_eq!(unsafe { bmoe_layer_freeze(layer) }, BmoeStatus::Ok);
    let mut z = vec![0f32; tokens * 32];
    // SAFETY: as above.
    assert_eq!(unsafe { bmoe_layer_forward(layer, x.as_ptr(), tokens, z.as_mut_ptr(), z.len()) }, BmoeStatus::Ok);
    assert_eq!(y, z);
    // SAFETY: handle from bmoe_layer_new, freed once.
    unsafe { bmoe_layer_free(layer) };
}

#[test]
fn similarity_and_diversity_round_trip() {
    let layer = new_layer(8, 16, 3, 1, 0, 0, 2);
    let probe: Vec<f32> = (0..32 * 8).map(|i| ((i * 7 % 13) as f32 - 6.0) / 6.0).collect();
    let mut sim = vec![0f64; 9];
    // SAFETY: sizes match.
    assert_eq!(unsafe { bmoe_layer_similarity(layer, probe.as_ptr(), 32, sim.as_mut_ptr(), sim.len()) }, BmoeStatus::Ok);
    for i in 0..3 {
        assert!((sim[i * 3 + i] - 1.0).abs() < 1e-12);
        for j in 0..3 {
            assert!((sim[i * 3 + j] - sim[j * 3 + i]).abs() < 1e-12);
        }
    }
    let mut div = f64::NAN;
    // SAFETY: 3 × 3 matrix and writable output.
    assert_eq!(unsafe { bmoe_diversity_score(sim.as_ptr(), 3, &mut div) }, BmoeStatus::Ok);
    let off = (sim.iter().sum::<f64>() - 3.0) / 6.0;
    assert!((div - (1.0 - off)).abs() < 1e-12);
    // SAFETY: output too small on purpose.
    assert_eq!(unsafe { bmoe_layer_similarity(layer, probe.as_ptr(), 32, sim.as_mut_ptr(), 4) }, BmoeStatus::Shape);
    // SAFETY: freed once.
    unsafe { bmoe_layer_free(layer) };
}

#[test]
fn errors_are_reported_not_panicked() {
    let mut out = ptr::null_mut();
    // SAFETY: valid out slot.
    assert_eq!(unsafe { bmoe_layer_new(48, 64, 4, 2, 0, 0, 0, &mut out) }, BmoeStatus::Config);
    assert!(out.is_null());
    assert!(last_error().contains("power of two"));
    // SAFETY: null out is rejected before any write.
    assert_eq!(unsafe { bmoe_layer_new(8, 8, 2, 1, 0, 0, 0, ptr::null_mut()) }, BmoeStatus::NullPointer);
    // SAFETY: null handle is rejected.
    assert_eq!(unsafe { bmoe_layer_freeze(ptr::null_mut()) }, BmoeStatus::NullPointer);

    let layer = new_layer(8, 8, 2, 1, 0, 0, 0);
    let x = [f32::NAN; 8];
    let mut y = [0f32; 8];
    // SAFETY: sizes match.
    assert_eq!(unsafe { bmoe_layer_forward(layer, x.as_ptr(), 1, y.as_mut_ptr(), 8) }, BmoeStatus::Numeric);
    // SAFETY: zero tokens is a shape error even with a null input.
    assert_eq!(unsafe { bmoe_layer_forward(layer, ptr::null(), 0, y.as_mut_ptr(), 8) }, BmoeStatus::Shape);
    // SAFETY: freed once; null is ignored.
    unsafe {
        bmoe_layer_free(layer);
        bmoe_layer_free(ptr::null_mut());
        bmoe_model_free(ptr::null_mut());
    }

    // truncation keeps the NUL and reports the full length
    let mut small = [0x7f as std::ffi::c_char; 4];
    // SAFETY: 4-byte buffer.
    let n = unsafe { bmoe_last_error(small.as_mut_ptr(), small.len()) };
    assert!(n > 3);
    assert_eq!(small[3], 0);
}

#[test]
fn checkpoint_load_and_queries() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bmoe");
    let model = Model::<f32>::new(ModelConfig {
        d_model: 16,
        d_ff: 32,
        n_experts: 4,
        layers_in: 4,
        layers_out: 5,
        variant: Variant::ButterflyMoe,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    checkpoint::save(&model, &path).unwrap();

    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    // SAFETY: NUL-terminated path and valid out slot.
    assert_eq!(unsafe { bmoe_model_load(c.as_ptr(), &mut handle) }, BmoeStatus::Ok, "{}", last_error());
    let (mut params, mut layers) = (0usize, 0usize);
    // SAFETY: live handle, writable outputs.
    unsafe {
        assert_eq!(bmoe_model_param_count(handle, &mut params), BmoeStatus::Ok);
        assert_eq!(bmoe_model_butterfly_layers(handle, &mut layers), BmoeStatus::Ok);
    }
    assert_eq!(params, model.param_count());
    assert_eq!(layers, model.butterfly_layers().count());
    for (i, l) in model.butterfly_layers().enumerate() {
        let mut q = f64::NAN;
        // SAFETY: as above.
        assert_eq!(unsafe { bmoe_model_quant_error(handle, i, &mut q) }, BmoeStatus::Ok);
        assert_eq!(q, butterfly_moe::ternary::relative_quant_error(l.latent()).unwrap());
    }
    let mut q = 0.0;
    // SAFETY: as above; index past the end.
    assert_eq!(unsafe { bmoe_model_quant_error(handle, layers, &mut q) }, BmoeStatus::Shape);
    // SAFETY: freed once.
    unsafe { bmoe_model_free(handle) };

    std::fs::write(&path, b"not a checkpoint").unwrap();
    let mut h2 = ptr::null_mut();
    // SAFETY: as above.
    assert_ne!(unsafe { bmoe_model_load(c.as_ptr(), &mut h2) }, BmoeStatus::Ok);
    assert!(h2.is_null());
}

#[test]
fn analysis_entry_points_agree_with_the_library() {
    let mut bytes = 0.0;
    // SAFETY: writable output.
    assert_eq!(unsafe { bmoe_butterfly_memory_bytes(512, 2048, 64, 1.58, 2.0, &mut bytes) }, BmoeStatus::Ok);
    assert_eq!(bytes, analysis::butterfly_memory_bytes(512, 2048, 64, 1.58, 2.0).unwrap());
    assert_eq!(bmoe_standard_moe_memory_bytes(512, 2048, 64, 4), 256 << 20);
    let mut r = 0.0;
    // SAFETY: writable output.
    assert_eq!(unsafe { bmoe_asymptotic_compression(512, 2048, 4, &mut r) }, BmoeStatus::Ok);
    assert!((r - 154.5).abs() < 0.1);
    assert_eq!(bmoe_dram_energy_joules(1.0), analysis::dram_energy_joules(1.0));
    let f = bmoe_flops_per_token(64, 128, 2, 6, 7);
    let want = analysis::flops_per_token(64, 128, 2, 6, 7);
    assert_eq!((f.rotation_flops, f.ternary_adds, f.ternary_muls), (want.rotation_flops, want.ternary_adds, want.ternary_muls));
    // SAFETY: static NUL-terminated string.
    let v = unsafe { CStr::from_ptr(bmoe_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn header_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

fn c_compiler() -> Option<String> {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    Command::new(&cc).arg("--version").output().ok().filter(|o| o.status.success()).map(|_| cc)
}

#[test]
fn header_is_valid_c_and_cxx() {
    let Some(cc) = c_compiler() else {
        eprintln!("no C compiler on PATH; header check skipped");
        return;
    };
    let header = header_dir().join("butterfly_moe.h");
    for lang in ["c", "c++"] {
        let st = Command::new(&cc).args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang]).arg(&header).output().unwrap();
        assert!(st.status.success(), "{lang}: {}", String::from_utf8_lossy(&st.stderr));
    }
}

/// Static library produced alongside this test binary, if cargo built one.
fn static_lib() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let deps = exe.parent()?;
    [deps, deps.parent()?].iter().map(|d| d.join("libbutterfly_moe_ffi.a")).find(|p| p.exists())
}

#[test]
fn c_program_links_against_the_static_library() {
    let (Some(cc), Some(lib)) = (c_compiler(), static_lib()) else {
        eprintln!("no C compiler or static library; link check skipped");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/smoke.c");
    let st = Command::new(&cc)
        .arg("-I")
        .arg(header_dir())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(st.status.success(), "link: {}", String::from_utf8_lossy(&st.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
