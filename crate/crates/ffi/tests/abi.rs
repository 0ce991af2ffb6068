use std::ffi::{CStr, CString};
use std::ptr;

use piwm_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(piwm_last_error()) }.to_string_lossy().into_owned()
}

fn dims() -> (usize, usize, usize) {
    let (mut h, mut w, mut c) = (0, 0, 0);
    assert_eq!(unsafe { piwm_frame_dims(&mut h, &mut w, &mut c) }, PiwmStatus::Ok);
    (h as usize, w as usize, c as usize)
}

#[test]
fn sim_handle_matches_library() {
    let (h, w, c) = dims();
    let mut s = ptr::null_mut();
    unsafe {
        assert_eq!(piwm_sim_new(3, &mut s), PiwmStatus::Ok);
        assert_eq!(piwm_sim_step(s, 4), PiwmStatus::Ok);
        let mut buf = vec![0u8; h * w * c];
        assert_eq!(piwm_sim_render(s, buf.as_mut_ptr(), buf.len()), PiwmStatus::Ok);
        let cfg = piwm::SimConfig::default();
        let want = piwm::sim::render_bev(&piwm::sim::step(&piwm::sim::spawn(&cfg, 3).unwrap(), piwm::Action::Idle).unwrap());
        assert_eq!(buf, want.to_u8_hwc());
        let mut collided = true;
        assert_eq!(piwm_sim_collided(s, &mut collided), PiwmStatus::Ok);
        assert!(!collided);
        piwm_sim_free(s);
    }
}

#[test]
fn errors_set_codes_and_messages() {
    let (h, w, c) = dims();
    unsafe {
        assert_eq!(piwm_sim_step(ptr::null_mut(), 0), PiwmStatus::NullPointer);
        assert!(last_error().contains("null"));
        let mut s = ptr::null_mut();
        piwm_sim_new(1, &mut s);
        assert_eq!(piwm_sim_step(s, 9), PiwmStatus::InvalidArgument);
        assert!(last_error().contains('9'));
        let mut small = vec![0u8; h * w * c - 1];
        assert_eq!(piwm_sim_render(s, small.as_mut_ptr(), small.len()), PiwmStatus::BufferTooSmall);
        piwm_sim_free(s);
        piwm_sim_free(ptr::null_mut());
    }
}

#[test]
fn model_load_reports_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.pw");
    std::fs::write(&bad, b"garbage").unwrap();
    let path = CString::new(bad.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { piwm_model_load(path.as_ptr(), &mut m) }, PiwmStatus::Format);
    assert!(last_error().contains("bad.pw"));
    let missing = CString::new(dir.path().join("none.pw").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { piwm_model_load(missing.as_ptr(), &mut m) }, PiwmStatus::Io);
    assert!(m.is_null());
}

#[test]
fn rollout_is_deterministic_and_outlives_model_handle() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("m.pw");
    let cfg = piwm::nn::DenoiserConfig {
        base_width: 4,
        embed_dim: 8,
        groups: 1,
        ..Default::default()
    };
    piwm::nn::Denoiser::new(cfg, 0.5, 2).unwrap().save(&file).unwrap();
    let path = CString::new(file.to_str().unwrap()).unwrap();
    let (h, w, c) = dims();
    let run = || unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(piwm_model_load(path.as_ptr(), &mut m), PiwmStatus::Ok);
        let (mut l, mut mc, mut np) = (0, 0, 0);
        assert_eq!(piwm_model_info(m, &mut l, &mut mc, &mut np), PiwmStatus::Ok);
        assert_eq!((l, mc), (4, 1));
        assert!(np > 0);
        let mut r = ptr::null_mut();
        assert_eq!(piwm_rollout_new(m, 7, true, &mut r), PiwmStatus::Ok);
        piwm_model_free(m);
        let mut frames = Vec::new();
        for a in [4u8, 2, 0, 4, 3] {
            let mut buf = vec![0u8; h * w * c];
            assert_eq!(piwm_rollout_step(r, a, buf.as_mut_ptr(), buf.len()), PiwmStatus::Ok);
            frames.push(buf);
        }
        piwm_rollout_free(r);
        frames
    };
    assert_eq!(run(), run());
}

#[test]
fn mask_and_percentile() {
    let cfg = piwm::SimConfig::default();
    let frame = piwm::sim::render_bev(&piwm::sim::spawn(&cfg, 5).unwrap());
    let rgb = frame.to_u8_hwc();
    let mut out = vec![0f32; frame.h * frame.w];
    unsafe {
        assert_eq!(
            piwm_mask(rgb.as_ptr(), frame.h as u32, frame.w as u32, PIWM_MASK_HARD, out.as_mut_ptr(), out.len()),
            PiwmStatus::Ok
        );
        assert!(out.iter().all(|v| *v == 0.0 || *v == 1.0));
        assert!(out.iter().any(|v| *v == 1.0));
        assert_eq!(
            piwm_mask(rgb.as_ptr(), frame.h as u32, frame.w as u32, 7, out.as_mut_ptr(), out.len()),
            PiwmStatus::InvalidArgument
        );
        let v = [5.0, 1.0, 3.0];
        let mut p = 0.0;
        assert_eq!(piwm_percentile(v.as_ptr(), 3, 50.0, &mut p), PiwmStatus::Ok);
        assert_eq!(p, 3.0);
        assert_eq!(piwm_percentile(ptr::null(), 0, 50.0, &mut p), PiwmStatus::InvalidArgument);
    }
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/piwm.h");
    let text = std::fs::read_to_string(header).unwrap();
    for sym in ["piwm_sim_new", "piwm_rollout_step", "piwm_last_error", "typedef struct PiwmSim PiwmSim"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"piwm.h\"\nint main(void) { PiwmSim *s = 0; return piwm_sim_new(1, &s) == PIWM_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let cc = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .status();
    match cc {
        Ok(s) => assert!(s.success(), "header does not compile"),
        Err(e) => eprintln!("no C compiler, syntax check skipped: {e}"),
    }
}
