use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use gatedreason::image::Raster;
use gatedreason_ffi::*;

fn last_error() -> String {
    let p = gr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn core_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

#[test]
fn step_ratio_and_stop_rule() {
    let s = GrStepScore {
        planning_tuned: -1.0,
        planning_reference: -2.0,
        action_tuned: -0.5,
        action_reference: -0.25,
        has_action: true,
    };
    let mut raw = 0.0;
    assert_eq!(unsafe { gr_step_log_ratio(&s, &mut raw) }, GrStatus::Ok);
    assert!((raw - 0.75).abs() < 1e-12);

    let mut stop = false;
    assert_eq!(unsafe { gr_should_stop(raw, 1.0, 0.5, &mut stop) }, GrStatus::Ok);
    assert!(!stop);
    assert_eq!(unsafe { gr_should_stop(0.2, 1.0, 0.5, &mut stop) }, GrStatus::Ok);
    assert!(stop);

    assert_eq!(unsafe { gr_should_stop(0.2, 1.0, 0.0, &mut stop) }, GrStatus::InvalidArgument);
    assert!(last_error().contains("epsilon"));
}

#[test]
fn reward_sums_scaled_ratios() {
    let scores = [
        GrStepScore {
            planning_tuned: -1.0,
            planning_reference: -2.0,
            action_tuned: 0.0,
            action_reference: 0.0,
            has_action: true,
        },
        GrStepScore {
            planning_tuned: -3.0,
            planning_reference: -1.0,
            action_tuned: 0.0,
            action_reference: 0.0,
            has_action: false,
        },
    ];
    let mut r = 0.0;
    assert_eq!(unsafe { gr_reward(scores.as_ptr(), scores.len(), 2.0, 0.5, &mut r) }, GrStatus::Ok);
    assert!((r - 2.0 * (1.0 - 2.0)).abs() < 1e-12);
}

#[test]
fn null_pointers_are_reported() {
    assert_eq!(unsafe { gr_step_log_ratio(ptr::null(), ptr::null_mut()) }, GrStatus::NullPointer);
    assert!(last_error().contains("null"));
    let mut out = 0.0;
    assert_eq!(unsafe { gr_reward(ptr::null(), 3, 1.0, 0.5, &mut out) }, GrStatus::NullPointer);
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { gr_trajectory_from_json(ptr::null(), &mut h) }, GrStatus::NullPointer);
    unsafe {
        gr_trajectory_free(ptr::null_mut());
        gr_engine_free(ptr::null_mut());
        gr_string_free(ptr::null_mut());
    }
}

#[test]
fn gibbs_closed_form() {
    let p0 = [0.5, 0.5];
    let u = [3f64.ln(), 0.0];
    let mut p = [0.0; 2];
    assert_eq!(
        unsafe { gr_gibbs_optimum(p0.as_ptr(), u.as_ptr(), 2, 1.0, p.as_mut_ptr()) },
        GrStatus::Ok
    );
    assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    let (mut at_opt, mut at_p0) = (0.0, 0.0);
    unsafe {
        assert_eq!(
            gr_kl_objective(p.as_ptr(), p0.as_ptr(), u.as_ptr(), 2, 1.0, &mut at_opt),
            GrStatus::Ok
        );
        assert_eq!(
            gr_kl_objective(p0.as_ptr(), p0.as_ptr(), u.as_ptr(), 2, 1.0, &mut at_p0),
            GrStatus::Ok
        );
    }
    assert!(at_opt < at_p0);
    assert!((at_opt + 2f64.ln()).abs() < 1e-12);
    assert_eq!(
        unsafe { gr_gibbs_optimum(p0.as_ptr(), u.as_ptr(), 2, -1.0, p.as_mut_ptr()) },
        GrStatus::InvalidArgument
    );
}

#[test]
fn engine_and_trajectory_handles() {
    let tmp = tempfile::tempdir().unwrap();
    let png = tmp.path().join("in.png");
    std::fs::write(&png, Raster::filled(8, 8, [1, 2, 3, 255]).to_png().unwrap()).unwrap();

    let dir = CString::new(core_fixtures().join("scripted").display().to_string()).unwrap();
    let mut engine = ptr::null_mut();
    assert_eq!(unsafe { gr_engine_from_mock_dir(dir.as_ptr(), &mut engine) }, GrStatus::Ok);
    let q = CString::new("what is there").unwrap();
    let path = CString::new(png.display().to_string()).unwrap();
    let mut report = ptr::null_mut();
    assert_eq!(
        unsafe { gr_engine_run(engine, q.as_ptr(), path.as_ptr(), &mut report) },
        GrStatus::Ok
    );
    let text = unsafe { CStr::from_ptr(report) }.to_str().unwrap().to_owned();
    unsafe { gr_string_free(report) };

    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["stop_reason"], "verifier_stop");
    let traj = CString::new(v["trajectory"].to_string()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { gr_trajectory_from_json(traj.as_ptr(), &mut h) }, GrStatus::Ok);
    let (mut horizon, mut violations) = (0usize, 1usize);
    unsafe {
        assert_eq!(gr_trajectory_horizon(h, &mut horizon), GrStatus::Ok);
        assert_eq!(gr_trajectory_validate(h, &mut violations), GrStatus::Ok);
    }
    assert_eq!((horizon, violations), (3, 0));
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { gr_trajectory_to_json(h, &mut json) }, GrStatus::Ok);
    let back: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(json) }.to_str().unwrap()).unwrap();
    assert_eq!(back, v["trajectory"]);
    unsafe {
        gr_string_free(json);
        gr_trajectory_free(h);
    }

    let missing = CString::new(tmp.path().join("gone.png").display().to_string()).unwrap();
    let mut r = ptr::null_mut();
    assert_eq!(
        unsafe { gr_engine_run(engine, q.as_ptr(), missing.as_ptr(), &mut r) },
        GrStatus::InvalidArgument
    );
    assert!(last_error().contains("gone.png"));
    unsafe { gr_engine_free(engine) };
}

#[test]
fn bad_inputs_map_to_status_codes() {
    let mut h = ptr::null_mut();
    let bad = CString::new("{\"version\": 1").unwrap();
    assert_eq!(unsafe { gr_trajectory_from_json(bad.as_ptr(), &mut h) }, GrStatus::Parse);
    assert!(h.is_null());

    let mut e = ptr::null_mut();
    let nowhere = CString::new("/nonexistent/mock").unwrap();
    assert_eq!(unsafe { gr_engine_from_mock_dir(nowhere.as_ptr(), &mut e) }, GrStatus::Config);

    let invalid = [0xffu8, 0xfe, 0];
    assert_eq!(
        unsafe { gr_trajectory_from_json(invalid.as_ptr().cast(), &mut h) },
        GrStatus::InvalidUtf8
    );
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/gatedreason.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["gr_last_error", "gr_engine_run", "gr_trajectory_free", "GR_STATUS_PANIC"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Some(cc) = ["cc", "clang", "gcc"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
    else {
        return;
    };
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("check.c");
    std::fs::write(
        &src,
        "#include \"gatedreason.h\"\nint main(void) { GrStatus s = GR_STATUS_OK; return (int)s; }\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}
