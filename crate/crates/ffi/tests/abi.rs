use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use guidelab_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(gl_last_error()) }
        .to_string_lossy()
        .into_owned()
}

struct Handles {
    schedule: *mut GlSchedule,
    mixture: *mut GlMixture,
}

impl Handles {
    fn new(dim: usize) -> Self {
        let mut schedule = ptr::null_mut();
        let mut mixture = ptr::null_mut();
        unsafe {
            assert_eq!(gl_schedule_linear(50, 2e-3, 0.4, &mut schedule), GlStatus::Ok);
            assert_eq!(gl_mixture_toy(dim, &mut mixture), GlStatus::Ok);
        }
        Self { schedule, mixture }
    }
}

impl Drop for Handles {
    fn drop(&mut self) {
        unsafe {
            gl_schedule_free(self.schedule);
            gl_mixture_free(self.mixture);
        }
    }
}

fn run(h: &Handles, spec: &str, tokens: &[i64], seed: u64) -> (Vec<f64>, *mut GlTrajectory) {
    let spec = CString::new(spec).unwrap();
    let mut x = vec![0.0; 2];
    let mut traj = ptr::null_mut();
    let status = unsafe {
        gl_sample(
            h.mixture,
            h.schedule,
            spec.as_ptr(),
            tokens.as_ptr(),
            tokens.len(),
            seed,
            x.as_mut_ptr(),
            2,
            &mut traj,
        )
    };
    assert_eq!(status, GlStatus::Ok, "{}", last_error());
    (x, traj)
}

fn omega_e(h: &Handles, traj: *const GlTrajectory, tokens: &[i64]) -> f64 {
    let mut cal = ptr::null_mut();
    let mut w = f64::NAN;
    unsafe {
        assert_eq!(
            gl_calibrate(traj, h.mixture, h.schedule, tokens.as_ptr(), tokens.len(), &mut cal),
            GlStatus::Ok,
            "{}",
            last_error()
        );
        assert_eq!(gl_calibration_len(cal), 50);
        assert_eq!(gl_calibration_omega_e_mean(cal, &mut w), GlStatus::Ok);
        gl_calibration_free(cal);
    }
    w
}

#[test]
fn cfg_round_trip_through_the_abi() {
    let h = Handles::new(2);
    assert_eq!(unsafe { gl_mixture_dim(h.mixture) }, 2);
    assert_eq!(unsafe { gl_schedule_steps(h.schedule) }, 50);
    let (x, traj) = run(&h, r#"{"omega": 5.5, "method": "cfg"}"#, &[3], 7);
    assert!(x.iter().all(|v| v.is_finite()));
    assert_eq!(unsafe { gl_trajectory_len(traj) }, 50);
    assert!((omega_e(&h, traj, &[3]) - 5.5).abs() < 1e-6);

    // The last step lands on the returned sample.
    let mut t = 0;
    let mut x_prev = [0.0; 2];
    unsafe {
        assert_eq!(
            gl_trajectory_step(traj, 49, &mut t, ptr::null_mut(), x_prev.as_mut_ptr(), 2),
            GlStatus::Ok
        );
        gl_trajectory_free(traj);
    }
    assert_eq!(t, 1);
    assert_eq!(x_prev.to_vec(), x);
}

#[test]
fn zigzag_calibrates_above_base_scale() {
    let h = Handles::new(2);
    let (_, traj) = run(&h, r#"{"omega": 5.5, "method": "zigzag"}"#, &[1], 2);
    assert!(omega_e(&h, traj, &[1]) > 5.5);
    unsafe { gl_trajectory_free(traj) };
}

#[test]
fn recover_noise_inverts_a_step() {
    let h = Handles::new(2);
    let (_, traj) = run(&h, r#"{"omega": 2.0, "method": "cfg"}"#, &[0, -1], 3);
    let (mut x_t, mut x_prev, mut eps) = ([0.0; 2], [0.0; 2], [0.0; 2]);
    let mut t = 0;
    unsafe {
        assert_eq!(
            gl_trajectory_step(traj, 10, &mut t, x_t.as_mut_ptr(), x_prev.as_mut_ptr(), 2),
            GlStatus::Ok
        );
        assert_eq!(
            gl_recover_noise(h.schedule, t, x_t.as_ptr(), x_prev.as_ptr(), 2, eps.as_mut_ptr()),
            GlStatus::Ok
        );
        gl_trajectory_free(traj);
        let (mut ab_t, mut ab_p) = (0.0, 0.0);
        gl_schedule_alpha_bar(h.schedule, t, &mut ab_t);
        gl_schedule_alpha_bar(h.schedule, t - 1, &mut ab_p);
        for i in 0..2 {
            let x0 = (x_t[i] - (1.0 - ab_t).sqrt() * eps[i]) / ab_t.sqrt();
            let again = ab_p.sqrt() * x0 + (1.0 - ab_p).sqrt() * eps[i];
            assert!((again - x_prev[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn decompose_step_reports_scale_and_sign() {
    let u = [0.0, 0.0, 0.0];
    let c = [1.0, 0.0, 0.0];
    let star = [-2.0, 0.7, 0.0];
    let (mut w, mut k) = (0.0, 0.0);
    let s = unsafe { gl_decompose_step(star.as_ptr(), u.as_ptr(), c.as_ptr(), 3, &mut w, &mut k) };
    assert_eq!(s, GlStatus::Ok);
    assert!((w - 2.0).abs() < 1e-15);
    assert!((k + 2.0).abs() < 1e-15);

    let s = unsafe { gl_decompose_step(star.as_ptr(), u.as_ptr(), u.as_ptr(), 3, &mut w, &mut k) };
    assert_eq!(s, GlStatus::Numerical);
    assert!(last_error().contains("vanishes"));
}

#[test]
fn errors_are_reported_not_raised() {
    let h = Handles::new(2);
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(gl_schedule_linear(0, 0.1, 0.2, &mut out), GlStatus::InvalidArgument);
        assert!(out.is_null());
        assert_eq!(gl_schedule_linear(10, 0.1, 0.2, ptr::null_mut()), GlStatus::NullPointer);

        let bad = CString::new("{not json").unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(gl_mixture_from_json(bad.as_ptr(), &mut m), GlStatus::InvalidArgument);
        assert!(!last_error().is_empty());

        let spec = CString::new(r#"{"omega": 1.0, "method": "nope"}"#).unwrap();
        let mut x = [0.0; 2];
        let tok = [0i64];
        let s = gl_sample(
            h.mixture,
            h.schedule,
            spec.as_ptr(),
            tok.as_ptr(),
            1,
            0,
            x.as_mut_ptr(),
            2,
            ptr::null_mut(),
        );
        assert_eq!(s, GlStatus::InvalidArgument);

        let spec = CString::new(r#"{"omega": 1.0, "method": "cfg"}"#).unwrap();
        let mut wide = [0.0; 3];
        let s = gl_sample(
            h.mixture,
            h.schedule,
            spec.as_ptr(),
            tok.as_ptr(),
            1,
            0,
            wide.as_mut_ptr(),
            3,
            ptr::null_mut(),
        );
        assert_eq!(s, GlStatus::DimensionMismatch);

        let mut ab = 0.0;
        assert_eq!(
            gl_schedule_alpha_bar(h.schedule, 51, &mut ab),
            GlStatus::InvalidArgument
        );
        assert_eq!(gl_schedule_alpha_bar(ptr::null(), 1, &mut ab), GlStatus::NullPointer);

        // Freeing null is a no-op.
        gl_schedule_free(ptr::null_mut());
        gl_trajectory_free(ptr::null_mut());
    }
}

#[test]
fn mixture_from_json_matches_dim() {
    let json = CString::new(
        r#"{"components": [
            {"weight": 0.5, "mean": [0.0, 0.0, 1.0], "variance": [1.0, 1.0, 1.0]},
            {"weight": 0.5, "mean": [0.0, 0.0, -1.0], "variance": [1.0, 1.0, 1.0]}
        ], "token_map": {"0": [0], "1": [1]}}"#,
    )
    .unwrap();
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(
            gl_mixture_from_json(json.as_ptr(), &mut m),
            GlStatus::Ok,
            "{}",
            last_error()
        );
        assert_eq!(gl_mixture_dim(m), 3);
        gl_mixture_free(m);
    }
}

#[test]
fn header_declares_the_api_and_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/guidelab.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "gl_schedule_linear",
        "gl_mixture_toy",
        "gl_mixture_from_json",
        "gl_sample",
        "gl_calibrate",
        "gl_calibration_omega_e_mean",
        "gl_decompose_step",
        "gl_recover_noise",
        "gl_last_error",
        "GL_STATUS_OK",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(status.success());
}
