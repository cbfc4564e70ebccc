//! C ABI for the garlileo odometry toolkit.
//!
//! Conventions:
//! - Functions return [`GrlStatus`] (`GRL_OK` on success). After a failure,
//!   [`grl_last_error_message`] returns a newly allocated description; free
//!   it with [`grl_string_free`].
//! - Datasets are exchanged as opaque [`GrlDataset`] handles created by
//!   [`grl_dataset_load`] and released with [`grl_dataset_free`].
//! - All strings are NUL-terminated UTF-8.
//!
//! The generated header lives at `include/garlileo.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use garlileo::cli;
use garlileo::nalgebra;
use garlileo::dataset::{read_tum, Dataset};
use garlileo::pipeline::{run as run_pipeline, PipelineConfig};
use garlileo::radar::{estimate_ego_velocity, RadarPoint, RadarScan, RansacConfig};
use garlileo::sim::{make_scenario, NoiseConfig};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrlStatus {
    /// Success.
    GrlOk = 0,
    /// Internal failure; see `grl_last_error_message`.
    GrlInternalError = 1,
    /// Invalid argument or unreadable input.
    GrlInvalidArgument = 2,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<Vec<u8>>) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: GrlStatus, msg: String) -> GrlStatus {
    set_error(msg);
    status
}

/// # Safety
/// `s` must be a valid NUL-terminated string or null.
unsafe fn opt_str<'a>(s: *const c_char) -> Result<Option<&'a str>, GrlStatus> {
    if s.is_null() {
        return Ok(None);
    }
    match CStr::from_ptr(s).to_str() {
        Ok(v) => Ok(Some(v)),
        Err(_) => {
            set_error("string argument is not valid UTF-8");
            Err(GrlStatus::GrlInvalidArgument)
        }
    }
}

unsafe fn req_str<'a>(s: *const c_char, name: &str) -> Result<&'a str, GrlStatus> {
    match opt_str(s)? {
        Some(v) => Ok(v),
        None => {
            set_error(format!("argument '{name}' must not be null"));
            Err(GrlStatus::GrlInvalidArgument)
        }
    }
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn grl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Returns the last error message of this thread as a newly allocated
/// string, or null when no error occurred. Free with [`grl_string_free`].
#[no_mangle]
pub extern "C" fn grl_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(c) => c.clone().into_raw(),
        None => ptr::null_mut(),
    })
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must have been returned by a function of this library and not freed
/// before; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn grl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates a synthetic dataset for a named scenario into `out_dir`.
/// `noise_json` optionally overrides the default noise configuration.
///
/// # Safety
/// All pointer arguments must be valid NUL-terminated strings (or null
/// where documented).
#[no_mangle]
pub unsafe extern "C" fn grl_simulate(
    scenario: *const c_char,
    seed: u64,
    out_dir: *const c_char,
    noise_json: *const c_char,
) -> GrlStatus {
    let scenario = match req_str(scenario, "scenario") {
        Ok(v) => v,
        Err(s) => return s,
    };
    let out = match req_str(out_dir, "out_dir") {
        Ok(v) => v,
        Err(s) => return s,
    };
    let mut noise = match opt_str(noise_json) {
        Ok(Some(text)) => match serde_json::from_str::<NoiseConfig>(text) {
            Ok(n) => n,
            Err(e) => return fail(GrlStatus::GrlInvalidArgument, format!("noise_json: {e}")),
        },
        Ok(None) => NoiseConfig::default(),
        Err(s) => return s,
    };
    noise.seed = seed;
    let sim = match make_scenario(scenario, &noise) {
        Ok(s) => s,
        Err(e) => return fail(GrlStatus::GrlInvalidArgument, e.to_string()),
    };
    if let Err(e) = sim.dataset.save(Path::new(out)) {
        return fail(GrlStatus::GrlInternalError, e.to_string());
    }
    let gt = sim.dataset.gt_trajectory().expect("simulated dataset has ground truth");
    if let Err(e) = garlileo::dataset::write_tum(&Path::new(out).join("gt_tum.txt"), &gt) {
        return fail(GrlStatus::GrlInternalError, e.to_string());
    }
    GrlStatus::GrlOk
}

/// Opaque handle to a loaded dataset.
pub struct GrlDataset {
    inner: Dataset,
}

/// Loads a dataset directory; returns null on failure (see
/// [`grl_last_error_message`]). Release with [`grl_dataset_free`].
///
/// # Safety
/// `dir` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn grl_dataset_load(dir: *const c_char) -> *mut GrlDataset {
    let dir = match req_str(dir, "dir") {
        Ok(v) => v,
        Err(_) => return ptr::null_mut(),
    };
    match Dataset::load(Path::new(dir)) {
        Ok(inner) => Box::into_raw(Box::new(GrlDataset { inner })),
        Err(e) => {
            set_error(e.to_string());
            ptr::null_mut()
        }
    }
}

/// Frees a dataset handle; null is ignored.
///
/// # Safety
/// `ds` must have been returned by [`grl_dataset_load`] and not freed.
#[no_mangle]
pub unsafe extern "C" fn grl_dataset_free(ds: *mut GrlDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Stream lengths of a loaded dataset. Null output pointers are skipped.
///
/// # Safety
/// `ds` must be a live handle; output pointers must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn grl_dataset_counts(
    ds: *const GrlDataset,
    imu: *mut usize,
    radar: *mut usize,
    leg: *mut usize,
) -> GrlStatus {
    if ds.is_null() {
        return fail(GrlStatus::GrlInvalidArgument, "dataset handle is null".into());
    }
    let d = &(*ds).inner;
    if !imu.is_null() {
        *imu = d.imu.len();
    }
    if !radar.is_null() {
        *radar = d.radar.len();
    }
    if !leg.is_null() {
        *leg = d.leg.len();
    }
    GrlStatus::GrlOk
}

/// Runs the estimator on a loaded dataset, writing the trajectory and
/// diagnostics into `out_dir`. `config_json` optionally overrides the
/// default configuration; `ablate_csv` is a comma-separated list of
/// `no-gravity`, `no-s2`, `no-bias`.
///
/// # Safety
/// `ds` must be a live handle; strings as in [`grl_simulate`].
#[no_mangle]
pub unsafe extern "C" fn grl_dataset_run(
    ds: *const GrlDataset,
    out_dir: *const c_char,
    config_json: *const c_char,
    ablate_csv: *const c_char,
) -> GrlStatus {
    if ds.is_null() {
        return fail(GrlStatus::GrlInvalidArgument, "dataset handle is null".into());
    }
    let out = match req_str(out_dir, "out_dir") {
        Ok(v) => v,
        Err(s) => return s,
    };
    let mut cfg = match opt_str(config_json) {
        Ok(Some(text)) => match serde_json::from_str::<PipelineConfig>(text) {
            Ok(c) => c,
            Err(e) => return fail(GrlStatus::GrlInvalidArgument, format!("config_json: {e}")),
        },
        Ok(None) => PipelineConfig::default(),
        Err(s) => return s,
    };
    if let Ok(Some(ablate)) = opt_str(ablate_csv) {
        for name in ablate.split(',').filter(|s| !s.is_empty()) {
            if cli::apply_ablation(&mut cfg, name.trim()).is_err() {
                return fail(
                    GrlStatus::GrlInvalidArgument,
                    format!("unknown ablation '{name}'"),
                );
            }
        }
    }
    let result = match run_pipeline(&(*ds).inner, &cfg) {
        Ok(r) => r,
        Err(e) => return fail(GrlStatus::GrlInternalError, e.to_string()),
    };
    let out = Path::new(out);
    if let Err(e) = std::fs::create_dir_all(out) {
        return fail(GrlStatus::GrlInternalError, e.to_string());
    }
    if let Err(e) = garlileo::dataset::write_tum(&out.join("trajectory_tum.txt"), &result.trajectory)
    {
        return fail(GrlStatus::GrlInternalError, e.to_string());
    }
    let gravity: Vec<String> = result
        .diagnostics
        .gravity_log
        .iter()
        .map(|(t, g)| {
            format!(r#"{{"stamp":{},"g":[{},{},{}]}}"#, t, g.x, g.y, g.z)
        })
        .collect();
    if let Err(e) = std::fs::write(out.join("gravity_est.jsonl"), gravity.join("\n") + "\n") {
        return fail(GrlStatus::GrlInternalError, e.to_string());
    }
    GrlStatus::GrlOk
}

/// RMSE pose metrics plus the mean gravity-direction error.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GrlMetricReport {
    /// Translational absolute pose error (m).
    pub ape_t: f64,
    /// Rotational absolute pose error (deg).
    pub ape_r: f64,
    /// Translational relative pose error (m/m).
    pub rpe_t: f64,
    /// Rotational relative pose error (deg/m).
    pub rpe_r: f64,
    /// Vertical absolute pose error (m).
    pub ape_z: f64,
    /// Horizontal absolute pose error (m).
    pub ape_xy: f64,
    /// Mean gravity angular error (deg); NaN when not evaluated.
    pub gravity_mean_deg: f64,
}

/// Scores an estimated TUM trajectory against a ground-truth one, with an
/// optional estimated-gravity JSONL log.
///
/// # Safety
/// Paths must be valid strings (gravity may be null); `report` must point
/// to writable memory.
#[no_mangle]
pub unsafe extern "C" fn grl_evaluate(
    est_tum: *const c_char,
    gt_tum: *const c_char,
    est_gravity: *const c_char,
    rpe_delta: f64,
    report: *mut GrlMetricReport,
) -> GrlStatus {
    if report.is_null() {
        return fail(GrlStatus::GrlInvalidArgument, "report pointer is null".into());
    }
    let est_path = match req_str(est_tum, "est_tum") {
        Ok(v) => v,
        Err(s) => return s,
    };
    let gt_path = match req_str(gt_tum, "gt_tum") {
        Ok(v) => v,
        Err(s) => return s,
    };
    let est = match read_tum(Path::new(est_path)) {
        Ok(t) => t,
        Err(e) => return fail(GrlStatus::GrlInvalidArgument, e.to_string()),
    };
    let gt = match read_tum(Path::new(gt_path)) {
        Ok(t) => t,
        Err(e) => return fail(GrlStatus::GrlInvalidArgument, e.to_string()),
    };
    let gravity = match opt_str(est_gravity) {
        Ok(Some(p)) => {
            let text = match std::fs::read_to_string(p) {
                Ok(t) => t,
                Err(e) => return fail(GrlStatus::GrlInvalidArgument, e.to_string()),
            };
            let mut log = Vec::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let v: serde_json::Value = match serde_json::from_str(line) {
                    Ok(v) => v,
                    Err(e) => return fail(GrlStatus::GrlInvalidArgument, e.to_string()),
                };
                let stamp = v["stamp"].as_f64().unwrap_or(f64::NAN);
                let g = &v["g"];
                log.push((
                    stamp,
                    nalgebra_vector(g[0].as_f64(), g[1].as_f64(), g[2].as_f64()),
                ));
            }
            Some(log)
        }
        Ok(None) => None,
        Err(s) => return s,
    };
    match cli::evaluate(&est, &gt, gravity.as_deref(), rpe_delta) {
        Ok((m, _)) => {
            *report = GrlMetricReport {
                ape_t: m.ape_t,
                ape_r: m.ape_r,
                rpe_t: m.rpe_t,
                rpe_r: m.rpe_r,
                ape_z: m.ape_z,
                ape_xy: m.ape_xy,
                gravity_mean_deg: m.gravity_mean_deg.unwrap_or(f64::NAN),
            };
            GrlStatus::GrlOk
        }
        Err(e) => fail(GrlStatus::GrlInvalidArgument, e.to_string()),
    }
}

fn nalgebra_vector(x: Option<f64>, y: Option<f64>, z: Option<f64>) -> nalgebra::Vector3<f64> {
    nalgebra::Vector3::new(
        x.unwrap_or(f64::NAN),
        y.unwrap_or(f64::NAN),
        z.unwrap_or(f64::NAN),
    )
}

/// One radar return for [`grl_ego_velocity`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GrlRadarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub doppler: f64,
}

/// Result of the instantaneous ego-velocity estimate, radar frame.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GrlEgoVelocity {
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub inliers: usize,
    pub residual_rms: f64,
    /// 1 when the estimate is usable, 0 otherwise.
    pub valid: i32,
}

/// RANSAC + least-squares ego velocity from one scan's Doppler returns.
/// Equal seeds give bit-identical results.
///
/// # Safety
/// `points` must reference `n` readable elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn grl_ego_velocity(
    points: *const GrlRadarPoint,
    n: usize,
    threshold: f64,
    min_inliers: usize,
    seed: u64,
    out: *mut GrlEgoVelocity,
) -> GrlStatus {
    if out.is_null() || (points.is_null() && n > 0) {
        return fail(GrlStatus::GrlInvalidArgument, "null pointer argument".into());
    }
    let slice = std::slice::from_raw_parts(points, n);
    let scan = RadarScan {
        stamp: 0.0,
        points: slice
            .iter()
            .map(|p| RadarPoint { p: [p.x, p.y, p.z], doppler: p.doppler, intensity: None })
            .collect(),
    };
    let cfg = RansacConfig { threshold, min_inliers, seed, ..Default::default() };
    let est = estimate_ego_velocity(&scan, &cfg);
    *out = GrlEgoVelocity {
        vx: est.v[0],
        vy: est.v[1],
        vz: est.v[2],
        inliers: est.inlier_indices.len(),
        residual_rms: est.residual_rms,
        valid: est.valid as i32,
    };
    if !est.valid {
        set_error(est.reason.unwrap_or_else(|| "invalid estimate".into()));
    }
    GrlStatus::GrlOk
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn c(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    #[test]
    fn version_is_static() {
        let v = unsafe { CStr::from_ptr(grl_version()) };
        assert!(!v.to_str().unwrap().is_empty());
    }

    #[test]
    fn simulate_load_run_evaluate_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds_dir = c(dir.path().join("ds").to_str().unwrap());
        let status = unsafe {
            grl_simulate(c("slip_zone").as_ptr(), 3, ds_dir.as_ptr(), std::ptr::null())
        };
        assert_eq!(status, GrlStatus::GrlOk);

        let handle = unsafe { grl_dataset_load(ds_dir.as_ptr()) };
        assert!(!handle.is_null());
        let (mut ni, mut nr, mut nl) = (0usize, 0usize, 0usize);
        unsafe { grl_dataset_counts(handle, &mut ni, &mut nr, &mut nl) };
        assert!(ni > 1000 && nr > 100 && nl > 1000);

        // Short config so the test stays fast: truncate by rewriting is not
        // exposed, so run on the full 60 s scenario only in release-ish
        // builds; here a run with default config is still bounded.
        let out_dir = c(dir.path().join("run").to_str().unwrap());
        let status = unsafe {
            grl_dataset_run(handle, out_dir.as_ptr(), std::ptr::null(), std::ptr::null())
        };
        assert_eq!(status, GrlStatus::GrlOk);
        unsafe { grl_dataset_free(handle) };

        let est = c(dir.path().join("run/trajectory_tum.txt").to_str().unwrap());
        let gt = c(dir.path().join("ds/gt_tum.txt").to_str().unwrap());
        let grav = c(dir.path().join("run/gravity_est.jsonl").to_str().unwrap());
        let mut report = GrlMetricReport {
            ape_t: 0.0,
            ape_r: 0.0,
            rpe_t: 0.0,
            rpe_r: 0.0,
            ape_z: 0.0,
            ape_xy: 0.0,
            gravity_mean_deg: 0.0,
        };
        let status = unsafe {
            grl_evaluate(est.as_ptr(), gt.as_ptr(), grav.as_ptr(), 1.0, &mut report)
        };
        assert_eq!(status, GrlStatus::GrlOk);
        assert!(report.ape_t < 1.0, "{report:?}");
        assert!(report.gravity_mean_deg.is_finite());
    }

    #[test]
    fn error_paths_set_messages() {
        let status = unsafe {
            grl_simulate(c("nope").as_ptr(), 0, c("/tmp/grl_nope").as_ptr(), std::ptr::null())
        };
        assert_eq!(status, GrlStatus::GrlInvalidArgument);
        let msg = grl_last_error_message();
        assert!(!msg.is_null());
        let text = unsafe { CStr::from_ptr(msg) }.to_str().unwrap().to_string();
        assert!(text.contains("flat_loop"));
        unsafe { grl_string_free(msg) };

        assert!(unsafe { grl_dataset_load(c("/definitely/missing").as_ptr()) }.is_null());
    }

    #[test]
    fn ego_velocity_through_the_abi() {
        let points: Vec<GrlRadarPoint> = vec![
            GrlRadarPoint { x: 10.0, y: 0.0, z: 0.0, doppler: -2.0 },
            GrlRadarPoint { x: 0.0, y: 10.0, z: 0.0, doppler: 0.0 },
            GrlRadarPoint { x: 0.0, y: 0.0, z: 10.0, doppler: 0.0 },
            GrlRadarPoint { x: 5.0, y: 5.0, z: 0.0, doppler: -2.0 / 2.0_f64.sqrt() },
        ];
        let mut out = GrlEgoVelocity {
            vx: 0.0,
            vy: 0.0,
            vz: 0.0,
            inliers: 0,
            residual_rms: 0.0,
            valid: 0,
        };
        let status = unsafe {
            grl_ego_velocity(points.as_ptr(), points.len(), 0.2, 3, 1, &mut out)
        };
        assert_eq!(status, GrlStatus::GrlOk);
        assert_eq!(out.valid, 1);
        assert!((out.vx - 2.0).abs() < 1e-9 && out.vy.abs() < 1e-9);
        assert_eq!(out.inliers, 4);
    }

    #[test]
    fn header_was_generated() {
        let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/garlileo.h");
        let text = std::fs::read_to_string(header).expect("generated header");
        for symbol in [
            "grl_simulate",
            "grl_dataset_load",
            "grl_dataset_run",
            "grl_evaluate",
            "grl_ego_velocity",
            "GrlMetricReport",
            "GrlStatus",
        ] {
            assert!(text.contains(symbol), "header misses {symbol}");
        }
    }
}
