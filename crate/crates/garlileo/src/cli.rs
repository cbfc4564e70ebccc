//! Subcommand implementations behind the `garlileo` binary.
//!
//! Every command honors `--seed`, writes a run manifest, and reproduces its
//! data artifacts byte-identically for equal arguments (manifest wall-clock
//! timings are the one exception). Exit codes: 0 success, 1 internal
//! failure, 2 usage or input error.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::dataset::{self, Dataset, GravitySample};
use crate::eval::{align_rigid, compute_ape, compute_rpe, gravity_error, MetricReport};
use crate::pipeline::{run as run_pipeline, PipelineConfig, Trajectory};
use crate::sim::{make_scenario, NoiseConfig};

/// Command failure classified for the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or unreadable/invalid input: exit code 2.
    Usage(String),
    /// Internal failure: exit code 1.
    Internal(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Internal(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn internal<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Internal(e.to_string())
}

/// Maximum internal parallelism, from `GARLILEO_THREADS` (default 1; the
/// current implementation computes serially and treats this as a cap).
pub fn thread_cap() -> usize {
    std::env::var("GARLILEO_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Applies `key=value` overrides to a JSON-serializable config. Keys are
/// dot-separated paths; values parse as JSON with a string fallback.
pub fn apply_overrides(value: &mut Value, sets: &[String]) -> Result<(), CliError> {
    for s in sets {
        let (path, raw) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set '{s}' is not of the form key=value")))?;
        let parsed: Value =
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let parts: Vec<&str> = path.split('.').collect();
        let missing = || usage(format!("--set key '{path}' does not exist in the config"));
        let mut cursor = &mut *value;
        for part in &parts[..parts.len() - 1] {
            cursor = cursor
                .as_object_mut()
                .ok_or_else(|| usage(format!("--set path '{path}' does not address an object")))?
                .get_mut(*part)
                .ok_or_else(missing)?;
        }
        let last = parts[parts.len() - 1];
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| usage(format!("--set path '{path}' does not address an object")))?;
        if !obj.contains_key(last) {
            return Err(missing());
        }
        obj.insert(last.to_string(), parsed);
    }
    Ok(())
}

/// Stage timings plus everything needed to reproduce a run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub thread_cap: usize,
    pub config: Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Wall-clock seconds per stage (not reproducible between runs).
    pub wall_clock: Value,
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(manifest).map_err(internal)?;
    let tmp = dir.join("manifest.json.tmp");
    let mut f = fs::File::create(&tmp).map_err(internal)?;
    f.write_all(text.as_bytes()).map_err(internal)?;
    f.write_all(b"\n").map_err(internal)?;
    drop(f);
    fs::rename(&tmp, dir.join("manifest.json")).map_err(internal)?;
    Ok(())
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<(), CliError> {
    if out.exists() && out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) && !force {
        return Err(usage(format!(
            "output directory {} exists and is not empty (use --force to overwrite)",
            out.display()
        )));
    }
    fs::create_dir_all(out).map_err(internal)?;
    Ok(())
}

/// `simulate`: generate a synthetic dataset for a named scenario.
pub fn cmd_simulate(
    scenario: &str,
    out: &Path,
    seed: u64,
    force: bool,
    noise_overrides: &[String],
) -> Result<(), CliError> {
    let t0 = Instant::now();
    let mut noise_value = serde_json::to_value(NoiseConfig::default()).map_err(internal)?;
    apply_overrides(&mut noise_value, noise_overrides)?;
    let mut noise: NoiseConfig = serde_json::from_value(noise_value).map_err(usage)?;
    noise.seed = seed;

    let sim = make_scenario(scenario, &noise).map_err(|e| {
        // Unknown scenarios list the available names; that is a usage error.
        usage(e)
    })?;
    prepare_out_dir(out, force)?;
    let t_sim = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    sim.dataset.save(out).map_err(internal)?;
    // Ground truth also in TUM form for the evaluator.
    dataset::write_tum(&out.join("gt_tum.txt"), &sim.dataset.gt_trajectory().unwrap())
        .map_err(internal)?;
    fs::write(
        out.join("scenario.json"),
        serde_json::to_string_pretty(&sim.info).map_err(internal)? + "\n",
    )
    .map_err(internal)?;
    let t_io = t1.elapsed().as_secs_f64();

    write_manifest(
        out,
        &RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: format!("simulate --scenario {scenario} --seed {seed}"),
            seed,
            thread_cap: thread_cap(),
            config: serde_json::to_value(&sim.dataset.meta.noise).map_err(internal)?,
            inputs: vec![],
            outputs: vec![
                "imu.jsonl".into(),
                "radar.jsonl".into(),
                "leg.jsonl".into(),
                "gt.jsonl".into(),
                "gt_gravity.jsonl".into(),
                "gt_bias.jsonl".into(),
                "gt_tum.txt".into(),
                "meta.json".into(),
                "scenario.json".into(),
            ],
            wall_clock: json!({"simulate": t_sim, "write": t_io}),
        },
    )?;
    println!(
        "scenario '{scenario}' -> {} ({} IMU, {} radar, {} leg samples)",
        out.display(),
        sim.dataset.imu.len(),
        sim.dataset.radar.len(),
        sim.dataset.leg.len()
    );
    Ok(())
}

/// Known `--ablate` switches and the config flags they set.
pub fn apply_ablation(cfg: &mut PipelineConfig, name: &str) -> Result<(), CliError> {
    match name {
        "no-gravity" => cfg.ablate_gravity = true,
        "no-s2" => cfg.ablate_s2 = true,
        "no-bias" => cfg.ablate_bias = true,
        other => {
            return Err(usage(format!(
                "unknown ablation '{other}'; available: no-gravity, no-s2, no-bias"
            )))
        }
    }
    Ok(())
}

/// `run`: execute the estimator on a dataset directory.
pub fn cmd_run(
    dataset_dir: &Path,
    out: &Path,
    config_path: Option<&Path>,
    seed: Option<u64>,
    ablate: &[String],
    sets: &[String],
    force: bool,
) -> Result<(), CliError> {
    for stream in ["imu.jsonl", "radar.jsonl", "leg.jsonl", "meta.json"] {
        if !dataset_dir.join(stream).exists() {
            return Err(usage(format!(
                "dataset stream {} is missing",
                dataset_dir.join(stream).display()
            )));
        }
    }
    let t0 = Instant::now();
    let ds = Dataset::load(dataset_dir).map_err(usage)?;
    let t_load = t0.elapsed().as_secs_f64();

    let mut cfg_value = match config_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(usage)?;
            let mut v: Value = serde_json::from_str(&text).map_err(usage)?;
            // Fill unspecified fields from the defaults.
            let defaults = serde_json::to_value(PipelineConfig::default()).map_err(internal)?;
            merge_defaults(&mut v, &defaults);
            v
        }
        None => serde_json::to_value(PipelineConfig::default()).map_err(internal)?,
    };
    apply_overrides(&mut cfg_value, sets)?;
    let mut cfg: PipelineConfig = serde_json::from_value(cfg_value).map_err(usage)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.ransac.seed = s;
    }
    for a in ablate {
        apply_ablation(&mut cfg, a)?;
    }

    prepare_out_dir(out, force)?;
    let t1 = Instant::now();
    let result = run_pipeline(&ds, &cfg).map_err(internal)?;
    let t_run = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    dataset::write_tum(&out.join("trajectory_tum.txt"), &result.trajectory).map_err(internal)?;
    let gravity: Vec<GravitySample> = result
        .diagnostics
        .gravity_log
        .iter()
        .map(|(t, g)| GravitySample { stamp: *t, g: [g.x, g.y, g.z] })
        .collect();
    write_jsonl(&out.join("gravity_est.jsonl"), &gravity)?;
    write_jsonl(&out.join("frames.jsonl"), &result.diagnostics.frames)?;
    let bias: Vec<Value> = result
        .diagnostics
        .bias_log
        .iter()
        .map(|(t, ba, bv)| json!({"stamp": t, "b_a": [ba.x, ba.y, ba.z], "b_v": [bv.x, bv.y]}))
        .collect();
    write_jsonl(&out.join("bias.jsonl"), &bias)?;
    let t_io = t2.elapsed().as_secs_f64();

    write_manifest(
        out,
        &RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: format!(
                "run --dataset {} {}",
                dataset_dir.display(),
                ablate.iter().map(|a| format!("--ablate {a}")).collect::<Vec<_>>().join(" ")
            ),
            seed: cfg.seed,
            thread_cap: thread_cap(),
            config: serde_json::to_value(&cfg).map_err(internal)?,
            inputs: vec![dataset_dir.display().to_string()],
            outputs: vec![
                "trajectory_tum.txt".into(),
                "gravity_est.jsonl".into(),
                "frames.jsonl".into(),
                "bias.jsonl".into(),
            ],
            wall_clock: json!({"load": t_load, "estimate": t_run, "write": t_io}),
        },
    )?;
    println!(
        "estimated {} poses ({} frames, {} rolled back) -> {}",
        result.trajectory.len(),
        result.diagnostics.frames.len(),
        result.diagnostics.rolled_back_frames,
        out.display()
    );
    Ok(())
}

fn merge_defaults(value: &mut Value, defaults: &Value) {
    if let (Value::Object(v), Value::Object(d)) = (value, defaults) {
        for (k, dv) in d {
            match v.get_mut(k) {
                Some(existing) => merge_defaults(existing, dv),
                None => {
                    v.insert(k.clone(), dv.clone());
                }
            }
        }
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(internal)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(internal)
}

fn load_gravity_log(path: &Path) -> Result<Vec<(f64, nalgebra::Vector3<f64>)>, CliError> {
    let text = fs::read_to_string(path).map_err(usage)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: GravitySample = serde_json::from_str(line)
            .map_err(|e| usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push((s.stamp, nalgebra::Vector3::from(s.g)));
    }
    Ok(out)
}

/// Computes the metric report for an estimate/ground-truth pair, aligning
/// the ground truth to the estimate first.
pub fn evaluate(
    est: &Trajectory,
    gt: &Trajectory,
    gravity_log: Option<&[(f64, nalgebra::Vector3<f64>)]>,
    rpe_delta: f64,
) -> Result<(MetricReport, Trajectory), CliError> {
    let (alignment, _) = align_rigid(est, gt).map_err(usage)?;
    let gt_aligned = alignment.apply(gt);
    let mut report = compute_ape(est, &gt_aligned).map_err(usage)?;
    let (rpe_t, rpe_r) = compute_rpe(est, &gt_aligned, rpe_delta).map_err(usage)?;
    report.rpe_t = rpe_t;
    report.rpe_r = rpe_r;
    if let Some(log) = gravity_log {
        let ge = gravity_error(log, &gt_aligned).map_err(usage)?;
        report.gravity_mean_deg = Some(ge.mean_deg);
    }
    Ok((report, gt_aligned))
}

/// `eval`: score an estimated trajectory against ground truth.
#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    est_path: &Path,
    gt_path: &Path,
    est_gravity: Option<&Path>,
    rpe_delta: f64,
    out: Option<&Path>,
    plot_data: Option<&Path>,
) -> Result<(), CliError> {
    let est = dataset::read_tum(est_path).map_err(usage)?;
    let gt = dataset::read_tum(gt_path).map_err(usage)?;
    let gravity = match est_gravity {
        Some(p) => Some(load_gravity_log(p)?),
        None => None,
    };
    let (report, gt_aligned) = evaluate(&est, &gt, gravity.as_deref(), rpe_delta)?;
    let text = serde_json::to_string_pretty(&report).map_err(internal)?;
    println!("{text}");
    if let Some(p) = out {
        fs::write(p, text + "\n").map_err(internal)?;
    }
    if let Some(dir) = plot_data {
        write_plot_data(dir, &est, &gt_aligned, gravity.as_deref())?;
    }
    Ok(())
}

/// `plot-data`: write CSV series (xy path, z over time, gravity error) for
/// external plotting.
pub fn cmd_plot_data(
    est_path: &Path,
    gt_path: &Path,
    est_gravity: Option<&Path>,
    out_dir: &Path,
) -> Result<(), CliError> {
    let est = dataset::read_tum(est_path).map_err(usage)?;
    let gt = dataset::read_tum(gt_path).map_err(usage)?;
    let gravity = match est_gravity {
        Some(p) => Some(load_gravity_log(p)?),
        None => None,
    };
    let (alignment, _) = align_rigid(&est, &gt).map_err(usage)?;
    let gt_aligned = alignment.apply(&gt);
    write_plot_data(out_dir, &est, &gt_aligned, gravity.as_deref())
}

fn write_plot_data(
    dir: &Path,
    est: &Trajectory,
    gt_aligned: &Trajectory,
    gravity: Option<&[(f64, nalgebra::Vector3<f64>)]>,
) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(internal)?;
    let mut xy = String::from("t,est_x,est_y,gt_x,gt_y\n");
    let mut z = String::from("t,est_z,gt_z\n");
    let pairs = crate::eval::associate(est, gt_aligned, crate::eval::ASSOCIATION_WINDOW);
    for (i, j) in pairs {
        let e = &est.points[i];
        let g = &gt_aligned.points[j];
        xy.push_str(&format!(
            "{},{},{},{},{}\n",
            e.stamp, e.position.x, e.position.y, g.position.x, g.position.y
        ));
        z.push_str(&format!("{},{},{}\n", e.stamp, e.position.z, g.position.z));
    }
    fs::write(dir.join("path_xy.csv"), xy).map_err(internal)?;
    fs::write(dir.join("z_vs_time.csv"), z).map_err(internal)?;
    let mut gcsv = String::from("t,err_deg\n");
    if let Some(log) = gravity {
        // Per-sample angular error against interpolated ground truth.
        for (t, g_est) in log {
            let single = [(*t, *g_est)];
            if let Ok(rep) = gravity_error(&single, gt_aligned) {
                gcsv.push_str(&format!("{t},{}\n", rep.mean_deg));
            }
        }
    }
    fs::write(dir.join("gravity_error.csv"), gcsv).map_err(internal)?;
    Ok(())
}
