//! Command-line pipeline: simulate, standardize, estimate, smooth, predict,
//! evaluate, table1, table2, cv.
//!
//! Every subcommand reads an optional JSON config (unknown keys rejected),
//! applies flag overrides, runs, and writes a manifest echoing the fully
//! resolved config next to its outputs. Re-running a manifest reproduces the
//! artifact: `--config foo.manifest.json` unwraps the embedded config.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::covmodel::DriftParams;
use crate::dmwa::DmwaConfig;
use crate::error::{Error, Result};
use crate::evaluate::{self, PredictConfig, Table1Config, Table2Config};
use crate::gridstore::{self, GridGeometry, GridStack};
use crate::preprocess;
use crate::scanner::{self, Method, ScanConfig};
use crate::simulator::{self, SimConfig, WindFieldSpec};
use crate::smoother::{self, CvProtocol, SmoothConfig, SmoothMode};
use crate::util::config_hash;

#[derive(Debug, Parser)]
#[command(name = "driftwind", version, about = "Wind estimation from gridded image sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads (default: DRIFTWIND_WORKERS or all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic stack from the drift model.
    Simulate(CommonArgs),
    /// Fit and apply pixel-wise standardization.
    Standardize(CommonArgs),
    /// Estimate a wind field (likelihood scan or block matching).
    Estimate(EstimateArgs),
    /// Kernel-smooth a wind field.
    Smooth(CommonArgs),
    /// Predict a held-out frame from a wind field.
    Predict(CommonArgs),
    /// Score an estimate (mvd) or a prediction (mspe).
    Evaluate(CommonArgs),
    /// Single-window parameter-recovery grid.
    Table1(CommonArgs),
    /// Domain-scale smoothing-efficacy experiment.
    Table2(CommonArgs),
    /// Cross-validation over window sizes or smoothing bandwidths.
    Cv(CommonArgs),
}

#[derive(Debug, Parser, Clone)]
pub struct CommonArgs {
    /// JSON config file (or a previous run's manifest).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input stem override.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output stem override.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bandwidth override (pixels).
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Frame index override (predict/evaluate).
    #[arg(long)]
    pub t: Option<usize>,
}

#[derive(Debug, Parser)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// stdm (likelihood scan) or dmwa (block matching).
    #[arg(long)]
    pub method: Option<String>,
    /// Window half-width override.
    #[arg(long)]
    pub half_width: Option<usize>,
    /// Scan stride override.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Optimizer evaluation budget override.
    #[arg(long)]
    pub budget: Option<usize>,
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    // A manifest embeds the config it ran with.
    let value = match value.get("resolved_config") {
        Some(inner) => inner.clone(),
        None => value,
    };
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_manifest<T: Serialize>(
    out_stem: &Path,
    subcommand: &str,
    resolved: &T,
    seeds: &[u64],
    outputs: &[PathBuf],
) -> Result<PathBuf> {
    let path = {
        let mut s = out_stem.to_path_buf().into_os_string();
        s.push(".manifest.json");
        PathBuf::from(s)
    };
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let doc = serde_json::json!({
        "tool": "driftwind",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": subcommand,
        "config_hash": config_hash(resolved),
        "resolved_config": resolved,
        "seeds": seeds,
        "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "timestamp": timestamp,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(path)
}

fn require_out(out: &Option<PathBuf>) -> Result<PathBuf> {
    out.clone()
        .ok_or_else(|| Error::Config("missing output stem (--out or config \"out\")".into()))
}

fn stack_outputs(stem: &Path) -> Vec<PathBuf> {
    vec![
        crate::util::with_suffix(stem, ".json"),
        crate::util::with_suffix(stem, ".bin"),
    ]
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub mode: String, // "window" | "domain"
    pub out: Option<PathBuf>,
    pub seed: u64,
    // window mode
    pub size: usize,
    // domain mode
    pub grid_size: usize,
    pub pixel_size: f64,
    pub n_times: usize,
    pub wind: Option<WindFieldSpec>,
    pub allow_large: bool,
    // shared covariance settings
    pub spatial_range: f64,
    pub temporal_range: f64,
    pub wind_u: [f64; 2],
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            mode: "window".into(),
            out: None,
            seed: 0,
            size: 7,
            grid_size: 60,
            pixel_size: 1.0 / 59.0,
            n_times: 3,
            wind: None,
            allow_large: false,
            spatial_range: 1.0,
            temporal_range: 4.0,
            wind_u: [1.0, 2.0],
        }
    }
}

fn cmd_simulate(args: &CommonArgs) -> Result<()> {
    let mut cfg: SimulateConfig = read_config(args.config.as_deref())?;
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = require_out(&cfg.out)?;
    let mut outputs = stack_outputs(&out);
    match cfg.mode.as_str() {
        "window" => {
            let params = DriftParams::new(cfg.spatial_range, cfg.temporal_range, cfg.wind_u);
            let stack = simulator::simulate_window(cfg.size, &params, cfg.seed)?;
            gridstore::write_gridstack(&stack, &out)?;
        }
        "domain" => {
            let spec = cfg
                .wind
                .clone()
                .ok_or_else(|| Error::Config("domain mode needs a \"wind\" spec".into()))?;
            let grid = GridGeometry::new(cfg.grid_size, cfg.grid_size, cfg.n_times)
                .with_resolution(cfg.pixel_size, 1.0);
            let sim = SimConfig {
                grid,
                params: DriftParams::new(cfg.spatial_range, cfg.temporal_range, [0.0, 0.0]),
                seed: cfg.seed,
            };
            let (stack, truth) = simulator::simulate_domain(&spec, &sim, cfg.allow_large)?;
            gridstore::write_gridstack(&stack, &out)?;
            let truth_stem = suffixed(&out, ".truth");
            scanner::write_windfield(&truth, &truth_stem)?;
            outputs.extend(stack_outputs(&truth_stem));
        }
        other => return Err(Error::Config(format!("unknown simulate mode {other:?}"))),
    }
    write_manifest(&out, "simulate", &cfg, &[cfg.seed], &outputs)?;
    Ok(())
}

fn suffixed(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.to_path_buf().into_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

// ------------------------------------------------------------- standardize

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StandardizeConfig {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub bandwidth_px: f64,
}

impl Default for StandardizeConfig {
    fn default() -> Self {
        StandardizeConfig {
            input: None,
            out: None,
            bandwidth_px: 2.0,
        }
    }
}

fn cmd_standardize(args: &CommonArgs) -> Result<()> {
    let mut cfg: StandardizeConfig = read_config(args.config.as_deref())?;
    if let Some(v) = &args.input {
        cfg.input = Some(v.clone());
    }
    if let Some(v) = &args.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = args.bandwidth {
        cfg.bandwidth_px = v;
    }
    let input = cfg
        .input
        .clone()
        .ok_or_else(|| Error::Config("missing input stem".into()))?;
    let out = require_out(&cfg.out)?;
    let stack = read_stack(&input)?;
    let model = preprocess::fit_standardization(&stack, cfg.bandwidth_px)?;
    let standardized = preprocess::standardize(&stack, &model)?;
    gridstore::write_gridstack(&standardized, &out)?;
    let model_stem = suffixed(&out, ".stdmodel");
    preprocess::write_model(&model, &model_stem)?;
    let mut outputs = stack_outputs(&out);
    outputs.extend(stack_outputs(&model_stem));
    write_manifest(&out, "standardize", &cfg, &[], &outputs)?;
    Ok(())
}

/// Reads a grid stack from a `.json`/`.bin` stem or imports a `.csv` fixture.
fn read_stack(path: &Path) -> Result<GridStack> {
    if path.extension().is_some_and(|e| e == "csv") {
        gridstore::read_gridstack_csv(path)
    } else {
        gridstore::read_gridstack(path)
    }
}

// ---------------------------------------------------------------- estimate

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateConfig {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub method: String, // "stdm" | "dmwa"
    pub half_width: usize,
    pub t_start: Option<usize>,
    pub t_end: Option<usize>,
    pub stride: usize,
    pub budget: usize,
    pub tol: f64,
    pub lattice_radius_px: usize,
    pub seed_from_dmwa: bool,
    pub warm_start: bool,
    pub dmwa_inner: usize,
    pub dmwa_search_radius: usize,
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
    pub dmwa_nested: bool,
    pub dump_csv: bool,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            input: None,
            out: None,
            method: "stdm".into(),
            half_width: 7,
            t_start: None,
            t_end: None,
            stride: 1,
            budget: 2000,
            tol: 1e-5,
            lattice_radius_px: 0,
            seed_from_dmwa: false,
            warm_start: false,
            dmwa_inner: 5,
            dmwa_search_radius: 4,
            dbscan_eps: 0.4,
            dbscan_min_pts: 4,
            dmwa_nested: true,
            dump_csv: false,
        }
    }
}

fn cmd_estimate(args: &EstimateArgs) -> Result<()> {
    let mut cfg: EstimateConfig = read_config(args.common.config.as_deref())?;
    if let Some(v) = &args.common.input {
        cfg.input = Some(v.clone());
    }
    if let Some(v) = &args.common.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = &args.method {
        cfg.method = v.clone();
    }
    if let Some(v) = args.half_width {
        cfg.half_width = v;
    }
    if let Some(v) = args.stride {
        cfg.stride = v;
    }
    if let Some(v) = args.budget {
        cfg.budget = v;
    }
    let input = cfg
        .input
        .clone()
        .ok_or_else(|| Error::Config("missing input stem".into()))?;
    let out = require_out(&cfg.out)?;
    let stack = read_stack(&input)?;
    if stack.geometry.n_times < 3 {
        return Err(Error::OutOfDomain(
            "estimation needs at least 3 frames".into(),
        ));
    }
    let t0 = cfg.t_start.unwrap_or(1);
    let t1 = cfg.t_end.unwrap_or(stack.geometry.n_times - 2);
    let dmwa_cfg = DmwaConfig {
        outer_size: 2 * cfg.half_width + 1,
        inner_size: cfg.dmwa_inner,
        search_radius: cfg.dmwa_search_radius,
        dbscan_eps: cfg.dbscan_eps,
        dbscan_min_pts: cfg.dbscan_min_pts,
        nested: cfg.dmwa_nested,
    };
    let field = match cfg.method.as_str() {
        "dmwa" => crate::dmwa::dmwa_scan(&stack, t0..=t1, &dmwa_cfg, cfg.stride)?,
        "stdm" => {
            let scan_cfg = ScanConfig {
                stride: cfg.stride,
                workers: 0,
                budget: cfg.budget,
                tol: cfg.tol,
                lattice_radius_px: cfg.lattice_radius_px,
                warm_start: cfg.warm_start,
            };
            let seed_field = if cfg.seed_from_dmwa {
                Some(crate::dmwa::dmwa_scan(&stack, t0..=t1, &dmwa_cfg, cfg.stride)?)
            } else {
                None
            };
            scanner::scan(&stack, cfg.half_width, t0..=t1, &scan_cfg, seed_field.as_ref())?
        }
        other => return Err(Error::Config(format!("unknown method {other:?}"))),
    };
    scanner::write_windfield(&field, &out)?;
    let mut outputs = stack_outputs(&out);
    if cfg.dump_csv {
        let csv_path = crate::util::with_suffix(&out, ".csv");
        dump_windfield_csv(&field, &csv_path)?;
        outputs.push(csv_path);
    }
    write_manifest(&out, "estimate", &cfg, &[], &outputs)?;
    Ok(())
}

/// Per-pixel CSV dump (x, y, u, v, var_u, var_v) for external plotting.
fn dump_windfield_csv(field: &scanner::WindField, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let io_err = |e: std::io::Error| Error::Io {
        path: path.display().to_string(),
        source: e,
    };
    writeln!(f, "t,x,y,u,v,var_u,var_v").map_err(io_err)?;
    let g = &field.geometry;
    for t in 0..g.n_times {
        for i in 0..g.height {
            for j in 0..g.width {
                if field.valid[[t, i, j]] {
                    let c = g.coord(i, j);
                    writeln!(
                        f,
                        "{t},{},{},{},{},{},{}",
                        c[0],
                        c[1],
                        field.u[[t, i, j]],
                        field.v[[t, i, j]],
                        field.var_u[[t, i, j]],
                        field.var_v[[t, i, j]]
                    )
                    .map_err(io_err)?;
                }
            }
        }
    }
    Ok(())
}

// ------------------------------------------------------------------ smooth

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothCmdConfig {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub bandwidth_px: f64,
    pub mode: Option<String>, // inverse-variance | unweighted; default by method
}

impl Default for SmoothCmdConfig {
    fn default() -> Self {
        SmoothCmdConfig {
            input: None,
            out: None,
            bandwidth_px: 2.0,
            mode: None,
        }
    }
}

fn cmd_smooth(args: &CommonArgs) -> Result<()> {
    let mut cfg: SmoothCmdConfig = read_config(args.config.as_deref())?;
    if let Some(v) = &args.input {
        cfg.input = Some(v.clone());
    }
    if let Some(v) = &args.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = args.bandwidth {
        cfg.bandwidth_px = v;
    }
    let input = cfg
        .input
        .clone()
        .ok_or_else(|| Error::Config("missing input wind field".into()))?;
    let out = require_out(&cfg.out)?;
    let field = scanner::read_windfield(&input)?;
    let mode = match cfg.mode.as_deref() {
        Some("inverse-variance") => SmoothMode::InverseVariance,
        Some("unweighted") => SmoothMode::Unweighted,
        Some(other) => return Err(Error::Config(format!("unknown smooth mode {other:?}"))),
        // Block-matching fields carry no usable variances.
        None if field.provenance.method == Method::Dmwa => SmoothMode::Unweighted,
        None => SmoothMode::InverseVariance,
    };
    let smoothed = smoother::smooth_field(
        &field,
        &SmoothConfig {
            bandwidth: cfg.bandwidth_px,
            mode,
        },
    )?;
    scanner::write_windfield(&smoothed, &out)?;
    write_manifest(&out, "smooth", &cfg, &[], &stack_outputs(&out))?;
    Ok(())
}

// ----------------------------------------------------------------- predict

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictCmdConfig {
    pub input: Option<PathBuf>,
    pub wind: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub t: usize,
    pub half_width: usize,
    pub fallback_radius: usize,
    pub fixed_alpha1: Option<f64>,
    pub fixed_alpha2: Option<f64>,
    pub three_slice: bool,
    pub dump_csv: bool,
}

impl Default for PredictCmdConfig {
    fn default() -> Self {
        PredictCmdConfig {
            input: None,
            wind: None,
            out: None,
            t: 3,
            half_width: 7,
            fallback_radius: 5,
            fixed_alpha1: None,
            fixed_alpha2: None,
            three_slice: false,
            dump_csv: false,
        }
    }
}

fn cmd_predict(args: &CommonArgs) -> Result<()> {
    let mut cfg: PredictCmdConfig = read_config(args.config.as_deref())?;
    if let Some(v) = &args.input {
        cfg.input = Some(v.clone());
    }
    if let Some(v) = &args.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = args.t {
        cfg.t = v;
    }
    let input = cfg
        .input
        .clone()
        .ok_or_else(|| Error::Config("missing input stack".into()))?;
    let wind_path = cfg
        .wind
        .clone()
        .ok_or_else(|| Error::Config("missing wind field".into()))?;
    let out = require_out(&cfg.out)?;
    let stack = read_stack(&input)?;
    let wind = scanner::read_windfield(&wind_path)?;
    let fixed_alphas = match (cfg.fixed_alpha1, cfg.fixed_alpha2) {
        (Some(a), Some(b)) => Some([a, b]),
        (None, None) => None,
        _ => {
            return Err(Error::Config(
                "fixed_alpha1 and fixed_alpha2 must be given together".into(),
            ))
        }
    };
    let pred_cfg = PredictConfig {
        half_width: cfg.half_width,
        fallback_radius: cfg.fallback_radius,
        fixed_alphas,
        three_slice: cfg.three_slice,
    };
    let pred = evaluate::predict_frame(&stack, &wind, cfg.t, &pred_cfg)?;

    // Two layers: predicted mean and prediction variance; invalid masked.
    let g = &stack.geometry;
    let mut values = ndarray::Array3::zeros((2, g.height, g.width));
    let mut missing = ndarray::Array3::from_elem((2, g.height, g.width), false);
    for i in 0..g.height {
        for j in 0..g.width {
            let ok = pred.valid[[i, j]];
            values[[0, i, j]] = if ok { pred.mean[[i, j]] } else { 0.0 };
            values[[1, i, j]] = if ok { pred.variance[[i, j]] } else { 0.0 };
            missing[[0, i, j]] = !ok;
            missing[[1, i, j]] = !ok;
        }
    }
    let mut out_geom = g.clone();
    out_geom.n_times = 2;
    let out_stack = GridStack::with_mask(out_geom, values, missing)?;
    gridstore::write_gridstack(&out_stack, &out)?;
    let mut outputs = stack_outputs(&out);
    if cfg.dump_csv {
        let csv_path = crate::util::with_suffix(&out, ".csv");
        gridstore::write_csv_dump(&out_stack, &csv_path)?;
        outputs.push(csv_path);
    }
    write_manifest(&out, "predict", &cfg, &[], &outputs)?;
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub metric: String, // "mvd" | "mspe"
    pub out: Option<PathBuf>,
    // mvd
    pub estimate: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub t: usize,
    // mspe
    pub prediction: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub baseline: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            metric: "mvd".into(),
            out: None,
            estimate: None,
            truth: None,
            t: 1,
            prediction: None,
            input: None,
            baseline: true,
        }
    }
}

fn cmd_evaluate(args: &CommonArgs) -> Result<()> {
    let mut cfg: EvaluateConfig = read_config(args.config.as_deref())?;
    if let Some(v) = &args.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = args.t {
        cfg.t = v;
    }
    if let Some(v) = &args.input {
        cfg.input = Some(v.clone());
    }
    let out = require_out(&cfg.out)?;
    let mut cells = Vec::new();
    match cfg.metric.as_str() {
        "mvd" => {
            let est_path = cfg
                .estimate
                .clone()
                .ok_or_else(|| Error::Config("mvd needs \"estimate\"".into()))?;
            let truth_path = cfg
                .truth
                .clone()
                .ok_or_else(|| Error::Config("mvd needs \"truth\"".into()))?;
            let est = scanner::read_windfield(&est_path)?;
            let truth = scanner::read_windfield(&truth_path)?;
            let g = &est.geometry;
            let to_px = g.time_step / g.pixel_size;
            let mut vds_px = Vec::new();
            for (i, j) in est.valid_at(cfg.t) {
                if truth.valid[[cfg.t, i, j]] {
                    let vd = evaluate::vector_difference(
                        [est.u[[cfg.t, i, j]], est.v[[cfg.t, i, j]]],
                        [truth.u[[cfg.t, i, j]], truth.v[[cfg.t, i, j]]],
                    );
                    vds_px.push(vd * to_px);
                }
            }
            if vds_px.is_empty() {
                return Err(Error::EmptyScan);
            }
            let n = vds_px.len();
            let mean_px = vds_px.iter().sum::<f64>() / n as f64;
            cells.push(evaluate::ReportCell {
                description: format!("mvd-px t={} {:?}", cfg.t, est.provenance.method)
                    .to_lowercase(),
                mean: mean_px,
                sd: 0.0,
                n,
                runtime_s: 0.0,
                degenerate: n < 2,
            });
            cells.push(evaluate::ReportCell {
                description: format!("mvd-units t={} {:?}", cfg.t, est.provenance.method)
                    .to_lowercase(),
                mean: mean_px / to_px,
                sd: 0.0,
                n,
                runtime_s: 0.0,
                degenerate: n < 2,
            });
        }
        "mspe" => {
            let pred_path = cfg
                .prediction
                .clone()
                .ok_or_else(|| Error::Config("mspe needs \"prediction\"".into()))?;
            let obs_path = cfg
                .input
                .clone()
                .ok_or_else(|| Error::Config("mspe needs \"input\"".into()))?;
            let pred = gridstore::read_gridstack(&pred_path)?;
            let stack = read_stack(&obs_path)?;
            if cfg.t >= stack.geometry.n_times {
                return Err(Error::OutOfDomain(format!(
                    "t={} outside stack with {} frames",
                    cfg.t, stack.geometry.n_times
                )));
            }
            let observed = stack.values.index_axis(ndarray::Axis(0), cfg.t);
            let mean_layer = pred.values.index_axis(ndarray::Axis(0), 0);
            let valid =
                ndarray::Array2::from_shape_fn((pred.geometry.height, pred.geometry.width), |(i, j)| {
                    !pred.missing[[0, i, j]]
                });
            let score = evaluate::mspe(&mean_layer, &observed, &valid.view());
            cells.push(evaluate::ReportCell {
                description: format!("mspe t={}", cfg.t),
                mean: score,
                sd: 0.0,
                n: 1,
                runtime_s: 0.0,
                degenerate: true,
            });
            if cfg.baseline {
                let base = evaluate::baseline_persistence(&stack, cfg.t)?;
                let base_score = evaluate::mspe(&base.view(), &observed, &valid.view());
                cells.push(evaluate::ReportCell {
                    description: format!("mspe-baseline t={}", cfg.t),
                    mean: base_score,
                    sd: 0.0,
                    n: 1,
                    runtime_s: 0.0,
                    degenerate: true,
                });
            }
        }
        other => return Err(Error::Config(format!("unknown metric {other:?}"))),
    }
    let report = evaluate::ExperimentReport {
        metric: cfg.metric.clone(),
        cells,
        config_hash: config_hash(&cfg),
        seed: 0,
    };
    write_report(&report, &out)?;
    write_manifest(&out, "evaluate", &cfg, &[], &report_outputs(&out))?;
    Ok(())
}

fn report_outputs(stem: &Path) -> Vec<PathBuf> {
    vec![
        crate::util::with_suffix(stem, ".report.json"),
        crate::util::with_suffix(stem, ".report.csv"),
        crate::util::with_suffix(stem, ".report.txt"),
    ]
}

fn write_report(report: &evaluate::ExperimentReport, stem: &Path) -> Result<()> {
    let io_err = |p: &Path, e: std::io::Error| Error::Io {
        path: p.display().to_string(),
        source: e,
    };
    let json_path = crate::util::with_suffix(stem, ".report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(report).unwrap())
        .map_err(|e| io_err(&json_path, e))?;
    let csv_path = crate::util::with_suffix(stem, ".report.csv");
    std::fs::write(&csv_path, report.to_csv()).map_err(|e| io_err(&csv_path, e))?;
    let txt_path = crate::util::with_suffix(stem, ".report.txt");
    std::fs::write(&txt_path, report.to_text()).map_err(|e| io_err(&txt_path, e))?;
    Ok(())
}

// ------------------------------------------------------------ table1/table2

#[derive(Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Table1CmdConfig {
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub table: Table1Config,
}

fn cmd_table1(args: &CommonArgs) -> Result<()> {
    let mut cfg: Table1CmdConfig = read_config(args.config.as_deref())?;
    if let Some(v) = &args.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = args.seed {
        cfg.table.seed = v;
    }
    let out = require_out(&cfg.out)?;
    let report = evaluate::run_table1(&cfg.table)?;
    write_report(&report, &out)?;
    let grid_path = crate::util::with_suffix(&out, ".grid.txt");
    std::fs::write(&grid_path, evaluate::tables::table1_grid_text(&cfg.table, &report))
        .map_err(|e| Error::Io {
            path: grid_path.display().to_string(),
            source: e,
        })?;
    let mut outputs = report_outputs(&out);
    outputs.push(grid_path);
    write_manifest(&out, "table1", &cfg, &[cfg.table.seed], &outputs)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Table2CmdConfig {
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub table: Table2Config,
}

fn cmd_table2(args: &CommonArgs) -> Result<()> {
    let mut cfg: Table2CmdConfig = read_config(args.config.as_deref())?;
    if let Some(v) = &args.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = args.seed {
        cfg.table.seed = v;
    }
    let out = require_out(&cfg.out)?;
    let report = evaluate::run_table2(&cfg.table)?;
    write_report(&report, &out)?;
    write_manifest(&out, "table2", &cfg, &[cfg.table.seed], &report_outputs(&out))?;
    Ok(())
}

// ---------------------------------------------------------------------- cv

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub target: String, // "window-size" | "bandwidth"
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    // window-size options
    pub sizes: Vec<usize>,
    pub stride: usize,
    pub budget: usize,
    pub lattice_radius_px: usize,
    pub fallback_radius: usize,
    // bandwidth options
    pub wind: Option<PathBuf>,
    pub candidates: Vec<f64>,
    pub t_predict: usize,
    pub half_width: usize,
    pub mode: Option<String>,
    pub fixed_alpha1: Option<f64>,
    pub fixed_alpha2: Option<f64>,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            target: "window-size".into(),
            input: None,
            out: None,
            sizes: vec![11, 15, 21, 25],
            stride: 1,
            budget: 2000,
            lattice_radius_px: 0,
            fallback_radius: 5,
            wind: None,
            candidates: vec![2.0, 8.0],
            t_predict: 3,
            half_width: 7,
            mode: None,
            fixed_alpha1: None,
            fixed_alpha2: None,
        }
    }
}

fn cmd_cv(args: &CommonArgs) -> Result<()> {
    let mut cfg: CvConfig = read_config(args.config.as_deref())?;
    if let Some(v) = &args.input {
        cfg.input = Some(v.clone());
    }
    if let Some(v) = &args.out {
        cfg.out = Some(v.clone());
    }
    let input = cfg
        .input
        .clone()
        .ok_or_else(|| Error::Config("missing input stack".into()))?;
    let out = require_out(&cfg.out)?;
    let stack = read_stack(&input)?;
    match cfg.target.as_str() {
        "window-size" => {
            let scan_cfg = ScanConfig {
                stride: cfg.stride,
                workers: 0,
                budget: cfg.budget,
                tol: 1e-5,
                lattice_radius_px: cfg.lattice_radius_px,
                warm_start: false,
            };
            let outcome =
                evaluate::cv_window_size(&stack, &cfg.sizes, &scan_cfg, cfg.fallback_radius)?;
            let mut report = outcome.report;
            report.cells.push(evaluate::ReportCell {
                description: format!("chosen size={}", outcome.chosen_size),
                mean: outcome.chosen_size as f64,
                sd: 0.0,
                n: 1,
                runtime_s: 0.0,
                degenerate: true,
            });
            write_report(&report, &out)?;
        }
        "bandwidth" => {
            let wind_path = cfg
                .wind
                .clone()
                .ok_or_else(|| Error::Config("bandwidth cv needs \"wind\"".into()))?;
            let field = scanner::read_windfield(&wind_path)?;
            let mode = match cfg.mode.as_deref() {
                Some("unweighted") => SmoothMode::Unweighted,
                Some("inverse-variance") | None => SmoothMode::InverseVariance,
                Some(other) => {
                    return Err(Error::Config(format!("unknown smooth mode {other:?}")))
                }
            };
            let fixed_alphas = match (cfg.fixed_alpha1, cfg.fixed_alpha2) {
                (Some(a), Some(b)) => Some([a, b]),
                _ => None,
            };
            let protocol = CvProtocol {
                t_predict: cfg.t_predict,
                half_width: cfg.half_width,
                mode,
                fallback_radius: cfg.fallback_radius,
                fixed_alphas,
            };
            let (lambda, pairs) =
                smoother::select_bandwidth(&field, &stack, &cfg.candidates, &protocol)?;
            let mut cells: Vec<evaluate::ReportCell> = pairs
                .iter()
                .map(|&(l, m)| evaluate::ReportCell {
                    description: format!("lambda={l} mspe"),
                    mean: m,
                    sd: 0.0,
                    n: 1,
                    runtime_s: 0.0,
                    degenerate: true,
                })
                .collect();
            cells.push(evaluate::ReportCell {
                description: format!("chosen lambda={lambda}"),
                mean: lambda,
                sd: 0.0,
                n: 1,
                runtime_s: 0.0,
                degenerate: true,
            });
            let report = evaluate::ExperimentReport {
                metric: "mspe".into(),
                cells,
                config_hash: config_hash(&cfg),
                seed: 0,
            };
            write_report(&report, &out)?;
        }
        other => return Err(Error::Config(format!("unknown cv target {other:?}"))),
    }
    write_manifest(&out, "cv", &cfg, &[], &report_outputs(&out))?;
    Ok(())
}

/// Exit code for an error, per the documented classes: 2 config, 3 missing
/// input, 4 dimension/domain, 5 numeric.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::MalformedHeader { .. } | Error::Csv { .. } => 2,
        Error::Io { source, .. } => {
            if source.kind() == std::io::ErrorKind::NotFound {
                3
            } else {
                1
            }
        }
        Error::GeometryMismatch(_)
        | Error::OutOfDomain(_)
        | Error::PayloadMismatch { .. }
        | Error::BadGeometry(_)
        | Error::EmptyScan => 4,
        Error::NonFinite { .. }
        | Error::MissingData { .. }
        | Error::DegenerateVariance { .. }
        | Error::InvalidParams(_)
        | Error::NotPositiveDefinite
        | Error::NonFiniteDifference
        | Error::NoFiniteVariance { .. }
        | Error::SimulationTooLarge { .. } => 5,
    }
}

/// Machine-readable error record for stderr.
pub fn error_record(err: &Error) -> String {
    serde_json::json!({
        "error": {
            "kind": format!("{err:?}").split(['{', '(']).next().unwrap_or("Unknown").trim(),
            "message": err.to_string(),
            "exit_code": exit_code(err),
        }
    })
    .to_string()
}

pub fn run(cli: Cli) -> Result<()> {
    let workers = cli
        .workers
        .or_else(|| {
            std::env::var("DRIFTWIND_WORKERS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0);
    if workers > 0 {
        // Global pool; ignore the error if a pool already exists (tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Standardize(a) => cmd_standardize(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Smooth(a) => cmd_smooth(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Table1(a) => cmd_table1(a),
        Command::Table2(a) => cmd_table2(a),
        Command::Cv(a) => cmd_cv(a),
    }
}
