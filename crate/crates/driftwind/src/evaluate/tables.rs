//! Replicated simulation experiments: single-window parameter recovery over
//! a parameter grid, and domain-scale constant/rotational wind comparisons
//! with smoothed variants.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covmodel::DriftParams;
use crate::dmwa::{self, DmwaConfig};
use crate::error::{Error, Result};
use crate::evaluate::vector_difference;
use crate::gridstore::{self, GridGeometry};
use crate::likelihood::{self, FitOptions};
use crate::scanner::{self, Method, ScanConfig};
use crate::simulator::{simulate_domain, simulate_window, SimConfig, WindFieldSpec};
use crate::smoother::{self, SmoothConfig, SmoothMode};
use crate::util::{config_hash, derive_seed};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportCell {
    pub description: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
    pub runtime_s: f64,
    /// Single-replicate cells report SD = 0 by convention.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub metric: String,
    pub cells: Vec<ReportCell>,
    pub config_hash: String,
    pub seed: u64,
}

impl ExperimentReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("description,mean,sd,n,runtime_s\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{:.3}\n",
                c.description, c.mean, c.sd, c.n, c.runtime_s
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("metric: {}   (config {})\n", self.metric, self.config_hash);
        let width = self
            .cells
            .iter()
            .map(|c| c.description.len())
            .max()
            .unwrap_or(10)
            .max(10);
        for c in &self.cells {
            out.push_str(&format!(
                "{:width$}  {:>8.3} ({:.3})  n={:<4} {:>8.1}s{}\n",
                c.description,
                c.mean,
                c.sd,
                c.n,
                c.runtime_s,
                if c.degenerate { "  [single replicate]" } else { "" },
                width = width
            ));
        }
        out
    }

    pub fn cell(&self, needle: &str) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.description.contains(needle))
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Single-window parameter-recovery grid. The range fields carry the values
/// exactly as the source tables label them; they parameterize the correlation
/// denominators directly (`spatial_range = alpha1`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Table1Config {
    pub sizes: Vec<usize>,
    pub spatial_ranges: Vec<f64>,
    pub temporal_ranges: Vec<f64>,
    pub winds: Vec<[f64; 2]>,
    pub methods: Vec<Method>,
    pub n_reps: usize,
    pub seed: u64,
    pub budget: usize,
    pub lattice_radius_px: usize,
    pub dmwa_inner: usize,
    pub dmwa_search_radius: usize,
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
}

impl Default for Table1Config {
    fn default() -> Self {
        Table1Config {
            sizes: vec![7, 11, 15],
            spatial_ranges: vec![1.0, 2.0, 4.0, 8.0],
            temporal_ranges: vec![1.0, 2.0, 3.0, 4.0],
            winds: vec![[1.0, 2.0], [3.0, 5.0]],
            methods: vec![Method::Stdm, Method::Dmwa],
            n_reps: 30,
            seed: 20260809,
            budget: 2000,
            lattice_radius_px: 6,
            dmwa_inner: 3,
            dmwa_search_radius: 4,
            dbscan_eps: 0.4,
            dbscan_min_pts: 4,
        }
    }
}

fn table1_dmwa_config(cfg: &Table1Config, size: usize) -> DmwaConfig {
    DmwaConfig {
        outer_size: size,
        inner_size: cfg.dmwa_inner,
        search_radius: cfg.dmwa_search_radius,
        dbscan_eps: cfg.dbscan_eps,
        dbscan_min_pts: cfg.dbscan_min_pts,
        nested: true,
    }
}

/// One replicate of one Table-1 cell for one method; returns the vector
/// difference in pixels.
fn table1_replicate(
    cfg: &Table1Config,
    method: Method,
    size: usize,
    params: &DriftParams,
    seed: u64,
) -> Result<f64> {
    let stack = simulate_window(size, params, seed)?;
    let hw = size / 2;
    let center = [hw, hw];
    let dmwa_cfg = table1_dmwa_config(cfg, size);
    match method {
        Method::Dmwa => {
            let (d, _) = dmwa::nested_track(&stack, center, 1, &dmwa_cfg)?;
            Ok(vector_difference(d.v, params.u))
        }
        Method::Stdm => {
            // Block-matching estimate seeds a second optimizer start.
            let dmwa_start = dmwa::nested_track(&stack, center, 1, &dmwa_cfg)
                .map(|(d, _)| d.v)
                .ok();
            let (window, z) = gridstore::slice_window(&stack, center, 1, hw)?;
            let geometry = stack.geometry.clone();
            let init = likelihood::default_init(&geometry);
            let mut opts = FitOptions {
                budget: cfg.budget,
                tol: 1e-5,
                extra_starts: Vec::new(),
                lattice_radius_px: cfg.lattice_radius_px,
            };
            if let Some(v) = dmwa_start {
                opts.extra_starts
                    .push(DriftParams::new(init.alpha1, init.alpha2, v));
            }
            let fit = likelihood::fit_window(&z, &window, &geometry, &init, &opts)?;
            Ok(vector_difference(fit.params_hat.u, params.u))
        }
        other => Err(Error::Config(format!("table1 cannot run {other:?}"))),
    }
}

pub fn run_table1(cfg: &Table1Config) -> Result<ExperimentReport> {
    let mut cells = Vec::new();
    let hash = config_hash(cfg);
    let mut cell_idx = 0u64;
    for &size in &cfg.sizes {
        for &u0 in &cfg.winds {
            for &method in &cfg.methods {
                for &a1 in &cfg.spatial_ranges {
                    for &a2 in &cfg.temporal_ranges {
                        cell_idx += 1;
                        let params = DriftParams::new(a1, a2, u0);
                        let t0 = Instant::now();
                        let vds: Result<Vec<f64>> = (0..cfg.n_reps)
                            .into_par_iter()
                            .map(|rep| {
                                let seed = derive_seed(cfg.seed, cell_idx, rep as u64);
                                table1_replicate(cfg, method, size, &params, seed)
                            })
                            .collect();
                        let vds = vds?;
                        let (mean, sd) = mean_sd(&vds);
                        cells.push(ReportCell {
                            description: format!(
                                "{}x{size} {:?} a1={a1} a2={a2} u0=({},{}) mvd",
                                size, method, u0[0], u0[1]
                            )
                            .to_lowercase(),
                            mean,
                            sd,
                            n: vds.len(),
                            runtime_s: t0.elapsed().as_secs_f64(),
                            degenerate: vds.len() < 2,
                        });
                    }
                }
            }
        }
    }
    Ok(ExperimentReport {
        metric: "mvd".into(),
        cells,
        config_hash: hash,
        seed: cfg.seed,
    })
}

/// Paper-style 4x4 grid rendering of a Table-1 run, one panel per
/// (size, method, wind).
pub fn table1_grid_text(cfg: &Table1Config, report: &ExperimentReport) -> String {
    let mut out = String::new();
    for &size in &cfg.sizes {
        for &u0 in &cfg.winds {
            for &method in &cfg.methods {
                out.push_str(&format!(
                    "\nMVD of {:?} for u0 = ({}, {}), {size}x{size} windows\n",
                    method, u0[0], u0[1]
                ));
                out.push_str("  a1\\a2 ");
                for a2 in &cfg.temporal_ranges {
                    out.push_str(&format!("{:>16}", a2));
                }
                out.push('\n');
                for &a1 in &cfg.spatial_ranges {
                    out.push_str(&format!("{:>7}", a1));
                    for &a2 in &cfg.temporal_ranges {
                        let needle = format!(
                            "{}x{size} {:?} a1={a1} a2={a2} u0=({},{})",
                            size, method, u0[0], u0[1]
                        )
                        .to_lowercase();
                        match report.cell(&needle) {
                            Some(c) => out
                                .push_str(&format!("{:>9.3} ({:>5.2})", c.mean, c.sd)),
                            None => out.push_str(&format!("{:>16}", "-")),
                        }
                    }
                    out.push('\n');
                }
            }
        }
    }
    out
}

/// Domain-scale smoothing-efficacy experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Table2Config {
    pub grid_size: usize,
    pub pixel_size: f64,
    /// Correlation ranges in domain units, as labelled by the source.
    pub spatial_range: f64,
    pub temporal_range: f64,
    pub constant_u: [f64; 2],
    pub rotation_deg: f64,
    pub n_constant: usize,
    pub n_rotational: usize,
    pub hw_constant: usize,
    pub hw_rotational: usize,
    pub stride_constant: usize,
    pub stride_rotational: usize,
    /// Smoothing bandwidth in pixels.
    pub lambda_px: f64,
    pub budget: usize,
    pub lattice_radius_px: usize,
    pub seed: u64,
    pub dmwa_inner: usize,
    pub dmwa_search_radius: usize,
    pub n_times: usize,
}

impl Default for Table2Config {
    fn default() -> Self {
        Table2Config {
            grid_size: 60,
            pixel_size: 1.0 / 59.0,
            spatial_range: 0.075,
            temporal_range: 15.0,
            constant_u: [0.058, 0.058],
            rotation_deg: 6.0,
            n_constant: 20,
            n_rotational: 10,
            hw_constant: 7,
            hw_rotational: 12,
            stride_constant: 6,
            stride_rotational: 11,
            lambda_px: 2.0,
            budget: 1200,
            lattice_radius_px: 6,
            seed: 4242,
            dmwa_inner: 5,
            dmwa_search_radius: 4,
            n_times: 3,
        }
    }
}

struct DomainOutcome {
    raw_stdm: f64,
    raw_dmwa: f64,
    smoothed_stdm: f64,
    smoothed_dmwa: f64,
}

/// Mean vector difference in pixels between a field and the truth, over the
/// pixels where `eval_set` is valid at `t`.
fn field_mvd_px(
    field: &scanner::WindField,
    truth: &scanner::WindField,
    eval_set: &scanner::WindField,
    t: usize,
) -> f64 {
    let g = &field.geometry;
    let to_px = g.time_step / g.pixel_size;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, j) in eval_set.valid_at(t) {
        let est = [field.u[[t, i, j]], field.v[[t, i, j]]];
        let tru = [truth.u[[t, i, j]], truth.v[[t, i, j]]];
        sum += vector_difference(est, tru) * to_px;
        n += 1;
    }
    sum / n as f64
}

fn domain_replicate(
    cfg: &Table2Config,
    spec: &WindFieldSpec,
    hw: usize,
    stride: usize,
    seed: u64,
) -> Result<DomainOutcome> {
    let grid = GridGeometry::new(cfg.grid_size, cfg.grid_size, cfg.n_times)
        .with_resolution(cfg.pixel_size, 1.0);
    let sim = SimConfig {
        grid,
        params: DriftParams::new(cfg.spatial_range, cfg.temporal_range, [0.0, 0.0]),
        seed,
    };
    let (stack, truth) = simulate_domain(spec, &sim, false)?;

    let dmwa_cfg = DmwaConfig {
        outer_size: 2 * hw + 1,
        inner_size: cfg.dmwa_inner,
        search_radius: cfg.dmwa_search_radius,
        ..Default::default()
    };
    let dmwa_field = dmwa::dmwa_scan(&stack, 1..=1, &dmwa_cfg, stride)?;

    let scan_cfg = ScanConfig {
        stride,
        workers: 0,
        budget: cfg.budget,
        tol: 1e-5,
        lattice_radius_px: cfg.lattice_radius_px,
        warm_start: false,
    };
    let stdm_field = scanner::scan(&stack, hw, 1..=1, &scan_cfg, Some(&dmwa_field))?;

    let smooth_iv = SmoothConfig {
        bandwidth: cfg.lambda_px,
        mode: SmoothMode::InverseVariance,
    };
    let smooth_un = SmoothConfig {
        bandwidth: cfg.lambda_px,
        mode: SmoothMode::Unweighted,
    };
    let stdm_smoothed = smoother::smooth_field(&stdm_field, &smooth_iv)?;
    let dmwa_smoothed = smoother::smooth_field(&dmwa_field, &smooth_un)?;

    // Smoothed fields are compared over the raw fields' valid sets so all
    // four rows average the same pixels per method.
    Ok(DomainOutcome {
        raw_stdm: field_mvd_px(&stdm_field, &truth, &stdm_field, 1),
        raw_dmwa: field_mvd_px(&dmwa_field, &truth, &dmwa_field, 1),
        smoothed_stdm: field_mvd_px(&stdm_smoothed, &truth, &stdm_field, 1),
        smoothed_dmwa: field_mvd_px(&dmwa_smoothed, &truth, &dmwa_field, 1),
    })
}

pub fn run_table2(cfg: &Table2Config) -> Result<ExperimentReport> {
    let hash = config_hash(cfg);
    let mut cells = Vec::new();
    let kinds: Vec<(&str, WindFieldSpec, usize, usize, usize)> = vec![
        (
            "constant",
            WindFieldSpec::Constant { u: cfg.constant_u },
            cfg.n_constant,
            cfg.hw_constant,
            cfg.stride_constant,
        ),
        (
            "rotational",
            WindFieldSpec::Rotational {
                deg_per_step: cfg.rotation_deg,
                center: None,
            },
            cfg.n_rotational,
            cfg.hw_rotational,
            cfg.stride_rotational,
        ),
    ];
    for (kind_idx, (label, spec, n_reps, hw, stride)) in kinds.into_iter().enumerate() {
        if n_reps == 0 {
            continue;
        }
        let t0 = Instant::now();
        let outcomes: Result<Vec<DomainOutcome>> = (0..n_reps)
            .into_par_iter()
            .map(|rep| {
                let seed = derive_seed(cfg.seed, kind_idx as u64 + 1, rep as u64);
                domain_replicate(cfg, &spec, hw, stride, seed)
            })
            .collect();
        let outcomes = outcomes?;
        let runtime = t0.elapsed().as_secs_f64();
        let side = 2 * hw + 1;
        let take = |f: &dyn Fn(&DomainOutcome) -> f64| -> Vec<f64> {
            outcomes.iter().map(|o| f(o)).collect()
        };
        for (method, values) in [
            ("stdm", take(&|o| o.raw_stdm)),
            ("dmwa", take(&|o| o.raw_dmwa)),
            ("smoothed-stdm", take(&|o| o.smoothed_stdm)),
            ("smoothed-dmwa", take(&|o| o.smoothed_dmwa)),
        ] {
            let (mean, sd) = mean_sd(&values);
            cells.push(ReportCell {
                description: format!("{label} {side}x{side} {method} mvd-px"),
                mean,
                sd,
                n: values.len(),
                runtime_s: runtime,
                degenerate: values.len() < 2,
            });
            // The same quantity in domain units, for unit-system cross-checks.
            let scale = cfg.pixel_size;
            let native: Vec<f64> = values.iter().map(|v| v * scale).collect();
            let (mean_n, sd_n) = mean_sd(&native);
            cells.push(ReportCell {
                description: format!("{label} {side}x{side} {method} mvd-units"),
                mean: mean_n,
                sd: sd_n,
                n: native.len(),
                runtime_s: runtime,
                degenerate: native.len() < 2,
            });
        }
    }
    Ok(ExperimentReport {
        metric: "mvd".into(),
        cells,
        config_hash: hash,
        seed: cfg.seed,
    })
}
