//! Sliding-window estimation: runs the local likelihood fit at every
//! admissible window center and collects the results into a `WindField`.

use std::ops::RangeInclusive;
use std::path::Path;

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covmodel::DriftParams;
use crate::error::{Error, Result};
use crate::gridstore::{self, GridGeometry, GridStack};
use crate::likelihood::{self, FitOptions};
use crate::util::config_hash;

/// How a wind field was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Stdm,
    Dmwa,
    SmoothedStdm,
    SmoothedDmwa,
    Truth,
}

impl Method {
    pub fn smoothed(self) -> Method {
        match self {
            Method::Stdm | Method::SmoothedStdm => Method::SmoothedStdm,
            Method::Dmwa | Method::SmoothedDmwa => Method::SmoothedDmwa,
            Method::Truth => Method::Truth,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub method: Method,
    pub half_width: usize,
    pub config_hash: String,
}

/// Per-pixel, per-time wind estimates with variances and fit diagnostics.
///
/// `valid` is false wherever the window would exit the domain or the fit
/// failed; failed fits keep their +inf variances rather than being dropped so
/// inverse-variance smoothing nullifies them. All maps are finite wherever
/// `valid` is true.
#[derive(Debug, Clone)]
pub struct WindField {
    pub geometry: GridGeometry,
    pub u: Array3<f64>,
    pub v: Array3<f64>,
    pub var_u: Array3<f64>,
    pub var_v: Array3<f64>,
    pub valid: Array3<bool>,
    /// Fitted range diagnostics (NaN where no likelihood fit happened).
    pub alpha1: Array3<f64>,
    pub alpha2: Array3<f64>,
    pub provenance: Provenance,
}

impl WindField {
    pub fn empty(geometry: GridGeometry, provenance: Provenance) -> Self {
        let dim = (geometry.n_times, geometry.height, geometry.width);
        WindField {
            geometry,
            u: Array3::from_elem(dim, f64::NAN),
            v: Array3::from_elem(dim, f64::NAN),
            var_u: Array3::from_elem(dim, f64::INFINITY),
            var_v: Array3::from_elem(dim, f64::INFINITY),
            valid: Array3::from_elem(dim, false),
            alpha1: Array3::from_elem(dim, f64::NAN),
            alpha2: Array3::from_elem(dim, f64::NAN),
            provenance,
        }
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Valid pixel indices at time `t`.
    pub fn valid_at(&self, t: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.geometry.height {
            for j in 0..self.geometry.width {
                if self.valid[[t, i, j]] {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Scan configuration. `workers = 0` uses the process-default rayon pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanConfig {
    pub stride: usize,
    pub workers: usize,
    pub budget: usize,
    pub tol: f64,
    /// Coarse drift-lattice radius in pixels for extra optimizer starts
    /// (0 = off).
    pub lattice_radius_px: usize,
    /// Sequential scan reusing the previous center's optimum as an extra
    /// start. Off by default: it trades the strict window-locality of the
    /// estimates for speed.
    pub warm_start: bool,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            stride: 1,
            workers: 0,
            budget: 2000,
            tol: 1e-5,
            lattice_radius_px: 0,
            warm_start: false,
        }
    }
}

/// Admissible window centers for a grid: every pixel whose full patch fits
/// inside the domain, on the configured stride.
pub fn admissible_centers(
    geometry: &GridGeometry,
    half_width: usize,
    stride: usize,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if geometry.height < 2 * half_width + 1 || geometry.width < 2 * half_width + 1 {
        return out;
    }
    let mut i = half_width;
    while i + half_width < geometry.height {
        let mut j = half_width;
        while j + half_width < geometry.width {
            out.push((i, j));
            j += stride;
        }
        i += stride;
    }
    out
}

/// Runs `fit_window` at every admissible center and time, producing a dense
/// wind field. Identical inputs give identical outputs for any worker count.
pub fn scan(
    stack: &GridStack,
    half_width: usize,
    t_range: RangeInclusive<usize>,
    config: &ScanConfig,
    seed_field: Option<&WindField>,
) -> Result<WindField> {
    let geometry = stack.geometry.clone();
    let (t0, t1) = (*t_range.start(), *t_range.end());
    if t0 < 1 || t1 + 1 >= geometry.n_times.max(1) || t1 + 2 > geometry.n_times {
        return Err(Error::OutOfDomain(format!(
            "t_range {t0}..={t1} needs t-1 and t+1 inside 0..{}",
            geometry.n_times
        )));
    }
    let centers = admissible_centers(&geometry, half_width, config.stride.max(1));
    if centers.is_empty() {
        return Err(Error::EmptyScan);
    }
    let mut jobs: Vec<(usize, usize, usize)> = Vec::new();
    for t in t0..=t1 {
        for &(i, j) in &centers {
            jobs.push((t, i, j));
        }
    }

    let init = likelihood::default_init(&geometry);
    let fit_one = |&(t, i, j): &(usize, usize, usize)| -> Result<likelihood::FitResult> {
        let (window, z) = gridstore::slice_window(stack, [i, j], t, half_width)?;
        let mut opts = FitOptions {
            budget: config.budget,
            tol: config.tol,
            extra_starts: Vec::new(),
            lattice_radius_px: config.lattice_radius_px,
        };
        if let Some(seed) = seed_field {
            if seed.valid[[t, i, j]] {
                opts.extra_starts.push(DriftParams::new(
                    init.alpha1,
                    init.alpha2,
                    [seed.u[[t, i, j]], seed.v[[t, i, j]]],
                ));
            }
        }
        likelihood::fit_window(&z, &window, &geometry, &init, &opts)
    };

    let results: Vec<Result<likelihood::FitResult>> = if config.warm_start {
        let mut out = Vec::with_capacity(jobs.len());
        let mut prev: Option<DriftParams> = None;
        for job in &jobs {
            let (window, z) = gridstore::slice_window(stack, [job.1, job.2], job.0, half_width)?;
            let mut opts = FitOptions {
                budget: config.budget,
                tol: config.tol,
                extra_starts: Vec::new(),
                lattice_radius_px: config.lattice_radius_px,
            };
            if let Some(p) = prev {
                opts.extra_starts.push(p);
            }
            let r = likelihood::fit_window(&z, &window, &geometry, &init, &opts);
            if let Ok(fit) = &r {
                prev = Some(fit.params_hat);
            }
            out.push(r);
        }
        out
    } else if config.workers == 0 {
        jobs.par_iter().map(fit_one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(fit_one).collect())
    };

    let scan_descr = (half_width, config, &init);
    let mut field = WindField::empty(
        geometry,
        Provenance {
            method: Method::Stdm,
            half_width,
            config_hash: config_hash(&scan_descr),
        },
    );
    for ((t, i, j), result) in jobs.into_iter().zip(results) {
        match result {
            Ok(fit) => {
                field.u[[t, i, j]] = fit.params_hat.u[0];
                field.v[[t, i, j]] = fit.params_hat.u[1];
                field.var_u[[t, i, j]] = fit.var_u[0];
                field.var_v[[t, i, j]] = fit.var_u[1];
                field.alpha1[[t, i, j]] = fit.params_hat.alpha1;
                field.alpha2[[t, i, j]] = fit.params_hat.alpha2;
                field.valid[[t, i, j]] = fit.converged
                    && fit.hessian_ok
                    && fit.params_hat.u.iter().all(|x| x.is_finite());
            }
            Err(_) => {
                // Window errors leave the slot invalid with +inf variance.
            }
        }
    }
    Ok(field)
}

/// Writes the field as a grid-stack file with four layers per time
/// (u, v, var_u, var_v), a provenance sidecar, and an optional companion
/// stack holding the fitted range diagnostics.
pub fn write_windfield(field: &WindField, path: &Path) -> Result<()> {
    let g = &field.geometry;
    let layers = 4 * g.n_times;
    let mut values = Array3::zeros((layers, g.height, g.width));
    let mut missing = Array3::from_elem((layers, g.height, g.width), false);
    for t in 0..g.n_times {
        for i in 0..g.height {
            for j in 0..g.width {
                let ok = field.valid[[t, i, j]];
                let put = |v: f64| if ok { v } else { 0.0 };
                values[[4 * t, i, j]] = put(field.u[[t, i, j]]);
                values[[4 * t + 1, i, j]] = put(field.v[[t, i, j]]);
                values[[4 * t + 2, i, j]] = put(field.var_u[[t, i, j]]);
                values[[4 * t + 3, i, j]] = put(field.var_v[[t, i, j]]);
                for k in 0..4 {
                    missing[[4 * t + k, i, j]] = !ok;
                }
            }
        }
    }
    let mut geom = g.clone();
    geom.n_times = layers;
    let stack = GridStack::with_mask(geom, values, missing)?;
    gridstore::write_gridstack(&stack, path)?;

    let prov_path = sidecar(path, "provenance.json");
    let doc = serde_json::json!({
        "method": field.provenance.method,
        "half_width": field.provenance.half_width,
        "config_hash": field.provenance.config_hash,
        "n_times": g.n_times,
        "layers": ["u", "v", "var_u", "var_v"],
        "time_step": g.time_step,
    });
    std::fs::write(&prov_path, serde_json::to_string_pretty(&doc).unwrap()).map_err(|e| {
        Error::Io {
            path: prov_path.display().to_string(),
            source: e,
        }
    })?;

    if field.alpha1.iter().any(|a| a.is_finite()) {
        let mut avalues = Array3::zeros((2 * g.n_times, g.height, g.width));
        let mut amissing = Array3::from_elem((2 * g.n_times, g.height, g.width), false);
        for t in 0..g.n_times {
            for i in 0..g.height {
                for j in 0..g.width {
                    let a1 = field.alpha1[[t, i, j]];
                    let a2 = field.alpha2[[t, i, j]];
                    let ok = a1.is_finite() && a2.is_finite();
                    avalues[[2 * t, i, j]] = if ok { a1 } else { 0.0 };
                    avalues[[2 * t + 1, i, j]] = if ok { a2 } else { 0.0 };
                    amissing[[2 * t, i, j]] = !ok;
                    amissing[[2 * t + 1, i, j]] = !ok;
                }
            }
        }
        let mut ageom = g.clone();
        ageom.n_times = 2 * g.n_times;
        let astack = GridStack::with_mask(ageom, avalues, amissing)?;
        gridstore::write_gridstack(&astack, &alpha_stem(path))?;
    }
    Ok(())
}

fn sidecar(path: &Path, suffix: &str) -> std::path::PathBuf {
    crate::util::with_suffix(&strip_known(path), &format!(".{suffix}"))
}

fn alpha_stem(path: &Path) -> std::path::PathBuf {
    crate::util::with_suffix(&strip_known(path), ".alpha")
}

/// Strips a trailing `.json`/`.bin` so either sibling names the field.
fn strip_known(path: &Path) -> std::path::PathBuf {
    let s = path.to_string_lossy();
    for suffix in [".json", ".bin"] {
        if let Some(base) = s.strip_suffix(suffix) {
            return std::path::PathBuf::from(base);
        }
    }
    path.to_path_buf()
}

pub fn read_windfield(path: &Path) -> Result<WindField> {
    let stack = gridstore::read_gridstack(path)?;
    let prov_path = sidecar(path, "provenance.json");
    let text = std::fs::read_to_string(&prov_path).map_err(|e| Error::Io {
        path: prov_path.display().to_string(),
        source: e,
    })?;
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: prov_path.display().to_string(),
        detail: e.to_string(),
    })?;
    let provenance = Provenance {
        method: serde_json::from_value(doc["method"].clone()).map_err(|e| {
            Error::MalformedHeader {
                path: prov_path.display().to_string(),
                detail: format!("method: {e}"),
            }
        })?,
        half_width: doc["half_width"].as_u64().unwrap_or(0) as usize,
        config_hash: doc["config_hash"].as_str().unwrap_or("").to_string(),
    };
    let n_times = doc["n_times"].as_u64().ok_or_else(|| Error::MalformedHeader {
        path: prov_path.display().to_string(),
        detail: "missing n_times".into(),
    })? as usize;
    if stack.geometry.n_times != 4 * n_times {
        return Err(Error::GeometryMismatch(format!(
            "wind field stack holds {} layers; expected {}",
            stack.geometry.n_times,
            4 * n_times
        )));
    }
    let mut geometry = stack.geometry.clone();
    geometry.n_times = n_times;
    let mut field = WindField::empty(geometry.clone(), provenance);
    for t in 0..n_times {
        for i in 0..geometry.height {
            for j in 0..geometry.width {
                if stack.missing[[4 * t, i, j]] {
                    continue;
                }
                field.u[[t, i, j]] = stack.values[[4 * t, i, j]];
                field.v[[t, i, j]] = stack.values[[4 * t + 1, i, j]];
                field.var_u[[t, i, j]] = stack.values[[4 * t + 2, i, j]];
                field.var_v[[t, i, j]] = stack.values[[4 * t + 3, i, j]];
                field.valid[[t, i, j]] = true;
            }
        }
    }
    let astem = alpha_stem(path);
    if crate::util::with_suffix(&astem, ".json").exists() {
        let astack = gridstore::read_gridstack(&astem)?;
        for t in 0..n_times {
            for i in 0..geometry.height {
                for j in 0..geometry.width {
                    if !astack.missing[[2 * t, i, j]] {
                        field.alpha1[[t, i, j]] = astack.values[[2 * t, i, j]];
                        field.alpha2[[t, i, j]] = astack.values[[2 * t + 1, i, j]];
                    }
                }
            }
        }
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::simulate_window;

    #[test]
    fn single_center_when_window_fills_grid() {
        let geom = GridGeometry::new(15, 15, 3);
        let centers = admissible_centers(&geom, 7, 1);
        assert_eq!(centers, vec![(7, 7)]);
    }

    #[test]
    fn interior_counting_on_large_grid() {
        let geom = GridGeometry::new(60, 60, 3);
        let centers = admissible_centers(&geom, 7, 1);
        assert_eq!(centers.len(), 46 * 46);
        assert_eq!(centers.first(), Some(&(7, 7)));
        assert_eq!(centers.last(), Some(&(52, 52)));
    }

    #[test]
    fn margin_equals_half_width_on_all_sides() {
        let geom = GridGeometry::new(20, 14, 3);
        let hw = 4;
        let centers = admissible_centers(&geom, hw, 1);
        let imin = centers.iter().map(|c| c.0).min().unwrap();
        let imax = centers.iter().map(|c| c.0).max().unwrap();
        let jmin = centers.iter().map(|c| c.1).min().unwrap();
        let jmax = centers.iter().map(|c| c.1).max().unwrap();
        assert_eq!((imin, jmin), (hw, hw));
        assert_eq!(imax, geom.height - 1 - hw);
        assert_eq!(jmax, geom.width - 1 - hw);
    }

    #[test]
    fn scan_rejects_undersized_grids() {
        let stack = simulate_window(7, &DriftParams::new(1.0, 1.0, [0.0, 0.0]), 3).unwrap();
        let err = scan(&stack, 7, 1..=1, &ScanConfig::default(), None).unwrap_err();
        assert!(matches!(err, Error::EmptyScan));
    }

    #[test]
    fn locality_perturbing_outside_the_window_changes_nothing() {
        let mut cfg = ScanConfig::default();
        cfg.budget = 400;
        let stack = simulate_window(9, &DriftParams::new(1.0, 4.0, [1.0, 0.0]), 5)
            .unwrap();
        // Fit only the center (2,2)-window at (4,4): data outside it is free.
        let f1 = scan(&stack, 2, 1..=1, &cfg, None).unwrap();
        let mut stack2 = stack.clone();
        stack2.values[[0, 0, 0]] += 100.0;
        stack2.values[[2, 8, 8]] -= 50.0;
        let f2 = scan(&stack2, 2, 1..=1, &cfg, None).unwrap();
        assert_eq!(f1.u[[1, 4, 4]].to_bits(), f2.u[[1, 4, 4]].to_bits());
        assert_eq!(f1.v[[1, 4, 4]].to_bits(), f2.v[[1, 4, 4]].to_bits());
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let stack = simulate_window(9, &DriftParams::new(1.0, 4.0, [1.0, 2.0]), 8)
            .unwrap();
        let mut c1 = ScanConfig::default();
        c1.budget = 300;
        c1.workers = 1;
        let mut c8 = c1.clone();
        c8.workers = 8;
        let f1 = scan(&stack, 2, 1..=1, &c1, None).unwrap();
        let f8 = scan(&stack, 2, 1..=1, &c8, None).unwrap();
        assert_eq!(f1.valid, f8.valid);
        for (a, b) in f1.u.iter().zip(f8.u.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in f1.var_v.iter().zip(f8.var_v.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn windfield_round_trip() {
        let stack = simulate_window(9, &DriftParams::new(1.0, 4.0, [1.0, 2.0]), 8)
            .unwrap();
        let mut cfg = ScanConfig::default();
        cfg.budget = 300;
        let field = scan(&stack, 2, 1..=1, &cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wf");
        write_windfield(&field, &path).unwrap();
        let back = read_windfield(&path).unwrap();
        assert_eq!(back.valid, field.valid);
        assert_eq!(back.provenance.half_width, 2);
        for ((t, i, j), &ok) in field.valid.indexed_iter() {
            if ok {
                assert_eq!(back.u[[t, i, j]].to_bits(), field.u[[t, i, j]].to_bits());
                assert_eq!(
                    back.alpha1[[t, i, j]].to_bits(),
                    field.alpha1[[t, i, j]].to_bits()
                );
            }
        }
    }
}
