//! Pixel-wise standardization: per-pixel temporal mean and standard
//! deviation, with the SD map smoothed by a normalized Gaussian kernel before
//! dividing.
//!
//! The kernel weight of site `v` at pixel `x` is
//! `phi(x|v,lambda) / sum_j phi(x|v_j,lambda)` with `phi` the isotropic
//! Gaussian; sums run over every grid pixel for grids up to 128x128 and are
//! truncated at radius `6*lambda` (then renormalized) beyond that. Distances
//! are measured in pixels.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::gridstore::{self, GridGeometry, GridStack};

/// Grid-size threshold below which kernel sums are exact (no truncation).
const EXACT_LIMIT: usize = 128 * 128;

#[derive(Debug, Clone)]
pub struct StandardizationModel {
    pub geometry: GridGeometry,
    pub mean: Array2<f64>,
    pub raw_sd: Array2<f64>,
    pub smoothed_sd: Array2<f64>,
    pub bandwidth: f64,
}

/// One-dimensional Gaussian kernel convolution along both axes; the isotropic
/// kernel factorizes, so row-then-column passes reproduce the full 2-d sum.
fn separable_smooth(field: &Array2<f64>, lambda: f64, exact: bool) -> Array2<f64> {
    let (h, w) = field.dim();
    let reach = if exact {
        h.max(w)
    } else {
        (6.0 * lambda).ceil() as usize
    };
    let taps: Vec<f64> = (0..=reach)
        .map(|d| (-((d * d) as f64) / (2.0 * lambda * lambda)).exp())
        .collect();
    let mut rows = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            let lo = j.saturating_sub(reach);
            let hi = (j + reach).min(w - 1);
            for k in lo..=hi {
                acc += field[[i, k]] * taps[k.abs_diff(j)];
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for j in 0..w {
        for i in 0..h {
            let mut acc = 0.0;
            let lo = i.saturating_sub(reach);
            let hi = (i + reach).min(h - 1);
            for k in lo..=hi {
                acc += rows[[k, j]] * taps[k.abs_diff(i)];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Fits per-pixel temporal mean and SD (denominator n-1) and the smoothed SD
/// map.
pub fn fit_standardization(stack: &GridStack, bandwidth: f64) -> Result<StandardizationModel> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::InvalidParams(format!("bandwidth {bandwidth}")));
    }
    let g = &stack.geometry;
    if g.n_times < 2 {
        return Err(Error::InvalidParams(
            "standardization needs at least 2 frames".into(),
        ));
    }
    let mut mean = Array2::zeros((g.height, g.width));
    let mut raw_sd = Array2::zeros((g.height, g.width));
    for i in 0..g.height {
        for j in 0..g.width {
            let mut vals = Vec::with_capacity(g.n_times);
            for t in 0..g.n_times {
                if !stack.missing[[t, i, j]] {
                    vals.push(stack.values[[t, i, j]]);
                }
            }
            if vals.len() < 2 {
                return Err(Error::InvalidParams(format!(
                    "pixel ({i},{j}) has {} non-missing frames; need at least 2",
                    vals.len()
                )));
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let ss = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            mean[[i, j]] = m;
            raw_sd[[i, j]] = (ss / (vals.len() - 1) as f64).sqrt();
        }
    }

    let exact = g.height * g.width <= EXACT_LIMIT;
    let numer = separable_smooth(&raw_sd, bandwidth, exact);
    let ones = Array2::from_elem((g.height, g.width), 1.0);
    let denom = separable_smooth(&ones, bandwidth, exact);
    let mut smoothed_sd = Array2::zeros((g.height, g.width));
    for i in 0..g.height {
        for j in 0..g.width {
            let s = numer[[i, j]] / denom[[i, j]];
            if s == 0.0 {
                return Err(Error::DegenerateVariance { i, j });
            }
            smoothed_sd[[i, j]] = s;
        }
    }
    Ok(StandardizationModel {
        geometry: g.clone(),
        mean,
        raw_sd,
        smoothed_sd,
        bandwidth,
    })
}

/// `Z(x,t) = (Y(x,t) - mean(x)) / smoothed_sd(x)`; the missing mask carries
/// through unchanged.
pub fn standardize(stack: &GridStack, model: &StandardizationModel) -> Result<GridStack> {
    let g = &stack.geometry;
    let m = &model.geometry;
    if g.height != m.height
        || g.width != m.width
        || g.pixel_size != m.pixel_size
        || g.origin != m.origin
    {
        return Err(Error::GeometryMismatch(format!(
            "stack {}x{} vs model {}x{}",
            g.height, g.width, m.height, m.width
        )));
    }
    let mut values = Array3::zeros(stack.values.raw_dim());
    for ((t, i, j), v) in stack.values.indexed_iter() {
        if !stack.missing[[t, i, j]] {
            values[[t, i, j]] = (v - model.mean[[i, j]]) / model.smoothed_sd[[i, j]];
        }
    }
    GridStack::with_mask(g.clone(), values, stack.missing.clone())
}

/// Serializes the model as a 3-layer grid stack (mean, raw SD, smoothed SD)
/// plus a small JSON sidecar with the bandwidth.
pub fn write_model(model: &StandardizationModel, path: &Path) -> Result<()> {
    let mut geom = model.geometry.clone();
    geom.n_times = 3;
    let mut values = Array3::zeros((3, geom.height, geom.width));
    for i in 0..geom.height {
        for j in 0..geom.width {
            values[[0, i, j]] = model.mean[[i, j]];
            values[[1, i, j]] = model.raw_sd[[i, j]];
            values[[2, i, j]] = model.smoothed_sd[[i, j]];
        }
    }
    let stack = GridStack::new(geom, values)?;
    gridstore::write_gridstack(&stack, path)?;
    let meta = crate::util::with_suffix(path, ".model.json");
    let doc = serde_json::json!({
        "bandwidth": model.bandwidth,
        "layers": ["mean", "raw_sd", "smoothed_sd"],
    });
    std::fs::write(&meta, serde_json::to_string_pretty(&doc).unwrap()).map_err(|e| Error::Io {
        path: meta.display().to_string(),
        source: e,
    })
}

pub fn read_model(path: &Path) -> Result<StandardizationModel> {
    let stack = gridstore::read_gridstack(path)?;
    if stack.geometry.n_times != 3 {
        return Err(Error::GeometryMismatch(format!(
            "model stack holds {} layers; expected 3",
            stack.geometry.n_times
        )));
    }
    let meta = crate::util::with_suffix(path, ".model.json");
    let text = std::fs::read_to_string(&meta).map_err(|e| Error::Io {
        path: meta.display().to_string(),
        source: e,
    })?;
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: meta.display().to_string(),
        detail: e.to_string(),
    })?;
    let bandwidth = doc["bandwidth"].as_f64().ok_or_else(|| Error::MalformedHeader {
        path: meta.display().to_string(),
        detail: "missing bandwidth".into(),
    })?;
    let (h, w) = (stack.geometry.height, stack.geometry.width);
    let slice = |t: usize| Array2::from_shape_fn((h, w), |(i, j)| stack.values[[t, i, j]]);
    Ok(StandardizationModel {
        geometry: stack.geometry.clone(),
        mean: slice(0),
        raw_sd: slice(1),
        smoothed_sd: slice(2),
        bandwidth,
    })
}
