//! Stationary space-time drift correlation and dense covariance assembly.
//!
//! The correlation between two points separated by spatial lag `d` and time
//! lag `h` is
//!
//! ```text
//! sigma2 * exp( -sqrt( |d - u*h|^2 / alpha1^2  +  h^2 / alpha2^2 ) )
//! ```
//!
//! Nonzero drift `u` makes the covariance space-time asymmetric: a feature at
//! `x` now is most correlated with `x + u*h` a lag `h` later.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::gridstore::{GridGeometry, TargetWindow};

/// Local covariance parameters: spatial range, temporal range, drift vector,
/// and the process variance (fixed at 1 for standardized data).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DriftParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub u: [f64; 2],
    pub sigma2: f64,
}

impl DriftParams {
    pub fn new(alpha1: f64, alpha2: f64, u: [f64; 2]) -> Self {
        DriftParams {
            alpha1,
            alpha2,
            u,
            sigma2: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha1 > 0.0
            && self.alpha2 > 0.0
            && self.sigma2 > 0.0
            && self.alpha1.is_finite()
            && self.alpha2.is_finite()
            && self.sigma2.is_finite()
            && self.u.iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("{self:?}")))
        }
    }
}

#[inline]
fn corr_unchecked(dx: f64, dy: f64, h: f64, p: &DriftParams) -> f64 {
    let ex = dx - p.u[0] * h;
    let ey = dy - p.u[1] * h;
    let s = (ex * ex + ey * ey) / (p.alpha1 * p.alpha1) + (h * h) / (p.alpha2 * p.alpha2);
    p.sigma2 * (-s.sqrt()).exp()
}

/// Drift correlation at spatial lag `d` and time lag `h`.
pub fn correlation(d: [f64; 2], h: f64, params: &DriftParams) -> Result<f64> {
    params.validate()?;
    if !d.iter().all(|v| v.is_finite()) || !h.is_finite() {
        return Err(Error::InvalidParams(format!(
            "non-finite lag d={d:?}, h={h}"
        )));
    }
    Ok(corr_unchecked(d[0], d[1], h, params))
}

/// Precomputed pairwise lag structure of a target window.
///
/// Window members sit on a regular grid, so the n^2 pairwise lags collapse to
/// a small set of unique `(dx, dy, dh)` values; covariance assembly evaluates
/// the correlation once per unique lag and scatters through an index table.
pub struct WindowLags {
    n: usize,
    lags: Vec<[f64; 3]>,
    pair_idx: Vec<u32>,
}

impl WindowLags {
    pub fn new(window: &TargetWindow, geometry: &GridGeometry) -> Self {
        let n = window.len();
        let side = 2 * window.half_width + 1;
        let span = 2 * side - 1; // di, dj each in -(side-1)..=side-1
        let offset = side as isize - 1;
        let mut lags = vec![[0.0; 3]; span * span * 5];
        for dt in -2isize..=2 {
            for di in -(offset)..=offset {
                for dj in -(offset)..=offset {
                    let k = lag_key(di, dj, dt, span, offset);
                    lags[k] = [
                        dj as f64 * geometry.pixel_size,
                        di as f64 * geometry.pixel_size,
                        dt as f64 * geometry.time_step,
                    ];
                }
            }
        }
        let mut pair_idx = vec![0u32; n * n];
        for (a, &(ta, ia, ja)) in window.members.iter().enumerate() {
            for (b, &(tb, ib, jb)) in window.members.iter().enumerate() {
                let di = ib as isize - ia as isize;
                let dj = jb as isize - ja as isize;
                let dt = tb as isize - ta as isize;
                pair_idx[a * n + b] = lag_key(di, dj, dt, span, offset) as u32;
            }
        }
        WindowLags { n, lags, pair_idx }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Dense covariance matrix for the window under `params`.
    pub fn matrix(&self, params: &DriftParams) -> Array2<f64> {
        let mut table = vec![0.0f64; self.lags.len()];
        for (out, lag) in table.iter_mut().zip(&self.lags) {
            *out = corr_unchecked(lag[0], lag[1], lag[2], params);
        }
        let mut m = Array2::zeros((self.n, self.n));
        let ms = m.as_slice_mut().expect("freshly allocated");
        for (out, &idx) in ms.iter_mut().zip(&self.pair_idx) {
            *out = table[idx as usize];
        }
        m
    }
}

#[inline]
fn lag_key(di: isize, dj: isize, dt: isize, span: usize, offset: isize) -> usize {
    (((dt + 2) as usize * span) + (di + offset) as usize) * span + (dj + offset) as usize
}

/// Covariance matrix over a target window: entry `(a, b)` is the correlation
/// between members `a` and `b` in the window's canonical ordering.
pub fn cov_matrix(
    window: &TargetWindow,
    geometry: &GridGeometry,
    params: &DriftParams,
) -> Result<Array2<f64>> {
    params.validate()?;
    if window.is_empty() {
        return Err(Error::InvalidParams("empty window".into()));
    }
    Ok(WindowLags::new(window, geometry).matrix(params))
}
