//! Windowed Gaussian log-likelihood, its maximization over the drift
//! parameters, and Hessian-based variance estimates.
//!
//! The log-likelihood is `-0.5 log|Sigma| - 0.5 z' Sigma^{-1} z` (no 2*pi
//! constant), evaluated through a Cholesky factorization: log-determinant from
//! the factor diagonal, quadratic form via one triangular solve. Optimization
//! runs over `(log alpha1, log alpha2, u1, u2)` so positivity needs no
//! constraint handling.

pub mod optim;

use ndarray::Array2;

use crate::covmodel::{DriftParams, WindowLags};
use crate::error::{Error, Result};
use crate::gridstore::{GridGeometry, TargetWindow};
use crate::linalg;
use optim::{minimize, NmOptions};

/// Outcome of one local maximum-likelihood fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params_hat: DriftParams,
    pub loglik: f64,
    /// Variances of the two drift components from the inverse observed
    /// information; +inf when the information matrix is not PD.
    pub var_u: [f64; 2],
    pub hessian_ok: bool,
    pub n_evals: usize,
    pub converged: bool,
}

/// Log-likelihood of data `z` under an explicit covariance matrix.
///
/// This is the computational core shared by every window size; `loglik`
/// assembles the drift covariance and delegates here.
pub fn loglik_dense(z: &[f64], cov: Array2<f64>) -> Result<f64> {
    if z.len() != cov.nrows() {
        return Err(Error::GeometryMismatch(format!(
            "data length {} vs covariance order {}",
            z.len(),
            cov.nrows()
        )));
    }
    let l = linalg::cholesky_lower(cov)?;
    let logdet = linalg::log_det_from_factor(&l);
    let mut w = z.to_vec();
    linalg::solve_lower_inplace(&l, &mut w);
    let quad: f64 = w.iter().map(|v| v * v).sum();
    Ok(-0.5 * logdet - 0.5 * quad)
}

/// Windowed Gaussian log-likelihood for the drift model.
pub fn loglik(
    z: &[f64],
    window: &TargetWindow,
    geometry: &GridGeometry,
    params: &DriftParams,
) -> Result<f64> {
    params.validate()?;
    if z.len() != window.len() {
        return Err(Error::GeometryMismatch(format!(
            "data length {} vs window size {}",
            z.len(),
            window.len()
        )));
    }
    let lags = WindowLags::new(window, geometry);
    loglik_dense(z, lags.matrix(params))
}

/// Options for `fit_window`.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Total objective-evaluation budget across all starts.
    pub budget: usize,
    /// Simplex-diameter convergence tolerance in transformed coordinates.
    pub tol: f64,
    /// Additional start points (e.g. a block-matching estimate); the best
    /// final log-likelihood wins.
    pub extra_starts: Vec<DriftParams>,
    /// When nonzero, a coarse lattice of drift values (2-pixel spacing out to
    /// this radius, ranges held at the init) is scored first and the best
    /// point joins the start list. Guards against the secondary likelihood
    /// modes that appear when the true drift is large relative to the window.
    pub lattice_radius_px: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            budget: 2000,
            tol: 1e-5,
            extra_starts: Vec::new(),
            lattice_radius_px: 0,
        }
    }
}

/// Default optimizer start: zero drift, ranges of two pixels and two frames.
pub fn default_init(geometry: &GridGeometry) -> DriftParams {
    DriftParams::new(2.0 * geometry.pixel_size, 2.0 * geometry.time_step, [0.0, 0.0])
}

fn pack(p: &DriftParams) -> [f64; 4] {
    [p.alpha1.ln(), p.alpha2.ln(), p.u[0], p.u[1]]
}

fn unpack(x: &[f64]) -> DriftParams {
    DriftParams::new(x[0].exp(), x[1].exp(), [x[2], x[3]])
}

/// Maximizes the windowed log-likelihood over `(log a1, log a2, u1, u2)`.
///
/// Budget exhaustion yields `converged = false` rather than an error; a
/// non-PD observed information yields `hessian_ok = false` with +inf drift
/// variances.
pub fn fit_window(
    z: &[f64],
    window: &TargetWindow,
    geometry: &GridGeometry,
    init: &DriftParams,
    opts: &FitOptions,
) -> Result<FitResult> {
    if window.len() < 12 {
        return Err(Error::InvalidParams(format!(
            "window holds {} observations; need at least 12 for a 4-parameter fit",
            window.len()
        )));
    }
    if z.len() != window.len() {
        return Err(Error::GeometryMismatch(format!(
            "data length {} vs window size {}",
            z.len(),
            window.len()
        )));
    }
    init.validate()?;

    let lags = WindowLags::new(window, geometry);
    let objective = |x: &[f64]| -> f64 {
        let p = unpack(x);
        if p.validate().is_err() {
            return f64::INFINITY;
        }
        match loglik_dense(z, lags.matrix(&p)) {
            Ok(v) => -v,
            Err(_) => f64::INFINITY,
        }
    };

    let u_step = 0.5 * geometry.pixel_size / geometry.time_step;
    let steps = [0.4, 0.4, u_step, u_step];

    let mut starts = vec![*init];
    starts.extend(opts.extra_starts.iter().copied());
    let mut lattice_evals = 0usize;
    if opts.lattice_radius_px > 0 {
        let px = geometry.pixel_size / geometry.time_step;
        let r = opts.lattice_radius_px as isize;
        let mut best: Option<(f64, DriftParams)> = None;
        let mut dy = -r;
        while dy <= r {
            let mut dx = -r;
            while dx <= r {
                let p = DriftParams::new(
                    init.alpha1,
                    init.alpha2,
                    [dx as f64 * px, dy as f64 * px],
                );
                let f = objective(&pack(&p));
                lattice_evals += 1;
                if f.is_finite() && best.as_ref().map_or(true, |(bf, _)| f < *bf) {
                    best = Some((f, p));
                }
                dx += 2;
            }
            dy += 2;
        }
        if let Some((_, p)) = best {
            starts.push(p);
        }
    }
    let n_starts = starts.len();

    let mut best: Option<optim::NmResult> = None;
    let mut total_evals = lattice_evals;
    for start in &starts {
        let nm_opts = NmOptions {
            tol_diameter: opts.tol,
            max_evals: opts.budget / n_starts,
        };
        let r = minimize(objective, &pack(start), &steps, &nm_opts);
        total_evals += r.n_evals;
        if best.as_ref().map_or(true, |b| r.fmin < b.fmin) {
            best = Some(r);
        }
    }
    let best = best.expect("at least one start");
    if !best.fmin.is_finite() {
        return Err(Error::NotPositiveDefinite);
    }
    let params_hat = unpack(&best.x);

    let mut var_u = [f64::INFINITY; 2];
    let mut hessian_ok = false;
    if let Ok(info) = observed_information(z, window, geometry, &params_hat) {
        if let Some(inv) = linalg::invert_spd_small(&info) {
            if inv[2][2] > 0.0 && inv[3][3] > 0.0 {
                var_u = [inv[2][2], inv[3][3]];
                hessian_ok = true;
            }
        }
    }

    Ok(FitResult {
        params_hat,
        loglik: -best.fmin,
        var_u,
        hessian_ok,
        n_evals: total_evals,
        converged: best.converged,
    })
}

/// Central-difference Hessian of a scalar function of four parameters, with
/// per-coordinate relative steps, symmetrized as `(H + H')/2`.
pub fn fd_hessian4<F: Fn(&[f64; 4]) -> Result<f64>>(
    f: F,
    theta: &[f64; 4],
    rel_step: f64,
) -> Result<Vec<Vec<f64>>> {
    let h: Vec<f64> = theta.iter().map(|t| rel_step * t.abs().max(1.0)).collect();
    let f0 = f(theta)?;
    if !f0.is_finite() {
        return Err(Error::NonFiniteDifference);
    }
    let shifted = |a: usize, sa: f64, b: usize, sb: f64| -> Result<f64> {
        let mut th = *theta;
        th[a] += sa * h[a];
        if a != b {
            th[b] += sb * h[b];
        }
        let v = f(&th)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteDifference)
        }
    };
    let mut hess = vec![vec![0.0; 4]; 4];
    for a in 0..4 {
        let fp = shifted(a, 1.0, a, 0.0)?;
        let fm = shifted(a, -1.0, a, 0.0)?;
        hess[a][a] = (fp - 2.0 * f0 + fm) / (h[a] * h[a]);
        for b in a + 1..4 {
            let fpp = shifted(a, 1.0, b, 1.0)?;
            let fpm = shifted(a, 1.0, b, -1.0)?;
            let fmp = shifted(a, -1.0, b, 1.0)?;
            let fmm = shifted(a, -1.0, b, -1.0)?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[a] * h[b]);
            hess[a][b] = v;
            hess[b][a] = v;
        }
    }
    // Already structurally symmetric; keep the explicit symmetrization as the
    // documented contract.
    for a in 0..4 {
        for b in 0..a {
            let m = 0.5 * (hess[a][b] + hess[b][a]);
            hess[a][b] = m;
            hess[b][a] = m;
        }
    }
    Ok(hess)
}

/// Observed information: negative Hessian of the log-likelihood at
/// `params_hat` in the natural coordinates `(alpha1, alpha2, u1, u2)`.
pub fn observed_information(
    z: &[f64],
    window: &TargetWindow,
    geometry: &GridGeometry,
    params_hat: &DriftParams,
) -> Result<Vec<Vec<f64>>> {
    observed_information_with_step(z, window, geometry, params_hat, 1e-4)
}

/// Same as `observed_information` with an explicit relative step (used by the
/// two-stencil cross-check).
pub fn observed_information_with_step(
    z: &[f64],
    window: &TargetWindow,
    geometry: &GridGeometry,
    params_hat: &DriftParams,
    rel_step: f64,
) -> Result<Vec<Vec<f64>>> {
    let lags = WindowLags::new(window, geometry);
    let f = |th: &[f64; 4]| -> Result<f64> {
        let p = DriftParams::new(th[0], th[1], [th[2], th[3]]);
        p.validate()?;
        loglik_dense(z, lags.matrix(&p))
    };
    let theta = [
        params_hat.alpha1,
        params_hat.alpha2,
        params_hat.u[0],
        params_hat.u[1],
    ];
    let hess = fd_hessian4(f, &theta, rel_step)?;
    Ok(hess
        .into_iter()
        .map(|row| row.into_iter().map(|v| -v).collect())
        .collect())
}
