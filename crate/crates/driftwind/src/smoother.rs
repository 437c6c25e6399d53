//! Spatial smoothing of wind fields: per component and per time slice, a
//! normalized Gaussian kernel average over the estimate sites, optionally
//! weighting each site by the inverse of its estimated variance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::{self, PredictConfig};
use crate::gridstore::GridStack;
use crate::scanner::WindField;
use crate::util::config_hash;

/// Grid-size threshold below which kernel sums run over every estimate site.
const EXACT_LIMIT: usize = 128 * 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothMode {
    /// Weights proportional to `phi(x|v,lambda) / var(v)`.
    InverseVariance,
    /// Weights proportional to `phi(x|v,lambda)`; used for fields without
    /// uncertainty measures (block-matching estimates).
    Unweighted,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SmoothConfig {
    /// Kernel bandwidth in pixels.
    pub bandwidth: f64,
    pub mode: SmoothMode,
}

struct Site {
    i: usize,
    j: usize,
    value: f64,
    inv_var: f64,
}

/// Smooths one component over one time slice. Estimates with infinite
/// variance (inverse-variance mode) receive weight exactly zero; weights are
/// shifted by the nearest site before exponentiation so arbitrarily small
/// bandwidths stay well-defined.
fn smooth_component(
    sites: &[Site],
    height: usize,
    width: usize,
    lambda: f64,
    out: &mut ndarray::ArrayViewMut2<f64>,
) {
    let two_l2 = 2.0 * lambda * lambda;
    let truncate = height * width > EXACT_LIMIT;
    let reach = (6.0 * lambda).ceil() as isize;
    for i in 0..height {
        for j in 0..width {
            let mut r2_min = f64::INFINITY;
            let eligible = |s: &Site| -> Option<f64> {
                if s.inv_var == 0.0 {
                    return None;
                }
                let di = s.i as isize - i as isize;
                let dj = s.j as isize - j as isize;
                if truncate && (di.abs() > reach || dj.abs() > reach) {
                    return None;
                }
                Some((di * di + dj * dj) as f64)
            };
            for s in sites {
                if let Some(r2) = eligible(s) {
                    if r2 < r2_min {
                        r2_min = r2;
                    }
                }
            }
            let mut num = 0.0;
            let mut den = 0.0;
            for s in sites {
                if let Some(r2) = eligible(s) {
                    let w = (-(r2 - r2_min) / two_l2).exp() * s.inv_var;
                    num += s.value * w;
                    den += w;
                }
            }
            out[[i, j]] = num / den;
        }
    }
}

/// Smooths each wind component independently across space, one time slice at
/// a time. Slices without a single usable estimate are left invalid; if no
/// slice has one the call fails.
pub fn smooth_field(field: &WindField, config: &SmoothConfig) -> Result<WindField> {
    if !(config.bandwidth > 0.0) || !config.bandwidth.is_finite() {
        return Err(Error::InvalidParams(format!(
            "bandwidth {}",
            config.bandwidth
        )));
    }
    let g = &field.geometry;
    let mut out = WindField::empty(
        g.clone(),
        crate::scanner::Provenance {
            method: field.provenance.method.smoothed(),
            half_width: field.provenance.half_width,
            config_hash: config_hash(&(&field.provenance.config_hash, config)),
        },
    );
    out.alpha1 = field.alpha1.clone();
    out.alpha2 = field.alpha2.clone();

    let mut smoothed_any = false;
    for t in 0..g.n_times {
        let mut sites_u = Vec::new();
        let mut sites_v = Vec::new();
        let mut any_valid = false;
        for i in 0..g.height {
            for j in 0..g.width {
                if !field.valid[[t, i, j]] {
                    continue;
                }
                any_valid = true;
                let (wu, wv) = match config.mode {
                    SmoothMode::Unweighted => (1.0, 1.0),
                    SmoothMode::InverseVariance => {
                        let vu = field.var_u[[t, i, j]];
                        let vv = field.var_v[[t, i, j]];
                        (
                            if vu.is_finite() { 1.0 / vu } else { 0.0 },
                            if vv.is_finite() { 1.0 / vv } else { 0.0 },
                        )
                    }
                };
                sites_u.push(Site {
                    i,
                    j,
                    value: field.u[[t, i, j]],
                    inv_var: wu,
                });
                sites_v.push(Site {
                    i,
                    j,
                    value: field.v[[t, i, j]],
                    inv_var: wv,
                });
            }
        }
        if !any_valid {
            continue;
        }
        if sites_u.iter().all(|s| s.inv_var == 0.0) || sites_v.iter().all(|s| s.inv_var == 0.0)
        {
            return Err(Error::NoFiniteVariance { t });
        }
        smooth_component(
            &sites_u,
            g.height,
            g.width,
            config.bandwidth,
            &mut out.u.index_axis_mut(ndarray::Axis(0), t),
        );
        smooth_component(
            &sites_v,
            g.height,
            g.width,
            config.bandwidth,
            &mut out.v.index_axis_mut(ndarray::Axis(0), t),
        );
        for i in 0..g.height {
            for j in 0..g.width {
                out.valid[[t, i, j]] = true;
                // The smoother propagates no variance; a uniform sentinel
                // keeps the maps finite and any re-smoothing unweighted.
                out.var_u[[t, i, j]] = 1.0;
                out.var_v[[t, i, j]] = 1.0;
            }
        }
        smoothed_any = true;
    }
    if !smoothed_any {
        return Err(Error::NoFiniteVariance { t: 0 });
    }
    Ok(out)
}

/// Cross-validation protocol for bandwidth selection: smooth, predict a
/// held-out frame, score by MSPE.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvProtocol {
    pub t_predict: usize,
    pub half_width: usize,
    pub mode: SmoothMode,
    pub fallback_radius: usize,
    pub fixed_alphas: Option<[f64; 2]>,
}

/// Smallest-MSPE candidate; ties go to the smallest bandwidth.
pub fn argmin_bandwidth(pairs: &[(f64, f64)]) -> f64 {
    let mut sorted: Vec<(f64, f64)> = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut best = sorted[0];
    for &(lambda, mspe) in &sorted[1..] {
        if mspe < best.1 {
            best = (lambda, mspe);
        }
    }
    best.0
}

/// Chooses the bandwidth whose smoothed field best predicts the held-out
/// frame. Returns the winner plus the measured `(lambda, mspe)` pairs.
pub fn select_bandwidth(
    field: &WindField,
    stack: &GridStack,
    candidates: &[f64],
    protocol: &CvProtocol,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if candidates.is_empty() {
        return Err(Error::Config("no bandwidth candidates".into()));
    }
    if candidates.len() == 1 {
        return Ok((candidates[0], Vec::new()));
    }
    let mut pairs = Vec::with_capacity(candidates.len());
    for &lambda in candidates {
        let smoothed = smooth_field(
            field,
            &SmoothConfig {
                bandwidth: lambda,
                mode: protocol.mode,
            },
        )?;
        let cfg = PredictConfig {
            half_width: protocol.half_width,
            fallback_radius: protocol.fallback_radius,
            fixed_alphas: protocol.fixed_alphas,
            three_slice: false,
        };
        let pred = evaluate::predict_frame(stack, &smoothed, protocol.t_predict, &cfg)?;
        let observed = stack
            .values
            .index_axis(ndarray::Axis(0), protocol.t_predict);
        let mspe = evaluate::mspe(&pred.mean.view(), &observed, &pred.valid.view());
        pairs.push((lambda, mspe));
    }
    Ok((argmin_bandwidth(&pairs), pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridstore::GridGeometry;
    use crate::scanner::{Method, Provenance, WindField};
    use approx::assert_abs_diff_eq;

    fn field_with(
        estimates: &[(usize, usize, f64, f64, f64, f64)],
        h: usize,
        w: usize,
    ) -> WindField {
        let mut f = WindField::empty(
            GridGeometry::new(w, h, 3),
            Provenance {
                method: Method::Stdm,
                half_width: 1,
                config_hash: "test".into(),
            },
        );
        for &(i, j, u, v, vu, vv) in estimates {
            f.u[[1, i, j]] = u;
            f.v[[1, i, j]] = v;
            f.var_u[[1, i, j]] = vu;
            f.var_v[[1, i, j]] = vv;
            f.valid[[1, i, j]] = true;
        }
        f
    }

    fn iv(bandwidth: f64) -> SmoothConfig {
        SmoothConfig {
            bandwidth,
            mode: SmoothMode::InverseVariance,
        }
    }

    #[test]
    fn constant_field_stays_constant() {
        let f = field_with(
            &[
                (1, 1, 3.25, -1.5, 0.5, 2.0),
                (1, 3, 3.25, -1.5, 4.0, 0.1),
                (3, 2, 3.25, -1.5, 1.0, 1.0),
            ],
            5,
            5,
        );
        let s = smooth_field(&f, &iv(1.3)).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_abs_diff_eq!(s.u[[1, i, j]], 3.25, epsilon = 1e-12);
                assert_abs_diff_eq!(s.v[[1, i, j]], -1.5, epsilon = 1e-12);
                assert!(s.valid[[1, i, j]]);
            }
        }
        assert_eq!(s.provenance.method, Method::SmoothedStdm);
    }

    #[test]
    fn single_estimate_fills_the_slice() {
        let f = field_with(&[(2, 2, 1.25, 0.5, 0.7, 0.7)], 5, 5);
        let s = smooth_field(&f, &iv(2.0)).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(s.u[[1, i, j]], 1.25);
                assert_eq!(s.v[[1, i, j]], 0.5);
            }
        }
    }

    #[test]
    fn two_estimate_frozen_oracle() {
        // Estimates (0, 10) one pixel apart, variances (1, 4), lambda = 1:
        // value at the first site is (10 e^{-1/2}/4) / (1 + e^{-1/2}/4),
        // evaluated with 30-digit arithmetic.
        let f = field_with(
            &[(2, 2, 0.0, 0.0, 1.0, 1.0), (2, 3, 10.0, 10.0, 4.0, 4.0)],
            5,
            6,
        );
        let s = smooth_field(&f, &iv(1.0)).unwrap();
        assert_abs_diff_eq!(s.u[[1, 2, 2]], 1.316675616678670451, epsilon = 1e-12);
        assert_abs_diff_eq!(s.v[[1, 2, 2]], 1.316675616678670451, epsilon = 1e-12);
    }

    #[test]
    fn infinite_variance_gets_weight_zero() {
        let f = field_with(
            &[(2, 2, 5.0, 5.0, 1.0, 1.0), (2, 3, -100.0, -100.0, f64::INFINITY, f64::INFINITY)],
            5,
            6,
        );
        let s = smooth_field(&f, &iv(1.0)).unwrap();
        for i in 0..5 {
            for j in 0..6 {
                assert_eq!(s.u[[1, i, j]], 5.0);
            }
        }
    }

    #[test]
    fn output_bounded_by_input_extremes() {
        let f = field_with(
            &[
                (0, 0, -2.0, 1.0, 0.5, 0.5),
                (2, 3, 7.0, 3.0, 2.0, 2.0),
                (4, 1, 1.0, -4.0, 1.0, 1.0),
            ],
            5,
            5,
        );
        let s = smooth_field(&f, &iv(2.5)).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!(s.u[[1, i, j]] >= -2.0 - 1e-12 && s.u[[1, i, j]] <= 7.0 + 1e-12);
                assert!(s.v[[1, i, j]] >= -4.0 - 1e-12 && s.v[[1, i, j]] <= 3.0 + 1e-12);
            }
        }
    }

    #[test]
    fn weights_match_direct_formula_and_sum_to_one() {
        let ests = [
            (0usize, 1usize, 2.0, 0.3, 0.5, 1.5),
            (2, 3, -1.0, 0.9, 2.0, 0.25),
            (4, 0, 4.0, -2.2, 1.0, 1.0),
        ];
        let f = field_with(&ests, 5, 5);
        let lambda = 1.7;
        let s = smooth_field(&f, &iv(lambda)).unwrap();
        for pi in 0..5 {
            for pj in 0..5 {
                let mut wsum = 0.0;
                let mut num = 0.0;
                for &(i, j, u, _, vu, _) in &ests {
                    let r2 = ((pi as f64 - i as f64).powi(2) + (pj as f64 - j as f64).powi(2))
                        / (2.0 * lambda * lambda);
                    let w = (-r2).exp() / vu;
                    wsum += w;
                    num += u * w;
                }
                // Normalized weights sum to 1 and reproduce the output.
                assert_abs_diff_eq!(
                    (0..3)
                        .map(|k| {
                            let (i, j, _, _, vu, _) = ests[k];
                            let r2 = ((pi as f64 - i as f64).powi(2)
                                + (pj as f64 - j as f64).powi(2))
                                / (2.0 * lambda * lambda);
                            ((-r2).exp() / vu) / wsum
                        })
                        .sum::<f64>(),
                    1.0,
                    epsilon = 1e-12
                );
                assert_abs_diff_eq!(s.u[[1, pi, pj]], num / wsum, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn tiny_bandwidth_returns_own_estimate() {
        let f = field_with(
            &[(1, 1, 2.5, -0.5, 1.0, 1.0), (3, 3, -4.0, 9.0, 1.0, 1.0)],
            5,
            5,
        );
        let s = smooth_field(&f, &iv(1e-3)).unwrap();
        assert_abs_diff_eq!(s.u[[1, 1, 1]], 2.5, epsilon = 1e-6);
        assert_abs_diff_eq!(s.u[[1, 3, 3]], -4.0, epsilon = 1e-6);
        assert_abs_diff_eq!(s.v[[1, 3, 3]], 9.0, epsilon = 1e-6);
    }

    #[test]
    fn unweighted_equals_inverse_variance_for_equal_variances() {
        let f = field_with(
            &[
                (0, 0, 1.0, 2.0, 1.0, 0.25),
                (2, 2, 3.0, -1.0, 1.0, 0.25),
                (4, 4, -2.0, 0.5, 1.0, 0.25),
            ],
            5,
            5,
        );
        let a = smooth_field(&f, &iv(2.0)).unwrap();
        let b = smooth_field(
            &f,
            &SmoothConfig {
                bandwidth: 2.0,
                mode: SmoothMode::Unweighted,
            },
        )
        .unwrap();
        for (x, y) in a.u.iter().zip(b.u.iter()) {
            if x.is_finite() || y.is_finite() {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        for (x, y) in a.v.iter().zip(b.v.iter()) {
            if x.is_finite() || y.is_finite() {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn all_infinite_variances_error() {
        let mut f = field_with(&[(2, 2, 1.0, 1.0, 1.0, 1.0)], 5, 5);
        f.var_u[[1, 2, 2]] = f64::INFINITY;
        f.var_v[[1, 2, 2]] = f64::INFINITY;
        assert!(matches!(
            smooth_field(&f, &iv(1.0)).unwrap_err(),
            Error::NoFiniteVariance { t: 1 }
        ));
    }

    #[test]
    fn tie_break_prefers_smaller_bandwidth() {
        assert_eq!(argmin_bandwidth(&[(8.0, 0.4), (2.0, 0.4)]), 2.0);
        assert_eq!(argmin_bandwidth(&[(2.0, 0.5), (8.0, 0.4)]), 8.0);
        assert_eq!(argmin_bandwidth(&[(4.0, 0.3)]), 4.0);
    }
}
