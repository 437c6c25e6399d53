//! Evaluation machinery: vector differences, one-step conditional-Gaussian
//! prediction with MSPE, the persistence baseline, and window-size
//! cross-validation.

pub mod tables;

pub use tables::{run_table1, run_table2, ExperimentReport, ReportCell, Table1Config, Table2Config};

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covmodel::DriftParams;
use crate::error::{Error, Result};
use crate::gridstore::GridStack;
use crate::linalg;
use crate::scanner::WindField;

/// Euclidean distance between an estimated and a true wind vector.
pub fn vector_difference(u_hat: [f64; 2], u_true: [f64; 2]) -> f64 {
    ((u_hat[0] - u_true[0]).powi(2) + (u_hat[1] - u_true[1]).powi(2)).sqrt()
}

/// Mean squared error over unmasked pixels.
pub fn mspe(predicted: &ArrayView2<f64>, observed: &ArrayView2<f64>, valid: &ArrayView2<bool>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((i, j), &ok) in valid.indexed_iter() {
        if ok {
            let d = predicted[[i, j]] - observed[[i, j]];
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// The naive prediction: frame `t-1` verbatim.
pub fn baseline_persistence(stack: &GridStack, t: usize) -> Result<Array2<f64>> {
    if t == 0 || t >= stack.geometry.n_times {
        return Err(Error::OutOfDomain(format!(
            "persistence prediction at t={t} needs frame t-1"
        )));
    }
    Ok(stack.values.index_axis(ndarray::Axis(0), t - 1).to_owned())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictConfig {
    /// Half-width of the conditioning patch at time `t-1`.
    pub half_width: usize,
    /// Pixels lacking a valid wind borrow the nearest valid estimate within
    /// this radius; beyond it the output pixel is masked.
    pub fallback_radius: usize,
    /// Overrides the per-pixel fitted ranges (required for fields that carry
    /// no range diagnostics, e.g. block-matching estimates).
    pub fixed_alphas: Option<[f64; 2]>,
    /// Condition on the three-slice window ending at `t-1` instead of the
    /// single past frame.
    pub three_slice: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            half_width: 3,
            fallback_radius: 5,
            fixed_alphas: None,
            three_slice: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub mean: Array2<f64>,
    pub variance: Array2<f64>,
    pub valid: Array2<bool>,
}

/// Nearest pixel to `(i, j)` satisfying `pred`, within `radius`; ties break
/// on squared distance then row-major order.
fn nearest_within<F: Fn(usize, usize) -> bool>(
    i: usize,
    j: usize,
    height: usize,
    width: usize,
    radius: usize,
    pred: F,
) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, usize)> = None;
    let r = radius as isize;
    for di in -r..=r {
        for dj in -r..=r {
            let ni = i as isize + di;
            let nj = j as isize + dj;
            if ni < 0 || nj < 0 || ni >= height as isize || nj >= width as isize {
                continue;
            }
            let (ni, nj) = (ni as usize, nj as usize);
            if !pred(ni, nj) {
                continue;
            }
            let d2 = (di * di + dj * dj) as usize;
            let key = (d2, ni, nj);
            if best.map_or(true, |b| key < b) {
                best = Some(key);
            }
        }
    }
    best.map(|(_, ni, nj)| (ni, nj))
}

/// Predicts frame `t` as the conditional mean of `Z(s, t)` given the spatial
/// window at time `t-1`, under the drift model with the wind estimated at
/// time `t-2` (winds at `t-1` would have seen frame `t`).
pub fn predict_frame(
    stack: &GridStack,
    wind: &WindField,
    t: usize,
    cfg: &PredictConfig,
) -> Result<Prediction> {
    let g = &stack.geometry;
    if t < 3 || t >= g.n_times {
        return Err(Error::OutOfDomain(format!(
            "prediction needs 3 <= t < {}, got {t}",
            g.n_times
        )));
    }
    if wind.geometry.height != g.height || wind.geometry.width != g.width {
        return Err(Error::GeometryMismatch(format!(
            "wind field {}x{} vs stack {}x{}",
            wind.geometry.height, wind.geometry.width, g.height, g.width
        )));
    }
    if wind.geometry.n_times <= t - 2 {
        return Err(Error::OutOfDomain(format!(
            "wind field has no slice t-2={}",
            t - 2
        )));
    }
    let hw = cfg.half_width;
    let tw = t - 2;

    let jobs: Vec<(usize, usize)> =
        (0..g.height).flat_map(|i| (0..g.width).map(move |j| (i, j))).collect();
    let rows: Vec<(f64, f64, bool)> = jobs
        .par_iter()
        .map(|&(i, j)| predict_pixel(stack, wind, t, tw, hw, cfg, i, j))
        .collect();

    let mut mean = Array2::from_elem((g.height, g.width), f64::NAN);
    let mut variance = Array2::from_elem((g.height, g.width), f64::NAN);
    let mut valid = Array2::from_elem((g.height, g.width), false);
    for ((i, j), (m, v, ok)) in jobs.into_iter().zip(rows) {
        if ok {
            mean[[i, j]] = m;
            variance[[i, j]] = v;
            valid[[i, j]] = true;
        }
    }
    Ok(Prediction {
        mean,
        variance,
        valid,
    })
}

fn predict_pixel(
    stack: &GridStack,
    wind: &WindField,
    t: usize,
    tw: usize,
    hw: usize,
    cfg: &PredictConfig,
    i: usize,
    j: usize,
) -> (f64, f64, bool) {
    let g = &stack.geometry;
    let miss = (f64::NAN, f64::NAN, false);
    // Conditioning patch must fit the frame.
    if i < hw || j < hw || i + hw >= g.height || j + hw >= g.width {
        return miss;
    }
    // Wind source: this pixel if valid at t-2, else the nearest valid one.
    let src = if wind.valid[[tw, i, j]] {
        Some((i, j))
    } else {
        nearest_within(i, j, g.height, g.width, cfg.fallback_radius, |a, b| {
            wind.valid[[tw, a, b]]
        })
    };
    let Some((wi, wj)) = src else { return miss };
    let u = [wind.u[[tw, wi, wj]], wind.v[[tw, wi, wj]]];

    let alphas = match cfg.fixed_alphas {
        Some(a) => Some(a),
        None => {
            let a1 = wind.alpha1[[tw, wi, wj]];
            let a2 = wind.alpha2[[tw, wi, wj]];
            if a1.is_finite() && a2.is_finite() {
                Some([a1, a2])
            } else {
                nearest_within(i, j, g.height, g.width, cfg.fallback_radius, |a, b| {
                    wind.alpha1[[tw, a, b]].is_finite() && wind.alpha2[[tw, a, b]].is_finite()
                })
                .map(|(ai, aj)| [wind.alpha1[[tw, ai, aj]], wind.alpha2[[tw, ai, aj]]])
            }
        }
    };
    let Some([a1, a2]) = alphas else { return miss };
    let params = DriftParams::new(a1, a2, u);
    if params.validate().is_err() {
        return miss;
    }

    // Conditioning points: the spatial patch at t-1 (optionally the three
    // slices ending at t-1).
    let times: &[usize] = if cfg.three_slice {
        if t < 4 {
            return miss;
        }
        &[t - 3, t - 2, t - 1]
    } else {
        &[t - 1]
    };
    let side = 2 * hw + 1;
    let n = times.len() * side * side;
    let mut pts = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for &tt in times {
        for a in i - hw..=i + hw {
            for b in j - hw..=j + hw {
                if stack.missing[[tt, a, b]] {
                    return miss;
                }
                let c = g.coord(a, b);
                pts.push([c[0], c[1], tt as f64 * g.time_step]);
                z.push(stack.values[[tt, a, b]]);
            }
        }
    }
    let target = {
        let c = g.coord(i, j);
        [c[0], c[1], t as f64 * g.time_step]
    };

    let corr = |p: &[f64; 3], q: &[f64; 3]| -> f64 {
        let h = q[2] - p[2];
        let ex = q[0] - p[0] - params.u[0] * h;
        let ey = q[1] - p[1] - params.u[1] * h;
        let s = (ex * ex + ey * ey) / (params.alpha1 * params.alpha1)
            + h * h / (params.alpha2 * params.alpha2);
        params.sigma2 * (-s.sqrt()).exp()
    };

    let mut sigma = Array2::zeros((n, n));
    for a in 0..n {
        for b in 0..n {
            sigma[[a, b]] = corr(&pts[a], &pts[b]);
        }
    }
    let cross: Vec<f64> = pts.iter().map(|p| corr(p, &target)).collect();

    let Ok(l) = linalg::cholesky_lower(sigma) else {
        return miss;
    };
    let mut w = z;
    linalg::solve_lower_inplace(&l, &mut w);
    let mut m = cross;
    linalg::solve_lower_inplace(&l, &mut m);
    let pred: f64 = m.iter().zip(&w).map(|(a, b)| a * b).sum();
    let var = params.sigma2 - m.iter().map(|a| a * a).sum::<f64>();
    (pred, var, pred.is_finite() && var.is_finite())
}

/// Window-size cross-validation: estimate winds from the first three frames,
/// predict the fourth, keep the MSPE-minimizing size (ties to the smaller).
pub struct CvOutcome {
    pub chosen_size: usize,
    pub report: ExperimentReport,
}

pub fn cv_window_size(
    stack: &GridStack,
    candidate_sizes: &[usize],
    scan_config: &crate::scanner::ScanConfig,
    fallback_radius: usize,
) -> Result<CvOutcome> {
    if candidate_sizes.is_empty() {
        return Err(Error::Config("no candidate window sizes".into()));
    }
    if stack.geometry.n_times < 4 {
        return Err(Error::OutOfDomain(
            "window-size cross-validation needs at least 4 frames".into(),
        ));
    }
    let mut sizes: Vec<usize> = candidate_sizes.to_vec();
    sizes.sort_unstable();
    let mut cells = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for &size in &sizes {
        if size % 2 == 0 {
            return Err(Error::Config(format!("window size {size} must be odd")));
        }
        let hw = size / 2;
        let t0 = std::time::Instant::now();
        let field = crate::scanner::scan(stack, hw, 1..=1, scan_config, None)?;
        let cfg = PredictConfig {
            half_width: hw,
            fallback_radius,
            fixed_alphas: None,
            three_slice: false,
        };
        let pred = predict_frame(stack, &field, 3, &cfg)?;
        let observed = stack.values.index_axis(ndarray::Axis(0), 3);
        let score = mspe(&pred.mean.view(), &observed, &pred.valid.view());
        let runtime = t0.elapsed().as_secs_f64();
        cells.push(ReportCell {
            description: format!("size={size} mspe"),
            mean: score,
            sd: 0.0,
            n: 1,
            runtime_s: runtime,
            degenerate: true,
        });
        if best.map_or(true, |(_, b)| score < b) {
            best = Some((size, score));
        }
    }
    let (chosen_size, _) = best.expect("at least one candidate");
    Ok(CvOutcome {
        chosen_size,
        report: ExperimentReport {
            metric: "mspe".into(),
            cells,
            config_hash: crate::util::config_hash(&(candidate_sizes, fallback_radius)),
            seed: 0,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridstore::{GridGeometry, GridStack};
    use crate::scanner::{Method, Provenance};
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    #[test]
    fn vector_difference_basics() {
        assert_eq!(vector_difference([1.0, 2.0], [1.0, 2.0]), 0.0);
        assert_eq!(vector_difference([4.0, 6.0], [1.0, 2.0]), 5.0);
        assert_eq!(vector_difference([1.5, 2.0], [1.0, 2.0]), 0.5);
    }

    #[test]
    fn mspe_basics_and_mask_stability() {
        let p = Array2::from_elem((3, 3), 1.5);
        let o = Array2::from_elem((3, 3), 1.0);
        let all = Array2::from_elem((3, 3), true);
        assert_abs_diff_eq!(mspe(&p.view(), &o.view(), &all.view()), 0.25, epsilon = 1e-15);
        assert_eq!(mspe(&o.view(), &o.view(), &all.view()), 0.0);
        // Masking one pixel with a wild value changes nothing else.
        let mut p2 = p.clone();
        p2[[1, 1]] = 1e9;
        let mut mask = all.clone();
        mask[[1, 1]] = false;
        assert_abs_diff_eq!(
            mspe(&p2.view(), &o.view(), &mask.view()),
            0.25,
            epsilon = 1e-15
        );
    }

    fn truth_field(g: &GridGeometry, u: [f64; 2], alphas: Option<[f64; 2]>) -> WindField {
        let mut f = WindField::empty(
            g.clone(),
            Provenance {
                method: Method::Truth,
                half_width: 0,
                config_hash: "t".into(),
            },
        );
        for t in 0..g.n_times {
            for i in 0..g.height {
                for j in 0..g.width {
                    f.u[[t, i, j]] = u[0];
                    f.v[[t, i, j]] = u[1];
                    f.var_u[[t, i, j]] = 1.0;
                    f.var_v[[t, i, j]] = 1.0;
                    f.valid[[t, i, j]] = true;
                    if let Some([a1, a2]) = alphas {
                        f.alpha1[[t, i, j]] = a1;
                        f.alpha2[[t, i, j]] = a2;
                    }
                }
            }
        }
        f
    }

    #[test]
    fn persistence_trivials() {
        let mut values = Array3::zeros((4, 3, 3));
        for t in 0..4 {
            for i in 0..3 {
                for j in 0..3 {
                    values[[t, i, j]] = (i + j) as f64 + t as f64;
                }
            }
        }
        let stack = GridStack::new(GridGeometry::new(3, 3, 4), values).unwrap();
        let base = baseline_persistence(&stack, 3).unwrap();
        let obs = stack.values.index_axis(ndarray::Axis(0), 3);
        let all = Array2::from_elem((3, 3), true);
        // Frame t = frame t-1 + 1 everywhere, so persistence MSPE is 1.
        assert_abs_diff_eq!(mspe(&base.view(), &obs, &all.view()), 1.0, epsilon = 1e-14);

        let static_stack = GridStack::new(
            GridGeometry::new(3, 3, 4),
            Array3::from_shape_fn((4, 3, 3), |(_, i, j)| (i * 3 + j) as f64),
        )
        .unwrap();
        let base = baseline_persistence(&static_stack, 3).unwrap();
        let obs = static_stack.values.index_axis(ndarray::Axis(0), 3);
        assert_eq!(mspe(&base.view(), &obs, &all.view()), 0.0);
    }

    /// Single conditioning point: prediction rho*z, variance 1 - rho^2.
    #[test]
    fn single_point_conditioning() {
        // Window half-width 0 => one conditioning pixel directly beneath the
        // target; zero wind makes rho = exp(-1/alpha2).
        let g = GridGeometry::new(5, 5, 4);
        let mut values = Array3::zeros((4, 5, 5));
        values[[2, 2, 2]] = 1.7; // conditioning datum at t-1
        let stack = GridStack::new(g.clone(), values).unwrap();
        let wind = truth_field(&g, [0.0, 0.0], Some([1.0, 2.0]));
        let cfg = PredictConfig {
            half_width: 0,
            ..Default::default()
        };
        let pred = predict_frame(&stack, &wind, 3, &cfg).unwrap();
        let rho = (-0.5f64).exp();
        // Jitter shifts the conditioning variance to 1 + 1e-8.
        let expect_mean = rho * 1.7 / (1.0 + linalg::CHOL_JITTER);
        let expect_var = 1.0 - rho * rho / (1.0 + linalg::CHOL_JITTER);
        assert_abs_diff_eq!(pred.mean[[2, 2]], expect_mean, epsilon = 1e-10);
        assert_abs_diff_eq!(pred.variance[[2, 2]], expect_var, epsilon = 1e-10);
        assert!(pred.valid[[2, 2]]);
    }

    /// Correlation tending to one along the drift line pins the prediction to
    /// the drift-aligned pixel's value.
    #[test]
    fn drift_aligned_limit_copies_the_source_pixel() {
        let g = GridGeometry::new(7, 7, 4);
        let mut values = Array3::zeros((4, 7, 7));
        for i in 0..7 {
            for j in 0..7 {
                values[[2, i, j]] = (i as f64) * 0.3 - (j as f64) * 0.7;
            }
        }
        let stack = GridStack::new(g.clone(), values).unwrap();
        // Wind (1, 0) px/frame: target (i, 3) maps onto pixel (i, 2) at t-1.
        let wind = truth_field(&g, [1.0, 0.0], Some([1e-4, 1e6]));
        let cfg = PredictConfig {
            half_width: 2,
            ..Default::default()
        };
        let pred = predict_frame(&stack, &wind, 3, &cfg).unwrap();
        assert!(pred.valid[[3, 3]]);
        assert_abs_diff_eq!(pred.mean[[3, 3]], stack.values[[2, 3, 2]], epsilon = 1e-3);
        assert!(pred.variance[[3, 3]] > 0.0 && pred.variance[[3, 3]] < 1e-3);
    }

    #[test]
    fn prediction_variance_in_unit_interval() {
        let g = GridGeometry::new(9, 9, 4);
        let values = Array3::from_shape_fn((4, 9, 9), |(t, i, j)| {
            ((t * 31 + i * 7 + j * 3) % 13) as f64 * 0.2 - 1.0
        });
        let stack = GridStack::new(g.clone(), values).unwrap();
        let wind = truth_field(&g, [0.5, -0.3], Some([2.0, 3.0]));
        let cfg = PredictConfig {
            half_width: 2,
            ..Default::default()
        };
        let pred = predict_frame(&stack, &wind, 3, &cfg).unwrap();
        let mut checked = 0;
        for ((i, j), &ok) in pred.valid.indexed_iter() {
            if ok {
                let v = pred.variance[[i, j]];
                assert!(v > 0.0 && v <= 1.0, "variance {v} at ({i},{j})");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn boundary_pixels_are_masked() {
        let g = GridGeometry::new(7, 7, 4);
        let stack =
            GridStack::new(g.clone(), Array3::from_shape_fn((4, 7, 7), |(t, i, j)| {
                (t + i + j) as f64 * 0.1
            }))
            .unwrap();
        let wind = truth_field(&g, [0.0, 0.0], Some([1.0, 1.0]));
        let cfg = PredictConfig {
            half_width: 2,
            ..Default::default()
        };
        let pred = predict_frame(&stack, &wind, 3, &cfg).unwrap();
        assert!(!pred.valid[[0, 0]]);
        assert!(!pred.valid[[1, 6]]);
        assert!(pred.valid[[2, 2]]);
    }

    #[test]
    fn strict_policy_masks_pixels_without_wind() {
        let g = GridGeometry::new(9, 9, 4);
        let stack = GridStack::new(
            g.clone(),
            Array3::from_shape_fn((4, 9, 9), |(t, i, j)| ((t * i + j) % 5) as f64 * 0.3),
        )
        .unwrap();
        let mut wind = truth_field(&g, [0.0, 0.0], Some([1.0, 1.0]));
        // Invalidate everything except one corner-ish pixel at t-2 = 1.
        for i in 0..9 {
            for j in 0..9 {
                wind.valid[[1, i, j]] = false;
            }
        }
        wind.valid[[1, 2, 2]] = true;
        let cfg = PredictConfig {
            half_width: 2,
            fallback_radius: 2,
            ..Default::default()
        };
        let pred = predict_frame(&stack, &wind, 3, &cfg).unwrap();
        // Within radius 2 of (2,2): predicted; far away: masked.
        assert!(pred.valid[[3, 3]]);
        assert!(!pred.valid[[6, 6]]);
    }

    /// Pure-drift noiseless shift: model prediction beats persistence.
    #[test]
    fn drifting_pattern_beats_persistence() {
        let g = GridGeometry::new(16, 16, 4);
        let mut values = Array3::zeros((4, 16, 16));
        // Smooth deterministic texture drifting 3 px in x per frame.
        let tex = |i: f64, j: f64| (0.8 * i).sin() + (0.5 * j).cos() + 0.3 * (0.2 * (i + j)).sin();
        for t in 0..4usize {
            for i in 0..16 {
                for j in 0..16 {
                    values[[t, i, j]] = tex(i as f64, j as f64 - 3.0 * t as f64);
                }
            }
        }
        let stack = GridStack::new(g.clone(), values).unwrap();
        let wind = truth_field(&g, [3.0, 0.0], Some([4.0, 10.0]));
        let cfg = PredictConfig {
            half_width: 3,
            ..Default::default()
        };
        let pred = predict_frame(&stack, &wind, 3, &cfg).unwrap();
        let obs = stack.values.index_axis(ndarray::Axis(0), 3);
        let model = mspe(&pred.mean.view(), &obs, &pred.valid.view());
        let base = baseline_persistence(&stack, 3).unwrap();
        let baseline = mspe(&base.view(), &obs, &pred.valid.view());
        assert!(
            model < baseline,
            "model {model} should beat persistence {baseline}"
        );
    }

    #[test]
    fn cv_selects_argmin_and_singleton_passes_through() {
        let p = DriftParams::new(2.0, 4.0, [1.0, 0.0]);
        let sim = crate::simulator::SimConfig {
            grid: GridGeometry::new(17, 17, 4),
            params: p,
            seed: 5,
        };
        let spec = crate::simulator::WindFieldSpec::Constant { u: [1.0, 0.0] };
        let (stack, _) = crate::simulator::simulate_domain(&spec, &sim, false).unwrap();
        let mut sc = crate::scanner::ScanConfig::default();
        sc.budget = 300;
        sc.stride = 4;
        let out = cv_window_size(&stack, &[7, 11], &sc, 5).unwrap();
        assert_eq!(out.report.cells.len(), 2);
        let best = out
            .report
            .cells
            .iter()
            .min_by(|a, b| a.mean.partial_cmp(&b.mean).unwrap())
            .unwrap();
        assert!(best.description.contains(&format!("size={}", out.chosen_size)));

        let single = cv_window_size(&stack, &[9], &sc, 5).unwrap();
        assert_eq!(single.chosen_size, 9);
        assert_eq!(single.report.cells.len(), 1);
    }
}
