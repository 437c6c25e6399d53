//! Derived Motion Winds baseline: SSD block matching backward and forward in
//! time, mean displacement, nested tracking over sub-windows, and dominant-
//! cluster averaging via DBSCAN.

pub mod dbscan;

pub use dbscan::ClusterDiagnostics;

use std::ops::RangeInclusive;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridstore::GridStack;
use crate::scanner::{Method, Provenance, WindField};
use crate::util::config_hash;

/// Block-matching configuration.
///
/// `inner_size + 2*search_radius <= outer_size` is deliberately not required:
/// the inner window slides up to `search_radius` pixels in the comparison
/// frame regardless of the outer scene, with candidates clipped to the frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DmwaConfig {
    pub outer_size: usize,
    pub inner_size: usize,
    pub search_radius: usize,
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
    /// Nested tracking + DBSCAN when true; a single centered mean
    /// displacement per scene when false.
    pub nested: bool,
}

impl Default for DmwaConfig {
    fn default() -> Self {
        DmwaConfig {
            outer_size: 15,
            inner_size: 5,
            search_radius: 4,
            // Mean displacements live on the half-integer lattice, so any
            // eps below 0.5 clusters exactly-agreeing vectors; the dominant
            // cluster then averages to the modal displacement.
            dbscan_eps: 0.4,
            dbscan_min_pts: 4,
            nested: true,
        }
    }
}

impl DmwaConfig {
    /// Settings used for the single-window simulation comparisons: a 3x3
    /// inner scene that can move up to 4 pixels in all directions.
    pub fn simulation_parity(outer_size: usize) -> Self {
        DmwaConfig {
            outer_size,
            inner_size: 3,
            search_radius: 4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_size == 0 || self.outer_size == 0 || self.search_radius == 0 {
            return Err(Error::InvalidParams("dmwa sizes must be >= 1".into()));
        }
        if self.inner_size % 2 == 0 || self.outer_size % 2 == 0 {
            return Err(Error::InvalidParams(
                "dmwa window sizes must be odd".into(),
            ));
        }
        if self.inner_size > self.outer_size {
            return Err(Error::InvalidParams(
                "inner window larger than outer scene".into(),
            ));
        }
        if !(self.dbscan_eps > 0.0) || self.dbscan_min_pts == 0 {
            return Err(Error::InvalidParams("bad dbscan settings".into()));
        }
        Ok(())
    }
}

/// An estimated displacement in pixel units `(x, y)`; single-leg matches are
/// integers, mean displacements half-integers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Displacement {
    pub v: [f64; 2],
}

/// Integer-shift SSD match of the inner window at `(center, t_from)` against
/// frame `t_to`.
///
/// Candidate shifts satisfy the infinity-norm radius bound and keep the
/// shifted window inside the frame; ties break toward the smallest Euclidean
/// norm, then lexicographically on `(x, y)`.
pub fn ssd_match(
    stack: &GridStack,
    center: [usize; 2],
    t_from: usize,
    t_to: usize,
    inner_size: usize,
    search_radius: usize,
) -> Result<Displacement> {
    let g = &stack.geometry;
    let half = inner_size / 2;
    let [ci, cj] = center;
    if t_from >= g.n_times || t_to >= g.n_times {
        return Err(Error::OutOfDomain(format!(
            "frames {t_from},{t_to} outside 0..{}",
            g.n_times
        )));
    }
    if ci < half || cj < half || ci + half >= g.height || cj + half >= g.width {
        return Err(Error::OutOfDomain(format!(
            "inner window at ({ci},{cj}) exceeds frame"
        )));
    }
    let r = search_radius as isize;
    let mut best: Option<(f64, i64, i64, i64)> = None; // (ssd, |u|^2, x, y)
    for dy in -r..=r {
        for dx in -r..=r {
            let ni = ci as isize + dy;
            let nj = cj as isize + dx;
            if ni < half as isize
                || nj < half as isize
                || ni + half as isize >= g.height as isize
                || nj + half as isize >= g.width as isize
            {
                continue;
            }
            let mut ssd = 0.0;
            for a in 0..inner_size {
                for b in 0..inner_size {
                    let i0 = ci - half + a;
                    let j0 = cj - half + b;
                    let i1 = (ni - half as isize) as usize + a;
                    let j1 = (nj - half as isize) as usize + b;
                    if stack.missing[[t_from, i0, j0]] || stack.missing[[t_to, i1, j1]] {
                        return Err(Error::MissingData {
                            t: t_from,
                            i: i0,
                            j: j0,
                        });
                    }
                    let d = stack.values[[t_from, i0, j0]] - stack.values[[t_to, i1, j1]];
                    ssd += d * d;
                }
            }
            let key = (ssd, (dx * dx + dy * dy) as i64, dx as i64, dy as i64);
            let better = match &best {
                None => true,
                Some(cur) => {
                    key.0 < cur.0
                        || (key.0 == cur.0
                            && (key.1, key.2, key.3) < (cur.1, cur.2, cur.3))
                }
            };
            if better {
                best = Some(key);
            }
        }
    }
    match best {
        Some((_, _, x, y)) => Ok(Displacement {
            v: [x as f64, y as f64],
        }),
        None => Err(Error::OutOfDomain(
            "no candidate shift keeps the window inside the frame".into(),
        )),
    }
}

/// Mean of the backward and forward displacement legs, both centered on the
/// target at time `t`: the backward leg tracks the target into frame `t-1`
/// (reported as the `t-1 -> t` displacement), the forward into `t+1`.
pub fn mean_displacement(
    stack: &GridStack,
    center: [usize; 2],
    t: usize,
    config: &DmwaConfig,
) -> Result<Displacement> {
    if t == 0 || t + 1 >= stack.geometry.n_times {
        return Err(Error::OutOfDomain(format!(
            "mean displacement at t={t} needs both neighbors"
        )));
    }
    let back = ssd_match(
        stack,
        center,
        t,
        t - 1,
        config.inner_size,
        config.search_radius,
    )?;
    let fwd = ssd_match(
        stack,
        center,
        t,
        t + 1,
        config.inner_size,
        config.search_radius,
    )?;
    Ok(Displacement {
        v: [
            0.5 * (-back.v[0] + fwd.v[0]),
            0.5 * (-back.v[1] + fwd.v[1]),
        ],
    })
}

/// Nested tracking: a mean displacement for every inner-window position fully
/// inside the outer scene, clustered with DBSCAN; the estimate is the mean of
/// the largest cluster (noise excluded), falling back to the mean of all
/// vectors when no cluster forms.
pub fn nested_track(
    stack: &GridStack,
    scene_center: [usize; 2],
    t: usize,
    config: &DmwaConfig,
) -> Result<(Displacement, ClusterDiagnostics)> {
    config.validate()?;
    let g = &stack.geometry;
    let half_out = config.outer_size / 2;
    let half_in = config.inner_size / 2;
    let [ci, cj] = scene_center;
    if ci < half_out || cj < half_out || ci + half_out >= g.height || cj + half_out >= g.width
    {
        return Err(Error::OutOfDomain(format!(
            "outer scene at ({ci},{cj}) exceeds frame"
        )));
    }
    let mut vectors = Vec::new();
    for i in ci - half_out + half_in..=ci + half_out - half_in {
        for j in cj - half_out + half_in..=cj + half_out - half_in {
            let d = mean_displacement(stack, [i, j], t, config)?;
            vectors.push(d.v);
        }
    }
    let (mean, diag) =
        dbscan::dominant_cluster_mean(&vectors, config.dbscan_eps, config.dbscan_min_pts);
    Ok((Displacement { v: mean }, diag))
}

/// Slides outer scenes across the grid, producing a wind field in length/time
/// units. DMWA carries no uncertainty measure, so variance maps hold a
/// uniform sentinel of 1 and smoothing of this field should be unweighted.
pub fn dmwa_scan(
    stack: &GridStack,
    t_range: RangeInclusive<usize>,
    config: &DmwaConfig,
    stride: usize,
) -> Result<WindField> {
    config.validate()?;
    let g = stack.geometry.clone();
    let (t0, t1) = (*t_range.start(), *t_range.end());
    if t0 < 1 || t1 + 2 > g.n_times {
        return Err(Error::OutOfDomain(format!(
            "t_range {t0}..={t1} needs neighbors inside 0..{}",
            g.n_times
        )));
    }
    let half_out = config.outer_size / 2;
    let centers = crate::scanner::admissible_centers(&g, half_out, stride.max(1));
    if centers.is_empty() {
        return Err(Error::EmptyScan);
    }
    let mut jobs = Vec::new();
    for t in t0..=t1 {
        for &(i, j) in &centers {
            jobs.push((t, i, j));
        }
    }
    let results: Vec<Result<Displacement>> = jobs
        .par_iter()
        .map(|&(t, i, j)| {
            if config.nested {
                nested_track(stack, [i, j], t, config).map(|(d, _)| d)
            } else {
                mean_displacement(stack, [i, j], t, config)
            }
        })
        .collect();

    let mut field = WindField::empty(
        g.clone(),
        Provenance {
            method: Method::Dmwa,
            half_width: half_out,
            config_hash: config_hash(&(config, stride)),
        },
    );
    let scale = g.pixel_size / g.time_step; // pixels/frame -> length/time
    for ((t, i, j), r) in jobs.into_iter().zip(results) {
        if let Ok(d) = r {
            field.u[[t, i, j]] = d.v[0] * scale;
            field.v[[t, i, j]] = d.v[1] * scale;
            field.var_u[[t, i, j]] = 1.0;
            field.var_v[[t, i, j]] = 1.0;
            field.valid[[t, i, j]] = true;
        }
    }
    if field.n_valid() == 0 {
        return Err(Error::EmptyScan);
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridstore::{GridGeometry, GridStack};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    /// Frames where frame 1 shifts frame 0 by `(dx, dy)` pixels and frame 2
    /// shifts frame 1 again; filled with smooth deterministic texture.
    fn shifted_stack(h: usize, w: usize, dx: isize, dy: isize) -> GridStack {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(404);
        let pad = 40usize;
        let base: Vec<Vec<f64>> = (0..h + 2 * pad)
            .map(|_| (0..w + 2 * pad).map(|_| rng.random::<f64>()).collect())
            .collect();
        let mut values = Array3::zeros((3, h, w));
        for t in 0..3isize {
            for i in 0..h {
                for j in 0..w {
                    // Content moves by +(dx,dy) per frame: frame t at (i,j)
                    // shows base at (i - dy t, j - dx t).
                    let bi = (i as isize - dy * t + pad as isize) as usize;
                    let bj = (j as isize - dx * t + pad as isize) as usize;
                    values[[t as usize, i, j]] = base[bi][bj];
                }
            }
        }
        GridStack::new(GridGeometry::new(w, h, 3), values).unwrap()
    }

    #[test]
    fn exact_translation_is_recovered() {
        let s = shifted_stack(11, 11, 2, 1);
        let d = ssd_match(&s, [5, 5], 0, 1, 3, 4).unwrap();
        assert_eq!(d.v, [2.0, 1.0]);
    }

    #[test]
    fn identical_frames_give_zero_by_tie_break() {
        let s = shifted_stack(11, 11, 0, 0);
        let d = ssd_match(&s, [5, 5], 0, 1, 3, 4).unwrap();
        assert_eq!(d.v, [0.0, 0.0]);
    }

    #[test]
    fn handcrafted_ssd_table_oracle() {
        // Three identical rows so only x-shifts exist for a 3x3 window on a
        // 3x5 frame. Row pattern: frame 0 = [1,5,2,3,7], frame 1 =
        // [5,2,4,7,1]. Template = columns 1..=3 of frame 0 = [5,2,3]; per-row
        // SSDs over the exhaustive shift table:
        //   -1: vs [5,2,4] -> 0+0+1  = 1
        //    0: vs [2,4,7] -> 9+4+16 = 29
        //   +1: vs [4,7,1] -> 1+25+4 = 30
        // so the full-window SSDs are (3, 87, 90) and -1 wins.
        let mut values = Array3::zeros((2, 3, 5));
        for i in 0..3 {
            for (j, v) in [1.0, 5.0, 2.0, 3.0, 7.0].iter().enumerate() {
                values[[0, i, j]] = *v;
            }
            for (j, v) in [5.0, 2.0, 4.0, 7.0, 1.0].iter().enumerate() {
                values[[1, i, j]] = *v;
            }
        }
        let s = GridStack::new(GridGeometry::new(5, 3, 2), values).unwrap();
        let d = ssd_match(&s, [1, 2], 0, 1, 3, 1).unwrap();
        assert_eq!(d.v, [-1.0, 0.0]);
    }

    #[test]
    fn shifting_the_comparison_frame_shifts_the_match() {
        let s = shifted_stack(15, 15, 1, 2);
        let base = ssd_match(&s, [7, 7], 0, 1, 3, 4).unwrap();
        assert_eq!(base.v, [1.0, 2.0]);
        // Shift frame 1's content by one extra pixel in x.
        let s2 = shifted_stack(15, 15, 2, 1);
        let d2 = ssd_match(&s2, [7, 7], 0, 1, 3, 4).unwrap();
        assert_eq!(d2.v, [2.0, 1.0]);
    }

    #[test]
    fn mean_displacement_averages_the_legs() {
        // Uniform motion: both legs equal, mean equals the motion.
        let s = shifted_stack(13, 13, 2, 2);
        let d = mean_displacement(&s, [6, 6], 1, &DmwaConfig::simulation_parity(13)).unwrap();
        assert_eq!(d.v, [2.0, 2.0]);
    }

    #[test]
    fn stationary_scene_has_zero_mean_displacement() {
        let s = shifted_stack(9, 9, 0, 0);
        let d = mean_displacement(&s, [4, 4], 1, &DmwaConfig::simulation_parity(9)).unwrap();
        assert_eq!(d.v, [0.0, 0.0]);
    }

    #[test]
    fn opposite_legs_cancel() {
        // Frame 0 and frame 2 both equal frame 1 shifted by (+1, 0): the
        // backward leg is (-1,0), the forward leg (+1,0), mean (0,0).
        let s0 = shifted_stack(11, 11, 1, 0);
        let mut values = Array3::zeros((3, 11, 11));
        for i in 0..11 {
            for j in 0..11 {
                values[[0, i, j]] = s0.values[[1, i, j]];
                values[[1, i, j]] = s0.values[[0, i, j]];
                values[[2, i, j]] = s0.values[[1, i, j]];
            }
        }
        let s = GridStack::new(GridGeometry::new(11, 11, 3), values).unwrap();
        let d = mean_displacement(&s, [5, 5], 1, &DmwaConfig::simulation_parity(11)).unwrap();
        assert_eq!(d.v, [0.0, 0.0]);
    }

    #[test]
    fn nested_track_recovers_uniform_motion() {
        let s = shifted_stack(15, 15, 1, 2);
        let cfg = DmwaConfig::simulation_parity(15);
        let (d, diag) = nested_track(&s, [7, 7], 1, &cfg).unwrap();
        assert_eq!(d.v, [1.0, 2.0]);
        // Templates near the frame edge have their true match clipped out of
        // the search set, so the dominant cluster holds most but not all
        // vectors.
        assert!(diag.largest_size * 2 > diag.n_vectors);
        assert!(!diag.fallback);
    }

    #[test]
    fn scan_outputs_are_half_integers_in_range(){
        let s = shifted_stack(21, 21, 1, 1);
        let cfg = DmwaConfig::simulation_parity(7);
        let field = dmwa_scan(&s, 1..=1, &cfg, 2).unwrap();
        for ((t, i, j), &ok) in field.valid.indexed_iter() {
            if ok {
                for comp in [field.u[[t, i, j]], field.v[[t, i, j]]] {
                    let half_units = comp * 2.0;
                    assert_eq!(half_units.fract(), 0.0, "not a half-integer: {comp}");
                    assert!(comp.abs() <= cfg.search_radius as f64);
                }
            }
        }
    }

    #[test]
    fn scene_out_of_frame_errors() {
        let s = shifted_stack(9, 9, 0, 0);
        assert!(matches!(
            nested_track(&s, [1, 1], 1, &DmwaConfig::simulation_parity(9)).unwrap_err(),
            Error::OutOfDomain(_)
        ));
    }
}
