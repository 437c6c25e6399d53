//! Gridded data model: geometry, image stacks, and target windows.
//!
//! Conventions used everywhere downstream:
//! - values are indexed `[t][i][j]` (time-major, then row-major space);
//! - pixel `(i, j)` sits at spatial coordinate `origin + (j*pixel_size, i*pixel_size)`;
//! - a target window is a `(2*half_width+1)^2` spatial patch crossed with the
//!   three consecutive times `{t-1, t, t+1}`, flattened time-major then
//!   row-major.

mod format;

pub use format::{read_gridstack, read_gridstack_csv, write_csv_dump, write_gridstack};

use ndarray::Array3;

use crate::error::{Error, Result};

/// Regular-grid geometry and resolution metadata.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridGeometry {
    pub width: usize,
    pub height: usize,
    pub n_times: usize,
    pub pixel_size: f64,
    pub time_step: f64,
    pub origin: [f64; 2],
}

impl GridGeometry {
    pub fn new(width: usize, height: usize, n_times: usize) -> Self {
        GridGeometry {
            width,
            height,
            n_times,
            pixel_size: 1.0,
            time_step: 1.0,
            origin: [0.0, 0.0],
        }
    }

    pub fn with_resolution(mut self, pixel_size: f64, time_step: f64) -> Self {
        self.pixel_size = pixel_size;
        self.time_step = time_step;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.height < 1 || self.n_times < 1 {
            return Err(Error::BadGeometry(format!(
                "dimensions must be >= 1, got {}x{}x{}",
                self.n_times, self.height, self.width
            )));
        }
        if !(self.pixel_size > 0.0) || !(self.time_step > 0.0) {
            return Err(Error::BadGeometry(format!(
                "pixel_size and time_step must be > 0, got {} and {}",
                self.pixel_size, self.time_step
            )));
        }
        if !self.origin.iter().all(|v| v.is_finite()) {
            return Err(Error::BadGeometry("origin must be finite".into()));
        }
        Ok(())
    }

    /// Spatial coordinate of pixel `(i, j)` in length units.
    #[inline]
    pub fn coord(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.origin[0] + j as f64 * self.pixel_size,
            self.origin[1] + i as f64 * self.pixel_size,
        ]
    }

    pub fn n_values(&self) -> usize {
        self.n_times * self.height * self.width
    }
}

/// A T x H x W stack of scalar observations plus a missingness mask.
#[derive(Debug, Clone)]
pub struct GridStack {
    pub geometry: GridGeometry,
    pub values: Array3<f64>,
    pub missing: Array3<bool>,
}

impl GridStack {
    /// Builds a stack with no missing values, validating finiteness.
    pub fn new(geometry: GridGeometry, values: Array3<f64>) -> Result<Self> {
        let missing = Array3::from_elem(values.raw_dim(), false);
        Self::with_mask(geometry, values, missing)
    }

    pub fn with_mask(
        geometry: GridGeometry,
        values: Array3<f64>,
        missing: Array3<bool>,
    ) -> Result<Self> {
        geometry.validate()?;
        let want = (geometry.n_times, geometry.height, geometry.width);
        if values.dim() != want {
            return Err(Error::GeometryMismatch(format!(
                "values shape {:?} does not match geometry {:?}",
                values.dim(),
                want
            )));
        }
        if missing.dim() != want {
            return Err(Error::GeometryMismatch(format!(
                "mask shape {:?} does not match geometry {:?}",
                missing.dim(),
                want
            )));
        }
        for ((t, i, j), v) in values.indexed_iter() {
            if !missing[[t, i, j]] && !v.is_finite() {
                return Err(Error::NonFinite { t, i, j });
            }
        }
        Ok(GridStack {
            geometry,
            values,
            missing,
        })
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().any(|&m| m)
    }
}

/// Index set of one local estimation window: a square spatial patch at three
/// consecutive times, centered at `(center, t)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetWindow {
    pub center: [usize; 2],
    pub t: usize,
    pub half_width: usize,
    /// `(t, i, j)` triplets in canonical (time-major, row-major) order.
    pub members: Vec<(usize, usize, usize)>,
}

impl TargetWindow {
    /// Builds the window, rejecting any placement whose spatial patch or time
    /// triple leaves the grid.
    pub fn new(
        geometry: &GridGeometry,
        center: [usize; 2],
        t: usize,
        half_width: usize,
    ) -> Result<Self> {
        let [ci, cj] = center;
        let side = 2 * half_width + 1;
        if t < 1 || t + 1 >= geometry.n_times {
            return Err(Error::OutOfDomain(format!(
                "window at t={t} needs times {}..={} inside 0..{}",
                t as isize - 1,
                t + 1,
                geometry.n_times
            )));
        }
        if ci < half_width
            || cj < half_width
            || ci + half_width >= geometry.height
            || cj + half_width >= geometry.width
        {
            return Err(Error::OutOfDomain(format!(
                "{side}x{side} patch at ({ci},{cj}) exceeds {}x{} grid",
                geometry.height, geometry.width
            )));
        }
        let mut members = Vec::with_capacity(3 * side * side);
        for tt in t - 1..=t + 1 {
            for i in ci - half_width..=ci + half_width {
                for j in cj - half_width..=cj + half_width {
                    members.push((tt, i, j));
                }
            }
        }
        Ok(TargetWindow {
            center,
            t,
            half_width,
            members,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Member coordinates as `(x, y, time)` in length/time units.
    pub fn positions(&self, geometry: &GridGeometry) -> Vec<[f64; 3]> {
        self.members
            .iter()
            .map(|&(t, i, j)| {
                let [x, y] = geometry.coord(i, j);
                [x, y, t as f64 * geometry.time_step]
            })
            .collect()
    }
}

/// Extracts the window's data vector in canonical ordering.
///
/// Rejects windows that leave the grid or touch a missing value; the model
/// never fits with gaps.
pub fn slice_window(
    stack: &GridStack,
    center: [usize; 2],
    t: usize,
    half_width: usize,
) -> Result<(TargetWindow, Vec<f64>)> {
    let window = TargetWindow::new(&stack.geometry, center, t, half_width)?;
    let mut data = Vec::with_capacity(window.len());
    for &(tt, i, j) in &window.members {
        if stack.missing[[tt, i, j]] {
            return Err(Error::MissingData { t: tt, i, j });
        }
        data.push(stack.values[[tt, i, j]]);
    }
    Ok((window, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn stack(t: usize, h: usize, w: usize) -> GridStack {
        let geom = GridGeometry::new(w, h, t);
        let values =
            Array3::from_shape_fn((t, h, w), |(a, b, c)| (a * h * w + b * w + c) as f64);
        GridStack::new(geom, values).unwrap()
    }

    #[test]
    fn full_grid_window_is_the_whole_stack() {
        let s = stack(3, 7, 7);
        let (win, data) = slice_window(&s, [3, 3], 1, 3).unwrap();
        assert_eq!(win.len(), 147);
        assert_eq!(data.len(), 147);
        // Canonical order walks the raw layout here, so data is 0..147.
        assert_eq!(data[0], 0.0);
        assert_eq!(data[146], 146.0);
    }

    #[test]
    fn corner_center_is_out_of_domain() {
        let s = stack(3, 7, 7);
        let err = slice_window(&s, [0, 0], 1, 3).unwrap_err();
        assert!(matches!(err, Error::OutOfDomain(_)));
    }

    #[test]
    fn ordering_starts_at_previous_time_top_left() {
        let s = stack(5, 15, 15);
        let (win, data) = slice_window(&s, [7, 7], 2, 2).unwrap();
        assert_eq!(win.len(), 75);
        assert_eq!(data[0], s.values[[1, 5, 5]]);
    }

    #[test]
    fn missing_value_in_window_is_rejected() {
        let mut s = stack(3, 7, 7);
        s.missing[[1, 3, 3]] = true;
        let err = slice_window(&s, [3, 3], 1, 3).unwrap_err();
        assert!(matches!(err, Error::MissingData { t: 1, i: 3, j: 3 }));
    }

    #[test]
    fn time_bounds_are_enforced() {
        let s = stack(3, 9, 9);
        assert!(slice_window(&s, [4, 4], 0, 2).is_err());
        assert!(slice_window(&s, [4, 4], 2, 2).is_err());
        assert!(slice_window(&s, [4, 4], 1, 2).is_ok());
    }

    #[test]
    fn coord_mapping_uses_column_as_x() {
        let geom = GridGeometry::new(4, 3, 1).with_resolution(0.5, 1.0);
        assert_eq!(geom.coord(2, 3), [1.5, 1.0]);
    }

    #[test]
    fn repeated_slices_are_identical() {
        let s = stack(3, 9, 9);
        let a = slice_window(&s, [4, 4], 1, 2).unwrap();
        let b = slice_window(&s, [4, 4], 1, 2).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0.members, b.0.members);
    }
}
