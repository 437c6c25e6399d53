//! Synthetic data generation from the drift model: single-window draws and
//! domain-scale constant/rotational wind fields.
//!
//! Draws are exact: assemble the dense joint covariance, factor it, and
//! multiply the lower factor into a standard-normal vector from a ChaCha8
//! counter-based generator (recorded seed => bit-reproducible stacks).

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covmodel::{cov_matrix, DriftParams};
use crate::error::{Error, Result};
use crate::gridstore::{GridGeometry, GridStack, TargetWindow};
use crate::linalg;
use crate::scanner::{Method, Provenance, WindField};
use crate::util::config_hash;

/// Joint dimension above which dense simulation refuses to run without an
/// explicit override.
pub const DENSE_GUARD: usize = 12_000;

/// True wind field used to warp the simulated domain.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WindFieldSpec {
    /// Uniform translation `u` (length units per time unit).
    Constant { u: [f64; 2] },
    /// Counter-clockwise rotation about `center` (defaults to the domain
    /// centroid) by `deg_per_step` degrees per frame.
    Rotational {
        deg_per_step: f64,
        #[serde(default)]
        center: Option<[f64; 2]>,
    },
}

impl WindFieldSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            WindFieldSpec::Constant { u } => u.iter().all(|v| v.is_finite()),
            WindFieldSpec::Rotational {
                deg_per_step,
                center,
            } => {
                deg_per_step.is_finite()
                    && center.map_or(true, |c| c.iter().all(|v| v.is_finite()))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams("non-finite wind field spec".into()))
        }
    }
}

/// Domain simulation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub grid: GridGeometry,
    pub params: DriftParams,
    pub seed: u64,
}

/// One exact draw on a `size x size x 3` target window (unit pixel spacing).
pub fn simulate_window(size: usize, params: &DriftParams, seed: u64) -> Result<GridStack> {
    params.validate()?;
    if size % 2 == 0 {
        return Err(Error::InvalidParams(format!(
            "window size must be odd, got {size}"
        )));
    }
    let n = 3 * size * size;
    if n > 2000 {
        return Err(Error::SimulationTooLarge { dim: n, limit: 2000 });
    }
    let geometry = GridGeometry::new(size, size, 3);
    let hw = size / 2;
    let window = TargetWindow::new(&geometry, [hw, hw], 1, hw)?;
    let cov = cov_matrix(&window, &geometry, params)?;
    let l = linalg::cholesky_lower(cov)?;
    let z = draw_from_factor(&l, seed);
    // The full-grid window's canonical ordering equals the stack layout.
    let values = Array3::from_shape_vec((3, size, size), z).expect("draw length");
    GridStack::new(geometry, values)
}

fn draw_from_factor(l: &Array2<f64>, seed: u64) -> Vec<f64> {
    let n = l.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let ls = l.as_slice().expect("factor is standard layout");
    let mut z = vec![0.0; n];
    z.par_iter_mut().enumerate().for_each(|(i, zi)| {
        let row = &ls[i * n..i * n + i + 1];
        *zi = row.iter().zip(&xi).map(|(a, b)| a * b).sum();
    });
    z
}

fn rotate(p: [f64; 2], center: [f64; 2], radians: f64) -> [f64; 2] {
    let (s, c) = radians.sin_cos();
    let dx = p[0] - center[0];
    let dy = p[1] - center[1];
    [center[0] + c * dx - s * dy, center[1] + s * dx + c * dy]
}

/// Warped coordinate of pixel position `p` at frame `k`: the location whose
/// value the stationary base field contributes at `(p, k)`.
fn warp(spec: &WindFieldSpec, centroid: [f64; 2], p: [f64; 2], time: f64, step: f64) -> [f64; 2] {
    match spec {
        WindFieldSpec::Constant { u } => [p[0] - u[0] * time, p[1] - u[1] * time],
        WindFieldSpec::Rotational {
            deg_per_step,
            center,
        } => {
            let c = center.unwrap_or(centroid);
            let angle = -deg_per_step.to_radians() * (time / step);
            rotate(p, c, angle)
        }
    }
}

/// Simulates a full domain by evaluating the symmetric zero-drift base
/// correlation between warped location-time pairs, and returns the matching
/// per-pixel true wind field.
pub fn simulate_domain(
    spec: &WindFieldSpec,
    sim: &SimConfig,
    allow_large: bool,
) -> Result<(GridStack, WindField)> {
    spec.validate()?;
    sim.params.validate()?;
    sim.grid.validate()?;
    let g = &sim.grid;
    let n = g.n_values();
    if n > DENSE_GUARD && !allow_large {
        return Err(Error::SimulationTooLarge {
            dim: n,
            limit: DENSE_GUARD,
        });
    }
    let centroid = [
        g.origin[0] + (g.width - 1) as f64 * g.pixel_size / 2.0,
        g.origin[1] + (g.height - 1) as f64 * g.pixel_size / 2.0,
    ];

    // Warped (x, y) plus the frame time for every point, t-major row-major.
    let mut coords = Vec::with_capacity(n);
    for k in 0..g.n_times {
        let time = k as f64 * g.time_step;
        for i in 0..g.height {
            for j in 0..g.width {
                let w = warp(spec, centroid, g.coord(i, j), time, g.time_step);
                coords.push([w[0], w[1], time]);
            }
        }
    }

    let a1sq = sim.params.alpha1 * sim.params.alpha1;
    let a2sq = sim.params.alpha2 * sim.params.alpha2;
    let sigma2 = sim.params.sigma2;
    let mut cov = Array2::<f64>::zeros((n, n));
    {
        let cs = cov.as_slice_mut().expect("fresh matrix");
        let rows: Vec<(usize, &mut [f64])> = cs.chunks_mut(n).enumerate().collect();
        rows.into_par_iter().for_each(|(a, row)| {
            let pa = coords[a];
            for (b, out) in row.iter_mut().enumerate().skip(a) {
                let pb = coords[b];
                let dx = pb[0] - pa[0];
                let dy = pb[1] - pa[1];
                let h = pb[2] - pa[2];
                *out = sigma2 * (-((dx * dx + dy * dy) / a1sq + h * h / a2sq).sqrt()).exp();
            }
        });
    }
    for a in 0..n {
        for b in 0..a {
            cov[[a, b]] = cov[[b, a]];
        }
    }

    let l = linalg::cholesky_lower(cov)?;
    let z = draw_from_factor(&l, sim.seed);
    let values =
        Array3::from_shape_vec((g.n_times, g.height, g.width), z).expect("draw length");
    let stack = GridStack::new(g.clone(), values)?;

    let truth = true_wind_field(spec, g, centroid);
    Ok((stack, truth))
}

/// Per-pixel true wind implied by the warp: the displacement of the feature
/// at each location over one frame, divided by the time step.
pub fn true_wind_field(
    spec: &WindFieldSpec,
    geometry: &GridGeometry,
    centroid: [f64; 2],
) -> WindField {
    let mut field = WindField::empty(
        geometry.clone(),
        Provenance {
            method: Method::Truth,
            half_width: 0,
            config_hash: config_hash(spec),
        },
    );
    for t in 0..geometry.n_times {
        for i in 0..geometry.height {
            for j in 0..geometry.width {
                let p = geometry.coord(i, j);
                let w = match spec {
                    WindFieldSpec::Constant { u } => *u,
                    WindFieldSpec::Rotational {
                        deg_per_step,
                        center,
                    } => {
                        let c = center.unwrap_or(centroid);
                        let q = rotate(p, c, deg_per_step.to_radians());
                        [
                            (q[0] - p[0]) / geometry.time_step,
                            (q[1] - p[1]) / geometry.time_step,
                        ]
                    }
                };
                field.u[[t, i, j]] = w[0];
                field.v[[t, i, j]] = w[1];
                field.var_u[[t, i, j]] = 1.0;
                field.var_v[[t, i, j]] = 1.0;
                field.valid[[t, i, j]] = true;
            }
        }
    }
    field
}

/// Centroid of a geometry's pixel coordinates (default rotation center).
pub fn domain_centroid(geometry: &GridGeometry) -> [f64; 2] {
    [
        geometry.origin[0] + (geometry.width - 1) as f64 * geometry.pixel_size / 2.0,
        geometry.origin[1] + (geometry.height - 1) as f64 * geometry.pixel_size / 2.0,
    ]
}
