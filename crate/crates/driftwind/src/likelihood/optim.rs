//! Derivative-free Nelder-Mead minimizer.
//!
//! Convergence is declared when the simplex diameter (max pairwise vertex
//! distance) falls below tolerance. Non-finite objective values are treated
//! as +inf so the simplex backs away from invalid parameter regions.

#[derive(Debug, Clone)]
pub struct NmOptions {
    pub tol_diameter: f64,
    pub max_evals: usize,
}

impl Default for NmOptions {
    fn default() -> Self {
        NmOptions {
            tol_diameter: 1e-5,
            max_evals: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NmResult {
    pub x: Vec<f64>,
    pub fmin: f64,
    pub n_evals: usize,
    pub converged: bool,
}

fn sanitize(f: f64) -> f64 {
    if f.is_nan() {
        f64::INFINITY
    } else {
        f
    }
}

fn diameter(simplex: &[Vec<f64>]) -> f64 {
    let mut d: f64 = 0.0;
    for a in 0..simplex.len() {
        for b in a + 1..simplex.len() {
            let dist: f64 = simplex[a]
                .iter()
                .zip(&simplex[b])
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            d = d.max(dist);
        }
    }
    d
}

pub fn minimize<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    steps: &[f64],
    opts: &NmOptions,
) -> NmResult {
    let dim = x0.len();
    assert_eq!(steps.len(), dim);
    let mut n_evals = 0usize;
    let mut eval = |x: &[f64], n: &mut usize| -> f64 {
        *n += 1;
        sanitize(f(x))
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    let mut fvals: Vec<f64> = Vec::with_capacity(dim + 1);
    simplex.push(x0.to_vec());
    fvals.push(eval(x0, &mut n_evals));
    for k in 0..dim {
        let mut v = x0.to_vec();
        v[k] += steps[k];
        fvals.push(eval(&v, &mut n_evals));
        simplex.push(v);
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;

    loop {
        // Stable sort keeps tie handling deterministic.
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| fvals[a].partial_cmp(&fvals[b]).unwrap());
        let reordered: Vec<Vec<f64>> = order.iter().map(|&i| simplex[i].clone()).collect();
        let refv: Vec<f64> = order.iter().map(|&i| fvals[i]).collect();
        simplex = reordered;
        fvals = refv;

        if diameter(&simplex) < opts.tol_diameter {
            converged = true;
            break;
        }
        if n_evals >= opts.max_evals {
            break;
        }

        let centroid: Vec<f64> = (0..dim)
            .map(|k| simplex[..dim].iter().map(|v| v[k]).sum::<f64>() / dim as f64)
            .collect();
        let worst = simplex[dim].clone();
        let reflect: Vec<f64> = (0..dim)
            .map(|k| centroid[k] + alpha * (centroid[k] - worst[k]))
            .collect();
        let f_r = eval(&reflect, &mut n_evals);

        if f_r < fvals[0] {
            let expand: Vec<f64> = (0..dim)
                .map(|k| centroid[k] + gamma * (centroid[k] - worst[k]))
                .collect();
            let f_e = eval(&expand, &mut n_evals);
            if f_e < f_r {
                simplex[dim] = expand;
                fvals[dim] = f_e;
            } else {
                simplex[dim] = reflect;
                fvals[dim] = f_r;
            }
        } else if f_r < fvals[dim - 1] {
            simplex[dim] = reflect;
            fvals[dim] = f_r;
        } else {
            let contract: Vec<f64> = if f_r < fvals[dim] {
                (0..dim)
                    .map(|k| centroid[k] + rho * (reflect[k] - centroid[k]))
                    .collect()
            } else {
                (0..dim)
                    .map(|k| centroid[k] + rho * (worst[k] - centroid[k]))
                    .collect()
            };
            let f_c = eval(&contract, &mut n_evals);
            if f_c < fvals[dim].min(f_r) {
                simplex[dim] = contract;
                fvals[dim] = f_c;
            } else {
                // Shrink toward the best vertex.
                for v in 1..=dim {
                    for k in 0..dim {
                        simplex[v][k] = simplex[0][k] + sigma * (simplex[v][k] - simplex[0][k]);
                    }
                    fvals[v] = eval(&simplex[v].clone(), &mut n_evals);
                }
            }
        }
    }

    let mut best = 0;
    for i in 1..=dim {
        if fvals[i] < fvals[best] {
            best = i;
        }
    }
    NmResult {
        x: simplex[best].clone(),
        fmin: fvals[best],
        n_evals,
        converged,
    }
}
