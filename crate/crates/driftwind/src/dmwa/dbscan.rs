//! Textbook DBSCAN over 2-d displacement vectors (Euclidean metric).

/// Cluster labels: `-1` marks noise, other values are cluster ids in order of
/// discovery.
pub fn dbscan(points: &[[f64; 2]], eps: f64, min_pts: usize) -> Vec<isize> {
    const UNVISITED: isize = -2;
    let n = points.len();
    let mut labels = vec![UNVISITED; n];
    let region = |p: usize| -> Vec<usize> {
        (0..n)
            .filter(|&q| {
                let dx = points[p][0] - points[q][0];
                let dy = points[p][1] - points[q][1];
                (dx * dx + dy * dy).sqrt() <= eps
            })
            .collect()
    };
    let mut cluster: isize = 0;
    for p in 0..n {
        if labels[p] != UNVISITED {
            continue;
        }
        let neighbors = region(p);
        if neighbors.len() < min_pts {
            labels[p] = -1;
            continue;
        }
        labels[p] = cluster;
        let mut queue = neighbors;
        let mut k = 0;
        while k < queue.len() {
            let q = queue[k];
            k += 1;
            if labels[q] == -1 {
                labels[q] = cluster; // noise becomes a border point
            }
            if labels[q] != UNVISITED {
                continue;
            }
            labels[q] = cluster;
            let nb = region(q);
            if nb.len() >= min_pts {
                queue.extend(nb);
            }
        }
        cluster += 1;
    }
    labels
}

/// Mean of the largest cluster; falls back to the mean of all points when
/// DBSCAN labels everything noise. Ties between equal-sized clusters go to
/// the first-discovered one.
pub fn dominant_cluster_mean(
    points: &[[f64; 2]],
    eps: f64,
    min_pts: usize,
) -> ([f64; 2], ClusterDiagnostics) {
    let labels = dbscan(points, eps, min_pts);
    let n_clusters = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0)) as usize;
    let mut best: Option<(usize, isize)> = None;
    for c in 0..n_clusters as isize {
        let size = labels.iter().filter(|&&l| l == c).count();
        if best.map_or(true, |(s, _)| size > s) {
            best = Some((size, c));
        }
    }
    let mean_of = |keep: &dyn Fn(usize) -> bool| -> [f64; 2] {
        let mut sum = [0.0, 0.0];
        let mut count = 0.0;
        for (k, p) in points.iter().enumerate() {
            if keep(k) {
                sum[0] += p[0];
                sum[1] += p[1];
                count += 1.0;
            }
        }
        [sum[0] / count, sum[1] / count]
    };
    match best {
        Some((size, c)) => (
            mean_of(&|k| labels[k] == c),
            ClusterDiagnostics {
                n_vectors: points.len(),
                n_clusters,
                largest_size: size,
                fallback: false,
            },
        ),
        None => (
            mean_of(&|_| true),
            ClusterDiagnostics {
                n_vectors: points.len(),
                n_clusters: 0,
                largest_size: 0,
                fallback: true,
            },
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterDiagnostics {
    pub n_vectors: usize,
    pub n_clusters: usize,
    pub largest_size: usize,
    pub fallback: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_identical_points_form_one_cluster() {
        let pts = vec![[1.5, 2.0]; 12];
        let (mean, diag) = dominant_cluster_mean(&pts, 0.5, 4);
        assert_eq!(mean, [1.5, 2.0]);
        assert_eq!(diag.n_clusters, 1);
        assert_eq!(diag.largest_size, 12);
        assert!(!diag.fallback);
    }

    #[test]
    fn largest_cluster_wins() {
        let mut pts = vec![[1.0, 2.0]; 100];
        pts.extend(vec![[4.0, 4.0]; 20]);
        let (mean, diag) = dominant_cluster_mean(&pts, 0.5, 4);
        assert_eq!(mean, [1.0, 2.0]);
        assert_eq!(diag.n_clusters, 2);
        assert_eq!(diag.largest_size, 100);
    }

    #[test]
    fn sparse_points_fall_back_to_global_mean() {
        let pts = vec![[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
        let (mean, diag) = dominant_cluster_mean(&pts, 0.5, 4);
        assert_eq!(mean, [5.0, 5.0]);
        assert!(diag.fallback);
    }

    #[test]
    fn matches_reference_labeling_on_mixed_set() {
        // Two dense groups plus two isolated noise points; labels computed by
        // hand from the DBSCAN definition (eps=1, minPts=3).
        let pts = vec![
            [0.0, 0.0],
            [0.5, 0.0],
            [0.0, 0.5],
            [0.5, 0.5],
            [7.0, 7.0],
            [7.5, 7.0],
            [7.0, 7.5],
            [20.0, 20.0],
            [-15.0, 3.0],
        ];
        let labels = dbscan(&pts, 1.0, 3);
        assert_eq!(labels[..4], [0, 0, 0, 0]);
        assert_eq!(labels[4..7], [1, 1, 1]);
        assert_eq!(labels[7], -1);
        assert_eq!(labels[8], -1);
    }

    proptest! {
        #[test]
        fn label_partition_is_order_independent(perm_seed in 0u64..1000) {
            // Well-separated blobs so border points are unambiguous.
            let mut pts = Vec::new();
            for k in 0..3 {
                let cx = 10.0 * k as f64;
                for a in 0..5 {
                    pts.push([cx + 0.1 * a as f64, 0.2 * a as f64]);
                }
            }
            pts.push([100.0, 100.0]); // noise
            let base = dbscan(&pts, 1.5, 3);

            // Deterministic permutation derived from the seed.
            let mut order: Vec<usize> = (0..pts.len()).collect();
            let mut s = perm_seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
            for i in (1..order.len()).rev() {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                order.swap(i, (s as usize) % (i + 1));
            }
            let permuted: Vec<[f64;2]> = order.iter().map(|&i| pts[i]).collect();
            let lab_p = dbscan(&permuted, 1.5, 3);

            // Same partition: points share a cluster in `base` iff their
            // images share one in `lab_p`; noise maps to noise.
            for a in 0..pts.len() {
                let pa = order.iter().position(|&x| x == a).unwrap();
                prop_assert_eq!(base[a] == -1, lab_p[pa] == -1);
                for b in 0..pts.len() {
                    let pb = order.iter().position(|&x| x == b).unwrap();
                    if base[a] >= 0 {
                        prop_assert_eq!(base[a] == base[b], lab_p[pa] == lab_p[pb]);
                    }
                }
            }
        }
    }
}
