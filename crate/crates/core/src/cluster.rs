//! Response-group clustering: k-means on standardized (Ep, Cp, Cr) with
//! silhouette-based choice of the number of groups.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::sim::PatientParams;

pub type Point = [f64; 3];

fn sq_dist(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Per-feature standardization fitted on the training points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Point,
    pub sd: Point,
}

impl Scaler {
    pub fn fit(points: &[Point]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Input("cannot standardize an empty point set".into()));
        }
        let n = points.len() as f64;
        let mut mean = [0.0; 3];
        let mut sd = [0.0; 3];
        for j in 0..3 {
            mean[j] = points.iter().map(|p| p[j]).sum::<f64>() / n;
            let var = points.iter().map(|p| (p[j] - mean[j]).powi(2)).sum::<f64>() / n;
            // A constant feature is only centred.
            sd[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(Scaler { mean, sd })
    }

    pub fn identity() -> Self {
        Scaler {
            mean: [0.0; 3],
            sd: [1.0; 3],
        }
    }

    pub fn transform(&self, p: &Point) -> Point {
        std::array::from_fn(|j| (p[j] - self.mean[j]) / self.sd[j])
    }

    pub fn inverse(&self, p: &Point) -> Point {
        std::array::from_fn(|j| p[j] * self.sd[j] + self.mean[j])
    }
}

/// Index of the nearest centroid; ties go to the lower index.
pub fn nearest(centroids: &[Point], p: &Point) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(centroid, p);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

/// Result of one Lloyd run, in the coordinates it was fitted in.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Point>,
    pub assign: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
}

/// Lloyd's algorithm from `q` distinct data points chosen at random.
///
/// Initial centroids are drawn from the distinct points in first-occurrence
/// order, so duplicating every point leaves the result unchanged. A cluster
/// that becomes empty is re-seeded at the point farthest from its centroid.
pub fn kmeans_fit(points: &[Point], q: usize, rng: &mut Rng, max_iters: usize) -> Result<KMeansFit> {
    let mut distinct: Vec<Point> = Vec::new();
    for p in points {
        if !distinct.contains(p) {
            distinct.push(*p);
        }
    }
    if q < 2 || distinct.len() < q {
        return Err(Error::Input(format!(
            "k-means with q = {q} needs q >= 2 and at least q distinct points, got {}",
            distinct.len()
        )));
    }
    let mut centroids: Vec<Point> = sample(rng, distinct.len(), q).into_iter().map(|i| distinct[i]).collect();
    let mut assign = vec![usize::MAX; points.len()];
    let mut history = Vec::new();

    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut inertia = 0.0;
        for (a, p) in assign.iter_mut().zip(points) {
            let c = nearest(&centroids, p);
            inertia += sq_dist(&centroids[c], p);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        history.push(inertia);
        if !changed {
            break;
        }

        let mut sums = vec![[0.0; 3]; q];
        let mut counts = vec![0usize; q];
        for (&c, p) in assign.iter().zip(points) {
            counts[c] += 1;
            for j in 0..3 {
                sums[c][j] += p[j];
            }
        }
        let old = centroids.clone();
        let mut taken = vec![false; points.len()];
        for c in 0..q {
            if counts[c] > 0 {
                centroids[c] = sums[c].map(|s| s / counts[c] as f64);
                continue;
            }
            let far = (0..points.len())
                .filter(|&i| !taken[i])
                .fold(None::<(f64, usize)>, |best, i| {
                    let d = sq_dist(&old[assign[i]], &points[i]);
                    match best {
                        Some((bd, _)) if bd >= d => best,
                        _ => Some((d, i)),
                    }
                });
            if let Some((_, i)) = far {
                taken[i] = true;
                centroids[c] = points[i];
            }
        }
    }

    // Final assignment is consistent with the returned centroids.
    let mut inertia = 0.0;
    for (a, p) in assign.iter_mut().zip(points) {
        *a = nearest(&centroids, p);
        inertia += sq_dist(&centroids[*a], p);
    }
    Ok(KMeansFit {
        centroids,
        assign,
        inertia,
        history,
    })
}

/// Best-inertia fit over `restarts` runs, each on its own stream of `seed`.
pub fn kmeans_best(points: &[Point], q: usize, restarts: usize, seed: u64, max_iters: usize) -> Result<KMeansFit> {
    let fits = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| kmeans_fit(points, q, &mut rng::rng_for(seed, &[q as u64, r as u64]), max_iters))
        .collect::<Result<Vec<_>>>()?;
    Ok(fits
        .into_iter()
        .reduce(|best, f| if f.inertia < best.inertia { f } else { best })
        .expect("at least one restart"))
}

/// Silhouette coefficient of every point. Members of singleton clusters score 0.
pub fn silhouette_samples(points: &[Point], assign: &[usize], q: usize) -> Vec<f64> {
    let mut sizes = vec![0usize; q];
    for &c in assign {
        sizes[c] += 1;
    }
    (0..points.len())
        .into_par_iter()
        .map(|i| {
            let own = assign[i];
            if sizes[own] <= 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; q];
            for (j, p) in points.iter().enumerate() {
                if j != i {
                    sums[assign[j]] += sq_dist(&points[i], p).sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..q)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            if !b.is_finite() {
                return 0.0;
            }
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect()
}

pub fn mean_silhouette(points: &[Point], assign: &[usize], q: usize) -> f64 {
    let s = silhouette_samples(points, assign, q);
    s.iter().sum::<f64>() / s.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub q_min: usize,
    pub q_max: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub standardize: bool,
    /// Fixes the number of groups instead of choosing it by silhouette.
    pub fixed_q: Option<usize>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            q_min: 3,
            q_max: 10,
            restarts: 10,
            max_iters: 300,
            standardize: true,
            fixed_q: None,
        }
    }
}

/// Fitted response groups. Centroids live in the scaled space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub q: usize,
    pub scaler: Scaler,
    pub centroids: Vec<Point>,
    /// Group of each training patient, in input order.
    pub assign: Vec<usize>,
    /// Mean silhouette for each tried q, in increasing q.
    pub silhouettes: Vec<(usize, f64)>,
}

impl ClusterModel {
    /// Group of an unseen patient: nearest centroid after scaling.
    pub fn assign_patient(&self, p: &PatientParams) -> usize {
        nearest(&self.centroids, &self.scaler.transform(&p.response_vector()))
    }

    pub fn centroids_raw(&self) -> Vec<Point> {
        self.centroids.iter().map(|c| self.scaler.inverse(c)).collect()
    }
}

/// Fits k-means for every q in `q_min..=q_max` and keeps the one with the
/// highest mean silhouette; ties go to the smaller q.
pub fn select_q_by_silhouette(points: &[Point], config: &ClusterConfig, seed: u64) -> Result<ClusterModel> {
    let scaler = if config.standardize {
        Scaler::fit(points)?
    } else {
        Scaler::identity()
    };
    let scaled: Vec<Point> = points.iter().map(|p| scaler.transform(p)).collect();
    let qs: Vec<usize> = match config.fixed_q {
        Some(q) => vec![q],
        None => (config.q_min..=config.q_max).collect(),
    };
    if qs.is_empty() || qs[0] < 2 {
        return Err(Error::Config(format!("invalid cluster range {:?}", config)));
    }
    let mut best: Option<(f64, usize, KMeansFit)> = None;
    let mut silhouettes = Vec::new();
    for q in qs {
        let fit = kmeans_best(&scaled, q, config.restarts, seed, config.max_iters)?;
        let s = mean_silhouette(&scaled, &fit.assign, q);
        silhouettes.push((q, s));
        if best.as_ref().is_none_or(|b| s > b.0) {
            best = Some((s, q, fit));
        }
    }
    let (_, q, fit) = best.expect("non-empty q range");
    Ok(ClusterModel {
        q,
        scaler,
        centroids: fit.centroids,
        assign: fit.assign,
        silhouettes,
    })
}

pub fn cluster_patients(patients: &[PatientParams], config: &ClusterConfig, seed: u64) -> Result<ClusterModel> {
    let points: Vec<Point> = patients.iter().map(|p| p.response_vector()).collect();
    select_q_by_silhouette(&points, config, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;
    use rand::{Rng as _, SeedableRng};
    use rand_distr::{Distribution, Normal};

    fn blobs(centers: &[Point], per: usize, sd: f64, seed: u64) -> (Vec<Point>, Vec<usize>) {
        let mut rng = Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sd).unwrap();
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (b, c) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push(c.map(|v| v + noise.sample(&mut rng)));
                labels.push(b);
            }
        }
        (pts, labels)
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn two_blobs_recovered() {
        let (pts, labels) = blobs(&[[0.0; 3], [10.0, 0.0, 0.0]], 20, 0.5, 1);
        // Brute-force check that the blobs really are separated.
        let max_within = (0..40)
            .flat_map(|i| (0..40).map(move |j| (i, j)))
            .filter(|&(i, j)| labels[i] == labels[j])
            .map(|(i, j)| sq_dist(&pts[i], &pts[j]))
            .fold(0.0, f64::max);
        let min_between = (0..40)
            .flat_map(|i| (0..40).map(move |j| (i, j)))
            .filter(|&(i, j)| labels[i] != labels[j])
            .map(|(i, j)| sq_dist(&pts[i], &pts[j]))
            .fold(f64::INFINITY, f64::min);
        assert!(max_within < min_between);
        let fit = kmeans_best(&pts, 2, 10, 3, 100).unwrap();
        assert!(same_partition(&fit.assign, &labels));
    }

    #[test]
    fn q_equal_distinct_points_has_zero_inertia() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [1.0, 0.0, 0.0]];
        let fit = kmeans_fit(&pts, 3, &mut Rng::seed_from_u64(0), 50).unwrap();
        assert_eq!(fit.inertia, 0.0);
    }

    #[test]
    fn duplication_does_not_change_centroids() {
        let (pts, _) = blobs(&[[0.0; 3], [3.0, 1.0, 0.0], [0.0, 4.0, 2.0]], 15, 1.0, 5);
        let doubled: Vec<Point> = pts.iter().flat_map(|p| [*p, *p]).collect();
        let a = kmeans_fit(&pts, 3, &mut Rng::seed_from_u64(9), 100).unwrap();
        let b = kmeans_fit(&doubled, 3, &mut Rng::seed_from_u64(9), 100).unwrap();
        for (x, y) in a.centroids.iter().zip(&b.centroids) {
            for j in 0..3 {
                assert!((x[j] - y[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn five_blobs_select_five() {
        let centers = [
            [0.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
            [0.0, 10.0, 0.0],
            [0.0, 0.0, 10.0],
            [10.0, 10.0, 10.0],
        ];
        let (pts, labels) = blobs(&centers, 20, 0.5, 7);
        let truth = mean_silhouette(&pts, &labels, 5);
        assert!(truth > 0.8, "{truth}");
        let model = select_q_by_silhouette(&pts, &ClusterConfig::default(), 1).unwrap();
        assert_eq!(model.q, 5);
        assert!(same_partition(&model.assign, &labels));
    }

    #[test]
    fn silhouette_by_hand() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]];
        let s = silhouette_samples(&pts, &[0, 0, 1], 2);
        // Point 0: a = 1, b = 5. Point 1: a = 1, b = 4. Point 2 is a singleton.
        assert!((s[0] - 0.8).abs() < 1e-12);
        assert!((s[1] - 0.75).abs() < 1e-12);
        assert_eq!(s[2], 0.0);
    }

    #[test]
    fn silhouette_approaches_one_with_separation() {
        let mut last = -1.0;
        for sep in [2.0, 10.0, 100.0, 1000.0] {
            let (pts, labels) = blobs(&[[0.0; 3], [sep, 0.0, 0.0]], 10, 0.5, 2);
            let s = mean_silhouette(&pts, &labels, 2);
            assert!(s > last);
            last = s;
        }
        assert!(last > 0.99);
    }

    #[test]
    fn single_blob_still_returns_a_model() {
        let (pts, _) = blobs(&[[0.0; 3]], 40, 1.0, 3);
        let model = select_q_by_silhouette(&pts, &ClusterConfig::default(), 4).unwrap();
        assert!((3..=10).contains(&model.q));
        assert_eq!(model.silhouettes.len(), 8);
    }

    #[test]
    fn new_patients_go_to_nearest_centroid() {
        let (pts, _) = blobs(&[[0.3, 0.2, 0.1], [0.5, 0.1, 0.2]], 20, 0.01, 6);
        let config = ClusterConfig {
            fixed_q: Some(2),
            ..ClusterConfig::default()
        };
        let model = select_q_by_silhouette(&pts, &config, 0).unwrap();
        for (p, &a) in pts.iter().zip(&model.assign) {
            let params = PatientParams::new(p[0], p[1], p[2], crate::sim::Sex::Male, 70.0).unwrap();
            assert_eq!(model.assign_patient(&params), a);
        }
    }

    proptest! {
        #[test]
        fn inertia_never_increases(seed in any::<u64>(), q in 2usize..6) {
            let mut rng = Rng::seed_from_u64(seed);
            let pts: Vec<Point> = (0..40).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let fit = kmeans_fit(&pts, q, &mut rng, 100).unwrap();
            for w in fit.history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            for (p, &a) in pts.iter().zip(&fit.assign) {
                prop_assert_eq!(nearest(&fit.centroids, p), a);
            }
        }

        #[test]
        fn silhouettes_in_range(seed in any::<u64>()) {
            let mut rng = Rng::seed_from_u64(seed);
            let pts: Vec<Point> = (0..30).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let assign: Vec<usize> = (0..30).map(|_| rng.random_range(0..3)).collect();
            for s in silhouette_samples(&pts, &assign, 3) {
                prop_assert!((-1.0..=1.0).contains(&s));
            }
        }

        #[test]
        fn clustering_is_deterministic(seed in 0u64..50) {
            let mut rng = Rng::seed_from_u64(seed);
            let pts: Vec<Point> = (0..30).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let config = ClusterConfig { q_max: 4, restarts: 3, ..ClusterConfig::default() };
            let a = select_q_by_silhouette(&pts, &config, seed).unwrap();
            let b = select_q_by_silhouette(&pts, &config, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
