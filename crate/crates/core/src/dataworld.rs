//! Clustered synthetic data, k-means partitioning and centroid-rank queries.
//!
//! The data space itself is the embedding used for cluster proximity: noisy
//! intermediate states are ranked against centroids without any decoder.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numcore::{dist, Mat};
use crate::rng::{child_seed, SplitMix64};

const PLACEMENT_ATTEMPTS: usize = 1000;
/// Accept a centroid draw only if its closest pair is at least this fraction
/// of its farthest pair, so rescaling to the target separation stays compact.
const MIN_SPREAD_RATIO: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub points: Mat,
    pub labels: Vec<usize>,
    pub k: usize,
    pub d: usize,
    pub centroids: Mat,
    /// Minimum inter-centroid distance over the within-cluster std (1).
    pub separation: f64,
    pub seed: u64,
}

/// Sidecar metadata written next to the dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    pub seed: u64,
    pub separation: f64,
    pub centroids: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.rows
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows == 0
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }

    /// Rows belonging to cluster `k`, in dataset order.
    pub fn cluster_points(&self, k: usize) -> Mat {
        let rows: Vec<Vec<f64>> = self
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == k)
            .map(|(i, _)| self.point(i).to_vec())
            .collect();
        if rows.is_empty() {
            Mat::zeros(0, self.d)
        } else {
            Mat::from_rows(&rows)
        }
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Replace labels and centroids with a partition of the same points.
    pub fn with_partition(&self, labels: Vec<usize>, centroids: Mat) -> Result<Dataset> {
        check_len("partition labels", self.len(), labels.len())?;
        check_len("partition centroid dim", self.d, centroids.cols)?;
        let ds = Dataset {
            k: centroids.rows,
            labels,
            centroids,
            ..self.clone()
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        check_len("dataset points dim", self.d, self.points.cols)?;
        check_len("dataset labels", self.points.rows, self.labels.len())?;
        check_len("dataset centroids", self.k, self.centroids.rows)?;
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.k) {
            return Err(Error::Domain(format!("label {bad} outside [0, {})", self.k)));
        }
        if let Some(empty) = self.cluster_sizes().iter().position(|&s| s == 0) {
            return Err(Error::Domain(format!("cluster {empty} has no points")));
        }
        if !self.centroids.is_finite() {
            return Err(Error::Domain("non-finite centroid".into()));
        }
        Ok(())
    }

    /// Per-cluster means of the current labels.
    pub fn label_means(&self) -> Mat {
        cluster_means(&self.points, &self.labels, self.k)
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            k: self.k,
            d: self.d,
            seed: self.seed,
            separation: self.separation,
            centroids: self.centroids.rows_iter().map(<[f64]>::to_vec).collect(),
        }
    }

    /// CSV with header `x_0,...,x_{d-1},label`; floats use shortest
    /// round-trip formatting so reloading is lossless.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        for j in 0..self.d {
            let _ = write!(s, "x_{j},");
        }
        s.push_str("label\n");
        for (row, label) in self.points.rows_iter().zip(&self.labels) {
            for v in row {
                let _ = write!(s, "{v},");
            }
            let _ = writeln!(s, "{label}");
        }
        s
    }

    pub fn save(&self, csv_path: &Path, meta_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv_string())?;
        std::fs::write(meta_path, serde_json::to_string_pretty(&self.meta())?)?;
        Ok(())
    }

    pub fn load(csv_path: &Path, meta_path: &Path) -> Result<Dataset> {
        let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(meta_path)?)?;
        let text = std::fs::read_to_string(csv_path)?;
        Self::from_csv_str(&text, meta)
    }

    pub fn from_csv_str(text: &str, meta: DatasetMeta) -> Result<Dataset> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Domain("empty dataset CSV".into()))?;
        check_len("dataset CSV columns", meta.d + 1, header.split(',').count())?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            check_len("dataset CSV row", meta.d + 1, fields.len())?;
            for f in &fields[..meta.d] {
                data.push(f.trim().parse::<f64>().map_err(|e| {
                    Error::Domain(format!("row {}: bad number {f:?}: {e}", lineno + 2))
                })?);
            }
            labels.push(fields[meta.d].trim().parse::<usize>().map_err(|e| {
                Error::Domain(format!("row {}: bad label: {e}", lineno + 2))
            })?);
        }
        let points = Mat {
            rows: labels.len(),
            cols: meta.d,
            data,
        };
        let ds = Dataset {
            points,
            labels,
            k: meta.k,
            d: meta.d,
            centroids: Mat::from_rows(&meta.centroids),
            separation: meta.separation,
            seed: meta.seed,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn min_max_pairwise(c: &Mat) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for i in 0..c.rows {
        for j in i + 1..c.rows {
            let d = dist(c.row(i), c.row(j));
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    (lo, hi)
}

pub fn min_centroid_distance(c: &Mat) -> f64 {
    min_max_pairwise(c).0
}

/// Isotropic unit-variance Gaussian blobs whose closest centroid pair is
/// exactly `separation` apart. Centroids are mean-centred.
pub fn generate_mixture(
    seed: u64,
    k: usize,
    d: usize,
    n_per_cluster: usize,
    separation: f64,
) -> Result<Dataset> {
    if k < 2 || d < 2 || n_per_cluster < 8 || !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!(
            "need K >= 2, d >= 2, n_per_cluster >= 8, separation > 0 (got K={k}, d={d}, n={n_per_cluster}, sep={separation})"
        )));
    }
    let mut rng = SplitMix64::new(child_seed(seed, "dataset/centroids", 0));
    let mut placed = None;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let mut c = Mat::from_fn(k, d, |_, _| rng.normal());
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..k).map(|i| c.get(i, j)).sum::<f64>() / k as f64)
            .collect();
        for i in 0..k {
            for (v, m) in c.row_mut(i).iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        let (lo, hi) = min_max_pairwise(&c);
        if lo > 0.0 && lo >= MIN_SPREAD_RATIO * hi {
            let s = separation / lo;
            c.data.iter_mut().for_each(|v| *v *= s);
            placed = Some(c);
            break;
        }
    }
    let centroids = placed.ok_or_else(|| {
        Error::Config(format!(
            "could not place {k} centroids in {d} dimensions after {PLACEMENT_ATTEMPTS} attempts"
        ))
    })?;

    let mut rng = SplitMix64::new(child_seed(seed, "dataset/points", 0));
    let n = k * n_per_cluster;
    let mut points = Mat::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for c in 0..k {
        for i in 0..n_per_cluster {
            let row = points.row_mut(c * n_per_cluster + i);
            for (v, mu) in row.iter_mut().zip(centroids.row(c)) {
                *v = mu + rng.normal();
            }
            labels.push(c);
        }
    }
    Ok(Dataset {
        points,
        labels,
        k,
        d,
        centroids,
        separation,
        seed,
    })
}

/// Equal-weight isotropic Gaussian mixture used as the ground-truth density.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub centers: Mat,
    pub std: f64,
}

impl GaussianMixture {
    pub fn new(centers: Mat, std: f64) -> Self {
        Self { centers, std }
    }

    pub fn nll(&self, x: &[f64]) -> f64 {
        let d = self.centers.cols as f64;
        let var = self.std * self.std;
        let log_terms: Vec<f64> = self
            .centers
            .rows_iter()
            .map(|mu| {
                let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                -0.5 * sq / var
            })
            .collect();
        let m = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + log_terms.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        let log_norm = -0.5 * d * (2.0 * std::f64::consts::PI * var).ln();
        -(lse - (self.centers.rows as f64).ln() + log_norm)
    }

    /// Draw from the mixture with all centers displaced by `shift`.
    pub fn sample(&self, rng: &mut SplitMix64, shift: Option<&[f64]>) -> (Vec<f64>, usize) {
        let k = rng.below(self.centers.rows);
        let x = self
            .centers
            .row(k)
            .iter()
            .enumerate()
            .map(|(j, mu)| mu + shift.map_or(0.0, |s| s[j]) + self.std * rng.normal())
            .collect();
        (x, k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Mat,
    pub iterations: usize,
    /// Inertia after each centroid update.
    pub inertia: Vec<f64>,
}

fn cluster_means(points: &Mat, labels: &[usize], k: usize) -> Mat {
    let mut sums = Mat::zeros(k, points.cols);
    let mut counts = vec![0usize; k];
    for (row, &l) in points.rows_iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(row) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            sums.row_mut(c).iter_mut().for_each(|s| *s /= n as f64);
        }
    }
    sums
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &Mat) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.rows_iter().enumerate() {
        let d = sq_dist(x, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn inertia(points: &Mat, labels: &[usize], centroids: &Mat) -> f64 {
    points
        .rows_iter()
        .zip(labels)
        .map(|(x, &l)| sq_dist(x, centroids.row(l)))
        .sum()
}

/// Lloyd's algorithm from a seeded k-means++ start.
///
/// Stops at an assignment fixpoint (or when an update leaves the centroids
/// unchanged) or after `max_iter` rounds. An emptied cluster takes the point of
/// the largest cluster that lies farthest from that cluster's centroid.
pub fn kmeans_partition(points: &Mat, k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    let n = points.rows;
    if k == 0 || n < k {
        return Err(Error::Config(format!("k-means needs 1 <= K <= n (K={k}, n={n})")));
    }
    let mut rng = SplitMix64::new(seed);

    // k-means++ seeding
    let mut centroids = Mat::zeros(k, points.cols);
    let first = rng.below(n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = points
        .rows_iter()
        .map(|x| sq_dist(x, centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && *w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, x) in points.rows_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, centroids.row(c)));
        }
    }

    let mut labels: Vec<usize> = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    for it in 1..=max_iter.max(1) {
        iterations = it;
        let new_labels: Vec<usize> = points.rows_iter().map(|x| nearest(x, &centroids).0).collect();
        if new_labels == labels {
            break;
        }
        labels = new_labels;
        repair_empty(points, &mut labels, k);
        let updated = cluster_means(points, &labels, k);
        history.push(inertia(points, &labels, &updated));
        let unchanged = updated == centroids;
        centroids = updated;
        if unchanged {
            break;
        }
    }
    Ok(KMeansResult {
        labels,
        centroids,
        iterations,
        inertia: history,
    })
}

fn repair_empty(points: &Mat, labels: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
        let mean = cluster_means(points, labels, k);
        let far = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == largest)
            .map(|(i, _)| (i, sq_dist(points.row(i), mean.row(largest))))
            .fold((usize::MAX, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0;
        labels[far] = empty;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TiePolicy {
    LowerIndexFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRankResult {
    pub distances: Vec<f64>,
    /// `ranks[k]` is the 1-based rank of cluster `k` (1 = closest).
    pub ranks: Vec<usize>,
    pub tie_policy: TiePolicy,
}

impl ClusterRankResult {
    pub fn closest(&self) -> usize {
        self.ranks.iter().position(|&r| r == 1).unwrap_or(0)
    }

    /// Mean rank of the given clusters.
    pub fn mean_rank(&self, clusters: &[usize]) -> f64 {
        clusters.iter().map(|&c| self.ranks[c] as f64).sum::<f64>() / clusters.len() as f64
    }
}

/// Euclidean distance to every centroid and the induced ranking.
pub fn cluster_rank(x: &[f64], centroids: &Mat) -> Result<ClusterRankResult> {
    check_len("cluster_rank point", centroids.cols, x.len())?;
    let distances: Vec<f64> = centroids.rows_iter().map(|c| dist(x, c)).collect();
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    let mut ranks = vec![0; distances.len()];
    for (r, &c) in order.iter().enumerate() {
        ranks[c] = r + 1;
    }
    Ok(ClusterRankResult {
        distances,
        ranks,
        tie_policy: TiePolicy::LowerIndexFirst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_labels() {
        let ds = generate_mixture(1, 8, 4, 8, 5.0).unwrap();
        assert_eq!(ds.len(), 64);
        assert_eq!(ds.cluster_sizes(), vec![8; 8]);
        ds.validate().unwrap();
    }

    #[test]
    fn separation_is_exact() {
        for seed in 0..5 {
            let ds = generate_mixture(seed, 8, 8, 8, 6.5).unwrap();
            assert!((min_centroid_distance(&ds.centroids) - 6.5).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_mixture(42, 3, 5, 10, 4.0).unwrap();
        let b = generate_mixture(42, 3, 5, 10, 4.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv_string(), b.to_csv_string());
        assert_ne!(a, generate_mixture(43, 3, 5, 10, 4.0).unwrap());
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_mixture(0, 1, 2, 8, 1.0).is_err());
        assert!(generate_mixture(0, 2, 1, 8, 1.0).is_err());
        assert!(generate_mixture(0, 2, 2, 7, 1.0).is_err());
        assert!(generate_mixture(0, 2, 2, 8, 0.0).is_err());
    }

    #[test]
    fn crowded_placement_fails() {
        // far more centroids than a plane can hold at a balanced spread
        assert!(matches!(
            generate_mixture(0, 64, 2, 8, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn kmeans_distinct_points_converges_immediately() {
        let pts = Mat::from_rows(&[vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0]]);
        let r = kmeans_partition(&pts, 3, 1, 50).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.inertia, vec![0.0]);
        let mut l = r.labels.clone();
        l.sort();
        assert_eq!(l, vec![0, 1, 2]);
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let pts = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 0.0]]);
        let r = kmeans_partition(&pts, 1, 0, 10).unwrap();
        assert_eq!(r.labels, vec![0, 0, 0]);
        assert!((r.centroids.get(0, 0) - 3.0).abs() < 1e-12);
        assert!((r.centroids.get(0, 1) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_centroids_are_label_means() {
        let ds = generate_mixture(3, 4, 3, 30, 2.0).unwrap();
        let r = kmeans_partition(&ds.points, 4, 9, 100).unwrap();
        let means = cluster_means(&ds.points, &r.labels, 4);
        for (a, b) in means.data.iter().zip(&r.centroids.data) {
            assert!((a - b).abs() < 1e-9);
        }
        for w in r.inertia.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", r.inertia);
        }
    }

    #[test]
    fn empty_cluster_repair() {
        // duplicated points force k-means++ to fall back on repeated picks
        let pts = Mat::from_rows(&[vec![0.0], vec![0.0], vec![0.0], vec![10.0]]);
        let r = kmeans_partition(&pts, 3, 4, 20).unwrap();
        let mut counts = [0; 3];
        r.labels.iter().for_each(|&l| counts[l] += 1);
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    }

    #[test]
    fn rank_of_own_centroid() {
        let ds = generate_mixture(5, 8, 8, 8, 4.0).unwrap();
        let r = cluster_rank(ds.centroids.row(3), &ds.centroids).unwrap();
        assert_eq!(r.ranks[3], 1);
        assert_eq!(r.distances[3], 0.0);
    }

    #[test]
    fn rank_ties_prefer_lower_index() {
        let c = Mat::from_rows(&[vec![10.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let r = cluster_rank(&[0.0, 0.0], &c).unwrap();
        assert_eq!(r.ranks, vec![3, 1, 2]);
    }

    #[test]
    fn full_set_mean_rank() {
        let ds = generate_mixture(2, 8, 8, 8, 4.0).unwrap();
        let r = cluster_rank(&[0.3; 8], &ds.centroids).unwrap();
        let all: Vec<usize> = (0..8).collect();
        assert_eq!(r.mean_rank(&all), 4.5);
    }

    #[test]
    fn csv_round_trip() {
        let ds = generate_mixture(8, 3, 2, 9, 3.0).unwrap();
        let back = Dataset::from_csv_str(&ds.to_csv_string(), ds.meta()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn mixture_nll_single_component() {
        let g = GaussianMixture::new(Mat::from_rows(&[vec![0.0, 0.0]]), 1.0);
        let expected = (2.0 * std::f64::consts::PI).ln();
        assert!((g.nll(&[0.0, 0.0]) - expected).abs() < 1e-12);
        assert!((g.nll(&[1.0, 0.0]) - expected - 0.5).abs() < 1e-12);
    }
}
