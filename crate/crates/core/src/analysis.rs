//! Feature-space applications: suggestions by distance band, 2D layout,
//! k-means clustering with elbow selection, the Hopkins statistic and
//! database summarization.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::losses::squared_distance;

/// Per-view features and the per-material mean of them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureIndex {
    pub material_ids: Vec<String>,
    pub representatives: Vec<Vec<f64>>,
    pub view_ids: Vec<String>,
    pub view_material: Vec<usize>,
    pub view_features: Vec<Vec<f64>>,
}

impl FeatureIndex {
    pub fn from_model(model: &EncoderModel, bundle: &DatasetBundle) -> Result<Self> {
        let features: Vec<Vec<f64>> = (0..bundle.views.len())
            .into_par_iter()
            .map(|v| model.forward(bundle.descriptor(v)))
            .collect::<Result<_>>()?;
        let lookup = bundle.material_lookup();
        let view_material = bundle.views.iter().map(|v| lookup[v.material_id.as_str()]).collect();
        Self::from_view_features(
            bundle.materials.iter().map(|m| m.id.clone()).collect(),
            bundle.views.iter().map(|v| v.view_id.clone()).collect(),
            view_material,
            features,
        )
    }

    pub fn from_view_features(
        material_ids: Vec<String>,
        view_ids: Vec<String>,
        view_material: Vec<usize>,
        view_features: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let dim = view_features.first().map_or(0, Vec::len);
        let mut sums = vec![vec![0.0; dim]; material_ids.len()];
        let mut counts = vec![0usize; material_ids.len()];
        for (f, &m) in view_features.iter().zip(&view_material) {
            if f.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "view features".into(),
                    expected: dim,
                    found: f.len(),
                });
            }
            counts[m] += 1;
            for (s, v) in sums[m].iter_mut().zip(f) {
                *s += v;
            }
        }
        if let Some(m) = counts.iter().position(|&c| c == 0) {
            return Err(Error::MissingInput(format!(
                "material {} has no views",
                material_ids[m]
            )));
        }
        let representatives = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
            .collect();
        Ok(Self {
            material_ids,
            representatives,
            view_ids,
            view_material,
            view_features,
        })
    }

    /// One view per material with the given representative.
    pub fn from_points(material_ids: Vec<String>, points: Vec<Vec<f64>>) -> Result<Self> {
        let n = material_ids.len();
        Self::from_view_features(material_ids.clone(), material_ids, (0..n).collect(), points)
    }

    pub fn n(&self) -> usize {
        self.material_ids.len()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.material_ids
            .iter()
            .position(|m| m == id)
            .ok_or_else(|| Error::UnknownMaterial(id.to_string()))
    }

    /// Writes `view_id,material_id,f0,...` rows.
    pub fn save_view_features_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dim = self.view_features.first().map_or(0, Vec::len);
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        let mut header = vec!["view_id".to_string(), "material_id".to_string()];
        header.extend((0..dim).map(|k| format!("f{k}")));
        w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
        for ((vid, &m), f) in self.view_ids.iter().zip(&self.view_material).zip(&self.view_features) {
            let mut row = vec![vid.clone(), self.material_ids[m].clone()];
            row.extend(f.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| Error::io(path, e.into()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Near,
    Mid,
    Far,
    /// Rank quantile range `[lo, hi)`.
    Quantile(f64, f64),
}

impl Band {
    /// Whether rank `i` (0 = closest) of `m` others falls in the band.
    pub fn contains(&self, i: usize, m: usize) -> bool {
        match *self {
            Band::Near => 3 * i < m,
            Band::Mid => m <= 3 * i && 3 * i < 2 * m,
            Band::Far => 2 * m <= 3 * i,
            Band::Quantile(lo, hi) => {
                let q = i as f64 / m as f64;
                lo <= q && (q < hi || hi >= 1.0)
            }
        }
    }
}

/// Other materials ordered by squared distance to the reference
/// representative; ties keep index order.
pub fn rank(index: &FeatureIndex, reference: &str) -> Result<Vec<(usize, f64)>> {
    let r = index.index_of(reference)?;
    let mut ranked: Vec<(usize, f64)> = (0..index.n())
        .filter(|&j| j != r)
        .map(|j| {
            (
                j,
                squared_distance(&index.representatives[r], &index.representatives[j]),
            )
        })
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// Up to `count` materials drawn without replacement from the band,
/// returned closest first.
pub fn suggest(index: &FeatureIndex, reference: &str, band: Band, count: usize, seed: u64) -> Result<Vec<String>> {
    if count == 0 {
        return Err(Error::invalid("suggest", "count must be at least 1"));
    }
    if let Band::Quantile(lo, hi) = band {
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::invalid("suggest", "quantile band needs 0 <= lo < hi <= 1"));
        }
    }
    let ranked = rank(index, reference)?;
    let m = ranked.len();
    let members: Vec<usize> = (0..m).filter(|&i| band.contains(i, m)).collect();
    if members.is_empty() {
        return Err(Error::invalid(
            "suggest",
            format!("band {band:?} is empty for {m} candidates"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, members.len(), count.min(members.len()))
        .into_iter()
        .map(|k| members[k])
        .collect();
    picked.sort_unstable();
    Ok(picked
        .into_iter()
        .map(|i| index.material_ids[ranked[i].0].clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Eigenvalues of the centered scatter matrix, descending.
    pub eigenvalues: Vec<f64>,
}

/// Centered projection onto the top two principal axes. Each axis is
/// oriented so its largest-magnitude coordinate is positive; axes with a
/// negligible eigenvalue give zero coordinates.
pub fn project_2d(points: &[Vec<f64>]) -> Result<Projection> {
    let n = points.len();
    if n < 3 {
        return Err(Error::invalid("project", "need at least 3 materials"));
    }
    let dim = points[0].len();
    let mean: Vec<f64> = (0..dim)
        .map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, dim, |i, k| points[i][k] - mean[k]);
    let scatter = centered.transpose() * &centered;
    let eigen = SymmetricEigen::new(scatter);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eigen.eigenvalues[i].max(0.0)).collect();
    let top = eigenvalues.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Err(Error::invalid("project", "all points are identical"));
    }
    let mut coords = vec![[0.0; 2]; n];
    for axis in 0..2.min(dim) {
        if eigenvalues[axis] <= 1e-12 * top {
            continue;
        }
        let v = eigen.eigenvectors.column(order[axis]);
        let proj: Vec<f64> = (0..n).map(|i| centered.row(i).dot(&v.transpose())).collect();
        let pivot = proj.iter().enumerate().fold(
            (0, 0.0f64),
            |best, (i, &x)| if x.abs() > best.1.abs() { (i, x) } else { best },
        );
        let sign = if pivot.1 < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            coords[i][axis] = sign * proj[i];
        }
    }
    Ok(Projection { coords, eigenvalues })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iters: 300,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub ssw: f64,
    pub explained_variance: f64,
}

fn total_sum_of_squares(points: &[Vec<f64>]) -> f64 {
    let n = points.len() as f64;
    let dim = points[0].len();
    let mean: Vec<f64> = (0..dim).map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n).collect();
    points.iter().map(|p| squared_distance(p, &mean)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(c, x)| (c, squared_distance(p, x)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Lloyd iterations from `centroids`. An emptied cluster is re-seeded with
/// the point farthest from its centroid.
fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iters: usize, tol: f64, sst: f64) -> ClusteringResult {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignments = vec![0; points.len()];
    for _ in 0..max_iters {
        for (a, p) in assignments.iter_mut().zip(points) {
            *a = nearest(p, &centroids).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut next: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .zip(&centroids)
            .map(|((s, &c), old)| {
                if c == 0 {
                    old.clone()
                } else {
                    s.into_iter().map(|v| v / c as f64).collect()
                }
            })
            .collect();
        for c in 0..k {
            if counts[c] == 0 {
                let far = farthest_point(points, &assignments, &next);
                next[c] = points[far].clone();
                assignments[far] = c;
            }
        }
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < tol {
            break;
        }
    }
    for (a, p) in assignments.iter_mut().zip(points) {
        *a = nearest(p, &centroids).0;
    }
    let ssw: f64 = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum();
    ClusteringResult {
        k,
        assignments,
        explained_variance: explained_variance(ssw, sst),
        centroids,
        ssw,
    }
}

fn explained_variance(ssw: f64, sst: f64) -> f64 {
    if sst <= 0.0 {
        1.0
    } else {
        (1.0 - ssw / sst).clamp(0.0, 1.0)
    }
}

fn farthest_point(points: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> usize {
    points
        .iter()
        .zip(assignments)
        .enumerate()
        .map(|(i, (p, &a))| (i, squared_distance(p, &centroids[a])))
        .fold(
            (0, f64::NEG_INFINITY),
            |best, cur| if cur.1 > best.1 { cur } else { best },
        )
        .0
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &points[next]));
        }
    }
    centroids
}

fn check_points(points: &[Vec<f64>], k: usize) -> Result<()> {
    if k == 0 || k > points.len() {
        return Err(Error::invalid(
            "kmeans",
            format!("k = {k} with {} points", points.len()),
        ));
    }
    Ok(())
}

/// Best of `restarts` k-means++ / Lloyd runs by within-cluster sum of squares.
pub fn kmeans(points: &[Vec<f64>], k: usize, config: &KMeansConfig) -> Result<ClusteringResult> {
    check_points(points, k)?;
    let sst = total_sum_of_squares(points);
    let runs: Vec<ClusteringResult> = (0..config.restarts.max(1))
        .into_par_iter()
        .map(|restart| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(restart as u64);
            let init = kmeans_plus_plus(points, k, &mut rng);
            lloyd(points, init, config.max_iters, config.tol, sst)
        })
        .collect();
    Ok(runs
        .into_iter()
        .reduce(|best, r| if r.ssw < best.ssw { r } else { best })
        .expect("at least one restart"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowResult {
    pub k: usize,
    /// False when no `k <= k_max` reached the threshold; `k` is then `k_max`.
    pub reached: bool,
    /// Explained variance for `k = 1..` up to the returned `k`.
    pub explained_variance: Vec<f64>,
}

/// Smallest `k` whose nested k-means solution explains at least
/// `threshold` of the variance. The `k + 1` solution starts from the `k`
/// centroids plus the point farthest from its centroid, so the explained
/// variance never decreases with `k`.
pub fn elbow_k(points: &[Vec<f64>], threshold: f64, k_max: usize, config: &KMeansConfig) -> Result<ElbowResult> {
    check_points(points, k_max)?;
    let sst = total_sum_of_squares(points);
    let dim = points[0].len();
    let mean: Vec<f64> = (0..dim)
        .map(|k| points.iter().map(|p| p[k]).sum::<f64>() / points.len() as f64)
        .collect();
    let mut current = lloyd(points, vec![mean], config.max_iters, config.tol, sst);
    let mut curve = vec![current.explained_variance];
    while current.explained_variance < threshold && current.k < k_max {
        let far = farthest_point(points, &current.assignments, &current.centroids);
        let mut init = current.centroids.clone();
        init.push(points[far].clone());
        let next = lloyd(points, init, config.max_iters, config.tol, sst);
        // Lloyd never raises the objective of its starting assignment.
        debug_assert!(next.ssw <= current.ssw + 1e-9 * sst.max(1.0));
        curve.push(next.explained_variance);
        current = next;
    }
    Ok(ElbowResult {
        k: current.k,
        reached: current.explained_variance >= threshold,
        explained_variance: curve,
    })
}

/// The member closest to each centroid; ties go to the smaller material id.
pub fn summarize(index: &FeatureIndex, k: usize, config: &KMeansConfig) -> Result<Vec<String>> {
    let result = kmeans(&index.representatives, k, config)?;
    let mut picks = Vec::with_capacity(k);
    for c in 0..k {
        let best = (0..index.n())
            .filter(|&i| result.assignments[i] == c)
            .map(|i| {
                (
                    squared_distance(&index.representatives[i], &result.centroids[c]),
                    &index.material_ids[i],
                )
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        if let Some((_, id)) = best {
            picks.push(id.clone());
        }
    }
    Ok(picks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HopkinsConfig {
    pub sample_fraction: f64,
    pub min_sample: usize,
    pub max_sample: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for HopkinsConfig {
    fn default() -> Self {
        Self {
            sample_fraction: 0.1,
            min_sample: 5,
            max_sample: 50,
            repetitions: 100,
            seed: 0,
        }
    }
}

impl HopkinsConfig {
    pub fn sample_size(&self, n: usize) -> usize {
        ((self.sample_fraction * n as f64).round() as usize)
            .clamp(self.min_sample, self.max_sample)
            .min(n - 1)
    }
}

/// `sum u / (sum u + sum w)`.
pub fn hopkins_statistic(uniform_distances: &[f64], data_distances: &[f64]) -> f64 {
    let u: f64 = uniform_distances.iter().sum();
    let w: f64 = data_distances.iter().sum();
    u / (u + w)
}

/// Nearest-neighbour distances for one repetition: `(u, w)`, uniform
/// probes to the data and sampled data points to the rest of the data.
pub fn hopkins_draws(points: &[Vec<f64>], m: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let dim = points[0].len();
    let lo: Vec<f64> = (0..dim)
        .map(|k| points.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min))
        .collect();
    let hi: Vec<f64> = (0..dim)
        .map(|k| points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let nn = |q: &[f64], skip: Option<usize>| {
        points
            .iter()
            .enumerate()
            .filter(|(j, _)| Some(*j) != skip)
            .map(|(_, p)| squared_distance(q, p))
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    };
    let w = sample(rng, points.len(), m)
        .into_iter()
        .map(|i| nn(&points[i], Some(i)))
        .collect();
    let u = (0..m)
        .map(|_| {
            let probe: Vec<f64> = (0..dim)
                .map(|k| {
                    if hi[k] > lo[k] {
                        rng.random_range(lo[k]..hi[k])
                    } else {
                        lo[k]
                    }
                })
                .collect();
            nn(&probe, None)
        })
        .collect();
    (u, w)
}

/// Mean Hopkins statistic over independent repetitions.
pub fn hopkins(points: &[Vec<f64>], config: &HopkinsConfig) -> Result<f64> {
    let n = points.len();
    if n < 10 {
        return Err(Error::invalid("hopkins", format!("need at least 10 points, have {n}")));
    }
    if config.repetitions == 0 {
        return Err(Error::invalid("hopkins", "repetitions must be positive"));
    }
    let dim = points[0].len();
    let degenerate = (0..dim).all(|k| points.iter().all(|p| p[k] == points[0][k]));
    if degenerate {
        return Err(Error::invalid("hopkins", "bounding box is degenerate"));
    }
    let m = config.sample_size(n);
    let values: Vec<f64> = (0..config.repetitions)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(rep as u64);
            let (u, w) = hopkins_draws(points, m, &mut rng);
            hopkins_statistic(&u, &w)
        })
        .collect();
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(header).map_err(|e| Error::io(path, e.into()))?;
    for row in rows {
        w.write_record(&row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_projection_csv(ids: &[String], coords: &[[f64; 2]], path: impl AsRef<Path>) -> Result<()> {
    write_rows(
        path.as_ref(),
        &["material_id", "x", "y"],
        ids.iter()
            .zip(coords)
            .map(|(id, c)| vec![id.clone(), c[0].to_string(), c[1].to_string()]),
    )
}

pub fn save_clusters_csv(ids: &[String], assignments: &[usize], path: impl AsRef<Path>) -> Result<()> {
    write_rows(
        path.as_ref(),
        &["material_id", "cluster"],
        ids.iter()
            .zip(assignments)
            .map(|(id, c)| vec![id.clone(), c.to_string()]),
    )
}

/// One material id per line.
pub fn save_summary(ids: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = ids.join("\n");
    out.push('\n');
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopkinsReport {
    pub value: f64,
    pub sample_size: usize,
    pub config: HopkinsConfig,
}
