//! t-distributed stochastic triplet embedding of collected answers.
//!
//! Points are fitted by monotone gradient ascent on the vote log-likelihood
//! `sum log p(chosen)` with `p = k(d_rc) / (k(d_rc) + k(d_ro))` and the
//! Student-t kernel `k(d) = (1 + d^2 / alpha)^(-(alpha + 1) / 2)`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::answers::AnswerStore;
use crate::error::{Error, Result};
use crate::metrics::PredictorDistances;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsteConfig {
    pub alpha: f64,
    pub dim: usize,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Step halvings tried before declaring that no ascent step exists.
    pub max_halvings: usize,
    /// Stop once an accepted step improves the mean log-likelihood by less.
    pub tolerance: f64,
}

impl Default for TsteConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            dim: 2,
            learning_rate: 0.1,
            max_iters: 1000,
            seed: 0,
            max_halvings: 40,
            tolerance: 1e-12,
        }
    }
}

impl TsteConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("tste config", "alpha must be positive"));
        }
        if self.dim == 0 {
            return Err(Error::invalid("tste config", "dim must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("tste config", "learning rate must be positive"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::invalid("tste config", "tolerance must be non-negative"));
        }
        Ok(())
    }
}

/// Student-t kernel of a squared distance.
pub fn kernel(squared: f64, alpha: f64) -> f64 {
    (1.0 + squared / alpha).powf(-(alpha + 1.0) / 2.0)
}

fn log_kernel(squared: f64, alpha: f64) -> f64 {
    -(alpha + 1.0) / 2.0 * (squared / alpha).ln_1p()
}

fn squared(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Probability that `x_a` is judged closer to `x_r` than `x_b`.
pub fn tste_probability(x_r: &[f64], x_a: &[f64], x_b: &[f64], alpha: f64) -> f64 {
    probability_from_squared(squared(x_r, x_a), squared(x_r, x_b), alpha)
}

pub(crate) fn probability_from_squared(q_ra: f64, q_rb: f64, alpha: f64) -> f64 {
    // The larger side is computed directly and the smaller as its exact
    // complement, so swapping a and b gives 1 - p bit for bit.
    let (lk_a, lk_b) = (log_kernel(q_ra, alpha), log_kernel(q_rb, alpha));
    if lk_a >= lk_b {
        1.0 / (1.0 + (lk_b - lk_a).exp())
    } else {
        1.0 - 1.0 / (1.0 + (lk_a - lk_b).exp())
    }
}

/// `(reference, chosen, other, votes)` over material indices.
pub type WeightedVote = (usize, usize, usize, u32);

/// Groups the answers into weighted votes over `material_ids`.
pub fn weighted_votes(answers: &AnswerStore, material_ids: &[String]) -> Result<Vec<WeightedVote>> {
    let lookup: std::collections::HashMap<&str, usize> =
        material_ids.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();
    let idx = |id: &str| {
        lookup
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownMaterial(id.to_string()))
    };
    let mut votes = Vec::new();
    for cmp in answers.comparisons() {
        let (r, f, s) = (idx(&cmp.key.reference)?, idx(&cmp.key.first)?, idx(&cmp.key.second)?);
        if cmp.tally.first > 0 {
            votes.push((r, f, s, cmp.tally.first));
        }
        if cmp.tally.second > 0 {
            votes.push((r, s, f, cmp.tally.second));
        }
    }
    Ok(votes)
}

/// `sum over votes of log p(chosen)`.
pub fn log_likelihood(points: &[Vec<f64>], votes: &[WeightedVote], alpha: f64) -> f64 {
    votes
        .iter()
        .map(|&(r, c, o, w)| {
            let lk_c = log_kernel(squared(&points[r], &points[c]), alpha);
            let lk_o = log_kernel(squared(&points[r], &points[o]), alpha);
            // log p = -log(1 + k_o / k_c)
            w as f64 * -(lk_o - lk_c).exp().ln_1p()
        })
        .sum()
}

/// Gradient of [`log_likelihood`] with respect to every point.
pub fn log_likelihood_gradient(points: &[Vec<f64>], votes: &[WeightedVote], alpha: f64) -> Vec<Vec<f64>> {
    let dim = points.first().map_or(0, Vec::len);
    let mut grad = vec![vec![0.0; dim]; points.len()];
    // d log k / d q for squared distance q.
    let g = |q: f64| -(alpha + 1.0) / (2.0 * (alpha + q));
    for &(r, c, o, w) in votes {
        let q_rc = squared(&points[r], &points[c]);
        let q_ro = squared(&points[r], &points[o]);
        let p = probability_from_squared(q_rc, q_ro, alpha);
        let w = w as f64;
        let by_q_rc = w * (1.0 - p) * g(q_rc);
        let by_q_ro = -w * (1.0 - p) * g(q_ro);
        for k in 0..dim {
            let drc = 2.0 * (points[r][k] - points[c][k]);
            let dro = 2.0 * (points[r][k] - points[o][k]);
            grad[r][k] += by_q_rc * drc + by_q_ro * dro;
            grad[c][k] -= by_q_rc * drc;
            grad[o][k] -= by_q_ro * dro;
        }
    }
    grad
}

/// Fraction of votes whose chosen side is strictly closer in the embedding.
pub fn satisfied_fraction(points: &[Vec<f64>], votes: &[WeightedVote]) -> f64 {
    let mut total = 0u64;
    let mut ok = 0u64;
    for &(r, c, o, w) in votes {
        total += w as u64;
        if squared(&points[r], &points[c]) < squared(&points[r], &points[o]) {
            ok += w as u64;
        }
    }
    if total == 0 {
        0.0
    } else {
        ok as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsteEmbedding {
    pub material_ids: Vec<String>,
    pub points: Vec<Vec<f64>>,
    pub alpha: f64,
    pub dim: usize,
    pub seed: u64,
    pub log_likelihood: f64,
    pub satisfied_fraction: f64,
    pub iterations: usize,
    /// Set when no step size produced an ascent before the iteration budget
    /// ran out; the points are the best found.
    pub stalled: bool,
    /// Log-likelihood after initialization and after every accepted step.
    pub trace: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    alpha: f64,
    dim: usize,
    loglik: f64,
    satisfied_fraction: f64,
    seed: u64,
}

pub fn tste_fit(answers: &AnswerStore, config: &TsteConfig) -> Result<TsteEmbedding> {
    tste_fit_with(answers, &answers.material_ids(), config, None)
}

/// Fits over `material_ids` (which may include materials without answers).
/// With `warm_start`, points of materials present there are reused and the
/// rest are freshly initialized.
pub fn tste_fit_with(
    answers: &AnswerStore,
    material_ids: &[String],
    config: &TsteConfig,
    warm_start: Option<&TsteEmbedding>,
) -> Result<TsteEmbedding> {
    config.validate()?;
    if answers.is_empty() {
        return Err(Error::MissingInput("tSTE needs at least one answer".into()));
    }
    let votes = weighted_votes(answers, material_ids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    let mut points: Vec<Vec<f64>> = material_ids
        .iter()
        .map(|_| (0..config.dim).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    if let Some(prev) = warm_start {
        if prev.dim != config.dim {
            return Err(Error::DimensionMismatch {
                what: "tSTE warm start".into(),
                expected: config.dim,
                found: prev.dim,
            });
        }
        for (i, id) in material_ids.iter().enumerate() {
            if let Some(j) = prev.material_ids.iter().position(|m| m == id) {
                points[i].clone_from(&prev.points[j]);
            }
        }
    }

    let n_votes: f64 = votes.iter().map(|v| v.3 as f64).sum();
    let alpha = config.alpha;
    let mut ll = log_likelihood(&points, &votes, alpha);
    let mut trace = vec![ll];
    let mut step = config.learning_rate;
    let mut stalled = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        // Ascend the per-vote mean so the step size is independent of corpus size.
        let grad = log_likelihood_gradient(&points, &votes, alpha);
        let mut accepted = None;
        for _ in 0..=config.max_halvings {
            let candidate: Vec<Vec<f64>> = points
                .iter()
                .zip(&grad)
                .map(|(x, g)| x.iter().zip(g).map(|(a, b)| a + step / n_votes * b).collect())
                .collect();
            let cand_ll = log_likelihood(&candidate, &votes, alpha);
            if cand_ll >= ll && cand_ll.is_finite() {
                accepted = Some((candidate, cand_ll));
                break;
            }
            step /= 2.0;
        }
        let Some((candidate, cand_ll)) = accepted else {
            stalled = true;
            break;
        };
        let gain = (cand_ll - ll) / n_votes;
        points = candidate;
        ll = cand_ll;
        trace.push(ll);
        step *= 1.1;
        if gain < config.tolerance {
            break;
        }
    }
    Ok(TsteEmbedding {
        material_ids: material_ids.to_vec(),
        satisfied_fraction: satisfied_fraction(&points, &votes),
        points,
        alpha,
        dim: config.dim,
        seed: config.seed,
        log_likelihood: ll,
        iterations,
        stalled,
        trace,
    })
}

impl TsteEmbedding {
    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.material_ids
            .iter()
            .position(|m| m == id)
            .ok_or_else(|| Error::UnknownMaterial(id.to_string()))
    }

    pub fn probability(&self, r: &str, a: &str, b: &str) -> Result<f64> {
        let (r, a, b) = (self.index_of(r)?, self.index_of(a)?, self.index_of(b)?);
        Ok(tste_probability(
            &self.points[r],
            &self.points[a],
            &self.points[b],
            self.alpha,
        ))
    }

    /// Pairwise Euclidean distances between material points.
    pub fn distance_matrix(&self) -> Result<PredictorDistances> {
        let n = self.points.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = squared(&self.points[i], &self.points[j]).sqrt();
                values[i * n + j] = d;
                values[j * n + i] = d;
            }
        }
        PredictorDistances::new(self.material_ids.clone(), values)
    }

    fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("json")
    }

    /// Writes `material_id,x0,...` CSV plus a JSON sidecar next to it.
    pub fn save(&self, csv_path: impl AsRef<Path>) -> Result<()> {
        let path = csv_path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        let mut header = vec!["material_id".to_string()];
        header.extend((0..self.dim).map(|k| format!("x{k}")));
        w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
        for (id, p) in self.material_ids.iter().zip(&self.points) {
            let mut row = vec![id.clone()];
            row.extend(p.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| Error::io(path, e.into()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let sidecar = Sidecar {
            alpha: self.alpha,
            dim: self.dim,
            loglik: self.log_likelihood,
            satisfied_fraction: self.satisfied_fraction,
            seed: self.seed,
        };
        let side = Self::sidecar_path(path);
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
    }

    /// Loads points and sidecar; the fit trace is not persisted.
    pub fn load(csv_path: impl AsRef<Path>) -> Result<Self> {
        let path = csv_path.as_ref();
        let side = Self::sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: side.display().to_string(),
            message: e.to_string(),
        })?;
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        let mut material_ids = Vec::new();
        let mut points = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let location = format!("{}:{}", path.display(), line + 2);
            let record = record.map_err(|e| Error::Parse {
                location: location.clone(),
                message: e.to_string(),
            })?;
            if record.len() != sidecar.dim + 1 {
                return Err(Error::DimensionMismatch {
                    what: location,
                    expected: sidecar.dim + 1,
                    found: record.len(),
                });
            }
            material_ids.push(record[0].to_string());
            let p = record
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    location: location.clone(),
                    message: e.to_string(),
                })?;
            crate::error::check_finite(&p, |k| format!("{location}, column x{k}"))?;
            points.push(p);
        }
        Ok(Self {
            material_ids,
            points,
            alpha: sidecar.alpha,
            dim: sidecar.dim,
            seed: sidecar.seed,
            log_likelihood: sidecar.loglik,
            satisfied_fraction: sidecar.satisfied_fraction,
            iterations: 0,
            stalled: false,
            trace: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answers::{Choice, TrialKind, TripletAnswer};
    use rand::Rng;

    #[test]
    fn kernel_example() {
        // k(1) = 1.2^-3 and k(2) = 1.8^-3 for alpha = 5.
        let p = tste_probability(&[0.0], &[1.0], &[-2.0], 5.0);
        let expected = 1.2f64.powi(-3) / (1.2f64.powi(-3) + 1.8f64.powi(-3));
        assert!((p - expected).abs() < 1e-15);
        assert!((p - 0.771429).abs() < 1e-6);
    }

    #[test]
    fn symmetric_and_monotone() {
        assert_eq!(tste_probability(&[0.0, 0.0], &[1.0, 0.0], &[0.0, -1.0], 5.0), 0.5);
        assert!(tste_probability(&[1.0, 1.0], &[1.0, 1.0], &[2.0, 0.0], 5.0) > 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let pt = |rng: &mut ChaCha8Rng| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let (r, a, b) = (pt(&mut rng), pt(&mut rng), pt(&mut rng));
            assert_eq!(
                tste_probability(&r, &a, &b, 5.0) + tste_probability(&r, &b, &a, 5.0),
                1.0
            );
        }
    }

    fn answer(r: &str, a: &str, b: &str) -> TripletAnswer {
        TripletAnswer {
            reference: r.into(),
            option_a: a.into(),
            option_b: b.into(),
            chosen: Choice::A,
            worker: "w".into(),
            kind: TrialKind::Trial,
            timestamp: "t".into(),
        }
    }

    #[test]
    fn single_answer_is_satisfied() {
        let store = AnswerStore::from_answers([answer("r", "a", "b")]).unwrap();
        let emb = tste_fit(&store, &TsteConfig::default()).unwrap();
        assert_eq!(emb.satisfied_fraction, 1.0);
        assert!(emb.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let points: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let votes = vec![(0, 1, 2, 2), (3, 4, 5, 1), (1, 0, 5, 3), (2, 3, 0, 1)];
        let grad = log_likelihood_gradient(&points, &votes, 5.0);
        let h = 1e-5;
        for i in 0..6 {
            for k in 0..3 {
                let mut plus = points.clone();
                plus[i][k] += h;
                let mut minus = points.clone();
                minus[i][k] -= h;
                let fd = (log_likelihood(&plus, &votes, 5.0) - log_likelihood(&minus, &votes, 5.0)) / (2.0 * h);
                let denom = fd.abs().max(grad[i][k].abs()).max(1e-8);
                assert!(
                    (fd - grad[i][k]).abs() / denom < 1e-5,
                    "{i},{k}: {fd} vs {}",
                    grad[i][k]
                );
            }
        }
    }

    #[test]
    fn distance_matrix_cases() {
        let emb = TsteEmbedding {
            material_ids: vec!["a".into(), "b".into(), "c".into()],
            points: vec![vec![0.0], vec![1.0], vec![3.0]],
            alpha: 5.0,
            dim: 1,
            seed: 0,
            log_likelihood: 0.0,
            satisfied_fraction: 1.0,
            iterations: 0,
            stalled: false,
            trace: vec![],
        };
        let d = emb.distance_matrix().unwrap();
        assert_eq!((d.get(0, 1), d.get(0, 2), d.get(1, 2)), (1.0, 3.0, 2.0));
    }

    #[test]
    fn save_load_round_trip() {
        let store = AnswerStore::from_answers([answer("r", "a", "b"), answer("a", "b", "r")]).unwrap();
        let emb = tste_fit(&store, &TsteConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        emb.save(&path).unwrap();
        let back = TsteEmbedding::load(&path).unwrap();
        assert_eq!(back.points, emb.points);
        assert_eq!(back.material_ids, emb.material_ids);
        assert_eq!(back.log_likelihood, emb.log_likelihood);
    }
}
