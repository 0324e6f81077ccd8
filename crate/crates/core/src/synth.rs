//! Synthetic datasets with a planted perceptual metric.
//!
//! Each material gets a latent point in the unit hypercube. A view's
//! descriptor is a fixed random linear lift of that point, plus a nuisance
//! offset shared by every view rendered under the same (shape, illumination)
//! condition, plus Gaussian noise. Answers are simulated from the latent
//! distances, so the ground truth for every downstream metric is known.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use chrono::{DateTime, SecondsFormat};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::answers::{AnswerStore, Choice, TrialKind, TripletAnswer};
use crate::data::{DatasetBundle, DescriptorMatrix, MaterialId, ViewRecord};
use crate::error::{Error, Result};

const CATEGORY_BANDS: usize = 4;
const NUISANCE_SIGMA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_materials: usize,
    pub views_per_material: usize,
    pub latent_dim: usize,
    pub descriptor_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGroundTruth {
    pub material_ids: Vec<String>,
    pub latent: Vec<Vec<f64>>,
    /// Row-major `n x n` Euclidean distances between latent points.
    pub distances: Vec<f64>,
}

impl LatentGroundTruth {
    pub fn from_latent(material_ids: Vec<String>, latent: Vec<Vec<f64>>) -> Self {
        let n = latent.len();
        let mut distances = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                distances[i * n + j] = euclidean(&latent[i], &latent[j]);
            }
        }
        Self {
            material_ids,
            latent,
            distances,
        }
    }

    pub fn n(&self) -> usize {
        self.material_ids.len()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distances[i * self.n() + j]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.material_ids.iter().position(|m| m == id)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("ground truth serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<(DatasetBundle, LatentGroundTruth)> {
    let SynthConfig {
        n_materials,
        views_per_material,
        latent_dim,
        descriptor_dim,
        noise_sigma,
        seed,
    } = *config;
    if n_materials == 0 || views_per_material == 0 || latent_dim == 0 {
        return Err(Error::invalid("synthetic", "counts must be positive"));
    }
    if descriptor_dim < latent_dim {
        return Err(Error::invalid(
            "synthetic",
            "descriptor_dim must be at least latent_dim",
        ));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid(
            "synthetic",
            "noise_sigma must be a finite non-negative number",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let latent: Vec<Vec<f64>> = (0..n_materials)
        .map(|_| (0..latent_dim).map(|_| rng.random::<f64>()).collect())
        .collect();
    let lift: Vec<f64> = (0..descriptor_dim * latent_dim)
        .map(|_| std_normal.sample(&mut rng))
        .collect();

    let conditions: Vec<(String, String)> = (0..views_per_material)
        .map(|v| (format!("shape{v}"), format!("env{}", v % 2)))
        .collect();
    let offsets: Vec<Vec<f64>> = conditions
        .iter()
        .map(|_| {
            (0..descriptor_dim)
                .map(|_| NUISANCE_SIGMA * std_normal.sample(&mut rng))
                .collect()
        })
        .collect();

    let width = (n_materials as f64).log10().floor() as usize + 1;
    let ids: Vec<String> = (0..n_materials).map(|i| format!("mat{i:0width$}")).collect();
    let categories: Vec<String> = (0..CATEGORY_BANDS).map(|b| format!("band{b}")).collect();
    let materials = ids
        .iter()
        .zip(&latent)
        .map(|(id, x)| {
            let band = ((x[0] * CATEGORY_BANDS as f64) as usize).min(CATEGORY_BANDS - 1);
            MaterialId {
                id: id.clone(),
                category: categories[band].clone(),
            }
        })
        .collect();

    let mut views = Vec::with_capacity(n_materials * views_per_material);
    let mut values = Vec::with_capacity(n_materials * views_per_material * descriptor_dim);
    for (m, x) in latent.iter().enumerate() {
        for (v, (shape, env)) in conditions.iter().enumerate() {
            let row = views.len();
            for d in 0..descriptor_dim {
                let lifted: f64 = (0..latent_dim).map(|k| lift[d * latent_dim + k] * x[k]).sum();
                let noise = if noise_sigma > 0.0 {
                    noise_sigma * std_normal.sample(&mut rng)
                } else {
                    0.0
                };
                // f32 rounding keeps the binary descriptor format lossless.
                values.push((lifted + offsets[v][d] + noise) as f32 as f64);
            }
            views.push(ViewRecord {
                view_id: format!("{}-v{v}", ids[m]),
                material_id: ids[m].clone(),
                shape_tag: shape.clone(),
                illumination_tag: env.clone(),
                descriptor_row: row,
            });
        }
    }
    let descriptors = DescriptorMatrix::new(views.len(), descriptor_dim, values)?;
    let bundle = DatasetBundle::new(
        format!("synthetic-{seed}"),
        categories,
        materials,
        views,
        descriptors,
        None,
    )?;
    Ok((bundle, LatentGroundTruth::from_latent(ids, latent)))
}

pub type MaterialTriple = (String, String, String);

/// Draws `count` distinct comparisons `(r, a, b)` over `ids`; at most every
/// unordered option pair once per reference.
pub fn sample_triplets(ids: &[String], count: usize, seed: u64) -> Vec<MaterialTriple> {
    let n = ids.len();
    if n < 3 {
        return Vec::new();
    }
    let total = n * (n - 1) * (n - 2) / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample(&mut rng, total, count.min(total))
        .into_iter()
        .map(|k| {
            let pairs = (n - 1) * (n - 2) / 2;
            let r = k / pairs;
            let mut rest = k % pairs;
            // Enumerate unordered pairs (i < j) over the n-1 non-reference items.
            let mut i = 0;
            while rest >= n - 2 - i {
                rest -= n - 2 - i;
                i += 1;
            }
            let j = i + 1 + rest;
            let skip = |x: usize| if x >= r { x + 1 } else { x };
            let (a, b) = (skip(i), skip(j));
            let (a, b) = if rng.random::<bool>() { (a, b) } else { (b, a) };
            (ids[r].clone(), ids[a].clone(), ids[b].clone())
        })
        .collect()
}

/// Probability that a simulated annotator picks `a`, from latent distances.
///
/// The choice probability is the similarity quotient `s_ra / (s_ra + s_rb)`
/// with `s = 1 / (1 + d)`, sharpened by the temperature `decision_noise`:
/// the log-odds are divided by it, so 1 reproduces the plain quotient and 0
/// collapses to picking the closer option.
pub fn choice_probability(d_ra: f64, d_rb: f64, decision_noise: f64) -> f64 {
    let log_odds = (1.0 + d_rb).ln() - (1.0 + d_ra).ln();
    if decision_noise == 0.0 {
        return match log_odds.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Less) => 0.0,
            _ => 0.5,
        };
    }
    1.0 / (1.0 + (-log_odds / decision_noise).exp())
}

pub fn simulate_answers(
    truth: &LatentGroundTruth,
    triplets: &[MaterialTriple],
    votes_per_triplet: usize,
    decision_noise: f64,
    seed: u64,
) -> Result<AnswerStore> {
    if votes_per_triplet == 0 {
        return Err(Error::invalid("simulate", "votes_per_triplet must be at least 1"));
    }
    if !(decision_noise >= 0.0 && decision_noise.is_finite()) {
        return Err(Error::invalid(
            "simulate",
            "decision_noise must be finite and non-negative",
        ));
    }
    let lookup: HashMap<&str, usize> = truth
        .material_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let idx = |id: &str| {
        lookup
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownMaterial(id.to_string()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = DateTime::from_timestamp(946_684_800, 0).expect("valid epoch");
    let mut store = AnswerStore::new();
    let mut counter = 0i64;
    for (r, a, b) in triplets {
        let (ri, ai, bi) = (idx(r)?, idx(a)?, idx(b)?);
        let p = choice_probability(truth.distance(ri, ai), truth.distance(ri, bi), decision_noise);
        for _ in 0..votes_per_triplet {
            let chosen = if rng.random::<f64>() < p { Choice::A } else { Choice::B };
            let ts = base + chrono::Duration::seconds(counter);
            counter += 1;
            store.push(TripletAnswer {
                reference: r.clone(),
                option_a: a.clone(),
                option_b: b.clone(),
                chosen,
                worker: "synthetic".into(),
                kind: TrialKind::Trial,
                timestamp: ts.to_rfc3339_opts(SecondsFormat::Secs, true),
            })?;
        }
    }
    Ok(store)
}

/// Distinct-material check used by callers building triplets by hand.
pub fn triple_is_distinct(t: &MaterialTriple) -> bool {
    let set: HashSet<&str> = [t.0.as_str(), t.1.as_str(), t.2.as_str()].into_iter().collect();
    set.len() == 3
}
