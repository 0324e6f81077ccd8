//! Evaluation of similarity predictors against collected answers.
//!
//! Predictors are queried at the comparison level: `choose(r, x, y)` picks
//! the option closer to `r` and `probability(r, x, y)` is the predicted
//! probability that `x` is chosen over `y`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::answers::{AnswerStore, Choice};
use crate::data::{DatasetBundle, MaterialId};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::losses::{squared_distance, PROB_FLOOR};
use crate::synth::LatentGroundTruth;

const SYMMETRY_TOL: f64 = 1e-9;

/// Symmetric pairwise material distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictorDistances {
    material_ids: Vec<String>,
    values: Vec<f64>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl PredictorDistances {
    pub fn new(material_ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let n = material_ids.len();
        if values.len() != n * n {
            return Err(Error::DimensionMismatch {
                what: "distance matrix entries".into(),
                expected: n * n,
                found: values.len(),
            });
        }
        crate::error::check_finite(&values, |k| format!("distance ({}, {})", k / n.max(1), k % n.max(1)))?;
        for i in 0..n {
            if values[i * n + i] != 0.0 {
                return Err(Error::invalid(format!("distance ({i}, {i})"), "diagonal must be zero"));
            }
            for j in 0..n {
                let v = values[i * n + j];
                if v < 0.0 {
                    return Err(Error::invalid(
                        format!("distance ({i}, {j})"),
                        "distances must be non-negative",
                    ));
                }
                if (v - values[j * n + i]).abs() > SYMMETRY_TOL {
                    return Err(Error::invalid(
                        format!("distance ({i}, {j})"),
                        "matrix is not symmetric",
                    ));
                }
            }
        }
        let mut lookup = HashMap::with_capacity(n);
        for (i, id) in material_ids.iter().enumerate() {
            if lookup.insert(id.clone(), i).is_some() {
                return Err(Error::invalid("distance matrix", format!("duplicate material {id}")));
            }
        }
        Ok(Self {
            material_ids,
            values,
            lookup,
        })
    }

    pub fn from_truth(truth: &LatentGroundTruth) -> Result<Self> {
        Self::new(truth.material_ids.clone(), truth.distances.clone())
    }

    pub fn n(&self) -> usize {
        self.material_ids.len()
    }

    pub fn material_ids(&self) -> &[String] {
        &self.material_ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n() + j]
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.lookup
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownMaterial(id.to_string()))
    }

    pub fn distance(&self, a: &str, b: &str) -> Result<f64> {
        Ok(self.get(self.index_of(a)?, self.index_of(b)?))
    }

    /// Closer option wins; an exact tie goes to `x`.
    pub fn choose(&self, r: &str, x: &str, y: &str) -> Result<Choice> {
        let (dx, dy) = (self.distance(r, x)?, self.distance(r, y)?);
        Ok(if dy < dx { Choice::B } else { Choice::A })
    }

    /// Similarity quotient `s_rx / (s_rx + s_ry)` with `s = 1 / (1 + d)`.
    pub fn similarity_probability(&self, r: &str, x: &str, y: &str) -> Result<f64> {
        let (dx, dy) = (self.distance(r, x)?, self.distance(r, y)?);
        let (sx, sy) = (1.0 / (1.0 + dx), 1.0 / (1.0 + dy));
        Ok(sx / (sx + sy))
    }

    /// Writes `material_id,<id0>,<id1>,...` rows.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        let mut header = vec!["material_id".to_string()];
        header.extend(self.material_ids.iter().cloned());
        w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
        for (i, id) in self.material_ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend((0..self.n()).map(|j| self.get(i, j).to_string()));
            w.write_record(&row).map_err(|e| Error::io(path, e.into()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Entry `(i, j)` is the mean squared feature distance over every pairing
/// of a view of `i` with a view of `j`.
pub fn distance_matrix_from_model(model: &EncoderModel, bundle: &DatasetBundle) -> Result<PredictorDistances> {
    let features: Vec<Vec<f64>> = (0..bundle.views.len())
        .into_par_iter()
        .map(|v| model.forward(bundle.descriptor(v)))
        .collect::<Result<_>>()?;
    distance_matrix_from_features(bundle, &features)
}

pub fn distance_matrix_from_features(bundle: &DatasetBundle, features: &[Vec<f64>]) -> Result<PredictorDistances> {
    let by_material = bundle.views_by_material();
    if let Some(m) = by_material.iter().position(Vec::is_empty) {
        return Err(Error::MissingInput(format!(
            "material {} has no views",
            bundle.materials[m].id
        )));
    }
    let n = by_material.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let mut sum = 0.0;
            for &vi in &by_material[i] {
                for &vj in &by_material[j] {
                    sum += squared_distance(&features[vi], &features[vj]);
                }
            }
            let d = sum / (by_material[i].len() * by_material[j].len()) as f64;
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    PredictorDistances::new(bundle.materials.iter().map(|m| m.id.clone()).collect(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatrixError {
    pub mean_abs_error: f64,
    pub ci95: f64,
    pub pairs: usize,
}

/// Mean absolute difference over `i < j` after dividing each matrix by its
/// own maximum; `ci95` is the normal-approximation half-width.
pub fn mean_matrix_error(candidate: &PredictorDistances, reference: &PredictorDistances) -> Result<MatrixError> {
    let n = reference.n();
    if candidate.n() != n {
        return Err(Error::DimensionMismatch {
            what: "distance matrix materials".into(),
            expected: n,
            found: candidate.n(),
        });
    }
    let order: Vec<usize> = reference
        .material_ids()
        .iter()
        .map(|id| candidate.index_of(id))
        .collect::<Result<_>>()?;
    let max_of = |m: &PredictorDistances, what: &str| {
        let max = m.values().iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            Ok(max)
        } else {
            Err(Error::invalid(what, "distance matrix is all zero"))
        }
    };
    let (cmax, rmax) = (max_of(candidate, "candidate")?, max_of(reference, "reference")?);
    let mut errors = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let c = candidate.get(order[i], order[j]) / cmax;
            let r = reference.get(i, j) / rmax;
            errors.push((c - r).abs());
        }
    }
    if errors.is_empty() {
        return Err(Error::invalid("distance matrix", "needs at least two materials"));
    }
    let k = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / k;
    let ci95 = if errors.len() > 1 {
        let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (k - 1.0);
        1.96 * var.sqrt() / k.sqrt()
    } else {
        0.0
    };
    Ok(MatrixError {
        mean_abs_error: mean,
        ci95,
        pairs: errors.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub raw: f64,
    /// `None` when every comparison is tied.
    pub majority: Option<f64>,
    pub votes: usize,
    pub majority_comparisons: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerplexityMode {
    Raw,
    Majority,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub value: f64,
    pub terms: usize,
    /// Probabilities below the floor that were clamped before the log.
    pub clamped: usize,
}

#[derive(Debug, Default, Clone, Copy)]
struct Counts {
    votes: u64,
    raw_hits: u64,
    comparisons: u64,
    majority_hits: u64,
}

impl Counts {
    fn add(&mut self, votes: u64, raw_hits: u64, majority: Option<bool>) {
        self.votes += votes;
        self.raw_hits += raw_hits;
        if let Some(hit) = majority {
            self.comparisons += 1;
            self.majority_hits += hit as u64;
        }
    }

    fn accuracy(&self) -> Accuracy {
        Accuracy {
            raw: if self.votes == 0 {
                0.0
            } else {
                self.raw_hits as f64 / self.votes as f64
            },
            majority: (self.comparisons > 0).then(|| self.majority_hits as f64 / self.comparisons as f64),
            votes: self.votes as usize,
            majority_comparisons: self.comparisons as usize,
        }
    }
}

/// Scores one comparison: `(votes, votes matching the prediction, majority hit)`.
fn score(
    cmp: &crate::answers::Comparison<'_>,
    choose: &impl Fn(&str, &str, &str) -> Result<Choice>,
) -> Result<(u64, u64, Option<bool>)> {
    let key = cmp.key;
    let predicted = match choose(&key.reference, &key.first, &key.second)? {
        Choice::A => &key.first,
        Choice::B => &key.second,
    };
    let hits = cmp.votes_for(predicted) as u64;
    let majority = cmp.majority().map(|m| m == predicted);
    Ok((cmp.tally.total() as u64, hits, majority))
}

pub fn accuracy(answers: &AnswerStore, choose: impl Fn(&str, &str, &str) -> Result<Choice>) -> Result<Accuracy> {
    if answers.is_empty() {
        return Err(Error::MissingInput("no answers to evaluate".into()));
    }
    let mut counts = Counts::default();
    for cmp in answers.comparisons() {
        let (v, h, m) = score(&cmp, &choose)?;
        counts.add(v, h, m);
    }
    Ok(counts.accuracy())
}

/// Picks the modal vote; ties go to the first option of the comparison key.
pub fn oracle(answers: &AnswerStore) -> impl Fn(&str, &str, &str) -> Result<Choice> + '_ {
    move |r, x, y| {
        let tally = answers
            .tally(&crate::answers::ComparisonKey::new(r, x, y))
            .ok_or_else(|| Error::MissingInput(format!("no answers for ({r}, {x}, {y})")))?;
        let (x_votes, y_votes) = if x <= y {
            (tally.first, tally.second)
        } else {
            (tally.second, tally.first)
        };
        Ok(if y_votes > x_votes { Choice::B } else { Choice::A })
    }
}

fn checked_probability(p: f64, r: &str, x: &str, y: &str) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(
            format!("prediction ({r}, {x}, {y})"),
            format!("probability {p} outside [0, 1]"),
        ));
    }
    Ok(p)
}

/// `2^(-mean log2 p_chosen)`; in majority mode one term per non-tied
/// comparison using the modal side.
pub fn perplexity(
    answers: &AnswerStore,
    probability: impl Fn(&str, &str, &str) -> Result<f64>,
    mode: PerplexityMode,
) -> Result<Perplexity> {
    if answers.is_empty() {
        return Err(Error::MissingInput("no answers to evaluate".into()));
    }
    let mut sum = 0.0;
    let mut terms = 0usize;
    let mut clamped = 0usize;
    let mut log2 = |p: f64, weight: u32| {
        if weight == 0 {
            return;
        }
        let q = if p < PROB_FLOOR {
            clamped += weight as usize;
            PROB_FLOOR
        } else {
            p
        };
        sum += weight as f64 * q.log2();
        terms += weight as usize;
    };
    for cmp in answers.comparisons() {
        let key = cmp.key;
        match mode {
            PerplexityMode::Raw => {
                let r = &key.reference;
                let p_first =
                    checked_probability(probability(r, &key.first, &key.second)?, r, &key.first, &key.second)?;
                let p_second =
                    checked_probability(probability(r, &key.second, &key.first)?, r, &key.second, &key.first)?;
                log2(p_first, cmp.tally.first);
                log2(p_second, cmp.tally.second);
            }
            PerplexityMode::Majority => {
                let Some(m) = cmp.majority() else { continue };
                let other = if m == key.first { &key.second } else { &key.first };
                let p = checked_probability(probability(&key.reference, m, other)?, &key.reference, m, other)?;
                log2(p, 1);
            }
        }
    }
    if terms == 0 {
        return Err(Error::MissingInput("every comparison is tied".into()));
    }
    Ok(Perplexity {
        value: (-sum / terms as f64).exp2(),
        terms,
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub materials: usize,
    pub answers: usize,
    pub majority_comparisons: usize,
    pub raw: f64,
    pub majority: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub predictor: String,
    pub n_answers: usize,
    pub n_majority_comparisons: usize,
    pub raw_accuracy: f64,
    pub majority_accuracy: Option<f64>,
    pub perplexity_raw: Option<f64>,
    pub perplexity_majority: Option<f64>,
    pub clamped_probabilities: usize,
    /// Comparisons are grouped by the category of their reference material.
    pub per_category: BTreeMap<String, CategoryStats>,
    pub matrix_error: Option<MatrixError>,
}

impl EvaluationReport {
    /// Evaluates `choose` (and `probability` when given) over `answers`.
    pub fn evaluate(
        predictor: impl Into<String>,
        answers: &AnswerStore,
        materials: &[MaterialId],
        choose: impl Fn(&str, &str, &str) -> Result<Choice>,
        probability: Option<&dyn Fn(&str, &str, &str) -> Result<f64>>,
    ) -> Result<Self> {
        if answers.is_empty() {
            return Err(Error::MissingInput("no answers to evaluate".into()));
        }
        let category_of: HashMap<&str, &str> = materials.iter().map(|m| (m.id.as_str(), m.category.as_str())).collect();
        let mut material_counts: BTreeMap<&str, usize> = BTreeMap::new();
        for m in materials {
            *material_counts.entry(&m.category).or_default() += 1;
        }
        let mut total = Counts::default();
        let mut by_category: BTreeMap<&str, Counts> = BTreeMap::new();
        for cmp in answers.comparisons() {
            let category = *category_of
                .get(cmp.key.reference.as_str())
                .ok_or_else(|| Error::UnknownMaterial(cmp.key.reference.clone()))?;
            let (v, h, m) = score(&cmp, &choose)?;
            total.add(v, h, m);
            by_category.entry(category).or_default().add(v, h, m);
        }
        let per_category = material_counts
            .iter()
            .map(|(&cat, &materials)| {
                let acc = by_category.get(cat).copied().unwrap_or_default().accuracy();
                (
                    cat.to_string(),
                    CategoryStats {
                        materials,
                        answers: acc.votes,
                        majority_comparisons: acc.majority_comparisons,
                        raw: acc.raw,
                        majority: acc.majority,
                    },
                )
            })
            .collect();
        let overall = total.accuracy();
        let (perplexity_raw, perplexity_majority, clamped) = match probability {
            Some(p) => {
                let raw = perplexity(answers, p, PerplexityMode::Raw)?;
                let maj = perplexity(answers, p, PerplexityMode::Majority).ok();
                (
                    Some(raw.value),
                    maj.map(|m| m.value),
                    raw.clamped + maj.map_or(0, |m| m.clamped),
                )
            }
            None => (None, None, 0),
        };
        Ok(Self {
            predictor: predictor.into(),
            n_answers: overall.votes,
            n_majority_comparisons: overall.majority_comparisons,
            raw_accuracy: overall.raw,
            majority_accuracy: overall.majority,
            perplexity_raw,
            perplexity_majority,
            clamped_probabilities: clamped,
            per_category,
            matrix_error: None,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("report serializes");
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

/// Headline values measured on the full rendered corpus with crowd answers.
/// They are not reproducible from descriptors and are kept only as reference
/// rows for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub human_raw_accuracy: f64,
    pub human_majority_accuracy: f64,
    pub oracle_raw_accuracy: f64,
    pub oracle_majority_accuracy: f64,
    pub model_raw_accuracy: f64,
    pub model_majority_accuracy: f64,
    pub model_perplexity_raw: f64,
    pub model_perplexity_majority: f64,
    pub tste_satisfied_percent: f64,
    pub hopkins_all: f64,
    pub hopkins_metals: f64,
    pub elbow_clusters: usize,
    pub valid_answers: usize,
}

impl Default for ReferenceValues {
    fn default() -> Self {
        Self {
            human_raw_accuracy: 73.10,
            human_majority_accuracy: 77.53,
            oracle_raw_accuracy: 83.79,
            oracle_majority_accuracy: 100.0,
            model_raw_accuracy: 73.97,
            model_majority_accuracy: 80.69,
            model_perplexity_raw: 1.74,
            model_perplexity_majority: 1.55,
            tste_satisfied_percent: 87.36,
            hopkins_all: 0.9585,
            hopkins_metals: 0.6935,
            elbow_clusters: 7,
            valid_answers: 114_840,
        }
    }
}
