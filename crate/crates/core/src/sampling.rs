//! Information-gain query selection and HIT composition.
//!
//! For each reference `r` the posterior over its location is supported on
//! the current embedding points (all materials, `r` included) and weighted
//! by the likelihood of `r`'s answers under the tSTE kernel. A candidate pair
//! scores the mutual information between its answer and that location.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::answers::{AnswerStore, ComparisonKey, TrialKind, TripletAnswer};
use crate::error::{Error, Result};
use crate::tste::{tste_fit_with, tste_probability, TsteConfig, TsteEmbedding};

/// Workers with this many inconsistent control answers are rejected.
pub const REJECT_AT: usize = 2;

const NORMALIZATION_TOL: f64 = 1e-9;

/// Binary entropy in bits.
pub fn binary_entropy(p: f64) -> f64 {
    let h = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.log2() };
    h(p) + h(1.0 - p)
}

/// `H(sum tau p) - sum tau H(p)` in bits, for answer probabilities `p_a`
/// at each support point.
pub fn information_gain(tau: &[f64], p_a: &[f64]) -> Result<f64> {
    if tau.len() != p_a.len() {
        return Err(Error::DimensionMismatch {
            what: "posterior support".into(),
            expected: tau.len(),
            found: p_a.len(),
        });
    }
    if tau.iter().any(|&t| !(t >= 0.0)) || (tau.iter().sum::<f64>() - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::invalid("information gain", "posterior is not normalized"));
    }
    let marginal: f64 = tau.iter().zip(p_a).map(|(t, p)| t * p).sum();
    let conditional: f64 = tau.iter().zip(p_a).map(|(t, p)| t * binary_entropy(*p)).sum();
    // Non-negative in exact arithmetic (concavity of H); clamp rounding.
    Ok((binary_entropy(marginal) - conditional).max(0.0))
}

/// Posterior over every reference's location given the answers so far.
#[derive(Debug, Clone)]
pub struct PosteriorModel {
    pub embedding: TsteEmbedding,
    /// `tau[r][j]`: weight of support point `j` for reference `r`.
    pub tau: Vec<Vec<f64>>,
}

impl PosteriorModel {
    pub fn new(embedding: TsteEmbedding, answers: &AnswerStore) -> Result<Self> {
        let n = embedding.points.len();
        let mut log_tau = vec![vec![0.0; n]; n];
        for cmp in answers.comparisons() {
            let r = embedding.index_of(&cmp.key.reference)?;
            let f = embedding.index_of(&cmp.key.first)?;
            let s = embedding.index_of(&cmp.key.second)?;
            for (j, x) in embedding.points.iter().enumerate() {
                let p_first = tste_probability(x, &embedding.points[f], &embedding.points[s], embedding.alpha);
                let p_second = tste_probability(x, &embedding.points[s], &embedding.points[f], embedding.alpha);
                log_tau[r][j] += cmp.tally.first as f64 * p_first.ln() + cmp.tally.second as f64 * p_second.ln();
            }
        }
        let tau = log_tau
            .into_iter()
            .map(|row| {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = w.iter().sum();
                w.into_iter().map(|v| v / z).collect()
            })
            .collect();
        Ok(Self { embedding, tau })
    }

    /// `p(a chosen | r at support point j)` for every `j`.
    pub fn answer_probabilities(&self, a: usize, b: usize) -> Vec<f64> {
        let pts = &self.embedding.points;
        pts.iter()
            .map(|x| tste_probability(x, &pts[a], &pts[b], self.embedding.alpha))
            .collect()
    }

    pub fn information_gain(&self, r: usize, a: usize, b: usize) -> Result<f64> {
        information_gain(&self.tau[r], &self.answer_probabilities(a, b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlannedPair {
    pub reference: String,
    pub a: String,
    pub b: String,
}

impl PlannedPair {
    pub fn key(&self) -> ComparisonKey {
        ComparisonKey::new(&self.reference, &self.a, &self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub iteration: usize,
    /// Mean over selected pairs; `None` for the random bootstrap plan.
    pub mean_information_gain: Option<f64>,
    pub pairs: Vec<PlannedPair>,
    /// References whose candidate pairs are all used up.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exhausted: Vec<String>,
}

impl SamplingPlan {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("plan serializes");
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub pairs_per_reference: usize,
    /// Random candidates scored per reference; `None` scores every unasked pair.
    pub candidate_pool: Option<usize>,
    pub seed: u64,
    pub tste: TsteConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            pairs_per_reference: 10,
            candidate_pool: Some(200),
            seed: 0,
            tste: TsteConfig::default(),
        }
    }
}

/// Stateful planner: remembers every pair it has planned so that no pair is
/// issued twice, and warm-starts each refit from the previous embedding.
#[derive(Debug, Clone)]
pub struct Sampler {
    pub config: SamplerConfig,
    material_ids: Vec<String>,
    issued: HashSet<ComparisonKey>,
    next_iteration: usize,
    embedding: Option<TsteEmbedding>,
    log: Vec<(usize, f64)>,
}

impl Sampler {
    pub fn new(material_ids: Vec<String>, config: SamplerConfig) -> Result<Self> {
        if material_ids.len() < 3 {
            return Err(Error::invalid("sampler", "need at least 3 materials"));
        }
        if config.pairs_per_reference == 0 || config.candidate_pool == Some(0) {
            return Err(Error::invalid(
                "sampler",
                "pairs per reference and pool size must be positive",
            ));
        }
        config.tste.validate()?;
        let unique: BTreeSet<&String> = material_ids.iter().collect();
        if unique.len() != material_ids.len() {
            return Err(Error::invalid("sampler", "duplicate material ids"));
        }
        Ok(Self {
            config,
            material_ids,
            issued: HashSet::new(),
            next_iteration: 0,
            embedding: None,
            log: Vec::new(),
        })
    }

    pub fn material_ids(&self) -> &[String] {
        &self.material_ids
    }

    pub fn embedding(&self) -> Option<&TsteEmbedding> {
        self.embedding.as_ref()
    }

    pub fn next_iteration(&self) -> usize {
        self.next_iteration
    }

    /// `(iteration, mean information gain)` for every adaptive plan so far.
    pub fn convergence_log(&self) -> &[(usize, f64)] {
        &self.log
    }

    /// Marks a plan as issued without recomputing it (used when replaying
    /// persisted state).
    pub fn record_plan(&mut self, plan: &SamplingPlan) {
        self.issued.extend(plan.pairs.iter().map(PlannedPair::key));
        self.next_iteration = self.next_iteration.max(plan.iteration + 1);
        if let Some(ig) = plan.mean_information_gain {
            self.log.push((plan.iteration, ig));
        }
    }

    /// Emits the next plan. With no answers the plan is a uniform random
    /// bootstrap; otherwise pairs are ranked by information gain.
    pub fn next_plan(&mut self, answers: &AnswerStore) -> Result<SamplingPlan> {
        let iteration = self.next_iteration;
        let mut asked = self.issued.clone();
        asked.extend(answers.comparisons().map(|c| c.key.clone()));
        let posterior = if answers.is_empty() {
            None
        } else {
            let mut cfg = self.config.tste.clone();
            cfg.seed = self.config.seed;
            let emb = tste_fit_with(answers, &self.material_ids, &cfg, self.embedding.as_ref())?;
            self.embedding = Some(emb.clone());
            Some(PosteriorModel::new(emb, answers)?)
        };
        let n = self.material_ids.len();
        let per_reference: Vec<(Vec<(f64, usize, usize)>, bool)> = (0..n)
            .into_par_iter()
            .map(|r| self.plan_reference(r, iteration, &asked, posterior.as_ref()))
            .collect::<Result<_>>()?;
        let mut pairs = Vec::new();
        let mut exhausted = Vec::new();
        let mut ig_sum = 0.0;
        for (r, (chosen, empty)) in per_reference.into_iter().enumerate() {
            if empty {
                exhausted.push(self.material_ids[r].clone());
            }
            for (ig, a, b) in chosen {
                ig_sum += ig;
                pairs.push(PlannedPair {
                    reference: self.material_ids[r].clone(),
                    a: self.material_ids[a].clone(),
                    b: self.material_ids[b].clone(),
                });
            }
        }
        let mean_information_gain = posterior.as_ref().map(|_| {
            if pairs.is_empty() {
                0.0
            } else {
                ig_sum / pairs.len() as f64
            }
        });
        let plan = SamplingPlan {
            iteration,
            mean_information_gain,
            pairs,
            exhausted,
        };
        self.record_plan(&plan);
        Ok(plan)
    }

    /// Selected `(ig, a, b)` for reference `r`, and whether it had no
    /// unasked pair left.
    fn plan_reference(
        &self,
        r: usize,
        iteration: usize,
        asked: &HashSet<ComparisonKey>,
        posterior: Option<&PosteriorModel>,
    ) -> Result<(Vec<(f64, usize, usize)>, bool)> {
        let ids = &self.material_ids;
        let n = ids.len();
        let mut unasked = Vec::new();
        for x in 0..n {
            for y in x + 1..n {
                if x != r && y != r && !asked.contains(&ComparisonKey::new(&ids[r], &ids[x], &ids[y])) {
                    unasked.push((x, y));
                }
            }
        }
        if unasked.is_empty() {
            return Ok((Vec::new(), true));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(((iteration as u64) << 32) | r as u64);
        let k = self.config.pairs_per_reference;
        let Some(posterior) = posterior else {
            let picked = sample(&mut rng, unasked.len(), k.min(unasked.len()));
            return Ok((
                picked
                    .into_iter()
                    .map(|i| {
                        let (x, y) = unasked[i];
                        let (a, b) = if rng.random::<bool>() { (x, y) } else { (y, x) };
                        (0.0, a, b)
                    })
                    .collect(),
                false,
            ));
        };
        let pool: Vec<(usize, usize)> = match self.config.candidate_pool {
            Some(m) if m < unasked.len() => {
                let mut idx = sample(&mut rng, unasked.len(), m).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| unasked[i]).collect()
            }
            _ => unasked,
        };
        let mut scored: Vec<(f64, usize, usize)> = pool
            .into_iter()
            .map(|(x, y)| Ok((posterior.information_gain(r, x, y)?, x, y)))
            .collect::<Result<_>>()?;
        rank_by_gain(&mut scored);
        scored.truncate(k);
        for item in &mut scored {
            if rng.random::<bool>() {
                std::mem::swap(&mut item.1, &mut item.2);
            }
        }
        Ok((scored, false))
    }
}

/// Highest gain first; equal gains keep pair order.
pub fn rank_by_gain(scored: &mut [(f64, usize, usize)]) {
    scored.sort_by(|p, q| q.0.total_cmp(&p.0).then((p.1, p.2).cmp(&(q.1, q.2))));
}

/// Writes `iteration,mean_ig` rows.
pub fn save_convergence_log(log: &[(usize, f64)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iteration,mean_ig\n");
    for (it, ig) in log {
        out.push_str(&format!("{it},{ig}\n"));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Triplets with the clearest answer under `points`: for each reference the
/// nearest and farthest other material, ranked by the distance ratio
/// `d_rb / d_ra`. At most one triplet per reference.
pub fn obvious_triplets(material_ids: &[String], points: &[Vec<f64>], count: usize) -> Vec<PlannedPair> {
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let n = points.len();
    let mut best: Vec<(f64, usize, usize, usize)> = Vec::with_capacity(n);
    for r in 0..n {
        let mut near: Option<(f64, usize)> = None;
        let mut far: Option<(f64, usize)> = None;
        for j in (0..n).filter(|&j| j != r) {
            let d = sq(&points[r], &points[j]).sqrt();
            if near.is_none_or(|(nd, _)| d < nd) {
                near = Some((d, j));
            }
            if far.is_none_or(|(fd, _)| d > fd) {
                far = Some((d, j));
            }
        }
        if let (Some((dn, a)), Some((df, b))) = (near, far) {
            if a != b {
                let ratio = if dn > 0.0 { df / dn } else { f64::INFINITY };
                best.push((ratio, r, a, b));
            }
        }
    }
    best.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)));
    best.into_iter()
        .take(count)
        .map(|(_, r, a, b)| PlannedPair {
            reference: material_ids[r].clone(),
            a: material_ids[a].clone(),
            b: material_ids[b].clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HitConfig {
    pub hit_size: usize,
    pub n_training: usize,
    pub n_control: usize,
    /// Training trials count toward `hit_size` (otherwise they are extra).
    pub training_in_hit: bool,
}

impl Default for HitConfig {
    fn default() -> Self {
        Self {
            hit_size: 110,
            n_training: 5,
            n_control: 10,
            training_in_hit: true,
        }
    }
}

impl HitConfig {
    pub fn unique_trials(&self) -> Result<usize> {
        let used = self.n_control + if self.training_in_hit { self.n_training } else { 0 };
        let unique = self
            .hit_size
            .checked_sub(used)
            .ok_or_else(|| Error::invalid("hit config", "training and control trials exceed the HIT size"))?;
        if self.n_control > unique {
            return Err(Error::invalid("hit config", "more control trials than unique trials"));
        }
        Ok(unique)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitTrial {
    pub reference: String,
    pub a: String,
    pub b: String,
    pub kind: TrialKind,
    /// Position of the repeated trial, for controls.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original: Option<usize>,
}

impl HitTrial {
    pub fn key(&self) -> ComparisonKey {
        ComparisonKey::new(&self.reference, &self.a, &self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitPlan {
    pub trials: Vec<HitTrial>,
}

impl HitPlan {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }
}

/// Training trials first, then the unique trials with side-swapped control
/// repeats inserted at random positions after their originals.
pub fn build_hit(
    unique: &[PlannedPair],
    training: &[PlannedPair],
    config: &HitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<HitPlan> {
    let n_unique = config.unique_trials()?;
    if unique.len() < n_unique {
        return Err(Error::invalid(
            "hit",
            format!("{} unique trials available, {n_unique} needed", unique.len()),
        ));
    }
    if training.len() < config.n_training {
        return Err(Error::invalid(
            "hit",
            format!(
                "{} training trials available, {} needed",
                training.len(),
                config.n_training
            ),
        ));
    }
    let trial = |p: &PlannedPair, kind| HitTrial {
        reference: p.reference.clone(),
        a: p.a.clone(),
        b: p.b.clone(),
        kind,
        original: None,
    };
    // Body entries: (index into `unique`, is_control).
    let mut body: Vec<(usize, bool)> = (0..n_unique).map(|i| (i, false)).collect();
    let mut originals = sample(rng, n_unique, config.n_control).into_vec();
    originals.sort_unstable();
    for o in originals {
        let at = body.iter().position(|&e| e == (o, false)).expect("original present");
        let pos = rng.random_range(at + 1..=body.len());
        body.insert(pos, (o, true));
    }
    let offset = config.n_training;
    let mut trials: Vec<HitTrial> = training[..config.n_training]
        .iter()
        .map(|p| trial(p, TrialKind::Training))
        .collect();
    for &(i, control) in &body {
        let p = &unique[i];
        if control {
            let at = body.iter().position(|&e| e == (i, false)).expect("original present");
            trials.push(HitTrial {
                reference: p.reference.clone(),
                a: p.b.clone(),
                b: p.a.clone(),
                kind: TrialKind::Control,
                original: Some(offset + at),
            });
        } else {
            trials.push(trial(p, TrialKind::Trial));
        }
    }
    Ok(HitPlan { trials })
}

/// Shuffles a copy of `pairs` (used to spread plan pairs over HITs).
pub fn shuffled(pairs: &[PlannedPair], rng: &mut ChaCha8Rng) -> Vec<PlannedPair> {
    let mut v = pairs.to_vec();
    v.shuffle(rng);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerVerdict {
    pub valid: bool,
    pub inconsistencies: usize,
}

/// Compares every control answer with the trial answer for the same
/// comparison. Choosing the same material on swapped sides is consistent.
pub fn judge_worker(hit_answers: &[TripletAnswer]) -> Result<WorkerVerdict> {
    let mut inconsistencies = 0;
    for control in hit_answers.iter().filter(|a| a.kind == TrialKind::Control) {
        let key = control.key();
        let original = hit_answers
            .iter()
            .find(|a| a.kind == TrialKind::Trial && a.key() == key)
            .ok_or_else(|| {
                Error::MissingInput(format!(
                    "control ({}, {}, {}) has no answered original",
                    control.reference, control.option_a, control.option_b
                ))
            })?;
        if original.chosen_material() != control.chosen_material() {
            inconsistencies += 1;
        }
    }
    Ok(WorkerVerdict {
        valid: inconsistencies < REJECT_AT,
        inconsistencies,
    })
}

/// [`judge_worker`] after checking that every control trial of `plan` was
/// answered.
pub fn judge_hit(plan: &HitPlan, hit_answers: &[TripletAnswer]) -> Result<WorkerVerdict> {
    let expected = plan.trials.iter().filter(|t| t.kind == TrialKind::Control).count();
    let found = hit_answers.iter().filter(|a| a.kind == TrialKind::Control).count();
    if found != expected {
        return Err(Error::MissingInput(format!(
            "{found} of {expected} control trials answered"
        )));
    }
    judge_worker(hit_answers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answers::Choice;

    #[test]
    fn information_gain_examples() {
        assert_eq!(information_gain(&[1.0, 0.0], &[0.3, 0.9]).unwrap(), 0.0);
        assert!((information_gain(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        let ig = information_gain(&[0.5, 0.5], &[0.9, 0.2]).unwrap();
        let expected = binary_entropy(0.55) - 0.5 * (binary_entropy(0.9) + binary_entropy(0.2));
        assert!((ig - expected).abs() < 1e-15);
        assert!((ig - 0.397312).abs() < 1e-6, "{ig}");
        assert!(information_gain(&[0.5, 0.6], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn hand_set_posteriors_pick_the_argmax() {
        // Support points on a line; tau chosen by hand for two references.
        let emb = TsteEmbedding {
            material_ids: (0..5).map(|i| format!("m{i}")).collect(),
            points: vec![vec![0.0], vec![1.0], vec![2.5], vec![4.0], vec![7.0]],
            alpha: 5.0,
            dim: 1,
            seed: 0,
            log_likelihood: 0.0,
            satisfied_fraction: 1.0,
            iterations: 0,
            stalled: false,
            trace: vec![],
        };
        let posterior = PosteriorModel {
            tau: vec![
                vec![0.4, 0.4, 0.1, 0.1, 0.0],
                vec![0.0, 0.0, 0.5, 0.0, 0.5],
                vec![0.2; 5],
                vec![0.2; 5],
                vec![0.2; 5],
            ],
            embedding: emb,
        };
        for (r, pool) in [
            (0usize, [(1usize, 2usize), (2, 3), (3, 4)]),
            (1, [(0, 2), (2, 4), (0, 4)]),
        ] {
            let mut scored: Vec<_> = pool
                .iter()
                .map(|&(a, b)| (posterior.information_gain(r, a, b).unwrap(), a, b))
                .collect();
            let brute = pool
                .iter()
                .copied()
                .max_by(|p, q| {
                    let ip = posterior.information_gain(r, p.0, p.1).unwrap();
                    let iq = posterior.information_gain(r, q.0, q.1).unwrap();
                    ip.total_cmp(&iq)
                })
                .unwrap();
            rank_by_gain(&mut scored);
            assert_eq!((scored[0].1, scored[0].2), brute);
        }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("m{i}")).collect()
    }

    #[test]
    fn bootstrap_plan_is_random_and_fresh() {
        let mut sampler = Sampler::new(ids(6), SamplerConfig::default()).unwrap();
        let plan = sampler.next_plan(&AnswerStore::new()).unwrap();
        assert_eq!(plan.mean_information_gain, None);
        // 6 materials: 10 pairs per reference, all available.
        assert_eq!(plan.pairs.len(), 60);
        let keys: HashSet<_> = plan.pairs.iter().map(PlannedPair::key).collect();
        assert_eq!(keys.len(), 60);
        let second = sampler.next_plan(&AnswerStore::new()).unwrap();
        assert!(second.pairs.is_empty());
        assert_eq!(second.exhausted.len(), 6);
    }

    fn pair(r: &str, a: &str, b: &str) -> PlannedPair {
        PlannedPair {
            reference: r.into(),
            a: a.into(),
            b: b.into(),
        }
    }

    fn unique_pairs(n: usize) -> Vec<PlannedPair> {
        (0..n).map(|i| pair("r", &format!("a{i}"), &format!("b{i}"))).collect()
    }

    #[test]
    fn hit_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let training = vec![pair("t", "x", "y"); 5];
        let hit = build_hit(&unique_pairs(200), &training, &HitConfig::default(), &mut rng).unwrap();
        assert_eq!(hit.len(), 110);
        let count = |k| hit.trials.iter().filter(|t| t.kind == k).count();
        assert_eq!(
            (
                count(TrialKind::Training),
                count(TrialKind::Trial),
                count(TrialKind::Control)
            ),
            (5, 95, 10)
        );
        for (i, t) in hit.trials.iter().enumerate() {
            if let Some(o) = t.original {
                assert!(o < i);
                let orig = &hit.trials[o];
                assert_eq!(orig.kind, TrialKind::Trial);
                assert_eq!((&orig.reference, &orig.a, &orig.b), (&t.reference, &t.b, &t.a));
            }
        }

        let no_controls = HitConfig {
            n_control: 0,
            ..Default::default()
        };
        let hit = build_hit(&unique_pairs(200), &training, &no_controls, &mut rng).unwrap();
        let keys: HashSet<_> = hit.trials[5..].iter().map(HitTrial::key).collect();
        assert_eq!(keys.len(), 105);
        assert!(build_hit(&unique_pairs(10), &training, &HitConfig::default(), &mut rng).is_err());
    }

    fn answered(trial: &HitTrial, chosen_material: &str) -> TripletAnswer {
        TripletAnswer {
            reference: trial.reference.clone(),
            option_a: trial.a.clone(),
            option_b: trial.b.clone(),
            chosen: if trial.a == chosen_material {
                Choice::A
            } else {
                Choice::B
            },
            worker: "w".into(),
            kind: trial.kind,
            timestamp: "t".into(),
        }
    }

    #[test]
    fn judging_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let config = HitConfig {
            hit_size: 20,
            n_training: 2,
            n_control: 4,
            training_in_hit: true,
        };
        let hit = build_hit(
            &unique_pairs(14),
            &[pair("t", "x", "y"), pair("t", "y", "z")],
            &config,
            &mut rng,
        )
        .unwrap();
        let verdict_with = |flips: usize| {
            let mut flipped = 0;
            let answers: Vec<_> = hit
                .trials
                .iter()
                .map(|t| {
                    // Consistent workers always pick the `a*` material.
                    let preferred = if t.a.starts_with('a') || t.a == "x" || t.a == "y" {
                        t.a.clone()
                    } else {
                        t.b.clone()
                    };
                    if t.kind == TrialKind::Control && flipped < flips {
                        flipped += 1;
                        let other = if preferred == t.a { &t.b } else { &t.a };
                        answered(t, other)
                    } else {
                        answered(t, &preferred)
                    }
                })
                .collect();
            judge_hit(&hit, &answers).unwrap()
        };
        assert_eq!(
            verdict_with(0),
            WorkerVerdict {
                valid: true,
                inconsistencies: 0
            }
        );
        assert_eq!(
            verdict_with(1),
            WorkerVerdict {
                valid: true,
                inconsistencies: 1
            }
        );
        assert_eq!(
            verdict_with(2),
            WorkerVerdict {
                valid: false,
                inconsistencies: 2
            }
        );
    }

    #[test]
    fn obvious_triplets_use_nearest_and_farthest() {
        let pts = vec![vec![0.0], vec![0.1], vec![5.0], vec![9.0]];
        let t = obvious_triplets(&ids(4), &pts, 1);
        assert_eq!(t, vec![pair("m0", "m1", "m3")]);
    }
}
