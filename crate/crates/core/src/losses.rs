//! Loss terms over feature vectors, each with its analytic gradient.
//!
//! Distances are squared Euclidean, similarities are `s = 1 / (1 + d)` and
//! the probability of choosing `a` is `p_ra = s_ra / (s_ra + s_rb)`. The
//! triplet hinge and the similarity log-likelihood only depend on the
//! features through `d_ra` and `d_rb`, so both are computed as a value plus
//! the two distance sensitivities and expanded to feature gradients last.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletGeometry {
    pub d_ra: f64,
    pub d_rb: f64,
    pub s_ra: f64,
    pub s_rb: f64,
    pub p_ra: f64,
    pub p_rb: f64,
}

impl TripletGeometry {
    pub fn from_distances(d_ra: f64, d_rb: f64) -> Self {
        let s_ra = 1.0 / (1.0 + d_ra);
        let s_rb = 1.0 / (1.0 + d_rb);
        let total = s_ra + s_rb;
        let p_ra = s_ra / total;
        Self {
            d_ra,
            d_rb,
            s_ra,
            s_rb,
            p_ra,
            p_rb: 1.0 - p_ra,
        }
    }
}

pub fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn check_vectors(vs: &[&[f64]]) -> Result<()> {
    let dim = vs[0].len();
    for (i, v) in vs.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                what: format!("feature vector {i}"),
                expected: dim,
                found: v.len(),
            });
        }
        crate::error::check_finite(v, |k| format!("feature vector {i}, entry {k}"))?;
    }
    Ok(())
}

pub fn triplet_geometry(r: &[f64], a: &[f64], b: &[f64]) -> Result<TripletGeometry> {
    check_vectors(&[r, a, b])?;
    Ok(TripletGeometry::from_distances(
        squared_distance(r, a),
        squared_distance(r, b),
    ))
}

#[derive(Debug, Clone, Copy)]
pub struct TripletFeatures<'a> {
    pub r: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletGradient {
    pub r: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLossOutput {
    pub value: f64,
    pub gradients: Vec<TripletGradient>,
}

/// A per-triplet loss value with its partial derivatives in `d_ra`, `d_rb`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct DistanceTerm {
    value: f64,
    by_d_ra: f64,
    by_d_rb: f64,
}

fn hinge_term(g: &TripletGeometry, mu: f64) -> DistanceTerm {
    let arg = g.d_ra - g.d_rb + mu;
    if arg > 0.0 {
        DistanceTerm {
            value: arg,
            by_d_ra: 1.0,
            by_d_rb: -1.0,
        }
    } else {
        DistanceTerm::default()
    }
}

fn similarity_term(g: &TripletGeometry) -> DistanceTerm {
    if g.p_ra < PROB_FLOOR {
        return DistanceTerm {
            value: -PROB_FLOOR.ln(),
            ..Default::default()
        };
    }
    // -ln p_ra = ln(s_ra + s_rb) - ln s_ra, with ds/dd = -s^2.
    DistanceTerm {
        value: -g.p_ra.ln(),
        by_d_ra: g.s_ra * g.p_rb,
        by_d_rb: -g.s_rb * g.p_rb,
    }
}

/// Adds the feature gradient of `scale * term` for one triplet into `out_*`.
fn scatter(
    t: TripletFeatures<'_>,
    by_d_ra: f64,
    by_d_rb: f64,
    out_r: &mut [f64],
    out_a: &mut [f64],
    out_b: &mut [f64],
) {
    for k in 0..t.r.len() {
        let ra = 2.0 * by_d_ra * (t.r[k] - t.a[k]);
        let rb = 2.0 * by_d_rb * (t.r[k] - t.b[k]);
        out_r[k] += ra + rb;
        out_a[k] -= ra;
        out_b[k] -= rb;
    }
}

fn per_triplet_loss(
    batch: &[TripletFeatures<'_>],
    term: impl Fn(&TripletGeometry) -> DistanceTerm,
) -> Result<TripletLossOutput> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("triplet batch"));
    }
    let n = batch.len() as f64;
    let mut value = 0.0;
    let mut gradients = Vec::with_capacity(batch.len());
    for t in batch {
        let g = triplet_geometry(t.r, t.a, t.b)?;
        let dt = term(&g);
        value += dt.value;
        let dim = t.r.len();
        let mut grad = TripletGradient {
            r: vec![0.0; dim],
            a: vec![0.0; dim],
            b: vec![0.0; dim],
        };
        scatter(
            *t,
            dt.by_d_ra / n,
            dt.by_d_rb / n,
            &mut grad.r,
            &mut grad.a,
            &mut grad.b,
        );
        gradients.push(grad);
    }
    Ok(TripletLossOutput {
        value: value / n,
        gradients,
    })
}

/// Mean hinge `[d_ra - d_rb + mu]_+` over the batch.
pub fn triplet_loss(batch: &[TripletFeatures<'_>], mu: f64) -> Result<TripletLossOutput> {
    per_triplet_loss(batch, |g| hinge_term(g, mu))
}

/// Mean negative natural log of `p_ra` over the batch.
pub fn similarity_loss(batch: &[TripletFeatures<'_>]) -> Result<TripletLossOutput> {
    per_triplet_loss(batch, similarity_term)
}

/// Soft-label cross entropy on probability vectors.
///
/// Each sample contributes `-sum_k [(1 - eps) l_k + eps / K] ln p_k` where
/// `l` is the one-hot label. Returns the batch mean and the gradient with
/// respect to every probability entry.
pub fn cross_entropy(distributions: &[Vec<f64>], labels: &[usize], epsilon: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    validate_classification(distributions, labels, epsilon)?;
    for (i, p) in distributions.iter().enumerate() {
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::invalid(
                format!("distribution {i}"),
                format!("not a probability vector (sum {sum})"),
            ));
        }
    }
    Ok(cross_entropy_unchecked(distributions, labels, epsilon))
}

fn validate_classification(rows: &[Vec<f64>], labels: &[usize], epsilon: f64) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyBatch("classification batch"));
    }
    if rows.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "labels".into(),
            expected: rows.len(),
            found: labels.len(),
        });
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::invalid("epsilon", "label smoothing must lie in [0, 1)"));
    }
    let k = rows[0].len();
    for (i, (row, &label)) in rows.iter().zip(labels).enumerate() {
        if row.len() != k {
            return Err(Error::DimensionMismatch {
                what: format!("class vector {i}"),
                expected: k,
                found: row.len(),
            });
        }
        crate::error::check_finite(row, |c| format!("class vector {i}, entry {c}"))?;
        if label >= k {
            return Err(Error::invalid(
                format!("label {i}"),
                format!("class {label} out of range 0..{k}"),
            ));
        }
    }
    Ok(())
}

fn smoothed_target(k: usize, label: usize, epsilon: f64) -> impl Iterator<Item = f64> {
    let u = epsilon / k as f64;
    (0..k).map(move |c| if c == label { 1.0 - epsilon + u } else { u })
}

fn cross_entropy_unchecked(distributions: &[Vec<f64>], labels: &[usize], epsilon: f64) -> (f64, Vec<Vec<f64>>) {
    let n = distributions.len() as f64;
    let mut total = 0.0;
    let grads = distributions
        .iter()
        .zip(labels)
        .map(|(p, &label)| {
            smoothed_target(p.len(), label, epsilon)
                .zip(p)
                .map(|(w, &pk)| {
                    if w == 0.0 {
                        return 0.0;
                    }
                    let clamped = pk.max(PROB_FLOOR);
                    total -= w * clamped.ln();
                    if pk < PROB_FLOOR {
                        0.0
                    } else {
                        -w / (pk * n)
                    }
                })
                .collect()
        })
        .collect();
    (total / n, grads)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross entropy of `softmax(logits)`, with the gradient taken with respect
/// to the logits: `(p - target) / N` per sample.
pub fn softmax_cross_entropy(logits: &[Vec<f64>], labels: &[usize], epsilon: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    validate_classification(logits, labels, epsilon)?;
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, &label) in logits.iter().zip(labels) {
        let p = softmax(z);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let mut g = Vec::with_capacity(z.len());
        for ((zk, pk), w) in z.iter().zip(&p).zip(smoothed_target(z.len(), label, epsilon)) {
            total -= w * (zk - log_sum);
            g.push((pk - w) / n);
        }
        grads.push(g);
    }
    Ok((total / n, grads))
}

/// Batch-hard triplet loss: for every anchor, hinge of the farthest
/// same-label distance minus the closest other-label distance plus `mu`.
/// Ties in the arg-max / arg-min resolve to the lowest index.
pub fn batch_hard_triplet_loss(features: &[Vec<f64>], labels: &[usize], mu: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if features.is_empty() {
        return Err(Error::EmptyBatch("batch-hard triplet batch"));
    }
    if labels.len() != features.len() {
        return Err(Error::DimensionMismatch {
            what: "labels".into(),
            expected: features.len(),
            found: labels.len(),
        });
    }
    let refs: Vec<&[f64]> = features.iter().map(Vec::as_slice).collect();
    check_vectors(&refs)?;
    let n = features.len();
    let dim = features[0].len();
    let mut grads = vec![vec![0.0; dim]; n];
    let mut total = 0.0;
    for r in 0..n {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == r {
                continue;
            }
            let d = squared_distance(&features[r], &features[j]);
            if labels[j] == labels[r] {
                if hardest_pos.is_none_or(|(_, best)| d > best) {
                    hardest_pos = Some((j, d));
                }
            } else if hardest_neg.is_none_or(|(_, best)| d < best) {
                hardest_neg = Some((j, d));
            }
        }
        let (Some((p, d_pos)), Some((q, d_neg))) = (hardest_pos, hardest_neg) else {
            return Err(Error::MissingInput(format!(
                "anchor {r} needs at least one same-label and one other-label element"
            )));
        };
        let arg = d_pos - d_neg + mu;
        if arg > 0.0 {
            total += arg;
            let scale = 2.0 / n as f64;
            for k in 0..dim {
                let rp = scale * (features[r][k] - features[p][k]);
                let rq = scale * (features[r][k] - features[q][k]);
                grads[r][k] += rp - rq;
                grads[p][k] -= rp;
                grads[q][k] += rq;
            }
        }
    }
    Ok((total / n as f64, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin_mu: f64,
    pub weight_tl: f64,
    pub weight_p: f64,
    pub weight_ce: f64,
    pub weight_btl: f64,
    pub label_smoothing_epsilon: f64,
    /// Number of classes for the cross-entropy head; 0 means one class per
    /// material of the training set.
    pub n_classes: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin_mu: 0.3,
            weight_tl: 1.0,
            weight_p: 1.0,
            weight_ce: 0.0,
            weight_btl: 0.0,
            label_smoothing_epsilon: 0.1,
            n_classes: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin_mu >= 0.0 && self.margin_mu.is_finite()) {
            return Err(Error::invalid("loss config", "margin must be finite and non-negative"));
        }
        let weights = [self.weight_tl, self.weight_p, self.weight_ce, self.weight_btl];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid(
                "loss config",
                "loss weights must be finite and non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing_epsilon) {
            return Err(Error::invalid("loss config", "label smoothing must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn uses_triplets(&self) -> bool {
        self.weight_tl > 0.0 || self.weight_p > 0.0
    }
}

/// Inputs for the combined loss. Triplets index into `features` as
/// `[reference, chosen, other]`.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    pub features: &'a [Vec<f64>],
    pub triplets: &'a [[usize; 3]],
    pub labels: Option<&'a [usize]>,
    pub logits: Option<&'a [Vec<f64>]>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub tl: f64,
    pub p: f64,
    pub ce: f64,
    pub btl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    pub terms: LossTerms,
    pub feature_grads: Vec<Vec<f64>>,
    pub logit_grads: Option<Vec<Vec<f64>>>,
}

pub fn combined_loss(batch: &LossBatch<'_>, config: &LossConfig) -> Result<CombinedLoss> {
    combined_loss_with(batch, config, false)
}

/// Weighted sum of the enabled terms. With `parallel` the per-triplet terms
/// are evaluated on the rayon pool; gradients are always reduced serially
/// in triplet order, so both modes give bit-identical results.
pub fn combined_loss_with(batch: &LossBatch<'_>, config: &LossConfig, parallel: bool) -> Result<CombinedLoss> {
    config.validate()?;
    let features = batch.features;
    if features.is_empty() {
        return Err(Error::EmptyBatch("feature batch"));
    }
    let refs: Vec<&[f64]> = features.iter().map(Vec::as_slice).collect();
    check_vectors(&refs)?;
    let dim = features[0].len();
    let mut feature_grads = vec![vec![0.0; dim]; features.len()];
    let mut terms = LossTerms::default();

    if config.uses_triplets() {
        if batch.triplets.is_empty() {
            return Err(Error::MissingInput(
                "triplet terms are enabled but the batch has no answered triplets".into(),
            ));
        }
        for t in batch.triplets {
            if let Some(&bad) = t.iter().find(|&&i| i >= features.len()) {
                return Err(Error::invalid("triplets", format!("index {bad} out of range")));
            }
        }
        let eval = |t: &[usize; 3]| {
            let g = TripletGeometry::from_distances(
                squared_distance(&features[t[0]], &features[t[1]]),
                squared_distance(&features[t[0]], &features[t[2]]),
            );
            (hinge_term(&g, config.margin_mu), similarity_term(&g))
        };
        let per_triplet: Vec<(DistanceTerm, DistanceTerm)> = if parallel {
            batch.triplets.par_iter().map(eval).collect()
        } else {
            batch.triplets.iter().map(eval).collect()
        };
        let n = batch.triplets.len() as f64;
        let (mut tl, mut p) = (0.0, 0.0);
        let mut r_buf = vec![0.0; dim];
        let mut a_buf = vec![0.0; dim];
        let mut b_buf = vec![0.0; dim];
        for (t, (hinge, sim)) in batch.triplets.iter().zip(&per_triplet) {
            tl += hinge.value;
            p += sim.value;
            let by_ra = (config.weight_tl * hinge.by_d_ra + config.weight_p * sim.by_d_ra) / n;
            let by_rb = (config.weight_tl * hinge.by_d_rb + config.weight_p * sim.by_d_rb) / n;
            if by_ra == 0.0 && by_rb == 0.0 {
                continue;
            }
            r_buf
                .iter_mut()
                .chain(a_buf.iter_mut())
                .chain(b_buf.iter_mut())
                .for_each(|x| *x = 0.0);
            let tf = TripletFeatures {
                r: &features[t[0]],
                a: &features[t[1]],
                b: &features[t[2]],
            };
            scatter(tf, by_ra, by_rb, &mut r_buf, &mut a_buf, &mut b_buf);
            for (idx, buf) in [(t[0], &r_buf), (t[1], &a_buf), (t[2], &b_buf)] {
                for (g, v) in feature_grads[idx].iter_mut().zip(buf) {
                    *g += v;
                }
            }
        }
        terms.tl = tl / n;
        terms.p = p / n;
    }

    let mut logit_grads = None;
    if config.weight_ce > 0.0 {
        let (Some(logits), Some(labels)) = (batch.logits, batch.labels) else {
            return Err(Error::MissingInput("cross-entropy term needs logits and labels".into()));
        };
        let (value, grads) = softmax_cross_entropy(logits, labels, config.label_smoothing_epsilon)?;
        terms.ce = value;
        logit_grads = Some(
            grads
                .into_iter()
                .map(|g| g.into_iter().map(|v| v * config.weight_ce).collect())
                .collect(),
        );
    }

    if config.weight_btl > 0.0 {
        let labels = batch
            .labels
            .ok_or_else(|| Error::MissingInput("batch-hard term needs labels".into()))?;
        let (value, grads) = batch_hard_triplet_loss(features, labels, config.margin_mu)?;
        terms.btl = value;
        for (acc, g) in feature_grads.iter_mut().zip(grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += config.weight_btl * v;
            }
        }
    }

    let value = config.weight_tl * terms.tl
        + config.weight_p * terms.p
        + config.weight_ce * terms.ce
        + config.weight_btl * terms.btl;
    Ok(CombinedLoss {
        value,
        terms,
        feature_grads,
        logit_grads,
    })
}
