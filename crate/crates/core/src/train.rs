//! Batch construction and the training loop.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::answers::AnswerStore;
use crate::data::DatasetBundle;
use crate::encoder::{Backward, EncoderModel, ForwardCache};
use crate::error::{Error, Result};
use crate::losses::{combined_loss_with, LossBatch, LossConfig, LossTerms};
use crate::optim::{step_decay, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate_initial: f64,
    pub epochs: usize,
    pub lr_step_epochs: usize,
    pub lr_decay_factor: f64,
    /// Materials per batch (P).
    pub batch_materials: usize,
    /// Views per material in a batch (K).
    pub batch_views: usize,
    /// Optimiser steps per epoch. `None` picks enough batches for every
    /// material triple to be drawn once in expectation.
    pub steps_per_epoch: Option<usize>,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// Evaluate per-sample work on the rayon pool. Results are identical to
    /// serial mode.
    pub parallel: bool,
    pub max_batch_retries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate_initial: 1e-3,
            epochs: 80,
            lr_step_epochs: 20,
            lr_decay_factor: 10.0,
            batch_materials: 8,
            batch_views: 4,
            steps_per_epoch: None,
            hidden_dims: vec![256],
            output_dim: 128,
            seed: 0,
            loss: LossConfig::default(),
            parallel: false,
            max_batch_retries: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.learning_rate_initial > 0.0 && self.learning_rate_initial.is_finite()) {
            return Err(Error::invalid("train config", "learning rate must be positive"));
        }
        if self.lr_step_epochs == 0 || !(self.lr_decay_factor > 0.0) {
            return Err(Error::invalid(
                "train config",
                "learning-rate schedule values must be positive",
            ));
        }
        if self.batch_materials < 3 {
            return Err(Error::invalid("train config", "a batch needs at least 3 materials"));
        }
        if self.batch_views == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::invalid(
                "train config",
                "batch views and layer sizes must be positive",
            ));
        }
        if self.steps_per_epoch == Some(0) || self.max_batch_retries == 0 {
            return Err(Error::invalid(
                "train config",
                "steps per epoch and retries must be positive",
            ));
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        step_decay(
            epoch,
            self.learning_rate_initial,
            self.lr_step_epochs,
            self.lr_decay_factor,
        )
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        std::iter::once(input_dim)
            .chain(self.hidden_dims.iter().copied())
            .chain(std::iter::once(self.output_dim))
            .collect()
    }
}

/// Material-level answered comparisons keyed by `(reference, lo, hi)` with
/// `lo < hi`, mapping to the majority-chosen material. Tied comparisons are
/// left out.
#[derive(Debug, Clone, Default)]
pub struct AnsweredTriples {
    majority: HashMap<(usize, usize, usize), usize>,
}

impl AnsweredTriples {
    pub fn from_answers(answers: &AnswerStore, bundle: &DatasetBundle) -> Result<Self> {
        let lookup = bundle.material_lookup();
        let idx = |id: &str| {
            lookup
                .get(id)
                .copied()
                .ok_or_else(|| Error::UnknownMaterial(id.to_string()))
        };
        let mut majority = HashMap::new();
        for (r, a, b) in answers.majority_triples() {
            let (r, a, b) = (idx(&r)?, idx(&a)?, idx(&b)?);
            majority.insert((r, a.min(b), a.max(b)), a);
        }
        Ok(Self { majority })
    }

    pub fn len(&self) -> usize {
        self.majority.len()
    }

    pub fn is_empty(&self) -> bool {
        self.majority.is_empty()
    }

    /// `(chosen, other)` for reference `r` and the option pair `{x, y}`.
    pub fn orient(&self, r: usize, x: usize, y: usize) -> Option<(usize, usize)> {
        let a = *self.majority.get(&(r, x.min(y), x.max(y)))?;
        Some(if a == x { (x, y) } else { (y, x) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    /// View indices into the bundle.
    pub views: Vec<usize>,
    /// Material index of every view.
    pub labels: Vec<usize>,
    /// Instantiated answered triplets as positions in `views`, ordered
    /// `[reference, majority choice, other]`.
    pub triplets: Vec<[usize; 3]>,
}

/// Samples `P` materials and `K` views of each, then instantiates every
/// view-level triplet whose material triple has a majority answer.
pub fn build_batch(
    bundle: &DatasetBundle,
    views_by_material: &[Vec<usize>],
    answered: &AnsweredTriples,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingBatch> {
    let n = bundle.materials.len();
    if n < config.batch_materials {
        return Err(Error::invalid(
            "batch",
            format!("dataset has {n} materials, batch needs {}", config.batch_materials),
        ));
    }
    let need_triplets = config.loss.uses_triplets();
    if need_triplets && answered.is_empty() {
        return Err(Error::MissingInput("no answered comparisons with a majority".into()));
    }
    for _ in 0..config.max_batch_retries {
        let batch = draw_batch(views_by_material, answered, config, rng);
        if !need_triplets || !batch.triplets.is_empty() {
            return Ok(batch);
        }
    }
    Err(Error::NoAnsweredTriplets {
        retries: config.max_batch_retries,
    })
}

fn draw_batch(
    views_by_material: &[Vec<usize>],
    answered: &AnsweredTriples,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> TrainingBatch {
    let mut materials = sample(rng, views_by_material.len(), config.batch_materials).into_vec();
    materials.sort_unstable();
    let mut views = Vec::new();
    let mut labels = Vec::new();
    let mut positions: Vec<Vec<usize>> = Vec::with_capacity(materials.len());
    for &m in &materials {
        let available = &views_by_material[m];
        let k = config.batch_views.min(available.len());
        let mut picked: Vec<usize> = sample(rng, available.len(), k)
            .into_iter()
            .map(|i| available[i])
            .collect();
        picked.sort_unstable();
        let mut pos = Vec::with_capacity(k);
        for v in picked {
            pos.push(views.len());
            views.push(v);
            labels.push(m);
        }
        positions.push(pos);
    }
    let mut triplets = Vec::new();
    for (ri, &r) in materials.iter().enumerate() {
        for (xi, &x) in materials.iter().enumerate() {
            for (yi, &y) in materials.iter().enumerate().skip(xi + 1) {
                if xi == ri || yi == ri {
                    continue;
                }
                let Some((a, _)) = answered.orient(r, x, y) else {
                    continue;
                };
                let (ai, bi) = if a == x { (xi, yi) } else { (yi, xi) };
                for &pr in &positions[ri] {
                    for &pa in &positions[ai] {
                        for &pb in &positions[bi] {
                            triplets.push([pr, pa, pb]);
                        }
                    }
                }
            }
        }
    }
    TrainingBatch {
        views,
        labels,
        triplets,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub terms: LossTerms,
    pub instantiated_triplets: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EncoderModel,
    pub trace: Vec<EpochStats>,
}

fn n_choose_3(n: usize) -> usize {
    if n < 3 {
        0
    } else {
        n * (n - 1) * (n - 2) / 6
    }
}

pub fn default_steps_per_epoch(n_materials: usize, n_views: usize, config: &TrainConfig) -> usize {
    let per_batch = n_choose_3(config.batch_materials).max(1);
    let cover_triples = n_choose_3(n_materials).div_ceil(per_batch);
    let cover_views = n_views.div_ceil(config.batch_materials * config.batch_views);
    cover_triples.max(cover_views).max(1)
}

pub fn initial_model(bundle: &DatasetBundle, config: &TrainConfig) -> Result<EncoderModel> {
    let head = if config.loss.weight_ce > 0.0 {
        Some(if config.loss.n_classes == 0 {
            bundle.materials.len()
        } else {
            config.loss.n_classes
        })
    } else {
        None
    };
    EncoderModel::new_random(&config.layer_dims(bundle.descriptor_dim()), head, config.seed)
}

pub fn train(bundle: &DatasetBundle, answers: &AnswerStore, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(bundle, answers, config, |_, _| Ok(()))
}

/// Runs the training loop, calling `on_epoch` with the model after every
/// completed epoch (for checkpointing).
pub fn train_with(
    bundle: &DatasetBundle,
    answers: &AnswerStore,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &EncoderModel) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = initial_model(bundle, config)?;
    if let Some(k) = model.head_classes() {
        if k < bundle.materials.len() {
            return Err(Error::invalid(
                "loss config",
                format!("{k} classes cannot label {} materials", bundle.materials.len()),
            ));
        }
    }
    let answered = AnsweredTriples::from_answers(answers, bundle)?;
    let views_by_material = bundle.views_by_material();
    let steps = config
        .steps_per_epoch
        .unwrap_or_else(|| default_steps_per_epoch(bundle.materials.len(), bundle.views.len(), config));
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut optimizer = OptimizerState::new(&sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.learning_rate(epoch);
        let mut loss_sum = 0.0;
        let mut terms_sum = LossTerms::default();
        let mut instantiated = 0;
        for _ in 0..steps {
            let batch = build_batch(bundle, &views_by_material, &answered, config, &mut rng)?;
            let (value, terms, grads) = batch_gradient(&model, bundle, &batch, config)?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            loss_sum += value;
            terms_sum.tl += terms.tl;
            terms_sum.p += terms.p;
            terms_sum.ce += terms.ce;
            terms_sum.btl += terms.btl;
            instantiated += batch.triplets.len();
            optimizer.step(model.tensors_mut(), &grads, lr).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence { epoch },
                other => other,
            })?;
        }
        if model.check_parameters().is_err() {
            return Err(Error::Divergence { epoch });
        }
        let s = steps as f64;
        trace.push(EpochStats {
            epoch,
            learning_rate: lr,
            loss: loss_sum / s,
            terms: LossTerms {
                tl: terms_sum.tl / s,
                p: terms_sum.p / s,
                ce: terms_sum.ce / s,
                btl: terms_sum.btl / s,
            },
            instantiated_triplets: instantiated,
        });
        on_epoch(epoch, &model)?;
    }
    Ok(TrainOutcome { model, trace })
}

/// Loss value, term breakdown and summed parameter gradients for one batch.
/// Per-view work may run in parallel; reduction is always in view order.
pub fn batch_gradient(
    model: &EncoderModel,
    bundle: &DatasetBundle,
    batch: &TrainingBatch,
    config: &TrainConfig,
) -> Result<(f64, LossTerms, Vec<Vec<f64>>)> {
    let forward = |&v: &usize| model.forward_cached(bundle.descriptor(v));
    let caches: Vec<ForwardCache> = if config.parallel {
        batch.views.par_iter().map(forward).collect::<Result<_>>()?
    } else {
        batch.views.iter().map(forward).collect::<Result<_>>()?
    };
    let features: Vec<Vec<f64>> = caches.iter().map(|c| c.features().to_vec()).collect();
    let logits: Option<Vec<Vec<f64>>> = model
        .head_classes()
        .map(|_| caches.iter().map(|c| c.logits().unwrap().to_vec()).collect());
    let loss = combined_loss_with(
        &LossBatch {
            features: &features,
            triplets: &batch.triplets,
            labels: Some(&batch.labels),
            logits: logits.as_deref(),
        },
        &config.loss,
        config.parallel,
    )?;
    let backward = |i: usize| {
        let gl = loss.logit_grads.as_ref().map(|g| g[i].as_slice());
        model.backward(&caches[i], &loss.feature_grads[i], gl)
    };
    let per_view: Vec<Backward> = if config.parallel {
        (0..caches.len()).into_par_iter().map(backward).collect::<Result<_>>()?
    } else {
        (0..caches.len()).map(backward).collect::<Result<_>>()?
    };
    let mut grads = model.zero_grads();
    for b in &per_view {
        for (acc, g) in grads.iter_mut().zip(&b.params) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    Ok((loss.value, loss.terms, grads))
}
