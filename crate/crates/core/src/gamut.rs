//! Gamut mapping as feature-space distance minimization over mixing
//! weights: `min_w ||f(o) - f(sum_i w_i g_i)||^2` subject to `w` on the
//! probability simplex (or the box `[0, 1]^n`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::losses::squared_distance;

/// Euclidean projection onto `{w >= 0, sum w = 1}` (sort-based).
pub fn simplex_project(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumulative += uj;
        let t = (cumulative - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

pub fn box_project(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.clamp(0.0, 1.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Constraint {
    Simplex,
    Box,
}

/// A descriptor given inline or by view id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DescriptorRef {
    View(String),
    Inline(Vec<f64>),
}

impl DescriptorRef {
    fn resolve(&self, bundle: Option<&DatasetBundle>) -> Result<Vec<f64>> {
        match self {
            DescriptorRef::Inline(v) => Ok(v.clone()),
            DescriptorRef::View(id) => {
                let bundle = bundle.ok_or_else(|| Error::MissingInput(format!("view {id} needs a dataset")))?;
                let idx = bundle
                    .view_index(id)
                    .ok_or_else(|| Error::invalid("gamut problem", format!("unknown view {id}")))?;
                Ok(bundle.descriptor(idx).to_vec())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamutProblemFile {
    #[serde(alias = "target_view_id")]
    pub target: DescriptorRef,
    pub basis: Vec<DescriptorRef>,
}

impl GamutProblemFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn resolve(&self, bundle: Option<&DatasetBundle>) -> Result<GamutProblem> {
        GamutProblem::new(
            self.target.resolve(bundle)?,
            self.basis.iter().map(|b| b.resolve(bundle)).collect::<Result<_>>()?,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GamutProblem {
    pub target: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
}

impl GamutProblem {
    pub fn new(target: Vec<f64>, basis: Vec<Vec<f64>>) -> Result<Self> {
        if basis.len() < 2 {
            return Err(Error::invalid("gamut problem", "need at least 2 basis vectors"));
        }
        crate::error::check_finite(&target, |k| format!("target entry {k}"))?;
        for (i, b) in basis.iter().enumerate() {
            if b.len() != target.len() {
                return Err(Error::DimensionMismatch {
                    what: format!("basis vector {i}"),
                    expected: target.len(),
                    found: b.len(),
                });
            }
            crate::error::check_finite(b, |k| format!("basis {i} entry {k}"))?;
        }
        Ok(Self { target, basis })
    }

    pub fn mix(&self, w: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.target.len()];
        for (wi, g) in w.iter().zip(&self.basis) {
            for (xk, gk) in x.iter_mut().zip(g) {
                *xk += wi * gk;
            }
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GamutConfig {
    pub max_iters: usize,
    pub step: f64,
    pub tol: f64,
    pub constraint: Constraint,
}

impl Default for GamutConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            step: 0.05,
            tol: 1e-8,
            constraint: Constraint::Simplex,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamutSolution {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Objective at the start and after every accepted step.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

impl GamutSolution {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("solution serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Objective and its gradient with respect to the weights.
pub fn gamut_objective(
    problem: &GamutProblem,
    model: &EncoderModel,
    target_feature: &[f64],
    w: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let cache = model.forward_cached(&problem.mix(w))?;
    let f = cache.features();
    let value = squared_distance(target_feature, f);
    let grad_f: Vec<f64> = f.iter().zip(target_feature).map(|(a, b)| 2.0 * (a - b)).collect();
    let back = model.backward(&cache, &grad_f, None)?;
    let grad_w: Vec<f64> = problem
        .basis
        .iter()
        .map(|g| g.iter().zip(&back.input).map(|(a, b)| a * b).sum())
        .collect();
    crate::error::check_finite(&grad_w, |i| format!("gamut gradient entry {i}"))?;
    Ok((value, grad_w))
}

/// Accepted steps grow the step size by this factor.
const STEP_GROWTH: f64 = 1.1;

/// Projected gradient descent from uniform weights. A step that raises the
/// objective is rejected and the step size halved; an accepted step grows
/// it by `STEP_GROWTH`. The run stops when an accepted step moves every
/// weight by less than `tol`.
pub fn gamut_solve(problem: &GamutProblem, model: &EncoderModel, config: &GamutConfig) -> Result<GamutSolution> {
    if model.input_dim() != problem.target.len() {
        return Err(Error::DimensionMismatch {
            what: "gamut descriptor vs encoder input".into(),
            expected: model.input_dim(),
            found: problem.target.len(),
        });
    }
    if !(config.step > 0.0 && config.tol >= 0.0) {
        return Err(Error::invalid(
            "gamut config",
            "step must be positive and tol non-negative",
        ));
    }
    let project = |v: &[f64]| match config.constraint {
        Constraint::Simplex => simplex_project(v),
        Constraint::Box => box_project(v),
    };
    let n = problem.basis.len();
    let target_feature = model.forward(&problem.target)?;
    let mut w = vec![1.0 / n as f64; n];
    let (mut value, mut grad) = gamut_objective(problem, model, &target_feature, &w)?;
    let mut trace = vec![value];
    let mut step = config.step;
    let mut iterations = 0;
    while iterations < config.max_iters && value > 0.0 {
        iterations += 1;
        let candidate = project(&w.iter().zip(&grad).map(|(x, g)| x - step * g).collect::<Vec<_>>());
        let (cand_value, cand_grad) = gamut_objective(problem, model, &target_feature, &candidate)?;
        if cand_value > value {
            step /= 2.0;
            continue;
        }
        let moved = w.iter().zip(&candidate).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        w = candidate;
        value = cand_value;
        grad = cand_grad;
        trace.push(value);
        step *= STEP_GROWTH;
        if moved < config.tol {
            break;
        }
    }
    Ok(GamutSolution {
        weights: w,
        objective: value,
        iterations,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        assert_eq!(simplex_project(&[0.2, 0.3, 0.5]), vec![0.2, 0.3, 0.5]);
        assert_eq!(simplex_project(&[2.0, 0.0]), vec![1.0, 0.0]);
        let third = simplex_project(&[0.5, 0.5, 0.5]);
        assert!(third.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(box_project(&[-1.0, 0.5, 3.0]), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn representable_targets() {
        let basis = vec![vec![1.0, 0.0, 2.0], vec![0.0, 1.0, -1.0], vec![3.0, 1.0, 0.0]];
        let identity = EncoderModel::identity(3);
        let problem = GamutProblem::new(basis[1].clone(), basis.clone()).unwrap();
        let sol = gamut_solve(&problem, &identity, &GamutConfig::default()).unwrap();
        assert!(sol.objective < 1e-10, "{}", sol.objective);
        assert!((sol.weights[1] - 1.0).abs() < 1e-4);

        let half: Vec<f64> = basis[0].iter().zip(&basis[1]).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
        let problem = GamutProblem::new(half, basis[..2].to_vec()).unwrap();
        let sol = gamut_solve(&problem, &identity, &GamutConfig::default()).unwrap();
        assert!(sol.objective < 1e-10);
        assert!((sol.weights[0] - 0.5).abs() < 1e-5);
        assert!(sol.trace.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn problem_validation_and_file_forms() {
        assert!(GamutProblem::new(vec![1.0], vec![vec![1.0]]).is_err());
        assert!(GamutProblem::new(vec![1.0], vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        let file: GamutProblemFile =
            serde_json::from_str(r#"{"target": [1.0, 2.0], "basis": ["v1", [0.0, 1.0]]}"#).unwrap();
        assert_eq!(file.basis[0], DescriptorRef::View("v1".into()));
        assert!(file.resolve(None).is_err());
    }
}
