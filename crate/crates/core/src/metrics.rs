//! MPJPE, PCK and AUC.
//!
//! PCK counts an error as correct when it is at most the threshold. AUC is
//! the mean PCK over a threshold grid, by default 5, 10, ..., 150 mm. Over a
//! dataset, joint errors are pooled across all samples before PCK and AUC
//! unless per-pose mode is requested, in which case each pose's MPJPE is the
//! unit being thresholded.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_PCK_THRESHOLD_MM: f64 = 150.0;

/// `{5, 10, ..., 150}`.
pub fn default_auc_grid() -> Vec<f64> {
    (1..=30).map(|k| 5.0 * k as f64).collect()
}

/// Euclidean error of each joint.
pub fn per_joint_errors(pred: &Tensor, gt: &Tensor) -> Result<Vec<f64>> {
    if pred.shape() != gt.shape() || pred.shape().len() != 2 || pred.cols() != 3 {
        return Err(Error::shape("per_joint_errors", pred.shape(), gt.shape()));
    }
    Ok((0..pred.rows())
        .map(|i| {
            pred.row(i)
                .iter()
                .zip(gt.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Mean per-joint Euclidean distance.
pub fn mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let errors = per_joint_errors(pred, gt)?;
    if errors.is_empty() {
        return Err(Error::Metric("mpjpe of a pose with no joints".into()));
    }
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Fraction of errors at or below `threshold`.
pub fn pck(errors: &[f64], threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Metric("pck of an empty error set".into()));
    }
    if !(threshold > 0.0) {
        return Err(Error::Metric(format!(
            "pck threshold must be positive, got {threshold}"
        )));
    }
    let hits = errors.iter().filter(|&&e| e <= threshold).count();
    Ok(hits as f64 / errors.len() as f64)
}

/// Mean of [`pck`] over the default grid.
pub fn auc(errors: &[f64]) -> Result<f64> {
    auc_on_grid(errors, &default_auc_grid())
}

pub fn auc_on_grid(errors: &[f64], grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Metric("auc over an empty threshold grid".into()));
    }
    let mut total = 0.0;
    for &t in grid {
        total += pck(errors, t)?;
    }
    Ok(total / grid.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PckMode {
    /// Every joint of every pose is one trial.
    #[default]
    PerJoint,
    /// Each pose's MPJPE is one trial.
    PerPose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub pck_threshold_mm: f64,
    pub auc_grid_mm: Vec<f64>,
    pub pck_mode: PckMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            pck_threshold_mm: DEFAULT_PCK_THRESHOLD_MM,
            auc_grid_mm: default_auc_grid(),
            pck_mode: PckMode::PerJoint,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mpjpe_mm: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_action_mpjpe_mm: BTreeMap<String, f64>,
    pub pck: f64,
    pub auc: f64,
    pub n_samples: usize,
    pub options: EvalOptions,
}

/// Score predictions against ground truth. `actions` optionally tags each
/// sample for the per-action breakdown.
pub fn evaluate(
    preds: &[Tensor],
    gts: &[Tensor],
    actions: Option<&[Option<String>]>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} ground-truth poses",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Metric("evaluation over zero samples".into()));
    }
    let mut pooled = Vec::new();
    let mut per_pose = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(gts) {
        let errs = per_joint_errors(p, g)?;
        if errs.is_empty() {
            return Err(Error::Metric("pose with no joints".into()));
        }
        per_pose.push(errs.iter().sum::<f64>() / errs.len() as f64);
        pooled.extend(errs);
    }
    let trials = match opts.pck_mode {
        PckMode::PerJoint => &pooled,
        PckMode::PerPose => &per_pose,
    };
    let mut per_action: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    if let Some(tags) = actions {
        for (tag, e) in tags.iter().zip(&per_pose) {
            if let Some(tag) = tag {
                let entry = per_action.entry(tag.clone()).or_default();
                entry.0 += e;
                entry.1 += 1;
            }
        }
    }
    Ok(EvalReport {
        mpjpe_mm: pooled.iter().sum::<f64>() / pooled.len() as f64,
        per_action_mpjpe_mm: per_action
            .into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect(),
        pck: pck(trials, opts.pck_threshold_mm)?,
        auc: auc_on_grid(trials, &opts.auc_grid_mm)?,
        n_samples: preds.len(),
        options: opts.clone(),
    })
}
