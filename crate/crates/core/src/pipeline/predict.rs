use crate::error::{Error, Result};
use crate::kinematics::{extract_params, to_affine, Affine3};
use crate::regressor::{forward, NetworkWeights};
use crate::render::{downsample, point_cloud_to_depth, DepthImage, PointCloud};

use super::Observer;

/// One network evaluation inside [`predict_iterative`].
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    /// Predicted residual transformation parameters.
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Cumulative transform after this step.
    pub cumulative: Affine3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub depth: DepthImage,
    pub cloud: PointCloud,
    /// `T_1^-1 ... T_n^-1 ∘ theta_in`.
    pub cumulative: Affine3,
    /// Configuration estimate of the last step; `None` when no step ran.
    pub gamma: Option<Vec<f64>>,
    pub steps: Vec<Step>,
}

impl Prediction {
    /// Transformation parameters of the observed object for a run started
    /// from the identity: the projection of the inverse cumulative transform.
    pub fn theta(&self, obs: &Observer) -> Result<Vec<f64>> {
        Ok(extract_params(&self.cumulative.inverse()?, &obs.task.schema).0)
    }

    /// `theta ++ gamma` after `k` steps (1-based) of a run started from the identity.
    pub fn params_after(&self, k: usize, obs: &Observer) -> Result<Vec<f64>> {
        let step = &self.steps[k - 1];
        let (mut out, _) = extract_params(&step.cumulative.inverse()?, &obs.task.schema);
        out.extend_from_slice(&step.gamma);
        Ok(out)
    }
}

/// Predict, undo the predicted transform on the cloud, re-render, repeat.
/// `id` names the record in errors.
pub fn predict_iterative(
    depth: &DepthImage,
    cloud: &PointCloud,
    theta_in: &Affine3,
    w: &NetworkWeights,
    n_pred: usize,
    obs: &Observer,
    id: usize,
) -> Result<Prediction> {
    run(depth, cloud, theta_in, w, n_pred, None, obs, id)
}

/// Like [`predict_iterative`] but stops early once a predicted step is
/// within `tol` of the identity in every component.
pub fn predict_until_converged(
    depth: &DepthImage,
    cloud: &PointCloud,
    w: &NetworkWeights,
    max_pred: usize,
    tol: f64,
    obs: &Observer,
    id: usize,
) -> Result<Prediction> {
    run(depth, cloud, &Affine3::identity(), w, max_pred, Some(tol), obs, id)
}

/// True iff every component of the step is below `tol` in magnitude.
pub fn early_stop_check(theta_step: &[f64], tol: f64) -> bool {
    theta_step.iter().all(|v| v.abs() < tol)
}

#[allow(clippy::too_many_arguments)]
fn run(
    depth: &DepthImage,
    cloud: &PointCloud,
    theta_in: &Affine3,
    w: &NetworkWeights,
    n_pred: usize,
    tol: Option<f64>,
    obs: &Observer,
    id: usize,
) -> Result<Prediction> {
    let schema = &obs.task.schema;
    let n = schema.n_transform();
    let mut d = depth.clone();
    let mut p = cloud.clone();
    let mut cumulative = *theta_in;
    let mut steps = Vec::with_capacity(n_pred);
    for _ in 0..n_pred {
        let out = forward(&d, w)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinitePrediction { record: id });
        }
        let (theta, gamma) = out.split_at(n);
        let step_inv = to_affine(theta, schema)?.inverse()?;
        p = step_inv.apply(&p);
        d = downsample(&point_cloud_to_depth(&p, &obs.camera), obs.factor)?;
        cumulative = step_inv.compose(&cumulative);
        steps.push(Step {
            theta: theta.to_vec(),
            gamma: gamma.to_vec(),
            cumulative,
        });
        if tol.is_some_and(|t| early_stop_check(theta, t)) {
            break;
        }
    }
    Ok(Prediction {
        depth: d,
        cloud: p,
        cumulative,
        gamma: steps.last().map(|s| s.gamma.clone()),
        steps,
    })
}
