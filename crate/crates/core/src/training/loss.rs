use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::model::{GeneoObserver, ProbGrid};
use crate::pointcloud::VoxelLabelGrid;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Extra weight on positive voxels.
    pub alpha: f64,
    /// Weight floor shared by every voxel.
    pub epsilon: f64,
    /// Scale of the negativity penalty on mixing weights.
    pub rho_l: f64,
    /// Scale of the negativity penalty on shape parameters.
    pub rho_t: f64,
    pub tversky_enabled: bool,
    /// False-positive penalty of the Tversky term.
    pub tversky_alpha: f64,
    /// False-negative penalty of the Tversky term.
    pub tversky_beta: f64,
    pub tversky_delta: f64,
    pub tversky_mix: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            epsilon: 0.1,
            rho_l: 5.0,
            rho_t: 5.0,
            tversky_enabled: false,
            tversky_alpha: 0.5,
            tversky_beta: 0.5,
            tversky_delta: 1.0,
            tversky_mix: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be > 0, got {v}")))
            }
        };
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be >= 0, got {v}")))
            }
        };
        nonneg("alpha", self.alpha)?;
        pos("epsilon", self.epsilon)?;
        nonneg("rho_l", self.rho_l)?;
        nonneg("rho_t", self.rho_t)?;
        pos("tversky_alpha", self.tversky_alpha)?;
        pos("tversky_beta", self.tversky_beta)?;
        pos("tversky_delta", self.tversky_delta)?;
        nonneg("tversky_mix", self.tversky_mix)
    }
}

/// Per-voxel loss weights `ε + α·y`.
pub fn weight_map(labels: &VoxelLabelGrid, alpha: f64, epsilon: f64) -> Result<Grid3<f64>> {
    if !(alpha >= 0.0 && epsilon > 0.0) {
        return Err(Error::config(format!(
            "weighting needs alpha >= 0 and epsilon > 0 (got {alpha}, {epsilon})"
        )));
    }
    Ok(labels.map(|&y| epsilon + alpha * f64::from(y)))
}

/// Mean over voxels of `w · (p − y)²`.
pub fn seg_loss(prob: &ProbGrid, labels: &VoxelLabelGrid, weights: &Grid3<f64>) -> Result<f64> {
    labels.ensure_shape(prob.shape())?;
    weights.ensure_shape(prob.shape())?;
    let sum: f64 = prob
        .as_slice()
        .iter()
        .zip(labels.as_slice())
        .zip(weights.as_slice())
        .map(|((&p, &y), &w)| w * (p - f64::from(y)).powi(2))
        .sum();
    Ok(sum / prob.len() as f64)
}

#[inline]
fn hinge(x: f64) -> f64 {
    (-x).max(0.0)
}

/// `ρ_l Σ h(λ_i) + ρ_t Σ h(ϑ_ij)` with `h(x) = max(0, −x)`, the derived
/// mixing weight included.
pub fn observer_penalty(obs: &GeneoObserver, rho_l: f64, rho_t: f64) -> f64 {
    let shape: f64 = obs
        .operators
        .iter()
        .flat_map(|o| o.trainable())
        .map(hinge)
        .sum();
    let mix: f64 = obs.lambdas().into_iter().map(hinge).sum();
    rho_l * mix + rho_t * shape
}

/// Gradient of [`observer_penalty`] in the flat trainable layout of
/// [`GeneoObserver::trainable`]. Zero at exactly 0.
pub fn observer_penalty_grad(obs: &GeneoObserver, rho_l: f64, rho_t: f64) -> Vec<f64> {
    let dh = |x: f64| if x < 0.0 { -1.0 } else { 0.0 };
    let mut g: Vec<f64> = obs
        .operators
        .iter()
        .flat_map(|o| o.trainable())
        .map(|v| rho_t * dh(v))
        .collect();
    let lambdas = obs.lambdas();
    let derived = *lambdas.last().unwrap();
    for &l in &obs.free_lambdas {
        // λ_last = 1 − Σ free contributes with the opposite sign
        g.push(rho_l * (dh(l) - dh(derived)));
    }
    g
}

pub fn negativity_penalty(params: &crate::model::SceneNetParams, rho_l: f64, rho_t: f64) -> f64 {
    let obs = params.observer().expect("production observer layout");
    observer_penalty(&obs, rho_l, rho_t)
}

/// Confusion sums of a soft prediction: `(TP, FP, FN)`.
fn soft_confusion(prob: &ProbGrid, labels: &VoxelLabelGrid) -> (f64, f64, f64) {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fneg = 0.0;
    for (&p, &y) in prob.as_slice().iter().zip(labels.as_slice()) {
        let y = f64::from(y);
        tp += y * p;
        fp += (1.0 - y) * p;
        fneg += y * (1.0 - p);
    }
    (tp, fp, fneg)
}

/// `1 − (TP + δ) / (TP + α·FP + β·FN + δ)` over soft counts.
pub fn tversky_loss(prob: &ProbGrid, labels: &VoxelLabelGrid, config: &LossConfig) -> Result<f64> {
    labels.ensure_shape(prob.shape())?;
    if !(config.tversky_delta > 0.0) {
        return Err(Error::config("tversky_delta must be > 0"));
    }
    let (tp, fp, fneg) = soft_confusion(prob, labels);
    let d = config.tversky_delta;
    Ok(1.0 - (tp + d) / (tp + config.tversky_alpha * fp + config.tversky_beta * fneg + d))
}

/// `∂ tversky_loss / ∂p` per voxel.
pub(crate) fn tversky_grad(prob: &ProbGrid, labels: &VoxelLabelGrid, config: &LossConfig) -> Vec<f64> {
    let (tp, fp, fneg) = soft_confusion(prob, labels);
    let d = config.tversky_delta;
    let (a, b) = (config.tversky_alpha, config.tversky_beta);
    let num = tp + d;
    let den = tp + a * fp + b * fneg + d;
    labels
        .as_slice()
        .iter()
        .map(|&y| {
            let y = f64::from(y);
            let dnum = y;
            let dden = y + a * (1.0 - y) - b * y;
            -(dnum * den - num * dden) / (den * den)
        })
        .collect()
}

/// Segmentation data term of one scene: weighted squared error plus the
/// optional Tversky term.
pub fn data_loss(prob: &ProbGrid, labels: &VoxelLabelGrid, config: &LossConfig) -> Result<f64> {
    let w = weight_map(labels, config.alpha, config.epsilon)?;
    let mut loss = seg_loss(prob, labels, &w)?;
    if config.tversky_enabled {
        loss += config.tversky_mix * tversky_loss(prob, labels, config)?;
    }
    Ok(loss)
}

/// `seg_loss + negativity_penalty + mix · tversky_loss` (Tversky only when
/// enabled).
pub fn total_loss(
    prob: &ProbGrid,
    labels: &VoxelLabelGrid,
    params: &crate::model::SceneNetParams,
    config: &LossConfig,
) -> Result<f64> {
    Ok(data_loss(prob, labels, config)? + negativity_penalty(params, config.rho_l, config.rho_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SceneNetParams;
    use crate::kernels::{ArrowParams, CylinderParams, NegSphereParams};

    fn params() -> SceneNetParams {
        SceneNetParams {
            cylinder: CylinderParams { r: 1.0, sigma: 2.0 },
            arrow: ArrowParams {
                r: 1.0,
                sigma: 2.0,
                h: 6.0,
                r_c: 1.0,
                beta: 0.2,
            },
            negsphere: NegSphereParams {
                r: 2.0,
                sigma: 2.0,
                omega: 0.5,
            },
            lambda_cy: 0.3,
            lambda_ar: 0.3,
            kernel_shape: [9, 9, 9],
            tau: 0.5,
        }
    }

    #[test]
    fn weights_two_levels() {
        let labels = Grid3::from_vec([1, 1, 2], vec![1u8, 0]).unwrap();
        let w = weight_map(&labels, 5.0, 0.1).unwrap();
        assert!((w.as_slice()[0] - 5.1).abs() < 1e-15);
        assert!((w.as_slice()[1] - 0.1).abs() < 1e-15);
        let flat = weight_map(&labels, 0.0, 0.1).unwrap();
        assert!(flat.as_slice().iter().all(|&v| v == 0.1));
        assert!(weight_map(&labels, 5.0, 0.0).is_err());
    }

    #[test]
    fn seg_loss_single_tower() {
        let mut labels = Grid3::<u8>::zeros([2, 2, 2]);
        labels.as_mut_slice()[3] = 1;
        let w = weight_map(&labels, 5.0, 0.1).unwrap();
        let zero = Grid3::<f64>::zeros([2, 2, 2]);
        assert!((seg_loss(&zero, &labels, &w).unwrap() - 5.1 / 8.0).abs() < 1e-15);
        let perfect = labels.map(|&y| f64::from(y));
        assert_eq!(seg_loss(&perfect, &labels, &w).unwrap(), 0.0);
    }

    #[test]
    fn penalty_cases() {
        let mut p = params();
        assert_eq!(negativity_penalty(&p, 5.0, 5.0), 0.0);
        p.lambda_cy = -0.2;
        p.lambda_ar = 0.6;
        assert!((negativity_penalty(&p, 5.0, 5.0) - 1.0).abs() < 1e-12);
        p.lambda_cy = 0.7;
        p.lambda_ar = 0.6;
        assert!((negativity_penalty(&p, 5.0, 0.0) - 5.0 * 0.3).abs() < 1e-12);
    }

    #[test]
    fn tversky_limits() {
        let labels = Grid3::from_vec([1, 1, 4], vec![1u8, 0, 1, 0]).unwrap();
        let cfg = LossConfig {
            tversky_delta: 1e-9,
            ..LossConfig::default()
        };
        let exact = labels.map(|&y| f64::from(y));
        assert!(tversky_loss(&exact, &labels, &cfg).unwrap().abs() < 1e-15);
        let miss = labels.map(|&y| 1.0 - f64::from(y));
        assert!((tversky_loss(&miss, &labels, &cfg).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn total_without_tversky() {
        let labels = Grid3::from_vec([1, 1, 2], vec![1u8, 0]).unwrap();
        let prob = Grid3::from_vec([1, 1, 2], vec![0.4, 0.2]).unwrap();
        let cfg = LossConfig::default();
        let w = weight_map(&labels, cfg.alpha, cfg.epsilon).unwrap();
        let t = total_loss(&prob, &labels, &params(), &cfg).unwrap();
        assert!((t - seg_loss(&prob, &labels, &w).unwrap()).abs() < 1e-15);
    }
}
