//! Reverse-mode gradient of the training loss with respect to every
//! trainable scalar.
//!
//! Chain: `∂L/∂p` → `max(0, tanh)` derivative → correlation adjoint (one pass
//! giving `∂L/∂K` for the mixed kernel) → inner products with each kernel
//! (mixing weights) and with each kernel's parameter Jacobian (shape
//! parameters).

use crate::conv::kernel_adjoint;
use crate::error::Result;
use crate::grid::Grid3;
use crate::kernels::KernelGradients;
use crate::model::{CompiledObserver, GeneoObserver, SceneNetParams, N_TRAINABLE};
use crate::pointcloud::{VoxelGrid, VoxelLabelGrid};

use super::loss::{data_loss, observer_penalty, observer_penalty_grad, tversky_grad, LossConfig};

/// Loss and gradient of one scene.
#[derive(Clone, Debug)]
pub struct SceneGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient of the data term only (no penalty), reusing a compiled observer
/// and its kernel Jacobians.
pub fn data_gradient(
    obs: &GeneoObserver,
    compiled: &CompiledObserver,
    kernel_grads: &[KernelGradients],
    grid: &VoxelGrid,
    labels: &VoxelLabelGrid,
    config: &LossConfig,
) -> Result<SceneGradient> {
    let h = compiled.observe(grid)?;
    labels.ensure_shape(h.shape())?;
    let n = h.len() as f64;
    let prob = h.map(|&v| v.tanh().max(0.0));
    let loss = data_loss(&prob, labels, config)?;

    let tv = config
        .tversky_enabled
        .then(|| tversky_grad(&prob, labels, config));
    let mut upstream = Grid3::<f64>::zeros(h.shape());
    for (i, ((&hv, &p), &y)) in h
        .as_slice()
        .iter()
        .zip(prob.as_slice())
        .zip(labels.as_slice())
        .enumerate()
    {
        // relu subgradient at 0 is 0
        if hv <= 0.0 {
            continue;
        }
        let y = f64::from(y);
        let w = config.epsilon + config.alpha * y;
        let mut dl_dp = 2.0 * w * (p - y) / n;
        if let Some(tv) = &tv {
            dl_dp += config.tversky_mix * tv[i];
        }
        upstream.as_mut_slice()[i] = dl_dp * (1.0 - p * p);
    }

    let adj = kernel_adjoint(&grid.values, &upstream, compiled.kernel_shape())?;
    let adj = adj.as_slice();
    let lambdas = &compiled.lambdas;
    let mut grad = Vec::with_capacity(obs.n_trainable());
    for (kg, &lambda) in kernel_grads.iter().zip(lambdas) {
        for t in &kg.tensors {
            grad.push(lambda * dot(adj, t.as_slice()));
        }
    }
    let dl_dlambda: Vec<f64> = compiled
        .kernels
        .iter()
        .map(|k| dot(adj, k.weights.as_slice()))
        .collect();
    let last = *dl_dlambda.last().unwrap();
    for d in &dl_dlambda[..obs.free_lambdas.len()] {
        grad.push(d - last);
    }
    Ok(SceneGradient { loss, grad })
}

/// Full loss (data term + negativity penalty) and its gradient for one scene.
pub fn observer_gradient(
    obs: &GeneoObserver,
    grid: &VoxelGrid,
    labels: &VoxelLabelGrid,
    config: &LossConfig,
) -> Result<SceneGradient> {
    let (compiled, kgrads) = obs.compile_with_gradients()?;
    let mut g = data_gradient(obs, &compiled, &kgrads, grid, labels, config)?;
    g.loss += observer_penalty(obs, config.rho_l, config.rho_t);
    for (a, b) in g
        .grad
        .iter_mut()
        .zip(observer_penalty_grad(obs, config.rho_l, config.rho_t))
    {
        *a += b;
    }
    Ok(g)
}

/// Total loss of one scene as a function of the observer; the reference the
/// gradient is checked against.
pub fn observer_loss(
    obs: &GeneoObserver,
    grid: &VoxelGrid,
    labels: &VoxelLabelGrid,
    config: &LossConfig,
) -> Result<f64> {
    let prob = obs.compile()?.forward(grid)?;
    Ok(data_loss(&prob, labels, config)? + observer_penalty(obs, config.rho_l, config.rho_t))
}

/// Gradient of the total loss over the 11 production parameters, in the
/// order of [`crate::model::TRAINABLE_NAMES`].
pub fn backward(
    grid: &VoxelGrid,
    labels: &VoxelLabelGrid,
    params: &SceneNetParams,
    config: &LossConfig,
) -> Result<[f64; N_TRAINABLE]> {
    let g = observer_gradient(&params.observer()?, grid, labels, config)?;
    Ok(g.grad.try_into().expect("11 production gradients"))
}
