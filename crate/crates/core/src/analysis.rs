//! Full-matrix analysis of the meta-curvature update.
//!
//! These routines work with an unfactored `P × P` matrix `M` over the flat
//! parameter vector of a small network, with the inner update
//! `θ' = θ - α M ∇L_tr(θ)`. The meta-gradient of the query loss with respect
//! to `M` is the outer product `-α ∇L_val(θ') ∇L_tr(θ)ᵀ`, so plain SGD on `M`
//! accumulates outer products of query and training gradients. Applied to a
//! new task's gradient, the accumulated matrix becomes a similarity-weighted
//! vote over stored query gradients.

use serde::Serialize;

use crate::curvature::{mc_param_grads, CurvatureBlock, Variant};
use crate::error::{invalid, Error, Result};
use crate::model::{loss_grad, mse_loss, Mlp, ParamVector};
use crate::task::Episode;
use crate::tensor::{axpy, dot, norm2, relative_error, Matrix, Tensor};

/// Largest network accepted by [`snn_decompose`].
pub const MAX_ANALYSIS_PARAMS: usize = 200;

fn flat_grad(net: &Mlp, xs: &[f64], ys: &[f64]) -> Result<Vec<f64>> {
    Ok(loss_grad(net, xs, ys)?.to_vector().0)
}

fn check_matrix(net: &Mlp, m: &Matrix) -> Result<usize> {
    let p = net.num_params();
    if m.rows() != p || m.cols() != p {
        return invalid(format!(
            "curvature matrix is {}x{}, network has {p} parameters",
            m.rows(),
            m.cols()
        ));
    }
    Ok(p)
}

/// Pieces of one task's full-matrix inner update.
#[derive(Debug, Clone)]
pub struct FullMatrixStep {
    /// `∇L_tr(θ)`
    pub train_grad: Vec<f64>,
    /// `θ' = θ - α M ∇L_tr(θ)`
    pub adapted: Mlp,
    /// `∇L_val(θ')`
    pub val_grad: Vec<f64>,
    pub val_loss: f64,
}

pub fn full_matrix_step(theta: &Mlp, m: &Matrix, episode: &Episode, alpha: f64) -> Result<FullMatrixStep> {
    check_matrix(theta, m)?;
    let train_grad = flat_grad(theta, &episode.train_x, &episode.train_y)?;
    let dir = m.matvec(&train_grad)?;
    let mut v = theta.to_vector().0;
    axpy(&mut v, -alpha, &dir);
    let adapted = Mlp::from_vector(&theta.sizes(), &ParamVector(v))?;
    let val_grad = flat_grad(&adapted, &episode.eval_x, &episode.eval_y)?;
    let val_loss = mse_loss(&adapted, &episode.eval_x, &episode.eval_y)?;
    Ok(FullMatrixStep {
        train_grad,
        adapted,
        val_grad,
        val_loss,
    })
}

/// Query loss after the full-matrix inner update, as a function of `M`.
pub fn full_matrix_val_loss(theta: &Mlp, m: &Matrix, episode: &Episode, alpha: f64) -> Result<f64> {
    full_matrix_step(theta, m, episode, alpha).map(|s| s.val_loss)
}

/// `-α u gᵀ` as a dense matrix.
pub fn outer_product_meta_grad(step: &FullMatrixStep, alpha: f64) -> Matrix {
    let p = step.train_grad.len();
    Matrix::from_fn(p, p, |r, c| -alpha * step.val_grad[r] * step.train_grad[c])
}

/// The same gradient through the factored machinery: the whole parameter
/// vector as one `(P, 1, 1)` tensor whose `Mo` is the full matrix.
pub fn factored_meta_grad(step: &FullMatrixStep, m: &Matrix, alpha: f64) -> Result<Matrix> {
    let p = step.train_grad.len();
    let block = CurvatureBlock::new(m.clone(), Matrix::identity(1), Matrix::identity(1), Variant::MC2)?;
    let g = Tensor::new(vec![p, 1, 1], step.train_grad.clone())?;
    let u = Tensor::new(vec![p, 1, 1], step.val_grad.iter().map(|x| -alpha * x).collect())?;
    Ok(mc_param_grads(&g, &u, &block)?.mo)
}

/// One plain-SGD step on `M` for every task in sequence. Returns the final
/// matrix and the accumulation `M + αβ Σ uᵢ gᵢᵀ` built from the gradients
/// seen along the way.
pub fn sgd_accumulate(theta: &Mlp, m: &Matrix, tasks: &[Episode], alpha: f64, beta: f64) -> Result<(Matrix, Matrix)> {
    check_matrix(theta, m)?;
    let mut current = m.clone();
    let mut predicted = m.clone();
    for ep in tasks {
        let step = full_matrix_step(theta, &current, ep, alpha)?;
        let grad = factored_meta_grad(&step, &current, alpha)?;
        axpy(current.data_mut(), -beta, grad.data());
        let p = step.train_grad.len();
        for r in 0..p {
            let ur = alpha * beta * step.val_grad[r];
            axpy(&mut predicted.data_mut()[r * p..(r + 1) * p], ur, &step.train_grad);
        }
    }
    Ok((current, predicted))
}

/// Soft nearest-neighbour reading of an SGD-trained full matrix.
#[derive(Debug, Clone, Serialize)]
pub struct SnnReport {
    /// `M_T = M - β Σᵢ ∇_M L_val^i`, all gradients taken at `M`.
    pub trained: Matrix,
    /// `M_T g_new`
    pub transformed: Vec<f64>,
    /// `M g_new + β Σᵢ (gᵢᵀ g_new) α uᵢ`
    pub decomposed: Vec<f64>,
    /// Relative gap between the two sides.
    pub identity_error: f64,
    /// `gᵢᵀ g_new`
    pub similarity: Vec<f64>,
    /// `‖α (∇L_val^i(θᵢ) - ∇L_val^i(θ))‖` per task.
    pub taylor_residuals: Vec<f64>,
    /// `‖β Σᵢ (gᵢᵀ g_new) α (∇L_val^i(θᵢ) - ∇L_val^i(θ))‖`
    pub vote_taylor_residual: f64,
}

pub fn snn_decompose(
    theta: &Mlp,
    m: &Matrix,
    tasks: &[Episode],
    new_task: &Episode,
    alpha: f64,
    beta: f64,
) -> Result<SnnReport> {
    let p = theta.num_params();
    if p > MAX_ANALYSIS_PARAMS {
        return Err(Error::SizeLimit {
            what: "analysis network parameters",
            size: p,
            limit: MAX_ANALYSIS_PARAMS,
        });
    }
    check_matrix(theta, m)?;
    let g_new = flat_grad(theta, &new_task.train_x, &new_task.train_y)?;

    let mut trained = m.clone();
    let mut vote = vec![0.0; p];
    let mut vote_residual = vec![0.0; p];
    let mut similarity = Vec::with_capacity(tasks.len());
    let mut taylor_residuals = Vec::with_capacity(tasks.len());
    for ep in tasks {
        let step = full_matrix_step(theta, m, ep, alpha)?;
        let grad = factored_meta_grad(&step, m, alpha)?;
        axpy(trained.data_mut(), -beta, grad.data());

        let w = dot(&step.train_grad, &g_new);
        similarity.push(w);
        axpy(&mut vote, beta * w * alpha, &step.val_grad);

        let val_at_theta = flat_grad(theta, &ep.eval_x, &ep.eval_y)?;
        let diff: Vec<f64> = step
            .val_grad
            .iter()
            .zip(&val_at_theta)
            .map(|(a, b)| alpha * (a - b))
            .collect();
        taylor_residuals.push(norm2(&diff));
        axpy(&mut vote_residual, beta * w, &diff);
    }

    let transformed = trained.matvec(&g_new)?;
    let mut decomposed = m.matvec(&g_new)?;
    axpy(&mut decomposed, 1.0, &vote);
    Ok(SnnReport {
        identity_error: relative_error(&transformed, &decomposed),
        trained,
        transformed,
        decomposed,
        similarity,
        taylor_residuals,
        vote_taylor_residual: norm2(&vote_residual),
    })
}
