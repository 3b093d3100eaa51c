use metacurv::analysis::{
    factored_meta_grad, full_matrix_step, full_matrix_val_loss, outer_product_meta_grad, sgd_accumulate, snn_decompose,
    MAX_ANALYSIS_PARAMS,
};
use metacurv::diag::{central_diff, random_episode, random_net};
use metacurv::model::loss_grad;
use metacurv::tensor::relative_error;
use metacurv::{Episode, Error, Matrix, Mlp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TINY: [usize; 4] = [1, 4, 4, 1];

fn setup(seed: u64, tasks: usize) -> (Mlp, Matrix, Vec<Episode>, Episode) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let net = random_net(&mut r, &TINY);
    let p = net.num_params();
    let m = Matrix::from_fn(
        p,
        p,
        |i, j| if i == j { 1.0 } else { 0.0 } + 0.05 * r.gen_range(-1.0..1.0),
    );
    let eps = (0..tasks).map(|_| random_episode(&mut r, 5, 10)).collect();
    (net, m, eps, random_episode(&mut r, 5, 10))
}

fn flat_grad(net: &Mlp, xs: &[f64], ys: &[f64]) -> Vec<f64> {
    loss_grad(net, xs, ys).unwrap().to_vector().0
}

/// `θ - α M ∇L_tr(θ)` written out.
fn adapted_oracle(net: &Mlp, m: &Matrix, ep: &Episode, alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let g = flat_grad(net, &ep.train_x, &ep.train_y);
    let mg = m.matvec(&g).unwrap();
    let theta: Vec<f64> = net.to_vector().0.iter().zip(&mg).map(|(t, d)| t - alpha * d).collect();
    (theta, g)
}

#[test]
fn full_matrix_step_matches_direct_update() {
    let (net, m, eps, _) = setup(1, 1);
    let step = full_matrix_step(&net, &m, &eps[0], 0.01).unwrap();
    let (theta, g) = adapted_oracle(&net, &m, &eps[0], 0.01);
    assert_eq!(step.train_grad, g);
    assert!(relative_error(&step.adapted.to_vector().0, &theta) <= 1e-15);
}

#[test]
fn full_matrix_gradient_is_outer_product_and_matches_fd() {
    let alpha = 0.01;
    let (net, m, eps, _) = setup(2, 1);
    let ep = &eps[0];
    let step = full_matrix_step(&net, &m, ep, alpha).unwrap();
    let outer = outer_product_meta_grad(&step, alpha);
    let p = net.num_params();
    for i in 0..p {
        for j in 0..p {
            assert_eq!(outer.get(i, j), -alpha * step.val_grad[i] * step.train_grad[j]);
        }
    }
    let factored = factored_meta_grad(&step, &m, alpha).unwrap();
    assert!(relative_error(factored.data(), outer.data()) <= 1e-12);
    let fd = central_diff(
        m.data(),
        |_| 1e-5,
        |v| full_matrix_val_loss(&net, &Matrix::new(p, p, v.to_vec())?, ep, alpha),
    )
    .unwrap();
    assert!(relative_error(outer.data(), &fd) <= 1e-6);
}

#[test]
#[allow(clippy::needless_range_loop)]
fn sgd_on_m_accumulates_outer_products() {
    let (alpha, beta) = (0.01, 0.001);
    let (net, m, eps, _) = setup(3, 4);
    let (trained, predicted) = sgd_accumulate(&net, &m, &eps, alpha, beta).unwrap();
    // Independent oracle: one written-out plain-SGD step per task, each
    // adding αβ u gᵀ with u taken at the current matrix.
    let mut expected = m.clone();
    for ep in &eps {
        let (theta, g) = adapted_oracle(&net, &expected, ep, alpha);
        let adapted = Mlp::from_vector(&TINY, &metacurv::ParamVector(theta)).unwrap();
        let u = flat_grad(&adapted, &ep.eval_x, &ep.eval_y);
        for i in 0..u.len() {
            for j in 0..g.len() {
                let v = expected.get(i, j) + alpha * beta * u[i] * g[j];
                expected.set(i, j, v);
            }
        }
    }
    assert!(relative_error(trained.data(), expected.data()) <= 1e-12);
    assert!(relative_error(predicted.data(), expected.data()) <= 1e-12);
}

#[test]
fn empty_task_list_is_trivial() {
    let (net, m, _, new_task) = setup(4, 0);
    let r = snn_decompose(&net, &m, &[], &new_task, 0.01, 0.001).unwrap();
    assert_eq!(r.trained, m);
    assert_eq!(r.transformed, r.decomposed);
    assert!(r.similarity.is_empty());
}

#[test]
fn decomposition_identity_and_similarities() {
    let (alpha, beta) = (0.01, 0.001);
    let (net, m, eps, new_task) = setup(5, 2);
    let r = snn_decompose(&net, &m, &eps, &new_task, alpha, beta).unwrap();
    assert!(r.identity_error <= 1e-10);
    assert!(relative_error(&r.transformed, &r.decomposed) <= 1e-10);
    let g_new = flat_grad(&net, &new_task.train_x, &new_task.train_y);
    for (ep, w) in eps.iter().zip(&r.similarity) {
        let g = flat_grad(&net, &ep.train_x, &ep.train_y);
        let dot: f64 = g.iter().zip(&g_new).map(|(a, b)| a * b).sum();
        assert!((dot - w).abs() <= 1e-12 * dot.abs().max(1.0));
    }
    assert_eq!(r.taylor_residuals.len(), 2);
}

#[test]
fn taylor_residual_shrinks_with_step_size() {
    for seed in 0..20 {
        let (net, m, eps, new_task) = setup(100 + seed, 2);
        let residuals: Vec<f64> = [0.1, 0.01, 0.001, 0.0001]
            .iter()
            .map(|&a| {
                snn_decompose(&net, &m, &eps, &new_task, a, 0.001)
                    .unwrap()
                    .vote_taylor_residual
            })
            .collect();
        for w in residuals.windows(2) {
            assert!(w[1] < w[0], "seed {seed}: {residuals:?}");
        }
    }
}

#[test]
fn oversized_networks_are_rejected() {
    let net = metacurv::model::init_weights(0);
    assert!(net.num_params() > MAX_ANALYSIS_PARAMS);
    let p = net.num_params();
    let m = Matrix::identity(p);
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let ep = random_episode(&mut r, 5, 10);
    let err = snn_decompose(&net, &m, std::slice::from_ref(&ep), &ep, 0.01, 0.001).unwrap_err();
    assert!(matches!(err, Error::SizeLimit { .. }));
}
