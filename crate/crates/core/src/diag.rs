//! Property suites behind the `diag` command.
//!
//! Each suite draws random instances from fixed seeds and checks an
//! identity against an independent route: direct summation, dense
//! Kronecker expansion or central finite differences.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::{
    factored_meta_grad, full_matrix_step, full_matrix_val_loss, outer_product_meta_grad, sgd_accumulate, snn_decompose,
};
use crate::curvature::{mc_param_grads, mc_transform, CurvatureBlock, Variant};
use crate::error::{Error, Result};
use crate::inner::{adapt, meta_grad_theta, InnerRule, MetaGradMode};
use crate::model::{hvp, loss_grad, mse_loss, Dense, Mlp, ParamVector, HVP_STEP};
use crate::rng::{stream, Domain};
use crate::task::{sample_episode, sample_task, Episode};
use crate::tensor::{devectorize, fold, kron, mode_product, relative_error, unfold, vectorize, Matrix, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Suite {
    Algebra,
    Gradients,
    Eq6,
    Eq8,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Algebra, Suite::Gradients, Suite::Eq6, Suite::Eq8];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Algebra => "algebra",
            Suite::Gradients => "gradients",
            Suite::Eq6 => "eq6",
            Suite::Eq8 => "eq8",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown suite {s:?} (expected algebra, gradients, eq6 or eq8)"))
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn new(name: &str, errors: &[f64], tolerance: f64) -> Self {
        let max_error = errors
            .iter()
            .fold(0.0f64, |m, &e| if e.is_nan() { f64::NAN } else { m.max(e) });
        Check {
            name: name.to_string(),
            instances: errors.len(),
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        }
    }

    /// Passes when every value is strictly below the bound.
    fn below(name: &str, values: &[f64], bound: f64) -> Self {
        let mut c = Check::new(name, values, bound);
        c.passed = values.iter().all(|&v| v < bound);
        c
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:<40} n={:<5} max={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.max_error,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Instance counts for the suites.
#[derive(Debug, Clone, Copy)]
pub struct SuiteSize {
    pub algebra: usize,
    pub gradient_nets: usize,
    pub taylor_instances: usize,
}

impl Default for SuiteSize {
    fn default() -> Self {
        SuiteSize {
            algebra: 200,
            gradient_nets: 100,
            taylor_instances: 20,
        }
    }
}

pub fn run_suite(suite: Suite, seed: u64, size: SuiteSize) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Algebra => algebra(seed, size.algebra)?,
        Suite::Gradients => gradients(seed, size.gradient_nets)?,
        Suite::Eq6 => eq6(seed)?,
        Suite::Eq8 => eq8(seed, size.taylor_instances)?,
    };
    Ok(SuiteReport { suite, checks })
}

fn rng_for(seed: u64, suite: Suite, instance: usize) -> ChaCha8Rng {
    stream(seed, Domain::Diagnostics, suite as u64, instance as u64)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).expect("positive extents")
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Glorot weights with small random biases, so that no unit is exactly at
/// its kink for typical inputs.
pub fn random_net(rng: &mut impl Rng, sizes: &[usize]) -> Mlp {
    let mut net = Mlp::glorot(sizes, rng).expect("valid sizes");
    for t in net.layers_mut().iter_mut().map(|l| &mut l.bias) {
        t.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    }
    net
}

pub fn random_episode(rng: &mut impl Rng, k: usize, n_eval: usize) -> Episode {
    let task = sample_task(rng);
    sample_episode(task, k, n_eval, rng)
}

fn random_block(rng: &mut impl Rng, shape: [usize; 3], variant: Variant) -> CurvatureBlock {
    let near_identity = |rng: &mut dyn rand::RngCore, n: usize| {
        Matrix::from_fn(
            n,
            n,
            |r, c| if r == c { 1.0 } else { 0.0 } + 0.3 * rng.gen_range(-1.0..1.0),
        )
    };
    let mo = match variant {
        Variant::MC1 => Matrix::identity(shape[0]),
        Variant::MC2 => near_identity(rng, shape[0]),
    };
    CurvatureBlock::new(mo, near_identity(rng, shape[1]), near_identity(rng, shape[2]), variant)
        .expect("square factors")
}

fn permutations3() -> [[usize; 3]; 6] {
    [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]]
}

fn algebra(seed: u64, n: usize) -> Result<Vec<Check>> {
    let mut unfold_law = Vec::with_capacity(n);
    let mut round_trip = Vec::with_capacity(n);
    let mut commute = Vec::with_capacity(n);
    let mut kron_eq = Vec::with_capacity(n);
    let mut expanded = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng_for(seed, Suite::Algebra, i);
        // Unfolding law on orders 1..=4.
        let order = rng.gen_range(1..=4);
        let shape: Vec<usize> = (0..order).map(|_| rng.gen_range(1..=4)).collect();
        let t = random_tensor(&mut rng, &shape);
        let mode = rng.gen_range(1..=order);
        let rows = rng.gen_range(1..=4);
        let m = random_matrix(&mut rng, rows, shape[mode - 1]);
        let lhs = unfold(&mode_product(&t, &m, mode)?, mode)?;
        let rhs = m.matmul(&unfold(&t, mode)?)?;
        unfold_law.push(relative_error(lhs.data(), rhs.data()));
        let back = fold(&unfold(&t, mode)?, mode, &shape)?;
        let devec = devectorize(&vectorize(&t), &shape)?;
        round_trip.push(if back == t && devec == t { 0.0 } else { 1.0 });

        // Order-3 meta-curvature identities.
        let dims = [rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=5)];
        let g = random_tensor(&mut rng, &dims);
        let factors: Vec<Matrix> = dims.iter().map(|&e| random_matrix(&mut rng, e, e)).collect();
        let reference = {
            let t = mode_product(&g, &factors[2], 3)?;
            let t = mode_product(&t, &factors[1], 2)?;
            mode_product(&t, &factors[0], 1)?
        };
        let mut worst: f64 = 0.0;
        for perm in permutations3() {
            let mut t = g.clone();
            for &k in &perm {
                t = mode_product(&t, &factors[k], k + 1)?;
            }
            worst = worst.max(relative_error(t.data(), reference.data()));
        }
        commute.push(worst);

        let dense = kron(&factors[0], &kron(&factors[1], &factors[2]));
        let via_kron = dense.matvec(&vectorize(&g))?;
        kron_eq.push(relative_error(&vectorize(&reference), &via_kron));

        let hats = expanded_factors(&factors, dims);
        let mut worst: f64 = 0.0;
        for perm in permutations3() {
            let mut v = vectorize(&g);
            for &k in perm.iter().rev() {
                v = hats[k].matvec(&v)?;
            }
            worst = worst.max(relative_error(&v, &via_kron));
        }
        expanded.push(worst);
    }
    Ok(vec![
        Check::new("unfold(t x_n M, n) == M unfold(t, n)", &unfold_law, 1e-12),
        Check::new("fold/devectorize round trips (bitwise)", &round_trip, 0.0),
        Check::new("distinct-mode commutativity", &commute, 1e-12),
        Check::new("Kronecker equivalence", &kron_eq, 1e-12),
        Check::new("expanded-factor commutativity", &expanded, 1e-12),
    ])
}

/// `Mo ⊗ I ⊗ I`, `I ⊗ Mi ⊗ I`, `I ⊗ I ⊗ Mf`.
pub fn expanded_factors(factors: &[Matrix], dims: [usize; 3]) -> [Matrix; 3] {
    let id = |n: usize| Matrix::identity(n);
    [
        kron(&factors[0], &kron(&id(dims[1]), &id(dims[2]))),
        kron(&id(dims[0]), &kron(&factors[1], &id(dims[2]))),
        kron(&id(dims[0]), &kron(&id(dims[1]), &factors[2])),
    ]
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_diff(x: &[f64], step: impl Fn(f64) -> f64, f: impl Fn(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = step(x[i]);
        probe[i] = x[i] + h;
        let fp = f(&probe)?;
        probe[i] = x[i] - h;
        let fm = f(&probe)?;
        probe[i] = x[i];
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

fn net_loss(sizes: &[usize], xs: &[f64], ys: &[f64]) -> impl Fn(&[f64]) -> Result<f64> {
    let (sizes, xs, ys) = (sizes.to_vec(), xs.to_vec(), ys.to_vec());
    move |v: &[f64]| {
        let net = Mlp::from_vector(&sizes, &ParamVector(v.to_vec()))?;
        mse_loss(&net, &xs, &ys)
    }
}

fn gradients(seed: u64, nets: usize) -> Result<Vec<Check>> {
    // loss_grad vs finite differences.
    let mut grad_err = Vec::with_capacity(nets);
    for i in 0..nets {
        let mut rng = rng_for(seed, Suite::Gradients, i);
        let sizes: &[usize] = if i % 10 == 0 { &[1, 40, 40, 1] } else { &[1, 8, 8, 1] };
        let net = random_net(&mut rng, sizes);
        let ep = random_episode(&mut rng, 10, 1);
        let analytic = loss_grad(&net, &ep.train_x, &ep.train_y)?.to_vector().0;
        let fd = central_diff(
            &net.to_vector().0,
            |x| 1e-6 * (1.0 + x.abs()),
            net_loss(sizes, &ep.train_x, &ep.train_y),
        )?;
        grad_err.push(relative_error(&analytic, &fd));
    }

    // Factor gradients vs finite differences of ⟨MC(g), u⟩.
    let mut factor_err = Vec::new();
    for (i, dims) in [[2, 3, 4], [5, 4, 1]].into_iter().enumerate() {
        for j in 0..5 {
            let mut rng = rng_for(seed, Suite::Gradients, 1000 + 10 * i + j);
            let g = random_tensor(&mut rng, &dims);
            let u = random_tensor(&mut rng, &dims);
            let block = random_block(&mut rng, dims, Variant::MC2);
            let analytic = mc_param_grads(&g, &u, &block)?;
            for which in 0..3 {
                let pick = |b: &CurvatureBlock| -> Matrix { [&b.mo, &b.mi, &b.mf][which].clone() };
                let base = pick(&block);
                let objective = |v: &[f64]| -> Result<f64> {
                    let mut b = block.clone();
                    let m = Matrix::new(base.rows(), base.cols(), v.to_vec())?;
                    match which {
                        0 => b.mo = m,
                        1 => b.mi = m,
                        _ => b.mf = m,
                    }
                    Ok(mc_transform(&g, &b)?.dot(&u))
                };
                let fd = central_diff(base.data(), |_| 1e-5, objective)?;
                let exact = [&analytic.mo, &analytic.mi, &analytic.mf][which];
                factor_err.push(relative_error(exact.data(), &fd));
            }
        }
    }

    // Exact one-step meta-gradient vs composite finite differences.
    let sizes = [1, 4, 4, 1];
    let mut meta_err = Vec::new();
    for i in 0..8 {
        let mut rng = rng_for(seed, Suite::Gradients, 2000 + i);
        let net = random_net(&mut rng, &sizes);
        let ep = random_episode(&mut rng, 5, 10);
        let alpha = 0.05;
        let mut per_coord = InnerRule::per_coordinate(&net, alpha);
        let groups: Vec<Vec<f64>> = per_coord
            .learnable_groups()
            .into_iter()
            .map(|(_, g)| g.iter().map(|_| rng.gen_range(0.0..2.0 * alpha)).collect())
            .collect();
        per_coord.set_learnable_groups(&groups)?;
        let per_layer = InnerRule::PerLayer {
            alpha: (0..net.layers().len())
                .map(|_| rng.gen_range(0.0..2.0 * alpha))
                .collect(),
        };
        let blocks = net
            .tensors()
            .map(|t| {
                let s = t.shape();
                random_block(&mut rng, [s[0], s[1], s[2]], Variant::MC2)
            })
            .collect();
        let meta_curv = InnerRule::MetaCurv {
            alpha,
            variant: Variant::MC2,
            blocks,
        };
        for rule in [InnerRule::fixed(alpha), per_coord, per_layer, meta_curv] {
            let exact = meta_grad_theta(&net, &ep, &rule, MetaGradMode::Exact)?.to_vector().0;
            let composite = |v: &[f64]| -> Result<f64> {
                let theta = Mlp::from_vector(&sizes, &ParamVector(v.to_vec()))?;
                let adapted = adapt(&theta, &ep, std::slice::from_ref(&rule), 1)?.adapted;
                mse_loss(&adapted, &ep.eval_x, &ep.eval_y)
            };
            let fd = central_diff(&net.to_vector().0, |x| 1e-6 * (1.0 + x.abs()), composite)?;
            meta_err.push(relative_error(&exact, &fd));
        }
    }

    // HVP of a linear least-squares model against its analytic Hessian.
    let mut hvp_err = Vec::new();
    for i in 0..20 {
        let mut rng = rng_for(seed, Suite::Gradients, 3000 + i);
        let net = linear_net(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let ep = random_episode(&mut rng, 8, 1);
        let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let k = ep.train_x.len() as f64;
        let sxx: f64 = ep.train_x.iter().map(|x| x * x).sum();
        let sx: f64 = ep.train_x.iter().sum();
        let analytic = [2.0 / k * (sxx * v[0] + sx * v[1]), 2.0 / k * (sx * v[0] + k * v[1])];
        let numeric = hvp(&net, &ep.train_x, &ep.train_y, &ParamVector(v.to_vec()), HVP_STEP)?;
        hvp_err.push(relative_error(&numeric.0, &analytic));
    }

    Ok(vec![
        Check::new("loss_grad vs finite differences", &grad_err, 1e-6),
        Check::new("mc_param_grads vs finite differences", &factor_err, 1e-6),
        Check::new("exact meta-gradient vs composite FD", &meta_err, 1e-4),
        Check::new("HVP vs analytic least-squares Hessian", &hvp_err, 1e-8),
    ])
}

pub fn linear_net(w: f64, b: f64) -> Mlp {
    Mlp::new(vec![Dense {
        weight: Tensor::new(vec![1, 1, 1], vec![w]).expect("scalar"),
        bias: Tensor::new(vec![1, 1, 1], vec![b]).expect("scalar"),
    }])
    .expect("single layer")
}

const ANALYSIS_SIZES: [usize; 4] = [1, 4, 4, 1];

fn random_full_matrix(rng: &mut impl Rng, p: usize) -> Matrix {
    Matrix::from_fn(
        p,
        p,
        |r, c| if r == c { 1.0 } else { 0.0 } + 0.05 * rng.gen_range(-1.0..1.0),
    )
}

fn eq6(seed: u64) -> Result<Vec<Check>> {
    let alpha = 0.01;
    let mut outer_err = Vec::new();
    let mut fd_err = Vec::new();
    for i in 0..10 {
        let mut rng = rng_for(seed, Suite::Eq6, i);
        let net = random_net(&mut rng, &ANALYSIS_SIZES);
        let p = net.num_params();
        let m = if i % 2 == 0 {
            Matrix::identity(p)
        } else {
            random_full_matrix(&mut rng, p)
        };
        let ep = random_episode(&mut rng, 5, 10);
        let step = full_matrix_step(&net, &m, &ep, alpha)?;
        let outer = outer_product_meta_grad(&step, alpha);
        let factored = factored_meta_grad(&step, &m, alpha)?;
        outer_err.push(relative_error(factored.data(), outer.data()));
        let fd = central_diff(
            m.data(),
            |_| 1e-5,
            |v| full_matrix_val_loss(&net, &Matrix::new(p, p, v.to_vec())?, &ep, alpha),
        )?;
        fd_err.push(relative_error(factored.data(), &fd));
    }
    Ok(vec![
        Check::new("full-matrix grad == -alpha u g^T", &outer_err, 1e-12),
        Check::new("full-matrix grad vs finite differences", &fd_err, 1e-6),
    ])
}

fn eq8(seed: u64, taylor_instances: usize) -> Result<Vec<Check>> {
    let (alpha, beta) = (0.01, 0.001);
    let mut accumulate_err = Vec::new();
    let mut identity_err = Vec::new();
    for i in 0..10 {
        let mut rng = rng_for(seed, Suite::Eq8, i);
        let net = random_net(&mut rng, &ANALYSIS_SIZES);
        let p = net.num_params();
        let m = if i % 2 == 0 {
            Matrix::identity(p)
        } else {
            random_full_matrix(&mut rng, p)
        };
        let n_tasks = 1 + i % 4;
        let tasks: Vec<Episode> = (0..n_tasks).map(|_| random_episode(&mut rng, 5, 10)).collect();
        let new_task = random_episode(&mut rng, 5, 10);
        let (trained, predicted) = sgd_accumulate(&net, &m, &tasks, alpha, beta)?;
        accumulate_err.push(relative_error(trained.data(), predicted.data()));
        let report = snn_decompose(&net, &m, &tasks, &new_task, alpha, beta)?;
        identity_err.push(report.identity_error);
    }

    // Taylor remainder over three decades of alpha.
    let mut ratios = Vec::new();
    for i in 0..taylor_instances {
        let mut rng = rng_for(seed, Suite::Eq8, 100 + i);
        let net = random_net(&mut rng, &ANALYSIS_SIZES);
        let p = net.num_params();
        let m = random_full_matrix(&mut rng, p);
        let tasks: Vec<Episode> = (0..2).map(|_| random_episode(&mut rng, 5, 10)).collect();
        let new_task = random_episode(&mut rng, 5, 10);
        let mut prev: Option<f64> = None;
        let mut worst: f64 = 0.0;
        for decade in 0..4 {
            let a = 0.1 / 10f64.powi(decade);
            let r = snn_decompose(&net, &m, &tasks, &new_task, a, beta)?.vote_taylor_residual;
            if let Some(prev) = prev {
                worst = worst.max(if prev > 0.0 { r / prev } else { f64::INFINITY });
            }
            prev = Some(r);
        }
        ratios.push(worst);
    }

    Ok(vec![
        Check::new("SGD accumulation on M", &accumulate_err, 1e-12),
        Check::new("soft nearest-neighbour identity", &identity_err, 1e-10),
        Check::below("Taylor residual ratio per decade of alpha", &ratios, 1.0),
    ])
}
