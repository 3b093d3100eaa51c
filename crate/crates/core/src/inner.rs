//! Inner-loop update rules and their meta-gradients.
//!
//! Every rule applies a linear preconditioner `P` to the training gradient,
//! `θ' = θ - P g`:
//!
//! * `FixedLr`: `P = α I`
//! * `PerCoordinate`: `P = diag(α)`
//! * `PerLayer`: `α_l I` on every tensor of layer `l`
//! * `MetaCurv`: `α · MC_l` on every parameter tensor
//!
//! With `u = ∇L_val(θ')`, the exact one-step meta-gradient for `θ` is
//! `u - H_tr Pᵀ u`, where the Hessian-vector product comes from
//! [`crate::model::hvp_tensors`].

use serde::{Deserialize, Serialize};

use crate::curvature::{
    mc_adjoint, mc_init, mc_param_grads, mc_transform, CurvatureBlock, FactorGrads, LayerShape, Variant,
};
use crate::error::{invalid, Error, Result};
use crate::model::{hvp_tensors, loss_and_grad, Mlp, HVP_STEP};
use crate::task::Episode;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum InnerRule {
    FixedLr {
        alpha: f64,
    },
    PerCoordinate {
        alpha: Mlp,
    },
    PerLayer {
        alpha: Vec<f64>,
    },
    MetaCurv {
        alpha: f64,
        variant: Variant,
        /// One block per parameter tensor, in canonical order.
        blocks: Vec<CurvatureBlock>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetaGradMode {
    Exact,
    FirstOrder,
}

/// Gradient of the validation loss with respect to a rule's parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum RuleGrad {
    FixedLr { alpha: f64 },
    PerCoordinate { alpha: Mlp },
    PerLayer { alpha: Vec<f64> },
    MetaCurv { blocks: Vec<FactorGrads> },
}

impl InnerRule {
    pub fn fixed(alpha: f64) -> Self {
        InnerRule::FixedLr { alpha }
    }

    /// Every coordinate starts at `alpha`.
    pub fn per_coordinate(net: &Mlp, alpha: f64) -> Self {
        let mut a = net.zeros_like();
        a.tensors_mut().for_each(|t| t.data_mut().fill(alpha));
        InnerRule::PerCoordinate { alpha: a }
    }

    pub fn per_layer(net: &Mlp, alpha: f64) -> Self {
        InnerRule::PerLayer {
            alpha: vec![alpha; net.layers().len()],
        }
    }

    /// Identity-initialized blocks for every weight and bias.
    pub fn meta_curvature(net: &Mlp, alpha: f64, variant: Variant) -> Self {
        let blocks = net
            .tensors()
            .map(|t| mc_init(LayerShape::of(t).expect("parameter tensors are order 3"), variant))
            .collect();
        InnerRule::MetaCurv { alpha, variant, blocks }
    }

    pub fn check_layout(&self, net: &Mlp) -> Result<()> {
        match self {
            InnerRule::FixedLr { .. } => Ok(()),
            InnerRule::PerCoordinate { alpha } => {
                if alpha.same_layout(net) {
                    Ok(())
                } else {
                    invalid("per-coordinate rates are not shaped like the parameters")
                }
            }
            InnerRule::PerLayer { alpha } => {
                if alpha.len() == net.layers().len() {
                    Ok(())
                } else {
                    invalid(format!(
                        "{} per-layer rates for {} layers",
                        alpha.len(),
                        net.layers().len()
                    ))
                }
            }
            InnerRule::MetaCurv { blocks, variant, .. } => {
                if blocks.len() != net.num_tensors() {
                    return invalid(format!(
                        "{} curvature blocks for {} parameter tensors",
                        blocks.len(),
                        net.num_tensors()
                    ));
                }
                for (b, t) in blocks.iter().zip(net.tensors()) {
                    b.validate()?;
                    if b.variant != *variant {
                        return invalid("curvature block variant differs from the rule variant");
                    }
                    if b.shape().dims() != t.shape() {
                        return invalid(format!(
                            "curvature block {:?} does not match parameter shape {:?}",
                            b.shape().dims(),
                            t.shape()
                        ));
                    }
                }
                Ok(())
            }
        }
    }

    /// `P g`, shaped like the parameters.
    pub fn precondition(&self, g: &Mlp) -> Result<Mlp> {
        self.check_layout(g)?;
        let mut out = g.clone();
        match self {
            InnerRule::FixedLr { alpha } => out.scale(*alpha),
            InnerRule::PerCoordinate { alpha } => {
                for (o, a) in out.tensors_mut().zip(alpha.tensors()) {
                    o.data_mut().iter_mut().zip(a.data()).for_each(|(x, a)| *x *= a);
                }
            }
            InnerRule::PerLayer { alpha } => {
                for (layer, a) in out.layers_mut().iter_mut().zip(alpha) {
                    layer.weight.scale(*a);
                    layer.bias.scale(*a);
                }
            }
            InnerRule::MetaCurv { alpha, blocks, .. } => {
                for (o, b) in out.tensors_mut().zip(blocks) {
                    let mut t = mc_transform(o, b)?;
                    t.scale(*alpha);
                    *o = t;
                }
            }
        }
        Ok(out)
    }

    /// `Pᵀ u`.
    pub fn precondition_transpose(&self, u: &Mlp) -> Result<Mlp> {
        match self {
            InnerRule::MetaCurv { alpha, blocks, .. } => {
                self.check_layout(u)?;
                let mut out = u.clone();
                for (o, b) in out.tensors_mut().zip(blocks) {
                    let mut t = mc_adjoint(o, b)?;
                    t.scale(*alpha);
                    *o = t;
                }
                Ok(out)
            }
            // Diagonal preconditioners are symmetric.
            _ => self.precondition(u),
        }
    }

    /// Number of negative learning rates (per-coordinate and per-layer rules).
    pub fn negative_rates(&self) -> usize {
        match self {
            InnerRule::PerCoordinate { alpha } => alpha
                .tensors()
                .flat_map(|t| t.data().iter())
                .filter(|&&a| a < 0.0)
                .count(),
            InnerRule::PerLayer { alpha } => alpha.iter().filter(|&&a| a < 0.0).count(),
            _ => 0,
        }
    }

    /// Learnable parameter groups, each flattened. `FixedLr` has none, and
    /// MC1 rules omit the `Mo` group.
    pub fn learnable_groups(&self) -> Vec<(&'static str, Vec<f64>)> {
        match self {
            InnerRule::FixedLr { .. } => vec![],
            InnerRule::PerCoordinate { alpha } => vec![("alpha", alpha.to_vector().0)],
            InnerRule::PerLayer { alpha } => vec![("alpha", alpha.clone())],
            InnerRule::MetaCurv { blocks, variant, .. } => {
                let gather = |f: fn(&CurvatureBlock) -> &Matrix| -> Vec<f64> {
                    blocks.iter().flat_map(|b| f(b).data().iter().copied()).collect()
                };
                let mut groups = Vec::with_capacity(3);
                if *variant == Variant::MC2 {
                    groups.push(("Mo", gather(|b| &b.mo)));
                }
                groups.push(("Mi", gather(|b| &b.mi)));
                groups.push(("Mf", gather(|b| &b.mf)));
                groups
            }
        }
    }

    /// Inverse of [`InnerRule::learnable_groups`].
    pub fn set_learnable_groups(&mut self, groups: &[Vec<f64>]) -> Result<()> {
        let expected: Vec<usize> = self.learnable_groups().iter().map(|(_, g)| g.len()).collect();
        let got: Vec<usize> = groups.iter().map(Vec::len).collect();
        if expected != got {
            return invalid(format!("rule parameter group sizes {got:?} do not match {expected:?}"));
        }
        match self {
            InnerRule::FixedLr { .. } => {}
            InnerRule::PerCoordinate { alpha } => alpha.assign_vector(&crate::model::ParamVector(groups[0].clone()))?,
            InnerRule::PerLayer { alpha } => alpha.copy_from_slice(&groups[0]),
            InnerRule::MetaCurv { blocks, variant, .. } => {
                let scatter =
                    |blocks: &mut [CurvatureBlock], src: &[f64], f: fn(&mut CurvatureBlock) -> &mut Matrix| {
                        let mut offset = 0;
                        for b in blocks.iter_mut() {
                            let m = f(b).data_mut();
                            m.copy_from_slice(&src[offset..offset + m.len()]);
                            offset += m.len();
                        }
                    };
                let mut rest = groups;
                if *variant == Variant::MC2 {
                    scatter(blocks, &rest[0], |b| &mut b.mo);
                    rest = &rest[1..];
                }
                scatter(blocks, &rest[0], |b| &mut b.mi);
                scatter(blocks, &rest[1], |b| &mut b.mf);
            }
        }
        Ok(())
    }
}

impl RuleGrad {
    pub fn zeros_for(rule: &InnerRule) -> RuleGrad {
        match rule {
            InnerRule::FixedLr { .. } => RuleGrad::FixedLr { alpha: 0.0 },
            InnerRule::PerCoordinate { alpha } => RuleGrad::PerCoordinate {
                alpha: alpha.zeros_like(),
            },
            InnerRule::PerLayer { alpha } => RuleGrad::PerLayer {
                alpha: vec![0.0; alpha.len()],
            },
            InnerRule::MetaCurv { blocks, .. } => RuleGrad::MetaCurv {
                blocks: blocks
                    .iter()
                    .map(|b| {
                        let s = b.shape();
                        FactorGrads {
                            mo: Matrix::zeros(s.c_out, s.c_out),
                            mi: Matrix::zeros(s.c_in, s.c_in),
                            mf: Matrix::zeros(s.d, s.d),
                        }
                    })
                    .collect(),
            },
        }
    }

    /// `self += other`; both must come from the same rule.
    pub fn accumulate(&mut self, other: &RuleGrad) {
        fn add(a: &mut Matrix, b: &Matrix) {
            crate::tensor::axpy(a.data_mut(), 1.0, b.data());
        }
        match (self, other) {
            (RuleGrad::FixedLr { alpha: a }, RuleGrad::FixedLr { alpha: b }) => *a += b,
            (RuleGrad::PerCoordinate { alpha: a }, RuleGrad::PerCoordinate { alpha: b }) => a.axpy(1.0, b),
            (RuleGrad::PerLayer { alpha: a }, RuleGrad::PerLayer { alpha: b }) => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y)
            }
            (RuleGrad::MetaCurv { blocks: a }, RuleGrad::MetaCurv { blocks: b }) => {
                for (x, y) in a.iter_mut().zip(b) {
                    add(&mut x.mo, &y.mo);
                    add(&mut x.mi, &y.mi);
                    add(&mut x.mf, &y.mf);
                }
            }
            _ => panic!("accumulating gradients of different rule kinds"),
        }
    }

    /// Flattened in the same group order as [`InnerRule::learnable_groups`].
    pub fn groups(&self, rule: &InnerRule) -> Vec<Vec<f64>> {
        match self {
            RuleGrad::FixedLr { .. } => vec![],
            RuleGrad::PerCoordinate { alpha } => vec![alpha.to_vector().0],
            RuleGrad::PerLayer { alpha } => vec![alpha.clone()],
            RuleGrad::MetaCurv { blocks } => {
                let gather = |f: fn(&FactorGrads) -> &Matrix| -> Vec<f64> {
                    blocks.iter().flat_map(|b| f(b).data().iter().copied()).collect()
                };
                let mut out = Vec::with_capacity(3);
                if matches!(
                    rule,
                    InnerRule::MetaCurv {
                        variant: Variant::MC2,
                        ..
                    }
                ) {
                    out.push(gather(|b| &b.mo));
                }
                out.push(gather(|b| &b.mi));
                out.push(gather(|b| &b.mf));
                out
            }
        }
    }
}

/// `θ' = θ - P g`.
pub fn inner_update(theta: &Mlp, g: &Mlp, rule: &InnerRule) -> Result<Mlp> {
    if !theta.same_layout(g) {
        return invalid("gradient is not shaped like the parameters");
    }
    let step = rule.precondition(g)?;
    let mut out = theta.clone();
    out.axpy(-1.0, &step);
    Ok(out)
}

/// Result of running the inner loop on one episode.
#[derive(Debug, Clone)]
pub struct Adaptation {
    pub adapted: Mlp,
    /// Training gradient at each inner step.
    pub train_grads: Vec<Mlp>,
    /// Training loss before adaptation.
    pub train_loss: f64,
}

/// Rule used at inner step `step` when `rules` holds either one shared rule
/// or one rule per step.
pub fn rule_for_step(rules: &[InnerRule], step: usize) -> &InnerRule {
    &rules[step.min(rules.len() - 1)]
}

pub fn adapt(theta: &Mlp, episode: &Episode, rules: &[InnerRule], steps: usize) -> Result<Adaptation> {
    if rules.is_empty() || steps == 0 {
        return invalid("adaptation needs at least one rule and one step");
    }
    let mut current = theta.clone();
    let mut train_grads = Vec::with_capacity(steps);
    let mut train_loss = 0.0;
    for s in 0..steps {
        let (loss, g) = loss_and_grad(&current, &episode.train_x, &episode.train_y)?;
        if s == 0 {
            train_loss = loss;
        }
        current = inner_update(&current, &g, rule_for_step(rules, s))?;
        train_grads.push(g);
    }
    Ok(Adaptation {
        adapted: current,
        train_grads,
        train_loss,
    })
}

/// Meta-gradients of one episode's validation loss.
#[derive(Debug, Clone)]
pub struct MetaGrads {
    pub theta: Mlp,
    /// One entry per rule in the `rules` slice.
    pub rules: Vec<RuleGrad>,
    /// Validation loss after adaptation.
    pub val_loss: f64,
    pub train_loss: f64,
}

/// Rule-parameter gradient for one step given the training gradient `g` at
/// that step and the validation gradient `u` at the adapted parameters.
fn rule_grad(rule: &InnerRule, g: &Mlp, u: &Mlp) -> Result<RuleGrad> {
    rule.check_layout(g)?;
    if !g.same_layout(u) {
        return invalid("validation gradient is not shaped like the parameters");
    }
    Ok(match rule {
        InnerRule::FixedLr { .. } => RuleGrad::FixedLr { alpha: -u.dot(g) },
        InnerRule::PerCoordinate { .. } => {
            let mut d = g.clone();
            for (x, ut) in d.tensors_mut().zip(u.tensors()) {
                x.data_mut().iter_mut().zip(ut.data()).for_each(|(gi, ui)| *gi *= -ui);
            }
            RuleGrad::PerCoordinate { alpha: d }
        }
        InnerRule::PerLayer { .. } => RuleGrad::PerLayer {
            alpha: g
                .layers()
                .iter()
                .zip(u.layers())
                .map(|(gl, ul)| -(gl.weight.dot(&ul.weight) + gl.bias.dot(&ul.bias)))
                .collect(),
        },
        InnerRule::MetaCurv { alpha, blocks, .. } => {
            let mut out = Vec::with_capacity(blocks.len());
            for ((b, gt), ut) in blocks.iter().zip(g.tensors()).zip(u.tensors()) {
                out.push(mc_param_grads(gt, &ut.map(|x| -alpha * x), b)?);
            }
            RuleGrad::MetaCurv { blocks: out }
        }
    })
}

/// Meta-gradients with respect to `θ` and every rule.
///
/// `Exact` needs a single inner step. For more steps the first-order
/// approximation treats every Jacobian `∂θ_{s+1}/∂θ_s` as the identity.
pub fn meta_gradients(
    theta: &Mlp,
    episode: &Episode,
    rules: &[InnerRule],
    steps: usize,
    mode: MetaGradMode,
) -> Result<MetaGrads> {
    if mode == MetaGradMode::Exact && steps != 1 {
        return Err(Error::UnsupportedMode(format!(
            "exact meta-gradients need exactly one inner step, got {steps}"
        )));
    }
    let adaptation = adapt(theta, episode, rules, steps)?;
    let (val_loss, u) = loss_and_grad(&adaptation.adapted, &episode.eval_x, &episode.eval_y)?;

    let mut rule_grads: Vec<RuleGrad> = rules.iter().map(RuleGrad::zeros_for).collect();
    for (s, g) in adaptation.train_grads.iter().enumerate() {
        let idx = s.min(rules.len() - 1);
        let d = rule_grad(&rules[idx], g, &u)?;
        rule_grads[idx].accumulate(&d);
    }

    let theta_grad = match mode {
        MetaGradMode::FirstOrder => u,
        MetaGradMode::Exact => {
            let pt_u = rules[0].precondition_transpose(&u)?;
            let hv = hvp_tensors(theta, &episode.train_x, &episode.train_y, &pt_u, HVP_STEP)?;
            let mut out = u;
            out.axpy(-1.0, &hv);
            out
        }
    };
    Ok(MetaGrads {
        theta: theta_grad,
        rules: rule_grads,
        val_loss,
        train_loss: adaptation.train_loss,
    })
}

/// One-step meta-gradient of the validation loss with respect to `θ`.
pub fn meta_grad_theta(theta: &Mlp, episode: &Episode, rule: &InnerRule, mode: MetaGradMode) -> Result<Mlp> {
    meta_gradients(theta, episode, std::slice::from_ref(rule), 1, mode).map(|m| m.theta)
}

/// One-step meta-gradient with respect to the rule parameters. Exact, since
/// the adapted parameters are linear in them.
pub fn meta_grad_rule(theta: &Mlp, episode: &Episode, rule: &InnerRule) -> Result<RuleGrad> {
    let adaptation = adapt(theta, episode, std::slice::from_ref(rule), 1)?;
    let u = crate::model::loss_grad(&adaptation.adapted, &episode.eval_x, &episode.eval_y)?;
    rule_grad(rule, &adaptation.train_grads[0], &u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, loss_grad};
    use crate::task::{sample_episode, SineTask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn episode(seed: u64) -> Episode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_episode(SineTask::new(2.0, 1.0).unwrap(), 5, 10, &mut rng)
    }

    fn all_rules(net: &Mlp, alpha: f64) -> Vec<InnerRule> {
        vec![
            InnerRule::fixed(alpha),
            InnerRule::per_coordinate(net, alpha),
            InnerRule::per_layer(net, alpha),
            InnerRule::meta_curvature(net, alpha, Variant::MC1),
            InnerRule::meta_curvature(net, alpha, Variant::MC2),
        ]
    }

    #[test]
    fn zero_gradient_leaves_theta() {
        let net = init_weights(2);
        let g = net.zeros_like();
        for rule in all_rules(&net, 0.3) {
            assert_eq!(inner_update(&net, &g, &rule).unwrap(), net);
        }
    }

    #[test]
    fn identity_rules_match_fixed_lr_bitwise() {
        let net = init_weights(3);
        let ep = episode(4);
        let g = loss_grad(&net, &ep.train_x, &ep.train_y).unwrap();
        let reference = inner_update(&net, &g, &InnerRule::fixed(0.01)).unwrap();
        for rule in all_rules(&net, 0.01) {
            assert_eq!(inner_update(&net, &g, &rule).unwrap(), reference, "{rule:?}");
        }
    }

    #[test]
    fn exact_needs_one_step() {
        let net = init_weights(5);
        let ep = episode(6);
        let rules = [InnerRule::fixed(0.01)];
        let r = meta_gradients(&net, &ep, &rules, 2, MetaGradMode::Exact);
        assert!(matches!(r, Err(Error::UnsupportedMode(_))));
        assert!(meta_gradients(&net, &ep, &rules, 2, MetaGradMode::FirstOrder).is_ok());
    }

    #[test]
    fn zero_alpha_collapses_modes() {
        let net = init_weights(7);
        let ep = episode(8);
        let rule = InnerRule::fixed(0.0);
        let plain = loss_grad(&net, &ep.eval_x, &ep.eval_y).unwrap();
        let exact = meta_grad_theta(&net, &ep, &rule, MetaGradMode::Exact).unwrap();
        let fo = meta_grad_theta(&net, &ep, &rule, MetaGradMode::FirstOrder).unwrap();
        assert_eq!(fo, plain);
        assert_eq!(exact, plain);
    }

    #[test]
    fn layout_mismatch_rejected() {
        let net = init_weights(9);
        let small = Mlp::zeros(&[1, 3, 1]).unwrap();
        let rule = InnerRule::meta_curvature(&small, 0.01, Variant::MC2);
        assert!(inner_update(&net, &net.zeros_like(), &rule).is_err());
        let rule = InnerRule::per_layer(&small, 0.01);
        assert!(inner_update(&net, &net.zeros_like(), &rule).is_err());
        let rule = InnerRule::per_layer(&net, 0.01);
        assert!(inner_update(&net, &net.zeros_like(), &rule).is_ok());
        assert!(inner_update(&net, &small, &rule).is_err());
    }

    #[test]
    fn learnable_groups_round_trip() {
        let net = init_weights(10);
        for rule in all_rules(&net, 0.01) {
            let mut r = rule.clone();
            let groups: Vec<Vec<f64>> = rule
                .learnable_groups()
                .into_iter()
                .map(|(_, g)| g.iter().map(|x| x * 2.0).collect())
                .collect();
            r.set_learnable_groups(&groups).unwrap();
            let back: Vec<Vec<f64>> = r.learnable_groups().into_iter().map(|(_, g)| g).collect();
            assert_eq!(back, groups);
            let grad_groups = RuleGrad::zeros_for(&rule).groups(&rule);
            assert_eq!(
                grad_groups.iter().map(Vec::len).collect::<Vec<_>>(),
                groups.iter().map(Vec::len).collect::<Vec<_>>()
            );
        }
        let mc1 = InnerRule::meta_curvature(&net, 0.01, Variant::MC1);
        let names: Vec<_> = mc1.learnable_groups().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["Mi", "Mf"]);
    }

    #[test]
    fn negative_rates_counted() {
        let net = Mlp::zeros(&[1, 2, 1]).unwrap();
        let mut rule = InnerRule::per_layer(&net, 0.01);
        assert_eq!(rule.negative_rates(), 0);
        rule.set_learnable_groups(&[vec![-0.1, 0.2]]).unwrap();
        assert_eq!(rule.negative_rates(), 1);
    }
}
