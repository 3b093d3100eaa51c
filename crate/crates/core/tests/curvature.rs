use metacurv::curvature::{
    mc_adjoint, mc_expand, mc_expand_capped, mc_init, mc_param_grads, mc_transform, CurvatureBlock, LayerShape,
    Variant, EXPAND_CAP,
};
use metacurv::diag::{central_diff, random_matrix, random_tensor};
use metacurv::tensor::{kron, relative_error, unfold, vectorize, Matrix, Tensor};
use metacurv::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_block(r: &mut ChaCha8Rng, dims: [usize; 3], variant: Variant) -> CurvatureBlock {
    let mo = match variant {
        Variant::MC1 => Matrix::identity(dims[0]),
        Variant::MC2 => random_matrix(r, dims[0], dims[0]),
    };
    CurvatureBlock::new(
        mo,
        random_matrix(r, dims[1], dims[1]),
        random_matrix(r, dims[2], dims[2]),
        variant,
    )
    .unwrap()
}

/// `Σ_{o,i,f} Mo[a,o] Mi[b,i] Mf[c,f] g[o,i,f]`, written out.
fn transform_oracle(g: &Tensor, b: &CurvatureBlock) -> Tensor {
    let s = g.shape().to_vec();
    Tensor::from_fn(&s, |flat| {
        let (a, bb, c) = (flat / (s[1] * s[2]), (flat / s[2]) % s[1], flat % s[2]);
        let mut sum = 0.0;
        for o in 0..s[0] {
            for i in 0..s[1] {
                for f in 0..s[2] {
                    sum += b.mo.get(a, o) * b.mi.get(bb, i) * b.mf.get(c, f) * g.get(&[o, i, f]);
                }
            }
        }
        sum
    })
    .unwrap()
}

#[test]
fn init_is_identity() {
    let b = mc_init(LayerShape::new(64, 3, 9).unwrap(), Variant::MC2);
    assert_eq!(b.mo, Matrix::identity(64));
    assert_eq!(b.mi, Matrix::identity(3));
    assert_eq!(b.mf, Matrix::identity(9));
    let b = mc_init(LayerShape::new(40, 1, 1).unwrap(), Variant::MC2);
    assert_eq!((b.mo.rows(), b.mi.rows(), b.mf.rows()), (40, 1, 1));
    let g = random_tensor(&mut rng(1), &[40, 1, 1]);
    assert_eq!(mc_transform(&g, &b).unwrap(), g);
    assert_eq!(mc_adjoint(&g, &b).unwrap(), g);
}

#[test]
fn layer_shape_rejects_zero() {
    assert!(LayerShape::new(0, 1, 1).is_err());
}

#[test]
fn transform_matches_brute_force_and_expansion() {
    let mut r = rng(2);
    let g = random_tensor(&mut r, &[2, 3, 4]);
    let b = random_block(&mut r, [2, 3, 4], Variant::MC2);
    let t = mc_transform(&g, &b).unwrap();
    assert!(relative_error(t.data(), transform_oracle(&g, &b).data()) <= 1e-12);
    let dense = kron(&b.mo, &kron(&b.mi, &b.mf)).matvec(&vectorize(&g)).unwrap();
    assert!(relative_error(&vectorize(&t), &dense) <= 1e-12);
    assert_eq!(mc_expand(&b).unwrap(), kron(&b.mo, &kron(&b.mi, &b.mf)));
}

#[test]
fn transform_rejects_shape_mismatch() {
    let mut r = rng(3);
    let b = random_block(&mut r, [2, 3, 4], Variant::MC2);
    let g = random_tensor(&mut r, &[2, 4, 3]);
    assert!(matches!(mc_transform(&g, &b), Err(Error::InvalidArgument(_))));
    assert!(mc_adjoint(&g, &b).is_err());
    assert!(mc_param_grads(&g, &g, &b).is_err());
}

#[test]
fn symmetric_block_is_self_adjoint() {
    let mut r = rng(4);
    let sym = |m: Matrix| {
        let t = m.transpose();
        Matrix::new(
            m.rows(),
            m.cols(),
            m.data().iter().zip(t.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap()
    };
    let b = random_block(&mut r, [3, 2, 2], Variant::MC2);
    let b = CurvatureBlock::new(sym(b.mo), sym(b.mi), sym(b.mf), Variant::MC2).unwrap();
    let u = random_tensor(&mut r, &[3, 2, 2]);
    assert_eq!(mc_adjoint(&u, &b).unwrap(), mc_transform(&u, &b).unwrap());
}

#[test]
fn expansion_of_identity_and_block_diagonal() {
    let b = mc_init(LayerShape::new(2, 3, 4).unwrap(), Variant::MC2);
    assert!(mc_expand(&b).unwrap().is_identity());

    let mut r = rng(5);
    let mf = random_matrix(&mut r, 4, 4);
    let b = CurvatureBlock::new(Matrix::identity(2), Matrix::identity(3), mf.clone(), Variant::MC2).unwrap();
    let m = mc_expand(&b).unwrap();
    for row in 0..24 {
        for col in 0..24 {
            let expected = if row / 4 == col / 4 {
                mf.get(row % 4, col % 4)
            } else {
                0.0
            };
            assert_eq!(m.get(row, col), expected);
        }
    }
}

#[test]
fn expansion_cap() {
    let b = mc_init(LayerShape::new(40, 40, 1).unwrap(), Variant::MC2);
    assert_eq!(mc_expand_capped(&b, 1600).unwrap().rows(), 1600);
    assert!(matches!(mc_expand_capped(&b, 1599), Err(Error::SizeLimit { .. })));
    let big = mc_init(LayerShape::new(65, 64, 1).unwrap(), Variant::MC2);
    const { assert!(65 * 64 > EXPAND_CAP) };
    assert!(matches!(mc_expand(&big), Err(Error::SizeLimit { .. })));
}

#[test]
fn zero_upstream_gives_zero_grads() {
    let mut r = rng(6);
    let g = random_tensor(&mut r, &[2, 3, 4]);
    let b = random_block(&mut r, [2, 3, 4], Variant::MC2);
    let d = mc_param_grads(&g, &Tensor::zeros(&[2, 3, 4]).unwrap(), &b).unwrap();
    for m in [&d.mo, &d.mi, &d.mf] {
        assert!(m.data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn identity_block_mf_grad_specialization() {
    let mut r = rng(7);
    let g = random_tensor(&mut r, &[2, 3, 4]);
    let u = random_tensor(&mut r, &[2, 3, 4]);
    let b = mc_init(LayerShape::new(2, 3, 4).unwrap(), Variant::MC2);
    let d = mc_param_grads(&g, &u, &b).unwrap();
    let expected = unfold(&u, 3)
        .unwrap()
        .matmul(&unfold(&g, 3).unwrap().transpose())
        .unwrap();
    assert!(relative_error(d.mf.data(), expected.data()) <= 1e-12);
}

fn fd_factor_grads(g: &Tensor, u: &Tensor, b: &CurvatureBlock) -> [Vec<f64>; 3] {
    let mut out: [Vec<f64>; 3] = Default::default();
    for (which, slot) in out.iter_mut().enumerate() {
        let base = [&b.mo, &b.mi, &b.mf][which].clone();
        *slot = central_diff(
            base.data(),
            |_| 1e-5,
            |v| {
                let m = Matrix::new(base.rows(), base.cols(), v.to_vec())?;
                let mut p = b.clone();
                *[&mut p.mo, &mut p.mi, &mut p.mf][which] = m;
                Ok(transform_oracle(g, &p).dot(u))
            },
        )
        .unwrap();
    }
    out
}

#[test]
fn factor_grads_match_finite_differences() {
    for (seed, dims) in [(8, [2, 3, 4]), (9, [5, 4, 1]), (10, [1, 1, 1])] {
        let mut r = rng(seed);
        let g = random_tensor(&mut r, &dims);
        let u = random_tensor(&mut r, &dims);
        let b = random_block(&mut r, dims, Variant::MC2);
        let d = mc_param_grads(&g, &u, &b).unwrap();
        let fd = fd_factor_grads(&g, &u, &b);
        for (exact, numeric) in [&d.mo, &d.mi, &d.mf].into_iter().zip(&fd) {
            assert!(relative_error(exact.data(), numeric) <= 1e-6, "{dims:?}");
        }
    }
}

#[test]
fn mc1_reports_zero_mo_grad() {
    let mut r = rng(11);
    let g = random_tensor(&mut r, &[3, 2, 1]);
    let u = random_tensor(&mut r, &[3, 2, 1]);
    let b = random_block(&mut r, [3, 2, 1], Variant::MC1);
    let d = mc_param_grads(&g, &u, &b).unwrap();
    assert_eq!(d.mo, Matrix::zeros(3, 3));
    assert!(d.mi.data().iter().any(|&x| x != 0.0));
}

#[test]
fn mc1_block_requires_identity_mo() {
    let mut r = rng(12);
    let mo = random_matrix(&mut r, 2, 2);
    assert!(CurvatureBlock::new(mo, Matrix::identity(1), Matrix::identity(1), Variant::MC1).is_err());
}

fn block_case() -> impl Strategy<Value = (Tensor, Tensor, Tensor, CurvatureBlock, f64)> {
    (1usize..=4, 1usize..=4, 1usize..=4, any::<u64>(), -3.0f64..3.0).prop_map(|(p, q, s, seed, a)| {
        let mut r = rng(seed);
        let dims = [p, q, s];
        (
            random_tensor(&mut r, &dims),
            random_tensor(&mut r, &dims),
            random_tensor(&mut r, &dims),
            random_block(&mut r, dims, Variant::MC2),
            a,
        )
    })
}

proptest! {
    #[test]
    fn transform_is_linear((g1, g2, _, b, a) in block_case()) {
        let mut combo = g1.clone();
        combo.scale(a);
        combo.axpy(1.0, &g2);
        let lhs = mc_transform(&combo, &b).unwrap();
        let mut rhs = mc_transform(&g1, &b).unwrap();
        rhs.scale(a);
        rhs.axpy(1.0, &mc_transform(&g2, &b).unwrap());
        prop_assert!(relative_error(lhs.data(), rhs.data()) <= 1e-12);
    }

    #[test]
    fn adjoint_identity((g, u, _, b, _) in block_case()) {
        let lhs = mc_transform(&g, &b).unwrap().dot(&u);
        let rhs = g.dot(&mc_adjoint(&u, &b).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1e-300));
    }

    #[test]
    fn expansion_equivalence((g, _, _, b, _) in block_case()) {
        let dense = mc_expand(&b).unwrap().matvec(&vectorize(&g)).unwrap();
        prop_assert!(relative_error(&vectorize(&mc_transform(&g, &b).unwrap()), &dense) <= 1e-12);
    }

    #[test]
    fn factor_grads_vs_finite_differences((g, u, _, b, _) in block_case()) {
        let d = mc_param_grads(&g, &u, &b).unwrap();
        let fd = fd_factor_grads(&g, &u, &b);
        for (exact, numeric) in [&d.mo, &d.mi, &d.mf].into_iter().zip(&fd) {
            prop_assert!(relative_error(exact.data(), numeric) <= 1e-6);
        }
    }
}
