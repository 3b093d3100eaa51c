//! Factored meta-curvature blocks.
//!
//! A parameter tensor of shape `(C_out, C_in, d)` owns three square
//! matrices `Mo`, `Mi`, `Mf`. The transform of a gradient tensor `G` is
//! `G ×3 Mf ×2 Mi ×1 Mo`, which on vectorized tensors is the dense matrix
//! `Mo ⊗ Mi ⊗ Mf`. That dense matrix is only ever built by [`mc_expand`],
//! which is meant for diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{kron, mode_product, Matrix, Tensor};

/// Default row cap for [`mc_expand`].
pub const EXPAND_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// `Mo` fixed to the identity.
    MC1,
    /// All three factors learned.
    MC2,
}

/// Extents `(C_out, C_in, d)` of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub c_out: usize,
    pub c_in: usize,
    pub d: usize,
}

impl LayerShape {
    pub fn new(c_out: usize, c_in: usize, d: usize) -> Result<Self> {
        if c_out == 0 || c_in == 0 || d == 0 {
            return invalid(format!("layer extents must be positive, got ({c_out},{c_in},{d})"));
        }
        Ok(LayerShape { c_out, c_in, d })
    }

    /// Shape of an order-3 parameter tensor. Fully connected weights are
    /// `(out, in, 1)` and biases `(out, 1, 1)`.
    pub fn of(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [c_out, c_in, d] => LayerShape::new(c_out, c_in, d),
            _ => invalid(format!("expected an order-3 tensor, got shape {:?}", t.shape())),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.c_out, self.c_in, self.d]
    }

    pub fn numel(&self) -> usize {
        self.c_out * self.c_in * self.d
    }
}

/// Learnable preconditioner for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureBlock {
    pub mo: Matrix,
    pub mi: Matrix,
    pub mf: Matrix,
    pub variant: Variant,
}

/// Gradients of a scalar loss with respect to the three factors.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGrads {
    pub mo: Matrix,
    pub mi: Matrix,
    pub mf: Matrix,
}

impl CurvatureBlock {
    pub fn new(mo: Matrix, mi: Matrix, mf: Matrix, variant: Variant) -> Result<Self> {
        let block = CurvatureBlock { mo, mi, mf, variant };
        block.validate()?;
        Ok(block)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("Mo", &self.mo), ("Mi", &self.mi), ("Mf", &self.mf)] {
            if !m.is_square() {
                return invalid(format!("{name} must be square, got {}x{}", m.rows(), m.cols()));
            }
        }
        if self.variant == Variant::MC1 && !self.mo.is_identity() {
            return invalid("MC1 block must keep Mo equal to the identity");
        }
        Ok(())
    }

    pub fn shape(&self) -> LayerShape {
        LayerShape {
            c_out: self.mo.rows(),
            c_in: self.mi.rows(),
            d: self.mf.rows(),
        }
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        let s = self.shape();
        if t.shape() != s.dims() {
            return invalid(format!(
                "tensor shape {:?} does not match curvature block ({},{},{})",
                t.shape(),
                s.c_out,
                s.c_in,
                s.d
            ));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.mo.is_identity() && self.mi.is_identity() && self.mf.is_identity()
    }
}

/// Identity-initialized block.
pub fn mc_init(shape: LayerShape, variant: Variant) -> CurvatureBlock {
    CurvatureBlock {
        mo: Matrix::identity(shape.c_out),
        mi: Matrix::identity(shape.c_in),
        mf: Matrix::identity(shape.d),
        variant,
    }
}

/// `MC(G) = G ×3 Mf ×2 Mi ×1 Mo`.
pub fn mc_transform(g: &Tensor, b: &CurvatureBlock) -> Result<Tensor> {
    b.check(g)?;
    let t = mode_product(g, &b.mf, 3)?;
    let t = mode_product(&t, &b.mi, 2)?;
    mode_product(&t, &b.mo, 1)
}

/// Transpose of [`mc_transform`]: `U ×3 Mfᵀ ×2 Miᵀ ×1 Moᵀ`.
pub fn mc_adjoint(u: &Tensor, b: &CurvatureBlock) -> Result<Tensor> {
    b.check(u)?;
    let t = mode_product(u, &b.mf.transpose(), 3)?;
    let t = mode_product(&t, &b.mi.transpose(), 2)?;
    mode_product(&t, &b.mo.transpose(), 1)
}

/// Dense `Mo ⊗ Mi ⊗ Mf` with the default row cap.
pub fn mc_expand(b: &CurvatureBlock) -> Result<Matrix> {
    mc_expand_capped(b, EXPAND_CAP)
}

pub fn mc_expand_capped(b: &CurvatureBlock, cap: usize) -> Result<Matrix> {
    let size = b.shape().numel();
    if size > cap {
        return Err(Error::SizeLimit {
            what: "expanded meta-curvature rows",
            size,
            limit: cap,
        });
    }
    Ok(kron(&b.mo, &kron(&b.mi, &b.mf)))
}

/// `unfold(a, n) · unfold(b, n)ᵀ` without materializing either unfolding.
/// The product sums over every index except mode `n`, so the column order
/// of the unfolding does not matter.
fn unfold_gram(a: &Tensor, b: &Tensor, n: usize) -> Matrix {
    let shape = a.shape();
    let n0 = n - 1;
    let extent = shape[n0];
    let outer: usize = shape[..n0].iter().product();
    let inner: usize = shape[n0 + 1..].iter().product();
    let mut out = Matrix::zeros(extent, extent);
    let (ad, bd) = (a.data(), b.data());
    for o in 0..outer {
        let base = o * extent * inner;
        if inner == 1 {
            let (ar, bs) = (&ad[base..base + extent], &bd[base..base + extent]);
            for (r, &a) in ar.iter().enumerate() {
                crate::tensor::axpy(&mut out.data_mut()[r * extent..(r + 1) * extent], a, bs);
            }
            continue;
        }
        for r in 0..extent {
            let ar = &ad[base + r * inner..base + (r + 1) * inner];
            for s in 0..extent {
                let bs = &bd[base + s * inner..base + (s + 1) * inner];
                let v = out.get(r, s) + crate::tensor::dot(ar, bs);
                out.set(r, s, v);
            }
        }
    }
    out
}

/// Gradients of `⟨MC(g), u⟩` with respect to `Mo`, `Mi` and `Mf`, i.e. the
/// factor gradients of any scalar loss whose sensitivity at `MC(g)` is `u`.
/// For MC1 blocks the `Mo` gradient is zero.
pub fn mc_param_grads(g: &Tensor, u: &Tensor, b: &CurvatureBlock) -> Result<FactorGrads> {
    b.check(g)?;
    b.check(u)?;
    let s = b.shape();
    let (mo_t, mi_t, mf_t) = (b.mo.transpose(), b.mi.transpose(), b.mf.transpose());
    let u_i = mode_product(u, &mi_t, 2)?;
    let mf = unfold_gram(&mode_product(&u_i, &mo_t, 1)?, g, 3);
    let mi = unfold_gram(&mode_product(&mode_product(u, &mo_t, 1)?, &mf_t, 3)?, g, 2);
    let mo = match b.variant {
        Variant::MC1 => Matrix::zeros(s.c_out, s.c_out),
        Variant::MC2 => unfold_gram(&mode_product(&u_i, &mf_t, 3)?, g, 1),
    };
    Ok(FactorGrads { mo, mi, mf })
}
