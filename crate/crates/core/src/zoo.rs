//! Reference bilinear variants: full bilinear pooling, a brute-force masked
//! oracle for group bilinear, compact bilinear with random Maclaurin
//! projections, and the Hadamard low-rank form.
//!
//! These run eagerly on plain vectors, favour clarity over speed and are
//! used as oracles for the fused kernels in [`crate::dbt`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// `(1/HW)·vec(X Xᵀ)` for `X: [N, HW]`, row-major, shape `[N²]`.
pub fn bilinear_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::InvalidShape(format!("bilinear pool expects [N, HW], got {s:?}")));
    }
    let (n, hw) = (s[0], s[1]);
    let d = x.data();
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..hw {
                acc += d[i * hw + p] * d[j * hw + p];
            }
            out[i * n + j] = acc / T::of(hw as f64);
        }
    }
    Tensor::from_vec([n * n], out)
}

/// Full outer product `vec(x xᵀ)` of one position vector.
pub fn outer_product<T: Element>(x: &[T]) -> Vec<T> {
    let n = x.len();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(x[i] * x[j]);
        }
    }
    out
}

/// Computes the full `x xᵀ`, cuts out the `G` diagonal `(N/G)×(N/G)` blocks
/// and sums them. Returns `[(N/G)²]`.
pub fn masked_bilinear_oracle<T: Element>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    if x.rank() != 1 {
        return Err(Error::InvalidShape(format!("oracle expects [N], got {:?}", x.shape())));
    }
    let n = x.numel();
    if groups == 0 || !n.is_multiple_of(groups) {
        return Err(Error::Config(format!("{n} channels are not divisible into {groups} groups")));
    }
    let full = outer_product(x.data());
    let size = n / groups;
    let mut out = vec![T::zero(); size * size];
    for g in 0..groups {
        let base = g * size;
        for a in 0..size {
            for b in 0..size {
                out[a * size + b] += full[(base + a) * n + base + b];
            }
        }
    }
    Tensor::from_vec([size * size], out)
}

/// Fixed ±1 projections `W1, W2: [D, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompactRmParams {
    w1: Tensor<f64>,
    w2: Tensor<f64>,
}

impl CompactRmParams {
    /// Draws both matrices from `seed`. Row `r` of `W1` reads ChaCha stream
    /// `2r`, row `r` of `W2` stream `2r + 1`, so rows are reproducible
    /// independently of `D`.
    pub fn from_seed(dim: usize, channels: usize, seed: u64) -> Result<Self> {
        if dim == 0 || channels == 0 {
            return Err(Error::InvalidShape(format!("projection [{dim}, {channels}] must be non-empty")));
        }
        let draw = |stream: u64| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            (0..channels).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
        };
        let mut w1 = Vec::with_capacity(dim * channels);
        let mut w2 = Vec::with_capacity(dim * channels);
        for r in 0..dim as u64 {
            w1.extend(draw(2 * r));
            w2.extend(draw(2 * r + 1));
        }
        Ok(CompactRmParams {
            w1: Tensor::from_vec([dim, channels], w1)?,
            w2: Tensor::from_vec([dim, channels], w2)?,
        })
    }

    /// Explicit matrices. Seeded draws are ±1; hand-built ones may use any
    /// finite entries (unit-basis rows are handy in checks).
    pub fn new(w1: Tensor<f64>, w2: Tensor<f64>) -> Result<Self> {
        if w1.rank() != 2 || w1.shape() != w2.shape() {
            return Err(Error::InvalidShape(format!(
                "projections must share a [D, N] shape, got {:?} and {:?}",
                w1.shape(),
                w2.shape()
            )));
        }
        if !w1.all_finite() || !w2.all_finite() {
            return Err(Error::NonFinite("compact bilinear projections".into()));
        }
        Ok(CompactRmParams { w1, w2 })
    }

    pub fn w1(&self) -> &Tensor<f64> {
        &self.w1
    }

    pub fn w2(&self) -> &Tensor<f64> {
        &self.w2
    }
}

fn matvec(m: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let cols = m.shape()[1];
    m.data().chunks(cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn check_len(op: &str, expected: usize, x: &Tensor<f64>) -> Result<()> {
    if x.rank() != 1 || x.numel() != expected {
        return Err(Error::InvalidShape(format!("{op} expects x of shape [{expected}], got {:?}", x.shape())));
    }
    Ok(())
}

/// `W1 x ∘ W2 x`, shape `[D]`.
pub fn compact_bilinear_rm(x: &Tensor<f64>, p: &CompactRmParams) -> Result<Tensor<f64>> {
    check_len("compact_bilinear_rm", p.w1.shape()[1], x)?;
    let a = matvec(&p.w1, x.data());
    let b = matvec(&p.w2, x.data());
    Tensor::from_vec([a.len()], a.iter().zip(&b).map(|(a, b)| a * b).collect())
}

/// `U, V: [D, N]`, `P: [K, D]`, `b: [K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HadamardParams {
    pub u: Tensor<f64>,
    pub v: Tensor<f64>,
    pub p: Tensor<f64>,
    pub b: Tensor<f64>,
}

impl HadamardParams {
    pub fn new(u: Tensor<f64>, v: Tensor<f64>, p: Tensor<f64>, b: Tensor<f64>) -> Result<Self> {
        let ok = u.rank() == 2
            && u.shape() == v.shape()
            && p.rank() == 2
            && p.shape()[1] == u.shape()[0]
            && b.shape() == [p.shape()[0]];
        if !ok {
            return Err(Error::InvalidShape(format!(
                "need U, V [D, N], P [K, D], b [K]; got {:?} {:?} {:?} {:?}",
                u.shape(),
                v.shape(),
                p.shape(),
                b.shape()
            )));
        }
        let params = HadamardParams { u, v, p, b };
        if ![&params.u, &params.v, &params.p, &params.b].iter().all(|t| t.all_finite()) {
            return Err(Error::NonFinite("Hadamard low-rank parameters".into()));
        }
        Ok(params)
    }

    /// Gaussian `U, V, P` with std `1/√fan_in`, zero bias.
    pub fn random<R: Rng + ?Sized>(channels: usize, dim: usize, outputs: usize, rng: &mut R) -> Result<Self> {
        let mut gaussian = |rows: usize, cols: usize| {
            let normal = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("positive std");
            Tensor::from_vec([rows, cols], (0..rows * cols).map(|_| normal.sample(rng)).collect())
        };
        let u = gaussian(dim, channels)?;
        let v = gaussian(dim, channels)?;
        let p = gaussian(outputs, dim)?;
        Self::new(u, v, p, Tensor::zeros([outputs]))
    }
}

/// `P (U x ∘ V x) + b`, shape `[K]`.
pub fn hadamard_lowrank(x: &Tensor<f64>, p: &HadamardParams) -> Result<Tensor<f64>> {
    check_len("hadamard_lowrank", p.u.shape()[1], x)?;
    let ux = matvec(&p.u, x.data());
    let vx = matvec(&p.v, x.data());
    let h: Vec<f64> = ux.iter().zip(&vx).map(|(a, b)| a * b).collect();
    let out = matvec(&p.p, &h).iter().zip(p.b.data()).map(|(a, b)| a + b).collect();
    Tensor::from_vec([p.b.numel()], out)
}
