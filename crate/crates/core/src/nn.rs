//! Flat parameter storage and hand-written forward/backward kernels.
//!
//! Every model keeps its tensors in one contiguous [`ParamSet`]; layers hold
//! [`Slot`] ranges into it. Gradients use the same layout, so the optimizer,
//! checkpointing and finite-difference checks all work on plain slices.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{matmul, matmul_nt, matmul_tn, Scalar};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Location of one tensor inside a [`ParamSet`].
pub type Slot = Range<usize>;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub specs: Vec<ParamSpec>,
    pub values: Vec<T>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<T> {
        vec![T::zero(); self.values.len()]
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            specs: self.specs.clone(),
            values: self
                .values
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Replaces all values, checking the manifest matches tensor-for-tensor.
    pub fn load_values(&mut self, specs: &[ParamSpec], values: &[f64]) -> Result<()> {
        if specs.len() != self.specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, checkpoint has {}",
                self.specs.len(),
                specs.len()
            )));
        }
        for (want, got) in self.specs.iter().zip(specs) {
            if want.name != got.name || want.shape != got.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: expected {} {:?}, found {} {:?}",
                    want.name, want.shape, got.name, got.shape
                )));
            }
        }
        if values.len() != self.values.len() {
            return Err(Error::Checkpoint("parameter count mismatch".into()));
        }
        for (dst, &v) in self.values.iter_mut().zip(values) {
            *dst = T::from_f64_lossy(v);
        }
        Ok(())
    }
}

/// Initial value of a tensor.
#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    /// Normal with the given standard deviation, truncated at two standard deviations.
    TruncNormal(f64),
    Values(Vec<f64>),
}

/// Appends tensors to a parameter set while drawing their initial values.
pub struct ParamBuilder<'r, T, R: Rng + ?Sized> {
    set: ParamSet<T>,
    rng: &'r mut R,
}

impl<'r, T: Scalar, R: Rng + ?Sized> ParamBuilder<'r, T, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self {
            set: ParamSet {
                specs: Vec::new(),
                values: Vec::new(),
            },
            rng,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Slot {
        let offset = self.set.values.len();
        let n: usize = shape.iter().product();
        match init {
            Init::Zeros => self.set.values.extend(std::iter::repeat_n(T::zero(), n)),
            Init::TruncNormal(std) => {
                for _ in 0..n {
                    let z = loop {
                        let z: f64 = StandardNormal.sample(self.rng);
                        if z.abs() <= 2.0 {
                            break z;
                        }
                    };
                    self.set.values.push(T::from_f64_lossy(std * z));
                }
            }
            Init::Values(v) => {
                assert_eq!(v.len(), n, "initial values for {:?}", shape);
                self.set.values.extend(v.iter().map(|&x| T::from_f64_lossy(x)));
            }
        }
        self.set.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
        });
        offset..offset + n
    }

    pub fn finish(self) -> ParamSet<T> {
        self.set
    }
}

/// `y = x W + b` for `rows` rows; `W` is `din × dout`.
pub fn linear_fwd<T: Scalar>(x: &[T], rows: usize, din: usize, w: &[T], b: &[T], dout: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    matmul(x, w, &mut y, rows, din, dout, true);
    y
}

/// Accumulates `dW += xᵀ dy`, `db += Σ dy`; returns `dx = dy Wᵀ` when requested.
#[allow(clippy::too_many_arguments)]
pub fn linear_bwd<T: Scalar>(
    x: &[T],
    dy: &[T],
    rows: usize,
    din: usize,
    dout: usize,
    w: &[T],
    dw: &mut [T],
    db: &mut [T],
    want_dx: bool,
) -> Option<Vec<T>> {
    matmul_tn(x, dy, dw, din, rows, dout, true);
    for r in dy.chunks_exact(dout) {
        for (g, &v) in db.iter_mut().zip(r) {
            *g += v;
        }
    }
    want_dx.then(|| {
        let mut dx = vec![T::zero(); rows * din];
        matmul_nt(dy, w, &mut dx, rows, dout, din, false);
        dx
    })
}

/// Layer norm without affine parameters. Returns the normalized rows and `1/σ` per row.
pub fn layer_norm_fwd<T: Scalar>(x: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let eps = T::from_f64_lossy(LN_EPS);
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut y = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / d);
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let mean = xr.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let var = xr.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let r = T::one() / (var + eps).sqrt();
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    (y, rstd)
}

/// `dx = rstd · (dy − mean(dy) − y · mean(dy ⊙ y))`, added into `dx`.
pub fn layer_norm_bwd_acc<T: Scalar>(dy: &[T], y: &[T], rstd: &[T], d: usize, dx: &mut [T]) {
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for (((dyr, yr), &r), dxr) in dy
        .chunks_exact(d)
        .zip(y.chunks_exact(d))
        .zip(rstd)
        .zip(dx.chunks_exact_mut(d))
    {
        let mut mean_dy = T::zero();
        let mut mean_dyy = T::zero();
        for (&g, &v) in dyr.iter().zip(yr) {
            mean_dy += g;
            mean_dyy += g * v;
        }
        mean_dy *= inv_d;
        mean_dyy *= inv_d;
        for ((o, &g), &v) in dxr.iter_mut().zip(dyr).zip(yr) {
            *o += r * (g - mean_dy - v * mean_dyy);
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let k = T::from_f64_lossy(GELU_K);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let k = T::from_f64_lossy(GELU_K);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x)
}

/// `[sin(v·f_j)…, cos(v·f_j)…]` with `f_j = base^(−j/half)`; `dim` must be even.
pub fn sinusoid(value: f64, dim: usize, base: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = base.powf(-(j as f64) / half as f64);
        out[j] = (value * freq).sin();
        out[half + j] = (value * freq).cos();
    }
    out
}

/// Fully connected network with SiLU between layers (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<(Slot, Slot, usize, usize)>,
}

pub struct MlpCache<T> {
    /// Input of every layer (post-activation of the previous one).
    inputs: Vec<Vec<T>>,
    /// Pre-activation of every hidden layer.
    pre: Vec<Vec<T>>,
    rows: usize,
    pub output: Vec<T>,
}

impl Mlp {
    /// `dims = [in, hidden…, out]`. Hidden weights draw from `TruncNormal(std)` scaled by
    /// `1/sqrt(fan_in)` when `std` is `None`; the last layer uses `last`.
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        builder: &mut ParamBuilder<'_, T, R>,
        prefix: &str,
        dims: &[usize],
        hidden_std: Option<f64>,
        last: Init,
    ) -> Self {
        assert!(dims.len() >= 2);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (din, dout) = (dims[l], dims[l + 1]);
                let init = if l + 1 == n {
                    last.clone()
                } else {
                    Init::TruncNormal(hidden_std.unwrap_or(1.0 / (din as f64).sqrt()))
                };
                let w = builder.add(format!("{prefix}.{l}.weight"), &[din, dout], init);
                let b = builder.add(format!("{prefix}.{l}.bias"), &[dout], Init::Zeros);
                (w, b, din, dout)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].2
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().3
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &[T], rows: usize) -> MlpCache<T> {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n - 1);
        let mut cur = x.to_vec();
        for (l, (w, b, din, dout)) in self.layers.iter().enumerate() {
            let y = linear_fwd(&cur, rows, *din, &p[w.clone()], &p[b.clone()], *dout);
            inputs.push(std::mem::take(&mut cur));
            if l + 1 < n {
                cur = y.iter().map(|&v| silu(v)).collect();
                pre.push(y);
            } else {
                cur = y;
            }
        }
        MlpCache {
            inputs,
            pre,
            rows,
            output: cur,
        }
    }

    /// Accumulates parameter gradients into `g`; returns the gradient w.r.t. the input.
    pub fn backward<T: Scalar>(&self, p: &[T], cache: &MlpCache<T>, dout: &[T], g: &mut [T]) -> Vec<T> {
        let mut dy = dout.to_vec();
        for (l, (w, b, din, dout_dim)) in self.layers.iter().enumerate().rev() {
            let (dw, db) = split_two(g, w.clone(), b.clone());
            let dx = linear_bwd(
                &cache.inputs[l],
                &dy,
                cache.rows,
                *din,
                *dout_dim,
                &p[w.clone()],
                dw,
                db,
                true,
            )
            .expect("dx requested");
            dy = if l > 0 {
                dx.iter()
                    .zip(&cache.pre[l - 1])
                    .map(|(&d, &z)| d * silu_grad(z))
                    .collect()
            } else {
                dx
            };
        }
        dy
    }
}

/// Two disjoint mutable views into one gradient buffer.
pub fn split_two<T>(g: &mut [T], a: Slot, b: Slot) -> (&mut [T], &mut [T]) {
    assert!(a.end <= b.start || b.end <= a.start, "slots overlap");
    if a.start < b.start {
        let (lo, hi) = g.split_at_mut(b.start);
        (&mut lo[a], &mut hi[..b.end - b.start])
    } else {
        let (lo, hi) = g.split_at_mut(a.start);
        let bl = b.end - b.start;
        (&mut hi[..a.end - a.start], &mut lo[b.start..b.start + bl])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn numeric(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn activation_derivatives() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            assert!((gelu_grad(x) - numeric(gelu, x)).abs() < 1e-8);
            assert!((silu_grad(x) - numeric(silu, x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = vec![1.0, 2.0, 3.0, 4.0, -1.0, -1.0, 5.0, 0.0];
        let (y, _) = layer_norm_fwd::<f64>(&x, 4);
        for r in y.chunks(4) {
            let m: f64 = r.iter().sum::<f64>() / 4.0;
            let v: f64 = r.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = vec![0.3, -1.2, 2.0, 0.7, 1.1, -0.4];
        let w = vec![0.5, -1.0, 0.25, 2.0, -0.3, 0.8];
        let loss = |x: &[f64]| -> f64 {
            let (y, _) = layer_norm_fwd(x, 3);
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (y, rstd) = layer_norm_fwd(&x, 3);
        let mut dx = vec![0.0; 6];
        layer_norm_bwd_acc(&w, &y, &rstd, 3, &mut dx);
        for i in 0..6 {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            let fd = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-7, "{i}: {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut b = ParamBuilder::<f64, _>::new(&mut rng);
        let mlp = Mlp::build(&mut b, "mlp", &[3, 5, 2], None, Init::TruncNormal(0.5));
        let mut params = b.finish();
        let x = vec![0.2, -0.5, 1.0, 0.9, 0.1, -0.3];
        let target = [0.3, -0.2, 0.5, 0.0];
        let loss = |p: &[f64]| -> f64 {
            let c = mlp.forward(p, &x, 2);
            c.output.iter().zip(&target).map(|(a, t)| (a - t).powi(2)).sum()
        };
        let cache = mlp.forward(&params.values, &x, 2);
        let dout: Vec<f64> = cache
            .output
            .iter()
            .zip(&target)
            .map(|(a, t)| 2.0 * (a - t))
            .collect();
        let mut g = params.zeros_like();
        mlp.backward(&params.values, &cache, &dout, &mut g);
        for i in 0..params.len() {
            let orig = params.values[i];
            params.values[i] = orig + 1e-6;
            let lp = loss(&params.values);
            params.values[i] = orig - 1e-6;
            let lm = loss(&params.values);
            params.values[i] = orig;
            let fd = (lp - lm) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7, "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn split_two_either_order() {
        let mut v = vec![0, 1, 2, 3, 4, 5];
        let (a, b) = split_two(&mut v, 4..6, 0..2);
        assert_eq!(a, &[4, 5]);
        assert_eq!(b, &[0, 1]);
        let (a, b) = split_two(&mut v, 1..3, 3..4);
        a[0] = 10;
        b[0] = 30;
        assert_eq!(v, vec![0, 10, 2, 30, 4, 5]);
    }

    #[test]
    fn sinusoid_rows_differ() {
        let a = sinusoid(3.0, 8, 100.0);
        let b = sinusoid(4.0, 8, 100.0);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-3));
        assert_eq!(sinusoid(0.0, 4, 10.0), vec![0.0, 0.0, 1.0, 1.0]);
    }
}
