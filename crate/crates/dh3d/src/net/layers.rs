//! Point-wise building blocks: 1x1 convolution, activations, row-wise L2
//! normalization and softmax.

use crate::error::{Error, Result};
use crate::net::params::{join, ParamSet};
use crate::scalar::Real;
use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

pub(crate) fn apply_activation<S: Real>(z: &Array2<S>, act: Activation) -> Array2<S> {
    match act {
        Activation::None => z.clone(),
        Activation::Relu => z.mapv(|v| if v > S::zero() { v } else { S::zero() }),
        Activation::Sigmoid => z.mapv(sigmoid),
    }
}

pub(crate) fn activation_backward<S: Real>(
    z: &Array2<S>,
    out: &Array2<S>,
    grad_out: &Array2<S>,
    act: Activation,
) -> Array2<S> {
    match act {
        Activation::None => grad_out.clone(),
        Activation::Relu => {
            let mut g = grad_out.clone();
            g.zip_mut_with(z, |gv, &zv| {
                if zv <= S::zero() {
                    *gv = S::zero();
                }
            });
            g
        }
        Activation::Sigmoid => {
            let mut g = grad_out.clone();
            g.zip_mut_with(out, |gv, &ov| *gv *= ov * (S::one() - ov));
            g
        }
    }
}

/// Logistic function clamped into the open interval so saturated logits
/// never round to exactly 0 or 1 (saliency and gate outputs are
/// contractually in (0,1)).
pub fn sigmoid<S: Real>(x: S) -> S {
    let eps = S::from_f64_lossy(1e-12);
    (S::one() / (S::one() + (-x).exp())).max(eps).min(S::one() - eps)
}

/// Per-point linear layer: `out_i = act(W in_i + b)`.
#[derive(Debug, Clone)]
pub struct Conv1x1<S: Real> {
    /// C_out x C_in
    pub w: Array2<S>,
    pub b: Array1<S>,
    pub act: Activation,
}

pub struct Conv1x1Cache<S: Real> {
    input: Array2<S>,
    preact: Array2<S>,
    output: Array2<S>,
}

impl<S: Real> Conv1x1<S> {
    pub fn init(c_in: usize, c_out: usize, act: Activation, rng: &mut ChaCha8Rng) -> Self {
        let scale = (2.0 / c_in as f64).sqrt();
        let w = Array2::from_shape_fn((c_out, c_in), |_| {
            S::from_f64_lossy(gauss(rng) * scale)
        });
        let b = Array1::zeros(c_out);
        Self { w, b, act }
    }

    pub fn c_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn c_out(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, input: &Array2<S>) -> Result<(Array2<S>, Conv1x1Cache<S>)> {
        if input.ncols() != self.c_in() {
            return Err(Error::shape(format!(
                "conv1x1 expects {} input channels, got {}",
                self.c_in(),
                input.ncols()
            )));
        }
        let mut preact = input.dot(&self.w.t());
        preact += &self.b;
        let output = apply_activation(&preact, self.act);
        Ok((
            output.clone(),
            Conv1x1Cache {
                input: input.clone(),
                preact,
                output,
            },
        ))
    }

    /// Returns (grad wrt input, grads of this layer's parameters).
    pub fn backward(&self, cache: &Conv1x1Cache<S>, grad_out: &Array2<S>) -> (Array2<S>, Self) {
        let gz = activation_backward(&cache.preact, &cache.output, grad_out, self.act);
        let grad_w = gz.t().dot(&cache.input);
        let grad_b = gz.sum_axis(Axis(0));
        let grad_in = gz.dot(&self.w);
        (
            grad_in,
            Self {
                w: grad_w,
                b: grad_b,
                act: self.act,
            },
        )
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
            act: self.act,
        }
    }
}

impl<S: Real> ParamSet<S> for Conv1x1<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, S>)) {
        f(&join(prefix, "w"), self.w.view().into_dyn());
        f(&join(prefix, "b"), self.b.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, S>)) {
        f(&join(prefix, "w"), self.w.view_mut().into_dyn());
        f(&join(prefix, "b"), self.b.view_mut().into_dyn());
    }
}

pub(crate) fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on explicit uniforms keeps draws identical for f32/f64 stacks
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Row-wise L2 normalization; zero rows map to zero rows.
pub fn l2_normalize_rows<S: Real>(x: &Array2<S>) -> (Array2<S>, Array1<S>) {
    let norms = Array1::from_iter(
        x.rows()
            .into_iter()
            .map(|r| r.iter().map(|v| *v * *v).sum::<S>().sqrt()),
    );
    let mut out = x.clone();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        if n > S::zero() {
            row.mapv_inplace(|v| v / n);
        } else {
            row.fill(S::zero());
        }
    }
    (out, norms)
}

/// Backward of [`l2_normalize_rows`]: rows that normalized to zero get zero
/// gradient.
pub fn l2_normalize_rows_backward<S: Real>(
    out: &Array2<S>,
    norms: &Array1<S>,
    grad_out: &Array2<S>,
) -> Array2<S> {
    let mut grad_in = Array2::zeros(out.raw_dim());
    for ((mut gi, (o, g)), &n) in grad_in
        .rows_mut()
        .into_iter()
        .zip(out.rows().into_iter().zip(grad_out.rows()))
        .zip(norms.iter())
    {
        if n > S::zero() {
            let dot = o.iter().zip(g.iter()).map(|(a, b)| *a * *b).sum::<S>();
            for ((giv, &ov), &gv) in gi.iter_mut().zip(o.iter()).zip(g.iter()) {
                *giv = (gv - ov * dot) / n;
            }
        }
    }
    grad_in
}

/// L2 normalization of a single vector with a zero guard. Returns the
/// normalized vector, its norm, and whether the input was degenerate (zero).
pub fn l2_normalize_vec<S: Real>(x: &Array1<S>) -> (Array1<S>, S, bool) {
    let n = x.iter().map(|v| *v * *v).sum::<S>().sqrt();
    if n > S::zero() {
        (x.mapv(|v| v / n), n, false)
    } else {
        (Array1::zeros(x.raw_dim()), n, true)
    }
}

pub fn l2_normalize_vec_backward<S: Real>(
    out: &Array1<S>,
    norm: S,
    grad_out: &Array1<S>,
) -> Array1<S> {
    if norm <= S::zero() {
        return Array1::zeros(out.raw_dim());
    }
    let dot = out.iter().zip(grad_out.iter()).map(|(a, b)| *a * *b).sum::<S>();
    Array1::from_iter(
        out.iter()
            .zip(grad_out.iter())
            .map(|(&o, &g)| (g - o * dot) / norm),
    )
}

/// Numerically stable softmax over a vector.
pub fn softmax<S: Real>(x: &Array1<S>) -> Array1<S> {
    let max = x.iter().cloned().fold(S::neg_infinity(), S::max);
    let exps = x.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    exps.mapv(|v| v / sum)
}

/// Backward of softmax: `dx_i = y_i (g_i - sum_j y_j g_j)`.
pub fn softmax_backward<S: Real>(out: &Array1<S>, grad_out: &Array1<S>) -> Array1<S> {
    let dot = out.iter().zip(grad_out.iter()).map(|(a, b)| *a * *b).sum::<S>();
    Array1::from_iter(
        out.iter()
            .zip(grad_out.iter())
            .map(|(&y, &g)| y * (g - dot)),
    )
}
