//! Squeeze-and-excitation block: global average pooling over points followed
//! by two fully connected layers producing per-channel gates.

use crate::error::{Error, Result};
use crate::net::layers::{gauss, sigmoid};
use crate::net::params::{join, ParamSet};
use crate::scalar::Real;
use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SeBlock<S: Real> {
    /// reduce: (C/r) x C
    pub w1: Array2<S>,
    pub b1: Array1<S>,
    /// expand: C x (C/r)
    pub w2: Array2<S>,
    pub b2: Array1<S>,
}

pub struct SeCache<S: Real> {
    input: Array2<S>,
    hidden_pre: Array1<S>,
    hidden: Array1<S>,
    gate: Array1<S>,
}

impl<S: Real> SeBlock<S> {
    pub fn init(channels: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::invalid(format!(
                "SE reduction {reduction} must divide channel count {channels}"
            )));
        }
        let hidden = channels / reduction;
        let s1 = (2.0 / channels as f64).sqrt();
        let s2 = (2.0 / hidden as f64).sqrt();
        Ok(Self {
            w1: Array2::from_shape_fn((hidden, channels), |_| S::from_f64_lossy(gauss(rng) * s1)),
            b1: Array1::zeros(hidden),
            w2: Array2::from_shape_fn((channels, hidden), |_| S::from_f64_lossy(gauss(rng) * s2)),
            b2: Array1::zeros(channels),
        })
    }

    pub fn channels(&self) -> usize {
        self.w1.ncols()
    }

    pub fn forward(&self, u: &Array2<S>) -> Result<(Array2<S>, SeCache<S>)> {
        let c = self.channels();
        if u.ncols() != c {
            return Err(Error::shape(format!(
                "SE block expects {c} channels, got {}",
                u.ncols()
            )));
        }
        let z = u.mean_axis(Axis(0)).expect("non-empty input");
        let hidden_pre = self.w1.dot(&z) + &self.b1;
        let hidden = hidden_pre.mapv(|v| if v > S::zero() { v } else { S::zero() });
        let gate_pre = self.w2.dot(&hidden) + &self.b2;
        let gate = gate_pre.mapv(sigmoid);
        let mut out = u.clone();
        for (mut col, &g) in out.columns_mut().into_iter().zip(gate.iter()) {
            col.mapv_inplace(|v| v * g);
        }
        Ok((
            out,
            SeCache {
                input: u.clone(),
                hidden_pre,
                hidden,
                gate,
            },
        ))
    }

    pub fn backward(&self, cache: &SeCache<S>, grad_out: &Array2<S>) -> (Array2<S>, Self) {
        let n = cache.input.nrows();
        let inv_n = S::one() / S::from_f64_lossy(n as f64);
        // direct path: out[:,c] = gate_c * u[:,c]
        let mut grad_in = grad_out.clone();
        for (mut col, &g) in grad_in.columns_mut().into_iter().zip(cache.gate.iter()) {
            col.mapv_inplace(|v| v * g);
        }
        // gate path
        let grad_gate = Array1::from_iter(
            grad_out
                .columns()
                .into_iter()
                .zip(cache.input.columns())
                .map(|(g, u)| g.iter().zip(u.iter()).map(|(a, b)| *a * *b).sum::<S>()),
        );
        let grad_gate_pre = Array1::from_iter(
            grad_gate
                .iter()
                .zip(cache.gate.iter())
                .map(|(&g, &s)| g * s * (S::one() - s)),
        );
        let grad_w2 = outer(&grad_gate_pre, &cache.hidden);
        let grad_b2 = grad_gate_pre.clone();
        let grad_hidden = self.w2.t().dot(&grad_gate_pre);
        let grad_hidden_pre = Array1::from_iter(
            grad_hidden
                .iter()
                .zip(cache.hidden_pre.iter())
                .map(|(&g, &z)| if z > S::zero() { g } else { S::zero() }),
        );
        let z = cache.input.mean_axis(Axis(0)).expect("non-empty");
        let grad_w1 = outer(&grad_hidden_pre, &z);
        let grad_b1 = grad_hidden_pre.clone();
        let grad_z = self.w1.t().dot(&grad_hidden_pre);
        // z_c = mean of column c
        for (mut col, &gz) in grad_in.columns_mut().into_iter().zip(grad_z.iter()) {
            for v in col.iter_mut() {
                *v += gz * inv_n;
            }
        }
        (
            grad_in,
            Self {
                w1: grad_w1,
                b1: grad_b1,
                w2: grad_w2,
                b2: grad_b2,
            },
        )
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }
}

fn outer<S: Real>(a: &Array1<S>, b: &Array1<S>) -> Array2<S> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, &av) in a.iter().enumerate() {
        for (j, &bv) in b.iter().enumerate() {
            out[[i, j]] = av * bv;
        }
    }
    out
}

impl<S: Real> ParamSet<S> for SeBlock<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, S>)) {
        f(&join(prefix, "w1"), self.w1.view().into_dyn());
        f(&join(prefix, "b1"), self.b1.view().into_dyn());
        f(&join(prefix, "w2"), self.w2.view().into_dyn());
        f(&join(prefix, "b2"), self.b2.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, S>)) {
        f(&join(prefix, "w1"), self.w1.view_mut().into_dyn());
        f(&join(prefix, "b1"), self.b1.view_mut().into_dyn());
        f(&join(prefix, "w2"), self.w2.view_mut().into_dyn());
        f(&join(prefix, "b2"), self.b2.view_mut().into_dyn());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn all_ones_gate_is_identity() {
        // zero expand weights with large positive bias -> gate ~ 1
        // (the sigmoid is clamped to 1 - 1e-12, so identity holds to ~1e-11)
        let se = SeBlock::<f64> {
            w1: Array2::zeros((1, 2)),
            b1: Array1::zeros(1),
            w2: Array2::zeros((2, 1)),
            b2: array![50.0, 50.0],
        };
        let u = array![[1.0, -2.0], [3.0, 0.5]];
        let (out, _) = se.forward(&u).unwrap();
        for (a, b) in out.iter().zip(u.iter()) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn squeeze_is_column_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let se = SeBlock::<f64>::init(4, 2, &mut rng).unwrap();
        let mut u = Array2::zeros((5, 4));
        u.column_mut(2).fill(7.0);
        let (_, cache) = se.forward(&u).unwrap();
        // recompute gate from z by hand to confirm z_c = column mean
        let z = array![0.0, 0.0, 7.0, 0.0];
        let h = (se.w1.dot(&z) + &se.b1).mapv(|v: f64| v.max(0.0));
        let g = (se.w2.dot(&h) + &se.b2).mapv(sigmoid);
        for (a, b) in cache.gate.iter().zip(g.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let se = SeBlock::<f64>::init(6, 2, &mut rng).unwrap();
        let u = Array2::from_shape_fn((4, 6), |_| gauss(&mut rng));
        let (out, _) = se.forward(&u).unwrap();
        // scalar-by-scalar recomputation
        let mut z = vec![0.0; 6];
        for c in 0..6 {
            for r in 0..4 {
                z[c] += u[[r, c]] / 4.0;
            }
        }
        let mut h = vec![0.0; 3];
        for i in 0..3 {
            for c in 0..6 {
                h[i] += se.w1[[i, c]] * z[c];
            }
            h[i] = (h[i] + se.b1[i]).max(0.0);
        }
        for c in 0..6 {
            let mut s = se.b2[c];
            for i in 0..3 {
                s += se.w2[[c, i]] * h[i];
            }
            let s = sigmoid(s);
            for r in 0..4 {
                assert!((out[[r, c]] - s * u[[r, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_reduction_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(SeBlock::<f64>::init(6, 4, &mut rng).is_err());
        let se = SeBlock::<f64>::init(4, 2, &mut rng).unwrap();
        assert!(se.forward(&Array2::zeros((3, 5))).is_err());
    }
}
