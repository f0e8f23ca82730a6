//! Attention predictor: three per-point linear layers followed by a softmax
//! over points, producing weights that sum to one.

use crate::error::Result;
use crate::net::layers::{
    softmax, softmax_backward, Activation, Conv1x1, Conv1x1Cache,
};
use crate::net::params::{join, ParamSet};
use crate::scalar::Real;
use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Attention<S: Real> {
    pub layers: Vec<Conv1x1<S>>,
}

pub struct AttentionCache<S: Real> {
    caches: Vec<Conv1x1Cache<S>>,
    pub weights: Array1<S>,
}

impl<S: Real> Attention<S> {
    pub fn init(input_dim: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let last = widths.len() - 2;
        let layers = (0..widths.len() - 1)
            .map(|i| {
                let act = if i == last {
                    Activation::None
                } else {
                    Activation::Relu
                };
                Conv1x1::init(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, features: &Array2<S>) -> Result<AttentionCache<S>> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = features.clone();
        for layer in &self.layers {
            let (out, cache) = layer.forward(&h)?;
            caches.push(cache);
            h = out;
        }
        let logits = Array1::from_iter(h.column(0).iter().cloned());
        let weights = softmax(&logits);
        Ok(AttentionCache { caches, weights })
    }

    /// Returns (grad wrt input features, parameter gradients).
    pub fn backward(&self, cache: &AttentionCache<S>, grad_weights: &Array1<S>) -> (Array2<S>, Self) {
        let g_logits = softmax_backward(&cache.weights, grad_weights);
        let mut g = Array2::from_shape_fn((g_logits.len(), 1), |(i, _)| g_logits[i]);
        let mut grads: Vec<Conv1x1<S>> = Vec::with_capacity(self.layers.len());
        for (layer, lcache) in self.layers.iter().zip(&cache.caches).rev() {
            let (gin, glayer) = layer.backward(lcache, &g);
            grads.push(glayer);
            g = gin;
        }
        grads.reverse();
        (g, Self { layers: grads })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| l.zeros_like()).collect(),
        }
    }
}

impl<S: Real> ParamSet<S> for Attention<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, S>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("conv{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, S>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::layers::gauss;
    use rand::SeedableRng;

    #[test]
    fn identical_rows_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let att = Attention::<f64>::init(4, &[6, 3], &mut rng);
        let mut feats = Array2::zeros((7, 4));
        for mut row in feats.rows_mut() {
            row.assign(&ndarray::array![0.3, -0.1, 0.8, 0.2]);
        }
        let cache = att.forward(&feats).unwrap();
        for w in cache.weights.iter() {
            assert!((w - 1.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_form_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let att = Attention::<f64>::init(5, &[8, 4], &mut rng);
        let feats = Array2::from_shape_fn((11, 5), |_| gauss(&mut rng));
        let cache = att.forward(&feats).unwrap();
        assert!(cache.weights.iter().all(|w| *w >= 0.0));
        assert!((cache.weights.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn matches_explicit_exponentials() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let att = Attention::<f64>::init(3, &[4, 2], &mut rng);
        let feats = Array2::from_shape_fn((3, 3), |_| gauss(&mut rng));
        let cache = att.forward(&feats).unwrap();
        // logits through the layers by hand, then explicit exponentials
        let mut logits = Vec::new();
        for r in 0..3 {
            let mut h: Vec<f64> = feats.row(r).to_vec();
            for (li, layer) in att.layers.iter().enumerate() {
                let mut next = vec![0.0; layer.c_out()];
                for (c, n) in next.iter_mut().enumerate() {
                    *n = layer.b[c]
                        + h.iter()
                            .enumerate()
                            .map(|(j, v)| layer.w[[c, j]] * v)
                            .sum::<f64>();
                    if li + 1 != att.layers.len() {
                        *n = n.max(0.0);
                    }
                }
                h = next;
            }
            logits.push(h[0]);
        }
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (w, l) in cache.weights.iter().zip(&logits) {
            assert!((w - l.exp() / z).abs() < 1e-9);
        }
    }
}
