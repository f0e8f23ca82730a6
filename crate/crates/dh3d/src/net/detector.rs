//! Keypoint detector head: four per-point linear layers ending in a sigmoid,
//! consuming the pre-normalization feature map Psi and producing the saliency
//! map S with entries strictly in (0,1).

use crate::error::Result;
use crate::net::layers::{Activation, Conv1x1, Conv1x1Cache};
use crate::net::params::{join, ParamSet};
use crate::scalar::Real;
use ndarray::{Array2, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Detector<S: Real> {
    pub layers: Vec<Conv1x1<S>>,
}

pub struct DetectorCache<S: Real> {
    caches: Vec<Conv1x1Cache<S>>,
    pub saliency: Array2<S>,
}

impl<S: Real> Detector<S> {
    /// Widths D -> hidden... -> 1 with ReLU between and sigmoid at the end.
    pub fn init(input_dim: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let last = widths.len() - 2;
        let layers = (0..widths.len() - 1)
            .map(|i| {
                let act = if i == last {
                    Activation::Sigmoid
                } else {
                    Activation::Relu
                };
                Conv1x1::init(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, psi: &Array2<S>) -> Result<DetectorCache<S>> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = psi.clone();
        for layer in &self.layers {
            let (out, cache) = layer.forward(&h)?;
            caches.push(cache);
            h = out;
        }
        Ok(DetectorCache {
            caches,
            saliency: h,
        })
    }

    /// Returns (grad wrt Psi, parameter gradients).
    pub fn backward(&self, cache: &DetectorCache<S>, grad_s: &Array2<S>) -> (Array2<S>, Self) {
        let mut g = grad_s.clone();
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

impl<S: Real> ParamSet<S> for Detector<S> {
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
    use ndarray::Array1;
    use rand::SeedableRng;

    #[test]
    fn zero_weights_give_half() {
        let mut det = Detector::<f64>::init(4, &[3, 2], &mut ChaCha8Rng::seed_from_u64(0));
        for layer in &mut det.layers {
            layer.w.fill(0.0);
            layer.b.fill(0.0);
        }
        let cache = det.forward(&Array2::zeros((5, 4))).unwrap();
        for v in cache.saliency.iter() {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn outputs_strictly_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let det = Detector::<f64>::init(8, &[16, 8, 4], &mut rng);
        let psi = Array2::from_shape_fn((20, 8), |_| gauss(&mut rng));
        let cache = det.forward(&psi).unwrap();
        assert_eq!(cache.saliency.ncols(), 1);
        for v in cache.saliency.iter() {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn matches_layer_by_layer_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let det = Detector::<f64>::init(8, &[5, 3], &mut rng);
        let psi = Array2::from_shape_fn((6, 8), |_| gauss(&mut rng));
        let cache = det.forward(&psi).unwrap();
        // hand-composed evaluation
        for r in 0..6 {
            let mut h: Vec<f64> = psi.row(r).to_vec();
            for (li, layer) in det.layers.iter().enumerate() {
                let mut next = vec![0.0; layer.c_out()];
                for (c, n) in next.iter_mut().enumerate() {
                    *n = layer.b[c]
                        + h.iter()
                            .enumerate()
                            .map(|(j, v)| layer.w[[c, j]] * v)
                            .sum::<f64>();
                }
                if li + 1 == det.layers.len() {
                    for v in &mut next {
                        *v = 1.0 / (1.0 + (-*v).exp());
                    }
                } else {
                    for v in &mut next {
                        *v = v.max(0.0);
                    }
                }
                h = next;
            }
            assert!((cache.saliency[[r, 0]] - h[0]).abs() < 1e-12);
        }
        let _ = Array1::<f64>::zeros(1);
    }
}
