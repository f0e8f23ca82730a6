//! Flex convolution: grid convolution generalized to irregular points. The
//! kernel weight for an edge is a learned linear function of the relative
//! position between a point and its neighbor.

use crate::error::{Error, Result};
use crate::kdtree::NeighborIndex;
use crate::net::layers::{activation_backward, apply_activation, Activation};
use crate::net::params::{join, ParamSet};
use crate::scalar::Real;
use ndarray::{Array2, Array3, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;

/// Dilated k-neighborhoods: of the k*d nearest points, keep ranks d, 2d, ...
/// k*d. With d = 1 a point is its own first neighbor.
pub fn dilated_neighborhoods(
    index: &NeighborIndex,
    points: &[[f64; 3]],
    k: usize,
    dilation: usize,
) -> Result<Vec<Vec<usize>>> {
    let kd = k * dilation;
    if kd > index.len() {
        return Err(Error::invalid(format!(
            "neighborhood k*d = {kd} exceeds cloud size {}",
            index.len()
        )));
    }
    points
        .iter()
        .map(|p| {
            let nn = index.knn(p, kd)?;
            Ok((1..=k).map(|r| nn[r * dilation - 1].0).collect())
        })
        .collect()
}

/// FlexConv layer with the full cross-channel kernel
/// theta in R^{C_out x C_in x 3}.
#[derive(Debug, Clone)]
pub struct FlexConvLayer<S: Real> {
    /// C_out x C_in x 3 kernel direction weights.
    pub theta: Array3<S>,
    /// C_out x C_in kernel bias.
    pub theta_b: Array2<S>,
    pub k: usize,
    pub dilation: usize,
    pub act: Activation,
}

pub struct FlexConvCache<S: Real> {
    /// per-point neighbor aggregate sum_i delta_k(l,i) * feat[l_i, c'], N x 3*C_in
    agg_delta: Array2<S>,
    /// per-point neighbor feature sum, N x C_in
    agg_feat: Array2<S>,
    /// neighbor lists with relative positions p_l - p_{l_i}
    edges: Vec<Vec<(usize, [S; 3])>>,
    preact: Array2<S>,
    output: Array2<S>,
}

impl<S: Real> FlexConvLayer<S> {
    pub fn init(
        c_in: usize,
        c_out: usize,
        k: usize,
        dilation: usize,
        act: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        use crate::net::layers::gauss;
        let scale = (2.0 / (c_in * k) as f64).sqrt();
        let theta = Array3::from_shape_fn((c_out, c_in, 3), |_| {
            S::from_f64_lossy(gauss(rng) * scale)
        });
        let theta_b = Array2::from_shape_fn((c_out, c_in), |_| {
            S::from_f64_lossy(gauss(rng) * scale)
        });
        Self {
            theta,
            theta_b,
            k,
            dilation,
            act,
        }
    }

    pub fn c_in(&self) -> usize {
        self.theta.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.theta.shape()[0]
    }

    /// Forward pass given precomputed neighbor lists.
    ///
    /// out[l,c] = sum_{i in N(l)} sum_{c'} (<theta[c,c'], p_l - p_{l_i}> +
    /// theta_b[c,c']) * feat[l_i, c']
    pub fn forward(
        &self,
        points: &[[f64; 3]],
        features: &Array2<S>,
        neighborhoods: &[Vec<usize>],
    ) -> Result<(Array2<S>, FlexConvCache<S>)> {
        let n = points.len();
        let c_in = self.c_in();
        if features.nrows() != n {
            return Err(Error::shape(format!(
                "flexconv: {} feature rows for {} points",
                features.nrows(),
                n
            )));
        }
        if features.ncols() != c_in {
            return Err(Error::shape(format!(
                "flexconv expects {} input channels, got {}",
                c_in,
                features.ncols()
            )));
        }
        if neighborhoods.len() != n {
            return Err(Error::shape("flexconv: neighborhood list length mismatch".to_string()));
        }

        let mut edges: Vec<Vec<(usize, [S; 3])>> = Vec::with_capacity(n);
        let mut agg_delta: Array2<S> = Array2::zeros((n, 3 * c_in));
        let mut agg_feat: Array2<S> = Array2::zeros((n, c_in));
        for (l, nbrs) in neighborhoods.iter().enumerate() {
            let pl = points[l];
            let mut list = Vec::with_capacity(nbrs.len());
            for &i in nbrs {
                let pi = points[i];
                let delta = [
                    S::from_f64_lossy(pl[0] - pi[0]),
                    S::from_f64_lossy(pl[1] - pi[1]),
                    S::from_f64_lossy(pl[2] - pi[2]),
                ];
                for c in 0..c_in {
                    let fv = features[[i, c]];
                    for (a, &dv) in delta.iter().enumerate() {
                        agg_delta[[l, c * 3 + a]] += dv * fv;
                    }
                    agg_feat[[l, c]] += fv;
                }
                list.push((i, delta));
            }
            edges.push(list);
        }

        // theta flattened to C_out x (3*C_in) matching agg_delta's layout
        let c_out = self.c_out();
        let theta_flat = self
            .theta
            .view()
            .into_shape_with_order((c_out, 3 * c_in))
            .expect("contiguous kernel");
        let mut preact = agg_delta.dot(&theta_flat.t());
        preact += &agg_feat.dot(&self.theta_b.t());
        let output = apply_activation(&preact, self.act);
        Ok((
            output.clone(),
            FlexConvCache {
                agg_delta,
                agg_feat,
                edges,
                preact,
                output,
            },
        ))
    }

    /// Returns (grad wrt input features, parameter gradients).
    pub fn backward(&self, cache: &FlexConvCache<S>, grad_out: &Array2<S>) -> (Array2<S>, Self) {
        let gz = activation_backward(&cache.preact, &cache.output, grad_out, self.act);
        let n = gz.nrows();
        let c_in = self.c_in();
        let c_out = self.c_out();

        let grad_theta_flat = gz.t().dot(&cache.agg_delta); // C_out x 3*C_in
        let grad_theta = grad_theta_flat
            .into_shape_with_order((c_out, c_in, 3))
            .expect("contiguous");
        let grad_theta_b = gz.t().dot(&cache.agg_feat);

        // per-point pullbacks: h[l, c'*3+a] = sum_c gz[l,c] theta[c,c',a]
        let theta_flat = self
            .theta
            .view()
            .into_shape_with_order((c_out, 3 * c_in))
            .expect("contiguous kernel");
        let h = gz.dot(&theta_flat); // N x 3*C_in
        let g_bias = gz.dot(&self.theta_b); // N x C_in

        let mut grad_feat: Array2<S> = Array2::zeros((n, c_in));
        for l in 0..n {
            for &(i, delta) in &cache.edges[l] {
                for c in 0..c_in {
                    let mut v = g_bias[[l, c]];
                    for (a, &dv) in delta.iter().enumerate() {
                        v += h[[l, c * 3 + a]] * dv;
                    }
                    grad_feat[[i, c]] += v;
                }
            }
        }

        (
            grad_feat,
            Self {
                theta: grad_theta,
                theta_b: grad_theta_b,
                k: self.k,
                dilation: self.dilation,
                act: self.act,
            },
        )
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            theta: Array3::zeros(self.theta.raw_dim()),
            theta_b: Array2::zeros(self.theta_b.raw_dim()),
            k: self.k,
            dilation: self.dilation,
            act: self.act,
        }
    }
}

impl<S: Real> ParamSet<S> for FlexConvLayer<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, S>)) {
        f(&join(prefix, "theta"), self.theta.view().into_dyn());
        f(&join(prefix, "theta_b"), self.theta_b.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, S>)) {
        f(&join(prefix, "theta"), self.theta.view_mut().into_dyn());
        f(&join(prefix, "theta_b"), self.theta_b.view_mut().into_dyn());
    }
}

/// Direct double-loop evaluation of the FlexConv sum; the oracle used by the
/// tests and the acceptance suite.
pub fn flexconv_brute_force<S: Real>(
    layer: &FlexConvLayer<S>,
    points: &[[f64; 3]],
    features: &Array2<S>,
    neighborhoods: &[Vec<usize>],
) -> Array2<S> {
    let n = points.len();
    let mut out = Array2::zeros((n, layer.c_out()));
    for l in 0..n {
        for c in 0..layer.c_out() {
            let mut acc = S::zero();
            for &i in &neighborhoods[l] {
                let delta = [
                    S::from_f64_lossy(points[l][0] - points[i][0]),
                    S::from_f64_lossy(points[l][1] - points[i][1]),
                    S::from_f64_lossy(points[l][2] - points[i][2]),
                ];
                for cp in 0..layer.c_in() {
                    let mut w = layer.theta_b[[c, cp]];
                    for a in 0..3 {
                        w += layer.theta[[c, cp, a]] * delta[a];
                    }
                    acc += w * features[[i, cp]];
                }
            }
            out[[l, c]] = acc;
        }
    }
    apply_activation(&out, layer.act)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::PointCloud;
    use rand::{Rng, SeedableRng};

    fn setup(n: usize, seed: u64) -> (Vec<[f64; 3]>, NeighborIndex) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ]
            })
            .collect();
        let index = NeighborIndex::build(&PointCloud::new(points.clone()).unwrap());
        (points, index)
    }

    #[test]
    fn counting_kernel() {
        // theta = 0, theta_b = 1, C_in = 1, unit features, k = 4 -> all outputs 4
        let (points, index) = setup(20, 1);
        let layer = FlexConvLayer::<f64> {
            theta: Array3::zeros((1, 1, 3)),
            theta_b: Array2::ones((1, 1)),
            k: 4,
            dilation: 1,
            act: Activation::None,
        };
        let nbrs = dilated_neighborhoods(&index, &points, 4, 1).unwrap();
        let feats = Array2::ones((20, 1));
        let (out, _) = layer.forward(&points, &feats, &nbrs).unwrap();
        for v in out.iter() {
            assert!((v - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn self_only_neighborhood_is_conv1x1() {
        let (points, index) = setup(10, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = FlexConvLayer::<f64>::init(2, 3, 1, 1, Activation::None, &mut rng);
        let nbrs = dilated_neighborhoods(&index, &points, 1, 1).unwrap();
        // k = 1, d = 1: each point is its own neighborhood
        for (l, nb) in nbrs.iter().enumerate() {
            assert_eq!(nb, &vec![l]);
        }
        let feats = Array2::from_shape_fn((10, 2), |_| rng.gen_range(-1.0..1.0));
        let (out, _) = layer.forward(&points, &feats, &nbrs).unwrap();
        // relative position is 0 so out = theta_b * feature row
        for l in 0..10 {
            for c in 0..3 {
                let want: f64 = (0..2).map(|cp| layer.theta_b[[c, cp]] * feats[[l, cp]]).sum();
                assert!((out[[l, c]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_brute_force_oracle() {
        let (points, index) = setup(5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = FlexConvLayer::<f64>::init(2, 2, 3, 1, Activation::None, &mut rng);
        let nbrs = dilated_neighborhoods(&index, &points, 3, 1).unwrap();
        let feats = Array2::from_shape_fn((5, 2), |_| rng.gen_range(-1.0..1.0));
        let (fast, _) = layer.forward(&points, &feats, &nbrs).unwrap();
        let slow = flexconv_brute_force(&layer, &points, &feats, &nbrs);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn dilation_strides_ranks() {
        let points: Vec<[f64; 3]> = (0..8).map(|i| [i as f64, 0.0, 0.0]).collect();
        let index = NeighborIndex::build(&PointCloud::new(points.clone()).unwrap());
        // query point 0 with k = 2, d = 2: the 4 nearest are ranks [0,1,2,3]
        // (self first), keep ranks 2 and 4 -> indices 1 and 3
        let nbrs = dilated_neighborhoods(&index, &points, 2, 2).unwrap();
        assert_eq!(nbrs[0], vec![1, 3]);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let (points, index) = setup(6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = FlexConvLayer::<f64>::init(2, 2, 3, 1, Activation::None, &mut rng);
        let nbrs = dilated_neighborhoods(&index, &points, 3, 1).unwrap();
        assert!(layer.forward(&points, &Array2::zeros((6, 5)), &nbrs).is_err());
        assert!(layer.forward(&points, &Array2::zeros((4, 2)), &nbrs).is_err());
    }
}
