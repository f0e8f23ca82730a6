//! Global descriptor assembler: two FlexConv projection layers, the
//! attention predictor, NetVLAD aggregation (attention-weighted soft-assigned
//! residuals to cluster centers), and an FC compression to the final
//! L2-normalized global descriptor.

use crate::cloud::{random_sample, PointCloud};
use crate::error::{Error, Result};
use crate::kdtree::NeighborIndex;
use crate::net::attention::{Attention, AttentionCache};
use crate::net::flexconv::{dilated_neighborhoods, FlexConvCache, FlexConvLayer};
use crate::net::layers::{
    gauss, l2_normalize_rows, l2_normalize_rows_backward, l2_normalize_vec,
    l2_normalize_vec_backward, softmax, softmax_backward, Activation,
};
use crate::net::params::{join, ParamSet};
use crate::scalar::Real;
use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand_chacha::ChaCha8Rng;

/// Default NetVLAD cluster count.
pub const DEFAULT_CLUSTERS: usize = 64;
/// Default global descriptor dimension.
pub const DEFAULT_GLOBAL_DIM: usize = 256;

#[derive(Debug, Clone)]
pub struct GlobalSpec {
    pub proj1_width: usize,
    pub proj2_width: usize,
    pub proj_k: usize,
    pub clusters: usize,
    pub output_dim: usize,
    pub attention_hidden: Vec<usize>,
    pub subsample_to: Option<usize>,
    pub subsample_seed: u64,
}

impl GlobalSpec {
    pub fn default_for(input_dim: usize) -> Self {
        let _ = input_dim;
        Self {
            proj1_width: 256,
            proj2_width: 1024,
            proj_k: 8,
            clusters: DEFAULT_CLUSTERS,
            output_dim: DEFAULT_GLOBAL_DIM,
            attention_hidden: vec![256, 64],
            subsample_to: None,
            subsample_seed: 23,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlobalHead<S: Real> {
    pub proj1: FlexConvLayer<S>,
    pub proj2: FlexConvLayer<S>,
    pub attention: Attention<S>,
    /// soft-assignment weights, K x C
    pub assign_w: Array2<S>,
    pub assign_b: Array1<S>,
    /// cluster centers, K x C
    pub centers: Array2<S>,
    /// compression FC, G x (K*C)
    pub fc_w: Array2<S>,
    pub fc_b: Array1<S>,
    pub subsample_to: Option<usize>,
    pub subsample_seed: u64,
}

pub struct GlobalCache<S: Real> {
    proj1: FlexConvCache<S>,
    proj2: FlexConvCache<S>,
    /// rows of the projected features kept for aggregation
    kept: Option<Vec<usize>>,
    features: Array2<S>,
    attention: AttentionCache<S>,
    assign: Array2<S>,
    vlad: Array2<S>,
    vlad_norms: Array1<S>,
    flat_normed: Array1<S>,
    flat_norm: S,
    fc_norm: S,
    pub descriptor: Array1<S>,
    pub degenerate: bool,
    full_n: usize,
}

impl<S: Real> GlobalHead<S> {
    pub fn init(input_dim: usize, spec: &GlobalSpec, rng: &mut ChaCha8Rng) -> Self {
        let c = spec.proj2_width;
        let k = spec.clusters;
        let g = spec.output_dim;
        let sw = (2.0 / c as f64).sqrt();
        Self {
            proj1: FlexConvLayer::init(input_dim, spec.proj1_width, spec.proj_k, 1, Activation::Relu, rng),
            proj2: FlexConvLayer::init(spec.proj1_width, spec.proj2_width, spec.proj_k, 1, Activation::None, rng),
            attention: Attention::init(c, &spec.attention_hidden, rng),
            assign_w: Array2::from_shape_fn((k, c), |_| S::from_f64_lossy(gauss(rng) * sw)),
            assign_b: Array1::zeros(k),
            centers: Array2::from_shape_fn((k, c), |_| S::from_f64_lossy(gauss(rng))),
            fc_w: Array2::from_shape_fn((g, k * c), |_| {
                S::from_f64_lossy(gauss(rng) * (1.0 / ((k * c) as f64).sqrt()))
            }),
            fc_b: Array1::zeros(g),
            subsample_to: spec.subsample_to,
            subsample_seed: spec.subsample_seed,
        }
    }

    pub fn clusters(&self) -> usize {
        self.assign_w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.fc_w.nrows()
    }

    /// Full global pass from the local descriptor map X of a centered cloud.
    pub fn forward(&self, cloud: &PointCloud, x: &Array2<S>) -> Result<GlobalCache<S>> {
        let n = cloud.len();
        if x.nrows() != n {
            return Err(Error::shape(format!(
                "global head: {} descriptor rows for {} points",
                x.nrows(),
                n
            )));
        }
        let index = NeighborIndex::build(cloud);
        let nbrs1 = dilated_neighborhoods(&index, &cloud.points, self.proj1.k, self.proj1.dilation)?;
        let nbrs2 = dilated_neighborhoods(&index, &cloud.points, self.proj2.k, self.proj2.dilation)?;
        let (f1, proj1) = self.proj1.forward(&cloud.points, x, &nbrs1)?;
        let (f2, proj2) = self.proj2.forward(&cloud.points, &f1, &nbrs2)?;

        // optional downsampling before the final aggregation, drawn from a
        // canonical coordinate ordering for permutation invariance
        let (features, kept) = match self.subsample_to {
            Some(m) if m < n => {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| {
                    cloud.points[a]
                        .partial_cmp(&cloud.points[b])
                        .expect("finite coordinates")
                });
                let (_, ranks) = random_sample(
                    &PointCloud {
                        points: order.iter().map(|&i| cloud.points[i]).collect(),
                    },
                    m,
                    self.subsample_seed,
                )?;
                let idx: Vec<usize> = ranks.iter().map(|&r| order[r]).collect();
                let mut sel = Array2::zeros((m, f2.ncols()));
                for (row, &i) in idx.iter().enumerate() {
                    sel.row_mut(row).assign(&f2.row(i));
                }
                (sel, Some(idx))
            }
            Some(m) if m > n => {
                return Err(Error::invalid(format!(
                    "cloud has {n} points but aggregation requires {m}"
                )));
            }
            _ => (f2.clone(), None),
        };

        let attention = self.attention.forward(&features)?;
        let core = self.aggregate(&features, &attention.weights)?;
        Ok(GlobalCache {
            proj1,
            proj2,
            kept,
            features,
            attention,
            assign: core.assign,
            vlad: core.vlad,
            vlad_norms: core.vlad_norms,
            flat_normed: core.flat_normed,
            flat_norm: core.flat_norm,
            fc_norm: core.fc_norm,
            descriptor: core.descriptor,
            degenerate: core.degenerate,
            full_n: n,
        })
    }

    /// NetVLAD aggregation on explicit features and attention weights.
    pub fn aggregate(&self, features: &Array2<S>, attention: &Array1<S>) -> Result<VladOut<S>> {
        let c = self.assign_w.ncols();
        if features.ncols() != c {
            return Err(Error::shape(format!(
                "netvlad expects {c} channels, got {}",
                features.ncols()
            )));
        }
        if attention.len() != features.nrows() {
            return Err(Error::shape("attention length mismatch".to_string()));
        }
        let k = self.clusters();
        let n = features.nrows();
        let mut logits = features.dot(&self.assign_w.t());
        logits += &self.assign_b;
        let mut assign = Array2::zeros((n, k));
        for (i, row) in logits.rows().into_iter().enumerate() {
            let sm = softmax(&row.to_owned());
            assign.row_mut(i).assign(&sm);
        }
        // V(k) = sum_i att_i a_k(x_i) (x_i - c_k)
        let weighted = &assign
            * &attention
                .view()
                .insert_axis(Axis(1))
                .broadcast((n, k))
                .expect("broadcast");
        let mut vlad = weighted.t().dot(features); // K x C
        let mass = weighted.sum_axis(Axis(0)); // K
        for (kk, mut row) in vlad.rows_mut().into_iter().enumerate() {
            let m = mass[kk];
            for (v, cv) in row.iter_mut().zip(self.centers.row(kk)) {
                *v -= m * *cv;
            }
        }
        let (vlad_n, vlad_norms) = l2_normalize_rows(&vlad);
        let flat = Array1::from_iter(vlad_n.iter().cloned());
        let (flat_normed, flat_norm, deg1) = l2_normalize_vec(&flat);
        let fc_out = self.fc_w.dot(&flat_normed) + &self.fc_b;
        let (descriptor, fc_norm, deg2) = l2_normalize_vec(&fc_out);
        Ok(VladOut {
            assign,
            vlad,
            vlad_norms,
            flat_normed,
            flat_norm,
            fc_out,
            fc_norm,
            descriptor,
            degenerate: deg1 || deg2,
        })
    }

    /// Backward from a gradient on the global descriptor. Returns the
    /// gradient with respect to the input descriptor map X plus parameter
    /// gradients.
    pub fn backward(&self, cache: &GlobalCache<S>, grad_desc: &Array1<S>) -> (Array2<S>, Self) {
        let k = self.clusters();
        let c = self.assign_w.ncols();
        let n = cache.features.nrows();

        // final normalize -> FC -> flat normalize
        let g_fc = l2_normalize_vec_backward(&cache.descriptor, cache.fc_norm, grad_desc);
        let grad_fc_w = outer(&g_fc, &cache.flat_normed);
        let grad_fc_b = g_fc.clone();
        let g_flat_normed = self.fc_w.t().dot(&g_fc);
        let g_flat = l2_normalize_vec_backward(&cache.flat_normed, cache.flat_norm, &g_flat_normed);
        // unflatten, then intra-normalization backward
        let g_vlad_n = Array2::from_shape_fn((k, c), |(i, j)| g_flat[i * c + j]);
        let (vlad_normed, _) = l2_normalize_rows(&cache.vlad);
        let g_vlad = l2_normalize_rows_backward(&vlad_normed, &cache.vlad_norms, &g_vlad_n);

        // residual sum backward
        let att = &cache.attention.weights;
        let assign = &cache.assign;
        // s[i,k] = gV[k] . (F_i - c_k)
        let mut s = cache.features.dot(&g_vlad.t()); // N x K
        let center_dot = Array1::from_iter(
            g_vlad
                .rows()
                .into_iter()
                .zip(self.centers.rows())
                .map(|(g, cv)| g.iter().zip(cv.iter()).map(|(a, b)| *a * *b).sum::<S>()),
        );
        for mut row in s.rows_mut() {
            row.zip_mut_with(&center_dot, |v, &d| *v -= d);
        }
        let weighted = assign
            * &att
                .view()
                .insert_axis(Axis(1))
                .broadcast((n, k))
                .expect("broadcast");
        // dC_k = -(sum_i att_i a_ik) gV[k]
        let mass = weighted.sum_axis(Axis(0));
        let mut grad_centers = g_vlad.clone();
        for (kk, mut row) in grad_centers.rows_mut().into_iter().enumerate() {
            let m = mass[kk];
            row.mapv_inplace(|v| -(m * v));
        }
        // direct feature term: dF_i += sum_k att_i a_ik gV[k]
        let mut grad_features = weighted.dot(&g_vlad); // N x C
        // attention term: datt_i = sum_k a_ik s_ik
        let grad_att = Array1::from_iter(
            assign
                .rows()
                .into_iter()
                .zip(s.rows())
                .map(|(a, sv)| a.iter().zip(sv.iter()).map(|(x, y)| *x * *y).sum::<S>()),
        );
        // assignment softmax backward, row-wise, with dA[i,k] = att_i s_ik
        let mut grad_logits = Array2::zeros((n, k));
        for i in 0..n {
            let a_row = assign.row(i).to_owned();
            let da = s.row(i).mapv(|v| v * att[i]);
            grad_logits.row_mut(i).assign(&softmax_backward(&a_row, &da));
        }
        let grad_assign_w = grad_logits.t().dot(&cache.features);
        let grad_assign_b = grad_logits.sum_axis(Axis(0));
        grad_features += &grad_logits.dot(&self.assign_w);

        // attention predictor backward adds its own feature gradient
        let (g_feat_att, grad_attention) = self.attention.backward(&cache.attention, &grad_att);
        grad_features += &g_feat_att;

        // scatter back to the full point set if aggregation was subsampled
        let g_f2 = match &cache.kept {
            Some(idx) => {
                let mut full = Array2::zeros((cache.full_n, c));
                for (row, &i) in idx.iter().enumerate() {
                    let mut dst = full.row_mut(i);
                    dst += &grad_features.row(row);
                }
                full
            }
            None => grad_features,
        };
        let (g_f1, grad_proj2) = self.proj2.backward(&cache.proj2, &g_f2);
        let (g_x, grad_proj1) = self.proj1.backward(&cache.proj1, &g_f1);

        (
            g_x,
            Self {
                proj1: grad_proj1,
                proj2: grad_proj2,
                attention: grad_attention,
                assign_w: grad_assign_w,
                assign_b: grad_assign_b,
                centers: grad_centers,
                fc_w: grad_fc_w,
                fc_b: grad_fc_b,
                subsample_to: self.subsample_to,
                subsample_seed: self.subsample_seed,
            },
        )
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            proj1: self.proj1.zeros_like(),
            proj2: self.proj2.zeros_like(),
            attention: self.attention.zeros_like(),
            assign_w: Array2::zeros(self.assign_w.raw_dim()),
            assign_b: Array1::zeros(self.assign_b.raw_dim()),
            centers: Array2::zeros(self.centers.raw_dim()),
            fc_w: Array2::zeros(self.fc_w.raw_dim()),
            fc_b: Array1::zeros(self.fc_b.raw_dim()),
            subsample_to: self.subsample_to,
            subsample_seed: self.subsample_seed,
        }
    }
}

/// Intermediate results of the aggregation pipeline.
pub struct VladOut<S: Real> {
    pub assign: Array2<S>,
    pub vlad: Array2<S>,
    pub vlad_norms: Array1<S>,
    pub flat_normed: Array1<S>,
    pub flat_norm: S,
    pub fc_out: Array1<S>,
    pub fc_norm: S,
    pub descriptor: Array1<S>,
    pub degenerate: bool,
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

/// Column-wise max or mean pooling followed by the same FC compression and
/// normalization as NetVLAD; the aggregation baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Pooling baseline: collapse the feature map into one vector per column.
pub fn pool_aggregate<S: Real>(features: &Array2<S>, mode: PoolMode) -> Result<Array1<S>> {
    if features.nrows() == 0 {
        return Err(Error::invalid("pooling requires at least one point"));
    }
    Ok(match mode {
        PoolMode::Max => Array1::from_iter(
            features
                .columns()
                .into_iter()
                .map(|c| c.iter().cloned().fold(S::neg_infinity(), S::max)),
        ),
        PoolMode::Avg => features.mean_axis(Axis(0)).expect("non-empty"),
    })
}

impl<S: Real> ParamSet<S> for GlobalHead<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, S>)) {
        self.proj1.visit(&join(prefix, "proj1"), f);
        self.proj2.visit(&join(prefix, "proj2"), f);
        self.attention.visit(&join(prefix, "attention"), f);
        f(&join(prefix, "assign_w"), self.assign_w.view().into_dyn());
        f(&join(prefix, "assign_b"), self.assign_b.view().into_dyn());
        f(&join(prefix, "centers"), self.centers.view().into_dyn());
        f(&join(prefix, "fc_w"), self.fc_w.view().into_dyn());
        f(&join(prefix, "fc_b"), self.fc_b.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, S>)) {
        self.proj1.visit_mut(&join(prefix, "proj1"), f);
        self.proj2.visit_mut(&join(prefix, "proj2"), f);
        self.attention.visit_mut(&join(prefix, "attention"), f);
        f(&join(prefix, "assign_w"), self.assign_w.view_mut().into_dyn());
        f(&join(prefix, "assign_b"), self.assign_b.view_mut().into_dyn());
        f(&join(prefix, "centers"), self.centers.view_mut().into_dyn());
        f(&join(prefix, "fc_w"), self.fc_w.view_mut().into_dyn());
        f(&join(prefix, "fc_b"), self.fc_b.view_mut().into_dyn());
    }
}

/// Explicit residual-sum evaluation of the VLAD core; the test oracle.
pub fn vlad_brute_force<S: Real>(
    head: &GlobalHead<S>,
    features: &Array2<S>,
    attention: &Array1<S>,
) -> Array1<S> {
    let k = head.clusters();
    let c = head.assign_w.ncols();
    let n = features.nrows();
    let mut vlad = Array2::<S>::zeros((k, c));
    for i in 0..n {
        // soft assignment by explicit exponentials
        let mut logits = vec![S::zero(); k];
        for (kk, l) in logits.iter_mut().enumerate() {
            *l = head.assign_b[kk];
            for j in 0..c {
                *l += head.assign_w[[kk, j]] * features[[i, j]];
            }
        }
        let maxv = logits.iter().cloned().fold(S::neg_infinity(), S::max);
        let exps: Vec<S> = logits.iter().map(|&l| (l - maxv).exp()).collect();
        let z: S = exps.iter().cloned().sum();
        for kk in 0..k {
            let a = exps[kk] / z;
            for j in 0..c {
                vlad[[kk, j]] += attention[i] * a * (features[[i, j]] - head.centers[[kk, j]]);
            }
        }
    }
    // intra-normalize, flatten, normalize, FC, normalize
    let (vn, _) = l2_normalize_rows(&vlad);
    let flat = Array1::from_iter(vn.iter().cloned());
    let (f1, _, _) = l2_normalize_vec(&flat);
    let fc = head.fc_w.dot(&f1) + &head.fc_b;
    let (out, _, _) = l2_normalize_vec(&fc);
    out
}
