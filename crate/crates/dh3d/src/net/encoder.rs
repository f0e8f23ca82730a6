//! Two-resolution local feature encoder. Each branch runs a 1x1 convolution,
//! two FlexConv layers and an SE block on raw xyz input; the coarse branch
//! works on a seeded uniform subsample and its outputs are propagated back to
//! all points by nearest-subsample-point assignment. The branch outputs are
//! added into the feature map Psi, whose row-normalized form X is the local
//! descriptor map.

use crate::cloud::{random_sample, PointCloud};
use crate::error::{Error, Result};
use crate::kdtree::NeighborIndex;
use crate::net::flexconv::{dilated_neighborhoods, FlexConvCache, FlexConvLayer};
use crate::net::layers::{
    l2_normalize_rows, l2_normalize_rows_backward, Activation, Conv1x1, Conv1x1Cache,
};
use crate::net::params::{join, ParamSet};
use crate::net::se::{SeBlock, SeCache};
use crate::scalar::Real;
use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;

/// One resolution branch: conv1x1 -> FlexConv -> FlexConv -> SE.
#[derive(Debug, Clone)]
pub struct Branch<S: Real> {
    pub conv: Conv1x1<S>,
    pub flex1: FlexConvLayer<S>,
    pub flex2: FlexConvLayer<S>,
    pub se: SeBlock<S>,
}

pub struct BranchCache<S: Real> {
    conv: Conv1x1Cache<S>,
    flex1: FlexConvCache<S>,
    flex2: FlexConvCache<S>,
    se: SeCache<S>,
}

impl<S: Real> Branch<S> {
    fn forward(
        &self,
        points: &[[f64; 3]],
        feats: &Array2<S>,
        index: &NeighborIndex,
    ) -> Result<(Array2<S>, BranchCache<S>)> {
        let nbrs1 = dilated_neighborhoods(index, points, self.flex1.k, self.flex1.dilation)?;
        let nbrs2 = dilated_neighborhoods(index, points, self.flex2.k, self.flex2.dilation)?;
        let (h0, conv) = self.conv.forward(feats)?;
        let (h1, flex1) = self.flex1.forward(points, &h0, &nbrs1)?;
        let (h2, flex2) = self.flex2.forward(points, &h1, &nbrs2)?;
        let (out, se) = self.se.forward(&h2)?;
        Ok((
            out,
            BranchCache {
                conv,
                flex1,
                flex2,
                se,
            },
        ))
    }

    fn backward(&self, cache: &BranchCache<S>, grad_out: &Array2<S>) -> Self {
        let (g2, gse) = self.se.backward(&cache.se, grad_out);
        let (g1, gflex2) = self.flex2.backward(&cache.flex2, &g2);
        let (g0, gflex1) = self.flex1.backward(&cache.flex1, &g1);
        let (_, gconv) = self.conv.backward(&cache.conv, &g0);
        Self {
            conv: gconv,
            flex1: gflex1,
            flex2: gflex2,
            se: gse,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            conv: self.conv.zeros_like(),
            flex1: self.flex1.zeros_like(),
            flex2: self.flex2.zeros_like(),
            se: self.se.zeros_like(),
        }
    }
}

impl<S: Real> ParamSet<S> for Branch<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, S>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.flex1.visit(&join(prefix, "flex1"), f);
        self.flex2.visit(&join(prefix, "flex2"), f);
        self.se.visit(&join(prefix, "se"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, S>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.flex1.visit_mut(&join(prefix, "flex1"), f);
        self.flex2.visit_mut(&join(prefix, "flex2"), f);
        self.se.visit_mut(&join(prefix, "se"), f);
    }
}

/// Architecture knobs of the encoder (see config file for defaults).
#[derive(Debug, Clone)]
pub struct EncoderSpec {
    pub conv_width: usize,
    pub flex1_width: usize,
    pub flex2_width: usize,
    pub k: usize,
    pub se_reduction: usize,
    pub subsample_divisor: usize,
    pub subsample_seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            conv_width: 32,
            flex1_width: 64,
            flex2_width: 128,
            k: 9,
            se_reduction: 4,
            subsample_divisor: 4,
            subsample_seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder<S: Real> {
    pub branch1: Branch<S>,
    pub branch2: Branch<S>,
    pub subsample_divisor: usize,
    pub subsample_seed: u64,
}

pub struct EncoderCache<S: Real> {
    branch1: BranchCache<S>,
    branch2: BranchCache<S>,
    /// for each full-resolution point, the subsample row it copies from
    assignment: Vec<usize>,
    sub_count: usize,
    pub psi: Array2<S>,
    pub x: Array2<S>,
    norms: Array1<S>,
}

impl<S: Real> Encoder<S> {
    pub fn init(spec: &EncoderSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let make_branch = |rng: &mut ChaCha8Rng| -> Result<Branch<S>> {
            Ok(Branch {
                conv: Conv1x1::init(3, spec.conv_width, Activation::Relu, rng),
                flex1: FlexConvLayer::init(
                    spec.conv_width,
                    spec.flex1_width,
                    spec.k,
                    1,
                    Activation::Relu,
                    rng,
                ),
                flex2: FlexConvLayer::init(
                    spec.flex1_width,
                    spec.flex2_width,
                    spec.k,
                    2,
                    Activation::Relu,
                    rng,
                ),
                se: SeBlock::init(spec.flex2_width, spec.se_reduction, rng)?,
            })
        };
        Ok(Self {
            branch1: make_branch(rng)?,
            branch2: make_branch(rng)?,
            subsample_divisor: spec.subsample_divisor,
            subsample_seed: spec.subsample_seed,
        })
    }

    /// Local descriptor dimension D.
    pub fn output_dim(&self) -> usize {
        self.branch1.se.channels()
    }

    /// Smallest cloud the encoder can process: the coarse branch must still
    /// hold a full dilated neighborhood after subsampling.
    pub fn min_points(&self) -> usize {
        let kd = (self.branch1.flex2.k * self.branch1.flex2.dilation)
            .max(self.branch1.flex1.k * self.branch1.flex1.dilation);
        kd * self.subsample_divisor
    }

    /// Forward pass. The cloud must be centered (centroid within 1e-6).
    /// Returns the cache holding Psi (pre-normalization) and X (unit rows).
    pub fn forward(&self, cloud: &PointCloud) -> Result<EncoderCache<S>> {
        let c = cloud.centroid();
        if c.iter().any(|v| v.abs() > 1e-6) {
            return Err(Error::invalid(format!(
                "encoder input must be centered, centroid norm {:.3e}",
                (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
            )));
        }
        let n = cloud.len();
        let feats = coords_as::<S>(&cloud.points);
        let index = NeighborIndex::build(cloud);
        let (out1, branch1) = self.branch1.forward(&cloud.points, &feats, &index)?;

        // coarse branch on a seeded uniform subsample; ranks are drawn from a
        // canonical coordinate ordering so the result is permutation-invariant
        let sub_n = (n / self.subsample_divisor).max(self.min_points() / self.subsample_divisor);
        let sub_n = sub_n.min(n).max(1);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            cloud.points[a]
                .partial_cmp(&cloud.points[b])
                .expect("finite coordinates")
        });
        let (ranks_cloud, _) = random_sample(
            &PointCloud {
                points: order.iter().map(|&i| cloud.points[i]).collect(),
            },
            sub_n,
            self.subsample_seed,
        )?;
        let sub_cloud = ranks_cloud;
        let sub_feats = coords_as::<S>(&sub_cloud.points);
        let sub_index = NeighborIndex::build(&sub_cloud);
        let (out2_sub, branch2) = self.branch2.forward(&sub_cloud.points, &sub_feats, &sub_index)?;

        // propagate coarse features back by nearest-subsample-point copy
        let mut assignment = Vec::with_capacity(n);
        for p in &cloud.points {
            assignment.push(sub_index.knn(p, 1)?[0].0);
        }
        let d = out1.ncols();
        let mut psi = out1;
        for (l, &m) in assignment.iter().enumerate() {
            for c in 0..d {
                psi[[l, c]] += out2_sub[[m, c]];
            }
        }
        let (x, norms) = l2_normalize_rows(&psi);
        Ok(EncoderCache {
            branch1,
            branch2,
            assignment,
            sub_count: sub_n,
            psi,
            x,
            norms,
        })
    }

    /// Backward pass from gradients on X and/or Psi (either may be zero).
    pub fn backward(
        &self,
        cache: &EncoderCache<S>,
        grad_x: Option<&Array2<S>>,
        grad_psi: Option<&Array2<S>>,
    ) -> Self {
        let mut g_psi: Array2<S> = Array2::zeros(cache.psi.raw_dim());
        if let Some(gx) = grad_x {
            g_psi += &l2_normalize_rows_backward(&cache.x, &cache.norms, gx);
        }
        if let Some(gp) = grad_psi {
            g_psi += gp;
        }
        let g1 = self.branch1.backward(&cache.branch1, &g_psi);
        let d = g_psi.ncols();
        let mut g_sub: Array2<S> = Array2::zeros((cache.sub_count, d));
        for (l, &m) in cache.assignment.iter().enumerate() {
            for c in 0..d {
                g_sub[[m, c]] += g_psi[[l, c]];
            }
        }
        let g2 = self.branch2.backward(&cache.branch2, &g_sub);
        Self {
            branch1: g1,
            branch2: g2,
            subsample_divisor: self.subsample_divisor,
            subsample_seed: self.subsample_seed,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            branch1: self.branch1.zeros_like(),
            branch2: self.branch2.zeros_like(),
            subsample_divisor: self.subsample_divisor,
            subsample_seed: self.subsample_seed,
        }
    }
}

impl<S: Real> ParamSet<S> for Encoder<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, S>)) {
        self.branch1.visit(&join(prefix, "branch1"), f);
        self.branch2.visit(&join(prefix, "branch2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, S>)) {
        self.branch1.visit_mut(&join(prefix, "branch1"), f);
        self.branch2.visit_mut(&join(prefix, "branch2"), f);
    }
}

pub(crate) fn coords_as<S: Real>(points: &[[f64; 3]]) -> Array2<S> {
    Array2::from_shape_fn((points.len(), 3), |(i, j)| S::from_f64_lossy(points[i][j]))
}
