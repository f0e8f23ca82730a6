//! Finite-difference verification of every analytic backward pass: each
//! layer, the full encoder, the global head and all four losses. Runs in
//! f64 with central differences and reports the worst relative error per
//! named block.

use crate::cloud::{CorrespondenceMatrix, PointCloud};
use crate::error::Result;
use crate::kdtree::NeighborIndex;
use crate::losses::{
    desc_loss, det_loss, feature_distance_matrix, feature_distance_matrix_backward,
    lazy_quadruplet_loss, weak_triplet_loss, LossConfig,
};
use crate::net::flexconv::dilated_neighborhoods;
use crate::net::layers::gauss;
use crate::net::params::{collect, ParamSet};
use crate::net::{
    Activation, Attention, Conv1x1, Detector, Encoder, EncoderSpec, FlexConvLayer, GlobalHead,
    GlobalSpec, SeBlock,
};
use crate::synth::synth_scene;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest acceptable relative error between analytic and numeric gradients.
pub const TOLERANCE: f64 = 1e-4;

/// Worst-case gradient error for one named block.
#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_err: f64,
    pub scalars: usize,
}

impl BlockReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

fn perturb<P: ParamSet<f64>>(set: &mut P, target: &str, idx: usize, delta: f64) {
    set.visit_mut("", &mut |name, mut view| {
        if name == target {
            *view.iter_mut().nth(idx).expect("index in range") += delta;
        }
    });
}

/// Compares analytic parameter gradients against central differences of
/// `loss` over every scalar in `params`.
fn check_params<P: ParamSet<f64> + Clone>(
    params: &P,
    analytic: &P,
    loss: &mut dyn FnMut(&P) -> f64,
) -> (f64, usize) {
    let grads = collect(analytic);
    let mut max_err = 0.0_f64;
    let mut scalars = 0usize;
    for (name, g) in &grads {
        let flat: Vec<f64> = g.iter().copied().collect();
        for (idx, &ana) in flat.iter().enumerate() {
            let mut plus = params.clone();
            perturb(&mut plus, name, idx, STEP);
            let mut minus = params.clone();
            perturb(&mut minus, name, idx, -STEP);
            let num = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
            max_err = max_err.max(rel_err(ana, num));
            scalars += 1;
        }
    }
    (max_err, scalars)
}

/// Same check for the gradient with respect to a dense input array.
fn check_input(
    input: &Array2<f64>,
    analytic: &Array2<f64>,
    loss: &mut dyn FnMut(&Array2<f64>) -> f64,
) -> (f64, usize) {
    let mut max_err = 0.0_f64;
    for ((i, j), &ana) in analytic.indexed_iter() {
        let mut plus = input.clone();
        plus[[i, j]] += STEP;
        let mut minus = input.clone();
        minus[[i, j]] -= STEP;
        let num = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
        max_err = max_err.max(rel_err(ana, num));
    }
    (max_err, analytic.len())
}

fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| gauss(rng))
}

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| gauss(rng))
}

fn small_cloud(n: usize, seed: u64) -> PointCloud {
    let scene = synth_scene(n, seed).expect("synthetic cloud");
    let (centered, _) = crate::cloud::center_cloud(&scene);
    centered
}

fn check_flexconv(rng: &mut ChaCha8Rng) -> Vec<BlockReport> {
    let cloud = small_cloud(24, 1);
    let layer: FlexConvLayer<f64> = FlexConvLayer::init(3, 5, 4, 2, Activation::Relu, rng);
    let index = NeighborIndex::build(&cloud);
    let nbrs = dilated_neighborhoods(&index, &cloud.points, layer.k, layer.dilation).unwrap();
    let feats = rand_mat(cloud.len(), 3, rng);
    let w = rand_mat(cloud.len(), 5, rng);
    let (_, cache) = layer.forward(&cloud.points, &feats, &nbrs).unwrap();
    let (grad_in, grad_layer) = layer.backward(&cache, &w);

    let (pe, ps) = check_params(&layer, &grad_layer, &mut |l: &FlexConvLayer<f64>| {
        let (out, _) = l.forward(&cloud.points, &feats, &nbrs).unwrap();
        (&out * &w).sum()
    });
    let (ie, is) = check_input(&feats, &grad_in, &mut |f| {
        let (out, _) = layer.forward(&cloud.points, f, &nbrs).unwrap();
        (&out * &w).sum()
    });
    vec![
        BlockReport { name: "flexconv/params".into(), max_rel_err: pe, scalars: ps },
        BlockReport { name: "flexconv/input".into(), max_rel_err: ie, scalars: is },
    ]
}

fn check_conv1x1(rng: &mut ChaCha8Rng) -> Vec<BlockReport> {
    let mut out = Vec::new();
    for (act, label) in [
        (Activation::Relu, "relu"),
        (Activation::Sigmoid, "sigmoid"),
        (Activation::None, "linear"),
    ] {
        let layer: Conv1x1<f64> = Conv1x1::init(4, 3, act, rng);
        let input = rand_mat(7, 4, rng);
        let w = rand_mat(7, 3, rng);
        let (_, cache) = layer.forward(&input).unwrap();
        let (grad_in, grad_layer) = layer.backward(&cache, &w);
        let (pe, ps) = check_params(&layer, &grad_layer, &mut |l: &Conv1x1<f64>| {
            (&l.forward(&input).unwrap().0 * &w).sum()
        });
        let (ie, is) = check_input(&input, &grad_in, &mut |x| {
            (&layer.forward(x).unwrap().0 * &w).sum()
        });
        out.push(BlockReport {
            name: format!("conv1x1-{label}/params"),
            max_rel_err: pe,
            scalars: ps,
        });
        out.push(BlockReport {
            name: format!("conv1x1-{label}/input"),
            max_rel_err: ie,
            scalars: is,
        });
    }
    out
}

fn check_se(rng: &mut ChaCha8Rng) -> Vec<BlockReport> {
    let block: SeBlock<f64> = SeBlock::init(6, 2, rng).unwrap();
    let input = rand_mat(9, 6, rng);
    let w = rand_mat(9, 6, rng);
    let (_, cache) = block.forward(&input).unwrap();
    let (grad_in, grad_block) = block.backward(&cache, &w);
    let (pe, ps) = check_params(&block, &grad_block, &mut |b: &SeBlock<f64>| {
        (&b.forward(&input).unwrap().0 * &w).sum()
    });
    let (ie, is) = check_input(&input, &grad_in, &mut |x| {
        (&block.forward(x).unwrap().0 * &w).sum()
    });
    vec![
        BlockReport { name: "se/params".into(), max_rel_err: pe, scalars: ps },
        BlockReport { name: "se/input".into(), max_rel_err: ie, scalars: is },
    ]
}

fn check_attention(rng: &mut ChaCha8Rng) -> Vec<BlockReport> {
    let att: Attention<f64> = Attention::init(5, &[4], rng);
    let input = rand_mat(8, 5, rng);
    let w = rand_vec(8, rng);
    let cache = att.forward(&input).unwrap();
    let (grad_in, grad_att) = att.backward(&cache, &w);
    let (pe, ps) = check_params(&att, &grad_att, &mut |a: &Attention<f64>| {
        a.forward(&input).unwrap().weights.dot(&w)
    });
    let (ie, is) = check_input(&input, &grad_in, &mut |x| {
        att.forward(x).unwrap().weights.dot(&w)
    });
    vec![
        BlockReport { name: "attention/params".into(), max_rel_err: pe, scalars: ps },
        BlockReport { name: "attention/input".into(), max_rel_err: ie, scalars: is },
    ]
}

fn check_detector(rng: &mut ChaCha8Rng) -> Vec<BlockReport> {
    let det: Detector<f64> = Detector::init(6, &[4], rng);
    let input = rand_mat(8, 6, rng);
    let w = rand_mat(8, 1, rng);
    let cache = det.forward(&input).unwrap();
    let (grad_in, grad_det) = det.backward(&cache, &w);
    let (pe, ps) = check_params(&det, &grad_det, &mut |d: &Detector<f64>| {
        (&d.forward(&input).unwrap().saliency * &w).sum()
    });
    let (ie, is) = check_input(&input, &grad_in, &mut |x| {
        (&det.forward(x).unwrap().saliency * &w).sum()
    });
    vec![
        BlockReport { name: "detector/params".into(), max_rel_err: pe, scalars: ps },
        BlockReport { name: "detector/input".into(), max_rel_err: ie, scalars: is },
    ]
}

fn check_encoder(rng: &mut ChaCha8Rng) -> Vec<BlockReport> {
    let spec = EncoderSpec {
        conv_width: 4,
        flex1_width: 4,
        flex2_width: 6,
        k: 3,
        se_reduction: 2,
        subsample_divisor: 2,
        subsample_seed: 17,
    };
    let enc: Encoder<f64> = Encoder::init(&spec, rng).unwrap();
    let cloud = small_cloud(enc.min_points().max(16), 2);
    let cache = enc.forward(&cloud).unwrap();
    let wx = rand_mat(cache.x.nrows(), cache.x.ncols(), rng);
    let wpsi = rand_mat(cache.psi.nrows(), cache.psi.ncols(), rng);
    let grads = enc.backward(&cache, Some(&wx), Some(&wpsi));
    let (pe, ps) = check_params(&enc, &grads, &mut |e: &Encoder<f64>| {
        let c = e.forward(&cloud).unwrap();
        (&c.x * &wx).sum() + (&c.psi * &wpsi).sum()
    });
    vec![BlockReport { name: "encoder/params".into(), max_rel_err: pe, scalars: ps }]
}

fn check_global(rng: &mut ChaCha8Rng) -> Vec<BlockReport> {
    let spec = GlobalSpec {
        proj1_width: 6,
        proj2_width: 6,
        proj_k: 3,
        clusters: 3,
        output_dim: 5,
        attention_hidden: vec![4],
        subsample_to: None,
        subsample_seed: 23,
    };
    let head: GlobalHead<f64> = GlobalHead::init(4, &spec, rng);
    let cloud = small_cloud(12, 3);
    let x = rand_mat(cloud.len(), 4, rng);
    let w = rand_vec(spec.output_dim, rng);
    let cache = head.forward(&cloud, &x).unwrap();
    let (grad_x, grad_head) = head.backward(&cache, &w);
    let (pe, ps) = check_params(&head, &grad_head, &mut |h: &GlobalHead<f64>| {
        h.forward(&cloud, &x).unwrap().descriptor.dot(&w)
    });
    let (ie, is) = check_input(&x, &grad_x, &mut |xi| {
        head.forward(&cloud, xi).unwrap().descriptor.dot(&w)
    });
    vec![
        BlockReport { name: "global/params".into(), max_rel_err: pe, scalars: ps },
        BlockReport { name: "global/input".into(), max_rel_err: ie, scalars: is },
    ]
}

fn check_desc_loss(rng: &mut ChaCha8Rng) -> BlockReport {
    let cfg = LossConfig::<f64>::default();
    let x = rand_mat(5, 4, rng);
    let xp = rand_mat(6, 4, rng);
    // an irregular correspondence pattern, at least one positive per row
    let flags: Vec<bool> = (0..30).map(|i| i % 7 == 0 || i % 6 == i / 6).collect();
    let m = CorrespondenceMatrix::from_flags(5, 6, 0.5, flags).unwrap();
    let loss = |x: &Array2<f64>, xp: &Array2<f64>| {
        let d = feature_distance_matrix(x, xp).unwrap();
        desc_loss(&d, &m, &cfg).unwrap().0
    };
    let d = feature_distance_matrix(&x, &xp).unwrap();
    let (_, grad_d) = desc_loss(&d, &m, &cfg).unwrap();
    let (gx, gxp) = feature_distance_matrix_backward(&x, &xp, &d, &grad_d);
    let (e1, s1) = check_input(&x, &gx, &mut |xi| loss(xi, &xp));
    let (e2, s2) = check_input(&xp, &gxp, &mut |xpi| loss(&x, xpi));
    BlockReport {
        name: "loss-description".into(),
        max_rel_err: e1.max(e2),
        scalars: s1 + s2,
    }
}

fn check_det_loss(rng: &mut ChaCha8Rng) -> BlockReport {
    let cfg = LossConfig::<f64>::default();
    let n = 9;
    let s = Array2::from_shape_fn((n, 1), |_| 0.2 + 0.6 * gauss(rng).tanh().abs());
    let asr = Array1::from_shape_fn(n, |i| (i as f64) / (n as f64));
    let grad = crate::losses::det_loss_pointwise_grad(&asr, &cfg)
        .insert_axis(ndarray::Axis(1))
        / n as f64;
    let (e, sc) = check_input(&s, &grad, &mut |si| {
        let sv = Array1::from_iter(si.column(0).iter().copied());
        det_loss(&sv, &asr, &cfg).unwrap()
    });
    BlockReport { name: "loss-detector".into(), max_rel_err: e, scalars: sc }
}

fn check_quadruplet(rng: &mut ChaCha8Rng) -> BlockReport {
    let cfg = LossConfig::<f64>::default();
    let g = 5;
    let anchor = rand_vec(g, rng);
    let positives = rand_mat(2, g, rng);
    let negatives = rand_mat(4, g, rng);
    let negstar = rand_vec(g, rng);
    let (_, grads) =
        lazy_quadruplet_loss(&anchor, &positives, &negatives, &negstar, &cfg).unwrap();
    let loss_of = |a: &Array1<f64>, p: &Array2<f64>, n: &Array2<f64>, s: &Array1<f64>| {
        lazy_quadruplet_loss(a, p, n, s, &cfg).unwrap().0
    };
    let arow = |v: &Array1<f64>| v.clone().insert_axis(ndarray::Axis(0));
    let (e1, s1) = check_input(&arow(&anchor), &arow(&grads.anchor), &mut |m| {
        loss_of(&m.row(0).to_owned(), &positives, &negatives, &negstar)
    });
    let (e2, s2) = check_input(&positives, &grads.positives, &mut |m| {
        loss_of(&anchor, m, &negatives, &negstar)
    });
    let (e3, s3) = check_input(&negatives, &grads.negatives, &mut |m| {
        loss_of(&anchor, &positives, m, &negstar)
    });
    let (e4, s4) = check_input(&arow(&negstar), &arow(&grads.negstar), &mut |m| {
        loss_of(&anchor, &positives, &negatives, &m.row(0).to_owned())
    });
    BlockReport {
        name: "loss-quadruplet".into(),
        max_rel_err: e1.max(e2).max(e3).max(e4),
        scalars: s1 + s2 + s3 + s4,
    }
}

fn check_weak_triplet(rng: &mut ChaCha8Rng) -> BlockReport {
    let g = 4;
    let gamma = 0.2;
    let anchors = rand_mat(3, g, rng);
    let positives = rand_mat(2, g, rng);
    let negatives = rand_mat(3, g, rng);
    let (_, grads) = weak_triplet_loss(&anchors, &positives, &negatives, gamma).unwrap();
    let loss_of = |a: &Array2<f64>, p: &Array2<f64>, n: &Array2<f64>| {
        weak_triplet_loss(a, p, n, gamma).unwrap().0
    };
    let (e1, s1) = check_input(&anchors, &grads.anchors, &mut |m| {
        loss_of(m, &positives, &negatives)
    });
    let (e2, s2) = check_input(&positives, &grads.positives, &mut |m| {
        loss_of(&anchors, m, &negatives)
    });
    let (e3, s3) = check_input(&negatives, &grads.negatives, &mut |m| {
        loss_of(&anchors, &positives, m)
    });
    BlockReport {
        name: "loss-weak-triplet".into(),
        max_rel_err: e1.max(e2).max(e3),
        scalars: s1 + s2 + s3,
    }
}

/// Runs every gradient check and returns one report per block.
pub fn run_all(seed: u64) -> Result<Vec<BlockReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    reports.extend(check_flexconv(&mut rng));
    reports.extend(check_conv1x1(&mut rng));
    reports.extend(check_se(&mut rng));
    reports.extend(check_attention(&mut rng));
    reports.extend(check_detector(&mut rng));
    reports.extend(check_encoder(&mut rng));
    reports.extend(check_global(&mut rng));
    reports.push(check_desc_loss(&mut rng));
    reports.push(check_det_loss(&mut rng));
    reports.push(check_quadruplet(&mut rng));
    reports.push(check_weak_triplet(&mut rng));
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_blocks_within_tolerance() {
        let reports = run_all(9).unwrap();
        assert!(reports.len() >= 15);
        for r in &reports {
            assert!(
                r.pass(),
                "{}: max relative error {:.3e} over {} scalars",
                r.name,
                r.max_rel_err,
                r.scalars
            );
        }
    }

    #[test]
    fn reports_are_deterministic() {
        let a = run_all(4).unwrap();
        let b = run_all(4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.max_rel_err.to_bits(), y.max_rel_err.to_bits());
        }
    }
}
