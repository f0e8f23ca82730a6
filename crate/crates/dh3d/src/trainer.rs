//! Two-phase training. Phase 1 trains the encoder and detector on
//! synthetic local pairs with the combined description + detector loss.
//! Phase 2 freezes everything but the global head and trains it with the
//! lazy quadruplet loss over planted scene positions.

use crate::cloud::{center_cloud, gt_correspondences, synth_pair, PointCloud};
use crate::config::TrainingConfig;
use crate::error::{Error, Result};
use crate::losses::{
    avg_success_rate, combined_local_loss, desc_loss, det_loss, det_loss_pointwise_grad,
    feature_distance_matrix, feature_distance_matrix_backward, lazy_quadruplet_loss, LossConfig,
};
use crate::net::params::accumulate;
use crate::net::{GlobalCache, ModelParams};
use crate::optim::{lr_schedule_global, lr_schedule_local, Adam};
use crate::scalar::Real;
use crate::synth::SceneRecord;
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

/// Positives for the global phase must lie within this many meters.
pub const POSITIVE_DISTANCE: f64 = 10.0;
/// Negatives for the global phase must lie beyond this many meters.
pub const NEGATIVE_DISTANCE: f64 = 50.0;
/// Global batch composition: 1 anchor, 2 positives, 8 negatives, 1 extra.
pub const GLOBAL_POSITIVES: usize = 2;
pub const GLOBAL_NEGATIVES: usize = 8;

/// One optimizer step's diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

fn det_grad_rows<S: Real>(
    rows: &[usize],
    asr: &Array1<S>,
    cfg: &LossConfig<S>,
    n_total: usize,
    scale: S,
) -> Array2<S> {
    let mut grad = Array2::zeros((n_total, 1));
    let point_grads = det_loss_pointwise_grad(asr, cfg);
    let inv = scale / S::from_usize_lossy(rows.len());
    for (r, &row) in rows.iter().enumerate() {
        grad[[row, 0]] = point_grads[r] * inv;
    }
    grad
}

struct PairLoss<S: Real> {
    loss: f64,
    grads: ModelParams<S>,
}

/// Runs one pair of clouds through encoder + detector and produces the
/// combined local loss plus parameter gradients. Returns `None` when the
/// batch is degenerate (no usable anchors).
fn local_pair_pass<S: Real>(
    model: &ModelParams<S>,
    base: &PointCloud,
    tcfg: &TrainingConfig,
    lcfg: &LossConfig<S>,
    rng: &mut ChaCha8Rng,
) -> Result<Option<PairLoss<S>>> {
    let (cloud1, _) = center_cloud(base);
    let (pair, t) = synth_pair(&cloud1, tcfg.max_yaw_deg, tcfg.sigma_noise, rng.gen())?;
    let m = gt_correspondences(&cloud1, &pair, &t.inverse(), tcfg.tau)?;
    let (cloud2, _) = center_cloud(&pair);

    // anchors must have at least one correspondent
    let valid: Vec<usize> = (0..m.rows)
        .filter(|&i| !m.positives_in_row(i).is_empty())
        .collect();
    if valid.is_empty() {
        return Ok(None);
    }
    let n_anchor = tcfg.anchors_per_pair.min(valid.len());
    let picked = rand::seq::index::sample(rng, valid.len(), n_anchor);
    let mut anchors: Vec<usize> = picked.iter().map(|r| valid[r]).collect();
    anchors.sort_unstable();

    // candidate columns: one positive per anchor, padded with distractors
    let mut cols: BTreeSet<usize> = anchors
        .iter()
        .map(|&i| m.positives_in_row(i)[0])
        .collect();
    let want = tcfg.anchors_per_pair.min(m.cols);
    let mut filler = rand::seq::index::sample(rng, m.cols, m.cols).into_iter();
    while cols.len() < want {
        let c = filler.next().expect("columns exhausted");
        cols.insert(c);
    }
    let cols: Vec<usize> = cols.into_iter().collect();

    let mut flags = Vec::with_capacity(anchors.len() * cols.len());
    for &i in &anchors {
        for &j in &cols {
            flags.push(m.get(i, j));
        }
    }
    let npos = flags.iter().filter(|&&b| b).count();
    if npos == 0 || npos == flags.len() {
        return Ok(None);
    }
    let m_sub = crate::cloud::CorrespondenceMatrix::from_flags(
        anchors.len(),
        cols.len(),
        m.tau,
        flags,
    )?;

    let enc1 = model.encoder.forward(&cloud1)?;
    let enc2 = model.encoder.forward(&cloud2)?;
    let x1 = enc1.x.select(Axis(0), &anchors);
    let x2 = enc2.x.select(Axis(0), &cols);
    let d = feature_distance_matrix(&x1, &x2)?;
    let (l_desc, g_d) = desc_loss(&d, &m_sub, lcfg)?;
    let (g_x1, g_x2) = feature_distance_matrix_backward(&x1, &x2, &d, &g_d);

    // scatter anchor/candidate gradients back to full descriptor maps
    let mut gx1_full = Array2::zeros(enc1.x.raw_dim());
    for (r, &i) in anchors.iter().enumerate() {
        gx1_full.row_mut(i).assign(&g_x1.row(r));
    }
    let mut gx2_full = Array2::zeros(enc2.x.raw_dim());
    for (r, &j) in cols.iter().enumerate() {
        gx2_full.row_mut(j).assign(&g_x2.row(r));
    }

    // detector loss in both directions, each from the anchor side's ranking
    let det1 = model.detector.forward(&enc1.psi)?;
    let det2 = model.detector.forward(&enc2.psi)?;
    let asr1 = Array1::from_iter(anchors.iter().enumerate().map(|(r, _)| {
        let row: Vec<S> = d.row(r).to_vec();
        let correct: Vec<bool> = (0..cols.len()).map(|j| m_sub.get(r, j)).collect();
        avg_success_rate(&row, &correct, lcfg.asr_k.min(row.len())).unwrap_or(S::zero())
    }));
    let asr2 = Array1::from_iter(cols.iter().enumerate().map(|(c, _)| {
        let col: Vec<S> = d.column(c).to_vec();
        let correct: Vec<bool> = (0..anchors.len()).map(|i| m_sub.get(i, c)).collect();
        avg_success_rate(&col, &correct, lcfg.asr_k.min(col.len())).unwrap_or(S::zero())
    }));
    let s1 = Array1::from_iter(anchors.iter().map(|&i| det1.saliency[[i, 0]]));
    let s2 = Array1::from_iter(cols.iter().map(|&j| det2.saliency[[j, 0]]));
    let l_det1 = det_loss(&s1, &asr1, lcfg)?;
    let l_det2 = det_loss(&s2, &asr2, lcfg)?;
    let half = S::from_f64_lossy(0.5);
    let l_det = (l_det1 + l_det2) * half;
    let loss = combined_local_loss(l_desc, l_det, lcfg.lambda);

    let gs1 = det_grad_rows(&anchors, &asr1, lcfg, enc1.psi.nrows(), lcfg.lambda * half);
    let gs2 = det_grad_rows(&cols, &asr2, lcfg, enc2.psi.nrows(), lcfg.lambda * half);
    let (gpsi1, gdet1) = model.detector.backward(&det1, &gs1);
    let (gpsi2, gdet2) = model.detector.backward(&det2, &gs2);

    let genc1 = model.encoder.backward(&enc1, Some(&gx1_full), Some(&gpsi1));
    let genc2 = model.encoder.backward(&enc2, Some(&gx2_full), Some(&gpsi2));

    let mut grads = model.zeros_like();
    accumulate(&mut grads.encoder, &genc1);
    accumulate(&mut grads.encoder, &genc2);
    accumulate(&mut grads.detector, &gdet1);
    accumulate(&mut grads.detector, &gdet2);
    Ok(Some(PairLoss {
        loss: loss.to_f64_lossy(),
        grads,
    }))
}

/// Phase 1: encoder + detector on synthetic pairs drawn from `dataset`.
pub fn train_local<S: Real>(
    model: &mut ModelParams<S>,
    dataset: &[PointCloud],
    tcfg: &TrainingConfig,
    lcfg: &LossConfig<S>,
) -> Result<Vec<TrainRecord>> {
    if dataset.is_empty() {
        return Err(Error::Config("phase-1 dataset is empty".to_string()));
    }
    lcfg.validate()?;
    let min_pts = model.encoder.min_points();
    for (i, c) in dataset.iter().enumerate() {
        if c.len() < min_pts {
            return Err(Error::Config(format!(
                "cloud {i} has {} points; the encoder needs at least {min_pts}",
                c.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut opt = Adam::new(S::from_f64_lossy(lr_schedule_local(0)));
    let mut history = Vec::with_capacity(tcfg.local_steps);
    for step in 0..tcfg.local_steps {
        let epoch = step / tcfg.steps_per_epoch;
        let lr = lr_schedule_local(epoch);
        opt.lr = S::from_f64_lossy(lr);
        let mut grads = model.zeros_like();
        let mut loss_sum = 0.0;
        let mut pairs = 0usize;
        for _ in 0..tcfg.pairs_per_batch {
            let idx = rng.gen_range(0..dataset.len());
            match local_pair_pass(model, &dataset[idx], tcfg, lcfg, &mut rng)? {
                Some(p) => {
                    loss_sum += p.loss;
                    accumulate(&mut grads, &p.grads);
                    pairs += 1;
                }
                None => {
                    eprintln!("warning: step {step}: degenerate pair skipped (cloud {idx})");
                }
            }
        }
        if pairs == 0 {
            eprintln!("warning: step {step}: whole batch degenerate, skipping update");
            continue;
        }
        crate::net::params::scale(&mut grads, S::from_f64_lossy(1.0 / pairs as f64));
        let loss = loss_sum / pairs as f64;
        if !loss.is_finite() {
            return Err(Error::numeric("loss", format!("non-finite at step {step}")));
        }
        opt.step_filtered(model, &grads, &|name| name.starts_with("global."))?;
        history.push(TrainRecord { step, lr, loss });
    }
    Ok(history)
}

fn planar_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Phase 2: global head on scenes with planted positions; the encoder and
/// detector stay bit-identical.
pub fn train_global<S: Real>(
    model: &mut ModelParams<S>,
    scenes: &[(PointCloud, SceneRecord)],
    tcfg: &TrainingConfig,
    lcfg: &LossConfig<S>,
) -> Result<Vec<TrainRecord>> {
    lcfg.validate()?;
    // validate that at least one full quadruplet exists
    let mut has_quadruplet = false;
    for (i, (_, ri)) in scenes.iter().enumerate() {
        let pos = scenes
            .iter()
            .enumerate()
            .filter(|(j, (_, r))| *j != i && planar_dist(r.position, ri.position) < POSITIVE_DISTANCE)
            .count();
        let neg = scenes
            .iter()
            .filter(|(_, r)| planar_dist(r.position, ri.position) > NEGATIVE_DISTANCE)
            .count();
        if pos >= 1 && neg >= 2 {
            has_quadruplet = true;
            break;
        }
    }
    if !has_quadruplet {
        return Err(Error::Config(
            "no scene admits a quadruplet under the 10 m / 50 m rules".to_string(),
        ));
    }

    // the encoder is frozen, so descriptor-map inputs are computed once
    let prepared: Vec<(PointCloud, Array2<S>)> = scenes
        .iter()
        .map(|(c, _)| {
            let (centered, _) = center_cloud(c);
            let enc = model.encoder.forward(&centered)?;
            Ok((centered, enc.x))
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(1));
    let mut opt = Adam::new(S::from_f64_lossy(lr_schedule_global(0, tcfg.global_decay)));
    let mut history = Vec::with_capacity(tcfg.global_steps);
    let frozen = |name: &str| !name.starts_with("global.");
    for step in 0..tcfg.global_steps {
        let epoch = step / tcfg.steps_per_epoch;
        opt.lr = S::from_f64_lossy(lr_schedule_global(epoch, tcfg.global_decay));

        // assemble the 1 / 2 / 8 / 1 batch
        let anchor = loop {
            let i = rng.gen_range(0..scenes.len());
            let pos_ok = scenes.iter().enumerate().any(|(j, (_, r))| {
                j != i && planar_dist(r.position, scenes[i].1.position) < POSITIVE_DISTANCE
            });
            let negs = scenes
                .iter()
                .filter(|(_, r)| planar_dist(r.position, scenes[i].1.position) > NEGATIVE_DISTANCE)
                .count();
            if pos_ok && negs >= 2 {
                break i;
            }
        };
        let apos = scenes[anchor].1.position;
        let mut pos_pool: Vec<usize> = (0..scenes.len())
            .filter(|&j| j != anchor && planar_dist(scenes[j].1.position, apos) < POSITIVE_DISTANCE)
            .collect();
        let mut neg_pool: Vec<usize> = (0..scenes.len())
            .filter(|&j| planar_dist(scenes[j].1.position, apos) > NEGATIVE_DISTANCE)
            .collect();
        shuffle(&mut pos_pool, &mut rng);
        shuffle(&mut neg_pool, &mut rng);
        pos_pool.truncate(GLOBAL_POSITIVES);
        let negstar = neg_pool.pop().expect("validated above");
        neg_pool.truncate(GLOBAL_NEGATIVES);

        let fwd = |i: usize| -> Result<GlobalCache<S>> {
            let (cloud, x) = &prepared[i];
            model.global.forward(cloud, x)
        };
        let c_anchor = fwd(anchor)?;
        let c_pos: Vec<GlobalCache<S>> = pos_pool.iter().map(|&i| fwd(i)).collect::<Result<_>>()?;
        let c_neg: Vec<GlobalCache<S>> = neg_pool.iter().map(|&i| fwd(i)).collect::<Result<_>>()?;
        let c_star = fwd(negstar)?;

        let stack = |cs: &[GlobalCache<S>]| {
            let g = cs[0].descriptor.len();
            Array2::from_shape_fn((cs.len(), g), |(i, j)| cs[i].descriptor[j])
        };
        let positives = stack(&c_pos);
        let negatives = stack(&c_neg);
        let (loss, qgrads) = lazy_quadruplet_loss(
            &c_anchor.descriptor,
            &positives,
            &negatives,
            &c_star.descriptor,
            lcfg,
        )?;
        let lossf = loss.to_f64_lossy();
        if !lossf.is_finite() {
            return Err(Error::numeric("loss", format!("non-finite at step {step}")));
        }

        let mut grads = model.zeros_like();
        let mut add = |cache: &GlobalCache<S>, g: &Array1<S>| {
            if g.iter().any(|v| *v != S::zero()) {
                let (_, gh) = model.global.backward(cache, g);
                accumulate(&mut grads.global, &gh);
            }
        };
        add(&c_anchor, &qgrads.anchor);
        for (c, g) in c_pos.iter().zip(qgrads.positives.rows()) {
            add(c, &g.to_owned());
        }
        for (c, g) in c_neg.iter().zip(qgrads.negatives.rows()) {
            add(c, &g.to_owned());
        }
        add(&c_star, &qgrads.negstar);

        opt.step_filtered(model, &grads, &frozen)?;
        history.push(TrainRecord {
            step,
            lr: opt.lr.to_f64_lossy(),
            loss: lossf,
        });
    }
    Ok(history)
}

/// Fisher-Yates with the trainer's RNG, for deterministic pool ordering.
fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// Order-independent digest of a parameter subset; used to verify the
/// freeze contract bitwise.
pub fn params_digest<S: Real>(set: &impl crate::net::params::ParamSet<S>, prefix: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    set.visit("", &mut |name, view| {
        if !name.starts_with(prefix) {
            return;
        }
        for b in name.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x1000_0000_01b3);
        }
        for v in view.iter() {
            let bits = v.to_f64_lossy().to_bits();
            h = (h ^ bits).wrapping_mul(0x1000_0000_01b3);
        }
    });
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;
    use crate::net::{EncoderSpec, GlobalSpec, ModelSpec};
    use crate::synth::{synth_dataset, synth_scene};

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            encoder: EncoderSpec {
                conv_width: 8,
                flex1_width: 8,
                flex2_width: 16,
                k: 4,
                se_reduction: 2,
                subsample_divisor: 4,
                subsample_seed: 17,
            },
            detector_hidden: vec![8],
            global: GlobalSpec {
                proj1_width: 16,
                proj2_width: 16,
                proj_k: 4,
                clusters: 4,
                output_dim: 16,
                attention_hidden: vec![8],
                subsample_to: None,
                subsample_seed: 23,
            },
        }
    }

    fn tiny_tcfg(local_steps: usize, global_steps: usize) -> TrainingConfig {
        TrainingConfig {
            seed: 11,
            local_steps,
            global_steps,
            pairs_per_batch: 2,
            anchors_per_pair: 48,
            max_yaw_deg: 45.0,
            sigma_noise: 0.02,
            tau: 0.5,
            steps_per_epoch: 20,
            ..PipelineConfig::default().training
        }
    }

    fn tiny_model(seed: u64) -> ModelParams<f32> {
        ModelParams::init(&tiny_spec(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn local_smoke_run_reduces_loss() {
        let clouds: Vec<PointCloud> = (0..2).map(|i| synth_scene(192, 50 + i).unwrap()).collect();
        let mut model = tiny_model(0);
        let tcfg = tiny_tcfg(50, 0);
        let lcfg = LossConfig::<f32>::default();
        let history = train_local(&mut model, &clouds, &tcfg, &lcfg).unwrap();
        assert_eq!(history.len(), 50);
        assert!(history.iter().all(|r| r.loss.is_finite()));
        let first = history[0].loss;
        let last = history.last().unwrap().loss;
        assert!(last < first, "loss went from {first} to {last}");
    }

    #[test]
    fn local_history_is_bit_identical_per_seed() {
        let clouds: Vec<PointCloud> = (0..2).map(|i| synth_scene(160, 60 + i).unwrap()).collect();
        let tcfg = tiny_tcfg(8, 0);
        let lcfg = LossConfig::<f32>::default();
        let mut m1 = tiny_model(1);
        let mut m2 = tiny_model(1);
        let h1 = train_local(&mut m1, &clouds, &tcfg, &lcfg).unwrap();
        let h2 = train_local(&mut m2, &clouds, &tcfg, &lcfg).unwrap();
        let l1: Vec<u64> = h1.iter().map(|r| r.loss.to_bits()).collect();
        let l2: Vec<u64> = h2.iter().map(|r| r.loss.to_bits()).collect();
        assert_eq!(l1, l2);
        assert_eq!(params_digest(&m1, ""), params_digest(&m2, ""));
    }

    #[test]
    fn local_lr_follows_schedule() {
        let clouds = vec![synth_scene(160, 70).unwrap()];
        let mut tcfg = tiny_tcfg(12, 0);
        tcfg.steps_per_epoch = 1; // one epoch per step to exercise the schedule
        let lcfg = LossConfig::<f32>::default();
        let mut model = tiny_model(2);
        let history = train_local(&mut model, &clouds, &tcfg, &lcfg).unwrap();
        for r in &history {
            assert_eq!(r.lr, crate::optim::lr_schedule_local(r.step));
        }
    }

    #[test]
    fn local_rejects_small_clouds() {
        let clouds = vec![synth_scene(16, 80).unwrap()];
        let mut model = tiny_model(3);
        let err = train_local(
            &mut model,
            &clouds,
            &tiny_tcfg(1, 0),
            &LossConfig::<f32>::default(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn global_training_freezes_encoder_bitwise() {
        let scenes = synth_dataset(8, 160, 2, 5).unwrap();
        let mut model = tiny_model(4);
        let before_enc = params_digest(&model, "encoder.");
        let before_det = params_digest(&model, "detector.");
        let before_glob = params_digest(&model, "global.");
        let tcfg = tiny_tcfg(0, 10);
        let history =
            train_global(&mut model, &scenes, &tcfg, &LossConfig::<f32>::default()).unwrap();
        assert_eq!(history.len(), 10);
        assert_eq!(params_digest(&model, "encoder."), before_enc);
        assert_eq!(params_digest(&model, "detector."), before_det);
        assert_ne!(params_digest(&model, "global."), before_glob);
    }

    #[test]
    fn global_loss_decreases_on_toy_set() {
        let scenes = synth_dataset(12, 160, 3, 6).unwrap();
        let mut model = tiny_model(5);
        let tcfg = tiny_tcfg(0, 100);
        let history =
            train_global(&mut model, &scenes, &tcfg, &LossConfig::<f32>::default()).unwrap();
        let head: f64 = history[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        let tail: f64 = history[history.len() - 10..]
            .iter()
            .map(|r| r.loss)
            .sum::<f64>()
            / 10.0;
        assert!(
            tail < head,
            "quadruplet loss went from {head:.4} to {tail:.4}"
        );
    }

    #[test]
    fn global_rejects_dataset_without_quadruplets() {
        // a single cluster has no valid negatives
        let scenes = synth_dataset(4, 160, 4, 7).unwrap();
        let mut model = tiny_model(6);
        let err = train_global(
            &mut model,
            &scenes,
            &tiny_tcfg(0, 1),
            &LossConfig::<f32>::default(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
