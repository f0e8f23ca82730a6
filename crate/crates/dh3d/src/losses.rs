//! Training objectives.
//!
//! Local phase: the N-tuple description loss over a feature-space distance
//! matrix plus the average-successful-rate detector loss. Global phase: the
//! lazy quadruplet loss. A weakly supervised triplet loss is kept as a
//! baseline. Every loss exposes an analytic gradient alongside its value.

use crate::cloud::CorrespondenceMatrix;
use crate::error::{Error, Result};
use crate::scalar::Real;
use ndarray::{Array1, Array2};

/// Hyperparameters shared by all losses.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig<S: Real> {
    /// hinge margin of the description loss
    pub mu: S,
    /// weight of the negative term in the description loss
    pub eta_bal: S,
    /// minimum expected average successful rate per keypoint
    pub kappa: S,
    /// ranking depth of the average successful rate
    pub asr_k: usize,
    /// weight of the detector loss in the combined local loss
    pub lambda: S,
    /// quadruplet margin, anchor vs negatives
    pub alpha: S,
    /// quadruplet margin, extra negative vs negatives
    pub beta: S,
    /// weak triplet margin
    pub gamma: S,
}

impl<S: Real> Default for LossConfig<S> {
    fn default() -> Self {
        Self {
            mu: S::from_f64_lossy(0.5),
            eta_bal: S::one(),
            kappa: S::from_f64_lossy(0.6),
            asr_k: 5,
            lambda: S::one(),
            alpha: S::from_f64_lossy(0.5),
            beta: S::from_f64_lossy(0.2),
            gamma: S::from_f64_lossy(0.2),
        }
    }
}

impl<S: Real> LossConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.mu <= S::zero() {
            return Err(Error::invalid("margin mu must be positive"));
        }
        if self.kappa < S::zero() || self.kappa > S::one() {
            return Err(Error::invalid("kappa must lie in [0,1]"));
        }
        if self.asr_k == 0 {
            return Err(Error::invalid("asr_k must be at least 1"));
        }
        for (name, v) in [
            ("eta_bal", self.eta_bal),
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if v < S::zero() {
                return Err(Error::invalid(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// D(i,j) = ||x_i - x'_j||, for descriptor rows of two clouds.
pub fn feature_distance_matrix<S: Real>(x: &Array2<S>, xp: &Array2<S>) -> Result<Array2<S>> {
    if x.ncols() != xp.ncols() {
        return Err(Error::shape(format!(
            "descriptor widths differ: {} vs {}",
            x.ncols(),
            xp.ncols()
        )));
    }
    let mut d = Array2::zeros((x.nrows(), xp.nrows()));
    for (i, xi) in x.rows().into_iter().enumerate() {
        for (j, xj) in xp.rows().into_iter().enumerate() {
            let s: S = xi
                .iter()
                .zip(xj.iter())
                .map(|(a, b)| (*a - *b) * (*a - *b))
                .sum();
            d[[i, j]] = s.sqrt();
        }
    }
    Ok(d)
}

/// Gradient of a loss through the distance matrix back to both descriptor
/// maps. Zero-distance entries get a zero subgradient.
pub fn feature_distance_matrix_backward<S: Real>(
    x: &Array2<S>,
    xp: &Array2<S>,
    d: &Array2<S>,
    grad_d: &Array2<S>,
) -> (Array2<S>, Array2<S>) {
    let mut gx = Array2::zeros(x.raw_dim());
    let mut gxp = Array2::zeros(xp.raw_dim());
    for i in 0..x.nrows() {
        for j in 0..xp.nrows() {
            let g = grad_d[[i, j]];
            let dist = d[[i, j]];
            if g == S::zero() || dist == S::zero() {
                continue;
            }
            let scale = g / dist;
            for c in 0..x.ncols() {
                let diff = (x[[i, c]] - xp[[j, c]]) * scale;
                gx[[i, c]] += diff;
                gxp[[j, c]] -= diff;
            }
        }
    }
    (gx, gxp)
}

/// Description loss: positive-pair distances normalized by the positive
/// count plus a hinge on negative pairs normalized by the negative count.
pub fn desc_loss<S: Real>(
    d: &Array2<S>,
    m: &CorrespondenceMatrix,
    cfg: &LossConfig<S>,
) -> Result<(S, Array2<S>)> {
    if d.nrows() != m.rows || d.ncols() != m.cols {
        return Err(Error::shape(format!(
            "distance matrix {}x{} vs correspondences {}x{}",
            d.nrows(),
            d.ncols(),
            m.rows,
            m.cols
        )));
    }
    let total = m.rows * m.cols;
    let npos = m.positive_count();
    if npos == 0 || npos == total {
        return Err(Error::DegenerateBatch(format!(
            "{npos} positive pairs out of {total}"
        )));
    }
    let nneg = total - npos;
    let wpos = S::one() / S::from_usize_lossy(npos);
    let wneg = cfg.eta_bal / S::from_usize_lossy(nneg);
    let mut loss = S::zero();
    let mut grad = Array2::zeros(d.raw_dim());
    for i in 0..m.rows {
        for j in 0..m.cols {
            let dist = d[[i, j]];
            if m.get(i, j) {
                loss += dist * wpos;
                grad[[i, j]] = wpos;
            } else {
                let slack = cfg.mu - dist;
                if slack > S::zero() {
                    loss += slack * wneg;
                    grad[[i, j]] = -wneg;
                }
            }
        }
    }
    Ok((loss, grad))
}

/// ar_i over one row of distances: c_j = 1 once any correct column has
/// appeared among the first j nearest neighbors; returns mean of c_1..c_k.
/// Ranking ties break toward the lower column index. Empty correct set
/// yields 0.
pub fn avg_success_rate<S: Real>(d_row: &[S], correct: &[bool], k: usize) -> Result<S> {
    if d_row.len() != correct.len() {
        return Err(Error::shape(format!(
            "{} distances vs {} correctness flags",
            d_row.len(),
            correct.len()
        )));
    }
    if k == 0 || k > d_row.len() {
        return Err(Error::invalid(format!(
            "asr depth {k} out of range for {} candidates",
            d_row.len()
        )));
    }
    if !correct.iter().any(|&c| c) {
        return Ok(S::zero());
    }
    let mut order: Vec<usize> = (0..d_row.len()).collect();
    order.sort_by(|&a, &b| {
        d_row[a]
            .partial_cmp(&d_row[b])
            .expect("finite distances")
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut seen = false;
    for &j in order.iter().take(k) {
        seen |= correct[j];
        if seen {
            hits += 1;
        }
    }
    Ok(S::from_usize_lossy(hits) / S::from_usize_lossy(k))
}

/// Detector loss: mean over points of 1 - kappa(1 - s_i) - s_i * ar_i.
pub fn det_loss<S: Real>(s: &Array1<S>, asr: &Array1<S>, cfg: &LossConfig<S>) -> Result<S> {
    if s.len() != asr.len() {
        return Err(Error::shape(format!(
            "{} saliency values vs {} asr values",
            s.len(),
            asr.len()
        )));
    }
    if s.is_empty() {
        return Err(Error::invalid("detector loss over an empty point set"));
    }
    let n = S::from_usize_lossy(s.len());
    let mut loss = S::zero();
    for (&si, &ari) in s.iter().zip(asr.iter()) {
        loss += S::one() - cfg.kappa * (S::one() - si) - si * ari;
    }
    Ok(loss / n)
}

/// Per-point gradient of the detector loss summand: d/ds_i = kappa - ar_i.
/// The mean's gradient is this divided by N.
pub fn det_loss_pointwise_grad<S: Real>(asr: &Array1<S>, cfg: &LossConfig<S>) -> Array1<S> {
    asr.mapv(|a| cfg.kappa - a)
}

/// L = L_desc + lambda * L_det.
pub fn combined_local_loss<S: Real>(desc: S, det: S, lambda: S) -> S {
    desc + lambda * det
}

fn euclid<S: Real>(a: &Array1<S>, b: &Array1<S>) -> S {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x - *y) * (*x - *y))
        .sum::<S>()
        .sqrt()
}

/// Subgradient of ||a-b|| with respect to a, accumulated into ga and gb.
fn euclid_grad<S: Real>(
    a: &Array1<S>,
    b: &Array1<S>,
    dist: S,
    coeff: S,
    ga: &mut Array1<S>,
    gb: &mut Array1<S>,
) {
    if dist == S::zero() || coeff == S::zero() {
        return;
    }
    let scale = coeff / dist;
    for ((&av, &bv), (g1, g2)) in a.iter().zip(b.iter()).zip(ga.iter_mut().zip(gb.iter_mut())) {
        let v = (av - bv) * scale;
        *g1 += v;
        *g2 -= v;
    }
}

/// Gradients of the lazy quadruplet loss, shaped like its inputs.
pub struct QuadrupletGrads<S: Real> {
    pub anchor: Array1<S>,
    pub positives: Array2<S>,
    pub negatives: Array2<S>,
    pub negstar: Array1<S>,
}

/// Lazy quadruplet loss over global descriptors:
/// max_j [alpha + d_pos - d_neg_j]_+ + max_j [beta + d_pos - d(neg*, neg_j)]_+
/// where d_pos is the distance to the best (closest) positive.
pub fn lazy_quadruplet_loss<S: Real>(
    anchor: &Array1<S>,
    positives: &Array2<S>,
    negatives: &Array2<S>,
    negstar: &Array1<S>,
    cfg: &LossConfig<S>,
) -> Result<(S, QuadrupletGrads<S>)> {
    if positives.nrows() == 0 || negatives.nrows() == 0 {
        return Err(Error::DegenerateBatch(
            "quadruplet needs at least one positive and one negative".to_string(),
        ));
    }
    let g = anchor.len();
    if positives.ncols() != g || negatives.ncols() != g || negstar.len() != g {
        return Err(Error::shape("global descriptor widths differ".to_string()));
    }
    // best positive
    let mut best_p = 0;
    let mut d_pos = S::infinity();
    for (i, p) in positives.rows().into_iter().enumerate() {
        let d = euclid(anchor, &p.to_owned());
        if d < d_pos {
            d_pos = d;
            best_p = i;
        }
    }
    // hardest negative against the anchor
    let mut h1 = S::neg_infinity();
    let mut j1 = 0;
    for (j, nrow) in negatives.rows().into_iter().enumerate() {
        let d = euclid(anchor, &nrow.to_owned());
        let v = cfg.alpha + d_pos - d;
        if v > h1 {
            h1 = v;
            j1 = j;
        }
    }
    // hardest negative against the extra negative
    let mut h2 = S::neg_infinity();
    let mut j2 = 0;
    for (j, nrow) in negatives.rows().into_iter().enumerate() {
        let d = euclid(negstar, &nrow.to_owned());
        let v = cfg.beta + d_pos - d;
        if v > h2 {
            h2 = v;
            j2 = j;
        }
    }
    let t1 = h1.max(S::zero());
    let t2 = h2.max(S::zero());
    let loss = t1 + t2;

    let mut grads = QuadrupletGrads {
        anchor: Array1::zeros(g),
        positives: Array2::zeros(positives.raw_dim()),
        negatives: Array2::zeros(negatives.raw_dim()),
        negstar: Array1::zeros(g),
    };
    let pos_row = positives.row(best_p).to_owned();
    // both active hinges contribute +1 through d_pos
    let mut dpos_coeff = S::zero();
    if t1 > S::zero() {
        dpos_coeff += S::one();
        let nrow = negatives.row(j1).to_owned();
        let d = euclid(anchor, &nrow);
        let mut gneg = grads.negatives.row_mut(j1).to_owned();
        euclid_grad(anchor, &nrow, d, -S::one(), &mut grads.anchor, &mut gneg);
        grads.negatives.row_mut(j1).assign(&gneg);
    }
    if t2 > S::zero() {
        dpos_coeff += S::one();
        let nrow = negatives.row(j2).to_owned();
        let d = euclid(negstar, &nrow);
        let mut gneg = grads.negatives.row_mut(j2).to_owned();
        euclid_grad(negstar, &nrow, d, -S::one(), &mut grads.negstar, &mut gneg);
        grads.negatives.row_mut(j2).assign(&gneg);
    }
    if dpos_coeff > S::zero() {
        let mut gp = grads.positives.row_mut(best_p).to_owned();
        euclid_grad(anchor, &pos_row, d_pos, dpos_coeff, &mut grads.anchor, &mut gp);
        grads.positives.row_mut(best_p).assign(&gp);
    }
    Ok((loss, grads))
}

/// Gradients of the weak triplet loss.
pub struct WeakTripletGrads<S: Real> {
    pub anchors: Array2<S>,
    pub positives: Array2<S>,
    pub negatives: Array2<S>,
}

/// Submap-level weak supervision:
/// sum_n [min_i ||x_n - p_i|| - min_j ||x_n - q_j|| + gamma]_+
pub fn weak_triplet_loss<S: Real>(
    anchors: &Array2<S>,
    positives: &Array2<S>,
    negatives: &Array2<S>,
    gamma: S,
) -> Result<(S, WeakTripletGrads<S>)> {
    if anchors.nrows() == 0 || positives.nrows() == 0 || negatives.nrows() == 0 {
        return Err(Error::DegenerateBatch(
            "weak triplet needs non-empty anchor, positive and negative sets".to_string(),
        ));
    }
    let c = anchors.ncols();
    if positives.ncols() != c || negatives.ncols() != c {
        return Err(Error::shape("feature widths differ".to_string()));
    }
    let mut loss = S::zero();
    let mut grads = WeakTripletGrads {
        anchors: Array2::zeros(anchors.raw_dim()),
        positives: Array2::zeros(positives.raw_dim()),
        negatives: Array2::zeros(negatives.raw_dim()),
    };
    for (n, a) in anchors.rows().into_iter().enumerate() {
        let a = a.to_owned();
        let (mut dp, mut ip) = (S::infinity(), 0);
        for (i, p) in positives.rows().into_iter().enumerate() {
            let d = euclid(&a, &p.to_owned());
            if d < dp {
                dp = d;
                ip = i;
            }
        }
        let (mut dn, mut jn) = (S::infinity(), 0);
        for (j, q) in negatives.rows().into_iter().enumerate() {
            let d = euclid(&a, &q.to_owned());
            if d < dn {
                dn = d;
                jn = j;
            }
        }
        let v = dp - dn + gamma;
        if v > S::zero() {
            loss += v;
            let mut ga = grads.anchors.row(n).to_owned();
            let prow = positives.row(ip).to_owned();
            let mut gp = grads.positives.row(ip).to_owned();
            euclid_grad(&a, &prow, dp, S::one(), &mut ga, &mut gp);
            grads.positives.row_mut(ip).assign(&gp);
            let qrow = negatives.row(jn).to_owned();
            let mut gq = grads.negatives.row(jn).to_owned();
            euclid_grad(&a, &qrow, dn, -S::one(), &mut ga, &mut gq);
            grads.negatives.row_mut(jn).assign(&gq);
            grads.anchors.row_mut(n).assign(&ga);
        }
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn corr(rows: usize, cols: usize, ones: &[(usize, usize)]) -> CorrespondenceMatrix {
        let mut data = vec![false; rows * cols];
        for &(i, j) in ones {
            data[i * cols + j] = true;
        }
        CorrespondenceMatrix::from_flags(rows, cols, 0.5, data).unwrap()
    }

    #[test]
    fn desc_loss_two_by_two_hand_case() {
        let d = array![[0.1, 0.3], [0.6, 0.2]];
        let m = corr(2, 2, &[(0, 0), (1, 1)]);
        let cfg = LossConfig::<f64>::default();
        let (loss, _) = desc_loss(&d, &m, &cfg).unwrap();
        assert!((loss - 0.25).abs() < 1e-12);
    }

    #[test]
    fn desc_loss_zero_when_separated() {
        let d = array![[0.0, 0.9], [0.7, 0.0]];
        let m = corr(2, 2, &[(0, 0), (1, 1)]);
        let cfg = LossConfig::<f64>::default();
        let (loss, grad) = desc_loss(&d, &m, &cfg).unwrap();
        assert_eq!(loss, 0.0);
        // positives keep their linear slope even at zero distance
        assert_eq!(grad[[0, 1]], 0.0);
        assert_eq!(grad[[1, 0]], 0.0);
    }

    #[test]
    fn desc_loss_rejects_degenerate_batches() {
        let d = array![[0.1, 0.3]];
        let cfg = LossConfig::<f64>::default();
        assert!(matches!(
            desc_loss(&d, &corr(1, 2, &[(0, 0), (0, 1)]), &cfg),
            Err(Error::DegenerateBatch(_))
        ));
        assert!(matches!(
            desc_loss(&d, &corr(1, 2, &[]), &cfg),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn desc_loss_grad_matches_finite_difference() {
        let mut d = array![[0.1, 0.3, 0.8], [0.6, 0.2, 0.4]];
        let m = corr(2, 3, &[(0, 0), (1, 1)]);
        let cfg = LossConfig::<f64>::default();
        let (_, grad) = desc_loss(&d, &m, &cfg).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let orig = d[[i, j]];
                d[[i, j]] = orig + h;
                let (lp, _) = desc_loss(&d, &m, &cfg).unwrap();
                d[[i, j]] = orig - h;
                let (lm, _) = desc_loss(&d, &m, &cfg).unwrap();
                d[[i, j]] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - grad[[i, j]]).abs() < 1e-8, "({i},{j})");
            }
        }
    }

    #[test]
    fn asr_paper_example_is_exactly_point_six() {
        // the correct candidate is the 3rd nearest neighbor
        let d = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let correct = [false, false, true, false, false, false];
        let ar: f64 = avg_success_rate(&d, &correct, 5).unwrap();
        assert_eq!(ar, 0.6);
    }

    #[test]
    fn asr_first_hit_and_no_hit() {
        let d = [0.1, 0.2, 0.3];
        assert_eq!(
            avg_success_rate::<f64>(&d, &[true, false, false], 3).unwrap(),
            1.0
        );
        assert_eq!(
            avg_success_rate::<f64>(&d, &[false, false, true], 2).unwrap(),
            0.0
        );
        assert_eq!(
            avg_success_rate::<f64>(&d, &[false, false, false], 3).unwrap(),
            0.0
        );
    }

    #[test]
    fn asr_ties_break_toward_lower_index() {
        // equal distances: column 0 ranks first, so a hit there counts from j=1
        let d = [0.5, 0.5];
        assert_eq!(avg_success_rate::<f64>(&d, &[true, false], 1).unwrap(), 1.0);
        assert_eq!(avg_success_rate::<f64>(&d, &[false, true], 1).unwrap(), 0.0);
    }

    #[test]
    fn asr_c_flags_stay_one_once_set() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.gen_range(2..12);
            let d: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let correct: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            let mut prev = 0.0f64;
            for k in 1..=n {
                let ar = avg_success_rate(&d, &correct, k).unwrap();
                // hits only accumulate, so k*ar is non-decreasing
                let hits = ar * k as f64;
                assert!(hits + 1e-9 >= prev);
                prev = hits;
            }
        }
    }

    #[test]
    fn det_loss_collapses_at_threshold() {
        let cfg = LossConfig::<f64>::default();
        let asr = Array1::from_elem(4, cfg.kappa);
        let s1 = array![0.1, 0.4, 0.7, 0.9];
        let s2 = array![0.9, 0.1, 0.2, 0.3];
        let l1 = det_loss(&s1, &asr, &cfg).unwrap();
        let l2 = det_loss(&s2, &asr, &cfg).unwrap();
        assert!((l1 - (1.0 - cfg.kappa)).abs() < 1e-12);
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn det_loss_zero_at_perfect_detection() {
        let cfg = LossConfig::<f64>::default();
        let s = Array1::from_elem(3, 1.0);
        let asr = Array1::from_elem(3, 1.0);
        assert!(det_loss(&s, &asr, &cfg).unwrap().abs() < 1e-12);
    }

    #[test]
    fn det_loss_grad_is_kappa_minus_ar() {
        let cfg = LossConfig::<f64>::default();
        let asr = array![0.0, 0.3, 0.6, 1.0];
        let grad = det_loss_pointwise_grad(&asr, &cfg);
        let mut s = array![0.5, 0.5, 0.5, 0.5];
        let h = 1e-6;
        let n = s.len() as f64;
        for i in 0..4 {
            s[i] += h;
            let lp = det_loss(&s, &asr, &cfg).unwrap();
            s[i] -= 2.0 * h;
            let lm = det_loss(&s, &asr, &cfg).unwrap();
            s[i] += h;
            let fd = (lp - lm) / (2.0 * h) * n;
            assert!((fd - grad[i]).abs() < 1e-8);
            assert!((grad[i] - (cfg.kappa - asr[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn combined_loss_arithmetic() {
        assert_eq!(combined_local_loss(0.25, 0.4, 1.0), 0.65);
        assert_eq!(combined_local_loss(0.25, 0.4, 0.0), 0.25);
    }

    #[test]
    fn quadruplet_hand_case() {
        // descriptors on a line so distances are plain differences
        let anchor = array![0.0];
        let positives = array![[0.1]];
        let negatives = array![[0.3], [0.9]];
        // neg* placed so its distances to the negatives are 0.25 and 0.85
        let negstar = array![0.05];
        let cfg = LossConfig::<f64>::default();
        let (loss, _) = lazy_quadruplet_loss(&anchor, &positives, &negatives, &negstar, &cfg).unwrap();
        // max(0.5+0.1-0.3, 0.5+0.1-0.9)_+ + max(0.2+0.1-0.25, 0.2+0.1-0.85)_+
        assert!((loss - 0.35).abs() < 1e-12);
    }

    #[test]
    fn quadruplet_zero_when_margins_met() {
        let anchor = array![0.0, 0.0];
        let positives = array![[0.0, 0.0]];
        let negatives = array![[1.0, 0.0], [0.0, 1.0]];
        let negstar = array![-1.0, 0.0];
        let cfg = LossConfig::<f64>::default();
        let (loss, grads) =
            lazy_quadruplet_loss(&anchor, &positives, &negatives, &negstar, &cfg).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.anchor.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn quadruplet_invariant_to_duplicated_hardest_negative() {
        let anchor = array![0.0];
        let positives = array![[0.1]];
        let negatives = array![[0.3], [0.9]];
        let dup = array![[0.3], [0.9], [0.3]];
        let negstar = array![0.05];
        let cfg = LossConfig::<f64>::default();
        let (l1, _) = lazy_quadruplet_loss(&anchor, &positives, &negatives, &negstar, &cfg).unwrap();
        let (l2, _) = lazy_quadruplet_loss(&anchor, &positives, &dup, &negstar, &cfg).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn quadruplet_rejects_empty_sets() {
        let anchor = array![0.0];
        let cfg = LossConfig::<f64>::default();
        assert!(matches!(
            lazy_quadruplet_loss(
                &anchor,
                &Array2::<f64>::zeros((0, 1)),
                &array![[1.0]],
                &anchor,
                &cfg
            ),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn quadruplet_grads_match_finite_difference() {
        let cfg = LossConfig::<f64>::default();
        let anchor = array![0.2, -0.1];
        let positives = array![[0.5, 0.3], [0.1, 0.0]];
        let negatives = array![[0.4, -0.2], [1.0, 1.0]];
        let negstar = array![0.3, -0.3];
        let (_, grads) =
            lazy_quadruplet_loss(&anchor, &positives, &negatives, &negstar, &cfg).unwrap();
        let h = 1e-6;
        let eval = |a: &Array1<f64>, p: &Array2<f64>, n: &Array2<f64>, ns: &Array1<f64>| {
            lazy_quadruplet_loss(a, p, n, ns, &cfg).unwrap().0
        };
        for c in 0..2 {
            let mut a = anchor.clone();
            a[c] += h;
            let lp = eval(&a, &positives, &negatives, &negstar);
            a[c] -= 2.0 * h;
            let lm = eval(&a, &positives, &negatives, &negstar);
            assert!(((lp - lm) / (2.0 * h) - grads.anchor[c]).abs() < 1e-6);
        }
        for r in 0..2 {
            for c in 0..2 {
                let mut n = negatives.clone();
                n[[r, c]] += h;
                let lp = eval(&anchor, &positives, &n, &negstar);
                n[[r, c]] -= 2.0 * h;
                let lm = eval(&anchor, &positives, &n, &negstar);
                assert!(((lp - lm) / (2.0 * h) - grads.negatives[[r, c]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn weak_triplet_zero_with_exact_positives() {
        let anchors = array![[0.0, 0.0], [1.0, 0.0]];
        let negatives = array![[5.0, 5.0]];
        let (loss, _) = weak_triplet_loss(&anchors, &anchors, &negatives, 0.2).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn weak_triplet_two_anchor_hand_case() {
        // anchor 0: min pos dist 0.1, min neg dist 0.5 -> hinge(0.1-0.5+0.2)=0
        // anchor 1: min pos dist 0.4, min neg dist 0.3 -> hinge(0.4-0.3+0.2)=0.3
        let anchors = array![[0.0f64], [1.0]];
        let positives = array![[0.1], [0.6]];
        let negatives = array![[-0.5], [1.3]];
        let (loss, _) = weak_triplet_loss(&anchors, &positives, &negatives, 0.2).unwrap();
        assert!((loss - 0.3).abs() < 1e-12);
    }

    #[test]
    fn weak_triplet_grads_match_finite_difference() {
        let anchors = array![[0.0f64, 0.3], [1.0, -0.2]];
        let positives = array![[0.1, 0.2], [0.6, 0.0]];
        let negatives = array![[-0.5, 0.1], [1.3, 0.4]];
        let (_, grads) = weak_triplet_loss(&anchors, &positives, &negatives, 0.2).unwrap();
        let h = 1e-6;
        for r in 0..2 {
            for c in 0..2 {
                let mut a = anchors.clone();
                a[[r, c]] += h;
                let lp = weak_triplet_loss(&a, &positives, &negatives, 0.2).unwrap().0;
                a[[r, c]] -= 2.0 * h;
                let lm = weak_triplet_loss(&a, &positives, &negatives, 0.2).unwrap().0;
                assert!(((lp - lm) / (2.0 * h) - grads.anchors[[r, c]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn distance_matrix_nonnegative_and_bounded_for_unit_rows() {
        let x = array![[1.0f64, 0.0], [0.0, 1.0]];
        let y = array![[-1.0, 0.0], [0.6, 0.8]];
        let d = feature_distance_matrix(&x, &y).unwrap();
        for v in d.iter() {
            assert!(*v >= 0.0 && *v <= 2.0 + 1e-6);
        }
        assert!((d[[0, 0]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn distance_matrix_backward_matches_finite_difference() {
        let x = array![[0.2, 0.5], [-0.3, 0.1]];
        let y = array![[0.0, 1.0], [0.4, -0.6], [0.9, 0.2]];
        let d = feature_distance_matrix(&x, &y).unwrap();
        let gd = array![[0.3, -0.2, 0.5], [0.1, 0.7, -0.4]];
        let (gx, gy) = feature_distance_matrix_backward(&x, &y, &d, &gd);
        let h = 1e-6;
        let scalar = |d: &Array2<f64>| (d * &gd).sum();
        for r in 0..2 {
            for c in 0..2 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let lp = scalar(&feature_distance_matrix(&xp, &y).unwrap());
                xp[[r, c]] -= 2.0 * h;
                let lm = scalar(&feature_distance_matrix(&xp, &y).unwrap());
                assert!(((lp - lm) / (2.0 * h) - gx[[r, c]]).abs() < 1e-6);
            }
        }
        for r in 0..3 {
            for c in 0..2 {
                let mut yp = y.clone();
                yp[[r, c]] += h;
                let lp = scalar(&feature_distance_matrix(&x, &yp).unwrap());
                yp[[r, c]] -= 2.0 * h;
                let lm = scalar(&feature_distance_matrix(&x, &yp).unwrap());
                assert!(((lp - lm) / (2.0 * h) - gy[[r, c]]).abs() < 1e-6);
            }
        }
    }
}
