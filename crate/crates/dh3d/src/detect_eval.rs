//! Keypoint selection from a saliency map and the relative-repeatability
//! metric.

use crate::cloud::{PointCloud, RigidTransform};
use crate::error::{Error, Result};
use crate::kdtree::NeighborIndex;
use crate::scalar::Real;
use ndarray::Array1;

/// Default suppression / repeatability radius in meters.
pub const DEFAULT_KEYPOINT_RADIUS: f64 = 0.5;

/// Selected keypoints in descending-score order.
#[derive(Debug, Clone)]
pub struct KeypointSet {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    /// true when fewer than the requested number of points survived
    pub truncated: bool,
}

/// Greedy non-maximum suppression: repeatedly take the highest-scoring
/// point farther than `nms_radius` from everything already selected, until
/// `m` points or exhaustion. `nms_radius = 0` reduces to pure top-m.
/// Ties break toward the lower point index. Asking for more points than
/// exist returns them all with the `truncated` flag set.
pub fn select_keypoints<S: Real>(
    saliency: &Array1<S>,
    cloud: &PointCloud,
    m: usize,
    nms_radius: f64,
) -> Result<KeypointSet> {
    let n = cloud.len();
    if saliency.len() != n {
        return Err(Error::shape(format!(
            "{} saliency values for {} points",
            saliency.len(),
            n
        )));
    }
    if m == 0 {
        return Err(Error::invalid("keypoint count must be at least 1"));
    }
    if nms_radius < 0.0 {
        return Err(Error::invalid("nms radius must be non-negative"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        saliency[b]
            .partial_cmp(&saliency[a])
            .expect("finite saliency")
            .then(a.cmp(&b))
    });
    let mut indices = Vec::with_capacity(m.min(n));
    let r2 = nms_radius * nms_radius;
    for &i in &order {
        if indices.len() == m {
            break;
        }
        if nms_radius > 0.0 {
            let p = cloud.points[i];
            let blocked = indices.iter().any(|&j: &usize| {
                let q = cloud.points[j];
                let d2 =
                    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                d2 < r2
            });
            if blocked {
                continue;
            }
        }
        indices.push(i);
    }
    let truncated = indices.len() < m;
    if truncated {
        eprintln!(
            "warning: requested {m} keypoints, only {} available after suppression",
            indices.len()
        );
    }
    let scores = indices.iter().map(|&i| saliency[i].to_f64_lossy()).collect();
    Ok(KeypointSet {
        indices,
        scores,
        truncated,
    })
}

/// Fraction of keypoints in `k1` whose transformed position lands within
/// `radius` of some keypoint of `k2`. Directional, per the usual protocol.
pub fn relative_repeatability(
    k1: &KeypointSet,
    cloud1: &PointCloud,
    k2: &KeypointSet,
    cloud2: &PointCloud,
    transform: &RigidTransform,
    radius: f64,
) -> Result<f64> {
    if k1.indices.is_empty() || k2.indices.is_empty() {
        return Err(Error::invalid("repeatability over empty keypoint sets"));
    }
    if radius <= 0.0 {
        return Err(Error::invalid("repeatability radius must be positive"));
    }
    let targets = PointCloud::new(
        k2.indices
            .iter()
            .map(|&j| cloud2.points[j])
            .collect::<Vec<_>>(),
    )?;
    let index = NeighborIndex::build(&targets);
    let mut repeatable = 0usize;
    for &i in &k1.indices {
        let p = transform.apply_point(&cloud1.points[i]);
        let nn = index.knn(&p, 1)?;
        if nn[0].1 < radius {
            repeatable += 1;
        }
    }
    Ok(repeatable as f64 / k1.indices.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_cloud(n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap()
    }

    #[test]
    fn top_m_without_suppression_is_sort_and_truncate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 50;
        let cloud = grid_cloud(n);
        let s = Array1::from_shape_fn(n, |_| rng.gen::<f64>());
        let ks = select_keypoints(&s, &cloud, 10, 0.0).unwrap();
        let mut oracle: Vec<usize> = (0..n).collect();
        oracle.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
        oracle.truncate(10);
        assert_eq!(ks.indices, oracle);
        assert!(!ks.truncated);
        assert!(ks.scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn all_points_when_m_equals_n() {
        let cloud = grid_cloud(5);
        let s = array![0.1, 0.5, 0.3, 0.9, 0.2];
        let ks = select_keypoints(&s, &cloud, 5, 0.0).unwrap();
        assert_eq!(ks.indices, vec![3, 1, 2, 4, 0]);
    }

    #[test]
    fn suppression_skips_close_runner_up() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [3.0, 0.0, 0.0]])
            .unwrap();
        let s = array![0.9, 0.8, 0.1];
        let ks = select_keypoints(&s, &cloud, 2, 0.5).unwrap();
        assert_eq!(ks.indices, vec![0, 2]);
    }

    #[test]
    fn requesting_too_many_truncates_with_flag() {
        let cloud = grid_cloud(3);
        let s = array![0.1, 0.2, 0.3];
        let ks = select_keypoints(&s, &cloud, 10, 0.0).unwrap();
        assert_eq!(ks.indices.len(), 3);
        assert!(ks.truncated);
    }

    #[test]
    fn score_ties_break_toward_lower_index() {
        let cloud = grid_cloud(4);
        let s = array![0.5, 0.5, 0.5, 0.5];
        let ks = select_keypoints(&s, &cloud, 2, 0.0).unwrap();
        assert_eq!(ks.indices, vec![0, 1]);
    }

    #[test]
    fn repeatability_identity_is_one() {
        let cloud = grid_cloud(10);
        let s = Array1::from_elem(10, 0.5);
        let ks = select_keypoints(&s, &cloud, 5, 0.0).unwrap();
        let r = relative_repeatability(
            &ks,
            &cloud,
            &ks,
            &cloud,
            &RigidTransform::identity(),
            0.5,
        )
        .unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn repeatability_zero_when_far_apart() {
        let c1 = grid_cloud(5);
        let c2 =
            PointCloud::new((0..5).map(|i| [i as f64 + 100.0, 100.0, 0.0]).collect()).unwrap();
        let s = Array1::from_elem(5, 0.5);
        let k1 = select_keypoints(&s, &c1, 3, 0.0).unwrap();
        let k2 = select_keypoints(&s, &c2, 3, 0.0).unwrap();
        let r = relative_repeatability(&k1, &c1, &k2, &c2, &RigidTransform::identity(), 0.5)
            .unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn repeatability_monotone_in_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c1 = PointCloud::new(
            (0..30)
                .map(|_| {
                    [
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap();
        let c2 = PointCloud::new(
            (0..30)
                .map(|_| {
                    [
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap();
        let s = Array1::from_shape_fn(30, |_| rng.gen::<f64>());
        let k1 = select_keypoints(&s, &c1, 15, 0.0).unwrap();
        let k2 = select_keypoints(&s, &c2, 15, 0.0).unwrap();
        let mut prev = 0.0;
        for radius in [0.2, 0.5, 1.0, 2.0, 5.0, 20.0] {
            let r =
                relative_repeatability(&k1, &c1, &k2, &c2, &RigidTransform::identity(), radius)
                    .unwrap();
            assert!(r >= prev);
            prev = r;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn both_directions_stay_in_unit_interval() {
        let c1 = grid_cloud(8);
        let c2 = grid_cloud(4);
        let s1 = Array1::from_shape_fn(8, |i| i as f64);
        let s2 = Array1::from_shape_fn(4, |i| i as f64);
        let k1 = select_keypoints(&s1, &c1, 8, 0.0).unwrap();
        let k2 = select_keypoints(&s2, &c2, 4, 0.0).unwrap();
        let t = RigidTransform::identity();
        let fwd = relative_repeatability(&k1, &c1, &k2, &c2, &t, 0.5).unwrap();
        let bwd = relative_repeatability(&k2, &c2, &k1, &c1, &t.inverse(), 0.5).unwrap();
        assert!((0.0..=1.0).contains(&fwd));
        assert!((0.0..=1.0).contains(&bwd));
        // directional metric: the denominators differ
        assert!(fwd <= bwd);
    }
}
