//! Point clouds, rigid transforms and the synthetic training-pair machinery.
//!
//! All geometry is 64-bit. Point order is significant: indices identify
//! points in correspondence matrices, saliency maps and keypoint sets.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

pub type Point = [f64; 3];

/// An ordered list of 3D points in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::invalid(format!("non-finite coordinate at point {i}")));
            }
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let n = self.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        for k in 0..3 {
            c[k] /= n;
        }
        c
    }
}

/// An SE3 pose: rotation (orthonormal, det = +1) plus translation in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation * rotation.transpose() - Matrix3::identity()).norm();
        if ortho > 1e-9 {
            return Err(Error::invalid(format!(
                "rotation not orthonormal (|R R^T - I| = {ortho:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("rotation determinant {det} != 1")));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation of `angle_deg` degrees around the upright (z) axis.
    pub fn yaw(angle_deg: f64) -> Self {
        let a = angle_deg.to_radians();
        let (s, c) = a.sin_cos();
        let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self {
            rotation,
            translation: Vector3::zeros(),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Composition: (self ∘ other)(p) = self(other(p)).
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn apply_point(&self, p: &Point) -> Point {
        let v = self.rotation * Vector3::new(p[0], p[1], p[2]) + self.translation;
        [v.x, v.y, v.z]
    }
}

/// Binary ground-truth correspondence matrix between two clouds.
///
/// `m[i][j] = true` iff the i-th point of the first cloud lies within `tau`
/// of the transformed j-th point of the second.
#[derive(Debug, Clone)]
pub struct CorrespondenceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub tau: f64,
    data: Vec<bool>,
}

impl CorrespondenceMatrix {
    pub fn from_flags(rows: usize, cols: usize, tau: f64, data: Vec<bool>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} flags for a {rows}x{cols} correspondence matrix",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            tau,
            data,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn positive_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Column indices of the positives in row `i`.
    pub fn positives_in_row(&self, i: usize) -> Vec<usize> {
        (0..self.cols).filter(|&j| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![false; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.get(i, j);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            tau: self.tau,
            data,
        }
    }
}

/// Default voxel grid size in meters.
pub const DEFAULT_VOXEL_GRID: f64 = 0.2;
/// Default synthetic noise sigma in meters.
pub const DEFAULT_SIGMA_NOISE: f64 = 0.02;
/// Default correspondence threshold tau in meters.
pub const DEFAULT_TAU: f64 = 0.5;
/// Default number of points sampled as network input.
pub const DEFAULT_SAMPLE_COUNT: usize = 8192;

/// Voxel-grid filter: one centroid per occupied voxel, output ordered by
/// lexicographic voxel key.
pub fn voxel_downsample(cloud: &PointCloud, grid: f64) -> Result<PointCloud> {
    if !(grid > 0.0) {
        return Err(Error::invalid(format!("voxel grid size must be positive, got {grid}")));
    }
    let mut cells: BTreeMap<(i64, i64, i64), ([f64; 3], usize)> = BTreeMap::new();
    for p in &cloud.points {
        let key = (
            (p[0] / grid).floor() as i64,
            (p[1] / grid).floor() as i64,
            (p[2] / grid).floor() as i64,
        );
        let entry = cells.entry(key).or_insert(([0.0; 3], 0));
        for k in 0..3 {
            entry.0[k] += p[k];
        }
        entry.1 += 1;
    }
    let points = cells
        .values()
        .map(|(sum, n)| {
            let n = *n as f64;
            [sum[0] / n, sum[1] / n, sum[2] / n]
        })
        .collect();
    PointCloud::new(points)
}

/// Shifts a cloud so its centroid is the origin; returns the removed centroid.
pub fn center_cloud(cloud: &PointCloud) -> (PointCloud, Point) {
    let c = cloud.centroid();
    let points = cloud
        .points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    (PointCloud { points }, c)
}

pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply_point(p)).collect(),
    }
}

/// Generates a training pair: a yaw-rotated, noise-perturbed copy plus the
/// transform that maps the input onto the (noiseless) copy. No translation
/// is applied; clouds are expected to be pre-centered.
pub fn synth_pair(
    cloud: &PointCloud,
    max_yaw_deg: f64,
    sigma_noise: f64,
    seed: u64,
) -> Result<(PointCloud, RigidTransform)> {
    if sigma_noise < 0.0 {
        return Err(Error::invalid("sigma_noise must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let yaw = if max_yaw_deg == 0.0 {
        0.0
    } else {
        rng.gen_range(-max_yaw_deg..=max_yaw_deg)
    };
    let t = RigidTransform::yaw(yaw);
    let mut out = apply_transform(cloud, &t);
    if sigma_noise > 0.0 {
        let normal = Normal::new(0.0, sigma_noise).unwrap();
        for p in &mut out.points {
            for c in p.iter_mut() {
                *c += normal.sample(&mut rng);
            }
        }
    }
    Ok((out, t))
}

/// Ground-truth correspondences per the indicator rule
/// M(i,j) = 1 iff ||p_i - T p'_j|| < tau.
pub fn gt_correspondences(
    p: &PointCloud,
    p2: &PointCloud,
    t: &RigidTransform,
    tau: f64,
) -> Result<CorrespondenceMatrix> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be positive"));
    }
    let mapped: Vec<Point> = p2.points.iter().map(|q| t.apply_point(q)).collect();
    let tau2 = tau * tau;
    let rows = p.len();
    let cols = p2.len();
    let mut data = vec![false; rows * cols];
    for (i, a) in p.points.iter().enumerate() {
        for (j, b) in mapped.iter().enumerate() {
            let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
            data[i * cols + j] = d2 < tau2;
        }
    }
    Ok(CorrespondenceMatrix {
        rows,
        cols,
        tau,
        data,
    })
}

/// Uniform sample of `n` distinct points; returns the sampled cloud and the
/// original indices of its points.
pub fn random_sample(cloud: &PointCloud, n: usize, seed: u64) -> Result<(PointCloud, Vec<usize>)> {
    if n == 0 || n > cloud.len() {
        return Err(Error::invalid(format!(
            "sample size {n} out of range 1..={}",
            cloud.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = index_sample(&mut rng, cloud.len(), n).into_vec();
    let points = idx.iter().map(|&i| cloud.points[i]).collect();
    Ok((PointCloud { points }, idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_cloud(n: usize, seed: u64, extent: f64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud {
            points: (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-extent..extent),
                        rng.gen_range(-extent..extent),
                        rng.gen_range(-extent..extent),
                    ]
                })
                .collect(),
        }
    }

    fn random_transform(seed: u64) -> RigidTransform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let yaw = RigidTransform::yaw(rng.gen_range(-180.0..180.0));
        // compose with rotations about x and y for a full SO(3) element
        let a: f64 = rng.gen_range(-1.0..1.0);
        let b: f64 = rng.gen_range(-1.0..1.0);
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, a.cos(), -a.sin(), 0.0, a.sin(), a.cos());
        let ry = Matrix3::new(b.cos(), 0.0, b.sin(), 0.0, 1.0, 0.0, -b.sin(), 0.0, b.cos());
        RigidTransform {
            rotation: rx * ry * yaw.rotation,
            translation: Vector3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            ),
        }
    }

    #[test]
    fn voxel_single_cell_collapses_to_centroid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let points: Vec<Point> = (0..1000)
            .map(|_| {
                [
                    rng.gen_range(0.0..0.2),
                    rng.gen_range(0.0..0.2),
                    rng.gen_range(0.0..0.2),
                ]
            })
            .collect();
        let cloud = PointCloud::new(points).unwrap();
        let c = cloud.centroid();
        let out = voxel_downsample(&cloud, 0.2).unwrap();
        assert_eq!(out.len(), 1);
        for k in 0..3 {
            assert!((out.points[0][k] - c[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn voxel_lattice_keeps_all_cells() {
        // 3x3 planar lattice, 1 m spacing, grid 0.5 m: every point in its own voxel
        let mut points = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                points.push([i as f64, j as f64, 0.0]);
            }
        }
        let cloud = PointCloud::new(points).unwrap();
        let out = voxel_downsample(&cloud, 0.5).unwrap();
        assert_eq!(out.len(), 9);
    }

    #[test]
    fn voxel_rejects_nonpositive_grid() {
        let cloud = random_cloud(10, 2, 1.0);
        assert!(voxel_downsample(&cloud, 0.0).is_err());
        assert!(voxel_downsample(&cloud, -1.0).is_err());
    }

    #[test]
    fn voxel_output_near_input() {
        let cloud = random_cloud(500, 3, 5.0);
        let grid = 0.7;
        let out = voxel_downsample(&cloud, grid).unwrap();
        assert!(out.len() <= cloud.len());
        let bound = grid * 3f64.sqrt() / 2.0 + 1e-12;
        for q in &out.points {
            let nearest = cloud
                .points
                .iter()
                .map(|p| {
                    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            assert!(nearest <= bound, "centroid {nearest} beyond {bound}");
        }
    }

    #[test]
    fn center_cloud_zero_mean_and_restores() {
        let cloud = random_cloud(100, 4, 10.0);
        let (centered, c) = center_cloud(&cloud);
        let m = centered.centroid();
        assert!(m.iter().all(|v| v.abs() < 1e-9));
        for (orig, cen) in cloud.points.iter().zip(&centered.points) {
            for k in 0..3 {
                assert!((cen[k] + c[k] - orig[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn center_single_point() {
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0]]).unwrap();
        let (centered, c) = center_cloud(&cloud);
        assert_eq!(centered.points[0], [0.0, 0.0, 0.0]);
        assert_eq!(c, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn apply_identity_and_yaw() {
        let cloud = random_cloud(20, 5, 3.0);
        let same = apply_transform(&cloud, &RigidTransform::identity());
        assert_eq!(same, cloud);
        let flipped = apply_transform(
            &PointCloud::new(vec![[1.0, 0.0, 0.0]]).unwrap(),
            &RigidTransform::yaw(180.0),
        );
        assert!((flipped.points[0][0] + 1.0).abs() < 1e-12);
        assert!(flipped.points[0][1].abs() < 1e-12);
    }

    #[test]
    fn transform_round_trip_and_rigidity() {
        let cloud = random_cloud(50, 6, 4.0);
        let t = random_transform(7);
        let fwd = apply_transform(&cloud, &t);
        let back = apply_transform(&fwd, &t.inverse());
        for (a, b) in cloud.points.iter().zip(&back.points) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
        // pairwise distances preserved
        for i in 0..cloud.len() {
            for j in (i + 1)..cloud.len() {
                let d0: f64 = (0..3)
                    .map(|k| (cloud.points[i][k] - cloud.points[j][k]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let d1: f64 = (0..3)
                    .map(|k| (fwd.points[i][k] - fwd.points[j][k]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn synth_pair_identity_when_unperturbed() {
        let cloud = random_cloud(30, 8, 2.0);
        let (out, t) = synth_pair(&cloud, 0.0, 0.0, 42).unwrap();
        assert_eq!(out, cloud);
        assert!((t.rotation - Matrix3::identity()).norm() < 1e-15);
        assert_eq!(t.translation, Vector3::zeros());
    }

    #[test]
    fn synth_pair_deterministic() {
        let cloud = random_cloud(30, 9, 2.0);
        let (a, ta) = synth_pair(&cloud, 90.0, 0.02, 7).unwrap();
        let (b, tb) = synth_pair(&cloud, 90.0, 0.02, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn synth_pair_zero_translation() {
        let cloud = random_cloud(30, 10, 2.0);
        let (_, t) = synth_pair(&cloud, 90.0, 0.02, 3).unwrap();
        assert_eq!(t.translation, Vector3::zeros());
    }

    #[test]
    fn correspondences_identity_case() {
        // points >= 1 m apart, tau = 0.5 -> M is the identity matrix
        let cloud = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [0.0, 2.0, 0.0],
            [0.0, 0.0, 2.0],
        ])
        .unwrap();
        let m = gt_correspondences(&cloud, &cloud, &RigidTransform::identity(), 0.5).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.get(i, j), i == j);
            }
        }
    }

    #[test]
    fn correspondences_match_distance_oracle() {
        let p = random_cloud(25, 11, 2.0);
        let p2 = random_cloud(30, 12, 2.0);
        let t = random_transform(13);
        let tau = 1.0;
        let m = gt_correspondences(&p, &p2, &t, tau).unwrap();
        for i in 0..p.len() {
            for j in 0..p2.len() {
                let q = t.apply_point(&p2.points[j]);
                let d = (0..3)
                    .map(|k| (p.points[i][k] - q[k]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert_eq!(m.get(i, j), d < tau, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn correspondences_swap_symmetry() {
        let p = random_cloud(15, 14, 2.0);
        let p2 = random_cloud(18, 15, 2.0);
        let t = random_transform(16);
        let m1 = gt_correspondences(&p, &p2, &t, 0.8).unwrap();
        let m2 = gt_correspondences(&p2, &p, &t.inverse(), 0.8).unwrap();
        let m1t = m1.transpose();
        assert_eq!(m2.rows, m1t.rows);
        for i in 0..m2.rows {
            for j in 0..m2.cols {
                assert_eq!(m2.get(i, j), m1t.get(i, j));
            }
        }
    }

    #[test]
    fn random_sample_full_is_permutation() {
        let cloud = random_cloud(20, 17, 2.0);
        let (_, idx) = random_sample(&cloud, 20, 5).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn random_sample_rejects_oversize() {
        let cloud = random_cloud(5, 18, 1.0);
        assert!(random_sample(&cloud, 6, 0).is_err());
    }

    #[test]
    fn random_sample_seed_variability() {
        let cloud = random_cloud(20, 19, 1.0);
        let mut distinct = 0;
        for s in 0..100u64 {
            let (_, a) = random_sample(&cloud, 5, 2 * s).unwrap();
            let (_, b) = random_sample(&cloud, 5, 2 * s + 1).unwrap();
            if a != b {
                distinct += 1;
            }
        }
        assert!(distinct > 90, "only {distinct}/100 seed pairs differed");
    }

    #[test]
    fn rigid_transform_validation() {
        let bad = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(RigidTransform::new(bad, Vector3::zeros()).is_err());
        let scaled = Matrix3::identity() * 2.0;
        assert!(RigidTransform::new(scaled, Vector3::zeros()).is_err());
    }

    #[test]
    fn rejects_empty_and_nonfinite() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
    }
}
