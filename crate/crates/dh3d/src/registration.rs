//! Descriptor matching and robust rigid registration: nearest-neighbor
//! matching, Kabsch-style minimal solve, a RANSAC loop with adaptive early
//! stopping, and the RTE/RRE scoring used to declare success.

use crate::cloud::{Point, PointCloud, RigidTransform};
use crate::error::{Error, Result};
use crate::scalar::Real;
use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default RANSAC hypothesis budget.
pub const DEFAULT_MAX_ITER: usize = 10_000;
/// Default RANSAC inlier threshold in meters.
pub const DEFAULT_INLIER_THRESH: f64 = 0.5;
/// A registration succeeds below 2 m translational and 5 deg rotational error.
pub const SUCCESS_RTE: f64 = 2.0;
pub const SUCCESS_RRE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMode {
    /// every A row matched to its nearest B row
    Nn,
    /// keep only pairs that are each other's nearest
    Mutual,
}

/// One descriptor match: indices into both clouds plus the feature distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub inliers: usize,
    pub iterations: usize,
    pub converged: bool,
}

fn desc_dist<S: Real>(x: &Array2<S>, i: usize, y: &Array2<S>, j: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..x.ncols() {
        let d = x[[i, c]].to_f64_lossy() - y[[j, c]].to_f64_lossy();
        s += d * d;
    }
    s.sqrt()
}

fn nearest_rows<S: Real>(from: &Array2<S>, to: &Array2<S>) -> Vec<(usize, f64)> {
    (0..from.nrows())
        .map(|i| {
            let mut best = (0usize, f64::INFINITY);
            for j in 0..to.nrows() {
                let d = desc_dist(from, i, to, j);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// Nearest-neighbor matching in descriptor space. Ties break toward the
/// lower index by the strict `<` scan order.
pub fn match_descriptors<S: Real>(
    desc_a: &Array2<S>,
    desc_b: &Array2<S>,
    mode: MatchMode,
) -> Result<Vec<Match>> {
    if desc_a.nrows() == 0 || desc_b.nrows() == 0 {
        return Err(Error::invalid("cannot match empty descriptor sets"));
    }
    if desc_a.ncols() != desc_b.ncols() {
        return Err(Error::shape(format!(
            "descriptor widths differ: {} vs {}",
            desc_a.ncols(),
            desc_b.ncols()
        )));
    }
    let fwd = nearest_rows(desc_a, desc_b);
    let matches = match mode {
        MatchMode::Nn => fwd
            .iter()
            .enumerate()
            .map(|(a, &(b, distance))| Match { a, b, distance })
            .collect(),
        MatchMode::Mutual => {
            let bwd = nearest_rows(desc_b, desc_a);
            fwd.iter()
                .enumerate()
                .filter(|&(a, &(b, _))| bwd[b].0 == a)
                .map(|(a, &(b, distance))| Match { a, b, distance })
                .collect()
        }
    };
    Ok(matches)
}

/// Least-squares rigid transform mapping `pairs_a` onto `pairs_b` via the
/// weighted cross-covariance SVD, with a determinant correction so the
/// result is always a proper rotation.
pub fn rigid_solve(
    pairs_a: &[Point],
    pairs_b: &[Point],
    weights: Option<&[f64]>,
) -> Result<RigidTransform> {
    let n = pairs_a.len();
    if n < 3 || pairs_b.len() != n {
        return Err(Error::invalid(format!(
            "rigid solve needs >=3 pairs of equal length, got {} and {}",
            n,
            pairs_b.len()
        )));
    }
    let w: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != n || w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::invalid("weights must be non-negative, one per pair"));
            }
            w.to_vec()
        }
        None => vec![1.0; n],
    };
    let wsum: f64 = w.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::invalid("weights sum to zero"));
    }
    let centroid = |pts: &[Point]| -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for (p, &wi) in pts.iter().zip(&w) {
            c += Vector3::new(p[0], p[1], p[2]) * wi;
        }
        c / wsum
    };
    let ca = centroid(pairs_a);
    let cb = centroid(pairs_b);
    let mut h = Matrix3::zeros();
    for ((a, b), &wi) in pairs_a.iter().zip(pairs_b).zip(&w) {
        let da = Vector3::new(a[0], a[1], a[2]) - ca;
        let db = Vector3::new(b[0], b[1], b[2]) - cb;
        h += wi * da * db.transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (
        svd.u.ok_or_else(|| Error::numeric("svd", "no U factor"))?,
        svd.v_t.ok_or_else(|| Error::numeric("svd", "no V factor"))?,
    );
    // rank < 2 means the sample cannot pin down a rotation
    let s = svd.singular_values;
    let scale = s[0].max(1e-30);
    if s[1] / scale < 1e-9 {
        return Err(Error::DegenerateSample(
            "correspondence sample is collinear".to_string(),
        ));
    }
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant();
    let mut fix = Matrix3::identity();
    fix[(2, 2)] = d.signum();
    let r = v * fix * u.transpose();
    let t = cb - r * ca;
    RigidTransform::new(r, t)
}

fn triangle_area(a: &Point, b: &Point, c: &Point) -> f64 {
    let ab = Vector3::new(b[0] - a[0], b[1] - a[1], b[2] - a[2]);
    let ac = Vector3::new(c[0] - a[0], c[1] - a[1], c[2] - a[2]);
    ab.cross(&ac).norm() / 2.0
}

fn count_inliers(
    t: &RigidTransform,
    matches: &[Match],
    cloud_a: &PointCloud,
    cloud_b: &PointCloud,
    thresh: f64,
) -> Vec<usize> {
    matches
        .iter()
        .enumerate()
        .filter(|(_, m)| {
            let p = t.apply_point(&cloud_a.points[m.a]);
            let q = &cloud_b.points[m.b];
            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            d2 < thresh * thresh
        })
        .map(|(i, _)| i)
        .collect()
}

/// RANSAC over 3-point samples with a 99%-confidence adaptive stop and a
/// final refit on the best inlier set.
pub fn ransac_register(
    matches: &[Match],
    cloud_a: &PointCloud,
    cloud_b: &PointCloud,
    inlier_thresh: f64,
    max_iter: usize,
    seed: u64,
) -> Result<RegistrationResult> {
    if matches.len() < 3 {
        return Err(Error::InsufficientMatches {
            need: 3,
            got: matches.len(),
        });
    }
    if inlier_thresh <= 0.0 || max_iter == 0 {
        return Err(Error::invalid("inlier threshold and max_iter must be positive"));
    }
    for m in matches {
        if m.a >= cloud_a.len() || m.b >= cloud_b.len() {
            return Err(Error::invalid("match index out of range"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = matches.len();
    let mut best: Option<(Vec<usize>, RigidTransform)> = None;
    let mut needed = max_iter;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        // sample 3 distinct match indices
        let mut idx = [0usize; 3];
        idx[0] = rng.gen_range(0..n);
        loop {
            idx[1] = rng.gen_range(0..n);
            if idx[1] != idx[0] {
                break;
            }
        }
        loop {
            idx[2] = rng.gen_range(0..n);
            if idx[2] != idx[0] && idx[2] != idx[1] {
                break;
            }
        }
        let pa: Vec<Point> = idx.iter().map(|&i| cloud_a.points[matches[i].a]).collect();
        let pb: Vec<Point> = idx.iter().map(|&i| cloud_b.points[matches[i].b]).collect();
        if triangle_area(&pa[0], &pa[1], &pa[2]) < 1e-6 {
            continue;
        }
        let Ok(t) = rigid_solve(&pa, &pb, None) else {
            continue;
        };
        let inl = count_inliers(&t, matches, cloud_a, cloud_b, inlier_thresh);
        let better = match &best {
            Some((prev, _)) => inl.len() > prev.len(),
            None => true,
        };
        if better {
            // adaptive bound: hypotheses needed for 99% confidence that at
            // least one all-inlier 3-sample was drawn
            let w = inl.len() as f64 / n as f64;
            needed = if w >= 1.0 {
                1
            } else if w <= 0.0 {
                max_iter
            } else {
                let denom = (1.0 - w.powi(3)).max(f64::EPSILON).ln();
                ((0.01f64.ln() / denom).ceil() as usize).clamp(1, max_iter)
            };
            best = Some((inl, t));
        }
        if iterations >= needed {
            converged = true;
            break;
        }
    }
    let (inl, coarse) = best.ok_or_else(|| {
        Error::DegenerateSample("no valid RANSAC hypothesis found".to_string())
    })?;
    // refit on all inliers when possible
    let transform = if inl.len() >= 3 {
        let pa: Vec<Point> = inl.iter().map(|&i| cloud_a.points[matches[i].a]).collect();
        let pb: Vec<Point> = inl.iter().map(|&i| cloud_b.points[matches[i].b]).collect();
        rigid_solve(&pa, &pb, None).unwrap_or(coarse)
    } else {
        coarse
    };
    let inliers = count_inliers(&transform, matches, cloud_a, cloud_b, inlier_thresh).len();
    Ok(RegistrationResult {
        transform,
        inliers,
        iterations,
        converged,
    })
}

/// Relative translational error (meters) and relative rotation error
/// (degrees) of an estimate against the ground truth.
pub fn rte_rre(estimate: &RigidTransform, truth: &RigidTransform) -> (f64, f64) {
    let err = truth.inverse().compose(estimate);
    let rte = err.translation.norm();
    // atan2 of the skew norm against the trace: ||R - R^T||_F = 2*sqrt(2)*|sin θ|,
    // accurate for small angles where acos((tr-1)/2) loses ~8 digits
    let cos = ((err.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let skew = err.rotation - err.rotation.transpose();
    let sin = (skew.norm() / (2.0 * std::f64::consts::SQRT_2)).clamp(0.0, 1.0);
    let rre = sin.atan2(cos).to_degrees();
    (rte, rre)
}

pub fn registration_success(rte: f64, rre: f64) -> bool {
    rte < SUCCESS_RTE && rre < SUCCESS_RRE
}
