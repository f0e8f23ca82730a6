//! Synthetic indoor-style scenes for desk-scale experiments: vertical
//! walls, horizontal slabs and scattered clutter — no ground plane. Every
//! scene carries a planted 2D metric position so retrieval datasets can
//! enforce distance-based positive/negative rules without GPS.

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Scenes within one cluster sit inside this radius of the cluster center.
pub const CLUSTER_JITTER: f64 = 4.0;
/// Cluster centers are laid out on a grid with this spacing in meters,
/// comfortably beyond the 50 m negative rule.
pub const CLUSTER_SPACING: f64 = 120.0;

/// Identity and metric position of one generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub position: [f64; 2],
    /// scenes with equal cluster index depict the same place
    pub cluster: usize,
}

/// One random scene of `points` points. Deterministic per seed.
pub fn synth_scene(points: usize, seed: u64) -> Result<PointCloud> {
    if points < 8 {
        return Err(Error::invalid("a scene needs at least 8 points"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(points);
    let clutter = points / 10;
    let structured = points - clutter;

    // allocate structured points across 3-6 walls and 1-3 slabs
    let nwalls = rng.gen_range(3..=6usize);
    let nslabs = rng.gen_range(1..=3usize);
    let nsurf = nwalls + nslabs;
    let per = structured / nsurf;
    let mut remaining = structured;

    for w in 0..nwalls {
        let budget = if w + 1 == nwalls && nslabs == 0 {
            remaining
        } else {
            per
        };
        remaining -= budget;
        // a vertical rectangle: center, heading, extent, height
        let cx = rng.gen_range(-4.0..4.0);
        let cy = rng.gen_range(-4.0..4.0);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let half_len = rng.gen_range(1.0..3.0);
        let z0 = rng.gen_range(0.0..0.5);
        let height = rng.gen_range(1.5..3.0);
        let (dx, dy) = (theta.cos(), theta.sin());
        for _ in 0..budget {
            let u = rng.gen_range(-half_len..half_len);
            let v = rng.gen_range(0.0..height);
            let jitter = rng.gen_range(-0.01..0.01);
            pts.push([
                cx + u * dx - jitter * dy,
                cy + u * dy + jitter * dx,
                z0 + v,
            ]);
        }
    }
    for s in 0..nslabs {
        let budget = if s + 1 == nslabs { remaining } else { per };
        remaining -= budget;
        // a horizontal rectangle at table height
        let cx = rng.gen_range(-3.5..3.5);
        let cy = rng.gen_range(-3.5..3.5);
        let z = rng.gen_range(0.5..1.8);
        let hx = rng.gen_range(0.5..1.5);
        let hy = rng.gen_range(0.5..1.5);
        for _ in 0..budget {
            pts.push([
                cx + rng.gen_range(-hx..hx),
                cy + rng.gen_range(-hy..hy),
                z + rng.gen_range(-0.01..0.01),
            ]);
        }
    }
    for _ in 0..clutter {
        pts.push([
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(0.0..3.0),
        ]);
    }
    debug_assert_eq!(pts.len(), points);
    PointCloud::new(pts)
}

/// A dataset of `count` scenes grouped into clusters of `cluster_size`.
/// Scenes within a cluster are perturbed views of the same base geometry and
/// share nearby planted positions (within [`CLUSTER_JITTER`]); distinct
/// clusters get different geometry and positions at least
/// [`CLUSTER_SPACING`] − 2·[`CLUSTER_JITTER`] apart.
pub fn synth_dataset(
    count: usize,
    points: usize,
    cluster_size: usize,
    seed: u64,
) -> Result<Vec<(PointCloud, SceneRecord)>> {
    if count == 0 || cluster_size == 0 {
        return Err(Error::invalid("count and cluster size must be positive"));
    }
    let mut out = Vec::with_capacity(count);
    let clusters = count.div_ceil(cluster_size);
    let grid = (clusters as f64).sqrt().ceil() as usize;
    let mut idx = 0usize;
    for c in 0..clusters {
        let base_seed = seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(c as u64);
        let base = synth_scene(points, base_seed)?;
        let center = [
            (c % grid) as f64 * CLUSTER_SPACING,
            (c / grid) as f64 * CLUSTER_SPACING,
        ];
        let members = cluster_size.min(count - idx);
        for m in 0..members {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(1 + m as u64));
            let (cloud, record) = if m == 0 {
                (base.clone(), center)
            } else {
                // a perturbed view of the same place
                let (view, _) = crate::cloud::synth_pair(
                    &base,
                    30.0,
                    crate::cloud::DEFAULT_SIGMA_NOISE,
                    base_seed.wrapping_add(100 + m as u64),
                )?;
                let pos = [
                    center[0] + rng.gen_range(-CLUSTER_JITTER..CLUSTER_JITTER),
                    center[1] + rng.gen_range(-CLUSTER_JITTER..CLUSTER_JITTER),
                ];
                (view, pos)
            };
            out.push((
                cloud,
                SceneRecord {
                    id: format!("scene{idx:04}"),
                    position: record,
                    cluster: c,
                },
            ));
            idx += 1;
        }
    }
    Ok(out)
}
