//! Spatial index over a point cloud: k-nearest-neighbor and radius queries.
//!
//! Results are guaranteed identical to a brute-force distance sort with ties
//! broken by lower point index, which the golden tests rely on.

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};

/// kd-tree over the points of a cloud. Queries are read-only and safe to run
/// concurrently on a shared index.
pub struct NeighborIndex {
    points: Vec<Point>,
    // nodes laid out as a flattened recursion: each node owns a slice of `order`
    order: Vec<u32>,
    nodes: Vec<Node>,
}

struct Node {
    // index into `order` range covered by this node
    start: u32,
    len: u32,
    axis: u8,
    split: f64,
    left: u32,
    right: u32, // u32::MAX = leaf
}

const LEAF_SIZE: usize = 16;
const NO_CHILD: u32 = u32::MAX;

impl NeighborIndex {
    pub fn build(cloud: &PointCloud) -> Self {
        let points = cloud.points.clone();
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::new();
        build_node(&points, &mut order, 0, &mut nodes);
        Self {
            points,
            order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The k nearest points to `query`, ascending by distance, ties broken by
    /// lower point index. Returns (point index, Euclidean distance).
    pub fn knn(&self, query: &Point, k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 || k > self.points.len() {
            return Err(Error::invalid(format!(
                "k = {k} out of range 1..={}",
                self.points.len()
            )));
        }
        // best-k kept as a sorted vec keyed by (dist2, index); small k in practice
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        self.search(0, query, k, &mut best);
        Ok(best
            .into_iter()
            .map(|(d2, i)| (i as usize, d2.sqrt()))
            .collect())
    }

    /// Indices of all points strictly within `radius` of `query`, ascending
    /// by (distance, index).
    pub fn radius(&self, query: &Point, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if radius > 0.0 {
            self.radius_search(0, query, radius * radius, &mut out);
        }
        out.sort_by(|a, b| (a.1, a.0).partial_cmp(&(b.1, b.0)).unwrap());
        out.into_iter().map(|(i, d2)| (i, d2.sqrt())).collect()
    }

    fn search(&self, node: u32, query: &Point, k: usize, best: &mut Vec<(f64, u32)>) {
        let n = &self.nodes[node as usize];
        if n.right == NO_CHILD {
            for &i in &self.order[n.start as usize..(n.start + n.len) as usize] {
                let d2 = dist2(&self.points[i as usize], query);
                insert_candidate(best, k, d2, i);
            }
            return;
        }
        let axis = n.axis as usize;
        let delta = query[axis] - n.split;
        let (near, far) = if delta <= 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, query, k, best);
        // explore the far side unless the plane is strictly farther than the
        // current worst candidate (equal distance may still win on index)
        if best.len() < k || delta * delta <= best.last().unwrap().0 {
            self.search(far, query, k, best);
        }
    }

    fn radius_search(&self, node: u32, query: &Point, r2: f64, out: &mut Vec<(usize, f64)>) {
        let n = &self.nodes[node as usize];
        if n.right == NO_CHILD {
            for &i in &self.order[n.start as usize..(n.start + n.len) as usize] {
                let d2 = dist2(&self.points[i as usize], query);
                if d2 < r2 {
                    out.push((i as usize, d2));
                }
            }
            return;
        }
        let delta = query[n.axis as usize] - n.split;
        let (near, far) = if delta <= 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.radius_search(near, query, r2, out);
        if delta * delta < r2 {
            self.radius_search(far, query, r2, out);
        }
    }
}

fn dist2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn insert_candidate(best: &mut Vec<(f64, u32)>, k: usize, d2: f64, i: u32) {
    let key = (d2, i);
    if best.len() == k {
        let worst = *best.last().unwrap();
        if (key.0, key.1) >= (worst.0, worst.1) {
            return;
        }
        best.pop();
    }
    let pos = best.partition_point(|&(d, j)| (d, j) < key);
    best.insert(pos, key);
}

fn build_node(points: &[Point], order: &mut [u32], start: usize, nodes: &mut Vec<Node>) -> u32 {
    let id = nodes.len() as u32;
    let len = order.len();
    nodes.push(Node {
        start: start as u32,
        len: len as u32,
        axis: 0,
        split: 0.0,
        left: NO_CHILD,
        right: NO_CHILD,
    });
    if len <= LEAF_SIZE {
        return id;
    }
    // split on the axis with the largest spread
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        let p = &points[i as usize];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap())
        .unwrap();
    if hi[axis] - lo[axis] == 0.0 {
        return id; // all points coincide, keep as leaf
    }
    let mid = len / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        let pa = points[a as usize][axis];
        let pb = points[b as usize][axis];
        (pa, a).partial_cmp(&(pb, b)).unwrap()
    });
    let split = points[order[mid] as usize][axis];
    let (left_slice, right_slice) = order.split_at_mut(mid);
    let left = build_node(points, left_slice, start, nodes);
    let right = build_node(points, right_slice, start + mid, nodes);
    let n = &mut nodes[id as usize];
    n.axis = axis as u8;
    n.split = split;
    n.left = left;
    n.right = right;
    id
}

/// Brute-force k-nearest neighbors; the oracle the kd-tree must agree with.
pub fn knn_brute_force(cloud: &PointCloud, query: &Point, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(f64, usize)> = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(p, query), i))
        .collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.truncate(k);
    all.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud {
            points: (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                    ]
                })
                .collect(),
        }
    }

    #[test]
    fn self_query_is_nearest() {
        let cloud = random_cloud(40, 1);
        let index = NeighborIndex::build(&cloud);
        for (i, p) in cloud.points.iter().enumerate() {
            let res = index.knn(p, 1).unwrap();
            assert_eq!(res[0].0, i);
            assert_eq!(res[0].1, 0.0);
        }
    }

    #[test]
    fn k_equals_n_returns_all_sorted() {
        let cloud = random_cloud(25, 2);
        let index = NeighborIndex::build(&cloud);
        let res = index.knn(&[0.1, 0.2, 0.3], 25).unwrap();
        assert_eq!(res.len(), 25);
        for w in res.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
        let mut seen: Vec<usize> = res.iter().map(|r| r.0).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..25).collect::<Vec<_>>());
    }

    #[test]
    fn matches_brute_force_small() {
        let cloud = random_cloud(50, 3);
        let index = NeighborIndex::build(&cloud);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let q = [
                rng.gen_range(-6.0..6.0),
                rng.gen_range(-6.0..6.0),
                rng.gen_range(-6.0..6.0),
            ];
            let got = index.knn(&q, 5).unwrap();
            let want = knn_brute_force(&cloud, &q, 5);
            assert_eq!(
                got.iter().map(|g| g.0).collect::<Vec<_>>(),
                want.iter().map(|w| w.0).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn tie_break_prefers_lower_index() {
        // duplicated points force distance ties
        let cloud = PointCloud::new(vec![
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
        ])
        .unwrap();
        let index = NeighborIndex::build(&cloud);
        let res = index.knn(&[0.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(res[0].0, 0);
        assert_eq!(res[1].0, 1);
    }

    #[test]
    fn rejects_bad_k() {
        let cloud = random_cloud(5, 5);
        let index = NeighborIndex::build(&cloud);
        assert!(index.knn(&[0.0; 3], 0).is_err());
        assert!(index.knn(&[0.0; 3], 6).is_err());
    }

    #[test]
    fn radius_matches_filtered_brute_force() {
        let cloud = random_cloud(80, 6);
        let index = NeighborIndex::build(&cloud);
        let q = [0.5, -0.5, 1.0];
        let r = 3.0;
        let got = index.radius(&q, r);
        let want: Vec<(usize, f64)> = knn_brute_force(&cloud, &q, 80)
            .into_iter()
            .filter(|(_, d)| *d < r)
            .collect();
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.0, w.0);
        }
    }
}
