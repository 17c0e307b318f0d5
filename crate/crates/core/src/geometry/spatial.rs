//! Spatial indices for neighbor queries.
//!
//! Both structures report candidate indices only; callers compute distances
//! with [`super::dist2`] so indexed and brute-force paths compare the exact
//! same floating-point values.

use std::collections::HashMap;

use super::{dist2, Point3};

/// Hash grid with cubic cells of side `cell`; a radius query with
/// `radius ≤ cell` only needs the 27 surrounding cells.
pub struct UniformGrid {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl UniformGrid {
    pub fn new(points: &[Point3], cell: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(key(p, cell)).or_default().push(i);
        }
        UniformGrid { cell, cells }
    }

    /// Calls `f` for every point in the 3×3×3 block of cells around `p`.
    pub fn for_each_candidate(&self, p: &Point3, mut f: impl FnMut(usize)) {
        let [cx, cy, cz] = key(p, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(list) = self.cells.get(&[cx + dx, cy + dy, cz + dz]) {
                        list.iter().copied().for_each(&mut f);
                    }
                }
            }
        }
    }
}

fn key(p: &Point3, cell: f64) -> [i64; 3] {
    [
        (p[0] / cell).floor() as i64,
        (p[1] / cell).floor() as i64,
        (p[2] / cell).floor() as i64,
    ]
}

#[derive(Debug)]
struct KdNode {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

/// Static 3-d tree over a borrowed point slice.
#[derive(Debug)]
pub struct KdTree<'a> {
    points: &'a [Point3],
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Point3]) -> Self {
        let mut tree = KdTree {
            points,
            nodes: Vec::with_capacity(points.len()),
            root: None,
        };
        let mut idx: Vec<usize> = (0..points.len()).collect();
        tree.root = tree.build(&mut idx);
        tree
    }

    fn build(&mut self, idx: &mut [usize]) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = widest_axis(self.points, idx);
        let mid = idx.len() / 2;
        let pts = self.points;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let point = idx[mid];
        let (lo, rest) = idx.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = self.build(lo);
        let right = self.build(hi);
        self.nodes.push(KdNode {
            point,
            axis,
            left,
            right,
        });
        Some(self.nodes.len() - 1)
    }

    /// Index and squared distance of a nearest point to `q`; the lowest
    /// index wins among equidistant points.
    pub fn nearest(&self, q: &Point3) -> Option<(usize, f64)> {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(self.root, q, &mut best);
        (best.0 != usize::MAX).then_some(best)
    }

    fn search(&self, node: Option<usize>, q: &Point3, best: &mut (usize, f64)) {
        let Some(n) = node else { return };
        let node = &self.nodes[n];
        let p = &self.points[node.point];
        let d = dist2(p, q);
        if d < best.1 || (d == best.1 && node.point < best.0) {
            *best = (node.point, d);
        }
        let diff = q[node.axis] - p[node.axis];
        let (near, far) = if diff < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.search(near, q, best);
        // ≤ keeps equidistant candidates reachable for the index tie-break
        if diff * diff <= best.1 {
            self.search(far, q, best);
        }
    }
}

fn widest_axis(points: &[Point3], idx: &[usize]) -> usize {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in idx {
        for k in 0..3 {
            lo[k] = lo[k].min(points[i][k]);
            hi[k] = hi[k].max(points[i][k]);
        }
    }
    (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0)
}

/// Brute-force nearest neighbor with the same tie-break as [`KdTree`].
pub fn nearest_brute(points: &[Point3], q: &Point3) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, q);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud() -> impl Strategy<Value = Vec<Point3>> {
        prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..200)
    }

    proptest! {
        #[test]
        fn kdtree_matches_brute_force(points in cloud(), q in prop::array::uniform3(-1.5f64..1.5)) {
            let tree = KdTree::new(&points);
            prop_assert_eq!(tree.nearest(&q), nearest_brute(&points, &q));
        }
    }

    #[test]
    fn kdtree_handles_duplicates() {
        let points = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0; 3], [1.0, 0.0, 0.0]];
        let tree = KdTree::new(&points);
        assert_eq!(tree.nearest(&[0.9, 0.0, 0.0]).unwrap().0, 1);
        assert_eq!(tree.nearest(&[0.0; 3]).unwrap(), (0, 0.0));
    }
}
