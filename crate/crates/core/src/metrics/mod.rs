//! Chamfer Distance and Earth Mover's Distance between point sets.
//!
//! Chamfer averages *squared* nearest-neighbor distances in both
//! directions; EMD is the mean *unsquared* distance under an optimal
//! bijection. The two conventions differ on purpose and must not be
//! harmonized.

mod auction;
mod hungarian;
mod report;

pub use report::{MetricReport, ObjectMetrics, SCALE_NOTE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::spatial::KdTree;
use crate::geometry::{dist, Frame, Point3, PointCloud};
use crate::tensor::{Graph, Var};

/// Largest set size accepted by [`emd_exact`].
pub const EXACT_EMD_LIMIT: usize = 512;
/// Chamfer switches from all-pairs search to a kd-tree at this size.
pub const CHAMFER_INDEX_THRESHOLD: usize = 64;
pub const DEFAULT_AUCTION_EPS: f64 = 1e-3;
pub const DEFAULT_AUCTION_ROUNDS: usize = 50_000_000;

/// A bijection between two equal-size point sets and its mean cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentPlan {
    /// `mapping[i]` is the index in the second set matched to point `i`.
    pub mapping: Vec<usize>,
    /// Mean Euclidean distance over matched pairs.
    pub total_cost: f64,
}

impl AssignmentPlan {
    /// Builds a plan, computing the mean matched distance in index order.
    pub fn from_mapping(s1: &[Point3], s2: &[Point3], mapping: Vec<usize>) -> Self {
        let total_cost = mean_matched_distance(s1, s2, &mapping);
        AssignmentPlan {
            mapping,
            total_cost,
        }
    }

    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.mapping.len()];
        self.mapping
            .iter()
            .all(|&j| j < seen.len() && !std::mem::replace(&mut seen[j], true))
    }
}

/// `(1/n) Σᵢ ‖s1[i] − s2[mapping[i]]‖`, summed in index order.
pub fn mean_matched_distance(s1: &[Point3], s2: &[Point3], mapping: &[usize]) -> f64 {
    let total: f64 = mapping
        .iter()
        .enumerate()
        .map(|(i, &j)| dist(&s1[i], &s2[j]))
        .sum();
    total / mapping.len() as f64
}

fn check_nonempty(s1: &PointCloud, s2: &PointCloud, op: &'static str) -> Result<()> {
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::EmptyCloud(op));
    }
    Ok(())
}

fn check_equal(s1: &PointCloud, s2: &PointCloud, op: &'static str) -> Result<()> {
    check_nonempty(s1, s2, op)?;
    if s1.len() != s2.len() {
        return Err(Error::SizeMismatch {
            left: s1.len(),
            right: s2.len(),
        });
    }
    Ok(())
}

/// Nearest squared distance from every point of `from` into `to`, by
/// exhaustive search.
pub fn nearest_sq_brute(from: &[Point3], to: &[Point3]) -> Vec<(usize, f64)> {
    from.iter()
        .map(|p| crate::geometry::spatial::nearest_brute(to, p).expect("non-empty target"))
        .collect()
}

/// Nearest squared distance from every point of `from` into `to`, through a
/// kd-tree.
pub fn nearest_sq_indexed(from: &[Point3], to: &[Point3]) -> Vec<(usize, f64)> {
    let tree = KdTree::new(to);
    from.iter()
        .map(|p| tree.nearest(p).expect("non-empty target"))
        .collect()
}

fn nearest_sq(from: &[Point3], to: &[Point3]) -> Vec<(usize, f64)> {
    if from.len().max(to.len()) >= CHAMFER_INDEX_THRESHOLD {
        nearest_sq_indexed(from, to)
    } else {
        nearest_sq_brute(from, to)
    }
}

fn chamfer_from(forward: &[(usize, f64)], backward: &[(usize, f64)]) -> f64 {
    let a: f64 = forward.iter().map(|(_, d)| d).sum();
    let b: f64 = backward.iter().map(|(_, d)| d).sum();
    a / forward.len() as f64 + b / backward.len() as f64
}

/// `(1/|S₁|) Σ_x min_y ‖x−y‖² + (1/|S₂|) Σ_y min_x ‖y−x‖²`.
pub fn chamfer(s1: &PointCloud, s2: &PointCloud) -> Result<f64> {
    check_nonempty(s1, s2, "chamfer")?;
    Ok(chamfer_from(
        &nearest_sq(s1.points(), s2.points()),
        &nearest_sq(s2.points(), s1.points()),
    ))
}

/// [`chamfer`] by all-pairs search only.
pub fn chamfer_brute(s1: &PointCloud, s2: &PointCloud) -> Result<f64> {
    check_nonempty(s1, s2, "chamfer")?;
    Ok(chamfer_from(
        &nearest_sq_brute(s1.points(), s2.points()),
        &nearest_sq_brute(s2.points(), s1.points()),
    ))
}

/// [`chamfer`] through the kd-tree only.
pub fn chamfer_indexed(s1: &PointCloud, s2: &PointCloud) -> Result<f64> {
    check_nonempty(s1, s2, "chamfer")?;
    Ok(chamfer_from(
        &nearest_sq_indexed(s1.points(), s2.points()),
        &nearest_sq_indexed(s2.points(), s1.points()),
    ))
}

/// Row-major matrix of Euclidean distances.
pub fn distance_matrix(s1: &[Point3], s2: &[Point3]) -> Vec<f64> {
    s1.iter()
        .flat_map(|p| s2.iter().map(move |q| dist(p, q)))
        .collect()
}

/// Globally optimal assignment minimizing the mean Euclidean distance.
pub fn emd_exact(s1: &PointCloud, s2: &PointCloud) -> Result<AssignmentPlan> {
    check_equal(s1, s2, "emd_exact")?;
    let n = s1.len();
    if n > EXACT_EMD_LIMIT {
        return Err(Error::TooLarge {
            n,
            max: EXACT_EMD_LIMIT,
        });
    }
    let cost = distance_matrix(s1.points(), s2.points());
    let mapping = hungarian::solve(&cost, n);
    Ok(AssignmentPlan::from_mapping(s1.points(), s2.points(), mapping))
}

/// Approximate assignment by the ε-scaling auction.
///
/// The returned mean cost is at most `eps · (cost range)` above the optimum.
/// `max_rounds` bounds the total number of bids; running out yields
/// [`Error::NotConverged`] carrying the best plan available.
pub fn emd_approx(
    s1: &PointCloud,
    s2: &PointCloud,
    eps: f64,
    max_rounds: usize,
) -> Result<AssignmentPlan> {
    check_equal(s1, s2, "emd_approx")?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "auction eps must be positive, got {eps}"
        )));
    }
    let (a, b) = (s1.points(), s2.points());
    let n = a.len();
    let cost = distance_matrix(a, b);
    let outcome = auction::run(&cost, n, eps, max_rounds, |m| mean_matched_distance(a, b, m));
    if outcome.converged {
        let mapping = outcome.mapping.expect("converged auction has a plan");
        return Ok(AssignmentPlan::from_mapping(a, b, mapping));
    }
    let best = outcome
        .mapping
        .or(outcome.fallback)
        .map(|m| Box::new(AssignmentPlan::from_mapping(a, b, m)));
    Err(Error::NotConverged {
        iterations: outcome.rounds,
        best,
    })
}

/// Auction settings used by the differentiable losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuctionSettings {
    pub eps: f64,
    pub max_rounds: usize,
}

impl Default for AuctionSettings {
    fn default() -> Self {
        AuctionSettings {
            eps: DEFAULT_AUCTION_EPS,
            max_rounds: DEFAULT_AUCTION_ROUNDS,
        }
    }
}

fn cloud_of(g: &Graph, v: Var, op: &'static str) -> Result<PointCloud> {
    let (_, c) = g.dims(v);
    if c != 3 {
        return Err(Error::Shape {
            op,
            lhs: g.shape(v).to_vec(),
            rhs: vec![3],
        });
    }
    PointCloud::from_flat(g.value(v), Frame::Canonical)
}

/// Differentiable EMD: the assignment is computed on detached coordinates
/// and held fixed, and the loss is the mean matched distance as a graph
/// expression of `predicted`.
pub fn emd_loss(
    g: &mut Graph,
    predicted: Var,
    target: &PointCloud,
    settings: AuctionSettings,
) -> Result<(Var, AssignmentPlan)> {
    let (loss, mut plans) = emd_loss_batch(g, predicted, std::slice::from_ref(target), settings)?;
    Ok((loss, plans.pop().expect("one plan per target")))
}

/// Mean of per-item [`emd_loss`] for `predicted` stacking `targets.len()`
/// equal-size clouds row-wise.
pub fn emd_loss_batch(
    g: &mut Graph,
    predicted: Var,
    targets: &[PointCloud],
    settings: AuctionSettings,
) -> Result<(Var, Vec<AssignmentPlan>)> {
    use rayon::prelude::*;

    let pred = cloud_of(g, predicted, "emd_loss")?;
    let per_item = split_items(&pred, targets)?;
    let plans: Vec<AssignmentPlan> = per_item
        .par_iter()
        .zip(targets)
        .map(|(p, t)| emd_approx(p, t, settings.eps, settings.max_rounds))
        .collect::<Result<_>>()?;
    let loss = emd_loss_with_plans(g, predicted, targets, &plans)?;
    Ok((loss, plans))
}

/// Mean matched distance of row-stacked predictions under given
/// assignments, as a graph expression of `predicted`.
pub fn emd_loss_with_plans(
    g: &mut Graph,
    predicted: Var,
    targets: &[PointCloud],
    plans: &[AssignmentPlan],
) -> Result<Var> {
    let rows = g.dims(predicted).0;
    let total: usize = plans.iter().map(|p| p.mapping.len()).sum();
    if plans.len() != targets.len() || total != rows {
        return Err(Error::SizeMismatch { left: rows, right: total });
    }
    let mut assigned = Vec::with_capacity(rows * 3);
    for (plan, t) in plans.iter().zip(targets) {
        for &j in &plan.mapping {
            let p = t.points().get(j).ok_or(Error::SizeMismatch {
                left: j,
                right: t.len(),
            })?;
            assigned.extend_from_slice(p);
        }
    }
    let target_rows = g.constant(vec![rows, 3], assigned)?;
    let diff = g.sub(predicted, target_rows)?;
    let norms = g.row_norms(diff);
    Ok(g.mean(norms))
}

fn split_items(pred: &PointCloud, targets: &[PointCloud]) -> Result<Vec<PointCloud>> {
    let total: usize = targets.iter().map(|t| t.len()).sum();
    if targets.is_empty() || total != pred.len() {
        return Err(Error::SizeMismatch {
            left: pred.len(),
            right: total,
        });
    }
    let mut out = Vec::with_capacity(targets.len());
    let mut start = 0;
    for t in targets {
        out.push(PointCloud::canonical(pred.points()[start..start + t.len()].to_vec())?);
        start += t.len();
    }
    Ok(out)
}

/// Differentiable Chamfer distance with nearest-neighbor pairings computed
/// on detached coordinates and held fixed.
pub fn chamfer_loss(g: &mut Graph, predicted: Var, target: &PointCloud) -> Result<Var> {
    chamfer_loss_batch(g, predicted, std::slice::from_ref(target))
}

/// Mean of per-item [`chamfer_loss`] over row-stacked predictions.
pub fn chamfer_loss_batch(g: &mut Graph, predicted: Var, targets: &[PointCloud]) -> Result<Var> {
    let pred = cloud_of(g, predicted, "chamfer_loss")?;
    let items = split_items(&pred, targets)?;
    let b = targets.len() as f64;
    let mut forward_targets = Vec::with_capacity(pred.len() * 3);
    let mut back_rows = Vec::new();
    let mut back_targets = Vec::new();
    let mut forward_weights = Vec::with_capacity(pred.len());
    let mut back_weights = Vec::new();
    let mut offset = 0;
    for (p, t) in items.iter().zip(targets) {
        for (j, _) in nearest_sq(p.points(), t.points()) {
            forward_targets.extend_from_slice(&t.points()[j]);
            forward_weights.push(1.0 / (p.len() as f64 * b));
        }
        for (y, (i, _)) in t.points().iter().zip(nearest_sq(t.points(), p.points())) {
            back_rows.push(offset + i);
            back_targets.extend_from_slice(y);
            back_weights.push(1.0 / (t.len() as f64 * b));
        }
        offset += p.len();
    }
    let fwd_t = g.constant(vec![pred.len(), 3], forward_targets)?;
    let fwd_w = g.constant(vec![pred.len(), 1], forward_weights)?;
    let d1 = g.sub(predicted, fwd_t)?;
    let sq1 = g.mul(d1, d1)?;
    let r1 = sq_rows(g, sq1)?;
    let w1 = g.mul(r1, fwd_w)?;
    let term1 = g.sum(w1);

    let gathered = g.gather_rows(predicted, &back_rows)?;
    let back_t = g.constant(vec![back_rows.len(), 3], back_targets)?;
    let back_w = g.constant(vec![back_rows.len(), 1], back_weights)?;
    let d2 = g.sub(back_t, gathered)?;
    let sq2 = g.mul(d2, d2)?;
    let r2 = sq_rows(g, sq2)?;
    let w2 = g.mul(r2, back_w)?;
    let term2 = g.sum(w2);
    g.add(term1, term2)
}

/// Sums the three columns of an `[n×3]` matrix into `[n×1]`.
fn sq_rows(g: &mut Graph, sq: Var) -> Result<Var> {
    let ones = g.constant(vec![3, 1], vec![1.0; 3])?;
    g.matmul(sq, ones)
}

/// Per-item CD and EMD of a prediction against its target; EMD is exact up
/// to [`EXACT_EMD_LIMIT`] points and auction-based above.
pub fn evaluate_pair(pred: &PointCloud, target: &PointCloud) -> Result<ObjectMetrics> {
    let cd = chamfer(pred, target)?;
    let emd = if pred.len() <= EXACT_EMD_LIMIT {
        emd_exact(pred, target)?.total_cost
    } else {
        emd_approx(pred, target, DEFAULT_AUCTION_EPS, DEFAULT_AUCTION_ROUNDS)?.total_cost
    };
    Ok(ObjectMetrics { cd, emd })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn two_point_pair() -> (PointCloud, PointCloud) {
        (
            PointCloud::canonical(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap(),
            PointCloud::canonical(vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap(),
        )
    }

    #[test]
    fn chamfer_examples() {
        let (a, b) = two_point_pair();
        assert_eq!(chamfer(&a, &b).unwrap(), 1.0);
        assert_eq!(chamfer(&b, &a).unwrap(), 1.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        let empty = PointCloud::canonical(vec![]).unwrap();
        assert!(matches!(chamfer(&a, &empty), Err(Error::EmptyCloud(_))));
    }

    #[test]
    fn emd_examples() {
        let (a, b) = two_point_pair();
        let plan = emd_exact(&a, &b).unwrap();
        assert_eq!(plan.mapping, vec![0, 1]);
        assert!((plan.total_cost - std::f64::consts::SQRT_2 / 2.0).abs() < 1e-12);
        let same = emd_exact(&a, &a).unwrap();
        assert_eq!(same.total_cost, 0.0);
        let approx = emd_approx(&a, &a, 1e-3, 1000).unwrap();
        assert_eq!(approx.total_cost, 0.0);
    }

    #[test]
    fn emd_errors() {
        let (a, _) = two_point_pair();
        let three = PointCloud::canonical(vec![[0.0; 3]; 3]).unwrap();
        assert!(matches!(emd_exact(&a, &three), Err(Error::SizeMismatch { .. })));
        let big = PointCloud::canonical(vec![[0.0; 3]; 513]).unwrap();
        assert!(matches!(emd_exact(&big, &big), Err(Error::TooLarge { .. })));
        assert!(emd_approx(&a, &a, 0.0, 10).is_err());
    }

    #[test]
    fn auction_reports_non_convergence_with_a_plan() {
        let a = PointCloud::canonical((0..20).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap();
        let b = PointCloud::canonical((0..20).map(|i| [0.0, i as f64 * 0.7, 1.0]).collect()).unwrap();
        match emd_approx(&a, &b, 1e-6, 5) {
            Err(Error::NotConverged { iterations, best }) => {
                assert_eq!(iterations, 5);
                assert!(best.unwrap().is_permutation());
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn emd_loss_gradient_matches_analytic_form() {
        let target = PointCloud::canonical(vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]).unwrap();
        let pred = Tensor::from_rows(&[[0.1, 0.2, -0.1], [0.8, 1.3, 0.9]]).unwrap();
        let mut g = Graph::new();
        let p = g.param(&pred);
        let (loss, plan) = emd_loss(&mut g, p, &target, AuctionSettings::default()).unwrap();
        assert_eq!(plan.mapping, vec![0, 1]);
        g.backward(loss).unwrap();
        let grad = g.grad(p).unwrap();
        for i in 0..2 {
            let q = target.points()[plan.mapping[i]];
            let d: Vec<f64> = (0..3).map(|k| pred.at(i, k) - q[k]).collect();
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            for k in 0..3 {
                assert!((grad[i * 3 + k] - d[k] / (2.0 * norm)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn emd_loss_is_zero_at_target() {
        let target = PointCloud::canonical(vec![[0.0, 0.5, 0.0], [1.0, 0.0, 0.25]]).unwrap();
        let mut g = Graph::new();
        let p = g.param(&Tensor::matrix(2, 3, target.flat()).unwrap());
        let (loss, _) = emd_loss(&mut g, p, &target, AuctionSettings::default()).unwrap();
        assert_eq!(g.scalar_value(loss), 0.0);
        g.backward(loss).unwrap();
        assert!(g.grad(p).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chamfer_loss_value_matches_metric() {
        let (a, b) = two_point_pair();
        let mut g = Graph::new();
        let p = g.param(&Tensor::matrix(2, 3, a.flat()).unwrap());
        let loss = chamfer_loss(&mut g, p, &b).unwrap();
        assert_eq!(g.scalar_value(loss), 1.0);
    }
}
