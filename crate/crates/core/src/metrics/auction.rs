//! Forward auction for the assignment problem with ε-scaling.
//!
//! Persons (rows of the cost matrix) bid for objects (columns). A bid raises
//! the object's price by the bidder's margin between its best and second-best
//! object plus ε, which makes every completed phase ε-optimal: its total cost
//! is within `n·ε` of the optimum. Phases run with ε = range/4, range/16, ...
//! and keep their prices, so later phases start close to equilibrium.

use std::collections::VecDeque;

const UNASSIGNED: usize = usize::MAX;

pub(crate) struct AuctionOutcome {
    /// Row → column mapping of the cheapest completed phase.
    pub mapping: Option<Vec<usize>>,
    pub rounds: usize,
    pub converged: bool,
    /// Partial state of the phase that ran out of rounds, completed greedily.
    pub fallback: Option<Vec<usize>>,
}

/// The ε values of successive phases: `range/4^k` for k = 1, 2, … down to
/// the first value at or below `eps_rel · range`. A smaller `eps_rel`
/// extends the same sequence.
pub(crate) fn schedule(range: f64, eps_rel: f64) -> Vec<f64> {
    let target = eps_rel * range;
    let mut phases = Vec::new();
    let mut eps = range / 4.0;
    loop {
        phases.push(eps);
        if eps <= target || phases.len() >= 64 {
            break;
        }
        eps /= 4.0;
    }
    phases
}

pub(crate) fn run(
    cost: &[f64],
    n: usize,
    eps_rel: f64,
    max_rounds: usize,
    total_cost: impl Fn(&[usize]) -> f64,
) -> AuctionOutcome {
    let lo = cost.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cost.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if n <= 1 || range <= 0.0 {
        return AuctionOutcome {
            mapping: Some((0..n).collect()),
            rounds: 0,
            converged: true,
            fallback: None,
        };
    }

    let mut prices = vec![0.0f64; n];
    let mut rounds = 0;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for eps in schedule(range, eps_rel) {
        let mut object_of = vec![UNASSIGNED; n];
        let mut owner_of = vec![UNASSIGNED; n];
        let mut queue: VecDeque<usize> = (0..n).collect();
        while let Some(person) = queue.pop_front() {
            if rounds >= max_rounds {
                return AuctionOutcome {
                    mapping: best.map(|(_, m)| m),
                    rounds,
                    converged: false,
                    fallback: Some(complete_greedily(object_of, &owner_of)),
                };
            }
            rounds += 1;
            let row = &cost[person * n..(person + 1) * n];
            let mut best_obj = 0;
            let mut best_val = f64::NEG_INFINITY;
            let mut second_val = f64::NEG_INFINITY;
            for (obj, (&c, &p)) in row.iter().zip(&prices).enumerate() {
                let value = -c - p;
                if value > best_val {
                    second_val = best_val;
                    best_val = value;
                    best_obj = obj;
                } else if value > second_val {
                    second_val = value;
                }
            }
            prices[best_obj] += best_val - second_val + eps;
            let previous = owner_of[best_obj];
            if previous != UNASSIGNED {
                object_of[previous] = UNASSIGNED;
                queue.push_back(previous);
            }
            owner_of[best_obj] = person;
            object_of[person] = best_obj;
        }
        let cost_now = total_cost(&object_of);
        if best.as_ref().is_none_or(|(c, _)| cost_now < *c) {
            best = Some((cost_now, object_of));
        }
    }
    AuctionOutcome {
        mapping: best.map(|(_, m)| m),
        rounds,
        converged: true,
        fallback: None,
    }
}

/// Fills unassigned persons with free objects in index order.
fn complete_greedily(mut object_of: Vec<usize>, owner_of: &[usize]) -> Vec<usize> {
    let mut free = (0..owner_of.len()).filter(|&o| owner_of[o] == UNASSIGNED);
    for slot in object_of.iter_mut() {
        if *slot == UNASSIGNED {
            *slot = free.next().expect("as many free objects as unassigned persons");
        }
    }
    object_of
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_prefix_extending() {
        let coarse = schedule(2.0, 1e-2);
        let fine = schedule(2.0, 1e-4);
        assert!(fine.len() > coarse.len());
        assert_eq!(&fine[..coarse.len()], &coarse[..]);
        assert!(*coarse.last().unwrap() <= 2.0 * 1e-2);
        assert_eq!(coarse[0], 0.5);
    }
}
