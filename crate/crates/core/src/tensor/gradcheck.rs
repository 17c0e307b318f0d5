//! Central finite-difference gradient checking.
//!
//! The checker rebuilds the forward computation from scratch for every
//! perturbed input, so it depends only on forward values and never on the
//! recorded backward rules it is verifying.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Small enough that ReLU and max kinks are rarely straddled, large enough
/// that f64 round-off stays far below a 1e-4 relative tolerance.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Denominator floor of the relative error, so gradients near zero are
/// compared on an absolute scale instead of dividing by noise.
pub const REL_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)` over
    /// every checked element.
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Checks `d(Σ wᵢ·fᵢ)/d(inputs)` where `f` is the tensor built by `build`
/// and `w` is a fixed random projection (seeded by `projection_seed`).
///
/// `build` receives the graph and one differentiable [`Var`] per input and
/// must be a deterministic function of the input values.
pub fn check<F>(inputs: &[Tensor], step: f64, projection_seed: u64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_sampled(inputs, step, projection_seed, None, build)
}

/// Like [`check`], but compares at most `per_input` elements of every input,
/// picked at random (seeded by `projection_seed`). `None` checks them all.
pub fn check_sampled<F>(
    inputs: &[Tensor],
    step: f64,
    projection_seed: u64,
    per_input: Option<usize>,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let projection = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
        let out = build(&mut g, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(projection_seed);
        (0..g.value(out).len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<f64>>()
    };

    let project = |g: &mut Graph, out: Var| -> Result<Var> {
        let w = g.constant(g.shape(out).to_vec(), projection.clone())?;
        let prod = g.mul(out, w)?;
        Ok(g.sum(prod))
    };

    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
        let out = build(&mut g, &vars)?;
        let loss = project(&mut g, out)?;
        g.backward(loss)?;
        vars.iter()
            .map(|&v| {
                g.grad(v)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; g.value(v).len()])
            })
            .collect()
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t)).collect();
        let out = build(&mut g, &vars)?;
        let loss = project(&mut g, out)?;
        Ok(g.scalar_value(loss))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut pick_rng = ChaCha8Rng::seed_from_u64(projection_seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let elements: Vec<usize> = match per_input {
            Some(k) if k < input.numel() => rand::seq::index::sample(&mut pick_rng, input.numel(), k).into_vec(),
            _ => (0..input.numel()).collect(),
        };
        for ei in elements {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[ti][ei];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_correct_gradient() {
        let x = Tensor::vector(vec![0.3, -0.7, 1.1]).unwrap();
        let report = check(&[x], DEFAULT_STEP, 1, |g, v| Ok(g.tanh(v[0]))).unwrap();
        assert!(report.passes(1e-6), "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn sampling_limits_the_checked_elements() {
        let x = Tensor::vector((0..20).map(|i| i as f64 / 10.0 - 1.0).collect()).unwrap();
        let report = check_sampled(&[x], DEFAULT_STEP, 1, Some(5), |g, v| Ok(g.tanh(v[0]))).unwrap();
        assert_eq!(report.checked, 5);
        assert!(report.passes(1e-6));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at exactly zero: analytic says 0, numeric says 0.5
        let x = Tensor::vector(vec![0.0]).unwrap();
        let report = check(&[x], DEFAULT_STEP, 1, |g, v| Ok(g.relu(v[0]))).unwrap();
        assert!(!report.passes(1e-4));
    }
}
