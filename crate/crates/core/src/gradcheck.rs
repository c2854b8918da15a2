//! Central finite-difference verification of [`Graph::backward`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_FD_EPS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub param: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates left out because every probe straddled a kink.
    pub skipped: usize,
}

/// Each retry shrinks the step by this factor.
pub const KINK_SHRINK: f64 = 0.1;
/// Step reductions tried before a coordinate is skipped.
pub const KINK_RETRIES: usize = 3;

/// Which coordinates of a parameter get perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many coordinates, drawn without replacement from `seed`.
    Sample { max: usize, seed: u64 },
}

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the backward-pass gradient of `param` against
/// `(L(θ + eps) - L(θ - eps)) / (2 eps)` per coordinate.
///
/// `build` constructs the graph from a parameter store and returns the loss
/// node; it is re-run twice for every checked coordinate.
///
/// The difference quotient is only meaningful when both probes stay on the
/// same linear piece of every relu/leaky_relu/abs. If a probe moves any of
/// their inputs across zero, the step is shrunk and retried; a coordinate
/// that still straddles a kink is counted as skipped.
pub fn finite_diff_check<F>(store: &ParamStore<f64>, param: &str, eps: f64, coverage: Coverage, build: F) -> Result<FdReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.backward(loss)?;
    let base_pattern = g.kink_pattern();
    let stored = store.get(param)?;
    // parameters the graph never read have a zero gradient
    let analytic = g.param_grad(param).unwrap_or_else(|| Tensor::zeros(stored.shape()));

    let n = stored.len();
    let indices: Vec<usize> = match coverage {
        Coverage::All => (0..n).collect(),
        Coverage::Sample { max, .. } if max >= n => (0..n).collect(),
        Coverage::Sample { max, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = sample(&mut rng, n, max).into_vec();
            v.sort_unstable();
            v
        }
    };

    let mut work = store.clone();
    let eval = |s: &ParamStore<f64>| -> Result<(f64, bool)> {
        let mut g = Graph::new();
        let l = build(&mut g, s)?;
        Ok((g.value(l).data()[0], g.kink_pattern() == base_pattern))
    };
    let mut report = FdReport {
        param: param.to_string(),
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut first = true;
    for i in indices {
        let orig = work.get(param)?.data()[i];
        let mut step = eps;
        let mut numeric = None;
        for _ in 0..=KINK_RETRIES {
            work.get_mut(param)?.data_mut()[i] = orig + step;
            let (plus, same_plus) = eval(&work)?;
            work.get_mut(param)?.data_mut()[i] = orig - step;
            let (minus, same_minus) = eval(&work)?;
            work.get_mut(param)?.data_mut()[i] = orig;
            if same_plus && same_minus {
                numeric = Some((plus - minus) / (2.0 * step));
                break;
            }
            step *= KINK_SHRINK;
        }
        let Some(numeric) = numeric else {
            report.skipped += 1;
            continue;
        };
        report.checked += 1;
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if first || err > report.max_rel_err {
            first = false;
            report.max_rel_err = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Runs [`finite_diff_check`] on every tensor in `store`.
pub fn check_all<F>(store: &ParamStore<f64>, eps: f64, coverage: Coverage, build: F) -> Result<Vec<FdReport>>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let cov_for = |k: usize| match coverage {
        Coverage::All => Coverage::All,
        Coverage::Sample { max, seed } => Coverage::Sample { max, seed: seed.wrapping_add(k as u64) },
    };
    store
        .names()
        .enumerate()
        .map(|(k, name)| finite_diff_check(store, name, eps, cov_for(k), &build))
        .collect()
}

pub fn worst(reports: &[FdReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::BackwardFault;
    use crate::tensor::Shape;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_fn(Shape::new(1, 1, 2, 3), |[_, _, h, w]| 0.3 * h as f64 - 0.2 * w as f64 + 0.1));
        s.insert("x", Tensor::from_fn(Shape::new(1, 1, 2, 3), |[_, _, h, w]| 1.0 + h as f64 + 0.5 * w as f64));
        s
    }

    #[test]
    fn linear_loss_is_exact() {
        let s = store();
        let r = finite_diff_check(&s, "w", DEFAULT_FD_EPS, Coverage::All, |g, s| {
            let w = g.param("w", s.get("w")?);
            let x = g.input(s.get("x")?.clone());
            let p = g.mul(w, x)?;
            g.sum(p)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-10, "{r:?}");
        assert_eq!(r.checked, 6);
    }

    #[test]
    fn corrupted_backward_is_flagged() {
        let s = store();
        let r = finite_diff_check(&s, "w", DEFAULT_FD_EPS, Coverage::All, |g, s| {
            g.inject_fault(BackwardFault { op: "mul", factor: 1.5 });
            let w = g.param("w", s.get("w")?);
            let x = g.param("x", s.get("x")?);
            let p = g.mul(w, x)?;
            let t = g.tanh(p)?;
            g.sum(t)
        })
        .unwrap();
        assert!(r.max_rel_err > 1e-2, "{r:?}");
    }

    #[test]
    fn sampled_coverage_is_bounded_and_deterministic() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_fn(Shape::new(1, 2, 4, 4), |[_, c, h, w]| (c + h * w) as f64 * 0.01));
        let build = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let w = g.param("w", s.get("w")?);
            let t = g.tanh(w)?;
            g.sum(t)
        };
        let a = finite_diff_check(&s, "w", 1e-4, Coverage::Sample { max: 5, seed: 9 }, build).unwrap();
        let b = finite_diff_check(&s, "w", 1e-4, Coverage::Sample { max: 5, seed: 9 }, build).unwrap();
        assert_eq!(a.checked, 5);
        assert_eq!(a, b);
    }
}
