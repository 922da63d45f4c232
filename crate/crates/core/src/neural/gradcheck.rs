//! Central finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::params::{EncoderParams, GradientSet};
use crate::error::{Error, Result};

/// Fewest coordinates a check may probe (unless the model has fewer).
pub const MIN_CHECKED_COORDINATES: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Tensor, flat offset, analytic and numeric value at the worst coordinate.
    pub worst: Option<(&'static str, usize, f64, f64)>,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `objective` against
/// `(f(θ+ε) − f(θ−ε)) / 2ε` on a seeded random subset of at least
/// [`MIN_CHECKED_COORDINATES`] coordinates (all of them if `samples` covers
/// the model).
pub fn grad_check<F>(
    params: &EncoderParams,
    objective: F,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&EncoderParams) -> Result<(f64, GradientSet)>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::InvalidArgument(format!("ε must lie in (0, 1e-3], got {eps}")));
    }
    let (_, analytic) = objective(params)?;

    let sizes: Vec<usize> = params.tensors().iter().map(|(_, _, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let wanted = samples.max(MIN_CHECKED_COORDINATES).min(total);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut coords = index::sample(&mut rng, total, wanted).into_vec();
    coords.sort_unstable();

    let analytic_flat: Vec<(&'static str, &[f64])> =
        analytic.tensors().into_iter().map(|(n, _, t)| (n, t)).collect();
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: coords.len(),
        worst: None,
    };
    for flat in coords {
        let (tensor, offset) = locate(&sizes, flat);
        let original = probe.tensors_mut()[tensor].1[offset];
        probe.tensors_mut()[tensor].1[offset] = original + eps;
        let plus = objective(&probe)?.0;
        probe.tensors_mut()[tensor].1[offset] = original - eps;
        let minus = objective(&probe)?.0;
        probe.tensors_mut()[tensor].1[offset] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        let (name, grad) = analytic_flat[tensor];
        let err = relative_error(grad[offset], numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((name, offset, grad[offset], numeric));
        }
    }
    Ok(report)
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (i, &n) in sizes.iter().enumerate() {
        if flat < n {
            return (i, flat);
        }
        flat -= n;
    }
    unreachable!("coordinate beyond parameter count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::params::ModelConfig;

    fn tiny() -> EncoderParams {
        EncoderParams::init(
            ModelConfig {
                dim: 3,
                vocab_size: 5,
                max_pos: 4,
                seed: 9,
            },
            true,
        )
        .unwrap()
    }

    /// f(θ) = Σ θ², gradient 2θ.
    fn squares(p: &EncoderParams) -> Result<(f64, GradientSet)> {
        let mut g = GradientSet::zeros_for(p);
        let mut loss = 0.0;
        for ((_, src), (_, dst)) in p.clone().tensors_mut().into_iter().zip(g.tensors_mut()) {
            for (s, d) in src.iter().zip(dst.iter_mut()) {
                loss += s * s;
                *d = 2.0 * s;
            }
        }
        Ok((loss, g))
    }

    #[test]
    fn exact_gradient_passes() {
        let r = grad_check(&tiny(), squares, 1e-5, 0, 1).unwrap();
        assert_eq!(r.checked, tiny().num_parameters());
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn zeroed_gradient_is_caught() {
        let broken = |p: &EncoderParams| {
            let (l, mut g) = squares(p)?;
            g.w_k.fill(0.0);
            Ok((l, g))
        };
        let r = grad_check(&tiny(), broken, 1e-5, 0, 1).unwrap();
        assert!((r.max_rel_error - 1.0).abs() < 1e-6, "{r:?}");
        assert_eq!(r.worst.unwrap().0, "w_k");
    }

    #[test]
    fn epsilon_bounds() {
        assert!(grad_check(&tiny(), squares, 0.0, 0, 1).is_err());
        assert!(grad_check(&tiny(), squares, 1e-2, 0, 1).is_err());
        assert!(grad_check(&tiny(), squares, f64::NAN, 0, 1).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 0.0) - 1.0).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
