//! Central finite-difference checks of analytic gradients.

use crate::error::Result;
use crate::tensor::Tensor;

/// Floor on the denominator of the relative error, so entries whose true
/// derivative is ~0 are judged on an absolute scale.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Worst relative error per input tensor.
    pub max_rel_err: Vec<f64>,
    pub entries_checked: usize,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares `backward()` against central differences for a scalar function
/// of `inputs`. `entries` optionally restricts which flat indices are probed
/// per input (all when `None`).
pub fn check<F>(f: F, inputs: &[Tensor], h: f64, entries: Option<&dyn Fn(usize, usize) -> Vec<usize>>) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    check_steps(f, inputs, &[h], 0.0, entries)
}

/// Like [`check`], but estimates each entry at every step in `steps`
/// (decreasing) and keeps the largest-step estimate that agrees with the
/// next smaller step. Two estimates agree when they differ by at most
/// `agree` relative plus their roundoff bounds (`4 eps |f| / h` each). A
/// ReLU kink within the larger steps then falls back to a smaller one
/// instead of poisoning the estimate. Without any agreeing pair the
/// closest pair is used.
pub fn check_steps<F>(
    f: F,
    inputs: &[Tensor],
    steps: &[f64],
    agree: f64,
    entries: Option<&dyn Fn(usize, usize) -> Vec<usize>>,
) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    assert!(!steps.is_empty(), "at least one step");
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.to_param()).collect();
    let loss = f(&leaves)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|t| t.grad_or_zeros()).collect();
    let noise: Vec<f64> = steps.iter().map(|h| 4.0 * f64::EPSILON * loss.item().abs() / h).collect();

    let mut max_rel_err = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    for (i, base) in inputs.iter().enumerate() {
        let idx = match entries {
            Some(pick) => pick(i, base.numel()),
            None => (0..base.numel()).collect(),
        };
        let mut worst: f64 = 0.0;
        for j in idx {
            let eval = |delta: f64| -> Result<f64> {
                let mut args: Vec<Tensor> = inputs.iter().map(|t| t.stop_gradient()).collect();
                let mut d = base.to_vec();
                d[j] += delta;
                args[i] = Tensor::new(d, base.shape())?;
                Ok(f(&args)?.item())
            };
            let mut estimates = Vec::with_capacity(steps.len());
            for &h in steps {
                estimates.push((eval(h)? - eval(-h)?) / (2.0 * h));
            }
            // excess disagreement of each adjacent pair beyond what roundoff explains
            let excess: Vec<f64> = (0..estimates.len().saturating_sub(1))
                .map(|k| {
                    let (x, y) = (estimates[k], estimates[k + 1]);
                    let scale = x.abs().max(y.abs()).max(REL_FLOOR);
                    ((x - y).abs() - noise[k] - noise[k + 1]) / scale
                })
                .collect();
            let numeric = match excess.iter().position(|&e| e <= agree) {
                Some(k) => estimates[k],
                None => excess
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .map_or(estimates[0], |(k, _)| estimates[k]),
            };
            worst = worst.max(relative_error(analytic[i][j], numeric));
            checked += 1;
        }
        max_rel_err.push(worst);
    }
    Ok(GradCheck {
        max_rel_err,
        entries_checked: checked,
    })
}
