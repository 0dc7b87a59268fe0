//! Reductions over contiguous column segments of a row, each with the
//! local gradient of the reduced value w.r.t. every segment element.

use super::kernels::softmax_inplace;

/// How a run of values collapses to one number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reduce {
    Max,
    Sum,
    Mean,
    /// Mean of the `max(1, floor(n/3))` largest values.
    TopKMean,
    /// `Σ softmax(x) ⊙ x`
    SoftmaxWeighted,
    /// `log Σ exp(x)`
    LogSumExp,
    /// `Σ (x - mean(x))`; identically zero, kept as a configurable variant.
    CenteredSum,
}

/// `k = max(1, floor(n / 3))`
pub fn topk_count(n: usize) -> usize {
    (n / 3).max(1)
}

/// Returns the reduced value and writes d(value)/d(x_c) into `weights`.
pub fn reduce_with_grad(kind: Reduce, xs: &[f64], weights: &mut [f64]) -> f64 {
    let n = xs.len();
    debug_assert!(n > 0 && weights.len() == n);
    match kind {
        Reduce::Max => {
            let mut best = 0;
            for (i, &v) in xs.iter().enumerate() {
                if v > xs[best] {
                    best = i;
                }
            }
            weights.fill(0.0);
            weights[best] = 1.0;
            xs[best]
        }
        Reduce::Sum => {
            weights.fill(1.0);
            xs.iter().sum()
        }
        Reduce::Mean => {
            weights.fill(1.0 / n as f64);
            xs.iter().sum::<f64>() / n as f64
        }
        Reduce::TopKMean => {
            let k = topk_count(n);
            let mut idx: Vec<usize> = (0..n).collect();
            // stable: ties keep the lower index first
            idx.sort_by(|&a, &b| xs[b].partial_cmp(&xs[a]).unwrap_or(std::cmp::Ordering::Equal));
            weights.fill(0.0);
            let mut s = 0.0;
            for &i in &idx[..k] {
                weights[i] = 1.0 / k as f64;
                s += xs[i];
            }
            s / k as f64
        }
        Reduce::SoftmaxWeighted => {
            weights.copy_from_slice(xs);
            softmax_inplace(weights);
            let f: f64 = weights.iter().zip(xs).map(|(p, x)| p * x).sum();
            for (w, &x) in weights.iter_mut().zip(xs) {
                *w *= 1.0 + x - f;
            }
            f
        }
        Reduce::LogSumExp => {
            weights.copy_from_slice(xs);
            softmax_inplace(weights);
            super::kernels::log_sum_exp(xs)
        }
        Reduce::CenteredSum => {
            let mean = xs.iter().sum::<f64>() / n as f64;
            // d/dx_c Σ_i (x_i - mean) = 1 - n * (1/n)
            weights.fill(0.0);
            xs.iter().map(|x| x - mean).sum()
        }
    }
}
