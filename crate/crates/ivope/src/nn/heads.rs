//! Categorical and Gaussian-mixture output heads for conditional density
//! estimation (Deep IV stage 1).

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::nn::graph::{Graph, NodeId};

const LOG_2PI: f64 = 1.8378770664093453; // ln(2*pi)

/// Log-probability of target class indices under row-wise logits.
/// `logits`: `n x k`, `targets.len() == n`; returns an `n x 1` node.
pub fn categorical_logprob(g: &mut Graph, logits: NodeId, targets: &[usize]) -> NodeId {
    let ls = g.log_softmax_rows(logits);
    g.gather_cols(ls, targets.to_vec())
}

/// Log-density of scalar targets under a row-wise Gaussian mixture with
/// `k` components described by weight logits, means, and log-scales
/// (all `n x k`). Uses log-sum-exp throughout; scales are `exp(log_scale)`
/// so they stay positive.
pub fn mixture_logprob(
    g: &mut Graph,
    weight_logits: NodeId,
    means: NodeId,
    log_scales: NodeId,
    targets: &Array1<f64>,
) -> NodeId {
    let n = targets.len();
    let y = g.constant(
        Array2::from_shape_vec((n, 1), targets.to_vec()).expect("targets shape"),
    );
    let log_w = g.log_softmax_rows(weight_logits);
    // z = (y - mu) * exp(-log_scale)
    let diff = g.sub(y, means);
    let neg_ls = g.neg(log_scales);
    let inv_scale = g.exp(neg_ls);
    let z = g.mul(diff, inv_scale);
    let z2 = g.square(z);
    let half_z2 = g.scale(0.5, z2);
    // component log density: log_w - log_scale - z^2/2 - ln(2pi)/2
    let a = g.sub(log_w, log_scales);
    let b = g.sub(a, half_z2);
    let c = g.add_scalar(-0.5 * LOG_2PI, b);
    g.logsumexp_rows(c)
}

/// Value-level categorical probabilities from logits (row-wise softmax).
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Samples a class index per row of a probability matrix.
pub fn sample_rows(probs: &Array2<f64>, rng: &mut impl Rng) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut last = 0;
            for (i, &p) in row.iter().enumerate() {
                acc += p;
                last = i;
                if u < acc {
                    return i;
                }
            }
            last
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    #[test]
    fn uniform_categorical_logprob() {
        let mut g = Graph::new();
        let logits = g.constant(Array2::zeros((2, 5)));
        let lp = categorical_logprob(&mut g, logits, &[0, 4]);
        for i in 0..2 {
            assert_abs_diff_eq!(g.value(lp)[[i, 0]], (1.0f64 / 5.0).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn single_gaussian_at_mean() {
        // One component, target == mean: log density = -0.5 ln(2 pi sigma^2).
        let sigma: f64 = 0.37;
        let mut g = Graph::new();
        let w = g.constant(Array2::zeros((1, 1)));
        let mu = g.constant(arr2(&[[1.5]]));
        let ls = g.constant(arr2(&[[sigma.ln()]]));
        let lp = mixture_logprob(&mut g, w, mu, ls, &ndarray::arr1(&[1.5]));
        let expect = -0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
        assert_abs_diff_eq!(g.value(lp)[[0, 0]], expect, epsilon = 1e-12);
    }

    #[test]
    fn two_component_mixture_matches_hand_sum() {
        // Hand-summed density of 0.3 N(0,1) + 0.7 N(2, 0.5^2) at y = 1.
        let y = 1.0f64;
        let w = [0.3f64, 0.7];
        let mu = [0.0f64, 2.0];
        let sd = [1.0f64, 0.5];
        let dens: f64 = (0..2)
            .map(|k| {
                w[k] * (-0.5 * ((y - mu[k]) / sd[k]).powi(2)).exp()
                    / (sd[k] * (2.0 * std::f64::consts::PI).sqrt())
            })
            .sum();
        let mut g = Graph::new();
        let wl = g.constant(arr2(&[[w[0].ln(), w[1].ln()]]));
        let mus = g.constant(arr2(&[[mu[0], mu[1]]]));
        let lss = g.constant(arr2(&[[sd[0].ln(), sd[1].ln()]]));
        let lp = mixture_logprob(&mut g, wl, mus, lss, &ndarray::arr1(&[y]));
        assert_abs_diff_eq!(g.value(lp)[[0, 0]], dens.ln(), epsilon = 1e-12);
    }

    #[test]
    fn mixture_logprob_never_nan_for_extreme_targets() {
        for &target in &[-1e6f64, 0.0, 1e6] {
            for &scale in &[1e-6f64, 1.0, 1e3] {
                let mut g = Graph::new();
                let w = g.constant(Array2::zeros((1, 2)));
                let mu = g.constant(arr2(&[[0.0, 5.0]]));
                let ls = g.constant(arr2(&[[scale.ln(), scale.ln()]]));
                let lp = mixture_logprob(&mut g, w, mu, ls, &ndarray::arr1(&[target]));
                assert!(
                    !g.value(lp)[[0, 0]].is_nan(),
                    "NaN at target={target}, scale={scale}"
                );
            }
        }
    }

    #[test]
    fn sample_rows_is_deterministic_in_seed() {
        let probs = softmax_rows(&arr2(&[[0.0, 1.0, 2.0], [2.0, 1.0, 0.0]]));
        let mut r1 = crate::rng::stream_rng(3, crate::rng::Stream::MonteCarlo);
        let mut r2 = crate::rng::stream_rng(3, crate::rng::Stream::MonteCarlo);
        assert_eq!(sample_rows(&probs, &mut r1), sample_rows(&probs, &mut r2));
    }
}
