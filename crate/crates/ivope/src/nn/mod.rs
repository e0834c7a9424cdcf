//! Minimal neural network stack: autodiff tape, MLPs, optimizers, and
//! density heads.

pub mod graph;
pub mod heads;
pub mod mlp;
pub mod optim;

pub use graph::{Gradients, Graph, NodeId};
pub use mlp::{Activation, Mlp, MlpVars};
pub use optim::{OptKind, Optimizer};

use ndarray::Array2;

/// Central finite-difference gradient of a scalar loss with respect to a
/// flat parameter list, compared against `autodiff` norm-wise.
///
/// Returns `||g_fd - g_ad|| / max(||g_fd||, ||g_ad||, 1e-12)`.
pub fn finite_difference_error(
    params: &[Array2<f64>],
    autodiff: &[Array2<f64>],
    h: f64,
    mut loss: impl FnMut(&[Array2<f64>]) -> f64,
) -> f64 {
    let mut work: Vec<Array2<f64>> = params.to_vec();
    let mut diff_sq = 0.0;
    let mut fd_sq = 0.0;
    let mut ad_sq = 0.0;
    for (pi, p) in params.iter().enumerate() {
        for idx in 0..p.len() {
            let (r, c) = (idx / p.ncols(), idx % p.ncols());
            let orig = work[pi][[r, c]];
            work[pi][[r, c]] = orig + h;
            let up = loss(&work);
            work[pi][[r, c]] = orig - h;
            let down = loss(&work);
            work[pi][[r, c]] = orig;
            let fd = (up - down) / (2.0 * h);
            let ad = autodiff[pi][[r, c]];
            diff_sq += (fd - ad) * (fd - ad);
            fd_sq += fd * fd;
            ad_sq += ad * ad;
        }
    }
    diff_sq.sqrt() / fd_sq.sqrt().max(ad_sq.sqrt()).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use ndarray::Array2;
    use rand::Rng;

    /// Builds a batch whose pre-activations stay away from ReLU kinks so
    /// central differences remain valid.
    fn kink_free_batch(mlp: &Mlp, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream_rng(seed, Stream::MonteCarlo);
        for _ in 0..200 {
            let x = Array2::from_shape_fn((n, mlp.input_dim()), |_| rng.gen::<f64>() * 4.0 - 2.0);
            if mlp.min_abs_preactivation(&x) >= 1e-3 {
                return x;
            }
        }
        panic!("no kink-free batch found");
    }

    #[test]
    fn mse_loss_gradcheck_on_two_layer_relu() {
        for seed in [0u64, 1, 2] {
            let mut rng = stream_rng(seed, Stream::Init);
            let mlp = Mlp::init(&[2, 8, 1], Activation::Relu, false, &mut rng);
            let x = kink_free_batch(&mlp, 6, seed + 100);
            let y = Array2::from_shape_fn((6, 1), |(i, _)| (i as f64) * 0.25 - 0.5);

            let loss_at = |params: &[Array2<f64>]| {
                let probe = Mlp {
                    layer_sizes: mlp.layer_sizes.clone(),
                    activation: mlp.activation,
                    layer_norm_first: mlp.layer_norm_first,
                    params: params.to_vec(),
                };
                let out = probe.forward_value(&x);
                (&out - &y).mapv(|d| d * d).mean().unwrap()
            };

            let mut g = Graph::new();
            let vars = mlp.insert_params(&mut g);
            let xn = g.constant(x.clone());
            let out = mlp.forward(&mut g, &vars, xn);
            let yn = g.constant(y.clone());
            let diff = g.sub(out, yn);
            let sq = g.square(diff);
            let loss = g.mean(sq);
            let mut grads = g.backward(loss);
            let ad: Vec<Array2<f64>> = vars
                .ids
                .iter()
                .zip(&mlp.params)
                .map(|(&id, p)| grads.take(id, p.dim()))
                .collect();

            let err = finite_difference_error(&mlp.params, &ad, 1e-5, loss_at);
            assert!(err < 1e-4, "seed {seed}: fd mismatch {err}");
        }
    }

    #[test]
    fn layernorm_elu_gradcheck() {
        let mut rng = stream_rng(3, Stream::Init);
        let mlp = Mlp::init(&[2, 6, 6, 1], Activation::Elu, true, &mut rng);
        let x = Array2::from_shape_fn((5, 2), |(i, j)| 0.3 * i as f64 - 0.7 * j as f64 + 0.11);

        let loss_at = |params: &[Array2<f64>]| {
            let probe = Mlp {
                layer_sizes: mlp.layer_sizes.clone(),
                activation: mlp.activation,
                layer_norm_first: mlp.layer_norm_first,
                params: params.to_vec(),
            };
            probe.forward_value(&x).mapv(|v| v * v).mean().unwrap()
        };

        let mut g = Graph::new();
        let vars = mlp.insert_params(&mut g);
        let xn = g.constant(x.clone());
        let out = mlp.forward(&mut g, &vars, xn);
        let sq = g.square(out);
        let loss = g.mean(sq);
        let mut grads = g.backward(loss);
        let ad: Vec<Array2<f64>> = vars
            .ids
            .iter()
            .zip(&mlp.params)
            .map(|(&id, p)| grads.take(id, p.dim()))
            .collect();
        let err = finite_difference_error(&mlp.params, &ad, 1e-5, loss_at);
        assert!(err < 1e-4, "fd mismatch {err}");
    }
}
