//! Linear-in-features estimators: 2SLS, LSTD-Q, Bellman residual
//! minimization, iterative FQE, and kernel IV over random Fourier features.

use std::io::Write;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::data::TransitionDataset;
use crate::env::{Policy, StateEmbedding};
use crate::error::{Error, Result};
use crate::evaluation::QFunction;
use crate::features::{
    rff_features, state_action_concat, FeatureMap, RandomFourier, RffSpec, StateActionConcat,
};
use crate::linalg::{cholesky_solve, solve_square_guarded, SpdFactor, COND_GUARD};
use crate::rng::{stream_rng, Stream};

/// Linear Q function `Q(s,a) = phi(s,a) . theta`.
#[derive(Clone)]
pub struct LinearQ {
    pub map: Arc<dyn FeatureMap>,
    pub embedding: StateEmbedding,
    pub theta: Array1<f64>,
}

impl LinearQ {
    /// Exports theta as a CSV vector, prefixed by the feature-map
    /// descriptor.
    pub fn export_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "# feature_map: {} dim: {}", self.map.descriptor(), self.theta.len())?;
        writeln!(w, "index,theta")?;
        for (i, v) in self.theta.iter().enumerate() {
            writeln!(w, "{i},{v}")?;
        }
        Ok(())
    }
}

impl QFunction for LinearQ {
    fn q(&self, state: usize, action: usize) -> f64 {
        let x = [self.embedding.embed(state)];
        let phi = self.map.apply(&x, action).expect("feature application");
        phi.dot(&self.theta)
    }
}

/// Design matrices of one dataset pass: `phi(s,a)` rows, `phi(s',a')` rows
/// with `a' ~ pi(.|s')` drawn once at fit time, and rewards. Terminal rows
/// carry a zero next-feature row.
pub struct DesignMatrices {
    pub phi: Array2<f64>,
    pub phi_prime: Array2<f64>,
    pub rewards: Array1<f64>,
}

impl DesignMatrices {
    /// `phi - gamma * phi_prime`.
    pub fn regressor(&self, gamma: f64) -> Array2<f64> {
        &self.phi - &(&self.phi_prime * gamma)
    }
}

/// Builds design matrices, drawing `n_prime_draws` independent next-action
/// samples per row (1 for LSTD/FQE, 2 for DBRM). Next actions are drawn for
/// every row, terminal or not, so RNG consumption does not depend on the
/// terminal pattern; terminal rows then have their next-feature rows zeroed.
pub fn build_design(
    data: &TransitionDataset,
    policy: &Policy,
    embedding: &StateEmbedding,
    map: &dyn FeatureMap,
    n_prime_draws: usize,
    seed: u64,
) -> Result<(DesignMatrices, Vec<Array2<f64>>)> {
    let n = data.len();
    if n == 0 {
        return Err(Error::invalid("empty dataset"));
    }
    let d = map.dim();
    let mut phi = Array2::zeros((n, d));
    let mut primes: Vec<Array2<f64>> = (0..n_prime_draws).map(|_| Array2::zeros((n, d))).collect();
    let mut rewards = Array1::zeros(n);
    let mut rng = stream_rng(seed, Stream::ActionResample);
    let mut buf = vec![0.0; d];
    for (i, t) in data.transitions.iter().enumerate() {
        let x = [embedding.embed(t.state)];
        map.write(&x, t.action, &mut buf)?;
        phi.row_mut(i).assign(&ArrayView1::from(&buf[..]));
        rewards[i] = t.reward;
        let xp = [embedding.embed(t.next_state)];
        for prime in primes.iter_mut() {
            let ap = policy.sample(t.next_state, &mut rng);
            if !t.terminal {
                map.write(&xp, ap, &mut buf)?;
                prime.row_mut(i).assign(&ArrayView1::from(&buf[..]));
            }
        }
    }
    let first = if n_prime_draws > 0 {
        primes.remove(0)
    } else {
        Array2::zeros((n, d))
    };
    Ok((
        DesignMatrices {
            phi,
            phi_prime: first,
            rewards,
        },
        primes,
    ))
}

/// 2SLS estimator `theta = (Z^T X)^{-1} (Z^T Y)`, solved by a
/// rank-revealing factorization with a condition-number guard.
pub fn two_stage_least_squares(
    z: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    two_stage_least_squares_ridge(z, x, y, 0.0)
}

/// 2SLS with an optional ridge jitter added to `Z^T X`.
pub fn two_stage_least_squares_ridge(
    z: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    ridge: f64,
) -> Result<Array1<f64>> {
    if z.dim() != x.dim() {
        return Err(Error::ShapeMismatch(format!(
            "Z is {:?}, X is {:?}; 2SLS needs dim(Z) = dim(X)",
            z.dim(),
            x.dim()
        )));
    }
    if z.nrows() != y.len() {
        return Err(Error::ShapeMismatch("row count of Z/X vs Y".into()));
    }
    let mut a = z.t().dot(&x);
    if ridge != 0.0 {
        for i in 0..a.nrows() {
            a[[i, i]] += ridge;
        }
    }
    let b = z.t().dot(&y);
    solve_square_guarded(a.view(), b.view(), COND_GUARD, " — consider a ridge jitter")
}

/// LSTD-Q: 2SLS with instrument `phi(s,a)` and regressor
/// `phi(s,a) - gamma * phi(s',a')`.
pub fn lstd_q(
    data: &TransitionDataset,
    policy: &Policy,
    embedding: &StateEmbedding,
    map: Arc<dyn FeatureMap>,
    gamma: f64,
    ridge: f64,
    seed: u64,
) -> Result<LinearQ> {
    let (design, _) = build_design(data, policy, embedding, map.as_ref(), 1, seed)?;
    let x = design.regressor(gamma);
    let theta =
        two_stage_least_squares_ridge(design.phi.view(), x.view(), design.rewards.view(), ridge)?;
    Ok(LinearQ {
        map,
        embedding: embedding.clone(),
        theta,
    })
}

/// Linear Bellman residual minimization with two independent next-action
/// draws: the product-form objective is quadratic in theta and solved by
/// its normal equations `M theta = b` with the symmetrized cross-moment
/// `M = (X1^T X2 + X2^T X1) / 2` and `b = (X1 + X2)^T r / 2`.
pub fn linear_dbrm(
    data: &TransitionDataset,
    policy: &Policy,
    embedding: &StateEmbedding,
    map: Arc<dyn FeatureMap>,
    gamma: f64,
    seed: u64,
) -> Result<LinearQ> {
    let (design, mut extra) = build_design(data, policy, embedding, map.as_ref(), 2, seed)?;
    let x1 = design.regressor(gamma);
    let phi_prime2 = extra.remove(0);
    let x2 = &design.phi - &(&phi_prime2 * gamma);
    let cross = x1.t().dot(&x2);
    let m = (&cross + &cross.t()) / 2.0;
    let b = (&x1 + &x2).t().dot(&design.rewards) / 2.0;
    let theta = cholesky_solve(m.view(), b.view())?;
    Ok(LinearQ {
        map,
        embedding: embedding.clone(),
        theta,
    })
}

/// Iterative linear FQE:
/// `theta_k = (Phi^T Phi + ridge I)^{-1} Phi^T (R + gamma Phi' theta_{k-1})`
/// from `theta_0 = 0`. Diverging iterates (norm above 1e8) abort.
pub fn linear_fqe(
    data: &TransitionDataset,
    policy: &Policy,
    embedding: &StateEmbedding,
    map: Arc<dyn FeatureMap>,
    gamma: f64,
    n_iters: usize,
    ridge: f64,
    seed: u64,
) -> Result<LinearQ> {
    let (q, _) = linear_fqe_trace(data, policy, embedding, map, gamma, n_iters, ridge, seed, false)?;
    Ok(q)
}

/// [`linear_fqe`] that optionally records every iterate (for
/// error-versus-iteration curves).
#[allow(clippy::too_many_arguments)]
pub fn linear_fqe_trace(
    data: &TransitionDataset,
    policy: &Policy,
    embedding: &StateEmbedding,
    map: Arc<dyn FeatureMap>,
    gamma: f64,
    n_iters: usize,
    ridge: f64,
    seed: u64,
    keep_trace: bool,
) -> Result<(LinearQ, Vec<Array1<f64>>)> {
    let (design, _) = build_design(data, policy, embedding, map.as_ref(), 1, seed)?;
    let mut gram = design.phi.t().dot(&design.phi);
    if ridge != 0.0 {
        for i in 0..gram.nrows() {
            gram[[i, i]] += ridge;
        }
    }
    let factor = SpdFactor::new(gram.view())?;
    let mut theta = Array1::zeros(map.dim());
    let mut trace = Vec::new();
    for k in 0..n_iters {
        let target = &design.rewards + &(design.phi_prime.dot(&theta) * gamma);
        theta = factor.solve_vec(design.phi.t().dot(&target).view());
        let norm = theta.dot(&theta).sqrt();
        if !norm.is_finite() || norm > 1e8 {
            return Err(Error::Divergence(format!(
                "FQE iterate {k} has norm {norm:.3e}; features are unstable"
            )));
        }
        if keep_trace {
            trace.push(theta.clone());
        }
    }
    Ok((
        LinearQ {
            map,
            embedding: embedding.clone(),
            theta,
        },
        trace,
    ))
}

/// Kernel IV fit: random Fourier treatment features `phi` and instrument
/// features `psi`, two closed-form ridge stages.
pub struct KernelIvFit {
    pub q: LinearQ,
    /// Stage-1 coefficient matrix `V` (`d_phi x d_psi`).
    pub v_hat: Array2<f64>,
    phi_map: Arc<StateActionConcat<RandomFourier>>,
    psi_map: Arc<StateActionConcat<RandomFourier>>,
    gamma: f64,
}

/// Two-stage kernel IV over random Fourier features.
///
/// Stage 1 ridge-regresses `phi(s',a')` on `psi(s,a)` (multi-target, closed
/// form); stage 2 ridge-regresses `r` on `phi(s,a) - gamma * Vhat psi(s,a)`.
pub fn kernel_iv(
    data: &TransitionDataset,
    policy: &Policy,
    embedding: &StateEmbedding,
    rff_x: RffSpec,
    rff_z: RffSpec,
    lambda1: f64,
    lambda2: f64,
    gamma: f64,
    seed: u64,
) -> Result<KernelIvFit> {
    if !(lambda1 > 0.0 && lambda2 > 0.0) {
        return Err(Error::invalid("lambda1 and lambda2 must be positive"));
    }
    let n_actions = policy.n_actions();
    let phi_map = Arc::new(state_action_concat(rff_features(rff_x), n_actions)?);
    let psi_map = Arc::new(state_action_concat(rff_features(rff_z), n_actions)?);
    let n = data.len() as f64;

    let (phi_design, _) = build_design(data, policy, embedding, phi_map.as_ref(), 1, seed)?;
    let (psi_design, _) = build_design(data, policy, embedding, psi_map.as_ref(), 0, seed)?;
    let psi = &psi_design.phi;

    // Stage 1: Vhat = argmin E||phi(s',a') - V psi(s,a)||^2 + l1 ||V||^2.
    let mut a = psi.t().dot(psi) / n;
    for i in 0..a.nrows() {
        a[[i, i]] += lambda1;
    }
    let factor = SpdFactor::new(a.view())?;
    let vt = factor.solve_mat((psi.t().dot(&phi_design.phi_prime) / n).view()); // d_psi x d_phi
    let v_hat = vt.t().to_owned();

    // Stage 2: theta = argmin E||r - theta . (phi(s,a) - gamma Vhat psi)||^2
    //                 + l2 ||theta||^2.
    let u = &phi_design.phi - &(psi.dot(&vt) * gamma);
    let mut b = u.t().dot(&u) / n;
    for i in 0..b.nrows() {
        b[[i, i]] += lambda2;
    }
    let theta = cholesky_solve(b.view(), (u.t().dot(&phi_design.rewards) / n).view())?;

    Ok(KernelIvFit {
        q: LinearQ {
            map: phi_map.clone(),
            embedding: embedding.clone(),
            theta,
        },
        v_hat,
        phi_map,
        psi_map,
        gamma,
    })
}

impl KernelIvFit {
    /// Stage-2 loss without regularization on a held-out dataset; the
    /// hyperparameter-selection metric.
    pub fn stage2_validation_loss(
        &self,
        data: &TransitionDataset,
        policy: &Policy,
        embedding: &StateEmbedding,
        seed: u64,
    ) -> Result<f64> {
        let (phi_design, _) =
            build_design(data, policy, embedding, self.phi_map.as_ref(), 0, seed)?;
        let (psi_design, _) =
            build_design(data, policy, embedding, self.psi_map.as_ref(), 0, seed)?;
        let u = &phi_design.phi - &(psi_design.phi.dot(&self.v_hat.t()) * self.gamma);
        let pred = u.dot(&self.q.theta);
        let resid = &phi_design.rewards - &pred;
        Ok(resid.dot(&resid) / data.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_chain_dataset;
    use crate::env::{chain_closed_form_q, make_chain_mdp};
    use crate::features::GaussianGrid;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn chain_setup(
        p: f64,
        n: usize,
        d: usize,
        seed: u64,
    ) -> (
        crate::env::TabularMdp,
        Policy,
        StateEmbedding,
        Arc<dyn FeatureMap>,
        TransitionDataset,
    ) {
        let mdp = make_chain_mdp(100, p, 0.99).unwrap();
        let policy = Policy::single_action(100);
        let embedding = StateEmbedding::chain(100);
        let map: Arc<dyn FeatureMap> =
            Arc::new(state_action_concat(GaussianGrid::new(d).unwrap(), 1).unwrap());
        let data = generate_chain_dataset(&mdp, n, seed).unwrap();
        (mdp, policy, embedding, map, data)
    }

    #[test]
    fn tsls_reduces_to_ols_when_instrument_is_regressor() {
        // y = 3 x0 - 2 x1 exactly.
        let x = arr2(&[
            [1.0, 0.0],
            [0.0, 1.0],
            [1.0, 1.0],
            [2.0, -1.0],
            [0.5, 0.25],
        ]);
        let y = arr1(&[3.0, -2.0, 1.0, 8.0, 1.0]);
        let theta = two_stage_least_squares(x.view(), x.view(), y.view()).unwrap();
        assert_abs_diff_eq!(theta[0], 3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(theta[1], -2.0, epsilon = 1e-10);
    }

    #[test]
    fn tsls_beats_ols_under_confounding() {
        // Z ~ N(0,1), eps ~ N(0,1), X = Z + eps, Y = 2X - 2eps. OLS has
        // plim 2 + cov(X, -2eps)/var(X) = 1; 2SLS recovers 2.
        let n = 100_000;
        let mut rng = stream_rng(13, Stream::MonteCarlo);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut z = Array2::zeros((n, 1));
        let mut x = Array2::zeros((n, 1));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let zi = normal.sample(&mut rng);
            let ei = normal.sample(&mut rng);
            z[[i, 0]] = zi;
            x[[i, 0]] = zi + ei;
            y[i] = 2.0 * (zi + ei) - 2.0 * ei;
        }
        let iv = two_stage_least_squares(z.view(), x.view(), y.view()).unwrap();
        let ols = two_stage_least_squares(x.view(), x.view(), y.view()).unwrap();
        assert!((iv[0] - 2.0).abs() < 0.05, "2SLS {}", iv[0]);
        assert!((ols[0] - 1.0).abs() < 0.05, "OLS {}", ols[0]);
    }

    #[test]
    fn tsls_residual_orthogonality() {
        let mut rng = stream_rng(3, Stream::MonteCarlo);
        let z = Array2::from_shape_fn((200, 3), |_| rng.gen::<f64>() - 0.5);
        let x = Array2::from_shape_fn((200, 3), |(i, j)| {
            z[[i, j]] * 0.8 + 0.1 * (rng.gen::<f64>() - 0.5)
        });
        let y = Array1::from_shape_fn(200, |i| x[[i, 0]] - x[[i, 2]] + 0.01 * rng.gen::<f64>());
        let theta = two_stage_least_squares(z.view(), x.view(), y.view()).unwrap();
        let resid = &y - &x.dot(&theta);
        let moment = z.t().dot(&resid);
        let scale = z.iter().map(|v| v * v).sum::<f64>().sqrt()
            * y.iter().map(|v| v * v).sum::<f64>().sqrt();
        for m in moment.iter() {
            assert!(m.abs() <= 1e-8 * scale, "moment {m} vs scale {scale}");
        }
    }

    #[test]
    fn tsls_rejects_singular() {
        let z = arr2(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]);
        let x = z.clone();
        let y = arr1(&[1.0, 1.0, 1.0]);
        match two_stage_least_squares(z.view(), x.view(), y.view()) {
            Err(Error::IllConditioned { .. }) => {}
            other => panic!("expected ill-conditioned, got {other:?}"),
        }
    }

    #[test]
    fn lstd_q_matches_oracle_on_chain() {
        let (_, policy, embedding, map, data) = chain_setup(0.5, 100_000, 90, 19);
        let fit = lstd_q(&data, &policy, &embedding, map, 0.99, 0.0, 19).unwrap();
        let oracle = chain_closed_form_q(100, 0.5, 0.99);
        let rel = (fit.q(0, 0) - oracle[0]).abs() / oracle[0];
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn lstd_q_empirical_moment_condition() {
        let (_, policy, embedding, map, data) = chain_setup(0.5, 20_000, 60, 23);
        let (design, _) = build_design(&data, &policy, &embedding, map.as_ref(), 1, 23).unwrap();
        let x = design.regressor(0.99);
        let theta = two_stage_least_squares(design.phi.view(), x.view(), design.rewards.view())
            .unwrap();
        let resid = &design.rewards - &x.dot(&theta);
        let moment = design.phi.t().dot(&resid);
        let scale = design.phi.iter().map(|v| v * v).sum::<f64>().sqrt()
            * design.rewards.iter().map(|v| v * v).sum::<f64>().sqrt();
        for m in moment.iter() {
            assert!(m.abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn lstd_q_gamma_zero_is_reward_regression() {
        let (_, policy, embedding, map, data) = chain_setup(0.5, 5_000, 30, 29);
        let fit = lstd_q(&data, &policy, &embedding, map.clone(), 0.0, 0.0, 29).unwrap();
        let (design, _) = build_design(&data, &policy, &embedding, map.as_ref(), 1, 29).unwrap();
        let direct = crate::linalg::cholesky_solve(
            design.phi.t().dot(&design.phi).view(),
            design.phi.t().dot(&design.rewards).view(),
        )
        .unwrap();
        for (a, b) in fit.theta.iter().zip(direct.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn dbrm_equals_lstd_on_deterministic_chain() {
        // One-hot features over the 99 non-terminal states make the model
        // exactly representable, isolating the determinism boundary.
        let mdp = make_chain_mdp(100, 1.0, 0.99).unwrap();
        let policy = Policy::single_action(100);
        let embedding = StateEmbedding::chain(100);
        let map: Arc<dyn FeatureMap> = Arc::new(
            state_action_concat(crate::features::TabularOneHot::new(99), 1).unwrap(),
        );
        // Positions are fractional; use an index embedding for one-hot.
        let index_emb = StateEmbedding::new(Array1::from_iter((0..100).map(|i| i as f64)));
        let data = generate_chain_dataset(&mdp, 99_000, 31).unwrap();
        let lstd = lstd_q(&data, &policy, &index_emb, map.clone(), 0.99, 0.0, 31).unwrap();
        let dbrm = linear_dbrm(&data, &policy, &index_emb, map, 0.99, 31).unwrap();
        let diff = (&lstd.theta - &dbrm.theta).dot(&(&lstd.theta - &dbrm.theta)).sqrt();
        let norm = lstd.theta.dot(&lstd.theta).sqrt();
        assert!(diff / norm < 1e-6, "relative diff {}", diff / norm);
        let _ = embedding;
    }

    #[test]
    fn dbrm_is_biased_on_stochastic_chain() {
        let (_, policy, embedding, map, data) = chain_setup(0.5, 100_000, 90, 37);
        let lstd = lstd_q(&data, &policy, &embedding, map.clone(), 0.99, 0.0, 37).unwrap();
        let dbrm = linear_dbrm(&data, &policy, &embedding, map, 0.99, 37).unwrap();
        let oracle = chain_closed_form_q(100, 0.5, 0.99);
        let e_lstd = (lstd.q(0, 0) - oracle[0]).abs();
        let e_dbrm = (dbrm.q(0, 0) - oracle[0]).abs();
        assert!(
            e_dbrm >= 3.0 * e_lstd,
            "DBRM error {e_dbrm} not >= 3x LSTD error {e_lstd}"
        );
    }

    #[test]
    fn single_action_dbrm_degenerates_to_td_regression() {
        // With one action both next-action draws coincide, so the product
        // objective is the squared TD error: M = X^T X, b = X^T r.
        let (_, policy, embedding, map, data) = chain_setup(0.5, 5_000, 30, 41);
        let dbrm = linear_dbrm(&data, &policy, &embedding, map.clone(), 0.99, 41).unwrap();
        let (design, _) = build_design(&data, &policy, &embedding, map.as_ref(), 1, 41).unwrap();
        let x = design.regressor(0.99);
        let direct = crate::linalg::cholesky_solve(
            x.t().dot(&x).view(),
            x.t().dot(&design.rewards).view(),
        )
        .unwrap();
        for (a, b) in dbrm.theta.iter().zip(direct.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn fqe_converges_to_lstd_fixed_point() {
        let (_, policy, embedding, map, data) = chain_setup(0.5, 50_000, 90, 43);
        let lstd = lstd_q(&data, &policy, &embedding, map.clone(), 0.99, 0.0, 43).unwrap();
        let fqe = linear_fqe(&data, &policy, &embedding, map, 0.99, 500, 0.0, 43).unwrap();
        let diff = (&fqe.theta - &lstd.theta).dot(&(&fqe.theta - &lstd.theta)).sqrt();
        let norm = lstd.theta.dot(&lstd.theta).sqrt();
        assert!(diff / norm < 1e-3, "relative distance {}", diff / norm);
    }

    #[test]
    fn fqe_gamma_zero_converges_in_one_iteration() {
        let (_, policy, embedding, map, data) = chain_setup(0.5, 5_000, 30, 47);
        let one = linear_fqe(&data, &policy, &embedding, map.clone(), 0.0, 1, 0.0, 47).unwrap();
        let many = linear_fqe(&data, &policy, &embedding, map, 0.0, 50, 0.0, 47).unwrap();
        for (a, b) in one.theta.iter().zip(many.theta.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn fqe_error_curve_decreases_then_plateaus() {
        let (_, policy, embedding, map, data) = chain_setup(0.5, 50_000, 90, 53);
        let oracle = chain_closed_form_q(100, 0.5, 0.99);
        let mut errs = Vec::new();
        for k in [1usize, 200, 350, 500] {
            let fit = linear_fqe(&data, &policy, &embedding, map.clone(), 0.99, k, 0.0, 53)
                .unwrap();
            errs.push((fit.q(0, 0) - oracle[0]).abs());
        }
        // Value information needs many iterations to reach s_0, then the
        // curve drops and flattens at the fixed point.
        assert!(errs[1] < errs[0] * 0.1, "errors {errs:?}");
        assert!(errs[2] < errs[1], "errors {errs:?}");
        assert!((errs[3] - errs[2]).abs() < 1e-3, "errors {errs:?}");
    }

    #[test]
    fn kernel_iv_tracks_oracle_with_512_features() {
        let mdp = make_chain_mdp(100, 0.5, 0.99).unwrap();
        let policy = Policy::single_action(100);
        let embedding = StateEmbedding::chain(100);
        let data = generate_chain_dataset(&mdp, 20_000, 59).unwrap();
        let rff_x = RffSpec::new(512, 1, 1.0, 59).unwrap();
        let rff_z = RffSpec::new(512, 1, 1.0, 60).unwrap();
        let fit = kernel_iv(
            &data, &policy, &embedding, rff_x, rff_z, 1e-6, 1e-6, 0.99, 59,
        )
        .unwrap();
        let oracle = chain_closed_form_q(100, 0.5, 0.99);
        let rel = (fit.q.q(0, 0) - oracle[0]).abs() / oracle[0];
        assert!(rel < 0.15, "relative error {rel}");
    }

    #[test]
    fn kernel_iv_closed_forms_match_iterative_ridge() {
        // Gradient-descent ridge oracle on a small problem.
        let mdp = make_chain_mdp(30, 0.5, 0.95).unwrap();
        let policy = Policy::single_action(30);
        let embedding = StateEmbedding::chain(30);
        let data = generate_chain_dataset(&mdp, 2_000, 61).unwrap();
        let rff_x = RffSpec::new(16, 1, 1.0, 61).unwrap();
        let rff_z = RffSpec::new(16, 1, 1.0, 62).unwrap();
        let (l1, l2) = (1e-3, 1e-3);
        let fit = kernel_iv(
            &data,
            &policy,
            &embedding,
            rff_x.clone(),
            rff_z.clone(),
            l1,
            l2,
            0.95,
            61,
        )
        .unwrap();

        // Rebuild the designs and run plain gradient descent on stage 2.
        let phi_map = state_action_concat(rff_features(rff_x), 1).unwrap();
        let psi_map = state_action_concat(rff_features(rff_z), 1).unwrap();
        let (phi_design, _) = build_design(&data, &policy, &embedding, &phi_map, 1, 61).unwrap();
        let (psi_design, _) = build_design(&data, &policy, &embedding, &psi_map, 0, 61).unwrap();
        let n = data.len() as f64;
        let u = &phi_design.phi - &(psi_design.phi.dot(&fit.v_hat.t()) * 0.95);
        let mut theta = Array1::<f64>::zeros(16);
        for _ in 0..200_000 {
            let resid = &u.dot(&theta) - &phi_design.rewards;
            let grad = &(u.t().dot(&resid) * (2.0 / n)) + &(&theta * (2.0 * l2));
            theta = &theta - &(&grad * 0.05);
        }
        for (a, b) in fit.q.theta.iter().zip(theta.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn kernel_iv_heavy_regularization_shrinks_theta() {
        let mdp = make_chain_mdp(50, 0.5, 0.95).unwrap();
        let policy = Policy::single_action(50);
        let embedding = StateEmbedding::chain(50);
        let data = generate_chain_dataset(&mdp, 2_000, 67).unwrap();
        let fit = kernel_iv(
            &data,
            &policy,
            &embedding,
            RffSpec::new(32, 1, 1.0, 67).unwrap(),
            RffSpec::new(32, 1, 1.0, 68).unwrap(),
            1e9,
            1e9,
            0.95,
            67,
        )
        .unwrap();
        let norm = fit.q.theta.dot(&fit.q.theta).sqrt();
        assert!(norm < 1e-6, "theta norm {norm}");
    }

    #[test]
    fn solvers_are_deterministic_in_seed() {
        let (_, policy, embedding, map, data) = chain_setup(0.5, 5_000, 30, 71);
        let a = lstd_q(&data, &policy, &embedding, map.clone(), 0.99, 0.0, 71).unwrap();
        let b = lstd_q(&data, &policy, &embedding, map, 0.99, 0.0, 71).unwrap();
        assert_eq!(a.theta, b.theta);
    }

    #[test]
    fn theta_export_writes_descriptor() {
        let (_, policy, embedding, map, data) = chain_setup(0.5, 2_000, 10, 73);
        let fit = lstd_q(&data, &policy, &embedding, map, 0.99, 0.0, 73).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.csv");
        fit.export_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# feature_map:"));
        assert_eq!(text.lines().count(), 2 + 10);
    }
}
