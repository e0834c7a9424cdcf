//! Feature maps for the linear and two-stage estimators.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// State-only feature map: embedded state vector -> feature vector.
pub trait StateFeatures: Send + Sync {
    fn dim(&self) -> usize;
    /// Writes features of `x` into `out` (`out.len() == dim()`).
    fn write(&self, x: &[f64], out: &mut [f64]);

    fn apply(&self, x: &[f64]) -> Array1<f64> {
        let mut out = Array1::zeros(self.dim());
        self.write(x, out.as_slice_mut().unwrap());
        out
    }
}

/// State-action feature map.
pub trait FeatureMap: Send + Sync {
    fn dim(&self) -> usize;
    fn write(&self, x: &[f64], action: usize, out: &mut [f64]) -> Result<()>;

    fn apply(&self, x: &[f64], action: usize) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(self.dim());
        self.write(x, action, out.as_slice_mut().unwrap())?;
        Ok(out)
    }

    /// Short descriptor used when exporting fitted weights.
    fn descriptor(&self) -> String;
}

/// Gaussian bumps of width 0.1 on a uniform grid over `[-2, 2]`:
/// `phi_j(s) = exp(-(s - c_j)^2 / 0.1^2)` with `c_j = -2 + (4/D) * j`.
#[derive(Debug, Clone)]
pub struct GaussianGrid {
    centers: Vec<f64>,
    inv_sq_width: f64,
}

impl GaussianGrid {
    pub fn new(n_centers: usize) -> Result<Self> {
        if n_centers < 1 {
            return Err(Error::invalid("need at least one center"));
        }
        let step = 4.0 / n_centers as f64;
        Ok(GaussianGrid {
            centers: (0..n_centers).map(|j| -2.0 + step * j as f64).collect(),
            inv_sq_width: 1.0 / (0.1 * 0.1),
        })
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }
}

impl StateFeatures for GaussianGrid {
    fn dim(&self) -> usize {
        self.centers.len()
    }

    fn write(&self, x: &[f64], out: &mut [f64]) {
        let s = x[0];
        for (o, &c) in out.iter_mut().zip(&self.centers) {
            let d = s - c;
            *o = (-d * d * self.inv_sq_width).exp();
        }
    }
}

/// Convenience constructor matching the grid-feature operation name.
pub fn gaussian_grid_features(n_centers: usize) -> Result<GaussianGrid> {
    GaussianGrid::new(n_centers)
}

/// Indicator features over the first `dim` states of a tabular MDP; indices
/// at or beyond `dim` (absorbing markers) map to the zero vector.
#[derive(Debug, Clone)]
pub struct TabularOneHot {
    dim: usize,
}

impl TabularOneHot {
    pub fn new(dim: usize) -> Self {
        TabularOneHot { dim }
    }
}

impl StateFeatures for TabularOneHot {
    fn dim(&self) -> usize {
        self.dim
    }

    fn write(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let idx = x[0].round() as usize;
        if x[0] >= -0.5 && idx < self.dim {
            out[idx] = 1.0;
        }
    }
}

/// Specification for random Fourier features approximating the squared
/// exponential kernel `exp(-||x - y||^2 / (2 bandwidth^2))`.
///
/// Frequencies are drawn `N(0, 1/bandwidth^2)` and phases `U[0, 2pi)` from
/// the Fourier stream of `seed`; features are
/// `sqrt(2/m) * cos(w . x + b)`, each bounded by `sqrt(2/m)` in magnitude.
#[derive(Debug, Clone)]
pub struct RffSpec {
    pub n_features: usize,
    pub bandwidth: f64,
    pub seed: u64,
    /// `n_features x input_dim`.
    pub frequencies: Array2<f64>,
    pub phases: Array1<f64>,
}

impl RffSpec {
    pub fn new(n_features: usize, input_dim: usize, bandwidth: f64, seed: u64) -> Result<Self> {
        if n_features < 1 || input_dim < 1 {
            return Err(Error::invalid("n_features and input_dim must be positive"));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::invalid(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        let mut rng = stream_rng(seed, Stream::Fourier);
        let normal = Normal::new(0.0, 1.0 / bandwidth).expect("valid normal");
        let frequencies =
            Array2::from_shape_fn((n_features, input_dim), |_| normal.sample(&mut rng));
        let phases =
            Array1::from_shape_fn(n_features, |_| rng.gen::<f64>() * 2.0 * std::f64::consts::PI);
        Ok(RffSpec {
            n_features,
            bandwidth,
            seed,
            frequencies,
            phases,
        })
    }
}

/// Random Fourier feature map built from an [`RffSpec`].
#[derive(Debug, Clone)]
pub struct RandomFourier {
    spec: RffSpec,
    scale: f64,
}

impl RandomFourier {
    pub fn new(spec: RffSpec) -> Self {
        let scale = (2.0 / spec.n_features as f64).sqrt();
        RandomFourier { spec, scale }
    }

    pub fn spec(&self) -> &RffSpec {
        &self.spec
    }
}

impl StateFeatures for RandomFourier {
    fn dim(&self) -> usize {
        self.spec.n_features
    }

    fn write(&self, x: &[f64], out: &mut [f64]) {
        for j in 0..self.spec.n_features {
            let mut dot = self.spec.phases[j];
            for (k, &xk) in x.iter().enumerate() {
                dot += self.spec.frequencies[[j, k]] * xk;
            }
            out[j] = self.scale * dot.cos();
        }
    }
}

/// Builds the RFF map for a spec.
pub fn rff_features(spec: RffSpec) -> RandomFourier {
    RandomFourier::new(spec)
}

/// Median of pairwise distances over (at most) the first 1000 points; the
/// standard default bandwidth for squared-exponential kernels.
pub fn median_heuristic_bandwidth(points: &[f64]) -> Result<f64> {
    let n = points.len().min(1000);
    if n < 2 {
        return Err(Error::invalid("need at least 2 points for the median heuristic"));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (points[i] - points[j]).abs();
            if d > 0.0 {
                dists.push(d);
            }
        }
    }
    if dists.is_empty() {
        return Err(Error::invalid("all points identical; bandwidth undefined"));
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(dists[dists.len() / 2])
}

/// State features concatenated with a one-hot action encoding. A singleton
/// action space contributes nothing (the one-hot of a singleton is constant
/// and would be collinear with itself across rows).
pub struct StateActionConcat<S: StateFeatures> {
    state: S,
    n_actions: usize,
}

impl<S: StateFeatures> StateActionConcat<S> {
    pub fn new(state: S, n_actions: usize) -> Result<Self> {
        if n_actions == 0 {
            return Err(Error::invalid("n_actions must be positive"));
        }
        Ok(StateActionConcat { state, n_actions })
    }

    fn action_dim(&self) -> usize {
        if self.n_actions == 1 {
            0
        } else {
            self.n_actions
        }
    }
}

impl<S: StateFeatures> FeatureMap for StateActionConcat<S> {
    fn dim(&self) -> usize {
        self.state.dim() + self.action_dim()
    }

    fn write(&self, x: &[f64], action: usize, out: &mut [f64]) -> Result<()> {
        if action >= self.n_actions {
            return Err(Error::invalid(format!(
                "action {action} out of range (n_actions = {})",
                self.n_actions
            )));
        }
        let sd = self.state.dim();
        self.state.write(x, &mut out[..sd]);
        if self.action_dim() > 0 {
            out[sd..].fill(0.0);
            out[sd + action] = 1.0;
        }
        Ok(())
    }

    fn descriptor(&self) -> String {
        format!("state-features(dim={})+onehot({})", self.state.dim(), self.n_actions)
    }
}

/// Builds the concatenated state-action map.
pub fn state_action_concat<S: StateFeatures>(
    state_encoder: S,
    n_actions: usize,
) -> Result<StateActionConcat<S>> {
    StateActionConcat::new(state_encoder, n_actions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn grid_peak_and_unit_distance() {
        let g = GaussianGrid::new(90).unwrap();
        let c3 = g.centers()[3];
        let f = g.apply(&[c3]);
        assert_eq!(f[3], 1.0);
        let f2 = g.apply(&[c3 + 0.1]);
        assert_abs_diff_eq!(f2[3], (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn grid_matches_direct_expression() {
        // Independent straight-line evaluation of the defining formula.
        let g = GaussianGrid::new(90).unwrap();
        let s = -2.0;
        let f = g.apply(&[s]);
        assert_eq!(f[0], 1.0);
        for j in 0..90 {
            let c = -2.0 + (4.0 / 90.0) * j as f64;
            let expect = (-(s - c) * (s - c) / 0.01).exp();
            assert_abs_diff_eq!(f[j], expect, epsilon = 1e-15);
            // Mathematically in (0, 1]; distant centers may underflow to 0.
            assert!(f[j] >= 0.0 && f[j] <= 1.0);
        }
        // Decaying away from the matching center.
        assert!(f[0] > f[1] && f[1] > f[2]);
    }

    #[test]
    fn rff_deterministic_in_seed_and_bounded() {
        let a = RandomFourier::new(RffSpec::new(256, 1, 0.7, 5).unwrap());
        let b = RandomFourier::new(RffSpec::new(256, 1, 0.7, 5).unwrap());
        let fa = a.apply(&[0.3]);
        let fb = b.apply(&[0.3]);
        assert_eq!(fa, fb);
        let bound = (2.0 / 256.0f64).sqrt() + 1e-12;
        assert!(fa.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn rff_inner_product_approximates_se_kernel() {
        let bw = 0.8;
        let m = 1024;
        let map = RandomFourier::new(RffSpec::new(m, 1, bw, 9).unwrap());
        let kernel = |x: f64, y: f64| (-(x - y) * (x - y) / (2.0 * bw * bw)).exp();
        // x = y: inner product -> 1 within 0.05 at m = 1024.
        let fx = map.apply(&[0.4]);
        assert!((fx.dot(&fx) - 1.0).abs() < 0.05);
        // Distant pair: kernel near zero.
        let fy = map.apply(&[-1.9]);
        let far = map.apply(&[1.9]);
        assert!((fy.dot(&far) - kernel(-1.9, 1.9)).abs() < 0.05);
    }

    #[test]
    fn rff_error_decreases_with_feature_count() {
        let bw = 0.8;
        let kernel = |x: f64, y: f64| (-(x - y) * (x - y) / (2.0 * bw * bw)).exp();
        let mut rng = crate::rng::stream_rng(31, crate::rng::Stream::MonteCarlo);
        use rand::Rng;
        let pairs: Vec<(f64, f64)> = (0..100)
            .map(|_| (rng.gen::<f64>() * 4.0 - 2.0, rng.gen::<f64>() * 4.0 - 2.0))
            .collect();
        let mut errs = Vec::new();
        for &m in &[128usize, 256, 512, 1024] {
            let map = RandomFourier::new(RffSpec::new(m, 1, bw, 77).unwrap());
            let mean_err = pairs
                .iter()
                .map(|&(x, y)| {
                    let fx = map.apply(&[x]);
                    let fy = map.apply(&[y]);
                    (fx.dot(&fy) - kernel(x, y)).abs()
                })
                .sum::<f64>()
                / pairs.len() as f64;
            errs.push(mean_err);
        }
        // Monotone decrease within a 20% noise band as m doubles.
        for w in errs.windows(2) {
            assert!(w[1] <= w[0] * 1.2, "errors not decreasing: {errs:?}");
        }
    }

    #[test]
    fn concat_appends_one_hot() {
        let map = state_action_concat(GaussianGrid::new(4).unwrap(), 3).unwrap();
        assert_eq!(map.dim(), 4 + 3);
        let f = map.apply(&[0.0], 0).unwrap();
        assert_eq!(&f.to_vec()[4..], &[1.0, 0.0, 0.0]);
        assert!(map.apply(&[0.0], 3).is_err());
    }

    #[test]
    fn concat_singleton_action_adds_nothing() {
        let map = state_action_concat(GaussianGrid::new(4).unwrap(), 1).unwrap();
        assert_eq!(map.dim(), 4);
        let f = map.apply(&[0.5], 0).unwrap();
        assert_eq!(f.len(), 4);
    }

    #[test]
    fn one_hot_zero_beyond_range() {
        let oh = TabularOneHot::new(99);
        let f = oh.apply(&[98.0]);
        assert_eq!(f[98], 1.0);
        let f2 = oh.apply(&[99.0]);
        assert!(f2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn median_heuristic_on_grid() {
        let pts: Vec<f64> = (0..100).map(|i| i as f64 * 0.04).collect();
        let bw = median_heuristic_bandwidth(&pts).unwrap();
        assert!(bw > 0.0 && bw < 4.0);
    }

    #[test]
    fn feature_maps_are_pure() {
        let g = GaussianGrid::new(16).unwrap();
        assert_eq!(g.apply(&[0.123]), g.apply(&[0.123]));
        let r = RandomFourier::new(RffSpec::new(64, 1, 0.5, 3).unwrap());
        assert_eq!(r.apply(&[0.123]), r.apply(&[0.123]));
    }
}
