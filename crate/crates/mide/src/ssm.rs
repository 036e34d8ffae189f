//! Kalman-filter inference for the linear-Gaussian state-space model:
//! predict/update recursions, the innovation-form log-likelihood, and
//! h-step forecast distributions in latent and observation space.
//!
//! The likelihood uses the standard innovation covariance
//! `S_t = H_t P_{t|t-1} H_t' + Sigma_eps`, the unique Gaussian likelihood of
//! the stated model (and the form consistent with the filter gain).

use nalgebra::{DMatrix, DVector};

use crate::domain::{GaussianBelief, ObservationMap};
use crate::error::{MideError, Result};
use crate::linalg;
use crate::stats;

/// Filter position: current belief, step index, accumulated log-likelihood.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub belief: GaussianBelief,
    pub step: usize,
    pub loglik: f64,
}

impl FilterState {
    pub fn new(belief: GaussianBelief) -> Self {
        FilterState {
            belief,
            step: 0,
            loglik: 0.0,
        }
    }
}

/// One prediction step: mean <- K mean, cov <- sym(K cov K') + Sigma_eta.
pub fn kf_predict(
    belief: &GaussianBelief,
    k: &DMatrix<f64>,
    sigma_eta: &DMatrix<f64>,
) -> GaussianBelief {
    let mean = k * &belief.mean;
    let cov = linalg::symmetrize(&(k * &belief.cov * k.transpose())) + sigma_eta;
    GaussianBelief { mean, cov }
}

/// Output of one measurement update.
#[derive(Debug, Clone)]
pub struct UpdateResult {
    pub belief: GaussianBelief,
    /// Innovation `z - H mean`; empty when the step had no observations.
    pub innovation: DVector<f64>,
    /// Innovation covariance `H P H' + Sigma_eps` on the observed rows.
    pub innovation_cov: DMatrix<f64>,
}

/// Measurement update with gain solved by Cholesky (escalating jitter).
/// An empty observation map leaves the belief unchanged.
///
/// `z` holds the observed components in latent (height-major) order and
/// `sigma_eps` is the full-grid measurement covariance; both are restricted
/// to the rows selected by `map`.
pub fn kf_update(
    belief: &GaussianBelief,
    z: &DVector<f64>,
    map: &ObservationMap,
    sigma_eps: &DMatrix<f64>,
) -> Result<UpdateResult> {
    if map.is_empty() {
        return Ok(UpdateResult {
            belief: belief.clone(),
            innovation: DVector::zeros(0),
            innovation_cov: DMatrix::zeros(0, 0),
        });
    }
    if z.len() != map.n_obs() {
        return Err(MideError::Shape(format!(
            "observation length {} does not match map rows {}",
            z.len(),
            map.n_obs()
        )));
    }
    let nu = z - map.select_vec(&belief.mean);
    let s = map.select_rows_cols(&belief.cov) + map.select_rows_cols(sigma_eps);
    let chol = linalg::cholesky_with_jitter(&s, "kalman update innovation covariance")?;
    // Gain A = P H' S^{-1}, computed by solving S A' = H P.
    let hp = map.select_rows(&belief.cov);
    let gain = chol.solve(&hp).transpose();
    let mean = &belief.mean + &gain * &nu;
    let cov = linalg::symmetrize(&(&belief.cov - &gain * hp));
    Ok(UpdateResult {
        belief: GaussianBelief { mean, cov },
        innovation: nu,
        innovation_cov: s,
    })
}

/// Gaussian log-density of the innovation:
/// `-(d/2) log 2pi - 1/2 log|S| - 1/2 nu' S^{-1} nu`.
/// Zero-dimensional innovations (fully masked steps) contribute zero.
pub fn step_loglik(innovation: &DVector<f64>, innovation_cov: &DMatrix<f64>) -> Result<f64> {
    let d = innovation.len();
    if d == 0 {
        return Ok(0.0);
    }
    let chol = linalg::cholesky_with_jitter(innovation_cov, "innovation covariance")?;
    let log_det = linalg::log_det(&chol);
    let quad = innovation.dot(&chol.solve(innovation));
    Ok(-0.5 * (d as f64) * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det - 0.5 * quad)
}

/// Runs the filter over a window of (observation, map) pairs, one propagator
/// per transition: `propagators[t-1]` drives the transition into step `t`,
/// and the first observation updates the initial belief directly.
///
/// Returns the final state carrying the total log-likelihood of all steps.
pub fn run_filter(
    init: GaussianBelief,
    observations: &[(DVector<f64>, ObservationMap)],
    propagators: &[DMatrix<f64>],
    sigma_eta: &DMatrix<f64>,
    sigma_eps: &DMatrix<f64>,
) -> Result<FilterState> {
    if observations.len() > propagators.len() + 1 {
        return Err(MideError::Shape(format!(
            "need {} propagators for {} observation steps, got {}",
            observations.len() - 1,
            observations.len(),
            propagators.len()
        )));
    }
    let mut state = FilterState::new(init);
    for (t, (z, map)) in observations.iter().enumerate() {
        if t > 0 {
            state.belief = kf_predict(&state.belief, &propagators[t - 1], sigma_eta);
        }
        let up = kf_update(&state.belief, z, map, sigma_eps)?;
        state.loglik += step_loglik(&up.innovation, &up.innovation_cov)?;
        state.belief = up.belief;
        state.step = t;
    }
    Ok(state)
}

/// Forecast distributions for horizons 1..=h.
#[derive(Debug, Clone)]
pub struct ForecastDistribution {
    /// Latent mean/cov per horizon step.
    pub latent: Vec<GaussianBelief>,
    /// Observation-space mean per horizon step (`H Y_hat`).
    pub obs_mean: Vec<DVector<f64>>,
    /// Observation-space covariance `Sigma_eps + H P_hat H'` per step.
    pub obs_cov: Vec<DMatrix<f64>>,
    /// Central-interval half-width multiplier (normal quantile).
    pub z_alpha: f64,
}

impl ForecastDistribution {
    /// Central (1-alpha) interval bounds for horizon index `h` (0-based),
    /// on the transformed scale: `mean +- z * sqrt(diag)`.
    pub fn interval(&self, h: usize) -> (DVector<f64>, DVector<f64>) {
        let mean = &self.obs_mean[h];
        let sd = self.obs_cov[h].diagonal().map(|v| v.max(0.0).sqrt());
        (mean - self.z_alpha * &sd, mean + self.z_alpha * &sd)
    }
}

/// Iterates the prediction step h times without measurement updates and maps
/// each step into observation space. `maps[k]` selects the observed rows at
/// horizon k+1 (identity for fully observed grids).
pub fn forecast(
    belief_at_origin: &GaussianBelief,
    propagators: &[DMatrix<f64>],
    sigma_eta: &DMatrix<f64>,
    sigma_eps: &DMatrix<f64>,
    maps: &[ObservationMap],
    alpha: f64,
) -> Result<ForecastDistribution> {
    if maps.len() != propagators.len() {
        return Err(MideError::Shape(format!(
            "forecast needs one observation map per step: {} maps vs {} propagators",
            maps.len(),
            propagators.len()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MideError::Config(format!(
            "interval level alpha must be in (0,1), got {alpha}"
        )));
    }
    let z = stats::inv_norm_cdf(1.0 - alpha / 2.0);
    let mut latent = Vec::with_capacity(propagators.len());
    let mut obs_mean = Vec::with_capacity(propagators.len());
    let mut obs_cov = Vec::with_capacity(propagators.len());
    let mut cur = belief_at_origin.clone();
    for (k, prop) in propagators.iter().enumerate() {
        cur = kf_predict(&cur, prop, sigma_eta);
        obs_mean.push(maps[k].select_vec(&cur.mean));
        obs_cov.push(maps[k].select_rows_cols(&cur.cov) + maps[k].select_rows_cols(sigma_eps));
        latent.push(cur.clone());
    }
    Ok(ForecastDistribution {
        latent,
        obs_mean,
        obs_cov,
        z_alpha: z,
    })
}


#[cfg(test)]
mod tests {
    use super::oracle::JointOracle;
    use super::*;
    use crate::domain::{observation_map, LatentIndexer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
        linalg::symmetrize(&(&a * a.transpose())) * scale
            + DMatrix::identity(dim, dim) * 0.1 * scale
    }

    #[test]
    fn predict_identity_and_forgetting() {
        let belief = GaussianBelief::new(
            DVector::from_vec(vec![1.0, -2.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        )
        .unwrap();
        let zero = DMatrix::zeros(2, 2);
        let out = kf_predict(&belief, &DMatrix::identity(2, 2), &zero);
        assert_eq!(out.mean, belief.mean);
        assert_eq!(out.cov, belief.cov);

        let eta = DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.4]);
        let out = kf_predict(&belief, &zero, &eta);
        assert_eq!(out.mean, DVector::zeros(2));
        assert_eq!(out.cov, eta);
    }

    #[test]
    fn predict_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let cov = random_spd(&mut rng, 4, 1.0);
        let eta = random_spd(&mut rng, 4, 0.5);
        let mean = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let belief = GaussianBelief::new(mean.clone(), cov.clone()).unwrap();
        let out = kf_predict(&belief, &k, &eta);
        // Independent re-computation with explicit loops.
        let mut mean_o = vec![0.0; 4];
        for i in 0..4 {
            for j in 0..4 {
                mean_o[i] += k[(i, j)] * mean[j];
            }
        }
        let mut cov_o = DMatrix::<f64>::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for a in 0..4 {
                    for b in 0..4 {
                        acc += k[(i, a)] * cov[(a, b)] * k[(j, b)];
                    }
                }
                cov_o[(i, j)] = acc + eta[(i, j)];
            }
        }
        for i in 0..4 {
            assert!((out.mean[i] - mean_o[i]).abs() < 1e-12);
            for j in 0..4 {
                assert!((out.cov[(i, j)] - 0.5 * (cov_o[(i, j)] + cov_o[(j, i)])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn update_exact_observation_limit() {
        let idx = LatentIndexer::new(2, 1).unwrap();
        let map = observation_map(&[true, true], &idx);
        let belief = GaussianBelief::new(
            DVector::from_vec(vec![0.0, 0.0]),
            DMatrix::identity(2, 2) * 4.0,
        )
        .unwrap();
        let z = DVector::from_vec(vec![1.5, -0.5]);
        let eps = DMatrix::identity(2, 2) * 1e-12;
        let up = kf_update(&belief, &z, &map, &eps).unwrap();
        assert!((up.belief.mean - &z).norm() < 1e-6);
    }

    #[test]
    fn update_empty_map_is_identity_with_zero_loglik() {
        let idx = LatentIndexer::new(2, 1).unwrap();
        let map = observation_map(&[false, false], &idx);
        let belief =
            GaussianBelief::new(DVector::from_vec(vec![1.0, 2.0]), DMatrix::identity(2, 2))
                .unwrap();
        let up = kf_update(&belief, &DVector::zeros(0), &map, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(up.belief.mean, belief.mean);
        assert_eq!(up.belief.cov, belief.cov);
        assert_eq!(step_loglik(&up.innovation, &up.innovation_cov).unwrap(), 0.0);
    }

    #[test]
    fn step_loglik_scalar_cases() {
        let nu0 = DVector::from_vec(vec![0.0]);
        let s1 = DMatrix::from_element(1, 1, 1.0);
        let got = step_loglik(&nu0, &s1).unwrap();
        assert!((got - (-0.9189385332046727)).abs() < 1e-10);

        // d=1, S=4, nu=2: -0.5 ln(2pi) - 0.5 ln 4 - 0.5 = -2.1121.
        let nu = DVector::from_vec(vec![2.0]);
        let s = DMatrix::from_element(1, 1, 4.0);
        let expect = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * 4.0f64.ln() - 0.5;
        assert!((step_loglik(&nu, &s).unwrap() - expect).abs() < 1e-12);
        assert!((expect - (-2.112085713764618)).abs() < 1e-9);
    }

    #[test]
    fn update_matches_joint_conditioning_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dim = 3;
        let init = GaussianBelief::new(
            DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0)),
            random_spd(&mut rng, dim, 1.0),
        )
        .unwrap();
        let k = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-0.6..0.6));
        let eta = random_spd(&mut rng, dim, 0.4);
        let eps = random_spd(&mut rng, dim, 0.2);
        let idx = LatentIndexer::new(dim, 1).unwrap();
        let map = observation_map(&[true, true, true], &idx);
        let z = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));

        let pred = kf_predict(&init, &k, &eta);
        let up = kf_update(&pred, &z, &map, &eps).unwrap();

        let oracle = JointOracle::build(&init, std::slice::from_ref(&k), &eta);
        let (mean_o, cov_o, _) = oracle.condition(0, &[(z.clone(), map.clone())], &eps);
        assert!((up.belief.mean - mean_o).norm() < 1e-10);
        assert!((up.belief.cov - cov_o).norm() < 1e-10);
    }

    #[test]
    fn filter_matches_oracle_with_missing_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..20 {
            let n = rng.gen_range(1..4usize);
            let p = rng.gen_range(1..3usize);
            let dim = n * p;
            let t_len = rng.gen_range(2..6usize);
            let idx = LatentIndexer::new(n, p).unwrap();
            let init = GaussianBelief::new(
                DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0)),
                random_spd(&mut rng, dim, 0.8),
            )
            .unwrap();
            let props: Vec<DMatrix<f64>> = (0..t_len - 1)
                .map(|_| DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-0.5..0.5)))
                .collect();
            let eta = random_spd(&mut rng, dim, 0.3);
            let eps = random_spd(&mut rng, dim, 0.15);
            let observations: Vec<(DVector<f64>, ObservationMap)> = (0..t_len)
                .map(|t| {
                    let mask: Vec<bool> =
                        (0..dim).map(|_| t == 0 || rng.gen_bool(0.8)).collect();
                    let map = observation_map(&mask, &idx);
                    let z = DVector::from_fn(map.n_obs(), |_, _| rng.gen_range(-1.5..1.5));
                    (z, map)
                })
                .collect();

            let state = run_filter(init.clone(), &observations, &props, &eta, &eps).unwrap();

            let oracle = JointOracle::build_with_prior_step(&init, &props, &eta);
            let (mean_o, cov_o, ll_o) = oracle.condition(t_len - 1, &observations, &eps);
            assert!(
                (state.belief.mean.clone() - &mean_o).norm() < 1e-8 * mean_o.norm().max(1.0),
                "trial {trial} mean"
            );
            assert!(
                (state.belief.cov.clone() - &cov_o).norm() < 1e-8 * cov_o.norm().max(1.0),
                "trial {trial} cov"
            );
            assert!(
                (state.loglik - ll_o).abs() < 1e-8 * ll_o.abs().max(1.0),
                "trial {trial} loglik {} vs {}",
                state.loglik,
                ll_o
            );
        }
    }

    #[test]
    fn forecast_identity_and_variance_monotone() {
        let dim = 2;
        let belief = GaussianBelief::new(
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::identity(dim, dim) * 0.5,
        )
        .unwrap();
        let eye = DMatrix::identity(dim, dim);
        let eta = DMatrix::identity(dim, dim) * 0.1;
        let eps = DMatrix::identity(dim, dim) * 0.2;
        let maps = vec![ObservationMap::full(dim); 4];
        let props = vec![eye.clone(); 4];

        // h=1 with K=I, zero eta: obs mean = filtered mean, C = eps + P.
        let fc = forecast(
            &belief,
            &props[..1],
            &DMatrix::zeros(dim, dim),
            &eps,
            &maps[..1],
            0.05,
        )
        .unwrap();
        assert_eq!(fc.obs_mean[0], belief.mean);
        assert!((fc.obs_cov[0].clone() - (&eps + &belief.cov)).norm() < 1e-14);

        // Variance diagonal nondecreasing in h when K = I.
        let fc = forecast(&belief, &props, &eta, &eps, &maps, 0.05).unwrap();
        for h in 1..4 {
            for i in 0..dim {
                assert!(fc.latent[h].cov[(i, i)] >= fc.latent[h - 1].cov[(i, i)] - 1e-12);
            }
        }
        // 95% interval width uses z ~ 1.96.
        let (lo, hi) = fc.interval(0);
        let width = (hi - lo)[0];
        let sd = fc.obs_cov[0][(0, 0)].sqrt();
        assert!((width - 2.0 * 1.959963984540054 * sd).abs() < 1e-9);
    }

    #[test]
    fn forecast_matches_marginalization_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let dim = 3;
        let init = GaussianBelief::new(
            DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0)),
            random_spd(&mut rng, dim, 0.7),
        )
        .unwrap();
        let props: Vec<DMatrix<f64>> = (0..3)
            .map(|_| DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-0.6..0.6)))
            .collect();
        let eta = random_spd(&mut rng, dim, 0.25);
        let eps = random_spd(&mut rng, dim, 0.1);
        let maps = vec![ObservationMap::full(dim); 3];
        let fc = forecast(&init, &props, &eta, &eps, &maps, 0.05).unwrap();

        // Marginal of Y after three unconditioned transitions.
        let oracle = JointOracle::build(&init, &props, &eta);
        let mean_o = oracle.y_mean[2].clone();
        let cov_o = oracle.cov_y[2][2].clone();
        assert!((fc.latent[2].mean.clone() - &mean_o).norm() < 1e-10);
        assert!((fc.latent[2].cov.clone() - &cov_o).norm() < 1e-10);
        let cz = &eps + &cov_o;
        assert!((fc.obs_cov[2].clone() - cz).norm() < 1e-10);
    }

    #[test]
    fn filter_covariance_never_increases_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dim = 4;
        let idx = LatentIndexer::new(dim, 1).unwrap();
        let belief =
            GaussianBelief::new(DVector::zeros(dim), random_spd(&mut rng, dim, 1.0)).unwrap();
        let pred = kf_predict(
            &belief,
            &DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-0.5..0.5)),
            &random_spd(&mut rng, dim, 0.3),
        );
        let map = observation_map(&[true, false, true, true], &idx);
        let z = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let eps = random_spd(&mut rng, dim, 0.2);
        let up = kf_update(&pred, &z, &map, &eps).unwrap();
        let diff = &pred.cov - &up.belief.cov;
        let min_eig = linalg::min_symmetric_eigenvalue(&diff);
        let scale = pred.cov.trace() / dim as f64;
        assert!(min_eig >= -1e-8 * scale, "min eig {min_eig}");
        up.belief.validate().unwrap();
    }

    #[test]
    fn sequential_scalar_updates_match_joint_update_diagonal_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dim = 3;
        let idx = LatentIndexer::new(dim, 1).unwrap();
        let belief = GaussianBelief::new(
            DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0)),
            random_spd(&mut rng, dim, 0.9),
        )
        .unwrap();
        let eps = DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.35, 0.15]));
        let z = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
        let full = observation_map(&[true; 3], &idx);

        let joint = kf_update(&belief, &z, &full, &eps).unwrap();
        let ll_joint = step_loglik(&joint.innovation, &joint.innovation_cov).unwrap();

        // One component at a time, in order.
        let mut cur = belief;
        let mut ll_seq = 0.0;
        for i in 0..dim {
            let mut mask = [false; 3];
            mask[i] = true;
            let map = observation_map(&mask, &idx);
            let zi = DVector::from_vec(vec![z[i]]);
            let up = kf_update(&cur, &zi, &map, &eps).unwrap();
            ll_seq += step_loglik(&up.innovation, &up.innovation_cov).unwrap();
            cur = up.belief;
        }
        assert!((cur.mean - joint.belief.mean).norm() < 1e-9);
        assert!((cur.cov - joint.belief.cov).norm() < 1e-9);
        assert!((ll_seq - ll_joint).abs() < 1e-9);
    }
}
