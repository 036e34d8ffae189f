//! Reverse-mode differentiation of the innovation-form negative
//! log-likelihood through the Kalman recursion, including the chains into
//! the kernel length-scales, the noise covariance parameters, and the
//! per-step advection vectors.
//!
//! The forward pass records a tape of per-step filter quantities; the
//! reverse sweep propagates adjoints through update and predict steps and
//! finally through the propagator assembly (with the optional row
//! normalization) into theta and the statistical parameters.

use nalgebra::{DMatrix, DVector};

use crate::domain::{GaussianBelief, ObservationMap, SiteSet};
use crate::error::Result;
use crate::kernel::{build_noise_cov, build_propagator, NoiseKind};
use crate::linalg;
use crate::ssm;
use crate::train::Omega;

/// Gradient of the NLL with respect to the constrained statistical set.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OmegaGrad {
    pub ell_same: f64,
    pub ell_cross: f64,
    pub sigma_eps: f64,
    pub ell_eps: f64,
    pub sigma_eta: f64,
    pub ell_eta: f64,
}

impl OmegaGrad {
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.ell_same,
            self.ell_cross,
            self.sigma_eps,
            self.ell_eps,
            self.sigma_eta,
            self.ell_eta,
        ]
    }
}

/// Output of one gradient evaluation over a window.
#[derive(Debug, Clone)]
pub struct KfGradients {
    /// Negative log-likelihood of the non-burn-in steps.
    pub nll: f64,
    /// Total scalar observation dimensions contributing to `nll`.
    pub n_terms: usize,
    pub d_omega: OmegaGrad,
    /// `d_theta[k][p]` is the gradient w.r.t. the advection vector driving
    /// the transition into step k+1, at height p.
    pub d_theta: Vec<Vec<[f64; 2]>>,
}

struct StepTape {
    map: ObservationMap,
    // Prediction inputs (filtered state of the previous step).
    m_prev: DVector<f64>,
    p_prev: DMatrix<f64>,
    // Update quantities (present when the step has observations).
    nu: Option<DVector<f64>>,
    s_inv: Option<DMatrix<f64>>,
    s_inv_nu: Option<DVector<f64>>,
    gain: Option<DMatrix<f64>>,
    hp: Option<DMatrix<f64>>,
    // Filtered moments.
    m_filt: DVector<f64>,
    p_filt: DMatrix<f64>,
}

/// Window inputs shared by the forward and gradient entry points.
pub struct WindowModel<'a> {
    pub sites: &'a SiteSet,
    pub n_heights: usize,
    pub normalize: bool,
    /// Window-relative kernel step index per transition (the pipeline uses
    /// zeros: each one-step transition opens its own window).
    pub t_rels: Vec<usize>,
    pub burn_in: usize,
}

impl<'a> WindowModel<'a> {
    pub fn per_step(sites: &'a SiteSet, n_heights: usize, normalize: bool, transitions: usize, burn_in: usize) -> Self {
        WindowModel {
            sites,
            n_heights,
            normalize,
            t_rels: vec![0; transitions],
            burn_in,
        }
    }
}

/// Forward NLL over a window without recording a tape; used by validation
/// passes and finite-difference oracles.
pub fn window_nll(
    model: &WindowModel,
    obs: &[(DVector<f64>, ObservationMap)],
    theta: &[Vec<[f64; 2]>],
    omega: &Omega,
    init: &GaussianBelief,
) -> Result<(f64, usize)> {
    let (tape, nll, n_terms) = forward_tape(model, obs, theta, omega, init)?;
    drop(tape);
    Ok((nll, n_terms))
}

fn forward_tape(
    model: &WindowModel,
    obs: &[(DVector<f64>, ObservationMap)],
    theta: &[Vec<[f64; 2]>],
    omega: &Omega,
    init: &GaussianBelief,
) -> Result<(Vec<StepTape>, f64, usize)> {
    assert_eq!(
        theta.len(),
        obs.len().saturating_sub(1),
        "one advection vector set per transition"
    );
    assert_eq!(model.t_rels.len(), theta.len());
    let kparams = omega.kernel_params()?;
    let nparams = omega.noise_params()?;
    let sigma_eta = build_noise_cov(NoiseKind::Eta, &nparams, model.sites, model.n_heights);
    let sigma_eps = build_noise_cov(NoiseKind::Epsilon, &nparams, model.sites, model.n_heights);

    let mut tape = Vec::with_capacity(obs.len());
    let mut nll = 0.0;
    let mut n_terms = 0usize;
    let mut m = init.mean.clone();
    let mut p = init.cov.clone();
    for (t, (z, map)) in obs.iter().enumerate() {
        let (m_prev, p_prev) = (m.clone(), p.clone());
        let (m_pred, p_pred) = if t == 0 {
            (m.clone(), p.clone())
        } else {
            let prop = build_propagator(
                model.t_rels[t - 1],
                &theta[t - 1],
                model.sites,
                &kparams,
                model.normalize,
            );
            let belief = ssm::kf_predict(
                &GaussianBelief {
                    mean: m.clone(),
                    cov: p.clone(),
                },
                &prop.matrix,
                &sigma_eta,
            );
            (belief.mean, belief.cov)
        };

        let mut step = StepTape {
            map: map.clone(),
            m_prev,
            p_prev,
            nu: None,
            s_inv: None,
            s_inv_nu: None,
            gain: None,
            hp: None,
            m_filt: m_pred.clone(),
            p_filt: p_pred.clone(),
        };

        if !map.is_empty() {
            let nu = z - map.select_vec(&m_pred);
            let s = map.select_rows_cols(&p_pred) + map.select_rows_cols(&sigma_eps);
            let chol = linalg::cholesky_with_jitter(&s, "gradient forward innovation")?;
            let hp = map.select_rows(&p_pred);
            let gain = chol.solve(&hp).transpose();
            let m_filt = &m_pred + &gain * &nu;
            let p_filt = linalg::symmetrize(&(&p_pred - &gain * &hp));
            if t >= model.burn_in {
                let d = nu.len();
                let log_det = linalg::log_det(&chol);
                let quad = nu.dot(&chol.solve(&nu));
                nll += 0.5 * (d as f64) * (2.0 * std::f64::consts::PI).ln()
                    + 0.5 * log_det
                    + 0.5 * quad;
                n_terms += d;
            }
            let dim_s = s.nrows();
            step.s_inv = Some(chol.solve(&DMatrix::identity(dim_s, dim_s)));
            step.s_inv_nu = Some(chol.solve(&nu));
            step.nu = Some(nu);
            step.gain = Some(gain);
            step.hp = Some(hp);
            step.m_filt = m_filt;
            step.p_filt = p_filt;
        }

        m = step.m_filt.clone();
        p = step.p_filt.clone();
        tape.push(step);
    }
    Ok((tape, nll, n_terms))
}

/// Exact gradients of the window NLL w.r.t. the constrained statistical
/// parameters and the per-transition advection vectors.
pub fn kf_gradients(
    model: &WindowModel,
    obs: &[(DVector<f64>, ObservationMap)],
    theta: &[Vec<[f64; 2]>],
    omega: &Omega,
    init: &GaussianBelief,
) -> Result<KfGradients> {
    let (tape, nll, n_terms) = forward_tape(model, obs, theta, omega, init)?;
    let kparams = omega.kernel_params()?;
    let nparams = omega.noise_params()?;
    let n = model.sites.n();
    let dim = n * model.n_heights;

    let mut sigma_eta_bar = DMatrix::<f64>::zeros(dim, dim);
    let mut sigma_eps_bar = DMatrix::<f64>::zeros(dim, dim);
    let mut d_theta = vec![vec![[0.0; 2]; model.n_heights]; theta.len()];
    let mut d_ell_same = 0.0;
    let mut d_ell_cross = 0.0;

    let mut m_bar = DVector::<f64>::zeros(dim);
    let mut p_bar = DMatrix::<f64>::zeros(dim, dim);

    for (t, step) in tape.iter().enumerate().rev() {
        // ----- update adjoint -----
        let (mut m_pred_bar, mut p_pred_bar);
        if let (Some(nu), Some(s_inv), Some(s_inv_nu), Some(gain), Some(hp)) = (
            step.nu.as_ref(),
            step.s_inv.as_ref(),
            step.s_inv_nu.as_ref(),
            step.gain.as_ref(),
            step.hp.as_ref(),
        ) {
            let map = &step.map;
            // P_filt = sym(P_pred - A * hp)
            let q = linalg::symmetrize(&p_bar);
            p_pred_bar = q.clone();
            let mut gain_bar = -(&q * hp.transpose());
            let r_bar = -(gain.transpose() * &q); // adjoint of hp in the product
            for (r, &kr) in map.selected().iter().enumerate() {
                for c in 0..dim {
                    p_pred_bar[(kr, c)] += r_bar[(r, c)];
                }
            }
            // m_filt = m_pred + A nu
            m_pred_bar = m_bar.clone();
            gain_bar += &m_bar * nu.transpose();
            let mut nu_bar = gain.transpose() * &m_bar;
            // A = W S^{-1} with W = P_pred H' (= hp')
            let w_bar = &gain_bar * s_inv;
            let mut s_bar = -(s_inv * hp * &gain_bar * s_inv);
            // NLL term: dNLL/dS = 0.5 (S^{-1} - S^{-1} nu nu' S^{-1}),
            // dNLL/dnu = S^{-1} nu.
            if t >= model.burn_in {
                s_bar += 0.5 * (s_inv - s_inv_nu * s_inv_nu.transpose());
                nu_bar += s_inv_nu;
            }
            // W = P_pred H': scatter columns.
            for (c, &kc) in map.selected().iter().enumerate() {
                for i in 0..dim {
                    p_pred_bar[(i, kc)] += w_bar[(i, c)];
                }
            }
            // S = H P_pred H' + sel(Sigma_eps).
            for (a, &ka) in map.selected().iter().enumerate() {
                for (b, &kb) in map.selected().iter().enumerate() {
                    p_pred_bar[(ka, kb)] += s_bar[(a, b)];
                    sigma_eps_bar[(ka, kb)] += s_bar[(a, b)];
                }
            }
            // nu = z - H m_pred.
            for (r, &kr) in map.selected().iter().enumerate() {
                m_pred_bar[kr] -= nu_bar[r];
            }
        } else {
            m_pred_bar = m_bar.clone();
            p_pred_bar = p_bar.clone();
        }

        // ----- predict adjoint -----
        if t == 0 {
            break; // prior is data-derived, no parameter dependence
        }
        let prop = build_propagator(
            model.t_rels[t - 1],
            &theta[t - 1],
            model.sites,
            &kparams,
            model.normalize,
        );
        let k = &prop.matrix;
        // P_pred = sym(K P_prev K') + Sigma_eta.
        sigma_eta_bar += &p_pred_bar;
        let g = linalg::symmetrize(&p_pred_bar);
        let mut k_bar = 2.0 * &g * k * &step.p_prev;
        let p_prev_bar = k.transpose() * &g * k;
        // m_pred = K m_prev.
        k_bar += &m_pred_bar * step.m_prev.transpose();
        let m_prev_bar = k.transpose() * &m_pred_bar;

        // Undo row normalization: K_norm[r, .] = K_raw[r, .] / max(rowsum, 1).
        let k_raw_bar = if model.normalize {
            let mut out = k_bar.clone();
            for r in 0..dim {
                let rs = prop.raw_row_sums[r];
                if rs > 1.0 {
                    let dot: f64 = (0..dim).map(|c| k_bar[(r, c)] * k[(r, c)]).sum();
                    for c in 0..dim {
                        out[(r, c)] = (k_bar[(r, c)] - dot) / rs;
                    }
                }
            }
            out
        } else {
            k_bar
        };

        // Chain into theta and the kernel length-scales.
        let tau = model.t_rels[t - 1] as f64;
        let th = &theta[t - 1];
        for p_h in 0..model.n_heights {
            for q_h in 0..model.n_heights {
                let same = p_h == q_h;
                let ell = kparams.ell(same);
                let inv_ell2 = 1.0 / (ell * ell);
                for i in 0..n {
                    for j in 0..n {
                        let kb = k_raw_bar[(p_h * n + i, q_h * n + j)];
                        if kb == 0.0 {
                            continue;
                        }
                        let si = model.sites.coords(i);
                        let xj = model.sites.coords(j);
                        let dx = si[0] - xj[0] - th[p_h][0] * tau + th[q_h][0] * (tau + 1.0);
                        let dy = si[1] - xj[1] - th[p_h][1] * tau + th[q_h][1] * (tau + 1.0);
                        let d2 = dx * dx + dy * dy;
                        let v = (-d2 * inv_ell2).exp();
                        let common = kb * v * (-2.0 * inv_ell2);
                        // d v / d theta_p = v * (-2/ell^2) * D * (-tau)
                        d_theta[t - 1][p_h][0] += common * dx * (-tau);
                        d_theta[t - 1][p_h][1] += common * dy * (-tau);
                        // d v / d theta_q = v * (-2/ell^2) * D * (tau + 1)
                        d_theta[t - 1][q_h][0] += common * dx * (tau + 1.0);
                        d_theta[t - 1][q_h][1] += common * dy * (tau + 1.0);
                        // d v / d ell = v * 2 d^2 / ell^3
                        let d_ell = kb * v * 2.0 * d2 / (ell * ell * ell);
                        if same {
                            d_ell_same += d_ell;
                        } else {
                            d_ell_cross += d_ell;
                        }
                    }
                }
            }
        }

        m_bar = m_prev_bar;
        p_bar = p_prev_bar;
    }

    // Chain the accumulated covariance adjoints into the noise parameters.
    let dist = model.sites.pairwise_distances();
    let mut d_sigma_eps = 0.0;
    let mut d_ell_eps = 0.0;
    let mut d_sigma_eta = 0.0;
    let mut d_ell_eta = 0.0;
    for p_h in 0..model.n_heights {
        for i in 0..n {
            for j in 0..n {
                let (r, c) = (p_h * n + i, p_h * n + j);
                let d2 = dist[(i, j)] * dist[(i, j)];
                {
                    let e = (-0.5 * d2 / (nparams.ell_eps * nparams.ell_eps)).exp();
                    let v = nparams.sigma_eps * nparams.sigma_eps * e;
                    d_sigma_eps += sigma_eps_bar[(r, c)] * 2.0 * nparams.sigma_eps * e;
                    d_ell_eps += sigma_eps_bar[(r, c)] * v * d2
                        / (nparams.ell_eps * nparams.ell_eps * nparams.ell_eps);
                }
                {
                    let e = (-0.5 * d2 / (nparams.ell_eta * nparams.ell_eta)).exp();
                    let v = nparams.sigma_eta * nparams.sigma_eta * e;
                    d_sigma_eta += sigma_eta_bar[(r, c)] * 2.0 * nparams.sigma_eta * e;
                    d_ell_eta += sigma_eta_bar[(r, c)] * v * d2
                        / (nparams.ell_eta * nparams.ell_eta * nparams.ell_eta);
                }
            }
        }
    }

    Ok(KfGradients {
        nll,
        n_terms,
        d_omega: OmegaGrad {
            ell_same: d_ell_same,
            ell_cross: d_ell_cross,
            sigma_eps: d_sigma_eps,
            ell_eps: d_ell_eps,
            sigma_eta: d_sigma_eta,
            ell_eta: d_ell_eta,
        },
        d_theta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{observation_map, LatentIndexer, Site};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sites2() -> SiteSet {
        SiteSet::new(vec![
            Site { id: "a".into(), coords: [0.0, 0.0] },
            Site { id: "b".into(), coords: [14.0, 7.0] },
        ])
        .unwrap()
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        sites: &SiteSet,
        p_heights: usize,
        t_len: usize,
        full_mask: bool,
    ) -> (
        Vec<(DVector<f64>, ObservationMap)>,
        Vec<Vec<[f64; 2]>>,
        GaussianBelief,
    ) {
        let idx = LatentIndexer::new(sites.n(), p_heights).unwrap();
        let dim = idx.dim();
        let obs: Vec<(DVector<f64>, ObservationMap)> = (0..t_len)
            .map(|t| {
                let mask: Vec<bool> = (0..dim)
                    .map(|_| full_mask || t == 0 || rng.gen_bool(0.85))
                    .collect();
                let map = observation_map(&mask, &idx);
                let z = DVector::from_fn(map.n_obs(), |_, _| rng.gen_range(-1.0..1.0));
                (z, map)
            })
            .collect();
        let theta: Vec<Vec<[f64; 2]>> = (0..t_len - 1)
            .map(|_| {
                (0..p_heights)
                    .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)])
                    .collect()
            })
            .collect();
        let init = GaussianBelief::new(
            DVector::from_fn(dim, |_, _| rng.gen_range(-0.5..0.5)),
            DMatrix::identity(dim, dim) * rng.gen_range(0.5..1.5),
        )
        .unwrap();
        (obs, theta, init)
    }

    fn test_omega() -> Omega {
        Omega {
            ell_same: 18.0,
            ell_cross: 11.0,
            sigma_eps: 0.4,
            ell_eps: 9.0,
            sigma_eta: 0.7,
            ell_eta: 14.0,
        }
    }

    #[test]
    fn forward_nll_matches_ssm_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sites = sites2();
        let p_heights = 2;
        let (obs, theta, init) = random_instance(&mut rng, &sites, p_heights, 5, false);
        let omega = test_omega();
        let model = WindowModel::per_step(&sites, p_heights, true, theta.len(), 0);
        let (nll, _) = window_nll(&model, &obs, &theta, &omega, &init).unwrap();

        let kp = omega.kernel_params().unwrap();
        let np = omega.noise_params().unwrap();
        let props: Vec<DMatrix<f64>> = theta
            .iter()
            .map(|th| build_propagator(0, th, &sites, &kp, true).matrix)
            .collect();
        let eta = build_noise_cov(NoiseKind::Eta, &np, &sites, p_heights);
        let eps = build_noise_cov(NoiseKind::Epsilon, &np, &sites, p_heights);
        let state = ssm::run_filter(init, &obs, &props, &eta, &eps).unwrap();
        assert!(
            (nll + state.loglik).abs() < 1e-10 * state.loglik.abs().max(1.0),
            "tape nll {nll} vs filter loglik {}",
            state.loglik
        );
    }

    #[test]
    fn single_step_sigma_eps_gradient_closed_form() {
        // One site, one height, a single observation step: S = P0 + sig^2,
        // NLL = 0.5 ln 2pi + 0.5 ln S + 0.5 nu^2/S, so
        // dNLL/dsig = (0.5/S - 0.5 nu^2/S^2) * 2 sig.
        let sites = SiteSet::new(vec![Site { id: "o".into(), coords: [0.0, 0.0] }]).unwrap();
        let omega = test_omega();
        let idx = LatentIndexer::new(1, 1).unwrap();
        let map = observation_map(&[true], &idx);
        let z = DVector::from_vec(vec![1.3]);
        let init = GaussianBelief::new(
            DVector::from_vec(vec![0.2]),
            DMatrix::from_element(1, 1, 0.8),
        )
        .unwrap();
        let model = WindowModel::per_step(&sites, 1, false, 0, 0);
        let grads = kf_gradients(&model, &[(z, map)], &[], &omega, &init).unwrap();
        let s = 0.8 + omega.sigma_eps * omega.sigma_eps;
        let nu = 1.3 - 0.2;
        let expect = (0.5 / s - 0.5 * nu * nu / (s * s)) * 2.0 * omega.sigma_eps;
        assert!(
            (grads.d_omega.sigma_eps - expect).abs() < 1e-12,
            "{} vs {expect}",
            grads.d_omega.sigma_eps
        );
        // No transition: remaining gradients vanish.
        assert_eq!(grads.d_omega.sigma_eta, 0.0);
        assert_eq!(grads.d_omega.ell_same, 0.0);
    }

    fn fd_check(
        model: &WindowModel,
        obs: &[(DVector<f64>, ObservationMap)],
        theta: &[Vec<[f64; 2]>],
        omega: &Omega,
        init: &GaussianBelief,
        tol: f64,
    ) {
        let grads = kf_gradients(model, obs, theta, omega, init).unwrap();
        let nll_at = |om: &Omega, th: &[Vec<[f64; 2]>]| -> f64 {
            window_nll(model, obs, th, om, init).unwrap().0
        };
        let gmax = grads
            .d_omega
            .as_array()
            .iter()
            .map(|g| g.abs())
            .fold(0.0, f64::max);
        let floor = (1e-7 * gmax).max(1e-9);

        // Omega components.
        let fields: [(&str, fn(&mut Omega) -> &mut f64); 6] = [
            ("ell_same", |o| &mut o.ell_same),
            ("ell_cross", |o| &mut o.ell_cross),
            ("sigma_eps", |o| &mut o.sigma_eps),
            ("ell_eps", |o| &mut o.ell_eps),
            ("sigma_eta", |o| &mut o.sigma_eta),
            ("ell_eta", |o| &mut o.ell_eta),
        ];
        for (k, (name, access)) in fields.iter().enumerate() {
            let base = {
                let mut om = *omega;
                *access(&mut om)
            };
            let h = 1e-5 * base.abs().max(1.0);
            let mut up = *omega;
            *access(&mut up) += h;
            let mut down = *omega;
            *access(&mut down) -= h;
            let fd = (nll_at(&up, theta) - nll_at(&down, theta)) / (2.0 * h);
            let an = grads.d_omega.as_array()[k];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(floor);
            assert!(rel <= tol, "{name}: analytic {an} vs fd {fd} (rel {rel:.2e})");
        }

        // Theta components.
        for k in 0..theta.len() {
            for p in 0..theta[k].len() {
                for c in 0..2 {
                    let h = 1e-5;
                    let mut up = theta.to_vec();
                    up[k][p][c] += h;
                    let mut down = theta.to_vec();
                    down[k][p][c] -= h;
                    let fd = (nll_at(omega, &up) - nll_at(omega, &down)) / (2.0 * h);
                    let an = grads.d_theta[k][p][c];
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(floor);
                    assert!(
                        rel <= tol,
                        "theta[{k}][{p}][{c}]: analytic {an} vs fd {fd} (rel {rel:.2e})"
                    );
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_unnormalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sites = sites2();
        let (obs, theta, init) = random_instance(&mut rng, &sites, 2, 4, false);
        let model = WindowModel::per_step(&sites, 2, false, theta.len(), 0);
        fd_check(&model, &obs, &theta, &test_omega(), &init, 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_normalized_with_burnin() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sites = sites2();
        let (obs, theta, init) = random_instance(&mut rng, &sites, 2, 5, false);
        let model = WindowModel {
            sites: &sites,
            n_heights: 2,
            normalize: true,
            t_rels: vec![0; theta.len()],
            burn_in: 2,
        };
        fd_check(&model, &obs, &theta, &test_omega(), &init, 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_nonzero_window_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sites = sites2();
        let (obs, theta, init) = random_instance(&mut rng, &sites, 2, 4, true);
        let model = WindowModel {
            sites: &sites,
            n_heights: 2,
            normalize: false,
            t_rels: vec![0, 1, 2],
            burn_in: 0,
        };
        fd_check(&model, &obs, &theta, &test_omega(), &init, 1e-4);
    }

    #[test]
    fn flat_kernel_limit_kills_theta_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sites = sites2();
        let (obs, theta, init) = random_instance(&mut rng, &sites, 2, 4, true);
        let omega = Omega {
            ell_same: 1e6,
            ell_cross: 1e6,
            ..test_omega()
        };
        let model = WindowModel::per_step(&sites, 2, false, theta.len(), 0);
        let grads = kf_gradients(&model, &obs, &theta, &omega, &init).unwrap();
        for row in &grads.d_theta {
            for v in row {
                assert!(v[0].abs() < 1e-6 && v[1].abs() < 1e-6, "{v:?}");
            }
        }
    }
}
