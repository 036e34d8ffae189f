//! The advection-driven redistribution kernel, the state propagator built
//! from it, and the squared-exponential noise covariances.
//!
//! A kernel evaluation between target (height p, site s) and source
//! (height q, site x) at window-relative step `t` is
//! `exp(-||s - x - theta_p * t + theta_q * (t+1)||^2 / ell^2)` with
//! `ell = ell_same` when p = q and `ell_cross` otherwise. The pipeline
//! evaluates every transition at `t = 0` (each one-step transition opens
//! its own window), which keeps the model time-homogeneous given the
//! advection vectors; callers may pass any window-relative index.

use nalgebra::DMatrix;

use crate::domain::SiteSet;
use crate::error::{MideError, Result};

/// Diffusion length-scales (km) for same-height and cross-height pairs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelParams {
    pub ell_same: f64,
    pub ell_cross: f64,
}

impl KernelParams {
    pub fn new(ell_same: f64, ell_cross: f64) -> Result<Self> {
        if !(ell_same > 0.0 && ell_cross > 0.0) {
            return Err(MideError::Config(format!(
                "kernel length-scales must be positive, got {ell_same}, {ell_cross}"
            )));
        }
        Ok(KernelParams {
            ell_same,
            ell_cross,
        })
    }

    pub fn ell(&self, same_height: bool) -> f64 {
        if same_height {
            self.ell_same
        } else {
            self.ell_cross
        }
    }
}

/// Variance and length-scale parameters of the squared-exponential spatial
/// covariances for the measurement (epsilon) and process (eta) errors.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseCovParams {
    pub sigma_eps: f64,
    pub ell_eps: f64,
    pub sigma_eta: f64,
    pub ell_eta: f64,
}

impl NoiseCovParams {
    pub fn new(sigma_eps: f64, ell_eps: f64, sigma_eta: f64, ell_eta: f64) -> Result<Self> {
        if !(sigma_eps > 0.0 && ell_eps > 0.0 && sigma_eta > 0.0 && ell_eta > 0.0) {
            return Err(MideError::Config(
                "noise covariance parameters must all be positive".into(),
            ));
        }
        Ok(NoiseCovParams {
            sigma_eps,
            ell_eps,
            sigma_eta,
            ell_eta,
        })
    }
}

/// Which of the two noise processes a covariance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Epsilon,
    Eta,
}

/// Per-(time, height) 2-D advection vectors in km per step.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdvectionSet {
    /// `theta[t][p]` is the advection vector at step t, height index p.
    pub theta: Vec<Vec<[f64; 2]>>,
}

impl AdvectionSet {
    pub fn new(theta: Vec<Vec<[f64; 2]>>, theta_max: f64) -> Result<Self> {
        for (t, row) in theta.iter().enumerate() {
            for (p, v) in row.iter().enumerate() {
                if !v[0].is_finite() || !v[1].is_finite() {
                    return Err(MideError::Numerical(format!(
                        "advection vector at (t={t}, p={p}) is not finite"
                    )));
                }
                let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
                if norm > theta_max + 1e-9 {
                    return Err(MideError::Config(format!(
                        "advection norm {norm:.3} at (t={t}, p={p}) exceeds bound {theta_max}"
                    )));
                }
            }
        }
        Ok(AdvectionSet { theta })
    }

    pub fn len_t(&self) -> usize {
        self.theta.len()
    }

    /// Advection norms at one height across time.
    pub fn norms(&self, p: usize) -> Vec<f64> {
        self.theta
            .iter()
            .map(|row| (row[p][0].powi(2) + row[p][1].powi(2)).sqrt())
            .collect()
    }
}

/// One scalar kernel evaluation, exactly as written.
pub fn eval_kernel(
    same_height: bool,
    s: [f64; 2],
    x: [f64; 2],
    t_rel: usize,
    theta_p: [f64; 2],
    theta_q: [f64; 2],
    params: &KernelParams,
) -> f64 {
    let t = t_rel as f64;
    let dx = s[0] - x[0] - theta_p[0] * t + theta_q[0] * (t + 1.0);
    let dy = s[1] - x[1] - theta_p[1] * t + theta_q[1] * (t + 1.0);
    let ell = params.ell(same_height);
    (-(dx * dx + dy * dy) / (ell * ell)).exp()
}

/// The nP x nP state propagator: block (p, q) holds the kernel evaluations
/// from source height q to target height p over all site pairs.
#[derive(Debug, Clone)]
pub struct Propagator {
    /// The matrix actually applied to the state (row-normalized when
    /// `normalized` is set).
    pub matrix: DMatrix<f64>,
    /// Row sums of the raw kernel matrix; needed to undo normalization in
    /// gradient computations.
    pub raw_row_sums: Vec<f64>,
    pub normalized: bool,
}

impl Propagator {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Raw (pre-normalization) kernel entry.
    pub fn raw_entry(&self, r: usize, c: usize) -> f64 {
        if self.normalized {
            self.matrix[(r, c)] * self.raw_row_sums[r].max(1.0)
        } else {
            self.matrix[(r, c)]
        }
    }
}

/// Assembles the propagator at window-relative step `t_rel` from per-height
/// advection vectors. With `normalize`, each row is divided by
/// `max(row_sum, 1)` so the spectral radius cannot exceed one.
pub fn build_propagator(
    t_rel: usize,
    theta_t: &[[f64; 2]],
    sites: &SiteSet,
    params: &KernelParams,
    normalize: bool,
) -> Propagator {
    let n = sites.n();
    let p_heights = theta_t.len();
    let dim = n * p_heights;
    let mut k = DMatrix::<f64>::zeros(dim, dim);
    for p in 0..p_heights {
        for q in 0..p_heights {
            let same = p == q;
            for i in 0..n {
                for j in 0..n {
                    k[(p * n + i, q * n + j)] = eval_kernel(
                        same,
                        sites.coords(i),
                        sites.coords(j),
                        t_rel,
                        theta_t[p],
                        theta_t[q],
                        params,
                    );
                }
            }
        }
    }
    let raw_row_sums: Vec<f64> = (0..dim).map(|r| k.row(r).iter().sum()).collect();
    if normalize {
        for r in 0..dim {
            let g = raw_row_sums[r].max(1.0);
            for c in 0..dim {
                k[(r, c)] /= g;
            }
        }
    }
    Propagator {
        matrix: k,
        raw_row_sums,
        normalized: normalize,
    }
}

/// Noise covariance: `sigma^2 exp(-d^2 / (2 ell^2))` between same-height
/// site pairs, replicated identically across height blocks; cross-height
/// blocks are zero (vertical error correlation is carried by the kernel).
pub fn build_noise_cov(
    kind: NoiseKind,
    params: &NoiseCovParams,
    sites: &SiteSet,
    n_heights: usize,
) -> DMatrix<f64> {
    let (sigma, ell) = match kind {
        NoiseKind::Epsilon => (params.sigma_eps, params.ell_eps),
        NoiseKind::Eta => (params.sigma_eta, params.ell_eta),
    };
    squared_exp_cov(sigma, ell, sites, n_heights)
}

/// The underlying block-replicated squared-exponential covariance; tolerates
/// `sigma = 0` (an exactly zero matrix), which the simulator uses for
/// noiseless runs.
pub fn squared_exp_cov(sigma: f64, ell: f64, sites: &SiteSet, n_heights: usize) -> DMatrix<f64> {
    assert!(sigma >= 0.0 && ell > 0.0, "sigma >= 0 and ell > 0 required");
    let n = sites.n();
    let d = sites.pairwise_distances();
    let mut block = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = sigma * sigma * (-0.5 * d[(i, j)] * d[(i, j)] / (ell * ell)).exp();
            block[(i, j)] = v;
            block[(j, i)] = v;
        }
    }
    let dim = n * n_heights;
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for p in 0..n_heights {
        cov.view_mut((p * n, p * n), (n, n)).copy_from(&block);
    }
    cov
}

/// Largest absolute eigenvalue by power iteration (to 1e-8), with a
/// two-term Rayleigh-Ritz extraction so real pairs, sign pairs, and complex
/// conjugate dominant pairs all converge. Falls back to the best estimate
/// (with a warning to stderr) if 10k iterations do not converge.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    assert_eq!(m.nrows(), m.ncols(), "spectral radius needs a square matrix");
    let dim = m.nrows();
    if dim == 0 {
        return 0.0;
    }
    // Deterministic start vector with little chance of lying in an invariant
    // subspace orthogonal to the dominant one.
    let mut v = nalgebra::DVector::from_iterator(
        dim,
        (0..dim).map(|i| 1.0 + 0.37 * ((i * 2654435761) % 97) as f64 / 97.0),
    );
    v /= v.norm();
    let mut prev = f64::NAN;
    let mut stable = 0usize;
    for _ in 0..10_000 {
        let u1 = m * &v;
        let n1 = u1.norm();
        if n1 < 1e-300 {
            return 0.0;
        }
        let u2 = m * &u1;
        // Fit u2 ~ a*u1 + b*v; the dominant eigenvalue pair solves
        // z^2 = a z + b, and its modulus estimates the radius.
        let g11 = u1.dot(&u1);
        let g12 = u1.dot(&v);
        let g22 = v.dot(&v);
        let r1 = u1.dot(&u2);
        let r2 = v.dot(&u2);
        let det = g11 * g22 - g12 * g12;
        let rho = if det.abs() <= 1e-13 * g11 * g22 {
            n1 / g22.sqrt() // v is (numerically) an eigenvector already
        } else {
            let a = (g22 * r1 - g12 * r2) / det;
            let b = (g11 * r2 - g12 * r1) / det;
            let disc = a * a + 4.0 * b;
            if disc >= 0.0 {
                let s = disc.sqrt();
                (0.5 * (a + s)).abs().max((0.5 * (a - s)).abs())
            } else {
                (-b).sqrt()
            }
        };
        if (rho - prev).abs() <= 1e-8 * rho.max(1e-12) {
            stable += 1;
            if stable >= 3 {
                return rho;
            }
        } else {
            stable = 0;
        }
        prev = rho;
        let n2 = u2.norm();
        v = if n2 > 1e-300 { u2 / n2 } else { u1 / n1 };
    }
    eprintln!(
        "warning: spectral radius power iteration did not converge to 1e-8; returning best estimate"
    );
    prev
}
