//! Box-Cox transformation, diurnal detrending, and the semivariogram-based
//! asymmetry diagnostic.
//!
//! The preprocessing pipeline for model fitting is: raw speeds -> Box-Cox
//! transform -> per-(site, height) diurnal harmonic detrend -> residual
//! series. The asymmetry diagnostic runs on detrended residuals and
//! partitions time steps into weak/strong wind regimes by the 8 m/s
//! threshold on the space- and height-averaged raw speed.

use nalgebra::{DMatrix, DVector};

use crate::domain::ObservationPanel;
use crate::error::{MideError, Result};

/// Threshold (m/s) separating the weak and strong wind regimes.
pub const REGIME_THRESHOLD_MPS: f64 = 8.0;

/// Power-transform parameters. `lambda = 0` means the log transform.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoxCoxParam {
    pub lambda: f64,
    pub offset: f64,
}

impl BoxCoxParam {
    pub fn new(lambda: f64, offset: f64) -> Result<Self> {
        if !lambda.is_finite() || !offset.is_finite() || offset < 0.0 {
            return Err(MideError::Config(format!(
                "invalid Box-Cox parameters lambda={lambda} offset={offset}"
            )));
        }
        Ok(BoxCoxParam { lambda, offset })
    }

    /// `((v + offset)^lambda - 1) / lambda`, or `ln(v + offset)` at lambda 0.
    pub fn apply(&self, v: f64) -> Result<f64> {
        let shifted = v + self.offset;
        if !(shifted > 0.0) {
            return Err(MideError::Numerical(format!(
                "Box-Cox input {v} with offset {} is not positive",
                self.offset
            )));
        }
        Ok(if self.lambda == 0.0 {
            shifted.ln()
        } else {
            (shifted.powf(self.lambda) - 1.0) / self.lambda
        })
    }

    /// Exact inverse of [`BoxCoxParam::apply`].
    pub fn invert(&self, w: f64) -> Result<f64> {
        if self.lambda == 0.0 {
            return Ok(w.exp() - self.offset);
        }
        let base = self.lambda * w + 1.0;
        if !(base > 0.0) {
            return Err(MideError::Numerical(format!(
                "Box-Cox inverse input {w} outside the transform range (lambda {})",
                self.lambda
            )));
        }
        Ok(base.powf(1.0 / self.lambda) - self.offset)
    }
}

/// Profile-likelihood fit of the Box-Cox power over the grid `[0, 1]` in
/// steps of 0.01. A single global lambda is fitted across all series.
pub fn fit_box_cox<I: IntoIterator<Item = f64>>(values: I, offset: f64) -> Result<BoxCoxParam> {
    let vals: Vec<f64> = values.into_iter().collect();
    if vals.len() < 3 {
        return Err(MideError::Data(format!(
            "Box-Cox fit needs at least 3 observations, got {}",
            vals.len()
        )));
    }
    if vals.iter().any(|&v| !(v + offset > 0.0)) {
        return Err(MideError::Data(
            "Box-Cox fit requires all values + offset > 0 (set a positive offset)".into(),
        ));
    }
    let n = vals.len() as f64;
    let log_shifted_sum: f64 = vals.iter().map(|&v| (v + offset).ln()).sum();

    let mut best = (f64::NEG_INFINITY, 0.0);
    for step in 0..=100 {
        let lambda = step as f64 * 0.01;
        let param = BoxCoxParam { lambda, offset };
        let mut mean = 0.0;
        for &v in &vals {
            mean += param.apply(v)?;
        }
        mean /= n;
        let mut ss = 0.0;
        for &v in &vals {
            let w = param.apply(v)?;
            ss += (w - mean) * (w - mean);
        }
        let var = (ss / n).max(1e-300);
        let ll = -0.5 * n * var.ln() + (lambda - 1.0) * log_shifted_sum;
        if ll > best.0 {
            best = (ll, lambda);
        }
    }
    BoxCoxParam::new(best.1, offset)
}

/// Coefficients of the diurnal harmonic trend
/// `d0 + d1 sin(2πt/24) + d2 cos(2πt/24) + d3 sin(4πt/24) + d4 cos(4πt/24)`
/// with `t` in hours.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiurnalFit {
    pub coeffs: [f64; 5],
}

/// Regressor row at time `t_hours`.
pub fn diurnal_design_row(t_hours: f64) -> [f64; 5] {
    let w = 2.0 * std::f64::consts::PI * t_hours / 24.0;
    [1.0, w.sin(), w.cos(), (2.0 * w).sin(), (2.0 * w).cos()]
}

impl DiurnalFit {
    pub fn predict(&self, t_hours: f64) -> f64 {
        let row = diurnal_design_row(t_hours);
        row.iter().zip(&self.coeffs).map(|(x, c)| x * c).sum()
    }
}

/// Ordinary least squares on the diurnal harmonics. Requires at least five
/// points spanning 24 hours. Returns the fit and the residual series.
pub fn fit_diurnal(times_hours: &[f64], values: &[f64]) -> Result<(DiurnalFit, Vec<f64>)> {
    if times_hours.len() != values.len() {
        return Err(MideError::Shape(
            "diurnal fit: time and value lengths differ".into(),
        ));
    }
    if times_hours.len() < 5 {
        return Err(MideError::Data(format!(
            "diurnal fit needs at least 5 points, got {}",
            times_hours.len()
        )));
    }
    let span = times_hours.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - times_hours.iter().cloned().fold(f64::INFINITY, f64::min);
    if span < 24.0 - 1e-9 {
        return Err(MideError::Data(format!(
            "diurnal fit needs at least 24 h of data, got {span:.2} h"
        )));
    }

    let n = times_hours.len();
    let mut xtx = DMatrix::<f64>::zeros(5, 5);
    let mut xty = DVector::<f64>::zeros(5);
    for (&t, &y) in times_hours.iter().zip(values) {
        let row = diurnal_design_row(t);
        for a in 0..5 {
            xty[a] += row[a] * y;
            for b in 0..5 {
                xtx[(a, b)] += row[a] * row[b];
            }
        }
    }
    // Rank check through the conditioning of the normal equations.
    let eig = xtx.clone().symmetric_eigen();
    let max_e = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min_e = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_e <= 1e-10 * max_e.max(1.0) {
        return Err(MideError::Numerical(
            "diurnal fit: rank-deficient design (time effectively constant)".into(),
        ));
    }
    let coeffs = nalgebra::Cholesky::new(xtx)
        .ok_or_else(|| MideError::Numerical("diurnal fit: normal equations not PD".into()))?
        .solve(&xty);
    let fit = DiurnalFit {
        coeffs: [coeffs[0], coeffs[1], coeffs[2], coeffs[3], coeffs[4]],
    };
    let resid = (0..n)
        .map(|i| values[i] - fit.predict(times_hours[i]))
        .collect();
    Ok((fit, resid))
}

/// Spatio-temporal semivariogram at lag `u` (in steps):
/// mean of `(r_i[t+u] - r_j[t])^2 / 2` over `t = 1..=N-u-1` (1-based), i.e.
/// the final usable index is deliberately left out of the sum.
pub fn semivariogram(r_i: &[f64], r_j: &[f64], u: usize) -> Result<f64> {
    semivariogram_filtered(r_i, r_j, u, |_| true).map(|(v, _)| v)
}

/// Semivariogram over the subset of base times `t` accepted by `include`
/// (0-based index of the earlier sample). Returns the value and the number
/// of pairs used.
pub fn semivariogram_filtered(
    r_i: &[f64],
    r_j: &[f64],
    u: usize,
    include: impl Fn(usize) -> bool,
) -> Result<(f64, usize)> {
    if r_i.len() != r_j.len() {
        return Err(MideError::Shape(
            "semivariogram: series lengths differ".into(),
        ));
    }
    let n = r_i.len();
    if u + 2 > n {
        return Err(MideError::Data(format!(
            "semivariogram: lag {u} too large for {n} points"
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 0..(n - u - 1) {
        if include(t) {
            let d = r_i[t + u] - r_j[t];
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(MideError::Data(
            "semivariogram: no time indices left after regime filtering".into(),
        ));
    }
    Ok((sum / (2.0 * count as f64), count))
}

/// Wind regime of a time step by the averaged raw speed. Ties at exactly
/// 8 m/s go to strong.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Regime {
    Weak,
    Strong,
}

impl Regime {
    pub fn label(&self) -> &'static str {
        match self {
            Regime::Weak => "weak",
            Regime::Strong => "strong",
        }
    }
}

/// Per-step regime labels from the space- and height-averaged raw speed;
/// `None` where the step is fully masked.
pub fn regime_labels(panel: &ObservationPanel) -> Vec<Option<Regime>> {
    (0..panel.len_t())
        .map(|t| {
            panel.spatial_mean(t).map(|m| {
                if m >= REGIME_THRESHOLD_MPS {
                    Regime::Strong
                } else {
                    Regime::Weak
                }
            })
        })
        .collect()
}

/// Directional asymmetry estimate for one (height, site pair, lag, regime).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymmetryEstimate {
    pub value: f64,
    pub pairs_used: usize,
}

/// `a(i, j, u) = delta(i, j, u) - delta(j, i, u)` over the included base
/// times. Antisymmetric in (i, j) exactly, by construction.
pub fn asymmetry(
    r_i: &[f64],
    r_j: &[f64],
    u: usize,
    include: impl Fn(usize) -> bool,
) -> Result<AsymmetryEstimate> {
    let (d_ij, c1) = semivariogram_filtered(r_i, r_j, u, &include)?;
    let (d_ji, c2) = semivariogram_filtered(r_j, r_i, u, &include)?;
    Ok(AsymmetryEstimate {
        value: d_ij - d_ji,
        pairs_used: c1.min(c2),
    })
}

/// Result of running the full preprocessing pipeline over a panel.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub boxcox: BoxCoxParam,
    /// Diurnal fit per latent series, indexed `g * n_sites + j`.
    pub diurnal: Vec<DiurnalFit>,
    /// Residual values in latent order per step; `None` where masked.
    pub resid: Vec<Vec<Option<f64>>>,
    pub times_hours: Vec<f64>,
}

impl Preprocessed {
    /// Residual series for one (site, height), with masked steps dropped.
    pub fn residual_series(&self, n_sites: usize, j: usize, g: usize) -> Vec<f64> {
        self.resid
            .iter()
            .filter_map(|row| row[g * n_sites + j])
            .collect()
    }

    /// Residual series including gaps (None) for masked steps.
    pub fn residual_series_with_gaps(&self, n_sites: usize, j: usize, g: usize) -> Vec<Option<f64>> {
        self.resid.iter().map(|row| row[g * n_sites + j]).collect()
    }

    /// Adds the trend back and inverts the transform for one series value.
    pub fn to_raw(&self, n_sites: usize, j: usize, g: usize, t_hours: f64, resid: f64) -> Result<f64> {
        let w = resid + self.diurnal[g * n_sites + j].predict(t_hours);
        self.boxcox.invert(w)
    }
}

/// Transforms and detrends a raw panel: fits (or reuses) the global Box-Cox
/// power, then fits the diurnal harmonics per (site, height) series.
pub fn preprocess_panel(
    panel: &ObservationPanel,
    offset: f64,
    fixed_lambda: Option<f64>,
) -> Result<Preprocessed> {
    let n = panel.n_sites();
    let p = panel.n_heights();
    let boxcox = match fixed_lambda {
        Some(lambda) => BoxCoxParam::new(lambda, offset)?,
        None => {
            let all: Vec<f64> = (0..panel.len_t())
                .flat_map(|t| {
                    (0..n).flat_map(move |j| (0..p).filter_map(move |g| panel.value(t, j, g)))
                })
                .collect();
            fit_box_cox(all, offset)?
        }
    };
    let times_hours: Vec<f64> = (0..panel.len_t()).map(|t| panel.hours_at(t)).collect();

    let mut diurnal = Vec::with_capacity(n * p);
    let mut resid = vec![vec![None; n * p]; panel.len_t()];
    for g in 0..p {
        for j in 0..n {
            let mut ts = Vec::new();
            let mut ws = Vec::new();
            let mut idxs = Vec::new();
            for t in 0..panel.len_t() {
                if let Some(v) = panel.value(t, j, g) {
                    ts.push(times_hours[t]);
                    ws.push(boxcox.apply(v)?);
                    idxs.push(t);
                }
            }
            let (fit, res) = fit_diurnal(&ts, &ws)?;
            for (k, &t) in idxs.iter().enumerate() {
                resid[t][g * n + j] = Some(res[k]);
            }
            diurnal.push(fit);
        }
    }
    Ok(Preprocessed {
        boxcox,
        diurnal,
        resid,
        times_hours,
    })
}
