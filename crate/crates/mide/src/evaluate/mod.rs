//! Rolling-origin evaluation: benchmark forecasters, error metrics, wind
//! shear, and the protocol harness that slides a fixed-horizon forecast
//! origin across the online segment.

pub mod power;

use std::collections::HashMap;

use crate::domain::{HeightLevels, ObservationPanel, SiteSet};
use crate::error::{MideError, Result};
use crate::extractor::stream::WeatherMapStream;
use crate::io::ForecastRow;
use crate::preprocess::{preprocess_panel, BoxCoxParam};
use crate::ssm;
use crate::train::{online_update, FittedModel, TrainingConfig};

/// Rolling protocol: forecast `horizon` steps, slide by `stride`, repeat.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RollingProtocol {
    pub horizon: usize,
    pub stride: usize,
    /// Fraction of the panel reserved for offline training.
    pub offline_fraction: f64,
    /// Optional cap on the number of rolls.
    pub max_rolls: Option<usize>,
}

impl Default for RollingProtocol {
    fn default() -> Self {
        RollingProtocol {
            horizon: 144,
            stride: 144,
            offline_fraction: 0.7,
            max_rolls: None,
        }
    }
}

impl RollingProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.stride == 0 {
            return Err(MideError::Config(
                "horizon and stride must be at least 1".into(),
            ));
        }
        if !(self.offline_fraction > 0.0 && self.offline_fraction < 1.0) {
            return Err(MideError::Config(
                "offline fraction must be in (0,1)".into(),
            ));
        }
        Ok(())
    }

    /// Number of rolls a given online-segment length supports.
    pub fn rolls_for(&self, t_online: usize) -> usize {
        if t_online < self.horizon {
            0
        } else {
            let r = (t_online - self.horizon) / self.stride + 1;
            self.max_rolls.map_or(r, |m| r.min(m))
        }
    }

    /// Total forecast instances: rolls x horizon x sites x heights.
    pub fn instance_count(&self, rolls: usize, n_sites: usize, n_heights: usize) -> usize {
        rolls * self.horizon * n_sites * n_heights
    }
}

/// `100 * (1 - mae_star / mae_bench)`; undefined for a zero benchmark.
pub fn improvement(mae_star: f64, mae_bench: f64) -> Option<f64> {
    if mae_bench > 0.0 {
        Some(100.0 * (1.0 - mae_star / mae_bench))
    } else {
        None
    }
}

/// Power-law shear exponent `ln(z_hi/z_lo) / ln(h_hi/h_lo)` (positive when
/// speed grows with height).
pub fn wind_shear(z_hi: f64, z_lo: f64, h_hi: f64, h_lo: f64) -> Result<f64> {
    if !(z_hi > 0.0 && z_lo > 0.0 && h_hi > 0.0 && h_lo > 0.0) {
        return Err(MideError::Numerical(
            "shear requires positive speeds and heights".into(),
        ));
    }
    if (h_hi - h_lo).abs() < 1e-12 {
        return Err(MideError::Numerical("shear heights must differ".into()));
    }
    Ok((z_hi / z_lo).ln() / (h_hi / h_lo).ln())
}

/// One forecast instance emitted by the protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub roll: usize,
    pub origin_unix: i64,
    /// Steps ahead (1-based).
    pub horizon: usize,
    pub site: usize,
    pub height: usize,
    pub forecast_mps: f64,
    pub lo_mps: Option<f64>,
    pub hi_mps: Option<f64>,
    pub actual_mps: Option<f64>,
    pub forecast_trans: Option<f64>,
    pub actual_trans: Option<f64>,
}

/// Aggregated error metrics.
#[derive(Debug, Clone)]
pub struct MetricTable {
    pub horizon: usize,
    pub n_sites: usize,
    pub n_heights: usize,
    /// Raw-scale |error| accumulators keyed [g][h-1] and [j][h-1].
    height_acc: Vec<Vec<(f64, usize)>>,
    site_acc: Vec<Vec<(f64, usize)>>,
    trans_acc: Vec<(f64, usize)>,
    coverage_acc: Vec<(usize, usize)>,
    pub instance_count: usize,
}

impl MetricTable {
    pub fn new(horizon: usize, n_sites: usize, n_heights: usize) -> Self {
        MetricTable {
            horizon,
            n_sites,
            n_heights,
            height_acc: vec![vec![(0.0, 0); horizon]; n_heights],
            site_acc: vec![vec![(0.0, 0); horizon]; n_sites],
            trans_acc: vec![(0.0, 0); horizon],
            coverage_acc: vec![(0, 0); horizon],
            instance_count: 0,
        }
    }

    pub fn record(&mut self, rec: &InstanceRecord) {
        self.instance_count += 1;
        let h = rec.horizon - 1;
        if let Some(actual) = rec.actual_mps {
            let err = (actual - rec.forecast_mps).abs();
            let (s, c) = self.height_acc[rec.height][h];
            self.height_acc[rec.height][h] = (s + err, c + 1);
            let (s, c) = self.site_acc[rec.site][h];
            self.site_acc[rec.site][h] = (s + err, c + 1);
            if let (Some(lo), Some(hi)) = (rec.lo_mps, rec.hi_mps) {
                let (hits, cnt) = self.coverage_acc[h];
                let hit = (actual >= lo && actual <= hi) as usize;
                self.coverage_acc[h] = (hits + hit, cnt + 1);
            }
        }
        if let (Some(at), Some(ft)) = (rec.actual_trans, rec.forecast_trans) {
            let (s, c) = self.trans_acc[h];
            self.trans_acc[h] = (s + (at - ft).abs(), c + 1);
        }
    }

    /// Spatially averaged MAE at one height and horizon (1-based steps).
    pub fn mae_by_height(&self, g: usize, horizon: usize) -> Option<f64> {
        let (s, c) = self.height_acc[g][horizon - 1];
        (c > 0).then(|| s / c as f64)
    }

    /// Height-averaged MAE at one site and horizon (1-based steps).
    pub fn mae_by_site(&self, j: usize, horizon: usize) -> Option<f64> {
        let (s, c) = self.site_acc[j][horizon - 1];
        (c > 0).then(|| s / c as f64)
    }

    /// Raw-scale MAE pooled over everything.
    pub fn overall_mae(&self) -> Option<f64> {
        let (s, c) = self
            .height_acc
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, c), &(s2, c2)| (s + s2, c + c2));
        (c > 0).then(|| s / c as f64)
    }

    /// Transformed-scale MAE pooled over a horizon range (1-based, inclusive).
    pub fn trans_mae_over(&self, h_from: usize, h_to: usize) -> Option<f64> {
        let (s, c) = self.trans_acc[h_from - 1..h_to]
            .iter()
            .fold((0.0, 0usize), |(s, c), &(s2, c2)| (s + s2, c + c2));
        (c > 0).then(|| s / c as f64)
    }

    /// Empirical central-interval coverage pooled over all horizons.
    pub fn coverage_overall(&self) -> Option<f64> {
        let (h, c) = self
            .coverage_acc
            .iter()
            .fold((0usize, 0usize), |(h, c), &(h2, c2)| (h + h2, c + c2));
        (c > 0).then(|| h as f64 / c as f64)
    }

    pub fn coverage_at(&self, horizon: usize) -> Option<f64> {
        let (h, c) = self.coverage_acc[horizon - 1];
        (c > 0).then(|| h as f64 / c as f64)
    }
}

/// Benchmark/model selector for the protocol harness.
pub enum Forecaster<'a> {
    /// The fitted state-space model with frozen network and per-roll
    /// online updates of the statistical set.
    Mide {
        model: FittedModel,
        stream: &'a WeatherMapStream,
        cfg: TrainingConfig,
        online_updates: bool,
    },
    /// Carry-forward persistence per (site, height).
    Persistence,
    /// Detrended AR(p) with AIC order selection, refit each roll.
    Ar { max_order: usize },
}

impl<'a> Forecaster<'a> {
    pub fn label(&self) -> &'static str {
        match self {
            Forecaster::Mide { .. } => "mide",
            Forecaster::Persistence => "persistence",
            Forecaster::Ar { .. } => "ar",
        }
    }
}

/// Output of one protocol run.
pub struct ProtocolOutput {
    pub table: MetricTable,
    pub rolls: usize,
    pub records: Vec<InstanceRecord>,
    /// Predicted advection per forecast time (model runs only).
    pub advection: Vec<(i64, Vec<[f64; 2]>)>,
    /// Forecast rows in the export format (first roll only would be
    /// redundant; all rolls are included).
    pub forecast_rows: Vec<ForecastRow>,
}

/// Last observed value at or before `t` (documented carry-forward); falls
/// back to the earliest observation if the history is empty.
pub fn persistence_value(panel: &ObservationPanel, t: usize, j: usize, g: usize) -> Option<f64> {
    for back in (0..=t).rev() {
        if let Some(v) = panel.value(back, j, g) {
            return Some(v);
        }
    }
    for fwd in t + 1..panel.len_t() {
        if let Some(v) = panel.value(fwd, j, g) {
            return Some(v);
        }
    }
    None
}

/// Fitted autoregression with intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct ArModel {
    pub intercept: f64,
    pub coeffs: Vec<f64>,
    pub noise_var: f64,
    /// True when the fit degenerated and the model is a random walk
    /// (pure persistence).
    pub fallback_persistence: bool,
}

impl ArModel {
    pub fn order(&self) -> usize {
        self.coeffs.len()
    }

    /// Iterated multi-step prediction from the end of `history`.
    pub fn forecast(&self, history: &[f64], steps: usize) -> Vec<f64> {
        let mut buf: Vec<f64> = history.to_vec();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut pred = self.intercept;
            for (k, phi) in self.coeffs.iter().enumerate() {
                let idx = buf.len() as isize - 1 - k as isize;
                let past = if idx >= 0 { buf[idx as usize] } else { 0.0 };
                pred += phi * past;
            }
            buf.push(pred);
            out.push(pred);
        }
        out
    }
}

/// Least-squares AR fit with AIC order selection over 0..=max_order.
/// A constant (or otherwise degenerate) series falls back to persistence.
pub fn fit_ar(series: &[f64], max_order: usize) -> Result<ArModel> {
    let n = series.len();
    if n < 10 * max_order.max(1) {
        return Err(MideError::Data(format!(
            "AR fit needs at least {} points for order {max_order}, got {n}",
            10 * max_order.max(1)
        )));
    }
    let (_, var) = crate::stats::mean_var(series);
    if var < 1e-14 {
        return Ok(ArModel {
            intercept: 0.0,
            coeffs: vec![1.0],
            noise_var: 0.0,
            fallback_persistence: true,
        });
    }

    let mut best: Option<(f64, ArModel)> = None;
    for p in 0..=max_order {
        let rows = n - max_order; // common sample across orders for AIC comparability
        let cols = p + 1;
        let mut xtx = nalgebra::DMatrix::<f64>::zeros(cols, cols);
        let mut xty = nalgebra::DVector::<f64>::zeros(cols);
        let mut sse_mean = 0.0;
        for t in max_order..n {
            let mut x = vec![1.0; cols];
            for k in 0..p {
                x[k + 1] = series[t - 1 - k];
            }
            for a in 0..cols {
                xty[a] += x[a] * series[t];
                for b in 0..cols {
                    xtx[(a, b)] += x[a] * x[b];
                }
            }
            sse_mean += series[t] * series[t];
        }
        let _ = sse_mean;
        let sol = match nalgebra::Cholesky::new(xtx.clone()) {
            Some(ch) => ch.solve(&xty),
            None => match xtx.lu().solve(&xty) {
                Some(s) => s,
                None => continue,
            },
        };
        let mut rss = 0.0;
        for t in max_order..n {
            let mut pred = sol[0];
            for k in 0..p {
                pred += sol[k + 1] * series[t - 1 - k];
            }
            let r = series[t] - pred;
            rss += r * r;
        }
        // Variance floor relative to the series scale keeps AIC comparisons
        // meaningful on (near-)noiseless data, where every sufficient order
        // reaches numerically-zero residuals.
        let sigma2 = (rss / rows as f64).max(1e-12 * var);
        let aic = rows as f64 * sigma2.ln() + 2.0 * (p + 1) as f64;
        let model = ArModel {
            intercept: sol[0],
            coeffs: (0..p).map(|k| sol[k + 1]).collect(),
            noise_var: sigma2,
            fallback_persistence: false,
        };
        if best.as_ref().map_or(true, |(b, _)| aic < *b) {
            best = Some((aic, model));
        }
    }
    best.map(|(_, m)| m)
        .ok_or_else(|| MideError::Numerical("AR fit failed at every order".into()))
}

/// Carry-forward-filled residual series for one (site, height) from a
/// preprocessed panel.
fn filled_residuals(
    pre: &crate::preprocess::Preprocessed,
    n_sites: usize,
    j: usize,
    g: usize,
) -> Vec<f64> {
    let with_gaps = pre.residual_series_with_gaps(n_sites, j, g);
    let mut out = Vec::with_capacity(with_gaps.len());
    let mut last = 0.0;
    for v in with_gaps {
        if let Some(x) = v {
            last = x;
        }
        out.push(last);
    }
    out
}

/// Runs the rolling protocol for one forecaster over the full panel.
/// `metric_boxcox` defines the transformed scale used for scale-free MAE
/// comparisons (use the fitted model's transform for all forecasters so
/// improvements are computed like for like).
pub fn run_protocol(
    forecaster: &mut Forecaster,
    panel: &ObservationPanel,
    sites: &SiteSet,
    heights: &HeightLevels,
    protocol: &RollingProtocol,
    metric_boxcox: BoxCoxParam,
) -> Result<ProtocolOutput> {
    protocol.validate()?;
    let t_total = panel.len_t();
    let offline_end = ((t_total as f64) * protocol.offline_fraction).floor() as usize;
    let t_online = t_total - offline_end;
    let rolls = protocol.rolls_for(t_online);
    if rolls == 0 {
        return Err(MideError::Data(format!(
            "online segment of {t_online} steps cannot fit one {}-step roll",
            protocol.horizon
        )));
    }
    let n = sites.n();
    let p_heights = heights.p();
    let mut table = MetricTable::new(protocol.horizon, n, p_heights);
    let mut records = Vec::with_capacity(rolls * protocol.horizon * n * p_heights);
    let mut advection: Vec<(i64, Vec<[f64; 2]>)> = Vec::new();
    let mut forecast_rows = Vec::new();

    let to_trans = |v: f64| -> Option<f64> { metric_boxcox.apply(v).ok() };

    for roll in 0..rolls {
        let origin = offline_end - 1 + roll * protocol.stride;
        let origin_unix = panel.times()[origin];

        // forecasts[h-1][flat(g,j)] plus optional intervals
        let mut point = vec![vec![0.0; n * p_heights]; protocol.horizon];
        let mut lo: Option<Vec<Vec<f64>>> = None;
        let mut hi: Option<Vec<Vec<f64>>> = None;

        match forecaster {
            Forecaster::Persistence => {
                for g in 0..p_heights {
                    for j in 0..n {
                        let v = persistence_value(panel, origin, j, g).ok_or_else(|| {
                            MideError::Data(format!("no observations at all for site {j} height {g}"))
                        })?;
                        for h in 0..protocol.horizon {
                            point[h][g * n + j] = v;
                        }
                    }
                }
            }
            Forecaster::Ar { max_order } => {
                // Refit preprocessing and AR coefficients on data up to the
                // origin (benchmarks are updated online each roll).
                let hist = panel.slice(0, origin + 1)?;
                let pre = preprocess_panel(&hist, metric_boxcox.offset, None)?;
                for g in 0..p_heights {
                    for j in 0..n {
                        let series = filled_residuals(&pre, n, j, g);
                        let model = fit_ar(&series, *max_order)?;
                        let fc = model.forecast(&series, protocol.horizon);
                        for (h, r_hat) in fc.iter().enumerate() {
                            let t_hours = pre.times_hours[origin]
                                + (h as f64 + 1.0) * panel.step_seconds() as f64 / 3600.0;
                            let w = r_hat + pre.diurnal[g * n + j].predict(t_hours);
                            let v = pre.boxcox.invert(w).unwrap_or(0.0).max(0.0);
                            point[h][g * n + j] = v;
                        }
                    }
                }
            }
            Forecaster::Mide {
                model,
                stream,
                cfg,
                online_updates,
            } => {
                // Online update of the statistical set on the rolling window,
                // then filter the window and forecast ahead.
                let window_start = origin.saturating_sub(cfg.online_window_steps.max(2) - 1);
                let window = panel.slice(window_start, origin + 1)?;
                if *online_updates {
                    *model = online_update(model, &window, stream, cfg)?;
                }
                let state = model.filter_window(&window, stream)?;
                let mut cache = HashMap::new();
                let mut props = Vec::with_capacity(protocol.horizon);
                let mut thetas = Vec::with_capacity(protocol.horizon);
                for h in 1..=protocol.horizon {
                    let unix = origin_unix + h as i64 * panel.step_seconds();
                    thetas.push((unix, model.theta_at(stream, unix, &mut cache)?));
                    props.push(model.propagator_at(stream, unix, &mut cache)?);
                }
                advection.extend(thetas.iter().cloned());
                let maps =
                    vec![crate::domain::ObservationMap::full(n * p_heights); protocol.horizon];
                let fc = ssm::forecast(
                    &state.belief,
                    &props,
                    &model.sigma_eta(),
                    &model.sigma_eps(),
                    &maps,
                    model.alpha,
                )?;
                let mut lo_m = vec![vec![0.0; n * p_heights]; protocol.horizon];
                let mut hi_m = vec![vec![0.0; n * p_heights]; protocol.horizon];
                for h in 0..protocol.horizon {
                    let unix = origin_unix + (h as i64 + 1) * panel.step_seconds();
                    let (lo_t, hi_t) = fc.interval(h);
                    for g in 0..p_heights {
                        for j in 0..n {
                            let k = g * n + j;
                            let trend = model.trend(j, g, unix);
                            let inv = |w: f64| -> f64 {
                                model.boxcox.invert(w).unwrap_or(0.0).max(0.0)
                            };
                            point[h][k] = inv(fc.obs_mean[h][k] + trend);
                            lo_m[h][k] = inv(lo_t[k] + trend);
                            hi_m[h][k] = inv(hi_t[k] + trend);
                        }
                    }
                }
                lo = Some(lo_m);
                hi = Some(hi_m);
            }
        }

        for h in 1..=protocol.horizon {
            let t_idx = origin + h;
            let unix = panel.times()[t_idx];
            for g in 0..p_heights {
                for j in 0..n {
                    let k = g * n + j;
                    let actual = panel.value(t_idx, j, g);
                    let rec = InstanceRecord {
                        roll,
                        origin_unix,
                        horizon: h,
                        site: j,
                        height: g,
                        forecast_mps: point[h - 1][k],
                        lo_mps: lo.as_ref().map(|m| m[h - 1][k]),
                        hi_mps: hi.as_ref().map(|m| m[h - 1][k]),
                        actual_mps: actual,
                        forecast_trans: to_trans(point[h - 1][k]),
                        actual_trans: actual.and_then(to_trans),
                    };
                    table.record(&rec);
                    forecast_rows.push(ForecastRow {
                        issue_unix: origin_unix,
                        horizon_steps: h,
                        site_id: sites.sites()[j].id.clone(),
                        height_m: heights.values()[g],
                        mean_mps: rec.forecast_mps,
                        lo95_mps: rec.lo_mps.unwrap_or(f64::NAN),
                        hi95_mps: rec.hi_mps.unwrap_or(f64::NAN),
                    });
                    records.push(rec);
                    let _ = unix;
                }
            }
        }
    }
    advection.sort_by_key(|(t, _)| *t);
    advection.dedup_by_key(|(t, _)| *t);
    Ok(ProtocolOutput {
        table,
        rolls,
        records,
        advection,
        forecast_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn protocol_roll_arithmetic() {
        let p = RollingProtocol {
            horizon: 144,
            stride: 144,
            offline_fraction: 0.7,
            max_rolls: None,
        };
        assert_eq!(p.rolls_for(600), 4);
        assert_eq!(p.rolls_for(143), 0);
        assert_eq!(p.rolls_for(144), 1);
        // Paper-scale bookkeeping: 6/hour x 24h horizon, 70 rolls, 3 sites,
        // 3 heights.
        assert_eq!(p.instance_count(70, 3, 3), 90_720);
    }

    #[test]
    fn improvement_formula() {
        assert_eq!(improvement(1.0, 1.0), Some(0.0));
        assert_eq!(improvement(0.5, 1.0), Some(50.0));
        assert_eq!(improvement(1.0, 0.0), None);
        let imp = improvement(0.660, 0.689).unwrap();
        assert!((imp - 4.21).abs() < 0.01, "imp {imp}");
        // Antisymmetry surrogate: sign flips when the roles swap.
        let fwd = improvement(0.8, 1.0).unwrap();
        let rev = improvement(1.0, 0.8).unwrap();
        assert!(fwd > 0.0 && rev < 0.0);
    }

    #[test]
    fn shear_exponent_cases() {
        assert_eq!(wind_shear(5.0, 5.0, 180.0, 140.0).unwrap(), 0.0);
        // ln(10/9)/ln(180/140) = 0.419238 by direct evaluation.
        let s = wind_shear(10.0, 9.0, 180.0, 140.0).unwrap();
        assert!((s - 0.419238).abs() < 1e-4, "{s}");
        // Exact power-law recovery at any height pair.
        let alpha = 0.2;
        let speed = |h: f64| 8.0 * (h / 100.0f64).powf(alpha);
        for (hi, lo) in [(180.0, 140.0), (140.0, 100.0), (180.0, 100.0)] {
            let s = wind_shear(speed(hi), speed(lo), hi, lo).unwrap();
            assert!((s - alpha).abs() < 1e-12);
        }
        assert!(wind_shear(-1.0, 2.0, 180.0, 140.0).is_err());
    }

    #[test]
    fn ar_recovers_known_processes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // AR(1), phi = 0.9.
        let mut series = vec![0.0f64];
        for _ in 0..2000 {
            let last = *series.last().unwrap();
            series.push(0.9 * last + rng.sample::<f64, _>(StandardNormal));
        }
        let model = fit_ar(&series, 4).unwrap();
        assert!(!model.coeffs.is_empty());
        assert!(
            (model.coeffs[0] - 0.9).abs() <= 0.05,
            "phi {}",
            model.coeffs[0]
        );

        // Exact noiseless AR(2) with slowly decaying oscillation.
        let mut exact = vec![1.0, 0.5];
        for t in 2..240 {
            exact.push(1.5 * exact[t - 1] - 0.9 * exact[t - 2]);
        }
        let model = fit_ar(&exact, 4).unwrap();
        assert_eq!(model.order(), 2, "coeffs {:?}", model.coeffs);
        assert!((model.coeffs[0] - 1.5).abs() < 1e-6);
        assert!((model.coeffs[1] + 0.9).abs() < 1e-6);

        // White noise: small order, forecasts near the mean.
        let noise: Vec<f64> = (0..2000)
            .map(|_| 3.0 + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let model = fit_ar(&noise, 4).unwrap();
        assert!(model.order() <= 1, "order {}", model.order());
        let fc = model.forecast(&noise, 10);
        for v in fc {
            assert!((v - 3.0).abs() < 0.3, "forecast {v}");
        }

        // Constant series: persistence fallback.
        let constant = vec![2.0; 300];
        let model = fit_ar(&constant, 4).unwrap();
        assert!(model.fallback_persistence);
        assert_eq!(model.forecast(&constant, 3), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn metric_table_basic_and_decomposition() {
        let mut table = MetricTable::new(2, 2, 1);
        let mk = |h: usize, j: usize, f: f64, a: f64| InstanceRecord {
            roll: 0,
            origin_unix: 0,
            horizon: h,
            site: j,
            height: 0,
            forecast_mps: f,
            lo_mps: None,
            hi_mps: None,
            actual_mps: Some(a),
            forecast_trans: None,
            actual_trans: None,
        };
        // Errors {+1, -1, +1, -1} -> MAE 1.
        table.record(&mk(1, 0, 5.0, 6.0));
        table.record(&mk(1, 1, 5.0, 4.0));
        table.record(&mk(2, 0, 5.0, 6.0));
        table.record(&mk(2, 1, 5.0, 4.0));
        assert_eq!(table.mae_by_height(0, 1), Some(1.0));
        assert_eq!(table.mae_by_site(0, 2), Some(1.0));
        assert_eq!(table.overall_mae(), Some(1.0));
        assert_eq!(table.instance_count, 4);

        // Exact forecasts -> zero error.
        let mut exact = MetricTable::new(1, 1, 1);
        exact.record(&mk(1, 0, 3.25, 3.25));
        assert_eq!(exact.overall_mae(), Some(0.0));
    }

    #[test]
    fn metric_table_matches_hand_recomputation() {
        // Spreadsheet-style recomputation over a small record set.
        let data = [
            (1usize, 0usize, 0usize, 4.0, 5.5),
            (1, 1, 0, 3.0, 2.0),
            (1, 0, 1, 7.0, 7.25),
            (2, 1, 1, 6.0, 4.0),
            (2, 0, 0, 5.0, 5.0),
            (2, 1, 0, 9.0, 10.5),
            (1, 1, 1, 2.0, 2.5),
            (2, 0, 1, 8.0, 8.75),
            (1, 0, 0, 6.5, 6.0),
            (2, 1, 1, 3.0, 3.3),
        ];
        let mut table = MetricTable::new(2, 2, 2);
        for &(h, j, g, f, a) in &data {
            table.record(&InstanceRecord {
                roll: 0,
                origin_unix: 0,
                horizon: h,
                site: j,
                height: g,
                forecast_mps: f,
                lo_mps: None,
                hi_mps: None,
                actual_mps: Some(a),
                forecast_trans: None,
                actual_trans: None,
            });
        }
        let hand = |pick: &dyn Fn(usize, usize, usize) -> bool| -> f64 {
            let mut s = 0.0;
            let mut c = 0;
            for &(h, j, g, f, a) in &data {
                if pick(h, j, g) {
                    s += (a - f).abs();
                    c += 1;
                }
            }
            s / c as f64
        };
        let got = table.mae_by_height(0, 1).unwrap();
        let expect = hand(&|h, _, g| h == 1 && g == 0);
        assert!((got - expect).abs() < 1e-15);
        let got = table.mae_by_site(1, 2).unwrap();
        let expect = hand(&|h, j, _| h == 2 && j == 1);
        assert!((got - expect).abs() < 1e-15);

        // Overall = count-weighted mean of per-height MAEs.
        let mut num = 0.0;
        let mut den = 0usize;
        for g in 0..2 {
            for h in 1..=2 {
                if let Some(m) = table.mae_by_height(g, h) {
                    let c = data
                        .iter()
                        .filter(|&&(hh, _, gg, _, _)| hh == h && gg == g)
                        .count();
                    num += m * c as f64;
                    den += c;
                }
            }
        }
        assert!((table.overall_mae().unwrap() - num / den as f64).abs() < 1e-12);
    }

    #[test]
    fn persistence_on_constant_and_ramp() {
        let t0 = 1_600_000_000i64;
        let times: Vec<i64> = (0..30).map(|i| t0 + i * 600).collect();
        // Site 0: constant 5; site 1: ramp 1, 1.5, 2, ...
        let mut values = Vec::new();
        for t in 0..30 {
            values.push(5.0);
            values.push(1.0 + 0.5 * t as f64);
        }
        let panel = ObservationPanel::new(times, 2, 1, values, vec![true; 60]).unwrap();
        assert_eq!(persistence_value(&panel, 10, 0, 0), Some(5.0));
        assert_eq!(persistence_value(&panel, 10, 1, 0), Some(6.0));

        // Persistence error on the ramp at horizon h is slope * h.
        let sites = SiteSet::new(vec![
            crate::domain::Site { id: "c".into(), coords: [0.0, 0.0] },
            crate::domain::Site { id: "r".into(), coords: [5.0, 0.0] },
        ])
        .unwrap();
        let heights = HeightLevels::new(vec![100.0]).unwrap();
        let protocol = RollingProtocol {
            horizon: 4,
            stride: 100,
            offline_fraction: 0.5,
            max_rolls: Some(1),
        };
        let mut f = Forecaster::Persistence;
        let out = run_protocol(
            &mut f,
            &panel,
            &sites,
            &heights,
            &protocol,
            BoxCoxParam::new(1.0, 0.0).unwrap(),
        )
        .unwrap();
        assert_eq!(out.rolls, 1);
        for h in 1..=4 {
            // site 0 constant: zero error at every horizon
            assert_eq!(out.table.mae_by_site(0, h), Some(0.0));
            // site 1 ramp: |err| = 0.5 * h
            let got = out.table.mae_by_site(1, h).unwrap();
            assert!((got - 0.5 * h as f64).abs() < 1e-12, "h={h} got {got}");
        }
        assert_eq!(out.table.instance_count, 4 * 2);
    }

    #[test]
    fn missing_actuals_are_excluded_with_count_adjustment() {
        let t0 = 1_600_000_000i64;
        let times: Vec<i64> = (0..20).map(|i| t0 + i * 600).collect();
        let mut values = vec![4.0; 20];
        let mut mask = vec![true; 20];
        mask[15] = false; // one future actual missing
        values[15] = 0.0;
        let panel = ObservationPanel::new(times, 1, 1, values, mask).unwrap();
        let sites = SiteSet::new(vec![crate::domain::Site {
            id: "a".into(),
            coords: [0.0, 0.0],
        }])
        .unwrap();
        let heights = HeightLevels::new(vec![100.0]).unwrap();
        let protocol = RollingProtocol {
            horizon: 6,
            stride: 10,
            offline_fraction: 0.6,
            max_rolls: Some(1),
        };
        let mut f = Forecaster::Persistence;
        let out = run_protocol(
            &mut f,
            &panel,
            &sites,
            &heights,
            &protocol,
            BoxCoxParam::new(1.0, 0.0).unwrap(),
        )
        .unwrap();
        // Six instances emitted, five scored.
        assert_eq!(out.table.instance_count, 6);
        let scored: usize = (1..=6)
            .filter(|&h| out.table.mae_by_height(0, h).is_some())
            .count();
        assert_eq!(scored, 5);
    }
}
