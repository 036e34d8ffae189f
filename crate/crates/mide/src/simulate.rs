//! Synthetic multi-height advected wind fields with known ground truth:
//! the desk-scale oracle behind the acceptance suite.
//!
//! The forward model is exactly the data/process pair the filter assumes:
//! the latent field iterates through the advection kernel propagator (row
//! normalized by default for stability), process and measurement noise are
//! drawn through Cholesky factors of the squared-exponential covariances,
//! a configured diurnal trend is added, and the inverse Box-Cox transform
//! maps the result to positive wind speeds. Rendered weather maps encode
//! the advection truth both through motion (an advected scalar field) and
//! directly (component channels), so the extractor's learnability is a
//! property of training rather than an ill-posed inverse problem.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::Path;

use crate::domain::{HeightLevels, ObservationPanel, SiteSet};
use crate::error::{MideError, Result};
use crate::extractor::stream::{StreamMeta, WeatherMap, WeatherMapStream};
use crate::kernel::{build_propagator, spectral_radius, squared_exp_cov, AdvectionSet};
use crate::preprocess::BoxCoxParam;
use crate::train::Omega;

/// Advection schedule for the lowest height; higher heights scale it.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum AdvectionSchedule {
    Zero,
    Constant { theta: [f64; 2] },
    /// Magnitude and direction drift smoothly through seeded sinusoids.
    SmoothRandom { mean_norm: f64, amp: f64 },
    /// Magnitude oscillates with a fixed period (hours) around `mean_norm`
    /// along a fixed direction; phase-locking it to the diurnal trend makes
    /// strong-wind periods strongly advected by construction.
    Sinusoid {
        direction_deg: f64,
        mean_norm: f64,
        amp: f64,
        period_hours: f64,
        phase: f64,
    },
}

/// Raster rendering geometry for the synthetic weather maps.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RasterConfig {
    pub width: usize,
    pub height: usize,
    /// [x0, y0, x1, y1] planar km, same frame as site coordinates.
    pub bbox: [f64; 4],
    pub noise_sd: f64,
}

/// Full simulator configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimulationConfig {
    pub t_steps: usize,
    pub step_seconds: i64,
    pub start_unix: i64,
    pub omega: Omega,
    pub normalize_propagator: bool,
    pub allow_unstable: bool,
    pub lambda: f64,
    pub offset: f64,
    /// Global diurnal trend coefficients on the transformed scale.
    pub diurnal: [f64; 5],
    pub schedule: AdvectionSchedule,
    /// Per-height multipliers on the lowest-height advection (length P).
    pub theta_height_scale: Vec<f64>,
    /// The schedule is held constant over blocks of this many steps, and
    /// one weather map is rendered per block.
    pub hold_steps: usize,
    pub theta_max: f64,
    pub raster: RasterConfig,
    pub burn_in_steps: usize,
    /// Probability that an observation is masked as missing.
    pub missing_rate: f64,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn validate(&self, heights: &HeightLevels) -> Result<()> {
        if self.t_steps < 2 {
            return Err(MideError::Config("simulation needs at least 2 steps".into()));
        }
        if self.step_seconds <= 0 || self.hold_steps == 0 {
            return Err(MideError::Config(
                "step_seconds and hold_steps must be positive".into(),
            ));
        }
        if self.theta_height_scale.len() != heights.p() {
            return Err(MideError::Config(format!(
                "theta_height_scale has {} entries for {} heights",
                self.theta_height_scale.len(),
                heights.p()
            )));
        }
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return Err(MideError::Config("missing_rate must be in [0,1]".into()));
        }
        self.omega.kernel_params()?;
        if self.omega.sigma_eps < 0.0 || self.omega.sigma_eta < 0.0 {
            return Err(MideError::Config("noise scales must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Simulated truth: advection vectors, latent states, transformed and raw
/// observations, and the rendered map stream.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    /// Arriving-step advection vectors per recorded step and height.
    pub theta: Vec<Vec<[f64; 2]>>,
    pub latent: Vec<DVector<f64>>,
    /// Transformed-scale observations `Y + eps` (before trend/inverse map).
    pub trans_obs: Vec<DVector<f64>>,
    pub panel: ObservationPanel,
    pub stream: WeatherMapStream,
    pub config: SimulationConfig,
    pub sites: SiteSet,
    pub heights: HeightLevels,
}

/// Serializable ground-truth record (`truth.json`).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TruthRecord {
    pub seed: u64,
    pub config: SimulationConfig,
    pub sites: SiteSet,
    pub heights: HeightLevels,
    pub theta: Vec<Vec<[f64; 2]>>,
}

fn schedule_theta(
    cfg: &SimulationConfig,
    rng: &mut ChaCha8Rng,
    total_steps: usize,
) -> Vec<[f64; 2]> {
    let n_blocks = total_steps.div_ceil(cfg.hold_steps);
    let mut per_block: Vec<[f64; 2]> = Vec::with_capacity(n_blocks);
    match &cfg.schedule {
        AdvectionSchedule::Zero => per_block.resize(n_blocks, [0.0, 0.0]),
        AdvectionSchedule::Constant { theta } => per_block.resize(n_blocks, *theta),
        AdvectionSchedule::SmoothRandom { mean_norm, amp } => {
            // Two incommensurate magnitude harmonics and a slow direction
            // drift, all seeded.
            let f1 = rng.gen_range(0.02..0.05);
            let f2 = rng.gen_range(0.06..0.11);
            let p1 = rng.gen_range(0.0..std::f64::consts::TAU);
            let p2 = rng.gen_range(0.0..std::f64::consts::TAU);
            let dir0 = rng.gen_range(0.0..std::f64::consts::TAU);
            let dir_amp = rng.gen_range(0.3..0.8);
            let fd = rng.gen_range(0.008..0.02);
            let pd = rng.gen_range(0.0..std::f64::consts::TAU);
            for k in 0..n_blocks {
                let kf = k as f64;
                let mag = (mean_norm
                    + amp
                        * (0.65 * (std::f64::consts::TAU * f1 * kf + p1).sin()
                            + 0.35 * (std::f64::consts::TAU * f2 * kf + p2).sin()))
                .max(0.15 * mean_norm);
                let dir = dir0 + dir_amp * (std::f64::consts::TAU * fd * kf + pd).sin();
                per_block.push([mag * dir.cos(), mag * dir.sin()]);
            }
        }
        AdvectionSchedule::Sinusoid {
            direction_deg,
            mean_norm,
            amp,
            period_hours,
            phase,
        } => {
            let dir = direction_deg.to_radians();
            let block_hours = cfg.hold_steps as f64 * cfg.step_seconds as f64 / 3600.0;
            for k in 0..n_blocks {
                let t_hours = k as f64 * block_hours;
                let mag = (mean_norm
                    + amp * (std::f64::consts::TAU * t_hours / period_hours + phase).sin())
                .max(0.0);
                per_block.push([mag * dir.cos(), mag * dir.sin()]);
            }
        }
    }
    (0..total_steps)
        .map(|t| per_block[t / cfg.hold_steps])
        .collect()
}

fn sample_vec(rng: &mut ChaCha8Rng, chol_l: Option<&DMatrix<f64>>, dim: usize) -> DVector<f64> {
    match chol_l {
        None => DVector::zeros(dim),
        Some(l) => {
            let xi = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            l * xi
        }
    }
}

/// Iterates the process model from a zero state (after a burn-in), samples
/// observations, and renders the matching weather-map stream.
pub fn simulate_process(
    cfg: &SimulationConfig,
    sites: &SiteSet,
    heights: &HeightLevels,
) -> Result<SyntheticTruth> {
    cfg.validate(heights)?;
    let n = sites.n();
    let p_heights = heights.p();
    let dim = n * p_heights;
    let kp = cfg.omega.kernel_params()?;
    let boxcox = BoxCoxParam::new(cfg.lambda, cfg.offset)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.burn_in_steps + cfg.t_steps;
    let theta_low = schedule_theta(cfg, &mut rng, total);
    let max_scale = cfg
        .theta_height_scale
        .iter()
        .cloned()
        .fold(0.0f64, f64::max);
    let theta_all: Vec<Vec<[f64; 2]>> = theta_low
        .iter()
        .map(|t| {
            cfg.theta_height_scale
                .iter()
                .map(|s| [t[0] * s, t[1] * s])
                .collect()
        })
        .collect();
    // Bound check doubles as the AdvectionSet invariant.
    AdvectionSet::new(theta_all.clone(), cfg.theta_max * max_scale.max(1.0))?;

    let sigma_eta = squared_exp_cov(cfg.omega.sigma_eta, cfg.omega.ell_eta, sites, p_heights);
    let sigma_eps = squared_exp_cov(cfg.omega.sigma_eps, cfg.omega.ell_eps, sites, p_heights);
    let chol_eta = if cfg.omega.sigma_eta > 0.0 {
        Some(
            crate::linalg::cholesky_with_jitter(&sigma_eta, "simulated process noise")?
                .l()
                .clone_owned(),
        )
    } else {
        None
    };
    let chol_eps = if cfg.omega.sigma_eps > 0.0 {
        Some(
            crate::linalg::cholesky_with_jitter(&sigma_eps, "simulated measurement noise")?
                .l()
                .clone_owned(),
        )
    } else {
        None
    };

    // Stability screen on a few representative propagators.
    if !cfg.normalize_propagator && !cfg.allow_unstable {
        for probe in [0usize, total / 2, total - 1] {
            let prop = build_propagator(0, &theta_all[probe], sites, &kp, false);
            let rho = spectral_radius(&prop.matrix);
            if rho > 1.0 + 1e-9 {
                return Err(MideError::Numerical(format!(
                    "un-normalized propagator has spectral radius {rho:.4} > 1 at step {probe}; \
                     enable normalization or the unstable override"
                )));
            }
        }
    }

    let mut y = DVector::<f64>::zeros(dim);
    let mut latent = Vec::with_capacity(cfg.t_steps);
    let mut trans_obs = Vec::with_capacity(cfg.t_steps);
    let mut theta_rec = Vec::with_capacity(cfg.t_steps);
    let mut times = Vec::with_capacity(cfg.t_steps);
    let mut values = vec![0.0; cfg.t_steps * n * p_heights];
    let mut mask = vec![true; cfg.t_steps * n * p_heights];

    for t in 0..total {
        let prop = build_propagator(0, &theta_all[t], sites, &kp, cfg.normalize_propagator);
        y = &prop.matrix * &y + sample_vec(&mut rng, chol_eta.as_ref(), dim);
        if t < cfg.burn_in_steps {
            continue;
        }
        let rec = t - cfg.burn_in_steps;
        let unix = cfg.start_unix + rec as i64 * cfg.step_seconds;
        let t_hours = rec as f64 * cfg.step_seconds as f64 / 3600.0;
        let trend = {
            let row = crate::preprocess::diurnal_design_row(t_hours);
            row.iter()
                .zip(&cfg.diurnal)
                .map(|(x, c)| x * c)
                .sum::<f64>()
        };
        let z = &y + sample_vec(&mut rng, chol_eps.as_ref(), dim);
        for g in 0..p_heights {
            for j in 0..n {
                let w = z[g * n + j] + trend;
                let v = boxcox.invert(w).map_err(|e| {
                    MideError::Numerical(format!(
                        "simulated transformed value {w:.3} cannot be inverted to a positive \
                         speed at step {rec}: {e}; increase the offset or use lambda 0"
                    ))
                })?;
                let flat = (rec * n + j) * p_heights + g;
                values[flat] = v;
                mask[flat] = !(cfg.missing_rate > 0.0 && rng.gen_bool(cfg.missing_rate));
            }
        }
        latent.push(y.clone());
        trans_obs.push(z);
        theta_rec.push(theta_all[t].clone());
        times.push(unix);
    }

    let panel = ObservationPanel::new(times, n, p_heights, values, mask)?;
    let stream = render_weather_maps(cfg, &theta_low[cfg.burn_in_steps..], cfg.start_unix)?;
    Ok(SyntheticTruth {
        theta: theta_rec,
        latent,
        trans_obs,
        panel,
        stream,
        config: cfg.clone(),
        sites: sites.clone(),
        heights: heights.clone(),
    })
}

/// Renders the synthetic map stream for the recorded window: channel 0 is a
/// smooth bump field advected by the lowest-height truth, channels 1 and 2
/// are the advection components plus pixel noise.
pub fn render_weather_maps(
    cfg: &SimulationConfig,
    theta_low_recorded: &[[f64; 2]],
    start_unix: i64,
) -> Result<WeatherMapStream> {
    let r = &cfg.raster;
    if r.width < 4 || r.height < 4 {
        return Err(MideError::Config("raster must be at least 4x4".into()));
    }
    let span_x = r.bbox[2] - r.bbox[0];
    let span_y = r.bbox[3] - r.bbox[1];
    if !(span_x > 0.0 && span_y > 0.0) {
        return Err(MideError::Config("raster bbox must have positive extent".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    // Seeded torus bump field.
    let n_bumps = 10;
    let bumps: Vec<([f64; 2], f64, f64)> = (0..n_bumps)
        .map(|_| {
            (
                [
                    r.bbox[0] + rng.gen_range(0.0..span_x),
                    r.bbox[1] + rng.gen_range(0.0..span_y),
                ],
                rng.gen_range(0.15..0.35) * span_x.min(span_y),
                rng.gen_range(0.5..1.5),
            )
        })
        .collect();
    let field = |x: f64, y: f64| -> f64 {
        let mut acc = 0.0;
        for (c, s, a) in &bumps {
            let mut dx = (x - c[0]).rem_euclid(span_x);
            if dx > span_x / 2.0 {
                dx -= span_x;
            }
            let mut dy = (y - c[1]).rem_euclid(span_y);
            if dy > span_y / 2.0 {
                dy -= span_y;
            }
            acc += a * (-(dx * dx + dy * dy) / (s * s)).exp();
        }
        acc
    };

    let t_steps = theta_low_recorded.len();
    let n_maps = t_steps.div_ceil(cfg.hold_steps);
    let map_step_seconds = cfg.hold_steps as i64 * cfg.step_seconds;
    let px = span_x / r.width as f64;
    let py = span_y / r.height as f64;
    let mut maps = Vec::with_capacity(n_maps);
    let mut shift = [0.0f64; 2];
    let mut consumed = 0usize;
    for k in 0..n_maps {
        let theta = theta_low_recorded[k * cfg.hold_steps];
        let mut data = Vec::with_capacity(3 * r.width * r.height);
        // Channel 0: advected scalar field sampled at pixel centers.
        for iy in 0..r.height {
            for ix in 0..r.width {
                let x = r.bbox[0] + (ix as f64 + 0.5) * px;
                let y = r.bbox[1] + (iy as f64 + 0.5) * py;
                data.push(field(x - shift[0], y - shift[1]) as f32);
            }
        }
        // Channels 1-2: advection components plus pixel noise.
        for comp in 0..2 {
            for _ in 0..r.width * r.height {
                let noise = if r.noise_sd > 0.0 {
                    r.noise_sd * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                data.push((theta[comp] + noise) as f32);
            }
        }
        maps.push(WeatherMap {
            timestamp: start_unix + k as i64 * map_step_seconds,
            data,
        });
        // Advance the cumulative displacement across this block's steps.
        let block_end = ((k + 1) * cfg.hold_steps).min(t_steps);
        for step in consumed..block_end {
            shift[0] += theta_low_recorded[step][0];
            shift[1] += theta_low_recorded[step][1];
        }
        consumed = block_end;
    }
    let meta = StreamMeta {
        channels: vec![
            "advected_scalar".into(),
            "advection_u".into(),
            "advection_v".into(),
        ],
        width: r.width,
        height: r.height,
        bbox: r.bbox,
        step_seconds: map_step_seconds,
    };
    WeatherMapStream::new(meta, maps)
}

/// Writes `obs.csv`, the `maps/` stream directory, and `truth.json`.
pub fn write_fixture(truth: &SyntheticTruth, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| MideError::io(dir.display().to_string(), e))?;
    crate::io::write_observation_csv(&truth.panel, &truth.sites, &truth.heights, &dir.join("obs.csv"))?;
    truth.stream.write_dir(&dir.join("maps"))?;
    let record = TruthRecord {
        seed: truth.config.seed,
        config: truth.config.clone(),
        sites: truth.sites.clone(),
        heights: truth.heights.clone(),
        theta: truth.theta.clone(),
    };
    let path = dir.join("truth.json");
    let json = serde_json::to_string_pretty(&record)
        .map_err(|e| MideError::Data(format!("truth serialization: {e}")))?;
    std::fs::write(&path, json).map_err(|e| MideError::io(path.display().to_string(), e))
}

/// Reads a `truth.json` written by [`write_fixture`].
pub fn read_truth(path: &Path) -> Result<TruthRecord> {
    let text =
        std::fs::read_to_string(path).map_err(|e| MideError::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| MideError::Data(format!("bad truth.json: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Site;

    fn two_sites() -> SiteSet {
        SiteSet::new(vec![
            Site { id: "w".into(), coords: [0.0, 0.0] },
            Site { id: "e".into(), coords: [20.0, 0.0] },
        ])
        .unwrap()
    }

    fn base_config(seed: u64) -> SimulationConfig {
        SimulationConfig {
            t_steps: 240,
            step_seconds: 600,
            start_unix: 1_600_000_000,
            omega: Omega {
                ell_same: 16.0,
                ell_cross: 8.0,
                sigma_eps: 0.08,
                ell_eps: 10.0,
                sigma_eta: 0.12,
                ell_eta: 12.0,
            },
            normalize_propagator: true,
            allow_unstable: false,
            lambda: 0.0,
            offset: 0.0,
            diurnal: [2.1, 0.25, 0.0, 0.05, 0.0],
            schedule: AdvectionSchedule::Constant { theta: [2.5, 0.0] },
            theta_height_scale: vec![1.0],
            hold_steps: 6,
            theta_max: 30.0,
            raster: RasterConfig {
                width: 12,
                height: 10,
                bbox: [-30.0, -25.0, 30.0, 25.0],
                noise_sd: 0.1,
            },
            burn_in_steps: 60,
            missing_rate: 0.0,
            seed,
        }
    }

    #[test]
    fn noiseless_single_site_is_constant() {
        let sites = SiteSet::new(vec![Site { id: "o".into(), coords: [0.0, 0.0] }]).unwrap();
        let heights = HeightLevels::new(vec![100.0]).unwrap();
        let mut cfg = base_config(3);
        cfg.omega.sigma_eps = 0.0;
        cfg.omega.sigma_eta = 0.0;
        cfg.schedule = AdvectionSchedule::Zero;
        cfg.diurnal = [1.5, 0.0, 0.0, 0.0, 0.0];
        cfg.t_steps = 50;
        let truth = simulate_process(&cfg, &sites, &heights).unwrap();
        let v0 = truth.panel.value(0, 0, 0).unwrap();
        assert!((v0 - 1.5f64.exp()).abs() < 1e-12);
        for t in 1..50 {
            assert_eq!(truth.panel.value(t, 0, 0).unwrap(), v0);
        }
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let sites = two_sites();
        let heights = HeightLevels::new(vec![100.0]).unwrap();
        let cfg = base_config(11);
        let a = simulate_process(&cfg, &sites, &heights).unwrap();
        let b = simulate_process(&cfg, &sites, &heights).unwrap();
        for t in 0..cfg.t_steps {
            for j in 0..2 {
                assert_eq!(
                    a.panel.value(t, j, 0).unwrap().to_bits(),
                    b.panel.value(t, j, 0).unwrap().to_bits()
                );
            }
        }
        for (ma, mb) in a.stream.maps.iter().zip(&b.stream.maps) {
            assert_eq!(ma.timestamp, mb.timestamp);
            for (x, y) in ma.data.iter().zip(&mb.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let c = simulate_process(&base_config(12), &sites, &heights).unwrap();
        assert_ne!(
            a.panel.value(0, 0, 0).unwrap().to_bits(),
            c.panel.value(0, 0, 0).unwrap().to_bits()
        );
    }

    #[test]
    fn measurement_noise_sample_covariance_converges() {
        let sites = two_sites();
        let heights = HeightLevels::new(vec![100.0, 140.0]).unwrap();
        let mut cfg = base_config(7);
        cfg.t_steps = 10_000;
        cfg.burn_in_steps = 20;
        cfg.theta_height_scale = vec![1.0, 1.3];
        cfg.raster.width = 6;
        cfg.raster.height = 6;
        let truth = simulate_process(&cfg, &sites, &heights).unwrap();
        let dim = 4;
        let mut acc = DMatrix::<f64>::zeros(dim, dim);
        for (z, y) in truth.trans_obs.iter().zip(&truth.latent) {
            let eps = z - y;
            acc += &eps * eps.transpose();
        }
        acc /= truth.trans_obs.len() as f64;
        let target = squared_exp_cov(cfg.omega.sigma_eps, cfg.omega.ell_eps, &sites, 2);
        let rel = (acc - &target).norm() / target.norm();
        assert!(rel < 0.10, "relative Frobenius error {rel}");
    }

    #[test]
    fn static_field_when_advection_and_noise_vanish() {
        let mut cfg = base_config(5);
        cfg.schedule = AdvectionSchedule::Zero;
        cfg.raster.noise_sd = 0.0;
        cfg.t_steps = 36;
        let theta = vec![[0.0, 0.0]; 36];
        let stream = render_weather_maps(&cfg, &theta, cfg.start_unix).unwrap();
        assert!(stream.len() >= 2);
        let plane = cfg.raster.width * cfg.raster.height;
        for k in 1..stream.len() {
            for i in 0..plane {
                assert_eq!(stream.maps[k].data[i], stream.maps[0].data[i]);
            }
            // Component channels are exactly zero.
            for i in plane..3 * plane {
                assert_eq!(stream.maps[k].data[i], 0.0);
            }
        }
    }

    /// Integer cross-correlation displacement between consecutive frames on
    /// the torus; written independently of the renderer.
    fn displacement_oracle(a: &[f32], b: &[f32], w: usize, h: usize, max_shift: isize) -> (isize, isize) {
        let mut best = (0isize, 0isize);
        let mut best_score = f64::NEG_INFINITY;
        for sy in -max_shift..=max_shift {
            for sx in -max_shift..=max_shift {
                let mut score = 0.0;
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let xx = (x + sx).rem_euclid(w as isize) as usize;
                        let yy = (y + sy).rem_euclid(h as isize) as usize;
                        score +=
                            a[y as usize * w + x as usize] as f64 * b[yy * w + xx] as f64;
                    }
                }
                if score > best_score {
                    best_score = score;
                    best = (sx, sy);
                }
            }
        }
        best
    }

    #[test]
    fn rendered_motion_matches_configured_advection() {
        // One map per step, constant advection of exactly 2 pixels east and
        // 1 pixel north, no pixel noise.
        let mut cfg = base_config(9);
        cfg.hold_steps = 1;
        cfg.raster = RasterConfig {
            width: 16,
            height: 16,
            bbox: [0.0, 0.0, 32.0, 32.0],
            noise_sd: 0.0,
        };
        let theta = [4.0, 2.0]; // km per step; pixel = 2 km
        let frames = vec![theta; 8];
        let stream = render_weather_maps(&cfg, &frames, cfg.start_unix).unwrap();
        let plane = 16 * 16;
        for k in 1..stream.len() {
            let (sx, sy) = displacement_oracle(
                &stream.maps[k - 1].data[..plane],
                &stream.maps[k].data[..plane],
                16,
                16,
                4,
            );
            assert_eq!((sx, sy), (2, 1), "frame {k}");
        }
        // Component channels carry theta directly.
        for m in &stream.maps {
            assert!((m.data[plane] as f64 - 4.0).abs() < 1e-6);
            assert!((m.data[2 * plane] as f64 - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn eastward_advection_yields_negative_asymmetry_downwind() {
        // The kernel peaks at x = s + theta, so the field drifts along
        // -theta: with theta pointing east, transport runs east -> west and
        // the western site is downwind. The semivariogram asymmetry
        // a(west, east, u) at the travel lag must then be negative.
        let sites = two_sites(); // 20 km apart on the x axis
        let heights = HeightLevels::new(vec![100.0]).unwrap();
        let mut negatives = 0;
        let mut total = 0;
        for seed in 0..12 {
            let mut cfg = base_config(100 + seed);
            cfg.t_steps = 900;
            cfg.schedule = AdvectionSchedule::Constant { theta: [4.0, 0.0] };
            cfg.omega.ell_eta = 6.0; // site-specific process shocks
            cfg.omega.sigma_eps = 0.05;
            cfg.raster.width = 6;
            cfg.raster.height = 6;
            let truth = simulate_process(&cfg, &sites, &heights).unwrap();
            let pre = crate::preprocess::preprocess_panel(&truth.panel, 0.0, Some(0.0)).unwrap();
            let r_w = pre.residual_series(2, 0, 0);
            let r_e = pre.residual_series(2, 1, 0);
            let lag = (20.0f64 / 4.0).round() as usize; // travel time in steps
            let a = crate::preprocess::asymmetry(&r_w, &r_e, lag, |_| true).unwrap();
            total += 1;
            if a.value < 0.0 {
                negatives += 1;
            }
        }
        assert!(
            negatives * 10 >= total * 9,
            "asymmetry sign wrong too often: {negatives}/{total}"
        );
    }

    #[test]
    fn unstable_unnormalized_configuration_is_rejected() {
        let sites = two_sites();
        let heights = HeightLevels::new(vec![100.0, 140.0]).unwrap();
        let mut cfg = base_config(1);
        cfg.normalize_propagator = false;
        cfg.theta_height_scale = vec![1.0, 1.3];
        let err = simulate_process(&cfg, &sites, &heights);
        assert!(matches!(err, Err(MideError::Numerical(_))));
        cfg.allow_unstable = true;
        cfg.t_steps = 30;
        cfg.burn_in_steps = 5;
        assert!(simulate_process(&cfg, &sites, &heights).is_ok());
    }
}
