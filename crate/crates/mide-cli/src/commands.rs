//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mide::domain::HeightLevels;
use mide::evaluate::{improvement, power, Forecaster, ProtocolOutput, RollingProtocol};
use mide::extractor::stream::WeatherMapStream;
use mide::io;
use mide::plot::{line_plot, Series};
use mide::preprocess::{self, Regime};
use mide::simulate::{self, AdvectionSchedule, RasterConfig, SimulationConfig};
use mide::train::{self, FittedModel, ModelSpec, Omega, TrainingConfig};
use mide::{MideError, Result};

use crate::config::RunConfig;

fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| MideError::io(out.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| MideError::io(path.display().to_string(), e))
}

fn training_config(cfg: &RunConfig) -> Result<TrainingConfig> {
    let d = TrainingConfig::default();
    Ok(TrainingConfig {
        subseq_len: cfg.usize_or("train.subseq_len", d.subseq_len)?,
        batch_size: cfg.usize_or("train.batch_size", d.batch_size)?,
        batches_per_epoch: cfg.usize_or("train.batches_per_epoch", d.batches_per_epoch)?,
        lr_phi: cfg.f64_or("train.lr_phi", d.lr_phi)?,
        lr_omega: cfg.f64_or("train.lr_omega", d.lr_omega)?,
        momentum: cfg.f64_or("train.momentum", d.momentum)?,
        max_epochs: cfg.usize_or("train.max_epochs", d.max_epochs)?,
        patience: cfg.usize_or("train.patience", d.patience)?,
        lr_decay_patience: cfg.usize_or("train.lr_decay_patience", d.lr_decay_patience)?,
        burn_in: cfg.usize_or("train.burn_in", d.burn_in)?,
        val_fraction: cfg.f64_or("train.val_fraction", d.val_fraction)?,
        omega_warmup_epochs: cfg.usize_or("train.omega_warmup_epochs", d.omega_warmup_epochs)?,
        online_window_steps: cfg.usize_or("train.online_window_steps", d.online_window_steps)?,
        online_iters: cfg.usize_or("train.online_iters", d.online_iters)?,
        grad_clip: cfg.f64_or("train.grad_clip", d.grad_clip)?,
        seed: cfg.u64_or("seed", d.seed)?,
    })
}

fn model_spec(cfg: &RunConfig) -> Result<ModelSpec> {
    let d = ModelSpec::default();
    let conv = cfg.f64_list_or("extractor.conv_channels", &[8.0, 16.0])?;
    if conv.len() != 2 || conv.iter().any(|&c| c < 1.0 || c.fract() != 0.0) {
        return Err(MideError::Config(
            "extractor.conv_channels must be two positive integers".into(),
        ));
    }
    Ok(ModelSpec {
        conv_channels: [conv[0] as usize, conv[1] as usize],
        feat_dim: cfg.usize_or("extractor.feat_dim", d.feat_dim)?,
        context_len: cfg.usize_or("extractor.context_len", d.context_len)?,
        theta_max: cfg.f64_auto("model.theta_max")?,
        normalize_propagator: cfg.bool_or("model.normalize_propagator", d.normalize_propagator)?,
        omega_init: Omega {
            ell_same: cfg.f64_or("model.ell_same_init", d.omega_init.ell_same)?,
            ell_cross: cfg.f64_or("model.ell_cross_init", d.omega_init.ell_cross)?,
            sigma_eps: cfg.f64_or("model.sigma_eps_init", d.omega_init.sigma_eps)?,
            ell_eps: cfg.f64_or("model.ell_eps_init", d.omega_init.ell_eps)?,
            sigma_eta: cfg.f64_or("model.sigma_eta_init", d.omega_init.sigma_eta)?,
            ell_eta: cfg.f64_or("model.ell_eta_init", d.omega_init.ell_eta)?,
        },
        boxcox_offset: cfg.f64_or("model.boxcox_offset", d.boxcox_offset)?,
        boxcox_lambda: cfg.f64_auto("model.boxcox_lambda")?,
        alpha: cfg.f64_or("model.alpha", d.alpha)?,
    })
}

fn protocol_config(cfg: &RunConfig) -> Result<RollingProtocol> {
    let d = RollingProtocol::default();
    Ok(RollingProtocol {
        horizon: cfg.usize_or("protocol.horizon", d.horizon)?,
        stride: cfg.usize_or("protocol.stride", d.stride)?,
        offline_fraction: cfg.f64_or("protocol.offline_fraction", d.offline_fraction)?,
        max_rolls: cfg.usize_opt("protocol.max_rolls")?,
    })
}

fn parse_schedule(text: &str) -> Result<AdvectionSchedule> {
    let parts: Vec<&str> = text.split(':').collect();
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| MideError::Config(format!("bad number '{s}' in sim.schedule")))
    };
    match parts.as_slice() {
        ["zero"] => Ok(AdvectionSchedule::Zero),
        ["constant", x, y] => Ok(AdvectionSchedule::Constant {
            theta: [num(x)?, num(y)?],
        }),
        ["smooth", mean, amp] => Ok(AdvectionSchedule::SmoothRandom {
            mean_norm: num(mean)?,
            amp: num(amp)?,
        }),
        ["sinusoid", dir, mean, amp, period, phase] => Ok(AdvectionSchedule::Sinusoid {
            direction_deg: num(dir)?,
            mean_norm: num(mean)?,
            amp: num(amp)?,
            period_hours: num(period)?,
            phase: num(phase)?,
        }),
        _ => Err(MideError::Config(format!(
            "sim.schedule '{text}' is not zero | constant:x:y | smooth:mean:amp | \
             sinusoid:dir_deg:mean:amp:period_h:phase"
        ))),
    }
}

pub fn simulation_config(cfg: &RunConfig, heights: &HeightLevels) -> Result<SimulationConfig> {
    let bbox = cfg.f64_list_or("sim.raster_bbox", &[-40.0, -40.0, 40.0, 40.0])?;
    if bbox.len() != 4 {
        return Err(MideError::Config("sim.raster_bbox needs 4 numbers".into()));
    }
    let scale =
        cfg.f64_list_or("sim.theta_height_scale", &vec![1.0; heights.p()])?;
    Ok(SimulationConfig {
        t_steps: cfg.usize_or("sim.t_steps", 2000)?,
        step_seconds: cfg.i64_or("sim.step_seconds", 600)?,
        start_unix: cfg.timestamp_or("sim.start_time", 1_590_969_600)?, // 2020-06-01
        omega: Omega {
            ell_same: cfg.f64_or("sim.ell_same", 18.0)?,
            ell_cross: cfg.f64_or("sim.ell_cross", 9.0)?,
            sigma_eps: cfg.f64_or("sim.sigma_eps", 0.08)?,
            ell_eps: cfg.f64_or("sim.ell_eps", 10.0)?,
            sigma_eta: cfg.f64_or("sim.sigma_eta", 0.12)?,
            ell_eta: cfg.f64_or("sim.ell_eta", 8.0)?,
        },
        normalize_propagator: cfg.bool_or("sim.normalize_propagator", true)?,
        allow_unstable: cfg.bool_or("sim.allow_unstable", false)?,
        lambda: cfg.f64_or("sim.lambda", 0.0)?,
        offset: cfg.f64_or("sim.offset", 0.0)?,
        diurnal: {
            let d = cfg.f64_list_or("sim.diurnal", &[2.1, 0.25, 0.0, 0.05, 0.0])?;
            if d.len() != 5 {
                return Err(MideError::Config("sim.diurnal needs 5 coefficients".into()));
            }
            [d[0], d[1], d[2], d[3], d[4]]
        },
        schedule: parse_schedule(cfg.str_or("sim.schedule", "smooth:3.5:1.8"))?,
        theta_height_scale: scale,
        hold_steps: cfg.usize_or("sim.hold_steps", 6)?,
        theta_max: cfg.f64_or("sim.theta_max", 12.0)?,
        raster: RasterConfig {
            width: cfg.usize_or("sim.raster_width", 16)?,
            height: cfg.usize_or("sim.raster_height", 16)?,
            bbox: [bbox[0], bbox[1], bbox[2], bbox[3]],
            noise_sd: cfg.f64_or("sim.raster_noise_sd", 0.3)?,
        },
        burn_in_steps: cfg.usize_or("sim.burn_in_steps", 100)?,
        missing_rate: cfg.f64_or("sim.missing_rate", 0.0)?,
        seed: cfg.u64_or("seed", 42)?,
    })
}

fn load_heights(cfg: &RunConfig) -> Result<HeightLevels> {
    HeightLevels::new(cfg.f64_list_or("model.heights", &[100.0, 140.0, 180.0])?)
}

/// `simulate --config <file> --out <dir>`
pub fn cmd_simulate(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let sites_path = cfg
        .path("paths.sites")
        .ok_or_else(|| MideError::Config("simulate needs paths.sites in the config".into()))?;
    let sites = io::read_sites_csv(&sites_path)?;
    let heights = load_heights(&cfg)?;
    let sim_cfg = simulation_config(&cfg, &heights)?;
    let truth = simulate::simulate_process(&sim_cfg, &sites, &heights)?;
    ensure_out_dir(out)?;
    simulate::write_fixture(&truth, out)?;
    println!(
        "simulated {} steps x {} sites x {} heights -> {}",
        truth.panel.len_t(),
        sites.n(),
        heights.p(),
        out.display()
    );
    Ok(())
}

/// `diagnose --obs --sites --out [--max-lag-hours]`
pub fn cmd_diagnose(
    obs: &Path,
    sites_path: &Path,
    out: &Path,
    max_lag_hours: f64,
) -> Result<()> {
    let sites = io::read_sites_csv(sites_path)?;
    // Heights are discovered from the file by trying the canonical levels
    // first; fall back to scanning the CSV header-free is unnecessary since
    // heights are data. Read with a permissive pass: collect distinct heights.
    let heights = discover_heights(obs)?;
    let panel = io::read_observation_csv(obs, &sites, &heights)?;
    ensure_out_dir(out)?;

    // Diurnal detrend per (site, height) on the raw speeds.
    let mut resid: Vec<Vec<Option<f64>>> = vec![vec![None; panel.len_t()]; sites.n() * heights.p()];
    for j in 0..sites.n() {
        for g in 0..heights.p() {
            let mut ts = Vec::new();
            let mut vs = Vec::new();
            let mut idxs = Vec::new();
            for t in 0..panel.len_t() {
                if let Some(v) = panel.value(t, j, g) {
                    ts.push(panel.hours_at(t));
                    vs.push(v);
                    idxs.push(t);
                }
            }
            let (_, r) = preprocess::fit_diurnal(&ts, &vs)?;
            for (k, &t) in idxs.iter().enumerate() {
                resid[g * sites.n() + j][t] = Some(r[k]);
            }
        }
    }
    let regimes = preprocess::regime_labels(&panel);
    let steps_per_hour = (3600.0 / panel.step_seconds() as f64).round().max(1.0) as usize;
    let max_lag = ((max_lag_hours * steps_per_hour as f64) as usize).max(1);

    let mut csv = String::from("height,regime,pair,lag_hours,asymmetry\n");
    let mut plots: BTreeMap<(usize, &'static str), Vec<Series>> = BTreeMap::new();
    for g in 0..heights.p() {
        for i in 0..sites.n() {
            for j in (i + 1)..sites.n() {
                for regime in [Regime::Weak, Regime::Strong] {
                    let r_i: Vec<f64> = resid[g * sites.n() + i]
                        .iter()
                        .map(|v| v.unwrap_or(0.0))
                        .collect();
                    let r_j: Vec<f64> = resid[g * sites.n() + j]
                        .iter()
                        .map(|v| v.unwrap_or(0.0))
                        .collect();
                    let mut points = Vec::new();
                    for lag in 1..=max_lag {
                        let ok = |t: usize| {
                            regimes[t] == Some(regime)
                                && resid[g * sites.n() + i][t + lag].is_some()
                                && resid[g * sites.n() + j][t].is_some()
                        };
                        match preprocess::asymmetry(&r_i, &r_j, lag, ok) {
                            Ok(a) => {
                                let lag_hours = lag as f64 / steps_per_hour as f64;
                                csv.push_str(&format!(
                                    "{},{},{}-{},{lag_hours},{}\n",
                                    heights.values()[g],
                                    regime.label(),
                                    sites.sites()[i].id,
                                    sites.sites()[j].id,
                                    a.value
                                ));
                                points.push((lag_hours, a.value));
                            }
                            Err(_) => continue, // empty regime subset at this lag
                        }
                    }
                    if !points.is_empty() {
                        plots
                            .entry((g, regime.label()))
                            .or_default()
                            .push(Series {
                                label: format!(
                                    "{}-{}",
                                    sites.sites()[i].id,
                                    sites.sites()[j].id
                                ),
                                points,
                            });
                    }
                }
            }
        }
    }
    write_text(&out.join("asymmetry.csv"), &csv)?;
    for ((g, regime), series) in plots {
        let svg = line_plot(
            &format!("Asymmetry at {} m, {} winds", heights.values()[g], regime),
            "lag (hours)",
            "asymmetry",
            &series,
        );
        write_text(
            &out.join(format!("asymmetry_h{}_{}.svg", heights.values()[g], regime)),
            &svg,
        )?;
    }
    println!("diagnostics written to {}", out.display());
    Ok(())
}

/// Distinct heights present in an observation CSV, ascending.
fn discover_heights(obs: &Path) -> Result<HeightLevels> {
    let text = std::fs::read_to_string(obs)
        .map_err(|e| MideError::io(obs.display().to_string(), e))?;
    let mut heights: Vec<f64> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            continue;
        }
        let h: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|e| MideError::Data(format!("row {}: bad height: {e}", i + 1)))?;
        if !heights.iter().any(|&x| (x - h).abs() < 1e-9) {
            heights.push(h);
        }
    }
    heights.sort_by(|a, b| a.partial_cmp(b).unwrap());
    HeightLevels::new(heights)
}

/// `fit --obs --maps --config --out model.bin [--sites]`
pub fn cmd_fit(
    obs: &Path,
    maps: &Path,
    config: &Path,
    out: &Path,
    sites_flag: Option<&Path>,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let sites_path = sites_flag
        .map(|p| p.to_path_buf())
        .or_else(|| cfg.path("paths.sites"))
        .ok_or_else(|| {
            MideError::Config("fit needs --sites or paths.sites in the config".into())
        })?;
    let sites = io::read_sites_csv(&sites_path)?;
    let heights = load_heights(&cfg)?;
    let full_panel = io::read_observation_csv(obs, &sites, &heights)?;
    // When the config carries a protocol split, fit only on the offline
    // fraction so later evaluation rolls stay out of sample.
    let frac = cfg.f64_or("protocol.offline_fraction", 1.0)?;
    let cut = ((full_panel.len_t() as f64) * frac).floor() as usize;
    let panel = if cut < full_panel.len_t() {
        full_panel.slice(0, cut.max(2))?
    } else {
        full_panel
    };
    let stream = WeatherMapStream::read_dir(maps)?;
    let spec = model_spec(&cfg)?;
    let tcfg = training_config(&cfg)?;
    let model = train::offline_fit(&panel, &stream, &sites, &heights, &spec, &tcfg)?;
    model.save(out)?;
    // Training log next to the model artifact.
    let mut log_csv = String::from("epoch,train_nll,val_nll,lr\n");
    for row in &model.log {
        log_csv.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.train_nll, row.val_nll, row.lr_phi
        ));
    }
    let log_path = out.with_extension("log.csv");
    write_text(&log_path, &log_csv)?;
    println!(
        "fitted model saved to {} ({} epochs logged; log at {})",
        out.display(),
        model.log.len(),
        log_path.display()
    );
    Ok(())
}

/// `forecast --model --obs --maps --out [--horizon] [--dump-propagator]`
pub fn cmd_forecast(
    model_path: &Path,
    obs: &Path,
    maps: &Path,
    out: &Path,
    horizon: usize,
    dump_propagator: bool,
    window_steps: usize,
) -> Result<()> {
    let model = FittedModel::load(model_path)?;
    let panel = io::read_observation_csv(obs, &model.sites, &model.heights)?;
    let stream = WeatherMapStream::read_dir(maps)?;
    ensure_out_dir(out)?;

    let start = panel.len_t().saturating_sub(window_steps.max(2));
    let window = panel.slice(start, panel.len_t())?;
    let state = model.filter_window(&window, &stream)?;
    let origin_unix = *window.times().last().unwrap();

    let n = model.sites.n();
    let p_heights = model.heights.p();
    let mut cache = std::collections::HashMap::new();
    let mut props = Vec::with_capacity(horizon);
    for h in 1..=horizon {
        let unix = origin_unix + h as i64 * model.step_seconds;
        props.push(model.propagator_at(&stream, unix, &mut cache)?);
    }
    let obs_maps = vec![mide::domain::ObservationMap::full(n * p_heights); horizon];
    let fc = mide::ssm::forecast(
        &state.belief,
        &props,
        &model.sigma_eta(),
        &model.sigma_eps(),
        &obs_maps,
        model.alpha,
    )?;
    let mut rows = Vec::new();
    for h in 1..=horizon {
        let unix = origin_unix + h as i64 * model.step_seconds;
        let (lo_t, hi_t) = fc.interval(h - 1);
        for g in 0..p_heights {
            for j in 0..n {
                let k = g * n + j;
                let trend = model.trend(j, g, unix);
                let inv = |w: f64| model.boxcox.invert(w).unwrap_or(0.0).max(0.0);
                rows.push(io::ForecastRow {
                    issue_unix: origin_unix,
                    horizon_steps: h,
                    site_id: model.sites.sites()[j].id.clone(),
                    height_m: model.heights.values()[g],
                    mean_mps: inv(fc.obs_mean[h - 1][k] + trend),
                    lo95_mps: inv(lo_t[k] + trend),
                    hi95_mps: inv(hi_t[k] + trend),
                });
            }
        }
    }
    io::write_forecast_csv(&rows, &out.join("forecast.csv"))?;
    if dump_propagator {
        let mut csv = String::new();
        for r in 0..props[0].nrows() {
            let row: Vec<String> = (0..props[0].ncols())
                .map(|c| format!("{}", props[0][(r, c)]))
                .collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        write_text(&out.join("propagator_step1.csv"), &csv)?;
    }
    println!(
        "forecast of {horizon} steps from {} written to {}",
        io::format_unix(origin_unix),
        out.display()
    );
    Ok(())
}

/// `evaluate --model --obs --maps --protocol --out [--dump-advection]`
#[allow(clippy::too_many_arguments)]
pub fn cmd_evaluate(
    model_path: &Path,
    obs: &Path,
    maps: &Path,
    protocol_path: &Path,
    out: &Path,
    dump_advection: bool,
    ar_max_order: usize,
) -> Result<()> {
    let model = FittedModel::load(model_path)?;
    let panel = io::read_observation_csv(obs, &model.sites, &model.heights)?;
    let stream = WeatherMapStream::read_dir(maps)?;
    let pcfg = RunConfig::load(protocol_path)?;
    let protocol = protocol_config(&pcfg)?;
    let tcfg = training_config(&pcfg)?;
    ensure_out_dir(out)?;

    let sites = model.sites.clone();
    let heights = model.heights.clone();
    let metric_boxcox = model.boxcox;

    let mut outputs: Vec<(&'static str, ProtocolOutput)> = Vec::new();
    let mut mide_fc = Forecaster::Mide {
        model: model.clone(),
        stream: &stream,
        cfg: tcfg,
        online_updates: true,
    };
    outputs.push((
        "mide",
        mide::evaluate::run_protocol(&mut mide_fc, &panel, &sites, &heights, &protocol, metric_boxcox)?,
    ));
    let mut per = Forecaster::Persistence;
    outputs.push((
        "persistence",
        mide::evaluate::run_protocol(&mut per, &panel, &sites, &heights, &protocol, metric_boxcox)?,
    ));
    let mut ar = Forecaster::Ar {
        max_order: ar_max_order,
    };
    outputs.push((
        "ar",
        mide::evaluate::run_protocol(&mut ar, &panel, &sites, &heights, &protocol, metric_boxcox)?,
    ));

    // MAE tables.
    let mut by_height = String::from("model,height_m,horizon_steps,mae_mps\n");
    let mut by_site = String::from("model,site_id,horizon_steps,mae_mps\n");
    for (label, o) in &outputs {
        for g in 0..heights.p() {
            for h in 1..=protocol.horizon {
                if let Some(m) = o.table.mae_by_height(g, h) {
                    by_height.push_str(&format!("{label},{},{h},{m}\n", heights.values()[g]));
                }
            }
        }
        for j in 0..sites.n() {
            for h in 1..=protocol.horizon {
                if let Some(m) = o.table.mae_by_site(j, h) {
                    by_site.push_str(&format!("{label},{},{h},{m}\n", sites.sites()[j].id));
                }
            }
        }
    }
    write_text(&out.join("mae_by_height.csv"), &by_height)?;
    write_text(&out.join("mae_by_site.csv"), &by_site)?;

    // Improvement of the model over each benchmark, per height and horizon.
    let mide_out = &outputs[0].1;
    let mut imp = String::from("benchmark,height_m,horizon_steps,imp_percent\n");
    for (label, o) in outputs.iter().skip(1) {
        for g in 0..heights.p() {
            for h in 1..=protocol.horizon {
                if let (Some(a), Some(b)) = (
                    mide_out.table.mae_by_height(g, h),
                    o.table.mae_by_height(g, h),
                ) {
                    if let Some(v) = improvement(a, b) {
                        imp.push_str(&format!("{label},{},{h},{v}\n", heights.values()[g]));
                    }
                }
            }
        }
    }
    write_text(&out.join("improvement.csv"), &imp)?;

    // Interval coverage (model only).
    let mut cov = String::from("horizon_steps,coverage\n");
    for h in 1..=protocol.horizon {
        if let Some(c) = mide_out.table.coverage_at(h) {
            cov.push_str(&format!("{h},{c}\n"));
        }
    }
    write_text(&out.join("coverage.csv"), &cov)?;
    io::write_forecast_csv(&mide_out.forecast_rows, &out.join("forecasts.csv"))?;

    // MAE-vs-horizon plot per height.
    for g in 0..heights.p() {
        let series: Vec<Series> = outputs
            .iter()
            .map(|(label, o)| Series {
                label: label.to_string(),
                points: (1..=protocol.horizon)
                    .filter_map(|h| {
                        o.table
                            .mae_by_height(g, h)
                            .map(|m| (h as f64 * panel.step_seconds() as f64 / 3600.0, m))
                    })
                    .collect(),
            })
            .collect();
        write_text(
            &out.join(format!("mae_h{}.svg", heights.values()[g])),
            &line_plot(
                &format!("MAE vs horizon at {} m", heights.values()[g]),
                "horizon (hours)",
                "MAE (m/s)",
                &series,
            ),
        )?;
    }

    if dump_advection {
        let mut csv = String::from("time,height_m,theta_x_km,theta_y_km,norm_km\n");
        let mut series: Vec<Series> = heights
            .values()
            .iter()
            .map(|h| Series {
                label: format!("{h} m"),
                points: Vec::new(),
            })
            .collect();
        let t0 = mide_out.advection.first().map(|(t, _)| *t).unwrap_or(0);
        for (unix, theta) in &mide_out.advection {
            for (g, th) in theta.iter().enumerate() {
                let norm = (th[0] * th[0] + th[1] * th[1]).sqrt();
                csv.push_str(&format!(
                    "{},{},{},{},{norm}\n",
                    io::format_unix(*unix),
                    heights.values()[g],
                    th[0],
                    th[1]
                ));
                series[g]
                    .points
                    .push(((unix - t0) as f64 / 3600.0, norm));
            }
        }
        write_text(&out.join("advection.csv"), &csv)?;
        write_text(
            &out.join("advection_norms.svg"),
            &line_plot(
                "Predicted advection norms",
                "hours since first forecast",
                "norm (km/step)",
                &series,
            ),
        )?;
    }

    let overall: Vec<String> = outputs
        .iter()
        .map(|(label, o)| {
            format!(
                "{label}: overall MAE {:.4} ({} instances, {} rolls)",
                o.table.overall_mae().unwrap_or(f64::NAN),
                o.table.instance_count,
                o.rolls
            )
        })
        .collect();
    for line in &overall {
        println!("{line}");
    }
    if let Some(c) = mide_out.table.coverage_overall() {
        println!("mide: 95% interval coverage {:.3}", c);
    }
    println!("evaluation written to {}", out.display());
    Ok(())
}

/// `power` subcommand.
pub fn cmd_power(
    synth_train: Option<&Path>,
    synth_rows: usize,
    train: Option<&Path>,
    forecasts: Option<&Path>,
    out: Option<&Path>,
    hub_height: Option<f64>,
    draws: usize,
    seed: u64,
) -> Result<()> {
    if let Some(path) = synth_train {
        let rows = power::synthetic_training_rows(synth_rows, seed);
        let mut csv = String::from("hub_speed_mps,shear_above,power\n");
        for (v, s, p) in &rows {
            csv.push_str(&format!("{v},{s},{p}\n"));
        }
        write_text(path, &csv)?;
        println!("synthetic power training data ({synth_rows} rows) written to {}", path.display());
        return Ok(());
    }
    let train_path = train.ok_or_else(|| {
        MideError::Config("power needs --train <csv> (or --synth-train to generate one)".into())
    })?;
    let rows = read_power_csv(train_path)?;
    let (curve, rmse) = power::fit_power_curve(&rows)?;
    if let Some(w) = power::span_warning(&rows) {
        eprintln!("warning: {w}");
    }
    println!(
        "fitted power curve: midpoint {:.3} + {:.3}*shear m/s, width {:.3} (train RMSE {:.3})",
        curve.v_half_base, curve.v_half_shear, curve.width, rmse
    );
    let out_dir = match out {
        Some(o) => o.to_path_buf(),
        None => PathBuf::from("."),
    };
    ensure_out_dir(&out_dir)?;
    let curve_json = serde_json::to_string_pretty(&curve)
        .map_err(|e| MideError::Data(format!("curve serialization: {e}")))?;
    write_text(&out_dir.join("power_curve.json"), &curve_json)?;

    if let Some(fc_path) = forecasts {
        let converted = convert_forecasts(fc_path, &curve, hub_height, draws, seed)?;
        write_text(&out_dir.join("power_forecast.csv"), &converted)?;
        println!("power forecasts written to {}", out_dir.join("power_forecast.csv").display());
    }
    Ok(())
}

fn read_power_csv(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| MideError::io(path.display().to_string(), e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line.trim() != "hub_speed_mps,shear_above,power" {
                return Err(MideError::Data(format!(
                    "power training file {} must have header hub_speed_mps,shear_above,power",
                    path.display()
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(MideError::Data(format!("power row {}: need 3 fields", i + 1)));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|e| MideError::Data(format!("power row {}: {e}", i + 1)))
        };
        rows.push((parse(f[0])?, parse(f[1])?, parse(f[2])?));
    }
    Ok(rows)
}

/// Converts a forecast CSV to power: hub speed at the hub height, above-hub
/// shear from the two topmost heights' mean forecasts.
fn convert_forecasts(
    path: &Path,
    curve: &power::PowerCurve,
    hub_height: Option<f64>,
    draws: usize,
    seed: u64,
) -> Result<String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| MideError::io(path.display().to_string(), e))?;
    // (issue, horizon, site) -> height -> (mean, lo, hi)
    let mut groups: BTreeMap<(String, usize, String), BTreeMap<i64, (f64, f64, f64)>> =
        BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(MideError::Data(format!("forecast row {}: need 7 fields", i + 1)));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|e| MideError::Data(format!("forecast row {}: {e}", i + 1)))
        };
        let horizon: usize = f[1]
            .trim()
            .parse()
            .map_err(|e| MideError::Data(format!("forecast row {}: {e}", i + 1)))?;
        let height = parse(f[3])?;
        groups
            .entry((f[0].to_string(), horizon, f[2].to_string()))
            .or_default()
            .insert((height * 1000.0) as i64, (parse(f[4])?, parse(f[5])?, parse(f[6])?));
    }
    let mut out = String::from(
        "issue_time,horizon_steps,site_id,hub_height_m,shear_above,power_point,power_mc\n",
    );
    for ((issue, horizon, site), by_height) in groups {
        if by_height.len() < 2 {
            continue;
        }
        let heights: Vec<f64> = by_height.keys().map(|k| *k as f64 / 1000.0).collect();
        let hub = hub_height.unwrap_or_else(|| heights[heights.len() / 2]);
        let hub_key = (hub * 1000.0) as i64;
        let top_key = *by_height.keys().last().unwrap();
        let (hub_mean, hub_lo, hub_hi) = *by_height
            .get(&hub_key)
            .ok_or_else(|| MideError::Data(format!("hub height {hub} missing in forecasts")))?;
        let (top_mean, _, _) = by_height[&top_key];
        let top_h = top_key as f64 / 1000.0;
        let shear = if top_h > hub && hub_mean > 0.0 && top_mean > 0.0 {
            mide::evaluate::wind_shear(top_mean, hub_mean, top_h, hub).unwrap_or(0.0)
        } else {
            0.0
        };
        let point = curve.power(hub_mean, shear);
        // Interval half-width as a Gaussian sd proxy for the MC mean.
        let sd = ((hub_hi - hub_lo) / (2.0 * 1.959963984540054)).max(0.0);
        let mc = curve.power_mc(hub_mean, sd, shear, draws, seed);
        out.push_str(&format!(
            "{issue},{horizon},{site},{hub},{shear},{point},{mc}\n"
        ));
    }
    Ok(out)
}

/// `gradcheck --seed`
pub fn cmd_gradcheck(seed: u64) -> Result<()> {
    // Network-level check on a random instance.
    use mide::extractor::{gradient_check, ExtractorConfig, NetworkParams};
    use rand::{Rng, SeedableRng};
    let cfg = ExtractorConfig {
        in_channels: 3,
        in_height: 12,
        in_width: 12,
        conv_channels: [4, 6],
        kernel_size: 3,
        stride: 2,
        feat_dim: 12,
        context_len: 4,
        n_heights: 3,
        theta_max: 8.0,
    };
    let phi = NetworkParams::init(&cfg, seed);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let maps: Vec<Vec<f32>> = (0..cfg.context_len)
        .map(|_| {
            (0..cfg.in_channels * cfg.in_height * cfg.in_width)
                .map(|_| rng.gen_range(-1.0f32..1.0))
                .collect()
        })
        .collect();
    let window: Vec<&[f32]> = maps.iter().map(|m| m.as_slice()).collect();
    let stats = vec![(0.0, 1.0); cfg.in_channels];
    let net_report = gradient_check(&cfg, &phi, &stats, &window, seed, 220)?;
    println!("network gradients (probe loss on a random raster window):");
    print!("{}", net_report.render());

    let composite = train::composite_gradient_check(seed, 3, 40)?;
    println!("composite gradients (likelihood through kernel and network):");
    print!("{}", composite.render());

    if net_report.pass && composite.pass {
        println!("gradcheck PASS");
        Ok(())
    } else {
        Err(MideError::Numerical(format!(
            "gradient check failed: network {:.3e}, composite {:.3e}",
            net_report.max_rel_err, composite.max_rel_err
        )))
    }
}
