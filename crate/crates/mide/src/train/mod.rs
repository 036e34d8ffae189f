//! Offline joint maximum-likelihood training of the network parameters and
//! the statistical set, plus frozen-network online updates of the
//! statistical set on a rolling window.
//!
//! Training minimizes the innovation-form negative log-likelihood over
//! sampled subsequences (filter re-initialized per subsequence, a short
//! burn-in excluded from the loss), by stochastic gradient descent with
//! momentum. Positivity of the statistical parameters is structural: they
//! are optimized through a softplus reparameterization.

pub mod grad;

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::domain::{
    GaussianBelief, HeightLevels, LatentIndexer, ObservationMap, ObservationPanel, SiteSet,
};
use crate::error::{MideError, Result};
use crate::extractor::stream::WeatherMapStream;
use crate::extractor::{self, ChannelStats, ExtractorConfig, NetworkParams};
use crate::kernel::{build_noise_cov, build_propagator, KernelParams, NoiseCovParams, NoiseKind};
use crate::preprocess::{preprocess_panel, BoxCoxParam, DiurnalFit, Preprocessed};
use crate::ssm;
use grad::{kf_gradients, window_nll, WindowModel};

/// The statistical parameter set (all entries strictly positive).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Omega {
    pub ell_same: f64,
    pub ell_cross: f64,
    pub sigma_eps: f64,
    pub ell_eps: f64,
    pub sigma_eta: f64,
    pub ell_eta: f64,
}

impl Omega {
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

    pub fn from_array(a: [f64; 6]) -> Self {
        Omega {
            ell_same: a[0],
            ell_cross: a[1],
            sigma_eps: a[2],
            ell_eps: a[3],
            sigma_eta: a[4],
            ell_eta: a[5],
        }
    }

    pub fn kernel_params(&self) -> Result<KernelParams> {
        KernelParams::new(self.ell_same, self.ell_cross)
    }

    pub fn noise_params(&self) -> Result<NoiseCovParams> {
        NoiseCovParams::new(self.sigma_eps, self.ell_eps, self.sigma_eta, self.ell_eta)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn inv_softplus(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unconstrained coordinates for Omega (softplus per entry).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmegaRaw(pub [f64; 6]);

impl OmegaRaw {
    pub fn from_omega(omega: &Omega) -> Self {
        let a = omega.as_array();
        OmegaRaw([
            inv_softplus(a[0]),
            inv_softplus(a[1]),
            inv_softplus(a[2]),
            inv_softplus(a[3]),
            inv_softplus(a[4]),
            inv_softplus(a[5]),
        ])
    }

    pub fn to_omega(self) -> Omega {
        Omega::from_array([
            softplus(self.0[0]),
            softplus(self.0[1]),
            softplus(self.0[2]),
            softplus(self.0[3]),
            softplus(self.0[4]),
            softplus(self.0[5]),
        ])
    }

    /// Chain rule from constrained-space gradients into raw space.
    pub fn chain(&self, g: &grad::OmegaGrad) -> [f64; 6] {
        let ga = g.as_array();
        let mut out = [0.0; 6];
        for i in 0..6 {
            out[i] = ga[i] * sigmoid(self.0[i]);
        }
        out
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainingConfig {
    pub subseq_len: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub lr_phi: f64,
    pub lr_omega: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr_decay_patience: usize,
    pub burn_in: usize,
    pub val_fraction: f64,
    /// Epochs at the start during which only Omega moves (the network is
    /// random at init; letting the statistical set settle first stabilizes
    /// the joint phase).
    pub omega_warmup_epochs: usize,
    pub online_window_steps: usize,
    pub online_iters: usize,
    /// L2 clip on the per-observation-normalized gradient of each parameter
    /// block (the statistical set and the network separately).
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            subseq_len: 72,
            batch_size: 4,
            batches_per_epoch: 16,
            lr_phi: 1e-3,
            lr_omega: 1e-2,
            momentum: 0.9,
            max_epochs: 60,
            patience: 12,
            lr_decay_patience: 3,
            burn_in: 6,
            val_fraction: 0.1,
            omega_warmup_epochs: 2,
            online_window_steps: 1008,
            online_iters: 50,
            grad_clip: 5.0,
            seed: 42,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subseq_len < self.burn_in + 2 {
            return Err(MideError::Config(
                "subsequence length must exceed burn-in by at least 2".into(),
            ));
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 || self.max_epochs == 0 {
            return Err(MideError::Config(
                "batch size, batches per epoch, and epochs must be positive".into(),
            ));
        }
        if !(self.lr_phi > 0.0 && self.lr_omega > 0.0) {
            return Err(MideError::Config("learning rates must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return Err(MideError::Config(
                "validation fraction must lie in (0, 0.5)".into(),
            ));
        }
        Ok(())
    }
}

/// Structural model choices fixed before fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub conv_channels: [usize; 2],
    pub feat_dim: usize,
    pub context_len: usize,
    /// Advection bound; `None` resolves to 1.5x the max pairwise distance.
    pub theta_max: Option<f64>,
    pub normalize_propagator: bool,
    pub omega_init: Omega,
    pub boxcox_offset: f64,
    /// Fix the Box-Cox power instead of fitting it.
    pub boxcox_lambda: Option<f64>,
    /// Central-interval miscoverage level (0.05 gives 95% intervals).
    pub alpha: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            conv_channels: [8, 16],
            feat_dim: 32,
            context_len: 6,
            theta_max: None,
            normalize_propagator: true,
            omega_init: Omega {
                ell_same: 20.0,
                ell_cross: 12.0,
                sigma_eps: 0.3,
                ell_eps: 15.0,
                sigma_eta: 0.3,
                ell_eta: 15.0,
            },
            boxcox_offset: 0.0,
            boxcox_lambda: None,
            alpha: 0.05,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub lr_phi: f64,
    pub lr_omega: f64,
}

/// A fitted model: network parameters, statistical set, preprocessing state,
/// and everything needed to filter and forecast.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub sites: SiteSet,
    pub heights: HeightLevels,
    pub extractor_cfg: ExtractorConfig,
    pub phi: NetworkParams,
    pub omega: Omega,
    pub boxcox: BoxCoxParam,
    /// Diurnal fit per latent series (height-major).
    pub diurnal: Vec<DiurnalFit>,
    /// Unix origin of the diurnal regressors' time axis.
    pub diurnal_origin_unix: i64,
    pub channel_stats: ChannelStats,
    pub normalize_propagator: bool,
    pub alpha: f64,
    pub step_seconds: i64,
    pub log: Vec<TrainLogRow>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ModelHeader {
    format_version: u32,
    sites: SiteSet,
    heights: HeightLevels,
    extractor_cfg: ExtractorConfig,
    omega: Omega,
    boxcox: BoxCoxParam,
    diurnal: Vec<DiurnalFit>,
    diurnal_origin_unix: i64,
    channel_stats: ChannelStats,
    normalize_propagator: bool,
    alpha: f64,
    step_seconds: i64,
    log: Vec<TrainLogRow>,
}

impl FittedModel {
    pub fn indexer(&self) -> LatentIndexer {
        LatentIndexer::new(self.sites.n(), self.heights.p()).expect("validated at fit time")
    }

    /// Hours on the diurnal time axis for a unix timestamp.
    pub fn hours_at(&self, unix: i64) -> f64 {
        (unix - self.diurnal_origin_unix) as f64 / 3600.0
    }

    /// Diurnal trend value for one latent series at a unix timestamp.
    pub fn trend(&self, j: usize, g: usize, unix: i64) -> f64 {
        self.diurnal[g * self.sites.n() + j].predict(self.hours_at(unix))
    }

    /// Transforms and detrends a raw panel with the stored preprocessing
    /// state (no refitting), producing per-step residual observations.
    pub fn residualize(
        &self,
        panel: &ObservationPanel,
    ) -> Result<Vec<(DVector<f64>, ObservationMap)>> {
        let idx = self.indexer();
        let n = self.sites.n();
        let p = self.heights.p();
        if panel.n_sites() != n || panel.n_heights() != p {
            return Err(MideError::Shape(format!(
                "panel grid {}x{} does not match model grid {}x{}",
                panel.n_sites(),
                panel.n_heights(),
                n,
                p
            )));
        }
        let mut out = Vec::with_capacity(panel.len_t());
        for t in 0..panel.len_t() {
            let unix = panel.times()[t];
            let map = panel.observation_map(t, &idx);
            let mut vals = Vec::with_capacity(map.n_obs());
            for &k in map.selected() {
                let (g, j) = idx.invert(k);
                let v = panel.value(t, j, g).expect("selected implies observed");
                vals.push(self.boxcox.apply(v)? - self.trend(j, g, unix));
            }
            out.push((DVector::from_vec(vals), map));
        }
        Ok(out)
    }

    /// Predicted advection vectors at a unix timestamp, from the stream's
    /// step-held map window. Caches by map index (the prediction is constant
    /// across the observation steps one map covers).
    pub fn theta_at(
        &self,
        stream: &WeatherMapStream,
        unix: i64,
        cache: &mut HashMap<usize, Vec<[f64; 2]>>,
    ) -> Result<Vec<[f64; 2]>> {
        let mi = stream.map_index_at(unix).ok_or_else(|| {
            MideError::Data(format!(
                "no weather map at or before unix {unix}; maps are required for every step"
            ))
        })?;
        if let Some(hit) = cache.get(&mi) {
            return Ok(hit.clone());
        }
        let window_idx = stream.window_ending_at(mi, self.extractor_cfg.context_len);
        let window: Vec<&[f32]> = window_idx
            .iter()
            .map(|&k| stream.maps[k].data.as_slice())
            .collect();
        let fc = extractor::predict_advection(
            &self.extractor_cfg,
            &self.phi,
            &self.channel_stats,
            &window,
        )?;
        cache.insert(mi, fc.theta.clone());
        Ok(fc.theta)
    }

    /// Propagator for the transition arriving at `unix`.
    pub fn propagator_at(
        &self,
        stream: &WeatherMapStream,
        unix: i64,
        cache: &mut HashMap<usize, Vec<[f64; 2]>>,
    ) -> Result<DMatrix<f64>> {
        let theta = self.theta_at(stream, unix, cache)?;
        Ok(build_propagator(
            0,
            &theta,
            &self.sites,
            &self.omega.kernel_params()?,
            self.normalize_propagator,
        )
        .matrix)
    }

    pub fn sigma_eta(&self) -> DMatrix<f64> {
        build_noise_cov(
            NoiseKind::Eta,
            &self.omega.noise_params().expect("positive by construction"),
            &self.sites,
            self.heights.p(),
        )
    }

    pub fn sigma_eps(&self) -> DMatrix<f64> {
        build_noise_cov(
            NoiseKind::Epsilon,
            &self.omega.noise_params().expect("positive by construction"),
            &self.sites,
            self.heights.p(),
        )
    }

    /// Runs the filter over a raw panel window, returning the final belief
    /// (at the window's last step).
    pub fn filter_window(
        &self,
        panel: &ObservationPanel,
        stream: &WeatherMapStream,
    ) -> Result<ssm::FilterState> {
        let obs = self.residualize(panel)?;
        let mut cache = HashMap::new();
        let props: Vec<DMatrix<f64>> = (1..panel.len_t())
            .map(|t| self.propagator_at(stream, panel.times()[t], &mut cache))
            .collect::<Result<_>>()?;
        let init = initial_belief(&obs, self.indexer().dim());
        ssm::run_filter(
            init,
            &obs,
            &props,
            &self.sigma_eta(),
            &self.sigma_eps(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ModelHeader {
            format_version: 1,
            sites: self.sites.clone(),
            heights: self.heights.clone(),
            extractor_cfg: self.extractor_cfg.clone(),
            omega: self.omega,
            boxcox: self.boxcox,
            diurnal: self.diurnal.clone(),
            diurnal_origin_unix: self.diurnal_origin_unix,
            channel_stats: self.channel_stats.clone(),
            normalize_propagator: self.normalize_propagator,
            alpha: self.alpha,
            step_seconds: self.step_seconds,
            log: self.log.clone(),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| MideError::Data(format!("model header serialization: {e}")))?;
        let mut bytes = Vec::with_capacity(header_json.len() + self.phi.values.len() * 8 + 16);
        bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header_json);
        bytes.extend_from_slice(&(self.phi.values.len() as u64).to_le_bytes());
        for v in &self.phi.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes).map_err(|e| MideError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| MideError::io(path.display().to_string(), e))?;
        let need = |n: usize, at: usize| -> Result<()> {
            if bytes.len() < at + n {
                Err(MideError::Data(format!(
                    "model file truncated at byte {at}"
                )))
            } else {
                Ok(())
            }
        };
        need(8, 0)?;
        let hlen = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        need(hlen, 8)?;
        let header: ModelHeader = serde_json::from_slice(&bytes[8..8 + hlen])
            .map_err(|e| MideError::Data(format!("bad model header: {e}")))?;
        if header.format_version != 1 {
            return Err(MideError::Data(format!(
                "unsupported model format version {}",
                header.format_version
            )));
        }
        let mut at = 8 + hlen;
        need(8, at)?;
        let n_floats = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
        at += 8;
        need(n_floats * 8, at)?;
        let mut phi = NetworkParams::zeros(&header.extractor_cfg);
        if phi.values.len() != n_floats {
            return Err(MideError::Data(format!(
                "model parameter block has {} values but the architecture needs {}",
                n_floats,
                phi.values.len()
            )));
        }
        for (i, v) in phi.values.iter_mut().enumerate() {
            let o = at + i * 8;
            *v = f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        }
        Ok(FittedModel {
            sites: header.sites,
            heights: header.heights,
            extractor_cfg: header.extractor_cfg,
            phi,
            omega: header.omega,
            boxcox: header.boxcox,
            diurnal: header.diurnal,
            diurnal_origin_unix: header.diurnal_origin_unix,
            channel_stats: header.channel_stats,
            normalize_propagator: header.normalize_propagator,
            alpha: header.alpha,
            step_seconds: header.step_seconds,
            log: header.log,
        })
    }
}

/// Initial belief for a window: the first step's observations lifted into
/// latent space (zeros where unobserved), diagonal covariance `diag_var`
/// (unobserved entries widened).
pub fn initial_belief(obs: &[(DVector<f64>, ObservationMap)], dim: usize) -> GaussianBelief {
    initial_belief_with_var(obs, &DVector::from_element(dim, 1.0))
}

/// As [`initial_belief`] with explicit per-series variances.
pub fn initial_belief_with_var(
    obs: &[(DVector<f64>, ObservationMap)],
    diag_var: &DVector<f64>,
) -> GaussianBelief {
    let dim = diag_var.len();
    let mut mean = DVector::zeros(dim);
    let mut cov = DMatrix::zeros(dim, dim);
    let mut seen = vec![false; dim];
    if let Some((z, map)) = obs.first() {
        for (r, &k) in map.selected().iter().enumerate() {
            mean[k] = z[r];
            seen[k] = true;
        }
    }
    for k in 0..dim {
        cov[(k, k)] = if seen[k] { diag_var[k] } else { 4.0 * diag_var[k] };
    }
    GaussianBelief { mean, cov }
}

/// Per-series sample variance of the residual observations (floored).
pub fn residual_variances(obs: &[(DVector<f64>, ObservationMap)], dim: usize) -> DVector<f64> {
    let mut sums = vec![(0usize, 0.0f64, 0.0f64); dim];
    for (z, map) in obs {
        for (r, &k) in map.selected().iter().enumerate() {
            let (c, s, s2) = sums[k];
            sums[k] = (c + 1, s + z[r], s2 + z[r] * z[r]);
        }
    }
    DVector::from_iterator(
        dim,
        sums.into_iter().map(|(c, s, s2)| {
            if c < 2 {
                1.0
            } else {
                let mean = s / c as f64;
                ((s2 / c as f64) - mean * mean).max(1e-4)
            }
        }),
    )
}

/// One contiguous window with everything needed to evaluate the joint
/// likelihood (and its gradients) of the network and statistical parameters.
pub struct JointWindow<'a> {
    pub stream: &'a WeatherMapStream,
    pub extractor_cfg: &'a ExtractorConfig,
    pub channel_stats: &'a ChannelStats,
    pub sites: &'a SiteSet,
    pub n_heights: usize,
    pub normalize: bool,
    pub burn_in: usize,
    pub obs: &'a [(DVector<f64>, ObservationMap)],
    /// Unix time per observation step.
    pub times: &'a [i64],
    pub init: &'a GaussianBelief,
}

impl<'a> JointWindow<'a> {
    fn window_model(&self, transitions: usize) -> WindowModel<'a> {
        WindowModel::per_step(
            self.sites,
            self.n_heights,
            self.normalize,
            transitions,
            self.burn_in,
        )
    }

    /// Advection per transition, extractor run once per distinct map.
    /// Returns (theta per transition, map index per transition, cache).
    fn predict_thetas(
        &self,
        phi: &NetworkParams,
    ) -> Result<(
        Vec<Vec<[f64; 2]>>,
        Vec<usize>,
        HashMap<usize, extractor::ForwardCache>,
    )> {
        let mut by_map: HashMap<usize, extractor::ForwardCache> = HashMap::new();
        let mut theta = Vec::with_capacity(self.obs.len().saturating_sub(1));
        let mut map_idx = Vec::with_capacity(theta.capacity());
        for t in 1..self.obs.len() {
            let unix = self.times[t];
            let mi = self
                .stream
                .map_index_at(unix)
                .ok_or_else(|| MideError::Data(format!("no weather map covers unix {unix}")))?;
            if !by_map.contains_key(&mi) {
                let widx = self
                    .stream
                    .window_ending_at(mi, self.extractor_cfg.context_len);
                let window: Vec<&[f32]> = widx
                    .iter()
                    .map(|&k| self.stream.maps[k].data.as_slice())
                    .collect();
                let fc = extractor::predict_advection(
                    self.extractor_cfg,
                    phi,
                    self.channel_stats,
                    &window,
                )?;
                by_map.insert(mi, fc);
            }
            theta.push(by_map[&mi].theta.clone());
            map_idx.push(mi);
        }
        Ok((theta, map_idx, by_map))
    }

    /// Joint NLL of the window for given parameters.
    pub fn nll(&self, phi: &NetworkParams, omega: &Omega) -> Result<(f64, usize)> {
        let (theta, _, _) = self.predict_thetas(phi)?;
        window_nll(&self.window_model(theta.len()), self.obs, &theta, omega, self.init)
    }

    /// Joint gradients: NLL, observation-term count, d/dPhi (chained through
    /// the extractor), d/dOmega (constrained scale), and the per-transition
    /// d/dTheta used in the chain.
    pub fn gradient(
        &self,
        phi: &NetworkParams,
        omega: &Omega,
    ) -> Result<(f64, usize, Vec<f64>, grad::OmegaGrad, Vec<Vec<[f64; 2]>>)> {
        let (theta, map_idx, caches) = self.predict_thetas(phi)?;
        let grads = kf_gradients(&self.window_model(theta.len()), self.obs, &theta, omega, self.init)?;

        // Sum per-transition theta gradients by the map that produced them,
        // then run one extractor backward per distinct map.
        let mut upstream: HashMap<usize, Vec<[f64; 2]>> = HashMap::new();
        for (k, &mi) in map_idx.iter().enumerate() {
            let acc = upstream
                .entry(mi)
                .or_insert_with(|| vec![[0.0; 2]; self.n_heights]);
            for p in 0..self.n_heights {
                acc[p][0] += grads.d_theta[k][p][0];
                acc[p][1] += grads.d_theta[k][p][1];
            }
        }
        let mut d_phi = vec![0.0; phi.values.len()];
        let mut map_ids: Vec<usize> = upstream.keys().cloned().collect();
        map_ids.sort_unstable();
        for mi in map_ids {
            let (g, _) =
                extractor::backward(self.extractor_cfg, phi, &caches[&mi], &upstream[&mi], false);
            for (a, b) in d_phi.iter_mut().zip(&g) {
                *a += b;
            }
        }
        Ok((grads.nll, grads.n_terms, d_phi, grads.d_omega, grads.d_theta))
    }
}

/// Everything offline_fit derives from its inputs before the epoch loop.
struct FitContext<'a> {
    stream: &'a WeatherMapStream,
    sites: SiteSet,
    heights: HeightLevels,
    extractor_cfg: ExtractorConfig,
    channel_stats: ChannelStats,
    obs: Vec<(DVector<f64>, ObservationMap)>,
    times: Vec<i64>,
    diag_var: DVector<f64>,
    normalize: bool,
    burn_in: usize,
}

impl<'a> FitContext<'a> {
    /// NLL gradient over one subsequence, chained through the extractor.
    /// Returns (nll, n_terms, d_phi, d_omega_constrained).
    fn subsequence_gradient(
        &self,
        phi: &NetworkParams,
        omega: &Omega,
        start: usize,
        len: usize,
    ) -> Result<(f64, usize, Vec<f64>, grad::OmegaGrad)> {
        let obs = &self.obs[start..start + len];
        let init = initial_belief_with_var(obs, &self.diag_var);
        let window = JointWindow {
            stream: self.stream,
            extractor_cfg: &self.extractor_cfg,
            channel_stats: &self.channel_stats,
            sites: &self.sites,
            n_heights: self.heights.p(),
            normalize: self.normalize,
            burn_in: self.burn_in,
            obs,
            times: &self.times[start..start + len],
            init: &init,
        };
        let (nll, n_terms, d_phi, d_omega, _) = window.gradient(phi, omega)?;
        Ok((nll, n_terms, d_phi, d_omega))
    }

    /// Mean per-observation NLL over a contiguous range (validation).
    fn range_nll(&self, phi: &NetworkParams, omega: &Omega, range: std::ops::Range<usize>) -> Result<f64> {
        let obs = &self.obs[range.clone()];
        if obs.len() < self.burn_in + 2 {
            return Err(MideError::Data("validation range too short".into()));
        }
        let init = initial_belief_with_var(obs, &self.diag_var);
        let window = JointWindow {
            stream: self.stream,
            extractor_cfg: &self.extractor_cfg,
            channel_stats: &self.channel_stats,
            sites: &self.sites,
            n_heights: self.heights.p(),
            normalize: self.normalize,
            burn_in: self.burn_in,
            obs,
            times: &self.times[range],
            init: &init,
        };
        let (nll, n) = window.nll(phi, omega)?;
        if n == 0 {
            return Err(MideError::Data("validation range has no observations".into()));
        }
        Ok(nll / n as f64)
    }
}

fn build_context<'a>(
    panel: &ObservationPanel,
    stream: &'a WeatherMapStream,
    sites: &SiteSet,
    heights: &HeightLevels,
    spec: &ModelSpec,
    pre: &Preprocessed,
    burn_in: usize,
) -> Result<FitContext<'a>> {
    if panel.n_sites() != sites.n() || panel.n_heights() != heights.p() {
        return Err(MideError::Shape(format!(
            "panel grid {}x{} does not match sites x heights {}x{}",
            panel.n_sites(),
            panel.n_heights(),
            sites.n(),
            heights.p()
        )));
    }
    // Every panel step must be covered by a map (step-held).
    for &t in panel.times() {
        if stream.map_index_at(t).is_none() {
            return Err(MideError::Data(format!(
                "weather stream starts after panel time {t}"
            )));
        }
    }
    let idx = LatentIndexer::new(sites.n(), heights.p())?;
    let mut obs = Vec::with_capacity(panel.len_t());
    for t in 0..panel.len_t() {
        let map = panel.observation_map(t, &idx);
        let mut vals = Vec::with_capacity(map.n_obs());
        for &k in map.selected() {
            let (g, j) = idx.invert(k);
            vals.push(pre.resid[t][g * sites.n() + j].expect("observed entry has residual"));
        }
        obs.push((DVector::from_vec(vals), map));
    }
    let theta_max = spec
        .theta_max
        .unwrap_or_else(|| 1.5 * sites.max_pairwise_distance());
    let extractor_cfg = ExtractorConfig {
        in_channels: stream.meta.channels.len(),
        in_height: stream.meta.height,
        in_width: stream.meta.width,
        conv_channels: spec.conv_channels,
        kernel_size: 3,
        stride: 2,
        feat_dim: spec.feat_dim,
        context_len: spec.context_len,
        n_heights: heights.p(),
        theta_max,
    };
    extractor_cfg.validate()?;
    // Channel statistics over the maps covering the panel.
    let first_map = stream.map_index_at(panel.times()[0]).unwrap();
    let last_map = stream
        .map_index_at(*panel.times().last().unwrap())
        .unwrap();
    let channel_stats = stream.channel_stats(first_map..last_map + 1);
    let diag_var = residual_variances(&obs, idx.dim());
    Ok(FitContext {
        stream,
        sites: sites.clone(),
        heights: heights.clone(),
        extractor_cfg,
        channel_stats,
        obs,
        times: panel.times().to_vec(),
        diag_var,
        normalize: spec.normalize_propagator,
        burn_in,
    })
}

fn clip_l2(grad: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
}

/// Jointly fits the network parameters and the statistical set by maximum
/// likelihood on the panel's transformed residuals; the last `val_fraction`
/// of the window is held out and the best-by-validation parameters are
/// returned.
pub fn offline_fit(
    panel: &ObservationPanel,
    stream: &WeatherMapStream,
    sites: &SiteSet,
    heights: &HeightLevels,
    spec: &ModelSpec,
    cfg: &TrainingConfig,
) -> Result<FittedModel> {
    cfg.validate()?;
    let pre = preprocess_panel(panel, spec.boxcox_offset, spec.boxcox_lambda)?;
    let ctx = build_context(panel, stream, sites, heights, spec, &pre, cfg.burn_in)?;
    let t_total = panel.len_t();
    let t_train = ((t_total as f64) * (1.0 - cfg.val_fraction)).floor() as usize;
    let sub_len = cfg.subseq_len.min(t_train);
    if t_train < cfg.burn_in + 8 || t_total - t_train < cfg.burn_in + 2 {
        return Err(MideError::Data(format!(
            "panel too short to fit: {t_total} steps with {} train",
            t_train
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut phi = NetworkParams::init(&ctx.extractor_cfg, cfg.seed);
    let mut omega_raw = OmegaRaw::from_omega(&spec.omega_init);
    let mut mom_phi = vec![0.0; phi.values.len()];
    let mut mom_omega = [0.0; 6];
    let mut lr_phi = cfg.lr_phi;
    let mut lr_omega = cfg.lr_omega;

    let mut log = Vec::new();
    let mut best: Option<(f64, NetworkParams, OmegaRaw)> = None;
    let mut epochs_since_best = 0usize;
    let mut epochs_since_decay = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut epoch_nll = 0.0;
        let mut epoch_terms = 0usize;
        for _ in 0..cfg.batches_per_epoch {
            let starts: Vec<usize> = (0..cfg.batch_size)
                .map(|_| rng.gen_range(0..=t_train - sub_len))
                .collect();
            let omega = omega_raw.to_omega();
            let results: Vec<(f64, usize, Vec<f64>, grad::OmegaGrad)> = starts
                .par_iter()
                .map(|&s| ctx.subsequence_gradient(&phi, &omega, s, sub_len))
                .collect::<Result<_>>()?;
            let mut d_phi = vec![0.0; phi.values.len()];
            let mut d_omega_c = grad::OmegaGrad::default();
            let mut terms = 0usize;
            for (nll, n, dp, dom) in &results {
                if !nll.is_finite() {
                    return Err(MideError::Numerical(format!(
                        "non-finite training loss at epoch {epoch} (omega {:?})",
                        omega
                    )));
                }
                epoch_nll += nll;
                terms += n;
                for (a, b) in d_phi.iter_mut().zip(dp) {
                    *a += b;
                }
                let da = d_omega_c.as_array();
                let db = dom.as_array();
                d_omega_c = grad::OmegaGrad {
                    ell_same: da[0] + db[0],
                    ell_cross: da[1] + db[1],
                    sigma_eps: da[2] + db[2],
                    ell_eps: da[3] + db[3],
                    sigma_eta: da[4] + db[4],
                    ell_eta: da[5] + db[5],
                };
            }
            epoch_terms += terms;
            let scale = 1.0 / terms.max(1) as f64;
            let mut d_omega_raw = omega_raw.chain(&d_omega_c);
            for g in d_omega_raw.iter_mut() {
                *g *= scale;
            }
            clip_l2(&mut d_omega_raw, cfg.grad_clip);
            for i in 0..6 {
                mom_omega[i] = cfg.momentum * mom_omega[i] - lr_omega * d_omega_raw[i];
                omega_raw.0[i] += mom_omega[i];
            }
            if epoch >= cfg.omega_warmup_epochs {
                for g in d_phi.iter_mut() {
                    *g *= scale;
                }
                clip_l2(&mut d_phi, cfg.grad_clip);
                for i in 0..phi.values.len() {
                    mom_phi[i] = cfg.momentum * mom_phi[i] - lr_phi * d_phi[i];
                    phi.values[i] += mom_phi[i];
                }
            }
        }
        let train_nll = epoch_nll / epoch_terms.max(1) as f64;
        let val_nll = ctx.range_nll(&phi, &omega_raw.to_omega(), t_train..t_total)?;
        log.push(TrainLogRow {
            epoch,
            train_nll,
            val_nll,
            lr_phi,
            lr_omega,
        });
        let improved = best.as_ref().map_or(true, |(b, _, _)| val_nll < b - 1e-9);
        if improved {
            best = Some((val_nll, phi.clone(), omega_raw));
            epochs_since_best = 0;
            epochs_since_decay = 0;
        } else {
            epochs_since_best += 1;
            epochs_since_decay += 1;
            if epochs_since_decay >= cfg.lr_decay_patience {
                lr_phi *= 0.5;
                lr_omega *= 0.5;
                epochs_since_decay = 0;
            }
            if epochs_since_best >= cfg.patience {
                break;
            }
        }
    }

    let (_, best_phi, best_omega) = best.expect("at least one epoch ran");
    Ok(FittedModel {
        sites: sites.clone(),
        heights: heights.clone(),
        extractor_cfg: ctx.extractor_cfg.clone(),
        phi: best_phi,
        omega: best_omega.to_omega(),
        boxcox: pre.boxcox,
        diurnal: pre.diurnal.clone(),
        diurnal_origin_unix: panel.times()[0],
        channel_stats: ctx.channel_stats.clone(),
        normalize_propagator: spec.normalize_propagator,
        alpha: spec.alpha,
        step_seconds: panel.step_seconds(),
        log,
    })
}

/// Online update: the network stays frozen bitwise; the Box-Cox power and
/// diurnal coefficients are re-fit on the window, and the statistical set
/// is re-optimized by at most `online_iters` gradient steps, warm-started
/// from the current values. A zero-length window returns the model
/// unchanged.
pub fn online_update(
    model: &FittedModel,
    window_panel: &ObservationPanel,
    stream: &WeatherMapStream,
    cfg: &TrainingConfig,
) -> Result<FittedModel> {
    if window_panel.len_t() < cfg.burn_in + 8 {
        return Ok(model.clone());
    }
    let pre = preprocess_panel(window_panel, model.boxcox.offset, None)?;
    let idx = model.indexer();
    let n = model.sites.n();
    let mut obs = Vec::with_capacity(window_panel.len_t());
    for t in 0..window_panel.len_t() {
        let map = window_panel.observation_map(t, &idx);
        let vals: Vec<f64> = map
            .selected()
            .iter()
            .map(|&k| {
                let (g, j) = idx.invert(k);
                pre.resid[t][g * n + j].expect("observed entry has residual")
            })
            .collect();
        obs.push((DVector::from_vec(vals), map));
    }
    // Frozen-network advection per distinct map.
    let mut cache = HashMap::new();
    let mut theta = Vec::with_capacity(obs.len() - 1);
    for t in 1..obs.len() {
        theta.push(model.theta_at(stream, window_panel.times()[t], &mut cache)?);
    }
    let diag_var = residual_variances(&obs, idx.dim());
    let init = initial_belief_with_var(&obs, &diag_var);
    let wmodel = WindowModel::per_step(
        &model.sites,
        model.heights.p(),
        model.normalize_propagator,
        theta.len(),
        cfg.burn_in,
    );

    let mut omega_raw = OmegaRaw::from_omega(&model.omega);
    let mut mom = [0.0; 6];
    for it in 0..cfg.online_iters {
        let omega = omega_raw.to_omega();
        let grads = kf_gradients(&wmodel, &obs, &theta, &omega, &init)?;
        if !grads.nll.is_finite() {
            return Err(MideError::Numerical(format!(
                "non-finite online loss at iteration {it}"
            )));
        }
        let scale = 1.0 / grads.n_terms.max(1) as f64;
        let mut d_raw = omega_raw.chain(&grads.d_omega);
        for g in d_raw.iter_mut() {
            *g *= scale;
        }
        clip_l2(&mut d_raw, cfg.grad_clip);
        for i in 0..6 {
            mom[i] = cfg.momentum * mom[i] - cfg.lr_omega * d_raw[i];
            omega_raw.0[i] += mom[i];
        }
    }

    Ok(FittedModel {
        omega: omega_raw.to_omega(),
        boxcox: pre.boxcox,
        diurnal: pre.diurnal,
        diurnal_origin_unix: window_panel.times()[0],
        phi: model.phi.clone(),
        ..model.clone()
    })
}

/// Composite gradient verification across random joint instances.
#[derive(Debug, Clone)]
pub struct CompositeGradReport {
    pub max_rel_err: f64,
    /// Max relative error per parameter group: omega, theta, phi.
    pub per_group: Vec<(String, f64)>,
    pub n_checked: usize,
    pub instances: usize,
    pub pass: bool,
}

impl CompositeGradReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, err) in &self.per_group {
            out.push_str(&format!("{name:<8} max rel err {err:.3e}\n"));
        }
        out.push_str(&format!(
            "overall  max rel err {:.3e} over {} coords, {} instances => {}\n",
            self.max_rel_err,
            self.n_checked,
            self.instances,
            if self.pass { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Verifies the composite gradients of the joint NLL with respect to the
/// statistical set, the per-transition advection vectors, and the network
/// parameters (through the kernel and the extractor) against central finite
/// differences, on `instances` random small instances. Passes at 1e-3.
pub fn composite_gradient_check(
    seed: u64,
    instances: usize,
    phi_coords_per_instance: usize,
) -> Result<CompositeGradReport> {
    use crate::domain::{observation_map, Site};
    use crate::extractor::stream::{StreamMeta, WeatherMap};

    let mut max_omega: f64 = 0.0;
    let mut max_theta: f64 = 0.0;
    let mut max_phi: f64 = 0.0;
    let mut n_checked = 0usize;

    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1_000_003 * inst as u64));
        let sites = SiteSet::new(vec![
            Site {
                id: "a".into(),
                coords: [0.0, 0.0],
            },
            Site {
                id: "b".into(),
                coords: [rng.gen_range(8.0..20.0), rng.gen_range(-8.0..8.0)],
            },
        ])?;
        let p_heights = 2usize;
        let dim = sites.n() * p_heights;
        let t_steps = 8usize;
        let step_seconds = 600i64;
        let t0 = 1_600_000_000i64;

        // Random raster stream: one map per two observation steps.
        let meta = StreamMeta {
            channels: vec!["c0".into(), "c1".into()],
            width: 8,
            height: 8,
            bbox: [-20.0, -20.0, 20.0, 20.0],
            step_seconds: 2 * step_seconds,
        };
        let maps: Vec<WeatherMap> = (0..t_steps / 2)
            .map(|k| WeatherMap {
                timestamp: t0 + k as i64 * 2 * step_seconds,
                data: (0..2 * 64).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            })
            .collect();
        let stream = WeatherMapStream::new(meta, maps)?;
        let channel_stats = stream.channel_stats(0..stream.len());

        let extractor_cfg = ExtractorConfig {
            in_channels: 2,
            in_height: 8,
            in_width: 8,
            conv_channels: [3, 4],
            kernel_size: 3,
            stride: 2,
            feat_dim: 8,
            context_len: 3,
            n_heights: p_heights,
            theta_max: 6.0,
        };
        let phi = NetworkParams::init(&extractor_cfg, seed.wrapping_add(77 * inst as u64));

        let idx = LatentIndexer::new(sites.n(), p_heights)?;
        let obs: Vec<(DVector<f64>, ObservationMap)> = (0..t_steps)
            .map(|_| {
                let map = observation_map(&vec![true; dim], &idx);
                let z = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
                (z, map)
            })
            .collect();
        let times: Vec<i64> = (0..t_steps).map(|t| t0 + t as i64 * step_seconds).collect();
        let omega = Omega {
            ell_same: rng.gen_range(10.0..25.0),
            ell_cross: rng.gen_range(5.0..15.0),
            sigma_eps: rng.gen_range(0.2..0.7),
            ell_eps: rng.gen_range(5.0..20.0),
            sigma_eta: rng.gen_range(0.2..0.8),
            ell_eta: rng.gen_range(5.0..20.0),
        };
        let init = GaussianBelief::new(
            DVector::from_fn(dim, |_, _| rng.gen_range(-0.5..0.5)),
            DMatrix::identity(dim, dim) * rng.gen_range(0.5..1.2),
        )?;
        let window = JointWindow {
            stream: &stream,
            extractor_cfg: &extractor_cfg,
            channel_stats: &channel_stats,
            sites: &sites,
            n_heights: p_heights,
            normalize: inst % 2 == 0,
            burn_in: if inst % 2 == 0 { 1 } else { 0 },
            obs: &obs,
            times: &times,
            init: &init,
        };

        let (_, _, d_phi, d_omega, d_theta) = window.gradient(&phi, &omega)?;
        let gmax = d_omega
            .as_array()
            .iter()
            .map(|g| g.abs())
            .chain(d_phi.iter().map(|g| g.abs()))
            .fold(0.0, f64::max);
        let floor = (1e-7 * gmax).max(1e-9);
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(floor);

        // Omega coordinates (constrained scale).
        let omega_fields: [fn(&mut Omega) -> &mut f64; 6] = [
            |o| &mut o.ell_same,
            |o| &mut o.ell_cross,
            |o| &mut o.sigma_eps,
            |o| &mut o.ell_eps,
            |o| &mut o.sigma_eta,
            |o| &mut o.ell_eta,
        ];
        for (k, access) in omega_fields.iter().enumerate() {
            let h = 1e-5
                * {
                    let mut t = omega;
                    access(&mut t).abs().max(1.0)
                };
            let mut up = omega;
            *access(&mut up) += h;
            let mut down = omega;
            *access(&mut down) -= h;
            let fd = (window.nll(&phi, &up)?.0 - window.nll(&phi, &down)?.0) / (2.0 * h);
            max_omega = max_omega.max(rel(d_omega.as_array()[k], fd));
            n_checked += 1;
        }

        // Theta coordinates: finite differences on the filter NLL with the
        // extractor's predictions held fixed.
        let (theta, _, _) = window.predict_thetas(&phi)?;
        let wmodel = window.window_model(theta.len());
        for k in (0..theta.len()).step_by(3) {
            for p in 0..p_heights {
                for c in 0..2 {
                    let h = 1e-5;
                    let mut up = theta.clone();
                    up[k][p][c] += h;
                    let mut down = theta.clone();
                    down[k][p][c] -= h;
                    let f_up = window_nll(&wmodel, &obs, &up, &omega, &init)?.0;
                    let f_down = window_nll(&wmodel, &obs, &down, &omega, &init)?.0;
                    let fd = (f_up - f_down) / (2.0 * h);
                    max_theta = max_theta.max(rel(d_theta[k][p][c], fd));
                    n_checked += 1;
                }
            }
        }

        // Phi coordinates, sampled across the layout.
        let mut coords: Vec<usize> = Vec::new();
        for (_, range) in phi.layout.named() {
            coords.push(rng.gen_range(range));
        }
        while coords.len() < phi_coords_per_instance {
            coords.push(rng.gen_range(0..phi.values.len()));
        }
        coords.sort_unstable();
        coords.dedup();
        for &ci in &coords {
            let h = 1e-4 * phi.values[ci].abs().max(1.0);
            let mut up = phi.clone();
            up.values[ci] += h;
            let mut down = phi.clone();
            down.values[ci] -= h;
            let fd = (window.nll(&up, &omega)?.0 - window.nll(&down, &omega)?.0) / (2.0 * h);
            max_phi = max_phi.max(rel(d_phi[ci], fd));
            n_checked += 1;
        }
    }

    let max_rel_err = max_omega.max(max_theta).max(max_phi);
    Ok(CompositeGradReport {
        max_rel_err,
        per_group: vec![
            ("omega".into(), max_omega),
            ("theta".into(), max_theta),
            ("phi".into(), max_phi),
        ],
        n_checked,
        instances,
        pass: max_rel_err <= 1e-3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_round_trip_and_gradient() {
        for &y in &[1e-3, 0.1, 1.0, 17.0, 45.0] {
            let x = inv_softplus(y);
            assert!((softplus(x) - y).abs() < 1e-10 * y.max(1.0), "y={y}");
        }
        // d softplus / dx at x=0 is 0.5.
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        let omega = Omega {
            ell_same: 18.0,
            ell_cross: 11.0,
            sigma_eps: 0.4,
            ell_eps: 9.0,
            sigma_eta: 0.7,
            ell_eta: 14.0,
        };
        let raw = OmegaRaw::from_omega(&omega);
        let back = raw.to_omega();
        for (a, b) in omega.as_array().iter().zip(back.as_array()) {
            assert!((a - b).abs() < 1e-9 * a.max(1.0));
        }
    }

    #[test]
    fn initial_belief_lifts_first_observation() {
        let idx = LatentIndexer::new(2, 1).unwrap();
        let map = crate::domain::observation_map(&[true, false], &idx);
        let z = DVector::from_vec(vec![3.5]);
        let belief = initial_belief(&[(z, map)], 2);
        assert_eq!(belief.mean[0], 3.5);
        assert_eq!(belief.mean[1], 0.0);
        assert_eq!(belief.cov[(0, 0)], 1.0);
        assert_eq!(belief.cov[(1, 1)], 4.0); // widened where unobserved
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let report = composite_gradient_check(12345, 2, 24).unwrap();
        assert!(report.pass, "{}", report.render());
        assert!(report.n_checked > 60);
    }
}
