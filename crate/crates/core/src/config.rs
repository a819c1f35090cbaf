//! Flat `key = value` run configuration.
//!
//! Training keys use the hyperparameter names of the reference settings
//! table (`latent_dim`, `weak_tf_alpha`, `TR`, `cut_l`, ...). Unknown keys
//! and malformed values are errors that name the offending key.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::benchmark::LorenzConfig;
use crate::deconv::{Cutoff, DeconvConfig, SpectrumMode, Wavelet};
use crate::dynamics::Variant;
use crate::error::{Error, Result};
use crate::metrics::{MetricConfig, StspEstimator};
use crate::observation::{DecoderMode, DEFAULT_HRF_DURATION};
use crate::training::TrainConfig;

/// How much of a series goes into the training split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Split {
    Rows(usize),
    Fraction(f64),
}

impl Split {
    pub fn index(&self, len: usize) -> usize {
        match *self {
            Split::Rows(n) => n.min(len),
            Split::Fraction(f) => ((f * len as f64).round() as usize).min(len),
        }
    }
}

/// Decoder family: convolutional (observations pass through the filter)
/// or standard (linear decoder applied to the raw observations).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    Conv,
    Standard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub observation_model: DecoderMode,
    pub decoder: DecoderKind,
    pub deconv: DeconvConfig,
    pub tr: f64,
    pub hrf_duration: f64,
    pub train_test_split: Split,
    pub metrics: MetricConfig,
    pub lorenz: LorenzConfig,
    pub noise_sigma: f64,
    pub data: Option<PathBuf>,
    pub nuisance: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub latent_truth: Option<PathBuf>,
    pub matrix_encoding: crate::io::MatrixEncoding,
    pub sweep_tr: Vec<f64>,
    pub sweep_hidden_dim: Vec<usize>,
    pub sweep_latent_dim: Vec<usize>,
    pub sweep_obs_dim: Vec<usize>,
    pub scaling_epochs: usize,
    pub scaling_warmup: usize,
    pub scaling_length: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            observation_model: DecoderMode::Identity,
            decoder: DecoderKind::Conv,
            deconv: DeconvConfig::default(),
            tr: 0.5,
            hrf_duration: DEFAULT_HRF_DURATION,
            train_test_split: Split::Rows(50_000),
            metrics: MetricConfig::default(),
            lorenz: LorenzConfig::default(),
            noise_sigma: 0.01,
            data: None,
            nuisance: None,
            checkpoint: None,
            latent_truth: None,
            matrix_encoding: crate::io::MatrixEncoding::Text,
            sweep_tr: vec![0.2, 0.5, 1.2, 3.0],
            sweep_hidden_dim: vec![10, 50, 100, 500],
            sweep_latent_dim: vec![3, 10, 20, 40],
            sweep_obs_dim: vec![3, 10, 20, 40],
            scaling_epochs: 5,
            scaling_warmup: 2,
            scaling_length: 10_000,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{value}'")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("key '{key}': expected a boolean, got '{value}'"))),
    }
}

fn parse_with<T>(key: &str, value: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<T> {
    f(value).map_err(|e| Error::Config(format!("key '{key}': {e}")))
}

/// Splits the document into ordered `(key, value)` pairs. `#` starts a
/// comment; blank lines are ignored; duplicate keys are errors.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", k + 1)))?;
        let (key, value) = (key.trim().to_string(), value.trim().to_string());
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", k + 1)));
        }
        if seen.insert(key.clone(), ()).is_some() {
            return Err(Error::Config(format!("key '{key}' given more than once")));
        }
        out.push((key, value));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (key, value) in parse_pairs(text)? {
            cfg.set(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            // training, names as in the settings table
            "latent_dim" => t.latent_dim = parse(key, v)?,
            "hidden_dim" => t.hidden_dim = parse(key, v)?,
            "model" => t.variant = parse_with(key, v, Variant::from_str)?,
            "weak_tf_alpha" => t.alpha = parse(key, v)?,
            "sequence_length" => t.sequence_length = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "batches_per_epoch" => t.batches_per_epoch = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "start_lr" => t.start_lr = parse(key, v)?,
            "end_lr" => t.end_lr = parse(key, v)?,
            "gradient_clipping_norm" => t.gradient_clip_norm = parse(key, v)?,
            "gaussian_noise_level" => t.noise_level = parse(key, v)?,
            "MAR_ratio" => t.mar_ratio = parse(key, v)?,
            "MAR_lambda" => t.mar_lambda = parse(key, v)?,
            "lat_model_regularization" => t.lat_reg = parse(key, v)?,
            "obs_model_regularization" => t.obs_reg = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "optimizer" => {
                if !v.eq_ignore_ascii_case("radam") {
                    return Err(Error::Config(format!("key 'optimizer': only RADAM is supported, got '{v}'")));
                }
            }
            "device" => {
                if !v.eq_ignore_ascii_case("cpu") {
                    return Err(Error::Config(format!("key 'device': only cpu is supported, got '{v}'")));
                }
            }
            "observation_model" => self.observation_model = parse_with(key, v, DecoderMode::from_str)?,
            "decoder" => {
                self.decoder = match v.to_ascii_lowercase().as_str() {
                    "conv" => DecoderKind::Conv,
                    "standard" => DecoderKind::Standard,
                    _ => return Err(Error::Config(format!("key 'decoder': expected conv or standard, got '{v}'"))),
                }
            }
            "train_test_split" => {
                self.train_test_split = match v.parse::<usize>() {
                    Ok(n) => Split::Rows(n),
                    Err(_) => Split::Fraction(parse(key, v)?),
                }
            }
            // observation filter and deconvolution
            "TR" => self.tr = parse(key, v)?,
            "hrf_duration" => self.hrf_duration = parse(key, v)?,
            "min_conv_noise" => self.deconv.sigma_min = parse(key, v)?,
            "cut_l" => self.deconv.cut_l = parse_with(key, v, Cutoff::from_str)?,
            "cut_r" => self.deconv.cut_r = parse_with(key, v, Cutoff::from_str)?,
            "wavelet" => self.deconv.wavelet = parse_with(key, v, Wavelet::from_str)?,
            "spectrum_mode" => {
                self.deconv.spectrum = match v.to_ascii_lowercase().as_str() {
                    "per_channel" | "perchannel" => SpectrumMode::PerChannel,
                    "shared" => SpectrumMode::Shared,
                    _ => return Err(Error::Config(format!("key 'spectrum_mode': expected per_channel or shared, got '{v}'"))),
                }
            }
            // benchmark generation
            "lorenz_sigma" => self.lorenz.sigma = parse(key, v)?,
            "lorenz_rho" => self.lorenz.rho = parse(key, v)?,
            "lorenz_beta" => self.lorenz.beta = parse(key, v)?,
            "dt" => self.lorenz.dt = parse(key, v)?,
            "T" => self.lorenz.t_len = parse(key, v)?,
            "transient_discard" => self.lorenz.transient_discard = parse(key, v)?,
            "noise_sigma" => self.noise_sigma = parse(key, v)?,
            // metrics
            "bins_per_dim" => self.metrics.bins_per_dim = parse(key, v)?,
            "gmm_sigma" => self.metrics.gmm_sigma = parse(key, v)?,
            "mc_samples" => self.metrics.mc_samples = parse(key, v)?,
            "pse_smooth_sigma" => self.metrics.pse_smooth_sigma = parse(key, v)?,
            "lyap_steps" => self.metrics.lyap_steps = parse(key, v)?,
            "lyap_transient" => self.metrics.lyap_transient = parse(key, v)?,
            "n_gen_trajectories" => self.metrics.n_gen_trajectories = parse(key, v)?,
            "perturb_sigma" => self.metrics.perturb_sigma = parse(key, v)?,
            "pe_steps" => self.metrics.pe_steps = parse_list(key, v)?,
            "stsp_estimator" => {
                self.metrics.estimator = match v.to_ascii_lowercase().as_str() {
                    "auto" => StspEstimator::Auto,
                    "binning" => StspEstimator::Binning,
                    "gmm" => StspEstimator::Gmm,
                    _ => return Err(Error::Config(format!("key 'stsp_estimator': expected auto, binning or gmm, got '{v}'"))),
                }
            }
            // files
            "data" => self.data = Some(PathBuf::from(v)),
            "nuisance" => self.nuisance = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "latent_truth" => self.latent_truth = Some(PathBuf::from(v)),
            "matrix_encoding" => self.matrix_encoding = parse_with(key, v, crate::io::MatrixEncoding::from_str)?,
            // scaling sweeps
            "sweep_TR" => self.sweep_tr = parse_list(key, v)?,
            "sweep_hidden_dim" => self.sweep_hidden_dim = parse_list(key, v)?,
            "sweep_latent_dim" => self.sweep_latent_dim = parse_list(key, v)?,
            "sweep_obs_dim" => self.sweep_obs_dim = parse_list(key, v)?,
            "scaling_epochs" => self.scaling_epochs = parse(key, v)?,
            "scaling_warmup" => self.scaling_warmup = parse(key, v)?,
            "scaling_length" => self.scaling_length = parse(key, v)?,
            "deterministic" => {
                // accepted for symmetry with the command-line flag; every
                // reduction is ordered regardless
                parse_bool(key, v)?;
            }
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let named = |key: &str, e: Error| Error::Config(format!("key '{key}': {e}"));
        self.train.validate()?;
        self.deconv.validate()?;
        self.metrics.validate()?;
        if !(self.tr > 0.0) {
            return Err(named("TR", Error::InvalidArgument("must be positive".into())));
        }
        if !(self.hrf_duration > 0.0) {
            return Err(named("hrf_duration", Error::InvalidArgument("must be positive".into())));
        }
        if let Split::Fraction(f) = self.train_test_split {
            if !(f > 0.0 && f < 1.0) {
                return Err(named("train_test_split", Error::InvalidArgument("fraction must lie in (0, 1)".into())));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(named("noise_sigma", Error::InvalidArgument("must be non-negative".into())));
        }
        if !(self.lorenz.dt > 0.0) || self.lorenz.t_len == 0 {
            return Err(Error::Config("keys 'dt' and 'T' must be positive".into()));
        }
        if self.observation_model == DecoderMode::Identity && self.nuisance.is_some() {
            return Err(Error::Config(
                "key 'nuisance' requires observation_model = Regressor".into(),
            ));
        }
        Ok(())
    }

    pub fn hrf(&self) -> Result<crate::observation::HrfFilter> {
        match self.decoder {
            DecoderKind::Conv => crate::observation::canonical_hrf(self.tr, self.hrf_duration),
            DecoderKind::Standard => Ok(crate::observation::HrfFilter::identity()),
        }
    }
}
