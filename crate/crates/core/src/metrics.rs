//! Reconstruction-quality measures.
//!
//! Prediction errors compare short-horizon forecasts to data. The state
//! space divergence compares occupation measures of observed and generated
//! orbits (histogram KL for low dimensions, Monte Carlo KL between Gaussian
//! mixtures otherwise). The power-spectrum error is the mean Hellinger
//! distance between smoothed, normalized amplitude spectra.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dynamics::ModelParams;
use crate::error::{dim_err, Error, Result};
use crate::linalg::{column_moments, norm2, Matrix};
use crate::observation::ConvDecoder;
use crate::training::predict_series;

/// Largest dimension handled by the histogram estimator.
pub const MAX_BINNING_DIM: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StspEstimator {
    /// Histogram for `N <= 6`, mixture otherwise.
    Auto,
    Binning,
    Gmm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub bins_per_dim: usize,
    pub gmm_sigma: f64,
    pub mc_samples: usize,
    pub pse_smooth_sigma: f64,
    pub lyap_steps: usize,
    pub lyap_transient: usize,
    pub n_gen_trajectories: usize,
    pub perturb_sigma: f64,
    pub pe_steps: Vec<usize>,
    pub estimator: StspEstimator,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            bins_per_dim: 30,
            gmm_sigma: 1.0,
            mc_samples: 1000,
            pse_smooth_sigma: 1.0,
            lyap_steps: 10_000,
            lyap_transient: 500,
            n_gen_trajectories: 100,
            perturb_sigma: 0.01,
            pe_steps: vec![1, 10, 20],
            estimator: StspEstimator::Auto,
            seed: 0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins_per_dim == 0 || !(self.gmm_sigma > 0.0) || self.mc_samples < 100 {
            return Err(Error::Config(
                "bins_per_dim > 0, gmm_sigma > 0 and mc_samples >= 100 required".into(),
            ));
        }
        if !(self.pse_smooth_sigma >= 0.0) || !(self.perturb_sigma >= 0.0) || self.n_gen_trajectories == 0 {
            return Err(Error::Config(
                "pse_smooth_sigma, perturb_sigma >= 0 and n_gen_trajectories >= 1 required".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub d_stsp: f64,
    pub d_pse: f64,
    pub pe: BTreeMap<usize, f64>,
    /// Per unit model time.
    pub lambda_max: f64,
    pub lambda_max_per_step: f64,
    pub baseline_noise_dstsp: f64,
    pub baseline_fixedpoint_dstsp: f64,
    pub n_diverged: usize,
    pub n_trajectories: usize,
}

impl MetricReport {
    pub fn header() -> String {
        "d_stsp\td_pse\tpe\tlambda_max\tlambda_max_per_step\tbaseline_noise_dstsp\tbaseline_fixedpoint_dstsp\tn_diverged\tn_trajectories"
            .to_string()
    }

    /// One tab-separated record; prediction errors as `n:value` pairs.
    pub fn to_record(&self) -> String {
        let pe = self
            .pe
            .iter()
            .map(|(n, v)| format!("{n}:{v}"))
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.d_stsp,
            self.d_pse,
            pe,
            self.lambda_max,
            self.lambda_max_per_step,
            self.baseline_noise_dstsp,
            self.baseline_fixedpoint_dstsp,
            self.n_diverged,
            self.n_trajectories
        )
    }
}

// ---------------------------------------------------------------------------
// Prediction error

/// Mean squared error per entry over rows where both series are present.
pub fn prediction_error(truth: &Matrix, predicted: &Matrix) -> Result<f64> {
    if truth.shape() != predicted.shape() {
        return dim_err(format!(
            "truth is {:?}, prediction is {:?}",
            truth.shape(),
            predicted.shape()
        ));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 0..truth.rows() {
        if truth.row_has_nan(t) || predicted.row_has_nan(t) {
            continue;
        }
        count += 1;
        sum += truth
            .row(t)
            .iter()
            .zip(predicted.row(t))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    if count == 0 {
        return Err(Error::TooShort("no admissible rows for the prediction error".into()));
    }
    Ok(sum / (truth.cols() * count) as f64)
}

/// `PE(n)` of a model on a test series given its forcing.
pub fn model_prediction_error(
    params: &ModelParams,
    dec: &ConvDecoder,
    forcing: &Matrix,
    nuisance: Option<&Matrix>,
    truth: &Matrix,
    n: usize,
) -> Result<f64> {
    let pred = predict_series(params, dec, forcing, nuisance, n)?;
    prediction_error(truth, &pred)
}

// ---------------------------------------------------------------------------
// State space divergence

fn finite_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows()).filter(|&t| m.row(t).iter().all(|v| v.is_finite())).collect()
}

/// Histogram KL divergence `KL(p_a || q_b)` with `k` bins per dimension.
///
/// Bin edges span the joint range of both series, widened by 1% on each
/// side. Every bin receives an additive count `eps = 1/(T k^N)` before
/// renormalization; bins empty in both series are summed in closed form.
pub fn dstsp_binning(a: &Matrix, b: &Matrix, k: usize) -> Result<f64> {
    let n = a.cols();
    if b.cols() != n {
        return dim_err(format!("series have {n} and {} columns", b.cols()));
    }
    if n > MAX_BINNING_DIM {
        return Err(Error::InvalidArgument(format!(
            "histogram divergence supports N <= {MAX_BINNING_DIM}, got {n}; use the mixture estimator"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let ra = finite_rows(a);
    let rb = finite_rows(b);
    if ra.is_empty() || rb.is_empty() {
        return Err(Error::TooShort("no finite rows".into()));
    }
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for (m, rows) in [(a, &ra), (b, &rb)] {
        for &t in rows.iter() {
            for (j, &v) in m.row(t).iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
    }
    for j in 0..n {
        let span = if hi[j] > lo[j] { hi[j] - lo[j] } else { 1.0 };
        lo[j] -= 0.01 * span;
        hi[j] += 0.01 * span;
    }
    let bin_of = |row: &[f64]| -> u64 {
        let mut idx = 0u64;
        for j in 0..n {
            let f = (row[j] - lo[j]) / (hi[j] - lo[j]);
            let bj = ((f * k as f64).floor() as i64).clamp(0, k as i64 - 1) as u64;
            idx = idx * k as u64 + bj;
        }
        idx
    };
    let count = |m: &Matrix, rows: &[usize]| -> HashMap<u64, usize> {
        let mut h = HashMap::new();
        for &t in rows {
            *h.entry(bin_of(m.row(t))).or_insert(0) += 1;
        }
        h
    };
    let ha = count(a, &ra);
    let hb = count(b, &rb);
    let total_bins = (k as f64).powi(n as i32);
    let (ta, tb) = (ra.len() as f64, rb.len() as f64);
    let (eps_a, eps_b) = (1.0 / (ta * total_bins), 1.0 / (tb * total_bins));
    let (za, zb) = (1.0 + total_bins * eps_a, 1.0 + total_bins * eps_b);
    let p_of = |c: usize| (c as f64 / ta + eps_a) / za;
    let q_of = |c: usize| (c as f64 / tb + eps_b) / zb;

    let mut keys: Vec<u64> = ha.keys().chain(hb.keys()).cloned().collect();
    keys.sort_unstable();
    keys.dedup();
    let mut kl = 0.0;
    for key in &keys {
        let p = p_of(*ha.get(key).unwrap_or(&0));
        let q = q_of(*hb.get(key).unwrap_or(&0));
        kl += p * (p / q).ln();
    }
    let empty = total_bins - keys.len() as f64;
    if empty > 0.0 {
        let (p0, q0) = (p_of(0), q_of(0));
        kl += empty * p0 * (p0 / q0).ln();
    }
    Ok(kl)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log density of an isotropic Gaussian mixture with one component per row
/// of `centers` (constant factors that cancel in the KL are kept anyway).
fn mixture_log_density(y: &[f64], centers: &Matrix, rows: &[usize], sigma: f64, buf: &mut Vec<f64>) -> f64 {
    let n = y.len() as f64;
    buf.clear();
    let inv = 1.0 / (2.0 * sigma * sigma);
    for &t in rows {
        let d2: f64 = y.iter().zip(centers.row(t)).map(|(a, b)| (a - b) * (a - b)).sum();
        buf.push(-d2 * inv);
    }
    log_sum_exp(buf) - (rows.len() as f64).ln() - 0.5 * n * (2.0 * std::f64::consts::PI * sigma * sigma).ln()
}

/// Monte Carlo KL divergence between Gaussian mixtures centred on the rows
/// of `a` (reference) and `b`. Both series are scaled by the per-dimension
/// standard deviation of `a` so that `sigma` is in standardized units.
pub fn dstsp_gmm(a: &Matrix, b: &Matrix, sigma: f64, samples: usize, seed: u64) -> Result<f64> {
    if b.cols() != a.cols() {
        return dim_err(format!("series have {} and {} columns", a.cols(), b.cols()));
    }
    if !(sigma > 0.0) || samples == 0 {
        return Err(Error::InvalidArgument("sigma > 0 and samples >= 1 required".into()));
    }
    let ra = finite_rows(a);
    let rb = finite_rows(b);
    if ra.len() < 2 || rb.len() < 2 {
        return Err(Error::TooShort("mixture divergence needs at least 2 rows per series".into()));
    }
    let (mean, std) = column_moments(a);
    let scale = |m: &Matrix| {
        Matrix::from_fn(m.rows(), m.cols(), |i, j| {
            let s = if std[j] > 0.0 { std[j] } else { 1.0 };
            (m[(i, j)] - mean[j]) / s
        })
    };
    let (sa, sb) = (scale(a), scale(b));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<Vec<f64>> = (0..samples)
        .map(|_| {
            let t = ra[rng.random_range(0..ra.len())];
            sa.row(t)
                .iter()
                .map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let terms: Vec<f64> = draws
        .par_iter()
        .map_init(Vec::new, |buf, y| {
            mixture_log_density(y, &sa, &ra, sigma, buf) - mixture_log_density(y, &sb, &rb, sigma, buf)
        })
        .collect();
    Ok(terms.iter().sum::<f64>() / samples as f64)
}

/// Dispatches to the estimator chosen by the config.
pub fn dstsp(a: &Matrix, b: &Matrix, cfg: &MetricConfig, seed: u64) -> Result<f64> {
    let use_bins = match cfg.estimator {
        StspEstimator::Binning => true,
        StspEstimator::Gmm => false,
        StspEstimator::Auto => a.cols() <= MAX_BINNING_DIM,
    };
    if use_bins {
        dstsp_binning(a, b, cfg.bins_per_dim)
    } else {
        dstsp_gmm(a, b, cfg.gmm_sigma, cfg.mc_samples, seed)
    }
}

// ---------------------------------------------------------------------------
// Power spectrum error

/// Gaussian smoothing with kernel truncated at four widths; the kernel is
/// renormalized where it is cut by the spectrum boundary.
pub fn gaussian_smooth(x: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return x.to_vec();
    }
    let half = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-half..=half)
        .map(|j| (-(j * j) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let n = x.len() as isize;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (kj, w) in kernel.iter().enumerate() {
                let j = i + kj as isize - half;
                if (0..n).contains(&j) {
                    acc += w * x[j as usize];
                    wsum += w;
                }
            }
            acc / wsum
        })
        .collect()
}

/// Smoothed, normalized one-sided amplitude spectrum `|F x|/T` of the
/// mean-removed series.
pub fn normalized_spectrum(x: &[f64], smooth_sigma: f64) -> Result<Vec<f64>> {
    let t = x.len();
    let mean = x.iter().sum::<f64>() / t as f64;
    let mut buf: Vec<Complex64> = x.iter().map(|v| Complex64::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(t).process(&mut buf);
    let amp: Vec<f64> = buf[..t / 2 + 1].iter().map(|c| c.norm() / t as f64).collect();
    let smooth = gaussian_smooth(&amp, smooth_sigma);
    let total: f64 = smooth.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::InvalidArgument("spectrum is identically zero".into()));
    }
    Ok(smooth.iter().map(|v| v / total).collect())
}

/// Hellinger distance between probability vectors, written as
/// `sqrt(sum (sqrt p - sqrt q)^2 / 2)` so that identical inputs give 0.
pub fn hellinger(p: &[f64], q: &[f64]) -> f64 {
    let s: f64 = p.iter().zip(q).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
    (0.5 * s).sqrt().min(1.0)
}

pub fn dpse(a: &Matrix, b: &Matrix, smooth_sigma: f64) -> Result<f64> {
    if a.cols() != b.cols() {
        return dim_err(format!("series have {} and {} columns", a.cols(), b.cols()));
    }
    if a.rows() < 4 || b.rows() < 4 {
        return Err(Error::TooShort("spectra need at least 4 samples".into()));
    }
    if a.rows() != b.rows() {
        return dim_err(format!("series have {} and {} rows", a.rows(), b.rows()));
    }
    if a.has_nan() || b.has_nan() {
        return Err(Error::NanInput("power spectrum input".into()));
    }
    let mut total = 0.0;
    for j in 0..a.cols() {
        let p = normalized_spectrum(&a.column(j), smooth_sigma)?;
        let q = normalized_spectrum(&b.column(j), smooth_sigma)?;
        total += hellinger(&p, &q);
    }
    Ok(total / a.cols() as f64)
}

// ---------------------------------------------------------------------------
// Lyapunov exponent

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LyapunovEstimate {
    pub per_step: f64,
    pub per_time: f64,
}

/// Largest Lyapunov exponent from products of Jacobians along a rollout.
/// The tangent direction starts random (seeded) and is renormalized every
/// step.
pub fn lyapunov_max(
    params: &ModelParams,
    z0: &[f64],
    steps: usize,
    transient: usize,
    dt_model: f64,
    seed: u64,
) -> Result<LyapunovEstimate> {
    if steps == 0 {
        return Err(Error::InvalidArgument("Lyapunov estimate needs steps >= 1".into()));
    }
    if !(dt_model > 0.0) {
        return Err(Error::InvalidArgument("dt_model must be positive".into()));
    }
    let m = params.latent_dim();
    let mut z = z0.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut jac = Matrix::zeros(m, m);
    let mut u = vec![0.0; params.hidden_dim()];
    let mut gate = vec![0.0; params.hidden_dim()];
    let mut w = vec![0.0; m];
    let mut sum = 0.0;
    // The tangent vector is carried through the transient as well so that
    // it is aligned with the leading direction before accumulation starts.
    for step in 0..transient + steps {
        params.jacobian_into(&z, &mut jac, &mut u, &mut gate);
        jac.mul_vec_into(&v, &mut w);
        let nw = norm2(&w);
        if nw == 0.0 {
            return Ok(LyapunovEstimate {
                per_step: f64::NEG_INFINITY,
                per_time: f64::NEG_INFINITY,
            });
        }
        if step >= transient {
            sum += nw.ln();
        }
        for (a, b) in v.iter_mut().zip(&w) {
            *a = b / nw;
        }
        z = params.step(&z)?;
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step: step + 1 });
        }
    }
    let per_step = sum / steps as f64;
    Ok(LyapunovEstimate {
        per_step,
        per_time: per_step / dt_model,
    })
}

// ---------------------------------------------------------------------------
// Baselines and ensembles

/// Divergences of a constant-at-the-mean series and of moment-matched
/// Gaussian noise from the truth.
pub fn reference_baselines(truth: &Matrix, cfg: &MetricConfig, seed: u64) -> Result<(f64, f64)> {
    let rows = finite_rows(truth);
    if rows.len() < 2 {
        return Err(Error::TooShort("baselines need at least 2 rows".into()));
    }
    let (mean, std) = column_moments(truth);
    let n = truth.cols();
    let t = truth.rows();
    let fixed = Matrix::from_fn(t, n, |_, j| mean[j]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = Matrix::zeros(t, n);
    for i in 0..t {
        for j in 0..n {
            noise[(i, j)] = mean[j] + std[j] * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let noise_d = dstsp(truth, &noise, cfg, seed ^ 0x9e37)?;
    let fixed_d = dstsp(truth, &fixed, cfg, seed ^ 0x7f4a)?;
    Ok((noise_d, fixed_d))
}

/// Free-running generated observations of length `t_len` from `z0`: the
/// latent rollout is extended by the filter length so every output row has
/// a full latent history.
pub fn generate_observations(
    params: &ModelParams,
    dec: &ConvDecoder,
    z0: &[f64],
    t_len: usize,
    nuisance: Option<&Matrix>,
) -> Result<Matrix> {
    let tau = dec.hrf.tau();
    let traj = params.generate(z0, t_len + tau)?;
    let x = dec.decode(&traj.states, None)?;
    let mut out = x.row_block(tau, t_len);
    if let (Some(j), Some(r)) = (&dec.j, nuisance) {
        r.check_shape(t_len, j.cols(), "nuisance series")?;
        let mut buf = vec![0.0; j.rows()];
        for t in 0..t_len {
            j.mul_vec_into(r.row(t), &mut buf);
            out.row_mut(t).iter_mut().zip(&buf).for_each(|(o, v)| *o += v);
        }
    }
    Ok(out)
}

/// Test-set inputs for evaluating a model.
pub struct EvalData<'a> {
    /// Raw test observations.
    pub x: &'a Matrix,
    pub r: Option<&'a Matrix>,
    /// Forcing on the test set (NaN at deconvolution edges).
    pub forcing: &'a Matrix,
    pub dt_model: f64,
}

/// Geometry and spectrum metrics averaged over an ensemble of perturbed
/// free runs, plus prediction errors, the Lyapunov exponent and baselines.
pub fn ensemble_evaluate(
    params: &ModelParams,
    dec: &ConvDecoder,
    data: &EvalData,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    cfg.validate()?;
    let t_len = data.x.rows();
    let start = finite_rows(data.forcing)
        .first()
        .cloned()
        .ok_or_else(|| Error::TooShort("test forcing has no finite row".into()))?;
    let z_start = data.forcing.row(start).to_vec();
    let jitter = Normal::new(0.0, cfg.perturb_sigma.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inits: Vec<Vec<f64>> = (0..cfg.n_gen_trajectories)
        .map(|_| {
            z_start
                .iter()
                .map(|v| if cfg.perturb_sigma > 0.0 { v + jitter.sample(&mut rng) } else { *v })
                .collect()
        })
        .collect();
    let per_traj: Vec<Option<(f64, f64)>> = inits
        .par_iter()
        .enumerate()
        .map(|(i, z0)| {
            let gen = generate_observations(params, dec, z0, t_len, data.r).ok()?;
            if !gen.is_all_finite() {
                return None;
            }
            let ds = dstsp(data.x, &gen, cfg, cfg.seed.wrapping_add(i as u64)).ok()?;
            let dp = dpse(data.x, &gen, cfg.pse_smooth_sigma).ok()?;
            Some((ds, dp))
        })
        .collect();
    let ok: Vec<(f64, f64)> = per_traj.iter().flatten().cloned().collect();
    let diverged = per_traj.len() - ok.len();
    if 2 * diverged > per_traj.len() {
        return Err(Error::EnsembleFailure {
            diverged,
            total: per_traj.len(),
        });
    }
    let d_stsp = ok.iter().map(|p| p.0).sum::<f64>() / ok.len() as f64;
    let d_pse = ok.iter().map(|p| p.1).sum::<f64>() / ok.len() as f64;

    let mut pe = BTreeMap::new();
    for &n in &cfg.pe_steps {
        let v = model_prediction_error(params, dec, data.forcing, data.r, data.x, n).unwrap_or(f64::NAN);
        pe.insert(n, v);
    }
    let lyap = lyapunov_max(params, &z_start, cfg.lyap_steps, cfg.lyap_transient, data.dt_model, cfg.seed)
        .unwrap_or(LyapunovEstimate {
            per_step: f64::NAN,
            per_time: f64::NAN,
        });
    let (noise_d, fixed_d) = reference_baselines(data.x, cfg, cfg.seed)?;
    Ok(MetricReport {
        d_stsp,
        d_pse,
        pe,
        lambda_max: lyap.per_time,
        lambda_max_per_step: lyap.per_step,
        baseline_noise_dstsp: noise_d,
        baseline_fixedpoint_dstsp: fixed_d,
        n_diverged: diverged,
        n_trajectories: per_traj.len(),
    })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Drops values more than 1.5 IQR below the first or above the third
/// quartile. Non-finite values are dropped as well.
pub fn iqr_filter(values: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().cloned().filter(|x| x.is_finite()).collect();
    v.sort_by(|a, b| a.total_cmp(b));
    let q1 = quantile(&v, 0.25);
    let q3 = quantile(&v, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    values
        .iter()
        .cloned()
        .filter(|x| x.is_finite() && *x >= lo && *x <= hi)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{make_benchmark, make_linear_oracle, LorenzConfig};
    use crate::dynamics::Variant;
    use crate::observation::{DecoderMode, HrfFilter};

    fn gaussian(rng: &mut ChaCha8Rng, t: usize, n: usize, mean: f64) -> Matrix {
        Matrix::from_fn(t, n, |_, _| mean + rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn prediction_error_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(&mut rng, 50, 3, 0.0);
        assert_eq!(prediction_error(&x, &x).unwrap(), 0.0);
        let shifted = x.map(|v| v + 0.3);
        assert!((prediction_error(&x, &shifted).unwrap() - 0.09).abs() < 1e-12);
        let y = gaussian(&mut rng, 50, 3, 0.0);
        // naive double loop
        let mut s = 0.0;
        for t in 0..50 {
            for i in 0..3 {
                s += (x[(t, i)] - y[(t, i)]).powi(2);
            }
        }
        let want = s / 150.0;
        assert!((prediction_error(&x, &y).unwrap() - want).abs() <= 1e-12 * want);
        let all_nan = Matrix::filled(50, 3, f64::NAN);
        assert!(prediction_error(&x, &all_nan).is_err());
    }

    #[test]
    fn binning_identity_and_two_bin_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = gaussian(&mut rng, 2000, 3, 0.0);
        assert_eq!(dstsp_binning(&a, &a, 30).unwrap(), 0.0);
        let t = 10_000;
        let point = Matrix::zeros(t, 1);
        let uniform = Matrix::from_fn(t, 1, |i, _| if i % 2 == 0 { 0.0 } else { 1.0 });
        let kl = dstsp_binning(&point, &uniform, 2).unwrap();
        let ln2 = 2f64.ln();
        assert!((kl - ln2).abs() < 0.05 * ln2, "{kl}");
        // directional
        let back = dstsp_binning(&uniform, &point, 2).unwrap();
        assert!((back - kl).abs() > 0.1);
    }

    #[test]
    fn binning_empty_bin_closed_form_matches_dense_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian(&mut rng, 300, 2, 0.0);
        let b = gaussian(&mut rng, 200, 2, 0.5);
        let k = 7;
        let fast = dstsp_binning(&a, &b, k).unwrap();
        // dense oracle over all k^2 bins with the same edges
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for m in [&a, &b] {
            for t in 0..m.rows() {
                for j in 0..2 {
                    lo[j] = lo[j].min(m[(t, j)]);
                    hi[j] = hi[j].max(m[(t, j)]);
                }
            }
        }
        for j in 0..2 {
            let s = hi[j] - lo[j];
            lo[j] -= 0.01 * s;
            hi[j] += 0.01 * s;
        }
        let hist = |m: &Matrix| {
            let mut h = vec![0.0; k * k];
            for t in 0..m.rows() {
                let mut idx = 0;
                for j in 0..2 {
                    let b = (((m[(t, j)] - lo[j]) / (hi[j] - lo[j]) * k as f64).floor() as usize).min(k - 1);
                    idx = idx * k + b;
                }
                h[idx] += 1.0;
            }
            let tt = m.rows() as f64;
            let eps = 1.0 / (tt * (k * k) as f64);
            let z: f64 = h.iter().map(|c| c / tt + eps).sum();
            h.iter().map(|c| (c / tt + eps) / z).collect::<Vec<_>>()
        };
        let (p, q) = (hist(&a), hist(&b));
        let dense: f64 = p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum();
        assert!((fast - dense).abs() < 1e-12, "{fast} vs {dense}");
    }

    #[test]
    fn gmm_identity_and_separation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = gaussian(&mut rng, 500, 2, 0.0);
        for seed in 0..3 {
            assert!(dstsp_gmm(&a, &a, 1.0, 1000, seed).unwrap().abs() < 0.05);
        }
        // separated clouds in raw units: centres at -10 and +10, unit spread
        let left = gaussian(&mut rng, 500, 1, -10.0);
        let right = gaussian(&mut rng, 500, 1, 10.0);
        let both = Matrix::from_fn(1000, 1, |i, _| if i < 500 { left[(i, 0)] } else { right[(i - 500, 0)] });
        let only_left = Matrix::from_fn(1000, 1, |i, _| left[(i % 500, 0)]);
        let d = dstsp_gmm(&both, &only_left, 0.1, 1000, 1).unwrap();
        assert!(d > 5.0, "{d}");
    }

    #[test]
    fn spectrum_normalization_and_dpse_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = gaussian(&mut rng, 1024, 3, 0.0);
        assert_eq!(dpse(&a, &a, 1.0).unwrap(), 0.0);
        for j in 0..3 {
            let s = normalized_spectrum(&a.column(j), 1.0).unwrap();
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        let b = gaussian(&mut rng, 1024, 3, 0.0);
        let d = dpse(&a, &b, 1.0).unwrap();
        assert!((0.0..=1.0).contains(&d));
        // a constant series has no spectrum once the mean is removed
        assert!(dpse(&Matrix::zeros(64, 1), &Matrix::from_fn(64, 1, |i, _| i as f64), 1.0).is_err());
    }

    #[test]
    fn disjoint_sinusoids_are_far_apart() {
        let t = 4096;
        let a = Matrix::from_fn(t, 1, |i, _| (std::f64::consts::TAU * 50.0 * i as f64 / t as f64).sin());
        let b = Matrix::from_fn(t, 1, |i, _| (std::f64::consts::TAU * 700.0 * i as f64 / t as f64).sin());
        let d = dpse(&a, &b, 1.0).unwrap();
        assert!(d >= 0.95, "{d}");
    }

    #[test]
    fn lyapunov_of_diagonal_systems() {
        let (p, o) = make_linear_oracle(1, &[0.5]).unwrap();
        let est = lyapunov_max(&p, &[1.0], 2000, 0, 1.0, 0).unwrap();
        assert!((est.per_step - o.lambda_max).abs() < 1e-12);
        let spectra = [vec![0.9, 0.5, -0.3], vec![-0.95, 0.2], vec![0.7, 0.69, 0.1, 0.4]];
        for s in spectra {
            let (p, o) = make_linear_oracle(s.len(), &s).unwrap();
            let z0 = vec![1.0; s.len()];
            let est = lyapunov_max(&p, &z0, 10_000, 500, 0.01, 3).unwrap();
            assert!(((est.per_step - o.lambda_max) / o.lambda_max).abs() < 1e-3, "{s:?}: {}", est.per_step);
            assert!((est.per_time - est.per_step / 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn lyapunov_independent_of_initial_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // the clipped variant keeps orbits bounded for |A| < 1
        let mut p = ModelParams::init_random(3, 20, Variant::ClippedShallow, &mut rng).unwrap();
        p.a = vec![0.9, 0.8, 0.85];
        for w in p.w1.as_mut_slice() {
            *w *= 3.0;
        }
        let base = lyapunov_max(&p, &[0.1, 0.2, 0.3], 10_000, 500, 1.0, 0).unwrap().per_step;
        for seed in 1..10 {
            let l = lyapunov_max(&p, &[0.1, 0.2, 0.3], 10_000, 500, 1.0, seed).unwrap().per_step;
            assert!((l - base).abs() <= 0.01 * base.abs().max(1e-3), "{l} vs {base}");
        }
    }

    #[test]
    fn baselines_on_degenerate_truths() {
        let cfg = MetricConfig::default();
        let constant = Matrix::filled(1000, 2, 3.0);
        let (_, fixed) = reference_baselines(&constant, &cfg, 0).unwrap();
        assert!(fixed.abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = gaussian(&mut rng, 10_000, 1, 0.0);
        let (noise, fixed) = reference_baselines(&g, &cfg, 1).unwrap();
        assert!(noise < 0.1, "{noise}");
        assert!(fixed > 1.0);
    }

    #[test]
    fn iqr_filter_drops_outliers() {
        let v = vec![1.0, 1.1, 0.9, 1.05, 0.95, 10.0, -5.0, f64::NAN];
        let f = iqr_filter(&v);
        assert_eq!(f, vec![1.0, 1.1, 0.9, 1.05, 0.95]);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
    }

    #[test]
    fn single_unperturbed_trajectory_equals_direct_metrics() {
        let (p, _) = make_linear_oracle(2, &[0.99, 0.98]).unwrap();
        let dec = ConvDecoder::new(Matrix::identity(2), None, HrfFilter::identity(), None, DecoderMode::Regressor).unwrap();
        let mut p = p;
        p.h1 = vec![0.05, -0.02];
        let z = p.generate(&[1.0, 1.0], 600).unwrap().states;
        let x = z.row_block(100, 500);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x_noisy = Matrix::from_fn(500, 2, |i, j| x[(i, j)] + 0.01 * rng.sample::<f64, _>(StandardNormal));
        let cfg = MetricConfig {
            n_gen_trajectories: 1,
            perturb_sigma: 0.0,
            lyap_steps: 1000,
            ..Default::default()
        };
        let data = EvalData {
            x: &x_noisy,
            r: None,
            forcing: &x,
            dt_model: 1.0,
        };
        let rep = ensemble_evaluate(&p, &dec, &data, &cfg).unwrap();
        let gen = generate_observations(&p, &dec, x.row(0), 500, None).unwrap();
        assert_eq!(rep.d_stsp, dstsp_binning(&x_noisy, &gen, 30).unwrap());
        assert_eq!(rep.d_pse, dpse(&x_noisy, &gen, 1.0).unwrap());
        assert!(rep.pe[&1] < 1e-3);
    }

    #[test]
    fn divergent_ensemble_is_reported() {
        let p = ModelParams::new(
            vec![1.5],
            Matrix::zeros(1, 1),
            Matrix::zeros(1, 1),
            vec![0.0],
            vec![0.0],
            Variant::Shallow,
        )
        .unwrap();
        let dec = ConvDecoder::new(Matrix::identity(1), None, HrfFilter::identity(), None, DecoderMode::Regressor).unwrap();
        let x = Matrix::filled(5000, 1, 1.0);
        let data = EvalData {
            x: &x,
            r: None,
            forcing: &x,
            dt_model: 1.0,
        };
        let cfg = MetricConfig {
            n_gen_trajectories: 4,
            ..Default::default()
        };
        assert!(matches!(
            ensemble_evaluate(&p, &dec, &data, &cfg),
            Err(Error::EnsembleFailure { diverged: 4, total: 4 })
        ));
    }

    #[test]
    fn convolved_lorenz_baselines_are_large() {
        let cfg = LorenzConfig {
            t_len: 10_000,
            ..Default::default()
        };
        let ds = make_benchmark(&cfg, 0.5, 0.01, 5000, 1).unwrap();
        let (noise, fixed) = reference_baselines(&ds.observed, &MetricConfig::default(), 0).unwrap();
        assert!(noise > 1.0 && fixed > noise, "{noise} {fixed}");
    }
}
