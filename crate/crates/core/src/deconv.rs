//! Wiener deconvolution of convolved observations and decoder inversion.
//!
//! Each channel is denoised by single-level wavelet shrinkage, which also
//! yields the noise estimate. The denoised signal supplies the signal power
//! spectrum, the noise spectrum is flat, and the resulting Wiener gains are
//! applied to the raw channel in the Fourier domain. Edge rows that suffer
//! from the periodic wrap-around are replaced by NaN.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::Matrix;
use crate::observation::HrfFilter;
use crate::training::ForcingSignals;

const MAD_TO_SIGMA: f64 = 0.6745;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Wavelet {
    Haar,
    Daubechies4,
}

impl std::str::FromStr for Wavelet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haar" | "db1" => Ok(Wavelet::Haar),
            "daubechies4" | "db2" | "d4" => Ok(Wavelet::Daubechies4),
            _ => Err(Error::Config(format!("unknown wavelet `{s}`"))),
        }
    }
}

/// Edge cutoff, either an absolute number of steps or a multiple of the
/// filter length `tau + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Cutoff {
    Steps(usize),
    Fraction(f64),
}

impl Cutoff {
    /// Number of rows removed for a filter with `filter_len` taps
    /// (fractions round half up).
    pub fn resolve(&self, filter_len: usize) -> usize {
        match *self {
            Cutoff::Steps(n) => n,
            Cutoff::Fraction(f) => (f * filter_len as f64 + 0.5).floor() as usize,
        }
    }
}

impl std::str::FromStr for Cutoff {
    type Err = Error;

    /// Integer literals are step counts; anything with a decimal point or
    /// exponent is a fraction of the filter length.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(n) = s.parse::<usize>() {
            return Ok(Cutoff::Steps(n));
        }
        match s.parse::<f64>() {
            Ok(f) if f >= 0.0 && f.is_finite() => Ok(Cutoff::Fraction(f)),
            _ => Err(Error::Config(format!("invalid edge cutoff `{s}`"))),
        }
    }
}

/// How the Wiener gains are estimated for a multichannel series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpectrumMode {
    /// Independent noise estimate and signal spectrum per channel.
    PerChannel,
    /// One kernel for all channels: averaged proxy power spectrum and pooled
    /// noise level. Deconvolution is then a single linear operator, so it
    /// commutes exactly with the decoder inversion.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeconvConfig {
    pub wavelet: Wavelet,
    pub sigma_min: f64,
    pub cut_l: Cutoff,
    pub cut_r: Cutoff,
    pub spectrum: SpectrumMode,
}

impl Default for DeconvConfig {
    fn default() -> Self {
        Self {
            wavelet: Wavelet::Haar,
            sigma_min: 1e-5,
            cut_l: Cutoff::Steps(0),
            cut_r: Cutoff::Steps(0),
            spectrum: SpectrumMode::PerChannel,
        }
    }
}

impl DeconvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0) || !self.sigma_min.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sigma_min must be positive, got {}",
                self.sigma_min
            )));
        }
        for c in [self.cut_l, self.cut_r] {
            if let Cutoff::Fraction(f) = c {
                if !(f >= 0.0) || !f.is_finite() {
                    return Err(Error::InvalidArgument(format!("invalid cutoff fraction {f}")));
                }
            }
        }
        Ok(())
    }

    /// `(leading, trailing)` rows set to NaN.
    pub fn resolved_cutoffs(&self, filter: &HrfFilter) -> (usize, usize) {
        (self.cut_l.resolve(filter.len()), self.cut_r.resolve(filter.len()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseResult {
    pub sigma_est: f64,
    pub denoised: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Wavelets

const D4: [f64; 4] = {
    // (1 + sqrt3, 3 + sqrt3, 3 - sqrt3, 1 - sqrt3) / (4 sqrt2)
    const S3: f64 = 1.732_050_807_568_877_2;
    const N: f64 = 5.656_854_249_492_381;
    [(1.0 + S3) / N, (3.0 + S3) / N, (3.0 - S3) / N, (1.0 - S3) / N]
};

fn filters(w: Wavelet) -> (Vec<f64>, Vec<f64>) {
    let lo: Vec<f64> = match w {
        Wavelet::Haar => vec![std::f64::consts::FRAC_1_SQRT_2; 2],
        Wavelet::Daubechies4 => D4.to_vec(),
    };
    let n = lo.len();
    let hi = (0..n)
        .map(|m| if m % 2 == 0 { lo[n - 1 - m] } else { -lo[n - 1 - m] })
        .collect();
    (lo, hi)
}

/// Single-level periodized orthogonal DWT of an even-length signal.
pub fn dwt(x: &[f64], w: Wavelet) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    debug_assert!(n % 2 == 0 && n >= 2);
    let (lo, hi) = filters(w);
    let half = n / 2;
    let mut approx = vec![0.0; half];
    let mut detail = vec![0.0; half];
    for k in 0..half {
        for m in 0..lo.len() {
            let v = x[(2 * k + m) % n];
            approx[k] += lo[m] * v;
            detail[k] += hi[m] * v;
        }
    }
    (approx, detail)
}

/// Inverse of [`dwt`].
pub fn idwt(approx: &[f64], detail: &[f64], w: Wavelet) -> Vec<f64> {
    let half = approx.len();
    let n = 2 * half;
    let (lo, hi) = filters(w);
    let mut x = vec![0.0; n];
    for k in 0..half {
        for m in 0..lo.len() {
            x[(2 * k + m) % n] += lo[m] * approx[k] + hi[m] * detail[k];
        }
    }
    x
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Noise level from the median absolute deviation of fine-scale details.
pub fn mad_sigma(detail: &[f64]) -> f64 {
    let med = median(detail);
    let dev: Vec<f64> = detail.iter().map(|d| (d - med).abs()).collect();
    median(&dev) / MAD_TO_SIGMA
}

pub fn universal_threshold(len: usize, sigma: f64) -> f64 {
    (2.0 * (len as f64).ln()).sqrt() * sigma
}

/// Wavelet shrinkage with the universal threshold and hard thresholding of
/// the finest-scale details.
pub fn visushrink(x: &[f64], wavelet: Wavelet) -> Result<DenoiseResult> {
    let t = x.len();
    if t < 4 {
        return Err(Error::TooShort(format!(
            "wavelet shrinkage needs at least 4 samples, got {t}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NanInput("denoising input".into()));
    }
    // odd lengths: mirror the last sample
    let mut padded = x.to_vec();
    if t % 2 == 1 {
        padded.push(x[t - 1]);
    }
    let (approx, mut detail) = dwt(&padded, wavelet);
    let sigma_est = mad_sigma(&detail);
    let lambda = universal_threshold(t, sigma_est);
    for d in &mut detail {
        if d.abs() < lambda {
            *d = 0.0;
        }
    }
    let mut denoised = idwt(&approx, &detail, wavelet);
    denoised.truncate(t);
    Ok(DenoiseResult { sigma_est, denoised })
}

// ---------------------------------------------------------------------------
// Wiener filtering

struct Plans {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Plans {
    fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        }
    }

    fn spectrum(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        buf.resize(self.len, Complex64::new(0.0, 0.0));
        self.forward.process(&mut buf);
        buf
    }
}

/// Frozen frequency-domain gains. Applying them is a linear map.
#[derive(Clone, Debug, PartialEq)]
pub struct WienerKernel {
    pub gains: Vec<Complex64>,
}

impl WienerKernel {
    /// `W_k = conj(H_k) S_k / (|H_k|^2 S_k + N_k)` with `S_k` the power of
    /// the proxy and the flat noise spectrum `N_k = sigma^2 T`.
    pub fn from_power(filter: &HrfFilter, signal_power: &[f64], sigma: f64) -> Result<Self> {
        let t = signal_power.len();
        if filter.is_empty() {
            return Err(Error::InvalidArgument("filter has no taps".into()));
        }
        if filter.len() > t {
            return Err(Error::TooShort(format!(
                "series of length {t} is shorter than the filter ({} taps)",
                filter.len()
            )));
        }
        if !(sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise level must be >= 0, got {sigma}")));
        }
        let plans = Plans::new(t);
        let h = plans.spectrum(&filter.taps);
        let noise = sigma * sigma * t as f64;
        let gains = h
            .iter()
            .zip(signal_power)
            .map(|(hk, &sk)| {
                let denom = hk.norm_sqr() * sk + noise;
                if denom > 0.0 {
                    hk.conj() * (sk / denom)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect();
        Ok(Self { gains })
    }

    pub fn from_proxy(filter: &HrfFilter, denoised_proxy: &[f64], sigma: f64) -> Result<Self> {
        let plans = Plans::new(denoised_proxy.len());
        let power: Vec<f64> = plans.spectrum(denoised_proxy).iter().map(|c| c.norm_sqr()).collect();
        Self::from_power(filter, &power, sigma)
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.gains.len() {
            return dim_err(format!(
                "kernel built for length {}, signal has {}",
                self.gains.len(),
                x.len()
            ));
        }
        Ok(self.apply_with(&Plans::new(x.len()), x))
    }

    fn apply_with(&self, plans: &Plans, x: &[f64]) -> Vec<f64> {
        let mut buf = plans.spectrum(x);
        for (b, g) in buf.iter_mut().zip(&self.gains) {
            *b *= g;
        }
        plans.inverse.process(&mut buf);
        let scale = 1.0 / plans.len as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }
}

/// Wiener deconvolution of one channel given its noise level and a
/// denoised proxy for the signal spectrum.
pub fn wiener_deconvolve(
    x: &[f64],
    filter: &HrfFilter,
    sigma: f64,
    denoised_proxy: &[f64],
) -> Result<Vec<f64>> {
    if x.len() != denoised_proxy.len() {
        return dim_err(format!(
            "signal length {} differs from proxy length {}",
            x.len(),
            denoised_proxy.len()
        ));
    }
    WienerKernel::from_proxy(filter, denoised_proxy, sigma)?.apply(x)
}

// ---------------------------------------------------------------------------
// Multichannel deconvolution

/// Noise levels seen while deconvolving, one entry per channel.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeconvReport {
    /// Raw shrinkage estimates.
    pub sigma_raw: Vec<f64>,
    /// Values entering the Wiener gains after the noise-floor clamp.
    pub sigma_used: Vec<f64>,
}

fn check_input(x: &Matrix, filter: &HrfFilter, cfg: &DeconvConfig, what: &str) -> Result<(usize, usize)> {
    cfg.validate()?;
    if x.has_nan() {
        return Err(Error::NanInput(what.to_string()));
    }
    let (l, r) = cfg.resolved_cutoffs(filter);
    if x.rows() <= l + r {
        return Err(Error::TooShort(format!(
            "{what} has {} rows, edge cutoffs remove {}",
            x.rows(),
            l + r
        )));
    }
    if x.rows() < filter.len() {
        return Err(Error::TooShort(format!(
            "{what} has {} rows, the filter has {} taps",
            x.rows(),
            filter.len()
        )));
    }
    Ok((l, r))
}

fn mask_edges(m: &mut Matrix, l: usize, r: usize) {
    let t = m.rows();
    for i in (0..l).chain(t - r..t) {
        m.row_mut(i).iter_mut().for_each(|v| *v = f64::NAN);
    }
}

fn from_columns_masked(cols: Vec<Vec<f64>>, rows: usize, l: usize, r: usize) -> Matrix {
    let mut out = Matrix::zeros(rows, cols.len());
    for (j, c) in cols.iter().enumerate() {
        out.set_column(j, c);
    }
    mask_edges(&mut out, l, r);
    out
}

struct ChannelEstimate {
    sigma_raw: f64,
    sigma_used: f64,
    power: Vec<f64>,
}

fn estimate_channel(col: &[f64], plans: &Plans, cfg: &DeconvConfig) -> Result<ChannelEstimate> {
    let dn = visushrink(col, cfg.wavelet)?;
    let power = plans.spectrum(&dn.denoised).iter().map(|c| c.norm_sqr()).collect();
    Ok(ChannelEstimate {
        sigma_raw: dn.sigma_est,
        sigma_used: dn.sigma_est.max(cfg.sigma_min),
        power,
    })
}

fn estimate_all(columns: &[Vec<f64>], plans: &Plans, cfg: &DeconvConfig) -> Result<Vec<ChannelEstimate>> {
    columns
        .par_iter()
        .map(|c| estimate_channel(c, plans, cfg))
        .collect()
}

/// Pools channel estimates into one kernel: mean proxy power and the
/// root-mean-square noise level, clamped at the floor.
fn pooled_kernel(est: &[ChannelEstimate], filter: &HrfFilter, t: usize, sigma_min: f64) -> Result<WienerKernel> {
    let n = est.len().max(1) as f64;
    let mut power = vec![0.0; t];
    for e in est {
        for (p, v) in power.iter_mut().zip(&e.power) {
            *p += v / n;
        }
    }
    let sigma = (est.iter().map(|e| e.sigma_raw * e.sigma_raw).sum::<f64>() / n)
        .sqrt()
        .max(sigma_min);
    WienerKernel::from_power(filter, &power, sigma)
}

/// Algorithm applied per column: shrinkage, noise-floor clamp, Wiener
/// filtering, then NaN edges.
pub fn deconvolve_matrix(x: &Matrix, filter: &HrfFilter, cfg: &DeconvConfig) -> Result<Matrix> {
    deconvolve_matrix_report(x, filter, cfg).map(|(m, _)| m)
}

/// Like [`deconvolve_matrix`], also returning the noise levels used.
pub fn deconvolve_matrix_report(
    x: &Matrix,
    filter: &HrfFilter,
    cfg: &DeconvConfig,
) -> Result<(Matrix, DeconvReport)> {
    let (l, r) = check_input(x, filter, cfg, "deconvolution input")?;
    let t = x.rows();
    let plans = Plans::new(t);
    let columns: Vec<Vec<f64>> = (0..x.cols()).map(|j| x.column(j)).collect();
    let est = estimate_all(&columns, &plans, cfg)?;
    let report = DeconvReport {
        sigma_raw: est.iter().map(|e| e.sigma_raw).collect(),
        sigma_used: est.iter().map(|e| e.sigma_used).collect(),
    };
    // nothing to undo for a unit impulse; only the edges are masked
    if filter.is_unit() {
        return Ok((from_columns_masked(columns, t, l, r), report));
    }
    let outputs: Vec<Vec<f64>> = match cfg.spectrum {
        SpectrumMode::PerChannel => columns
            .par_iter()
            .zip(est.par_iter())
            .map(|(c, e)| {
                WienerKernel::from_power(filter, &e.power, e.sigma_used).map(|k| k.apply_with(&plans, c))
            })
            .collect::<Result<_>>()?,
        SpectrumMode::Shared => {
            let kernel = pooled_kernel(&est, filter, t, cfg.sigma_min)?;
            columns.par_iter().map(|c| kernel.apply_with(&plans, c)).collect()
        }
    };
    Ok((from_columns_masked(outputs, t, l, r), report))
}

/// Deconvolves observations and nuisance regressors with the same config.
/// In shared-spectrum mode a single kernel is estimated from all columns of
/// both series.
pub fn deconvolve_pair(
    x: &Matrix,
    nuisance: Option<&Matrix>,
    filter: &HrfFilter,
    cfg: &DeconvConfig,
) -> Result<(Matrix, Option<Matrix>)> {
    let Some(r) = nuisance else {
        return Ok((deconvolve_matrix(x, filter, cfg)?, None));
    };
    if r.rows() != x.rows() {
        return dim_err(format!(
            "nuisance series has {} rows, observations have {}",
            r.rows(),
            x.rows()
        ));
    }
    match cfg.spectrum {
        _ if filter.is_unit() => Ok((
            deconvolve_matrix(x, filter, cfg)?,
            Some(deconvolve_matrix(r, filter, cfg)?),
        )),
        SpectrumMode::PerChannel => Ok((
            deconvolve_matrix(x, filter, cfg)?,
            Some(deconvolve_matrix(r, filter, cfg)?),
        )),
        SpectrumMode::Shared => {
            let (l, rr) = check_input(x, filter, cfg, "deconvolution input")?;
            check_input(r, filter, cfg, "nuisance series")?;
            let t = x.rows();
            let plans = Plans::new(t);
            let xc: Vec<Vec<f64>> = (0..x.cols()).map(|j| x.column(j)).collect();
            let rc: Vec<Vec<f64>> = (0..r.cols()).map(|j| r.column(j)).collect();
            let all: Vec<Vec<f64>> = xc.iter().chain(&rc).cloned().collect();
            let est = estimate_all(&all, &plans, cfg)?;
            let kernel = pooled_kernel(&est, filter, t, cfg.sigma_min)?;
            let apply = |cols: &[Vec<f64>]| -> Vec<Vec<f64>> {
                cols.par_iter().map(|c| kernel.apply_with(&plans, c)).collect()
            };
            Ok((
                from_columns_masked(apply(&xc), t, l, rr),
                Some(from_columns_masked(apply(&rc), t, l, rr)),
            ))
        }
    }
}

/// Rowwise `B^+ (x_t - J r_t)`; NaN rows stay NaN.
pub fn forcing_from_deconvolved(
    x_deconv: &Matrix,
    r_deconv: Option<&Matrix>,
    b: &Matrix,
    j: Option<&Matrix>,
) -> Result<ForcingSignals> {
    let pinv = b.pseudo_inverse()?;
    forcing_with_pinv(x_deconv, r_deconv, &pinv, j)
}

pub(crate) fn forcing_with_pinv(
    x_deconv: &Matrix,
    r_deconv: Option<&Matrix>,
    pinv: &Matrix,
    j: Option<&Matrix>,
) -> Result<ForcingSignals> {
    let n = pinv.cols();
    if x_deconv.cols() != n {
        return dim_err(format!(
            "observations have {} columns, decoder has {n} outputs",
            x_deconv.cols()
        ));
    }
    let t = x_deconv.rows();
    let jr = match (r_deconv, j) {
        (None, _) => None,
        (Some(_), None) => {
            return Err(Error::InvalidArgument(
                "nuisance series given without nuisance weights".into(),
            ))
        }
        (Some(r), Some(j)) => {
            if j.rows() != n {
                return dim_err(format!("J has {} rows, expected {n}", j.rows()));
            }
            r.check_shape(t, j.cols(), "deconvolved nuisance series")?;
            Some((r, j))
        }
    };
    let m = pinv.rows();
    let mut d = Matrix::zeros(t, m);
    let mut resid = vec![0.0; n];
    let mut jbuf = vec![0.0; n];
    for i in 0..t {
        let nan_row = x_deconv.row_has_nan(i) || jr.is_some_and(|(r, _)| r.row_has_nan(i));
        if nan_row {
            d.row_mut(i).iter_mut().for_each(|v| *v = f64::NAN);
            continue;
        }
        resid.copy_from_slice(x_deconv.row(i));
        if let Some((r, j)) = jr {
            j.mul_vec_into(r.row(i), &mut jbuf);
            for (a, b) in resid.iter_mut().zip(&jbuf) {
                *a -= b;
            }
        }
        pinv.mul_vec_into(&resid, d.row_mut(i));
    }
    Ok(ForcingSignals::new(d, 0.0))
}

/// Reference path: remove nuisance and invert the decoder on the raw
/// observations, then deconvolve the resulting latent series.
pub fn invert_direct(
    x: &Matrix,
    nuisance: Option<&Matrix>,
    b: &Matrix,
    j: Option<&Matrix>,
    filter: &HrfFilter,
    cfg: &DeconvConfig,
) -> Result<ForcingSignals> {
    let latent_raw = forcing_from_deconvolved(x, nuisance, b, j)?.d;
    let d = match cfg.spectrum {
        SpectrumMode::Shared if !filter.is_unit() => {
            // Same kernel as the fast path, estimated from the raw series.
            let (l, r) = check_input(x, filter, cfg, "deconvolution input")?;
            let t = x.rows();
            let plans = Plans::new(t);
            let mut all: Vec<Vec<f64>> = (0..x.cols()).map(|j| x.column(j)).collect();
            if let Some(rm) = nuisance {
                check_input(rm, filter, cfg, "nuisance series")?;
                all.extend((0..rm.cols()).map(|j| rm.column(j)));
            }
            let est = estimate_all(&all, &plans, cfg)?;
            let kernel = pooled_kernel(&est, filter, t, cfg.sigma_min)?;
            let cols: Vec<Vec<f64>> = (0..latent_raw.cols())
                .into_par_iter()
                .map(|j| kernel.apply_with(&plans, &latent_raw.column(j)))
                .collect();
            from_columns_masked(cols, t, l, r)
        }
        _ => deconvolve_matrix(&latent_raw, filter, cfg)?,
    };
    Ok(ForcingSignals::new(d, 0.0))
}
