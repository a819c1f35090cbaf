//! Generalized teacher forcing with a convolutional decoder.
//!
//! Forcing signals `d_t` come from the deconvolved observations and are
//! treated as data. Within a training window the latent state is
//! interpolated toward the forcing at every step,
//! `z~_t = (1 - alpha) F(z~_{t-1}) + alpha d_t`, the interpolated sequence is
//! decoded through the filter and compared to the raw observations. Gradients
//! are obtained by backpropagation through the unrolled window.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::deconv::{deconvolve_pair, forcing_with_pinv, DeconvConfig};
use crate::dynamics::{ModelParams, StepScratch, Variant};
use crate::error::{dim_err, Error, Result};
use crate::linalg::Matrix;
use crate::observation::{selector, ConvDecoder, DecoderMode, HrfFilter};

/// Number of consecutive non-finite epochs tolerated before aborting.
const MAX_NONFINITE_EPOCHS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct ForcingSignals {
    /// `T x M`; NaN rows mark deconvolution edges.
    pub d: Matrix,
    pub noise_level: f64,
}

impl ForcingSignals {
    pub fn new(d: Matrix, noise_level: f64) -> Self {
        Self { d, noise_level }
    }

    /// Start indices whose `len` rows are all NaN-free.
    pub fn admissible_starts(&self, len: usize) -> Vec<usize> {
        admissible_starts(&self.d, len)
    }
}

fn admissible_starts(d: &Matrix, len: usize) -> Vec<usize> {
    let t = d.rows();
    if len == 0 || len > t {
        return Vec::new();
    }
    let bad: Vec<bool> = (0..t).map(|i| d.row_has_nan(i)).collect();
    let mut starts = Vec::new();
    let mut run = 0usize;
    for i in 0..t {
        run = if bad[i] { 0 } else { run + 1 };
        if run >= len {
            starts.push(i + 1 - len);
        }
    }
    starts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub variant: Variant,
    pub alpha: f64,
    pub sequence_length: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub epochs: usize,
    pub start_lr: f64,
    pub end_lr: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub gradient_clip_norm: f64,
    /// Std of the Gaussian noise added to forcing rows per presentation.
    pub noise_level: f64,
    pub mar_ratio: f64,
    pub mar_lambda: f64,
    /// L2 penalty on the latent weights `W1`, `W2`.
    pub lat_reg: f64,
    /// L2 penalty on the decoder weights `B`, `J` (regressor mode only).
    pub obs_reg: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 3,
            hidden_dim: 50,
            variant: Variant::Shallow,
            alpha: 0.1,
            sequence_length: 500,
            batch_size: 16,
            batches_per_epoch: 50,
            epochs: 1000,
            start_lr: 1e-3,
            end_lr: 1e-6,
            gradient_clip_norm: 10.0,
            noise_level: 0.05,
            mar_ratio: 0.0,
            mar_lambda: 0.005,
            lat_reg: 1e-4,
            obs_reg: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.latent_dim == 0 || self.hidden_dim == 0 {
            return bad("latent_dim and hidden_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("weak_tf_alpha must lie in [0, 1), got {}", self.alpha));
        }
        if self.sequence_length < 2 || self.batch_size == 0 || self.batches_per_epoch == 0 {
            return bad("sequence_length >= 2, batch_size >= 1 and batches_per_epoch >= 1 required".into());
        }
        if !(self.start_lr > 0.0) || !(self.end_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.gradient_clip_norm >= 0.0) || !(self.noise_level >= 0.0) {
            return bad("gradient_clipping_norm and gaussian_noise_level must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.mar_ratio) || !(self.mar_lambda >= 0.0) {
            return bad("MAR_ratio must lie in [0, 1] and MAR_lambda >= 0".into());
        }
        if !(self.lat_reg >= 0.0) || !(self.obs_reg >= 0.0) {
            return bad("regularization weights must be >= 0".into());
        }
        Ok(())
    }

    /// Geometric interpolation between the start and end rates.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.epochs == 0 {
            return self.start_lr;
        }
        self.start_lr * (self.end_lr / self.start_lr).powf(epoch as f64 / self.epochs as f64)
    }

    fn regularization(&self, mode: DecoderMode) -> Regularization {
        Regularization {
            mar_ratio: self.mar_ratio,
            mar_lambda: self.mar_lambda,
            lat_reg: self.lat_reg,
            obs_reg: if mode == DecoderMode::Regressor { self.obs_reg } else { 0.0 },
        }
    }
}

/// Penalty weights entering the training loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Regularization {
    pub mar_ratio: f64,
    pub mar_lambda: f64,
    pub lat_reg: f64,
    pub obs_reg: f64,
}

/// Loss value and gradients. `model` follows [`ModelParams::to_flat`].
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub model: Vec<f64>,
    pub b: Matrix,
    pub j: Option<Matrix>,
}

// ---------------------------------------------------------------------------
// Window convolution

/// Causal convolution over fixed-length windows via zero-padded FFTs.
///
/// The transform length depends only on the window length, so the cost is
/// the same for every filter length. Two real columns share one complex
/// transform, which is exact because the filter is real.
pub(crate) struct WindowConv {
    len: usize,
    n: usize,
    taps: Vec<f64>,
    spectrum: Vec<Complex64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl WindowConv {
    pub(crate) fn new(filter: &HrfFilter, len: usize) -> Self {
        let taps: Vec<f64> = filter.taps[..filter.len().min(len)].to_vec();
        let n = (2 * len - 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let mut spectrum = vec![Complex64::new(0.0, 0.0); n];
        for (s, &h) in spectrum.iter_mut().zip(&taps) {
            s.re = h;
        }
        forward.process(&mut spectrum);
        Self {
            len,
            n,
            taps,
            spectrum,
            forward,
            inverse,
        }
    }

    /// Convolution (`adjoint = false`) or its transpose, correlation with
    /// the taps (`adjoint = true`).
    pub(crate) fn apply(&self, input: &Matrix, adjoint: bool) -> Matrix {
        let (rows, cols) = input.shape();
        debug_assert_eq!(rows, self.len);
        if self.taps.len() == 1 {
            return input.map(|v| v * self.taps[0]);
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        let scale = 1.0 / self.n as f64;
        let mut c = 0;
        while c < cols {
            let pair = c + 1 < cols;
            buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
            for t in 0..rows {
                let row = input.row(t);
                buf[t] = Complex64::new(row[c], if pair { row[c + 1] } else { 0.0 });
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for (b, h) in buf.iter_mut().zip(&self.spectrum) {
                *b *= if adjoint { h.conj() } else { *h };
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            for t in 0..rows {
                let row = out.row_mut(t);
                row[c] = buf[t].re * scale;
                if pair {
                    row[c + 1] = buf[t].im * scale;
                }
            }
            c += 2;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Forward pass and loss

fn check_window(d: &Matrix, m: usize) -> Result<()> {
    if d.cols() != m {
        return dim_err(format!("forcing has {} columns, model has M = {m}", d.cols()));
    }
    if d.rows() == 0 {
        return Err(Error::TooShort("empty forcing window".into()));
    }
    if d.has_nan() {
        return Err(Error::NanInput("forcing window".into()));
    }
    Ok(())
}

/// Teacher-forced rollout over a forcing window; returns the interpolated
/// states `z~`, starting from `z~_1 = d_1`.
pub fn forced_forward(params: &ModelParams, d_window: &Matrix, alpha: f64) -> Result<Matrix> {
    check_window(d_window, params.latent_dim())?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(forced_unchecked(params, d_window, alpha))
}

fn forced_unchecked(params: &ModelParams, d: &Matrix, alpha: f64) -> Matrix {
    let (s, m) = d.shape();
    let mut z = Matrix::zeros(s, m);
    z.row_mut(0).copy_from_slice(d.row(0));
    let mut scratch = StepScratch::new(params.hidden_dim());
    let mut next = vec![0.0; m];
    for t in 1..s {
        params.step_into(z.row(t - 1), &mut next, &mut scratch);
        let dt = d.row(t);
        for ((o, &zn), &dv) in z.row_mut(t).iter_mut().zip(&next).zip(dt) {
            *o = (1.0 - alpha) * zn + alpha * dv;
        }
    }
    z
}

struct LossContext {
    conv: WindowConv,
    tau: usize,
}

impl LossContext {
    fn new(filter: &HrfFilter, len: usize) -> Self {
        Self {
            conv: WindowConv::new(filter, len),
            tau: filter.tau(),
        }
    }
}

/// Mean squared error over unmasked target entries of one window, with
/// gradients, without regularization.
fn window_loss(
    ctx: &LossContext,
    params: &ModelParams,
    b: &Matrix,
    j: Option<&Matrix>,
    d: &Matrix,
    x: &Matrix,
    r: Option<&Matrix>,
    alpha: f64,
) -> Result<LossGrad> {
    let (s, m) = d.shape();
    let n = b.rows();
    let l = params.hidden_dim();
    let ztil = forced_unchecked(params, d, alpha);

    // decode
    let mut y = Matrix::zeros(s, n);
    for t in 0..s {
        b.mul_vec_into(ztil.row(t), y.row_mut(t));
    }
    let mut xhat = ctx.conv.apply(&y, false);
    if let (Some(j), Some(r)) = (j, r) {
        let mut buf = vec![0.0; n];
        for t in 0..s {
            j.mul_vec_into(r.row(t), &mut buf);
            for (o, v) in xhat.row_mut(t).iter_mut().zip(&buf) {
                *o += v;
            }
        }
    }

    // masked residuals
    let mut count = 0usize;
    for t in ctx.tau.min(s)..s {
        count += x.row(t).iter().filter(|v| !v.is_nan()).count();
    }
    if count == 0 {
        return Err(Error::DegenerateWindow);
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    let mut gx = Matrix::zeros(s, n);
    for t in ctx.tau.min(s)..s {
        let (xr, hr, gr) = (x.row(t), xhat.row(t), gx.row_mut(t));
        for i in 0..n {
            if xr[i].is_nan() {
                continue;
            }
            let e = hr[i] - xr[i];
            loss += e * e * inv;
            gr[i] = 2.0 * e * inv;
        }
    }

    // decoder gradients
    let mut gj = j.map(|jm| Matrix::zeros(jm.rows(), jm.cols()));
    if let (Some(gj), Some(r)) = (gj.as_mut(), r) {
        for t in 0..s {
            gj.add_outer(1.0, gx.row(t), r.row(t));
        }
    }
    let gy = ctx.conv.apply(&gx, true);
    let mut gb = Matrix::zeros(n, m);
    let mut gz = Matrix::zeros(s, m);
    for t in 0..s {
        gb.add_outer(1.0, gy.row(t), ztil.row(t));
        b.tr_mul_vec_add(gy.row(t), gz.row_mut(t));
    }

    // backpropagation through the forced rollout
    let off_w1 = m;
    let off_w2 = off_w1 + m * l;
    let off_h1 = off_w2 + l * m;
    let off_h2 = off_h1 + m;
    let mut gp = vec![0.0; off_h2 + l];
    let mut scratch = StepScratch::new(l);
    let mut g = vec![0.0; m];
    let mut gact = vec![0.0; l];
    let mut gw = vec![0.0; l];
    for t in (1..s).rev() {
        for (gi, &v) in g.iter_mut().zip(gz.row(t)) {
            *gi = (1.0 - alpha) * v;
        }
        let zp = ztil.row(t - 1);
        params.hidden_into(zp, &mut scratch);
        for i in 0..m {
            gp[i] += g[i] * zp[i];
            gp[off_h1 + i] += g[i];
            let row = &mut gp[off_w1 + i * l..off_w1 + (i + 1) * l];
            for (o, a) in row.iter_mut().zip(&scratch.act) {
                *o += g[i] * a;
            }
        }
        gact.iter_mut().for_each(|v| *v = 0.0);
        params.w1.tr_mul_vec_add(&g, &mut gact);
        for k in 0..l {
            let u = scratch.u[k];
            let on = (u + params.h2[k] > 0.0) as u8 as f64;
            gp[off_h2 + k] += gact[k] * on;
            gw[k] = match params.variant {
                Variant::Shallow => gact[k] * on,
                Variant::ClippedShallow => gact[k] * (on - (u > 0.0) as u8 as f64),
            };
            let row = &mut gp[off_w2 + k * m..off_w2 + (k + 1) * m];
            for (o, z) in row.iter_mut().zip(zp) {
                *o += gw[k] * z;
            }
        }
        let prev = gz.row_mut(t - 1);
        for i in 0..m {
            prev[i] += params.a[i] * g[i];
        }
        params.w2.tr_mul_vec_add(&gw, prev);
    }

    Ok(LossGrad {
        loss,
        model: gp,
        b: gb,
        j: gj,
    })
}

/// Adds the penalty terms to a loss and its gradients.
fn add_regularization(lg: &mut LossGrad, params: &ModelParams, b: &Matrix, j: Option<&Matrix>, reg: &Regularization) {
    let m = params.latent_dim();
    let l = params.hidden_dim();
    let off_w1 = m;
    let off_w2 = off_w1 + m * l;
    let off_h1 = off_w2 + l * m;
    let units = ((reg.mar_ratio * m as f64) + 0.5).floor() as usize;
    if reg.mar_lambda > 0.0 && units > 0 {
        let lam = reg.mar_lambda;
        for i in 0..units.min(m) {
            let da = params.a[i] - 1.0;
            lg.loss += lam * da * da;
            lg.model[i] += 2.0 * lam * da;
            for k in 0..l {
                let w = params.w1[(i, k)];
                lg.loss += lam * w * w;
                lg.model[off_w1 + i * l + k] += 2.0 * lam * w;
            }
            let h = params.h1[i];
            lg.loss += lam * h * h;
            lg.model[off_h1 + i] += 2.0 * lam * h;
        }
    }
    if reg.lat_reg > 0.0 {
        let lam = reg.lat_reg;
        for (k, &w) in params.w1.as_slice().iter().enumerate() {
            lg.loss += lam * w * w;
            lg.model[off_w1 + k] += 2.0 * lam * w;
        }
        for (k, &w) in params.w2.as_slice().iter().enumerate() {
            lg.loss += lam * w * w;
            lg.model[off_w2 + k] += 2.0 * lam * w;
        }
    }
    if reg.obs_reg > 0.0 {
        let lam = reg.obs_reg;
        for (g, &w) in lg.b.as_mut_slice().iter_mut().zip(b.as_slice()) {
            lg.loss += lam * w * w;
            *g += 2.0 * lam * w;
        }
        if let (Some(gj), Some(j)) = (lg.j.as_mut(), j) {
            for (g, &w) in gj.as_mut_slice().iter_mut().zip(j.as_slice()) {
                lg.loss += lam * w * w;
                *g += 2.0 * lam * w;
            }
        }
    }
}

/// Training loss of one window and its gradients with respect to the
/// latent model and the decoder weights. Rows before the filter has a full
/// latent history, and NaN targets, are excluded.
pub fn sequence_loss(
    params: &ModelParams,
    dec: &ConvDecoder,
    d_window: &Matrix,
    x_window: &Matrix,
    r_window: Option<&Matrix>,
    alpha: f64,
    reg: &Regularization,
) -> Result<LossGrad> {
    check_window(d_window, params.latent_dim())?;
    if dec.latent_dim() != params.latent_dim() {
        return dim_err(format!(
            "decoder expects M = {}, model has M = {}",
            dec.latent_dim(),
            params.latent_dim()
        ));
    }
    x_window.check_shape(d_window.rows(), dec.obs_dim(), "target window")?;
    match (&dec.j, r_window) {
        (Some(j), Some(r)) => r.check_shape(d_window.rows(), j.cols(), "nuisance window")?,
        (None, None) => {}
        _ => {
            return Err(Error::InvalidArgument(
                "nuisance window and decoder nuisance weights must be given together".into(),
            ))
        }
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    let ctx = LossContext::new(&dec.hrf, d_window.rows());
    let mut lg = window_loss(&ctx, params, &dec.b, dec.j.as_ref(), d_window, x_window, r_window, alpha)?;
    add_regularization(&mut lg, params, &dec.b, dec.j.as_ref(), reg);
    Ok(lg)
}

// ---------------------------------------------------------------------------
// Optimizer

/// Rectified Adam.
#[derive(Clone, Debug)]
pub struct RAdam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl RAdam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let t = self.t as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * b2.powf(t) / bc2;
        let rect = if rho_t > 5.0 {
            Some(
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                    .sqrt(),
            )
        } else {
            None
        };
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / bc1;
            params[i] -= match rect {
                Some(r) => lr * r * mhat / ((self.v[i] / bc2).sqrt() + self.eps),
                None => lr * mhat,
            };
        }
    }
}

// ---------------------------------------------------------------------------
// Training

/// Observations with their deconvolved counterparts, computed once.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub x: Matrix,
    pub r: Option<Matrix>,
    pub x_deconv: Matrix,
    pub r_deconv: Option<Matrix>,
    pub filter: HrfFilter,
}

impl TrainData {
    pub fn prepare(x: &Matrix, r: Option<&Matrix>, filter: &HrfFilter, cfg: &DeconvConfig) -> Result<Self> {
        let (x_deconv, r_deconv) = deconvolve_pair(x, r, filter, cfg)?;
        Self::from_parts(x.clone(), r.cloned(), x_deconv, r_deconv, filter.clone())
    }

    pub fn from_parts(
        x: Matrix,
        r: Option<Matrix>,
        x_deconv: Matrix,
        r_deconv: Option<Matrix>,
        filter: HrfFilter,
    ) -> Result<Self> {
        x_deconv.check_shape(x.rows(), x.cols(), "deconvolved observations")?;
        match (&r, &r_deconv) {
            (None, None) => {}
            (Some(r), Some(rd)) => {
                r.check_shape(x.rows(), r.cols(), "nuisance series")?;
                rd.check_shape(x.rows(), r.cols(), "deconvolved nuisance series")?;
            }
            _ => return Err(Error::InvalidArgument("nuisance series must come with its deconvolution".into())),
        }
        if x.has_nan() {
            return Err(Error::NanInput("training observations".into()));
        }
        Ok(Self {
            x,
            r,
            x_deconv,
            r_deconv,
            filter,
        })
    }

    /// Plain state space model: unit filter and forcing from the raw data.
    pub fn standard(x: &Matrix, r: Option<&Matrix>) -> Result<Self> {
        Self::from_parts(x.clone(), r.cloned(), x.clone(), r.cloned(), HrfFilter::identity())
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn obs_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn forcing(&self, dec: &ConvDecoder) -> Result<ForcingSignals> {
        forcing_with_pinv(&self.x_deconv, self.r_deconv.as_ref(), &dec.b.pseudo_inverse()?, dec.j.as_ref())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub grad_norm_median: Vec<f64>,
    pub grad_norm_max: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub initial_params: ModelParams,
    pub params: ModelParams,
    pub decoder: ConvDecoder,
    pub converged: bool,
}

/// Leading principal directions of the deconvolved data, padded with zero
/// columns when `M > N`.
fn pca_decoder(x_deconv: &Matrix, m: usize) -> Matrix {
    let n = x_deconv.cols();
    let (mean, _) = crate::linalg::column_moments(x_deconv);
    let mut cov = nalgebra::DMatrix::<f64>::zeros(n, n);
    let mut rows = 0usize;
    for t in 0..x_deconv.rows() {
        if x_deconv.row_has_nan(t) {
            continue;
        }
        rows += 1;
        let c: Vec<f64> = x_deconv.row(t).iter().zip(&mean).map(|(v, mu)| v - mu).collect();
        for i in 0..n {
            for k in 0..n {
                cov[(i, k)] += c[i] * c[k];
            }
        }
    }
    cov /= rows.max(1) as f64;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut b = Matrix::zeros(n, m);
    for (col, &k) in order.iter().take(m.min(n)).enumerate() {
        let v = eig.eigenvectors.column(k);
        let pivot = v.iter().cloned().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            b[(i, col)] = sign * v[i];
        }
    }
    b
}

/// Initial decoder for a training run.
pub fn initial_decoder(data: &TrainData, m: usize, mode: DecoderMode) -> Result<ConvDecoder> {
    let n = data.obs_dim();
    let j = data.r.as_ref().map(|r| Matrix::zeros(n, r.cols()));
    match mode {
        DecoderMode::Identity => {
            if j.is_some() {
                return Err(Error::InvalidArgument(
                    "nuisance regressors require the Regressor observation model".into(),
                ));
            }
            ConvDecoder::new(selector(n, m)?, None, data.filter.clone(), None, mode)
        }
        DecoderMode::Regressor => ConvDecoder::new(pca_decoder(&data.x_deconv, m), j, data.filter.clone(), None, mode),
    }
}

/// Deconvolves once and trains.
pub fn train(
    data: &Matrix,
    nuisance: Option<&Matrix>,
    filter: &HrfFilter,
    deconv_cfg: &DeconvConfig,
    cfg: &TrainConfig,
    mode: DecoderMode,
) -> Result<TrainReport> {
    let prepared = TrainData::prepare(data, nuisance, filter, deconv_cfg)?;
    train_prepared(&prepared, cfg, mode)
}

pub fn train_prepared(data: &TrainData, cfg: &TrainConfig, mode: DecoderMode) -> Result<TrainReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init_random(cfg.latent_dim, cfg.hidden_dim, cfg.variant, &mut rng)?;
    let dec = initial_decoder(data, cfg.latent_dim, mode)?;
    train_from(data, cfg, params, dec, &mut rng)
}

/// Trains from explicit initial parameters, drawing windows and noise from
/// `rng`.
pub fn train_from(
    data: &TrainData,
    cfg: &TrainConfig,
    params: ModelParams,
    mut dec: ConvDecoder,
    rng: &mut ChaCha8Rng,
) -> Result<TrainReport> {
    cfg.validate()?;
    let s = cfg.sequence_length;
    let m = params.latent_dim();
    if dec.latent_dim() != m || dec.obs_dim() != data.obs_dim() {
        return dim_err("decoder does not match the model and data dimensions");
    }
    let starts = admissible_starts(&data.x_deconv, s);
    if starts.is_empty() {
        return Err(Error::TooShort(format!(
            "no NaN-free span of length {s} in {} rows",
            data.len()
        )));
    }
    if data.filter.tau() >= s {
        return Err(Error::DegenerateWindow);
    }
    let learn_decoder = dec.mode == DecoderMode::Regressor;
    let reg = cfg.regularization(dec.mode);
    let ctx = LossContext::new(&data.filter, s);
    let noise = Normal::new(0.0, cfg.noise_level.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let initial_params = params.clone();
    let mut params = params;
    let n_model = params.len();
    let n_b = if learn_decoder { dec.b.as_slice().len() } else { 0 };
    let n_j = if learn_decoder { dec.j.as_ref().map_or(0, |j| j.as_slice().len()) } else { 0 };
    let mut opt = RAdam::new(n_model + n_b + n_j);
    let mut flat = vec![0.0; n_model + n_b + n_j];

    let mut report = TrainReport {
        epoch_loss: Vec::with_capacity(cfg.epochs),
        grad_norm_median: Vec::with_capacity(cfg.epochs),
        grad_norm_max: Vec::with_capacity(cfg.epochs),
        epoch_seconds: Vec::with_capacity(cfg.epochs),
        initial_params,
        params: params.clone(),
        decoder: dec.clone(),
        converged: true,
    };
    let mut nonfinite_run = 0usize;

    for epoch in 0..cfg.epochs {
        let clock = Instant::now();
        let lr = cfg.learning_rate(epoch);
        let forcing = data.forcing(&dec)?;
        let mut losses = Vec::with_capacity(cfg.batches_per_epoch);
        let mut norms = Vec::with_capacity(cfg.batches_per_epoch);
        let mut finite_epoch = true;

        for _ in 0..cfg.batches_per_epoch {
            let windows: Vec<(usize, Matrix)> = (0..cfg.batch_size)
                .map(|_| {
                    let start = starts[rng.random_range(0..starts.len())];
                    let mut d = forcing.d.row_block(start, s);
                    if cfg.noise_level > 0.0 {
                        d.as_mut_slice().iter_mut().for_each(|v| *v += noise.sample(rng));
                    }
                    (start, d)
                })
                .collect();
            let results: Vec<Result<LossGrad>> = windows
                .par_iter()
                .map(|(start, d)| {
                    let x = data.x.row_block(*start, s);
                    let r = data.r.as_ref().map(|r| r.row_block(*start, s));
                    window_loss(&ctx, &params, &dec.b, dec.j.as_ref(), d, &x, r.as_ref(), cfg.alpha)
                })
                .collect();

            // ordered reduction
            let inv = 1.0 / cfg.batch_size as f64;
            let mut total: Option<LossGrad> = None;
            for res in results {
                let lg = res?;
                match total.as_mut() {
                    None => total = Some(lg),
                    Some(acc) => {
                        acc.loss += lg.loss;
                        acc.model.iter_mut().zip(&lg.model).for_each(|(a, b)| *a += b);
                        acc.b.as_mut_slice().iter_mut().zip(lg.b.as_slice()).for_each(|(a, b)| *a += b);
                        if let (Some(aj), Some(lj)) = (acc.j.as_mut(), lg.j.as_ref()) {
                            aj.as_mut_slice().iter_mut().zip(lj.as_slice()).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            let mut lg = total.expect("batch_size >= 1");
            lg.loss *= inv;
            lg.model.iter_mut().for_each(|v| *v *= inv);
            lg.b.scale(inv);
            if let Some(j) = lg.j.as_mut() {
                j.scale(inv);
            }
            add_regularization(&mut lg, &params, &dec.b, dec.j.as_ref(), &reg);

            let mut grad = lg.model;
            if learn_decoder {
                grad.extend_from_slice(lg.b.as_slice());
                if let Some(j) = &lg.j {
                    grad.extend_from_slice(j.as_slice());
                }
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            losses.push(lg.loss);
            norms.push(norm);
            if !lg.loss.is_finite() || !norm.is_finite() {
                finite_epoch = false;
                continue;
            }
            if cfg.gradient_clip_norm > 0.0 && norm > cfg.gradient_clip_norm {
                let c = cfg.gradient_clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= c);
            }

            flat[..n_model].copy_from_slice(&params.to_flat());
            if learn_decoder {
                flat[n_model..n_model + n_b].copy_from_slice(dec.b.as_slice());
                if let Some(j) = &dec.j {
                    flat[n_model + n_b..].copy_from_slice(j.as_slice());
                }
            }
            opt.step(&mut flat, &grad, lr);
            params.set_flat(&flat[..n_model]);
            if learn_decoder {
                dec.b.as_mut_slice().copy_from_slice(&flat[n_model..n_model + n_b]);
                if let Some(j) = dec.j.as_mut() {
                    j.as_mut_slice().copy_from_slice(&flat[n_model + n_b..]);
                }
            }
        }

        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        report.epoch_loss.push(mean_loss);
        report.grad_norm_median.push(crate::deconv::median(&norms));
        report.grad_norm_max.push(norms.iter().cloned().fold(f64::NAN, f64::max));
        report.epoch_seconds.push(clock.elapsed().as_secs_f64());

        if finite_epoch && mean_loss.is_finite() {
            nonfinite_run = 0;
        } else {
            report.converged = false;
            nonfinite_run += 1;
            if nonfinite_run > MAX_NONFINITE_EPOCHS {
                let last = report.epoch_loss.iter().rev().find(|l| l.is_finite());
                return Err(Error::TrainingDiverged(format!(
                    "non-finite loss for {nonfinite_run} consecutive epochs (epoch {epoch}, last finite loss {})",
                    last.map_or("none".to_string(), |l| format!("{l:.6e}"))
                )));
            }
        }
    }
    report.params = params;
    report.decoder = dec;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Prediction

/// Observation at `t0 + n`: forced states `z_t = d_t` up to `t0`, then `n`
/// free steps; the filter sees the mixed history.
pub fn predict_n_step(
    params: &ModelParams,
    dec: &ConvDecoder,
    forcing: &Matrix,
    nuisance: Option<&Matrix>,
    n: usize,
    t0: usize,
) -> Result<Vec<f64>> {
    let tau = dec.hrf.tau();
    let target = t0 + n;
    if target >= forcing.rows() || target < tau {
        return Err(Error::TooShort(format!(
            "prediction at {target} needs {tau} rows of history inside {} rows",
            forcing.rows()
        )));
    }
    let lo = target - tau;
    for t in lo.min(t0)..=t0 {
        if forcing.row_has_nan(t) {
            return Err(Error::TooShort(format!("forcing row {t} is missing")));
        }
    }
    let pred = predict_core(params, dec, forcing, n, t0, lo)?;
    let mut out = pred;
    if let (Some(j), Some(r)) = (&dec.j, nuisance) {
        let add = j.mul_vec(r.row(target))?;
        out.iter_mut().zip(add).for_each(|(o, a)| *o += a);
    }
    Ok(out)
}

fn predict_core(
    params: &ModelParams,
    dec: &ConvDecoder,
    forcing: &Matrix,
    n: usize,
    t0: usize,
    lo: usize,
) -> Result<Vec<f64>> {
    let m = params.latent_dim();
    let target = t0 + n;
    let mut free = Matrix::zeros(n, m);
    let mut scratch = StepScratch::new(params.hidden_dim());
    let mut z = forcing.row(t0).to_vec();
    let mut next = vec![0.0; m];
    for k in 0..n {
        params.step_into(&z, &mut next, &mut scratch);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: k + 1 });
        }
        free.row_mut(k).copy_from_slice(&next);
        std::mem::swap(&mut z, &mut next);
    }
    let mut acc = vec![0.0; m];
    for (s, &h) in dec.hrf.taps.iter().enumerate() {
        let t = target - s;
        if t < lo {
            break;
        }
        let state = if t > t0 { free.row(t - t0 - 1) } else { forcing.row(t) };
        acc.iter_mut().zip(state).for_each(|(a, v)| *a += h * v);
    }
    dec.b.mul_vec(&acc)
}

/// `n`-step predictions for every admissible target row; rows without a
/// prediction are NaN.
pub fn predict_series(
    params: &ModelParams,
    dec: &ConvDecoder,
    forcing: &Matrix,
    nuisance: Option<&Matrix>,
    n: usize,
) -> Result<Matrix> {
    let t_len = forcing.rows();
    let tau = dec.hrf.tau();
    let mut out = Matrix::filled(t_len, dec.obs_dim(), f64::NAN);
    // history requirement: forcing rows target - tau ..= t0 must be present
    let rows: Vec<usize> = (tau.max(n)..t_len)
        .filter(|&target| {
            let t0 = target - n;
            ((target - tau).min(t0)..=t0).all(|t| !forcing.row_has_nan(t))
                && nuisance.is_none_or(|r| !r.row_has_nan(target))
        })
        .collect();
    let preds: Vec<Result<(usize, Vec<f64>)>> = rows
        .par_iter()
        .map(|&target| predict_n_step(params, dec, forcing, nuisance, n, target - n).map(|p| (target, p)))
        .collect();
    for p in preds {
        let (t, v) = p?;
        out.row_mut(t).copy_from_slice(&v);
    }
    Ok(out)
}
