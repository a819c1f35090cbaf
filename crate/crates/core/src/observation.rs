//! Observation (decoder) models.
//!
//! The linear decoder maps each latent state to an observation row,
//! `x_t = B z_t`. The convolutional decoder first filters the latent history
//! with a hemodynamic response, `x_t = B (hrf * z)_t + J r_t`.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::Matrix;

/// Shape of the positive lobe of the double-gamma response (peak at 5 s).
const PEAK_SHAPE: i32 = 6;
/// Shape of the late undershoot.
const UNDERSHOOT_SHAPE: i32 = 16;
const UNDERSHOOT_RATIO: f64 = 1.0 / 6.0;

pub const DEFAULT_HRF_DURATION: f64 = 32.0;

/// Discretized impulse response. `taps[s]` weights the state `s` steps back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrfFilter {
    pub taps: Vec<f64>,
    pub tr_seconds: f64,
    pub duration_seconds: f64,
}

fn gamma_pdf_unit_rate(t: f64, shape: i32) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let ln_fact: f64 = (1..shape).map(|k| (k as f64).ln()).sum();
    ((shape - 1) as f64 * t.ln() - t - ln_fact).exp()
}

/// Double-gamma response evaluated at `t` seconds (not normalized).
pub fn double_gamma(t: f64) -> f64 {
    gamma_pdf_unit_rate(t, PEAK_SHAPE) - UNDERSHOOT_RATIO * gamma_pdf_unit_rate(t, UNDERSHOOT_SHAPE)
}

/// Samples the canonical response every `tr_seconds` over `duration_seconds`
/// and scales it so the largest tap is exactly 1.
pub fn canonical_hrf(tr_seconds: f64, duration_seconds: f64) -> Result<HrfFilter> {
    if !(tr_seconds > 0.0) || !tr_seconds.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "TR must be positive, got {tr_seconds}"
        )));
    }
    if !(duration_seconds >= tr_seconds) || !duration_seconds.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "hrf duration {duration_seconds} must be at least one TR ({tr_seconds})"
        )));
    }
    let n = (duration_seconds / tr_seconds + 1e-9).floor() as usize + 1;
    let mut taps: Vec<f64> = (0..n).map(|s| double_gamma(s as f64 * tr_seconds)).collect();
    let peak = taps.iter().cloned().fold(f64::MIN, f64::max);
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "TR {tr_seconds} s misses the positive lobe of the response"
        )));
    }
    for t in &mut taps {
        *t /= peak;
    }
    Ok(HrfFilter {
        taps,
        tr_seconds,
        duration_seconds,
    })
}

impl HrfFilter {
    /// Single unit tap; convolution with it is the identity.
    pub fn identity() -> Self {
        Self {
            taps: vec![1.0],
            tr_seconds: 1.0,
            duration_seconds: 0.0,
        }
    }

    pub fn from_taps(taps: Vec<f64>, tr_seconds: f64) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::InvalidArgument("filter needs at least one tap".into()));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("filter taps must be finite".into()));
        }
        let duration_seconds = (taps.len() - 1) as f64 * tr_seconds;
        Ok(Self {
            taps,
            tr_seconds,
            duration_seconds,
        })
    }

    /// Number of taps, `tau + 1`.
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// True for the single unit tap, i.e. no convolution at all.
    pub fn is_unit(&self) -> bool {
        self.taps == [1.0]
    }

    /// Longest lag `tau`.
    pub fn tau(&self) -> usize {
        self.taps.len().saturating_sub(1)
    }

    pub fn peak_index(&self) -> usize {
        let mut best = 0;
        for (i, t) in self.taps.iter().enumerate() {
            if *t > self.taps[best] {
                best = i;
            }
        }
        best
    }

    /// One tap per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.taps {
            s.push_str(&format!("{t}\n"));
        }
        s
    }

    pub fn from_text(text: &str, tr_seconds: f64) -> Result<Self> {
        let taps = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                l.parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad filter tap `{l}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_taps(taps, tr_seconds)
    }
}

/// Column-wise causal convolution with zero history before the first row:
/// `out[t] = sum_{s=0}^{min(t, tau)} taps[s] * input[t - s]`.
pub fn causal_convolve(input: &Matrix, filter: &HrfFilter) -> Result<Matrix> {
    if input.has_nan() {
        return Err(Error::NanInput("convolution input".into()));
    }
    if filter.is_empty() {
        return Err(Error::InvalidArgument("filter has no taps".into()));
    }
    Ok(convolve_unchecked(input, &filter.taps))
}

pub(crate) fn convolve_unchecked(input: &Matrix, taps: &[f64]) -> Matrix {
    let (rows, cols) = input.shape();
    let mut out = Matrix::zeros(rows, cols);
    for t in 0..rows {
        let max_lag = t.min(taps.len() - 1);
        let o = out.row_mut(t);
        for (s, &h) in taps[..=max_lag].iter().enumerate() {
            if h == 0.0 {
                continue;
            }
            for (oj, &x) in o.iter_mut().zip(input.row(t - s)) {
                *oj += h * x;
            }
        }
    }
    out
}

/// Plain linear Gaussian decoder `x_t = B z_t + eta_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearDecoder {
    /// N x M.
    pub b: Matrix,
    /// Diagonal observation-noise variances.
    pub gamma: Option<Vec<f64>>,
}

impl LinearDecoder {
    pub fn new(b: Matrix, gamma: Option<Vec<f64>>) -> Result<Self> {
        if b.rows() == 0 {
            return Err(Error::InvalidArgument("decoder needs N >= 1".into()));
        }
        check_gamma(&gamma, b.rows())?;
        Ok(Self { b, gamma })
    }

    /// Noiseless mean `B z_t` for every row.
    pub fn decode(&self, states: &Matrix) -> Result<Matrix> {
        project_rows(states, &self.b)
    }
}

fn check_gamma(gamma: &Option<Vec<f64>>, n: usize) -> Result<()> {
    if let Some(g) = gamma {
        if g.len() != n {
            return dim_err(format!("Gamma has length {}, expected {n}", g.len()));
        }
        if g.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("Gamma entries must be >= 0".into()));
        }
    }
    Ok(())
}

/// Rowwise `out_t = B z_t`.
pub(crate) fn project_rows(states: &Matrix, b: &Matrix) -> Result<Matrix> {
    if states.cols() != b.cols() {
        return dim_err(format!(
            "states have {} columns, decoder expects {}",
            states.cols(),
            b.cols()
        ));
    }
    let mut out = Matrix::zeros(states.rows(), b.rows());
    for t in 0..states.rows() {
        let (src, dst) = (states.row(t), out.row_mut(t));
        b.mul_vec_into(src, dst);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderMode {
    /// `B` selects the first N latent coordinates and is never trained.
    Identity,
    /// `B` (and `J`) are learned.
    Regressor,
}

impl std::str::FromStr for DecoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Identity" | "identity" => Ok(DecoderMode::Identity),
            "Regressor" | "regressor" => Ok(DecoderMode::Regressor),
            other => Err(Error::Config(format!("unknown observation_model `{other}`"))),
        }
    }
}

/// Convolutional decoder `x_t = B (hrf * z)_t + J r_t + eta_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvDecoder {
    /// N x M.
    pub b: Matrix,
    /// N x P nuisance weights; `None` when there are no regressors.
    pub j: Option<Matrix>,
    pub hrf: HrfFilter,
    pub gamma: Option<Vec<f64>>,
    pub mode: DecoderMode,
}

/// `N x M` matrix picking the first `N` latent coordinates.
pub fn selector(n: usize, m: usize) -> Result<Matrix> {
    if n > m {
        return Err(Error::InvalidArgument(format!(
            "identity observation model needs N <= M (N = {n}, M = {m})"
        )));
    }
    Ok(Matrix::from_fn(n, m, |i, j| if i == j { 1.0 } else { 0.0 }))
}

impl ConvDecoder {
    pub fn new(
        b: Matrix,
        j: Option<Matrix>,
        hrf: HrfFilter,
        gamma: Option<Vec<f64>>,
        mode: DecoderMode,
    ) -> Result<Self> {
        if b.rows() == 0 {
            return Err(Error::InvalidArgument("decoder needs N >= 1".into()));
        }
        if let Some(jm) = &j {
            if jm.rows() != b.rows() {
                return dim_err(format!("J has {} rows, B has {}", jm.rows(), b.rows()));
            }
        }
        if mode == DecoderMode::Identity && b != selector(b.rows(), b.cols())? {
            return Err(Error::InvalidArgument(
                "identity mode requires the fixed selector matrix".into(),
            ));
        }
        check_gamma(&gamma, b.rows())?;
        Ok(Self {
            b,
            j,
            hrf,
            gamma,
            mode,
        })
    }

    pub fn identity(n: usize, m: usize, hrf: HrfFilter) -> Result<Self> {
        Self::new(selector(n, m)?, None, hrf, None, DecoderMode::Identity)
    }

    pub fn obs_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.b.cols()
    }

    pub fn nuisance_dim(&self) -> usize {
        self.j.as_ref().map_or(0, Matrix::cols)
    }

    /// Noiseless mean observations for a latent sequence. The latent
    /// history before row 0 is taken as zero.
    pub fn decode(&self, states: &Matrix, nuisance: Option<&Matrix>) -> Result<Matrix> {
        let projected = project_rows(states, &self.b)?;
        let mut out = causal_convolve(&projected, &self.hrf)?;
        self.add_nuisance(&mut out, nuisance)?;
        Ok(out)
    }

    pub(crate) fn add_nuisance(&self, out: &mut Matrix, nuisance: Option<&Matrix>) -> Result<()> {
        match (&self.j, nuisance) {
            (None, None) => Ok(()),
            (None, Some(_)) => Err(Error::InvalidArgument(
                "nuisance series given but the decoder has no J".into(),
            )),
            (Some(_), None) => Err(Error::InvalidArgument(
                "decoder has nuisance weights but no nuisance series was given".into(),
            )),
            (Some(j), Some(r)) => {
                r.check_shape(out.rows(), j.cols(), "nuisance series")?;
                let mut buf = vec![0.0; j.rows()];
                for t in 0..out.rows() {
                    if r.row_has_nan(t) {
                        return Err(Error::NanInput(format!("nuisance row {t}")));
                    }
                    j.mul_vec_into(r.row(t), &mut buf);
                    for (o, v) in out.row_mut(t).iter_mut().zip(&buf) {
                        *o += v;
                    }
                }
                Ok(())
            }
        }
    }
}
