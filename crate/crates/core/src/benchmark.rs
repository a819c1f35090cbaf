//! Ground-truth datasets: convolved Lorenz63 trajectories and analytic
//! linear systems.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ModelParams, Variant};
use crate::error::{Error, Result};
use crate::linalg::{column_moments, Matrix};
use crate::observation::{canonical_hrf, causal_convolve, HrfFilter, DEFAULT_HRF_DURATION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LorenzConfig {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    /// Integration and sampling step.
    pub dt: f64,
    /// Number of saved steps.
    pub t_len: usize,
    pub transient_discard: usize,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.01,
            t_len: 100_000,
            transient_discard: 1000,
        }
    }
}

impl LorenzConfig {
    pub fn field(&self, s: [f64; 3]) -> [f64; 3] {
        [
            self.sigma * (s[1] - s[0]),
            s[0] * (self.rho - s[2]) - s[1],
            s[0] * s[1] - self.beta * s[2],
        ]
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.t_len == 0 {
            return Err(Error::InvalidArgument("Lorenz dt must be positive and T >= 1".into()));
        }
        Ok(())
    }
}

/// One classical Runge-Kutta step.
pub fn lorenz_step(cfg: &LorenzConfig, s: [f64; 3], dt: f64) -> [f64; 3] {
    let add = |a: [f64; 3], b: [f64; 3], h: f64| [a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2]];
    let k1 = cfg.field(s);
    let k2 = cfg.field(add(s, k1, dt / 2.0));
    let k3 = cfg.field(add(s, k2, dt / 2.0));
    let k4 = cfg.field(add(s, k3, dt));
    let mut out = s;
    for i in 0..3 {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Raw (unstandardized) trajectory after the transient.
pub fn lorenz_trajectory(cfg: &LorenzConfig, x0: [f64; 3]) -> Result<Matrix> {
    cfg.validate()?;
    let mut s = x0;
    let mut out = Matrix::zeros(cfg.t_len, 3);
    for step in 0..cfg.transient_discard + cfg.t_len {
        if step >= cfg.transient_discard {
            out.row_mut(step - cfg.transient_discard).copy_from_slice(&s);
        }
        s = lorenz_step(cfg, s, cfg.dt);
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkDataset {
    /// Standardized latent trajectory.
    pub latent_truth: Matrix,
    /// Convolved latent plus observation noise.
    pub observed: Matrix,
    pub filter: HrfFilter,
    pub noise_sigma: f64,
    /// First row of the test part.
    pub split_index: usize,
    /// Time between saved steps, for Lyapunov units.
    pub dt: f64,
}

impl BenchmarkDataset {
    pub fn train_observed(&self) -> Matrix {
        self.observed.row_block(0, self.split_index)
    }

    pub fn test_observed(&self) -> Matrix {
        self.observed.row_block(self.split_index, self.observed.rows() - self.split_index)
    }

    pub fn test_latent(&self) -> Matrix {
        self.latent_truth
            .row_block(self.split_index, self.latent_truth.rows() - self.split_index)
    }
}

pub fn standardize(m: &Matrix) -> Matrix {
    let (mean, std) = column_moments(m);
    Matrix::from_fn(m.rows(), m.cols(), |i, j| {
        let s = if std[j] > 0.0 { std[j] } else { 1.0 };
        (m[(i, j)] - mean[j]) / s
    })
}

/// Integrate, standardize, convolve with the canonical response at the
/// given TR and add Gaussian noise.
pub fn make_benchmark(
    cfg: &LorenzConfig,
    tr_seconds: f64,
    noise_sigma: f64,
    split_index: usize,
    seed: u64,
) -> Result<BenchmarkDataset> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    if split_index > cfg.t_len {
        return Err(Error::InvalidArgument(format!(
            "split index {split_index} beyond series length {}",
            cfg.t_len
        )));
    }
    let filter = canonical_hrf(tr_seconds, DEFAULT_HRF_DURATION)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = [
        StandardNormal.sample(&mut rng),
        StandardNormal.sample(&mut rng),
        StandardNormal.sample(&mut rng),
    ];
    let raw = lorenz_trajectory(cfg, x0)?;
    let latent_truth = standardize(&raw);
    let mut observed = causal_convolve(&latent_truth, &filter)?;
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        observed.as_mut_slice().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    Ok(BenchmarkDataset {
        latent_truth,
        observed,
        filter,
        noise_sigma,
        split_index,
        dt: cfg.dt,
    })
}

/// Largest Lyapunov exponent of the flow (per unit time) from two nearby
/// trajectories, renormalizing their separation every `renorm_every` steps.
pub fn lorenz_lyapunov_two_trajectory(
    cfg: &LorenzConfig,
    x0: [f64; 3],
    steps: usize,
    renorm_every: usize,
    d0: f64,
) -> f64 {
    let mut a = x0;
    for _ in 0..cfg.transient_discard {
        a = lorenz_step(cfg, a, cfg.dt);
    }
    let mut b = [a[0] + d0, a[1], a[2]];
    let mut sum = 0.0;
    let mut n = 0usize;
    for step in 1..=steps {
        a = lorenz_step(cfg, a, cfg.dt);
        b = lorenz_step(cfg, b, cfg.dt);
        if step % renorm_every == 0 {
            let d: f64 = (0..3).map(|i| (b[i] - a[i]).powi(2)).sum::<f64>().sqrt();
            sum += (d / d0).ln();
            n += 1;
            for i in 0..3 {
                b[i] = a[i] + (b[i] - a[i]) * d0 / d;
            }
        }
    }
    sum / (n as f64 * renorm_every as f64 * cfg.dt)
}

/// Analytic reference for a diagonal linear latent model.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearOracle {
    pub spectrum: Vec<f64>,
    /// `max_i ln|A_i|` per step.
    pub lambda_max: f64,
}

impl LinearOracle {
    /// Closed form `z_t = A^t z0`, one row per step.
    pub fn trajectory(&self, z0: &[f64], t_len: usize) -> Matrix {
        Matrix::from_fn(t_len, self.spectrum.len(), |t, i| self.spectrum[i].powi(t as i32) * z0[i])
    }
}

pub fn make_linear_oracle(m: usize, spectrum: &[f64]) -> Result<(ModelParams, LinearOracle)> {
    if spectrum.len() != m || m == 0 {
        return Err(Error::InvalidArgument(format!(
            "spectrum must have M = {m} entries, got {}",
            spectrum.len()
        )));
    }
    if spectrum.iter().any(|a| !(a.abs() < 1.0)) {
        return Err(Error::InvalidArgument("spectrum entries must satisfy |a| < 1".into()));
    }
    let params = ModelParams::new(
        spectrum.to_vec(),
        Matrix::zeros(m, 1),
        Matrix::zeros(1, m),
        vec![0.0; m],
        vec![0.0; 1],
        Variant::Shallow,
    )?;
    let lambda_max = spectrum.iter().map(|a| a.abs().ln()).fold(f64::NEG_INFINITY, f64::max);
    Ok((
        params,
        LinearOracle {
            spectrum: spectrum.to_vec(),
            lambda_max,
        },
    ))
}
