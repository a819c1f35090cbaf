//! Per-epoch training time as a function of filter length and model size.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::benchmark::{make_benchmark, LorenzConfig};
use crate::deconv::DeconvConfig;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::observation::{canonical_hrf, causal_convolve, DecoderMode, DEFAULT_HRF_DURATION};
use crate::training::{train_prepared, TrainConfig, TrainData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SweepVariable {
    Tr,
    HiddenDim,
    LatentDim,
    ObsDim,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::Tr => "TR",
            SweepVariable::HiddenDim => "L",
            SweepVariable::LatentDim => "M",
            SweepVariable::ObsDim => "N",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingSpec {
    pub base: TrainConfig,
    pub tr: f64,
    pub length: usize,
    pub noise_sigma: f64,
    pub warmup_epochs: usize,
    pub timed_epochs: usize,
    pub deconv: DeconvConfig,
}

impl Default for ScalingSpec {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            tr: 0.5,
            length: 10_000,
            noise_sigma: 0.01,
            warmup_epochs: 2,
            timed_epochs: 5,
            deconv: DeconvConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingPoint {
    pub value: f64,
    pub mean_seconds: f64,
    pub sem_seconds: f64,
    pub epoch_seconds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub variable: SweepVariable,
    pub points: Vec<ScalingPoint>,
    /// Coefficient of determination of a least-squares line through the
    /// mean epoch times.
    pub r_squared: f64,
    pub max_min_ratio: f64,
}

impl SweepResult {
    pub fn to_table(&self) -> String {
        let mut out = format!("{}\tmean_seconds\tsem_seconds\tn_epochs\n", self.variable.name());
        for p in &self.points {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{}\n",
                p.value,
                p.mean_seconds,
                p.sem_seconds,
                p.epoch_seconds.len()
            ));
        }
        out
    }
}

/// Mean and standard error of the mean.
pub fn mean_sem(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn linear_fit_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy * sxy / (sxx * syy)
}

/// Benchmark observations with `n` channels: the latent series mapped
/// through a fixed random mixing matrix when `n != 3`.
fn scaling_data(spec: &ScalingSpec, tr: f64, n: usize, seed: u64) -> Result<TrainData> {
    let cfg = LorenzConfig {
        t_len: spec.length,
        ..Default::default()
    };
    let ds = make_benchmark(&cfg, tr, spec.noise_sigma, spec.length, seed)?;
    let x = if n == 3 {
        ds.observed
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1);
        let mix = Matrix::from_fn(n, 3, |_, _| StandardNormal.sample(&mut rng));
        let latent = ds.latent_truth.matmul(&mix.transpose())?;
        let mut x = causal_convolve(&latent, &ds.filter)?;
        for v in x.as_mut_slice() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += spec.noise_sigma * e;
        }
        x
    };
    let filter = canonical_hrf(tr, DEFAULT_HRF_DURATION)?;
    TrainData::prepare(&x, None, &filter, &spec.deconv)
}

/// Wall-clock seconds of the timed epochs, after the warm-up epochs.
pub fn time_epochs(data: &TrainData, cfg: &TrainConfig, mode: DecoderMode, warmup: usize, timed: usize) -> Result<Vec<f64>> {
    let cfg = TrainConfig {
        epochs: warmup + timed,
        ..cfg.clone()
    };
    let rep = train_prepared(data, &cfg, mode)?;
    Ok(rep.epoch_seconds[warmup..].to_vec())
}

pub fn run_sweep(variable: SweepVariable, values: &[f64], spec: &ScalingSpec) -> Result<SweepResult> {
    if values.len() < 3 {
        return Err(Error::Config(format!(
            "sweep over {} needs at least 3 points, got {}",
            variable.name(),
            values.len()
        )));
    }
    if spec.timed_epochs < 5 {
        return Err(Error::Config("scaling needs at least 5 timed epochs".into()));
    }
    let as_dim = |v: f64| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::Config(format!("{} must be a positive integer, got {v}", variable.name())))
        }
    };
    let seed = spec.base.seed;
    let shared = match variable {
        SweepVariable::HiddenDim | SweepVariable::LatentDim => Some(scaling_data(spec, spec.tr, 3, seed)?),
        _ => None,
    };
    let mut setups = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = spec.base.clone();
        let (data, mode) = match variable {
            SweepVariable::Tr => {
                if !(v > 0.0) {
                    return Err(Error::Config(format!("TR must be positive, got {v}")));
                }
                (scaling_data(spec, v, 3, seed)?, DecoderMode::Identity)
            }
            SweepVariable::HiddenDim => {
                cfg.hidden_dim = as_dim(v)?;
                (shared.clone().expect("shared data"), DecoderMode::Identity)
            }
            SweepVariable::LatentDim => {
                cfg.latent_dim = as_dim(v)?;
                (shared.clone().expect("shared data"), DecoderMode::Regressor)
            }
            SweepVariable::ObsDim => (scaling_data(spec, spec.tr, as_dim(v)?, seed)?, DecoderMode::Regressor),
        };
        setups.push((cfg, data, mode));
    }
    // two passes, forward then reversed, so slow drift in machine speed
    // lands on every point alike
    let mut secs: Vec<Vec<f64>> = vec![Vec::new(); values.len()];
    let order: Vec<usize> = (0..values.len()).chain((0..values.len()).rev()).collect();
    for i in order {
        let (cfg, data, mode) = &setups[i];
        secs[i].extend(time_epochs(data, cfg, *mode, spec.warmup_epochs, spec.timed_epochs)?);
    }
    let points: Vec<ScalingPoint> = values
        .iter()
        .zip(secs)
        .map(|(&v, secs)| {
            let (mean, sem) = mean_sem(&secs);
            ScalingPoint {
                value: v,
                mean_seconds: mean,
                sem_seconds: sem,
                epoch_seconds: secs,
            }
        })
        .collect();
    let xs: Vec<f64> = points.iter().map(|p| p.value).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean_seconds).collect();
    let max = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(SweepResult {
        variable,
        points,
        r_squared: linear_fit_r2(&xs, &ys),
        max_min_ratio: max / min,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_sem_and_r2() {
        let (m, s) = mean_sem(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample std sqrt(5/3), divided by 2
        assert!((s - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-12);
        assert!((linear_fit_r2(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        let r2 = linear_fit_r2(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
        assert!((r2 - 0.64).abs() < 1e-12);
    }

    #[test]
    fn short_sweeps_are_rejected() {
        let spec = ScalingSpec::default();
        assert!(matches!(run_sweep(SweepVariable::Tr, &[0.5], &spec), Err(Error::Config(_))));
        assert!(matches!(
            run_sweep(SweepVariable::HiddenDim, &[10.0, 20.0], &spec),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tiny_sweep_runs() {
        let spec = ScalingSpec {
            base: TrainConfig {
                sequence_length: 100,
                batch_size: 2,
                batches_per_epoch: 2,
                ..Default::default()
            },
            tr: 3.0,
            length: 1000,
            ..Default::default()
        };
        let res = run_sweep(SweepVariable::ObsDim, &[3.0, 5.0, 8.0], &spec).unwrap();
        assert_eq!(res.points.len(), 3);
        assert!(res.points.iter().all(|p| p.epoch_seconds.len() == 10 && p.mean_seconds > 0.0));
        assert!(res.to_table().starts_with("N\tmean_seconds"));
    }
}
