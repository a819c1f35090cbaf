//! Shallow piecewise-linear recurrent latent dynamics.
//!
//! Two step maps are provided:
//!
//! ```text
//! shallow:          z' = A.z + W1 relu(W2 z + h2) + h1
//! clipped shallow:  z' = A.z + W1 [relu(W2 z + h2) - relu(W2 z)] + h1
//! ```
//!
//! `A` is diagonal and kept as a vector. The clipped map stays bounded when
//! every `|A_i| < 1`, because the bracketed term is bounded by `|h2|`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Shallow,
    ClippedShallow,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shPLRNN" | "shallow" | "Shallow" => Ok(Variant::Shallow),
            "cshPLRNN" | "clipped" | "ClippedShallow" => Ok(Variant::ClippedShallow),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

/// Learnable weights of the latent model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Diagonal autoregressive weights, length M.
    pub a: Vec<f64>,
    /// M x L.
    pub w1: Matrix,
    /// L x M.
    pub w2: Matrix,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub variant: Variant,
}

/// A generated (or forced) latent state sequence, one state per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory {
    pub states: Matrix,
    /// Sampling interval of one model step; only used to convert rates.
    pub dt_model: f64,
}

/// Scratch buffers for allocation-free stepping.
#[derive(Clone, Debug)]
pub(crate) struct StepScratch {
    pub u: Vec<f64>,
    pub act: Vec<f64>,
}

impl StepScratch {
    pub fn new(hidden: usize) -> Self {
        Self {
            u: vec![0.0; hidden],
            act: vec![0.0; hidden],
        }
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

impl ModelParams {
    pub fn new(
        a: Vec<f64>,
        w1: Matrix,
        w2: Matrix,
        h1: Vec<f64>,
        h2: Vec<f64>,
        variant: Variant,
    ) -> Result<Self> {
        let m = a.len();
        let l = h2.len();
        if m == 0 || l == 0 {
            return Err(Error::InvalidArgument(
                "latent and hidden dimensions must be at least 1".into(),
            ));
        }
        w1.check_shape(m, l, "W1")?;
        w2.check_shape(l, m, "W2")?;
        if h1.len() != m {
            return dim_err(format!("h1 has length {}, expected {m}", h1.len()));
        }
        let p = Self {
            a,
            w1,
            w2,
            h1,
            h2,
            variant,
        };
        if !p.is_finite() {
            return Err(Error::InvalidArgument("parameters must be finite".into()));
        }
        Ok(p)
    }

    /// Random initialization: `A_i ~ U(0.5, 0.9)`, weights Gaussian with
    /// standard deviation `1/sqrt(fan_in)`, biases zero.
    pub fn init_random<R: Rng + ?Sized>(
        latent_dim: usize,
        hidden_dim: usize,
        variant: Variant,
        rng: &mut R,
    ) -> Result<Self> {
        if latent_dim == 0 || hidden_dim == 0 {
            return Err(Error::InvalidArgument(
                "latent and hidden dimensions must be at least 1".into(),
            ));
        }
        let a: Vec<f64> = (0..latent_dim).map(|_| rng.random_range(0.5..0.9)).collect();
        let n1 = Normal::new(0.0, 1.0 / (hidden_dim as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, 1.0 / (latent_dim as f64).sqrt()).unwrap();
        let mut w1 = Matrix::from_fn(latent_dim, hidden_dim, |_, _| n1.sample(rng));
        let w2 = Matrix::from_fn(hidden_dim, latent_dim, |_, _| n2.sample(rng));
        // Shrink W1 until the map is non-expansive (Lipschitz bound
        // max A + |W1|_F |W2|_F <= 1), so that initial rollouts stay bounded.
        let a_max = a.iter().cloned().fold(0.0, f64::max);
        let coupling = (w1.frobenius_sq() * w2.frobenius_sq()).sqrt();
        if coupling > 1.0 - a_max {
            w1.scale((1.0 - a_max) / coupling);
        }
        Self::new(
            a,
            w1,
            w2,
            vec![0.0; latent_dim],
            vec![0.0; hidden_dim],
            variant,
        )
    }

    #[inline]
    pub fn latent_dim(&self) -> usize {
        self.a.len()
    }

    #[inline]
    pub fn hidden_dim(&self) -> usize {
        self.h2.len()
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(&self.h1).chain(&self.h2).all(|x| x.is_finite())
            && self.w1.is_all_finite()
            && self.w2.is_all_finite()
    }

    /// Number of scalar parameters.
    pub fn len(&self) -> usize {
        let (m, l) = (self.latent_dim(), self.hidden_dim());
        m + 2 * m * l + m + l
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flattened view in the order `a, w1, w2, h1, h2`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.a);
        v.extend_from_slice(self.w1.as_slice());
        v.extend_from_slice(self.w2.as_slice());
        v.extend_from_slice(&self.h1);
        v.extend_from_slice(&self.h2);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len());
        let (m, l) = (self.latent_dim(), self.hidden_dim());
        let mut off = 0;
        let mut take = |n: usize| {
            let s = &flat[off..off + n];
            off += n;
            s
        };
        self.a.copy_from_slice(take(m));
        self.w1.as_mut_slice().copy_from_slice(take(m * l));
        self.w2.as_mut_slice().copy_from_slice(take(l * m));
        self.h1.copy_from_slice(take(m));
        self.h2.copy_from_slice(take(l));
    }

    fn check_state(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.latent_dim() {
            return dim_err(format!(
                "state of length {} for a model with M = {}",
                z.len(),
                self.latent_dim()
            ));
        }
        Ok(())
    }

    /// Hidden-layer activation difference written to `scratch.act`.
    /// `scratch.u` keeps the pre-activation `W2 z`.
    #[inline]
    pub(crate) fn hidden_into(&self, z: &[f64], scratch: &mut StepScratch) {
        self.w2.mul_vec_into(z, &mut scratch.u);
        match self.variant {
            Variant::Shallow => {
                for ((o, &u), &h) in scratch.act.iter_mut().zip(&scratch.u).zip(&self.h2) {
                    *o = relu(u + h);
                }
            }
            Variant::ClippedShallow => {
                for ((o, &u), &h) in scratch.act.iter_mut().zip(&scratch.u).zip(&self.h2) {
                    *o = relu(u + h) - relu(u);
                }
            }
        }
    }

    #[inline]
    pub(crate) fn step_into(&self, z: &[f64], out: &mut [f64], scratch: &mut StepScratch) {
        self.hidden_into(z, scratch);
        self.w1.mul_vec_into(&scratch.act, out);
        for i in 0..out.len() {
            out[i] += self.a[i] * z[i] + self.h1[i];
        }
    }

    /// One application of the step map.
    pub fn step(&self, z_prev: &[f64]) -> Result<Vec<f64>> {
        self.check_state(z_prev)?;
        let mut out = vec![0.0; self.latent_dim()];
        let mut scratch = StepScratch::new(self.hidden_dim());
        self.step_into(z_prev, &mut out, &mut scratch);
        Ok(out)
    }

    /// Analytic Jacobian of the step map at `z`. The ReLU derivative at
    /// exactly zero is taken as 0.
    pub fn jacobian(&self, z: &[f64]) -> Result<Matrix> {
        self.check_state(z)?;
        let mut j = Matrix::zeros(self.latent_dim(), self.latent_dim());
        let mut u = vec![0.0; self.hidden_dim()];
        let mut gate = vec![0.0; self.hidden_dim()];
        self.jacobian_into(z, &mut j, &mut u, &mut gate);
        Ok(j)
    }

    pub(crate) fn jacobian_into(&self, z: &[f64], j: &mut Matrix, u: &mut [f64], gate: &mut [f64]) {
        let m = self.latent_dim();
        self.w2.mul_vec_into(z, u);
        for ((g, &ul), &h) in gate.iter_mut().zip(u.iter()).zip(&self.h2) {
            let on_bias = if ul + h > 0.0 { 1.0 } else { 0.0 };
            let on_plain = if ul > 0.0 { 1.0 } else { 0.0 };
            *g = match self.variant {
                Variant::Shallow => on_bias,
                Variant::ClippedShallow => on_bias - on_plain,
            };
        }
        j.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
        for (l, &g) in gate.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let w2row = self.w2.row(l);
            for i in 0..m {
                let c = self.w1[(i, l)] * g;
                if c == 0.0 {
                    continue;
                }
                for (k, &w) in w2row.iter().enumerate() {
                    j[(i, k)] += c * w;
                }
            }
        }
        for i in 0..m {
            j[(i, i)] += self.a[i];
        }
    }

    /// Autonomous rollout of `t_len` states starting with `z0` as row 0.
    pub fn generate(&self, z0: &[f64], t_len: usize) -> Result<LatentTrajectory> {
        self.generate_with_dt(z0, t_len, 1.0)
    }

    pub fn generate_with_dt(&self, z0: &[f64], t_len: usize, dt_model: f64) -> Result<LatentTrajectory> {
        self.check_state(z0)?;
        if t_len == 0 {
            return Err(Error::InvalidArgument("trajectory length must be >= 1".into()));
        }
        if z0.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step: 0 });
        }
        let m = self.latent_dim();
        let mut states = Matrix::zeros(t_len, m);
        states.row_mut(0).copy_from_slice(z0);
        let mut scratch = StepScratch::new(self.hidden_dim());
        let mut next = vec![0.0; m];
        for t in 1..t_len {
            self.step_into(states.row(t - 1), &mut next, &mut scratch);
            if next.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence { step: t });
            }
            states.row_mut(t).copy_from_slice(&next);
        }
        Ok(LatentTrajectory { states, dt_model })
    }
}
