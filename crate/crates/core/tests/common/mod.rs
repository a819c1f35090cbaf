#![allow(dead_code)]

use convdsr::training::{sequence_loss, Regularization};
use convdsr::{canonical_hrf, ConvDecoder, DecoderMode, Matrix, ModelParams, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random small loss instance for finite-difference checks.
pub struct GradInstance {
    pub params: ModelParams,
    pub dec: ConvDecoder,
    pub d: Matrix,
    pub x: Matrix,
    pub r: Option<Matrix>,
    pub alpha: f64,
    pub reg: Regularization,
}

pub fn grad_instance(seed: u64) -> GradInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, l, n) = (3, 5, 3);
    let variant = if seed % 2 == 0 { Variant::Shallow } else { Variant::ClippedShallow };
    let mut params = ModelParams::init_random(m, l, variant, &mut rng).unwrap();
    params.h1 = (0..m).map(|_| rng.random_range(-0.5..0.5)).collect();
    params.h2 = (0..l).map(|_| rng.random_range(-0.5..0.5)).collect();
    // keep free rollouts of the plain variant from blowing up over the window
    for w in params.w1.as_mut_slice() {
        *w *= 0.3;
    }
    let tr = if seed % 3 == 0 { 1.2 } else { 3.0 };
    let hrf = canonical_hrf(tr, 32.0).unwrap();
    let s = hrf.tau() + 8;
    let b = Matrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
    let with_nuisance = seed % 4 < 2;
    let j = with_nuisance.then(|| Matrix::from_fn(n, 2, |_, _| rng.random_range(-0.5..0.5)));
    let r = with_nuisance.then(|| Matrix::from_fn(s, 2, |_, _| rng.random_range(-1.0..1.0)));
    let dec = ConvDecoder::new(b, j, hrf, None, DecoderMode::Regressor).unwrap();
    let d = Matrix::from_fn(s, m, |_, _| rng.random_range(-1.0..1.0));
    let mut x = Matrix::from_fn(s, n, |_, _| rng.random_range(-2.0..2.0));
    // a few missing targets
    x[(s - 3, 1)] = f64::NAN;
    for k in 0..n {
        x[(s - 1, k)] = f64::NAN;
    }
    let alpha = [0.0, 0.1, 0.3, 0.6][(seed % 4) as usize];
    let reg = Regularization {
        mar_ratio: if seed % 5 == 0 { 0.0 } else { 0.67 },
        mar_lambda: 0.1,
        lat_reg: 0.01,
        obs_reg: 0.02,
    };
    GradInstance { params, dec, d, x, r, alpha, reg }
}

fn loss_of(inst: &GradInstance, params: &ModelParams, dec: &ConvDecoder) -> f64 {
    sequence_loss(params, dec, &inst.d, &inst.x, inst.r.as_ref(), inst.alpha, &inst.reg)
        .unwrap()
        .loss
}

/// Largest relative deviation between analytic and central-difference
/// gradients over every learnable entry.
pub fn max_gradient_rel_error(inst: &GradInstance) -> f64 {
    let h = 1e-6;
    let lg = sequence_loss(&inst.params, &inst.dec, &inst.d, &inst.x, inst.r.as_ref(), inst.alpha, &inst.reg).unwrap();
    let rel = |g: f64, fd: f64| (g - fd).abs() / g.abs().max(fd.abs()).max(1e-5);
    let mut worst: f64 = 0.0;

    let flat = inst.params.to_flat();
    for k in 0..flat.len() {
        let mut p = inst.params.clone();
        let mut f = flat.clone();
        f[k] += h;
        p.set_flat(&f);
        let up = loss_of(inst, &p, &inst.dec);
        f[k] -= 2.0 * h;
        p.set_flat(&f);
        let down = loss_of(inst, &p, &inst.dec);
        let fd = (up - down) / (2.0 * h);
        worst = worst.max(rel(lg.model[k], fd));
    }
    let b = &inst.dec.b;
    for i in 0..b.rows() {
        for c in 0..b.cols() {
            let mut dec = inst.dec.clone();
            dec.b.as_mut_slice()[i * b.cols() + c] += h;
            let up = loss_of(inst, &inst.params, &dec);
            dec.b.as_mut_slice()[i * b.cols() + c] -= 2.0 * h;
            let down = loss_of(inst, &inst.params, &dec);
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(rel(lg.b[(i, c)], fd));
        }
    }
    if let (Some(j), Some(gj)) = (&inst.dec.j, &lg.j) {
        for k in 0..j.as_slice().len() {
            let mut dec = inst.dec.clone();
            dec.j.as_mut().unwrap().as_mut_slice()[k] += h;
            let up = loss_of(inst, &inst.params, &dec);
            dec.j.as_mut().unwrap().as_mut_slice()[k] -= 2.0 * h;
            let down = loss_of(inst, &inst.params, &dec);
            worst = worst.max(rel(gj.as_slice()[k], (up - down) / (2.0 * h)));
        }
    }
    worst
}
