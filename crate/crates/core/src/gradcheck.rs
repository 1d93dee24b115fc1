//! Finite-difference audit of the analytic backward passes.
//!
//! Every parameter of every generated model is perturbed by ±h and the
//! central difference of the mean cross-entropy is compared with the
//! gradient from [`Model::backward`].

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{cross_entropy, init_xavier_uniform, Architecture, LayerKind, Model};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-6;
pub const ABS_FLOOR: f64 = 1e-8;
pub const MAX_MLP_PARAMS: usize = 500;

/// Worst disagreement found on one model.
#[derive(Clone, Debug)]
pub struct ModelCheck {
    pub name: String,
    /// Number of partials compared.
    pub parameters: usize,
    pub max_rel_error: f64,
    /// Flat index, analytic and numeric value at the worst coordinate.
    pub worst: (usize, f64, f64),
    /// Coordinates whose error exceeded both the relative and the absolute bound.
    pub failures: usize,
    /// Coordinates where a ±h step changed a ReLU sign or a pooling winner.
    pub kink_crossings: usize,
    /// Fresh samples drawn because an earlier draw had kink crossings.
    pub redraws: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub models: Vec<ModelCheck>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.models.iter().map(|m| m.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.models.iter().all(|m| m.failures == 0)
    }
}

/// Relative error with an absolute floor:
/// `|a−n| / (max(|a|, |n|) + ABS_FLOOR / REL_TOLERANCE)`.
///
/// `relative_error(a, n) < REL_TOLERANCE` is exactly
/// `|a−n| < ABS_FLOOR + REL_TOLERANCE·max(|a|, |n|)`, so partials that are tiny
/// in both computations are judged by the absolute bound; their central
/// differences carry rounding noise of order `ε·loss/h ≈ 1e-11` regardless.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + ABS_FLOOR / REL_TOLERANCE)
}

fn random_mlp(rng: &mut impl Rng) -> Architecture {
    loop {
        let d = rng.gen_range(2..=16);
        let h = rng.gen_range(2..=20);
        let k = rng.gen_range(2..=6);
        let arch = Architecture::mlp(d, h, k);
        if d * h + h + h * k + k <= MAX_MLP_PARAMS {
            return arch;
        }
    }
}

/// Small conv stack on 1×8×8 inputs exercising conv, relu, pooling and flatten.
fn random_cnn(rng: &mut impl Rng) -> Architecture {
    let c1 = rng.gen_range(1..=3);
    let c2 = rng.gen_range(1..=3);
    let k = rng.gen_range(2..=4);
    let (kernel, pad) = if rng.gen_bool(0.5) { (3, 1) } else { (5, 2) };
    Architecture {
        name: "cnn".into(),
        input_shape: vec![1, 8, 8],
        classes: k,
        layers: vec![
            LayerKind::Conv { in_channels: 1, out_channels: c1, kernel, pad },
            LayerKind::Relu,
            LayerKind::MaxPool,
            LayerKind::Conv { in_channels: c1, out_channels: c2, kernel: 3, pad: 1 },
            LayerKind::Relu,
            LayerKind::MaxPool,
            LayerKind::Flatten,
            LayerKind::Dense { inputs: c2 * 4, outputs: k },
        ],
    }
}

fn loss_at(model: &Model, x: &Tensor, y: &[usize]) -> Result<(f64, Vec<u64>)> {
    let (logits, pattern) = model.infer_with_pattern(x)?;
    Ok((cross_entropy(&logits, y)?.mean_loss, pattern))
}

/// Checks every partial of `model` on the batch `(x, y)`.
///
/// The loss is only piecewise smooth (ReLU, max pooling). A coordinate whose
/// ±h probes land on a different piece than the base point is counted in
/// `kink_crossings`; its comparison still counts towards the error.
pub fn check_model(model: &mut Model, x: &Tensor, y: &[usize]) -> Result<ModelCheck> {
    let all: Vec<usize> = (0..model.parameter_count()).collect();
    check_coordinates(model, x, y, &all)
}

/// As [`check_model`], restricted to the listed flat parameter indices.
pub fn check_coordinates(model: &mut Model, x: &Tensor, y: &[usize], indices: &[usize]) -> Result<ModelCheck> {
    let logits = model.forward(x)?;
    model.backward(&cross_entropy(&logits, y)?.logit_gradient)?;
    let analytic = model.flatten_gradients();
    let w = model.flatten_parameters();
    let (_, base) = loss_at(model, x, y)?;
    let mut probe = model.clone();
    let mut shifted = w.clone();
    let (mut worst, mut at, mut failures, mut kinks) = (0.0f64, (0, 0.0, 0.0), 0, 0);
    for &i in indices {
        shifted[i] = w[i] + STEP;
        probe.load_flat(&shifted)?;
        let (up, p_up) = loss_at(&probe, x, y)?;
        shifted[i] = w[i] - STEP;
        probe.load_flat(&shifted)?;
        let (down, p_down) = loss_at(&probe, x, y)?;
        shifted[i] = w[i];
        if p_up != base || p_down != base {
            kinks += 1;
        }
        let numeric = (up - down) / (2.0 * STEP);
        let rel = relative_error(analytic[i], numeric);
        if rel > worst {
            worst = rel;
            at = (i, analytic[i], numeric);
        }
        if rel >= REL_TOLERANCE {
            failures += 1;
        }
    }
    Ok(ModelCheck {
        name: model.architecture().name.clone(),
        parameters: indices.len(),
        max_rel_error: worst,
        worst: at,
        failures,
        kink_crossings: kinks,
        redraws: 0,
    })
}

/// Draws a fresh parameter vector and batch for `arch`.
fn draw(arch: &Architecture, rng: &mut ChaCha8Rng) -> Result<(Model, Tensor, Vec<usize>)> {
    let pixel = Uniform::new(-1.0, 1.0);
    let mut model = Model::new(arch.clone())?;
    init_xavier_uniform(&mut model, rng);
    // Xavier leaves biases at zero; randomize them so their partials are exercised off the origin.
    let mut w = model.flatten_parameters();
    for v in w.iter_mut().filter(|v| **v == 0.0) {
        *v = rng.gen_range(-0.1..0.1);
    }
    model.load_flat(&w)?;
    let batch = rng.gen_range(2..=4);
    let mut shape = vec![batch];
    shape.extend_from_slice(&arch.input_shape);
    let len = batch * model.input_len();
    let x = Tensor::new(shape, (0..len).map(|_| pixel.sample(rng)).collect())?;
    let y: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..arch.classes)).collect();
    Ok((model, x, y))
}

/// Most redraws attempted per model before accepting a sample with kink crossings.
pub const MAX_REDRAWS: usize = 10;

/// Generates `count` random models (alternating MLP and CNN) from `seed` and checks each.
///
/// Finite differences are only meaningful where the loss is smooth within ±h.
/// A draw whose probes cross a ReLU or pooling switch is replaced by a fresh
/// draw of parameters and inputs for the same architecture (at most
/// [`MAX_REDRAWS`] times), so that every reported partial is compared at a
/// differentiable point.
pub fn run_suite(seed: u64, count: usize) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut models = Vec::with_capacity(count);
    for i in 0..count {
        let arch = if i % 2 == 0 { random_mlp(&mut rng) } else { random_cnn(&mut rng) };
        let mut redraws = 0;
        let mut check = loop {
            let (mut model, x, y) = draw(&arch, &mut rng)?;
            let check = check_model(&mut model, &x, &y)?;
            if check.kink_crossings == 0 || redraws == MAX_REDRAWS {
                break check;
            }
            redraws += 1;
        };
        check.name = format!("{}#{i}", check.name);
        check.redraws = redraws;
        models.push(check);
    }
    Ok(GradcheckReport { models })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        // gaps just under / over the absolute floor on a vanishing partial
        assert!(relative_error(3e-7, 3e-7 + 0.9e-8) < REL_TOLERANCE);
        assert!(relative_error(3e-7, 3e-7 + 1.1e-8) > REL_TOLERANCE);
        // large partials are judged relatively
        assert!(relative_error(10.0, 10.0 + 9e-6) < REL_TOLERANCE);
        assert!(relative_error(10.0, 10.0 + 2e-5) > REL_TOLERANCE);
    }

    #[test]
    fn generated_mlps_respect_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let m = Model::new(random_mlp(&mut rng)).unwrap();
            assert!(m.parameter_count() <= MAX_MLP_PARAMS);
        }
    }

    #[test]
    fn sign_flipped_gradient_is_rejected() {
        let mut m = Model::new(Architecture::mlp(3, 4, 2)).unwrap();
        init_xavier_uniform(&mut m, &mut ChaCha8Rng::seed_from_u64(1));
        let x = Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.9, 0.5, 0.1, -0.7]).unwrap();
        let y = [0, 1];
        let logits = m.forward(&x).unwrap();
        m.backward(&cross_entropy(&logits, &y).unwrap().logit_gradient).unwrap();
        let g = m.flatten_gradients();
        let i = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
        let w = m.flatten_parameters();
        let mut probe = m.clone();
        let mut at = |delta: f64| {
            let mut v = w.clone();
            v[i] += delta;
            probe.load_flat(&v).unwrap();
            loss_at(&probe, &x, &y).unwrap().0
        };
        let numeric = (at(STEP) - at(-STEP)) / (2.0 * STEP);
        assert!(relative_error(g[i], numeric) < REL_TOLERANCE);
        assert!(relative_error(-g[i], numeric) > 1.0);
        assert!(relative_error(1.01 * g[i], numeric) > REL_TOLERANCE);
    }

    #[test]
    fn small_suite_passes() {
        let r = run_suite(3, 4).unwrap();
        assert!(r.passed(), "{:?}", r.models);
    }

    #[test]
    fn full_size_cnn_sampled_coordinates() {
        // the paper's conv stack is too large to probe exhaustively in a unit
        // test; check the first and last entry of every tensor plus a random sample
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let arch = Architecture::cnn(1, 8, 3);
        let (mut model, x, y) = draw(&arch, &mut rng).unwrap();
        let mut indices = Vec::new();
        let mut offset = 0;
        for p in model.parameters() {
            indices.extend([offset, offset + p.len() - 1]);
            offset += p.len();
        }
        indices.extend((0..200).map(|_| rng.gen_range(0..offset)));
        let c = check_coordinates(&mut model, &x, &y, &indices).unwrap();
        assert_eq!(c.kink_crossings, 0, "{c:?}");
        assert_eq!(c.failures, 0, "{c:?}");
    }

    #[test]
    fn kink_crossing_is_detected() {
        // hidden unit pre-activation sits exactly at zero: w·x + b = 0.5·1 − 0.5
        let mut m = Model::new(Architecture::mlp(1, 1, 2)).unwrap();
        m.load_flat(&[0.5, -0.5, 1.0, -1.0, 0.0, 0.0]).unwrap();
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let c = check_model(&mut m, &x, &[0]).unwrap();
        assert!(c.kink_crossings >= 2, "{c:?}");
    }
}
