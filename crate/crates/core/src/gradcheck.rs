//! Central finite-difference checks of the analytic gradients.
//!
//! Each check draws a random instance from `seed`, perturbs every input
//! coordinate by `±FD_STEP` and compares against the analytic gradient with
//! the norm-wise relative error `|a - b| / max(|a|, |b|)`.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{
    batch_hard_loss, full_triplet_loss, modified_batch_hard_loss, LossResult, MarginMode,
};
use crate::model::{Model, ModelConfig};

pub const FD_STEP: f64 = 1e-5;

/// Central differences of `f` at `x`.
pub fn numeric_gradient(
    x: &Array2<f64>,
    step: f64,
    mut f: impl FnMut(&Array2<f64>) -> f64,
) -> Array2<f64> {
    let mut probe = x.clone();
    let mut grad = Array2::zeros(x.raw_dim());
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let up = f(&probe);
        probe[idx] = orig - step;
        let down = f(&probe);
        probe[idx] = orig;
        grad[idx] = (up - down) / (2.0 * step);
    }
    grad
}

pub fn relative_error<'a>(
    a: impl IntoIterator<Item = &'a f64>,
    b: impl IntoIterator<Item = &'a f64>,
) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.into_iter().zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let scale = na.sqrt().max(nb.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn loss_check(
    e: Array2<f64>,
    eval: impl Fn(ArrayView2<'_, f64>) -> Result<LossResult>,
) -> Result<f64> {
    let analytic = eval(e.view())?.grad;
    let numeric = numeric_gradient(&e, FD_STEP, |x| {
        eval(x.view()).map(|r| r.loss).unwrap_or(f64::NAN)
    });
    Ok(relative_error(analytic.iter(), numeric.iter()))
}

/// Full triplet loss, n = 8 rows in 2-D, 3 classes.
pub fn check_full_triplet(seed: u64, mode: MarginMode) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = random_matrix(&mut rng, 8, 2);
    let labels = [0, 0, 0, 1, 1, 1, 2, 2];
    loss_check(e, |x| full_triplet_loss(x, &labels, mode))
}

/// Batch-hard loss on a random P x K batch (P in 2..=5, K in 2..=4).
pub fn check_batch_hard(seed: u64, mode: MarginMode) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(2..=5);
    let k = rng.random_range(2..=4);
    let mut labels: Vec<u64> = (0..p * k).map(|i| (i / k) as u64).collect();
    labels.shuffle(&mut rng);
    let e = random_matrix(&mut rng, p * k, 3);
    loss_check(e, |x| batch_hard_loss(x, &labels, mode))
}

/// Modified batch-hard loss with a random K and P.
pub fn check_modified_batch_hard(seed: u64, mode: MarginMode) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(2..=5);
    let k = rng.random_range(2..=4);
    let e = random_matrix(&mut rng, p * k, 3);
    loss_check(e, |x| modified_batch_hard_loss(x, k, mode))
}

/// Largest relative error over every trainable tensor and the input, for
/// `sum <dE, E>` through a 5 x 6 training-mode batch. With a non-zero
/// `dropout_rate` one mask is drawn and replayed for every evaluation.
pub fn check_model(seed: u64, dropout_rate: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        input_dim: 6,
        hidden_dim: 7,
        embedding_dim: 3,
        dropout_rate,
        bn_momentum: 0.1,
    };
    let mut model = Model::new(&config, seed)?;
    for v in model
        .b1
        .iter_mut()
        .chain(model.beta.iter_mut())
        .chain(model.b2.iter_mut())
    {
        *v = rng.random_range(-0.2..0.2);
    }
    for v in model.gamma.iter_mut() {
        *v = rng.random_range(0.5..1.5);
    }
    let x = random_matrix(&mut rng, 5, 6);
    let upstream = random_matrix(&mut rng, 5, 3);
    let mask = model.draw_dropout_mask(5, &mut rng);

    let objective = |m: &Model, x: &Array2<f64>| -> f64 {
        m.forward_train(x.view(), mask.clone())
            .map(|(e, _)| (&e * &upstream).sum())
            .unwrap_or(f64::NAN)
    };
    let (_, cache) = model.forward_train(x.view(), mask.clone())?;
    let (grads, dx) = model.backward(&cache, upstream.view())?;

    let mut worst = relative_error(
        dx.iter(),
        numeric_gradient(&x, FD_STEP, |p| objective(&model, p)).iter(),
    );

    macro_rules! param {
        ($field:ident, $grad:expr) => {{
            let base = model.$field.clone();
            let as_matrix = base.clone().into_shape_with_order((1, base.len())).unwrap();
            let numeric = numeric_gradient(&as_matrix, FD_STEP, |p| {
                let mut probe = model.clone();
                probe.$field = p.clone().into_shape_with_order(base.raw_dim()).unwrap();
                objective(&probe, &x)
            });
            worst = worst.max(relative_error($grad.iter(), numeric.iter()));
        }};
    }
    param!(w1, grads.w1);
    param!(b1, grads.b1);
    param!(gamma, grads.gamma);
    param!(beta, grads.beta);
    param!(w2, grads.w2);
    param!(b2, grads.b2);
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst < self.tolerance
    }
}

/// Every finite-difference suite over `instances` seeds starting at `seed`.
pub fn run_all(seed: u64, instances: usize) -> Result<Vec<SuiteResult>> {
    type Check = fn(u64) -> Result<f64>;
    let suites: [(&'static str, f64, Check); 5] = [
        ("full_triplet_loss", 1e-4, |s| {
            check_full_triplet(s, MarginMode::Softplus)
        }),
        ("batch_hard_loss", 1e-4, |s| {
            check_batch_hard(s, MarginMode::Softplus)
        }),
        ("modified_batch_hard_loss", 1e-4, |s| {
            check_modified_batch_hard(s, MarginMode::Softplus)
        }),
        ("model_backward", 1e-3, |s| check_model(s, 0.0)),
        ("model_backward_dropout", 1e-3, |s| check_model(s, 0.5)),
    ];
    suites
        .iter()
        .map(|&(name, tolerance, check)| {
            let mut worst: f64 = 0.0;
            for i in 0..instances {
                let err = check(seed + i as u64)?;
                worst = if err.is_nan() {
                    f64::NAN
                } else {
                    worst.max(err)
                };
            }
            Ok(SuiteResult {
                name,
                instances,
                worst,
                tolerance,
            })
        })
        .collect()
}
