//! Embedding head: dense(H, ReLU) -> batch norm -> dropout -> dense(M).
//!
//! Forward and backward passes are written out by hand. Batch norm uses the
//! biased batch variance both for normalization and for the running
//! estimate.

mod checkpoint;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};

pub const BN_EPS: f64 = 1e-5;
pub const DEFAULT_HIDDEN: usize = 1024;
pub const DEFAULT_EMBEDDING: usize = 128;
pub const DEFAULT_DROPOUT: f64 = 0.3;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub dropout_rate: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: DEFAULT_HIDDEN,
            embedding_dim: DEFAULT_EMBEDDING,
            dropout_rate: DEFAULT_DROPOUT,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.embedding_dim == 0 {
            return Err(Error::InvalidConfig(
                "model dimensions must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(
                "dropout rate must lie in [0, 1)".into(),
            ));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::InvalidConfig(
                "batch-norm momentum must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub bn_momentum: f64,
    pub dropout_rate: f64,
    pub mode: Mode,
}

/// Intermediate values of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Array2<f64>,
    pre_activation: Array2<f64>,
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
    /// Already scaled by `1 / (1 - p)`; `None` when dropout is off.
    mask: Option<Array2<f64>>,
    dropped: Array2<f64>,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
}

impl ForwardCache {
    pub fn mask(&self) -> Option<&Array2<f64>> {
        self.mask.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Gradients {
    /// Flat views in the same order as [`Model::parameters_mut`].
    pub fn as_slices(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.gamma.as_slice().expect("standard layout"),
            self.beta.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.as_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    Model::new(config, seed)
}

fn check_finite(x: ArrayView2<'_, f64>, what: &'static str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

impl Model {
    /// He-normal weights (variance `2 / fan_in`), zero biases, identity batch norm.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (f, h, m) = (config.input_dim, config.hidden_dim, config.embedding_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |rows: usize, cols: usize| {
            let std = (2.0 / rows as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || {
                std * rng.sample::<f64, _>(StandardNormal)
            })
        };
        let w1 = he(f, h);
        let w2 = he(h, m);
        Ok(Self {
            w1,
            b1: Array1::zeros(h),
            gamma: Array1::ones(h),
            beta: Array1::zeros(h),
            running_mean: Array1::zeros(h),
            running_var: Array1::ones(h),
            w2,
            b2: Array1::zeros(m),
            bn_momentum: config.bn_momentum,
            dropout_rate: config.dropout_rate,
            mode: Mode::Eval,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn embedding_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.input_dim(),
            hidden_dim: self.hidden_dim(),
            embedding_dim: self.embedding_dim(),
            dropout_rate: self.dropout_rate,
            bn_momentum: self.bn_momentum,
        }
    }

    pub fn train(&mut self) {
        self.mode = Mode::Train;
    }

    pub fn eval(&mut self) {
        self.mode = Mode::Eval;
    }

    pub fn num_parameters(&self) -> usize {
        self.w1.len()
            + self.b1.len()
            + self.gamma.len()
            + self.beta.len()
            + self.w2.len()
            + self.b2.len()
    }

    /// Trainable tensors as flat mutable slices: w1, b1, gamma, beta, w2, b2.
    pub fn parameters_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.gamma.as_slice_mut().expect("standard layout"),
            self.beta.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn is_finite(&self) -> bool {
        [
            &self.b1,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            &self.b2,
        ]
        .iter()
        .all(|v| v.iter().all(|x| x.is_finite()))
            && self.w1.iter().chain(self.w2.iter()).all(|x| x.is_finite())
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        check_finite(x, "model input")
    }

    /// Inverted-dropout mask for `rows` examples, `None` when dropout is off.
    pub fn draw_dropout_mask<R: Rng + ?Sized>(
        &self,
        rows: usize,
        rng: &mut R,
    ) -> Option<Array2<f64>> {
        if self.dropout_rate == 0.0 {
            return None;
        }
        let keep = 1.0 - self.dropout_rate;
        let scale = 1.0 / keep;
        Some(Array2::from_shape_simple_fn(
            (rows, self.hidden_dim()),
            || {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    0.0
                }
            },
        ))
    }

    /// Forward pass in the current mode. TRAIN mode draws a dropout mask from
    /// `rng` and updates the running batch-norm statistics.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        x: ArrayView2<'_, f64>,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Option<ForwardCache>)> {
        match self.mode {
            Mode::Eval => Ok((self.embed(x)?, None)),
            Mode::Train => {
                let mask = self.draw_dropout_mask(x.nrows(), rng);
                let (e, cache) = self.forward_with_mask(x, mask)?;
                Ok((e, Some(cache)))
            }
        }
    }

    /// Training forward with a caller-supplied mask; updates running stats.
    pub fn forward_with_mask(
        &mut self,
        x: ArrayView2<'_, f64>,
        mask: Option<Array2<f64>>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let (e, cache) = self.forward_train(x, mask)?;
        self.update_running_stats(&cache);
        Ok((e, cache))
    }

    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        let mom = self.bn_momentum;
        self.running_mean = &self.running_mean * (1.0 - mom) + &cache.batch_mean * mom;
        self.running_var = &self.running_var * (1.0 - mom) + &cache.batch_var * mom;
    }

    /// Training-mode forward using batch statistics. Leaves the model untouched.
    pub fn forward_train(
        &self,
        x: ArrayView2<'_, f64>,
        mask: Option<Array2<f64>>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(x)?;
        let n = x.nrows();
        if n < 2 {
            return Err(Error::Shape(
                "training forward needs at least two rows".into(),
            ));
        }
        if let Some(m) = &mask {
            if m.dim() != (n, self.hidden_dim()) {
                return Err(Error::Shape("dropout mask shape".into()));
            }
        }
        let pre = x.dot(&self.w1) + &self.b1;
        let act = pre.mapv(|v| v.max(0.0));
        let mean = act.mean_axis(Axis(0)).expect("n >= 2");
        let centered = &act - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("n >= 2");
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let normalized = &centered * &inv_std;
        let bn = &normalized * &self.gamma + &self.beta;
        let dropped = match &mask {
            Some(m) => bn * m,
            None => bn,
        };
        let e = dropped.dot(&self.w2) + &self.b2;
        check_finite(e.view(), "embedding")?;
        Ok((
            e,
            ForwardCache {
                x: x.to_owned(),
                pre_activation: pre,
                normalized,
                inv_std,
                mask,
                dropped,
                batch_mean: mean,
                batch_var: var,
            },
        ))
    }

    /// Evaluation-mode forward: running statistics, no dropout. Pure.
    pub fn embed(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let scale = (&self.running_var + BN_EPS).mapv(|v| 1.0 / v.sqrt()) * &self.gamma;
        let act = (x.dot(&self.w1) + &self.b1).mapv(|v| v.max(0.0));
        let bn = (act - &self.running_mean) * &scale + &self.beta;
        let e = bn.dot(&self.w2) + &self.b2;
        check_finite(e.view(), "embedding")?;
        Ok(e)
    }

    /// Gradients of `sum_i <dE_i, E_i>` for the forward pass recorded in `cache`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_e: ArrayView2<'_, f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        let n = cache.x.nrows();
        if d_e.dim() != (n, self.embedding_dim()) {
            return Err(Error::Shape(format!(
                "upstream gradient is {:?}, expected ({n}, {})",
                d_e.dim(),
                self.embedding_dim()
            )));
        }
        if cache.pre_activation.ncols() != self.hidden_dim() {
            return Err(Error::Shape("cache does not belong to this model".into()));
        }
        let w2 = cache.dropped.t().dot(&d_e);
        let b2 = d_e.sum_axis(Axis(0));
        let mut d_bn = d_e.dot(&self.w2.t());
        if let Some(m) = &cache.mask {
            d_bn *= m;
        }
        let gamma = (&d_bn * &cache.normalized).sum_axis(Axis(0));
        let beta = d_bn.sum_axis(Axis(0));

        // Batch-norm backward with the batch mean and variance treated as
        // functions of the inputs.
        let d_norm = &d_bn * &self.gamma;
        let sum_d = d_norm.sum_axis(Axis(0));
        let sum_dx = (&d_norm * &cache.normalized).sum_axis(Axis(0));
        let nf = n as f64;
        let mut d_act = d_norm * nf - &sum_d - &(&cache.normalized * &sum_dx);
        d_act *= &(&cache.inv_std / nf);

        let mut d_pre = d_act;
        d_pre.zip_mut_with(&cache.pre_activation, |g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        let w1 = cache.x.t().dot(&d_pre);
        let b1 = d_pre.sum_axis(Axis(0));
        let d_x = d_pre.dot(&self.w1.t());
        Ok((
            Gradients {
                w1,
                b1,
                gamma,
                beta,
                w2,
                b2,
            },
            d_x,
        ))
    }
}
