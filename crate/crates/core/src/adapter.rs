//! Two-layer adapter network mapping expression coefficients to blend weights.
//!
//! `Linear(64→H) → activation → Linear(H→K) → optional clamp to [0, 1]`,
//! trained with mean squared error and Adam, evaluated with mean absolute
//! error over channels and samples. Gradients are derived by hand.
//!
//! Batched passes keep samples in columns so every product is a plain
//! column-major matrix multiply.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{GeneratedDataset, SamplePair};
use crate::error::{check_len, Error, Result};
use crate::io;
use crate::model::{row_major, ExpressionParams, EXPR_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
}

impl Activation {
    pub const LEAKY_DEFAULT: Activation = Activation::LeakyRelu { slope: 0.01 };

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
        }
    }

    /// Derivative, with the subgradient at 0 taken from the negative side.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Activation::Relu => "ReLU".into(),
            Activation::LeakyRelu { .. } => "LeakyReLU".into(),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "relu" => Ok(Activation::Relu),
            "leakyrelu" | "leaky" => Ok(Activation::LEAKY_DEFAULT),
            _ => Err(Error::Invalid(format!(
                "unknown activation {s:?} (relu, leaky-relu)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub clamp_output: bool,
}

impl AdapterConfig {
    pub const DEFAULT_HIDDEN: usize = 256;

    pub fn new(
        out_dim: usize,
        hidden_dim: usize,
        activation: Activation,
        clamp_output: bool,
    ) -> Self {
        Self {
            in_dim: EXPR_DIM,
            hidden_dim,
            out_dim,
            activation,
            clamp_output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_len("adapter input width", EXPR_DIM, self.in_dim)?;
        if self.hidden_dim == 0 || self.out_dim == 0 {
            return Err(Error::InvalidSize(
                "adapter dimensions must be positive".into(),
            ));
        }
        if let Activation::LeakyRelu { slope } = self.activation {
            if !slope.is_finite() {
                return Err(Error::Invalid("leaky slope must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let clamp = if self.clamp_output { "+Clamp" } else { "" };
        format!("{}{}/{}", self.activation.label(), clamp, self.hidden_dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 200,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid("learning_rate must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Invalid(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if !((0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0)
        {
            return Err(Error::Invalid("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_mse: Vec<f64>,
    pub val_mae: Vec<f64>,
    /// Zero-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub test_mae: f64,
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterNet {
    pub config: AdapterConfig,
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

/// Gradient of the loss with respect to every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl Gradients {
    fn zeros_like(net: &AdapterNet) -> Self {
        Self {
            w1: DMatrix::zeros(net.w1.nrows(), net.w1.ncols()),
            b1: DVector::zeros(net.b1.len()),
            w2: DMatrix::zeros(net.w2.nrows(), net.w2.ncols()),
            b2: DVector::zeros(net.b2.len()),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.w1
            .amax()
            .max(self.b1.amax())
            .max(self.w2.amax())
            .max(self.b2.amax())
    }
}

impl AdapterNet {
    pub fn zeros(config: AdapterConfig) -> Result<Self> {
        config.validate()?;
        let (i, h, k) = (config.in_dim, config.hidden_dim, config.out_dim);
        Ok(Self {
            config,
            w1: DMatrix::zeros(h, i),
            b1: DVector::zeros(h),
            w2: DMatrix::zeros(k, h),
            b2: DVector::zeros(k),
        })
    }

    /// Uniform in ±1/√fan_in for weights and biases of each layer.
    pub fn init(config: AdapterConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(config, &mut rng)
    }

    fn init_with(config: AdapterConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let a1 = 1.0 / (config.in_dim as f64).sqrt();
        let a2 = 1.0 / (config.hidden_dim as f64).sqrt();
        net.w1
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-a1..a1));
        net.b1
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-a1..a1));
        net.w2
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-a2..a2));
        net.b2
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-a2..a2));
        Ok(net)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        check_len("W1 rows", c.hidden_dim, self.w1.nrows())?;
        check_len("W1 columns", c.in_dim, self.w1.ncols())?;
        check_len("b1", c.hidden_dim, self.b1.len())?;
        check_len("W2 rows", c.out_dim, self.w2.nrows())?;
        check_len("W2 columns", c.hidden_dim, self.w2.ncols())?;
        check_len("b2", c.out_dim, self.b2.len())
    }

    pub fn forward(&self, gamma: &ExpressionParams) -> Vec<f64> {
        let x = DMatrix::from_column_slice(EXPR_DIM, 1, gamma.as_slice());
        self.forward_batch(&x).output.as_slice().to_vec()
    }

    /// Output channels for every column of `x` (64 × B).
    pub fn predict_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_batch(x).output
    }

    fn forward_batch(&self, x: &DMatrix<f64>) -> Cache {
        let act = self.config.activation;
        let mut z1 = &self.w1 * x;
        for mut col in z1.column_iter_mut() {
            col += &self.b1;
        }
        let a1 = z1.map(|z| act.apply(z));
        let mut z2 = &self.w2 * &a1;
        for mut col in z2.column_iter_mut() {
            col += &self.b2;
        }
        let output = if self.config.clamp_output {
            z2.map(|z| z.clamp(0.0, 1.0))
        } else {
            z2.clone()
        };
        Cache { z1, a1, z2, output }
    }

    /// Gradients of the batch loss `Σ_b loss_mse(out_b, t_b) / B`.
    fn backward_batch(&self, x: &DMatrix<f64>, target: &DMatrix<f64>) -> (f64, Gradients) {
        let cache = self.forward_batch(x);
        let (k, b) = (target.nrows(), target.ncols());
        let norm = 1.0 / (k * b) as f64;
        let diff = &cache.output - target;
        let loss = diff.norm_squared() * norm;

        let clamp = self.config.clamp_output;
        let dz2 = diff.zip_map(&cache.z2, |d, z| {
            let pass = !clamp || (z > 0.0 && z < 1.0);
            if pass {
                2.0 * d * norm
            } else {
                0.0
            }
        });
        let act = self.config.activation;
        let da1 = self.w2.transpose() * &dz2;
        let dz1 = da1.zip_map(&cache.z1, |d, z| d * act.derivative(z));

        let grads = Gradients {
            w2: &dz2 * cache.a1.transpose(),
            b2: dz2.column_sum(),
            w1: &dz1 * x.transpose(),
            b1: dz1.column_sum(),
        };
        (loss, grads)
    }

    /// Exact gradient of `loss_mse(forward(γ), target)`.
    pub fn backward(&self, gamma: &ExpressionParams, target: &[f64]) -> Result<Gradients> {
        check_len("target", self.config.out_dim, target.len())?;
        let x = DMatrix::from_column_slice(EXPR_DIM, 1, gamma.as_slice());
        let t = DMatrix::from_column_slice(target.len(), 1, target);
        Ok(self.backward_batch(&x, &t).1)
    }
}

struct Cache {
    z1: DMatrix<f64>,
    a1: DMatrix<f64>,
    z2: DMatrix<f64>,
    output: DMatrix<f64>,
}

/// Mean over channels of squared differences.
pub fn loss_mse(predicted: &[f64], target: &[f64]) -> Result<f64> {
    check_len("predicted channels", target.len(), predicted.len())?;
    if target.is_empty() {
        return Err(Error::InvalidSize("loss over zero channels".into()));
    }
    Ok(predicted
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / target.len() as f64)
}

/// Stacked columns of a sample list.
pub struct Batch {
    pub x: DMatrix<f64>,
    pub t: DMatrix<f64>,
}

impl Batch {
    pub fn from_pairs(pairs: &[SamplePair], k: usize) -> Result<Self> {
        let mut x = DMatrix::zeros(EXPR_DIM, pairs.len());
        let mut t = DMatrix::zeros(k, pairs.len());
        for (j, p) in pairs.iter().enumerate() {
            check_len("sample channels", k, p.alpha.len())?;
            x.column_mut(j).copy_from_slice(p.gamma.as_slice());
            t.column_mut(j).copy_from_slice(p.alpha.as_slice());
        }
        Ok(Self { x, t })
    }

    fn gather(&self, idx: &[usize], x: &mut DMatrix<f64>, t: &mut DMatrix<f64>) {
        for (j, &i) in idx.iter().enumerate() {
            x.column_mut(j).copy_from(&self.x.column(i));
            t.column_mut(j).copy_from(&self.t.column(i));
        }
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }
}

/// Per-input mean and standard deviation of the columns of `x`.
struct InputScaling {
    mean: DVector<f64>,
    std: DVector<f64>,
}

impl InputScaling {
    fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.ncols() as f64;
        let mean = x.column_mean();
        let mut var = DVector::zeros(x.nrows());
        for col in x.column_iter() {
            var += (col - &mean).map(|d| d * d);
        }
        let std = (var / n).map(f64::sqrt);
        let floor = 1e-12 * std.amax().max(f64::MIN_POSITIVE);
        let std = std.map(|s| if s > floor { s } else { 1.0 });
        Self { mean, std }
    }

    fn apply(&self, x: &mut DMatrix<f64>) {
        for mut col in x.column_iter_mut() {
            col -= &self.mean;
            col.component_div_assign(&self.std);
        }
    }

    /// Rewrites a net that expects scaled inputs into one taking raw inputs.
    fn fold(&self, net: &mut AdapterNet) {
        for (j, mut col) in net.w1.column_iter_mut().enumerate() {
            col /= self.std[j];
        }
        net.b1 -= &net.w1 * &self.mean;
    }

    /// Inverse of [`InputScaling::fold`].
    fn unfold(&self, net: &mut AdapterNet) {
        net.b1 += &net.w1 * &self.mean;
        for (j, mut col) in net.w1.column_iter_mut().enumerate() {
            col *= self.std[j];
        }
    }
}

fn batch_mae(net: &AdapterNet, data: &Batch) -> f64 {
    const CHUNK: usize = 1024;
    let mut total = 0.0;
    let n = data.len();
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        let x = data.x.columns(start, len).into_owned();
        let out = net.predict_batch(&x);
        total += (out - data.t.columns(start, len)).abs().sum();
        start += len;
    }
    total / (n * data.t.nrows()) as f64
}

/// Mean over samples and channels of `|α' − α|`.
pub fn evaluate_mae(net: &AdapterNet, pairs: &[SamplePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidSize("MAE over an empty sample set".into()));
    }
    net.check_shapes()?;
    Ok(batch_mae(
        net,
        &Batch::from_pairs(pairs, net.config.out_dim)?,
    ))
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    fn new(net: &AdapterNet) -> Self {
        Self {
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut AdapterNet, g: &Gradients, c: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let lr = c.learning_rate;
        let update = |w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..w.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * mh / (vh.sqrt() + c.epsilon);
            }
        };
        update(
            net.w1.as_mut_slice(),
            g.w1.as_slice(),
            self.m.w1.as_mut_slice(),
            self.v.w1.as_mut_slice(),
        );
        update(
            net.b1.as_mut_slice(),
            g.b1.as_slice(),
            self.m.b1.as_mut_slice(),
            self.v.b1.as_mut_slice(),
        );
        update(
            net.w2.as_mut_slice(),
            g.w2.as_slice(),
            self.m.w2.as_mut_slice(),
            self.v.w2.as_mut_slice(),
        );
        update(
            net.b2.as_mut_slice(),
            g.b2.as_slice(),
            self.m.b2.as_mut_slice(),
            self.v.b2.as_mut_slice(),
        );
    }
}

/// One pass of shuffled mini-batches; returns the mean batch loss.
fn run_epoch(
    net: &mut AdapterNet,
    adam: &mut Adam,
    data: &Batch,
    order: &mut [usize],
    rng: &mut ChaCha8Rng,
    c: &TrainConfig,
) -> f64 {
    order.shuffle(rng);
    let (mut loss_sum, mut batches) = (0.0, 0);
    let mut xb = DMatrix::zeros(0, 0);
    let mut tb = DMatrix::zeros(0, 0);
    for idx in order.chunks(c.batch_size) {
        if xb.ncols() != idx.len() {
            xb = DMatrix::zeros(data.x.nrows(), idx.len());
            tb = DMatrix::zeros(data.t.nrows(), idx.len());
        }
        data.gather(idx, &mut xb, &mut tb);
        let (loss, grads) = net.backward_batch(&xb, &tb);
        adam.step(net, &grads, c);
        loss_sum += loss;
        batches += 1;
    }
    loss_sum / batches as f64
}

/// Mini-batch Adam from a seeded initialisation. Inputs are standardised with
/// training-split statistics during optimisation and the scaling is folded
/// into the first layer afterwards, so the returned net takes raw γ. It is
/// the epoch checkpoint with the lowest validation MAE.
pub fn train(
    config: AdapterConfig,
    tconfig: &TrainConfig,
    dataset: &GeneratedDataset,
) -> Result<(AdapterNet, TrainReport)> {
    config.validate()?;
    tconfig.validate()?;
    if dataset.train.is_empty() || dataset.val.is_empty() || dataset.test.is_empty() {
        return Err(Error::InvalidSize(
            "training needs nonempty train, val and test splits".into(),
        ));
    }
    if let Some(k) = dataset.k() {
        check_len("dataset channels vs adapter out_dim", config.out_dim, k)?;
    }
    let started = Instant::now();
    let mut train_set = Batch::from_pairs(&dataset.train, config.out_dim)?;
    let mut val_set = Batch::from_pairs(&dataset.val, config.out_dim)?;
    // optimise in standardised input coordinates, fold back at the end
    let scaling = InputScaling::fit(&train_set.x);
    scaling.apply(&mut train_set.x);
    scaling.apply(&mut val_set.x);

    let mut rng = ChaCha8Rng::seed_from_u64(tconfig.seed);
    let mut net = AdapterNet::init_with(config, &mut rng)?;
    let mut adam = Adam::new(&net);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut report = TrainReport {
        train_mse: Vec::with_capacity(tconfig.epochs),
        val_mae: Vec::with_capacity(tconfig.epochs),
        best_epoch: 0,
        test_mae: f64::NAN,
        wall_clock_seconds: 0.0,
    };
    let mut best: Option<(f64, AdapterNet)> = None;
    for epoch in 0..tconfig.epochs {
        let loss = run_epoch(
            &mut net, &mut adam, &train_set, &mut order, &mut rng, tconfig,
        );
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                learning_rate: tconfig.learning_rate,
            });
        }
        let val = batch_mae(&net, &val_set);
        report.train_mse.push(loss);
        report.val_mae.push(val);
        if best.as_ref().is_none_or(|(b, _)| val < *b) {
            report.best_epoch = epoch;
            best = Some((val, net.clone()));
        }
    }
    let mut net = best.map(|(_, n)| n).unwrap_or(net);
    scaling.fold(&mut net);
    report.test_mae = evaluate_mae(&net, &dataset.test)?;
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok((net, report))
}

/// Batch MSE below which targets count as already fitted. Adam rescales
/// gradients by their own magnitude, so it would otherwise amplify rounding
/// noise at an exact fixed point.
const FITTED_MSE: f64 = 1e-24;

/// Continues training `net` on `pairs` for `epochs` with fresh Adam state,
/// in the same standardised coordinates as [`train`]. Returns the final
/// weights and the per-epoch mean batch loss. Stops early, and returns `net`
/// untouched if no epoch ran, once the loss is below rounding level.
pub fn continue_training(
    net: &AdapterNet,
    pairs: &[SamplePair],
    tconfig: &TrainConfig,
    epochs: usize,
) -> Result<(AdapterNet, Vec<f64>)> {
    tconfig.validate()?;
    net.check_shapes()?;
    if pairs.is_empty() {
        return Err(Error::InvalidSize("no training pairs".into()));
    }
    let mut data = Batch::from_pairs(pairs, net.config.out_dim)?;
    let scaling = InputScaling::fit(&data.x);
    scaling.apply(&mut data.x);
    let mut rng = ChaCha8Rng::seed_from_u64(tconfig.seed);
    let mut out = net.clone();
    scaling.unfold(&mut out);
    let initial = (out.predict_batch(&data.x) - &data.t).norm_squared() / data.t.len() as f64;
    if initial <= FITTED_MSE {
        return Ok((net.clone(), Vec::new()));
    }
    let mut adam = Adam::new(&out);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let loss = run_epoch(&mut out, &mut adam, &data, &mut order, &mut rng, tconfig);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                learning_rate: tconfig.learning_rate,
            });
        }
        losses.push(loss);
        if loss <= FITTED_MSE {
            break;
        }
    }
    scaling.fold(&mut out);
    Ok((out, losses))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub config: AdapterConfig,
    pub test_mae: f64,
    pub best_epoch: usize,
    pub wall_clock_seconds: f64,
}

/// The six architecture variants of the published ablation, in its row order.
pub fn reference_grid(out_dim: usize) -> Vec<AdapterConfig> {
    use Activation::Relu;
    let leaky = Activation::LEAKY_DEFAULT;
    vec![
        AdapterConfig::new(out_dim, 256, Relu, false),
        AdapterConfig::new(out_dim, 100, Relu, false),
        AdapterConfig::new(out_dim, 384, Relu, false),
        AdapterConfig::new(out_dim, 256, leaky, false),
        AdapterConfig::new(out_dim, 256, Relu, true),
        AdapterConfig::new(out_dim, 256, leaky, true),
    ]
}

/// MAE values published for [`reference_grid`] on the original assets.
pub const REFERENCE_GRID_MAE: [f64; 6] = [0.09, 0.10, 0.09, 0.09, 0.08, 0.07];

/// Trains every config with the same seed and reports rows sorted by test
/// MAE (ties keep grid order).
pub fn run_ablation_grid(
    dataset: &GeneratedDataset,
    grid: &[AdapterConfig],
    tconfig: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for config in grid {
        let (_, report) = train(*config, tconfig, dataset)?;
        rows.push(AblationRow {
            label: config.label(),
            config: *config,
            test_mae: report.test_mae,
            best_epoch: report.best_epoch,
            wall_clock_seconds: report.wall_clock_seconds,
        });
    }
    rows.sort_by(|a, b| a.test_mae.total_cmp(&b.test_mae));
    Ok(rows)
}

/// Checkpoint file: config, row-major weights, training seed and report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: AdapterConfig,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub report: Option<TrainReport>,
}

impl Checkpoint {
    pub fn new(net: &AdapterNet, seed: Option<u64>, report: Option<TrainReport>) -> Self {
        Self {
            config: net.config,
            w1: row_major(&net.w1),
            b1: net.b1.as_slice().to_vec(),
            w2: row_major(&net.w2),
            b2: net.b2.as_slice().to_vec(),
            seed,
            report,
        }
    }

    pub fn to_net(&self) -> Result<AdapterNet> {
        let c = self.config;
        c.validate()?;
        check_len("w1 entries", c.hidden_dim * c.in_dim, self.w1.len())?;
        check_len("b1", c.hidden_dim, self.b1.len())?;
        check_len("w2 entries", c.out_dim * c.hidden_dim, self.w2.len())?;
        check_len("b2", c.out_dim, self.b2.len())?;
        Ok(AdapterNet {
            config: c,
            w1: DMatrix::from_row_slice(c.hidden_dim, c.in_dim, &self.w1),
            b1: DVector::from_column_slice(&self.b1),
            w2: DMatrix::from_row_slice(c.out_dim, c.hidden_dim, &self.w2),
            b2: DVector::from_column_slice(&self.b2),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Self = io::read_json(path.as_ref())?;
        ck.to_net().map_err(|e| Error::File {
            path: path.as_ref().to_path_buf(),
            source: Box::new(e),
        })?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_json_atomic(path, self)
    }
}
