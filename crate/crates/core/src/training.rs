//! Class-balanced minibatch training of a single head on one episode.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::features::{FeatureDataset, FeatureMatrix, FeatureSequence};
use crate::heads::{accumulate_gradients, head_backward, head_forward, init_params, Gradients, HeadKind, HeadModel};
use crate::kv;

/// Probabilities below this are clamped before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::invalid(format!("unknown optimizer `{s}`, expected sgd or adam"))),
        }
    }
}

impl OptimizerKind {
    fn name(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// SGD momentum.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Fraction of each class held out for testing.
    pub split_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            split_fraction: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.steps < 1 {
            return bad("steps must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return bad("momentum, beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad("split_fraction must lie strictly between 0 and 1");
        }
        Ok(())
    }

    /// Applies `key = value` overrides on top of `self`.
    pub fn apply_text(mut self, text: &str) -> Result<Self> {
        for (line, key, value) in kv::parse_pairs(text)? {
            match key.as_str() {
                "steps" => self.steps = kv::parse_value(line, &key, &value)?,
                "batch_size" => self.batch_size = kv::parse_value(line, &key, &value)?,
                "optimizer" => {
                    self.optimizer = value.parse().map_err(|e: Error| Error::Parse {
                        line,
                        message: e.to_string(),
                    })?
                }
                "learning_rate" => self.learning_rate = kv::parse_value(line, &key, &value)?,
                "momentum" => self.momentum = kv::parse_value(line, &key, &value)?,
                "beta1" => self.beta1 = kv::parse_value(line, &key, &value)?,
                "beta2" => self.beta2 = kv::parse_value(line, &key, &value)?,
                "epsilon" => self.epsilon = kv::parse_value(line, &key, &value)?,
                "seed" => self.seed = kv::parse_value(line, &key, &value)?,
                "split_fraction" => self.split_fraction = kv::parse_value(line, &key, &value)?,
                _ => {
                    return Err(Error::Parse {
                        line,
                        message: format!("unknown training key `{key}`"),
                    })
                }
            }
        }
        Ok(self)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let config = Self::default().apply_text(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "optimizer = {}", self.optimizer.name());
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "epsilon = {}", self.epsilon);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "split_fraction = {}", self.split_fraction);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub head: HeadKind,
    pub seed: u64,
    pub steps: usize,
    /// Mean minibatch cross-entropy per step, in nats.
    pub loss_curve: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_scenes: usize,
    pub test_scenes: usize,
}

/// Independent 64-bit seed for a named sub-stream of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_SPLIT: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_SAMPLER: u64 = 3;

/// Scene indices of a train/test partition, each in dataset order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per class, `ceil(fraction * n)` scenes go to the test side (at most
/// `n - 1`, so every class keeps a training scene).
pub fn stratified_split(dataset: &FeatureDataset, fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("split fraction must lie strictly between 0 and 1"));
    }
    let mut by_class = vec![Vec::new(); dataset.num_classes()];
    for (i, s) in dataset.sequences.iter().enumerate() {
        by_class[s.class_id].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut members) in by_class.into_iter().enumerate() {
        let n = members.len();
        if n < 2 {
            return Err(Error::Split {
                class: dataset.labels[class].clone(),
                count: n,
            });
        }
        let n_test = ((fraction * n as f64).ceil() as usize).min(n - 1);
        members.shuffle(&mut rng);
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

/// Oversampling sampler: a class is drawn uniformly, then one of its scenes
/// uniformly with replacement.
#[derive(Debug, Clone)]
pub struct BalancedSampler<'a> {
    dataset: &'a FeatureDataset,
    by_class: Vec<Vec<usize>>,
}

impl<'a> BalancedSampler<'a> {
    pub fn new(dataset: &'a FeatureDataset, indices: &[usize]) -> Result<Self> {
        let mut by_class = vec![Vec::new(); dataset.num_classes()];
        for &i in indices {
            by_class[dataset.sequences[i].class_id].push(i);
        }
        if let Some(empty) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::Sampling(empty));
        }
        Ok(Self { dataset, by_class })
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let class = rng.random_range(0..self.by_class.len());
        let members = &self.by_class[class];
        members[rng.random_range(0..members.len())]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &'a FeatureSequence {
        &self.dataset.sequences[self.sample_index(rng)]
    }
}

pub fn cross_entropy(y: &[f64], target: usize) -> Result<f64> {
    let p = y
        .get(target)
        .ok_or_else(|| Error::invalid(format!("target {target} >= C = {}", y.len())))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// SGD-with-momentum or Adam state over a list of parameter blocks.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: &TrainConfig, block_sizes: &[usize]) -> Self {
        let zeros = || block_sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        Self {
            kind: config.optimizer,
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            step: 0,
            first: zeros(),
            second: match config.optimizer {
                OptimizerKind::Adam => zeros(),
                OptimizerKind::Sgd => Vec::new(),
            },
        }
    }

    pub fn for_model(config: &TrainConfig, model: &HeadModel) -> Self {
        let sizes: Vec<usize> = model.blocks().iter().map(|b| b.len()).collect();
        Self::new(config, &sizes)
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Non-finite gradients abort with a divergence error and
    /// leave parameters untouched.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::invalid("parameter, gradient and state blocks do not conform"));
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence {
                step: self.step as usize,
            });
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, g), vel) in params.into_iter().zip(grads).zip(&mut self.first) {
                    for ((p, g), v) in p.iter_mut().zip(g).zip(vel.iter_mut()) {
                        *v = self.momentum * *v + g;
                        *p -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn optimizer_step(model: &mut HeadModel, grads: &Gradients, optimizer: &mut Optimizer) -> Result<()> {
    optimizer.step(model.blocks_mut(), grads.blocks())
}

/// Trains `kind` on one episode. Fully deterministic given the inputs.
pub fn train(dataset: &FeatureDataset, kind: HeadKind, config: &TrainConfig) -> Result<(HeadModel, TrainReport)> {
    config.validate()?;
    if dataset.num_classes() < 2 {
        return Err(Error::invalid("training needs at least two classes"));
    }
    let split = stratified_split(dataset, config.split_fraction, derive_seed(config.seed, STREAM_SPLIT))?;
    let sampler = BalancedSampler::new(dataset, &split.train)?;
    let mut model = init_params(
        kind,
        dataset.frames,
        dataset.dim,
        dataset.num_classes(),
        derive_seed(config.seed, STREAM_INIT),
    )?;
    let mut optimizer = Optimizer::for_model(config, &model);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_SAMPLER));
    let scale = 1.0 / config.batch_size as f64;

    let mut loss_curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut grads = model.zeros_like();
        let mut loss = 0.0;
        for _ in 0..config.batch_size {
            let seq = sampler.sample(&mut rng);
            let trace = head_forward(&model, &seq.data)?;
            loss += cross_entropy(&trace.output, seq.class_id)?;
            accumulate_gradients(&model, &seq.data, &trace, seq.class_id, &mut grads)?;
        }
        for block in grads.blocks_mut() {
            block.iter_mut().for_each(|g| *g *= scale);
        }
        let loss = loss * scale;
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        optimizer_step(&mut model, &grads, &mut optimizer).map_err(|e| match e {
            Error::Divergence { .. } => Error::Divergence { step },
            other => other,
        })?;
        if !model.is_finite() {
            return Err(Error::Divergence { step });
        }
        loss_curve.push(loss);
    }

    let subset = |idx: &[usize]| idx.iter().map(|&i| &dataset.sequences[i]).collect::<Vec<_>>();
    let report = TrainReport {
        head: kind,
        seed: config.seed,
        steps: config.steps,
        loss_curve,
        train_accuracy: accuracy(&model, subset(&split.train))?,
        test_accuracy: accuracy(&model, subset(&split.test))?,
        train_scenes: split.train.len(),
        test_scenes: split.test.len(),
    };
    Ok((model, report))
}

/// Below this magnitude gradients are compared absolutely.
const GRAD_ABS_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_ABS_FLOOR)
}

/// Largest relative error between `analytic` and central differences of the
/// loss over every parameter of `model`.
pub fn compare_gradients(
    model: &HeadModel,
    features: &FeatureMatrix,
    target: usize,
    analytic: &Gradients,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let loss_at = |m: &HeadModel| -> Result<f64> { cross_entropy(&head_forward(m, features)?.output, target) };
    let mut probe = model.clone();
    let analytic_blocks = analytic.blocks();
    let mut worst = 0.0f64;
    for b in 0..analytic_blocks.len() {
        for i in 0..analytic_blocks[b].len() {
            let original = probe.blocks()[b][i];
            probe.blocks_mut()[b][i] = original + h;
            let up = loss_at(&probe)?;
            probe.blocks_mut()[b][i] = original - h;
            let down = loss_at(&probe)?;
            probe.blocks_mut()[b][i] = original;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic_blocks[b][i], numeric));
        }
    }
    Ok(worst)
}

/// A seeded random instance for gradient checking: random weights, nonzero
/// biases, features in `[-1, 1)` and a random target.
pub fn grad_check_instance(
    kind: HeadKind,
    frames: usize,
    dim: usize,
    classes: usize,
    seed: u64,
) -> Result<(HeadModel, FeatureMatrix, usize)> {
    let mut model = init_params(kind, frames, dim, classes, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 99));
    for block in model.blocks_mut() {
        block.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    }
    let values = (0..frames * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let features = FeatureMatrix::new(frames, dim, values)?;
    let target = rng.random_range(0..classes);
    Ok((model, features, target))
}

/// Max relative error of [`head_backward`] against central differences on
/// a seeded random instance.
pub fn grad_check(kind: HeadKind, frames: usize, dim: usize, classes: usize, seed: u64, h: f64) -> Result<f64> {
    let (model, features, target) = grad_check_instance(kind, frames, dim, classes, seed)?;
    let trace = head_forward(&model, &features)?;
    let analytic = head_backward(&model, &features, &trace, target)?;
    compare_gradients(&model, &features, target, &analytic, h)
}
