//! Optimisation loop.
//!
//! Each step: weak- and strong-augment the batch, forward both views,
//! derive pseudo-labels and confidence weights from the weak view (held
//! constant), evaluate `L_b + λ·L_i`, backpropagate, and take one SGD step
//! with momentum and weight decay under the schedule
//! `η_k = η₀ · cos(7πk / 16K)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{feature_std, AugmentPolicy};
use crate::config::TrainConfig;
use crate::dew::entropy;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, LossReport};
use crate::matrix::Matrix;
use crate::metrics::{test_accuracy, EpochMetrics};
use crate::model::{Gradients, ModelParams, Upstream};
use crate::types::{argmax, validate_bag, Bag, BagCollection, Dataset};

/// `η₀ · cos(7πk / 16K)`, defined for `0 ≤ k ≤ K`.
pub fn lr_schedule(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond schedule horizon {total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let phase = 7.0 * std::f64::consts::PI * step as f64 / (16.0 * total_steps as f64);
    Ok(lr0 * phase.cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub buffers: ModelParams,
    pub step: usize,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Self {
            buffers: params.zeros_like(),
            step: 0,
            lr,
        }
    }
}

/// `g' = g + wd·θ; v ← μ·v + g'; θ ← θ − η·v; k ← k + 1` with `η = state.lr`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    weight_decay: f64,
    momentum: f64,
) {
    let mut decayed = grads.clone();
    decayed.zip_apply(params, |g, p| *g += weight_decay * p);
    state.buffers.zip_apply(&decayed, |v, g| *v = momentum * *v + g);
    let lr = state.lr;
    params.zip_apply(&state.buffers, |p, v| *p -= lr * v);
    state.step += 1;
}

/// How per-bag work inside a step is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    /// One worker, reductions in bag order; bit-reproducible.
    #[default]
    Deterministic,
    /// Bags processed concurrently; reduction order is unspecified.
    Parallel,
}

/// Independent random streams, all derived from the config seed.
#[derive(Debug, Clone)]
pub struct RunStreams {
    pub bag_order: ChaCha8Rng,
    pub weak: ChaCha8Rng,
    pub strong: ChaCha8Rng,
}

impl RunStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |id: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        Self {
            bag_order: stream(1),
            weak: stream(2),
            strong: stream(3),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub epoch: usize,
    pub streams: RunStreams,
}

impl RunState {
    pub fn new(config: &TrainConfig, input_dim: usize, classes: usize) -> Result<Self> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_rng.set_stream(0);
        let params = ModelParams::init_with(&mut init_rng, input_dim, &config.hidden_sizes, classes)?;
        let optimizer = OptimizerState::new(&params, config.lr0);
        Ok(Self {
            params,
            optimizer,
            epoch: 0,
            streams: RunStreams::new(config.seed),
        })
    }
}

/// What one step reports besides the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    pub instances: usize,
    /// Weak-view argmax agreeing with the hidden label.
    pub correct_pseudo_labels: usize,
    /// Sum over instances of `H(ŷ^w)/ln C`.
    pub normalized_entropy_sum: f64,
    pub learning_rate: f64,
}

struct BagPart {
    grads: Gradients,
    bag_loss: f64,
    instance_loss_share: f64,
    weight_sum: f64,
    bag_weight_sum: f64,
    instance_weight_sum: f64,
    correct: usize,
    entropy_sum: f64,
}

impl BagPart {
    fn merge(mut self, other: BagPart) -> BagPart {
        self.grads.add_assign(&other.grads);
        self.bag_loss += other.bag_loss;
        self.instance_loss_share += other.instance_loss_share;
        self.weight_sum += other.weight_sum;
        self.bag_weight_sum += other.bag_weight_sum;
        self.instance_weight_sum += other.instance_weight_sum;
        self.correct += other.correct;
        self.entropy_sum += other.entropy_sum;
        self
    }
}

/// Fixed context for running steps over one training set.
pub struct Trainer<'a> {
    config: &'a TrainConfig,
    dataset: &'a Dataset,
    loss: LossConfig,
    weak: AugmentPolicy,
    strong: AugmentPolicy,
    total_steps: usize,
    exec: ExecMode,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig, dataset: &'a Dataset, total_steps: usize, exec: ExecMode) -> Result<Self> {
        config.validate()?;
        let scale = feature_std(dataset.features());
        let weak = AugmentPolicy::weak(config.weak_noise_sigma)?.with_feature_scale(scale.clone());
        let strong = AugmentPolicy::strong(config.strong_noise_sigma, config.strong_dropout_rate)?
            .with_feature_scale(scale);
        Ok(Self {
            config,
            dataset,
            loss: config.loss_config(),
            weak,
            strong,
            total_steps,
            exec,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    fn bag_part(&self, params: &ModelParams, bag: &Bag, xw: &Matrix, xs: &Matrix, n_bags: f64, n_inst: f64) -> Result<BagPart> {
        let weak_trace = params.forward(xw)?;
        let strong_trace = params.forward(xs)?;
        let t = total_loss(&[bag], weak_trace.probs(), strong_trace.probs(), &self.loss)?;

        // single-bag losses are rescaled to the batch normalisers 1/N and 1/(N·M)
        let m = bag.size() as f64;
        let mut gw = t.grad_weak;
        gw.as_mut_slice().iter_mut().for_each(|g| *g /= n_bags);
        let mut gs = t.grad_strong;
        let share = m / n_inst;
        gs.as_mut_slice().iter_mut().for_each(|g| *g *= share);
        let mut grads = weak_trace.backward(Upstream::Probabilities(&gw))?;
        grads.add_assign(&strong_trace.backward(Upstream::Probabilities(&gs))?);

        let labels = self.dataset.labels();
        let ln_c = (self.dataset.class_count() as f64).ln();
        let mut correct = 0;
        let mut entropy_sum = 0.0;
        for (row, &idx) in weak_trace.probs().iter_rows().zip(&bag.indices) {
            correct += usize::from(argmax(row) == labels[idx]);
            entropy_sum += entropy(row)? / ln_c;
        }
        Ok(BagPart {
            grads,
            bag_loss: t.report.bag_loss,
            instance_loss_share: t.report.instance_loss * share,
            weight_sum: t.weights.iter().map(|w| w.combined).sum(),
            bag_weight_sum: t.weights.iter().map(|w| w.bag_weight).sum(),
            instance_weight_sum: t.weights.iter().map(|w| w.instance_weight).sum(),
            correct,
            entropy_sum,
        })
    }

    /// Runs one optimisation step over `batch` and updates `state`.
    pub fn train_step(&self, state: &mut RunState, batch: &[&Bag]) -> Result<StepOutcome> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let lr = lr_schedule(state.optimizer.step, self.total_steps, self.config.lr0)?;

        // views are drawn sequentially so both exec modes see identical inputs
        let mut views = Vec::with_capacity(batch.len());
        for bag in batch {
            let x = self.dataset.features().select_rows(&bag.indices);
            let xw = self.weak.apply_batch(&x, &mut state.streams.weak);
            let xs = self.strong.apply_batch(&x, &mut state.streams.strong);
            views.push((xw, xs));
        }
        let n_bags = batch.len() as f64;
        let n_inst: usize = batch.iter().map(|b| b.size()).sum();
        let params = &state.params;
        let part = |(bag, (xw, xs)): (&&Bag, &(Matrix, Matrix))| {
            self.bag_part(params, bag, xw, xs, n_bags, n_inst as f64)
        };

        let merged = match self.exec {
            ExecMode::Deterministic => {
                let mut acc: Option<BagPart> = None;
                for item in batch.iter().zip(&views) {
                    let p = part(item)?;
                    acc = Some(match acc {
                        None => p,
                        Some(a) => a.merge(p),
                    });
                }
                acc.expect("non-empty batch")
            }
            ExecMode::Parallel => batch
                .par_iter()
                .zip(views.par_iter())
                .map(part)
                .try_reduce_with(|a, b| Ok(a.merge(b)))
                .expect("non-empty batch")?,
        };

        let bag_loss = merged.bag_loss / n_bags;
        let instance_loss = merged.instance_loss_share;
        let ni = n_inst as f64;
        let report = LossReport {
            bag_loss,
            instance_loss,
            total: bag_loss + self.loss.lambda * instance_loss,
            per_bag: Vec::new(),
            mean_weight: merged.weight_sum / ni,
            mean_bag_weight: merged.bag_weight_sum / ni,
            mean_instance_weight: merged.instance_weight_sum / ni,
        };

        state.optimizer.lr = lr;
        sgd_step(
            &mut state.params,
            &merged.grads,
            &mut state.optimizer,
            self.config.weight_decay,
            self.config.momentum,
        );
        Ok(StepOutcome {
            report,
            instances: n_inst,
            correct_pseudo_labels: merged.correct,
            normalized_entropy_sum: merged.entropy_sum,
            learning_rate: lr,
        })
    }
}

/// Options that do not change the objective.
/// Called with each epoch's metrics as soon as the epoch ends.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochMetrics) -> Result<()>;

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub exec: ExecMode,
    pub test: Option<&'a Dataset>,
    pub on_epoch: Option<EpochHook<'a>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub series: Vec<EpochMetrics>,
}

pub fn steps_per_epoch(n_bags: usize, bags_per_step: usize) -> usize {
    n_bags.div_ceil(bags_per_step)
}

fn check_inputs(dataset: &Dataset, bags: &BagCollection, config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if bags.is_empty() {
        return Err(Error::InvalidArgument("no bags to train on".into()));
    }
    for bag in &bags.bags {
        validate_bag(bag, dataset)?;
    }
    if let Some(dup) = bags.find_overlap() {
        return Err(Error::InvalidArgument(format!("bags overlap at index {dup}")));
    }
    Ok(())
}

/// Trains from the seeded initial state, visiting every bag once per epoch
/// in a freshly shuffled order.
pub fn train(
    dataset: &Dataset,
    bags: &BagCollection,
    config: &TrainConfig,
    mut options: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    check_inputs(dataset, bags, config)?;
    let mut state = RunState::new(config, dataset.dim(), dataset.class_count())?;
    let bags_per_step = config.effective_bags_per_step();
    let per_epoch = steps_per_epoch(bags.len(), bags_per_step);
    let total_steps = config.total_steps.unwrap_or(config.epochs * per_epoch);
    let trainer = Trainer::new(config, dataset, total_steps, options.exec)?;

    let mut series = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..bags.len()).collect();
    'epochs: for epoch in 0..config.epochs {
        if state.optimizer.step >= total_steps {
            break;
        }
        order.shuffle(&mut state.streams.bag_order);
        let mut acc = EpochAccumulator::default();
        for chunk in order.chunks(bags_per_step) {
            if state.optimizer.step >= total_steps {
                if acc.steps > 0 {
                    series.push(acc.finish(epoch, &state.params, options.test)?);
                    if let Some(cb) = options.on_epoch.as_mut() {
                        cb(series.last().expect("just pushed"))?;
                    }
                }
                break 'epochs;
            }
            let batch: Vec<&Bag> = chunk.iter().map(|&i| &bags.bags[i]).collect();
            let out = trainer.train_step(&mut state, &batch)?;
            acc.add(&out);
        }
        state.epoch = epoch + 1;
        let m = acc.finish(epoch, &state.params, options.test)?;
        if let Some(cb) = options.on_epoch.as_mut() {
            cb(&m)?;
        }
        series.push(m);
    }
    Ok(TrainOutcome {
        params: state.params,
        series,
    })
}

#[derive(Default)]
struct EpochAccumulator {
    steps: usize,
    instances: usize,
    lr: f64,
    bag_loss: f64,
    instance_loss: f64,
    total: f64,
    correct: usize,
    entropy: f64,
    weight: f64,
    bag_weight: f64,
    instance_weight: f64,
}

impl EpochAccumulator {
    fn add(&mut self, s: &StepOutcome) {
        let n = s.instances as f64;
        self.steps += 1;
        self.instances += s.instances;
        self.lr = s.learning_rate;
        self.bag_loss += s.report.bag_loss;
        self.instance_loss += s.report.instance_loss;
        self.total += s.report.total;
        self.correct += s.correct_pseudo_labels;
        self.entropy += s.normalized_entropy_sum;
        self.weight += s.report.mean_weight * n;
        self.bag_weight += s.report.mean_bag_weight * n;
        self.instance_weight += s.report.mean_instance_weight * n;
    }

    fn finish(&self, epoch: usize, params: &ModelParams, test: Option<&Dataset>) -> Result<EpochMetrics> {
        let steps = self.steps.max(1) as f64;
        let n = self.instances.max(1) as f64;
        Ok(EpochMetrics {
            epoch,
            steps: self.steps,
            learning_rate: self.lr,
            bag_loss: self.bag_loss / steps,
            instance_loss: self.instance_loss / steps,
            total_loss: self.total / steps,
            pseudo_label_accuracy: self.correct as f64 / n,
            mean_normalized_entropy: self.entropy / n,
            mean_weight: self.weight / n,
            mean_bag_weight: self.bag_weight / n,
            mean_instance_weight: self.instance_weight / n,
            test_accuracy: test.map(|t| test_accuracy(params, t)).transpose()?,
        })
    }
}
