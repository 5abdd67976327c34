//! Training loops for the generator and the static comparison arms.
//!
//! All arms minimize the per-sample squared error `‖ŷ − y‖²` (summed over
//! output coordinates, averaged over the batch) against the task targets.
//! Batches are balanced across tasks unless a task mix is configured.

mod optimizer;

use std::sync::Arc;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optimizer::{Optimizer, OptimizerConfig, OptimizerKind};

use crate::backbone::{load_adapters, FrozenBackbone};
use crate::error::{Error, Result};
use crate::generator::{init_generator, GeneratorConfig, GeneratorState, ParamSet};
use crate::rng::{self, stream};
use crate::tasks::{derangement, ConditionFeaturizer, Instance, TaskSpec};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{detokenize, detokenize_on_tape, AdapterLayout, AdapterSet, LoraPair, ParamTokens};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// One LoRA pair per task, trained on that task alone.
    Single,
    /// One LoRA pair trained on the task mixture.
    Shared,
    /// Full fine-tuning of a copy of the backbone weights.
    Sft,
    /// Conditional generation.
    Pg,
    /// Mean of generated adapters, frozen for every input.
    AvgPg,
    /// Generation with conditions deranged across instances.
    ShufflePg,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Single,
        Method::Shared,
        Method::Sft,
        Method::Pg,
        Method::AvgPg,
        Method::ShufflePg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Single => "single",
            Method::Shared => "shared",
            Method::Sft => "sft",
            Method::Pg => "pg",
            Method::AvgPg => "avg-pg",
            Method::ShufflePg => "shuffle-pg",
        }
    }

    pub fn is_generated(self) -> bool {
        matches!(self, Method::Pg | Method::AvgPg | Method::ShufflePg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub steps: usize,
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    /// Relative task frequencies; empty means balanced interleaving.
    pub task_mix: Vec<f64>,
    /// Std of the Gaussian LoRA `A` init for static arms (`B` starts at zero).
    pub lora_init_std: f64,
    pub eval_per_task: usize,
    /// Generations averaged by the avg-pg arm.
    pub avg_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Pg,
            steps: 2000,
            batch: 16,
            optimizer: OptimizerConfig::default(),
            task_mix: Vec::new(),
            lora_init_std: 0.3,
            eval_per_task: 512,
            avg_samples: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || !(self.optimizer.lr > 0.0) {
            return Err(Error::Parameter("steps, batch and lr must be positive".into()));
        }
        if self.task_mix.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Parameter("task mix weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Everything a run needs besides its training hyperparameters.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub backbone: FrozenBackbone,
    pub tasks: Vec<TaskSpec>,
    pub featurizer: ConditionFeaturizer,
    pub layout: Arc<AdapterLayout>,
    pub generator: GeneratorConfig,
    pub seed: u64,
}

impl Experiment {
    pub fn task(&self, id: usize) -> &TaskSpec {
        &self.tasks[id]
    }

    pub fn condition(&self, inst: &Instance) -> Tensor {
        self.featurizer.featurize(inst, self.task(inst.task))
    }

    /// Instruction row fed to a soft-conflict backbone.
    pub fn instruction(&self, inst: &Instance) -> Tensor {
        let e = &self.task(inst.task).embedding;
        Tensor::new(vec![1, e.len()], e.clone()).expect("row")
    }

    fn instructions(&self, batch: &[&Instance]) -> Tensor {
        let c = self.featurizer.cond_width();
        let data = batch.iter().flat_map(|i| self.task(i.task).embedding.clone()).collect();
        Tensor::new(vec![batch.len(), c], data).expect("instruction batch")
    }

    pub fn init_generator(&self) -> Result<GeneratorState> {
        init_generator(&self.generator, self.layout.clone(), self.seed)
    }

    /// Held-out evaluation set, `per_task` instances per task.
    pub fn eval_set(&self, per_task: usize) -> Vec<Instance> {
        crate::tasks::sample_balanced(&self.tasks, per_task, &mut rng::seeded(self.seed, stream::EVAL_DATA))
    }
}

/// Trained artifact of one arm.
#[derive(Clone, Debug)]
pub enum TrainedModel {
    Generator(GeneratorState),
    /// One adapter set per task (`single`).
    PerTask(Vec<AdapterSet>),
    /// One adapter set for everything (`shared`, `avg-pg`).
    Fixed(AdapterSet),
    /// Fine-tuned weight copies (`sft`).
    FullWeights(Vec<Tensor>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub steps: usize,
    /// `curves[t][k]`: mean training loss of task `t`'s samples at step `k`.
    pub curves: Vec<Vec<f64>>,
    /// Mean evaluation loss per task.
    pub eval_losses: Vec<f64>,
    /// `single` only: `cross[i][j]` is task `i`'s adapter evaluated on task `j`.
    pub cross_task_losses: Option<Vec<Vec<f64>>>,
    pub backbone_digest: String,
    pub backbone_unchanged: bool,
}

impl RunResult {
    pub fn mean_eval_loss(&self) -> f64 {
        self.eval_losses.iter().sum::<f64>() / self.eval_losses.len() as f64
    }
}

/// Squared error of one prediction row.
fn row_loss(pred: &Tensor, y: &[f64]) -> f64 {
    pred.data().iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum()
}

struct BatchSampler {
    rng: rng::Rng,
    tasks: usize,
    mix: Vec<f64>,
    cursor: usize,
}

impl BatchSampler {
    fn new(seed: u64, index: u64, tasks: usize, mix: &[f64]) -> Self {
        Self {
            rng: rng::indexed(seed, stream::TRAIN_DATA, index),
            tasks,
            mix: mix.to_vec(),
            cursor: 0,
        }
    }

    fn next_task(&mut self) -> usize {
        if self.mix.is_empty() {
            let t = self.cursor % self.tasks;
            self.cursor += 1;
            return t;
        }
        let total: f64 = self.mix.iter().sum();
        let mut u = self.rng.random::<f64>() * total;
        for (t, w) in self.mix.iter().enumerate() {
            if u < *w {
                return t;
            }
            u -= w;
        }
        self.mix.len() - 1
    }

    fn batch(&mut self, tasks: &[TaskSpec], only: Option<usize>, size: usize) -> Vec<Instance> {
        let w = tasks[0].operator.shape()[0];
        (0..size)
            .map(|_| {
                let t = only.unwrap_or_else(|| self.next_task());
                let x = Tensor::randn(&[w], 1.0, &mut self.rng).into_data();
                Instance::new(&tasks[t], x)
            })
            .collect()
    }
}

fn record_curves(curves: &mut [Vec<f64>], batch: &[Instance], losses: &[f64]) {
    let mut sums = vec![(0.0, 0usize); curves.len()];
    for (inst, l) in batch.iter().zip(losses) {
        sums[inst.task].0 += l;
        sums[inst.task].1 += 1;
    }
    for (curve, (s, n)) in curves.iter_mut().zip(sums) {
        if n > 0 {
            curve.push(s / n as f64);
        }
    }
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: format!("loss became {loss}"),
        })
    }
}

/// Records one generator → detokenize → backbone pass for a single instance
/// and returns its squared-error loss.
pub fn pg_instance_loss(
    tape: &mut Tape,
    exp: &Experiment,
    state: &GeneratorState,
    params: &crate::generator::ParamVars,
    inst: &Instance,
    conditions: &Tensor,
) -> Result<Var> {
    let tokens = state.generate_on_tape(tape, params, conditions)?;
    let adapters = detokenize_on_tape(tape, tokens, &state.layout)?;
    let weights = exp.backbone.weight_vars(tape);
    let x = tape.constant(inst.x_tensor());
    let e = tape.constant(exp.instruction(inst));
    let pred = exp.backbone.forward_on_tape(tape, &weights, x, Some(e), Some(&adapters))?;
    let y = tape.constant(inst.y_tensor());
    let diff = tape.sub(pred, y)?;
    tape.sq_sum_scaled(diff, 1.0)
}

/// Loss and parameter gradients of one instance.
fn pg_sample(exp: &Experiment, state: &GeneratorState, inst: &Instance) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = state.params.load(&mut tape, true);
    let cond = exp.condition(inst);
    let loss = pg_instance_loss(&mut tape, exp, state, &p, inst, &cond)?;
    let grads = tape.backward(loss)?;
    let g = p.vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();
    Ok((tape.value(loss).item(), g))
}

/// Adds per-sample gradients in sample order, then divides by the count.
fn reduce_in_order(per_sample: Vec<(f64, Vec<Tensor>)>) -> (Vec<f64>, Vec<Tensor>) {
    let n = per_sample.len() as f64;
    let mut losses = Vec::with_capacity(per_sample.len());
    let mut total: Option<Vec<Tensor>> = None;
    for (loss, grads) in per_sample {
        losses.push(loss);
        total = Some(match total {
            None => grads,
            Some(mut acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                        *av += gv;
                    }
                }
                acc
            }
        });
    }
    let grads = total
        .unwrap_or_default()
        .into_iter()
        .map(|g| g.scale(1.0 / n))
        .collect();
    (losses, grads)
}

/// Trains the generator end to end through the frozen backbone.
pub fn train_pg(config: &TrainConfig, exp: &Experiment) -> Result<(RunResult, GeneratorState)> {
    config.validate()?;
    let digest = exp.backbone.digest();
    let mut state = exp.init_generator()?;
    let mut opt = Optimizer::new(&config.optimizer, state.params.tensors());
    let mut sampler = BatchSampler::new(exp.seed, 0, exp.tasks.len(), &config.task_mix);
    let mut curves = vec![Vec::with_capacity(config.steps); exp.tasks.len()];
    for step in 0..config.steps {
        let batch = sampler.batch(&exp.tasks, None, config.batch);
        let per_sample: Vec<(f64, Vec<Tensor>)> = batch
            .par_iter()
            .map(|inst| pg_sample(exp, &state, inst))
            .collect::<Result<_>>()?;
        let (losses, grads) = reduce_in_order(per_sample);
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        check_finite(step, mean)?;
        record_curves(&mut curves, &batch, &losses);
        let names = state.params.names().to_vec();
        opt.step(state.params.tensors_mut(), &grads, &names)?;
    }
    let model = TrainedModel::Generator(state);
    let eval_set = exp.eval_set(config.eval_per_task);
    let eval_losses = eval(&model, exp, &eval_set, EvalShuffle::None)?;
    let TrainedModel::Generator(state) = model else { unreachable!() };
    let result = RunResult {
        method: Method::Pg,
        steps: config.steps,
        curves,
        eval_losses,
        cross_task_losses: None,
        backbone_unchanged: exp.backbone.digest() == digest,
        backbone_digest: digest,
    };
    Ok((result, state))
}

fn init_lora(exp: &Experiment, std: f64, index: u64) -> AdapterSet {
    let mut r = rng::indexed(exp.seed, stream::LORA_INIT, index);
    let rank = exp.layout.rank();
    let layers = (0..exp.layout.layers())
        .map(|_| {
            exp.layout
                .modules()
                .iter()
                .map(|m| LoraPair {
                    a: Tensor::randn(&[m.d_in, rank], std, &mut r),
                    b: Tensor::zeros(&[rank, m.d_out]),
                })
                .collect()
        })
        .collect();
    AdapterSet { layers }
}

fn flatten_set(set: &AdapterSet) -> Vec<Tensor> {
    set.layers
        .iter()
        .flatten()
        .flat_map(|p| [p.a.clone(), p.b.clone()])
        .collect()
}

fn unflatten_set(template: &AdapterSet, tensors: &[Tensor]) -> AdapterSet {
    let mut out = template.clone();
    let mut it = tensors.iter();
    for layer in &mut out.layers {
        for p in layer {
            p.a = it.next().expect("A").clone();
            p.b = it.next().expect("B").clone();
        }
    }
    out
}

fn batch_tensors(exp: &Experiment, batch: &[Instance]) -> (Tensor, Tensor, Tensor) {
    let w = exp.backbone.width();
    let x = Tensor::new(vec![batch.len(), w], batch.iter().flat_map(|i| i.x.clone()).collect()).expect("x");
    let y = Tensor::new(vec![batch.len(), w], batch.iter().flat_map(|i| i.y.clone()).collect()).expect("y");
    let refs: Vec<&Instance> = batch.iter().collect();
    (x, y, exp.instructions(&refs))
}

enum StaticTarget {
    Lora,
    Weights,
}

/// Trains static parameters (a LoRA set or weight copies) on batches drawn
/// from `only` (one task) or the configured mixture.
fn train_static_params(
    config: &TrainConfig,
    exp: &Experiment,
    target: StaticTarget,
    init: Vec<Tensor>,
    only: Option<usize>,
    stream_index: u64,
    curves: &mut [Vec<f64>],
) -> Result<Vec<Tensor>> {
    let mut params = init;
    let names: Vec<String> = (0..params.len()).map(|i| format!("static.{i}")).collect();
    let mut opt = Optimizer::new(&config.optimizer, &params);
    let mut sampler = BatchSampler::new(exp.seed, stream_index, exp.tasks.len(), &config.task_mix);
    for step in 0..config.steps {
        let batch = sampler.batch(&exp.tasks, only, config.batch);
        let (x, y, e) = batch_tensors(exp, &batch);
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let xv = tape.constant(x);
        let ev = tape.constant(e);
        let pred = match target {
            StaticTarget::Lora => {
                let weights = exp.backbone.weight_vars(&mut tape);
                let lora: Vec<Vec<crate::tokenizer::LoraVars>> = vars
                    .chunks(2)
                    .map(|c| crate::tokenizer::LoraVars { a: c[0], b: c[1] })
                    .collect::<Vec<_>>()
                    .chunks(exp.layout.modules().len())
                    .map(|c| c.to_vec())
                    .collect();
                exp.backbone.forward_on_tape(&mut tape, &weights, xv, Some(ev), Some(&lora))?
            }
            StaticTarget::Weights => exp.backbone.forward_on_tape(&mut tape, &vars, xv, Some(ev), None)?,
        };
        let yv = tape.constant(y);
        let diff = tape.sub(pred, yv)?;
        let per_row: Vec<f64> = tape
            .value(diff)
            .data()
            .chunks(exp.backbone.width())
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect();
        let loss = tape.sq_sum_scaled(diff, batch.len() as f64)?;
        check_finite(step, tape.value(loss).item())?;
        record_curves(curves, &batch, &per_row);
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();
        opt.step(&mut params, &g, &names)?;
    }
    Ok(params)
}

/// Trains the `single`, `shared` or `sft` arm.
pub fn train_static(config: &TrainConfig, exp: &Experiment) -> Result<(RunResult, TrainedModel)> {
    config.validate()?;
    let digest = exp.backbone.digest();
    let k = exp.tasks.len();
    let mut curves = vec![Vec::with_capacity(config.steps); k];
    let model = match config.method {
        Method::Single => {
            let mut sets = Vec::with_capacity(k);
            for t in 0..k {
                let init = init_lora(exp, config.lora_init_std, t as u64 + 1);
                let trained = train_static_params(
                    config,
                    exp,
                    StaticTarget::Lora,
                    flatten_set(&init),
                    Some(t),
                    t as u64 + 1,
                    &mut curves,
                )?;
                sets.push(unflatten_set(&init, &trained));
            }
            TrainedModel::PerTask(sets)
        }
        Method::Shared => {
            let init = init_lora(exp, config.lora_init_std, 0);
            let trained =
                train_static_params(config, exp, StaticTarget::Lora, flatten_set(&init), None, 0, &mut curves)?;
            TrainedModel::Fixed(unflatten_set(&init, &trained))
        }
        Method::Sft => {
            let init = exp.backbone.weights().to_vec();
            let trained = train_static_params(config, exp, StaticTarget::Weights, init, None, 0, &mut curves)?;
            TrainedModel::FullWeights(trained)
        }
        other => {
            return Err(Error::Contract(format!(
                "train_static called with method `{}`",
                other.name()
            )))
        }
    };
    let eval_set = exp.eval_set(config.eval_per_task);
    let eval_losses = eval(&model, exp, &eval_set, EvalShuffle::None)?;
    let cross_task_losses = match &model {
        TrainedModel::PerTask(sets) => Some(
            sets.iter()
                .map(|s| eval(&TrainedModel::Fixed(s.clone()), exp, &eval_set, EvalShuffle::None))
                .collect::<Result<_>>()?,
        ),
        _ => None,
    };
    let result = RunResult {
        method: config.method,
        steps: config.steps,
        curves,
        eval_losses,
        cross_task_losses,
        backbone_unchanged: exp.backbone.digest() == digest,
        backbone_digest: digest,
    };
    Ok((result, model))
}

/// Trains one adapter set on task `task` alone, starting from `init`.
/// `data_index` selects the training data stream.
pub fn train_single_from(
    config: &TrainConfig,
    exp: &Experiment,
    task: usize,
    init: &AdapterSet,
    data_index: u64,
) -> Result<AdapterSet> {
    config.validate()?;
    if task >= exp.tasks.len() {
        return Err(Error::Parameter(format!("task {task} out of range")));
    }
    let mut curves = vec![Vec::new(); exp.tasks.len()];
    let trained = train_static_params(
        config,
        exp,
        StaticTarget::Lora,
        flatten_set(init),
        Some(task),
        data_index,
        &mut curves,
    )?;
    Ok(unflatten_set(init, &trained))
}

/// Gaussian `A`, zero `B`, drawn from LoRA init stream `index`.
pub fn lora_init(exp: &Experiment, std: f64, index: u64) -> AdapterSet {
    init_lora(exp, std, index)
}

/// Mean generated token tensor over `conditions`, detokenized once.
pub fn derive_avg_pg(state: &GeneratorState, conditions: &[Tensor]) -> Result<AdapterSet> {
    if conditions.is_empty() {
        return Err(Error::Parameter("average over an empty condition set".into()));
    }
    let generated: Vec<Tensor> = conditions
        .par_iter()
        .map(|u| state.generate(u).map(|t| t.tensor))
        .collect::<Result<_>>()?;
    let mut acc = Tensor::zeros(generated[0].shape());
    for g in &generated {
        acc = acc.add(g)?;
    }
    let mean = acc.scale(1.0 / generated.len() as f64);
    detokenize(&ParamTokens {
        tensor: mean,
        layout: state.layout.clone(),
    })
}

/// Conditions for the avg-pg sample set: `count` fresh instances, balanced.
pub fn avg_sample_conditions(exp: &Experiment, count: usize) -> Vec<Tensor> {
    let per_task = count.div_ceil(exp.tasks.len());
    let mut r = rng::seeded(exp.seed, stream::AVG_SAMPLES);
    crate::tasks::sample_balanced(&exp.tasks, per_task, &mut r)
        .iter()
        .take(count)
        .map(|i| exp.condition(i))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalShuffle {
    None,
    /// Seeded derangement of condition ↔ instance pairing.
    Derange(u64),
}

/// Mean loss per task over `dataset`.
pub fn eval(model: &TrainedModel, exp: &Experiment, dataset: &[Instance], shuffle: EvalShuffle) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Parameter("empty evaluation set".into()));
    }
    let losses: Vec<f64> = match model {
        TrainedModel::Generator(state) => {
            let pairing: Vec<usize> = match shuffle {
                EvalShuffle::None => (0..dataset.len()).collect(),
                EvalShuffle::Derange(seed) if dataset.len() >= 2 => {
                    derangement(dataset.len(), &mut rng::seeded(seed, stream::SHUFFLE))
                }
                EvalShuffle::Derange(_) => (0..dataset.len()).collect(),
            };
            dataset
                .par_iter()
                .zip(pairing.par_iter())
                .map(|(inst, &src)| {
                    let cond = exp.condition(&dataset[src]);
                    let adapters = detokenize(&state.generate(&cond)?)?;
                    let pred = exp
                        .backbone
                        .forward(&inst.x_tensor(), Some(&exp.instruction(inst)), Some(&adapters))?;
                    Ok(row_loss(&pred, &inst.y))
                })
                .collect::<Result<_>>()?
        }
        _ if shuffle != EvalShuffle::None => {
            return Err(Error::Contract("condition shuffling applies only to generated adapters".into()))
        }
        TrainedModel::Fixed(set) => static_losses(exp, dataset, |tape| Ok((exp.backbone.weight_vars(tape), Some(load_adapters(tape, set, false)))))?,
        TrainedModel::PerTask(sets) => {
            let mut out = Vec::with_capacity(dataset.len());
            for inst in dataset {
                let pred = exp.backbone.forward(
                    &inst.x_tensor(),
                    Some(&exp.instruction(inst)),
                    Some(&sets[inst.task]),
                )?;
                out.push(row_loss(&pred, &inst.y));
            }
            out
        }
        TrainedModel::FullWeights(weights) => static_losses(exp, dataset, |tape| {
            Ok((weights.iter().map(|w| tape.constant(w.clone())).collect(), None))
        })?,
    };
    let mut sums = vec![(0.0, 0usize); exp.tasks.len()];
    for (inst, l) in dataset.iter().zip(&losses) {
        sums[inst.task].0 += l;
        sums[inst.task].1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 })
        .collect())
}

type StaticVars = (Vec<Var>, Option<Vec<Vec<crate::tokenizer::LoraVars>>>);

fn static_losses(
    exp: &Experiment,
    dataset: &[Instance],
    load: impl Fn(&mut Tape) -> Result<StaticVars>,
) -> Result<Vec<f64>> {
    let (x, y, e) = batch_tensors(exp, dataset);
    let mut tape = Tape::new();
    let (weights, adapters) = load(&mut tape)?;
    let xv = tape.constant(x);
    let ev = tape.constant(e);
    let pred = exp
        .backbone
        .forward_on_tape(&mut tape, &weights, xv, Some(ev), adapters.as_deref())?;
    let w = exp.backbone.width();
    Ok(tape
        .value(pred)
        .data()
        .chunks(w)
        .zip(y.data().chunks(w))
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect())
}

/// Flattened generator parameters, in [`ParamSet`] order.
pub fn flatten_params(params: &ParamSet) -> Vec<f64> {
    params.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, BackboneConfig};
    use crate::tasks::{make_opposing_pair, PairKind};

    fn experiment() -> Experiment {
        let mut bc = BackboneConfig::linear(4);
        bc.init_noise = 1e-3;
        let backbone = build_backbone(&bc, 3).unwrap();
        let (p, m) = make_opposing_pair(PairKind::ScalePair, 4, 0.5, 8, 3).unwrap();
        let layout = Arc::new(backbone.adapter_layout(2, None).unwrap());
        Experiment {
            featurizer: ConditionFeaturizer::new(4, 8, 3),
            backbone,
            tasks: vec![p, m],
            layout,
            generator: GeneratorConfig {
                hidden: 8,
                heads: 2,
                blocks: 1,
                condition_width: 8,
                ..GeneratorConfig::default()
            },
            seed: 3,
        }
    }

    fn quick(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            steps: 5,
            batch: 4,
            eval_per_task: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn static_runs_are_deterministic() {
        let exp = experiment();
        for m in [Method::Single, Method::Shared, Method::Sft] {
            let (a, _) = train_static(&quick(m), &exp).unwrap();
            let (b, _) = train_static(&quick(m), &exp).unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
            assert!(a.backbone_unchanged);
        }
    }

    #[test]
    fn pg_run_is_deterministic() {
        let exp = experiment();
        let (a, sa) = train_pg(&quick(Method::Pg), &exp).unwrap();
        let (b, sb) = train_pg(&quick(Method::Pg), &exp).unwrap();
        assert_eq!(a, b);
        assert_eq!(flatten_params(&sa.params), flatten_params(&sb.params));
        assert_eq!(a.curves[0].len(), 5);
    }

    #[test]
    fn static_method_rejected_by_pg_only_paths() {
        let exp = experiment();
        assert!(matches!(train_static(&quick(Method::Pg), &exp), Err(Error::Contract(_))));
        let set = AdapterSet::zeros(&exp.layout);
        let data = exp.eval_set(2);
        let r = eval(&TrainedModel::Fixed(set), &exp, &data, EvalShuffle::Derange(1));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_config_rejected() {
        let exp = experiment();
        let mut cfg = quick(Method::Shared);
        cfg.steps = 0;
        assert!(matches!(train_static(&cfg, &exp), Err(Error::Parameter(_))));
        cfg.steps = 1;
        cfg.task_mix = vec![1.0, -1.0];
        assert!(matches!(train_static(&cfg, &exp), Err(Error::Parameter(_))));
    }

    #[test]
    fn zero_adapters_match_base_loss() {
        let exp = experiment();
        let data = exp.eval_set(16);
        let zero = eval(&TrainedModel::Fixed(AdapterSet::zeros(&exp.layout)), &exp, &data, EvalShuffle::None).unwrap();
        let fresh = eval(&TrainedModel::Generator(exp.init_generator().unwrap()), &exp, &data, EvalShuffle::None).unwrap();
        assert_eq!(zero, fresh);
        let base = eval(&TrainedModel::FullWeights(exp.backbone.weights().to_vec()), &exp, &data, EvalShuffle::None).unwrap();
        for (a, b) in zero.iter().zip(&base) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn avg_pg_of_one_condition_is_that_generation() {
        let exp = experiment();
        let mut state = exp.init_generator().unwrap();
        for t in state.params.tensors_mut() {
            *t = t.map(|v| v + 0.01);
        }
        let cond = exp.condition(&exp.eval_set(1)[0]);
        let avg = derive_avg_pg(&state, std::slice::from_ref(&cond)).unwrap();
        let direct = detokenize(&state.generate(&cond).unwrap()).unwrap();
        assert_eq!(avg, direct);
        assert!(derive_avg_pg(&state, &[]).is_err());
    }
}
