//! Losses, metrics, optimizers, schedules and the finetuning loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::sub_seed;
use crate::data::{
    interleave_batches, listing_batches, materialize, resize_bilinear, sample_triplets, AugConfig, BatchPlan, Dataset,
    MiningStats, Strategy, Triplet, SENTINEL,
};
use crate::error::{config_err, contract_err, dim_err, Error, Result};
use crate::model::{ModelGraph, TrainablePolicy};
use crate::nn::{Ctx, ParamStore, BN_MOMENTUM};
use crate::retrieval::RecallReport;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Unweighted sum over tasks of the mean cross-entropy of each task's
/// labelled rows. Tasks without labelled rows contribute exactly zero.
pub fn masked_cross_entropy<'t, T: Element>(
    logits: &[Var<'t, T>],
    labels: &[Vec<Option<usize>>],
) -> Result<Var<'t, T>> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(contract_err!("{} logit tensors for {} label columns", logits.len(), labels.len()));
    }
    let mut total = logits[0].cross_entropy_masked(&labels[0])?;
    for (l, y) in logits.iter().zip(labels).skip(1) {
        total = total.add(&l.cross_entropy_masked(y)?)?;
    }
    Ok(total)
}

/// Maps [`SENTINEL`] to `None`.
pub fn mask_labels(labels: &[i64]) -> Vec<Option<usize>> {
    labels.iter().map(|&l| (l != SENTINEL).then_some(l as usize)).collect()
}

/// Fraction of labelled rows whose true class is among the `k` largest
/// logits (ties resolved in the label's favor). `None` when no row is
/// labelled.
pub fn masked_topk_accuracy<T: Element>(logits: &Tensor<T>, labels: &[i64], k: usize) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for (row, &label) in labels.iter().enumerate() {
        if label == SENTINEL {
            continue;
        }
        n += 1;
        let r = logits.row(row);
        let target = r[label as usize];
        if r.iter().filter(|&&v| v > target).count() < k {
            hit += 1;
        }
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

/// `max(0, ‖a − p‖² − ‖a − n‖² + margin)`.
pub fn triplet_loss(anchor: &[f32], positive: &[f32], negative: &[f32], margin: f64) -> Result<f64> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(dim_err!("triplet dims {} / {} / {}", anchor.len(), positive.len(), negative.len()));
    }
    Ok((sq_dist(anchor, positive) - sq_dist(anchor, negative) + margin).max(0.0))
}

/// Mean hinge over `triplets` of rows of `embeddings`; zero for an empty list.
pub fn mean_triplet_loss(embeddings: &Tensor, triplets: &[Triplet], margin: f64) -> Result<f64> {
    if triplets.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for t in triplets {
        sum += triplet_loss(embeddings.row(t.anchor), embeddings.row(t.positive), embeddings.row(t.negative), margin)?;
    }
    Ok(sum / triplets.len() as f64)
}

/// Differentiable mean hinge over `triplets`.
pub fn triplet_loss_var<'t, T: Element>(
    embeddings: Var<'t, T>,
    triplets: &[Triplet],
    margin: f64,
) -> Result<Var<'t, T>> {
    if triplets.is_empty() {
        return Err(contract_err!("no triplets to average"));
    }
    let pick = |f: fn(&Triplet) -> usize| embeddings.gather_rows(&triplets.iter().map(f).collect::<Vec<_>>());
    let (a, p, n) = (pick(|t| t.anchor)?, pick(|t| t.positive)?, pick(|t| t.negative)?);
    let ap = a.sub(&p)?;
    let an = a.sub(&n)?;
    let d_ap = ap.mul(&ap)?.sum_axis(1)?;
    let d_an = an.mul(&an)?.sum_axis(1)?;
    Ok(d_ap.sub(&d_an)?.add_scalar(T::of(margin)).relu().mean())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Weight decay, if any, is added to the gradient.
    Adam,
    /// Weight decay is applied to the parameter directly, before the update.
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Adam state for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u32>,
    /// Optimizer steps taken so far.
    pub step_index: usize,
}

impl Optimizer {
    pub fn new<T: Element>(config: OptimizerConfig, store: &ParamStore<T>) -> Self {
        Optimizer {
            config,
            m: store.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: store.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            steps: vec![0; store.params.len()],
            step_index: 0,
        }
    }

    /// Updates every parameter that has a gradient. Bias correction counts
    /// the updates each parameter has actually received.
    pub fn step<T: Element>(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != store.params.len() || self.m.len() != grads.len() {
            return Err(contract_err!("optimizer state does not match the parameter store"));
        }
        if let Some((p, _)) = store.params.iter().zip(grads).find(|(_, g)| g.as_ref().is_some_and(|g| !g.all_finite()))
        {
            return Err(Error::Numerical { step: self.step_index, msg: format!("non-finite gradient for {}", p.name) });
        }
        let c = &self.config;
        for (i, (param, grad)) in store.params.iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, g)) in param.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let mut wf = w.as_f64();
                let mut g = g.as_f64();
                match c.kind {
                    OptimizerKind::Adam => g += c.weight_decay * wf,
                    OptimizerKind::Adamw => wf -= lr * c.weight_decay * wf,
                }
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let (mh, vh) = (m[j] / bc1, v[j] / bc2);
                wf -= lr * mh / (vh.sqrt() + c.eps);
                *w = T::of(wf);
            }
        }
        self.step_index += 1;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    Cosine,
    Polynomial { power: f64 },
}

/// Learning rate at `step` of `total`; both schedules start at `base_lr`
/// and reach zero at `total`.
pub fn lr_at(schedule: Schedule, step: usize, total: usize, base_lr: f64) -> Result<f64> {
    if total == 0 {
        return Err(config_err!("schedule needs at least one step"));
    }
    if step > total {
        return Err(config_err!("step {step} beyond schedule end {total}"));
    }
    let frac = step as f64 / total as f64;
    Ok(match schedule {
        Schedule::Cosine => base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
        Schedule::Polynomial { power } => base_lr * (1.0 - frac).powf(power),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Triplet,
    SingleTask,
    Multitask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    /// Heads only for the whole run.
    LinearProbe,
    /// A single optimizer step.
    PseudoZeroShot,
}

/// The five finetuning configurations of the reference hyperparameter table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    TripletEfficientnetB0,
    MtEfficientnetB0,
    MtVitB16,
    MtEfficientformerL3,
    MtEfficientformerL1,
}

fn default_per_listing() -> usize {
    2
}

fn default_bn_momentum() -> f64 {
    BN_MOMENTUM
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub regime: Regime,
    pub epochs: usize,
    pub warm_epochs_frozen: usize,
    /// Backbone layers unfrozen after the warm phase; `None` unfreezes all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unfreeze_top_k_layers: Option<usize>,
    pub optimizer: OptimizerConfig,
    pub base_lr: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// Images per listing in triplet batches.
    #[serde(default = "default_per_listing")]
    pub per_listing: usize,
    pub margin: f64,
    pub strategy: Strategy,
    pub mode: Mode,
    pub seed: u64,
    /// Stop after this many optimizer steps (the schedule still spans the
    /// nominal run).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub augment: AugConfig,
    /// Running-statistics momentum for batch norm layers.
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

impl TrainPlan {
    pub fn preset(p: Preset) -> Self {
        let adam =
            |eps, wd| OptimizerConfig { kind: OptimizerKind::Adam, beta1: 0.9, beta2: 0.999, eps, weight_decay: wd };
        let adamw = OptimizerConfig { kind: OptimizerKind::Adamw, ..adam(1e-7, 0.01) };
        let poly = Schedule::Polynomial { power: 1.0 };
        let (regime, optimizer, lr, schedule, epochs, batch, eval_batch) = match p {
            Preset::TripletEfficientnetB0 => (Regime::Triplet, adam(1e-8, 0.0), 1e-4, Schedule::Cosine, 10, 512, 256),
            Preset::MtEfficientnetB0 => (Regime::Multitask, adam(1e-8, 0.0), 1e-4, Schedule::Cosine, 10, 256, 256),
            Preset::MtVitB16 => (Regime::Multitask, adam(1e-7, 0.01), 1e-4, poly, 5, 64, 128),
            Preset::MtEfficientformerL3 => (Regime::Multitask, adamw.clone(), 2e-4, poly, 10, 64, 128),
            Preset::MtEfficientformerL1 => (Regime::Multitask, adamw, 2e-4, poly, 10, 64, 128),
        };
        TrainPlan {
            regime,
            epochs,
            warm_epochs_frozen: 1,
            unfreeze_top_k_layers: None,
            optimizer,
            base_lr: lr,
            schedule,
            batch_size: batch,
            eval_batch_size: eval_batch,
            per_listing: 2,
            margin: 0.2,
            strategy: Strategy::BatchAll,
            mode: Mode::Full,
            seed: 0,
            max_steps: None,
            augment: AugConfig::default(),
            bn_momentum: BN_MOMENTUM,
        }
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warm_epochs_frozen > self.epochs {
            return Err(config_err!(
                "need epochs ≥ warm_epochs_frozen and epochs ≥ 1, got {} / {}",
                self.epochs,
                self.warm_epochs_frozen
            ));
        }
        if !(self.margin > 0.0) {
            return Err(config_err!("margin must be positive"));
        }
        if !(self.base_lr > 0.0) {
            return Err(config_err!("base_lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(config_err!("bn_momentum must be within [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        let c = &self.optimizer;
        if !(0.0..1.0).contains(&c.beta1) || !(0.0..1.0).contains(&c.beta2) || !(c.eps > 0.0) || c.weight_decay < 0.0 {
            return Err(config_err!("optimizer needs beta1, beta2 in [0, 1), eps > 0, weight_decay ≥ 0"));
        }
        if let Schedule::Polynomial { power } = self.schedule {
            if !(power > 0.0) {
                return Err(config_err!("polynomial power must be positive"));
            }
        }
        self.augment.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// 1 while the backbone is frozen for warm-up, 2 afterwards.
    pub phase: u8,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub task: String,
    /// `None` when no labelled row of this task was seen.
    pub top1: Option<f64>,
    pub top5: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub accuracy: Vec<TaskAccuracy>,
    pub retrieval: Vec<RecallReport>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub mining: MiningStats,
}

impl TrainLog {
    /// One JSON object per line: `{"step": ...}` records then `{"epoch": ...}` records.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.steps {
            writeln!(s, "{}", serde_json::json!({ "step": r })).unwrap();
        }
        for e in &self.epochs {
            writeln!(s, "{}", serde_json::json!({ "epoch": e })).unwrap();
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Called after every epoch with the epoch index and the current model.
pub type EvalHook<'a> = dyn FnMut(usize, &ModelGraph) -> Result<Vec<RecallReport>> + 'a;

/// Head index of each dataset's task.
fn task_columns(model: &ModelGraph, datasets: &[Dataset]) -> Result<Vec<usize>> {
    datasets
        .iter()
        .map(|d| {
            model
                .task_index(&d.task_name)
                .ok_or_else(|| config_err!("dataset {} labels task {:?}, which has no head", d.name, d.task_name))
        })
        .collect()
}

fn epoch_plan(plan: &TrainPlan, datasets: &[Dataset], rng: &mut ChaCha8Rng) -> Result<Vec<BatchPlan>> {
    match plan.regime {
        Regime::Triplet => listing_batches(datasets, plan.batch_size, plan.per_listing, rng),
        _ => {
            let sizes: Vec<usize> = datasets.iter().map(Dataset::len).collect();
            interleave_batches(&sizes, plan.batch_size, rng)
        }
    }
}

fn check_plan(model: &ModelGraph, datasets: &[Dataset], plan: &TrainPlan) -> Result<Vec<usize>> {
    plan.validate()?;
    if datasets.is_empty() {
        return Err(config_err!("no training datasets"));
    }
    if model.embedding_dim().is_none() {
        return Err(config_err!("training needs an embedding head"));
    }
    match plan.regime {
        Regime::Triplet => Ok(vec![0; datasets.len()]),
        Regime::SingleTask => {
            if datasets.len() != 1 {
                return Err(config_err!("single_task trains on exactly one dataset, got {}", datasets.len()));
            }
            task_columns(model, datasets)
        }
        Regime::Multitask => {
            if model.tasks().len() < 2 {
                return Err(config_err!("multitask needs at least two classification heads"));
            }
            task_columns(model, datasets)
        }
    }
}

fn policy_for(plan: &TrainPlan, epoch: usize) -> TrainablePolicy {
    if plan.mode == Mode::LinearProbe || epoch < plan.warm_epochs_frozen {
        TrainablePolicy::HeadsOnly
    } else {
        plan.unfreeze_top_k_layers.map_or(TrainablePolicy::All, TrainablePolicy::TopK)
    }
}

/// Runs the plan. Phase one trains the heads with the backbone frozen for
/// `warm_epochs_frozen` epochs; phase two unfreezes the top layers.
/// `hook` runs after every epoch and its reports land in the log.
pub fn train(model: &mut ModelGraph, datasets: &[Dataset], plan: &TrainPlan, hook: &mut EvalHook) -> Result<TrainLog> {
    let task_of = check_plan(model, datasets, plan)?;
    let tasks = model.tasks();
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(sub_seed(plan.seed, "sampler"));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(sub_seed(plan.seed, "augment"));
    let aug = AugConfig { output: model.spec.input_size, ..plan.augment.clone() };

    let mut epoch_plans = Vec::with_capacity(plan.epochs);
    for _ in 0..plan.epochs {
        epoch_plans.push(epoch_plan(plan, datasets, &mut sampler_rng)?);
    }
    let nominal: usize = epoch_plans.iter().map(Vec::len).sum();
    if nominal == 0 {
        return Err(config_err!("datasets too small for one batch of {}", plan.batch_size));
    }
    let limit = match plan.mode {
        Mode::PseudoZeroShot => 1,
        _ => plan.max_steps.map_or(nominal, |m| m.min(nominal)),
    };
    let total = if plan.mode == Mode::PseudoZeroShot { 1 } else { nominal };

    let mut opt = Optimizer::new(plan.optimizer.clone(), &model.store);
    let mut log = TrainLog::default();
    let mut step = 0;
    for (epoch, batches) in epoch_plans.iter().enumerate() {
        if step >= limit {
            break;
        }
        model.set_trainable(policy_for(plan, epoch))?;
        let phase = if epoch < plan.warm_epochs_frozen { 1 } else { 2 };
        let mut hits = vec![[0usize; 3]; tasks.len()];
        for bp in batches {
            if step >= limit {
                break;
            }
            let started = Instant::now();
            let batch = materialize(bp, datasets, &task_of, tasks.len().max(1), &aug, &mut aug_rng)?;
            let lr = lr_at(plan.schedule, step, total, plan.base_lr)?;
            let (loss, grads, updates) = {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &model.store, true, true);
                let out = model.forward(&ctx, tape.constant(batch.images.clone()))?;
                let (logged, objective) = match plan.regime {
                    Regime::Triplet => {
                        let emb = out.embedding.to_tensor();
                        let all = sample_triplets(
                            &emb,
                            &batch.listing_ids,
                            Strategy::BatchAll,
                            f64::INFINITY,
                            &mut MiningStats::default(),
                        )?;
                        let logged = mean_triplet_loss(&emb, &all.triplets, plan.margin)?;
                        let mined =
                            sample_triplets(&emb, &batch.listing_ids, plan.strategy, plan.margin, &mut log.mining)?;
                        let objective = if mined.triplets.is_empty() {
                            None
                        } else {
                            Some(triplet_loss_var(out.embedding, &mined.triplets, plan.margin)?)
                        };
                        (logged, objective)
                    }
                    _ => {
                        let labels: Vec<Vec<Option<usize>>> =
                            (0..tasks.len()).map(|t| batch.masked_labels(t)).collect();
                        for (t, l) in out.logits.iter().enumerate() {
                            let lt = l.value();
                            for (slot, k) in [(0, 1), (1, 5)] {
                                let labelled = batch.labels[t].iter().filter(|&&y| y != SENTINEL).count();
                                if let Some(acc) = masked_topk_accuracy(&lt, &batch.labels[t], k) {
                                    hits[t][slot] += (acc * labelled as f64).round() as usize;
                                }
                                if slot == 0 {
                                    hits[t][2] += labelled;
                                }
                            }
                        }
                        let loss = masked_cross_entropy(&out.logits, &labels)?;
                        (loss.value().item().as_f64(), Some(loss))
                    }
                };
                if !logged.is_finite() {
                    return Err(Error::Numerical { step, msg: format!("loss is {logged} at epoch {epoch}") });
                }
                let grads = match objective {
                    Some(obj) => {
                        let mut g = tape.backward(obj)?;
                        ctx.vars().iter().map(|v| g.take(*v)).collect()
                    }
                    None => vec![None; model.store.params.len()],
                };
                (logged, grads, ctx.take_stat_updates())
            };
            if grads.iter().any(Option::is_some) {
                let frozen = model.store.checksum(|p| !p.trainable);
                opt.step(&mut model.store, &grads, lr)?;
                if model.store.checksum(|p| !p.trainable) != frozen {
                    return Err(contract_err!("frozen parameters changed at step {step}"));
                }
            }
            model.store.apply_stat_updates(updates, plan.bn_momentum);
            log.steps.push(StepRecord { step, epoch, phase, loss, lr, seconds: started.elapsed().as_secs_f64() });
            step += 1;
            if plan.mode == Mode::PseudoZeroShot {
                model.set_trainable(TrainablePolicy::None)?;
            }
        }
        let accuracy = tasks
            .iter()
            .zip(&hits)
            .map(|((name, _), h)| TaskAccuracy {
                task: name.clone(),
                top1: (h[2] > 0).then(|| h[0] as f64 / h[2] as f64),
                top5: (h[2] > 0).then(|| h[1] as f64 / h[2] as f64),
            })
            .collect();
        let retrieval = hook(epoch, model)?;
        log.epochs.push(EpochRecord { epoch, accuracy, retrieval });
    }
    Ok(log)
}

/// Infer-mode top-k accuracy of head `head` over a whole dataset.
pub fn dataset_accuracy(model: &ModelGraph, dataset: &Dataset, head: usize, k: usize) -> Result<Option<f64>> {
    let (h, w) = model.spec.input_size;
    let mut hit = 0.0;
    let mut n = 0;
    for chunk in dataset.examples.chunks(64) {
        let imgs: Vec<Tensor> = chunk.iter().map(|e| resize_bilinear(&e.image, h, w)).collect();
        let logits = model.logits(&Tensor::stack(&imgs)?)?;
        let labels: Vec<i64> = chunk.iter().map(|e| e.label as i64).collect();
        if let Some(a) = masked_topk_accuracy(&logits[head], &labels, k) {
            hit += a * chunk.len() as f64;
            n += chunk.len();
        }
    }
    Ok((n > 0).then(|| hit / n as f64))
}

/// Infer-mode mean triplet loss over every valid triplet of one epoch of
/// listing batches.
pub fn evaluate_triplet_loss(model: &ModelGraph, datasets: &[Dataset], plan: &TrainPlan, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = model.spec.input_size;
    let batches = listing_batches(datasets, plan.batch_size, plan.per_listing, &mut rng)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for bp in &batches {
        let imgs: Vec<Tensor> =
            bp.entries.iter().map(|&(d, i)| resize_bilinear(&datasets[d].examples[i].image, h, w)).collect();
        let ids: Vec<String> = bp.entries.iter().map(|&(d, i)| datasets[d].examples[i].listing_id.clone()).collect();
        let emb = model.embed_batch(&Tensor::stack(&imgs)?)?;
        let all = sample_triplets(&emb, &ids, Strategy::BatchAll, f64::INFINITY, &mut MiningStats::default())?;
        sum += mean_triplet_loss(&emb, &all.triplets, plan.margin)? * all.triplets.len() as f64;
        count += all.triplets.len();
    }
    if count == 0 {
        return Err(config_err!("no triplets could be formed"));
    }
    Ok(sum / count as f64)
}
