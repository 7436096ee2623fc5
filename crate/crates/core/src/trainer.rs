//! Alternating minimax training.
//!
//! Every iteration samples one labeled and one unlabeled mini-batch per
//! domain, then
//!
//! 1. updates the shared extractor, the private extractors and the
//!    classifier by descending `L_c − α·L_adv − β·L_BF`, i.e. minimizing the
//!    classification loss while maximizing both the discriminator's loss and
//!    the batch Frobenius norm of the unlabeled predictions;
//! 2. updates the discriminator by descending `L_adv`, its domain
//!    classification loss on the shared features.
//!
//! The reported `combined` value is `L_c + α·L_adv − β·L_BF`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{densify, DomainTask, LabeledSample, SparseVector};
use crate::error::{Error, Result};
use crate::losses::{adversarial_loss, batch_frobenius_loss, classification_loss, combined_objective, LossBreakdown};
use crate::model::{init_model, ArchConfig, Component, MdtcModel, Mode};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Mini-batch size per domain, for each of the labeled and unlabeled pools.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub seed: u64,
    /// Validate every this many epochs (and after the last one).
    pub eval_every: usize,
    /// Iterations per epoch; by default enough to visit the largest pool of
    /// any domain once.
    pub iterations_per_epoch: Option<usize>,
    /// Verify after every step that the frozen half of the model is
    /// bit-identical. Defaults to on in debug builds.
    pub check_partition: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 1.0,
            batch_size: 16,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::AdaptiveMoment,
            epochs: 30,
            seed: 1,
            eval_every: 1,
            iterations_per_epoch: None,
            check_partition: cfg!(debug_assertions),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "alpha and beta must be >= 0, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.iterations_per_epoch == Some(0) {
            return Err(Error::Config("iterations_per_epoch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Walks a pool in shuffled order, reshuffling whenever it runs out.
#[derive(Clone, Debug)]
struct PoolCursor {
    order: Vec<usize>,
    pos: usize,
}

impl PoolCursor {
    fn new(len: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// One domain's mini-batches stacked into a single input matrix: labeled
/// rows first, then unlabeled rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl DomainBatch {
    pub fn num_labeled(&self) -> usize {
        self.labels.len()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.inputs.rows() - self.labels.len()
    }
}

/// Draws labeled batches `B^ℓ_i` and unlabeled batches `B^u_i`, one per
/// domain, without replacement within a pass over each pool.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    batch_size: usize,
    labeled: Vec<PoolCursor>,
    unlabeled: Vec<PoolCursor>,
}

impl BatchSampler {
    pub fn new(tasks: &[DomainTask], batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        for t in tasks {
            if t.train.is_empty() {
                return Err(Error::Data(format!("domain `{}` has no labeled training samples", t.name)));
            }
            if t.unlabeled.is_empty() {
                return Err(Error::Data(format!("domain `{}` has no unlabeled samples", t.name)));
            }
        }
        Ok(Self {
            batch_size,
            labeled: tasks.iter().map(|t| PoolCursor::new(t.train.len(), rng)).collect(),
            unlabeled: tasks.iter().map(|t| PoolCursor::new(t.unlabeled.len(), rng)).collect(),
        })
    }

    /// Sample indices `(labeled, unlabeled)` for every domain.
    pub fn next_indices(&mut self, rng: &mut ChaCha8Rng) -> Vec<(Vec<usize>, Vec<usize>)> {
        let b = self.batch_size;
        self.labeled
            .iter_mut()
            .zip(self.unlabeled.iter_mut())
            .map(|(l, u)| (l.take(b, rng), u.take(b, rng)))
            .collect()
    }

    pub fn next_batches(&mut self, tasks: &[DomainTask], arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Vec<DomainBatch> {
        self.next_indices(rng)
            .into_iter()
            .zip(tasks)
            .map(|((li, ui), task)| {
                let rows = li
                    .iter()
                    .map(|&i| &task.train[i].features)
                    .chain(ui.iter().map(|&i| &task.unlabeled[i]));
                DomainBatch {
                    inputs: densify(rows, arch.input_dim, arch.input_transform),
                    labels: li.iter().map(|&i| task.train[i].label).collect(),
                }
            })
            .collect()
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: MdtcModel,
    pub optimizer: Optimizer,
    /// Completed main-step/discriminator-step pairs.
    pub iteration: usize,
    pub sampler: BatchSampler,
    pub rng: ChaCha8Rng,
}

/// Per-domain `L_c`, `L_adv` and `L_BF` variables for stacked batches.
struct DomainTerms {
    l_c: Var,
    l_adv: Var,
    l_bf: Var,
}

fn record_terms(
    tape: &mut Tape<'_>,
    bound: &crate::model::BoundModel,
    batches: &[Var],
    labels: &[&[usize]],
    mode: &mut Mode<'_>,
) -> Result<Vec<DomainTerms>> {
    let mut out = Vec::with_capacity(batches.len());
    for (d, (&x, y)) in batches.iter().zip(labels).enumerate() {
        let rows = tape.value(x).rows();
        let n_lab = y.len();
        let shared = bound.shared_features(tape, x, mode)?;
        let private = bound.private_features(tape, x, d, mode)?;
        let class_lp = bound.classify(tape, shared, private)?;
        let lab_lp = tape.slice_rows(class_lp, 0, n_lab)?;
        let unl_lp = tape.slice_rows(class_lp, n_lab, rows - n_lab)?;
        let l_c = classification_loss(tape, lab_lp, y)?;
        let l_bf = batch_frobenius_loss(tape, unl_lp)?;
        let domain_lp = bound.discriminate(tape, shared)?;
        let l_adv = adversarial_loss(tape, domain_lp, &vec![d; rows])?;
        out.push(DomainTerms { l_c, l_adv, l_bf });
    }
    Ok(out)
}

fn sum_vars(tape: &mut Tape<'_>, vars: impl IntoIterator<Item = Var>) -> Result<Var> {
    let mut it = vars.into_iter();
    let first = it.next().ok_or_else(|| Error::Data("no domains".into()))?;
    it.try_fold(first, |acc, v| tape.add(acc, v))
}

/// Records the summed loss terms and `L_c + α·L_adv − β·L_BF` on `tape`.
///
/// Returns `(l_c, l_adv, l_bf, combined)`. Which parameters receive
/// gradients is decided by how the model was bound.
pub fn record_objective(
    tape: &mut Tape<'_>,
    bound: &crate::model::BoundModel,
    batches: &[Var],
    labels: &[&[usize]],
    alpha: f64,
    beta: f64,
    mode: &mut Mode<'_>,
) -> Result<(Var, Var, Var, Var)> {
    let terms = record_terms(tape, bound, batches, labels, mode)?;
    let l_c = sum_vars(tape, terms.iter().map(|t| t.l_c))?;
    let l_adv = sum_vars(tape, terms.iter().map(|t| t.l_adv))?;
    let l_bf = sum_vars(tape, terms.iter().map(|t| t.l_bf))?;
    let adv = tape.scale(l_adv, alpha);
    let bf = tape.scale(l_bf, beta);
    let plus = tape.add(l_c, adv)?;
    let combined = tape.sub(plus, bf)?;
    Ok((l_c, l_adv, l_bf, combined))
}

fn snapshot(model: &MdtcModel, keep: impl Fn(Component) -> bool) -> Vec<Tensor> {
    model
        .named_parameters()
        .into_iter()
        .filter(|p| keep(p.component))
        .map(|p| p.tensor.clone())
        .collect()
}

fn collect_grads(bound_vars: &[Var], grads: &mut crate::tensor::Gradients) -> Vec<Option<Tensor>> {
    bound_vars.iter().map(|&v| grads.take(v)).collect()
}

/// One descent step for the shared extractor, private extractors and
/// classifier. The discriminator is left untouched.
pub fn main_step(state: &mut TrainState, batches: &[DomainBatch], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let TrainState {
        model, optimizer, rng, ..
    } = state;
    let (breakdown, mut grads) = {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, Component::is_feature_side);
        let xs: Vec<Var> = batches.iter().map(|b| tape.borrowed(&b.inputs, false)).collect();
        let labels: Vec<&[usize]> = batches.iter().map(|b| b.labels.as_slice()).collect();
        let mut mode = Mode::Train(rng);
        let (l_c, l_adv, l_bf, _) = record_objective(&mut tape, &bound, &xs, &labels, cfg.alpha, cfg.beta, &mut mode)?;
        let breakdown = combined_objective(
            tape.item(l_c)?,
            tape.item(l_adv)?,
            tape.item(l_bf)?,
            cfg.alpha,
            cfg.beta,
        );
        if !breakdown.is_finite() {
            return Err(Error::NonFinite(format!("main step losses {breakdown:?}")));
        }
        // The feature side maximizes the discriminator's loss.
        let adv = tape.scale(l_adv, cfg.alpha);
        let bf = tape.scale(l_bf, cfg.beta);
        let minus_adv = tape.sub(l_c, adv)?;
        let objective = tape.sub(minus_adv, bf)?;
        let mut g = tape.backward(objective)?;
        (breakdown, collect_grads(&bound.vars, &mut g))
    };

    let before = cfg
        .check_partition
        .then(|| snapshot(model, |c| c == Component::Discriminator));
    // Gradients for frozen parameters are absent already; clear them
    // explicitly so the partition does not hinge on how the model was bound.
    for (g, c) in grads.iter_mut().zip(model.components()) {
        if !c.is_feature_side() {
            *g = None;
        }
    }
    optimizer.step(model.parameters_mut(), &grads);
    if let Some(before) = before {
        if before != snapshot(model, |c| c == Component::Discriminator) {
            return Err(Error::Config("main step modified discriminator parameters".into()));
        }
    }
    Ok(breakdown)
}

/// One descent step on the discriminator's domain NLL over the shared
/// features of every labeled and unlabeled batch. Returns the loss averaged
/// over domains (the per-sample NLL for equal batch sizes).
pub fn discriminator_step(state: &mut TrainState, batches: &[DomainBatch], cfg: &TrainConfig) -> Result<f64> {
    let TrainState {
        model, optimizer, rng, ..
    } = state;
    let (loss, mut grads) = {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, |c| c == Component::Discriminator);
        let mut mode = Mode::Train(rng);
        let mut per_domain = Vec::with_capacity(batches.len());
        for (d, b) in batches.iter().enumerate() {
            let x = tape.borrowed(&b.inputs, false);
            let shared = bound.shared_features(&mut tape, x, &mut mode)?;
            let lp = bound.discriminate(&mut tape, shared)?;
            per_domain.push(adversarial_loss(&mut tape, lp, &vec![d; b.inputs.rows()])?);
        }
        let total = sum_vars(&mut tape, per_domain)?;
        let value = tape.item(total)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("discriminator loss {value}")));
        }
        let mut g = tape.backward(total)?;
        (value / batches.len() as f64, collect_grads(&bound.vars, &mut g))
    };

    let before = cfg.check_partition.then(|| snapshot(model, Component::is_feature_side));
    for (g, c) in grads.iter_mut().zip(model.components()) {
        if c != Component::Discriminator {
            *g = None;
        }
    }
    optimizer.step(model.parameters_mut(), &grads);
    if let Some(before) = before {
        if before != snapshot(model, Component::is_feature_side) {
            return Err(Error::Config("discriminator step modified feature-side parameters".into()));
        }
    }
    Ok(loss)
}

/// Mean losses over one epoch, and validation accuracy when evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub l_c: f64,
    pub l_adv: f64,
    pub l_bf: f64,
    pub combined: f64,
    pub discriminator_loss: f64,
    /// Per-domain validation accuracy in `[0, 1]`.
    pub validation: Option<Vec<f64>>,
    pub seconds: f64,
}

impl EpochReport {
    pub fn mean_validation(&self) -> Option<f64> {
        self.validation.as_deref().map(mean)
    }

    /// `epoch l_c l_adv l_bf combined acc_d1..acc_dM acc_mean`, tab-separated,
    /// accuracies in percent. Epochs without validation print `-`.
    pub fn log_line(&self, num_domains: usize) -> String {
        let mut fields = vec![
            self.epoch.to_string(),
            format!("{:.6}", self.l_c),
            format!("{:.6}", self.l_adv),
            format!("{:.6}", self.l_bf),
            format!("{:.6}", self.combined),
        ];
        match &self.validation {
            Some(acc) => {
                fields.extend(acc.iter().map(|a| format!("{:.2}", 100.0 * a)));
                fields.push(format!("{:.2}", 100.0 * mean(acc)));
            }
            None => fields.extend(std::iter::repeat_n("-".to_string(), num_domains + 1)),
        }
        fields.join("\t")
    }
}

/// Header matching [`EpochReport::log_line`].
pub fn log_header(num_domains: usize) -> String {
    let mut fields: Vec<String> = ["epoch", "l_c", "l_adv", "l_bf", "combined"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    fields.extend((1..=num_domains).map(|d| format!("acc_d{d}")));
    fields.push("acc_mean".into());
    fields.join("\t")
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Drives epochs of alternating steps over a fixed set of domain tasks.
pub struct Trainer<'t> {
    tasks: &'t [DomainTask],
    cfg: TrainConfig,
    state: TrainState,
    iterations_per_epoch: usize,
    epochs_done: usize,
}

impl<'t> Trainer<'t> {
    pub fn new(tasks: &'t [DomainTask], model: MdtcModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if tasks.len() != model.num_domains {
            return Err(Error::Data(format!(
                "model has {} domains but {} tasks were given",
                model.num_domains,
                tasks.len()
            )));
        }
        for t in tasks {
            if let Some(s) = t.train.iter().find(|s| s.label >= model.num_classes) {
                return Err(Error::Index {
                    what: "class label",
                    index: s.label,
                    limit: model.num_classes,
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let sampler = BatchSampler::new(tasks, cfg.batch_size, &mut rng)?;
        let iterations_per_epoch = cfg.iterations_per_epoch.unwrap_or_else(|| {
            let largest = tasks
                .iter()
                .map(|t| t.train.len().max(t.unlabeled.len()))
                .max()
                .unwrap_or(1);
            largest.div_ceil(cfg.batch_size)
        });
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.named_parameters().len());
        Ok(Self {
            tasks,
            cfg,
            state: TrainState {
                model,
                optimizer,
                iteration: 0,
                sampler,
                rng,
            },
            iterations_per_epoch,
            epochs_done: 0,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn model(&self) -> &MdtcModel {
        &self.state.model
    }

    pub fn into_model(self) -> MdtcModel {
        self.state.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.iterations_per_epoch
    }

    /// One main step followed by one discriminator step on fresh batches.
    pub fn step(&mut self) -> Result<(LossBreakdown, f64)> {
        let batches = self
            .state
            .sampler
            .next_batches(self.tasks, &self.state.model.arch, &mut self.state.rng);
        let losses = main_step(&mut self.state, &batches, &self.cfg)?;
        let d_loss = discriminator_step(&mut self.state, &batches, &self.cfg)?;
        self.state.iteration += 1;
        Ok((losses, d_loss))
    }

    /// Runs one epoch and validates if due.
    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        let start = Instant::now();
        let n = self.iterations_per_epoch;
        let mut sums = [0.0f64; 5];
        for _ in 0..n {
            let (l, d) = self.step()?;
            for (s, v) in sums.iter_mut().zip([l.l_c, l.l_adv, l.l_bf, l.combined, d]) {
                *s += v;
            }
        }
        self.epochs_done += 1;
        let due = self.epochs_done.is_multiple_of(self.cfg.eval_every) || self.epochs_done == self.cfg.epochs;
        let validation = if due && self.tasks.iter().all(|t| !t.validation.is_empty()) {
            Some(evaluate(&self.state.model, self.tasks, Split::Validation)?)
        } else {
            None
        };
        let nf = n as f64;
        Ok(EpochReport {
            epoch: self.epochs_done,
            l_c: sums[0] / nf,
            l_adv: sums[1] / nf,
            l_bf: sums[2] / nf,
            combined: sums[3] / nf,
            discriminator_loss: sums[4] / nf,
            validation,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The checkpoint with the best mean validation accuracy, or the final
    /// model if validation never ran.
    pub model: MdtcModel,
    pub reports: Vec<EpochReport>,
    /// 1-based epoch of `model`; `None` for the untrained initial model.
    pub selected_epoch: Option<usize>,
}

/// Initializes a model from `arch` and trains it for `cfg.epochs` epochs.
pub fn train(tasks: &[DomainTask], arch: &ArchConfig, num_classes: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let model = init_model(arch, tasks.len(), num_classes, cfg.seed)?;
    train_from(tasks, model, cfg, |_| {})
}

/// Trains an existing model, calling `observe` after every epoch.
pub fn train_from(
    tasks: &[DomainTask],
    model: MdtcModel,
    cfg: &TrainConfig,
    observe: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    if cfg.epochs == 0 {
        cfg.validate()?;
        return Ok(TrainOutcome {
            model,
            reports: Vec::new(),
            selected_epoch: None,
        });
    }
    Trainer::new(tasks, model, cfg.clone())?.fit(observe)
}

impl Trainer<'_> {
    /// Runs the remaining epochs of the budget. On error the trainer keeps
    /// the last model that completed a step, so callers can snapshot it.
    pub fn fit(&mut self, mut observe: impl FnMut(&EpochReport)) -> Result<TrainOutcome> {
        let mut reports = Vec::with_capacity(self.cfg.epochs);
        let mut best: Option<(f64, usize, MdtcModel)> = None;
        while self.epochs_done < self.cfg.epochs {
            let report = self.run_epoch()?;
            observe(&report);
            if let Some(acc) = report.mean_validation() {
                if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                    best = Some((acc, report.epoch, self.model().clone()));
                }
            }
            reports.push(report);
        }
        let (model, selected_epoch) = match best {
            Some((_, epoch, model)) => (model, Some(epoch)),
            None => (self.model().clone(), Some(self.epochs_done)),
        };
        Ok(TrainOutcome {
            model,
            reports,
            selected_epoch,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn samples(self, task: &DomainTask) -> &[LabeledSample] {
        match self {
            Split::Train => &task.train,
            Split::Validation => &task.validation,
            Split::Test => &task.test,
        }
    }
}

const EVAL_CHUNK: usize = 256;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-domain accuracy of argmax predictions on `split`.
pub fn evaluate(model: &MdtcModel, tasks: &[DomainTask], split: Split) -> Result<Vec<f64>> {
    tasks
        .iter()
        .enumerate()
        .map(|(d, task)| {
            let samples = split.samples(task);
            if samples.is_empty() {
                return Err(Error::Data(format!("domain `{}` has an empty {split:?} split", task.name)));
            }
            let mut correct = 0usize;
            for chunk in samples.chunks(EVAL_CHUNK) {
                let x = densify(chunk.iter().map(|s| &s.features), model.arch.input_dim, model.arch.input_transform);
                let lp = model.forward_classify(&x, d)?;
                correct += chunk
                    .iter()
                    .enumerate()
                    .filter(|(r, s)| argmax(lp.row(*r)) == s.label)
                    .count();
            }
            Ok(correct as f64 / samples.len() as f64)
        })
        .collect()
}

/// Mean over samples of the largest class probability on each domain's
/// unlabeled pool, averaged over domains.
pub fn mean_max_probability(model: &MdtcModel, tasks: &[DomainTask]) -> Result<f64> {
    let per_domain = tasks
        .iter()
        .enumerate()
        .map(|(d, task)| {
            let mut total = 0.0;
            for chunk in task.unlabeled.chunks(EVAL_CHUNK) {
                let x = densify(chunk, model.arch.input_dim, model.arch.input_transform);
                let lp = model.forward_classify(&x, d)?;
                total += (0..lp.rows())
                    .map(|r| lp.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max).exp())
                    .sum::<f64>();
            }
            Ok(total / task.unlabeled.len().max(1) as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean(&per_domain))
}

/// Per-sample domain NLL of the model's discriminator on the given pools,
/// averaged within each domain and then across domains.
pub fn discriminator_nll(model: &MdtcModel, pools: &[Vec<&SparseVector>]) -> Result<f64> {
    let per_domain = pools
        .iter()
        .enumerate()
        .map(|(d, pool)| {
            let mut total = 0.0;
            for chunk in pool.chunks(EVAL_CHUNK) {
                let x = densify(chunk.iter().copied(), model.arch.input_dim, model.arch.input_transform);
                let lp = model.forward_discriminate(&x)?;
                total -= (0..lp.rows()).map(|r| lp.get(r, d)).sum::<f64>();
            }
            Ok(total / pool.len().max(1) as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean(&per_domain))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, holdout_split, SyntheticConfig};
    use crate::model::init_model;

    fn toy_arch() -> ArchConfig {
        ArchConfig {
            input_dim: 12,
            extractor_hidden: vec![8],
            shared_dim: 4,
            private_dim: 2,
            dropout: 0.0,
            ..Default::default()
        }
    }

    fn toy_tasks(m: usize, shift: f64, labeled: usize) -> Vec<DomainTask> {
        let cfg = SyntheticConfig {
            num_domains: m,
            feature_dim: 12,
            labeled_per_domain: labeled + 40,
            unlabeled_per_domain: 40,
            domain_shift: shift,
            signal_features: 3,
            nuisance_features: 2,
            class_signal: 1.0,
            seed: 5,
            ..Default::default()
        };
        gen_synthetic(&cfg)
            .unwrap()
            .iter()
            .map(|d| holdout_split(d, labeled, 20).unwrap())
            .collect()
    }

    fn state_for(tasks: &[DomainTask], cfg: &TrainConfig, seed: u64) -> TrainState {
        let model = init_model(&toy_arch(), tasks.len(), 2, seed).unwrap();
        let trainer = Trainer::new(tasks, model, cfg.clone()).unwrap();
        trainer.state
    }

    #[test]
    fn sampler_shapes_and_determinism() {
        let tasks = toy_tasks(4, 1.0, 30);
        let arch = toy_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = BatchSampler::new(&tasks, 16, &mut rng).unwrap();
        let batches = s.next_batches(&tasks, &arch, &mut rng);
        assert_eq!(batches.len(), 4);
        for b in &batches {
            assert_eq!(b.num_labeled(), 16);
            assert_eq!(b.num_unlabeled(), 16);
            assert_eq!(b.inputs.shape(), (32, 12));
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let mut s2 = BatchSampler::new(&tasks, 16, &mut rng2).unwrap();
        assert_eq!(s2.next_batches(&tasks, &arch, &mut rng2), batches);
    }

    #[test]
    fn pool_of_exactly_batch_size_is_visited_whole_each_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = PoolCursor::new(16, &mut rng);
        for _ in 0..3 {
            let mut idx = c.take(16, &mut rng);
            idx.sort_unstable();
            assert_eq!(idx, (0..16).collect::<Vec<_>>());
        }
    }

    #[test]
    fn empty_pool_is_a_data_error_naming_the_domain() {
        let mut tasks = toy_tasks(2, 0.0, 10);
        tasks[1].unlabeled.clear();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match BatchSampler::new(&tasks, 4, &mut rng) {
            Err(Error::Data(msg)) => assert!(msg.contains("domain2"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn supervised_ablation_ignores_discriminator_and_frobenius() {
        let tasks = toy_tasks(2, 1.0, 20);
        let cfg = TrainConfig {
            alpha: 0.0,
            beta: 0.0,
            batch_size: 4,
            optimizer: OptimizerKind::PlainSgd,
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut a = state_for(&tasks, &cfg, 1);
        let mut b = a.clone();
        // Different discriminator weights must not change the feature update.
        for t in b.model.discriminator.layers.iter_mut() {
            t.weight = t.weight.map(|v| -2.0 * v + 0.1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batches = a.sampler.next_batches(&tasks, &toy_arch(), &mut rng);

        // Expected update from the classification loss alone.
        let expected: Vec<Tensor> = {
            let mut tape = Tape::new();
            let bound = a.model.bind(&mut tape, Component::is_feature_side);
            let mut parts = Vec::new();
            for (d, batch) in batches.iter().enumerate() {
                let x = tape.borrowed(&batch.inputs, false);
                let s = bound.shared_features(&mut tape, x, &mut Mode::Eval).unwrap();
                let p = bound.private_features(&mut tape, x, d, &mut Mode::Eval).unwrap();
                let lp = bound.classify(&mut tape, s, p).unwrap();
                let lab = tape.slice_rows(lp, 0, batch.num_labeled()).unwrap();
                parts.push(classification_loss(&mut tape, lab, &batch.labels).unwrap());
            }
            let total = sum_vars(&mut tape, parts).unwrap();
            let mut g = tape.backward(total).unwrap();
            let grads = collect_grads(&bound.vars, &mut g);
            a.model
                .named_parameters()
                .iter()
                .zip(grads)
                .map(|(p, g)| match g {
                    Some(g) => {
                        let data = p.tensor.data().iter().zip(g.data()).map(|(w, d)| w - 0.1 * d).collect();
                        Tensor::new(p.tensor.rows(), p.tensor.cols(), data).unwrap()
                    }
                    None => p.tensor.clone(),
                })
                .collect()
        };

        main_step(&mut a, &batches, &cfg).unwrap();
        main_step(&mut b, &batches, &cfg).unwrap();
        for ((pa, pb), e) in a.model.named_parameters().iter().zip(b.model.named_parameters()).zip(&expected) {
            if pa.component.is_feature_side() {
                assert_eq!(pa.tensor, pb.tensor, "{}", pa.name);
                for (x, y) in pa.tensor.data().iter().zip(e.data()) {
                    assert!((x - y).abs() < 1e-12, "{}", pa.name);
                }
            }
        }
    }

    #[test]
    fn main_step_descends_feature_objective() {
        let tasks = toy_tasks(2, 1.0, 20);
        for optimizer in [OptimizerKind::PlainSgd, OptimizerKind::AdaptiveMoment] {
            let cfg = TrainConfig {
                batch_size: 8,
                optimizer,
                learning_rate: 1e-4,
                ..Default::default()
            };
            let mut state = state_for(&tasks, &cfg, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let batches = state.sampler.next_batches(&tasks, &toy_arch(), &mut rng);
            let eval = |model: &MdtcModel| {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, |_| false);
                let xs: Vec<Var> = batches.iter().map(|b| tape.borrowed(&b.inputs, false)).collect();
                let labels: Vec<&[usize]> = batches.iter().map(|b| b.labels.as_slice()).collect();
                let (c, a, f, _) =
                    record_objective(&mut tape, &bound, &xs, &labels, cfg.alpha, cfg.beta, &mut Mode::Eval).unwrap();
                combined_objective(tape.item(c).unwrap(), tape.item(a).unwrap(), tape.item(f).unwrap(), cfg.alpha, cfg.beta)
                    .feature_objective()
            };
            let before = eval(&state.model);
            main_step(&mut state, &batches, &cfg).unwrap();
            let after = eval(&state.model);
            assert!(after < before, "{optimizer:?}: {after} !< {before}");
        }
    }

    #[test]
    fn steps_respect_update_partition() {
        let tasks = toy_tasks(3, 1.0, 20);
        let cfg = TrainConfig {
            batch_size: 4,
            learning_rate: 1e-2,
            check_partition: true,
            ..Default::default()
        };
        let mut state = state_for(&tasks, &cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = state.sampler.next_batches(&tasks, &toy_arch(), &mut rng);

        let before = state.model.clone();
        main_step(&mut state, &batches, &cfg).unwrap();
        assert_eq!(before.discriminator, state.model.discriminator);
        assert_ne!(before.shared, state.model.shared);

        let before = state.model.clone();
        discriminator_step(&mut state, &batches, &cfg).unwrap();
        assert_eq!(before.shared, state.model.shared);
        assert_eq!(before.private, state.model.private);
        assert_eq!(before.classifier, state.model.classifier);
        assert_ne!(before.discriminator, state.model.discriminator);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let tasks = toy_tasks(2, 0.0, 10);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train(&tasks, &toy_arch(), 2, &cfg).unwrap();
        assert!(out.reports.is_empty());
        assert_eq!(out.model, init_model(&toy_arch(), 2, 2, cfg.seed).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let tasks = toy_tasks(2, 1.0, 20);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let a = train(&tasks, &toy_arch(), 2, &cfg).unwrap();
        let b = train(&tasks, &toy_arch(), 2, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        let strip = |r: &[EpochReport]| r.iter().map(|e| (e.l_c, e.l_adv, e.l_bf, e.validation.clone())).collect::<Vec<_>>();
        assert_eq!(strip(&a.reports), strip(&b.reports));
    }

    #[test]
    fn evaluation_counts_ties_as_first_class() {
        let tasks = toy_tasks(2, 0.0, 20);
        let mut model = init_model(&toy_arch(), 2, 2, 0).unwrap();
        let last = model.classifier.layers.len() - 1;
        model.classifier.layers[last].weight = Tensor::zeros(6, 2);
        let acc = evaluate(&model, &tasks, Split::Test).unwrap();
        for (a, t) in acc.iter().zip(&tasks) {
            let first = t.test.iter().filter(|s| s.label == 0).count() as f64 / t.test.len() as f64;
            assert_eq!(*a, first);
        }
        let mut empty = tasks.clone();
        empty[0].test.clear();
        assert!(matches!(evaluate(&model, &empty, Split::Test), Err(Error::Data(_))));
    }

    #[test]
    fn log_line_layout() {
        let r = EpochReport {
            epoch: 3,
            l_c: 0.5,
            l_adv: 1.25,
            l_bf: 0.2,
            combined: 0.925,
            discriminator_loss: 0.6,
            validation: Some(vec![0.9, 0.8]),
            seconds: 0.0,
        };
        assert_eq!(r.log_line(2), "3\t0.500000\t1.250000\t0.200000\t0.925000\t90.00\t80.00\t85.00");
        assert_eq!(log_header(2), "epoch\tl_c\tl_adv\tl_bf\tcombined\tacc_d1\tacc_d2\tacc_mean");
        let r = EpochReport { validation: None, ..r };
        assert!(r.log_line(2).ends_with("\t-\t-\t-"));
    }
}
