use serde::{Deserialize, Serialize};

use super::checkpoint::{CheckpointRecord, TrainingState};
use super::optim::{Adam, AdamConfig, OptimizerKind};
use crate::data::{batches, AugmentationSpec, DatasetManifest, Normalizer, SampleBatch, Split};
use crate::distill::{self, FeatureLoss, KlDirection, LossBreakdown, LossWeights, ObjectiveConfig};
use crate::error::{config_err, Error, Result};
use crate::network::{BundleValues, Head, Network};
use crate::nn::{log_softmax_tau, Gradients, Graph, Mode};
use crate::rng;
use crate::student::{Student, StudentConfig};
use crate::teacher::{Teacher, TeacherConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f32,
    /// Defaults to 0 for Adam and 1e-2 for AdamW.
    #[serde(default)]
    pub weight_decay: Option<f32>,
    /// Teacher learning rate when it differs from the student's.
    #[serde(default)]
    pub teacher_learning_rate: Option<f32>,
    #[serde(default = "defaults::patience")]
    pub early_stop_patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub feature_loss: FeatureLoss,
    #[serde(default)]
    pub kl_direction: KlDirection,
}

mod defaults {
    pub fn epochs() -> usize {
        100
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn learning_rate() -> f32 {
        1e-4
    }
    pub fn patience() -> usize {
        20
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            optimizer: OptimizerKind::Adam,
            learning_rate: defaults::learning_rate(),
            weight_decay: None,
            teacher_learning_rate: None,
            early_stop_patience: defaults::patience(),
            seed: 0,
            loss_weights: LossWeights::default(),
            feature_loss: FeatureLoss::Euclidean,
            kl_direction: KlDirection::MentorTarget,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(config_err!(
                "epochs, batch_size and early_stop_patience must be positive"
            ));
        }
        if self.early_stop_patience > self.epochs {
            return Err(config_err!(
                "early_stop_patience {} exceeds epochs {}",
                self.early_stop_patience,
                self.epochs
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!("learning_rate must be positive"));
        }
        self.adam_config(false).validate()?;
        self.adam_config(true).validate()?;
        self.loss_weights.validate()
    }

    pub fn effective_weight_decay(&self) -> f32 {
        self.weight_decay.unwrap_or(match self.optimizer {
            OptimizerKind::Adam => 0.0,
            OptimizerKind::Adamw => 1e-2,
        })
    }

    pub fn adam_config(&self, teacher: bool) -> AdamConfig {
        let lr = if teacher {
            self.teacher_learning_rate.unwrap_or(self.learning_rate)
        } else {
            self.learning_rate
        };
        AdamConfig::new(self.optimizer, lr, self.effective_weight_decay())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weights: self.loss_weights,
            feature_loss: self.feature_loss,
            kl_direction: self.kl_direction,
        }
    }
}

/// Builds both networks from independent substreams of `seed`.
pub fn build_networks(
    num_classes: usize,
    student: StudentConfig,
    teacher: TeacherConfig,
    seed: u64,
) -> Result<(Teacher, Student)> {
    let t = Teacher::new(
        num_classes,
        teacher,
        &mut rng::substream(seed, rng::DOMAIN_INIT_TEACHER, &[]),
    )?;
    let s = Student::new(
        num_classes,
        student,
        &mut rng::substream(seed, rng::DOMAIN_INIT_STUDENT, &[]),
    )?;
    Ok((t, s))
}

pub struct Optimizers {
    pub teacher: Adam,
    pub student: Adam,
}

impl Optimizers {
    pub fn new(teacher: &dyn Network, student: &dyn Network, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            teacher: Adam::new(cfg.adam_config(true), teacher.params())?,
            student: Adam::new(cfg.adam_config(false), student.params())?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub loss: f32,
    pub accuracy: f32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NetMetrics {
    pub main: HeadMetrics,
    pub aux: HeadMetrics,
}

impl NetMetrics {
    pub fn head(&self, head: Head) -> HeadMetrics {
        match head {
            Head::Main => self.main,
            Head::Aux => self.aux,
        }
    }
}

pub type EvalResult = NetMetrics;

/// Running sums of per-sample cross-entropy and correct predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HeadTally {
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

impl HeadTally {
    pub fn from_logits(logits: &Tensor, labels: &[usize]) -> Result<Self> {
        let (n, _) = logits.matrix_dims()?;
        let pred = logits.argmax_rows();
        let mut t = HeadTally {
            count: n,
            ..Default::default()
        };
        for (i, &y) in labels.iter().enumerate().take(n) {
            let lp = log_softmax_tau(logits.row(i), 1.0).map_err(|_| Error::NonFinite("logits".into()))?;
            t.loss_sum -= lp[y] as f64;
            t.correct += (pred[i] == y) as usize;
        }
        Ok(t)
    }

    fn merge(&mut self, o: &HeadTally) {
        self.loss_sum += o.loss_sum;
        self.correct += o.correct;
        self.count += o.count;
    }

    pub fn finish(&self) -> HeadMetrics {
        if self.count == 0 {
            return HeadMetrics::default();
        }
        HeadMetrics {
            loss: (self.loss_sum / self.count as f64) as f32,
            accuracy: self.correct as f32 / self.count as f32,
        }
    }
}

fn tallies(main: &Tensor, aux: &Tensor, labels: &[usize]) -> Result<[HeadTally; 2]> {
    Ok([
        HeadTally::from_logits(main, labels)?,
        HeadTally::from_logits(aux, labels)?,
    ])
}

/// Outcome of one sequential teacher-then-student step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub batch_len: usize,
    pub teacher_loss: f32,
    pub student: LossBreakdown,
    /// Teacher parameter fingerprint at the moment its targets were taken.
    pub teacher_fingerprint: Option<u64>,
    pub teacher_heads: [HeadTally; 2],
    pub student_heads: [HeadTally; 2],
}

fn check_grads(grads: &Gradients, what: &str) -> Result<()> {
    if grads.params().all(|(_, g)| g.all_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} gradients")))
    }
}

fn apply_grads(net: &mut dyn Network, opt: &mut Adam, grads: &Gradients, g: &mut Graph) -> Result<()> {
    let updates = g.take_state_updates();
    let store = net.params_mut();
    store.zero_grad();
    store.accumulate(grads);
    opt.step(store)?;
    store.apply_state_updates(updates);
    Ok(())
}

/// Teacher phase: train-mode forward, summed head cross-entropy, backward
/// and one optimizer step. Returns the loss and per-head tallies.
pub fn teacher_update(teacher: &mut dyn Network, opt: &mut Adam, batch: &SampleBatch) -> Result<(f32, [HeadTally; 2])> {
    let (mut g, b) = teacher.run(&batch.images, Mode::Train, true)?;
    let loss = distill::teacher_loss(&mut g, &b, &batch.labels)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("teacher loss ({value})")));
    }
    let grads = g.backward(loss)?;
    check_grads(&grads, "teacher")?;
    let heads = tallies(g.value(b.main_logits), g.value(b.aux_logits), &batch.labels)?;
    apply_grads(teacher, opt, &grads, &mut g)?;
    Ok((value, heads))
}

/// Detached teacher outputs from an eval-mode, gradient-free pass.
pub fn teacher_targets(teacher: &dyn Network, images: &Tensor) -> Result<BundleValues> {
    teacher.predict(images)
}

/// Student phase: train-mode forward, weighted objective against fixed
/// targets, backward and one optimizer step.
pub fn student_update(
    student: &mut dyn Network,
    opt: &mut Adam,
    batch: &SampleBatch,
    targets: &BundleValues,
    objective: &ObjectiveConfig,
) -> Result<(LossBreakdown, [HeadTally; 2])> {
    let (mut g, b) = student.run(&batch.images, Mode::Train, true)?;
    let t = targets.to_graph(&mut g);
    let (total, breakdown) = distill::student_total(&mut g, &b, &t, &batch.labels, objective)?;
    if !breakdown.is_finite() {
        return Err(Error::NonFinite(format!("student loss {breakdown:?}")));
    }
    let heads = tallies(g.value(b.main_logits), g.value(b.aux_logits), &batch.labels)?;
    if g.requires_grad(total) {
        let grads = g.backward(total)?;
        check_grads(&grads, "student")?;
        apply_grads(student, opt, &grads, &mut g)?;
    } else {
        student.params_mut().apply_state_updates(g.take_state_updates());
    }
    Ok((breakdown, heads))
}

/// One mini-batch: the teacher is updated first, then produces fresh
/// targets with its post-update weights, then the student is updated.
pub fn train_step_sequential(
    teacher: &mut dyn Network,
    student: &mut dyn Network,
    opts: &mut Optimizers,
    batch: &SampleBatch,
    objective: &ObjectiveConfig,
    fingerprint: bool,
) -> Result<StepStats> {
    let (teacher_loss, teacher_heads) = teacher_update(teacher, &mut opts.teacher, batch)?;
    let targets = teacher_targets(teacher, &batch.images)?;
    let teacher_fingerprint = fingerprint.then(|| teacher.params().fingerprint());
    let (mut breakdown, student_heads) = student_update(student, &mut opts.student, batch, &targets, objective)?;
    breakdown.teacher_total = teacher_loss;
    Ok(StepStats {
        batch_len: batch.labels.len(),
        teacher_loss,
        student: breakdown,
        teacher_fingerprint,
        teacher_heads,
        student_heads,
    })
}

/// Eval-mode, gradient-free loss and accuracy per head.
pub fn evaluate<I>(net: &dyn Network, data: I) -> Result<EvalResult>
where
    I: IntoIterator<Item = Result<SampleBatch>>,
{
    let mut acc = [HeadTally::default(); 2];
    for batch in data {
        let batch = batch?;
        let out = net.predict(&batch.images)?;
        let t = tallies(&out.main_logits, &out.aux_logits, &batch.labels)?;
        acc[0].merge(&t[0]);
        acc[1].merge(&t[1]);
    }
    if acc[0].count == 0 {
        return Err(config_err!("cannot evaluate on an empty dataset"));
    }
    Ok(NetMetrics {
        main: acc[0].finish(),
        aux: acc[1].finish(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    pub teacher_train: NetMetrics,
    pub teacher_val: NetMetrics,
    pub student_train: NetMetrics,
    pub student_val: NetMetrics,
    /// Sample-weighted means of the student loss components.
    pub components: LossBreakdown,
}

/// Tracks the best (accuracy, then lower loss) epoch. Only a strict
/// accuracy gain resets the patience counter.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_accuracy: f32,
    pub best_loss: f32,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_accuracy: f32::NEG_INFINITY,
            best_loss: f32::INFINITY,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    /// Records an epoch; returns true when it is the new best.
    pub fn observe(&mut self, epoch: usize, accuracy: f32, loss: f32) -> bool {
        let gained = self.best_epoch.is_none() || accuracy > self.best_accuracy;
        let better = gained || (accuracy == self.best_accuracy && loss < self.best_loss);
        if better {
            self.best_accuracy = accuracy;
            self.best_loss = loss;
            self.best_epoch = Some(epoch);
        }
        if gained {
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        better
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

/// Dataset plus the preprocessing used by [`fit`].
pub struct FitData<'a> {
    pub manifest: &'a DatasetManifest,
    pub augmentation: AugmentationSpec,
    pub normalizer: Normalizer,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub best_student: CheckpointRecord,
    pub best_teacher: CheckpointRecord,
}

/// Network tensors plus optimizer moments and training state.
pub fn checkpoint_record(net: &dyn Network, opt: Option<&Adam>, mut state: TrainingState) -> CheckpointRecord {
    let store = net.params();
    let mut tensors: Vec<(String, Tensor)> = store
        .iter()
        .map(|(_, p)| (p.name.clone(), (*p.values).clone()))
        .collect();
    if let Some(opt) = opt {
        tensors.extend(opt.state_tensors(store));
        state.step = opt.step;
    }
    state.network = net.kind().as_str().to_string();
    CheckpointRecord::new(tensors, state)
}

/// Loads every network tensor from `record`; all must be present with
/// matching shapes, and nothing is modified on failure.
pub fn restore_checkpoint(net: &mut dyn Network, record: &CheckpointRecord) -> Result<()> {
    let kind = net.kind().as_str();
    if !record.state.network.is_empty() && record.state.network != kind {
        return Err(Error::Load(format!(
            "checkpoint holds a {} network, expected {kind}",
            record.state.network
        )));
    }
    let mut updates = Vec::new();
    for (id, p) in net.params().iter() {
        let t = record
            .tensor(&p.name)
            .ok_or_else(|| Error::Load(format!("checkpoint lacks tensor {}", p.name)))?;
        if t.shape() != p.values.shape() {
            return Err(Error::Load(format!(
                "tensor {} has shape {:?}, network expects {:?}",
                p.name,
                t.shape(),
                p.values.shape()
            )));
        }
        updates.push((id, t.clone()));
    }
    let store = net.params_mut();
    for (id, t) in updates {
        store.set_values(id, t)?;
    }
    Ok(())
}

/// Runs epochs of [`train_step_sequential`] with validation after each
/// epoch, early stopping on student main-head val accuracy, and restores
/// the best weights into both networks at the end.
pub fn fit(
    teacher: &mut dyn Network,
    student: &mut dyn Network,
    data: &FitData<'_>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<FitOutcome> {
    cfg.validate()?;
    let m = data.manifest;
    if m.split_indices(Split::Train).is_empty() || m.split_indices(Split::Val).is_empty() {
        return Err(config_err!("training needs non-empty train and val splits"));
    }
    let objective = cfg.objective();
    let mut opts = Optimizers::new(&*teacher, &*student, cfg)?;
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut history = Vec::new();
    let mut best = None;
    let mut stopped_early = false;
    let val = |net: &dyn Network| -> Result<NetMetrics> {
        let it = batches(
            m,
            Split::Val,
            &data.augmentation,
            &data.normalizer,
            cfg.batch_size,
            cfg.seed,
            0,
            false,
        )?;
        evaluate(net, it)
    };
    for epoch in 1..=cfg.epochs {
        let mut t_heads = [HeadTally::default(); 2];
        let mut s_heads = [HeadTally::default(); 2];
        let mut comp = [0.0f64; 6];
        let mut seen = 0usize;
        let it = batches(
            m,
            Split::Train,
            &data.augmentation,
            &data.normalizer,
            cfg.batch_size,
            cfg.seed,
            epoch as u64,
            true,
        )?;
        for batch in it {
            let batch = batch?;
            let s = train_step_sequential(teacher, student, &mut opts, &batch, &objective, false)?;
            for k in 0..2 {
                t_heads[k].merge(&s.teacher_heads[k]);
                s_heads[k].merge(&s.student_heads[k]);
            }
            let b = s.student;
            let n = s.batch_len as f64;
            for (c, v) in comp
                .iter_mut()
                .zip([b.hard, b.feature, b.response, b.self_distill, b.total, b.teacher_total])
            {
                *c += v as f64 * n;
            }
            seen += s.batch_len;
        }
        let c = |i: usize| (comp[i] / seen as f64) as f32;
        let metrics = EpochMetrics {
            epoch,
            teacher_train: NetMetrics {
                main: t_heads[0].finish(),
                aux: t_heads[1].finish(),
            },
            teacher_val: val(&*teacher)?,
            student_train: NetMetrics {
                main: s_heads[0].finish(),
                aux: s_heads[1].finish(),
            },
            student_val: val(&*student)?,
            components: LossBreakdown {
                hard: c(0),
                feature: c(1),
                response: c(2),
                self_distill: c(3),
                total: c(4),
                teacher_total: c(5),
            },
        };
        log::info!(
            "epoch {epoch}: student val acc {:.4} loss {:.4}; teacher val acc {:.4}",
            metrics.student_val.main.accuracy,
            metrics.student_val.main.loss,
            metrics.teacher_val.main.accuracy
        );
        on_epoch(&metrics);
        let sv = metrics.student_val.main;
        history.push(metrics);
        if stopper.observe(epoch, sv.accuracy, sv.loss) {
            let state = TrainingState {
                epoch: epoch as u32,
                seed: cfg.seed,
                best_accuracy: sv.accuracy,
                best_loss: sv.loss,
                ..Default::default()
            };
            best = Some((
                checkpoint_record(&*student, Some(&opts.student), state.clone()),
                checkpoint_record(&*teacher, Some(&opts.teacher), state),
            ));
        }
        if stopper.should_stop() && epoch < cfg.epochs {
            stopped_early = true;
            break;
        }
    }
    let (best_student, best_teacher) = best.expect("at least one epoch ran");
    restore_checkpoint(student, &best_student)?;
    restore_checkpoint(teacher, &best_teacher)?;
    Ok(FitOutcome {
        history,
        best_epoch: stopper.best_epoch.unwrap_or(1),
        stopped_early,
        best_student,
        best_teacher,
    })
}
