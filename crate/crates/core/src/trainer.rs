//! Per-task optimization: local cross-entropy, early-exit distillation
//! against the previous task's shared adapter, gradient reassignment on the
//! shared up-projections, and orthogonality of block weights.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adapters::{init_specific, AdapterSlot, BlockWeights, SharedAdapter, SpecificAdapter};
use crate::classifier::{compute_prototypes, PrototypeStore};
use crate::diffgraph::{backward, GradientBundle, Gradients, LossTerm, ParamKey, ParamTag, Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{LocalHead, Model, Route, TaskAdapters};
use crate::numerics::{dimension_preserving_normalize, softmax_temperature, Matrix, SeededRng};
use crate::streams::Task;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}, expected sgd or adam"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_kd: f64,
    pub lambda_orth: f64,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Early-exit distillation.
    pub kd: bool,
    /// Gradient reassignment of the distillation gradient.
    pub gr: bool,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_kd: 5.0,
            lambda_orth: 1e-4,
            tau: 2.0,
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            kd: true,
            gr: true,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda_kd >= 0.0) || !(self.lambda_orth >= 0.0) {
            return bad(format!(
                "loss weights must be nonnegative, got {} and {}",
                self.lambda_kd, self.lambda_orth
            ));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be finite and nonnegative, got {}", self.learning_rate));
        }
        Ok(())
    }
}

/// Shared adapter as it stood when the previous task finished.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSnapshot {
    pub shared: SharedAdapter,
    pub row_norms: BTreeMap<AdapterSlot, Vec<f64>>,
    /// Previous task's adapters; only used when the specific segment comes
    /// first and so precedes the distillation exit.
    pub previous: Option<TaskAdapters>,
}

impl TeacherSnapshot {
    pub fn take(model: &Model) -> Self {
        let shared = model.shared().clone();
        Self {
            row_norms: shared.up_norms(),
            previous: if model.adapter_config().flip {
                model.tasks().last().cloned()
            } else {
                None
            },
            shared,
        }
    }
}

/// Mean `−log softmax(row)[label]` over the rows of `logits`.
pub fn local_ce_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape {
            op: "local_ce_loss",
            left: logits.shape(),
            right: (labels.len(), logits.cols()),
        });
    }
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= logits.cols() {
            return Err(Error::Label {
                label,
                classes: logits.cols(),
            });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok(total / labels.len() as f64)
}

/// Soft cross-entropy of the student's tempered head distribution against
/// the teacher's, both through the same head.
pub fn kd_loss(task: usize, student_cls: &[f64], teacher_cls: &[f64], head: &LocalHead, tau: f64) -> Result<f64> {
    if task <= 1 {
        return Err(Error::Protocol("distillation needs a previous task".into()));
    }
    let target = softmax_temperature(&head.logits(teacher_cls), tau)?;
    let q = softmax_temperature(&head.logits(student_cls), tau)?;
    Ok(-target.iter().zip(&q).map(|(p, q)| p * q.ln()).sum::<f64>())
}

/// `Σ_i |⟨current, previous_i⟩|`.
pub fn orth_loss(current: &[f64], previous: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for p in previous {
        if p.len() != current.len() {
            return Err(Error::Shape {
                op: "orth_loss",
                left: (1, current.len()),
                right: (1, p.len()),
            });
        }
        total += current.iter().zip(p).map(|(a, b)| a * b).sum::<f64>().abs();
    }
    Ok(total)
}

/// Scales row `j` of `grad` by `σ(prev_norms)_j`.
pub fn reassign_gradient(grad: &Matrix, prev_norms: &[f64]) -> Result<Matrix> {
    if prev_norms.len() != grad.rows() {
        return Err(Error::Shape {
            op: "reassign_gradient",
            left: grad.shape(),
            right: (prev_norms.len(), 1),
        });
    }
    let sigma = dimension_preserving_normalize(prev_norms)?;
    let mut out = grad.clone();
    for (j, s) in sigma.iter().enumerate() {
        for v in out.row_mut(j) {
            *v *= s;
        }
    }
    Ok(out)
}

/// Per-parameter update gradient from a step's loss-term bundle.
pub fn total_step_gradient(
    bundle: &GradientBundle,
    cfg: &TrainConfig,
    task: usize,
    snapshot: Option<&TeacherSnapshot>,
) -> Result<Gradients> {
    if cfg.kd && task > 1 && snapshot.is_none() {
        return Err(Error::Protocol(format!("task {task} needs a teacher snapshot")));
    }
    let zero = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
    let mut out = Gradients::new();
    for (key, ce) in bundle.term(LossTerm::Ce) {
        let mut g = ce.clone();
        match key.tag() {
            ParamTag::SharedUp | ParamTag::SharedDown | ParamTag::Head => {
                let kd = bundle.get(LossTerm::Kd, key).cloned().unwrap_or_else(|| zero(ce));
                let kd = match (key, snapshot) {
                    (ParamKey::SharedUp { block, proj }, Some(snap)) if cfg.gr => {
                        let norms = snap.row_norms.get(&(*block, *proj)).ok_or_else(|| {
                            Error::Internal(format!("no snapshot norms for {key}"))
                        })?;
                        reassign_gradient(&kd, norms)?
                    }
                    _ => kd,
                };
                g.axpy(cfg.lambda_kd, &kd)?;
            }
            ParamTag::SpecificUp | ParamTag::SpecificDown | ParamTag::BlockWeight => {
                if let Some(orth) = bundle.get(LossTerm::Orth, key) {
                    g.axpy(cfg.lambda_orth, orth)?;
                }
            }
            ParamTag::Backbone => {
                return Err(Error::Internal(format!("gradient for frozen {key}")));
            }
        }
        out.insert(*key, g);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub ce: f64,
    pub kd: f64,
    pub orth: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: usize,
    pub epoch: usize,
    pub loss_ce: f64,
    pub loss_kd: f64,
    pub loss_orth: f64,
    pub loss_total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLoss>,
}

#[derive(Clone, Debug)]
struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    step: i32,
    m: BTreeMap<ParamKey, Matrix>,
    v: BTreeMap<ParamKey, Matrix>,
}

impl OptimizerState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(kind: Optimizer, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    fn update(&mut self, key: ParamKey, param: &Matrix, grad: &Matrix) -> Result<Matrix> {
        let mut out = param.clone();
        match self.kind {
            Optimizer::Sgd => out.axpy(-self.lr, grad)?,
            Optimizer::Adam => {
                let zeros = || Matrix::zeros(grad.rows(), grad.cols());
                let m = self.m.entry(key).or_insert_with(zeros);
                let v = self.v.entry(key).or_insert_with(zeros);
                let c1 = 1.0 - Self::BETA1.powi(self.step);
                let c2 = 1.0 - Self::BETA2.powi(self.step);
                for i in 0..grad.len() {
                    let g = grad.data()[i];
                    let mi = Self::BETA1 * m.data()[i] + (1.0 - Self::BETA1) * g;
                    let vi = Self::BETA2 * v.data()[i] + (1.0 - Self::BETA2) * g * g;
                    m.data_mut()[i] = mi;
                    v.data_mut()[i] = vi;
                    out.data_mut()[i] -= self.lr * (mi / c1) / ((vi / c2).sqrt() + Self::EPS);
                }
            }
        }
        Ok(out)
    }
}

/// State of one task while it trains.
#[derive(Clone, Debug)]
pub struct TaskSession {
    task: usize,
    cfg: TrainConfig,
    specific: SpecificAdapter,
    weights: BlockWeights,
    head: LocalHead,
    snapshot: Option<TeacherSnapshot>,
    tokens: Vec<Matrix>,
    labels: Vec<usize>,
    /// Teacher [CLS] at the distillation exit, one per training sample.
    teacher_cls: Vec<Vec<f64>>,
    previous_mu: Vec<Vec<f64>>,
    optimizer: OptimizerState,
    rng: SeededRng,
}

impl TaskSession {
    /// Snapshots the teacher and initializes this task's adapters and head.
    pub fn begin(model: &Model, task: &Task, cfg: &TrainConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let expected = model.tasks().len() + 1;
        if task.index != expected {
            return Err(Error::Protocol(format!(
                "task {} trained out of order, expected task {expected}",
                task.index
            )));
        }
        if task.train.is_empty() {
            return Err(Error::Data(format!("task {} has no training data", task.index)));
        }
        let bb = model.backbone();
        let (specific, weights) = init_specific(task.index, model.adapter_config(), bb.config(), rng)?;
        let head = LocalHead::init(task.num_classes(), bb.config().width, rng);
        let snapshot = (task.index > 1).then(|| TeacherSnapshot::take(model));
        let tokens = task
            .train
            .iter()
            .map(|s| Ok(bb.patch_embed(&s.image)?.tokens))
            .collect::<Result<Vec<_>>>()?;
        let labels = task.train.iter().map(|s| s.local).collect();
        let previous_mu = model
            .tasks()
            .iter()
            .filter(|t| t.weights.is_learned())
            .map(|t| t.weights.mu())
            .collect();
        let mut session = Self {
            task: task.index,
            cfg: cfg.clone(),
            specific,
            weights,
            head,
            snapshot,
            tokens,
            labels,
            teacher_cls: Vec::new(),
            previous_mu,
            optimizer: OptimizerState::new(cfg.optimizer, cfg.learning_rate),
            rng: rng.fork(task.index as u64),
        };
        if session.kd_active() {
            let cls = cfg
                .execution
                .map(&session.tokens, |i, _| session.teacher_feature(model, i));
            session.teacher_cls = cls.into_iter().collect::<Result<_>>()?;
        }
        Ok(session)
    }

    /// Copy of this session that continues under `cfg`, with the current
    /// optimizer moments.
    pub fn with_config(&self, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut out = self.clone();
        out.cfg = cfg.clone();
        out.optimizer.kind = cfg.optimizer;
        out.optimizer.lr = cfg.learning_rate;
        Ok(out)
    }

    pub fn task(&self) -> usize {
        self.task
    }

    pub fn num_samples(&self) -> usize {
        self.tokens.len()
    }

    pub fn head(&self) -> &LocalHead {
        &self.head
    }

    pub fn specific(&self) -> &SpecificAdapter {
        &self.specific
    }

    pub fn weights(&self) -> &BlockWeights {
        &self.weights
    }

    pub fn snapshot(&self) -> Option<&TeacherSnapshot> {
        self.snapshot.as_ref()
    }

    pub fn kd_active(&self) -> bool {
        self.cfg.kd && self.task > 1
    }

    pub fn orth_active(&self) -> bool {
        self.weights.is_learned() && !self.previous_mu.is_empty() && !self.weights.blocks().is_empty()
    }

    /// Teacher [CLS] at the distillation exit for training sample `i`.
    pub fn teacher_feature(&self, model: &Model, i: usize) -> Result<Vec<f64>> {
        let snap = self
            .snapshot
            .as_ref()
            .ok_or_else(|| Error::Protocol("no teacher snapshot on the first task".into()))?;
        let route = Route {
            shared: &snap.shared,
            shared_trainable: false,
            specific: snap.previous.as_ref().map(|t| (&t.specific, &t.weights)),
            specific_trainable: false,
        };
        let mut tape = Tape::new();
        let z0 = tape.constant(&self.tokens[i]);
        let (z, _) = model.run_blocks(&mut tape, z0, 1..=model.exit_block(), route)?;
        let cls = model.backbone().cls_on_tape(&mut tape, z)?;
        Ok(tape.value(cls).data().to_vec())
    }

    pub fn cached_teacher(&self, i: usize) -> Option<&[f64]> {
        self.teacher_cls.get(i).map(Vec::as_slice)
    }

    /// Tempered teacher distribution through the current head.
    pub fn kd_target(&self, i: usize) -> Result<Vec<f64>> {
        let cls = self
            .cached_teacher(i)
            .ok_or_else(|| Error::Protocol("distillation is not active".into()))?;
        softmax_temperature(&self.head.logits(cls), self.cfg.tau)
    }

    fn route<'a>(&'a self, model: &'a Model, with_specific: bool) -> Route<'a> {
        Route {
            shared: model.shared(),
            shared_trainable: true,
            specific: with_specific.then_some((&self.specific, &self.weights)),
            specific_trainable: true,
        }
    }

    /// Records sample `i`'s forward pass; returns the ce node, the kd node
    /// when `target` is given, and the final logits.
    fn record<'a>(
        &'a self,
        model: &'a Model,
        tape: &mut Tape<'a>,
        i: usize,
        target: Option<Vec<f64>>,
        with_specific: bool,
    ) -> Result<(Var, Option<Var>, Var)> {
        let route = self.route(model, with_specific);
        let exit = model.exit_block();
        let z0 = tape.constant(&self.tokens[i]);
        let (z_exit, _) = model.run_blocks(tape, z0, 1..=exit, route)?;
        let kd = match target {
            Some(target) => {
                let cls = model.backbone().cls_on_tape(tape, z_exit)?;
                let logits = self.head.logits_on_tape(tape, cls, true)?;
                Some(tape.soft_cross_entropy(logits, target, self.cfg.tau)?)
            }
            None => None,
        };
        let (z, _) = model.run_blocks(tape, z_exit, exit + 1..=model.num_blocks(), route)?;
        let cls = model.backbone().cls_on_tape(tape, z)?;
        let logits = self.head.logits_on_tape(tape, cls, true)?;
        let ce = tape.cross_entropy(logits, self.labels[i])?;
        Ok((ce, kd, logits))
    }

    /// Head logits for sample `i`, with or without this task's adapters.
    pub fn logits(&self, model: &Model, i: usize, with_specific: bool) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (_, _, logits) = self.record(model, &mut tape, i, None, with_specific)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// `(ce, kd)` of sample `i` given a fixed distillation target.
    pub fn sample_losses(&self, model: &Model, i: usize, target: Option<Vec<f64>>) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let (ce, kd, _) = self.record(model, &mut tape, i, target, true)?;
        Ok((tape.scalar(ce), kd.map_or(0.0, |k| tape.scalar(k))))
    }

    fn sample_bundle(&self, model: &Model, i: usize, target: Option<Vec<f64>>) -> Result<(GradientBundle, f64, f64)> {
        let mut tape = Tape::new();
        let (ce, kd, _) = self.record(model, &mut tape, i, target, true)?;
        let mut roots = vec![(LossTerm::Ce, ce)];
        roots.extend(kd.map(|k| (LossTerm::Kd, k)));
        let bundle = backward(&tape, &roots)?;
        Ok((bundle, tape.scalar(ce), kd.map_or(0.0, |k| tape.scalar(k))))
    }

    /// Orthogonality loss and its gradient (block weights only).
    pub fn orth_term(&self) -> Result<(f64, GradientBundle)> {
        if !self.orth_active() {
            return Ok((0.0, GradientBundle::new()));
        }
        let mut tape = Tape::new();
        let raw = tape.leaf(
            ParamKey::BlockWeight { task: self.task },
            self.weights.raw(),
            !self.weights.is_frozen(),
        );
        let mu = tape.softplus(raw);
        let loss = tape.abs_dot_sum(mu, self.previous_mu.clone())?;
        let bundle = backward(&tape, &[(LossTerm::Orth, loss)])?;
        Ok((tape.scalar(loss), bundle))
    }

    /// Mean loss-term bundle over `indices`, plus the orthogonality term.
    pub fn batch(&self, model: &Model, indices: &[usize]) -> Result<(GradientBundle, StepLoss)> {
        if indices.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let targets = indices
            .iter()
            .map(|&i| self.kd_active().then(|| self.kd_target(i)).transpose())
            .collect::<Result<Vec<_>>>()?;
        let jobs: Vec<(usize, Option<Vec<f64>>)> = indices.iter().copied().zip(targets).collect();
        let results = self
            .cfg
            .execution
            .map(&jobs, |_, (i, t)| self.sample_bundle(model, *i, t.clone()));
        let mut bundle = GradientBundle::new();
        let (mut ce, mut kd) = (0.0, 0.0);
        for r in results {
            let (b, c, k) = r?;
            bundle.accumulate(&b)?;
            ce += c;
            kd += k;
        }
        let n = indices.len() as f64;
        bundle.scale(1.0 / n);
        let (orth, orth_bundle) = self.orth_term()?;
        bundle.accumulate(&orth_bundle)?;
        let (ce, kd) = (ce / n, kd / n);
        let loss = StepLoss {
            ce,
            kd,
            orth,
            total: ce + self.cfg.lambda_kd * kd + self.cfg.lambda_orth * orth,
        };
        Ok((bundle, loss))
    }

    /// Current value of a trainable tensor.
    pub fn param<'s>(&'s self, model: &'s Model, key: &ParamKey) -> Option<&'s Matrix> {
        match key {
            ParamKey::SharedUp { .. } | ParamKey::SharedDown { .. } => model.shared().get(key),
            ParamKey::SpecificUp { .. } | ParamKey::SpecificDown { .. } => self.specific.get(key),
            ParamKey::BlockWeight { task } if *task == self.task => Some(self.weights.raw()),
            ParamKey::HeadWeight => Some(&self.head.weight),
            ParamKey::HeadBias => Some(&self.head.bias),
            _ => None,
        }
    }

    pub fn set_param(&mut self, model: &mut Model, key: &ParamKey, value: Matrix) -> Result<()> {
        match key {
            ParamKey::SharedUp { .. } | ParamKey::SharedDown { .. } => model.shared_mut().set(key, value),
            ParamKey::SpecificUp { .. } | ParamKey::SpecificDown { .. } => self.specific.set(key, value),
            ParamKey::BlockWeight { task } if *task == self.task => self.weights.set_raw(value),
            ParamKey::HeadWeight | ParamKey::HeadBias => {
                let slot = if *key == ParamKey::HeadWeight {
                    &mut self.head.weight
                } else {
                    &mut self.head.bias
                };
                if slot.shape() != value.shape() {
                    return Err(Error::Shape {
                        op: "head update",
                        left: slot.shape(),
                        right: value.shape(),
                    });
                }
                *slot = value;
                Ok(())
            }
            _ => Err(Error::Internal(format!("{key} is not trainable in task {}", self.task))),
        }
    }

    /// Every trainable tensor of this task, ascending by key.
    pub fn parameters(&self, model: &Model) -> Vec<Parameter> {
        let mut keys: Vec<ParamKey> = Vec::new();
        for (block, proj) in model.shared().pairs().keys().copied() {
            keys.push(ParamKey::SharedUp { block, proj });
            if model.shared().down_trainable() {
                keys.push(ParamKey::SharedDown { block, proj });
            }
        }
        for (block, proj) in self.specific.pairs().keys().copied() {
            let task = self.task;
            keys.push(ParamKey::SpecificUp { task, block, proj });
            keys.push(ParamKey::SpecificDown { task, block, proj });
        }
        if self.weights.is_learned() && !self.weights.blocks().is_empty() {
            keys.push(ParamKey::BlockWeight { task: self.task });
        }
        keys.push(ParamKey::HeadWeight);
        keys.push(ParamKey::HeadBias);
        keys.sort();
        keys.into_iter()
            .filter_map(|k| {
                self.param(model, &k).map(|v| Parameter {
                    key: k,
                    value: v.clone(),
                    trainable: true,
                })
            })
            .collect()
    }

    /// One optimizer step on `indices`.
    pub fn step(&mut self, model: &mut Model, indices: &[usize]) -> Result<StepLoss> {
        let (bundle, loss) = self.batch(model, indices)?;
        let grads = total_step_gradient(&bundle, &self.cfg, self.task, self.snapshot.as_ref())?;
        self.optimizer.step += 1;
        for (key, g) in &grads {
            let current = self
                .param(model, key)
                .ok_or_else(|| Error::Internal(format!("no value for {key}")))?
                .clone();
            let next = self.optimizer.update(*key, &current, g)?;
            self.set_param(model, key, next)?;
        }
        Ok(loss)
    }

    /// All epochs of shuffled mini-batches; each epoch's mean losses go to
    /// `sink` as one JSON line.
    pub fn run(&mut self, model: &mut Model, mut sink: Option<&mut dyn Write>) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        let mut order: Vec<usize> = (0..self.num_samples()).collect();
        for epoch in 1..=self.cfg.epochs {
            self.rng.shuffle(&mut order);
            let mut sum = StepLoss::default();
            let mut steps = 0usize;
            for batch in order.chunks(self.cfg.batch_size) {
                let loss = self.step(model, batch)?;
                sum.ce += loss.ce;
                sum.kd += loss.kd;
                sum.orth += loss.orth;
                steps += 1;
                log.steps.push(loss);
            }
            let n = steps as f64;
            let (ce, kd, orth) = (sum.ce / n, sum.kd / n, sum.orth / n);
            let entry = EpochLog {
                task: self.task,
                epoch,
                loss_ce: ce,
                loss_kd: kd,
                loss_orth: orth,
                loss_total: ce + self.cfg.lambda_kd * kd + self.cfg.lambda_orth * orth,
            };
            if let Some(w) = sink.as_deref_mut() {
                serde_json::to_writer(&mut *w, &entry)?;
                w.write_all(b"\n")?;
            }
            log.epochs.push(entry);
        }
        Ok(log)
    }

    /// Freezes and stores this task's adapters, then computes its
    /// prototypes. The head is dropped.
    pub fn finish(mut self, model: &mut Model, task: &Task, store: &mut PrototypeStore) -> Result<()> {
        if task.index != self.task {
            return Err(Error::Protocol(format!(
                "finishing task {} with the session of task {}",
                task.index, self.task
            )));
        }
        self.specific.freeze();
        self.weights.freeze();
        model.push_task(TaskAdapters {
            specific: self.specific,
            weights: self.weights,
            classes: task.classes.clone(),
        });
        for (class, proto) in compute_prototypes(model, task, self.cfg.execution)? {
            store.insert(task.index, class, proto)?;
        }
        Ok(())
    }
}

/// Trains `task` end to end: snapshot, optimize, freeze, prototypes.
pub fn train_task(
    model: &mut Model,
    store: &mut PrototypeStore,
    task: &Task,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
    sink: Option<&mut dyn Write>,
) -> Result<TrainLog> {
    let mut session = TaskSession::begin(model, task, cfg, rng)?;
    let log = session.run(model, sink)?;
    session.finish(model, task, store)?;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_examples() {
        let uniform = Matrix::from_rows(&[&[0.3, 0.3]]);
        assert!((local_ce_loss(&uniform, &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let confident = Matrix::from_rows(&[&[60.0, -60.0]]);
        assert!(local_ce_loss(&confident, &[0]).unwrap() < 1e-40);
        let pair = Matrix::from_rows(&[&[0.1, 0.7, -0.2], &[0.1, 0.7, -0.2]]);
        let single = Matrix::from_rows(&[&[0.1, 0.7, -0.2]]);
        assert_eq!(local_ce_loss(&pair, &[2, 2]).unwrap(), local_ce_loss(&single, &[2]).unwrap());
        assert!(matches!(local_ce_loss(&single, &[3]), Err(Error::Label { .. })));
    }

    #[test]
    fn kd_examples() {
        // Identity head over two classes.
        let head = LocalHead {
            weight: Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]),
            bias: Matrix::zeros(1, 2),
        };
        let teacher = [80.0, -80.0];
        let student = [0.0, 0.0];
        let loss = kd_loss(2, &student, &teacher, &head, 1.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(kd_loss(1, &student, &teacher, &head, 1.0), Err(Error::Protocol(_))));

        let t = [0.4, -0.1];
        let s = [1.3, 0.2];
        let p = softmax_temperature(&t, 2.0).unwrap();
        let entropy: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        assert!(kd_loss(3, &s, &t, &head, 2.0).unwrap() >= entropy - 1e-15);
    }

    #[test]
    fn orth_examples() {
        assert_eq!(orth_loss(&[1.0, 0.5], &[]).unwrap(), 0.0);
        assert_eq!(orth_loss(&[1.0, 0.0], &[vec![0.0, 1.0]]).unwrap(), 0.0);
        assert_eq!(orth_loss(&[1.0, 1.0], &[vec![1.0, 1.0]]).unwrap(), 2.0);
        assert_eq!(orth_loss(&[1.0, -1.0], &[vec![1.0, 2.0], vec![3.0, 0.0]]).unwrap(), 4.0);
        assert!(matches!(orth_loss(&[1.0], &[vec![1.0, 2.0]]), Err(Error::Shape { .. })));
    }

    #[test]
    fn reassign_examples() {
        let g = Matrix::from_rows(&[&[1.0, -2.0], &[4.0, 0.5]]);
        assert_eq!(reassign_gradient(&g, &[0.7, 0.7]).unwrap(), g);
        let r = reassign_gradient(&g, &[3.0, 1.0]).unwrap();
        assert_eq!(r, Matrix::from_rows(&[&[1.5, -3.0], &[2.0, 0.25]]));
        assert_eq!(reassign_gradient(&g, &[0.0, 0.0]).unwrap(), g);
        assert!(reassign_gradient(&g, &[1.0]).is_err());
    }

    #[test]
    fn step_gradient_without_snapshot_is_protocol_error() {
        let bundle = GradientBundle::new();
        let cfg = TrainConfig::default();
        assert!(matches!(
            total_step_gradient(&bundle, &cfg, 2, None),
            Err(Error::Protocol(_))
        ));
        assert!(total_step_gradient(&bundle, &cfg, 1, None).unwrap().is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { tau: 0.0, ..Default::default() },
            TrainConfig { lambda_kd: -1.0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { learning_rate: f64::NAN, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        assert_eq!("adam".parse::<Optimizer>().unwrap(), Optimizer::Adam);
        assert!("rmsprop".parse::<Optimizer>().is_err());
    }
}
