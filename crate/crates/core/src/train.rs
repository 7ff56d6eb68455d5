//! Joint objective, schedule, training loop and evaluation.

use crate::config::{Ablation, FinalHeadMode, TrainConfig};
use crate::model::{forward, ClassSource, ForwardOutput, ReapsModel};
use crate::optim::OptimizerState;
use crate::par;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::synth::{iterate_batches, Dataset};
use crate::tape::{Tape, Var};
use crate::tensor::{argmax, Tensor, TensorError};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite {branch} loss at epoch {epoch}, step {step}; parameters restored to the start of the epoch")]
    NonFinite {
        branch: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("empty dataset")]
    EmptyDataset,
}

/// `lr0 * decay_factor ^ floor(epoch / decay_every)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every.max(1)) as i32)
}

/// Scalar branch losses of one forward pass, before weighting.
#[derive(Debug, Clone, Copy)]
pub struct BranchLosses {
    pub ran: Var,
    pub global: Var,
    pub part: Option<Var>,
}

/// `lambda1 * L_A + lambda2 * L_g + lambda3 * L_p`; zero-weight terms are
/// left out of the graph entirely.
pub fn joint_loss<T: Scalar>(
    tape: &mut Tape<T>,
    losses: &BranchLosses,
    cfg: &TrainConfig,
) -> Result<Option<Var>, &'static str> {
    let terms = [
        ("L_A", Some(losses.ran), cfg.lambda1),
        ("L_P^g", Some(losses.global), cfg.lambda2),
        ("L_P^p", losses.part, cfg.lambda3),
    ];
    let mut total: Option<Var> = None;
    for (name, var, weight) in terms {
        let Some(v) = var else { continue };
        if !tape.data(v)[0].is_finite() {
            return Err(name);
        }
        if weight == 0.0 {
            continue;
        }
        let scaled = tape.scale(v, weight);
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(t, scaled).expect("scalar shapes"),
        });
    }
    Ok(total)
}

/// Gathers samples `indices` into an image batch and label list.
pub fn make_batch(data: &Dataset, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>), TensorError> {
    let images: Vec<Tensor<f32>> = indices.iter().map(|&i| data.samples[i].image.clone()).collect();
    let labels = indices.iter().map(|&i| data.samples[i].label).collect();
    Ok((Tensor::stack(&images)?, labels))
}

fn sum_vars<T: Scalar>(tape: &mut Tape<T>, vars: &[Var]) -> Option<Var> {
    let mut it = vars.iter().copied();
    let first = it.next()?;
    Some(it.fold(first, |acc, v| tape.add(acc, v).expect("scalar shapes")))
}

/// Graph and bookkeeping for one training batch.
pub struct TrainStep {
    pub output: ForwardOutput,
    pub losses: BranchLosses,
    pub final_loss: Var,
    /// The objective to differentiate, `None` if every weight is zero.
    pub total: Option<Var>,
}

/// Builds the training graph: branch cross-entropies, the weighted joint
/// objective and (in joint mode) the final-head loss. Attention uses the
/// ground-truth labels.
pub fn forward_train<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ReapsModel<T>,
    images: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainStep, TrainError> {
    forward_train_with(tape, model, images, labels, cfg, None)
}

pub fn forward_train_with<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ReapsModel<T>,
    images: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    fixed_boxes: Option<&[Vec<crate::ran::BBox>]>,
) -> Result<TrainStep, TrainError> {
    let output = forward(tape, model, images, ClassSource::Labels(labels), cfg.tau, fixed_boxes)?;
    let ran = tape.softmax_cross_entropy(output.ran.logits, labels)?;
    let mut globals = Vec::new();
    let mut parts = Vec::new();
    for st in &output.stages {
        globals.push(tape.softmax_cross_entropy(st.psn.logits_global, labels)?);
        if let Some(lp) = st.psn.logits_part {
            parts.push(tape.softmax_cross_entropy(lp, labels)?);
        }
    }
    let losses = BranchLosses {
        ran,
        global: sum_vars(tape, &globals).expect("at least one stage"),
        part: sum_vars(tape, &parts),
    };
    let final_loss = tape.softmax_cross_entropy(output.final_logits, labels)?;
    let nonfinite = |branch| TrainError::NonFinite {
        branch,
        epoch: 0,
        step: 0,
    };
    let mut total = joint_loss(tape, &losses, cfg).map_err(nonfinite)?;
    if cfg.final_head_mode == FinalHeadMode::Joint {
        if !tape.data(final_loss)[0].is_finite() {
            return Err(nonfinite("L_final"));
        }
        total = Some(match total {
            Some(t) => tape.add(t, final_loss)?,
            None => final_loss,
        });
    }
    Ok(TrainStep {
        output,
        losses,
        final_loss,
        total,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_ran: f64,
    pub loss_global: f64,
    pub loss_part: f64,
    pub loss_final: f64,
    pub acc_final: f64,
    pub mean_iou: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let iou = self
            .mean_iou
            .map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "{}\t{:.3e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.epoch,
            self.lr,
            self.loss_ran,
            self.loss_global,
            self.loss_part,
            self.loss_final,
            self.acc_final,
            iou
        )
    }
}

pub const LOG_HEADER: &str = "epoch\tlr\tL_A\tL_g\tL_p\tL_final\tacc_final\tmean_iou";

/// Model plus optimizer and epoch counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ReapsModel<f32>,
    pub optimizer: OptimizerState<f32>,
    pub config: TrainConfig,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: ReapsModel<f32>, config: TrainConfig) -> Result<Self, TrainError> {
        let optimizer = OptimizerState::new(&model.params, config.momentum, config.lr0)?;
        Ok(Self {
            model,
            optimizer,
            config,
            epoch: 0,
        })
    }

    fn effective_config(&self) -> TrainConfig {
        let mut cfg = self.config.clone();
        if self.model.config.ablation == Ablation::WoPart {
            cfg.lambda3 = 0.0;
        }
        cfg
    }

    /// Forward, backward and one optimizer step on a batch. Returns the
    /// step's branch values and diagnostics.
    pub fn step(&mut self, images: &Tensor<f32>, labels: &[usize]) -> Result<StepStats, TrainError> {
        let cfg = self.effective_config();
        let mut tape = Tape::new();
        let st = forward_train(&mut tape, &self.model, images, labels, &cfg)?;
        let stats = StepStats::collect(&tape, &st, labels);
        self.model.params.zero_grad();
        if let Some(total) = st.total {
            tape.backward(total)?;
            self.model.params.accumulate_grads(&tape);
        }
        self.optimizer.step(&mut self.model.params)?;
        Ok(stats)
    }

    /// Head-only update on frozen descriptors.
    fn head_step(&mut self, images: &Tensor<f32>, labels: &[usize]) -> Result<StepStats, TrainError> {
        let mut cfg = self.effective_config();
        cfg.final_head_mode = FinalHeadMode::Joint;
        let mut tape = Tape::new();
        let st = forward_train(&mut tape, &self.model, images, labels, &cfg)?;
        let stats = StepStats::collect(&tape, &st, labels);
        self.model.params.zero_grad();
        tape.backward(st.final_loss)?;
        self.model.params.accumulate_grads(&tape);
        let head = [self.model.joint_head.weight, self.model.joint_head.bias];
        for id in self.model.params.ids().collect::<Vec<_>>() {
            if !head.contains(&id) {
                self.model.params.get_mut(id).grad = None;
            }
        }
        self.optimizer.step(&mut self.model.params)?;
        Ok(stats)
    }

    /// Runs one epoch over `data` in the order fixed by `(seed, epoch)`.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochLog, TrainError> {
        self.run_epoch(data, false)
    }

    fn run_epoch(&mut self, data: &Dataset, head_only: bool) -> Result<EpochLog, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let lr = lr_schedule(self.epoch, &self.config);
        self.optimizer.learning_rate = lr;
        let snapshot: (ParamStore<f32>, OptimizerState<f32>) =
            (self.model.params.clone(), self.optimizer.clone());
        let mut acc = EpochAccumulator::default();
        let batches = iterate_batches(data.len(), self.config.batch_size, self.config.seed, self.epoch);
        for (step, idx) in batches.iter().enumerate() {
            let (images, labels) = make_batch(data, idx)?;
            let result = if head_only {
                self.head_step(&images, &labels)
            } else {
                self.step(&images, &labels)
            };
            let stats = match result {
                Err(TrainError::NonFinite { branch, .. }) => {
                    self.model.params = snapshot.0;
                    self.optimizer = snapshot.1;
                    return Err(TrainError::NonFinite {
                        branch,
                        epoch: self.epoch,
                        step,
                    });
                }
                other => other?,
            };
            if !self.model.params.iter().all(|(_, _, t)| t.all_finite()) {
                self.model.params = snapshot.0;
                self.optimizer = snapshot.1;
                return Err(TrainError::NonFinite {
                    branch: "parameter update",
                    epoch: self.epoch,
                    step,
                });
            }
            acc.add(&stats, idx, data);
        }
        let log = acc.finish(self.epoch, lr);
        self.epoch += 1;
        Ok(log)
    }

    /// Trains until `config.epochs` (plus head-only epochs in post mode),
    /// calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        data: &Dataset,
        mut on_epoch: impl FnMut(&Trainer, &EpochLog),
    ) -> Result<Vec<EpochLog>, TrainError> {
        let mut logs = Vec::new();
        while self.epoch < self.config.epochs {
            let log = self.run_epoch(data, false)?;
            on_epoch(self, &log);
            logs.push(log);
        }
        if self.config.final_head_mode == FinalHeadMode::Post {
            let end = self.config.epochs + self.config.post_epochs;
            while self.epoch < end {
                let log = self.run_epoch(data, true)?;
                on_epoch(self, &log);
                logs.push(log);
            }
        }
        Ok(logs)
    }
}

/// Trains `model` on `data` and returns the per-epoch log.
pub fn train(
    model: ReapsModel<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ReapsModel<f32>, Vec<EpochLog>), TrainError> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let logs = trainer.fit(data, |_, _| {})?;
    Ok((trainer.model, logs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss_ran: f64,
    pub loss_global: f64,
    pub loss_part: f64,
    pub loss_final: f64,
    pub final_correct: Vec<bool>,
    pub boxes: Vec<crate::ran::BBox>,
}

impl StepStats {
    fn collect<T: Scalar>(tape: &Tape<T>, st: &TrainStep, labels: &[usize]) -> Self {
        let v = |x: Var| tape.data(x)[0].to_f64();
        Self {
            loss_ran: v(st.losses.ran),
            loss_global: v(st.losses.global),
            loss_part: st.losses.part.map_or(0.0, v),
            loss_final: v(st.final_loss),
            final_correct: correct(tape.value(st.output.final_logits), labels),
            boxes: st.output.stages[0].boxes_in_image.clone(),
        }
    }
}

fn correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Vec<bool> {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .map(|(b, &l)| argmax(&logits.data()[b * k..(b + 1) * k]) == l)
        .collect()
}

#[derive(Default)]
struct EpochAccumulator {
    weight: f64,
    sums: [f64; 4],
    correct: usize,
    seen: usize,
    iou_sum: f64,
    iou_count: usize,
}

impl EpochAccumulator {
    fn add(&mut self, s: &StepStats, idx: &[usize], data: &Dataset) {
        let n = idx.len() as f64;
        self.weight += n;
        for (acc, v) in self
            .sums
            .iter_mut()
            .zip([s.loss_ran, s.loss_global, s.loss_part, s.loss_final])
        {
            *acc += v * n;
        }
        self.correct += s.final_correct.iter().filter(|c| **c).count();
        self.seen += idx.len();
        for (i, b) in idx.iter().zip(&s.boxes) {
            if let Some(gt) = data.samples[*i].object_box {
                self.iou_sum += b.iou(&gt);
                self.iou_count += 1;
            }
        }
    }

    fn finish(self, epoch: usize, lr: f64) -> EpochLog {
        let m = |x: f64| x / self.weight;
        EpochLog {
            epoch,
            lr,
            loss_ran: m(self.sums[0]),
            loss_global: m(self.sums[1]),
            loss_part: m(self.sums[2]),
            loss_final: m(self.sums[3]),
            acc_final: self.correct as f64 / self.seen as f64,
            mean_iou: (self.iou_count > 0).then(|| self.iou_sum / self.iou_count as f64),
        }
    }
}

/// Test-time accuracies of every head and attention quality.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub final_acc: f64,
    pub ran_acc: f64,
    /// First-stage global branch.
    pub psn_global_acc: f64,
    pub psn_part_acc: Option<f64>,
    /// First-stage attention box against ground truth, when available.
    pub mean_iou: Option<f64>,
    pub samples: usize,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
        writeln!(f, "samples={}", self.samples)?;
        writeln!(f, "final_acc={:.6}", self.final_acc)?;
        writeln!(f, "ran_acc={:.6}", self.ran_acc)?;
        writeln!(f, "psn_global_acc={:.6}", self.psn_global_acc)?;
        writeln!(f, "psn_part_acc={}", opt(self.psn_part_acc))?;
        write!(f, "mean_iou={}", opt(self.mean_iou))
    }
}

#[derive(Default)]
struct EvalCounts {
    final_ok: usize,
    ran_ok: usize,
    global_ok: usize,
    part_ok: usize,
    has_part: bool,
    iou_sum: f64,
    iou_count: usize,
}

/// Inference over `data`, attending with predicted classes. Batches are
/// independent and may run on separate threads; totals are combined in
/// batch order.
pub fn evaluate(
    model: &ReapsModel<f32>,
    data: &Dataset,
    tau: f64,
    batch_size: usize,
) -> Result<Metrics, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let bs = batch_size.max(1);
    let nb = data.len().div_ceil(bs);
    let parts = par::map_range(nb, |i| -> Result<EvalCounts, TrainError> {
        let idx: Vec<usize> = (i * bs..((i + 1) * bs).min(data.len())).collect();
        let (images, labels) = make_batch(data, &idx)?;
        let mut tape = Tape::new();
        let out = forward(&mut tape, model, &images, ClassSource::Predicted, tau, None)?;
        let count = |v: Var| correct(tape.value(v), &labels).iter().filter(|c| **c).count();
        let st = &out.stages[0];
        let mut c = EvalCounts {
            final_ok: count(out.final_logits),
            ran_ok: count(out.ran.logits),
            global_ok: count(st.psn.logits_global),
            part_ok: st.psn.logits_part.map_or(0, count),
            has_part: st.psn.logits_part.is_some(),
            ..Default::default()
        };
        for (&s, b) in idx.iter().zip(&st.boxes_in_image) {
            if let Some(gt) = data.samples[s].object_box {
                c.iou_sum += b.iou(&gt);
                c.iou_count += 1;
            }
        }
        Ok(c)
    });
    let mut total = EvalCounts::default();
    for p in parts {
        let p = p?;
        total.final_ok += p.final_ok;
        total.ran_ok += p.ran_ok;
        total.global_ok += p.global_ok;
        total.part_ok += p.part_ok;
        total.has_part = p.has_part;
        total.iou_sum += p.iou_sum;
        total.iou_count += p.iou_count;
    }
    let n = data.len() as f64;
    Ok(Metrics {
        final_acc: total.final_ok as f64 / n,
        ran_acc: total.ran_ok as f64 / n,
        psn_global_acc: total.global_ok as f64 / n,
        psn_part_acc: total.has_part.then(|| total.part_ok as f64 / n),
        mean_iou: (total.iou_count > 0).then(|| total.iou_sum / total.iou_count as f64),
        samples: data.len(),
    })
}
