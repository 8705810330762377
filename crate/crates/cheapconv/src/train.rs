//! SGD training loop with the step schedule, scheme dispatch (scratch / DK /
//! AT / OD), metric logging, evaluation, and best-student selection.

use crate::data::{epoch_batches, Dataset};
use crate::distill::{self, LossConfig, Scheme, TeacherHead};
use crate::error::{Error, Result};
use crate::graph::{ArchDescriptor, NetworkInstance};
use crate::kernels;
use crate::tape::Tape;
use crate::tensor::{ParamSet, Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_drop_factor: f64,
    /// Fractions of the total epochs at which the LR drops.
    pub drop_points: Vec<f64>,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    /// Desk-scale defaults; the full-size recipe is [`TrainConfig::paper_recipe`].
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 64,
            base_lr: 0.1,
            lr_drop_factor: 10.0,
            drop_points: vec![0.5, 0.75],
            weight_decay: 2e-4,
            momentum: 0.9,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The full CIFAR recipe: 300 epochs, batch 128, same schedule.
    pub fn paper_recipe() -> Self {
        TrainConfig { epochs: 300, batch_size: 128, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.base_lr <= 0.0 || self.lr_drop_factor <= 0.0 {
            return Err(Error::Config("learning rate and drop factor must be positive".into()));
        }
        let mut last = 0.0;
        for &p in &self.drop_points {
            if p <= last || p >= 1.0 {
                return Err(Error::Config(format!(
                    "drop points must be strictly increasing in (0,1): {:?}",
                    self.drop_points
                )));
            }
            last = p;
        }
        self.loss.validate()
    }
}

/// Piecewise-constant step schedule: the base rate divided by the drop factor
/// once per crossed drop point.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let e = epoch as f64;
    let total = cfg.epochs as f64;
    let drops = cfg.drop_points.iter().filter(|&&p| e >= p * total).count();
    cfg.base_lr / cfg.lr_drop_factor.powi(drops as i32)
}

/// One SGD-with-momentum step: `g ← grad + wd·w`, `v ← μv + g`, `w ← w − lr·v`.
pub fn sgd_step<S: Scalar>(
    params: &mut ParamSet<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let (lr, mu, wd) = (S::of(lr), S::of(momentum), S::of(weight_decay));
    for p in params.iter_mut() {
        if !p.requires_grad {
            continue;
        }
        if !p.grad.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in parameter '{}'", p.name)));
        }
        let (value, grad, vel) = (p.value.data_mut(), p.grad.data(), p.momentum.data_mut());
        for i in 0..value.len() {
            let g = grad[i] + wd * value[i];
            vel[i] = mu * vel[i] + g;
            value[i] = value[i] - lr * vel[i];
        }
    }
    Ok(())
}

/// One epoch's logged values.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    /// Per-student (train CE loss, train error %) in branch order.
    pub students: Vec<(f64, f64)>,
    /// Online-teacher (train CE loss, train error %), OD only.
    pub teacher: Option<(f64, f64)>,
    /// Per-student validation error %.
    pub val_errors: Vec<f64>,
    /// Online-teacher validation error %, OD only.
    pub teacher_val_error: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunMetrics {
    pub scheme: Scheme,
    pub branches: usize,
    pub rows: Vec<EpochRow>,
}

impl RunMetrics {
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["epoch".to_string(), "lr".to_string()];
        for i in 1..=self.branches {
            cols.push(format!("s{i}_train_loss"));
            cols.push(format!("s{i}_train_err"));
        }
        if self.scheme == Scheme::Od {
            cols.push("t_train_loss".into());
            cols.push("t_train_err".into());
        }
        for i in 1..=self.branches {
            cols.push(format!("s{i}_val_err"));
        }
        if self.scheme == Scheme::Od {
            cols.push("t_val_err".into());
        }
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push('\n');
        for r in &self.rows {
            let mut cols = vec![r.epoch.to_string(), format!("{:.6}", r.lr)];
            for &(l, e) in &r.students {
                cols.push(format!("{l:.6}"));
                cols.push(format!("{e:.6}"));
            }
            if let Some((l, e)) = r.teacher {
                cols.push(format!("{l:.6}"));
                cols.push(format!("{e:.6}"));
            }
            for &e in &r.val_errors {
                cols.push(format!("{e:.6}"));
            }
            if let Some(e) = r.teacher_val_error {
                cols.push(format!("{e:.6}"));
            }
            out.push_str(&cols.join(","));
            out.push('\n');
        }
        out
    }
}

pub struct TrainOutput<S> {
    pub students: Vec<NetworkInstance<S>>,
    pub teacher_head: Option<TeacherHead<S>>,
    pub metrics: RunMetrics,
    pub best_student: usize,
}

/// Argmin of final-epoch validation error; ties go to the lowest branch index.
pub fn select_best_student(metrics: &RunMetrics) -> usize {
    let last = metrics.rows.last().expect("at least one epoch row");
    let mut best = 0;
    for (i, &e) in last.val_errors.iter().enumerate() {
        if e < last.val_errors[best] {
            best = i;
        }
    }
    best
}

/// Top-1 error (%) over a dataset in eval mode.
pub fn evaluate<S: Scalar>(net: &NetworkInstance<S>, ds: &Dataset<S>, batch_size: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut wrong = 0usize;
    for chunk in idx.chunks(batch_size) {
        let x = ds.gather_normalized(chunk);
        let y = ds.labels_for(chunk);
        let out = net.infer(&x)?;
        wrong += count_errors(&out.logits, &y);
    }
    Ok(100.0 * wrong as f64 / ds.len() as f64)
}

/// Teacher-path top-1 error (%) for an OD ensemble in eval mode.
pub fn evaluate_od_teacher<S: Scalar>(
    students: &[NetworkInstance<S>],
    head: &TeacherHead<S>,
    ds: &Dataset<S>,
    batch_size: usize,
) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut wrong = 0usize;
    for chunk in idx.chunks(batch_size) {
        let x = ds.gather_normalized(chunk);
        let y = ds.labels_for(chunk);
        let mut feats = Vec::with_capacity(students.len());
        for s in students {
            feats.push(s.infer(&x)?.features);
        }
        let logits = head.infer(&feats)?;
        wrong += count_errors(&logits, &y);
    }
    Ok(100.0 * wrong as f64 / ds.len() as f64)
}

fn count_errors<S: Scalar>(logits: &Tensor<S>, labels: &[u8]) -> usize {
    let (n, c) = logits.dim2();
    let mut wrong = 0;
    for i in 0..n {
        let row = &logits.data()[i * c..(i + 1) * c];
        let mut arg = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[arg] {
                arg = j;
            }
        }
        if arg != labels[i] as usize {
            wrong += 1;
        }
    }
    wrong
}

/// Batch-mean cross entropy of logits vs hard labels (plain tensors, logging).
fn ce_scalar<S: Scalar>(logits: &Tensor<S>, labels: &[u8]) -> f64 {
    let p = kernels::softmax_rows(logits, 1.0);
    let (n, c) = p.dim2();
    let mut total = 0.0;
    for i in 0..n {
        let py = p.data()[i * c + labels[i] as usize].as_f64().max(distill::PROB_EPS);
        total -= py.ln();
    }
    total / n as f64
}

fn mix_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Train the scheme selected in `cfg.loss`. DK and AT require a frozen
/// teacher; OD builds `branches` students plus the online teacher head.
pub fn train<S: Scalar>(
    arch: &ArchDescriptor,
    frozen_teacher: Option<&NetworkInstance<S>>,
    train_set: &Dataset<S>,
    val_set: &Dataset<S>,
    cfg: &TrainConfig,
) -> Result<TrainOutput<S>> {
    cfg.validate()?;
    if arch.head.classes != train_set.classes {
        return Err(Error::Config(format!(
            "model has {} classes but dataset '{}' has {}",
            arch.head.classes, train_set.name, train_set.classes
        )));
    }
    let scheme = cfg.loss.scheme;
    match scheme {
        Scheme::Dk | Scheme::At => {
            let t = frozen_teacher.ok_or_else(|| {
                Error::Config(format!(
                    "scheme {scheme} needs a frozen teacher (pass --teacher-arch/--teacher-checkpoint)"
                ))
            })?;
            if t.classes() != arch.head.classes {
                return Err(Error::Config("teacher and student class counts differ".into()));
            }
        }
        _ => {}
    }

    let m = if scheme == Scheme::Od { cfg.loss.branches } else { 1 };
    let mut students: Vec<NetworkInstance<S>> = (0..m)
        .map(|i| NetworkInstance::build(arch, mix_seed(cfg.seed, i as u64)))
        .collect::<Result<_>>()?;
    let mut teacher_head = if scheme == Scheme::Od {
        Some(TeacherHead::<S>::build(
            m,
            students[0].plan.head_in,
            arch.head.classes,
            mix_seed(cfg.seed, 0x7EAC),
        ))
    } else {
        None
    };

    let tau = cfg.loss.temperature;
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let mut loss_sums = vec![0.0f64; m];
        let mut err_sums = vec![0usize; m];
        let mut t_loss_sum = 0.0f64;
        let mut t_err_sum = 0usize;
        let mut seen = 0usize;

        for batch in epoch_batches(train_set.len(), cfg.batch_size, cfg.seed, epoch) {
            let x = train_set.gather_normalized(&batch);
            let y = train_set.labels_for(&batch);
            let bsz = batch.len();
            seen += bsz;

            for s in students.iter_mut() {
                s.params.zero_grads();
            }
            if let Some(h) = teacher_head.as_mut() {
                h.params.zero_grads();
            }

            let mut tape = Tape::new();
            // record forwards and assemble the scheme's loss
            let mut passes = Vec::with_capacity(m);
            let mut teacher_vars = Vec::new();
            let loss = match scheme {
                Scheme::Scratch => {
                    passes.push(students[0].forward(&mut tape, &x, true)?);
                    distill::ce_onehot(&mut tape, passes[0].logits, &y)?
                }
                Scheme::Dk => {
                    let t_logits = frozen_teacher.unwrap().infer(&x)?.logits;
                    passes.push(students[0].forward(&mut tape, &x, true)?);
                    distill::dk_loss(&mut tape, &y, passes[0].logits, &t_logits, tau)?
                }
                Scheme::At => {
                    let t_out = frozen_teacher.unwrap().infer(&x)?;
                    let t_maps: Vec<Tensor<S>> =
                        t_out.stage_ends.iter().map(distill::attention_map_tensor).collect();
                    passes.push(students[0].forward(&mut tape, &x, true)?);
                    let s_maps: Vec<crate::tape::Var> = passes[0]
                        .stage_ends
                        .iter()
                        .map(|&z| distill::attention_map(&mut tape, z))
                        .collect();
                    distill::at_loss(&mut tape, &y, passes[0].logits, &s_maps, &t_maps, cfg.loss.at_weight)?
                }
                Scheme::Od => {
                    for s in students.iter_mut() {
                        passes.push(s.forward(&mut tape, &x, true)?);
                    }
                    let feats: Vec<_> = passes.iter().map(|p| p.features).collect();
                    let (t_logits, t_vars) =
                        teacher_head.as_mut().unwrap().forward(&mut tape, &feats, true)?;
                    teacher_vars = t_vars;
                    let tl = tape.value(t_logits).clone();
                    t_loss_sum += ce_scalar(&tl, &y) * bsz as f64;
                    t_err_sum += count_errors(&tl, &y);
                    let s_logits: Vec<_> = passes.iter().map(|p| p.logits).collect();
                    distill::od_loss(
                        &mut tape,
                        &y,
                        &s_logits,
                        t_logits,
                        tau,
                        cfg.loss.stop_gradient_teacher_targets,
                    )?
                }
            };

            let loss_value = tape.value(loss).data()[0].as_f64();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss diverged at epoch {epoch} (got {loss_value})"
                )));
            }

            // per-student logging from the recorded logits, before the step
            for (i, pass) in passes.iter().enumerate() {
                let logits = tape.value(pass.logits);
                loss_sums[i] += ce_scalar(logits, &y) * bsz as f64;
                err_sums[i] += count_errors(logits, &y);
            }

            let grads = tape.backward(loss)?;
            for (s, pass) in students.iter_mut().zip(passes.iter()) {
                s.apply_grads(&grads, pass);
                sgd_step(&mut s.params, lr, cfg.momentum, cfg.weight_decay)?;
            }
            if let Some(h) = teacher_head.as_mut() {
                h.apply_grads(&grads, &teacher_vars);
                sgd_step(&mut h.params, lr, cfg.momentum, cfg.weight_decay)?;
            }
        }

        let mut val_errors = Vec::with_capacity(m);
        for s in students.iter() {
            val_errors.push(evaluate(s, val_set, cfg.batch_size)?);
        }
        let teacher_val_error = match (&teacher_head, scheme) {
            (Some(h), Scheme::Od) => {
                Some(evaluate_od_teacher(&students, h, val_set, cfg.batch_size)?)
            }
            _ => None,
        };
        rows.push(EpochRow {
            epoch,
            lr,
            students: (0..m)
                .map(|i| (loss_sums[i] / seen as f64, 100.0 * err_sums[i] as f64 / seen as f64))
                .collect(),
            teacher: (scheme == Scheme::Od)
                .then(|| (t_loss_sum / seen as f64, 100.0 * t_err_sum as f64 / seen as f64)),
            val_errors,
            teacher_val_error,
        });
    }

    let metrics = RunMetrics { scheme, branches: m, rows };
    let best_student = select_best_student(&metrics);
    Ok(TrainOutput { students, teacher_head, metrics, best_student })
}
