use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analysis::{evaluate, Thresholds};
use crate::autodiff::{Tape, Tensor};
use crate::distill::{kd_loss, kd_loss_on_tape, teacher_signals, KDConfig, KdPlan, KdTerm, Strategy, TeacherSignals};
use crate::error::{Error, Result};
use crate::geometry::AtomicSystem;
use crate::models::{ModelConfig, ModelParams};
use crate::rng::{rng_from_seed, stream_seed};

use super::optim::{clip_grad_norm, ema_update};
use super::{mix_batch, origin_weights, TrainConfig, TrainState};

/// A frozen teacher together with the resolved distillation plan.
#[derive(Clone, Debug)]
pub struct Distiller {
    pub teacher: ModelParams,
    pub plan: KdPlan,
    cache: Vec<Option<Arc<TeacherSignals>>>,
}

impl Distiller {
    pub fn new(teacher: ModelParams, kd: &KDConfig, student: &ModelConfig) -> Result<Self> {
        if kd.strategy == Strategy::None {
            return Err(Error::Incompatible("a teacher is only used with a distillation strategy".into()));
        }
        let plan = kd.resolve(student, &teacher.config)?;
        Ok(Self { teacher, plan, cache: Vec::new() })
    }

    /// Keeps teacher outputs for batch items with `key < slots`.
    pub fn with_cache(mut self, slots: usize) -> Self {
        self.cache = vec![None; slots];
        self
    }

    fn signals(&mut self, item: &BatchItem) -> Result<Arc<TeacherSignals>> {
        if let Some(hit) = item.key.and_then(|k| self.cache.get(k)).and_then(|s| s.clone()) {
            return Ok(hit);
        }
        let graph = self.teacher.graph(item.system)?;
        let sig = Arc::new(teacher_signals(&self.plan, &self.teacher, item.system, &graph)?);
        if let Some(slot) = item.key.and_then(|k| self.cache.get_mut(k)) {
            *slot = Some(sig.clone());
        }
        Ok(sig)
    }
}

/// One training sample. `key` identifies the system for teacher caching.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub system: &'a AtomicSystem,
    pub synthetic: bool,
    pub key: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Step number after the update.
    pub step: u64,
    /// Weighted training loss, distillation term included.
    pub loss: f64,
    /// Batch energy MAE.
    pub l0_e: f64,
    /// Batch force MAE.
    pub l0_f: f64,
    /// Distillation loss before λ.
    pub l_kd: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms_student: f64,
    pub wall_ms_teacher: f64,
}

struct Recorded {
    tape: Tape,
    vars: Vec<crate::autodiff::Var>,
    energy_err: crate::autodiff::Var,
    force_err: crate::autodiff::Var,
    kd: KdTerm,
    weight: f64,
}

fn add_into(acc: &mut [Tensor], grads: Vec<Tensor>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
    }
}

fn zeros(store: &crate::models::ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect()
}

/// One optimizer step on `batch`: forward passes (teacher without
/// gradients), weighted loss, backward, clipping, AdamW and EMA.
pub fn train_step(state: &mut TrainState, batch: &[BatchItem], mut distiller: Option<&mut Distiller>, cfg: &TrainConfig) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let b = batch.len() as f64;
    let n_synth = batch.iter().filter(|i| i.synthetic).count();
    let (w_s, w_dft) = origin_weights(n_synth as f64 / b, cfg.r_s_dft)?;

    let t_teacher = Instant::now();
    let signals = match distiller.as_deref_mut() {
        Some(d) => batch.iter().map(|i| d.signals(i).map(Some)).collect::<Result<Vec<_>>>()?,
        None => vec![None; batch.len()],
    };
    let wall_ms_teacher = if distiller.is_some() { t_teacher.elapsed().as_secs_f64() * 1e3 } else { 0.0 };

    let t_student = Instant::now();
    let plan = distiller.as_deref().map(|d| &d.plan);
    let lambda = plan.map_or(0.0, |p| p.lambda);
    let mut recorded = Vec::with_capacity(batch.len());
    let (mut n_atoms, mut n_rows) = (0usize, 0usize);
    for (item, sig) in batch.iter().zip(&signals) {
        let sys = item.system;
        let (Some(e), Some(f)) = (sys.energy, &sys.forces) else {
            return Err(Error::MissingLabels("training system has no energy/force labels".into()));
        };
        let graph = state.model.graph(sys)?;
        let mut tape = Tape::new();
        let mb = state.model.params.bind(&mut tape, true);
        let tb = state.transforms.params.bind(&mut tape, true);
        let fwd = state.model.forward_on_tape(&mut tape, &mb, sys, &graph)?;
        let kd = match (plan, sig) {
            (Some(p), Some(s)) => kd_loss_on_tape(&mut tape, p, &fwd, &graph, &tb, s)?,
            _ => KdTerm::zero(),
        };
        let e_ref = tape.scalar(e);
        let de = tape.sub(fwd.energy, e_ref);
        let energy_err = tape.abs(de);
        let f_ref = tape.constant(Tensor::matrix(f.len(), 3, f.iter().flatten().copied().collect()));
        let df = tape.sub(fwd.forces, f_ref);
        let df = tape.abs(df);
        let force_err = tape.sum(df);
        n_atoms += sys.n_atoms();
        n_rows += kd.rows;
        let mut vars = mb.vars();
        vars.extend(tb.vars());
        recorded.push(Recorded { tape, vars, energy_err, force_err, kd, weight: if item.synthetic { w_s } else { w_dft } });
    }

    let n_model = state.model.params.len();
    let mut grads = [zeros(&state.model.params), zeros(&state.transforms.params)];
    let (mut loss, mut l0_e, mut l0_f, mut l_kd) = (0.0, 0.0, 0.0, 0.0);
    for r in &mut recorded {
        let tape = &mut r.tape;
        let e_val = tape.item(r.energy_err);
        let f_val = tape.item(r.force_err);
        l0_e += e_val / b;
        l0_f += f_val / (3 * n_atoms) as f64;
        let e_term = tape.scale(r.energy_err, r.weight * cfg.alpha_e / b);
        let f_term = tape.scale(r.force_err, r.weight * cfg.alpha_f / (3 * n_atoms) as f64);
        let mut total = tape.add(e_term, f_term);
        if let Some(s) = r.kd.system {
            l_kd += tape.item(s) / b;
            let k = tape.scale(s, r.weight * lambda / b);
            total = tape.add(total, k);
        }
        if let Some(s) = r.kd.rows_sum {
            if n_rows > 0 {
                l_kd += tape.item(s) / n_rows as f64;
                let k = tape.scale(s, r.weight * lambda / n_rows as f64);
                total = tape.add(total, k);
            }
        }
        loss += tape.item(total);
        let mut g = tape.backward(total, &r.vars)?;
        let g_t = g.split_off(n_model);
        add_into(&mut grads[0], g);
        add_into(&mut grads[1], g_t);
    }
    drop(recorded);
    if !loss.is_finite() {
        return Err(Error::Diverged { step: state.step as usize, detail: format!("loss is {loss}") });
    }
    let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::Diverged { step: state.step as usize, detail: format!("gradient norm is {grad_norm}") });
    }
    let lr = cfg.learning_rate(state.step, state.total_steps);
    let t = state.step + 1;
    state.adam_model.step(&mut state.model.params, &grads[0], lr, cfg.weight_decay, t);
    state.adam_transforms.step(&mut state.transforms.params, &grads[1], lr, cfg.weight_decay, t);
    state.step = t;
    ema_update(&mut state.ema, &state.model.params, cfg.ema_decay, t);
    Ok(StepReport {
        step: t,
        loss,
        l0_e,
        l0_f,
        l_kd,
        lr,
        grad_norm,
        wall_ms_student: t_student.elapsed().as_secs_f64() * 1e3,
        wall_ms_teacher,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    #[serde(rename = "L0_E")]
    pub l0_e: f64,
    #[serde(rename = "L0_F")]
    pub l0_f: f64,
    #[serde(rename = "L_KD")]
    pub l_kd: f64,
    pub lr: f64,
    pub wall_ms_student: f64,
    pub wall_ms_teacher: f64,
}

/// Metrics of the averaged model on one validation split, in meV units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub epoch: usize,
    pub step: u64,
    pub split: String,
    pub energy_mae: f64,
    pub force_mae: f64,
    pub force_cos: f64,
    pub efwt: f64,
}

/// Systems a run trains and validates on.
#[derive(Clone, Debug, Default)]
pub struct RunData<'a> {
    pub train: &'a [AtomicSystem],
    /// Teacher-labeled systems mixed in at `alpha_target`.
    pub synthetic: &'a [AtomicSystem],
    pub validation: Vec<(String, &'a [AtomicSystem])>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub state: TrainState,
    pub log: Vec<LogRow>,
    pub validation: Vec<ValidationRow>,
    /// Distillation weight actually used.
    pub lambda: f64,
    pub student_ms: f64,
    pub teacher_ms: f64,
}

impl RunResult {
    /// Averaged parameters of the final step.
    pub fn model(&self) -> ModelParams {
        self.state.ema_model()
    }
}

fn check_labels(systems: &[AtomicSystem], what: &str) -> Result<()> {
    match systems.iter().position(|s| !s.is_labeled()) {
        Some(i) => Err(Error::MissingLabels(format!("{what} system {i} is unlabeled"))),
        None => Ok(()),
    }
}

/// Trains a fresh model. With a distillation strategy other than `none` a
/// teacher is required; with `none` any teacher is ignored.
pub fn train_run(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &RunData,
    kd: Option<(&KDConfig, &ModelParams)>,
    out_dir: Option<&Path>,
) -> Result<RunResult> {
    cfg.validate()?;
    let mut distiller = match kd {
        Some((k, _)) if k.strategy == Strategy::None => None,
        Some((k, teacher)) => Some(Distiller::new(teacher.clone(), k, model_cfg)?),
        None => None,
    };
    let state = TrainState::new(cfg, model_cfg, distiller.as_ref().map(|d| &d.plan))?;
    train_run_from(cfg, state, data, distiller.as_mut(), out_dir)
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(stream_seed(seed, &[3, epoch as u64])));
    idx
}

/// Continues `state` until the configured number of epochs is reached.
pub fn train_run_from(
    cfg: &TrainConfig,
    mut state: TrainState,
    data: &RunData,
    mut distiller: Option<&mut Distiller>,
    out_dir: Option<&Path>,
) -> Result<RunResult> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("no training systems".into()));
    }
    check_labels(data.train, "training")?;
    check_labels(data.synthetic, "synthetic")?;
    for (name, v) in &data.validation {
        check_labels(v, name)?;
    }
    let mixing = cfg.alpha_target > 0.0;
    if mixing && data.synthetic.is_empty() {
        return Err(Error::InvalidArgument("alpha_target > 0 needs synthetic systems".into()));
    }
    let spe = data.train.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * spe) as u64;
    if state.step > 0 && state.total_steps != total {
        return Err(Error::Incompatible(format!("state was trained for {} steps, config asks for {total}", state.total_steps)));
    }
    state.total_steps = total;

    if let Some(d) = distiller.as_deref_mut() {
        if cfg.cache_teacher {
            *d = d.clone().with_cache(data.train.len() + data.synthetic.len());
        }
        if let (Some(target), 0) = (cfg.auto_lambda, state.step) {
            let probe = &data.train[..cfg.batch_size.min(data.train.len())];
            let mut mean = 0.0;
            for s in probe {
                mean += kd_loss(&d.plan, &state.model, &d.teacher, &state.transforms, s)? / probe.len() as f64;
            }
            if mean > 0.0 && mean.is_finite() {
                d.plan.lambda = target / mean;
            }
            log::info!("auto lambda: initial distillation loss {mean:.4e}, lambda {:.4e}", d.plan.lambda);
        }
    }
    let lambda = distiller.as_deref().map_or(0.0, |d| d.plan.lambda);

    let mut log_rows = Vec::new();
    let mut validation = Vec::new();
    let (mut student_ms, mut teacher_ms) = (0.0, 0.0);
    let mut order: Option<(usize, Vec<usize>)> = None;
    let stop = cfg.stop_after_epochs.map_or(total, |e| (e * spe) as u64).min(total);
    while state.step < stop {
        let epoch = (state.step as usize) / spe;
        let pos = (state.step as usize) % spe;
        let batch: Vec<BatchItem> = if mixing {
            mix_batch(data.train, data.synthetic, cfg.batch_size, cfg.alpha_target, &mut state.rng)?
                .into_iter()
                .map(|m| {
                    let (system, key) = if m.synthetic {
                        (&data.synthetic[m.index], data.train.len() + m.index)
                    } else {
                        (&data.train[m.index], m.index)
                    };
                    BatchItem { system, synthetic: m.synthetic, key: Some(key) }
                })
                .collect()
        } else {
            if order.as_ref().map_or(true, |(e, _)| *e != epoch) {
                order = Some((epoch, epoch_order(cfg.seed, epoch, data.train.len())));
            }
            let idx = &order.as_ref().expect("order set").1;
            let end = ((pos + 1) * cfg.batch_size).min(idx.len());
            idx[pos * cfg.batch_size..end]
                .iter()
                .map(|&i| BatchItem { system: &data.train[i], synthetic: false, key: Some(i) })
                .collect()
        };
        let r = train_step(&mut state, &batch, distiller.as_deref_mut(), cfg)?;
        student_ms += r.wall_ms_student;
        teacher_ms += r.wall_ms_teacher;
        log_rows.push(LogRow {
            step: r.step,
            l0_e: r.l0_e,
            l0_f: r.l0_f,
            l_kd: r.l_kd,
            lr: r.lr,
            wall_ms_student: r.wall_ms_student,
            wall_ms_teacher: r.wall_ms_teacher,
        });
        if pos + 1 == spe && cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            let model = state.ema_model();
            for (name, systems) in &data.validation {
                if systems.is_empty() {
                    continue;
                }
                let m = evaluate(&model, systems, Thresholds::default())?;
                log::info!("epoch {} {name}: energy MAE {:.2} meV, force MAE {:.2} meV/A", epoch + 1, m.energy_mae, m.force_mae);
                validation.push(ValidationRow {
                    epoch: epoch + 1,
                    step: state.step,
                    split: name.clone(),
                    energy_mae: m.energy_mae,
                    force_mae: m.force_mae,
                    force_cos: m.force_cos,
                    efwt: m.efwt,
                });
            }
        }
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
        for row in &log_rows {
            w.serialize(row)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("validation.csv"))?;
        for row in &validation {
            w.serialize(row)?;
        }
        w.flush()?;
        state.ema_model().save(dir.join("model.json"))?;
        state.save(dir.join("train_state.json"))?;
    }
    Ok(RunResult { state, log: log_rows, validation, lambda, student_ms, teacher_ms })
}
