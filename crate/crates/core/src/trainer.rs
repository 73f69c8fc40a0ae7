//! Training loop: view construction, mixing injection, loss assembly,
//! AdamW, EMA teacher and the epoch driver.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::augment::{contrastive_view, multicrop_view, AugmentConfig};
use crate::checkpoint::{self, CheckpointError};
use crate::config::{Framework, RunConfig};
use crate::data::LabeledSet;
use crate::evaluation::{self, EvalError};
use crate::losses::{
    dino_clean_loss, dino_mixing_loss, dino_source_loss, dino_total_loss, mean_of, moco_total_loss,
    teacher_distribution, LossError, LossWeights, MocoMixed, MocoViews, ViewPolicy,
};
use crate::metrics::{MetricsError, MetricsRow, MetricsWriter};
use crate::mixing::{select_strategy, ImageBatch, MixError, MixPlan, Strategy};
use crate::model::{encoder_forward, forward_detached, init_params, EncoderParams, Head, ModelError, TeacherState, Topology};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: {diagnostic}")]
    NonFinite { step: u64, diagnostic: String },
    #[error("invalid training input: {0}")]
    Input(String),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
const ADAM_EPS: f64 = 1e-8;

/// Warmup + cosine learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    /// Peak `base_lr · batch / 256`, warmup over `warmup_epochs` epochs.
    pub fn new(cfg: &RunConfig, steps_per_epoch: u64) -> Self {
        let total = steps_per_epoch * cfg.epochs as u64;
        Self {
            peak: cfg.base_lr * cfg.batch_size as f64 / 256.0,
            warmup_steps: (cfg.warmup_epochs as u64 * steps_per_epoch).min(total.saturating_sub(1)),
            total_steps: total,
        }
    }
}

/// Linear warmup from 0, then cosine decay reaching 0 at the final step.
pub fn lr_at(step: u64, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        return s.peak * step as f64 / s.warmup_steps as f64;
    }
    let last = s.total_steps.saturating_sub(1);
    if step >= last {
        return 0.0;
    }
    let progress = (step - s.warmup_steps) as f64 / (last - s.warmup_steps) as f64;
    0.5 * s.peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub student: EncoderParams,
    pub teacher: TeacherState,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub step: u64,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Self {
        let topology = cfg.topology();
        let student = init_params(cfg.seed, &topology);
        let center = topology.distill.as_ref().map(|d| d.out_dim);
        let teacher = TeacherState::from_student(&student, cfg.momentum, center);
        let zeros: Vec<Tensor> = student.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Self {
            student,
            teacher,
            adam_m: zeros.clone(),
            adam_v: zeros,
            step: 0,
            epoch: 0,
            rng,
            loss_history: Vec::new(),
        }
    }
}

/// Encoder invocations in one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardCounts {
    pub student: usize,
    pub teacher: usize,
}

/// Inputs of one step after augmentation and mixing.
#[derive(Clone, Debug)]
pub struct Views {
    /// Clean global views. Contrastive: `[a, b]`; distillation: two globals.
    pub globals: Vec<Tensor>,
    /// Whether the student sees each global view clean.
    pub student_globals: Vec<bool>,
    /// Clean local crops (distillation).
    pub locals: Vec<Tensor>,
    /// Mixed student inputs.
    pub mixed: Vec<Tensor>,
    /// Mixed teacher/key input sharing the plan of `mixed`.
    pub mixed_target: Option<Tensor>,
    pub plan: Option<MixPlan>,
}

impl Views {
    pub fn lambdas(&self) -> Option<&[f64]> {
        self.plan.as_ref().map(|p| p.lambdas.as_slice())
    }
}

fn augment_cfg(cfg: &RunConfig) -> AugmentConfig {
    AugmentConfig {
        enabled: cfg.augment,
        blur: cfg.blur,
        solarize: cfg.solarize,
    }
}

fn mixed_local_count(cfg: &RunConfig) -> usize {
    if !cfg.mixing || cfg.n_local_views == 0 {
        return 0;
    }
    let n = (cfg.n_local_views as f64 * cfg.local_mixed_fraction).floor() as usize;
    match cfg.view_policy {
        ViewPolicy::Replace => n,
        ViewPolicy::Extra => n.max(1),
    }
}

fn sample_plan<R: Rng + ?Sized>(cfg: &RunConfig, n: usize, res: usize, rng: &mut R) -> Result<MixPlan> {
    let strategy = select_strategy(rng, &cfg.strategies)?;
    Ok(MixPlan::sample(&cfg.mix_spec(strategy), n, (res, res), rng)?)
}

fn mix(plan: &MixPlan, x: &Tensor) -> Result<Tensor> {
    Ok(plan.apply(&ImageBatch::new(x.clone())?)?.images)
}

/// Build the augmented, optionally mixed views of one batch.
///
/// Contrastive: two clean views `a`, `b`; with mixing the student sees
/// `mix(a)` (replacing `a` under the replace policy after a coin flip on
/// which view plays `a`) and the key encoder sees `mix(b)`, both from one plan.
///
/// Distillation: two global views and `n_local_views` local crops at half
/// resolution, of which `floor(n_local_views · local_mixed_fraction)` are
/// replaced by mixed crops. Without local views the first global view is
/// replaced. The teacher sees `mix(global 1)` for the mixing term.
pub fn build_views<R: Rng + ?Sized>(batch: &Tensor, cfg: &RunConfig, rng: &mut R) -> Result<Views> {
    let shape = batch.shape();
    if shape.len() != 4 || !shape[0].is_multiple_of(2) || shape[0] == 0 {
        return Err(MixError::OddBatch(shape.first().copied().unwrap_or(0)).into());
    }
    let (n, res) = (shape[0], shape[2]);
    let aug = augment_cfg(cfg);
    match cfg.framework {
        Framework::Contrastive => {
            let mut a = contrastive_view(batch, &aug, rng);
            let mut b = contrastive_view(batch, &aug, rng);
            if !cfg.mixing {
                return Ok(Views {
                    globals: vec![a, b],
                    student_globals: vec![true, true],
                    locals: vec![],
                    mixed: vec![],
                    mixed_target: None,
                    plan: None,
                });
            }
            let plan = sample_plan(cfg, n, res, rng)?;
            if cfg.view_policy == ViewPolicy::Replace && rng.random_bool(0.5) {
                std::mem::swap(&mut a, &mut b);
            }
            let mixed = mix(&plan, &a)?;
            let target = mix(&plan, &b)?;
            Ok(Views {
                globals: vec![a, b],
                student_globals: vec![cfg.view_policy == ViewPolicy::Extra, true],
                locals: vec![],
                mixed: vec![mixed],
                mixed_target: Some(target),
                plan: Some(plan),
            })
        }
        Framework::Distillation => {
            let globals: Vec<Tensor> = (0..2).map(|_| multicrop_view(batch, res, false, &aug, rng)).collect();
            let local_res = res / 2;
            let n_mixed = mixed_local_count(cfg);
            let n_clean = match cfg.view_policy {
                ViewPolicy::Replace => cfg.n_local_views - n_mixed,
                ViewPolicy::Extra => cfg.n_local_views,
            };
            let locals: Vec<Tensor> = (0..n_clean).map(|_| multicrop_view(batch, local_res, true, &aug, rng)).collect();
            let replace_global = cfg.mixing && cfg.n_local_views == 0;
            if !cfg.mixing || (n_mixed == 0 && !replace_global) {
                return Ok(Views {
                    globals,
                    student_globals: vec![true, true],
                    locals,
                    mixed: vec![],
                    mixed_target: None,
                    plan: None,
                });
            }
            if replace_global {
                let plan = sample_plan(cfg, n, res, rng)?;
                let mixed = vec![mix(&plan, &globals[0])?];
                let target = mix(&plan, &globals[1])?;
                let student_globals = vec![cfg.view_policy == ViewPolicy::Extra, true];
                return Ok(Views {
                    globals,
                    student_globals,
                    locals,
                    mixed,
                    mixed_target: Some(target),
                    plan: Some(plan),
                });
            }
            if local_res < 4 || res != 2 * local_res {
                return Err(TrainError::Input(format!("local views need an even global resolution >= 8, got {res}")));
            }
            let plan = sample_plan(cfg, n, local_res, rng)?;
            let mixed = (0..n_mixed)
                .map(|_| mix(&plan, &multicrop_view(batch, local_res, true, &aug, rng)))
                .collect::<Result<Vec<_>>>()?;
            let target = mix(&plan, &globals[1])?;
            Ok(Views {
                globals,
                student_globals: vec![true, true],
                locals,
                mixed,
                mixed_target: Some(target),
                plan: Some(plan),
            })
        }
    }
}

/// Result of one optimisation step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: f64,
    pub lr: f64,
    pub strategy: Option<Strategy>,
    pub lambdas: Vec<f64>,
    pub lambda_c: Vec<f64>,
    pub forwards: ForwardCounts,
    /// InfoNCE groups (contrastive) or student views (distillation).
    pub groups: usize,
}

struct Forward<'a, 't> {
    topology: &'a Topology,
    student: crate::model::BoundParams<'t>,
    teacher: &'a EncoderParams,
    tape: &'t Tape,
    counts: ForwardCounts,
    ranges: Vec<(String, f64, f64)>,
}

fn range_of(t: &Tensor) -> (f64, f64) {
    t.data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

impl<'a, 't> Forward<'a, 't> {
    fn student(&mut self, x: &Tensor, head: Head, tag: &str) -> Result<Var<'t>> {
        self.counts.student += 1;
        let v = encoder_forward(self.topology, &self.student, self.tape.constant(x.clone()), head)?;
        let (lo, hi) = range_of(&v.value());
        self.ranges.push((tag.to_string(), lo, hi));
        Ok(v)
    }

    fn teacher(&mut self, x: &Tensor, head: Head, tag: &str) -> Result<Tensor> {
        self.counts.teacher += 1;
        let t = forward_detached(self.topology, self.teacher, x, head)?;
        let (lo, hi) = range_of(&t);
        self.ranges.push((tag.to_string(), lo, hi));
        Ok(t)
    }
}

struct Assembled<'t> {
    loss: Var<'t>,
    groups: usize,
    center_batch: Vec<Tensor>,
}

fn contrastive_loss<'t>(fw: &mut Forward<'_, 't>, views: &Views, cfg: &RunConfig, weights: Option<&LossWeights>) -> Result<Assembled<'t>> {
    let tau = cfg.temperature.contrastive;
    let (a, b) = (&views.globals[0], &views.globals[1]);
    let q_a = if views.student_globals[0] {
        Some(fw.student(a, Head::ProjectionPrediction, "q_a")?)
    } else {
        None
    };
    let q_b = fw.student(b, Head::ProjectionPrediction, "q_b")?;
    let k_a = fw.teacher(a, Head::Projection, "k_a")?;
    let k_b = fw.teacher(b, Head::Projection, "k_b")?;
    let tape = fw.tape;
    let clean = MocoViews {
        q_a,
        q_b,
        k_a: tape.constant(k_a),
        k_b: tape.constant(k_b),
    };
    let mixed = match (&views.plan, views.mixed.first(), &views.mixed_target) {
        (Some(_), Some(xm), Some(xt)) => {
            let q_mix = fw.student(xm, Head::ProjectionPrediction, "q_mix")?;
            let k_mix = tape.constant(fw.teacher(xt, Head::Projection, "k_mix")?);
            Some(MocoMixed { q_mix, k_mix })
        }
        _ => None,
    };
    let pair_of = views.plan.as_ref().map(|p| p.pair_of.clone()).unwrap_or_default();
    let out = moco_total_loss(&clean, mixed.as_ref(), weights, &pair_of, tau, cfg.view_policy)?;
    Ok(Assembled {
        loss: out.total,
        groups: out.groups,
        center_batch: vec![],
    })
}

fn distillation_loss<'t>(
    fw: &mut Forward<'_, 't>,
    views: &Views,
    cfg: &RunConfig,
    center: &[f64],
    weights: Option<&LossWeights>,
) -> Result<Assembled<'t>> {
    let t = &cfg.temperature;
    let t_logits: Vec<Tensor> = views
        .globals
        .iter()
        .enumerate()
        .map(|(i, g)| fw.teacher(g, Head::Distillation, &format!("teacher_global{i}")))
        .collect::<Result<_>>()?;
    let probs: Vec<Tensor> = t_logits
        .iter()
        .map(|l| teacher_distribution(l, center, t.teacher))
        .collect::<std::result::Result<_, _>>()?;
    let mut students = Vec::new();
    for (i, g) in views.globals.iter().enumerate() {
        if views.student_globals[i] {
            students.push((fw.student(g, Head::Distillation, &format!("student_global{i}"))?, Some(i)));
        }
    }
    for (i, l) in views.locals.iter().enumerate() {
        students.push((fw.student(l, Head::Distillation, &format!("student_local{i}"))?, None));
    }
    let clean = dino_clean_loss(&probs, &students, t.student)?;
    let mut groups = students.len();
    let (mut source, mut mixing) = (None, None);
    if let (Some(plan), Some(w), Some(xt)) = (&views.plan, weights, &views.mixed_target) {
        let pm = teacher_distribution(&fw.teacher(xt, Head::Distillation, "teacher_mixed")?, center, t.teacher)?;
        let (mut ls, mut lm) = (Vec::new(), Vec::new());
        for (i, xm) in views.mixed.iter().enumerate() {
            let s = fw.student(xm, Head::Distillation, &format!("student_mixed{i}"))?;
            ls.push(dino_source_loss(&probs[1], s, w, &plan.pair_of, t.student)?);
            lm.push(dino_mixing_loss(&pm, s, w, &plan.pair_of, t.student)?);
        }
        groups += views.mixed.len();
        source = Some(mean_of(&ls)?);
        mixing = Some(mean_of(&lm)?);
    }
    Ok(Assembled {
        loss: dino_total_loss(clean, source, mixing)?,
        groups,
        center_batch: t_logits,
    })
}

fn diagnostic(views: &Views, ranges: &[(String, f64, f64)], loss: f64) -> String {
    let mut s = format!("loss={loss}");
    if let Some(p) = &views.plan {
        s.push_str(&format!(
            "; strategy={}; lambda={:?}; lambda_c={:?}",
            p.strategy,
            p.lambdas,
            p.lambda_c().values
        ));
    }
    for (tag, lo, hi) in ranges {
        s.push_str(&format!("; {tag} range=[{lo}, {hi}]"));
    }
    s
}

/// Forward/backward on prepared views, returning the scalar loss and gradients.
fn loss_and_grads(state: &TrainState, views: &Views, cfg: &RunConfig) -> Result<(f64, Vec<Tensor>, StepReport, Vec<Tensor>)> {
    let topology = cfg.topology();
    let tape = Tape::new();
    let mut fw = Forward {
        topology: &topology,
        student: state.student.register(&tape, true),
        teacher: &state.teacher.params,
        tape: &tape,
        counts: ForwardCounts::default(),
        ranges: Vec::new(),
    };
    let weights = views
        .plan
        .as_ref()
        .map(|p| LossWeights::new(&p.lambdas, &p.lambda_c(), cfg.weight_source, cfg.weight_mix));
    let assembled = match cfg.framework {
        Framework::Contrastive => contrastive_loss(&mut fw, views, cfg, weights.as_ref())?,
        Framework::Distillation => {
            let center = state.teacher.center.clone().unwrap_or_default();
            distillation_loss(&mut fw, views, cfg, &center, weights.as_ref())?
        }
    };
    let loss = assembled.loss.item();
    if !loss.is_finite() {
        return Err(TrainError::NonFinite {
            step: state.step,
            diagnostic: diagnostic(views, &fw.ranges, loss),
        });
    }
    let grads = tape.backward(assembled.loss)?;
    let g: Vec<Tensor> = fw
        .student
        .vars()
        .iter()
        .zip(state.student.tensors())
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    if let Some(bad) = g.iter().position(|t| !t.all_finite()) {
        return Err(TrainError::NonFinite {
            step: state.step,
            diagnostic: format!(
                "gradient of {} non-finite; {}",
                state.student.names()[bad],
                diagnostic(views, &fw.ranges, loss)
            ),
        });
    }
    let report = StepReport {
        loss,
        lr: 0.0,
        strategy: views.plan.as_ref().map(|p| p.strategy),
        lambdas: views.plan.as_ref().map(|p| p.lambdas.clone()).unwrap_or_default(),
        lambda_c: views.plan.as_ref().map(|p| p.lambda_c().values).unwrap_or_default(),
        forwards: fw.counts,
        groups: assembled.groups,
    };
    Ok((loss, g, report, assembled.center_batch))
}

/// Loss of the current parameters on prepared views, without updating anything.
pub fn evaluate_loss(state: &TrainState, views: &Views, cfg: &RunConfig) -> Result<StepReport> {
    Ok(loss_and_grads(state, views, cfg)?.2)
}

/// Decoupled-weight-decay Adam update of the student. Weight decay applies
/// to tensors with two or more dimensions.
pub fn adamw_update(state: &mut TrainState, grads: &[Tensor], lr: f64, weight_decay: f64) {
    let t = (state.step + 1) as i32;
    let (b1, b2) = ADAM_BETAS;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, p) in state.student.tensors_mut().iter_mut().enumerate() {
        let decay = if p.ndim() >= 2 { weight_decay } else { 0.0 };
        let m = state.adam_m[k].data_mut();
        let v = state.adam_v[k].data_mut();
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grads[k].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            *w -= lr * (update + decay * *w);
        }
    }
}

/// One full step: views, loss, backward, AdamW, EMA teacher, centre update.
pub fn train_step(state: &mut TrainState, batch: &Tensor, cfg: &RunConfig, schedule: &Schedule) -> Result<StepReport> {
    let views = build_views(batch, cfg, &mut state.rng)?;
    let lr = lr_at(state.step, schedule);
    let (loss, grads, mut report, center_batch) = loss_and_grads(state, &views, cfg)?;
    adamw_update(state, &grads, lr, cfg.weight_decay);
    crate::model::ema_update(&mut state.teacher.params, &state.student, state.teacher.momentum)?;
    if !center_batch.is_empty() {
        let refs: Vec<&Tensor> = center_batch.iter().collect();
        state.teacher.update_center(&refs, cfg.center_momentum);
    }
    state.step += 1;
    state.loss_history.push(loss);
    report.lr = lr;
    Ok(report)
}

/// Where and how long to run.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Metrics, summary and checkpoints go here when set.
    pub out_dir: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
    /// Stop (with a checkpoint) after this many epochs of this invocation.
    pub stop_after_epochs: Option<usize>,
}

/// Per-step log entry.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub report: StepReport,
}

pub struct RunOutcome {
    pub state: TrainState,
    pub rows: Vec<MetricsRow>,
    pub steps: Vec<StepRecord>,
}

pub fn steps_per_epoch(n_train: usize, batch_size: usize) -> u64 {
    (n_train / batch_size) as u64
}

fn epoch_evaluation(
    cfg: &RunConfig,
    state: &TrainState,
    epoch: usize,
    train: &LabeledSet,
    test: &LabeledSet,
) -> Result<(Option<f64>, Option<f64>)> {
    let due = |every: usize| every > 0 && (epoch.is_multiple_of(every) || epoch == cfg.epochs);
    let topology = cfg.topology();
    let knn = if due(cfg.knn_every) {
        let k = cfg.knn_k.min(train.len());
        Some(evaluation::knn_eval(&topology, &state.student, train, test, k)?)
    } else {
        None
    };
    let probe = if due(cfg.probe_every) {
        let opts = evaluation::ProbeOptions {
            epochs: cfg.probe_epochs,
            lr: cfg.probe_lr,
            seed: cfg.seed,
            ..Default::default()
        };
        Some(evaluation::linear_probe(&topology, &state.student, train, test, &opts)?.result.top1)
    } else {
        None
    };
    Ok((knn, probe))
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ep{epoch}.ckpt"))
}

/// Train for `cfg.epochs` epochs over shuffled, drop-last batches.
pub fn run_training(cfg: &RunConfig, train: &LabeledSet, test: &LabeledSet, opts: &RunOptions) -> Result<RunOutcome> {
    let spe = steps_per_epoch(train.len(), cfg.batch_size);
    if spe == 0 {
        return Err(TrainError::Input(format!(
            "{} training samples cannot fill one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let [c, h, w] = train.image_shape();
    if c != cfg.channels() || h != cfg.image_size() || w != h {
        return Err(TrainError::Input(format!(
            "dataset images {c}×{h}×{w} do not match config {}×{s}×{s}",
            cfg.channels(),
            s = cfg.image_size()
        )));
    }
    let schedule = Schedule::new(cfg, spe);
    let hash = cfg.hash();
    let mut state = match &opts.resume_from {
        Some(p) => checkpoint::load_state(p, &hash)?,
        None => TrainState::new(cfg),
    };
    let mut writer = match &opts.out_dir {
        Some(d) => Some(MetricsWriter::open(d, cfg, state.epoch)?),
        None => None,
    };
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut steps = Vec::new();
    let mut done_here = 0;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut state.rng);
        let mut total = 0.0;
        let mut last_lr = 0.0;
        for chunk in order.chunks_exact(cfg.batch_size) {
            let batch = train.gather(chunk);
            let report = train_step(&mut state, &batch, cfg, &schedule)?;
            total += report.loss;
            last_lr = report.lr;
            steps.push(StepRecord {
                step: state.step - 1,
                epoch,
                report,
            });
        }
        state.epoch = epoch;
        let (knn, probe) = epoch_evaluation(cfg, &state, epoch, train, test)?;
        let row = MetricsRow {
            epoch,
            train_loss: total / spe as f64,
            lr: last_lr,
            knn_acc: knn,
            probe_acc: probe,
            wall_time_s: if cfg.log_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        log::info!("epoch {epoch}: loss {:.6} lr {:.3e}", row.train_loss, row.lr);
        done_here += 1;
        let stopping = opts.stop_after_epochs == Some(done_here);
        if let (Some(wr), Some(dir)) = (writer.as_mut(), &opts.out_dir) {
            wr.append(&row)?;
            let periodic = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
            if periodic || epoch == cfg.epochs || stopping {
                checkpoint::save_state(&checkpoint_path(dir, epoch), &state, cfg)?;
            }
            wr.write_summary(&row, state.step)?;
        }
        rows.push(row);
        if stopping {
            break;
        }
    }
    Ok(RunOutcome { state, rows, steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> RunConfig {
        let base = "backbone = mlp\nmlp_hidden = 16\nproj_hidden = 16\nproj_dim = 8\npred_hidden = 16\n\
                    distill_hidden = 16\ndistill_bottleneck = 8\nout_dim = 16\nsynthetic_size = 8\n\
                    synthetic_classes = 2\nsynthetic_train_per_class = 4\nbatch_size = 4\nepochs = 2\n\
                    warmup_epochs = 1\nn_local_views = 2\npatch_min = 0.25\n";
        RunConfig::from_text(&format!("{base}{text}")).unwrap()
    }

    fn batch() -> Tensor {
        Tensor::new(vec![4, 3, 8, 8], (0..768).map(|k| ((k * 31) % 89) as f64 / 88.0).collect()).unwrap()
    }

    #[test]
    fn schedule_peaks_and_ends_at_zero() {
        let mut c = RunConfig::default();
        c.batch_size = 256;
        let s = Schedule::new(&c, 10);
        assert!((lr_at(s.warmup_steps, &s) - 0.0005).abs() < 1e-15);
        assert_eq!(lr_at(0, &s), 0.0);
        assert!(lr_at(s.total_steps - 1, &s).abs() < 1e-9);
        c.batch_size = 1024;
        let s = Schedule::new(&c, 10);
        assert!((s.peak - 0.002).abs() < 1e-15);
        let lrs: Vec<f64> = (s.warmup_steps..s.total_steps).map(|t| lr_at(t, &s)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn eight_locals_half_mixed() {
        let c = cfg("backbone = cnn\ncnn_channels = 4,4,4,4\nframework = distillation\nn_local_views = 8\n");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = build_views(&batch(), &c, &mut rng).unwrap();
        assert_eq!((v.locals.len(), v.mixed.len()), (4, 4));
        assert_eq!(v.locals[0].shape(), &[4, 3, 4, 4]);
        assert_eq!(v.mixed_target.as_ref().unwrap().shape(), &[4, 3, 8, 8]);
    }

    #[test]
    fn replace_keeps_student_pass_count() {
        for fw in ["contrastive", "distillation"] {
            let arch = "backbone = cnn\ncnn_channels = 4,4,4,4\n";
            let base = cfg(&format!("{arch}framework = {fw}\nmixing = false\n"));
            let mixed = cfg(&format!("{arch}framework = {fw}\n"));
            let extra = cfg(&format!("{arch}framework = {fw}\nview_policy = extra\n"));
            let state = TrainState::new(&base);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let count = |c: &RunConfig, rng: &mut ChaCha8Rng| {
                let v = build_views(&batch(), c, rng).unwrap();
                evaluate_loss(&state, &v, c).unwrap().forwards
            };
            let b = count(&base, &mut rng);
            let r = count(&mixed, &mut rng);
            let e = count(&extra, &mut rng);
            assert_eq!(r.student, b.student, "{fw}");
            assert_eq!(r.teacher, b.teacher + 1, "{fw}");
            assert!(e.student > b.student, "{fw}");
        }
    }

    #[test]
    fn lambda_one_without_augmentation_copies_the_view() {
        let c = cfg("augment = false\nstrategies = mixup\nalpha = 0.001\n");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = batch();
        let v = build_views(&x, &c, &mut rng).unwrap();
        let p = v.plan.as_ref().unwrap();
        let plan = MixPlan::mixup(vec![1.0; 4], 4).unwrap();
        assert_eq!(mix(&plan, &x).unwrap(), x);
        assert!(p.lambdas.iter().all(|l| (0.0..=1.0).contains(l)));
    }

    #[test]
    fn step_is_deterministic_and_zero_lr_only_moves_teacher() {
        let c = cfg("");
        let s0 = TrainState::new(&c);
        let sched = Schedule { peak: 0.0, warmup_steps: 0, total_steps: 10 };
        let (mut a, mut b) = (s0.clone(), s0.clone());
        let la = train_step(&mut a, &batch(), &c, &sched).unwrap().loss;
        let lb = train_step(&mut b, &batch(), &c, &sched).unwrap().loss;
        assert_eq!(la, lb);
        assert_eq!(a.student, s0.student);
        for (x, y) in a.teacher.params.tensors().iter().zip(s0.teacher.params.tensors()) {
            assert!(x.max_abs_diff(y) < 1e-15);
        }
    }

    #[test]
    fn non_finite_loss_reports_diagnostics() {
        let c = cfg("");
        let mut s = TrainState::new(&c);
        s.student.tensors_mut()[0].data_mut()[0] = f64::NAN;
        let sched = Schedule::new(&c, 1);
        match train_step(&mut s, &batch(), &c, &sched) {
            Err(TrainError::NonFinite { diagnostic, .. }) => {
                assert!(diagnostic.contains("lambda="), "{diagnostic}");
                assert!(diagnostic.contains("range="), "{diagnostic}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn odd_batch_rejected() {
        let c = cfg("");
        let x = Tensor::zeros(&[3, 3, 8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_views(&x, &c, &mut rng).is_err());
    }
}
