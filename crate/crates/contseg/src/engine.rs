//! Continual training loop.
//!
//! A run walks the task schedule step by step. Step 1 is plain supervised
//! set-prediction training; every later step first deep-copies the current
//! parameters as a frozen teacher, then appends the new step's recognition
//! head and trains on the step's filtered data with the distillation terms
//! keeping the teacher's localization and recognition behaviour alive in the
//! student.
//!
//! Per iteration the engine draws a batch (with replacement) from a stream
//! derived from `(seed, "step{t}.batch", iteration)`, builds one graph per
//! sample (optionally in parallel, in deterministic order), folds the
//! per-sample gradients into a batch mean, and applies one decoupled-
//! weight-decay adaptive update under a polynomial learning-rate decay.
//! Later steps train at half the base learning rate by default.
//!
//! Everything downstream of the seed is deterministic: reruns with the same
//! settings produce bitwise-identical loss reports, parameters, and metrics,
//! regardless of worker count.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Axis};
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::data::{self, build_schedule, Protocol, Sample, SynthSpec, TaskSchedule};
use crate::evalm::{self, MetricReport, Recall, ScoreFilter};
use crate::loss::{compose, kd, seg, KdConfig, LossConfig, LossTerms, LossToggles, LossWeights, TermVars};
use crate::matching::{match_proposals, CostWeights};
use crate::model::{self, HeadMode, Model, ModelConfig, Stage1Values, TaskInit};
use crate::params::{Binder, ParamSet};
use crate::rng;
use crate::tape::{Arr, ParamId, Tape};
use crate::{par, Error, Result};

/// Optimization schedule for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Iterations for the first (base) step.
    pub iterations_base: usize,
    /// Iterations per newly introduced class on later steps.
    pub iterations_per_class: usize,
    /// Samples per batch, drawn with replacement.
    pub batch_size: usize,
    /// Peak learning rate of the base step.
    pub lr_base: f64,
    /// Peak learning rate of later steps; `None` means half of `lr_base`.
    pub lr_later: Option<f64>,
    /// Decoupled weight-decay factor, applied to decay-flagged parameters.
    pub weight_decay: f64,
    /// Exponent of the polynomial learning-rate decay.
    pub poly_power: f64,
    /// Mirror each drawn sample left-right with probability 1/2.
    pub hflip: bool,
    /// Amplitude of fresh per-visit pixel noise (uniform in `[-noise, noise]`,
    /// re-drawn every time a sample enters a batch). `0` disables. Re-drawing
    /// stops the network from keying on the frozen noise pattern of each
    /// stored image, which otherwise lets mask and objectness heads memorise
    /// the training split without generalising.
    pub noise: f64,
    /// Emit a loss record every this many iterations (the last iteration is
    /// always logged).
    pub log_every: usize,
    /// Root seed; every random stream of the run derives from it.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations_base: 2000,
            iterations_per_class: 300,
            batch_size: 8,
            lr_base: 1e-4,
            lr_later: None,
            weight_decay: 0.05,
            poly_power: 0.9,
            hflip: true,
            noise: 0.03,
            log_every: 50,
            seed: 17,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations_base == 0 || self.iterations_per_class == 0 {
            return Err(Error::config("iteration counts must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr_base > 0.0) || self.lr_later.is_some_and(|l| !(l > 0.0)) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(self.poly_power > 0.0) {
            return Err(Error::config("poly_power must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be positive"));
        }
        Ok(())
    }

    /// Learning rate of steps after the first.
    pub fn later_lr(&self) -> f64 {
        self.lr_later.unwrap_or(self.lr_base * 0.5)
    }
}

/// Everything one run needs: data spec, schedule shape, architecture,
/// optimization, and objective configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub data: SynthSpec,
    /// Classes in the first step.
    pub base_classes: usize,
    /// Classes added per later step.
    pub increment: usize,
    pub protocol: Protocol,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub kd: KdConfig,
    pub toggles: LossToggles,
    pub weights: LossWeights,
    pub head_mode: HeadMode,
    pub task_init: TaskInit,
    /// Score the background sentinel inside the overall mean.
    pub include_background: bool,
    /// IoU threshold of the proposal-recall probe.
    pub ar_iou: f64,
}

impl Default for RunSettings {
    fn default() -> Self {
        let data = data::DEFAULT_SPEC;
        RunSettings {
            base_classes: data.num_classes,
            increment: 1,
            data,
            protocol: Protocol::Overlapped,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            kd: KdConfig::default(),
            toggles: LossToggles::default(),
            weights: LossWeights::default(),
            head_mode: HeadMode::PerTask,
            task_init: TaskInit::Random,
            include_background: false,
            ar_iou: 0.5,
        }
    }
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.image_size != self.data.image_size {
            return Err(Error::config(format!(
                "model expects {}px inputs but the data spec produces {}px images",
                self.model.image_size, self.data.image_size
            )));
        }
        if !(0.0 < self.ar_iou && self.ar_iou < 1.0) {
            return Err(Error::config(format!(
                "ar_iou must be in (0,1), got {}",
                self.ar_iou
            )));
        }
        // Surfaces schedule-arithmetic errors at validation time.
        build_schedule(self.data.num_classes, self.base_classes, self.increment)?;
        Ok(())
    }

    /// The naive-finetune baseline: supervised term only, one shared
    /// recognition query whose classifier grows in place.
    pub fn finetune_baseline(mut self) -> Self {
        self.toggles = LossToggles::finetune();
        self.head_mode = HeadMode::SharedQuery;
        self
    }
}

/// Decoupled-weight-decay adaptive optimizer with polynomial learning-rate
/// decay over a fixed iteration budget.
///
/// Moment state is allocated lazily per parameter, so parameters that never
/// receive a gradient (for example, old task heads while every distillation
/// term is off) are never touched.
pub struct AdamW {
    lr0: f64,
    weight_decay: f64,
    power: f64,
    total: usize,
    updates: usize,
    m: BTreeMap<ParamId, Arr>,
    v: BTreeMap<ParamId, Arr>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamW {
    pub fn new(lr0: f64, weight_decay: f64, power: f64, total_iterations: usize) -> Self {
        AdamW {
            lr0,
            weight_decay,
            power,
            total: total_iterations.max(1),
            updates: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Learning rate of the `iteration`-th update (0-based):
    /// `lr0 * (1 - iteration/total)^power`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let frac = 1.0 - iteration.min(self.total) as f64 / self.total as f64;
        self.lr0 * frac.powf(self.power)
    }

    /// Apply one update from mean gradients; parameters without a gradient
    /// entry are skipped. Returns the learning rate used.
    pub fn step(&mut self, ps: &mut ParamSet, grads: &BTreeMap<ParamId, Arr>) -> f64 {
        let lr = self.lr_at(self.updates);
        self.updates += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.updates as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.updates as i32);
        let metas: Vec<(ParamId, bool)> = ps.iter().map(|(id, e)| (id, e.decay)).collect();
        for (id, decay) in metas {
            let Some(g) = grads.get(&id) else { continue };
            let m = self.m.entry(id).or_insert_with(|| Arr::zeros(g.raw_dim()));
            let v = self.v.entry(id).or_insert_with(|| Arr::zeros(g.raw_dim()));
            ndarray::azip!((m in m, &g in g) *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
            ndarray::azip!((v in v, &g in g) *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
            let p = ps.value_mut(id);
            if decay && self.weight_decay > 0.0 {
                p.mapv_inplace(|x| x * (1.0 - lr * self.weight_decay));
            }
            ndarray::azip!((p in p, m in &self.m[&id], v in &self.v[&id]) {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            });
        }
        lr
    }

    pub fn updates_done(&self) -> usize {
        self.updates
    }
}

/// One logged training record; serialized as a JSON line in the run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationLog {
    pub step: usize,
    pub iteration: usize,
    pub lr: f64,
    pub terms: LossTerms,
}

/// Evaluation bundle of one completed step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Classes introduced at this step.
    pub classes: Vec<u32>,
    pub iterations: usize,
    /// Batch-mean loss terms of the last training iteration.
    pub final_terms: LossTerms,
    pub eval: MetricReport,
    /// Proposal recall over any positive score, on old+current classes.
    pub ar_positive: Option<f64>,
    /// Proposal recall over confidently scored proposals only.
    pub ar_confident: Option<f64>,
    /// Parameter checksum after the step, for resume verification.
    pub checksum: u64,
}

/// Full result of a run: one record per completed step plus the aggregate
/// over steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub steps: Vec<StepRecord>,
    pub continual: MetricReport,
}

/// Evaluation products of [`Engine::evaluate`].
#[derive(Debug, Clone)]
pub struct StepEval {
    pub report: MetricReport,
    pub recall_positive: Option<Recall>,
    pub recall_confident: Option<Recall>,
}

struct StepCtx<'a> {
    step: usize,
    /// Per-step class counts `|C^j|`, j = 1..=step.
    widths: Vec<usize>,
    current: Vec<u32>,
    old_total: usize,
    teacher: Option<&'a ParamSet>,
}

struct SampleResult {
    grads: BTreeMap<ParamId, Arr>,
    terms: LossTerms,
}

/// The driver: owns the immutable run inputs and trains/evaluates parameter
/// sets against them.
pub struct Engine {
    settings: RunSettings,
    model: Model,
    schedule: TaskSchedule,
    train_data: Vec<Sample>,
    eval_data: Vec<Sample>,
}

impl Engine {
    /// Build an engine over explicit corpora (both splits must come from a
    /// spec matching `settings.data`).
    pub fn new(settings: RunSettings, train_data: Vec<Sample>, eval_data: Vec<Sample>) -> Result<Engine> {
        settings.validate()?;
        let schedule = build_schedule(settings.data.num_classes, settings.base_classes, settings.increment)?;
        let model = Model::new(settings.model.clone())?;
        if train_data.is_empty() || eval_data.is_empty() {
            return Err(Error::config("both data splits must be non-empty"));
        }
        Ok(Engine { settings, model, schedule, train_data, eval_data })
    }

    /// Generate both splits from `settings.data` and build the engine.
    pub fn from_settings(settings: RunSettings) -> Result<Engine> {
        settings.validate()?;
        let (train, eval) = data::generate_dataset(&settings.data)?;
        Engine::new(settings, train, eval)
    }

    pub fn settings(&self) -> &RunSettings {
        &self.settings
    }

    pub fn schedule(&self) -> &TaskSchedule {
        &self.schedule
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Fresh backbone/decoder parameters with no task heads yet.
    pub fn init_params(&self) -> Result<ParamSet> {
        self.model.build_params(self.settings.train.seed)
    }

    /// Append the heads of step `step`: the recognition head always, the
    /// auxiliary head when the auxiliary term is enabled (steps ≥ 2).
    pub fn expand(&self, params: &mut ParamSet, step: usize) -> Result<()> {
        let width = self.schedule.classes_at(step).len();
        self.model.add_task(
            params,
            self.settings.head_mode,
            step,
            width,
            self.settings.task_init,
            self.settings.train.seed,
        )?;
        if step >= 2 && self.settings.toggles.aux {
            self.model.add_aux_head(params, step, width, self.settings.train.seed)?;
        }
        Ok(())
    }

    fn step_ctx<'a>(&self, step: usize, teacher: Option<&'a ParamSet>) -> StepCtx<'a> {
        let widths: Vec<usize> = (1..=step).map(|j| self.schedule.classes_at(j).len()).collect();
        let old_total: usize = widths[..step - 1].iter().sum();
        StepCtx {
            step,
            widths,
            current: self.schedule.classes_at(step).to_vec(),
            old_total,
            teacher,
        }
    }

    /// Iteration budget of a step.
    pub fn iterations_for(&self, step: usize) -> usize {
        if step == 1 {
            self.settings.train.iterations_base
        } else {
            self.settings.train.iterations_per_class * self.schedule.classes_at(step).len()
        }
    }

    /// Train `params` through one full step. `teacher` must be the deep copy
    /// of the end-of-previous-step parameters for steps ≥ 2 and `None` for
    /// step 1. Returns the batch-mean terms of the final iteration.
    pub fn train_step(
        &self,
        params: &mut ParamSet,
        teacher: Option<&ParamSet>,
        step: usize,
        mut on_log: impl FnMut(&IterationLog),
    ) -> Result<LossTerms> {
        if step < 1 || step > self.schedule.steps() {
            return Err(Error::config(format!(
                "step {step} outside schedule 1..={}",
                self.schedule.steps()
            )));
        }
        if step >= 2 && teacher.is_none() {
            return Err(Error::config("steps after the first need a frozen teacher"));
        }
        if step == 1 && teacher.is_some() {
            return Err(Error::config("the first step has no teacher"));
        }
        let tr = &self.settings.train;
        let step_data = data::filter_step(&self.train_data, &self.schedule, step, self.settings.protocol)?;
        if step_data.is_empty() {
            return Err(Error::config(format!("no training samples carry step-{step} classes")));
        }
        let ctx = self.step_ctx(step, teacher);
        let iters = self.iterations_for(step);
        let lr0 = if step == 1 { tr.lr_base } else { tr.later_lr() };
        let mut opt = AdamW::new(lr0, tr.weight_decay, tr.poly_power, iters);
        let mut last = LossTerms::default();

        for iter in 0..iters {
            let mut draw = rng::derive(tr.seed, &format!("step{step}.batch"), iter as u64);
            let batch: Vec<Sample> = (0..tr.batch_size)
                .map(|_| {
                    let i = draw.random_range(0..step_data.len());
                    let flip = tr.hflip && draw.random::<bool>();
                    if flip { data::hflip_sample(&step_data[i]) } else { step_data[i].clone() }
                })
                .collect();

            let results = par::map_ordered(&batch, |sample| {
                self.sample_objective(params, &ctx, sample)
            });

            let mut folded: BTreeMap<ParamId, Arr> = BTreeMap::new();
            let mut terms = LossTerms::default();
            let mut contributing = 0usize;
            for (si, r) in results.into_iter().enumerate() {
                let sr = r.map_err(|e| {
                    Error::numeric(format!("step {step} iteration {iter} sample {si}: {e}"))
                })?;
                if !sr.terms.total.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite objective at step {step} iteration {iter} sample {si}: {:?}",
                        sr.terms
                    )));
                }
                if !sr.grads.is_empty() {
                    contributing += 1;
                }
                for (id, g) in sr.grads {
                    match folded.get_mut(&id) {
                        Some(acc) => *acc += &g,
                        None => {
                            folded.insert(id, g);
                        }
                    }
                }
                accumulate_terms(&mut terms, &sr.terms);
            }
            let inv = 1.0 / tr.batch_size as f64;
            scale_terms(&mut terms, inv);
            let lr = if contributing > 0 {
                for g in folded.values_mut() {
                    g.mapv_inplace(|x| x * inv);
                    if !g.iter().all(|x| x.is_finite()) {
                        return Err(Error::numeric(format!(
                            "non-finite gradient at step {step} iteration {iter}"
                        )));
                    }
                }
                opt.step(params, &folded)
            } else {
                opt.lr_at(iter)
            };
            last = terms;
            if iter % tr.log_every == 0 || iter + 1 == iters {
                on_log(&IterationLog { step, iteration: iter, lr, terms: last });
            }
        }
        Ok(last)
    }

    /// Build one sample's objective graph, differentiate it, and return the
    /// per-parameter gradients with the term values.
    fn sample_objective(&self, params: &ParamSet, ctx: &StepCtx<'_>, sample: &Sample) -> Result<SampleResult> {
        let s = &self.settings;
        let mut tape = Tape::new();
        let mut bind = Binder::trainable(params);
        let px = self.model.encode(&mut tape, &mut bind, &sample.image)?;
        let s1 = self.model.stage1(&mut tape, &mut bind, &px)?;

        let (n, pix) = {
            let mv = tape.val(s1.masks);
            let sh = mv.shape();
            (sh[0], sh[1] * sh[2])
        };
        let scores_v: Vec<f64> = tape.val(s1.scores).iter().copied().collect();
        let gt_masks: Vec<Array2<f64>> = sample.targets.iter().map(|t| t.mask_f64()).collect();
        let mut gt_flat = Array2::<f64>::zeros((gt_masks.len(), pix));
        for (j, g) in gt_masks.iter().enumerate() {
            for (k, &v) in g.iter().enumerate() {
                gt_flat[[j, k]] = v;
            }
        }
        let mr = {
            let mv = tape.val(s1.masks);
            let flat = mv
                .to_shape((n, pix))
                .map_err(|e| Error::shape(format!("proposal reshape: {e}")))?;
            match_proposals(flat.view(), &scores_v, gt_flat.view(), &CostWeights::default())?
        };
        let m_real = mr.num_real;

        let mut tv = TermVars::default();
        let mut terms = LossTerms { matched: m_real, ..LossTerms::default() };

        // Recognition of matched proposals is shared by the supervised term
        // and matched-class distillation.
        let need_cls = m_real > 0
            && (s.toggles.seg || (ctx.step >= 2 && s.toggles.cls_kd_matched));
        let mem = if need_cls || (ctx.step >= 2 && s.toggles.cls_kd_unmatched) {
            Some(self.model.class_memory(&mut tape, &mut bind, &px))
        } else {
            None
        };
        let cls = if need_cls {
            let sel = tape.select_rows(s1.embeds, &mr.matched);
            Some(self.model.classify(
                &mut tape,
                &mut bind,
                sel,
                s.head_mode,
                &ctx.widths,
                mem.as_ref().expect("memory built alongside recognition"),
            )?)
        } else {
            None
        };

        if s.toggles.seg {
            let obj = seg::objectness_loss(&mut tape, s1.score_logits, s1.mask_logits, &mr, &gt_masks, &s.loss)?;
            terms.obj_score = scalar_of(&tape, obj.score);
            terms.obj_mask = scalar_of(&tape, obj.mask);
            let seg_var = if let Some(cls) = &cls {
                let new_width = *ctx.widths.last().expect("at least one step");
                let cur = tape.slice_cols(cls.logits, ctx.old_total, new_width);
                let labels: Vec<Option<usize>> = sample
                    .targets
                    .iter()
                    .map(|t| ctx.current.iter().position(|&c| c == t.class_id))
                    .collect();
                let focal = seg::focal_class_loss(&mut tape, cur, &labels, s.loss.focal_gamma)?;
                terms.focal = scalar_of(&tape, focal);
                tape.add(obj.total, focal)
            } else {
                obj.total
            };
            terms.seg = scalar_of(&tape, seg_var);
            tv.seg = Some(seg_var);
        }

        if ctx.step >= 2 {
            self.teacher_terms(&mut tape, &mut bind, ctx, sample, &s1, &mr, &mem, &cls, &mut tv, &mut terms)?;
        }

        let total = compose(&mut tape, &tv, &s.weights);
        let Some(total) = total else {
            return Ok(SampleResult { grads: BTreeMap::new(), terms });
        };
        terms.total = scalar_of(&tape, total);
        let grads = tape.backward(total);
        let owned: BTreeMap<ParamId, Arr> = tape
            .param_grads(&grads)
            .into_iter()
            .map(|(id, g)| (id, g.clone()))
            .collect();
        Ok(SampleResult { grads: owned, terms })
    }

    /// Add the distillation and auxiliary terms of one sample (steps ≥ 2).
    #[allow(clippy::too_many_arguments)]
    fn teacher_terms(
        &self,
        tape: &mut Tape,
        bind: &mut Binder<'_>,
        ctx: &StepCtx<'_>,
        sample: &Sample,
        s1: &model::Stage1,
        mr: &crate::matching::MatchResult,
        mem: &Option<model::ClassMemory>,
        cls: &Option<model::ClassOutputs>,
        tv: &mut TermVars,
        terms: &mut LossTerms,
    ) -> Result<()> {
        let s = &self.settings;
        let t = &s.toggles;
        let needs_teacher = t.os_kd || t.mask_kd || t.pe_kd || t.cls_kd_unmatched || t.cls_kd_matched || t.aux;
        if !needs_teacher {
            return Ok(());
        }
        let teacher = ctx.teacher.ok_or_else(|| Error::config("teacher missing on a later step"))?;
        let (ts1, tokens) = frozen_stage1(&self.model, teacher, &sample.image)?;

        let unmatched = &mr.unmatched;
        let u = unmatched.len();
        let teacher_scores_u: Vec<f64> = unmatched.iter().map(|&i| ts1.scores[i]).collect();
        let selected_local = kd::select_high_objectness(&teacher_scores_u, s.kd.alpha);
        let selected_abs: Vec<usize> = selected_local.iter().map(|&i| unmatched[i]).collect();
        terms.selected = selected_abs.len();

        if t.os_kd && u > 0 {
            let n = ts1.scores.len();
            let col = tape.reshape(s1.score_logits, &[n, 1]);
            let sel = tape.select_rows(col, unmatched);
            let flat = tape.reshape(sel, &[u]);
            let tscores = Array1::from(teacher_scores_u.clone());
            let v = kd::kd_objectness_score(tape, flat, &tscores)?;
            terms.os_kd = scalar_of(tape, v);
            tv.os_kd = Some(v);
        }

        if t.mask_kd && u > 0 {
            let (n, h, w) = ts1.masks.dim();
            let flat_all = tape.reshape(s1.mask_logits, &[n, h * w]);
            let sel = tape.select_rows(flat_all, unmatched);
            let mut tmasks = Array2::<f64>::zeros((u, h * w));
            for (r, &i) in unmatched.iter().enumerate() {
                for (k, &mv) in ts1.masks.index_axis(Axis(0), i).iter().enumerate() {
                    tmasks[[r, k]] = mv;
                }
            }
            let mk = kd::kd_mask(tape, sel, &tmasks, &teacher_scores_u, &s.kd, s.loss.dice_epsilon)?;
            terms.mask_kd = scalar_of(tape, mk.loss);
            terms.mask_kd_floor = mk.floor;
            tv.mask_kd = Some(mk.loss);
        }

        if t.pe_kd && u > 0 {
            let sel = tape.select_rows(s1.embeds, unmatched);
            let tembeds = ts1.embeds.select(Axis(0), unmatched);
            let v = kd::kd_position(tape, sel, &tembeds, &teacher_scores_u, &s.kd)?;
            terms.pe_kd = scalar_of(tape, v);
            tv.pe_kd = Some(v);
        }

        let old_widths = &ctx.widths[..ctx.step - 1];
        if t.cls_kd_unmatched && !selected_abs.is_empty() {
            let sel = tape.select_rows(s1.embeds, &selected_abs);
            let cls_old = self.model.classify(
                tape,
                bind,
                sel,
                s.head_mode,
                old_widths,
                mem.as_ref().expect("memory built when class distillation is on"),
            )?;
            let tembeds = ts1.embeds.select(Axis(0), &selected_abs);
            let tprobs = frozen_class_probs(&self.model, teacher, &tokens, &tembeds, s.head_mode, old_widths)?;
            let v = kd::class_distillation(tape, cls_old.logits, &tprobs, s.kd.kl_direction)?;
            terms.cls_kd_unmatched = scalar_of(tape, v);
            tv.cls_kd_unmatched = Some(v);
        }

        if t.cls_kd_matched && mr.num_real > 0 {
            let cls = cls.as_ref().expect("matched recognition built when its distillation is on");
            let student_old = tape.slice_cols(cls.logits, 0, ctx.old_total);
            let matched_vals = {
                let ev = tape.val(s1.embeds);
                let e2 = ev
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .map_err(|e| Error::shape(format!("embeddings view: {e}")))?;
                e2.select(Axis(0), &mr.matched)
            };
            let tprobs = frozen_class_probs(&self.model, teacher, &tokens, &matched_vals, s.head_mode, old_widths)?;
            let v = kd::class_distillation(tape, student_old, &tprobs, s.kd.kl_direction)?;
            terms.cls_kd_matched = scalar_of(tape, v);
            tv.cls_kd_matched = Some(v);
        }

        if t.aux {
            let mut rows: Vec<usize> = mr.matched.clone();
            rows.extend_from_slice(&selected_abs);
            if !rows.is_empty() {
                let slots: Vec<usize> = sample
                    .targets
                    .iter()
                    .map(|tg| ctx.current.iter().position(|&c| c == tg.class_id).map_or(0, |k| k + 1))
                    .chain(std::iter::repeat_n(0usize, selected_abs.len()))
                    .collect();
                let sel = tape.select_rows(s1.embeds, &rows);
                let logits = self.model.aux_logits(tape, bind, sel, ctx.step)?;
                let v = seg::aux_class_loss(tape, logits, &slots)?;
                terms.aux = scalar_of(tape, v);
                tv.aux = Some(v);
            }
        }
        Ok(())
    }

    /// Evaluate `params` after `step` on the eval split over every class
    /// learned so far. The recall probe restricts ground truth to the same
    /// classes.
    pub fn evaluate(&self, params: &ParamSet, step: usize) -> Result<StepEval> {
        let classes = self.schedule.classes_up_to(step);
        self.evaluate_with(params, step, &classes)
    }

    /// Like [`Engine::evaluate`] but with an explicit class set for the
    /// recall probe (e.g. first-step classes only, to measure forgetting).
    pub fn evaluate_with(&self, params: &ParamSet, step: usize, recall_classes: &[u32]) -> Result<StepEval> {
        if step < 1 || step > self.schedule.steps() {
            return Err(Error::config(format!(
                "step {step} outside schedule 1..={}",
                self.schedule.steps()
            )));
        }
        let s = &self.settings;
        let classes = self.schedule.classes_up_to(step);
        let widths: Vec<usize> = (1..=step).map(|j| self.schedule.classes_at(j).len()).collect();

        type PerImage = (evalm::ConfusionCounts, Option<Recall>, Option<Recall>);
        let per_image: Vec<Result<PerImage>> = par::map_ordered(&self.eval_data, |sample| {
            let (sv, probs) = infer_outputs(&self.model, params, &sample.image, s.head_mode, &widths)?;
            let pred = evalm::panoptic_inference(&sv.scores, &sv.masks, &probs, &classes, s.kd.alpha)?;
            let gt = sample.semantic_map(&classes);
            let mut counts = evalm::ConfusionCounts::default();
            counts.accumulate(&pred, &gt, &classes)?;
            let scores: Vec<f64> = sv.scores.iter().copied().collect();
            let gt_masks: Vec<Array2<u8>> = sample
                .targets
                .iter()
                .filter(|t| recall_classes.contains(&t.class_id))
                .map(|t| t.mask.clone())
                .collect();
            let rp = evalm::mask_recall(&sv.masks, &scores, &gt_masks, s.ar_iou, ScoreFilter::Positive)?;
            let rc = evalm::mask_recall(&sv.masks, &scores, &gt_masks, s.ar_iou, ScoreFilter::Above(s.kd.alpha))?;
            Ok((counts, rp, rc))
        });

        let mut counts = evalm::ConfusionCounts::default();
        let mut recall_positive: Option<Recall> = None;
        let mut recall_confident: Option<Recall> = None;
        for r in per_image {
            let (c, rp, rc) = r?;
            counts.merge(&c);
            pool_recall(&mut recall_positive, rp);
            pool_recall(&mut recall_confident, rc);
        }
        let mut report = evalm::report_from_counts(&counts, &classes, s.include_background);
        // Split the overall mean into first-step and later-step class groups
        // so per-step records carry the same decomposition as the final
        // aggregate.
        let first = self.schedule.classes_at(1);
        let (mut bsum, mut bn, mut isum, mut inn) = (0.0f64, 0usize, 0.0f64, 0usize);
        for (c, v) in &report.per_class_iou {
            if first.contains(c) {
                bsum += v;
                bn += 1;
            } else {
                isum += v;
                inn += 1;
            }
        }
        report.base = if bn == 0 { 0.0 } else { bsum / bn as f64 };
        report.inc = if inn == 0 { 0.0 } else { isum / inn as f64 };
        Ok(StepEval { report, recall_positive, recall_confident })
    }

    /// Run the whole schedule: for each step snapshot the teacher (steps ≥ 2),
    /// expand the heads, train, checkpoint, and evaluate over everything
    /// learned so far. With an output directory the run leaves a line-JSON
    /// loss log, per-step checkpoints, and a rewritten `metrics.json` behind,
    /// and resumes from the latest matching checkpoint it finds there.
    pub fn run(&self, out_dir: Option<&Path>) -> Result<RunReport> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
        }
        let mut params = self.init_params()?;
        let mut start_step = 1;
        let mut records: Vec<StepRecord> = Vec::new();

        if let Some(dir) = out_dir {
            if let Some((ck, prior)) = self.latest_checkpoint(dir)? {
                params = ck.params;
                start_step = ck.step + 1;
                records = prior;
                log::info!("resuming after completed step {}", ck.step);
            }
        }

        let mut log_file = match out_dir {
            Some(dir) => {
                let f = OpenOptions::new().create(true).append(true).open(dir.join("loss_log.jsonl"))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };

        for step in start_step..=self.schedule.steps() {
            let teacher = if step >= 2 { Some(params.clone()) } else { None };
            self.expand(&mut params, step)?;
            let final_terms = self.train_step(&mut params, teacher.as_ref(), step, |rec| {
                if let Some(f) = log_file.as_mut() {
                    if let Ok(line) = serde_json::to_string(rec) {
                        let _ = writeln!(f, "{line}");
                    }
                }
            })?;
            if let Some(f) = log_file.as_mut() {
                f.flush()?;
            }

            if let Some(dir) = out_dir {
                let ck = Checkpoint {
                    step,
                    head_mode: self.settings.head_mode,
                    model: self.settings.model.clone(),
                    schedule: self.schedule.clone(),
                    params: params.clone(),
                };
                checkpoint::save(&checkpoint_path(dir, step), &ck)?;
            }

            let eval = self.evaluate(&params, step)?;
            records.push(StepRecord {
                step,
                classes: self.schedule.classes_at(step).to_vec(),
                iterations: self.iterations_for(step),
                final_terms,
                eval: eval.report,
                ar_positive: eval.recall_positive.map(|r| r.fraction()),
                ar_confident: eval.recall_confident.map(|r| r.fraction()),
                checksum: checkpoint::checksum(&params),
            });

            let report = self.aggregate(&records)?;
            if let Some(dir) = out_dir {
                write_metrics(dir, &report)?;
            }
            log::info!(
                "step {step}: all-mIoU {:.4}, base {:.4}",
                report.continual.all,
                report.continual.base,
            );
        }
        self.aggregate(&records)
    }

    /// Fold per-step evaluation reports into the run aggregate.
    fn aggregate(&self, records: &[StepRecord]) -> Result<RunReport> {
        let reports: Vec<MetricReport> = records.iter().map(|r| r.eval.clone()).collect();
        let continual = evalm::continual_metrics(&reports, &self.schedule)?;
        Ok(RunReport { steps: records.to_vec(), continual })
    }

    /// Latest checkpoint in `dir` compatible with this engine, with the
    /// step records recovered from the `metrics.json` written alongside it.
    fn latest_checkpoint(&self, dir: &Path) -> Result<Option<(Checkpoint, Vec<StepRecord>)>> {
        for step in (1..=self.schedule.steps()).rev() {
            let path = checkpoint_path(dir, step);
            if !path.exists() {
                continue;
            }
            let ck = checkpoint::load(&path)?;
            if ck.model != self.settings.model
                || ck.schedule != self.schedule
                || ck.head_mode != self.settings.head_mode
                || ck.step != step
            {
                return Err(Error::config(format!(
                    "checkpoint {} does not match the current run settings",
                    path.display()
                )));
            }
            let metrics_path = dir.join("metrics.json");
            let report: RunReport = serde_json::from_reader(File::open(&metrics_path).map_err(|e| {
                Error::config(format!(
                    "checkpoint without readable metrics alongside ({}): {e}",
                    metrics_path.display()
                ))
            })?)
            .map_err(|e| Error::config(format!("malformed {}: {e}", metrics_path.display())))?;
            if report.steps.len() < step {
                return Err(Error::config(format!(
                    "metrics.json records {} steps but the checkpoint is at step {step}",
                    report.steps.len()
                )));
            }
            let prior: Vec<StepRecord> = report.steps.into_iter().take(step).collect();
            let recorded = prior.last().map(|r| r.checksum);
            if recorded != Some(checkpoint::checksum(&ck.params)) {
                return Err(Error::config(
                    "checkpoint parameters disagree with the recorded checksum",
                ));
            }
            return Ok(Some((ck, prior)));
        }
        Ok(None)
    }
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt_step{step}.json"))
}

fn write_metrics(dir: &Path, report: &RunReport) -> Result<()> {
    let tmp = dir.join("metrics.json.tmp");
    let mut f = BufWriter::new(File::create(&tmp)?);
    serde_json::to_writer_pretty(&mut f, report)
        .map_err(|e| Error::config(format!("metrics serialization: {e}")))?;
    f.flush()?;
    fs::rename(&tmp, dir.join("metrics.json"))?;
    Ok(())
}

fn pool_recall(acc: &mut Option<Recall>, next: Option<Recall>) {
    if let Some(r) = next {
        match acc {
            Some(a) => a.pool(r),
            None => *acc = Some(r),
        }
    }
}

fn scalar_of(tape: &Tape, v: crate::tape::Var) -> f64 {
    tape.val(v).sum()
}

fn accumulate_terms(acc: &mut LossTerms, one: &LossTerms) {
    acc.total += one.total;
    acc.seg += one.seg;
    acc.obj_score += one.obj_score;
    acc.obj_mask += one.obj_mask;
    acc.focal += one.focal;
    acc.os_kd += one.os_kd;
    acc.mask_kd += one.mask_kd;
    acc.mask_kd_floor += one.mask_kd_floor;
    acc.pe_kd += one.pe_kd;
    acc.cls_kd_unmatched += one.cls_kd_unmatched;
    acc.cls_kd_matched += one.cls_kd_matched;
    acc.aux += one.aux;
    acc.matched += one.matched;
    acc.selected += one.selected;
}

fn scale_terms(t: &mut LossTerms, k: f64) {
    t.total *= k;
    t.seg *= k;
    t.obj_score *= k;
    t.obj_mask *= k;
    t.focal *= k;
    t.os_kd *= k;
    t.mask_kd *= k;
    t.mask_kd_floor *= k;
    t.pe_kd *= k;
    t.cls_kd_unmatched *= k;
    t.cls_kd_matched *= k;
    t.aux *= k;
}

/// One frozen forward pass: stage-1 values plus the `[P, d]` token matrix
/// the class decoder's keys/values derive from, so later frozen recognition
/// passes can skip re-encoding.
fn frozen_stage1(model: &Model, ps: &ParamSet, image: &Array3<f64>) -> Result<(Stage1Values, Array2<f64>)> {
    let mut tape = Tape::new();
    let mut bind = Binder::frozen(ps);
    let px = model.encode(&mut tape, &mut bind, image)?;
    let s1 = model.stage1(&mut tape, &mut bind, &px)?;
    let tokens_var = model::tokens_of(&mut tape, px.levels[2]);
    let tokens = tape
        .val(tokens_var)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::shape(format!("token matrix: {e}")))?;
    Ok((Stage1Values::from_tape(&tape, &s1), tokens))
}

/// Frozen recognition of explicit embedding rows: softmax class
/// distributions `[K, total]` under the given task heads.
fn frozen_class_probs(
    model: &Model,
    ps: &ParamSet,
    tokens: &Array2<f64>,
    embeds: &Array2<f64>,
    mode: HeadMode,
    widths: &[usize],
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let mut bind = Binder::frozen(ps);
    let tok = tape.constant(tokens.clone().into_dyn());
    let mem = model.class_memory_from_tokens(&mut tape, &mut bind, tok);
    let e = tape.constant(embeds.clone().into_dyn());
    let cls = model.classify(&mut tape, &mut bind, e, mode, widths, &mem)?;
    let logits = tape
        .val(cls.logits)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::shape(format!("class logits view: {e}")))?
        .to_owned();
    Ok(softmax_rows_stable(&logits))
}

fn softmax_rows_stable(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - mx).exp());
        let z: f64 = row.sum();
        if z > 0.0 {
            row.mapv_inplace(|x| x / z);
        }
    }
    out
}

/// One frozen inference pass: stage-1 values plus per-proposal class
/// probabilities (sigmoid of the concatenated task logits), `[N, total]`.
pub fn infer_outputs(
    model: &Model,
    ps: &ParamSet,
    image: &Array3<f64>,
    mode: HeadMode,
    widths: &[usize],
) -> Result<(Stage1Values, Array2<f64>)> {
    let mut tape = Tape::new();
    let mut bind = Binder::frozen(ps);
    let px = model.encode(&mut tape, &mut bind, image)?;
    let s1 = model.stage1(&mut tape, &mut bind, &px)?;
    let mem = model.class_memory(&mut tape, &mut bind, &px);
    let cls = model.classify(&mut tape, &mut bind, s1.embeds, mode, widths, &mem)?;
    let probs = tape
        .val(cls.logits)
        .mapv(|x| 1.0 / (1.0 + (-x).exp()))
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::shape(format!("class probabilities: {e}")))?;
    Ok((Stage1Values::from_tape(&tape, &s1), probs))
}
