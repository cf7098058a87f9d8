use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::TrainData;
use super::eval::{evaluate, EvalReport};
use crate::aslmask::{build_asl_mask, build_random_mask, build_tube_mask, BinaryTokenMask, LocalizationMap, MaskKind};
use crate::autodiff::{softmax, Graph, Tensor};
use crate::error::{Error, Result};
use crate::features::{patchify, specaugment, AugPlan, LogMelSpec, TokenGrid};
use crate::mixops::{mix_audio, mix_pseudo_labels, mix_tokens, sample_lambda, MixRatio};
use crate::models::{
    cosine_lr, ema_update, save_params, Binder, LearnedLocalizer, Localizer, LocalizerKind, Model, ParamStore, Sgd,
};
use crate::ssl_objective::{
    consistency_loss, contrastive_loss, mix_consistency_loss, supervised_loss, total_loss, LossReport, LossWeights, ThresholdState,
    TEMPERATURE,
};
use crate::synthdata::{make_batches, DatasetBundle, Sample, SourceRegion, VideoClip};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CONFIG_FILE: &str = "config.toml";

/// Test hooks for a single step.
#[derive(Clone, Debug, Default)]
pub struct StepOptions {
    /// Replace every video augmentation and SpecAugment with the identity.
    pub freeze_augment: bool,
    /// Use this mix ratio instead of sampling one.
    pub lambda: Option<f64>,
    /// Keep the mixed inputs in the trace.
    pub keep_inputs: bool,
}

/// Mixup side of a step.
#[derive(Clone, Debug)]
pub struct MixTrace {
    pub ratio: MixRatio,
    /// `(a, b)` positions within the unlabeled batch.
    pub pairs: Vec<(usize, usize)>,
    pub masks: Vec<BinaryTokenMask>,
    /// `[B_u, classes]` mixed teacher targets.
    pub y_bar: Tensor,
    pub video: Vec<TokenGrid>,
    pub audio: Vec<LogMelSpec>,
    /// Strong views of the `a` clips, kept with `keep_inputs`.
    pub a_video: Vec<TokenGrid>,
    pub a_audio: Vec<LogMelSpec>,
}

/// Intermediate values of a step, enough to recompute every loss.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub labels: Vec<usize>,
    pub labeled: usize,
    pub unlabeled: usize,
    /// Student logits, rows ordered labeled, unlabeled-strong, mixed.
    pub logits: Tensor,
    /// Fusion inputs for the same rows.
    pub cls_v: Tensor,
    pub cls_a: Tensor,
    /// `[B_u, classes]`, empty when the unlabeled branch is off.
    pub teacher_probs: Tensor,
    /// Thresholds used for gating in this step.
    pub thresholds: Vec<f64>,
    pub pass: Vec<bool>,
    pub mix: Option<MixTrace>,
    /// Loss weights in effect for this step.
    pub weights: LossWeights,
    pub grad_norm: f64,
}

/// Mutable state of a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub opt: Sgd,
    pub thresholds: ThresholdState,
    pub localizer: Localizer,
    pub step: usize,
}

impl TrainState {
    pub fn init(cfg: &RunConfig, data: &TrainData, rng: &mut impl Rng) -> Result<Self> {
        let (model, student) = Model::init(data.model.clone(), rng)?;
        let teacher = student.clone();
        let opt = Sgd::new(cfg.optim.clone(), &student);
        let thresholds = ThresholdState::new(data.model.classes, cfg.ssl.tau, cfg.ssl.threshold)?;
        let localizer = match cfg.localizer.kind {
            LocalizerKind::Oracle => Localizer::Oracle(cfg.localizer.oracle.clone()),
            LocalizerKind::Learned => {
                let mut lrng = ChaCha8Rng::seed_from_u64(cfg.localizer.learned.seed);
                let mut loc = LearnedLocalizer::init(cfg.localizer.learned.clone(), data.model.clone(), &mut lrng)?;
                let corpus: Vec<(&VideoClip, &LogMelSpec)> = data
                    .bundle
                    .labeled
                    .iter()
                    .zip(&data.labeled_specs)
                    .chain(data.bundle.unlabeled.iter().zip(&data.unlabeled_specs))
                    .map(|(s, a)| (&s.clip, a))
                    .collect();
                loc.pretrain(&corpus, &mut lrng)?;
                Localizer::Learned(Box::new(loc))
            }
        };
        Ok(Self {
            model,
            student,
            teacher,
            opt,
            thresholds,
            localizer,
            step: 0,
        })
    }
}

/// One augmented view of a sample.
struct View {
    grid: TokenGrid,
    spec: LogMelSpec,
    clip: VideoClip,
    region: SourceRegion,
}

fn strong_view(
    cfg: &RunConfig,
    sample: &Sample,
    spec: &LogMelSpec,
    opts: &StepOptions,
    rng: &mut impl Rng,
) -> Result<View> {
    let c = &sample.clip;
    let plan = if opts.freeze_augment {
        AugPlan::identity()
    } else {
        cfg.aug.strong.sample(c.frames, c.height, c.width, rng)
    };
    let clip = plan.apply(c)?;
    let region = plan.map_region(&sample.source, c.width, c.height)?;
    let spec = if opts.freeze_augment {
        spec.clone()
    } else {
        specaugment(spec, rng, &cfg.aug.specaug)
    };
    Ok(View {
        grid: patchify(&clip, cfg.model.patch)?,
        spec,
        clip,
        region,
    })
}

fn weak_grid(cfg: &RunConfig, sample: &Sample, opts: &StepOptions, rng: &mut impl Rng) -> Result<TokenGrid> {
    let c = &sample.clip;
    let plan = if opts.freeze_augment {
        AugPlan::identity()
    } else {
        cfg.aug.weak.sample(c.frames, c.height, c.width, rng)
    };
    patchify(&plan.apply(c)?, cfg.model.patch)
}

/// `exp(−5(1 − t/R)²)` for `t < R`, else 1.
pub fn rampup(step: usize, steps: usize) -> f64 {
    if steps == 0 || step >= steps {
        return 1.0;
    }
    let x = 1.0 - step as f64 / steps as f64;
    (-5.0 * x * x).exp()
}

/// Loss weights at `step`, all three scaled by the ramp-up factor.
pub fn effective_weights(cfg: &RunConfig, step: usize) -> LossWeights {
    let r = rampup(step, cfg.ssl.rampup_steps);
    LossWeights {
        gamma1: cfg.loss.gamma1 * r,
        gamma2: cfg.loss.gamma2 * r,
        gamma3: cfg.loss.gamma3 * r,
    }
}

/// EMA momentum at `step`, capped by `1 − 1/(step + 1)` so the teacher
/// starts as a copy of the student.
pub fn ema_momentum(m: f64, step: usize) -> f64 {
    m.min(1.0 - 1.0 / (step as f64 + 1.0))
}

fn rows(t: &Tensor, start: usize, n: usize) -> Result<Tensor> {
    let c = t.cols();
    Tensor::new(vec![n, c], t.data()[start * c..(start + n) * c].to_vec())
}

fn put_rows(dst: &mut Tensor, start: usize, src: &Tensor, weight: f64) {
    let c = dst.cols();
    for (d, s) in dst.data_mut()[start * c..].iter_mut().zip(src.data()) {
        *d += weight * s;
    }
}

fn batch_ids(labeled: &[&Sample], unlabeled: &[&Sample]) -> Vec<String> {
    labeled.iter().chain(unlabeled).map(|s| s.id.clone()).collect()
}

fn diverged(step: usize, component: &'static str, ids: Vec<String>) -> Error {
    Error::Diverged {
        step,
        component,
        batch_ids: ids,
    }
}

/// Runs one semi-supervised step: supervised loss on labeled views, gated
/// consistency between teacher and student, token/audio mixup with mixed
/// teacher targets, contrastive alignment of the fusion inputs, then the
/// optimizer, EMA and threshold updates.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    cfg: &RunConfig,
    state: &mut TrainState,
    labeled: &[&Sample],
    labeled_specs: &[&LogMelSpec],
    unlabeled: &[&Sample],
    unlabeled_specs: &[&LogMelSpec],
    lr: f64,
    rng: &mut impl Rng,
    opts: &StepOptions,
) -> Result<(LossReport, StepTrace)> {
    let w = effective_weights(cfg, state.step);
    let use_unlabeled = !unlabeled.is_empty() && (w.gamma1 > 0.0 || w.gamma2 > 0.0 || w.gamma3 > 0.0);
    let use_mix = use_unlabeled && (w.gamma2 > 0.0 || w.gamma3 > 0.0);
    let bl = labeled.len();
    let bu = if use_unlabeled { unlabeled.len() } else { 0 };
    let labels: Vec<usize> = labeled
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::InvalidArgument(format!("sample `{}` has no label", s.id))))
        .collect::<Result<_>>()?;
    let model = state.model.clone();
    let classes = model.config.classes;

    // labeled strong views
    let mut grids: Vec<TokenGrid> = Vec::new();
    let mut specs: Vec<LogMelSpec> = Vec::new();
    for (s, a) in labeled.iter().zip(labeled_specs) {
        let v = strong_view(cfg, s, a, opts, rng)?;
        grids.push(v.grid);
        specs.push(v.spec);
    }

    // teacher on weak video and clean audio, student on strong views
    let mut teacher_probs = Tensor::zeros(&[0, classes]);
    let mut strong: Vec<View> = Vec::new();
    let thresholds = state.thresholds.thresholds();
    if use_unlabeled {
        let weak: Vec<TokenGrid> = unlabeled
            .iter()
            .map(|s| weak_grid(cfg, s, opts, rng))
            .collect::<Result<_>>()?;
        let vin = model.video_input(&weak.iter().collect::<Vec<_>>())?;
        let ain = model.audio_input(unlabeled_specs)?;
        teacher_probs = model.predict(&state.teacher, vin, ain, bu)?;
        for (s, a) in unlabeled.iter().zip(unlabeled_specs) {
            strong.push(strong_view(cfg, s, a, opts, rng)?);
        }
        for v in &strong {
            grids.push(v.grid.clone());
            specs.push(v.spec.clone());
        }
    }

    // mixup of pair (i, B_u−1−i), mask guided by clip i
    let mut mix = None;
    if use_mix {
        let ratio = match opts.lambda {
            Some(l) => MixRatio::fixed(l),
            None => sample_lambda(rng, cfg.ssl.mix_alpha.0, cfg.ssl.mix_alpha.1)?,
        };
        let lambda = ratio.lambda;
        let n = model.config.tokens_per_frame();
        let t = model.config.frames;
        let mut trace = MixTrace {
            ratio,
            pairs: Vec::with_capacity(bu),
            masks: Vec::with_capacity(bu),
            y_bar: Tensor::zeros(&[bu, classes]),
            video: Vec::new(),
            audio: Vec::new(),
            a_video: Vec::new(),
            a_audio: Vec::new(),
        };
        for i in 0..bu {
            let j = bu - 1 - i;
            let (a, b) = (&strong[i], &strong[j]);
            let mask = match cfg.mask.kind {
                MaskKind::Asl => {
                    let feats =
                        state
                            .localizer
                            .localize(&a.clip, &a.spec, Some(&a.region), model.config.patch, rng)?;
                    let loc = LocalizationMap::compute(&feats, model.config.grid(), cfg.mask.normalization, cfg.mask.eps)?;
                    build_asl_mask(&loc, lambda, cfg.mask.frames_per_map, rng)?
                }
                MaskKind::Tube => build_tube_mask(n, t, lambda, rng)?,
                MaskKind::Random => build_random_mask(n, t, lambda, rng)?,
            };
            let e_mix = mix_tokens(&a.grid, &b.grid, &mask)?;
            let a_mix = mix_audio(&a.spec, &b.spec, lambda)?;
            let y = mix_pseudo_labels(teacher_probs.row(i), teacher_probs.row(j), lambda)?;
            trace.y_bar.row_mut(i).copy_from_slice(&y);
            grids.push(e_mix.clone());
            specs.push(a_mix.clone());
            if opts.keep_inputs {
                trace.video.push(e_mix);
                trace.audio.push(a_mix);
                trace.a_video.push(a.grid.clone());
                trace.a_audio.push(a.spec.clone());
            }
            trace.pairs.push((i, j));
            trace.masks.push(mask);
        }
        mix = Some(trace);
    }

    // one student pass over every row
    let k = grids.len();
    let vin = model.video_input(&grids.iter().collect::<Vec<_>>())?;
    let ain = model.audio_input(&specs.iter().collect::<Vec<_>>())?;
    let mut g = Graph::new();
    let binder = Binder::train(&state.student);
    let (vx, ax) = (g.input(vin), g.input(ain));
    let out = model.forward(&mut g, binder, vx, ax, k)?;
    let logits = g.value(out.logits).clone();
    let cls_v = g.value(out.cls_v).clone();
    let cls_a = g.value(out.cls_a).clone();
    let ids = || batch_ids(labeled, unlabeled);

    let mut grad_logits = Tensor::zeros(&[k, classes]);
    let ls = supervised_loss(&rows(&logits, 0, bl)?, &labels)?;
    put_rows(&mut grad_logits, 0, &ls.grad, 1.0);

    let (mut l_u, mut pass) = (0.0, Vec::new());
    if use_unlabeled {
        let cons = consistency_loss(&teacher_probs, &rows(&logits, bl, bu)?, &thresholds, cfg.ssl.hard_pseudo_label)?;
        put_rows(&mut grad_logits, bl, &cons.loss.grad, w.gamma1);
        l_u = cons.loss.value;
        pass = cons.pass;
    }
    let mut l_mix = 0.0;
    if let Some(m) = &mix {
        let lm = mix_consistency_loss(&m.y_bar, &rows(&logits, bl + bu, bu)?, cfg.ssl.tau)?;
        put_rows(&mut grad_logits, bl + bu, &lm.grad, w.gamma2);
        l_mix = lm.value;
    }
    let con = contrastive_loss(&cls_v, &cls_a, TEMPERATURE).map_err(|e| match e {
        Error::ZeroNorm { .. } => diverged(state.step, "L_c", ids()),
        e => e,
    })?;
    let report = total_loss(ls.value, l_u, l_mix, con.value, &w).map_err(|e| match e {
        Error::NonFinite { component } => diverged(state.step, component, ids()),
        e => e,
    })?;
    let report = LossReport {
        pass_rate: if pass.is_empty() {
            0.0
        } else {
            pass.iter().filter(|&&p| p).count() as f64 / pass.len() as f64
        },
        thresholds: thresholds.clone(),
        ..report
    };

    let loss = g.external(
        &[out.logits, out.cls_v, out.cls_a],
        report.l_total,
        vec![grad_logits, con.grad_vid.map(|x| w.gamma3 * x), con.grad_aud.map(|x| w.gamma3 * x)],
    )?;
    let grads = g.backward(loss);
    drop(g);
    let grad_norm = state.opt.step(&mut state.student, &grads, lr)?;
    if !state.student.all_finite() {
        return Err(diverged(state.step, "parameters", ids()));
    }
    ema_update(&mut state.teacher, &state.student, ema_momentum(cfg.ssl.ema_momentum, state.step))?;
    if use_unlabeled {
        state.thresholds.update(&teacher_probs)?;
    }
    state.step += 1;

    let trace = StepTrace {
        labels,
        labeled: bl,
        unlabeled: bu,
        logits,
        cls_v,
        cls_a,
        teacher_probs,
        thresholds,
        pass,
        mix,
        weights: w,
        grad_norm,
    };
    Ok((report, trace))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricsLine {
    Train {
        step: usize,
        epoch: usize,
        lr: f64,
        lambda: Option<f64>,
        alpha: (f64, f64),
        grad_norm: f64,
        gamma: (f64, f64, f64),
        /// Fraction of passing pseudo-labels that match the hidden label.
        pseudo_label_precision: Option<f64>,
        #[serde(flatten)]
        losses: LossReport,
    },
    Eval {
        step: usize,
        epoch: usize,
        accuracy: f64,
        views: usize,
    },
}

impl MetricsLine {
    pub fn step(&self) -> usize {
        match self {
            MetricsLine::Train { step, .. } | MetricsLine::Eval { step, .. } => *step,
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Result of a full training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: usize,
    pub epochs: usize,
    pub parameters: usize,
    pub localizer_checksum_before: u64,
    pub localizer_checksum_after: u64,
    pub final_losses: LossReport,
    pub eval: EvalReport,
}

/// A finished run: summary, final state and the metrics lines.
pub struct RunOutcome {
    pub summary: RunSummary,
    pub state: TrainState,
    pub metrics: Vec<MetricsLine>,
}

struct MetricsSink {
    writer: Option<BufWriter<File>>,
    path: PathBuf,
    lines: Vec<MetricsLine>,
}

impl MetricsSink {
    fn new(out: Option<&Path>) -> Result<Self> {
        let path = out.map(|d| d.join(METRICS_FILE)).unwrap_or_default();
        let writer = match out {
            Some(_) => Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?)),
            None => None,
        };
        Ok(Self {
            writer,
            path,
            lines: Vec::new(),
        })
    }

    fn push(&mut self, line: MetricsLine) -> Result<()> {
        if let Some(w) = &mut self.writer {
            let text = serde_json::to_string(&line)?;
            writeln!(w, "{text}").map_err(|e| Error::io(&self.path, e))?;
        }
        self.lines.push(line);
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush().map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Trains on `bundle` and evaluates the EMA teacher on the test split.
/// With `out`, writes the metrics log, config, checkpoint and summary there.
pub fn train_run(cfg: &RunConfig, bundle: &DatasetBundle, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(CONFIG_FILE);
        fs::write(&p, cfg.to_toml()?).map_err(|e| Error::io(&p, e))?;
    }
    let data = TrainData::prepare(bundle, cfg)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = TrainState::init(cfg, &data, &mut init_rng)?;
    let checksum_before = state.localizer.checksum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let batch_seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(17);
    let mut stream = make_batches(bundle, cfg.batch.labeled, cfg.batch.ratio, batch_seed)?;
    let per_epoch = stream.steps_per_epoch();
    let total = match cfg.max_steps {
        Some(m) => m.min(cfg.epochs * per_epoch),
        None => cfg.epochs * per_epoch,
    };
    let mut sink = MetricsSink::new(out)?;
    let mut epoch = 0;
    let mut last = LossReport::default();
    for step in 0..total {
        let pair = stream.next().expect("batch stream is endless");
        if pair.epoch != epoch {
            epoch = pair.epoch;
            state.thresholds.reset();
            if cfg.eval.every_epochs > 0 && epoch % cfg.eval.every_epochs == 0 {
                let r = evaluate(&state.model, &state.teacher, bundle, &cfg.features, &cfg.eval)?;
                sink.push(MetricsLine::Eval {
                    step,
                    epoch,
                    accuracy: r.accuracy,
                    views: r.views,
                })?;
            }
        }
        let lab: Vec<&Sample> = pair.labeled.iter().map(|&i| &bundle.labeled[i]).collect();
        let lab_specs: Vec<&LogMelSpec> = pair.labeled.iter().map(|&i| &data.labeled_specs[i]).collect();
        let unl: Vec<&Sample> = pair.unlabeled.iter().map(|&i| &bundle.unlabeled[i]).collect();
        let unl_specs: Vec<&LogMelSpec> = pair.unlabeled.iter().map(|&i| &data.unlabeled_specs[i]).collect();
        let lr = cosine_lr(cfg.optim.lr, step, total);
        let (report, trace) = train_step(
            cfg,
            &mut state,
            &lab,
            &lab_specs,
            &unl,
            &unl_specs,
            lr,
            &mut rng,
            &StepOptions::default(),
        )?;
        let precision = pseudo_label_precision(&trace, &unl);
        sink.push(MetricsLine::Train {
            step,
            epoch,
            lr,
            lambda: trace.mix.as_ref().map(|m| m.ratio.lambda),
            alpha: cfg.ssl.mix_alpha,
            grad_norm: trace.grad_norm,
            gamma: (trace.weights.gamma1, trace.weights.gamma2, trace.weights.gamma3),
            pseudo_label_precision: precision,
            losses: report.clone(),
        })?;
        last = report;
    }
    let eval = evaluate(&state.model, &state.teacher, bundle, &cfg.features, &cfg.eval)?;
    sink.push(MetricsLine::Eval {
        step: total,
        epoch,
        accuracy: eval.accuracy,
        views: eval.views,
    })?;
    sink.finish()?;
    let summary = RunSummary {
        seed: cfg.seed,
        steps: total,
        epochs: epoch + 1,
        parameters: state.student.count(),
        localizer_checksum_before: checksum_before,
        localizer_checksum_after: state.localizer.checksum(),
        final_losses: last,
        eval,
    };
    if let Some(dir) = out {
        let meta = serde_json::json!({
            "model": state.model.config,
            "features": cfg.features,
            "step": total,
            "seed": cfg.seed,
        });
        save_params(&state.teacher, meta, &dir.join(CHECKPOINT_DIR))?;
        let p = dir.join(SUMMARY_FILE);
        fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(RunOutcome {
        summary,
        state,
        metrics: sink.lines,
    })
}

fn pseudo_label_precision(trace: &StepTrace, unlabeled: &[&Sample]) -> Option<f64> {
    let mut hits = 0;
    let mut passed = 0;
    for (r, &p) in trace.pass.iter().enumerate() {
        if !p {
            continue;
        }
        let q = trace.teacher_probs.row(r);
        let pred = (0..q.len()).max_by(|&a, &b| q[a].total_cmp(&q[b])).unwrap_or(0);
        if let Some(y) = unlabeled[r].diagnostic_label() {
            passed += 1;
            hits += usize::from(pred == y);
        }
    }
    (passed > 0).then(|| hits as f64 / passed as f64)
}

/// Softmax of each row.
pub fn row_softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        out.row_mut(r).copy_from_slice(&softmax(logits.row(r)));
    }
    out
}
