use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use avmix::aslmask::LocalizationMap;
use avmix::features::{patchify, LogMelSpec};
use avmix::harness::{
    effective_weights, evaluate, read_metrics, spectrogram, train_run, train_step, MetricsLine, RunConfig, StepOptions, TrainData,
    TrainState, waveform_window, METRICS_FILE,
};
use avmix::models::{LocalizerKind, OracleLocalizer};
use avmix::ssl_objective::LossWeights;
use avmix::synthdata::{generate_dataset, DatasetBundle, GenConfig, Sample, SourceRegion};

fn bundle(labeled: usize, unlabeled: usize, test: usize) -> DatasetBundle {
    generate_dataset(&GenConfig {
        per_class_labeled: labeled,
        per_class_unlabeled: unlabeled,
        per_class_test: test,
        seed: 3,
        ..GenConfig::default()
    })
    .unwrap()
}

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.d_model = 16;
    c.model.layers = 1;
    c.model.heads = 2;
    c.epochs = 1;
    c.eval.segments = 1;
    c.eval.crops = 1;
    c.eval.crop_size = 32;
    c
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn argmax(r: &[f64]) -> (usize, f64) {
    let mut best = (0, r[0]);
    for (i, &v) in r.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

struct Batch<'a> {
    lab: Vec<&'a Sample>,
    lab_specs: Vec<&'a LogMelSpec>,
    unl: Vec<&'a Sample>,
    unl_specs: Vec<&'a LogMelSpec>,
}

fn batch<'a>(data: &'a TrainData, bl: usize, bu: usize) -> Batch<'a> {
    Batch {
        lab: data.bundle.labeled[..bl].iter().collect(),
        lab_specs: data.labeled_specs[..bl].iter().collect(),
        unl: data.bundle.unlabeled[..bu].iter().collect(),
        unl_specs: data.unlabeled_specs[..bu].iter().collect(),
    }
}

#[test]
fn zero_weights_reduce_to_supervised_loss() {
    let b = bundle(1, 10, 1);
    let mut cfg = small_config();
    cfg.loss = LossWeights::ZERO;
    let data = TrainData::prepare(&b, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut state = TrainState::init(&cfg, &data, &mut rng).unwrap();
    let x = batch(&data, 2, 4);
    let (r, t) = train_step(
        &cfg,
        &mut state,
        &x.lab,
        &x.lab_specs,
        &x.unl,
        &x.unl_specs,
        0.01,
        &mut rng,
        &StepOptions::default(),
    )
    .unwrap();
    assert_eq!(r.l_total, r.l_s);
    assert_eq!(t.unlabeled, 0);
    assert!(t.mix.is_none());
}

#[test]
fn full_ratio_mix_reproduces_first_clip() {
    let b = bundle(1, 10, 1);
    let cfg = small_config();
    let data = TrainData::prepare(&b, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut state = TrainState::init(&cfg, &data, &mut rng).unwrap();
    let x = batch(&data, 2, 4);
    let opts = StepOptions {
        freeze_augment: true,
        lambda: Some(1.0),
        keep_inputs: true,
    };
    let (_, t) = train_step(&cfg, &mut state, &x.lab, &x.lab_specs, &x.unl, &x.unl_specs, 0.01, &mut rng, &opts).unwrap();
    let m = t.mix.unwrap();
    for (i, &(a, _)) in m.pairs.iter().enumerate() {
        let expect = patchify(&x.unl[a].clip, cfg.model.patch).unwrap();
        assert_eq!(m.video[i].data, expect.data);
        assert_eq!(m.audio[i].values, x.unl_specs[a].values);
        assert_eq!(m.y_bar.row(i), t.teacher_probs.row(a));
    }
}

#[test]
fn step_losses_match_independent_recomputation() {
    let b = generate_dataset(&GenConfig {
        num_classes: 2,
        per_class_unlabeled: 10,
        per_class_test: 1,
        height: 16,
        width: 16,
        seed: 3,
        ..GenConfig::default()
    })
    .unwrap();
    let mut cfg = small_config();
    cfg.model.d_model = 4;
    cfg.model.heads = 1;
    cfg.ssl.tau = 0.2;
    cfg.ssl.threshold = avmix::ssl_objective::ThresholdMode::Fixed;
    let data = TrainData::prepare(&b, &cfg).unwrap();
    assert_eq!((data.model.classes, data.model.tokens_per_frame()), (2, 4));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut state = TrainState::init(&cfg, &data, &mut rng).unwrap();
    let x = batch(&data, 1, 2);
    let opts = StepOptions {
        freeze_augment: true,
        lambda: Some(0.4),
        keep_inputs: false,
    };
    let (r, t) = train_step(&cfg, &mut state, &x.lab, &x.lab_specs, &x.unl, &x.unl_specs, 0.01, &mut rng, &opts).unwrap();
    let (bl, bu) = (t.labeled, t.unlabeled);
    let c = t.logits.cols();

    let l_s = -(0..bl).map(|i| log_softmax(t.logits.row(i))[t.labels[i]]).sum::<f64>() / bl as f64;

    let mut l_u = 0.0;
    for i in 0..bu {
        let (cls, p) = argmax(t.teacher_probs.row(i));
        if p >= cfg.ssl.tau {
            l_u -= log_softmax(t.logits.row(bl + i))[cls];
        }
    }
    l_u /= bu as f64;

    let mut l_mix = 0.0;
    for i in 0..bu {
        let j = bu - 1 - i;
        let y: Vec<f64> = (0..c)
            .map(|k| 0.4 * t.teacher_probs.at2(i, k) + 0.6 * t.teacher_probs.at2(j, k))
            .collect();
        if argmax(&y).1 < cfg.ssl.tau {
            continue;
        }
        let p: Vec<f64> = log_softmax(t.logits.row(bl + bu + i)).iter().map(|v| v.exp()).collect();
        l_mix += y.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    l_mix /= bu as f64;

    let k = t.cls_v.rows();
    let unit = |m: &avmix::autodiff::Tensor, r: usize| {
        let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        m.row(r).iter().map(|v| v / n).collect::<Vec<f64>>()
    };
    let s: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let a = unit(&t.cls_a, i);
            (0..k)
                .map(|j| a.iter().zip(unit(&t.cls_v, j)).map(|(x, y)| x * y).sum::<f64>() / 0.05)
                .collect()
        })
        .collect();
    let mut l_c = 0.0;
    for i in 0..k {
        let col: Vec<f64> = (0..k).map(|j| s[j][i]).collect();
        l_c -= log_softmax(&s[i])[i] + log_softmax(&col)[i];
    }
    l_c /= 2.0 * k as f64;

    let w = effective_weights(&cfg, 0);
    let total = l_s + w.gamma1 * l_u + w.gamma2 * l_mix + w.gamma3 * l_c;
    for (got, want) in [(r.l_s, l_s), (r.l_u, l_u), (r.l_mix, l_mix), (r.l_c, l_c), (r.l_total, total)] {
        assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-12), "{got} vs {want}");
    }
}

#[test]
fn confident_counts_never_exceed_rows_seen() {
    let b = bundle(1, 10, 1);
    let cfg = small_config();
    let data = TrainData::prepare(&b, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut state = TrainState::init(&cfg, &data, &mut rng).unwrap();
    let x = batch(&data, 2, 6);
    for step in 1..=3 {
        train_step(&cfg, &mut state, &x.lab, &x.lab_specs, &x.unl, &x.unl_specs, 0.01, &mut rng, &StepOptions::default())
            .unwrap();
        let th = &state.thresholds;
        assert_eq!(th.seen(), 6 * step);
        assert!(th.sigma.iter().sum::<u64>() <= th.seen());
    }
}

#[test]
fn seeded_runs_write_identical_metrics() {
    let b = bundle(1, 10, 1);
    let mut cfg = small_config();
    cfg.max_steps = Some(3);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        train_run(&cfg, &b, Some(d.path())).unwrap();
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join(METRICS_FILE)).unwrap();
    assert_eq!(read(&dirs[0]), read(&dirs[1]));
}

#[test]
fn metrics_log_parses_and_recomposes() {
    let b = bundle(1, 10, 1);
    let mut cfg = small_config();
    cfg.epochs = 2;
    cfg.ssl.rampup_steps = 4;
    let dir = tempfile::tempdir().unwrap();
    let out = train_run(&cfg, &b, Some(dir.path())).unwrap();
    let lines = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(lines, out.metrics);
    assert!(lines.windows(2).all(|w| w[0].step() <= w[1].step()));
    let mut train = 0;
    for l in &lines {
        if let MetricsLine::Train { gamma, losses, .. } = l {
            train += 1;
            let total = losses.l_s + gamma.0 * losses.l_u + gamma.1 * losses.l_mix + gamma.2 * losses.l_c;
            assert!((total - losses.l_total).abs() < 1e-9 * (1.0 + total.abs()));
        }
    }
    assert_eq!(train, out.summary.steps);
    assert!(matches!(lines.last(), Some(MetricsLine::Eval { .. })));
}

#[test]
fn training_leaves_localizer_untouched() {
    let b = bundle(2, 20, 1);
    let mut cfg = small_config();
    cfg.max_steps = Some(2);
    cfg.localizer.kind = LocalizerKind::Learned;
    cfg.localizer.learned.steps = 5;
    let out = train_run(&cfg, &b, None).unwrap();
    assert_ne!(out.summary.localizer_checksum_before, 0);
    assert_eq!(out.summary.localizer_checksum_before, out.summary.localizer_checksum_after);
}

#[test]
fn untrained_model_is_near_chance() {
    let b = bundle(1, 10, 125);
    let cfg = small_config();
    let data = TrainData::prepare(&b, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let state = TrainState::init(&cfg, &data, &mut rng).unwrap();
    let r = evaluate(&state.model, &state.teacher, &b, &cfg.features, &cfg.eval).unwrap();
    assert_eq!(r.samples, 500);
    assert!((r.accuracy - 0.25).abs() <= 0.05, "accuracy {}", r.accuracy);
}

/// Saliency-weighted fraction of each cell covered by the source box.
fn in_box_mass(loc: &LocalizationMap, region: &SourceRegion, grid: (usize, usize), patch: usize) -> f64 {
    let mut inside = 0.0;
    let mut total = 0.0;
    for (t, b) in region.frame_boxes.iter().enumerate() {
        for (n, &s) in loc.frame(t).iter().enumerate() {
            let (x0, y0) = ((n % grid.1) * patch, (n / grid.1) * patch);
            let cover = b.overlap(x0, y0, x0 + patch, y0 + patch) as f64 / (patch * patch) as f64;
            total += s;
            inside += s * cover;
        }
    }
    inside / total
}

#[test]
fn learned_localizer_beats_uniform_map() {
    let b = bundle(2, 20, 5);
    let mut cfg = small_config();
    cfg.localizer.kind = LocalizerKind::Learned;
    let data = TrainData::prepare(&b, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let state = TrainState::init(&cfg, &data, &mut rng).unwrap();
    let mc = &data.model;
    let gen = &b.metadata.config;
    let mut mass = 0.0;
    let mut uniform = 0.0;
    for s in &b.test {
        let clip = s.clip.window(0, mc.frames).unwrap();
        let region = s.source.window(0, mc.frames);
        let spec = spectrogram(&waveform_window(gen, s, 0, mc.frames).unwrap(), &cfg.features, mc.steps).unwrap();
        let f = state.localizer.localize(&clip, &spec, None, mc.patch, &mut rng).unwrap();
        let loc = LocalizationMap::compute(&f, mc.grid(), cfg.mask.normalization, cfg.mask.eps).unwrap();
        mass += in_box_mass(&loc, &region, mc.grid(), mc.patch);
        uniform += region.frame_boxes.iter().map(|bx| bx.area() as f64).sum::<f64>()
            / (region.frame_boxes.len() * mc.height * mc.width) as f64;
    }
    assert!(mass > uniform, "in-box mass {mass} vs uniform {uniform}");
}

#[test]
fn corrupted_oracle_spreads_saliency() {
    let b = bundle(1, 10, 1);
    let cfg = small_config();
    let data = TrainData::prepare(&b, &cfg).unwrap();
    let mc = &data.model;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mass = |corruption: f64, rng: &mut ChaCha8Rng| {
        let oracle = OracleLocalizer {
            corruption,
            ..OracleLocalizer::default()
        };
        let mut m = 0.0;
        for s in &b.unlabeled {
            let f = oracle.localize(&s.clip, &s.source, mc.patch, rng).unwrap();
            let loc = LocalizationMap::compute(&f, mc.grid(), cfg.mask.normalization, cfg.mask.eps).unwrap();
            m += in_box_mass(&loc, &s.source, mc.grid(), mc.patch);
        }
        m / b.unlabeled.len() as f64
    };
    let clean = mass(0.0, &mut rng);
    let corrupt = mass(1.0, &mut rng);
    assert!(corrupt < clean / 2.0, "corrupted mass {corrupt} vs clean {clean}");
}
