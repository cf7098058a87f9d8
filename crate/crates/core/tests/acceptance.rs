//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avmix::aslmask::{
    build_asl_mask, build_random_mask, build_tube_mask, sample_without_replacement, BinaryTokenMask, LocalizationMap,
    Normalization,
};
use avmix::autodiff::Tensor;
use avmix::harness::{mean_std, train_run, Axis, MetricsLine, RunConfig, METRICS_FILE};
use avmix::models::OracleLocalizer;
use avmix::ssl_objective::{
    consistency_loss, contrastive_loss, mix_consistency_loss, supervised_loss, ThresholdMode, ThresholdState,
};
use avmix::synthdata::{generate_dataset, BoxPx, DatasetBundle, GenConfig, SourceRegion, VideoClip};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn desk_config() -> RunConfig {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    RunConfig::load(&p).expect("configs/desk.toml")
}

// ---------------------------------------------------------------- sampling

/// Inclusion probabilities by enumerating every ordered draw sequence.
fn enumerate_inclusion(w: &[f64], k: usize) -> Vec<f64> {
    fn rec(w: &[f64], k: usize, taken: &mut Vec<usize>, p: f64, out: &mut [f64]) {
        if taken.len() == k {
            for &i in taken.iter() {
                out[i] += p;
            }
            return;
        }
        let rest: f64 = (0..w.len()).filter(|i| !taken.contains(i)).map(|i| w[i]).sum();
        for i in 0..w.len() {
            if taken.contains(&i) {
                continue;
            }
            taken.push(i);
            rec(w, k, taken, p * w[i] / rest, out);
            taken.pop();
        }
    }
    let mut out = vec![0.0; w.len()];
    rec(w, k, &mut Vec::new(), 1.0, &mut out);
    out
}

fn criterion_sampling() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 100_000;
    let mut worst: f64 = 0.0;
    for n in 1..=6 {
        for v in 0..5 {
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..5.0) * (v + 1) as f64).collect();
            for k in 1..=n {
                let exact = enumerate_inclusion(&w, k);
                let mut counts = vec![0u32; n];
                for _ in 0..draws {
                    for i in sample_without_replacement(&w, k, &mut rng).unwrap() {
                        counts[i] += 1;
                    }
                }
                let tv = 0.5
                    * exact
                        .iter()
                        .zip(&counts)
                        .map(|(e, &c)| (e - c as f64 / draws as f64).abs())
                        .sum::<f64>()
                    / k as f64;
                worst = worst.max(tv);
            }
        }
    }
    let hand = enumerate_inclusion(&[1.0, 2.0, 3.0], 2);
    let mut counts = [0u32; 3];
    for _ in 0..draws {
        for i in sample_without_replacement(&[1.0, 2.0, 3.0], 2, &mut rng).unwrap() {
            counts[i] += 1;
        }
    }
    let target = [5.0 / 12.0, 11.0 / 15.0, 17.0 / 20.0];
    let hand_ok = hand.iter().zip(target).all(|(h, t)| (h - t).abs() < 1e-12)
        && counts.iter().zip(target).all(|(&c, t)| (c as f64 / draws as f64 - t).abs() <= 0.01);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 0.01 && hand_ok && secs < 30.0,
        format!("max total variation {worst:.4}, [1,2,3] k=2 case ok={hand_ok}, {secs:.1}s"),
    )
}

// --------------------------------------------------------------- gradients

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn random_probs(rng: &mut ChaCha8Rng, r: usize, c: usize, sharp: f64) -> Tensor {
    let mut t = random_tensor(rng, r, c, sharp);
    for i in 0..r {
        let row = t.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        row.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
    }
    t
}

/// Norm-wise relative error between `analytic` and the central difference of `f`.
fn fd_error(x: &Tensor, analytic: &Tensor, f: impl Fn(&Tensor) -> f64) -> f64 {
    let h = 1e-6;
    let mut num = vec![0.0; x.data().len()];
    for (i, g) in num.iter_mut().enumerate() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        *g = (f(&p) - f(&m)) / (2.0 * h);
    }
    let diff: f64 = num.iter().zip(analytic.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for &(b, c) in &[(1, 2), (3, 4), (4, 8)] {
        let z = random_tensor(&mut rng, b, c, 2.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let g = supervised_loss(&z, &labels).unwrap().grad;
        worst = worst.max(fd_error(&z, &g, |x| supervised_loss(x, &labels).unwrap().value));

        let q = random_probs(&mut rng, b, c, 3.0);
        let th: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..0.6)).collect();
        for hard in [true, false] {
            let g = consistency_loss(&q, &z, &th, hard).unwrap().loss.grad;
            worst = worst.max(fd_error(&z, &g, |x| consistency_loss(&q, x, &th, hard).unwrap().loss.value));
        }

        let g = mix_consistency_loss(&q, &z, 0.3).unwrap().grad;
        worst = worst.max(fd_error(&z, &g, |x| mix_consistency_loss(&q, x, 0.3).unwrap().value));

        let zv = random_tensor(&mut rng, b, c, 1.0);
        let za = random_tensor(&mut rng, b, c, 1.0);
        let out = contrastive_loss(&zv, &za, 0.05).unwrap();
        worst = worst.max(fd_error(&zv, &out.grad_vid, |x| contrastive_loss(x, &za, 0.05).unwrap().value));
        worst = worst.max(fd_error(&za, &out.grad_aud, |x| contrastive_loss(&zv, x, 0.05).unwrap().value));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 10.0,
        format!("max relative error {worst:.2e}, {secs:.2}s"),
    )
}

// --------------------------------------------------------- loss identities

fn criterion_identities(metrics: &[MetricsLine]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    let one = random_tensor(&mut rng, 1, 8, 1.0);
    worst = worst.max(contrastive_loss(&one, &random_tensor(&mut rng, 1, 8, 1.0), 0.05).unwrap().value.abs());
    for k in [2usize, 4, 8] {
        let row = random_tensor(&mut rng, 1, 6, 1.0);
        let same = Tensor::new(vec![k, 6], row.data().repeat(k)).unwrap();
        let v = contrastive_loss(&same, &same, 0.05).unwrap().value;
        worst = worst.max((v - (k as f64).ln()).abs());

        let zv = random_tensor(&mut rng, k, 6, 1.0);
        let za = random_tensor(&mut rng, k, 6, 1.0);
        let mut sv = zv.clone();
        let mut sa = za.clone();
        for r in 0..k {
            let (a, b) = (rng.random_range(0.1..10.0), rng.random_range(0.1..10.0));
            sv.row_mut(r).iter_mut().for_each(|x| *x *= a);
            sa.row_mut(r).iter_mut().for_each(|x| *x *= b);
        }
        let base = contrastive_loss(&zv, &za, 0.05).unwrap().value;
        let scaled = contrastive_loss(&sv, &sa, 0.05).unwrap().value;
        worst = worst.max((base - scaled).abs());
    }
    let mut recompose: f64 = 0.0;
    let mut steps = 0;
    for l in metrics {
        if let MetricsLine::Train { gamma, losses, .. } = l {
            let t = losses.l_s + gamma.0 * losses.l_u + gamma.1 * losses.l_mix + gamma.2 * losses.l_c;
            recompose = recompose.max((t - losses.l_total).abs() / losses.l_total.abs().max(1e-300));
            steps += 1;
        }
    }
    outcome(
        worst <= 1e-9 && recompose <= 1e-9 && steps > 0,
        format!("contrastive identities max error {worst:.1e}, L_total recomposition max relative error {recompose:.1e} over {steps} steps"),
    )
}

// -------------------------------------------------------- threshold machine

fn criterion_thresholds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut monotone = true;
    let mut bounded = true;
    for _ in 0..1000 {
        let c = rng.random_range(2..6);
        let b = rng.random_range(1..9);
        let q = random_probs(&mut rng, b, c, 4.0);
        let z = random_tensor(&mut rng, b, c, 2.0);
        let lo: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
        let hi: Vec<f64> = lo.iter().map(|&t| t + rng.random_range(0.0..(1.0 - t))).collect();
        let p_lo = consistency_loss(&q, &z, &lo, true).unwrap().pass;
        let p_hi = consistency_loss(&q, &z, &hi, true).unwrap().pass;
        monotone &= p_lo.iter().zip(&p_hi).all(|(&l, &h)| l || !h);

        let tau = rng.random_range(0.05..1.0);
        let mut st = ThresholdState::new(c, tau, ThresholdMode::Flex).unwrap();
        for _ in 0..3 {
            st.update(&random_probs(&mut rng, b, c, 4.0)).unwrap();
            bounded &= st.thresholds().iter().all(|&t| (0.0..=tau).contains(&t));
        }
    }
    let mut st = ThresholdState::new(3, 0.8, ThresholdMode::Flex).unwrap();
    st.sigma = vec![10, 5, 0];
    st.unused = 4;
    let hand = st.thresholds() == vec![0.8, 0.4, 0.0];
    outcome(
        monotone && bounded && hand,
        format!("gate monotone={monotone}, flexible thresholds within [0, tau]={bounded}, sigma=[10,5,0] case={hand}"),
    )
}

// ----------------------------------------------------------- mask invariants

fn criterion_masks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut counts_ok = true;
    let mut tube_ok = true;
    for _ in 0..1000 {
        let (t, n) = ([1usize, 2, 4, 8][rng.random_range(0..4)], [4usize, 9, 16][rng.random_range(0..3)]);
        let lambda: f64 = rng.random_range(0.01..=1.0);
        let keep = ((lambda * n as f64).floor() as usize).max(1);
        let sal: Vec<f64> = (0..t * n).map(|_| rng.random_range(1e-3..1.0)).collect();
        let loc = LocalizationMap::from_saliency(t, n, sal).unwrap();
        let k = [1usize, 2, 4, 8].into_iter().filter(|k| t % k == 0).nth(rng.random_range(0..4)).unwrap_or(1);
        let masks = [
            build_asl_mask(&loc, lambda, k, &mut rng).unwrap(),
            build_tube_mask(n, t, lambda, &mut rng).unwrap(),
            build_random_mask(n, t, lambda, &mut rng).unwrap(),
        ];
        let per_frame = |m: &BinaryTokenMask| (0..t).all(|f| m.row(f).iter().filter(|&&v| v == 1).count() == keep);
        counts_ok &= masks.iter().all(per_frame);
        let full = build_asl_mask(&loc, lambda, t, &mut rng).unwrap();
        tube_ok &= (1..t).all(|f| full.row(f) == full.row(0));
    }

    // source box on the top-left quadrant of a 4x4 grid
    let frames = 4;
    let clip = VideoClip::filled(frames, 32, 32, 3, 0.5);
    let quad = BoxPx {
        x0: 0,
        y0: 0,
        x1: 16,
        y1: 16,
    };
    let region = SourceRegion {
        frame_boxes: vec![quad; frames],
    };
    let oracle = OracleLocalizer::default();
    let trials = 1000;
    let mut inside = 0.0;
    for _ in 0..trials {
        let f = oracle.localize(&clip, &region, 8, &mut rng).unwrap();
        let loc = LocalizationMap::compute(&f, (4, 4), Normalization::Frame, 1e-3).unwrap();
        let m = build_asl_mask(&loc, 0.25, 1, &mut rng).unwrap();
        let mut kept = 0;
        let mut hit = 0;
        for t in 0..frames {
            for (c, &v) in m.row(t).iter().enumerate() {
                if v == 1 {
                    kept += 1;
                    hit += usize::from(c / 4 < 2 && c % 4 < 2);
                }
            }
        }
        inside += hit as f64 / kept as f64;
    }
    let inside = inside / trials as f64;
    outcome(
        counts_ok && tube_ok && inside >= 0.95,
        format!("floor(lambda N) per frame={counts_ok}, k_avg=T tube property={tube_ok}, kept tokens inside box {:.1}%", 100.0 * inside),
    )
}

// ------------------------------------------------------------------- runs

struct Run {
    accuracy: f64,
    elapsed: Duration,
}

/// Trains every config, spreading runs over the available cores.
fn run_all(jobs: Vec<(String, RunConfig)>, bundle: &DatasetBundle) -> Vec<(String, Run)> {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(jobs.len().max(1));
    let queue = Mutex::new(jobs.into_iter().enumerate().collect::<Vec<_>>());
    let done = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let Some((i, (name, cfg))) = queue.lock().unwrap().pop() else {
                    break;
                };
                let start = Instant::now();
                let out = train_run(&cfg, bundle, None).expect("training run");
                let run = Run {
                    accuracy: out.summary.eval.accuracy,
                    elapsed: start.elapsed(),
                };
                done.lock().unwrap().push((i, name, run));
            });
        }
    });
    let mut v = done.into_inner().unwrap();
    v.sort_by_key(|(i, _, _)| *i);
    v.into_iter().map(|(_, n, r)| (n, r)).collect()
}

fn accuracies(runs: &[(String, Run)], name: &str) -> Vec<f64> {
    runs.iter().filter(|(n, _)| n == name).map(|(_, r)| r.accuracy).collect()
}

fn fmt(name: &str, xs: &[f64]) -> String {
    let (m, s) = mean_std(xs);
    format!("{name} {m:.3} ± {s:.3}")
}

fn seeded(cfg: &RunConfig, seed: u64) -> RunConfig {
    RunConfig { seed, ..cfg.clone() }
}

fn criterion_methods(base: &RunConfig, bundle: &DatasetBundle) -> (Outcome, Vec<f64>) {
    let methods = Axis::Method.default_values();
    let mut jobs = Vec::new();
    for m in &methods {
        let cfg = Axis::Method.apply(base, m).unwrap();
        for &s in &SEEDS {
            jobs.push((m.clone(), seeded(&cfg, s)));
        }
    }
    let runs = run_all(jobs, bundle);
    let means: Vec<f64> = methods.iter().map(|m| mean_std(&accuracies(&runs, m)).0).collect();
    let ordered = means.windows(2).all(|w| w[0] >= w[1]);
    let margin = means[0] - means[3];
    let slowest = runs.iter().map(|(_, r)| r.elapsed).max().unwrap_or_default().as_secs_f64();
    let detail = methods
        .iter()
        .map(|m| fmt(m, &accuracies(&runs, m)))
        .collect::<Vec<_>>()
        .join(", ");
    (
        outcome(
            ordered && margin >= 0.10 && slowest < 600.0,
            format!("{detail}; ordering holds={ordered}, margin over supervised {:.1} points, slowest run {slowest:.0}s", 100.0 * margin),
        ),
        accuracies(&runs, "asl+contrastive"),
    )
}

/// Soft ordering `hi ≥ lo`; fails only when `lo` beats `hi` by more than the
/// pooled standard deviation.
fn soft_order(hi_name: &str, hi: &[f64], lo_name: &str, lo: &[f64]) -> (bool, String) {
    let (mh, sh) = mean_std(hi);
    let (ml, sl) = mean_std(lo);
    let pooled = ((sh * sh + sl * sl) / 2.0).sqrt();
    let state = if mh >= ml {
        "holds"
    } else if ml - mh <= pooled {
        "inverted within 1 std"
    } else {
        "inverted beyond 1 std"
    };
    (ml - mh <= pooled, format!("{} vs {}: {state}", fmt(hi_name, hi), fmt(lo_name, lo)))
}

fn criterion_ablations(base: &RunConfig, bundle: &DatasetBundle, tau_base_runs: &[f64]) -> Outcome {
    let fast = generate_dataset(&GenConfig {
        max_step: 6.0,
        ..GenConfig::default()
    })
    .unwrap();
    let mut jobs = Vec::new();
    for k in ["1", "8"] {
        let cfg = Axis::FramesPerMap.apply(base, k).unwrap();
        for &s in &SEEDS {
            jobs.push((format!("k={k}"), seeded(&cfg, s)));
        }
    }
    let frames = run_all(jobs, &fast);
    let cfg = Axis::Tau.apply(base, "0.9").unwrap();
    let taus = run_all(SEEDS.iter().map(|&s| ("tau=0.9".to_string(), seeded(&cfg, s))).collect(), bundle);
    let (ok_k, dk) = soft_order("k=1", &accuracies(&frames, "k=1"), "k=8", &accuracies(&frames, "k=8"));
    let (ok_t, dt) = soft_order("tau=0.3", tau_base_runs, "tau=0.9", &accuracies(&taus, "tau=0.9"));
    outcome(ok_k && ok_t, format!("fast sprites {dk}; {dt}"))
}

fn criterion_determinism(base: &RunConfig, bundle: &DatasetBundle) -> (Outcome, Vec<MetricsLine>) {
    let cfg = RunConfig {
        epochs: 2,
        ..base.clone()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut lines = Vec::new();
    for d in &dirs {
        lines = train_run(&cfg, bundle, Some(d.path())).unwrap().metrics;
    }
    let a = std::fs::read(dirs[0].path().join(METRICS_FILE)).unwrap();
    let b = std::fs::read(dirs[1].path().join(METRICS_FILE)).unwrap();
    (
        outcome(a == b && !a.is_empty(), format!("{} metric lines, {} bytes, identical={}", lines.len(), a.len(), a == b)),
        lines,
    )
}

fn main() {
    let base = desk_config();
    let bundle = generate_dataset(&GenConfig::default()).unwrap();
    let (c8, metrics) = criterion_determinism(&base, &bundle);
    let c1 = criterion_sampling();
    let c2 = criterion_gradients();
    let c3 = criterion_identities(&metrics);
    let c4 = criterion_thresholds();
    let c5 = criterion_masks();
    for (i, c) in [&c1, &c2, &c3, &c4, &c5].into_iter().enumerate() {
        println!("criterion {}: {} {}", i + 1, if c.pass { "PASS" } else { "FAIL" }, c.detail);
    }
    let (c6, full_runs) = criterion_methods(&base, &bundle);
    println!("criterion 6: {} {}", if c6.pass { "PASS" } else { "FAIL" }, c6.detail);
    let c7 = criterion_ablations(&base, &bundle, &full_runs);
    println!("criterion 7: {} {}", if c7.pass { "PASS" } else { "FAIL" }, c7.detail);
    println!("criterion 8: {} {}", if c8.pass { "PASS" } else { "FAIL" }, c8.detail);
    if ![c1, c2, c3, c4, c5, c6, c7, c8].iter().all(|c| c.pass) {
        std::process::exit(1);
    }
}
