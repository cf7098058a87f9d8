use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BoxPx, BundleMetadata, DatasetBundle, Sample, SourceRegion, VideoClip, Waveform};
use crate::error::{ensure, Result};

/// Minimum unlabeled-to-labeled size ratio accepted by the generator.
pub const MIN_UNLABELED_RATIO: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_classes: usize,
    pub per_class_labeled: usize,
    pub per_class_unlabeled: usize,
    pub per_class_test: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub sample_rate: u32,
    /// Video frame rate; fixes the audio duration of a clip.
    pub fps: f64,
    /// Length of test clips, split into temporal windows at evaluation.
    pub eval_frames: usize,
    pub patch_size: usize,
    pub sprite_size: usize,
    /// Largest sprite displacement per frame, in pixels.
    pub max_step: f64,
    pub background_noise: f64,
    /// Probability of a static sprite with another class's texture.
    pub distractor_prob: f64,
    pub audio_noise: f64,
    /// Probability of an extra constant tone at a random frequency.
    pub tone_distractor_prob: f64,
    /// Relative spread of the class carrier frequency across samples.
    pub carrier_jitter: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            per_class_labeled: 1,
            per_class_unlabeled: 40,
            per_class_test: 25,
            frames: 8,
            height: 32,
            width: 32,
            channels: 3,
            sample_rate: 8000,
            fps: 8.0,
            eval_frames: 16,
            patch_size: 8,
            sprite_size: 8,
            max_step: 2.0,
            background_noise: 0.1,
            distractor_prob: 0.5,
            audio_noise: 0.05,
            tone_distractor_prob: 0.0,
            carrier_jitter: 0.03,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 2, Config, "num_classes must be at least 2");
        ensure!(self.per_class_labeled >= 1, Config, "per_class_labeled must be at least 1");
        ensure!(self.frames >= 1, Config, "frames must be at least 1");
        ensure!(self.eval_frames >= self.frames, Config, "eval_frames must be >= frames");
        ensure!(self.channels >= 1, Config, "channels must be at least 1");
        ensure!(
            self.patch_size >= 1 && self.height % self.patch_size == 0 && self.width % self.patch_size == 0,
            Config,
            "frame {}x{} is not divisible by patch size {}",
            self.height,
            self.width,
            self.patch_size
        );
        ensure!(
            self.sprite_size >= 1 && self.sprite_size <= self.height.min(self.width),
            Config,
            "sprite size {} does not fit a {}x{} frame",
            self.sprite_size,
            self.height,
            self.width
        );
        ensure!(self.sample_rate > 0 && self.fps > 0.0, Config, "sample_rate and fps must be positive");
        ensure!(
            self.per_class_unlabeled >= MIN_UNLABELED_RATIO * self.per_class_labeled,
            Config,
            "unlabeled split must be at least {MIN_UNLABELED_RATIO}x the labeled split"
        );
        ensure!(self.max_step >= 0.0, Config, "max_step must be non-negative");
        Ok(())
    }

    pub fn samples_per_clip(&self, frames: usize) -> usize {
        (frames as f64 / self.fps * self.sample_rate as f64).round() as usize
    }

    /// Carrier frequency of a class, log-spaced between 300 Hz and 3 kHz
    /// (capped below Nyquist).
    pub fn carrier_hz(&self, class: usize) -> f64 {
        let hi = 3000.0f64.min(0.45 * self.sample_rate as f64);
        let lo = 300.0f64.min(hi / 2.0);
        let frac = class as f64 / (self.num_classes - 1) as f64;
        lo * (hi / lo).powf(frac)
    }
}

/// Texture intensity in `[0, 1]` of `class` at sprite-local coordinates
/// `(u, v) ∈ [0,1)²`. Four base patterns (stripes, checker, dots, gradient)
/// repeat with increasing spatial frequency for larger class counts.
pub fn texture_value(class: usize, u: f64, v: f64) -> f64 {
    let freq = 2.0 + (class / 4) as f64;
    match class % 4 {
        0 => ((v * freq * 2.0).floor() as i64 % 2) as f64,
        1 => (((u * freq).floor() + (v * freq).floor()) as i64 % 2) as f64,
        2 => {
            let cu = (u * freq).fract() - 0.5;
            let cv = (v * freq).fract() - 0.5;
            if cu * cu + cv * cv < 0.09 {
                1.0
            } else {
                0.0
            }
        }
        _ => ((u + v) * 0.5 * freq).fract(),
    }
}

#[derive(Clone, Copy)]
enum Split {
    Labeled,
    Unlabeled,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Labeled => 1,
            Split::Unlabeled => 2,
            Split::Test => 3,
        }
    }
}

pub fn generate_dataset(config: &GenConfig) -> Result<DatasetBundle> {
    config.validate()?;
    let nc = config.num_classes;
    let split = |split: Split, per_class: usize, frames: usize| -> Vec<Sample> {
        (0..per_class * nc)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream((split.stream() << 32) | i as u64);
                let class = i % nc;
                let mut s = generate_sample(config, class, frames, &mut rng);
                s.id = format!("{}-{i:05}", split.name());
                match split {
                    Split::Unlabeled => s.hidden_label = Some(class),
                    _ => s.label = Some(class),
                }
                s
            })
            .collect()
    };
    Ok(DatasetBundle {
        labeled: split(Split::Labeled, config.per_class_labeled, config.frames),
        unlabeled: split(Split::Unlabeled, config.per_class_unlabeled, config.frames),
        test: split(Split::Test, config.per_class_test, config.eval_frames),
        metadata: BundleMetadata {
            num_classes: nc,
            seed: config.seed,
            config: config.clone(),
        },
    })
}

struct SpritePath {
    boxes: Vec<BoxPx>,
    speeds: Vec<f64>,
}

fn random_walk(config: &GenConfig, frames: usize, rng: &mut ChaCha8Rng) -> SpritePath {
    let size = config.sprite_size as f64;
    let max_x = (config.width as f64 - size).max(0.0);
    let max_y = (config.height as f64 - size).max(0.0);
    let step = config.max_step;
    let mut pos = [rng.random_range(0.0..=max_x), rng.random_range(0.0..=max_y)];
    let mut vel = [rng.random_range(-step..=step), rng.random_range(-step..=step)];
    let mut boxes = Vec::with_capacity(frames);
    let mut speeds = Vec::with_capacity(frames);
    for t in 0..frames {
        let prev = pos;
        if t > 0 {
            for (axis, hi) in [(0, max_x), (1, max_y)] {
                vel[axis] = (vel[axis] + rng.random_range(-0.5..=0.5) * step).clamp(-step, step);
                pos[axis] += vel[axis];
                if pos[axis] < 0.0 {
                    pos[axis] = -pos[axis];
                    vel[axis] = -vel[axis];
                }
                if pos[axis] > hi {
                    pos[axis] = 2.0 * hi - pos[axis];
                    vel[axis] = -vel[axis];
                }
                pos[axis] = pos[axis].clamp(0.0, hi);
            }
        }
        let speed = if t == 0 {
            vel[0].hypot(vel[1])
        } else {
            (pos[0] - prev[0]).hypot(pos[1] - prev[1])
        };
        speeds.push(speed);
        let x0 = pos[0].round() as u32;
        let y0 = pos[1].round() as u32;
        boxes.push(BoxPx {
            x0,
            y0,
            x1: x0 + config.sprite_size as u32,
            y1: y0 + config.sprite_size as u32,
        });
    }
    SpritePath { boxes, speeds }
}

fn generate_sample(config: &GenConfig, class: usize, frames: usize, rng: &mut ChaCha8Rng) -> Sample {
    let (h, w, c) = (config.height, config.width, config.channels);
    let size = config.sprite_size;
    let path = random_walk(config, frames, rng);

    let base: f64 = rng.random_range(0.3..0.6);
    let color: Vec<f64> = (0..c).map(|_| rng.random_range(0.6..1.0)).collect();
    let distractor = if rng.random_bool(config.distractor_prob.clamp(0.0, 1.0)) {
        let other = (class + rng.random_range(1..config.num_classes)) % config.num_classes;
        let dx = rng.random_range(0..=w - size);
        let dy = rng.random_range(0..=h - size);
        let dcolor: Vec<f64> = (0..c).map(|_| rng.random_range(0.6..1.0)).collect();
        Some((other, dx, dy, dcolor))
    } else {
        None
    };

    let mut clip = VideoClip::filled(frames, h, w, c, 0.0);
    let noise = config.background_noise;
    for t in 0..frames {
        let b = path.boxes[t];
        for y in 0..h {
            for x in 0..w {
                let mut px: Option<(f64, &[f64])> = None;
                if let Some((other, dx, dy, ref dcolor)) = distractor {
                    if (dx..dx + size).contains(&x) && (dy..dy + size).contains(&y) {
                        let u = (x - dx) as f64 / size as f64;
                        let v = (y - dy) as f64 / size as f64;
                        px = Some((texture_value(other, u, v), dcolor));
                    }
                }
                if b.contains(x, y) {
                    let u = (x - b.x0 as usize) as f64 / size as f64;
                    let v = (y - b.y0 as usize) as f64 / size as f64;
                    px = Some((texture_value(class, u, v), &color));
                }
                for ch in 0..c {
                    let val = match px {
                        Some((tex, col)) => 0.05 + tex * (col[ch] - 0.05),
                        None => base + rng.random_range(-noise..=noise),
                    };
                    let i = clip.index(t, y, x, ch);
                    clip.data[i] = val.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }

    let waveform = synth_audio(config, class, frames, &path.speeds, rng);
    Sample {
        id: String::new(),
        clip,
        waveform,
        label: None,
        source: SourceRegion {
            frame_boxes: path.boxes,
        },
        hidden_label: None,
    }
}

fn synth_audio(config: &GenConfig, class: usize, frames: usize, speeds: &[f64], rng: &mut ChaCha8Rng) -> Waveform {
    let sr = config.sample_rate as f64;
    let n = config.samples_per_clip(frames);
    let jitter = config.carrier_jitter;
    let carrier = config.carrier_hz(class) * (1.0 + rng.random_range(-jitter..=jitter));
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let tone = rng
        .random_bool(config.tone_distractor_prob.clamp(0.0, 1.0))
        .then(|| (rng.random_range(250.0..0.45 * sr), rng.random_range(0.0..2.0 * PI)));
    let envelope: Vec<f64> = speeds
        .iter()
        .map(|s| {
            if config.max_step > 0.0 {
                0.25 + 0.75 * (s / config.max_step).min(1.0)
            } else {
                1.0
            }
        })
        .collect();
    let gain = 1.0 / (1.0 + 0.4 + config.audio_noise);
    let samples = (0..n)
        .map(|i| {
            let secs = i as f64 / sr;
            // frame-centred linear interpolation of the speed envelope
            let f = (secs * config.fps - 0.5).clamp(0.0, (frames - 1) as f64);
            let lo = f.floor() as usize;
            let hi = (lo + 1).min(frames - 1);
            let env = envelope[lo] + (envelope[hi] - envelope[lo]) * (f - lo as f64);
            let mut x = env * (2.0 * PI * carrier * secs + phase).sin();
            if let Some((freq, ph)) = tone {
                x += 0.4 * (2.0 * PI * freq * secs + ph).sin();
            }
            x += config.audio_noise * rng.random_range(-1.0..=1.0);
            (x * gain).clamp(-1.0, 1.0) as f32
        })
        .collect();
    Waveform {
        samples,
        sample_rate: config.sample_rate,
    }
}
