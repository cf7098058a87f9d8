use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Binder, ParamStore};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{ensure, Result};
use crate::features::{LogMelSpec, TokenGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub fusion_layers: usize,
    /// Hidden width of the feed-forward blocks as a multiple of `d_model`.
    pub mlp_ratio: usize,
    pub classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub mels: usize,
    pub steps: usize,
    /// `(mel, time)` extent of one audio patch.
    pub audio_patch: (usize, usize),
    /// Pixels are fed as `(x − video_shift) / video_scale`.
    pub video_shift: f64,
    pub video_scale: f64,
    /// Log-mel inputs are fed as `(x − audio_shift) / audio_scale`.
    pub audio_shift: f64,
    pub audio_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            fusion_layers: 1,
            mlp_ratio: 2,
            classes: 4,
            frames: 8,
            height: 32,
            width: 32,
            channels: 3,
            patch: 8,
            mels: 64,
            steps: 60,
            audio_patch: (8, 10),
            video_shift: 0.0,
            video_scale: 1.0,
            audio_shift: 0.0,
            audio_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.d_model >= 1 && self.layers >= 1 && self.heads >= 1 && self.fusion_layers >= 1 && self.mlp_ratio >= 1,
            Config,
            "model sizes must all be at least 1"
        );
        ensure!(
            self.d_model % self.heads == 0,
            Config,
            "d_model {} is not divisible by {} heads",
            self.d_model,
            self.heads
        );
        ensure!(self.classes >= 2, Config, "need at least two classes");
        ensure!(
            self.height % self.patch == 0 && self.width % self.patch == 0,
            Config,
            "{}x{} frames are not divisible by patch {}",
            self.height,
            self.width,
            self.patch
        );
        ensure!(
            self.mels % self.audio_patch.0 == 0 && self.steps % self.audio_patch.1 == 0,
            Config,
            "{}x{} spectrogram is not divisible by audio patch {:?}",
            self.mels,
            self.steps,
            self.audio_patch
        );
        ensure!(
            self.video_scale > 0.0 && self.audio_scale > 0.0,
            Config,
            "video_scale and audio_scale must be positive"
        );
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens_per_frame(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn video_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    pub fn video_token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn audio_tokens(&self) -> usize {
        (self.mels / self.audio_patch.0) * (self.steps / self.audio_patch.1)
    }

    pub fn audio_token_dim(&self) -> usize {
        self.audio_patch.0 * self.audio_patch.1
    }
}

/// Splits a `[M, L]` spectrogram into `(pm × pl)` patches, mel-major grid
/// order, each flattened mel-major, with the configured affine scaling.
pub fn audio_patches(spec: &LogMelSpec, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let (pm, pl) = cfg.audio_patch;
    ensure!(
        spec.mels == cfg.mels && spec.steps == cfg.steps,
        Shape,
        "spectrogram is {}x{}, model expects {}x{}",
        spec.mels,
        spec.steps,
        cfg.mels,
        cfg.steps
    );
    ensure!(
        spec.mels % pm == 0 && spec.steps % pl == 0,
        Shape,
        "{}x{} spectrogram is not divisible by audio patch {pm}x{pl}",
        spec.mels,
        spec.steps
    );
    let mut out = Vec::with_capacity(spec.values.len());
    for gm in 0..spec.mels / pm {
        for gl in 0..spec.steps / pl {
            for m in gm * pm..(gm + 1) * pm {
                for l in gl * pl..(gl + 1) * pl {
                    out.push((spec.get(m, l) - cfg.audio_shift) / cfg.audio_scale);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1: (usize, usize),
    qkv: (usize, usize),
    out: (usize, usize),
    ln2: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
}

#[derive(Clone, Debug)]
struct EncoderIds {
    embed: (usize, usize),
    pos: usize,
    cls: usize,
    blocks: Vec<BlockIds>,
    ln: (usize, usize),
}

#[derive(Clone, Debug)]
struct Layout {
    video: EncoderIds,
    audio: EncoderIds,
    type_v: usize,
    type_a: usize,
    fusion: Vec<BlockIds>,
    fusion_ln: (usize, usize),
    head: (usize, usize),
}

/// Video and audio transformer encoders, a fusion stack and a linear head.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    layout: Layout,
}

/// Per-sample summaries produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[B, D]`
    pub cls_v: Var,
    /// `[B, D]`
    pub cls_a: Var,
    /// `[B, classes]`
    pub logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[B·(1+S), D]`
    pub z: Var,
    /// `[B, D]`
    pub cls: Var,
}

fn ln_pair(store: &mut ParamStore, name: &str, d: usize) -> (usize, usize) {
    (
        store.push(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
        store.push(format!("{name}.bias"), Tensor::zeros(&[d])),
    )
}

fn dense(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> (usize, usize) {
    let std = gain / (fan_in as f64).sqrt();
    (
        store.push_normal(format!("{name}.w"), &[fan_in, fan_out], std, rng),
        store.push(format!("{name}.b"), Tensor::zeros(&[fan_out])),
    )
}

fn block(store: &mut ParamStore, name: &str, d: usize, hidden: usize, depth: usize, rng: &mut impl Rng) -> BlockIds {
    let residual_gain = 1.0 / (2.0 * depth as f64).sqrt();
    BlockIds {
        ln1: ln_pair(store, &format!("{name}.ln1"), d),
        qkv: dense(store, &format!("{name}.qkv"), d, 3 * d, 1.0, rng),
        out: dense(store, &format!("{name}.out"), d, d, residual_gain, rng),
        ln2: ln_pair(store, &format!("{name}.ln2"), d),
        fc1: dense(store, &format!("{name}.fc1"), d, hidden, 1.0, rng),
        fc2: dense(store, &format!("{name}.fc2"), hidden, d, residual_gain, rng),
    }
}

fn encoder(
    store: &mut ParamStore,
    name: &str,
    cfg: &ModelConfig,
    in_dim: usize,
    seq: usize,
    rng: &mut impl Rng,
) -> EncoderIds {
    let d = cfg.d_model;
    EncoderIds {
        embed: dense(store, &format!("{name}.embed"), in_dim, d, 1.0, rng),
        pos: store.push_normal(format!("{name}.pos"), &[seq, d], 0.1, rng),
        cls: store.push_normal(format!("{name}.cls"), &[1, d], 0.1, rng),
        blocks: (0..cfg.layers)
            .map(|i| block(store, &format!("{name}.block{i}"), d, d * cfg.mlp_ratio, cfg.layers, rng))
            .collect(),
        ln: ln_pair(store, &format!("{name}.ln"), d),
    }
}

impl Model {
    /// Builds the layout and a freshly initialized parameter store.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut s = ParamStore::new();
        let d = config.d_model;
        let video = encoder(&mut s, "video", &config, config.video_token_dim(), config.video_tokens(), rng);
        let audio = encoder(&mut s, "audio", &config, config.audio_token_dim(), config.audio_tokens(), rng);
        let type_v = s.push_normal("fusion.type_v", &[1, d], 0.1, rng);
        let type_a = s.push_normal("fusion.type_a", &[1, d], 0.1, rng);
        let fusion = (0..config.fusion_layers)
            .map(|i| block(&mut s, &format!("fusion.block{i}"), d, d * config.mlp_ratio, config.fusion_layers, rng))
            .collect();
        let fusion_ln = ln_pair(&mut s, "fusion.ln", d);
        let head = dense(&mut s, "head", d, config.classes, 0.1, rng);
        let layout = Layout {
            video,
            audio,
            type_v,
            type_a,
            fusion,
            fusion_ln,
            head,
        };
        Ok((Self { config, layout }, s))
    }

    /// Rebuilds the layout for an existing store and checks that it matches.
    pub fn with_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let (model, fresh) = Self::init(config, &mut rng)?;
        ensure!(fresh.same_layout(params), Shape, "parameter store does not match the model configuration");
        Ok(model)
    }

    pub fn head_ids(&self) -> (usize, usize) {
        self.layout.head
    }

    fn linear(&self, g: &mut Graph, b: Binder, x: Var, ids: (usize, usize)) -> Result<Var> {
        let w = b.var(g, ids.0);
        let bias = b.var(g, ids.1);
        g.linear(x, w, Some(bias))
    }

    fn layer_norm(&self, g: &mut Graph, b: Binder, x: Var, ids: (usize, usize)) -> Result<Var> {
        let gain = b.var(g, ids.0);
        let bias = b.var(g, ids.1);
        g.layer_norm(x, gain, bias)
    }

    fn block(&self, g: &mut Graph, b: Binder, x: Var, ids: &BlockIds, batch: usize) -> Result<Var> {
        let h = self.layer_norm(g, b, x, ids.ln1)?;
        let qkv = self.linear(g, b, h, ids.qkv)?;
        let att = g.attention(qkv, batch, self.config.heads)?;
        let att = self.linear(g, b, att, ids.out)?;
        let x = g.add(x, att)?;
        let h = self.layer_norm(g, b, x, ids.ln2)?;
        let h = self.linear(g, b, h, ids.fc1)?;
        let h = g.gelu(h);
        let h = self.linear(g, b, h, ids.fc2)?;
        g.add(x, h)
    }

    fn encode(&self, g: &mut Graph, b: Binder, tokens: Var, batch: usize, ids: &EncoderIds) -> Result<Encoded> {
        let x = self.linear(g, b, tokens, ids.embed)?;
        let pos = b.var(g, ids.pos);
        let x = g.add_broadcast(x, pos)?;
        let cls = b.var(g, ids.cls);
        let mut x = g.prepend_token(x, cls, batch)?;
        for blk in &ids.blocks {
            x = self.block(g, b, x, blk, batch)?;
        }
        let z = self.layer_norm(g, b, x, ids.ln)?;
        let seq = g.value(z).rows() / batch;
        let cls = g.select_rows(z, (0..batch).map(|i| i * seq).collect())?;
        Ok(Encoded { z, cls })
    }

    /// `tokens` is `[B·T·N, P²C]`, samples stacked in order.
    pub fn encode_video(&self, g: &mut Graph, b: Binder, tokens: Var, batch: usize) -> Result<Encoded> {
        let v = g.value(tokens);
        ensure!(
            v.cols() == self.config.video_token_dim() && v.rows() == batch * self.config.video_tokens(),
            Shape,
            "video input is {:?}, expected [{}, {}]",
            v.shape(),
            batch * self.config.video_tokens(),
            self.config.video_token_dim()
        );
        self.encode(g, b, tokens, batch, &self.layout.video)
    }

    /// `tokens` is `[B·A, pm·pl]` from [`audio_patches`].
    pub fn encode_audio(&self, g: &mut Graph, b: Binder, tokens: Var, batch: usize) -> Result<Encoded> {
        let v = g.value(tokens);
        ensure!(
            v.cols() == self.config.audio_token_dim() && v.rows() == batch * self.config.audio_tokens(),
            Shape,
            "audio input is {:?}, expected [{}, {}]",
            v.shape(),
            batch * self.config.audio_tokens(),
            self.config.audio_token_dim()
        );
        self.encode(g, b, tokens, batch, &self.layout.audio)
    }

    /// Two-token fusion stack over `[cls_v + type_v, cls_a + type_a]`, mean
    /// pooled, then the linear head. Returns logits `[B, classes]`.
    pub fn fuse(&self, g: &mut Graph, b: Binder, cls_v: Var, cls_a: Var) -> Result<Var> {
        let batch = g.value(cls_v).rows();
        let tv = b.var(g, self.layout.type_v);
        let ta = b.var(g, self.layout.type_a);
        let v = g.add_broadcast(cls_v, tv)?;
        let a = g.add_broadcast(cls_a, ta)?;
        let mut x = g.interleave(v, a)?;
        for blk in &self.layout.fusion {
            x = self.block(g, b, x, blk, batch)?;
        }
        let x = self.layer_norm(g, b, x, self.layout.fusion_ln)?;
        let pooled = g.mean_groups(x, 2)?;
        self.linear(g, b, pooled, self.layout.head)
    }

    pub fn forward(&self, g: &mut Graph, b: Binder, video: Var, audio: Var, batch: usize) -> Result<Forward> {
        let v = self.encode_video(g, b, video, batch)?;
        let a = self.encode_audio(g, b, audio, batch)?;
        let logits = self.fuse(g, b, v.cls, a.cls)?;
        Ok(Forward {
            cls_v: v.cls,
            cls_a: a.cls,
            logits,
        })
    }

    /// Stacks token grids into one `[B·T·N, P²C]` input tensor, scaled by
    /// the configured pixel statistics.
    pub fn video_input(&self, grids: &[&TokenGrid]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(grids.len() * self.config.video_tokens() * self.config.video_token_dim());
        for grid in grids {
            ensure!(
                grid.frames * grid.tokens == self.config.video_tokens() && grid.dim == self.config.video_token_dim(),
                Shape,
                "token grid [{}, {}, {}] does not match the model",
                grid.frames,
                grid.tokens,
                grid.dim
            );
            let (shift, scale) = (self.config.video_shift, self.config.video_scale);
            data.extend(grid.data.iter().map(|&x| (x - shift) / scale));
        }
        Tensor::new(vec![grids.len() * self.config.video_tokens(), self.config.video_token_dim()], data)
    }

    pub fn audio_input(&self, specs: &[&LogMelSpec]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(specs.len() * self.config.audio_tokens() * self.config.audio_token_dim());
        for s in specs {
            data.extend(audio_patches(s, &self.config)?);
        }
        Tensor::new(vec![specs.len() * self.config.audio_tokens(), self.config.audio_token_dim()], data)
    }

    /// Softmax class probabilities with frozen weights.
    pub fn predict(&self, params: &ParamStore, video: Tensor, audio: Tensor, batch: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = Binder::frozen(params);
        let (v, a) = (g.input(video), g.input(audio));
        let out = self.forward(&mut g, b, v, a, batch)?;
        let mut probs = g.value(out.logits).clone();
        for r in 0..batch {
            crate::autodiff::softmax_in_place(probs.row_mut(r));
        }
        Ok(probs)
    }
}
