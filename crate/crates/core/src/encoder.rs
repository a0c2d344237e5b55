//! Small residual convolutional encoder: frames in, fixed-size embeddings out.
//!
//! Layout: a stride-2 3×3 stem, then one stage per entry of
//! `stage_channels`. Every stage after the first halves the resolution in
//! its first block. Blocks are two 3×3 conv + batch-norm pairs with a ReLU
//! between them and after the residual sum; the shortcut is the identity or
//! a 1×1 projection when the shape changes. When `embedding_dim` differs
//! from the last stage width, a 1×1 conv + batch-norm + ReLU maps to it.
//! Global average pooling produces the embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_output_dim, NormMode, Tape, Var};
use crate::checkpoint::{self, NamedTensors};
use crate::error::{CheckpointError, ConfigError, TensorError};
use crate::frame::Frame;
use crate::nn::{BatchNorm, Conv2d, Ctx, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const PARAM_PREFIX: &str = "encoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_height: 64,
            input_width: 64,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: vec![1, 1, 1],
            embedding_dim: 64,
        }
    }
}

impl EncoderConfig {
    /// ResNet50-sized input and embedding width.
    pub fn full_scale() -> Self {
        EncoderConfig {
            input_height: 224,
            input_width: 224,
            stage_channels: vec![32, 64, 128, 256],
            blocks_per_stage: vec![1, 1, 1, 1],
            embedding_dim: 2048,
        }
    }

    /// Spatial size after each downsampling step: stem, then every stage.
    pub fn feature_sizes(&self) -> Option<Vec<(usize, usize)>> {
        let mut h = conv_output_dim(self.input_height, 3, 2, 1)?;
        let mut w = conv_output_dim(self.input_width, 3, 2, 1)?;
        let mut sizes = vec![(h, w)];
        for s in 0..self.stage_channels.len() {
            if s > 0 {
                h = conv_output_dim(h, 3, 2, 1)?;
                w = conv_output_dim(w, 3, 2, 1)?;
            }
            sizes.push((h, w));
        }
        Some(sizes)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.stage_channels.is_empty() {
            return bad("encoder needs at least one stage".into());
        }
        if self.stage_channels.len() != self.blocks_per_stage.len() {
            return bad(format!(
                "stage_channels has {} entries but blocks_per_stage has {}",
                self.stage_channels.len(),
                self.blocks_per_stage.len()
            ));
        }
        if self.stage_channels.iter().chain(&self.blocks_per_stage).any(|&v| v == 0) {
            return bad("stage widths and block counts must be positive".into());
        }
        if self.embedding_dim < 8 {
            return bad(format!("embedding_dim must be at least 8, got {}", self.embedding_dim));
        }
        match self.feature_sizes() {
            Some(sizes) if sizes.last().is_some_and(|&(h, w)| h >= 2 && w >= 2) => Ok(()),
            _ => bad(format!(
                "input {}x{} is too small for {} stages (final feature map must be at least 2x2)",
                self.input_height,
                self.input_width,
                self.stage_channels.len()
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl ResidualBlock {
    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let sum = ctx.tape.add(h, skip)?;
        ctx.tape.relu(sum)
    }
}

/// Layer layout; parameters live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderNet {
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<ResidualBlock>,
    neck: Option<(Conv2d, BatchNorm)>,
}

impl EncoderNet {
    /// Registers every parameter under `prefix/…` in `store`.
    pub fn build<T: Scalar>(config: &EncoderConfig, prefix: &str, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let c0 = config.stage_channels[0];
        let stem = Conv2d::new(store, &format!("{prefix}/stem/conv"), 3, c0, 3, 2, 1, rng);
        let stem_bn = BatchNorm::new(store, &format!("{prefix}/stem/bn"), c0);
        let mut blocks = Vec::new();
        let mut in_ch = c0;
        for (s, (&ch, &count)) in config.stage_channels.iter().zip(&config.blocks_per_stage).enumerate() {
            for b in 0..count {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("{prefix}/stage{}/block{}", s + 1, b + 1);
                let conv1 = Conv2d::new(store, &format!("{name}/conv1"), in_ch, ch, 3, stride, 1, rng);
                let bn1 = BatchNorm::new(store, &format!("{name}/bn1"), ch);
                let conv2 = Conv2d::new(store, &format!("{name}/conv2"), ch, ch, 3, 1, 1, rng);
                let bn2 = BatchNorm::new(store, &format!("{name}/bn2"), ch);
                let shortcut = (stride != 1 || in_ch != ch).then(|| {
                    (
                        Conv2d::new(store, &format!("{name}/proj/conv"), in_ch, ch, 1, stride, 0, rng),
                        BatchNorm::new(store, &format!("{name}/proj/bn"), ch),
                    )
                });
                blocks.push(ResidualBlock { conv1, bn1, conv2, bn2, shortcut });
                in_ch = ch;
            }
        }
        let neck = (in_ch != config.embedding_dim).then(|| {
            (
                Conv2d::new(store, &format!("{prefix}/neck/conv"), in_ch, config.embedding_dim, 1, 1, 0, rng),
                BatchNorm::new(store, &format!("{prefix}/neck/bn"), config.embedding_dim),
            )
        });
        EncoderNet { stem, stem_bn, blocks, neck }
    }

    /// `[N,3,H,W] -> [N,d]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let h = self.stem.forward(ctx, x)?;
        let h = self.stem_bn.forward(ctx, h)?;
        let mut h = ctx.tape.relu(h)?;
        for block in &self.blocks {
            h = block.forward(ctx, h)?;
        }
        if let Some((conv, bn)) = &self.neck {
            h = conv.forward(ctx, h)?;
            h = bn.forward(ctx, h)?;
            h = ctx.tape.relu(h)?;
        }
        ctx.tape.global_avg_pool(h)
    }
}

/// Embedding of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation(pub Vec<f32>);

impl Representation {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Stacks frames into an `[N,3,H,W]` tensor.
pub fn frames_to_tensor<T: Scalar>(frames: &[&Frame]) -> Result<Tensor<T>, TensorError> {
    let first = frames.first().ok_or_else(|| TensorError::Shape("empty frame batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let plane = h * w;
    let mut data = vec![T::zero(); frames.len() * 3 * plane];
    for (n, f) in frames.iter().enumerate() {
        if f.height() != h || f.width() != w {
            return Err(TensorError::Shape(format!("frame {n} is {}x{}, batch is {h}x{w}", f.height(), f.width())));
        }
        let out = &mut data[n * 3 * plane..(n + 1) * 3 * plane];
        for (p, px) in f.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = T::of_f64(px[c] as f64);
            }
        }
    }
    Tensor::new(vec![frames.len(), 3, h, w], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    net: EncoderNet,
    pub params: ParamStore<f32>,
}

/// Eval-mode inference batch size.
const ENCODE_CHUNK: usize = 32;

impl Encoder {
    pub fn build(config: EncoderConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = EncoderNet::build(&config, PARAM_PREFIX, &mut params, &mut rng);
        Ok(Encoder { config, net, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn net(&self) -> &EncoderNet {
        &self.net
    }

    pub fn output_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    fn check_frames(&self, frames: &[Frame]) -> Result<(), TensorError> {
        for (i, f) in frames.iter().enumerate() {
            if f.height() != self.config.input_height || f.width() != self.config.input_width {
                return Err(TensorError::Shape(format!(
                    "frame {i} is {}x{}, encoder expects {}x{}",
                    f.height(),
                    f.width(),
                    self.config.input_height,
                    self.config.input_width
                )));
            }
        }
        Ok(())
    }

    /// Embeds a batch without touching parameters or running statistics.
    ///
    /// Eval mode runs in fixed-size chunks and is independent of batch
    /// composition; train mode normalises with the statistics of the whole
    /// batch.
    pub fn encode(&self, frames: &[Frame], mode: NormMode) -> Result<Vec<Representation>, TensorError> {
        self.check_frames(frames)?;
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        let chunk = match mode {
            NormMode::Eval => ENCODE_CHUNK,
            NormMode::Train => frames.len(),
        };
        let d = self.output_dim();
        let mut out = Vec::with_capacity(frames.len());
        for group in frames.chunks(chunk) {
            let refs: Vec<&Frame> = group.iter().collect();
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(frames_to_tensor(&refs)?);
            let mut ctx = Ctx::new(&mut tape, &self.params, mode, false);
            let z = self.net.forward(&mut ctx, x)?;
            out.extend(tape.data(z).chunks(d).map(|r| Representation(r.to_vec())));
        }
        Ok(out)
    }

    pub fn to_named(&self) -> NamedTensors {
        self.params.named().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    /// Overwrites parameters from checkpoint tensors named `encoder/…`.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<f32>)]) -> Result<(), CheckpointError> {
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            let shape = self.params.get(id).shape().to_vec();
            let src = checkpoint::take_tensor(tensors, &name, &shape)?;
            self.params.get_mut(id).data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Restores an encoder of the given configuration from a checkpoint file.
    pub fn load(config: EncoderConfig, path: &std::path::Path) -> Result<Self, CheckpointError> {
        let mut enc = Encoder::build(config, 0).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let tensors = checkpoint::load(path)?;
        enc.load_named(&tensors)?;
        Ok(enc)
    }
}
