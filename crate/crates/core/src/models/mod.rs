//! Parameterised networks and the container that ties them to one
//! parameter store.

mod audio_decoder;
mod bridge;
mod elm;
mod encoder;
pub mod layers;
mod text;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use audio_decoder::{AudioDecoder, AudioDecoderConfig, DecodedFrames};
pub use bridge::Bridges;
pub use elm::{ElmConfig, ExternalLm};
pub use encoder::{encode_cascade, right_context_for, DelayedEncoder, EncoderConfig, StreamingEncoder, StreamingState};
pub use layers::Ctx;
pub use text::{TextEncoder, TextEncoderConfig};

use crate::corpus::rng_for;
use crate::error::{Error, Result};
use crate::frontend::{stack_frames, SpecAugmentConfig};
use crate::hat::{HatConfig, HatDecoder};
use crate::tensor::{checkpoint, Array, Tape};
use crate::{Features, Params};

pub const PREFIXES: [&str; 7] = ["enc_s", "enc_d", "enc_t", "dec_a", "bridge", "hat", "elm"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    /// Period of the raw frames.
    pub frame_period_ms: u32,
    pub stack: usize,
    pub stride: usize,
    pub spec_augment: SpecAugmentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Including the blank.
    pub vocab_size: usize,
    /// Raw frame width; the audio decoder predicts frames of this width.
    pub feature_dim: usize,
    pub frontend: FrontendConfig,
    pub streaming: EncoderConfig,
    pub delayed: EncoderConfig,
    pub text: TextEncoderConfig,
    pub audio_decoder: AudioDecoderConfig,
    pub hat: HatConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let enc = |r| EncoderConfig { num_layers: 2, model_dim: 64, num_heads: 4, ffn_dim: 128, right_context_frames: r };
        Self {
            vocab_size: 60,
            feature_dim: 16,
            frontend: FrontendConfig {
                frame_period_ms: 10,
                stack: 4,
                stride: 3,
                spec_augment: SpecAugmentConfig { freq_mask_param: 8, num_time_masks: 1, time_mask_param: 2, mask_value: 0.0 },
            },
            streaming: enc(0),
            delayed: enc(6),
            text: TextEncoderConfig { embed_dim: 32, num_conv_layers: 3, conv_width: 5, recurrent_dim: 32 },
            audio_decoder: AudioDecoderConfig {
                memory_dim: 32,
                feature_dim: 16,
                prenet_dims: [32, 32],
                prenet_dropout: 0.5,
                feed_previous_frame: false,
                recurrent_dim: 64,
                attention_dim: 32,
                postnet_layers: 2,
                postnet_dim: 32,
                postnet_width: 5,
                max_decode_frames: 60,
                stop_threshold: 0.5,
            },
            hat: HatConfig { enc_dim: 64, embed_dim: 32, context: 2, joint_dim: 64 },
        }
    }
}

impl FrontendConfig {
    /// Fewest raw frames that give at least one stacked frame.
    pub fn min_frames(&self) -> usize {
        (self.stack.max(1) - 1).div_ceil(self.stride.max(1)) * self.stride + 1
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.delayed.model_dim != self.streaming.model_dim {
            return bad("delayed and streaming encoders must share model_dim".into());
        }
        if self.hat.enc_dim != self.streaming.model_dim {
            return bad(format!("hat.enc_dim {} != encoder dim {}", self.hat.enc_dim, self.streaming.model_dim));
        }
        if self.audio_decoder.memory_dim != self.text.recurrent_dim {
            return bad("audio decoder memory_dim must equal the text encoder width".into());
        }
        if self.audio_decoder.feature_dim != self.feature_dim {
            return bad("audio decoder feature_dim must equal feature_dim".into());
        }
        if self.streaming.right_context_frames != 0 {
            return bad("streaming encoder must have zero right context".into());
        }
        Ok(())
    }

    pub fn stacked_dim(&self) -> usize {
        self.feature_dim * self.frontend.stack
    }
}

/// Every network of the dual system over one parameter store.
#[derive(Clone, Debug)]
pub struct DuplexModel {
    pub cfg: ModelConfig,
    pub params: Params,
    pub enc_s: StreamingEncoder,
    pub enc_d: DelayedEncoder,
    pub enc_t: TextEncoder,
    pub dec_a: AudioDecoder,
    pub bridge: Bridges,
    pub hat: HatDecoder,
}

impl DuplexModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut p = Params::new();
        let mut rng = rng_for(seed, 0x6d6f64656c, 0);
        let enc_s = StreamingEncoder::new(&mut p, "enc_s", cfg.stacked_dim(), &cfg.streaming, &mut rng)?;
        let enc_d = DelayedEncoder::new(&mut p, "enc_d", &cfg.delayed, &mut rng)?;
        let enc_t = TextEncoder::new(&mut p, "enc_t", cfg.vocab_size, &cfg.text, &mut rng)?;
        let dec_a = AudioDecoder::new(&mut p, "dec_a", &cfg.audio_decoder, &mut rng)?;
        let bridge = Bridges::new(&mut p, "bridge", cfg.streaming.model_dim, cfg.text.recurrent_dim, &mut rng)?;
        let hat = HatDecoder::new(&mut p, "hat", cfg.vocab_size, &cfg.hat, &mut rng)?;
        Ok(Self { cfg: cfg.clone(), params: p, enc_s, enc_d, enc_t, dec_a, bridge, hat })
    }

    /// Stacked ASR input frames for raw features.
    pub fn asr_input(&self, x: &Features) -> Result<Array<f64>> {
        Ok(stack_frames(x, self.cfg.frontend.stack, self.cfg.frontend.stride)?.into_frames())
    }

    /// Delayed (cascaded) encoder output for stacked frames, inference mode.
    pub fn encode_delayed(&self, stacked: &Array<f64>) -> Result<Array<f64>> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.params);
        let (_, hd) = encode_cascade(&ctx, &self.enc_s, &self.enc_d, stacked)?;
        let out = tape.value(hd).clone();
        Ok(out)
    }

    /// Streaming encoder output for stacked frames, inference mode.
    pub fn encode_streaming(&self, stacked: &Array<f64>) -> Result<Array<f64>> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.params);
        let hs = self.enc_s.forward(&ctx, tape.constant(stacked.clone()))?;
        let out = tape.value(hs).clone();
        Ok(out)
    }

    /// TTS inference: raw frames synthesised from `y`.
    pub fn synthesize(&self, y: &crate::corpus::TokenSequence) -> Result<Array<f64>> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.params);
        let memory = self.enc_t.forward(&ctx, y)?;
        self.dec_a.infer(&ctx, memory)
    }

    /// Parameter counts per component prefix.
    pub fn param_counts(&self) -> Vec<(String, usize)> {
        PREFIXES[..6].iter().map(|p| (p.to_string(), self.params.count_prefix(&format!("{p}.")))).collect()
    }
}

/// External LM with its own parameters.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub cfg: ElmConfig,
    pub params: Params,
    pub lm: ExternalLm,
}

impl LanguageModel {
    pub fn new(cfg: &ElmConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        let mut params = Params::new();
        let mut rng = rng_for(seed, 0x656c6d, 0);
        let lm = ExternalLm::new(&mut params, "elm", vocab_size, cfg, &mut rng)?;
        Ok(Self { cfg: cfg.clone(), params, lm })
    }
}

impl Default for ElmConfig {
    fn default() -> Self {
        Self { num_layers: 2, num_heads: 4, model_dim: 64, ffn_dim: 128, context_length: 32 }
    }
}

/// Writes the model (and the LM, when given) into one checkpoint file.
pub fn save_models(path: &Path, model: &DuplexModel, lm: Option<&LanguageModel>) -> Result<()> {
    let mut all = model.params.clone();
    if let Some(lm) = lm {
        for (_, name, v) in lm.params.iter() {
            all.add(name, v.clone())?;
        }
    }
    checkpoint::save_checkpoint(&all, path)
}

/// Restores a model (and optionally an LM) saved by [`save_models`]. Every
/// parameter of the freshly built networks must be present in the file.
pub fn load_models(
    path: &Path,
    cfg: &ModelConfig,
    elm: Option<&ElmConfig>,
) -> Result<(DuplexModel, Option<LanguageModel>)> {
    let stored = checkpoint::load_checkpoint::<f64>(path)?;
    let mut model = DuplexModel::new(cfg, 0)?;
    let expected = model.params.len();
    let mut loaded = 0;
    for p in &PREFIXES[..6] {
        loaded += model.params.load_prefix(&stored, &format!("{p}."))?;
    }
    if loaded != expected {
        return Err(Error::Format { path: path.to_path_buf(), reason: format!("{loaded} of {expected} model parameters found") });
    }
    let lm = match elm {
        Some(c) => {
            let mut lm = LanguageModel::new(c, cfg.vocab_size, 0)?;
            let n = lm.params.load_prefix(&stored, "elm.")?;
            if n != lm.params.len() {
                return Err(Error::Format { path: path.to_path_buf(), reason: "external LM parameters missing".into() });
            }
            Some(lm)
        }
        None => None,
    };
    Ok((model, lm))
}
