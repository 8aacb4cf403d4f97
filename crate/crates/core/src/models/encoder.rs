//! Audio encoders: a left-context streaming stack and a cascaded stack with
//! bounded right context on top of it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{lookahead_mask, positional_encoding, positional_rows, BlockConfig, Ctx, KvCache, LayerNorm, Linear, TransformerBlock};
use crate::error::{Error, Result};
use crate::tensor::{Array, Var};
use crate::Params;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Future frames visible to each output frame; 0 for the streaming stack.
    pub right_context_frames: usize,
}

impl EncoderConfig {
    fn block(&self) -> BlockConfig {
        BlockConfig { model_dim: self.model_dim, num_heads: self.num_heads, ffn_dim: self.ffn_dim }
    }
}

/// Right-context frames for a lookahead of `lookahead_ms` at the given output frame period.
pub fn right_context_for(lookahead_ms: f64, frame_period_ms: u32) -> usize {
    (lookahead_ms / frame_period_ms as f64).round() as usize
}

/// Left-context-only encoder over stacked feature frames.
#[derive(Clone, Debug)]
pub struct StreamingEncoder {
    pub cfg: EncoderConfig,
    pub input_dim: usize,
    input: Linear,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

/// Incremental state of a [`StreamingEncoder`].
#[derive(Clone, Debug, Default)]
pub struct StreamingState {
    caches: Vec<KvCache>,
    frames: usize,
}

impl StreamingEncoder {
    pub fn new<R: Rng>(store: &mut Params, prefix: &str, input_dim: usize, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        if cfg.right_context_frames != 0 {
            return Err(Error::Config("streaming encoder must have right_context_frames = 0".into()));
        }
        let input = Linear::new(store, &format!("{prefix}.in"), input_dim, cfg.model_dim, true, rng)?;
        let blocks = (0..cfg.num_layers)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.block{i}"), &cfg.block(), rng))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, &format!("{prefix}.ln"), cfg.model_dim)?;
        Ok(Self { cfg: cfg.clone(), input_dim, input, blocks, norm })
    }

    fn check(&self, ctx: &Ctx, x: Var) -> Result<usize> {
        let s = ctx.tape.shape(x);
        if s.len() != 2 || s[1] != self.input_dim {
            return Err(Error::Dimension(format!("streaming encoder expects [T, {}], got {s:?}", self.input_dim)));
        }
        if s[0] == 0 {
            return Err(Error::Input("empty feature sequence".into()));
        }
        Ok(s[0])
    }

    /// `[T, input_dim] -> [T, model_dim]`; row `t` depends on rows `0..=t` only.
    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let n = self.check(ctx, x)?;
        let t = ctx.tape;
        let h = self.input.forward(ctx, x)?;
        let mut h = t.add(h, t.constant(positional_encoding(n, self.cfg.model_dim)))?;
        let mask = lookahead_mask(n, 0);
        for b in &self.blocks {
            h = b.forward(ctx, h, Some(&mask))?;
        }
        self.norm.forward(ctx, h)
    }

    pub fn start(&self) -> StreamingState {
        StreamingState { caches: vec![KvCache::default(); self.blocks.len()], frames: 0 }
    }

    /// Consumes one frame (`[1, input_dim]`) and returns its output row.
    pub fn step(&self, ctx: &Ctx, state: &mut StreamingState, frame: Var) -> Result<Var> {
        self.check(ctx, frame)?;
        let t = ctx.tape;
        let h = self.input.forward(ctx, frame)?;
        let mut h = t.add(h, t.constant(positional_rows(state.frames, 1, self.cfg.model_dim)))?;
        for (b, cache) in self.blocks.iter().zip(&mut state.caches) {
            h = b.step(ctx, h, cache)?;
        }
        state.frames += 1;
        self.norm.forward(ctx, h)
    }
}

/// Cascaded encoder over streaming outputs. Only the first block sees
/// `right_context_frames` future frames, so the whole stack's lookahead is
/// exactly that many frames.
#[derive(Clone, Debug)]
pub struct DelayedEncoder {
    pub cfg: EncoderConfig,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl DelayedEncoder {
    pub fn new<R: Rng>(store: &mut Params, prefix: &str, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let blocks = (0..cfg.num_layers)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.block{i}"), &cfg.block(), rng))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, &format!("{prefix}.ln"), cfg.model_dim)?;
        Ok(Self { cfg: cfg.clone(), blocks, norm })
    }

    /// `[T, d] -> [T, d]`; row `t` depends on input rows `0..=t+R` only.
    pub fn forward(&self, ctx: &Ctx, h: Var) -> Result<Var> {
        let s = ctx.tape.shape(h);
        if s.len() != 2 || s[1] != self.cfg.model_dim {
            return Err(Error::Dimension(format!("delayed encoder expects [T, {}], got {s:?}", self.cfg.model_dim)));
        }
        if s[0] == 0 {
            return Err(Error::Input("empty hidden sequence".into()));
        }
        let first = lookahead_mask(s[0], self.cfg.right_context_frames);
        let causal = lookahead_mask(s[0], 0);
        let mut h = h;
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(ctx, h, Some(if i == 0 { &first } else { &causal }))?;
        }
        self.norm.forward(ctx, h)
    }
}

/// Streaming then delayed encoding of stacked frames.
pub fn encode_cascade(ctx: &Ctx, s: &StreamingEncoder, d: &DelayedEncoder, x: &Array<f64>) -> Result<(Var, Var)> {
    let xv = ctx.tape.constant(x.clone());
    let hs = s.forward(ctx, xv)?;
    let hd = d.forward(ctx, hs)?;
    Ok((hs, hd))
}
