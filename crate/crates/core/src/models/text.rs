//! Text encoder: token embedding, a residual convolution stack and a
//! bidirectional recurrent layer, plus a linear skip from the embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Ctx, Gru, Linear};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, Var};
use crate::Params;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub embed_dim: usize,
    pub num_conv_layers: usize,
    /// Odd kernel width of each "same" convolution.
    pub conv_width: usize,
    /// Output width; each direction of the recurrent layer gets half.
    pub recurrent_dim: usize,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    vocab_size: usize,
    embed: ParamId,
    convs: Vec<Linear>,
    forward_rnn: Gru,
    backward_rnn: Gru,
    /// Linear path from the embeddings straight to the output.
    skip: Linear,
}

impl TextEncoder {
    pub fn new<R: Rng>(store: &mut Params, prefix: &str, vocab_size: usize, cfg: &TextEncoderConfig, rng: &mut R) -> Result<Self> {
        if cfg.conv_width.is_multiple_of(2) || !cfg.recurrent_dim.is_multiple_of(2) {
            return Err(Error::Config("text encoder needs odd conv_width and even recurrent_dim".into()));
        }
        let embed = store.add_normal(format!("{prefix}.embed"), &[vocab_size, cfg.embed_dim], 0.3, rng)?;
        let convs = (0..cfg.num_conv_layers)
            .map(|i| Linear::new(store, &format!("{prefix}.conv{i}"), cfg.conv_width * cfg.embed_dim, cfg.embed_dim, true, rng))
            .collect::<Result<_>>()?;
        let half = cfg.recurrent_dim / 2;
        let forward_rnn = Gru::new(store, &format!("{prefix}.fwd"), cfg.embed_dim, half, rng)?;
        let backward_rnn = Gru::new(store, &format!("{prefix}.bwd"), cfg.embed_dim, half, rng)?;
        let skip = Linear::new(store, &format!("{prefix}.skip"), cfg.embed_dim, cfg.recurrent_dim, false, rng)?;
        Ok(Self { cfg: cfg.clone(), vocab_size, embed, convs, forward_rnn, backward_rnn, skip })
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.recurrent_dim
    }

    /// `y -> [n, recurrent_dim]`, full context in both directions.
    pub fn forward(&self, ctx: &Ctx, y: &TokenSequence) -> Result<Var> {
        if y.is_empty() {
            return Err(Error::Input("empty transcript".into()));
        }
        let ids: Vec<usize> = y
            .ids()
            .iter()
            .map(|&id| {
                if id == 0 || id as usize >= self.vocab_size {
                    Err(Error::Vocabulary { id, size: self.vocab_size })
                } else {
                    Ok(id as usize)
                }
            })
            .collect::<Result<_>>()?;
        let t = ctx.tape;
        let e = t.gather(ctx.p(self.embed), &ids)?;
        let mut h = e;
        for conv in &self.convs {
            let cols = t.im2col(h, self.cfg.conv_width)?;
            let c = t.relu(conv.forward(ctx, cols)?)?;
            h = t.add(h, c)?;
        }
        let f = self.forward_rnn.run(ctx, h, false)?;
        let b = self.backward_rnn.run(ctx, h, true)?;
        t.add(t.concat_cols(&[f, b])?, self.skip.forward(ctx, e)?)
    }
}
