//! Linear maps between the audio and text embedding spaces.

use rand::Rng;

use super::layers::{Ctx, Linear};
use crate::error::Result;
use crate::tensor::Var;
use crate::Params;

#[derive(Clone, Debug)]
pub struct Bridges {
    /// Audio embedding -> text embedding.
    pub audio_to_text: Linear,
    /// Text embedding -> audio embedding.
    pub text_to_audio: Linear,
}

impl Bridges {
    pub fn new<R: Rng>(store: &mut Params, prefix: &str, audio_dim: usize, text_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            audio_to_text: Linear::new(store, &format!("{prefix}.a2t"), audio_dim, text_dim, true, rng)?,
            text_to_audio: Linear::new(store, &format!("{prefix}.t2a"), text_dim, audio_dim, true, rng)?,
        })
    }

    pub fn audio_to_text(&self, ctx: &Ctx, h: Var) -> Result<Var> {
        self.audio_to_text.forward(ctx, h)
    }

    pub fn text_to_audio(&self, ctx: &Ctx, h: Var) -> Result<Var> {
        self.text_to_audio.forward(ctx, h)
    }
}
