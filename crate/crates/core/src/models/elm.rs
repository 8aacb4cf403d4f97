//! External causal language model over non-blank labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{lookahead_mask, positional_encoding, BlockConfig, Ctx, LayerNorm, Linear, TransformerBlock};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, Tape, Var};
use crate::Params;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElmConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    /// Longest transcript that can be scored.
    pub context_length: usize,
}

#[derive(Clone, Debug)]
pub struct ExternalLm {
    pub cfg: ElmConfig,
    vocab_size: usize,
    embed: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    out: Linear,
}

impl ExternalLm {
    pub fn new<R: Rng>(store: &mut Params, prefix: &str, vocab_size: usize, cfg: &ElmConfig, rng: &mut R) -> Result<Self> {
        let embed = store.add_normal(format!("{prefix}.embed"), &[vocab_size, cfg.model_dim], 0.3, rng)?;
        let block = BlockConfig { model_dim: cfg.model_dim, num_heads: cfg.num_heads, ffn_dim: cfg.ffn_dim };
        let blocks = (0..cfg.num_layers)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.block{i}"), &block, rng))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, &format!("{prefix}.ln"), cfg.model_dim)?;
        let out = Linear::new(store, &format!("{prefix}.out"), cfg.model_dim, vocab_size - 1, true, rng)?;
        Ok(Self { cfg: cfg.clone(), vocab_size, embed, blocks, norm, out })
    }

    /// Output layer parameters (weight, bias).
    pub fn output_params(&self) -> (ParamId, Option<ParamId>) {
        (self.out.w, self.out.b)
    }

    fn inputs(&self, prefix: &[u32]) -> Result<Vec<usize>> {
        if prefix.len() + 1 > self.cfg.context_length + 1 {
            return Err(Error::Context { len: prefix.len(), max: self.cfg.context_length });
        }
        let mut ids = vec![0usize];
        for &id in prefix {
            if id == 0 || id as usize >= self.vocab_size {
                return Err(Error::Vocabulary { id, size: self.vocab_size });
            }
            ids.push(id as usize);
        }
        Ok(ids)
    }

    /// Log-distributions over the next label after each prefix of `history`
    /// (begin-of-sequence first): `[history.len() + 1, V - 1]`.
    pub fn next_logprobs(&self, ctx: &Ctx, history: &[u32]) -> Result<Var> {
        let ids = self.inputs(history)?;
        let t = ctx.tape;
        let n = ids.len();
        let mut h = t.gather(ctx.p(self.embed), &ids)?;
        h = t.add(h, t.constant(positional_encoding(n, self.cfg.model_dim)))?;
        let mask = lookahead_mask(n, 0);
        for b in &self.blocks {
            h = b.forward(ctx, h, Some(&mask))?;
        }
        let h = self.norm.forward(ctx, h)?;
        t.log_softmax(self.out.forward(ctx, h)?)
    }

    /// Negative log-likelihood of `y` (sum over tokens).
    pub fn nll(&self, ctx: &Ctx, y: &TokenSequence) -> Result<Var> {
        if y.len() > self.cfg.context_length {
            return Err(Error::Context { len: y.len(), max: self.cfg.context_length });
        }
        let ids = y.ids();
        let lp = self.next_logprobs(ctx, &ids[..ids.len().saturating_sub(1)])?;
        let picked = ctx.tape.pick(lp, &y.labels())?;
        ctx.tape.neg(ctx.tape.sum(picked)?)
    }

    /// Total log-probability of `y` and its per-token increments.
    pub fn logprob(&self, params: &Params, y: &TokenSequence) -> Result<(f64, Vec<f64>)> {
        if y.len() > self.cfg.context_length {
            return Err(Error::Context { len: y.len(), max: self.cfg.context_length });
        }
        if y.is_empty() {
            return Ok((0.0, Vec::new()));
        }
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, params);
        let ids = y.ids();
        let lp = self.next_logprobs(&ctx, &ids[..ids.len() - 1])?;
        let v = tape.value(lp);
        let inc: Vec<f64> = y.labels().iter().enumerate().map(|(u, &k)| v.at(u, k)).collect();
        Ok((inc.iter().sum(), inc))
    }

    /// Log-distribution of the label following `prefix`.
    pub fn next_distribution(&self, params: &Params, prefix: &[u32]) -> Result<Vec<f64>> {
        if prefix.len() >= self.cfg.context_length {
            return Err(Error::Context { len: prefix.len() + 1, max: self.cfg.context_length });
        }
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, params);
        let lp = self.next_logprobs(&ctx, prefix)?;
        let v = tape.value(lp);
        Ok(v.row(prefix.len()).to_vec())
    }
}
