//! Building blocks shared by the networks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Array, ParamId, Tape, Var};
use crate::Params;

/// Forward-pass context: the tape, the parameters it reads, and (in
/// training mode) the random stream that drives dropout.
pub struct Ctx<'a> {
    pub tape: &'a Tape<f64>,
    pub params: &'a Params,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn train(tape: &'a Tape<f64>, params: &'a Params, rng: ChaCha8Rng) -> Self {
        Self { tape, params, rng: Some(rng) }
    }

    pub fn eval(tape: &'a Tape<f64>, params: &'a Params) -> Self {
        Self { tape, params, rng: None }
    }

    pub fn training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        match self.rng.as_mut() {
            Some(rng) => self.tape.dropout(x, rate, true, rng),
            None => self.tape.dropout(x, rate, false, &mut NoRng),
        }
    }

    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        self.rng.as_mut()
    }
}

/// Placeholder generator for inference-mode dropout, which draws nothing.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("inference dropout draws no randomness")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("inference dropout draws no randomness")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("inference dropout draws no randomness")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("inference dropout draws no randomness")
    }
}

fn param_name(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut Params, prefix: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Result<Self> {
        let w = store.add_weight(param_name(prefix, "w"), fan_in, fan_out, rng)?;
        let b = if bias { Some(store.add_zeros(param_name(prefix, "b"), &[fan_out])?) } else { None };
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let y = ctx.tape.matmul(x, ctx.p(self.w))?;
        match self.b {
            Some(b) => ctx.tape.add(y, ctx.p(b)),
            None => Ok(y),
        }
    }

    /// `x W + b` on plain arrays, for tape-free inference.
    pub fn apply(&self, params: &Params, x: &[f64]) -> Vec<f64> {
        let w = params.get(self.w).data();
        let mut out = match self.b {
            Some(b) => params.get(b).data().to_vec(),
            None => vec![0.0; self.fan_out],
        };
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, &wv) in out.iter_mut().zip(&w[i * self.fan_out..(i + 1) * self.fan_out]) {
                *o += xi * wv;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut Params, prefix: &str, dim: usize) -> Result<Self> {
        let gain = store.add_filled(param_name(prefix, "g"), &[dim], 1.0)?;
        let bias = store.add_zeros(param_name(prefix, "b"), &[dim])?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        ctx.tape.layer_norm(x, ctx.p(self.gain), ctx.p(self.bias), 1e-5)
    }
}

/// Gated recurrent unit; gates ordered reset, update, candidate.
#[derive(Clone, Debug)]
pub struct Gru {
    pub input: Linear,
    pub recurrent: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new<R: Rng>(store: &mut Params, prefix: &str, input_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let input = Linear::new(store, &param_name(prefix, "x"), input_dim, 3 * hidden, true, rng)?;
        let recurrent = store.add_weight(param_name(prefix, "h"), hidden, 3 * hidden, rng)?;
        Ok(Self { input, recurrent, hidden })
    }

    /// One step from pre-projected input `xw` (`[1, 3h]`) and state `h` (`[1, h]`).
    pub fn step_projected(&self, ctx: &Ctx, xw: Var, h: Var) -> Result<Var> {
        let t = ctx.tape;
        let n = self.hidden;
        let hw = t.matmul(h, ctx.p(self.recurrent))?;
        let r = t.sigmoid(t.add(t.slice_cols(xw, 0, n)?, t.slice_cols(hw, 0, n)?)?)?;
        let z = t.sigmoid(t.add(t.slice_cols(xw, n, n)?, t.slice_cols(hw, n, n)?)?)?;
        let c = t.tanh(t.add(t.slice_cols(xw, 2 * n, n)?, t.mul(r, t.slice_cols(hw, 2 * n, n)?)?)?)?;
        // h' = c + z * (h - c)
        t.add(c, t.mul(z, t.sub(h, c)?)?)
    }

    pub fn step(&self, ctx: &Ctx, x: Var, h: Var) -> Result<Var> {
        let xw = self.input.forward(ctx, x)?;
        self.step_projected(ctx, xw, h)
    }

    pub fn zero_state(&self, ctx: &Ctx) -> Var {
        ctx.tape.constant(Array::zeros(&[1, self.hidden]))
    }

    /// Runs over all rows of `x` (`[T, in]`), forwards or backwards in time;
    /// output row `i` is the state after consuming input row `i`.
    pub fn run(&self, ctx: &Ctx, x: Var, reverse: bool) -> Result<Var> {
        let steps = ctx.tape.shape(x)[0];
        let xw = self.input.forward(ctx, x)?;
        let mut h = self.zero_state(ctx);
        let mut out = vec![h; steps];
        let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        for i in order {
            h = self.step_projected(ctx, ctx.tape.slice_rows(xw, i, 1)?, h)?;
            out[i] = h;
        }
        ctx.tape.concat_rows(&out)
    }
}

/// Sinusoidal position table `[len, dim]`.
pub fn positional_encoding(len: usize, dim: usize) -> Array<f64> {
    positional_rows(0, len, dim)
}

pub fn positional_rows(start: usize, len: usize, dim: usize) -> Array<f64> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in start..start + len {
        for i in 0..dim {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let a = pos as f64 * rate;
            data.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Array::new(vec![len, dim], data).expect("positional table shape")
}

/// `mask[i*len + j]` is open when `j <= i + right_context`.
pub fn lookahead_mask(len: usize, right_context: usize) -> Vec<bool> {
    (0..len * len).map(|k| k % len <= k / len + right_context).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
}

/// Pre-norm self-attention + feed-forward block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub cfg: BlockConfig,
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Keys and values seen so far by one block, for incremental evaluation.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    len: usize,
}

impl TransformerBlock {
    pub fn new<R: Rng>(store: &mut Params, prefix: &str, cfg: &BlockConfig, rng: &mut R) -> Result<Self> {
        if cfg.num_heads == 0 || !cfg.model_dim.is_multiple_of(cfg.num_heads) {
            return Err(Error::Config(format!("model_dim {} not divisible by {} heads", cfg.model_dim, cfg.num_heads)));
        }
        let d = cfg.model_dim;
        Ok(Self {
            cfg: cfg.clone(),
            norm1: LayerNorm::new(store, &param_name(prefix, "ln1"), d)?,
            qkv: Linear::new(store, &param_name(prefix, "qkv"), d, 3 * d, true, rng)?,
            proj: Linear::new(store, &param_name(prefix, "proj"), d, d, true, rng)?,
            norm2: LayerNorm::new(store, &param_name(prefix, "ln2"), d)?,
            ff1: Linear::new(store, &param_name(prefix, "ff1"), d, cfg.ffn_dim, true, rng)?,
            ff2: Linear::new(store, &param_name(prefix, "ff2"), cfg.ffn_dim, d, true, rng)?,
        })
    }

    fn feed_forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let t = ctx.tape;
        let f = self.norm2.forward(ctx, x)?;
        let f = t.relu(self.ff1.forward(ctx, f)?)?;
        t.add(x, self.ff2.forward(ctx, f)?)
    }

    pub fn forward(&self, ctx: &Ctx, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = ctx.tape;
        let d = self.cfg.model_dim;
        let a = self.norm1.forward(ctx, x)?;
        let qkv = self.qkv.forward(ctx, a)?;
        let (q, k, v) = (t.slice_cols(qkv, 0, d)?, t.slice_cols(qkv, d, d)?, t.slice_cols(qkv, 2 * d, d)?);
        let att = t.attention(q, k, v, self.cfg.num_heads, mask)?;
        let x = t.add(x, self.proj.forward(ctx, att)?)?;
        self.feed_forward(ctx, x)
    }

    /// Causal step for a single new row `x` (`[1, d]`), attending to the
    /// cached rows plus itself.
    pub fn step(&self, ctx: &Ctx, x: Var, cache: &mut KvCache) -> Result<Var> {
        let t = ctx.tape;
        let d = self.cfg.model_dim;
        let a = self.norm1.forward(ctx, x)?;
        let qkv = self.qkv.forward(ctx, a)?;
        {
            let v = t.value(qkv);
            cache.keys.extend_from_slice(&v.data()[d..2 * d]);
            cache.values.extend_from_slice(&v.data()[2 * d..]);
        }
        cache.len += 1;
        let q = t.slice_cols(qkv, 0, d)?;
        let k = t.constant(Array::new(vec![cache.len, d], cache.keys.clone())?);
        let v = t.constant(Array::new(vec![cache.len, d], cache.values.clone())?);
        let att = t.attention(q, k, v, self.cfg.num_heads, None)?;
        let x = t.add(x, self.proj.forward(ctx, att)?)?;
        self.feed_forward(ctx, x)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn lookahead_mask_shape() {
        let m = lookahead_mask(3, 0);
        assert_eq!(m, vec![true, false, false, true, true, false, true, true, true]);
        let m = lookahead_mask(3, 1);
        assert_eq!(m, vec![true, true, false, true, true, true, true, true, true]);
    }

    #[test]
    fn gru_run_matches_stepping() {
        let mut store = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gru = Gru::new(&mut store, "g", 3, 4, &mut rng).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let x = Array::new(vec![5, 3], (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let xv = tape.constant(x);
        let full = gru.run(&ctx, xv, false).unwrap();
        let mut h = gru.zero_state(&ctx);
        for i in 0..5 {
            h = gru.step(&ctx, tape.slice_rows(xv, i, 1).unwrap(), h).unwrap();
            let row = tape.value(full).row(i).to_vec();
            assert_eq!(tape.value(h).data(), &row[..]);
        }
    }

    #[test]
    fn linear_apply_matches_tape() {
        let mut store = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut store, "l", 3, 2, true, &mut rng).unwrap();
        store.get_mut(lin.b.unwrap()).data_mut().copy_from_slice(&[0.5, -1.0]);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let x = [0.2, -0.7, 1.5];
        let y = lin.forward(&ctx, tape.constant(Array::new(vec![1, 3], x.to_vec()).unwrap())).unwrap();
        let direct = lin.apply(&store, &x);
        for (a, b) in tape.value(y).data().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
