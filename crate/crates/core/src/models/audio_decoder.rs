//! Feature-frame decoder with an optional dropout pre-net, single-head
//! location-sensitive attention over an encoded memory, a stop head and a
//! residual full-context post-net.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{positional_encoding, Ctx, Gru, Linear};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Array, Var};
use crate::Params;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioDecoderConfig {
    /// Width of the memory rows attended over.
    pub memory_dim: usize,
    pub feature_dim: usize,
    pub prenet_dims: [usize; 2],
    pub prenet_dropout: f64,
    /// Feed the previous frame through the pre-net into the recurrent cell.
    /// Off, no pre-net is built and timing comes from the attention and
    /// recurrent state only.
    #[serde(default)]
    pub feed_previous_frame: bool,
    pub recurrent_dim: usize,
    pub attention_dim: usize,
    pub postnet_layers: usize,
    pub postnet_dim: usize,
    pub postnet_width: usize,
    pub max_decode_frames: usize,
    pub stop_threshold: f64,
}

#[derive(Clone, Debug)]
pub struct AudioDecoder {
    pub cfg: AudioDecoderConfig,
    /// Present only when the previous frame is fed back.
    prenet: Option<[Linear; 2]>,
    rnn: Gru,
    query: Linear,
    key: Linear,
    /// Location features (previous weight, its left neighbour, cumulative
    /// weight) to attention space.
    location: Linear,
    energy: Linear,
    out: Linear,
    postnet: Vec<Linear>,
}

struct Alignment {
    /// Previous attention weights `[N, 1]`.
    prev: Var,
    cumulative: Var,
    /// Constant `[N, N]` matrix moving each weight one position right.
    shift: Var,
}

/// Teacher-forced decoder outputs.
pub struct DecodedFrames {
    /// Post-net refined frames `[m, feature_dim]`.
    pub frames: Var,
    /// Frames before the post-net.
    pub coarse: Var,
    /// One stop logit per frame, `[m]`.
    pub stop_logits: Var,
}

impl AudioDecoder {
    pub fn new<R: Rng>(store: &mut Params, prefix: &str, cfg: &AudioDecoderConfig, rng: &mut R) -> Result<Self> {
        if cfg.postnet_layers == 0 || cfg.postnet_width.is_multiple_of(2) {
            return Err(Error::Config("post-net needs >= 1 layer and odd width".into()));
        }
        if cfg.max_decode_frames == 0 {
            return Err(Error::Config("max_decode_frames must be positive".into()));
        }
        let [p0, p1] = cfg.prenet_dims;
        let prenet = if cfg.feed_previous_frame {
            Some([
                Linear::new(store, &format!("{prefix}.pre0"), cfg.feature_dim, p0, true, rng)?,
                Linear::new(store, &format!("{prefix}.pre1"), p0, p1, true, rng)?,
            ])
        } else {
            None
        };
        let rnn_in = if cfg.feed_previous_frame { p1 } else { 0 } + cfg.memory_dim;
        let rnn = Gru::new(store, &format!("{prefix}.rnn"), rnn_in, cfg.recurrent_dim, rng)?;
        let query = Linear::new(store, &format!("{prefix}.query"), cfg.recurrent_dim, cfg.attention_dim, false, rng)?;
        let key = Linear::new(store, &format!("{prefix}.key"), cfg.memory_dim, cfg.attention_dim, true, rng)?;
        let location = Linear::new(store, &format!("{prefix}.location"), 3, cfg.attention_dim, false, rng)?;
        let energy = Linear::new(store, &format!("{prefix}.energy"), cfg.attention_dim, 1, false, rng)?;
        let out = Linear::new(store, &format!("{prefix}.out"), cfg.recurrent_dim + cfg.memory_dim, cfg.feature_dim + 1, true, rng)?;
        let mut postnet = Vec::new();
        for i in 0..cfg.postnet_layers {
            let fan_in = if i == 0 { cfg.feature_dim } else { cfg.postnet_dim };
            let fan_out = if i + 1 == cfg.postnet_layers { cfg.feature_dim } else { cfg.postnet_dim };
            postnet.push(Linear::new(store, &format!("{prefix}.post{i}"), fan_in * cfg.postnet_width, fan_out, true, rng)?);
        }
        Ok(Self { cfg: cfg.clone(), prenet, rnn, query, key, location, energy, out, postnet })
    }

    fn prenet(&self, ctx: &mut Ctx, layers: &[Linear; 2], x: Var) -> Result<Var> {
        let mut h = x;
        for layer in layers {
            h = ctx.tape.relu(layer.forward(ctx, h)?)?;
            h = ctx.dropout(h, self.cfg.prenet_dropout)?;
        }
        Ok(h)
    }

    fn keys(&self, ctx: &Ctx, memory: Var) -> Result<Var> {
        let s = ctx.tape.shape(memory);
        if s.len() != 2 || s[1] != self.cfg.memory_dim {
            return Err(Error::Dimension(format!("decoder memory must be [N, {}], got {s:?}", self.cfg.memory_dim)));
        }
        if s[0] == 0 {
            return Err(Error::Input("empty decoder memory".into()));
        }
        let k = self.key.forward(ctx, memory)?;
        ctx.tape.add(k, ctx.tape.constant(positional_encoding(s[0], self.cfg.attention_dim)))
    }

    /// Attention state before the first step: all weight on the first position.
    fn initial_alignment(&self, ctx: &Ctx, n: usize) -> Alignment {
        let mut first = vec![0.0; n];
        first[0] = 1.0;
        let mut shift = vec![0.0; n * n];
        for j in 1..n {
            shift[j * n + j - 1] = 1.0;
        }
        let t = ctx.tape;
        let prev = t.constant(Array::new(vec![n, 1], first).expect("n x 1"));
        Alignment { prev, cumulative: prev, shift: t.constant(Array::new(vec![n, n], shift).expect("n x n")) }
    }

    /// One decoder step from pre-net output `p`; returns `(state, context, output row)`.
    fn step(&self, ctx: &Ctx, p: Option<Var>, state: Var, context: Var, keys: Var, memory: Var, align: &mut Alignment) -> Result<(Var, Var, Var)> {
        let t = ctx.tape;
        let n = t.shape(memory)[0];
        let input = match p {
            Some(p) => t.concat_cols(&[p, context])?,
            None => context,
        };
        let h = self.rnn.step(ctx, input, state)?;
        let q = self.query.forward(ctx, h)?;
        let left = t.matmul(align.shift, align.prev)?;
        let loc = self.location.forward(ctx, t.concat_cols(&[align.prev, left, align.cumulative])?)?;
        let e = self.energy.forward(ctx, t.tanh(t.add(t.add(keys, loc)?, q)?)?)?;
        let w = t.softmax(t.reshape(e, &[1, n])?)?;
        let c = t.matmul(w, memory)?;
        let w_col = t.reshape(w, &[n, 1])?;
        align.prev = w_col;
        align.cumulative = t.add(align.cumulative, w_col)?;
        let o = self.out.forward(ctx, t.concat_cols(&[h, c])?)?;
        Ok((h, c, o))
    }

    fn postnet(&self, ctx: &Ctx, coarse: Var) -> Result<Var> {
        let t = ctx.tape;
        let mut h = coarse;
        for (i, layer) in self.postnet.iter().enumerate() {
            h = layer.forward(ctx, t.im2col(h, self.cfg.postnet_width)?)?;
            if i + 1 < self.postnet.len() {
                h = t.tanh(h)?;
            }
        }
        t.add(coarse, h)
    }

    /// Predicts every frame of `target`, feeding its predecessor (a zero
    /// frame before the first) when `feed_previous_frame` is set. Pre-net
    /// dropout is live whenever `ctx` is training.
    pub fn teacher_forced(&self, ctx: &mut Ctx, memory: Var, target: &Array<f64>) -> Result<DecodedFrames> {
        let (m, f) = (target.rows(), self.cfg.feature_dim);
        if target.rank() != 2 || target.cols() != f || m == 0 {
            return Err(Error::Dimension(format!("target frames must be [m>0, {f}], got {:?}", target.shape())));
        }
        let keys = self.keys(ctx, memory)?;
        let pre = match &self.prenet {
            Some(layers) => {
                let mut prev = vec![0.0; f];
                prev.extend_from_slice(&target.data()[..(m - 1) * f]);
                let prev = ctx.tape.constant(Array::new(vec![m, f], prev)?);
                Some(self.prenet(ctx, layers, prev)?)
            }
            None => None,
        };
        let t = ctx.tape;
        let mut state = self.rnn.zero_state(ctx);
        let mut context = t.constant(Array::zeros(&[1, self.cfg.memory_dim]));
        let mut outs = Vec::with_capacity(m);
        let mut align = self.initial_alignment(ctx, t.shape(memory)[0]);
        for i in 0..m {
            let p = pre.map(|p| t.slice_rows(p, i, 1)).transpose()?;
            let (h, c, o) = self.step(ctx, p, state, context, keys, memory, &mut align)?;
            state = h;
            context = c;
            outs.push(o);
        }
        let o = t.concat_rows(&outs)?;
        let coarse = t.slice_cols(o, 0, f)?;
        let stop = t.reshape(t.slice_cols(o, f, 1)?, &[m])?;
        let frames = self.postnet(ctx, coarse)?;
        Ok(DecodedFrames { frames, coarse, stop_logits: stop })
    }

    /// Greedy generation until the stop probability exceeds the threshold or
    /// `max_decode_frames` frames exist. Returns post-net frames `[m, feature_dim]`.
    pub fn infer(&self, ctx: &Ctx, memory: Var) -> Result<Array<f64>> {
        let keys = self.keys(ctx, memory)?;
        let f = self.cfg.feature_dim;
        let t = ctx.tape;
        let mut state = self.rnn.zero_state(ctx);
        let mut context = t.constant(Array::zeros(&[1, self.cfg.memory_dim]));
        let mut prev = vec![0.0; f];
        let mut frames = Vec::new();
        let mut align = self.initial_alignment(ctx, t.shape(memory)[0]);
        for _ in 0..self.cfg.max_decode_frames {
            let p = match &self.prenet {
                Some(layers) => Some(prenet_eval(ctx, layers, t.constant(Array::new(vec![1, f], prev.clone())?))?),
                None => None,
            };
            let (h, c, o) = self.step(ctx, p, state, context, keys, memory, &mut align)?;
            state = h;
            context = c;
            let (frame, stop) = {
                let v = t.value(o);
                (v.data()[..f].to_vec(), v.data()[f])
            };
            prev.clone_from(&frame);
            frames.push(frame);
            if sigmoid(stop) > self.cfg.stop_threshold {
                break;
            }
        }
        let coarse = t.constant(Array::from_rows(&frames)?);
        let refined = self.postnet(ctx, coarse)?;
        let out = t.value(refined).clone();
        Ok(out)
    }

}

fn prenet_eval(ctx: &Ctx, layers: &[Linear; 2], x: Var) -> Result<Var> {
    let mut h = x;
    for layer in layers {
        h = ctx.tape.relu(layer.forward(ctx, h)?)?;
    }
    Ok(h)
}
