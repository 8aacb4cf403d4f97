//! Hybrid autoregressive transducer: label-history prediction network,
//! joint network with a separate blank head, lattice loss and the internal
//! language model obtained by removing the acoustic input.

pub mod lattice;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::models::layers::{Ctx, Linear};
use crate::tensor::{log_sigmoid, log_sum_exp, sigmoid, Array, ParamId, Scalar, Var};
use crate::Params;

/// Per-node blank and label scores of a `frames x (targets + 1)` lattice.
///
/// The blank probability of node `(t, u)` is `sigmoid(blank_logit)`; the
/// label distribution is `exp(label_logprobs[node])`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmissionLattice<T> {
    frames: usize,
    targets: usize,
    blank_logits: Vec<T>,
    label_logprobs: Array<T>,
}

impl<T: Scalar> EmissionLattice<T> {
    pub fn new(frames: usize, targets: usize, blank_logits: Vec<T>, label_logprobs: Array<T>) -> Result<Self> {
        let n = frames * (targets + 1);
        if blank_logits.len() != n || label_logprobs.rank() != 2 || label_logprobs.rows() != n || label_logprobs.cols() == 0 {
            return Err(Error::Dimension(format!(
                "lattice {frames}x{}: {} blank logits, labels {:?}",
                targets + 1,
                blank_logits.len(),
                label_logprobs.shape()
            )));
        }
        if !label_logprobs.is_finite() || blank_logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("lattice scores".into()));
        }
        for r in 0..n {
            let z = log_sum_exp(label_logprobs.row(r));
            if z.abs().as_f64() > 1e-9 {
                return Err(Error::Domain(format!("label distribution at node {r} sums to exp({z})")));
            }
        }
        Ok(Self { frames, targets, blank_logits, label_logprobs })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn targets(&self) -> usize {
        self.targets
    }

    pub fn num_labels(&self) -> usize {
        self.label_logprobs.cols()
    }

    fn node(&self, t: usize, u: usize) -> usize {
        t * (self.targets + 1) + u
    }

    pub fn blank_prob(&self, t: usize, u: usize) -> T {
        sigmoid(self.blank_logits[self.node(t, u)])
    }

    pub fn log_blank(&self, t: usize, u: usize) -> T {
        log_sigmoid(self.blank_logits[self.node(t, u)])
    }

    /// `log((1 - b) * p_k)` for label index `k`.
    pub fn log_label(&self, t: usize, u: usize, k: usize) -> T {
        let i = self.node(t, u);
        log_sigmoid(-self.blank_logits[i]) + self.label_logprobs.at(i, k)
    }
}

/// `-log P(y | lattice)` summed over all monotonic alignments; `labels` are
/// label-head indices (token id minus one).
pub fn hat_loss<T: Scalar>(lat: &EmissionLattice<T>, labels: &[usize]) -> Result<T> {
    if labels.len() != lat.targets {
        return Err(Error::Dimension(format!("{} labels for a lattice built for {}", labels.len(), lat.targets)));
    }
    if let Some(&k) = labels.iter().find(|&&k| k >= lat.num_labels()) {
        return Err(Error::Dimension(format!("label {k} >= {}", lat.num_labels())));
    }
    if lat.frames == 0 {
        return Err(Error::ZeroProbability(format!("no frames for {} targets", lat.targets)));
    }
    let u1 = lat.targets + 1;
    let n = lat.frames * u1;
    let log_blank: Vec<T> = (0..n).map(|i| log_sigmoid(lat.blank_logits[i])).collect();
    let log_emit: Vec<T> = (0..n)
        .map(|i| {
            let u = i % u1;
            if u < lat.targets {
                log_sigmoid(-lat.blank_logits[i]) + lat.label_logprobs.at(i, labels[u])
            } else {
                T::neg_infinity()
            }
        })
        .collect();
    let alpha = lattice::forward(&log_blank, &log_emit, lat.frames, lat.targets);
    let lp = alpha[n - 1] + log_blank[n - 1];
    if !lp.is_finite() {
        return Err(Error::ZeroProbability(format!("{} frames, {} targets", lat.frames, lat.targets)));
    }
    Ok(-lp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HatConfig {
    /// Width of encoder frames fed to the joint network.
    pub enc_dim: usize,
    pub embed_dim: usize,
    /// Number of previous labels the prediction network sees.
    pub context: usize,
    pub joint_dim: usize,
}

/// Label history: the last `context` emitted token ids, oldest first,
/// padded with the begin marker 0.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct PredictionState {
    history: Vec<u32>,
}

impl PredictionState {
    pub fn history(&self) -> &[u32] {
        &self.history
    }
}

/// Blank probability and label log-distribution at one lattice node.
#[derive(Clone, Debug, PartialEq)]
pub struct JointOutput {
    pub blank_logit: f64,
    pub label_logprobs: Vec<f64>,
}

impl JointOutput {
    pub fn blank_prob(&self) -> f64 {
        sigmoid(self.blank_logit)
    }
    pub fn log_blank(&self) -> f64 {
        log_sigmoid(self.blank_logit)
    }
    pub fn log_not_blank(&self) -> f64 {
        log_sigmoid(-self.blank_logit)
    }
}

#[derive(Clone, Debug)]
pub struct HatDecoder {
    pub cfg: HatConfig,
    vocab_size: usize,
    embed: ParamId,
    pred: Linear,
    enc_proj: Linear,
    out: Linear,
}

impl HatDecoder {
    pub fn new<R: Rng>(store: &mut Params, prefix: &str, vocab_size: usize, cfg: &HatConfig, rng: &mut R) -> Result<Self> {
        if cfg.context == 0 {
            return Err(Error::Config("prediction context must be >= 1".into()));
        }
        let embed = store.add_normal(format!("{prefix}.embed"), &[vocab_size, cfg.embed_dim], 0.3, rng)?;
        let pred = Linear::new(store, &format!("{prefix}.pred"), cfg.context * cfg.embed_dim, cfg.joint_dim, false, rng)?;
        let enc_proj = Linear::new(store, &format!("{prefix}.enc"), cfg.enc_dim, cfg.joint_dim, true, rng)?;
        let out = Linear::new(store, &format!("{prefix}.out"), cfg.joint_dim, vocab_size, true, rng)?;
        Ok(Self { cfg: cfg.clone(), vocab_size, embed, pred, enc_proj, out })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_labels(&self) -> usize {
        self.vocab_size - 1
    }

    /// Output layer parameters: column 0 is the blank head, the rest the label head.
    pub fn output_params(&self) -> (ParamId, Option<ParamId>) {
        (self.out.w, self.out.b)
    }

    pub fn initial_state(&self) -> PredictionState {
        PredictionState { history: vec![0; self.cfg.context] }
    }

    pub fn step_prediction(&self, state: &PredictionState, label: u32) -> Result<PredictionState> {
        if label == 0 {
            return Err(Error::Contract("the prediction network never consumes blank".into()));
        }
        if label as usize >= self.vocab_size {
            return Err(Error::Vocabulary { id: label, size: self.vocab_size });
        }
        let mut history = state.history[1..].to_vec();
        history.push(label);
        Ok(PredictionState { history })
    }

    fn states_for(&self, y: &TokenSequence) -> Result<Vec<PredictionState>> {
        let mut s = self.initial_state();
        let mut out = vec![s.clone()];
        for &id in y.ids() {
            s = self.step_prediction(&s, id)?;
            out.push(s.clone());
        }
        Ok(out)
    }

    /// Blank logits `[T*(U+1)]` and label log-probabilities `[T*(U+1), V-1]`
    /// over encoder frames `enc` (`[T, enc_dim]`), on the tape.
    pub fn lattice_vars(&self, ctx: &Ctx, enc: Var, y: &TokenSequence) -> Result<(Var, Var)> {
        let t = ctx.tape;
        let s = t.shape(enc);
        if s.len() != 2 || s[1] != self.cfg.enc_dim {
            return Err(Error::Dimension(format!("joint expects [T, {}], got {s:?}", self.cfg.enc_dim)));
        }
        let states = self.states_for(y)?;
        let ids: Vec<usize> = states.iter().flat_map(|st| st.history.iter().map(|&i| i as usize)).collect();
        let emb = t.gather(ctx.p(self.embed), &ids)?;
        let emb = t.reshape(emb, &[states.len(), self.cfg.context * self.cfg.embed_dim])?;
        let pred = self.pred.forward(ctx, emb)?;
        let ep = self.enc_proj.forward(ctx, enc)?;
        let h = t.tanh(t.outer_add(ep, pred)?)?;
        let o = self.out.forward(ctx, h)?;
        let n = s[0] * states.len();
        let blank = t.reshape(t.slice_cols(o, 0, 1)?, &[n])?;
        let labels = t.log_softmax(t.slice_cols(o, 1, self.vocab_size - 1)?)?;
        Ok((blank, labels))
    }

    /// Transducer negative log-likelihood of `y` given encoder frames, on the tape.
    pub fn loss(&self, ctx: &Ctx, enc: Var, y: &TokenSequence) -> Result<Var> {
        let frames = ctx.tape.shape(enc)[0];
        let (blank, labels) = self.lattice_vars(ctx, enc, y)?;
        ctx.tape.hat_loss(blank, labels, frames, &y.labels())
    }

    /// Prediction-network output for a label history.
    pub fn prediction(&self, params: &Params, state: &PredictionState) -> Vec<f64> {
        let table = params.get(self.embed);
        let mut x = Vec::with_capacity(self.cfg.context * self.cfg.embed_dim);
        for &id in &state.history {
            x.extend_from_slice(table.row(id as usize));
        }
        self.pred.apply(params, &x)
    }

    /// Acoustic projection of every encoder frame, `[T, joint_dim]`.
    pub fn project_encoder(&self, params: &Params, enc: &Array<f64>) -> Result<Array<f64>> {
        if enc.rank() != 2 || enc.cols() != self.cfg.enc_dim {
            return Err(Error::Dimension(format!("joint expects [T, {}], got {:?}", self.cfg.enc_dim, enc.shape())));
        }
        let mut data = Vec::with_capacity(enc.rows() * self.cfg.joint_dim);
        for r in 0..enc.rows() {
            data.extend(self.enc_proj.apply(params, enc.row(r)));
        }
        Array::new(vec![enc.rows(), self.cfg.joint_dim], data)
    }

    /// Projection of the all-zero acoustic vector (the projection bias).
    pub fn silent_projection(&self, params: &Params) -> Vec<f64> {
        self.enc_proj.apply(params, &vec![0.0; self.cfg.enc_dim])
    }

    /// Joint network from an acoustic projection row and a prediction vector.
    pub fn joint_projected(&self, params: &Params, acoustic: &[f64], prediction: &[f64]) -> JointOutput {
        let h: Vec<f64> = acoustic.iter().zip(prediction).map(|(a, b)| (a + b).tanh()).collect();
        let o = self.out.apply(params, &h);
        let labels = &o[1..];
        let z = log_sum_exp(labels);
        JointOutput { blank_logit: o[0], label_logprobs: labels.iter().map(|v| v - z).collect() }
    }

    pub fn joint(&self, params: &Params, enc_frame: &[f64], state: &PredictionState) -> Result<JointOutput> {
        if enc_frame.len() != self.cfg.enc_dim {
            return Err(Error::Dimension(format!("encoder frame of width {} != {}", enc_frame.len(), self.cfg.enc_dim)));
        }
        let a = self.enc_proj.apply(params, enc_frame);
        Ok(self.joint_projected(params, &a, &self.prediction(params, state)))
    }

    /// Emission lattice of `y` over encoder frames.
    pub fn lattice(&self, params: &Params, enc: &Array<f64>, y: &TokenSequence) -> Result<EmissionLattice<f64>> {
        let ep = self.project_encoder(params, enc)?;
        let preds: Vec<Vec<f64>> = self.states_for(y)?.iter().map(|s| self.prediction(params, s)).collect();
        let mut blank = Vec::new();
        let mut labels = Vec::new();
        for t in 0..enc.rows() {
            for p in &preds {
                let j = self.joint_projected(params, ep.row(t), p);
                blank.push(j.blank_logit);
                labels.extend(j.label_logprobs);
            }
        }
        let n = blank.len();
        EmissionLattice::new(enc.rows(), y.len(), blank, Array::new(vec![n, self.num_labels()], labels)?)
    }

    /// Label log-distribution of the internal LM after `state`.
    pub fn ilm_next(&self, params: &Params, silent: &[f64], state: &PredictionState) -> Vec<f64> {
        self.joint_projected(params, silent, &self.prediction(params, state)).label_logprobs
    }

    /// Internal-LM log-probability of `y` and its per-token increments. The
    /// acoustic input is the zero vector and the blank head is ignored, so the
    /// value depends on the label history only.
    pub fn ilm_logprob(&self, params: &Params, y: &TokenSequence) -> Result<(f64, Vec<f64>)> {
        let silent = self.silent_projection(params);
        let states = self.states_for(y)?;
        let inc: Vec<f64> =
            y.labels().iter().zip(&states).map(|(&k, s)| self.ilm_next(params, &silent, s)[k]).collect();
        Ok((inc.iter().fold(0.0, |a, v| a + v), inc))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn lattice_from(frames: usize, targets: usize, blank: Vec<f64>, probs: Vec<Vec<f64>>) -> EmissionLattice<f64> {
        let rows: Vec<Vec<f64>> = probs.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
        EmissionLattice::new(frames, targets, blank, Array::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn single_path_lattice() {
        // T=1, U=1: label at (0,0) then blank at (0,1)
        let lat = lattice_from(1, 1, vec![0.3, -0.8], vec![vec![0.25, 0.75], vec![0.5, 0.5]]);
        let expected = -((1.0 - sigmoid(0.3f64)) * 0.75 * sigmoid(-0.8)).ln();
        assert!((hat_loss(&lat, &[1]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn all_blank_lattice() {
        let lat = lattice_from(2, 0, vec![0.4, 1.1], vec![vec![1.0], vec![1.0]]);
        let expected = -(sigmoid(0.4f64) * sigmoid(1.1)).ln();
        assert!((hat_loss(&lat, &[]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn unnormalised_labels_rejected() {
        let err = EmissionLattice::new(1, 0, vec![0.0], Array::from_rows(&[vec![0.0, 0.0]]).unwrap());
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    fn decoder() -> (Params, HatDecoder) {
        let mut store = Params::new();
        let cfg = HatConfig { enc_dim: 4, embed_dim: 3, context: 2, joint_dim: 5 };
        let dec = HatDecoder::new(&mut store, "hat", 6, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        (store, dec)
    }

    #[test]
    fn zero_logits_give_half_blank_and_uniform_labels() {
        let (mut store, dec) = decoder();
        let (w, b) = dec.output_params();
        store.get_mut(w).data_mut().fill(0.0);
        store.get_mut(b.unwrap()).data_mut().fill(0.0);
        let j = dec.joint(&store, &[0.3, -1.0, 2.0, 0.1], &dec.initial_state()).unwrap();
        assert_eq!(j.blank_prob(), 0.5);
        for &lp in &j.label_logprobs {
            assert!((lp + 5f64.ln()).abs() < 1e-15);
        }
        let total = j.blank_prob() + (1.0 - j.blank_prob()) * j.label_logprobs.iter().map(|v| v.exp()).sum::<f64>();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prediction_rejects_blank_and_is_order_sensitive() {
        let (store, dec) = decoder();
        let s0 = dec.initial_state();
        assert!(matches!(dec.step_prediction(&s0, 0), Err(Error::Contract(_))));
        let ab = dec.step_prediction(&dec.step_prediction(&s0, 1).unwrap(), 2).unwrap();
        let ba = dec.step_prediction(&dec.step_prediction(&s0, 2).unwrap(), 1).unwrap();
        assert_eq!(ab, dec.step_prediction(&dec.step_prediction(&s0, 1).unwrap(), 2).unwrap());
        assert_ne!(dec.prediction(&store, &ab), dec.prediction(&store, &ba));
    }

    #[test]
    fn tape_lattice_matches_array_lattice() {
        let (store, dec) = decoder();
        let enc = Array::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let y = TokenSequence(vec![2, 5]);
        let tape = crate::tensor::Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let loss = dec.loss(&ctx, tape.constant(enc.clone()), &y).unwrap();
        let lat = dec.lattice(&store, &enc, &y).unwrap();
        let direct = hat_loss(&lat, &y.labels()).unwrap();
        assert!((tape.scalar(loss) - direct).abs() < 1e-12);
    }

    #[test]
    fn ilm_increments_sum_to_total() {
        let (store, dec) = decoder();
        let (total, inc) = dec.ilm_logprob(&store, &TokenSequence(vec![1, 3, 3, 5])).unwrap();
        assert_eq!(inc.len(), 4);
        assert!((inc.iter().sum::<f64>() - total).abs() < 1e-10);
    }
}
