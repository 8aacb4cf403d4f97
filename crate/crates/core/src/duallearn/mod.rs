//! Dual ASR/TTS training: the ten losses, batch-thirds composition with
//! online pseudo-labelling, and the two-phase optimisation loop.

mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use train::{
    
    batch_schedule, elm_perplexity_nll, pretrain_then_dual, run_phase, sample_tribatch, train_elm, ElmTrainConfig,
    LossLog, LossRow, Phase, TrainConfig, TrainReport, TrainState,
};

use crate::corpus::{mix_seed, rng_for, TokenSequence};
use crate::decode::{beam_search, FusionConfig};
use crate::error::{Error, Result};
use crate::frontend::spec_augment;
use crate::models::{encode_cascade, Ctx, DuplexModel};
use crate::tensor::{Adam, Array, ParamGrads, Tape, Var};
use crate::Features;

/// The ten training losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossKind {
    AsrStreaming,
    AsrDelayed,
    Tts,
    TextRecon,
    AudioRecon,
    UAsrStreaming,
    UAsrDelayed,
    UTts,
    UTextRecon,
    UAudioRecon,
}

/// Which third of a batch a loss reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pool {
    Paired,
    AudioOnly,
    TextOnly,
}

impl LossKind {
    pub const ALL: [LossKind; 10] = [
        LossKind::AsrStreaming,
        LossKind::AsrDelayed,
        LossKind::Tts,
        LossKind::TextRecon,
        LossKind::AudioRecon,
        LossKind::UAsrStreaming,
        LossKind::UAsrDelayed,
        LossKind::UTts,
        LossKind::UTextRecon,
        LossKind::UAudioRecon,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::AsrStreaming => "asr_streaming",
            LossKind::AsrDelayed => "asr_delayed",
            LossKind::Tts => "tts",
            LossKind::TextRecon => "text_recon",
            LossKind::AudioRecon => "audio_recon",
            LossKind::UAsrStreaming => "u_asr_streaming",
            LossKind::UAsrDelayed => "u_asr_delayed",
            LossKind::UTts => "u_tts",
            LossKind::UTextRecon => "u_text_recon",
            LossKind::UAudioRecon => "u_audio_recon",
        }
    }

    pub fn pool(self) -> Pool {
        use LossKind::*;
        match self {
            AsrStreaming | AsrDelayed | Tts | TextRecon | AudioRecon => Pool::Paired,
            UTts | UAudioRecon => Pool::AudioOnly,
            UAsrStreaming | UAsrDelayed | UTextRecon => Pool::TextOnly,
        }
    }

    pub fn is_reconstruction(self) -> bool {
        use LossKind::*;
        matches!(self, TextRecon | AudioRecon | UTextRecon | UAudioRecon)
    }

    /// The three losses trained on pseudo-labels.
    pub fn is_unsupervised_dual(self) -> bool {
        use LossKind::*;
        matches!(self, UAsrStreaming | UAsrDelayed | UTts)
    }

    /// Fixed factor in the aggregate: the two encoder paths of each ASR
    /// loss are averaged.
    pub fn averaging(self) -> f64 {
        use LossKind::*;
        match self {
            AsrStreaming | AsrDelayed | UAsrStreaming | UAsrDelayed => 0.5,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    All,
    Dl,
    Recon,
    Supervised,
}

impl AblationMode {
    pub fn includes(self, kind: LossKind) -> bool {
        match self {
            AblationMode::All => true,
            AblationMode::Dl => !kind.is_reconstruction(),
            AblationMode::Recon => !kind.is_unsupervised_dual(),
            AblationMode::Supervised => matches!(kind, LossKind::AsrStreaming | LossKind::AsrDelayed | LossKind::Tts),
        }
    }

    pub fn losses(self) -> Vec<LossKind> {
        LossKind::ALL.into_iter().filter(|&k| self.includes(k)).collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::All => "all",
            AblationMode::Dl => "dl",
            AblationMode::Recon => "recon",
            AblationMode::Supervised => "supervised",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(AblationMode::All),
            "dl" => Ok(AblationMode::Dl),
            "recon" => Ok(AblationMode::Recon),
            "supervised" => Ok(AblationMode::Supervised),
            other => Err(Error::Config(format!("unknown ablation mode '{other}'"))),
        }
    }
}

/// Per-loss multipliers on top of the fixed ½ ASR averaging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights([f64; 10]);

impl Default for TaskWeights {
    fn default() -> Self {
        Self([1.0; 10])
    }
}

impl TaskWeights {
    pub fn get(&self, kind: LossKind) -> f64 {
        self.0[kind.index()]
    }

    pub fn set(&mut self, kind: LossKind, w: f64) {
        self.0[kind.index()] = w;
    }

    pub fn only(kind: LossKind) -> Self {
        let mut w = Self([0.0; 10]);
        w.set(kind, 1.0);
        w
    }

    /// Overall coefficient of a loss's batch mean in the step total.
    pub fn coefficient(&self, kind: LossKind) -> f64 {
        kind.averaging() * self.get(kind)
    }
}

/// Per-loss batch means of one step; `None` where a loss was not computed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Components([Option<f64>; 10]);

impl Components {
    pub fn get(&self, kind: LossKind) -> Option<f64> {
        self.0[kind.index()]
    }

    pub fn set(&mut self, kind: LossKind, v: f64) {
        self.0[kind.index()] = Some(v);
    }

    pub fn computed(&self) -> Vec<LossKind> {
        LossKind::ALL.into_iter().filter(|k| self.get(*k).is_some()).collect()
    }
}

/// One optimisation batch split into thirds.
#[derive(Clone, Debug)]
pub struct TriBatch {
    pub paired: Vec<(Features, TokenSequence)>,
    pub audio_only: Vec<Features>,
    pub text_only: Vec<TokenSequence>,
    /// Record ids, for diagnostics.
    pub ids: Vec<String>,
}

impl TriBatch {
    pub fn new(paired: Vec<(Features, TokenSequence)>, audio_only: Vec<Features>, text_only: Vec<TokenSequence>) -> Result<Self> {
        let b = Self { paired, audio_only, text_only, ids: Vec::new() };
        b.check_thirds()?;
        Ok(b)
    }

    pub fn check_thirds(&self) -> Result<()> {
        let n = self.paired.len();
        if self.audio_only.len() != n || self.text_only.len() != n {
            return Err(Error::Contract(format!(
                "batch thirds differ: {} paired, {} audio-only, {} text-only",
                n,
                self.audio_only.len(),
                self.text_only.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.paired.len() + self.audio_only.len() + self.text_only.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// Loss building blocks. Each works on one example and records on `ctx.tape`.

/// Mean squared error between `pred` and a constant target of the same shape.
pub fn mse(ctx: &Ctx, pred: Var, target: &Array<f64>) -> Result<Var> {
    let t = ctx.tape;
    if t.shape(pred) != target.shape() {
        return Err(Error::Dimension(format!("mse: prediction {:?} vs target {:?}", t.shape(pred), target.shape())));
    }
    let d = t.sub(pred, t.constant(target.clone()))?;
    t.mean(t.square(d)?)
}

/// Mean binary cross-entropy of stop logits against "stop only on the last frame".
pub fn stop_loss(ctx: &Ctx, logits: Var) -> Result<Var> {
    let t = ctx.tape;
    let m = t.shape(logits)[0];
    let mut sign = vec![-1.0; m];
    sign[m - 1] = 1.0;
    let signed = t.mul(logits, t.constant(Array::vector(sign)))?;
    t.neg(t.mean(t.log_sigmoid(signed)?)?)
}

/// Teacher-forced synthesis loss: frame MSE and the stop term.
pub struct TtsLoss {
    pub mse: Var,
    pub stop: Var,
    pub total: Var,
}

fn tts_from_memory(ctx: &mut Ctx, model: &DuplexModel, memory: Var, x: &Array<f64>) -> Result<TtsLoss> {
    let out = model.dec_a.teacher_forced(ctx, memory, x)?;
    let m = mse(ctx, out.frames, x)?;
    let s = stop_loss(ctx, out.stop_logits)?;
    Ok(TtsLoss { mse: m, stop: s, total: ctx.tape.add(m, s)? })
}

fn text_recon_from_memory(ctx: &Ctx, model: &DuplexModel, memory: Var, y: &TokenSequence) -> Result<Var> {
    let audio_like = model.bridge.text_to_audio(ctx, memory)?;
    model.hat.loss(ctx, audio_like, y)
}

fn audio_recon_from_delayed(ctx: &mut Ctx, model: &DuplexModel, hd: Var, x: &Array<f64>) -> Result<Var> {
    let text_like = model.bridge.audio_to_text(ctx, hd)?;
    let out = model.dec_a.teacher_forced(ctx, text_like, x)?;
    mse(ctx, out.frames, x)
}

/// Transducer losses of the streaming and the delayed path for stacked frames.
pub fn loss_supervised_asr(ctx: &Ctx, model: &DuplexModel, stacked: &Array<f64>, y: &TokenSequence) -> Result<(Var, Var)> {
    let (hs, hd) = encode_cascade(ctx, &model.enc_s, &model.enc_d, stacked)?;
    Ok((model.hat.loss(ctx, hs, y)?, model.hat.loss(ctx, hd, y)?))
}

/// Synthesis loss of `y` against raw frames `x`.
pub fn loss_supervised_tts(ctx: &mut Ctx, model: &DuplexModel, x: &Array<f64>, y: &TokenSequence) -> Result<TtsLoss> {
    let memory = model.enc_t.forward(ctx, y)?;
    tts_from_memory(ctx, model, memory, x)
}

/// ASR losses on pseudo-audio; the frames are constants on the tape.
pub fn loss_unsup_asr(ctx: &Ctx, model: &DuplexModel, x_hat_stacked: &Array<f64>, y: &TokenSequence) -> Result<(Var, Var)> {
    loss_supervised_asr(ctx, model, x_hat_stacked, y)
}

/// Synthesis loss from a pseudo-transcript.
pub fn loss_unsup_tts(ctx: &mut Ctx, model: &DuplexModel, x: &Array<f64>, y_hat: &TokenSequence) -> Result<TtsLoss> {
    loss_supervised_tts(ctx, model, x, y_hat)
}

/// Text -> text-to-audio bridge -> transducer, scored against `y` (one
/// lattice frame per token).
pub fn loss_text_recon(ctx: &Ctx, model: &DuplexModel, y: &TokenSequence) -> Result<Var> {
    let memory = model.enc_t.forward(ctx, y)?;
    text_recon_from_memory(ctx, model, memory, y)
}

/// Audio encoders -> audio-to-text bridge -> teacher-forced audio decoder,
/// scored by MSE against the raw frames `x`.
pub fn loss_audio_recon(ctx: &mut Ctx, model: &DuplexModel, stacked: &Array<f64>, x: &Array<f64>) -> Result<Var> {
    let (_, hd) = encode_cascade(ctx, &model.enc_s, &model.enc_d, stacked)?;
    audio_recon_from_delayed(ctx, model, hd, x)
}

// ---------------------------------------------------------------------------
// Pseudo-labels. Both run in inference mode and return plain arrays, so no
// gradient can reach the producing model.

/// Pseudo-audio for an unpaired transcript: TTS inference.
pub fn pseudo_label_text(model: &DuplexModel, y: &TokenSequence) -> Result<Features> {
    let frames = model.synthesize(y)?;
    Features::new(frames, model.cfg.frontend.frame_period_ms)
}

/// Pseudo-transcript for unpaired audio: top hypothesis of the delayed path,
/// fusion off. Empty when the audio is too short to stack.
pub fn pseudo_label_audio(model: &DuplexModel, x: &Features, beam_size: usize) -> Result<TokenSequence> {
    let stacked = model.asr_input(x)?;
    if stacked.rows() == 0 {
        return Ok(TokenSequence::default());
    }
    let enc = model.encode_delayed(&stacked)?;
    let hyps = beam_search(&model.hat, &model.params, &enc, &FusionConfig::no_lm(beam_size), None)?;
    Ok(hyps.into_iter().next().map(|h| h.tokens).unwrap_or_default())
}

// ---------------------------------------------------------------------------
// Step composition.

/// How a step draws its randomness and produces pseudo-labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSettings {
    pub seed: u64,
    pub step: u64,
    /// SpecAugment and dropout on; off gives a deterministic forward pass.
    pub stochastic: bool,
    pub pseudo_label_beam: usize,
}

impl StepSettings {
    pub fn eval(seed: u64) -> Self {
        Self { seed, step: 0, stochastic: false, pseudo_label_beam: 1 }
    }
}

/// Examples left out of a step, by reason.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts {
    /// Paired audio too short to stack.
    pub short_paired: usize,
    /// Unpaired audio too short to stack.
    pub short_audio: usize,
    /// Empty pseudo-transcripts.
    pub empty_transcript: usize,
    /// Pseudo-audio too short to stack.
    pub short_synthesis: usize,
}

impl SkipCounts {
    pub fn add(&mut self, o: &SkipCounts) {
        self.short_paired += o.short_paired;
        self.short_audio += o.short_audio;
        self.empty_transcript += o.empty_transcript;
        self.short_synthesis += o.short_synthesis;
    }

    pub fn total(&self) -> usize {
        self.short_paired + self.short_audio + self.empty_transcript + self.short_synthesis
    }
}

pub struct StepOutcome {
    pub total: f64,
    pub components: Components,
    pub grads: ParamGrads<f64>,
    pub skipped: SkipCounts,
}

const STREAM_STEP: u64 = 0x7374_6570;

fn example_rng(settings: &StepSettings, pool: Pool, index: usize) -> ChaCha8Rng {
    rng_for(mix_seed(settings.seed, settings.step), STREAM_STEP + pool as u64, index as u64)
}

fn asr_frames(model: &DuplexModel, x: &Features, stochastic: bool, rng: &mut impl Rng) -> Result<Array<f64>> {
    if stochastic {
        model.asr_input(&spec_augment(x, &model.cfg.frontend.spec_augment, rng))
    } else {
        model.asr_input(x)
    }
}

fn make_ctx<'a>(tape: &'a Tape<f64>, model: &'a DuplexModel, stochastic: bool, rng: ChaCha8Rng) -> Ctx<'a> {
    if stochastic {
        Ctx::train(tape, &model.params, rng)
    } else {
        Ctx::eval(tape, &model.params)
    }
}

struct Accumulator {
    sums: [f64; 10],
    counts: [usize; 10],
    grads: ParamGrads<f64>,
}

impl Accumulator {
    /// Backpropagates `Σ coef_k / n_k · loss_k` for one example's terms.
    fn example(&mut self, tape: &Tape<f64>, model: &DuplexModel, terms: &[(LossKind, Var)], coef: &[f64; 10], n: &[usize; 10]) -> Result<()> {
        if terms.is_empty() {
            return Ok(());
        }
        let mut total: Option<Var> = None;
        for &(k, v) in terms {
            self.sums[k.index()] += tape.scalar(v);
            self.counts[k.index()] += 1;
            let scaled = tape.scale(v, coef[k.index()] / n[k.index()] as f64)?;
            total = Some(match total {
                Some(t) => tape.add(t, scaled)?,
                None => scaled,
            });
        }
        let total = total.expect("non-empty terms");
        if !tape.scalar(total).is_finite() {
            return Err(Error::NonFinite("example loss".into()));
        }
        let g = tape.backward(total)?;
        self.grads.merge(&g.param_grads(&model.params));
        Ok(())
    }
}

/// Pseudo-labels for a batch, produced by `labeler` (the current model or a
/// snapshot of it).
pub struct PseudoLabels {
    pub transcripts: Vec<Option<TokenSequence>>,
    pub audio: Vec<Option<Features>>,
}

pub fn make_pseudo_labels(labeler: &DuplexModel, batch: &TriBatch, mode: AblationMode, weights: &TaskWeights, beam: usize) -> Result<PseudoLabels> {
    let active = |k: LossKind| mode.includes(k) && weights.get(k) != 0.0;
    let need_y = active(LossKind::UTts);
    let need_x = active(LossKind::UAsrStreaming) || active(LossKind::UAsrDelayed);
    let transcripts = batch
        .audio_only
        .iter()
        .map(|x| if need_y { pseudo_label_audio(labeler, x, beam).map(Some) } else { Ok(None) })
        .collect::<Result<_>>()?;
    let audio = batch
        .text_only
        .iter()
        .map(|y| if need_x { pseudo_label_text(labeler, y).map(Some) } else { Ok(None) })
        .collect::<Result<_>>()?;
    Ok(PseudoLabels { transcripts, audio })
}

/// Loss and gradient of one batch without touching the parameters.
///
/// Every loss is averaged over the examples of its third that could produce
/// it, multiplied by its weight (and the ½ of the ASR pair), and summed.
pub fn compute_step(
    model: &DuplexModel,
    batch: &TriBatch,
    pseudo: &PseudoLabels,
    mode: AblationMode,
    weights: &TaskWeights,
    settings: &StepSettings,
) -> Result<StepOutcome> {
    let active: [bool; 10] = std::array::from_fn(|i| mode.includes(LossKind::ALL[i]) && weights.get(LossKind::ALL[i]) != 0.0);
    let on = |k: LossKind| active[k.index()];
    let coef: [f64; 10] = std::array::from_fn(|i| weights.coefficient(LossKind::ALL[i]));
    let stack = model.cfg.frontend.min_frames();
    let mut skipped = SkipCounts::default();

    // Eligibility decides the per-loss denominators before any tape is built.
    let mut n = [0usize; 10];
    let paired_ok: Vec<bool> = batch.paired.iter().map(|(x, _)| x.num_frames() >= stack).collect();
    for &ok in &paired_ok {
        if ok {
            for k in [LossKind::AsrStreaming, LossKind::AsrDelayed, LossKind::Tts, LossKind::TextRecon, LossKind::AudioRecon] {
                n[k.index()] += on(k) as usize;
            }
        } else if [LossKind::AsrStreaming, LossKind::AsrDelayed, LossKind::Tts, LossKind::TextRecon, LossKind::AudioRecon].iter().any(|&k| on(k)) {
            skipped.short_paired += 1;
        }
    }
    let mut audio_tts_ok = Vec::new();
    let mut audio_recon_ok = Vec::new();
    for (i, x) in batch.audio_only.iter().enumerate() {
        let tts_ok = on(LossKind::UTts)
            && match &pseudo.transcripts[i] {
                Some(y) if !y.is_empty() => true,
                _ => {
                    skipped.empty_transcript += 1;
                    false
                }
            };
        let recon_ok = on(LossKind::UAudioRecon) && {
            let ok = x.num_frames() >= stack;
            skipped.short_audio += (!ok) as usize;
            ok
        };
        n[LossKind::UTts.index()] += tts_ok as usize;
        n[LossKind::UAudioRecon.index()] += recon_ok as usize;
        audio_tts_ok.push(tts_ok);
        audio_recon_ok.push(recon_ok);
    }
    let mut text_asr_ok = Vec::new();
    for (i, _) in batch.text_only.iter().enumerate() {
        let ok = (on(LossKind::UAsrStreaming) || on(LossKind::UAsrDelayed))
            && match &pseudo.audio[i] {
                Some(x) if x.num_frames() >= stack => true,
                _ => {
                    skipped.short_synthesis += 1;
                    false
                }
            };
        for k in [LossKind::UAsrStreaming, LossKind::UAsrDelayed] {
            n[k.index()] += (ok && on(k)) as usize;
        }
        n[LossKind::UTextRecon.index()] += on(LossKind::UTextRecon) as usize;
        text_asr_ok.push(ok);
    }

    let mut acc = Accumulator { sums: [0.0; 10], counts: [0; 10], grads: ParamGrads::zeros_like(&model.params) };

    for (i, (x, y)) in batch.paired.iter().enumerate() {
        if !paired_ok[i] {
            continue;
        }
        let mut rng = example_rng(settings, Pool::Paired, i);
        let stacked = asr_frames(model, x, settings.stochastic, &mut rng)?;
        let tape = Tape::new();
        let mut ctx = make_ctx(&tape, model, settings.stochastic, rng);
        let mut terms = Vec::new();
        let need_enc = on(LossKind::AsrStreaming) || on(LossKind::AsrDelayed) || on(LossKind::AudioRecon);
        if need_enc {
            let (hs, hd) = encode_cascade(&ctx, &model.enc_s, &model.enc_d, &stacked)?;
            if on(LossKind::AsrStreaming) {
                terms.push((LossKind::AsrStreaming, model.hat.loss(&ctx, hs, y)?));
            }
            if on(LossKind::AsrDelayed) {
                terms.push((LossKind::AsrDelayed, model.hat.loss(&ctx, hd, y)?));
            }
            if on(LossKind::AudioRecon) {
                terms.push((LossKind::AudioRecon, audio_recon_from_delayed(&mut ctx, model, hd, x.frames())?));
            }
        }
        if on(LossKind::Tts) || on(LossKind::TextRecon) {
            let memory = model.enc_t.forward(&ctx, y)?;
            if on(LossKind::Tts) {
                terms.push((LossKind::Tts, tts_from_memory(&mut ctx, model, memory, x.frames())?.total));
            }
            if on(LossKind::TextRecon) {
                terms.push((LossKind::TextRecon, text_recon_from_memory(&ctx, model, memory, y)?));
            }
        }
        acc.example(&tape, model, &terms, &coef, &n)?;
    }

    for (i, x) in batch.audio_only.iter().enumerate() {
        if !(audio_tts_ok[i] || audio_recon_ok[i]) {
            continue;
        }
        let mut rng = example_rng(settings, Pool::AudioOnly, i);
        let tape = Tape::new();
        let mut terms = Vec::new();
        let stacked = if audio_recon_ok[i] { Some(asr_frames(model, x, settings.stochastic, &mut rng)?) } else { None };
        let mut ctx = make_ctx(&tape, model, settings.stochastic, rng);
        if let Some(stacked) = stacked {
            let (_, hd) = encode_cascade(&ctx, &model.enc_s, &model.enc_d, &stacked)?;
            terms.push((LossKind::UAudioRecon, audio_recon_from_delayed(&mut ctx, model, hd, x.frames())?));
        }
        if audio_tts_ok[i] {
            let y_hat = pseudo.transcripts[i].as_ref().expect("checked above");
            terms.push((LossKind::UTts, loss_unsup_tts(&mut ctx, model, x.frames(), y_hat)?.total));
        }
        acc.example(&tape, model, &terms, &coef, &n)?;
    }

    for (i, y) in batch.text_only.iter().enumerate() {
        if !(text_asr_ok[i] || on(LossKind::UTextRecon)) {
            continue;
        }
        let mut rng = example_rng(settings, Pool::TextOnly, i);
        let tape = Tape::new();
        let mut terms = Vec::new();
        let stacked = if text_asr_ok[i] {
            let x_hat = pseudo.audio[i].as_ref().expect("checked above");
            Some(asr_frames(model, x_hat, settings.stochastic, &mut rng)?)
        } else {
            None
        };
        let ctx = make_ctx(&tape, model, settings.stochastic, rng);
        if let Some(stacked) = stacked {
            let (hs, hd) = encode_cascade(&ctx, &model.enc_s, &model.enc_d, &stacked)?;
            if on(LossKind::UAsrStreaming) {
                terms.push((LossKind::UAsrStreaming, model.hat.loss(&ctx, hs, y)?));
            }
            if on(LossKind::UAsrDelayed) {
                terms.push((LossKind::UAsrDelayed, model.hat.loss(&ctx, hd, y)?));
            }
        }
        if on(LossKind::UTextRecon) {
            terms.push((LossKind::UTextRecon, loss_text_recon(&ctx, model, y)?));
        }
        acc.example(&tape, model, &terms, &coef, &n)?;
    }

    let mut components = Components::default();
    let mut total = 0.0;
    for k in LossKind::ALL {
        let c = acc.counts[k.index()];
        if c > 0 {
            let mean = acc.sums[k.index()] / c as f64;
            components.set(k, mean);
            total += coef[k.index()] * mean;
        }
    }
    Ok(StepOutcome { total, components, grads: acc.grads, skipped })
}

/// Pseudo-labels the batch with `labeler` (the model itself when `None`),
/// computes the composed loss and applies one optimiser step.
#[allow(clippy::too_many_arguments)]
pub fn compose_step(
    model: &mut DuplexModel,
    adam: &mut Adam<f64>,
    labeler: Option<&DuplexModel>,
    batch: &TriBatch,
    mode: AblationMode,
    weights: &TaskWeights,
    settings: &StepSettings,
) -> Result<StepOutcome> {
    let pseudo = make_pseudo_labels(labeler.unwrap_or(model), batch, mode, weights, settings.pseudo_label_beam)?;
    let diverged = || Error::Diverged { step: settings.step as usize, ids: batch.ids.clone() };
    let out = match compute_step(model, batch, &pseudo, mode, weights, settings) {
        Err(Error::NonFinite(_)) | Err(Error::ZeroProbability(_)) => return Err(diverged()),
        other => other?,
    };
    if !out.total.is_finite() || !out.grads.is_finite() {
        return Err(diverged());
    }
    adam.step(&mut model.params, &out.grads)?;
    Ok(out)
}
