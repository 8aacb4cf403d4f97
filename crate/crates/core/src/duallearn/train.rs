//! Supervised pre-training followed by batch-thirds dual training.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{compose_step, AblationMode, LossKind, SkipCounts, StepSettings, TaskWeights, TriBatch};
use crate::corpus::{mix_seed, rng_for, Corpus, TokenSequence};
use crate::error::{Error, Result};
use crate::models::{Ctx, DuplexModel, ElmConfig, LanguageModel, ModelConfig};
use crate::tensor::{checkpoint, Adam, AdamConfig, Array, ParamStore, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Dual,
}

impl Phase {
    fn code(self) -> u64 {
        match self {
            Phase::Pretrain => 1,
            Phase::Dual => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub pretrain_steps: usize,
    /// Paired examples per pre-training step.
    pub pretrain_batch: usize,
    pub pretrain_adam: AdamConfig,
    pub dual_steps: usize,
    /// Examples per third in a dual step.
    pub third_size: usize,
    pub dual_adam: AdamConfig,
    pub weights: TaskWeights,
    pub pseudo_label_beam: usize,
    /// Pseudo-labels come from a snapshot refreshed every this many steps.
    pub pseudo_refresh_every: usize,
    /// Negative control: each dual step draws all its examples from one pool.
    pub alternating_batches: bool,
    /// Resumable state is written (and the live state rounded to the stored
    /// precision) every this many steps; 0 writes only at phase ends.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            model: ModelConfig::default(),
            pretrain_steps: 1500,
            pretrain_batch: 8,
            pretrain_adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
            dual_steps: 1500,
            third_size: 4,
            dual_adam: AdamConfig::default(),
            weights: TaskWeights::default(),
            pseudo_label_beam: 1,
            pseudo_refresh_every: 1,
            alternating_batches: false,
            checkpoint_every: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.pretrain_batch == 0 || self.third_size == 0 || self.pseudo_label_beam == 0 || self.pseudo_refresh_every == 0 {
            return Err(Error::Config("batch sizes, beam and refresh interval must be positive".into()));
        }
        if !self.checkpoint_every.is_multiple_of(self.pseudo_refresh_every) {
            return Err(Error::Config("checkpoint_every must be a multiple of pseudo_refresh_every".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        crate::corpus::hash_json(self)
    }
}

/// One row per optimiser step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub phase: Phase,
    pub step: usize,
    pub total: f64,
    pub components: super::Components,
    pub skipped: usize,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub rows: Vec<LossRow>,
}

impl LossLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["phase".to_string(), "step".into(), "total".into()];
        header.extend(LossKind::ALL.iter().map(|k| k.name().to_string()));
        header.extend(["skipped".to_string(), "lr".into(), "grad_norm".into()]);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                match r.phase {
                    Phase::Pretrain => "pretrain".to_string(),
                    Phase::Dual => "dual".into(),
                },
                r.step.to_string(),
                r.total.to_string(),
            ];
            rec.extend(LossKind::ALL.iter().map(|&k| r.components.get(k).map(|v| v.to_string()).unwrap_or_default()));
            rec.extend([r.skipped.to_string(), r.lr.to_string(), r.grad_norm.to_string()]);
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean total over the last `n` rows of `phase`.
    pub fn recent_mean(&self, phase: Phase, n: usize) -> Option<f64> {
        let xs: Vec<f64> = self.rows.iter().filter(|r| r.phase == phase).map(|r| r.total).collect();
        if xs.is_empty() {
            return None;
        }
        let tail = &xs[xs.len().saturating_sub(n)..];
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub phase: Phase,
    /// Steps completed in `phase`.
    pub step: usize,
    pub model: DuplexModel,
    pub adam: Adam<f64>,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig) -> Result<Self> {
        let model = DuplexModel::new(&cfg.model, cfg.seed)?;
        let adam = Adam::new(cfg.pretrain_adam.clone(), &model.params);
        Ok(Self { phase: Phase::Pretrain, step: 0, model, adam })
    }

    /// Starts the dual phase from a (rounded) pre-trained model with a fresh optimiser.
    pub fn dual_from(baseline: &DuplexModel, cfg: &TrainConfig) -> Self {
        let adam = Adam::new(cfg.dual_adam.clone(), &baseline.params);
        Self { phase: Phase::Dual, step: 0, model: baseline.clone(), adam }
    }

    /// Rounds weights and optimiser moments to the checkpoint precision.
    pub fn round(&mut self) {
        self.model.params.round_to_f32();
        self.adam.round_to_f32();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut all = self.model.params.clone();
        for (_, name, v) in self.adam.state_store(&self.model.params)?.iter() {
            all.add(name, v.clone())?;
        }
        all.add("train.phase", Array::vector(vec![self.phase.code() as f64]))?;
        all.add("train.step", Array::vector(vec![self.step as f64]))?;
        checkpoint::save_checkpoint(&all, path)
    }

    pub fn load(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        let stored: ParamStore<f64> = checkpoint::load_checkpoint(path)?;
        let scalar = |name: &str| -> Result<f64> {
            let id = stored.id(name).ok_or_else(|| Error::Format { path: path.to_path_buf(), reason: format!("missing {name}") })?;
            Ok(stored.get(id).data()[0])
        };
        let phase = match scalar("train.phase")? as u64 {
            1 => Phase::Pretrain,
            2 => Phase::Dual,
            p => return Err(Error::Format { path: path.to_path_buf(), reason: format!("unknown phase {p}") }),
        };
        let step = scalar("train.step")? as usize;
        let mut model = DuplexModel::new(&cfg.model, cfg.seed)?;
        let mut n = 0;
        for p in &crate::models::PREFIXES[..6] {
            n += model.params.load_prefix(&stored, &format!("{p}."))?;
        }
        if n != model.params.len() {
            return Err(Error::Format { path: path.to_path_buf(), reason: "model parameters missing".into() });
        }
        let adam_cfg = match phase {
            Phase::Pretrain => cfg.pretrain_adam.clone(),
            Phase::Dual => cfg.dual_adam.clone(),
        };
        let adam = Adam::restore(adam_cfg, &model.params, &stored)?;
        Ok(Self { phase, step, model, adam })
    }
}

const STREAM_BATCH: u64 = 0x6261_7463;

/// Indices of `count` distinct items of a pool of `len`, drawn for one step.
pub fn batch_schedule(seed: u64, phase: Phase, step: usize, pool: u64, len: usize, count: usize) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::Input("cannot draw a batch from an empty pool".into()));
    }
    let mut rng = rng_for(mix_seed(seed, phase.code()), STREAM_BATCH + pool, step as u64);
    Ok(sample(&mut rng, len, count.min(len)).into_vec())
}

fn paired_part(corpus: &Corpus, idx: &[usize], ids: &mut Vec<String>) -> Result<Vec<(crate::Features, TokenSequence)>> {
    idx.iter()
        .map(|&i| {
            let r = &corpus.paired[i];
            ids.push(r.id.clone());
            match (&r.features, &r.tokens) {
                (Some(x), Some(y)) => Ok((x.clone(), y.clone())),
                _ => Err(Error::Input(format!("paired record {} lacks audio or text", r.id))),
            }
        })
        .collect()
}

/// The batch of dual step `step`: equal thirds from S, U_A and U_T, or, for
/// the alternating control, `3 * third_size` examples from one pool.
pub fn sample_tribatch(corpus: &Corpus, seed: u64, step: usize, third_size: usize, alternating: bool) -> Result<TriBatch> {
    let mut ids = Vec::new();
    let sizes = if alternating {
        let mut s = [0; 3];
        s[step % 3] = 3 * third_size;
        s
    } else {
        [third_size; 3]
    };
    let draw = |pool: u64, len: usize, n: usize| -> Result<Vec<usize>> {
        if n == 0 {
            Ok(Vec::new())
        } else {
            batch_schedule(seed, Phase::Dual, step, pool, len, n)
        }
    };
    let paired = paired_part(corpus, &draw(0, corpus.paired.len(), sizes[0])?, &mut ids)?;
    let audio_only = draw(1, corpus.audio_only.len(), sizes[1])?
        .into_iter()
        .map(|i| {
            let r = &corpus.audio_only[i];
            ids.push(r.id.clone());
            r.features.clone().ok_or_else(|| Error::Input(format!("audio record {} lacks features", r.id)))
        })
        .collect::<Result<_>>()?;
    let text_only = draw(2, corpus.text_only.len(), sizes[2])?
        .into_iter()
        .map(|i| {
            let r = &corpus.text_only[i];
            ids.push(r.id.clone());
            r.tokens.clone().ok_or_else(|| Error::Input(format!("text record {} lacks tokens", r.id)))
        })
        .collect::<Result<_>>()?;
    let batch = TriBatch { paired, audio_only, text_only, ids };
    if !alternating {
        batch.check_thirds()?;
    }
    Ok(batch)
}

fn pretrain_batch(corpus: &Corpus, cfg: &TrainConfig, step: usize) -> Result<TriBatch> {
    let mut ids = Vec::new();
    let idx = batch_schedule(cfg.seed, Phase::Pretrain, step, 0, corpus.paired.len(), cfg.pretrain_batch)?;
    let paired = paired_part(corpus, &idx, &mut ids)?;
    Ok(TriBatch { paired, audio_only: Vec::new(), text_only: Vec::new(), ids })
}

/// Runs `state` forward until `until` steps of its phase are complete.
pub fn run_phase(
    state: &mut TrainState,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mode: AblationMode,
    until: usize,
    out: Option<&Path>,
    log: &mut LossLog,
    skipped: &mut SkipCounts,
) -> Result<()> {
    let seed = mix_seed(cfg.seed, state.phase.code());
    let mut snapshot: Option<DuplexModel> = None;
    let started = Instant::now();
    while state.step < until {
        let step = state.step;
        let batch = match state.phase {
            Phase::Pretrain => pretrain_batch(corpus, cfg, step)?,
            Phase::Dual => sample_tribatch(corpus, cfg.seed, step, cfg.third_size, cfg.alternating_batches)?,
        };
        let settings = StepSettings { seed, step: step as u64, stochastic: true, pseudo_label_beam: cfg.pseudo_label_beam };
        if cfg.pseudo_refresh_every > 1 && step.is_multiple_of(cfg.pseudo_refresh_every) {
            snapshot = Some(state.model.clone());
        }
        let weights = if state.phase == Phase::Pretrain { TaskWeights::default() } else { cfg.weights.clone() };
        let outcome = compose_step(&mut state.model, &mut state.adam, snapshot.as_ref(), &batch, mode, &weights, &settings)?;
        skipped.add(&outcome.skipped);
        let lr = state.adam.current_lr();
        state.step += 1;
        log.rows.push(LossRow {
            phase: state.phase,
            step: state.step,
            total: outcome.total,
            components: outcome.components,
            skipped: outcome.skipped.total(),
            lr,
            grad_norm: outcome.grads.global_norm(),
        });
        if cfg.log_every > 0 && state.step.is_multiple_of(cfg.log_every) {
            log::info!(
                "{:?} step {}/{} loss {:.4} ({:.1}s)",
                state.phase,
                state.step,
                until,
                log.recent_mean(state.phase, cfg.log_every).unwrap_or(f64::NAN),
                started.elapsed().as_secs_f64()
            );
        }
        if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) {
            state.round();
            if let Some(dir) = out {
                state.save(&state_path(dir, state.phase, state.step))?;
            }
        }
    }
    Ok(())
}

fn state_path(dir: &Path, phase: Phase, step: usize) -> PathBuf {
    let p = match phase {
        Phase::Pretrain => "pretrain",
        Phase::Dual => "dual",
    };
    dir.join(format!("state-{p}-{step:06}.dlxa"))
}

pub struct TrainReport {
    pub baseline: DuplexModel,
    /// The dual-phase model, when a mode was requested.
    pub model: Option<DuplexModel>,
    pub log: LossLog,
    pub skipped: SkipCounts,
    pub seconds: f64,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    seed: u64,
    mode: &'a str,
    config_hash: String,
    corpus_hash: String,
    pretrain_steps: usize,
    dual_steps: usize,
    skipped: &'a SkipCounts,
    seconds: f64,
}

/// Phase 1: supervised training on S, rounded to single precision (the
/// BASELINE). Phase 2, when `mode` is given: a fresh optimiser continues from
/// the baseline on batch thirds in that mode.
///
/// With `out`, writes `baseline.dlxa`, `final.dlxa`, `losses.csv` and
/// `manifest.json` there, plus resumable states every `checkpoint_every` steps.
pub fn pretrain_then_dual(corpus: &Corpus, cfg: &TrainConfig, mode: Option<AblationMode>, out: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let started = Instant::now();
    let mut log = LossLog::default();
    let mut skipped = SkipCounts::default();
    let mut state = TrainState::fresh(cfg)?;
    run_phase(&mut state, corpus, cfg, AblationMode::Supervised, cfg.pretrain_steps, out, &mut log, &mut skipped)?;
    state.round();
    let baseline = state.model.clone();
    if let Some(dir) = out {
        crate::models::save_models(&dir.join("baseline.dlxa"), &baseline, None)?;
    }
    let model = match mode {
        Some(m) => {
            if cfg.pretrain_steps == 0 && matches!(m, AblationMode::All | AblationMode::Dl) {
                log::warn!("dual training without supervised initialisation; expect divergence");
            }
            let mut dual = TrainState::dual_from(&baseline, cfg);
            run_phase(&mut dual, corpus, cfg, m, cfg.dual_steps, out, &mut log, &mut skipped)?;
            dual.round();
            Some(dual.model)
        }
        None => None,
    };
    let seconds = started.elapsed().as_secs_f64();
    if let Some(dir) = out {
        let final_model = model.as_ref().unwrap_or(&baseline);
        crate::models::save_models(&dir.join("final.dlxa"), final_model, None)?;
        log.write_csv(&dir.join("losses.csv"))?;
        let manifest = RunManifest {
            seed: cfg.seed,
            mode: mode.map_or("baseline", |m| m.name()),
            config_hash: cfg.hash()?,
            corpus_hash: crate::corpus::content_hash(corpus),
            pretrain_steps: cfg.pretrain_steps,
            dual_steps: if mode.is_some() { cfg.dual_steps } else { 0 },
            skipped: &skipped,
            seconds,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    }
    Ok(TrainReport { baseline, model, log, skipped, seconds })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElmTrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
}

impl Default for ElmTrainConfig {
    fn default() -> Self {
        Self { seed: 11, steps: 600, batch: 16, adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() } }
    }
}

/// Trains the external LM on `texts` by per-token negative log-likelihood.
pub fn train_elm(texts: &[TokenSequence], vocab_size: usize, cfg: &ElmConfig, tcfg: &ElmTrainConfig) -> Result<LanguageModel> {
    if texts.is_empty() {
        return Err(Error::Input("no text to train the LM on".into()));
    }
    let mut lm = LanguageModel::new(cfg, vocab_size, tcfg.seed)?;
    let mut adam = Adam::new(tcfg.adam.clone(), &lm.params);
    for step in 0..tcfg.steps {
        let mut rng = rng_for(tcfg.seed, STREAM_BATCH + 16, step as u64);
        let idx = sample(&mut rng, texts.len(), tcfg.batch.min(texts.len())).into_vec();
        let tokens: usize = idx.iter().map(|&i| texts[i].len().min(cfg.context_length)).sum();
        let mut grads = crate::tensor::ParamGrads::zeros_like(&lm.params);
        for &i in &idx {
            let y = &texts[i];
            let y = if y.len() > cfg.context_length { TokenSequence(y.ids()[..cfg.context_length].to_vec()) } else { y.clone() };
            if y.is_empty() {
                continue;
            }
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape, &lm.params);
            let nll = lm.lm.nll(&ctx, &y)?;
            let loss = tape.scale(nll, 1.0 / tokens.max(1) as f64)?;
            grads.merge(&tape.backward(loss)?.param_grads(&lm.params));
        }
        adam.step(&mut lm.params, &grads)?;
    }
    Ok(lm)
}

/// Mean per-token negative log-likelihood of `texts` under `lm`.
pub fn elm_perplexity_nll(lm: &LanguageModel, texts: &[TokenSequence]) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for y in texts {
        let (lp, _) = lm.lm.logprob(&lm.params, y)?;
        total -= lp;
        n += y.len();
    }
    Ok(total / n.max(1) as f64)
}
