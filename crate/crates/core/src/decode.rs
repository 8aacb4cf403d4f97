//! Frame-synchronous beam search over the transducer with shallow fusion of
//! an external LM and subtraction of the internal LM.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::hat::{HatDecoder, PredictionState};
use crate::models::LanguageModel;
use crate::tensor::{log_add_exp, Array};
use crate::Params;

fn default_max_symbols() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub alpha: f64,
    pub beta: f64,
    pub beam_size: usize,
    #[serde(default = "default_max_symbols")]
    pub max_symbols_per_frame: usize,
    /// Optional cap on hypothesis length.
    #[serde(default)]
    pub max_output_len: Option<usize>,
}

impl FusionConfig {
    pub fn new(alpha: f64, beta: f64, beam_size: usize) -> Self {
        Self { alpha, beta, beam_size, max_symbols_per_frame: 4, max_output_len: None }
    }

    pub fn no_lm(beam_size: usize) -> Self {
        Self::new(0.0, 0.0, beam_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Parameter("beam_size must be >= 1".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Parameter(format!("fusion weights must be >= 0, got alpha {} beta {}", self.alpha, self.beta)));
        }
        if self.max_symbols_per_frame == 0 {
            return Err(Error::Parameter("max_symbols_per_frame must be >= 1".into()));
        }
        Ok(())
    }

    /// `am + alpha * elm - beta * ilm`.
    pub fn fuse(&self, am: f64, elm: f64, ilm: f64) -> f64 {
        am + self.alpha * elm - self.beta * ilm
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: TokenSequence,
    pub am_logprob: f64,
    pub elm_logprob: f64,
    pub ilm_logprob: f64,
    pub pred_state: PredictionState,
    pub fused_score: f64,
}

/// External-LM next-label distributions, memoised by prefix.
pub struct ElmScorer<'a> {
    lm: &'a LanguageModel,
    cache: RefCell<HashMap<Vec<u32>, Rc<[f64]>>>,
}

impl<'a> ElmScorer<'a> {
    pub fn new(lm: &'a LanguageModel) -> Self {
        Self { lm, cache: RefCell::new(HashMap::new()) }
    }

    pub fn context_length(&self) -> usize {
        self.lm.cfg.context_length
    }

    pub fn next(&self, prefix: &[u32]) -> Result<Rc<[f64]>> {
        if let Some(d) = self.cache.borrow().get(prefix) {
            return Ok(d.clone());
        }
        let d: Rc<[f64]> = self.lm.lm.next_distribution(&self.lm.params, prefix)?.into();
        self.cache.borrow_mut().insert(prefix.to_vec(), d.clone());
        Ok(d)
    }

    pub fn logprob(&self, y: &TokenSequence) -> Result<f64> {
        let mut total = 0.0;
        for (u, &k) in y.labels().iter().enumerate() {
            total += self.next(&y.ids()[..u])?[k];
        }
        Ok(total)
    }
}

struct Beam {
    tokens: Vec<u32>,
    am: f64,
    elm: f64,
    ilm: f64,
    state: PredictionState,
    pred: Rc<Vec<f64>>,
}

struct Candidate {
    parent: usize,
    label: usize,
    am: f64,
    elm: f64,
    ilm: f64,
    fused: f64,
}

fn keep_top<T>(items: &mut Vec<T>, n: usize, key: impl Fn(&T) -> (f64, &[u32])) {
    items.sort_by(|a, b| {
        let (sa, ta) = key(a);
        let (sb, tb) = key(b);
        sb.total_cmp(&sa).then_with(|| ta.cmp(tb))
    });
    items.truncate(n);
}

/// Beam search over encoder frames `enc` (`[T, enc_dim]`).
///
/// Within a frame, hypotheses may emit up to `max_symbols_per_frame` labels
/// before taking the blank that moves them to the next frame; hypotheses
/// reaching the next frame with the same label prefix are merged by summing
/// their acoustic probabilities. External- and internal-LM scores are added
/// as each label is emitted, and pruning uses the fused score. The returned
/// list is sorted by fused score, best first.
pub fn beam_search(
    hat: &HatDecoder,
    params: &Params,
    enc: &Array<f64>,
    cfg: &FusionConfig,
    elm: Option<&ElmScorer>,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    if enc.rank() != 2 || enc.rows() == 0 {
        return Err(Error::Input("beam search needs at least one encoder frame".into()));
    }
    if cfg.alpha > 0.0 && elm.is_none() {
        return Err(Error::Config("alpha > 0 requires an external LM".into()));
    }
    let projected = hat.project_encoder(params, enc)?;
    let silent = hat.silent_projection(params);
    let max_len = cfg.max_output_len.unwrap_or(usize::MAX).min(elm.map_or(usize::MAX, |e| e.context_length()));

    let root_state = hat.initial_state();
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        am: 0.0,
        elm: 0.0,
        ilm: 0.0,
        pred: Rc::new(hat.prediction(params, &root_state)),
        state: root_state,
    }];

    for t in 0..enc.rows() {
        let acoustic = projected.row(t);
        let mut next: BTreeMap<Vec<u32>, Beam> = BTreeMap::new();
        let mut level = std::mem::take(&mut beams);
        for k in 0..=cfg.max_symbols_per_frame {
            let mut candidates = Vec::new();
            for (i, b) in level.iter().enumerate() {
                let j = hat.joint_projected(params, acoustic, &b.pred);
                let am_blank = b.am + j.log_blank();
                match next.get_mut(&b.tokens) {
                    Some(e) => e.am = log_add_exp(e.am, am_blank),
                    None => {
                        next.insert(
                            b.tokens.clone(),
                            Beam { tokens: b.tokens.clone(), am: am_blank, elm: b.elm, ilm: b.ilm, state: b.state.clone(), pred: b.pred.clone() },
                        );
                    }
                }
                if k == cfg.max_symbols_per_frame || b.tokens.len() >= max_len {
                    continue;
                }
                let ilm_next = hat.ilm_next(params, &silent, &b.state);
                let elm_next = match elm {
                    Some(e) => Some(e.next(&b.tokens)?),
                    None => None,
                };
                let base = b.am + j.log_not_blank();
                for (label, &lp) in j.label_logprobs.iter().enumerate() {
                    let am = base + lp;
                    let ilm = b.ilm + ilm_next[label];
                    let elm_v = b.elm + elm_next.as_ref().map_or(0.0, |d| d[label]);
                    candidates.push(Candidate { parent: i, label, am, elm: elm_v, ilm, fused: cfg.fuse(am, elm_v, ilm) });
                }
            }
            if candidates.is_empty() {
                break;
            }
            let prefix_of = |c: &Candidate| -> (f64, &[u32]) { (c.fused, &level[c.parent].tokens) };
            candidates.sort_by(|a, b| {
                let (sa, ta) = prefix_of(a);
                let (sb, tb) = prefix_of(b);
                sb.total_cmp(&sa).then_with(|| ta.cmp(tb)).then_with(|| a.label.cmp(&b.label))
            });
            candidates.truncate(cfg.beam_size);
            let mut new_level = Vec::with_capacity(candidates.len());
            for c in candidates {
                let p = &level[c.parent];
                let id = c.label as u32 + 1;
                let state = hat.step_prediction(&p.state, id)?;
                let mut tokens = p.tokens.clone();
                tokens.push(id);
                new_level.push(Beam {
                    tokens,
                    am: c.am,
                    elm: c.elm,
                    ilm: c.ilm,
                    pred: Rc::new(hat.prediction(params, &state)),
                    state,
                });
            }
            level = new_level;
        }
        beams = next.into_values().collect();
        keep_top(&mut beams, cfg.beam_size, |b| (cfg.fuse(b.am, b.elm, b.ilm), &b.tokens));
    }

    Ok(beams
        .into_iter()
        .map(|b| Hypothesis {
            fused_score: cfg.fuse(b.am, b.elm, b.ilm),
            tokens: TokenSequence(b.tokens),
            am_logprob: b.am,
            elm_logprob: b.elm,
            ilm_logprob: b.ilm,
            pred_state: b.state,
        })
        .collect())
}

/// Recomputes fused scores under `cfg` and re-sorts; score components are kept.
pub fn rescore(hyps: &[Hypothesis], cfg: &FusionConfig) -> Vec<Hypothesis> {
    let mut out: Vec<Hypothesis> = hyps
        .iter()
        .map(|h| Hypothesis { fused_score: cfg.fuse(h.am_logprob, h.elm_logprob, h.ilm_logprob), ..h.clone() })
        .collect();
    keep_top(&mut out, usize::MAX, |h| (h.fused_score, h.tokens.ids()));
    out
}

/// Beam search with a single beam and fusion off.
pub fn greedy_decode(hat: &HatDecoder, params: &Params, enc: &Array<f64>) -> Result<TokenSequence> {
    let hyps = beam_search(hat, params, enc, &FusionConfig::no_lm(1), None)?;
    Ok(hyps.into_iter().next().map(|h| h.tokens).unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyp(tokens: Vec<u32>, am: f64, elm: f64, ilm: f64) -> Hypothesis {
        Hypothesis {
            tokens: TokenSequence(tokens),
            am_logprob: am,
            elm_logprob: elm,
            ilm_logprob: ilm,
            pred_state: PredictionState::default(),
            fused_score: am,
        }
    }

    #[test]
    fn fused_score_arithmetic() {
        let cfg = FusionConfig::new(0.2, 0.1, 8);
        assert!((cfg.fuse(-1.0, -2.0, -0.5) + 1.35).abs() < 1e-15);
    }

    #[test]
    fn rescore_orders_by_linear_form() {
        let hyps = vec![hyp(vec![1], -1.0, -5.0, -1.0), hyp(vec![2], -1.5, -1.0, -3.0), hyp(vec![3], -1.2, -2.0, -0.1)];
        let r = rescore(&hyps, &FusionConfig::no_lm(8));
        assert_eq!(r[0].tokens.ids(), &[1]);
        let r = rescore(&hyps, &FusionConfig::new(1.0, 0.0, 8));
        assert_eq!(r[0].tokens.ids(), &[2]);
        assert_eq!(r[0].am_logprob, -1.5);
    }

    #[test]
    fn zero_beam_rejected() {
        assert!(FusionConfig::no_lm(0).validate().is_err());
    }
}
