//! Test subset built around tokens that are rare in the paired pool but
//! common in the text-only pool.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{rng_for, synthesize_utterance, unigram_frequencies, CorpusSpec, PrototypeTable, Record, TokenSequence};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailSetConfig {
    pub tau: f64,
    pub target_size: usize,
    pub seed: u64,
}

impl Default for TailSetConfig {
    fn default() -> Self {
        Self { tau: 1e-3, target_size: 100, seed: 7 }
    }
}

/// Tokens with paired frequency `< tau` and text-only frequency `> tau`, ascending.
pub fn qualifying_tokens(paired: &[TokenSequence], text_only: &[TokenSequence], tau: f64) -> Vec<u32> {
    let fs = unigram_frequencies(paired);
    let ft = unigram_frequencies(text_only);
    ft.iter().filter(|&(k, f)| f > tau && fs.freq(k) < tau).map(|(k, _)| k).collect()
}

pub fn contains_any(y: &TokenSequence, tokens: &[u32]) -> bool {
    y.ids().iter().any(|id| tokens.binary_search(id).is_ok())
}

/// Samples up to `target_size` distinct text-only transcripts that contain a
/// qualifying token and renders them at the clean noise level.
pub fn build_tail_set(
    paired: &[TokenSequence],
    text_only: &[TokenSequence],
    table: &PrototypeTable,
    spec: &CorpusSpec,
    cfg: &TailSetConfig,
) -> Result<Vec<Record>> {
    if !(cfg.tau > 0.0) {
        return Err(Error::Parameter(format!("tail threshold {} must be positive", cfg.tau)));
    }
    let q = qualifying_tokens(paired, text_only, cfg.tau);
    let candidates: Vec<&TokenSequence> = text_only.iter().filter(|y| contains_any(y, &q)).collect();
    if candidates.is_empty() {
        return Err(Error::EmptyTailSet);
    }
    let n = cfg.target_size.min(candidates.len());
    let mut rng = rng_for(cfg.seed, super::STREAM_TAIL, 0);
    let mut picks = sample(&mut rng, candidates.len(), n).into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .enumerate()
        .map(|(i, j)| {
            let y = candidates[j].clone();
            let mut r = rng_for(cfg.seed, super::STREAM_TAIL, 1 + i as u64);
            let x = synthesize_utterance(&y, table, spec, spec.noise_sigma, &mut r)?;
            Ok(Record { id: format!("tail-{i:06}"), tokens: Some(y), features: Some(x) })
        })
        .collect()
}
