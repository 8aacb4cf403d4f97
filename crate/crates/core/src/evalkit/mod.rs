//! WER scoring, corpus evaluation, fusion-weight sweeps and result tables.

mod report;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use report::{append_cell, read_cells, report_tables, Column, EvalCell, ResultTable, TableRow, MODEL_ORDER};

use crate::corpus::{load_split, Record, TokenSequence};
use crate::decode::{beam_search, ElmScorer, FusionConfig};
use crate::error::{Error, Result};
use crate::models::{DuplexModel, LanguageModel};

/// Edit counts of a hypothesis against a reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
    /// Percentage.
    pub wer: f64,
}

impl WerReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Corpus-level report: error counts and reference lengths are summed.
    pub fn pooled<'a>(reports: impl IntoIterator<Item = &'a WerReport>) -> Result<WerReport> {
        let mut out = WerReport::default();
        for r in reports {
            out.substitutions += r.substitutions;
            out.deletions += r.deletions;
            out.insertions += r.insertions;
            out.reference_len += r.reference_len;
        }
        if out.reference_len == 0 {
            return Err(Error::UndefinedWer);
        }
        out.wer = 100.0 * out.errors() as f64 / out.reference_len as f64;
        Ok(out)
    }
}

/// Levenshtein alignment with unit costs. Among minimum-cost alignments the
/// backtrace prefers a match or substitution over an insertion, and an
/// insertion over a deletion.
pub fn wer(reference: &TokenSequence, hypothesis: &TokenSequence) -> Result<WerReport> {
    let (r, h) = (reference.ids(), hypothesis.ids());
    if r.is_empty() {
        return Err(Error::UndefinedWer);
    }
    let (n, m) = (r.len(), h.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + (r[i - 1] != h[j - 1]) as usize;
            d[i * w + j] = diag.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let (mut i, mut j) = (n, m);
    let mut rep = WerReport { reference_len: n, ..WerReport::default() };
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 && here == d[(i - 1) * w + j - 1] + (r[i - 1] != h[j - 1]) as usize {
            rep.substitutions += (r[i - 1] != h[j - 1]) as usize;
            i -= 1;
            j -= 1;
        } else if j > 0 && here == d[i * w + j - 1] + 1 {
            rep.insertions += 1;
            j -= 1;
        } else {
            rep.deletions += 1;
            i -= 1;
        }
    }
    rep.wer = 100.0 * rep.errors() as f64 / n as f64;
    Ok(rep)
}

/// `100 · (base − new) / base`.
pub fn relative_improvement(base_wer: f64, new_wer: f64) -> Result<f64> {
    if !(base_wer > 0.0) {
        return Err(Error::Domain(format!("relative improvement needs a positive base WER, got {base_wer}")));
    }
    Ok(100.0 * (base_wer - new_wer) / base_wer)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: String,
    pub reference: TokenSequence,
    pub hypothesis: TokenSequence,
    pub report: WerReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: WerReport,
    pub utterances: Vec<UtteranceResult>,
    /// Records without usable audio or transcript.
    pub skipped: usize,
}

/// Top hypothesis of the delayed path for one utterance's raw features.
pub fn decode_features(model: &DuplexModel, x: &crate::Features, fusion: &FusionConfig, elm: Option<&ElmScorer>) -> Result<TokenSequence> {
    let stacked = model.asr_input(x)?;
    if stacked.rows() == 0 {
        return Ok(TokenSequence::default());
    }
    let enc = model.encode_delayed(&stacked)?;
    let hyps = beam_search(&model.hat, &model.params, &enc, fusion, elm)?;
    Ok(hyps.into_iter().next().map(|h| h.tokens).unwrap_or_default())
}

fn evaluate_with(model: &DuplexModel, records: &[Record], fusion: &FusionConfig, elm: Option<&ElmScorer>, skipped: usize) -> Result<Evaluation> {
    let mut utterances = Vec::with_capacity(records.len());
    let mut skipped = skipped;
    for r in records {
        let (Some(x), Some(y)) = (&r.features, &r.tokens) else {
            skipped += 1;
            continue;
        };
        if y.is_empty() {
            skipped += 1;
            continue;
        }
        let hyp = decode_features(model, x, fusion, elm)?;
        let report = wer(y, &hyp)?;
        utterances.push(UtteranceResult { id: r.id.clone(), reference: y.clone(), hypothesis: hyp, report });
    }
    let report = WerReport::pooled(utterances.iter().map(|u| &u.report))?;
    Ok(Evaluation { report, utterances, skipped })
}

/// Pooled WER of `model` over in-memory records.
pub fn evaluate_records(model: &DuplexModel, records: &[Record], fusion: &FusionConfig, elm: Option<&LanguageModel>) -> Result<Evaluation> {
    let scorer = elm.map(ElmScorer::new);
    evaluate_with(model, records, fusion, scorer.as_ref(), 0)
}

/// Loads records from a split manifest, skipping (and counting) entries
/// whose feature file cannot be read.
pub fn load_manifest_records(manifest: &Path, frame_period_ms: u32) -> Result<(Vec<Record>, usize)> {
    let entries = crate::corpus::read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    let mut skipped = 0;
    for e in entries {
        let Some(rel) = &e.feature_file else {
            skipped += 1;
            continue;
        };
        match crate::corpus::read_feature_file(&base.join(rel), frame_period_ms) {
            Ok(x) => records.push(Record { id: e.id, tokens: e.tokens.map(TokenSequence), features: Some(x) }),
            Err(err) => {
                log::warn!("skipping {}: {err}", e.id);
                skipped += 1;
            }
        }
    }
    Ok((records, skipped))
}

/// Pooled WER of a model over a split manifest.
pub fn evaluate(model: &DuplexModel, manifest: &Path, fusion: &FusionConfig, elm: Option<&LanguageModel>) -> Result<Evaluation> {
    let (records, skipped) = load_manifest_records(manifest, model.cfg.frontend.frame_period_ms)?;
    let scorer = elm.map(ElmScorer::new);
    evaluate_with(model, &records, fusion, scorer.as_ref(), skipped)
}

/// WER over an α × β grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `wer[i][j]` at `(alphas[i], betas[j])`.
    pub wer: Vec<Vec<f64>>,
}

impl SweepGrid {
    pub fn default_alphas() -> Vec<f64> {
        (0..=8).map(|i| i as f64 * 0.05).collect()
    }

    pub fn default_betas() -> Vec<f64> {
        (0..=8).map(|i| i as f64 * 0.025).collect()
    }

    /// Lowest WER and its `(alpha, beta)`; the first such cell on ties.
    pub fn best(&self) -> (f64, f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for (i, row) in self.wer.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                if w < best.0 {
                    best = (w, self.alphas[i], self.betas[j]);
                }
            }
        }
        best
    }

    /// Best WER over the cells with `beta = 0`.
    pub fn best_without_ilm(&self) -> f64 {
        let j = self.betas.iter().position(|&b| b == 0.0);
        j.map_or(f64::INFINITY, |j| self.wer.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min))
    }

    pub fn cell(&self, alpha: f64, beta: f64) -> Option<f64> {
        let i = self.alphas.iter().position(|&a| a == alpha)?;
        let j = self.betas.iter().position(|&b| b == beta)?;
        Some(self.wer[i][j])
    }

    /// CSV matrix: header `alpha\beta,b0,b1,...`, one row per alpha.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["alpha\\beta".to_string()];
        header.extend(self.betas.iter().map(|b| b.to_string()));
        w.write_record(&header)?;
        for (a, row) in self.alphas.iter().zip(&self.wer) {
            let mut rec = vec![a.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
        let mut rows = r.records();
        let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Input(format!("bad number '{s}': {e}")));
        let header = rows.next().ok_or_else(|| Error::Input("empty sweep CSV".into()))??;
        let betas = header.iter().skip(1).map(parse).collect::<Result<Vec<_>>>()?;
        let (mut alphas, mut wer) = (Vec::new(), Vec::new());
        for rec in rows {
            let rec = rec?;
            alphas.push(parse(&rec[0])?);
            wer.push(rec.iter().skip(1).map(parse).collect::<Result<Vec<_>>>()?);
        }
        Ok(Self { alphas, betas, wer })
    }
}

/// Full beam-search decode at every `(alpha, beta)`. The LM cache is shared
/// across cells, which changes no score.
pub fn sweep_records(
    model: &DuplexModel,
    records: &[Record],
    alphas: &[f64],
    betas: &[f64],
    beam_size: usize,
    elm: Option<&LanguageModel>,
) -> Result<SweepGrid> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::Parameter("sweep grids must be non-empty".into()));
    }
    let scorer = elm.map(ElmScorer::new);
    let mut wer = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let mut row = Vec::with_capacity(betas.len());
        for &b in betas {
            let fusion = FusionConfig::new(a, b, beam_size);
            let e = evaluate_with(model, records, &fusion, scorer.as_ref(), 0)?;
            log::debug!("sweep alpha {a} beta {b}: {:.2}", e.report.wer);
            row.push(e.report.wer);
        }
        wer.push(row);
    }
    Ok(SweepGrid { alphas: alphas.to_vec(), betas: betas.to_vec(), wer })
}

/// [`sweep_records`] over a split manifest.
pub fn sweep(model: &DuplexModel, manifest: &Path, alphas: &[f64], betas: &[f64], beam_size: usize, elm: Option<&LanguageModel>) -> Result<SweepGrid> {
    let (records, _) = load_manifest_records(manifest, model.cfg.frontend.frame_period_ms)?;
    sweep_records(model, &records, alphas, betas, beam_size, elm)
}

/// Fraction of the no-LM WER gap between `baseline` and `improved` that is
/// closed once both decode with fusion: `1 - gap_fused / gap_plain`.
/// `None` when the plain gap is not positive.
pub fn gap_closing_ratio(baseline_plain: f64, improved_plain: f64, baseline_fused: f64, improved_fused: f64) -> Option<f64> {
    let plain = baseline_plain - improved_plain;
    if plain > 0.0 {
        Some(1.0 - (baseline_fused - improved_fused) / plain)
    } else {
        None
    }
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Per-utterance results keyed by id, for comparing two evaluations.
pub fn by_id(e: &Evaluation) -> BTreeMap<&str, &UtteranceResult> {
    e.utterances.iter().map(|u| (u.id.as_str(), u)).collect()
}

/// Loads the records of a split manifest (feature paths relative to it).
pub fn load_records(manifest: &Path, frame_period_ms: u32) -> Result<Vec<Record>> {
    load_split(manifest, frame_period_ms)
}
