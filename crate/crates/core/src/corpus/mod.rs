//! Synthetic paired domain: token sequences rendered to feature frames
//! through fixed per-token prototypes, plus the pools and test sets built
//! from it.

mod files;
mod tail;

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::FeatureSequence;
use crate::tensor::Array;
use crate::Real;

pub use files::{
    content_hash, hash_json, load_split, read_feature_file, read_manifest, write_corpus, write_feature_file, write_split,
    ManifestEntry, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use tail::{build_tail_set, contains_any, qualifying_tokens, TailSetConfig};

pub const BLANK_ID: u32 = 0;

/// Dense token inventory; id 0 is the reserved blank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// `size` counts the blank, so there are `size - 1` real tokens.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Parameter(format!("vocabulary size {size} < 2")));
        }
        let mut tokens = vec!["<blank>".to_string()];
        tokens.extend((1..size).map(|i| format!("w{i:03}")));
        Ok(Self { tokens })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Number of non-blank tokens.
    pub fn num_labels(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn blank_id(&self) -> u32 {
        BLANK_ID
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn check(&self, id: u32) -> Result<()> {
        if id == BLANK_ID || id as usize >= self.size() {
            return Err(Error::Vocabulary { id, size: self.size() });
        }
        Ok(())
    }
}

/// Sequence of non-blank token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks every id against the vocabulary (blank is rejected).
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        self.0.iter().try_for_each(|&id| vocab.check(id))
    }

    /// Label-head indices (`id - 1`) used by the transducer and LMs.
    pub fn labels(&self) -> Vec<usize> {
        self.0.iter().map(|&id| id as usize - 1).collect()
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub paired: usize,
    pub audio_only: usize,
    pub text_only: usize,
    pub test_clean: usize,
    pub test_other: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    /// Including the blank.
    pub vocab_size: usize,
    /// Zipf exponent of the paired pool.
    pub zipf_exponent: f64,
    /// Zipf exponent of the unpaired pools and test sets; lower is flatter.
    pub unpaired_zipf_exponent: f64,
    /// Inclusive range of transcript lengths.
    pub sentence_length: (usize, usize),
    /// Inclusive range of prototype durations in frames.
    pub frames_per_token: (usize, usize),
    pub feature_dim: usize,
    pub frame_period_ms: u32,
    pub noise_sigma: f64,
    /// Noise of the harder test set; must exceed `noise_sigma`.
    pub other_noise_sigma: f64,
    pub speaker_gain: (f64, f64),
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 60,
            zipf_exponent: 1.5,
            unpaired_zipf_exponent: 0.7,
            sentence_length: (3, 8),
            frames_per_token: (2, 5),
            feature_dim: 16,
            frame_period_ms: 10,
            noise_sigma: 0.5,
            other_noise_sigma: 1.0,
            speaker_gain: (0.7, 1.3),
            sizes: SplitSizes { paired: 200, audio_only: 2000, text_only: 10000, test_clean: 100, test_other: 100 },
            seed: 1,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let s = &self.sizes;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if [s.paired, s.audio_only, s.text_only, s.test_clean, s.test_other].contains(&0) {
            return bad("split sizes must be positive");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if !(self.noise_sigma >= 0.0) || self.other_noise_sigma <= self.noise_sigma {
            return bad("need 0 <= noise_sigma < other_noise_sigma");
        }
        let (lo, hi) = self.sentence_length;
        if lo == 0 || lo > hi {
            return bad("sentence_length must be a non-empty range starting at >= 1");
        }
        let (lo, hi) = self.frames_per_token;
        if lo == 0 || lo > hi {
            return bad("frames_per_token must be a non-empty range starting at >= 1");
        }
        if self.feature_dim == 0 || self.frame_period_ms == 0 {
            return bad("feature_dim and frame_period_ms must be positive");
        }
        let (g0, g1) = self.speaker_gain;
        if !(g0 > 0.0 && g0 <= g1) {
            return bad("speaker_gain must be a positive range");
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::synthetic(self.vocab_size)
    }
}

/// SplitMix64 finaliser, used to derive independent per-record seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, stream), index))
}

const STREAM_PROTOTYPES: u64 = 1;
const STREAM_PAIRED: u64 = 2;
const STREAM_AUDIO: u64 = 3;
const STREAM_TEXT: u64 = 4;
const STREAM_CLEAN: u64 = 5;
const STREAM_OTHER: u64 = 6;
pub(crate) const STREAM_TAIL: u64 = 7;

/// Per-token frame blocks drawn once from the corpus seed.
#[derive(Clone, Debug)]
pub struct PrototypeTable {
    /// Indexed by token id; entry 0 (blank) is empty.
    blocks: Vec<Array<Real>>,
    feature_dim: usize,
}

impl PrototypeTable {
    pub fn generate(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_for(spec.seed, STREAM_PROTOTYPES, 0);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut blocks = vec![Array::zeros(&[0, spec.feature_dim])];
        for _ in 1..spec.vocab_size {
            let dur = rng.gen_range(spec.frames_per_token.0..=spec.frames_per_token.1);
            let data = (0..dur * spec.feature_dim).map(|_| normal.sample(&mut rng)).collect();
            blocks.push(Array::new(vec![dur, spec.feature_dim], data)?);
        }
        Ok(Self { blocks, feature_dim: spec.feature_dim })
    }

    pub fn block(&self, id: u32) -> Result<&Array<Real>> {
        match self.blocks.get(id as usize) {
            Some(b) if id != BLANK_ID => Ok(b),
            _ => Err(Error::Vocabulary { id, size: self.blocks.len() }),
        }
    }

    pub fn duration(&self, id: u32) -> Result<usize> {
        Ok(self.block(id)?.shape()[0])
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.blocks.len()
    }

    /// Noise-free, unit-gain rendering of `y`.
    pub fn render(&self, y: &TokenSequence, frame_period_ms: u32) -> Result<FeatureSequence<Real>> {
        let mut data = Vec::new();
        let mut n = 0;
        for &id in y.ids() {
            let b = self.block(id)?;
            data.extend_from_slice(b.data());
            n += b.shape()[0];
        }
        FeatureSequence::new(Array::new(vec![n, self.feature_dim], data)?, frame_period_ms)
    }
}

/// Renders `y` with a per-utterance gain drawn from `speaker_gain` and
/// i.i.d. Gaussian noise of standard deviation `noise_sigma`.
pub fn synthesize_utterance<R: Rng + ?Sized>(
    y: &TokenSequence,
    table: &PrototypeTable,
    spec: &CorpusSpec,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<FeatureSequence<Real>> {
    if y.is_empty() {
        return Err(Error::Input("cannot synthesise an empty transcript".into()));
    }
    let clean = table.render(y, spec.frame_period_ms)?;
    let (g0, g1) = spec.speaker_gain;
    let gain = if g0 == g1 { g0 } else { rng.gen_range(g0..g1) };
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut frames = clean.into_frames();
    for v in frames.data_mut() {
        *v = *v * gain + if noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
    }
    FeatureSequence::new(frames, spec.frame_period_ms)
}

/// Zipf sampler over non-blank ids; id 1 has rank 1.
#[derive(Clone, Debug)]
pub struct ZipfTokens {
    dist: WeightedIndex<f64>,
}

impl ZipfTokens {
    pub fn new(vocab_size: usize, exponent: f64) -> Result<Self> {
        let weights: Vec<f64> = (1..vocab_size).map(|r| (r as f64).powf(-exponent)).collect();
        let dist = WeightedIndex::new(weights).map_err(|e| Error::Parameter(e.to_string()))?;
        Ok(Self { dist })
    }

    pub fn sentence<R: Rng + ?Sized>(&self, len: (usize, usize), rng: &mut R) -> TokenSequence {
        let n = rng.gen_range(len.0..=len.1);
        TokenSequence((0..n).map(|_| self.dist.sample(rng) as u32 + 1).collect())
    }
}

/// One utterance or transcript of a split. `tokens` is `None` for
/// audio-only records, `features` is `None` for text-only records.
#[derive(Clone, Debug)]
pub struct Record {
    pub id: String,
    pub tokens: Option<TokenSequence>,
    pub features: Option<FeatureSequence<Real>>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub vocab: Vocabulary,
    pub prototypes: PrototypeTable,
    pub paired: Vec<Record>,
    pub audio_only: Vec<Record>,
    /// Transcripts the audio-only pool was rendered from. Kept in memory for
    /// measurement only; never written to disk.
    pub audio_only_truth: Vec<TokenSequence>,
    pub text_only: Vec<Record>,
    pub test_clean: Vec<Record>,
    pub test_other: Vec<Record>,
}

impl Corpus {
    pub fn paired_texts(&self) -> Vec<TokenSequence> {
        self.paired.iter().filter_map(|r| r.tokens.clone()).collect()
    }

    pub fn text_only_texts(&self) -> Vec<TokenSequence> {
        self.text_only.iter().filter_map(|r| r.tokens.clone()).collect()
    }
}

/// Generates every split from `spec`. Identical specs give bit-identical corpora.
pub fn generate_splits(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let vocab = spec.vocabulary()?;
    let prototypes = PrototypeTable::generate(spec)?;
    let paired_lm = ZipfTokens::new(spec.vocab_size, spec.zipf_exponent)?;
    let general_lm = ZipfTokens::new(spec.vocab_size, spec.unpaired_zipf_exponent)?;

    let audio = |stream: u64, prefix: &str, n: usize, lm: &ZipfTokens, sigma: f64| -> Result<Vec<(Record, TokenSequence)>> {
        (0..n)
            .map(|i| {
                let mut rng = rng_for(spec.seed, stream, i as u64);
                let y = lm.sentence(spec.sentence_length, &mut rng);
                let x = synthesize_utterance(&y, &prototypes, spec, sigma, &mut rng)?;
                let rec = Record { id: format!("{prefix}-{i:06}"), tokens: Some(y.clone()), features: Some(x) };
                Ok((rec, y))
            })
            .collect()
    };

    let paired = audio(STREAM_PAIRED, "s", spec.sizes.paired, &paired_lm, spec.noise_sigma)?;
    let ua = audio(STREAM_AUDIO, "ua", spec.sizes.audio_only, &general_lm, spec.noise_sigma)?;
    let clean = audio(STREAM_CLEAN, "clean", spec.sizes.test_clean, &general_lm, spec.noise_sigma)?;
    let other = audio(STREAM_OTHER, "other", spec.sizes.test_other, &general_lm, spec.other_noise_sigma)?;
    let text_only = (0..spec.sizes.text_only)
        .map(|i| {
            let mut rng = rng_for(spec.seed, STREAM_TEXT, i as u64);
            let y = general_lm.sentence(spec.sentence_length, &mut rng);
            Record { id: format!("ut-{i:06}"), tokens: Some(y), features: None }
        })
        .collect();

    let (audio_only, audio_only_truth) = ua
        .into_iter()
        .map(|(mut r, y)| {
            r.tokens = None;
            (r, y)
        })
        .unzip();
    Ok(Corpus {
        spec: spec.clone(),
        vocab,
        prototypes,
        paired: paired.into_iter().map(|p| p.0).collect(),
        audio_only,
        audio_only_truth,
        text_only,
        test_clean: clean.into_iter().map(|p| p.0).collect(),
        test_other: other.into_iter().map(|p| p.0).collect(),
    })
}

/// Relative unigram frequencies over a text collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Unigrams {
    counts: BTreeMap<u32, u64>,
    total: u64,
}

impl Unigrams {
    /// Frequency of `id`; zero when unobserved.
    pub fn freq(&self, id: u32) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.counts.get(&id).map_or(0.0, |&c| c as f64 / self.total as f64)
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.counts.keys().map(|&k| (k, self.freq(k)))
    }
}

pub fn unigram_frequencies<'a>(texts: impl IntoIterator<Item = &'a TokenSequence>) -> Unigrams {
    let mut u = Unigrams::default();
    for t in texts {
        for &id in t.ids() {
            *u.counts.entry(id).or_insert(0) += 1;
            u.total += 1;
        }
    }
    u
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            sizes: SplitSizes { paired: 20, audio_only: 30, text_only: 40, test_clean: 5, test_other: 6 },
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn split_counts_match_spec() {
        let spec = CorpusSpec {
            sizes: SplitSizes { paired: 200, audio_only: 2000, text_only: 10000, test_clean: 100, test_other: 100 },
            ..CorpusSpec::default()
        };
        let c = generate_splits(&spec).unwrap();
        assert_eq!(c.paired.len(), 200);
        assert_eq!(c.audio_only.len(), 2000);
        assert_eq!(c.text_only.len(), 10000);
        assert_eq!(c.test_clean.len(), 100);
        assert_eq!(c.test_other.len(), 100);
        assert!(c.audio_only.iter().all(|r| r.tokens.is_none() && r.features.is_some()));
        assert!(c.text_only.iter().all(|r| r.features.is_none()));
    }

    #[test]
    fn noiseless_unit_gain_is_concatenation() {
        let spec = CorpusSpec { noise_sigma: 0.0, other_noise_sigma: 0.5, speaker_gain: (1.0, 1.0), ..small_spec() };
        let table = PrototypeTable::generate(&spec).unwrap();
        let y = TokenSequence(vec![3, 1, 7]);
        let x = synthesize_utterance(&y, &table, &spec, 0.0, &mut rng_for(0, 0, 0)).unwrap();
        let mut expected = Vec::new();
        for id in [3, 1, 7] {
            expected.extend_from_slice(table.block(id).unwrap().data());
        }
        assert_eq!(x.frames().data(), &expected[..]);
    }

    #[test]
    fn repeated_token_blocks_identical_without_noise() {
        let spec = CorpusSpec { noise_sigma: 0.0, other_noise_sigma: 0.5, ..small_spec() };
        let table = PrototypeTable::generate(&spec).unwrap();
        let id = (1..spec.vocab_size as u32).find(|&i| table.duration(i).unwrap() == 3).unwrap();
        let y = TokenSequence(vec![id, 2, id]);
        let x = synthesize_utterance(&y, &table, &spec, 0.0, &mut rng_for(1, 2, 3)).unwrap();
        let d2 = table.duration(2).unwrap();
        let (a, b) = (0..3, 3 + d2..6 + d2);
        for (i, j) in a.zip(b) {
            assert_eq!(x.frame(i), x.frame(j));
        }
    }

    #[test]
    fn two_speakers_same_length_different_values() {
        let spec = small_spec();
        let table = PrototypeTable::generate(&spec).unwrap();
        let y = TokenSequence(vec![5, 9, 2]);
        let a = synthesize_utterance(&y, &table, &spec, spec.noise_sigma, &mut rng_for(0, 0, 1)).unwrap();
        let b = synthesize_utterance(&y, &table, &spec, spec.noise_sigma, &mut rng_for(0, 0, 2)).unwrap();
        assert_eq!(a.num_frames(), b.num_frames());
        assert_ne!(a, b);
    }

    #[test]
    fn unknown_token_is_vocabulary_error() {
        let spec = small_spec();
        let table = PrototypeTable::generate(&spec).unwrap();
        let err = synthesize_utterance(&TokenSequence(vec![999]), &table, &spec, 0.0, &mut rng_for(0, 0, 0));
        assert!(matches!(err, Err(Error::Vocabulary { id: 999, .. })));
        assert!(matches!(table.block(0), Err(Error::Vocabulary { id: 0, .. })));
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = generate_splits(&small_spec()).unwrap();
        let b = generate_splits(&small_spec()).unwrap();
        for (x, y) in a.paired.iter().zip(&b.paired) {
            assert_eq!(x.tokens, y.tokens);
            let (fx, fy) = (x.features.as_ref().unwrap(), y.features.as_ref().unwrap());
            assert!(fx.frames().data().iter().zip(fy.frames().data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_eq!(a.audio_only_truth, b.audio_only_truth);
    }

    #[test]
    fn first_prototype_frames_are_distinct() {
        // Distinct first frames make rendering injective on token sequences.
        let spec = CorpusSpec::default();
        let table = PrototypeTable::generate(&spec).unwrap();
        for a in 1..spec.vocab_size as u32 {
            for b in a + 1..spec.vocab_size as u32 {
                let (fa, fb) = (table.block(a).unwrap().row(0), table.block(b).unwrap().row(0));
                assert_ne!(fa, fb, "tokens {a} and {b}");
            }
        }
    }

    #[test]
    fn unigram_examples() {
        let u = unigram_frequencies([&TokenSequence(vec![1, 2, 1])]);
        assert!((u.freq(1) - 2.0 / 3.0).abs() < 1e-15);
        assert!((u.freq(2) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(u.freq(3), 0.0);
        let texts = [TokenSequence(vec![1, 2]), TokenSequence(vec![2, 1])];
        let u = unigram_frequencies(&texts);
        assert_eq!(u.freq(1), 0.5);
        assert_eq!(u.freq(2), 0.5);
    }

    #[test]
    fn paired_frequencies_sum_to_one() {
        let c = generate_splits(&CorpusSpec::default()).unwrap();
        let texts = c.paired_texts();
        let u = unigram_frequencies(&texts);
        let s: f64 = u.iter().map(|(_, f)| f).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ids_are_disjoint_across_splits() {
        let c = generate_splits(&small_spec()).unwrap();
        let mut ids = std::collections::HashSet::new();
        for r in c.paired.iter().chain(&c.audio_only).chain(&c.text_only).chain(&c.test_clean).chain(&c.test_other) {
            assert!(ids.insert(r.id.clone()), "duplicate id {}", r.id);
        }
    }

    #[test]
    fn other_noise_must_exceed_clean() {
        let spec = CorpusSpec { other_noise_sigma: 0.5, noise_sigma: 0.5, ..small_spec() };
        assert!(spec.validate().is_err());
    }
}
