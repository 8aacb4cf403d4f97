//! JSONL manifests and binary feature files.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Corpus, Record, TokenSequence};
use crate::error::{Error, Result};
use crate::frontend::FeatureSequence;
use crate::tensor::Array;
use crate::Real;

pub const FEATURE_MAGIC: &[u8; 4] = b"DLXF";
pub const FEATURE_VERSION: u32 = 1;

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub tokens: Option<Vec<u32>>,
    pub feature_file: Option<String>,
    pub num_frames: Option<usize>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

/// Features are stored as little-endian f32.
pub fn write_feature_file(path: &Path, x: &FeatureSequence<Real>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(x.num_frames() as u32).to_le_bytes())?;
    w.write_all(&(x.dim() as u32).to_le_bytes())?;
    for &v in x.frames().data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_file(path: &Path, frame_period_ms: u32) -> Result<FeatureSequence<Real>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(format_err(path, "missing DLXF header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != FEATURE_VERSION {
        return Err(format_err(path, format!("unsupported version {}", word(4))));
    }
    let (n, d) = (word(8) as usize, word(12) as usize);
    if bytes.len() != 16 + 4 * n * d {
        return Err(format_err(path, format!("expected {n}x{d} floats, file has {} bytes", bytes.len())));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as Real)
        .collect();
    FeatureSequence::new(Array::new(vec![n, d], data)?, frame_period_ms)
}

/// Writes `<dir>/<name>.jsonl` and one feature file per audio record under
/// `<dir>/feats/`. Feature paths in the manifest are relative to `dir`.
pub fn write_split(dir: &Path, name: &str, records: &[Record]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("feats"))?;
    let path = dir.join(format!("{name}.jsonl"));
    let mut w = BufWriter::new(File::create(&path)?);
    for r in records {
        let (feature_file, num_frames) = match &r.features {
            Some(x) => {
                let rel = format!("feats/{}.dlxf", r.id);
                write_feature_file(&dir.join(&rel), x)?;
                (Some(rel), Some(x.num_frames()))
            }
            None => (None, None),
        };
        let entry = ManifestEntry {
            id: r.id.clone(),
            tokens: r.tokens.as_ref().map(|t| t.ids().to_vec()),
            feature_file,
            num_frames,
        };
        serde_json::to_writer(&mut w, &entry)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

/// Loads a manifest and its feature files into records.
pub fn load_split(path: &Path, frame_period_ms: u32) -> Result<Vec<Record>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?
        .into_iter()
        .map(|e| {
            let features = match &e.feature_file {
                Some(f) => {
                    let x = read_feature_file(&base.join(f), frame_period_ms)?;
                    if e.num_frames.is_some_and(|n| n != x.num_frames()) {
                        return Err(format_err(path, format!("{}: num_frames disagrees with feature file", e.id)));
                    }
                    Some(x)
                }
                None => None,
            };
            Ok(Record { id: e.id, tokens: e.tokens.map(TokenSequence), features })
        })
        .collect()
}

/// SHA-256 over every split's ids, transcripts and f32-rounded features.
pub fn content_hash(corpus: &Corpus) -> String {
    let mut h = Sha256::new();
    let splits = [&corpus.paired, &corpus.audio_only, &corpus.text_only, &corpus.test_clean, &corpus.test_other];
    for records in splits {
        h.update((records.len() as u64).to_le_bytes());
        for r in records.iter() {
            h.update(r.id.as_bytes());
            if let Some(t) = &r.tokens {
                for id in t.ids() {
                    h.update(id.to_le_bytes());
                }
            }
            h.update([0xff]);
            if let Some(x) = &r.features {
                for &v in x.frames().data() {
                    h.update((v as f32).to_le_bytes());
                }
            }
        }
    }
    hex(&h.finalize())
}

/// SHA-256 of the JSON form of `value`.
pub fn hash_json(value: &impl serde::Serialize) -> Result<String> {
    Ok(hex(&Sha256::digest(serde_json::to_vec(value)?)))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the spec, every split and a small index with the content hash.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<String> {
    fs::create_dir_all(dir)?;
    serde_json::to_writer_pretty(File::create(dir.join("corpus_spec.json"))?, &corpus.spec)?;
    write_split(dir, "paired", &corpus.paired)?;
    write_split(dir, "audio_only", &corpus.audio_only)?;
    write_split(dir, "text_only", &corpus.text_only)?;
    write_split(dir, "test_clean", &corpus.test_clean)?;
    write_split(dir, "test_other", &corpus.test_other)?;
    let hash = content_hash(corpus);
    let index = serde_json::json!({
        "content_hash": hash,
        "vocab_size": corpus.vocab.size(),
        "splits": {
            "paired": corpus.paired.len(),
            "audio_only": corpus.audio_only.len(),
            "text_only": corpus.text_only.len(),
            "test_clean": corpus.test_clean.len(),
            "test_other": corpus.test_other.len(),
        }
    });
    serde_json::to_writer_pretty(File::create(dir.join("corpus.json"))?, &index)?;
    Ok(hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_splits, CorpusSpec, SplitSizes};

    #[test]
    fn feature_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.dlxf");
        let x = FeatureSequence::new(Array::new(vec![2, 3], vec![0.5, 1.0, -2.0, 3.25, 0.0, 7.0]).unwrap(), 10).unwrap();
        write_feature_file(&p, &x).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"DLXF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 0.5);
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(read_feature_file(&p, 10).unwrap(), x);
    }

    #[test]
    fn truncated_feature_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.dlxf");
        let x = FeatureSequence::new(Array::filled(&[4, 2], 1.0), 10).unwrap();
        write_feature_file(&p, &x).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_feature_file(&p, 10), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_round_trip_hides_audio_only_transcripts() {
        let spec = CorpusSpec {
            sizes: SplitSizes { paired: 3, audio_only: 4, text_only: 5, test_clean: 2, test_other: 2 },
            ..CorpusSpec::default()
        };
        let corpus = generate_splits(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&corpus, dir.path()).unwrap();
        let ua = read_manifest(&dir.path().join("audio_only.jsonl")).unwrap();
        assert_eq!(ua.len(), 4);
        assert!(ua.iter().all(|e| e.tokens.is_none() && e.feature_file.is_some()));
        let text = fs::read_to_string(dir.path().join("audio_only.jsonl")).unwrap();
        assert!(text.contains("\"tokens\":null"));
        let ut = read_manifest(&dir.path().join("text_only.jsonl")).unwrap();
        assert!(ut.iter().all(|e| e.feature_file.is_none() && e.num_frames.is_none()));

        let paired = load_split(&dir.path().join("paired.jsonl"), 10).unwrap();
        for (a, b) in paired.iter().zip(&corpus.paired) {
            assert_eq!(a.tokens, b.tokens);
            let (fa, fb) = (a.features.as_ref().unwrap(), b.features.as_ref().unwrap());
            assert!(fa.frames().max_abs_diff(fb.frames()) < 1e-6);
        }
    }

    #[test]
    fn content_hash_is_stable_and_seed_sensitive() {
        let spec = CorpusSpec {
            sizes: SplitSizes { paired: 3, audio_only: 3, text_only: 3, test_clean: 1, test_other: 1 },
            ..CorpusSpec::default()
        };
        let a = content_hash(&generate_splits(&spec).unwrap());
        assert_eq!(a, content_hash(&generate_splits(&spec).unwrap()));
        let other = CorpusSpec { seed: 2, ..spec };
        assert_ne!(a, content_hash(&generate_splits(&other).unwrap()));
    }
}
