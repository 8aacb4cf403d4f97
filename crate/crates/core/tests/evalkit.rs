mod common;

use std::collections::HashMap;

use common::{edit_distance, rng, toy};
use duplex::corpus::{build_tail_set, write_corpus, TailSetConfig, TokenSequence};
use duplex::decode::FusionConfig;
use duplex::evalkit::{
    append_cell, evaluate, evaluate_records, gap_closing_ratio, median, read_cells, report_tables, sweep, sweep_records, wer, Column,
    EvalCell, ResultTable, WerReport,
};
use duplex::models::DuplexModel;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_seq(r: &mut impl Rng, max_len: usize, min_len: usize) -> Vec<u32> {
    let n = r.gen_range(min_len..=max_len);
    (0..n).map(|_| r.gen_range(1..=3)).collect()
}

fn check_against_brute_force(r: &[u32], h: &[u32]) {
    let rep = wer(&TokenSequence::new(r.to_vec()), &TokenSequence::new(h.to_vec())).unwrap();
    assert_eq!(rep.errors(), edit_distance(r, h), "{r:?} vs {h:?}");
    // The counts describe an alignment: the matched tokens agree on both sides.
    assert!(rep.substitutions + rep.deletions <= r.len());
    assert_eq!(r.len() - rep.deletions, h.len() - rep.insertions);
    assert_eq!(rep.reference_len, r.len());
    assert!((rep.wer - 100.0 * rep.errors() as f64 / r.len() as f64).abs() < 1e-12);
}

#[test]
fn wer_matches_brute_force_on_short_sequences() {
    // Every pair up to length 3, then random pairs up to length 6.
    let all: Vec<Vec<u32>> = common::search::all_sequences(4, 3).into_iter().map(|y| y.ids().to_vec()).collect();
    for r in all.iter().filter(|r| !r.is_empty()) {
        for h in &all {
            check_against_brute_force(r, h);
        }
    }
    let mut g = rng(99);
    for _ in 0..400 {
        let r = random_seq(&mut g, 6, 1);
        let h = random_seq(&mut g, 6, 0);
        check_against_brute_force(&r, &h);
    }
}

#[test]
fn pooled_wer_is_order_free_and_recomputable() {
    let mut g = rng(3);
    let reports: Vec<WerReport> = (0..30)
        .map(|_| {
            let (r, h) = (random_seq(&mut g, 6, 1), random_seq(&mut g, 6, 0));
            wer(&TokenSequence::new(r), &TokenSequence::new(h)).unwrap()
        })
        .collect();
    let pooled = WerReport::pooled(&reports).unwrap();
    let errors: usize = reports.iter().map(|r| r.errors()).sum();
    let words: usize = reports.iter().map(|r| r.reference_len).sum();
    assert_eq!(pooled.wer, 100.0 * errors as f64 / words as f64);
    let mut shuffled = reports.clone();
    shuffled.shuffle(&mut g);
    assert_eq!(WerReport::pooled(&shuffled).unwrap(), pooled);
    assert!(WerReport::pooled(&[]).is_err());
}

#[test]
fn ratio_and_median_helpers() {
    assert_eq!(gap_closing_ratio(30.0, 20.0, 25.0, 20.0), Some(0.5));
    assert_eq!(gap_closing_ratio(20.0, 20.0, 18.0, 17.0), None);
    assert_eq!(median(&[5.0, 1.0, 9.0]), Some(5.0));
}

fn model() -> DuplexModel {
    DuplexModel::new(&toy::model_config(), 4).unwrap()
}

#[test]
fn zero_weight_cell_equals_plain_evaluation() {
    let m = model();
    let corpus = toy::corpus(10);
    let lm = common::search::tiny_lm(1, toy::VOCAB);
    let plain = evaluate_records(&m, &corpus.test_clean, &FusionConfig::no_lm(4), None).unwrap();
    let grid = sweep_records(&m, &corpus.test_clean, &[0.0, 0.3], &[0.0, 0.1], 4, Some(&lm)).unwrap();
    assert_eq!(grid.cell(0.0, 0.0), Some(plain.report.wer));
    assert!(grid.best().0 <= plain.report.wer);
    let single = sweep_records(&m, &corpus.test_clean, &[0.3], &[0.1], 4, Some(&lm)).unwrap();
    let fused = evaluate_records(&m, &corpus.test_clean, &FusionConfig::new(0.3, 0.1, 4), Some(&lm)).unwrap();
    assert_eq!(single.wer, vec![vec![fused.report.wer]]);
    assert!(sweep_records(&m, &corpus.test_clean, &[], &[0.0], 4, None).is_err());
}

#[test]
fn manifest_evaluation_matches_in_memory_records() {
    let m = model();
    let corpus = toy::corpus(10);
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&corpus, dir.path()).unwrap();
    let manifest = dir.path().join("test_other.jsonl");
    let from_disk = evaluate(&m, &manifest, &FusionConfig::no_lm(2), None).unwrap();
    // Stored features are single precision.
    let mut rounded = corpus.test_other.clone();
    for r in &mut rounded {
        let x = r.features.as_mut().unwrap();
        *x = duplex::Features::new(x.frames().map(|v| v as f32 as f64), x.frame_period_ms).unwrap();
    }
    let in_memory = evaluate_records(&m, &rounded, &FusionConfig::no_lm(2), None).unwrap();
    assert_eq!(from_disk.report, in_memory.report);
    assert_eq!(from_disk.utterances.len(), corpus.test_other.len());
    let grid = sweep(&m, &manifest, &[0.0], &[0.0], 2, None).unwrap();
    assert_eq!(grid.wer[0][0], from_disk.report.wer);
}

#[test]
fn tail_set_satisfies_its_predicate() {
    let corpus = toy::corpus(10);
    let paired = corpus.paired_texts();
    let text = corpus.text_only_texts();
    let freq = |pool: &[TokenSequence]| {
        let mut counts: HashMap<u32, usize> = HashMap::new();
        let total: usize = pool.iter().map(|y| y.len()).sum();
        pool.iter().flat_map(|y| y.ids()).for_each(|&id| *counts.entry(id).or_default() += 1);
        move |id: u32| *counts.get(&id).unwrap_or(&0) as f64 / total as f64
    };
    let (fs, ft) = (freq(&paired), freq(&text));
    let tau = 0.05;
    let cfg = TailSetConfig { tau, target_size: 5, seed: 2 };
    match build_tail_set(&paired, &text, &corpus.prototypes, &corpus.spec, &cfg) {
        Ok(set) => {
            assert!(!set.is_empty() && set.len() <= 5);
            for r in &set {
                let y = r.tokens.as_ref().unwrap();
                assert!(y.ids().iter().any(|&id| fs(id) < tau && ft(id) > tau), "{y:?}");
                assert!(text.contains(y));
                assert!(r.features.as_ref().unwrap().num_frames() >= y.len());
            }
        }
        Err(e) => {
            assert!(matches!(e, duplex::Error::EmptyTailSet));
            assert!((1..toy::VOCAB as u32).all(|id| !(fs(id) < tau && ft(id) > tau)));
        }
    }
}

#[test]
fn tables_use_the_three_decoding_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cell = |model: &str, column, w: f64| EvalCell {
        model: model.into(),
        testset: "test_clean".into(),
        column,
        report: WerReport { substitutions: 0, deletions: 0, insertions: 0, reference_len: 1, wer: w },
    };
    append_cell(dir.path(), &cell("E-ALL", Column::NoLm, 9.0)).unwrap();
    append_cell(dir.path(), &cell("BASELINE", Column::NoLm, 10.0)).unwrap();
    append_cell(dir.path(), &cell("BASELINE", Column::ShallowFusion, 8.0)).unwrap();
    append_cell(dir.path(), &cell("BASELINE", Column::NoLm, 12.0)).unwrap();
    assert_eq!(read_cells(dir.path()).unwrap().len(), 3);
    let tables = report_tables(dir.path()).unwrap();
    assert_eq!(tables.len(), 1);
    let t: &ResultTable = &tables[0];
    assert_eq!(t.rows[0].model, "BASELINE");
    assert_eq!(t.rows[0].cells, [Some(12.0), Some(8.0), None]);
    let text = t.render();
    assert!(text.contains("Baseline") && text.contains("Shallow Fusion") && text.contains("Internal LM"));
    let imp = t.improvements();
    assert!((imp[0].1[0].unwrap() - 25.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn wer_of_identity_is_zero_and_bounded_by_lengths(
        r in prop::collection::vec(1u32..4, 1..7),
        h in prop::collection::vec(1u32..4, 0..7),
    ) {
        let same = wer(&TokenSequence::new(r.clone()), &TokenSequence::new(r.clone())).unwrap();
        prop_assert_eq!(same.errors(), 0);
        let rep = wer(&TokenSequence::new(r.clone()), &TokenSequence::new(h.clone())).unwrap();
        prop_assert!(rep.errors() <= r.len().max(h.len()));
        prop_assert!(rep.errors() >= r.len().abs_diff(h.len()));
    }
}
