mod common;

use common::{random_array, rng};
use duplex::corpus::TokenSequence;
use duplex::models::layers::Ctx;
use duplex::models::{
    load_models, save_models, DelayedEncoder, DuplexModel, ElmConfig, EncoderConfig, LanguageModel, ModelConfig, StreamingEncoder,
};
use duplex::tensor::{Array, ParamStore, Tape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn enc_cfg(layers: usize, r: usize) -> EncoderConfig {
    EncoderConfig { num_layers: layers, model_dim: 16, num_heads: 2, ffn_dim: 24, right_context_frames: r }
}

fn run<F: Fn(&Ctx) -> duplex::tensor::Var>(params: &ParamStore<f64>, f: F) -> Array<f64> {
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, params);
    let v = f(&ctx);
    let out = tape.value(v).clone();
    out
}

fn rows_equal(a: &Array<f64>, b: &Array<f64>, row: usize) -> bool {
    a.row(row).iter().zip(b.row(row)).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn streaming_output_ignores_future_frames() {
    let mut r = rng(1);
    for layers in 1..=3 {
        let mut store = ParamStore::new();
        let enc = StreamingEncoder::new(&mut store, "s", 8, &enc_cfg(layers, 0), &mut r).unwrap();
        for _ in 0..5 {
            let n = r.gen_range(2..12);
            let x = random_array(&[n, 8], &mut r);
            let j = r.gen_range(1..n);
            let mut xp = x.clone();
            xp.data_mut()[j * 8 + r.gen_range(0..8)] += 1.0;
            let a = run(&store, |c| enc.forward(c, c.tape.constant(x.clone())).unwrap());
            let b = run(&store, |c| enc.forward(c, c.tape.constant(xp.clone())).unwrap());
            for t in 0..j {
                assert!(rows_equal(&a, &b, t), "layers {layers}: row {t} moved after perturbing {j}");
            }
            assert!(!rows_equal(&a, &b, j));
        }
    }
}

#[test]
fn delayed_output_sees_exactly_r_future_frames() {
    let mut r = rng(2);
    for layers in 1..=3 {
        let rc = r.gen_range(1..4);
        let mut store = ParamStore::new();
        let enc = DelayedEncoder::new(&mut store, "d", &enc_cfg(layers, rc), &mut r).unwrap();
        for _ in 0..5 {
            let n = r.gen_range(rc + 2..14);
            let h = random_array(&[n, 16], &mut r);
            let j = r.gen_range(rc + 1..n);
            let mut hp = h.clone();
            hp.data_mut()[j * 16 + r.gen_range(0..16)] += 1.0;
            let a = run(&store, |c| enc.forward(c, c.tape.constant(h.clone())).unwrap());
            let b = run(&store, |c| enc.forward(c, c.tape.constant(hp.clone())).unwrap());
            for t in 0..j - rc {
                assert!(rows_equal(&a, &b, t), "layers {layers} R={rc}: row {t} moved after perturbing {j}");
            }
            assert!(!rows_equal(&a, &b, j - rc), "row {} should see frame {j}", j - rc);
        }
    }
}

#[test]
fn incremental_streaming_matches_full_pass() {
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let enc = StreamingEncoder::new(&mut store, "s", 8, &enc_cfg(2, 0), &mut r).unwrap();
    let x = random_array(&[20, 8], &mut r);
    let full = run(&store, |c| enc.forward(c, c.tape.constant(x.clone())).unwrap());
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &store);
    let mut state = enc.start();
    for t in 0..20 {
        let frame = tape.constant(Array::new(vec![1, 8], x.row(t).to_vec()).unwrap());
        let out = enc.step(&ctx, &mut state, frame).unwrap();
        let v = tape.value(out);
        for (a, b) in v.data().iter().zip(full.row(t)) {
            assert!((a - b).abs() <= 1e-9, "frame {t}: {a} vs {b}");
        }
    }
}

#[test]
fn single_frame_in_single_frame_out() {
    let mut store = ParamStore::new();
    let enc = StreamingEncoder::new(&mut store, "s", 8, &enc_cfg(2, 0), &mut rng(4)).unwrap();
    let x = random_array(&[1, 8], &mut rng(5));
    assert_eq!(run(&store, |c| enc.forward(c, c.tape.constant(x.clone())).unwrap()).shape(), &[1, 16]);
}

#[test]
fn streaming_config_rejects_lookahead() {
    let mut store = ParamStore::new();
    assert!(StreamingEncoder::new(&mut store, "s", 8, &enc_cfg(1, 2), &mut rng(6)).is_err());
}

#[test]
fn text_encoder_uses_both_directions() {
    let model = DuplexModel::new(&ModelConfig::default(), 3).unwrap();
    let a = run(&model.params, |c| model.enc_t.forward(c, &TokenSequence::new(vec![4, 9, 2, 7, 7])).unwrap());
    let b = run(&model.params, |c| model.enc_t.forward(c, &TokenSequence::new(vec![4, 9, 2, 7, 8])).unwrap());
    assert!(!rows_equal(&a, &b, 0), "first position must see the last token");
    let p = run(&model.params, |c| model.enc_t.forward(c, &TokenSequence::new(vec![7, 7, 2, 9, 4])).unwrap());
    assert!(!rows_equal(&a, &p, 2), "output depends on order");
    assert!(model.enc_t.forward(&Ctx::eval(&Tape::new(), &model.params), &TokenSequence::new(vec![])).is_err());
    assert!(model.enc_t.forward(&Ctx::eval(&Tape::new(), &model.params), &TokenSequence::new(vec![60])).is_err());
}

fn teacher_forced_frames(model: &DuplexModel, train: Option<u64>) -> Array<f64> {
    let y = TokenSequence::new(vec![3, 1, 4]);
    let target = random_array(&[9, 16], &mut rng(7));
    let tape = Tape::new();
    let mut ctx = match train {
        Some(s) => Ctx::train(&tape, &model.params, ChaCha8Rng::seed_from_u64(s)),
        None => Ctx::eval(&tape, &model.params),
    };
    let m = model.enc_t.forward(&ctx, &y).unwrap();
    let out = model.dec_a.teacher_forced(&mut ctx, m, &target).unwrap();
    let v = tape.value(out.frames).clone();
    v
}

#[test]
fn teacher_forcing_without_prenet_has_no_dropout() {
    let model = DuplexModel::new(&ModelConfig::default(), 5).unwrap();
    assert_eq!(teacher_forced_frames(&model, None), teacher_forced_frames(&model, Some(1)));
    assert_eq!(teacher_forced_frames(&model, Some(1)), teacher_forced_frames(&model, Some(2)));
}

#[test]
fn prenet_dropout_is_seeded_and_train_only() {
    let mut cfg = ModelConfig::default();
    cfg.audio_decoder.feed_previous_frame = true;
    let model = DuplexModel::new(&cfg, 5).unwrap();
    let frames = |train| teacher_forced_frames(&model, train);
    assert_eq!(frames(None), frames(None));
    assert_eq!(frames(Some(1)), frames(Some(1)));
    assert_ne!(frames(Some(1)), frames(Some(2)));
    assert_ne!(frames(None), frames(Some(1)));
}

#[test]
fn synthesis_stops_within_the_frame_budget() {
    let model = DuplexModel::new(&ModelConfig::default(), 6).unwrap();
    let x = model.synthesize(&TokenSequence::new(vec![5, 6, 7])).unwrap();
    assert!(x.rows() >= 1 && x.rows() <= model.cfg.audio_decoder.max_decode_frames);
    assert_eq!(x.cols(), 16);
}

#[test]
fn bridges_are_affine() {
    let model = DuplexModel::new(&ModelConfig::default(), 7).unwrap();
    let mut r = rng(8);
    let (x, y) = (random_array(&[3, 64], &mut r), random_array(&[3, 64], &mut r));
    let map = |a: &Array<f64>| run(&model.params, |c| model.bridge.audio_to_text(c, c.tape.constant(a.clone())).unwrap());
    let zero = map(&Array::zeros(&[3, 64]));
    let sum = Array::new(vec![3, 64], x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect()).unwrap();
    let (fx, fy, fs) = (map(&x), map(&y), map(&sum));
    for i in 0..fs.len() {
        let lhs = fs.data()[i] - zero.data()[i];
        let rhs = (fx.data()[i] - zero.data()[i]) + (fy.data()[i] - zero.data()[i]);
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

#[test]
fn zeroed_lm_head_is_uniform() {
    let mut lm = LanguageModel::new(&ElmConfig::default(), 60, 1).unwrap();
    let (w, b) = lm.lm.output_params();
    lm.params.get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    if let Some(b) = b {
        lm.params.get_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let y = TokenSequence::new(vec![3, 17, 59, 1]);
    let (lp, _) = lm.lm.logprob(&lm.params, &y).unwrap();
    assert!((lp + 4.0 * 59f64.ln()).abs() < 1e-12);
}

#[test]
fn lm_increments_match_next_distributions_and_are_causal() {
    let lm = LanguageModel::new(&ElmConfig::default(), 12, 2).unwrap();
    let y = TokenSequence::new(vec![3, 7, 1, 11, 4]);
    let (total, inc) = lm.lm.logprob(&lm.params, &y).unwrap();
    for u in 0..y.len() {
        let d = lm.lm.next_distribution(&lm.params, &y.ids()[..u]).unwrap();
        assert!((d[y.ids()[u] as usize - 1] - inc[u]).abs() < 1e-12);
    }
    assert!((total - inc.iter().sum::<f64>()).abs() < 1e-12);
    let other = TokenSequence::new(vec![3, 7, 1, 2, 2]);
    let (_, inc2) = lm.lm.logprob(&lm.params, &other).unwrap();
    assert_eq!(&inc[..3], &inc2[..3]);
}

#[test]
fn parameter_counts_grow_with_sizes() {
    let small = ModelConfig::default();
    let mut big = small.clone();
    big.streaming.ffn_dim *= 2;
    big.delayed.num_layers += 1;
    big.text.embed_dim *= 2;
    big.audio_decoder.recurrent_dim *= 2;
    big.hat.joint_dim *= 2;
    let a = DuplexModel::new(&small, 1).unwrap().param_counts();
    let b = DuplexModel::new(&big, 1).unwrap().param_counts();
    let names: Vec<_> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["enc_s", "enc_d", "enc_t", "dec_a", "bridge", "hat"]);
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        assert!(y >= x, "{name}");
        assert!(*x > 0);
    }
    assert!(b[0].1 > a[0].1 && b[1].1 > a[1].1 && b[2].1 > a[2].1 && b[3].1 > a[3].1 && b[5].1 > a[5].1);
}

#[test]
fn checkpoint_round_trip_by_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dlxa");
    let model = DuplexModel::new(&ModelConfig::default(), 9).unwrap();
    let lm = LanguageModel::new(&ElmConfig::default(), 60, 9).unwrap();
    save_models(&path, &model, Some(&lm)).unwrap();
    let (back, back_lm) = load_models(&path, &ModelConfig::default(), Some(&ElmConfig::default())).unwrap();
    for (id, name, v) in model.params.iter() {
        let w = back.params.get(back.params.id(name).unwrap());
        assert!(v.data().iter().zip(w.data()).all(|(a, b)| *b == *a as f32 as f64), "{name}");
        let _ = id;
    }
    assert_eq!(back_lm.unwrap().params.len(), lm.params.len());
    save_models(&path, &model, None).unwrap();
    assert!(load_models(&path, &ModelConfig::default(), Some(&ElmConfig::default())).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forward_passes_are_finite(seed in 0u64..1000, n in 1usize..10) {
        let model = DuplexModel::new(&ModelConfig::default(), seed).unwrap();
        let x = random_array(&[n, 64], &mut rng(seed));
        let hd = model.encode_delayed(&x).unwrap();
        prop_assert!(hd.is_finite());
        prop_assert_eq!(hd.shape(), &[n, 64]);
    }
}
