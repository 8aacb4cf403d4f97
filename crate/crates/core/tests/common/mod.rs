#![allow(dead_code)]

use duplex::tensor::{Array, ParamStore, Tape, Var};
use duplex::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_array(shape: &[usize], rng: &mut ChaCha8Rng) -> Array<f64> {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`, zero when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let d = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let s = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if s == 0.0 {
        d
    } else {
        d / s
    }
}

/// Compares tape gradients of `f` w.r.t. every input against central differences.
/// Returns the worst norm-wise relative error over the inputs.
pub fn check_inputs<F>(inputs: &[Array<f64>], h: f64, f: F) -> f64
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = f(&tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let eval = |xs: &[Array<f64>]| {
        let t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|a| t.leaf(a.clone())).collect();
        let l = f(&t, &vs).unwrap();
        t.scalar(l)
    };
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        for i in 0..input.len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += h;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * h;
            let down = eval(&xs);
            numeric[i] = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Analytic gradients and central differences for a sample of each
/// parameter's entries. `coords` caps the entries per parameter (chosen by a
/// fixed-seed draw); `None` takes every entry. Parameters the loss does not
/// touch are left out.
pub fn param_differences<F>(store: &ParamStore<f64>, h: f64, coords: Option<usize>, seed: u64, f: F) -> Vec<(String, Vec<f64>, Vec<f64>)>
where
    F: Fn(&Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let tape = Tape::new();
    let loss = f(&tape, store).unwrap();
    let grads = tape.backward(loss).unwrap().param_grads(store);
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut work = store.clone();
    let eval = |work: &ParamStore<f64>| {
        let t = Tape::new();
        let l = f(&t, work).unwrap();
        t.scalar(l)
    };
    for (id, name, value) in store.iter() {
        let Some(g) = grads.get(id) else { continue };
        let idx: Vec<usize> = match coords {
            Some(c) if c < value.len() => rand::seq::index::sample(&mut r, value.len(), c).into_vec(),
            _ => (0..value.len()).collect(),
        };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &i in &idx {
            let orig = value.data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&work);
            work.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&work);
            work.get_mut(id).data_mut()[i] = orig;
            analytic.push(g[i]);
            numeric.push((up - down) / (2.0 * h));
        }
        out.push((name.to_string(), analytic, numeric));
    }
    out
}

/// Per-parameter relative error of [`param_differences`].
pub fn check_params<F>(store: &ParamStore<f64>, h: f64, coords: Option<usize>, seed: u64, f: F) -> Vec<(String, f64)>
where
    F: Fn(&Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    param_differences(store, h, coords, seed, f).into_iter().map(|(n, a, d)| (n, rel_err(&a, &d))).collect()
}

pub mod lattice {
    use duplex::tensor::log_sum_exp;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    /// Random lattice scores over a `frames x (targets + 1)` node grid.
    pub fn random_scores(frames: usize, targets: usize, labels: usize, r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = frames * (targets + 1);
        let blank = (0..n).map(|_| r.gen_range(-3.0..3.0)).collect();
        let rows = (0..n)
            .map(|_| {
                let logits: Vec<f64> = (0..labels).map(|_| r.gen_range(-3.0..3.0)).collect();
                let z = log_sum_exp(&logits);
                logits.iter().map(|l| l - z).collect()
            })
            .collect();
        (blank, rows)
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Sum over every interleaving of `frames` blanks and the labels (ending
    /// in a blank) of the path probability, by explicit recursion over path
    /// prefixes.
    pub fn brute_force(frames: usize, u_cols: usize, blank: &[f64], rows: &[Vec<f64>], labels: &[usize]) -> f64 {
        fn walk(t: usize, u: usize, frames: usize, u_cols: usize, blank: &[f64], rows: &[Vec<f64>], labels: &[usize]) -> f64 {
            let node = t * u_cols + u;
            let b = sigmoid(blank[node]);
            let mut total = 0.0;
            if t + 1 == frames {
                if u == labels.len() {
                    total += b;
                }
            } else {
                total += b * walk(t + 1, u, frames, u_cols, blank, rows, labels);
            }
            if u < labels.len() {
                total += (1.0 - b) * rows[node][labels[u]].exp() * walk(t, u + 1, frames, u_cols, blank, rows, labels);
            }
            total
        }
        walk(0, 0, frames, u_cols, blank, rows, labels)
    }
}

/// Minimum edit distance by plain recursion over the three edit moves.
pub fn edit_distance(r: &[u32], h: &[u32]) -> usize {
    match (r, h) {
        ([], _) => h.len(),
        (_, []) => r.len(),
        ([a, rt @ ..], [b, ht @ ..]) => {
            let sub = edit_distance(rt, ht) + (a != b) as usize;
            sub.min(edit_distance(rt, h) + 1).min(edit_distance(r, ht) + 1)
        }
    }
}

pub mod search {
    use duplex::corpus::TokenSequence;
    use duplex::decode::{ElmScorer, FusionConfig};
    use duplex::hat::{hat_loss, HatConfig, HatDecoder};
    use duplex::models::{ElmConfig, LanguageModel};
    use duplex::tensor::{Array, ParamStore};

    pub fn tiny_hat(seed: u64, vocab_size: usize, enc_dim: usize) -> (ParamStore<f64>, HatDecoder) {
        let mut store = ParamStore::new();
        let cfg = HatConfig { enc_dim, embed_dim: 3, context: 2, joint_dim: 6 };
        let hat = HatDecoder::new(&mut store, "hat", vocab_size, &cfg, &mut super::rng(seed)).unwrap();
        // Spread the randomly initialised weights so scores are far from ties.
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).data_mut() {
                *v *= 3.0;
            }
        }
        (store, hat)
    }

    pub fn tiny_lm(seed: u64, vocab_size: usize) -> LanguageModel {
        let cfg = ElmConfig { num_layers: 1, num_heads: 2, model_dim: 8, ffn_dim: 16, context_length: 4 };
        LanguageModel::new(&cfg, vocab_size, seed).unwrap()
    }

    /// Every label sequence of length <= `max_len` over the non-blank ids.
    pub fn all_sequences(vocab_size: usize, max_len: usize) -> Vec<TokenSequence> {
        let mut out = vec![TokenSequence::new(vec![])];
        let mut frontier = out.clone();
        for _ in 0..max_len {
            let mut next = Vec::new();
            for y in &frontier {
                for id in 1..vocab_size as u32 {
                    let mut ids = y.ids().to_vec();
                    ids.push(id);
                    next.push(TokenSequence::new(ids));
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    /// Fused score of one sequence: exact transducer likelihood plus LM terms.
    pub fn fused_score(hat: &HatDecoder, params: &ParamStore<f64>, enc: &Array<f64>, cfg: &FusionConfig, elm: Option<&ElmScorer>, y: &TokenSequence) -> f64 {
        let am = -hat_loss(&hat.lattice(params, enc, y).unwrap(), &y.labels()).unwrap();
        let e = elm.map_or(0.0, |s| s.logprob(y).unwrap());
        let i = hat.ilm_logprob(params, y).unwrap().0;
        cfg.fuse(am, e, i)
    }

    /// Best sequence by exhaustive enumeration.
    pub fn exhaustive(hat: &HatDecoder, params: &ParamStore<f64>, enc: &Array<f64>, cfg: &FusionConfig, elm: Option<&ElmScorer>, max_len: usize) -> (TokenSequence, f64) {
        all_sequences(hat.vocab_size(), max_len)
            .into_iter()
            .map(|y| {
                let s = fused_score(hat, params, enc, cfg, elm, &y);
                (y, s)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
    }
}

pub mod toy {
    use duplex::corpus::{generate_splits, Corpus, CorpusSpec, SplitSizes};
    use duplex::frontend::SpecAugmentConfig;
    use duplex::hat::HatConfig;
    use duplex::models::{AudioDecoderConfig, EncoderConfig, FrontendConfig, ModelConfig, TextEncoderConfig};

    pub const VOCAB: usize = 8;

    pub fn model_config() -> ModelConfig {
        let enc = |r| EncoderConfig { num_layers: 1, model_dim: 8, num_heads: 2, ffn_dim: 16, right_context_frames: r };
        ModelConfig {
            vocab_size: VOCAB,
            feature_dim: 4,
            frontend: FrontendConfig {
                frame_period_ms: 10,
                stack: 2,
                stride: 2,
                spec_augment: SpecAugmentConfig { freq_mask_param: 1, num_time_masks: 1, time_mask_param: 1, mask_value: 0.0 },
            },
            streaming: enc(0),
            delayed: enc(2),
            text: TextEncoderConfig { embed_dim: 4, num_conv_layers: 1, conv_width: 3, recurrent_dim: 4 },
            audio_decoder: AudioDecoderConfig {
                memory_dim: 4,
                feature_dim: 4,
                prenet_dims: [4, 4],
                prenet_dropout: 0.5,
                feed_previous_frame: false,
                recurrent_dim: 8,
                attention_dim: 4,
                postnet_layers: 1,
                postnet_dim: 4,
                postnet_width: 3,
                max_decode_frames: 12,
                stop_threshold: 0.5,
            },
            hat: HatConfig { enc_dim: 8, embed_dim: 4, context: 2, joint_dim: 8 },
        }
    }

    pub fn corpus_spec(paired: usize) -> CorpusSpec {
        CorpusSpec {
            vocab_size: VOCAB,
            sentence_length: (2, 4),
            frames_per_token: (2, 3),
            feature_dim: 4,
            sizes: SplitSizes { paired, audio_only: 12, text_only: 12, test_clean: 4, test_other: 4 },
            ..CorpusSpec::default()
        }
    }

    pub fn corpus(paired: usize) -> Corpus {
        generate_splits(&corpus_spec(paired)).unwrap()
    }
}
