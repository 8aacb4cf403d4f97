use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use duplex::corpus::{build_tail_set, content_hash, generate_splits, write_split, Corpus, CorpusSpec, TailSetConfig};
use duplex::decode::{beam_search, ElmScorer, FusionConfig};
use duplex::duallearn::{pretrain_then_dual, train_elm, AblationMode, ElmTrainConfig, TrainConfig};
use duplex::evalkit::{
    append_cell, evaluate, load_manifest_records, report_tables, sweep, Column, EvalCell, SweepGrid,
};
use duplex::models::{load_models, save_models, DuplexModel, ElmConfig, LanguageModel};
use serde_json::json;

#[derive(Parser)]
#[command(name = "duplex", version, about = "Dual-learning streaming ASR on a synthetic corpus")]
struct Cli {
    /// Overrides the seed of any config read by the command.
    #[arg(long, env = "DUPLEX_SEED", global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Baseline,
    All,
    Dl,
    Recon,
}

#[derive(Clone, Copy, ValueEnum)]
enum ColumnArg {
    NoLm,
    ShallowFusion,
    InternalLm,
}

#[derive(Subcommand)]
enum Command {
    /// Generate every split of a synthetic corpus.
    MakeCorpus {
        /// Corpus spec JSON; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the tail test set of an existing corpus directory.
    MakeTailset {
        #[arg(long, default_value = ".")]
        corpus: PathBuf,
        #[arg(long)]
        tau: f64,
        #[arg(long)]
        size: usize,
    },
    /// Supervised pre-training, then dual training in the chosen mode.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also train the external LM on the text-only pool and store it in
        /// the final checkpoint.
        #[arg(long)]
        with_elm: bool,
    },
    /// Beam-search decode a manifest and write one JSON line per utterance.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        #[arg(long, default_value_t = 8)]
        beam: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pooled WER of a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        #[arg(long, default_value_t = 8)]
        beam: usize,
        /// Record the result in `<run-dir>/evals.jsonl` for `report`.
        #[arg(long, requires_all = ["model", "column"])]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long, value_enum)]
        column: Option<ColumnArg>,
    },
    /// WER over an alpha x beta grid, written as a CSV matrix.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        #[arg(long, default_value_t = 8)]
        beam: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the result tables of a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

/// Regenerates a corpus from the spec stored in `dir` and checks it against
/// the recorded content hash.
fn load_corpus(dir: &Path) -> Result<Corpus> {
    let spec: CorpusSpec = read_json(&dir.join("corpus_spec.json"))?;
    let corpus = generate_splits(&spec)?;
    let index: serde_json::Value = read_json(&dir.join("corpus.json"))?;
    let hash = content_hash(&corpus);
    if index["content_hash"].as_str() != Some(hash.as_str()) {
        bail!("corpus in {} does not match its recorded content hash", dir.display());
    }
    Ok(corpus)
}

/// Model (and LM) from a checkpoint, with the configs stored beside it.
fn load_ckpt(ckpt: &Path) -> Result<(DuplexModel, Option<LanguageModel>)> {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let cfg: TrainConfig = read_json(&dir.join("config.json"))?;
    let elm_path = dir.join("elm_config.json");
    let elm: Option<ElmConfig> = if elm_path.exists() { Some(read_json(&elm_path)?) } else { None };
    let (model, lm) = load_models(ckpt, &cfg.model, elm.as_ref())
        .or_else(|_| load_models(ckpt, &cfg.model, None))
        .with_context(|| format!("loading {}", ckpt.display()))?;
    Ok((model, lm))
}

fn fusion(alpha: f64, beta: f64, beam: usize, lm: Option<&LanguageModel>) -> Result<FusionConfig> {
    if (alpha != 0.0 || beta != 0.0) && lm.is_none() {
        bail!("fusion weights need a checkpoint with an external LM (train --with-elm)");
    }
    Ok(FusionConfig::new(alpha, beta, beam))
}

fn make_corpus(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = match spec {
        Some(p) => read_json(p)?,
        None => CorpusSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let corpus = generate_splits(&spec)?;
    let hash = duplex::corpus::write_corpus(&corpus, out)?;
    let config_hash = duplex::corpus::hash_json(&spec)?;
    write_json(&out.join("manifest.json"), &json!({ "seed": spec.seed, "config_hash": config_hash, "corpus_hash": hash }))?;
    println!("{hash}");
    Ok(())
}

fn make_tailset(dir: &Path, tau: f64, size: usize, seed: Option<u64>) -> Result<()> {
    let corpus = load_corpus(dir)?;
    let cfg = TailSetConfig { tau, target_size: size, seed: seed.unwrap_or(TailSetConfig::default().seed) };
    let tail = build_tail_set(&corpus.paired_texts(), &corpus.text_only_texts(), &corpus.prototypes, &corpus.spec, &cfg)?;
    if tail.len() < size {
        log::warn!("only {} qualifying transcripts for a requested size of {size}", tail.len());
    }
    let path = write_split(dir, "tail", &tail)?;
    println!("{} utterances -> {}", tail.len(), path.display());
    Ok(())
}

fn train(config: Option<&Path>, mode: Mode, corpus_dir: &Path, out: &Path, with_elm: bool, seed: Option<u64>) -> Result<()> {
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let corpus = load_corpus(corpus_dir)?;
    if cfg.model.vocab_size != corpus.vocab.size() || cfg.model.feature_dim != corpus.spec.feature_dim {
        bail!("model config does not match the corpus vocabulary or feature size");
    }
    fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let mode = match mode {
        Mode::Baseline => None,
        Mode::All => Some(AblationMode::All),
        Mode::Dl => Some(AblationMode::Dl),
        Mode::Recon => Some(AblationMode::Recon),
    };
    let report = pretrain_then_dual(&corpus, &cfg, mode, Some(out))?;
    if with_elm {
        let elm_cfg = ElmConfig::default();
        let lm = train_elm(&corpus.text_only_texts(), corpus.vocab.size(), &elm_cfg, &ElmTrainConfig::default())?;
        write_json(&out.join("elm_config.json"), &elm_cfg)?;
        let model = report.model.as_ref().unwrap_or(&report.baseline);
        save_models(&out.join("final.dlxa"), model, Some(&lm))?;
        save_models(&out.join("baseline.dlxa"), &report.baseline, Some(&lm))?;
    }
    println!("trained in {:.0}s -> {}", report.seconds, out.display());
    Ok(())
}

fn decode(ckpt: &Path, manifest: &Path, alpha: f64, beta: f64, beam: usize, out: &Path) -> Result<()> {
    let (model, lm) = load_ckpt(ckpt)?;
    let fusion = fusion(alpha, beta, beam, lm.as_ref())?;
    let scorer = lm.as_ref().map(ElmScorer::new);
    let (records, skipped) = load_manifest_records(manifest, model.cfg.frontend.frame_period_ms)?;
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    for r in &records {
        let x = r.features.as_ref().expect("loaded records carry features");
        let stacked = model.asr_input(x)?;
        let line = if stacked.rows() == 0 {
            json!({ "id": r.id, "hyp_tokens": [], "am": null, "elm": null, "ilm": null, "score": null })
        } else {
            let enc = model.encode_delayed(&stacked)?;
            let hyps = beam_search(&model.hat, &model.params, &enc, &fusion, scorer.as_ref())?;
            let h = &hyps[0];
            json!({
                "id": r.id,
                "hyp_tokens": h.tokens.ids(),
                "am": h.am_logprob,
                "elm": h.elm_logprob,
                "ilm": h.ilm_logprob,
                "score": h.fused_score,
            })
        };
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    if skipped > 0 {
        log::warn!("{skipped} manifest entries had no readable features");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    ckpt: &Path,
    manifest: &Path,
    alpha: f64,
    beta: f64,
    beam: usize,
    run_dir: Option<&Path>,
    model_name: Option<&str>,
    column: Option<ColumnArg>,
) -> Result<()> {
    let (model, lm) = load_ckpt(ckpt)?;
    let fusion = fusion(alpha, beta, beam, lm.as_ref())?;
    let e = evaluate(&model, manifest, &fusion, lm.as_ref())?;
    println!("{}", serde_json::to_string(&json!({ "report": e.report, "utterances": e.utterances.len(), "skipped": e.skipped }))?);
    if let (Some(dir), Some(name), Some(col)) = (run_dir, model_name, column) {
        let testset = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("test").to_string();
        let column = match col {
            ColumnArg::NoLm => Column::NoLm,
            ColumnArg::ShallowFusion => Column::ShallowFusion,
            ColumnArg::InternalLm => Column::InternalLm,
        };
        append_cell(dir, &EvalCell { model: name.to_string(), testset, column, report: e.report })?;
    }
    Ok(())
}

fn run_sweep(ckpt: &Path, manifest: &Path, alphas: Option<Vec<f64>>, betas: Option<Vec<f64>>, beam: usize, out: &Path) -> Result<()> {
    let (model, lm) = load_ckpt(ckpt)?;
    let alphas = alphas.unwrap_or_else(SweepGrid::default_alphas);
    let betas = betas.unwrap_or_else(SweepGrid::default_betas);
    if lm.is_none() && alphas.iter().chain(&betas).any(|&v| v != 0.0) {
        bail!("sweeping fusion weights needs a checkpoint with an external LM");
    }
    let grid = sweep(&model, manifest, &alphas, &betas, beam, lm.as_ref())?;
    fs::write(out, grid.to_csv()?)?;
    let (w, a, b) = grid.best();
    println!("best {w:.2} at alpha {a} beta {b}");
    Ok(())
}

fn report(run_dir: &Path) -> Result<()> {
    for t in report_tables(run_dir)? {
        print!("{}", t.render());
        println!();
        let name: String = t.title.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
        fs::write(run_dir.join(format!("table_{name}.csv")), t.to_csv()?)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::MakeCorpus { spec, out } => make_corpus(spec.as_deref(), &out, cli.seed),
        Command::MakeTailset { corpus, tau, size } => make_tailset(&corpus, tau, size, cli.seed),
        Command::Train { config, mode, corpus, out, with_elm } => train(config.as_deref(), mode, &corpus, &out, with_elm, cli.seed),
        Command::Decode { ckpt, manifest, alpha, beta, beam, out } => decode(&ckpt, &manifest, alpha, beta, beam, &out),
        Command::Eval { ckpt, manifest, alpha, beta, beam, run_dir, model, column } => {
            eval(&ckpt, &manifest, alpha, beta, beam, run_dir.as_deref(), model.as_deref(), column)
        }
        Command::Sweep { ckpt, manifest, alphas, betas, beam, out } => run_sweep(&ckpt, &manifest, alphas, betas, beam, &out),
        Command::Report { run_dir } => report(&run_dir),
    }
}
