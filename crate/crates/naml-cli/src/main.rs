//! Command-line front end: vocabulary building, training, evaluation,
//! prediction, attention inspection and synthetic data generation.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numerical failure.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use naml_core::data::{read_impressions, read_news, write_impressions, write_news, RawNews};
use naml_core::datagen::{self, SyntheticSpec};
use naml_core::error::{ConfigError, DataError, TrainError};
use naml_core::eval::evaluate_model;
use naml_core::model::View;
use naml_core::news_encoder::encode_news_vector;
use naml_core::text::{
    encode_news, load_pretrained_embeddings, tokenize, CategoryIndex, TokenizedNews, Vocabulary,
};
use naml_core::trainer::{
    load_checkpoint, save_checkpoint, train, write_metrics_csv, Checkpoint, TrainConfig,
};
use naml_core::user_encoder::encode_user_vector;

#[derive(Parser)]
#[command(name = "naml", about = "Attentive multi-view news recommendation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary and category index from a news file.
    BuildVocab(BuildVocabArgs),
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Score an impression log with a checkpoint and report ranking metrics.
    Evaluate(EvaluateArgs),
    /// Rank candidate news for one user history.
    Predict(PredictArgs),
    /// Dump word-, view- and news-level attention weights as JSONL.
    DumpAttention(DumpAttentionArgs),
    /// Generate a synthetic dataset with known latent structure.
    GenSynthetic(GenSyntheticArgs),
}

#[derive(Args)]
struct BuildVocabArgs {
    /// News JSONL file.
    #[arg(long)]
    news: PathBuf,
    /// Minimum token frequency kept in the vocabulary.
    #[arg(long, default_value_t = 1)]
    min_freq: u64,
    /// Pretrained embedding file; prints vocabulary coverage when given.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Embedding dimension used for the coverage check.
    #[arg(long, default_value_t = 300)]
    word_dim: usize,
    /// Output directory for vocab.tsv and categories.tsv.
    #[arg(long)]
    out: PathBuf,
}

/// Flags shared by every command that builds or overrides a TrainConfig.
/// Precedence: CLI flag > config file > built-in defaults.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON file with TrainConfig fields (unknown keys rejected).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated active views: title,body,category,subcategory.
    #[arg(long)]
    views: Option<String>,
    /// Replace word-level attention with mean pooling.
    #[arg(long)]
    no_word_attention: bool,
    /// Replace news-level attention with mean pooling.
    #[arg(long)]
    no_news_attention: bool,
    /// Replace view-level attention with mean pooling.
    #[arg(long)]
    no_view_attention: bool,
    /// Keep word embeddings fixed during training.
    #[arg(long)]
    freeze_embeddings: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| data_io(path, e))?;
                serde_json::from_str::<TrainConfig>(&text).map_err(|e| {
                    CliError::Config(format!("{}: {e}", path.display()))
                })?
            }
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(views) = &self.views {
            let mut parsed = Vec::new();
            for v in views.split(',') {
                parsed.push(View::parse(v.trim()).map_err(CliError::from)?);
            }
            if parsed.is_empty() {
                return Err(CliError::Config("--views must name at least one view".into()));
            }
            cfg.active_views = parsed;
        }
        if self.no_word_attention {
            cfg.word_attention = false;
        }
        if self.no_news_attention {
            cfg.news_attention = false;
        }
        if self.no_view_attention {
            cfg.view_attention = false;
        }
        if self.freeze_embeddings {
            cfg.freeze_embeddings = true;
        }
        cfg.validate().map_err(CliError::from)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    news: PathBuf,
    /// Impression log JSONL file.
    #[arg(long)]
    behaviors: PathBuf,
    /// Pretrained word embeddings ("token v1 .. vD" lines).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Minimum token frequency kept in the vocabulary.
    #[arg(long, default_value_t = 1)]
    min_freq: u64,
    /// Output directory: model.ckpt, metrics.csv, vocab.tsv, categories.tsv.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    news: PathBuf,
    #[arg(long)]
    behaviors: PathBuf,
    /// Vocabulary file; defaults to vocab.tsv next to the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Category index file; defaults to categories.tsv next to the checkpoint.
    #[arg(long)]
    categories: Option<PathBuf>,
    /// Also write the metrics as JSON to this path.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    news: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    categories: Option<PathBuf>,
    /// Comma-separated browsed news ids, oldest first.
    #[arg(long, default_value = "")]
    history: String,
    /// Comma-separated candidate news ids.
    #[arg(long)]
    candidates: String,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
}

#[derive(Args)]
struct DumpAttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    news: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    categories: Option<PathBuf>,
    /// Comma-separated news ids to trace.
    #[arg(long, default_value = "")]
    news_ids: String,
    /// Comma-separated browsed news ids; dumps news-level weights.
    #[arg(long, default_value = "")]
    history: String,
}

#[derive(Args)]
struct GenSyntheticArgs {
    /// JSON file with SyntheticSpec fields; defaults when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory: news.jsonl, behaviors.jsonl, ground_truth.json.
    #[arg(long)]
    out: PathBuf,
}

// ------------------------------------------------------------- errors

enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => CliError::Config(c.to_string()),
            TrainError::Data(d) => CliError::Data(d.to_string()),
            TrainError::Numerical(m) => CliError::Numerical(m),
            TrainError::Tensor(t) => match t {
                naml_core::error::TensorError::NonFinite { .. } => {
                    CliError::Numerical(t.to_string())
                }
                other => CliError::Config(other.to_string()),
            },
            other @ (TrainError::IncompatibleCheckpoint(_) | TrainError::MalformedCheckpoint(_)) => {
                CliError::Data(other.to_string())
            }
        }
    }
}

impl From<naml_core::error::TensorError> for CliError {
    fn from(e: naml_core::error::TensorError) -> Self {
        TrainError::Tensor(e).into()
    }
}

fn data_io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

// ------------------------------------------------------------- helpers

fn split_ids(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

fn tokenize_corpus(
    news: &[RawNews],
    vocab: &Vocabulary,
    cats: &CategoryIndex,
    m_max: usize,
    p_max: usize,
) -> HashMap<String, TokenizedNews> {
    news.iter()
        .map(|n| (n.news_id.clone(), encode_news(n, vocab, cats, m_max, p_max)))
        .collect()
}

/// Load a checkpoint plus its vocabulary/category sidecar files, verifying
/// the vocabulary hash recorded at save time.
fn load_model(
    ckpt_path: &Path,
    vocab_path: &Option<PathBuf>,
    cats_path: &Option<PathBuf>,
) -> Result<(Checkpoint, Vocabulary, CategoryIndex), CliError> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let sibling = |name: &str| ckpt_path.with_file_name(name);
    let vocab_path = vocab_path.clone().unwrap_or_else(|| sibling("vocab.tsv"));
    let cats_path = cats_path.clone().unwrap_or_else(|| sibling("categories.tsv"));
    let vocab = Vocabulary::load(&vocab_path)?;
    let cats = CategoryIndex::load(&cats_path)?;
    if vocab.hash() != ckpt.vocab_hash {
        return Err(CliError::Config(format!(
            "vocabulary {} does not match the one the checkpoint was trained with",
            vocab_path.display()
        )));
    }
    Ok((ckpt, vocab, cats))
}

// ------------------------------------------------------------- commands

fn cmd_build_vocab(args: &BuildVocabArgs) -> Result<(), CliError> {
    let news = read_news(&args.news)?;
    let vocab = Vocabulary::build(
        news.iter().map(|n| {
            tokenize(&n.title).into_iter().chain(tokenize(&n.body)).collect::<Vec<_>>()
        }),
        args.min_freq,
    );
    let cats = CategoryIndex::build(news.iter());
    fs::create_dir_all(&args.out).map_err(|e| data_io(&args.out, e))?;
    vocab.save(&args.out.join("vocab.tsv"))?;
    cats.save(&args.out.join("categories.tsv"))?;
    println!("vocabulary: {} tokens (min frequency {})", vocab.len(), args.min_freq);
    println!(
        "categories: {} / subcategories: {}",
        cats.n_categories(),
        cats.n_subcategories()
    );
    if let Some(emb) = &args.embeddings {
        let loaded = load_pretrained_embeddings(emb, &vocab, args.word_dim, 0)?;
        println!("embedding coverage: {:.4}", loaded.coverage);
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let news = read_news(&args.news)?;
    let impressions = read_impressions(&args.behaviors)?;

    let vocab = Vocabulary::build(
        news.iter().map(|n| {
            tokenize(&n.title).into_iter().chain(tokenize(&n.body)).collect::<Vec<_>>()
        }),
        args.min_freq,
    );
    let cats = CategoryIndex::build(news.iter());
    let store = tokenize_corpus(&news, &vocab, &cats, cfg.m_max, cfg.p_max);
    let dims = cfg.dims(vocab.len(), cats.n_categories(), cats.n_subcategories());

    let pretrained = match &args.embeddings {
        Some(path) => {
            let loaded = load_pretrained_embeddings(path, &vocab, cfg.word_dim, cfg.seed)?;
            println!("embedding coverage: {:.4}", loaded.coverage);
            Some(loaded.matrix)
        }
        None => None,
    };

    let out = train(&store, &impressions, &cfg, &dims, pretrained)?;
    for log in &out.epoch_logs {
        println!(
            "epoch {}: loss {:.4}  val AUC {:.4}  MRR {:.4}  nDCG@5 {:.4}  nDCG@10 {:.4}",
            log.epoch, log.train_loss, log.val_auc, log.val_mrr, log.val_ndcg5, log.val_ndcg10
        );
    }
    println!(
        "best epoch {} ({} impressions without negatives skipped)",
        out.best_epoch, out.skipped_impressions
    );

    fs::create_dir_all(&args.out).map_err(|e| data_io(&args.out, e))?;
    vocab.save(&args.out.join("vocab.tsv"))?;
    cats.save(&args.out.join("categories.tsv"))?;
    save_checkpoint(
        &args.out.join("model.ckpt"),
        &out.best_params,
        &dims,
        &cfg,
        vocab.hash(),
    )?;
    write_metrics_csv(&args.out.join("metrics.csv"), &out.epoch_logs)
        .map_err(|e| data_io(&args.out, e))?;
    println!("wrote {}", args.out.join("model.ckpt").display());
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let (ckpt, vocab, cats) = load_model(&args.checkpoint, &args.vocab, &args.categories)?;
    let news = read_news(&args.news)?;
    let impressions = read_impressions(&args.behaviors)?;
    let cfg = &ckpt.config;
    let store = tokenize_corpus(&news, &vocab, &cats, cfg.m_max, cfg.p_max);
    let out = evaluate_model(
        &ckpt.params,
        &ckpt.dims,
        &store,
        &impressions,
        &cfg.encode_options(false),
        cfg.m_max,
        cfg.p_max,
        cfg.n_max,
        cfg.mrr_first_only,
    )?;
    let m = &out.metrics;
    println!("metric     value");
    println!("AUC        {:.6}", m.auc);
    println!("MRR        {:.6}", m.mrr);
    println!("nDCG@5     {:.6}", m.ndcg5);
    println!("nDCG@10    {:.6}", m.ndcg10);
    println!(
        "impressions: {} used, {} skipped (single-class), {} unknown news ids",
        m.n_impressions_used, m.n_impressions_skipped, out.n_unknown_news
    );
    if let Some(path) = &args.json {
        let json = serde_json::to_string_pretty(m).expect("metrics serialize");
        fs::write(path, json).map_err(|e| data_io(path, e))?;
    }
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<(), CliError> {
    let (ckpt, vocab, cats) = load_model(&args.checkpoint, &args.vocab, &args.categories)?;
    let news = read_news(&args.news)?;
    let cfg = &ckpt.config;
    let store = tokenize_corpus(&news, &vocab, &cats, cfg.m_max, cfg.p_max);
    let candidates = split_ids(&args.candidates);
    if candidates.is_empty() {
        return Err(CliError::Config("--candidates must name at least one news id".into()));
    }
    let history = split_ids(&args.history);

    let opts = cfg.encode_options(false);
    let vector = |id: &String| -> Result<Vec<f64>, CliError> {
        let item = store
            .get(id)
            .cloned()
            .unwrap_or_else(|| naml_core::text::unknown_news(id, cfg.m_max, cfg.p_max));
        Ok(encode_news_vector(&ckpt.params, &ckpt.dims, &item, &opts)?.r)
    };
    let hist_vecs: Vec<Vec<f64>> = history.iter().map(vector).collect::<Result<_, _>>()?;
    let (u, _) = encode_user_vector(&ckpt.params, &ckpt.dims, &hist_vecs, opts.news_attention)?;

    let mut scored: Vec<(String, f64)> = Vec::new();
    for id in &candidates {
        let r = vector(id)?;
        scored.push((id.clone(), naml_core::trainer::score(&u, &r)?));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].1.partial_cmp(&scored[a].1).unwrap().then(a.cmp(&b)));
    for (rank, &i) in order.iter().take(args.top_k).enumerate() {
        println!(
            "{}",
            serde_json::json!({
                "rank": rank + 1,
                "news_id": scored[i].0,
                "score": scored[i].1,
            })
        );
    }
    Ok(())
}

fn cmd_dump_attention(args: &DumpAttentionArgs) -> Result<(), CliError> {
    let (ckpt, vocab, cats) = load_model(&args.checkpoint, &args.vocab, &args.categories)?;
    let news = read_news(&args.news)?;
    let cfg = &ckpt.config;
    let store = tokenize_corpus(&news, &vocab, &cats, cfg.m_max, cfg.p_max);
    let opts = cfg.encode_options(false);

    let lookup = |id: &String| -> Result<&TokenizedNews, CliError> {
        store
            .get(id)
            .ok_or_else(|| CliError::Data(format!("unknown news id: {id}")))
    };

    for id in &split_ids(&args.news_ids) {
        let item = lookup(id)?;
        let out = encode_news_vector(&ckpt.params, &ckpt.dims, item, &opts)?;
        let words = |ids: &[usize], alpha: &[f64]| -> Vec<serde_json::Value> {
            ids.iter()
                .zip(alpha)
                .map(|(&w, &a)| serde_json::json!([vocab.token(w).unwrap_or("<unk>"), a]))
                .collect()
        };
        println!(
            "{}",
            serde_json::json!({
                "news_id": id,
                "title_attention": words(&item.title_ids[..item.title_len], &out.title_alpha),
                "body_attention": words(&item.body_ids[..item.body_len], &out.body_alpha),
                "view_attention": out
                    .view_alpha
                    .iter()
                    .map(|(v, a)| serde_json::json!([v.name(), a]))
                    .collect::<Vec<_>>(),
            })
        );
    }

    let history = split_ids(&args.history);
    if !history.is_empty() {
        let mut vecs = Vec::new();
        for id in &history {
            let item = lookup(id)?;
            vecs.push(encode_news_vector(&ckpt.params, &ckpt.dims, item, &opts)?.r);
        }
        let (_, alpha) = encode_user_vector(&ckpt.params, &ckpt.dims, &vecs, opts.news_attention)?;
        println!(
            "{}",
            serde_json::json!({
                "history": history,
                "news_attention": alpha,
            })
        );
    }
    Ok(())
}

fn cmd_gen_synthetic(args: &GenSyntheticArgs) -> Result<(), CliError> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| data_io(path, e))?;
            serde_json::from_str::<SyntheticSpec>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let data = datagen::generate(&spec)?;
    fs::create_dir_all(&args.out).map_err(|e| data_io(&args.out, e))?;
    write_news(&args.out.join("news.jsonl"), &data.news)?;
    write_impressions(&args.out.join("behaviors.jsonl"), &data.impressions)?;
    let truth = serde_json::to_string_pretty(&data.ground_truth).expect("ground truth serialize");
    fs::write(args.out.join("ground_truth.json"), truth)
        .map_err(|e| data_io(&args.out, e))?;

    let report = datagen::verify_ground_truth(&data.impressions, &data.ground_truth);
    let (mut pos, mut neg) = (0usize, 0usize);
    for imp in &data.impressions {
        for c in &imp.candidates {
            if c.clicked != 0 {
                pos += 1;
            } else {
                neg += 1;
            }
        }
    }
    println!(
        "{} news, {} impressions, {} positives / {} negatives (1:{:.1})",
        data.news.len(),
        data.impressions.len(),
        pos,
        neg,
        neg as f64 / pos.max(1) as f64
    );
    for class in &report.classes {
        println!(
            "affinity {:.2}: p={:.4}, {} shown, {} clicked ({:.2} sigma)",
            class.affinity, class.expected_p, class.n, class.clicks, class.deviation_sigmas
        );
    }
    if !report.ok {
        return Err(CliError::Numerical(
            "generated click rates deviate more than 3 sigma from the model".into(),
        ));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::BuildVocab(a) => cmd_build_vocab(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::DumpAttention(a) => cmd_dump_attention(a),
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
