//! `skillmatch`: one binary covering the whole pipeline —
//! synth → train → encode → index-build → retrieve/eval/serve.
//!
//! Every value can come from three places with the precedence
//! flags > `--config` file > built-in defaults. Config files are JSON
//! carrying any subset of the corresponding flags' fields.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use skillmatch_core::backbone::BackboneConfig;
use skillmatch_core::corpus::{DocumentKind, SynthConfig};
use skillmatch_core::encoder::EncoderConfig;
use skillmatch_core::evaluation::ScoreMode;
use skillmatch_core::index::{IndexParams, Metric, QueryMode, VectorIndex};
use skillmatch_core::trainer::TrainConfig;

use skillmatch_cli::commands::{self, EvalInputs, SplitOpts, TrainInputs};
use skillmatch_cli::model::Model;
use skillmatch_cli::server::{self, AppState};

#[derive(Parser)]
#[command(name = "skillmatch", version, about = "Two-tower retrieval engine for profile/proposal matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (JSONL).
    Synth(SynthArgs),
    /// Train the two towers on a corpus and write a checkpoint.
    Train(TrainArgs),
    /// Encode one side of a corpus into an embeddings file.
    Encode(EncodeArgs),
    /// Build a persisted vector index from an embeddings file.
    IndexBuild(IndexBuildArgs),
    /// Encode a document on the fly and print its nearest neighbors.
    Retrieve(RetrieveArgs),
    /// Score a corpus split and print the metric table.
    Eval(EvalArgs),
    /// Serve /encode and /retrieve over HTTP.
    Serve(ServeArgs),
    /// Convert an embeddings file to id,tag,vector CSV.
    ExportEmbeddings(ExportArgs),
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("opening config {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing config {}", path.display()))
}

// ---------------------------------------------------------------- synth ---

#[derive(Args)]
struct SynthArgs {
    /// Output corpus path (JSONL).
    #[arg(long)]
    out: PathBuf,
    /// Also write the latent-dialect twin corpus here.
    #[arg(long)]
    latent_out: Option<PathBuf>,
    /// Also write the token alias table (surface id -> latent id) here.
    #[arg(long)]
    aliases_out: Option<PathBuf>,
    /// JSON file with any subset of the generator fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long)]
    skills_per_category: Option<usize>,
    #[arg(long)]
    freelancers: Option<usize>,
    #[arg(long)]
    projects: Option<usize>,
    #[arg(long)]
    skills_per_profile: Option<usize>,
    #[arg(long)]
    mandatory_skills: Option<usize>,
    #[arg(long)]
    bonus_skills: Option<usize>,
    /// Positive interactions per project.
    #[arg(long)]
    positives: Option<usize>,
    /// Negative interactions per project.
    #[arg(long)]
    negatives: Option<usize>,
    /// Number of surface dialects (language 0 is the latent one).
    #[arg(long)]
    languages: Option<usize>,
    #[arg(long)]
    description_words: Option<usize>,
    #[arg(long)]
    base_timestamp: Option<i64>,
    #[arg(long)]
    vocab_size: Option<u32>,
}

impl SynthArgs {
    fn resolve(&self) -> Result<SynthConfig> {
        let mut cfg: SynthConfig = match &self.config {
            Some(path) => load_json(path)?,
            None => SynthConfig::default(),
        };
        macro_rules! over {
            ($flag:expr => $field:ident) => {
                if let Some(v) = $flag {
                    cfg.$field = v;
                }
            };
        }
        over!(self.categories => n_categories);
        over!(self.skills_per_category => skills_per_category);
        over!(self.freelancers => n_freelancers);
        over!(self.projects => n_projects);
        over!(self.skills_per_profile => skills_per_profile);
        over!(self.mandatory_skills => proposal_mandatory_skills);
        over!(self.bonus_skills => proposal_bonus_skills);
        over!(self.positives => positives_per_project);
        over!(self.negatives => negatives_per_project);
        over!(self.languages => n_languages);
        over!(self.description_words => description_words);
        over!(self.base_timestamp => base_timestamp);
        over!(self.vocab_size => vocab_size);
        Ok(cfg)
    }
}

// ---------------------------------------------------------------- train ---

#[derive(Clone, Copy, Debug, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum LossArg {
    Triplet,
    Infonce,
}

/// Shared timestamp-split flags for train and eval.
#[derive(Args, Clone, Copy)]
struct SplitArgs {
    /// Absolute timestamp cutoff; interactions at or after it are test.
    #[arg(long)]
    cutoff: Option<i64>,
    /// Put roughly this fraction of interactions (the latest) into test.
    #[arg(long, conflicts_with = "cutoff")]
    test_fraction: Option<f64>,
    /// Fraction of pre-cutoff interactions held out for validation.
    #[arg(long, default_value_t = 0.1)]
    val_ratio: f64,
    /// Seed for the validation shuffle.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl From<SplitArgs> for SplitOpts {
    fn from(a: SplitArgs) -> SplitOpts {
        SplitOpts {
            cutoff: a.cutoff,
            test_fraction: a.test_fraction,
            val_ratio: a.val_ratio,
            split_seed: a.split_seed,
        }
    }
}

/// Every trainable knob, as optional overrides. The same struct is parsed
/// from flags and from the `--config` JSON; flags win field by field.
#[derive(Args, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainOverrides {
    /// Objective preset: margin-based "triplet" or softmax "infonce".
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f32>,
    #[arg(long)]
    temperature: Option<f32>,
    #[arg(long)]
    margin: Option<f32>,
    #[arg(long)]
    batch_projects: Option<usize>,
    /// Positives sampled per project per batch.
    #[arg(long)]
    positives: Option<usize>,
    /// Negatives sampled per project per batch.
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    weak_negatives: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding width of both towers (and the backbone).
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    head_layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    /// L2-normalize embeddings; defaults to true for infonce, false for triplet.
    #[arg(long)]
    normalize: Option<bool>,
    #[arg(long)]
    backbone_layers: Option<usize>,
    #[arg(long)]
    backbone_heads: Option<usize>,
    #[arg(long)]
    backbone_seed: Option<u64>,
    #[arg(long)]
    vocab_size: Option<u32>,
    #[arg(long)]
    max_section_tokens: Option<usize>,
}

impl TrainOverrides {
    /// Field-by-field precedence: `self` wins over `fallback`.
    fn or(self, fallback: Self) -> Self {
        TrainOverrides {
            loss: self.loss.or(fallback.loss),
            epochs: self.epochs.or(fallback.epochs),
            learning_rate: self.learning_rate.or(fallback.learning_rate),
            temperature: self.temperature.or(fallback.temperature),
            margin: self.margin.or(fallback.margin),
            batch_projects: self.batch_projects.or(fallback.batch_projects),
            positives: self.positives.or(fallback.positives),
            negatives: self.negatives.or(fallback.negatives),
            weak_negatives: self.weak_negatives.or(fallback.weak_negatives),
            seed: self.seed.or(fallback.seed),
            d_model: self.d_model.or(fallback.d_model),
            head_layers: self.head_layers.or(fallback.head_layers),
            heads: self.heads.or(fallback.heads),
            ff_dim: self.ff_dim.or(fallback.ff_dim),
            normalize: self.normalize.or(fallback.normalize),
            backbone_layers: self.backbone_layers.or(fallback.backbone_layers),
            backbone_heads: self.backbone_heads.or(fallback.backbone_heads),
            backbone_seed: self.backbone_seed.or(fallback.backbone_seed),
            vocab_size: self.vocab_size.or(fallback.vocab_size),
            max_section_tokens: self.max_section_tokens.or(fallback.max_section_tokens),
        }
    }

    fn resolve(self) -> (TrainConfig, EncoderConfig, BackboneConfig) {
        let loss = self.loss.unwrap_or(LossArg::Infonce);
        let mut train = match loss {
            LossArg::Triplet => TrainConfig::triplet_preset(),
            LossArg::Infonce => TrainConfig::info_nce_preset(),
        };
        macro_rules! over {
            ($flag:expr => $target:expr) => {
                if let Some(v) = $flag {
                    $target = v;
                }
            };
        }
        over!(self.epochs => train.epochs);
        over!(self.learning_rate => train.learning_rate);
        over!(self.temperature => train.temperature);
        over!(self.margin => train.margin);
        over!(self.batch_projects => train.batch_projects);
        over!(self.positives => train.positives_per_project);
        over!(self.negatives => train.negatives_per_project);
        over!(self.weak_negatives => train.weak_negatives_per_batch);
        over!(self.seed => train.seed);

        let mut encoder = EncoderConfig {
            normalize_output: commands::default_normalize(&train),
            ..EncoderConfig::default()
        };
        over!(self.d_model => encoder.d_model);
        over!(self.head_layers => encoder.n_head_layers);
        over!(self.heads => encoder.n_heads);
        over!(self.ff_dim => encoder.ff_dim);
        over!(self.normalize => encoder.normalize_output);

        let mut backbone = BackboneConfig::default();
        over!(self.backbone_layers => backbone.n_layers);
        over!(self.backbone_heads => backbone.n_heads);
        over!(self.backbone_seed => backbone.seed);
        over!(self.vocab_size => backbone.vocab_size);
        over!(self.max_section_tokens => backbone.max_section_tokens);
        commands::align_backbone(&mut backbone, &encoder);

        (train, encoder, backbone)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus JSONL to train on.
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint output path (a `.meta.json` sidecar is written next to it).
    #[arg(long)]
    out: PathBuf,
    /// Write the per-step loss history CSV here.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Token alias table from `synth --aliases-out`, folded into the backbone.
    #[arg(long)]
    aliases: Option<PathBuf>,
    /// JSON file with any subset of the override flags' fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    overrides: TrainOverrides,
}

// ------------------------------------------------------- encode / index ---

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SideArg {
    Profiles,
    Proposals,
}

impl SideArg {
    fn kind(self) -> DocumentKind {
        match self {
            SideArg::Profiles => DocumentKind::Profile,
            SideArg::Proposals => DocumentKind::Proposal,
        }
    }
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Which corpus side to encode.
    #[arg(long, value_enum)]
    side: SideArg,
    /// Embeddings output path (JSONL).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum MetricArg {
    Cosine,
    Euclidean,
}

impl MetricArg {
    fn metric(self) -> Metric {
        match self {
            MetricArg::Cosine => Metric::Cosine,
            MetricArg::Euclidean => Metric::Euclidean,
        }
    }
}

#[derive(Args)]
struct IndexBuildArgs {
    /// Embeddings file from `encode`.
    #[arg(long)]
    embeddings: PathBuf,
    /// Index output path.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with any subset of the index parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    /// Graph degree target.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    ef_construction: Option<usize>,
    #[arg(long)]
    ef_search: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl IndexBuildArgs {
    fn resolve(&self) -> Result<IndexParams> {
        let mut params: IndexParams = match &self.config {
            Some(path) => load_json(path)?,
            None => IndexParams::default(),
        };
        if let Some(m) = self.metric {
            params.metric = m.metric();
        }
        if let Some(v) = self.m {
            params.m = v;
        }
        if let Some(v) = self.ef_construction {
            params.ef_construction = v;
        }
        if let Some(v) = self.ef_search {
            params.ef_search = v;
        }
        if let Some(v) = self.seed {
            params.seed = v;
        }
        Ok(params)
    }
}

// ------------------------------------------------------ retrieve / eval ---

#[derive(Clone, Copy, Debug, ValueEnum)]
enum QueryModeArg {
    Exact,
    Approximate,
}

impl QueryModeArg {
    fn mode(self) -> QueryMode {
        match self {
            QueryModeArg::Exact => QueryMode::Exact,
            QueryModeArg::Approximate => QueryMode::Approximate,
        }
    }
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    index: PathBuf,
    /// Document JSON path, or `-` to read stdin.
    #[arg(long)]
    document: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Tag filter as JSON, e.g. '{"category":"cat0","language":["en","fr"]}'.
    #[arg(long)]
    filter: Option<String>,
    #[arg(long, value_enum, default_value_t = QueryModeArg::Approximate)]
    mode: QueryModeArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalModeArg {
    Score,
    Distance,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    /// Comparison mode; defaults to the checkpoint's training objective
    /// (score for infonce, distance for triplet).
    #[arg(long, value_enum)]
    mode: Option<EvalModeArg>,
    /// Overlap cutoffs.
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 100])]
    ks: Vec<usize>,
    /// Retrieval depth for the retrieved-fraction metrics.
    #[arg(long, default_value_t = 100)]
    retrieval_k: usize,
    /// Use the approximate graph search instead of the exact scan.
    #[arg(long)]
    approximate: bool,
    /// Write the JSON report here (the table always prints to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Port to bind (0 picks a free one; the bound address is printed).
    #[arg(long, default_value_t = 8080)]
    port: u16,
}

#[derive(Args)]
struct ExportArgs {
    /// Embeddings file from `encode`.
    #[arg(long)]
    embeddings: PathBuf,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
}

// ------------------------------------------------------------- dispatch ---

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => {
            let config = args.resolve()?;
            commands::cmd_synth(
                &config,
                args.seed,
                &args.out,
                args.latent_out.as_deref(),
                args.aliases_out.as_deref(),
            )
        }
        Command::Train(args) => {
            let file_overrides: TrainOverrides = match &args.config {
                Some(path) => load_json(path)?,
                None => TrainOverrides::default(),
            };
            let (train_config, encoder_config, backbone_config) =
                args.overrides.clone().or(file_overrides).resolve();
            commands::cmd_train(&TrainInputs {
                corpus_path: &args.corpus,
                out: &args.out,
                history: args.history.as_deref(),
                aliases: args.aliases.as_deref(),
                split: args.split.into(),
                train_config,
                encoder_config,
                backbone_config,
            })
        }
        Command::Encode(args) => {
            commands::cmd_encode(&args.checkpoint, &args.corpus, args.side.kind(), &args.out)
        }
        Command::IndexBuild(args) => {
            let params = args.resolve()?;
            commands::cmd_index_build(&args.embeddings, &args.out, params)
        }
        Command::Retrieve(args) => commands::cmd_retrieve(
            &args.checkpoint,
            &args.index,
            &args.document,
            args.k,
            args.filter.as_deref(),
            args.mode.mode(),
        ),
        Command::Eval(args) => {
            let mode = args.mode.map(|m| match m {
                EvalModeArg::Score => ScoreMode::Score,
                EvalModeArg::Distance => ScoreMode::Distance,
            });
            commands::cmd_eval(&EvalInputs {
                checkpoint: &args.checkpoint,
                corpus_path: &args.corpus,
                split: args.split.into(),
                mode,
                overlap_ks: args.ks.clone(),
                retrieval_k: args.retrieval_k,
                approximate: args.approximate,
                out: args.out.as_deref(),
            })
            .map(|_| ())
        }
        Command::Serve(args) => {
            let model = Model::load(&args.checkpoint)?;
            let index = VectorIndex::load(&args.index)
                .with_context(|| format!("loading index {}", args.index.display()))?;
            let state = Arc::new(AppState { model, index });
            tokio::runtime::Builder::new_current_thread()
                .enable_all()
                .build()?
                .block_on(server::serve(state, &args.host, args.port))
        }
        Command::ExportEmbeddings(args) => commands::cmd_export(&args.embeddings, &args.out),
    }
}

/// Restore the default SIGPIPE disposition so piping output through
/// `head`-like consumers terminates the process quietly (exit 141)
/// instead of panicking on a failed stdout write. The server keeps
/// SIGPIPE ignored: there a dropped client must surface as a write
/// error on that one connection, not kill the process.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if !matches!(cli.command, Command::Serve(_)) {
        reset_sigpipe();
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
