//! `mmcap`: train the joint embedding, the SC-NLM decoder and the trigram
//! model, then rank, generate and probe the embedding space.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "mmcap", version, about = "Image-sentence embeddings and caption generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the joint image-sentence embedding.
    TrainEmbed(TrainEmbedArgs),
    /// Train the structure-content decoder; adds it to the archive.
    TrainScnlm(TrainScnlmArgs),
    /// Count a Kneser-Ney trigram model; adds it to the archive.
    TrainKn(TrainKnArgs),
    /// Bidirectional ranking table (R@1, R@5, R@10, median rank).
    Rank(RankArgs),
    /// Generate and rank captions for images.
    Generate(GenerateArgs),
    /// Image retrieval by word-vector arithmetic.
    Analogy(AnalogyArgs),
    /// 2-D PCA projection of images and words.
    Pca(PcaArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic data set.
    Fixture(FixtureArgs),
}

#[derive(Args, Debug)]
pub struct Common {
    /// key = value file; flags on the command line take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1234)]
    pub seed: u64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainEmbedArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// word2vec text embeddings; random `uniform(-0.08, 0.08)` vectors otherwise
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    /// Embedding dimension K (taken from --embeddings when given)
    #[arg(long)]
    pub dim_k: Option<usize>,
    #[arg(long, default_value_t = 0.2)]
    pub margin: f64,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.99)]
    pub decay: f64,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long, value_enum, default_value_t = Encoder::Lstm)]
    pub encoder: Encoder,
    /// Minimum corpus frequency when building the vocabulary from captions
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Encoder {
    Lstm,
    Linear,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Conditioning {
    Text,
    Image,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainScnlmArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// Needed with --conditioning image
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Archive holding the embedding model
    #[arg(long)]
    pub model_in: Option<PathBuf>,
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Conditioning::Text)]
    pub conditioning: Conditioning,
    /// Word context size n-1
    #[arg(long, default_value_t = 5)]
    pub context: usize,
    /// Forward tag context k
    #[arg(long, default_value_t = 3)]
    pub forward: usize,
    #[arg(long, default_value_t = 100)]
    pub factors: usize,
    /// Attribute dimension G (defaults to K)
    #[arg(long)]
    pub dim_g: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.99)]
    pub decay: f64,
    #[arg(long, default_value_t = 0.08)]
    pub init_scale: f64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainKnArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// Plain text corpus, one sentence per line (instead of --captions)
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = mmcap::kn::DEFAULT_DISCOUNT)]
    pub discount: f64,
    /// Archive to extend; a new archive is written otherwise
    #[arg(long)]
    pub model_in: Option<PathBuf>,
    #[arg(long)]
    pub model_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct RankArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model_in: Option<PathBuf>,
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// TSV output; stdout only when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model_in: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Training captions: concept sentences, POS templates, originals
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    /// Comma-separated image ids; every image in --features otherwise
    #[arg(long, value_delimiter = ',')]
    pub images: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    pub candidates: usize,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[arg(long, default_value_t = 8)]
    pub beam: usize,
    #[arg(long, default_value_t = 1.0)]
    pub wt: f64,
    #[arg(long, default_value_t = 0.25)]
    pub wlm: f64,
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    /// Nearest words and sentences pooled into the bag of concepts
    #[arg(long, default_value_t = 5)]
    pub concepts: usize,
    /// Also condition on every concept on its own
    #[arg(long)]
    pub per_concept: bool,
    /// Caption TSV; stdout when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Human-readable report
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct AnalogyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model_in: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Query image id
    #[arg(long)]
    pub query: Option<String>,
    /// Word to subtract
    #[arg(long)]
    pub negative: Option<String>,
    /// Word to add
    #[arg(long)]
    pub positive: Option<String>,
    #[arg(long, default_value_t = mmcap::regularities::DEFAULT_POOL)]
    pub pool: usize,
    #[arg(long, default_value_t = mmcap::regularities::DEFAULT_VISIBLE)]
    pub visible: usize,
    /// Run against an LSTM-encoder archive anyway
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct PcaArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model_in: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Comma-separated words to project with the images
    #[arg(long, value_delimiter = ',')]
    pub words: Vec<String>,
    #[arg(long, default_value_t = 2)]
    pub components: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum FixtureKind {
    /// Ten images described by a small POS-template grammar
    World,
    /// Fifty random feature/caption pairs
    Pairs,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct FixtureArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value_t = FixtureKind::World)]
    pub kind: FixtureKind,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let args = match config::splice_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            return ExitCode::from(2);
        }
    };
    let matches = match Cli::command().try_get_matches_from(&args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion)
                || e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.split("\n\n").next().unwrap_or(&text);
            eprintln!("error: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            return ExitCode::from(2);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let run_config = config::render_run_config(name, sub);
    let result = match &cli.command {
        Command::TrainEmbed(a) => commands::train_embed(a, &run_config),
        Command::TrainScnlm(a) => commands::train_scnlm(a, &run_config),
        Command::TrainKn(a) => commands::train_kn(a, &run_config),
        Command::Rank(a) => commands::rank(a, &run_config),
        Command::Generate(a) => commands::generate(a, &run_config),
        Command::Analogy(a) => commands::analogy(a, &run_config),
        Command::Pca(a) => commands::pca(a, &run_config),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Fixture(a) => commands::fixture(a, &run_config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
