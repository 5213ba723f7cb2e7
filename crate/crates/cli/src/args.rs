use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "rap", version, about = "Personal concept memory for multimodal assistants")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistanceArg {
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Store directory (manifest.json, vectors.bin, images/).
    #[arg(long, global = true, env = "RAP_STORE", default_value = "rap_store")]
    pub store: PathBuf,
    /// Embedding dimension for a new store.
    #[arg(long, global = true, default_value_t = rap_core::DEFAULT_DIM)]
    pub dim: usize,
    /// Fixture file: regions and embeddings keyed by image SHA-256.
    #[arg(long, global = true)]
    pub fixtures: Option<PathBuf>,
    #[arg(long, global = true, env = "RAP_DETECTOR_URL")]
    pub detector_url: Option<String>,
    #[arg(long, global = true, env = "RAP_EMBEDDER_URL")]
    pub embedder_url: Option<String>,
    #[arg(long, global = true, env = "RAP_GENERATOR_URL")]
    pub generator_url: Option<String>,
    /// Talk to the generator with the chat-completions protocol using this model.
    #[arg(long, global = true)]
    pub chat_model: Option<String>,
    /// Deterministic hash embedder, for tests and offline use.
    #[arg(long, global = true)]
    pub test_embedder: bool,
    #[arg(long, global = true, default_value_t = 30)]
    pub timeout_secs: u64,
    #[arg(long, global = true, default_value_t = 2)]
    pub per_region_k: usize,
    #[arg(long, global = true, default_value_t = 2)]
    pub global_k: usize,
    #[arg(long, global = true)]
    pub max_distance: Option<f64>,
    #[arg(long, global = true, value_enum, default_value_t = DistanceArg::Euclidean)]
    pub distance: DistanceArg,
    #[arg(long, global = true, default_value_t = rap_core::perception::DEFAULT_SCORE_THRESHOLD)]
    pub score_threshold: f64,
    #[arg(long, global = true, default_value_t = 0)]
    pub generator_retries: u32,
    /// Cap on visually retrieved concepts per prompt.
    #[arg(long, global = true)]
    pub max_concepts: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Manage stored concepts.
    #[command(subcommand)]
    Concept(ConceptCmd),
    /// Ask a question, optionally about an image.
    Chat {
        #[arg(long, default_value = "")]
        text: String,
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Nearest stored concepts to an image or an embedding.
    Retrieve {
        #[arg(long, conflicts_with = "embedding", required_unless_present = "embedding")]
        image: Option<PathBuf>,
        /// JSON array of floats.
        #[arg(long)]
        embedding: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Synthesize training records from a box-annotated corpus.
    Datagen(DatagenArgs),
    /// Metrics and retrieval experiments.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum ConceptCmd {
    Add {
        #[arg(long)]
        name: String,
        #[arg(long)]
        category: String,
        #[arg(long, default_value = "")]
        desc: String,
        #[arg(long)]
        image: PathBuf,
    },
    Edit {
        id: String,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        category: Option<String>,
        #[arg(long)]
        desc: Option<String>,
        #[arg(long)]
        image: Option<PathBuf>,
    },
    Rm {
        id: String,
    },
    List,
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    /// JSON-lines corpus of annotated samples.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory image_ref paths are resolved against; defaults to the corpus directory.
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub records: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Annotation file with caption, description, qa and concept answers.
    #[arg(long, conflicts_with = "annotator_url")]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub annotator_url: Option<String>,
    #[arg(long, default_value_t = 0.3)]
    pub negative_rate: f64,
    #[arg(long, default_value_t = 1)]
    pub negatives: usize,
    #[arg(long, default_value_t = 2)]
    pub variants: usize,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Recall, precision and F1 of personalized captions.
    Captions {
        /// JSON lines of {generated_caption, ground_truth_concepts}.
        #[arg(long)]
        input: PathBuf,
        /// JSON array of known concept names; defaults to the store's names.
        #[arg(long)]
        known: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Positive, negative and weighted recognition accuracy.
    Recognition {
        /// JSON lines of {split: positive|negative, reply}.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Visual, text-only and weighted QA accuracy.
    Qa {
        /// JSON lines of {mode: visual|text, correct}.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-K recall and precision over database sizes.
    Sweep {
        /// JSON lines of {embedding, truth}; runs against the store. Synthetic data otherwise.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "50,100,300,500")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,5")]
        ks: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        synthetic_dim: usize,
        #[arg(long, default_value_t = 50)]
        synthetic_queries: usize,
        /// Uniform noise half-width added to synthetic queries.
        #[arg(long, default_value_t = 1.5)]
        noise: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time to add concepts with the configured embedder (store left untouched).
    Timing {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}
