use std::net::IpAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "percept",
    version,
    about = "Perceptual material similarity from 2AFC triplet judgments"
)]
pub struct Cli {
    /// Master seed for every randomized step
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Dataset directory containing manifest.json
    #[arg(long, global = true, default_value = ".")]
    pub data_dir: PathBuf,
    /// Output path (file or directory, per command) [default: per command]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted latent structure (writes a dataset directory) [default out: synth]
    GenSynth(GenSynthArgs),
    /// Simulate answers from planted ground truth (writes JSON-lines) [default out: answers.jsonl]
    Simulate(SimulateArgs),
    /// Hold out views by shape tag (writes <out>/train and <out>/held) [default out: split]
    Split(SplitArgs),
    /// Train the encoder (writes a checkpoint and <out>.trace.csv) [default out: model.ckpt]
    Train(TrainArgs),
    /// Evaluate a predictor against answers (writes a JSON report) [default out: report.json]
    Eval(EvalArgs),
    /// Dump per-view encoder features as CSV [default out: features.csv]
    Embed(EmbedArgs),
    /// Fit a t-distributed stochastic triplet embedding (CSV plus JSON sidecar) [default out: embedding.csv]
    Tste(TsteArgs),
    /// Plan the next adaptive sampling iteration [default out: plan.json]
    SampleNext(SampleNextArgs),
    /// Suggest materials near or far from a reference (one id per line; stdout without --out)
    Suggest(SuggestArgs),
    /// Project materials to 2D on their top principal axes [default out: projection.csv]
    Project(FeatureArgs),
    /// Cluster materials with k-means [default out: clusters.csv]
    Cluster(ClusterArgs),
    /// Pick the number of clusters by explained variance [default out: elbow.json]
    Elbow(ElbowArgs),
    /// Hopkins clustering-tendency statistic [default out: hopkins.json]
    Hopkins(HopkinsArgs),
    /// One representative material per cluster [default out: summary.txt]
    Summarize(SummarizeArgs),
    /// Solve for mixing weights that best reproduce a target material [default out: solution.json]
    Gamut(GamutArgs),
    /// Run the annotation HTTP service (admin token from PERCEPT_ADMIN_TOKEN)
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Csv,
    Binary,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Number of materials
    #[arg(long, default_value_t = 20)]
    pub materials: usize,
    /// Views per material (shape tags shape0.., illumination env0/env1)
    #[arg(long, default_value_t = 4)]
    pub views: usize,
    /// Latent dimension of the planted configuration
    #[arg(long, default_value_t = 2)]
    pub latent_dim: usize,
    /// Descriptor dimension
    #[arg(long, default_value_t = 16)]
    pub descriptor_dim: usize,
    /// Per-view descriptor noise
    #[arg(long, default_value_t = 0.01)]
    pub noise_sigma: f64,
    /// Descriptor file format
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Ground truth file [default: <data-dir>/truth.json]
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Distinct triplets to sample
    #[arg(long, default_value_t = 2000)]
    pub triplets: usize,
    /// Votes per triplet
    #[arg(long, default_value_t = 1)]
    pub votes: usize,
    /// Decision temperature: 0 answers deterministically, 1 follows the similarity quotient
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Shape tag to hold out (repeatable) [required]
    #[arg(long, required = true)]
    pub holdout: Vec<String>,
}

#[derive(Debug, Args)]
pub struct AnswersArg {
    /// Answers file (JSON-lines) [default: <data-dir>/answers.jsonl]
    #[arg(long)]
    pub answers: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub answers: AnswersArg,
    /// Training epochs
    #[arg(long, default_value_t = 80)]
    pub epochs: usize,
    /// Initial learning rate
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Epochs between learning-rate decays
    #[arg(long, default_value_t = 20)]
    pub lr_step: usize,
    /// Learning-rate decay factor
    #[arg(long, default_value_t = 10.0)]
    pub lr_decay: f64,
    /// Materials per batch
    #[arg(long, default_value_t = 8)]
    pub batch_materials: usize,
    /// Views per material per batch
    #[arg(long, default_value_t = 4)]
    pub batch_views: usize,
    /// Batches per epoch [default: enough to draw every material triple once]
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    /// Hidden layer widths, comma separated
    #[arg(long, value_delimiter = ',', default_values_t = vec![256])]
    pub hidden: Vec<usize>,
    /// Feature dimension
    #[arg(long, default_value_t = 128)]
    pub dim: usize,
    /// Triplet-loss margin
    #[arg(long, default_value_t = 0.3)]
    pub margin: f64,
    /// Weight of the triplet hinge loss
    #[arg(long, default_value_t = 1.0)]
    pub w_tl: f64,
    /// Weight of the similarity-probability loss
    #[arg(long, default_value_t = 1.0)]
    pub w_p: f64,
    /// Weight of the label-smoothed cross-entropy loss
    #[arg(long, default_value_t = 0.0)]
    pub w_ce: f64,
    /// Weight of the batch-hard triplet loss
    #[arg(long, default_value_t = 0.0)]
    pub w_btl: f64,
    /// Label smoothing for cross-entropy
    #[arg(long, default_value_t = 0.1)]
    pub smoothing: f64,
    /// Cross-entropy classes; 0 means one per material
    #[arg(long, default_value_t = 0)]
    pub classes: usize,
    /// Evaluate per-sample work in parallel (results are identical) [default: off]
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
#[group(id = "predictor", required = true, multiple = false)]
pub struct PredictorArgs {
    /// Encoder checkpoint; distances are computed over the views in --data-dir [default: none; exactly one predictor required]
    #[arg(long, group = "predictor")]
    pub checkpoint: Option<PathBuf>,
    /// Embedding CSV written by `tste` [default: none; exactly one predictor required]
    #[arg(long, group = "predictor")]
    pub embedding: Option<PathBuf>,
    /// Majority-vote oracle over the answers themselves [default: off]
    #[arg(long, group = "predictor")]
    pub oracle: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub answers: AnswersArg,
    #[command(flatten)]
    pub predictor: PredictorArgs,
    /// Planted ground truth for the distance-matrix error [default: none]
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Encoder checkpoint [required]
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct TsteArgs {
    #[command(flatten)]
    pub answers: AnswersArg,
    /// Student-t degrees of freedom
    #[arg(long, default_value_t = 5.0)]
    pub alpha: f64,
    /// Embedding dimension
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Initial ascent step
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Maximum ascent iterations
    #[arg(long, default_value_t = 1000)]
    pub max_iters: usize,
}

#[derive(Debug, Args)]
pub struct SampleNextArgs {
    /// Answers collected so far [default: none, which gives a random bootstrap plan]
    #[arg(long)]
    pub answers: Option<PathBuf>,
    /// Previously issued plan files, never re-issued (repeatable) [default: none]
    #[arg(long)]
    pub plan: Vec<PathBuf>,
    /// Pairs per reference material
    #[arg(long, default_value_t = 10)]
    pub pairs: usize,
    /// Random candidate pairs scored per reference; 0 scores all
    #[arg(long, default_value_t = 200)]
    pub pool: usize,
    /// Student-t degrees of freedom of the posterior embedding
    #[arg(long, default_value_t = 5.0)]
    pub alpha: f64,
    /// Posterior embedding dimension
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Also write the convergence log CSV here [default: none]
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(id = "features", required = true, multiple = false)]
pub struct FeatureArgs {
    /// Encoder checkpoint; material features are view-feature means over --data-dir [default: none; exactly one source required]
    #[arg(long, group = "features")]
    pub checkpoint: Option<PathBuf>,
    /// Embedding CSV written by `tste` [default: none; exactly one source required]
    #[arg(long, group = "features")]
    pub embedding: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BandArg {
    Near,
    Mid,
    Far,
}

#[derive(Debug, Args)]
pub struct SuggestArgs {
    #[command(flatten)]
    pub features: FeatureArgs,
    /// Reference material id [required]
    #[arg(long)]
    pub reference: String,
    /// Distance band by rank thirds
    #[arg(long, value_enum, default_value_t = BandArg::Near, conflicts_with = "quantile")]
    pub band: BandArg,
    /// Explicit rank-quantile band LO,HI instead of --band [default: none]
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub quantile: Option<Vec<f64>>,
    /// Number of suggestions
    #[arg(long, default_value_t = 5)]
    pub count: usize,
}

#[derive(Debug, Args)]
pub struct KMeansArgs {
    /// k-means restarts
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    /// Lloyd iterations per restart
    #[arg(long, default_value_t = 300)]
    pub max_iters: usize,
    /// Centroid-shift tolerance
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub features: FeatureArgs,
    /// Number of clusters [required]
    #[arg(long)]
    pub k: usize,
    #[command(flatten)]
    pub kmeans: KMeansArgs,
}

#[derive(Debug, Args)]
pub struct ElbowArgs {
    #[command(flatten)]
    pub features: FeatureArgs,
    /// Explained-variance threshold
    #[arg(long, default_value_t = 0.95)]
    pub threshold: f64,
    /// Largest k tried [default: number of materials]
    #[arg(long)]
    pub k_max: Option<usize>,
    #[command(flatten)]
    pub kmeans: KMeansArgs,
}

#[derive(Debug, Args)]
pub struct HopkinsArgs {
    #[command(flatten)]
    pub features: FeatureArgs,
    /// Sample size as a fraction of the materials
    #[arg(long, default_value_t = 0.1)]
    pub fraction: f64,
    /// Smallest sample size
    #[arg(long, default_value_t = 5)]
    pub min_sample: usize,
    /// Largest sample size
    #[arg(long, default_value_t = 50)]
    pub max_sample: usize,
    /// Repetitions averaged
    #[arg(long, default_value_t = 100)]
    pub repetitions: usize,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    #[command(flatten)]
    pub features: FeatureArgs,
    /// Number of clusters [default: chosen by the elbow rule]
    #[arg(long)]
    pub k: Option<usize>,
    /// Explained-variance threshold used when --k is absent
    #[arg(long, default_value_t = 0.95)]
    pub threshold: f64,
    #[command(flatten)]
    pub kmeans: KMeansArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ConstraintArg {
    Simplex,
    Box,
}

#[derive(Debug, Args)]
pub struct GamutArgs {
    /// Encoder checkpoint [required]
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Problem JSON: {"target": view id or descriptor, "basis": [...]} [required]
    #[arg(long)]
    pub problem: PathBuf,
    /// Maximum projected-gradient iterations
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    /// Initial step size
    #[arg(long, default_value_t = 0.05)]
    pub step: f64,
    /// Stop when no weight moves more than this
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Feasible set for the weights
    #[arg(long, value_enum, default_value_t = ConstraintArg::Simplex)]
    pub constraint: ConstraintArg,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address
    #[arg(long, default_value = "127.0.0.1")]
    pub addr: IpAddr,
    /// Listen port
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Directory holding the append-only event log
    #[arg(long, default_value = "state")]
    pub state_dir: PathBuf,
    /// Static UI directory served at / [default: none]
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    /// Randomize the view condition per triplet item [default: off]
    #[arg(long)]
    pub asymmetric: bool,
    /// Plan coverage required before advancing
    #[arg(long, default_value_t = 0.8)]
    pub coverage: f64,
    /// Trials per HIT
    #[arg(long, default_value_t = 110)]
    pub hit_size: usize,
    /// Training trials per HIT
    #[arg(long, default_value_t = 5)]
    pub training: usize,
    /// Control (repeated) trials per HIT
    #[arg(long, default_value_t = 10)]
    pub controls: usize,
    /// Pairs per reference material in each plan
    #[arg(long, default_value_t = 10)]
    pub pairs: usize,
    /// Random candidate pairs scored per reference; 0 scores all
    #[arg(long, default_value_t = 200)]
    pub pool: usize,
}
