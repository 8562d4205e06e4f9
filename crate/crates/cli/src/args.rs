use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lguided::classifier::Pooling;
use lguided::datapipe::Split;
use lguided::{ContextualSource, Error, HyperParams, Result};

#[derive(Debug, Parser)]
#[command(name = "lguided", version, about = "Label-guided text classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint.lgdl and metrics.jsonl under --out.
    Train(TrainArgs),
    /// Score a checkpoint on one split; prints metrics JSON.
    Eval(EvalArgs),
    /// Export per-document label attention as JSON files.
    Attend(AttendArgs),
    /// Train once per prototype count and print `t,accuracy,seconds`.
    #[command(name = "sweep-t")]
    SweepT(SweepArgs),
    /// Write a synthetic keyword corpus as train.tsv/test.tsv.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ContextualKind {
    Bilstm,
    Precomputed,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PoolArg {
    Mean,
    Max,
    Last,
}

impl From<PoolArg> for Pooling {
    fn from(p: PoolArg) -> Self {
        match p {
            PoolArg::Mean => Pooling::Mean,
            PoolArg::Max => Pooling::Max,
            PoolArg::Last => Pooling::Last,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Dataset, source and hyperparameter flags shared by `train` and `sweep-t`.
#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Directory with train.tsv, test.tsv and optionally dev.tsv.
    #[arg(long)]
    pub data: PathBuf,
    /// Whitespace-separated word vectors (`word v1 ... vd` per line).
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Small dimensions for quick runs (m_p 50, h 25, t 5).
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Prototypes per label.
    #[arg(long, conflicts_with = "no_label_layer")]
    pub t: Option<usize>,
    /// Word embedding dimension.
    #[arg(long)]
    pub m_p: Option<usize>,
    /// BiLSTM hidden size per direction.
    #[arg(long)]
    pub h: Option<usize>,
    /// Label embedding dimension; must equal the contextual width.
    #[arg(long)]
    pub m_l: Option<usize>,
    /// Compressed dimension of the first MLP (default 10 x labels).
    #[arg(long)]
    pub m_f: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub min_count: Option<usize>,
    /// Replace the label-guided layer with plain pooling.
    #[arg(long)]
    pub no_label_layer: bool,
    #[arg(long)]
    pub freeze_embeddings: bool,
    #[arg(long, value_enum)]
    pub contextual: Option<ContextualKind>,
    /// Precomputed contextual vector file (with --contextual precomputed).
    #[arg(long)]
    pub precomputed: Option<PathBuf>,
    /// How many of the last stored layers to use.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Pooling for --no-label-layer.
    #[arg(long, value_enum)]
    pub pool: Option<PoolArg>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Per-class share of train held out for model selection when there is no dev.tsv.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

impl ModelArgs {
    /// Resolves flags over the chosen preset and checks them before any work.
    pub fn hyperparams(&self) -> Result<HyperParams> {
        let mut hp = match self.preset {
            Some(Preset::Desk) => HyperParams::desk(),
            None => HyperParams::default(),
        };
        macro_rules! set {
            ($flag:expr => $field:expr) => {
                if let Some(v) = $flag {
                    $field = v;
                }
            };
        }
        set!(self.batch_size => hp.batch_size);
        set!(self.lr => hp.learning_rate);
        set!(self.t => hp.prototypes);
        set!(self.m_p => hp.embedding_dim);
        set!(self.h => hp.hidden);
        set!(self.epochs => hp.epochs);
        set!(self.seed => hp.seed);
        set!(self.max_len => hp.max_len);
        set!(self.min_count => hp.min_count);
        set!(self.dropout => hp.dropout);
        set!(self.val_fraction => hp.val_fraction);
        hp.label_dim = self.m_l;
        hp.compressed_dim = self.m_f;
        hp.clip_norm = self.clip_norm;
        hp.no_label_layer = self.no_label_layer;
        hp.freeze_embeddings = self.freeze_embeddings;
        hp.workers = self.workers.max(1);
        if let Some(p) = self.pool {
            if !self.no_label_layer {
                return Err(Error::Usage("--pool only applies with --no-label-layer".into()));
            }
            hp.pooling = p.into();
        }
        hp.contextual = match (self.contextual.unwrap_or(ContextualKind::Bilstm), self.layers, &self.precomputed) {
            (ContextualKind::Bilstm, None, None) => ContextualSource::Bilstm,
            (ContextualKind::Bilstm, _, _) => {
                return Err(Error::Usage("--layers and --precomputed need --contextual precomputed".into()))
            }
            (ContextualKind::Precomputed, _, None) => {
                return Err(Error::Usage("--contextual precomputed needs --precomputed FILE".into()))
            }
            (ContextualKind::Precomputed, layers, Some(_)) => ContextualSource::Precomputed {
                layers: layers.unwrap_or(1),
            },
        };
        if let ContextualSource::Precomputed { layers: 0 } = hp.contextual {
            return Err(Error::Usage("--layers must be at least 1".into()));
        }
        if self.pretrained.is_some() && hp.contextual != ContextualSource::Bilstm {
            return Err(Error::Usage("--pretrained only applies to the BiLSTM encoder".into()));
        }
        hp.validate()?;
        Ok(hp)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Train this many times with seeds seed, seed+1, ... and report the mean test accuracy.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Write 0 for wall-clock fields so reruns are byte-identical.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub precomputed: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct AttendArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Comma-separated document ids such as `test-3`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ids: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub precomputed: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated prototype counts.
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20")]
    pub t_values: Vec<usize>,
    /// Also write sweep.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub labels: usize,
    #[arg(long, default_value_t = 200)]
    pub docs_per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub test_docs_per_class: usize,
    #[arg(long, default_value_t = 0.2)]
    pub noise: f64,
    /// Keywords each class borrows from the next one.
    #[arg(long, default_value_t = 0)]
    pub overlap: usize,
    #[arg(long, default_value_t = 20)]
    pub doc_len: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}
