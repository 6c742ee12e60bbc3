mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use ctxseq::model::DecoderStrategy;

use crate::config::RunConfig;

/// Bad flags, config keys or argument combinations.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(
    name = "ctxseq",
    version,
    about = "Train and evaluate source+context sequence-to-sequence models",
    args_override_self = true
)]
struct Cli {
    /// Worker threads for per-example evaluation and decoding.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic key-value lookup dataset.
    Synth(SynthArgs),
    /// Train a model and write its best checkpoint.
    Train(RunArgs),
    /// Score generations against references.
    Eval(EvalArgs),
    /// Decode inputs with beam search.
    Generate(GenerateArgs),
    /// Encoder attention statistics.
    Stats(StatsArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 6)]
    pub n_keys: usize,
    #[arg(long, default_value_t = 4)]
    pub n_ops: usize,
    #[arg(long, default_value_t = 24)]
    pub n_values: usize,
    #[arg(long, default_value_t = 6000)]
    pub n_examples: usize,
    /// Defaults to the seed variable, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Config file plus per-key overrides.
#[derive(Args, Default)]
pub struct RunArgs {
    /// Flat TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,

    #[arg(long)]
    pub strategy: Option<DecoderStrategy>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    #[arg(long)]
    pub decoder_layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// 1-based decoder layers attending to the source (interleave).
    #[arg(long, value_delimiter = ',')]
    pub layers_source: Option<Vec<usize>>,
    /// 1-based decoder layers attending to the context (interleave).
    #[arg(long, value_delimiter = ',')]
    pub layers_context: Option<Vec<usize>>,
    /// Context attention temperature; enables sharpening.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Context attention window width; enables the window.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub scaled_dot: Option<bool>,

    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub validate_every: Option<u64>,
    #[arg(long)]
    pub early_stop_ppl: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub p_st: Option<f64>,
    #[arg(long)]
    pub p_sc: Option<f64>,

    #[arg(long)]
    pub beam_size: Option<usize>,
    #[arg(long)]
    pub length_penalty: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub no_repeat_ngram: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,

    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub reverse_checkpoint: Option<PathBuf>,
}

impl RunArgs {
    /// `base`, then the config file, then the seed variable, then flags.
    pub fn resolve(&self, base: &RunConfig) -> anyhow::Result<RunConfig> {
        let mut c = RunConfig::load(base, self.config.as_deref())?;
        macro_rules! set {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$flag { c.$field = v.clone(); })*
            };
        }
        macro_rules! set_some {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$flag { c.$field = Some(v.clone()); })*
            };
        }
        set!(
            strategy => strategy, d_model => d_model, ffn_dim => ffn_dim,
            encoder_layers => encoder_layers, decoder_layers => decoder_layers, heads => n_heads,
            layers_source => layers_source, layers_context => layers_context,
            lr => lr_peak, warmup_steps => warmup_steps, batch_size => batch_size,
            max_steps => max_steps, validate_every => validate_every, seed => seed,
            p_st => p_st, p_sc => p_sc, beam_size => beam_size, length_penalty => length_penalty,
            max_len => max_len, no_repeat_ngram => no_repeat_ngram, min_len => min_len,
            scaled_dot => scaled_dot,
        );
        set_some!(
            early_stop_ppl => early_stop_ppl, data_dir => data_dir, vocab => vocab,
            train => train, valid => valid, test => test, checkpoint => checkpoint,
            init_checkpoint => init_checkpoint, reverse_checkpoint => reverse_checkpoint,
            out_dir => out_dir,
        );
        if let Some(t) = self.tau {
            c.tau = t;
            c.enable_temperature = true;
        }
        if let Some(s) = self.sigma {
            c.sigma = s;
            c.enable_window = true;
        }
        Ok(c)
    }
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Generations, one per line; scored against --ref without a model.
    #[arg(long, requires = "reference")]
    pub gen: Option<PathBuf>,
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// `source \t context [\t target]` lines; defaults to the test split.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Also write every finished hypothesis with its score.
    #[arg(long)]
    pub nbest: bool,
}

#[derive(Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 40)]
    pub window_radius: usize,
}

/// 1 for usage, 3 for numeric failures, 2 for everything data-related.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<ctxseq::Error>() {
        Some(ctxseq::Error::Config(_)) => 1,
        Some(ctxseq::Error::Numeric(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let res = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Generate(a) => commands::generate(a),
        Command::Stats(a) => commands::stats(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
