mod commands;
mod experiment;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use probekit::data::{FeatureDims, Split};
use probekit::probe::ProbeVariant;
use probekit::Error;

use commands::Context;
use experiment::{Experiment, TaskEntry};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "probekit", version, about = "Train and evaluate temporal probes over frozen backbone features")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Experiment file (TOML); flags override its fields.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Seed for probe init, training order and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Resolve and print the configuration without running anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Replace a non-empty output directory.
    #[arg(long, global = true)]
    overwrite: bool,
    /// Print only results.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Args, Default)]
struct DataArgs {
    /// Dataset manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Symmetric pair file.
    #[arg(long)]
    pairs: Option<PathBuf>,
}

#[derive(Args, Default)]
struct ProbeArgs {
    /// Probe variant: linear, attentive, self-attn or step.
    #[arg(long, value_parser = parse_variant)]
    probe: Option<ProbeVariant>,
    /// Attention heads.
    #[arg(long)]
    heads: Option<usize>,
}

#[derive(Args, Default)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic symmetric-action dataset.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_pairs: Option<usize>,
        #[arg(long)]
        num_nsym: Option<usize>,
        #[arg(long)]
        clips_per_class: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        tokens: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        noise_std: Option<f64>,
    },
    /// Train a probe, evaluate it on the test split and save a checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        probe: ProbeArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with and without frame-order corruption.
    Sensitivity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated: reverse, shuffle:<seed>.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<String>>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate a preset grid of probe variants.
    Ablate {
        /// table4 (block), table5 (aggregation), table6 (PE), table7 (PE granularity), table8 (components).
        #[arg(long)]
        preset: Option<String>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        heads: Option<usize>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count trainable parameters.
    Params {
        #[command(flatten)]
        probe: ProbeArgs,
        /// Read the configuration from a checkpoint instead.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        tokens: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Render the stored results of a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Evaluate several checkpoints over one shared pass of feature loads.
    Multitask {
        /// NAME=CHECKPOINT,MANIFEST[,PAIRS]; repeatable.
        #[arg(long = "task", value_parser = parse_task)]
        tasks: Vec<TaskEntry>,
        /// Backbone cost per clip, for the accounting table.
        #[arg(long)]
        shared_gflops: Option<f64>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_variant(s: &str) -> Result<ProbeVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_task(s: &str) -> Result<TaskEntry, String> {
    let (name, rest) = s.split_once('=').ok_or("expected NAME=CHECKPOINT,MANIFEST[,PAIRS]")?;
    let parts: Vec<&str> = rest.split(',').collect();
    match parts.as_slice() {
        [ckpt, manifest] | [ckpt, manifest, ""] => Ok(TaskEntry {
            name: name.into(),
            checkpoint: ckpt.into(),
            manifest: manifest.into(),
            pairs: None,
        }),
        [ckpt, manifest, pairs] => Ok(TaskEntry {
            name: name.into(),
            checkpoint: ckpt.into(),
            manifest: manifest.into(),
            pairs: Some(pairs.into()),
        }),
        _ => Err("expected NAME=CHECKPOINT,MANIFEST[,PAIRS]".into()),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl DataArgs {
    fn apply(self, exp: &mut Experiment) {
        exp.data.manifest = self.manifest.or(exp.data.manifest.take());
        exp.data.pairs = self.pairs.or(exp.data.pairs.take());
    }
}

impl ProbeArgs {
    fn apply(self, exp: &mut Experiment) {
        set(&mut exp.probe.variant, self.probe);
        set(&mut exp.probe.num_heads, self.heads);
    }
}

impl TrainArgs {
    fn apply(self, exp: &mut Experiment) {
        set(&mut exp.train.epochs, self.epochs);
        set(&mut exp.train.batch_size, self.batch_size);
        set(&mut exp.train.learning_rate, self.lr);
        set(&mut exp.train.weight_decay, self.weight_decay);
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Contract(_) => EXIT_USAGE,
        Error::NanLoss { .. } | Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn run(cli: Cli) -> probekit::Result<()> {
    let g = cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let mut exp = match &g.config {
        Some(path) => Experiment::load(path)?,
        None => Experiment::default(),
    };
    let mut command = cli.command;
    match command {
        Command::GenSynth { num_pairs, num_nsym, clips_per_class, frames, tokens, dim, noise_std, .. } => {
            let s = &mut exp.synth;
            set(&mut s.num_pairs, num_pairs);
            set(&mut s.num_nsym, num_nsym);
            set(&mut s.clips_per_class, clips_per_class);
            set(&mut s.frames, frames);
            set(&mut s.tokens, tokens);
            set(&mut s.dim, dim);
            set(&mut s.noise_std, noise_std);
        }
        Command::Train { ref mut data, ref mut probe, ref mut train, .. } => {
            std::mem::take(data).apply(&mut exp);
            std::mem::take(probe).apply(&mut exp);
            std::mem::take(train).apply(&mut exp);
        }
        Command::Eval { ref mut data, .. } => std::mem::take(data).apply(&mut exp),
        Command::Sensitivity { ref mut data, ref mut modes, .. } => {
            std::mem::take(data).apply(&mut exp);
            set(&mut exp.sensitivity.modes, modes.take());
        }
        Command::Ablate { ref mut preset, ref mut data, heads, ref mut train, .. } => {
            exp.ablation.preset = preset.take().or(exp.ablation.preset.take());
            std::mem::take(data).apply(&mut exp);
            set(&mut exp.probe.num_heads, heads);
            std::mem::take(train).apply(&mut exp);
        }
        Command::Params { ref mut probe, ref manifest, .. } => {
            std::mem::take(probe).apply(&mut exp);
            exp.data.manifest = manifest.clone().or(exp.data.manifest.take());
        }
        Command::Multitask { ref mut tasks, shared_gflops, .. } => {
            if !tasks.is_empty() {
                exp.multitask.tasks = std::mem::take(tasks);
            }
            set(&mut exp.multitask.shared_gflops_per_clip, shared_gflops);
        }
        Command::Report { .. } => {}
    }
    exp.apply_seed(g.seed);
    let ctx = Context {
        experiment: exp,
        dry_run: g.dry_run,
        overwrite: g.overwrite,
        quiet: g.quiet,
        argv: std::env::args().collect(),
    };
    match command {
        Command::GenSynth { out, .. } => commands::gen_synth(&ctx, &out),
        Command::Train { out, .. } => commands::train_cmd(&ctx, &out),
        Command::Eval { checkpoint, split, out, .. } => commands::eval_cmd(&ctx, &checkpoint, split, out.as_deref()),
        Command::Sensitivity { checkpoint, split, out, .. } => {
            commands::sensitivity_cmd(&ctx, &checkpoint, split, out.as_deref())
        }
        Command::Ablate { out, .. } => commands::ablate_cmd(&ctx, &out),
        Command::Params { checkpoint, dim, frames, tokens, classes, .. } => {
            let dims = match (dim, frames, tokens) {
                (Some(dim), Some(frames), Some(tokens)) => Some(FeatureDims { frames, tokens, dim }),
                (None, None, None) => None,
                _ => return Err(Error::Config("--dim, --frames and --tokens go together".into())),
            };
            commands::params_cmd(&ctx, &commands::ParamsQuery { checkpoint, dims, classes })
        }
        Command::Report { run } => commands::report_cmd(&ctx, &run),
        Command::Multitask { split, out, .. } => commands::multitask_cmd(&ctx, split, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
