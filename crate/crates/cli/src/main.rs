use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use chanvit_core::analysis::{self, DEFAULT_MI_BINS};
use chanvit_core::checkpoint::{load_checkpoint, save_checkpoint};
use chanvit_core::config::RunConfig;
use chanvit_core::data::{gen_synth_dataset, load_dataset, write_dataset, Split};
use chanvit_core::model::ModelState;
use chanvit_core::sampling::{inclusion_frequencies, ChannelSource, SamplerKind, SamplerSpec};
use chanvit_core::train::{
    evaluate, leave_k_out_sweep, read_counts_csv, train, TrainOptions, TrainSummary, SAMPLER_COUNTS_FILE,
    TRAIN_LOG_FILE, TRAIN_SUMMARY_FILE,
};
use chanvit_core::{rng, Error};

const EVAL_BATCH: usize = 64;

#[derive(Parser)]
#[command(name = "chanvit", version, about = "Multi-channel ViT with channel diversity mechanisms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic 6-channel dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
    },
    /// Train a model from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset evaluated after every epoch and at the end.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Top-1 accuracy on a channel subset (all channels by default).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        channels: Option<Vec<usize>>,
    },
    /// Accuracy on every subset of `--keep` channels.
    EvalSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        keep: usize,
        /// Optional CSV of per-subset accuracies.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo channel inclusion frequencies of a sampler.
    SampleStats {
        #[arg(long, value_enum)]
        sampler: SamplerArg,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = chanvit_core::sampling::DEFAULT_T_DCS)]
        temp: f64,
        /// JSON array of per-channel feature vectors (DCS); defaults to
        /// mutually orthogonal features.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Diagnostics on a trained checkpoint.
    Analyze {
        #[arg(value_enum)]
        kind: AnalysisKind,
        #[command(flatten)]
        args: AnalyzeArgs,
    },
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MI_BINS)]
    bins: usize,
    /// Layers for the attention report (all by default).
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Hcs,
    Dcs,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalysisKind {
    Mi,
    TokenDist,
    Attention,
    SamplingFreq,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::GenData {
            out,
            samples,
            seed,
            noise,
            split,
        } => {
            if samples == 0 {
                return Err(Failure::Usage("--samples must be at least 1".into()));
            }
            let mut ds = gen_synth_dataset(samples, seed, noise)?;
            ds.split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            write_dataset(&ds, &out)?;
            println!(
                "wrote {samples} samples ({} channels, {}x{}, noise {noise}, seed {seed}) to {}",
                ds.n_channels(),
                ds.height,
                ds.width,
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            eval_data,
        } => cmd_train(&config, &data, &out, eval_data.as_deref())?,
        Command::Eval {
            checkpoint,
            data,
            channels,
        } => {
            let state = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(&data)?;
            let channels = check_channels(channels, &state)?;
            let r = evaluate(&state, &ds, &channels, EVAL_BATCH)?;
            println!("channels {channels:?}: accuracy {:.4} ({}/{})", r.accuracy(), r.correct, r.total);
        }
        Command::EvalSweep {
            checkpoint,
            data,
            keep,
            out,
        } => {
            let state = load_checkpoint(&checkpoint)?;
            let m = state.config.n_channels;
            if keep == 0 || keep > m {
                return Err(Failure::Usage(format!("--keep must be in 1..={m}")));
            }
            let ds = load_dataset(&data)?;
            let rep = leave_k_out_sweep(&state, &ds, keep, EVAL_BATCH)?;
            for r in &rep.rows {
                println!("channels {:?}: accuracy {:.4}", r.channels, r.accuracy);
            }
            println!("keep {keep}: mean {:.4} ± {:.4} over {} subsets", rep.mean, rep.std, rep.rows.len());
            if let Some(out) = out {
                rep.write_csv(&out)?;
            }
        }
        Command::SampleStats {
            sampler,
            m,
            temp,
            features,
            trials,
            out,
            seed,
        } => cmd_sample_stats(sampler, m, temp, features.as_deref(), trials, &out, seed)?,
        Command::Analyze { kind, args } => cmd_analyze(kind, &args)?,
    }
    Ok(())
}

fn check_channels(channels: Option<Vec<usize>>, state: &ModelState) -> CliResult<Vec<usize>> {
    let m = state.config.n_channels;
    let Some(ch) = channels else {
        return Ok((0..m).collect());
    };
    if ch.is_empty() {
        return Err(Failure::Usage("--channels must list at least one channel".into()));
    }
    if let Some(c) = ch.iter().find(|&&c| c >= m) {
        return Err(Failure::Usage(format!("channel {c} is outside the vocabulary of {m}")));
    }
    Ok(ch)
}

fn cmd_train(config: &Path, data: &Path, out: &Path, eval_data: Option<&Path>) -> CliResult {
    let cfg = match RunConfig::load(config) {
        Ok(c) => c,
        Err(Error::Config(msg)) => return Err(Failure::Usage(format!("invalid config: {msg}"))),
        Err(e) => return Err(e.into()),
    };
    let ds = load_dataset(data)?;
    let ev = eval_data.map(load_dataset).transpose()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.write_resolved(out)?;
    let opts = TrainOptions { eval_every: 1 };
    let outcome = train(&cfg, &ds, ev.as_ref(), &opts, |r| {
        let eval = r.eval_acc.map(|a| format!(" eval_acc {a:.4}")).unwrap_or_default();
        println!(
            "epoch {:>3} lr {:.3e} task {:.4} cdl {:.4} tdl {:.5} train_acc {:.4}{eval}",
            r.epoch, r.lr, r.task_loss, r.cdl, r.tdl, r.train_acc
        );
    })?;
    save_checkpoint(&outcome.state, out)?;
    outcome.log.write_csv(&out.join(TRAIN_LOG_FILE))?;
    outcome.log.write_counts_csv(&out.join(SAMPLER_COUNTS_FILE))?;
    let summary = TrainSummary {
        batches: outcome.log.batches,
        epochs: cfg.optim.epochs,
        checksum: outcome.state.checksum(),
        final_eval_acc: outcome.log.records.last().and_then(|r| r.eval_acc),
    };
    summary.write(&out.join(TRAIN_SUMMARY_FILE))?;
    println!("checkpoint written to {} (sha256 {})", out.display(), summary.checksum);
    Ok(())
}

fn cmd_sample_stats(
    sampler: SamplerArg,
    m: usize,
    temp: f64,
    features: Option<&Path>,
    trials: usize,
    out: &Path,
    seed: u64,
) -> CliResult {
    if m == 0 || trials == 0 {
        return Err(Failure::Usage("--m and --trials must be at least 1".into()));
    }
    let spec = SamplerSpec {
        kind: match sampler {
            SamplerArg::Hcs => SamplerKind::Hcs,
            SamplerArg::Dcs => SamplerKind::Dcs,
        },
        t_dcs: temp,
        ..SamplerSpec::default()
    };
    if !(temp > 0.0) {
        return Err(Failure::Usage(format!("--temp must be positive, got {temp}")));
    }
    let feats: Vec<Vec<f64>> = match features {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?
        }
        None => (0..m).map(|i| (0..m).map(|j| f64::from(u8::from(i == j))).collect()).collect(),
    };
    if feats.len() != m {
        return Err(Failure::Usage(format!("--features has {} rows but --m is {m}", feats.len())));
    }
    let source = match spec.kind {
        SamplerKind::Dcs => ChannelSource::Features(&feats),
        _ => ChannelSource::Count(m),
    };
    let mut r = rng::stream(seed, "sample-stats", 0);
    let freq = inclusion_frequencies(&spec, source, trials, &mut r)?;
    analysis::write_frequency_csv(&freq, out)?;
    let shown: Vec<String> = freq.iter().map(|f| format!("{f:.4}")).collect();
    println!("{trials} trials, m = {m}: inclusion frequencies [{}]", shown.join(", "));
    if spec.kind == SamplerKind::Hcs {
        println!("HCS reference (m+1)/(2m) = {:.4}", chanvit_core::sampling::hcs_inclusion_probability(m));
    }
    Ok(())
}

fn cmd_analyze(kind: AnalysisKind, a: &AnalyzeArgs) -> CliResult {
    let state = load_checkpoint(&a.checkpoint)?;
    if a.bins < 2 {
        return Err(Failure::Usage("--bins must be at least 2".into()));
    }
    match kind {
        AnalysisKind::Mi => {
            let mi = analysis::channel_token_mi_matrix(&state, a.bins)?;
            mi.write_csv(&a.out)?;
            println!("channel-token MI ({} bins): off-diagonal mean {:.4} nats", a.bins, mi.off_diagonal_mean());
        }
        AnalysisKind::TokenDist => {
            let h = analysis::channel_token_histograms(&state, a.bins)?;
            h.write_csv(&a.out)?;
            println!(
                "token histograms over [{:.4}, {:.4}]: {} occupied bins",
                h.edges[0],
                h.edges[a.bins],
                h.occupied_bins()
            );
        }
        AnalysisKind::Attention => {
            let Some(data) = &a.data else {
                return Err(Failure::Usage("analyze attention needs --data".into()));
            };
            let ds = load_dataset(data)?;
            let channels = check_channels(a.channels.clone(), &state)?;
            let depth = state.config.depth;
            let layers = a.layers.clone().unwrap_or_else(|| (0..depth).collect());
            if let Some(l) = layers.iter().find(|&&l| l >= depth) {
                return Err(Failure::Usage(format!("layer {l} out of range ({depth} layers)")));
            }
            let rep = analysis::attention_report(&state, &ds, &channels, &layers, EVAL_BATCH)?;
            rep.write_csv(&a.out)?;
            for (l, m) in rep.layers.iter().zip(&rep.mass) {
                let shown: Vec<String> = m.iter().map(|v| format!("{v:.3}")).collect();
                println!("layer {l}: [{}] entropy {:.4}", shown.join(", "), analysis::entropy(m));
            }
        }
        AnalysisKind::SamplingFreq => {
            let dir = if a.checkpoint.is_dir() {
                a.checkpoint.clone()
            } else {
                a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default()
            };
            let counts = read_counts_csv(&dir.join(SAMPLER_COUNTS_FILE))?;
            let summary = TrainSummary::load(&dir.join(TRAIN_SUMMARY_FILE))?;
            let f = analysis::sampling_frequency_report(&counts, summary.batches)?;
            f.write_csv(&a.out)?;
            let shown: Vec<String> = f.frequency.iter().map(|v| format!("{v:.4}")).collect();
            println!("sampling frequency [{}], HCS reference {:.4}", shown.join(", "), f.hcs_reference);
        }
    }
    Ok(())
}
