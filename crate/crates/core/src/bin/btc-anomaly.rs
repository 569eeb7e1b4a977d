use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use btc_anomaly::cluster::TrimmedKMeansConfig;
use btc_anomaly::pipeline::{run_pipeline, staged, ContractionMode, PipelineConfig};
use btc_anomaly::synth::{generate, SynthConfig};
use btc_anomaly::{Error, Result};

#[derive(Parser)]
#[command(name = "btc-anomaly", version, about = "Collective anomaly detection over transaction graphs")]
struct Cli {
    /// Worker threads (0 = all cores). Results do not depend on this value.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage end to end.
    Run(RunArgs),
    /// Count rows, transactions and wiped addresses.
    IngestStats(IngestArgs),
    /// Write the address → user contraction.
    Contract(ContractArgs),
    /// Compute the per-user feature matrix.
    Features(FeaturesArgs),
    /// Fit the min-max scaler on features.csv.
    Normalize(OutArgs),
    /// Cluster the normalized features.
    Cluster(ClusterCmdArgs),
    /// Summarize clusters and match the theft catalog.
    Report(ReportArgs),
    /// Generate synthetic data with injected anomalous users.
    Synth(SynthArgs),
}

#[derive(Args)]
struct OutArgs {
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    txin: PathBuf,
    #[arg(long)]
    txout: PathBuf,
    /// Optional address universe used for wiping.
    #[arg(long)]
    addresses: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ContractionArgs {
    /// Precomputed addr_id → user_id table.
    #[arg(long, conflicts_with = "derive_contraction")]
    contraction: Option<PathBuf>,
    /// Derive users with the common-input-ownership heuristic.
    #[arg(long)]
    derive_contraction: bool,
}

impl ContractionArgs {
    fn mode(&self) -> Result<ContractionMode> {
        match (&self.contraction, self.derive_contraction) {
            (Some(p), false) => Ok(ContractionMode::Load(p.clone())),
            (None, true) => Ok(ContractionMode::Derive),
            _ => Err(Error::Config(
                "exactly one of --contraction or --derive-contraction is required".into(),
            )),
        }
    }
}

#[derive(Args)]
struct ContractArgs {
    #[command(flatten)]
    ingest: IngestArgs,
    #[command(flatten)]
    contraction: ContractionArgs,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    txin: PathBuf,
    #[arg(long)]
    txout: PathBuf,
    /// Defaults to contraction.tsv in the output directory.
    #[arg(long)]
    contraction: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long, default_value_t = 10)]
    starts: usize,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ClusterArgs {
    fn config(&self) -> TrimmedKMeansConfig {
        TrimmedKMeansConfig {
            k: self.k,
            alpha: self.alpha,
            n_starts: self.starts,
            max_iter: self.max_iter,
            tol: self.tol,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct FlagArgs {
    /// Cluster labels whose members are flagged (0 = trimmed group).
    #[arg(long, value_delimiter = ',', default_value = "0")]
    flag_labels: Vec<u32>,
}

#[derive(Args)]
struct ClusterCmdArgs {
    #[command(flatten)]
    cluster: ClusterArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    thefts: Option<PathBuf>,
    #[command(flatten)]
    flags: FlagArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    ingest: IngestArgs,
    #[command(flatten)]
    contraction: ContractionArgs,
    #[arg(long)]
    thefts: Option<PathBuf>,
    #[command(flatten)]
    cluster: ClusterArgs,
    #[command(flatten)]
    flags: FlagArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    background: usize,
    #[arg(long, default_value_t = 10)]
    anomalous: usize,
    #[arg(long, default_value_t = 100.0)]
    anomaly_scale: f64,
    #[arg(long, default_value_t = 4)]
    anomalous_addresses: u32,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let config = PipelineConfig {
                txin: args.ingest.txin,
                txout: args.ingest.txout,
                addresses: args.ingest.addresses,
                contraction: args.contraction.mode()?,
                thefts: args.thefts,
                cluster: args.cluster.config(),
                flag_labels: args.flags.flag_labels.into_iter().collect(),
                out: args.ingest.out,
            };
            let report = run_pipeline(&config)?;
            println!(
                "flagged users={} addresses={} cases={}",
                report.counts.users, report.counts.addresses, report.counts.cases
            );
        }
        Command::IngestStats(a) => {
            let stages = staged::ingest_stats(&a.txin, &a.txout, a.addresses.as_deref(), &a.out)?;
            println!("{}", serde_json::to_string(&stages).expect("serializes"));
        }
        Command::Contract(a) => {
            let mode = a.contraction.mode()?;
            let i = a.ingest;
            let stages = staged::contract(&i.txin, &i.txout, i.addresses.as_deref(), &mode, &i.out)?;
            println!("{}", serde_json::to_string(&stages).expect("serializes"));
        }
        Command::Features(a) => {
            let f = staged::features(&a.txin, &a.txout, a.contraction.as_deref(), &a.out)?;
            println!("{} users", f.n_rows());
        }
        Command::Normalize(a) => {
            staged::normalize(&a.out)?;
        }
        Command::Cluster(a) => {
            let model = staged::cluster(&a.cluster.config(), &a.out)?;
            println!("objective {} trimmed {}", model.objective, model.trim_count);
        }
        Command::Report(a) => {
            let flags: BTreeSet<u32> = a.flags.flag_labels.into_iter().collect();
            let report = staged::report(a.thefts.as_deref(), &flags, &a.out)?;
            println!(
                "flagged users={} addresses={} cases={}",
                report.counts.users, report.counts.addresses, report.counts.cases
            );
        }
        Command::Synth(a) => {
            let config = SynthConfig {
                seed: a.seed,
                n_background_users: a.background,
                n_anomalous_users: a.anomalous,
                anomaly_scale: a.anomaly_scale,
                addresses_per_anomalous_user: (a.anomalous_addresses, a.anomalous_addresses),
                ..Default::default()
            };
            generate(&config)?.write_to(&a.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            error!("cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
