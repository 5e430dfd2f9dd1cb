use std::fs::File;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stagecoach::staging::{StagingReader, ENDPOINT_ENV};
use stagecoach::FileReader;
use stagecoach_bench::driver::{write_csv, KeepOutput};
use stagecoach_bench::pipeline::{analyze, INPUT_ENV};
use stagecoach_bench::{
    pipeline_compare, run_workload, sweep, Analysis, BenchError, BenchResult, EngineConfig, RunFile, RunOptions,
    SweepParam, WorkloadSpec,
};

#[derive(Parser)]
#[command(name = "bench", version, about = "Synthetic I/O experiments for stagecoach")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one configuration.
    Run(RunArgs),
    /// Run one configuration per value of a parameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Compare post-hoc and in-situ time-to-solution.
    Pipeline {
        #[command(flatten)]
        run: RunArgs,
        /// External analysis command; the built-in consumer is used when absent.
        #[arg(long)]
        analysis_cmd: Option<String>,
        #[arg(long, default_value_t = 500)]
        analysis_ms: u64,
        #[arg(long)]
        field: Option<String>,
        #[arg(long, default_value_t = 0)]
        k: u64,
    },
    /// Slice statistics per step from a staging endpoint or an output directory.
    Consume {
        #[arg(long)]
        endpoint: Option<String>,
        /// Directory holding md.idx.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long)]
        field: Option<String>,
        #[arg(long, default_value_t = 0)]
        k: u64,
        #[arg(long, default_value_t = 0)]
        analysis_ms: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    engine: Option<String>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    aggregators_per_node: Option<String>,
    #[arg(long)]
    codec: Option<String>,
    #[arg(long)]
    shuffle: Option<String>,
    #[arg(long)]
    bb_dir: Option<String>,
    #[arg(long)]
    drain: Option<String>,
    #[arg(long)]
    output_dir: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    nodes: Option<String>,
    #[arg(long)]
    ranks_per_node: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> BenchResult<(WorkloadSpec, EngineConfig)> {
        let mut rf = match &self.config {
            Some(path) => RunFile::load(path)?,
            None => RunFile::default(),
        };
        let flags = [
            ("engine", &self.engine),
            ("backend", &self.backend),
            ("aggregators_per_node", &self.aggregators_per_node),
            ("codec", &self.codec),
            ("shuffle", &self.shuffle),
            ("bb_dir", &self.bb_dir),
            ("drain", &self.drain),
            ("output_dir", &self.output_dir),
            ("endpoint", &self.endpoint),
            ("nodes", &self.nodes),
            ("ranks_per_node", &self.ranks_per_node),
            ("steps", &self.steps),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                rf.set(key, v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| stagecoach::Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            rf.set(k, v)?;
        }
        Ok(rf.finish()?)
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            repeats: self.repeats.max(1),
            keep: KeepOutput::LastRepeat,
        }
    }

    fn emit(&self, rows: &[stagecoach_bench::StepReport], avg: &[stagecoach_bench::driver::AveragedRow]) -> BenchResult<()> {
        match &self.csv {
            Some(path) => write_csv(File::create(path)?, rows, avg),
            None => write_csv(io::stdout().lock(), rows, avg),
        }
    }
}

fn run(cli: Cli) -> BenchResult<()> {
    match cli.command {
        Cmd::Run(args) => {
            let (spec, cfg) = args.resolve()?;
            let report = run_workload(&spec, &cfg, &args.options())?;
            let avg: Vec<_> = report.averaged().into_iter().collect();
            args.emit(&report.rows, &avg)?;
            eprintln!("data files: {}", report.data_files);
            if let Some(dir) = &report.index_dir {
                eprintln!("output: {}", dir.display());
            }
        }
        Cmd::Sweep { run, param, values } => {
            let (spec, cfg) = run.resolve()?;
            let table = sweep(param, &values, &spec, &cfg, &run.options())?;
            let avg: Vec<_> = table.averaged.into_iter().map(|(_, a)| a).collect();
            run.emit(&table.rows, &avg)?;
        }
        Cmd::Pipeline {
            run,
            analysis_cmd,
            analysis_ms,
            field,
            k,
        } => {
            let (spec, cfg) = run.resolve()?;
            let analysis = match analysis_cmd {
                Some(cmd) => Analysis::Command(cmd),
                None => Analysis::Builtin { field, k, analysis_ms },
            };
            let report = pipeline_compare(&spec, &cfg, &analysis)?;
            println!("post_hoc_s,in_situ_s,ratio");
            println!("{:.4},{:.4},{:.4}", report.post_hoc_s, report.in_situ_s, report.ratio());
        }
        Cmd::Consume {
            endpoint,
            dir,
            field,
            k,
            analysis_ms,
        } => {
            let endpoint = endpoint.or_else(|| std::env::var(ENDPOINT_ENV).ok());
            let dir = dir.or_else(|| std::env::var_os(INPUT_ENV).map(PathBuf::from));
            let stats = match (endpoint, dir) {
                (Some(ep), _) => {
                    let mut reader = StagingReader::connect(ep.as_str())?;
                    analyze(&mut reader, field.as_deref(), k, analysis_ms, None)?
                }
                (None, Some(dir)) => {
                    let mut reader = FileReader::open(&dir)?;
                    analyze(&mut reader, field.as_deref(), k, analysis_ms, None)?
                }
                (None, None) => {
                    return Err(BenchError::Engine(stagecoach::Error::Config(format!(
                        "consume needs --endpoint, --dir, {ENDPOINT_ENV} or {INPUT_ENV}"
                    ))))
                }
            };
            println!("step,min,max,mean");
            for s in stats {
                println!("{},{},{},{}", s.step, s.min, s.max, s.mean);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::FAILURE
        }
    }
}
