use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rethink_core::data::Split;
use rethink_core::harness::{
    evaluate, gradcheck_suite, inspect_emphasis, load_source, peek_dtype, preview, resume, train, Checkpoint,
    DataSource, InspectOptions, TrainConfig,
};
use rethink_core::{DType, Error, Result, Scalar};

#[derive(Parser)]
#[command(name = "rethink", version, about = "Feedback-emphasis CNNs trained through unrolled iterations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a baseline, then fine-tune it with feedback heads.
    Train {
        /// key = value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a configuration key (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Per-iteration top-k accuracy, loss and confidence of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// AMAT file or synthetic:<n_per_class>:<seed>; defaults to the run's test set.
        #[arg(long)]
        data: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,5")]
        k: Vec<usize>,
        /// Override a stored configuration key, e.g. normalize=false.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compare BPTT gradients with central differences on small networks.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the emphasis-layer gradient; the check must then fail.
        #[arg(long)]
        mutate: bool,
    },
    /// Emphasis vectors of two classes, bucketed by first-pass confidence.
    InspectEmphasis {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<String>,
        /// The two classes to compare, e.g. 7,9.
        #[arg(long, value_delimiter = ',', num_args = 1, default_value = "7,9")]
        classes: Vec<usize>,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        /// CSV destination; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print one sample as ASCII art with its label.
    Preview {
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

fn stored_config(checkpoint: &Checkpoint<impl Scalar>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::parse_text(&checkpoint.config)?;
    for o in overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn dataset_for(cfg: &TrainConfig, data: &Option<String>) -> Result<rethink_core::data::Dataset> {
    let source: DataSource = match data {
        Some(s) => s.parse()?,
        None => cfg
            .test
            .clone()
            .ok_or_else(|| Error::Config("no --data given and the run has no test set".into()))?,
    };
    load_source(&source, Split::Test, cfg)
}

fn eval_cmd<T: Scalar>(checkpoint: &PathBuf, data: &Option<String>, k: &[usize], overrides: &[String]) -> Result<()> {
    let ckpt = Checkpoint::<T>::load(checkpoint)?;
    let cfg = stored_config(&ckpt, overrides)?;
    print!("{cfg}");
    println!("seed = {}", cfg.seed);
    let dataset = dataset_for(&cfg, data)?;
    println!("evaluated samples = {}", dataset.len());
    let report = evaluate(&ckpt.model, &dataset, k, cfg.batch_size)?;
    println!("{report}");
    println!("prediction rule {}: error {:.3}%", cfg.eval_aggregation, report.error(cfg.eval_aggregation));
    Ok(())
}

fn inspect_cmd<T: Scalar>(
    checkpoint: &PathBuf,
    data: &Option<String>,
    classes: &[usize],
    threshold: f64,
    out: &Option<PathBuf>,
    overrides: &[String],
) -> Result<()> {
    let &[a, b] = classes else {
        return Err(Error::Config(format!("--classes needs exactly two labels, got {classes:?}")));
    };
    let ckpt = Checkpoint::<T>::load(checkpoint)?;
    let cfg = stored_config(&ckpt, overrides)?;
    // Standard output may carry the CSV, so the run description goes to stderr.
    eprint!("{cfg}");
    eprintln!("seed = {}", cfg.seed);
    let dataset = dataset_for(&cfg, data)?;
    let opts = InspectOptions { classes: (a, b), threshold, batch_size: cfg.batch_size };
    let summary = match out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            let s = inspect_emphasis(&ckpt.model, &dataset, &opts, &mut w)?;
            w.flush()?;
            s
        }
        None => inspect_emphasis(&ckpt.model, &dataset, &opts, &mut io::stdout().lock())?,
    };
    eprintln!("{summary}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let stdout = &mut io::stdout();
    match cli.command {
        Command::Train { config, overrides, resume: from } => {
            if let Some(path) = from {
                resume(&path, &overrides, stdout)?;
                return Ok(());
            }
            let mut cfg = match config {
                Some(path) => TrainConfig::load(path)?,
                None => TrainConfig::default(),
            };
            for o in &overrides {
                cfg.apply_override(o)?;
            }
            cfg.validate()?;
            print!("{cfg}");
            println!("seed = {}", cfg.seed);
            train(&cfg, stdout)?;
        }
        Command::Eval { checkpoint, data, k, overrides } => match peek_dtype(&checkpoint)? {
            DType::F32 => eval_cmd::<f32>(&checkpoint, &data, &k, &overrides)?,
            DType::F64 => eval_cmd::<f64>(&checkpoint, &data, &k, &overrides)?,
        },
        Command::Gradcheck { tolerance, seed, mutate } => {
            println!("tolerance = {tolerance}\nseed = {seed}\nmutate = {mutate}\nprecision = double");
            let reports = gradcheck_suite(tolerance, mutate, seed, stdout)?;
            let failed = reports.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                println!("FAIL: {failed} of {} networks", reports.len());
                return Err(Error::GradCheck(format!("{failed} of {} networks exceeded {tolerance:e}", reports.len())));
            }
            println!("PASS: all {} networks", reports.len());
        }
        Command::InspectEmphasis { checkpoint, data, classes, threshold, out, overrides } => {
            match peek_dtype(&checkpoint)? {
                DType::F32 => inspect_cmd::<f32>(&checkpoint, &data, &classes, threshold, &out, &overrides)?,
                DType::F64 => inspect_cmd::<f64>(&checkpoint, &data, &classes, threshold, &out, &overrides)?,
            }
        }
        Command::Preview { data, index } => {
            let source: DataSource = data.parse()?;
            println!("data = {source}");
            let cfg = TrainConfig { normalize: false, ..Default::default() };
            let dataset = load_source(&source, Split::Test, &cfg)?;
            print!("{}", preview::render(&dataset, index)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
