//! `tcross`: TT/QTT compression of volumetric data and the synthetic
//! end-to-end training experiment.
//!
//! Exit codes: 0 success, 2 invalid input, 3 non-convergence (archive is
//! still written), 4 decompression size cap exceeded.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tensorcross::cross::{cross_approximate, qtt_cross, CrossOptions, CrossReport};
use tensorcross::io::{read_cpt1, read_cpv1, write_cpt1, write_cpv1};
use tensorcross::oracle::fields;
use tensorcross::pipeline::{
    run_experiment, HeadKind, PipelineConfig, SyntheticTask,
};
use tensorcross::{set_threads, DenseOracle, QttMap, Shape, TTTensor, TensorOracle};

const EXIT_BAD_INPUT: u8 = 2;
const EXIT_NO_CONVERGENCE: u8 = 3;
const EXIT_CAP_EXCEEDED: u8 = 4;

/// Default densification cap for `decompress` (elements).
const DEFAULT_CAP: usize = 1 << 24;

#[derive(Parser)]
#[command(
    name = "tcross",
    about = "Tensor-train compression of volumes and a synthetic training experiment",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a CPV1 volume or a built-in analytic field into a CPT1 archive.
    Compress(CompressArgs),
    /// Densify a CPT1 archive back into a CPV1 volume.
    Decompress(DecompressArgs),
    /// Evaluate a CPT1 archive at explicit indices.
    Probe(ProbeArgs),
    /// Run the synthetic end-to-end training experiment from a config file.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct CompressArgs {
    /// Input CPV1 file (omit when using --field).
    input: Option<PathBuf>,
    /// Output CPT1 archive path.
    #[arg(short, long)]
    output: PathBuf,
    /// Built-in analytic field: gaussian, hilbert, ramp or constant.
    #[arg(long, conflicts_with = "input")]
    field: Option<String>,
    /// Shape of the analytic field, e.g. 64,64,64.
    #[arg(long, value_delimiter = ',', requires = "field")]
    shape: Option<Vec<usize>>,
    /// Maximum TT rank.
    #[arg(long, conflicts_with = "eps")]
    rank: Option<usize>,
    /// Relative accuracy target (mutually exclusive with --rank).
    #[arg(long)]
    eps: Option<f64>,
    /// Virtualize every mode to base-2 factors before compressing.
    #[arg(long)]
    qtt: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum number of cross-approximation sweeps.
    #[arg(long, default_value_t = 10)]
    sweeps: usize,
    /// Held-out validation sample count.
    #[arg(long, default_value_t = 256)]
    val_size: usize,
    /// Bound on oracle entries evaluated per fiber-gather chunk.
    #[arg(long)]
    index_batch: Option<usize>,
}

#[derive(Args)]
struct DecompressArgs {
    /// Input CPT1 archive.
    input: PathBuf,
    /// Output CPV1 file.
    #[arg(short, long)]
    output: PathBuf,
    /// Densification cap in elements.
    #[arg(long, default_value_t = DEFAULT_CAP)]
    cap: usize,
    /// Allow densification beyond the cap.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ProbeArgs {
    /// Input CPT1 archive.
    input: PathBuf,
    /// Indices to evaluate, one comma-separated multi-index each, e.g. 0,3,7.
    indices: Vec<String>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Flat key=value config file.
    config: PathBuf,
}

fn main() -> ExitCode {
    let threads: usize = std::env::var("TCROSS_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1);
    set_threads(threads.max(1));
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compress(args) => cmd_compress(args),
        Command::Decompress(args) => cmd_decompress(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Experiment(args) => cmd_experiment(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_BAD_INPUT)
        }
    }
}

fn cross_options(args: &CompressArgs) -> CrossOptions {
    CrossOptions {
        max_sweeps: args.sweeps,
        val_size: args.val_size,
        seed: args.seed,
        index_batch_size: args.index_batch,
        val_tol: args.eps.unwrap_or(1e-8),
        ..CrossOptions::default()
    }
}

fn cmd_compress(args: CompressArgs) -> anyhow::Result<ExitCode> {
    let opts = cross_options(&args);
    let rank = match (args.rank, args.eps) {
        (Some(r), None) => {
            if r == 0 {
                anyhow::bail!("--rank must be positive");
            }
            Some(r)
        }
        (None, Some(e)) => {
            if !(e > 0.0) {
                anyhow::bail!("--eps must be positive");
            }
            None
        }
        (None, None) => anyhow::bail!("one of --rank or --eps is required"),
        (Some(_), Some(_)) => unreachable!("clap enforces exclusivity"),
    };

    // Dense input volumes are held in memory; analytic fields never are.
    let field;
    let dense_volume;
    let dense_oracle;
    let oracle: &dyn TensorOracle = if let Some(name) = &args.field {
        let dims = args
            .shape
            .clone()
            .ok_or_else(|| anyhow::anyhow!("--field requires --shape"))?;
        field = fields::by_name(name, Shape::new(dims)?)?;
        &field
    } else {
        let path = args
            .input
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("an input file or --field is required"))?;
        let mut r = BufReader::new(File::open(path)?);
        dense_volume = read_cpv1(&mut r)?;
        dense_oracle = DenseOracle::new(&dense_volume);
        &dense_oracle
    };

    let dims = oracle.shape().dims().to_vec();
    let dense_count: u128 = dims.iter().map(|&d| d as u128).product();

    let (tt, report) = if let Some(r) = rank {
        compress_at_rank(oracle, r, args.qtt, &opts)?
    } else {
        // adaptive rank doubling until the held-out error meets --eps
        let eps = args.eps.unwrap();
        let mut cur = None;
        let mut r = 2;
        loop {
            let (tt, report) = compress_at_rank(oracle, r, args.qtt, &opts)?;
            let done = report.final_error <= eps || r >= 64;
            cur = Some((tt, report));
            if done {
                break;
            }
            r *= 2;
        }
        cur.unwrap()
    };

    let mut w = BufWriter::new(File::create(&args.output)?);
    write_cpt1(&mut w, &tt)?;
    w.flush()?;

    let params: usize = tt.ranks().windows(2).zip(tt.dims()).map(|(r, n)| r[0] * n * r[1]).sum();
    println!("output={}", args.output.display());
    println!("modes={}", join(&tt.dims()));
    println!("ranks={}", join(&tt.ranks()));
    println!("parameters={params}");
    println!("compression_ratio={}", dense_count as f64 / params as f64);
    println!("samples={}", report.samples);
    println!("sweeps={}", report.sweeps);
    println!("validation_error={:.17e}", report.final_error);
    println!("converged={}", report.converged);
    println!(
        "Compressed {} entries into {} TT parameters ({} oracle samples).",
        dense_count, params, report.samples
    );
    if !report.converged {
        eprintln!(
            "warning: validation error {:.3e} did not converge within {} sweeps; archive written anyway",
            report.final_error, report.sweeps
        );
        return Ok(ExitCode::from(EXIT_NO_CONVERGENCE));
    }
    Ok(ExitCode::SUCCESS)
}

fn compress_at_rank(
    oracle: &dyn TensorOracle,
    rank: usize,
    qtt: bool,
    opts: &CrossOptions,
) -> anyhow::Result<(TTTensor, CrossReport)> {
    if qtt {
        let map = QttMap::new(oracle.shape().clone())?;
        Ok(qtt_cross(oracle, &map, rank, opts)?)
    } else {
        let d = oracle.shape().ndim();
        let feasible: Vec<usize> = (1..d)
            .map(|b| {
                let left: usize = oracle.shape().dims()[..b].iter().product();
                let right: usize = oracle.shape().dims()[b..].iter().product();
                rank.min(left).min(right)
            })
            .collect();
        Ok(cross_approximate(oracle, &feasible, opts)?)
    }
}

fn cmd_decompress(args: DecompressArgs) -> anyhow::Result<ExitCode> {
    let mut r = BufReader::new(File::open(&args.input)?);
    let tt = read_cpt1(&mut r)?;
    let count: u128 = tt.dims().iter().map(|&d| d as u128).product();
    if !args.force && count > args.cap as u128 {
        eprintln!(
            "error: archive densifies to {count} elements, above the cap of {} (use --force to override)",
            args.cap
        );
        return Ok(ExitCode::from(EXIT_CAP_EXCEEDED));
    }
    let dense = tt.to_dense(usize::MAX)?;
    let mut w = BufWriter::new(File::create(&args.output)?);
    write_cpv1(&mut w, &dense)?;
    w.flush()?;
    println!("output={}", args.output.display());
    println!("modes={}", join(&tt.dims()));
    println!("elements={count}");
    println!("Densified {} TT cores into {} elements.", tt.dims().len(), count);
    Ok(ExitCode::SUCCESS)
}

fn cmd_probe(args: ProbeArgs) -> anyhow::Result<ExitCode> {
    let mut r = BufReader::new(File::open(&args.input)?);
    let tt = read_cpt1(&mut r)?;
    let dims = tt.dims();
    let mut parsed: Vec<Vec<usize>> = Vec::with_capacity(args.indices.len());
    for raw in &args.indices {
        let idx: Vec<usize> = raw
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| anyhow::anyhow!("invalid index '{raw}'"))?;
        if idx.len() != dims.len() {
            anyhow::bail!("index '{raw}' has {} coordinates, archive has {} modes", idx.len(), dims.len());
        }
        for (d, (&i, &n)) in idx.iter().zip(&dims).enumerate() {
            if i >= n {
                anyhow::bail!("index '{raw}' is out of range: coordinate {d} is {i}, mode size {n}");
            }
        }
        parsed.push(idx);
    }
    for idx in &parsed {
        println!("{:.17e}", tt.eval(idx));
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// experiment
// ---------------------------------------------------------------------------

struct KeyValues {
    entries: Vec<(usize, String, String)>,
}

impl KeyValues {
    fn parse(text: &str) -> anyhow::Result<KeyValues> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow::anyhow!("line {}: expected key=value, got '{line}'", lineno + 1))?;
            entries.push((lineno + 1, k.trim().to_string(), v.trim().to_string()));
        }
        Ok(KeyValues { entries })
    }

    fn get(&self, key: &str) -> Option<(usize, &str)> {
        self.entries
            .iter()
            .rev()
            .find(|(_, k, _)| k == key)
            .map(|(l, _, v)| (*l, v.as_str()))
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, default: T) -> anyhow::Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some((line, v)) => v
                .parse()
                .map_err(|_| anyhow::anyhow!("line {line}: invalid value '{v}' for {key}")),
        }
    }

    fn parse_list(&self, key: &str, default: Vec<usize>) -> anyhow::Result<Vec<usize>> {
        match self.get(key) {
            None => Ok(default),
            Some((line, v)) => v
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| anyhow::anyhow!("line {line}: invalid value '{v}' for {key}")),
        }
    }
}

fn cmd_experiment(args: ExperimentArgs) -> anyhow::Result<ExitCode> {
    let text = std::fs::read_to_string(&args.config)?;
    let kv = KeyValues::parse(&text)?;
    for (line, key, _) in &kv.entries {
        const KNOWN: &[&str] = &[
            "spatial", "latent_rank", "k_train", "k_val", "seed", "ranks", "n_channels",
            "neighborhood", "hidden", "epochs", "inner_steps", "feature_rank", "head",
            "use_covariate", "lr", "max_sweeps", "val_size", "trace_csv", "metrics_csv",
        ];
        if !KNOWN.contains(&key.as_str()) {
            anyhow::bail!("line {line}: unknown key '{key}'");
        }
    }

    let spatial = kv.parse_list("spatial", vec![6, 6, 6])?;
    let latent_rank: usize = kv.parse_as("latent_rank", 2)?;
    let k_train: usize = kv.parse_as("k_train", 8)?;
    let k_val: usize = kv.parse_as("k_val", 4)?;
    let seed: u64 = kv.parse_as("seed", 0)?;
    let head = match kv.get("head") {
        None => HeadKind::Scalar,
        Some((_, "scalar")) => HeadKind::Scalar,
        Some((_, "quantile")) => HeadKind::Quantile,
        Some((line, v)) => anyhow::bail!("line {line}: head must be scalar or quantile, got '{v}'"),
    };
    let use_covariate = match kv.get("use_covariate") {
        None => false,
        Some((_, "true")) => true,
        Some((_, "false")) => false,
        Some((line, v)) => anyhow::bail!("line {line}: use_covariate must be true or false, got '{v}'"),
    };
    let cfg = PipelineConfig {
        ranks: kv.parse_list("ranks", vec![3; spatial.len()])?,
        n_channels: kv.parse_as("n_channels", 2)?,
        neighborhood: kv.parse_as("neighborhood", 3)?,
        hidden: kv.parse_as("hidden", 8)?,
        epochs: kv.parse_as("epochs", 4)?,
        inner_steps: kv.parse_as("inner_steps", 8)?,
        feature_rank: kv.parse_as("feature_rank", 3)?,
        head,
        use_covariate,
        lr: kv.parse_as("lr", 0.1)?,
        seed,
        cross: CrossOptions {
            max_sweeps: kv.parse_as("max_sweeps", 2)?,
            val_size: kv.parse_as("val_size", 32)?,
            ..CrossOptions::default()
        },
    };

    let task = SyntheticTask::generate(&spatial, latent_rank, k_train, k_val, seed)?;
    let report = run_experiment(&task, &cfg)?;

    if let Some((_, path)) = kv.get("trace_csv") {
        let mut w = BufWriter::new(File::create(path)?);
        report.write_trace_csv(&mut w)?;
        w.flush()?;
        println!("trace_csv={path}");
    }
    if let Some((_, path)) = kv.get("metrics_csv") {
        let mut w = BufWriter::new(File::create(path)?);
        report.write_metrics_csv(&mut w)?;
        w.flush()?;
        println!("metrics_csv={path}");
    }

    let first = report.trace.first().map(|t| t.loss);
    let last = report.trace.last().map(|t| t.loss);
    if let (Some(a), Some(b)) = (first, last) {
        println!("initial_loss={a:.17e}");
        println!("final_loss={b:.17e}");
        println!("loss_ratio={:.17e}", b / a);
    }
    println!("untrained_train_rmse={:.17e}", report.untrained.train_rmse);
    println!("trained_train_rmse={:.17e}", report.trained.train_rmse);
    println!("untrained_val_rmse={:.17e}", report.untrained.val_rmse);
    println!("trained_val_rmse={:.17e}", report.trained.val_rmse);
    println!("untrained_val_mlll={:.17e}", report.untrained.val_mlll);
    println!("trained_val_mlll={:.17e}", report.trained.val_mlll);
    println!("samples={}", report.samples);
    println!("max_step_samples={}", report.max_step_samples);
    println!("peak_resident={}", report.peak_resident);
    print!("{}", report.summary());
    Ok(ExitCode::SUCCESS)
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}
