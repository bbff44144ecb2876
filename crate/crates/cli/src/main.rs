use std::error::Error as StdError;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sketchlearn::bench::{emit_csv, emit_json, run_sweep, CsvTraceSink, DataSource, SweepSpec};
use sketchlearn::data::{
    generate_shared_subspace, load_matrix_dir, write_matrix, MatrixDataset, MatrixFormat, Role, SyntheticFamilySpec, DEFAULT_DECAY,
};
use sketchlearn::grad::GradientMode;
use sketchlearn::scw::avg_test_error;
use sketchlearn::sketch::{density_of, RngStream, SketchSpec, DEFAULT_NOISE_VAR};
use sketchlearn::train::{default_lambda, train, EvalSets, Method, TrainConfig, TrainOptions};
use sketchlearn::Matrix;

type CliResult<T> = std::result::Result<T, Box<dyn StdError>>;

/// Learned sketches for low-rank approximation.
#[derive(Parser, Debug)]
#[command(name = "sketchlearn", version, args_override_self = true)]
struct Cli {
    /// key=value file supplying defaults for any flag; flags on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a sketch and write it with its trace.
    Train(TrainArgs),
    /// Average test error of a stored sketch on a dataset.
    Eval(EvalArgs),
    /// Run a grid of methods, sketch sizes and densities.
    Sweep(SweepArgs),
    /// Generate a synthetic shared-subspace family.
    GenData(GenDataArgs),
    /// Draw concrete sketches from a stochastic spec.
    SampleSketch(SampleArgs),
    /// Print shape, nonzeros and density of a stored sketch.
    Inspect(InspectArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Normalize {
    None,
    Fro,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Pgm,
    Csv,
    Rawbin,
}

impl From<Format> for MatrixFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Pgm => MatrixFormat::Pgm,
            Format::Csv => MatrixFormat::Csv,
            Format::Rawbin => MatrixFormat::RawBin,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct HyperArgs {
    /// Sketch rows.
    #[arg(long, default_value_t = 20)]
    m: usize,
    /// Target rank.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Nonzeros per column of the CountSketch init.
    #[arg(long, default_value_t = 1)]
    density: usize,
    /// Average nonzeros per column allowed in the learned mask.
    #[arg(long, default_value_t = 1.0)]
    target_sparsity: f64,
    /// L1 weight on the mask [default: 0.0003 at target sparsity 1, else 0.0001].
    #[arg(long)]
    lambda: Option<f64>,
    /// Prune threshold for mask entries.
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,
    /// Learning rate.
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    /// Momentum coefficient; values below 1 are more stable.
    #[arg(long, default_value_t = 1.0)]
    momentum: f64,
    /// Training iterations.
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    /// Variance of the reparameterization noise.
    #[arg(long, default_value_t = DEFAULT_NOISE_VAR)]
    noise_var: f64,
    /// Let the combined learner train its mask until the budget is met.
    #[arg(long, default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    early_stop_flag: bool,
    /// Held-out evaluation period in iterations.
    #[arg(long, default_value_t = 10)]
    eval_every: usize,
    /// Noise draws averaged when evaluating stochastic sketches.
    #[arg(long, default_value_t = 5)]
    eval_samples: usize,
    /// Evaluate stochastic sketches at their mean instead of sampling.
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    mean_sketch: bool,
    /// Use finite differences instead of the analytic gradient (slow).
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    finite_difference: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl HyperArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            m: self.m,
            k: self.k,
            density: self.density,
            target_sparsity: self.target_sparsity,
            lambda: self.lambda.unwrap_or_else(|| default_lambda(self.target_sparsity)),
            epsilon: self.epsilon,
            eta: self.eta,
            momentum_beta: self.momentum,
            iterations: self.iterations,
            noise_var: self.noise_var,
            early_stop_flag: self.early_stop_flag,
            seed: self.seed,
            eval_every: self.eval_every,
            eval_samples: self.eval_samples,
            mean_sketch: self.mean_sketch,
            gradient_mode: if self.finite_difference {
                GradientMode::FiniteDifference
            } else {
                GradientMode::Analytic
            },
        }
    }
}

#[derive(Args, Debug, Clone)]
struct FamilyArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 80)]
    d: usize,
    /// Rank of the shared subspace.
    #[arg(long, default_value_t = 8)]
    rank: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Per-direction decay of the shared basis.
    #[arg(long, default_value_t = DEFAULT_DECAY)]
    decay: f64,
    #[arg(long, default_value_t = 0)]
    family_seed: u64,
    /// Seed of the out-of-distribution family.
    #[arg(long)]
    ood_family_seed: Option<u64>,
    #[arg(long, default_value_t = 20)]
    train_count: usize,
    #[arg(long, default_value_t = 10)]
    test_count: usize,
    #[arg(long, default_value_t = 10)]
    ood_count: usize,
    /// Seed for drawing family members.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

impl FamilyArgs {
    fn family(&self, family_seed: u64, count: usize) -> SyntheticFamilySpec {
        SyntheticFamilySpec {
            n: self.n,
            d: self.d,
            shared_rank: self.rank,
            noise_level: self.noise,
            family_seed,
            count,
            decay: self.decay,
        }
    }

    fn source(&self, role: Role) -> Option<DataSource> {
        let seed = RngStream::new(self.data_seed, 0);
        let (family_seed, count, purpose) = match role {
            Role::Train => (self.family_seed, self.train_count, 1),
            Role::Test => (self.family_seed, self.test_count, 2),
            Role::Ood => (self.ood_family_seed?, self.ood_count, 3),
        };
        Some(DataSource::Synthetic {
            family: self.family(family_seed, count),
            seed: seed.derive(purpose).next_seed(),
        })
    }
}

/// Directories override the synthetic family for that role.
#[derive(Args, Debug, Clone)]
struct DataArgs {
    #[arg(long, value_name = "DIR")]
    train: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    test: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    ood: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Rawbin)]
    format: Format,
    #[arg(long, value_enum, default_value_t = Normalize::None)]
    normalize: Normalize,
    #[command(flatten)]
    family: FamilyArgs,
}

impl DataArgs {
    fn source(&self, role: Role) -> Option<DataSource> {
        let dir = match role {
            Role::Train => &self.train,
            Role::Test => &self.test,
            Role::Ood => &self.ood,
        };
        match dir {
            Some(path) => Some(DataSource::Dir {
                path: path.clone(),
                format: self.format.into(),
            }),
            None if role == Role::Train || self.train.is_none() => self.family.source(role),
            None => None,
        }
    }

    fn load(&self, role: Role) -> CliResult<Option<MatrixDataset>> {
        let normalize = self.normalize == Normalize::Fro;
        Ok(self.source(role).map(|s| s.load(role, normalize)).transpose()?)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value = "ivy")]
    method: Method,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Where to write the trained sketch (.json for JSON, binary otherwise).
    #[arg(long, default_value = "sketch.sksp")]
    out: PathBuf,
    /// Training curve CSV, streamed during training.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Directory for periodic checkpoints.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Stored sketch, or `identity` for the n×n identity.
    #[arg(long)]
    sketch: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Rawbin)]
    format: Format,
    #[arg(long, value_enum, default_value_t = Normalize::None)]
    normalize: Normalize,
    /// Noise draws for stochastic sketches.
    #[arg(long, default_value_t = 5)]
    samples: usize,
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    mean_sketch: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "ivy,ivy-ls,ivy-lr,ivy-ls-lr,countsketch,gaussian")]
    methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,40")]
    m_values: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
    densities: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Report CSV.
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
    /// Optional JSON copy of the report.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    family: FamilyArgs,
    /// Members to generate.
    #[arg(long, default_value_t = 30)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Rawbin)]
    format: Format,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    sketch: PathBuf,
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the sampled matrices.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Rawbin)]
    format: Format,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    sketch: PathBuf,
}

fn kv(key: &str, value: impl std::fmt::Display) {
    println!("{key}={value}");
}

fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let cfg = args.hyper.config();
    let train_set = args.data.load(Role::Train)?.expect("train source always resolves");
    let test = args.data.load(Role::Test)?;
    let ood = args.data.load(Role::Ood)?;
    let mut sink = args.trace_out.as_deref().map(CsvTraceSink::create).transpose()?;
    let result = train(
        args.method,
        &train_set,
        &cfg,
        TrainOptions {
            eval: EvalSets {
                test: test.as_ref(),
                ood: ood.as_ref(),
            },
            sink: sink.as_mut().map(|s| s as &mut dyn sketchlearn::train::TraceSink),
            checkpoint_dir: args.checkpoint_dir.clone(),
        },
    )?;
    if let Some(sink) = sink {
        sink.finish()?;
    }
    result.spec.save(&args.out)?;

    let (n, _) = train_set.shape();
    kv("method", args.method);
    kv("m", cfg.m);
    kv("n", n);
    kv("iterations", cfg.iterations);
    match result.trace.final_test_err() {
        Some(err) => kv("final_test_err", format!("{err:.16e}")),
        None => {
            let stream = RngStream::new(cfg.seed, 0).derive(4);
            let err = avg_test_error(&train_set, &result.spec, cfg.k, cfg.eval_samples, &stream)?;
            kv("final_train_err", format!("{err:.16e}"));
        }
    }
    if let Some(ood) = &ood {
        let stream = RngStream::new(cfg.seed, 0).derive(0x00d);
        let err = avg_test_error(ood, result.best_spec(), cfg.k, cfg.eval_samples, &stream)?;
        kv("best_ood_err", format!("{err:.16e}"));
    }
    if let Some((it, _)) = &result.best {
        kv("best_iteration", it);
    }
    if args.method.learns_sparsity() {
        kv("sparsity_met", result.trace.sparsity_met);
        if let Some(it) = result.trace.sparsity_met_at {
            kv("iters_to_sparsity", it);
        }
    }
    kv("nnz", result.spec.support_nnz());
    kv("skipped_samples", result.trace.skipped_samples);
    kv("train_seconds", format!("{:.6}", result.trace.train_seconds()));
    kv("spec", args.out.display());
    eprintln!(
        "trained {} (m={}, k={}) for {} iterations in {:.2}s; sketch written to {}",
        args.method,
        cfg.m,
        cfg.k,
        cfg.iterations,
        result.trace.train_seconds(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let mut data = load_matrix_dir(&args.data, args.format.into())?.with_role(Role::Test);
    if args.normalize == Normalize::Fro {
        data = data.normalize_frobenius();
    }
    let (n, _) = data.shape();
    let spec = if args.sketch == "identity" {
        SketchSpec::Plain {
            s_base: Matrix::identity(n),
        }
    } else {
        SketchSpec::load(Path::new(&args.sketch))?
    };
    let spec = if args.mean_sketch && spec.kind().is_stochastic() {
        SketchSpec::Plain {
            s_base: spec.mean_sketch()?,
        }
    } else {
        spec
    };
    let err = avg_test_error(&data, &spec, args.k, args.samples, &RngStream::new(args.seed, 0))?;
    kv("matrices", data.len());
    kv("k", args.k);
    kv("avg_test_err", format!("{err:.16e}"));
    eprintln!("average test error over {} matrices: {err:.6e}", data.len());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> CliResult<bool> {
    let spec = SweepSpec {
        methods: args.methods.clone(),
        m_values: args.m_values.clone(),
        densities: args.densities.clone(),
        repetitions: args.reps,
        base: args.hyper.config(),
        lambda_from_density: args.hyper.lambda.is_none(),
        train: args.data.source(Role::Train).expect("train source always resolves"),
        test: args
            .data
            .source(Role::Test)
            .ok_or("sweep needs --test when --train is a directory")?,
        ood: args.data.source(Role::Ood),
        normalize: args.data.normalize == Normalize::Fro,
    };
    let report = run_sweep(&spec)?;
    emit_csv(&report, &args.out)?;
    if let Some(json) = &args.json {
        emit_json(&report, json)?;
    }
    let failed = report.failures().count();
    kv("rows", report.rows.len());
    kv("failed", failed);
    kv("report", args.out.display());
    for s in report.summarize() {
        eprintln!(
            "{:<12} m={:<3} density={:<3} mean_test_err={:.4e} std={:.2e}{}",
            s.method.name(),
            s.m,
            s.density,
            s.mean_test_err,
            s.std_test_err,
            s.mean_ood_err.map_or(String::new(), |o| format!(" mean_ood_err={o:.4e}"))
        );
    }
    for r in report.failures() {
        eprintln!(
            "cell failed: {} m={} density={} rep={}: {}",
            r.method,
            r.m,
            r.density,
            r.rep,
            r.error.as_deref().unwrap_or("")
        );
    }
    Ok(failed == 0)
}

fn cmd_gen_data(args: &GenDataArgs) -> CliResult<()> {
    let fam = args.family.family(args.family.family_seed, args.count);
    let ds = generate_shared_subspace(&fam, &RngStream::new(args.family.data_seed, 0))?;
    ds.save_dir(&args.out, args.format.into())?;
    kv("count", ds.len());
    kv("n", fam.n);
    kv("d", fam.d);
    kv("out", args.out.display());
    eprintln!("wrote {} matrices of shape {}x{} to {}", ds.len(), fam.n, fam.d, args.out.display());
    Ok(())
}

fn cmd_sample(args: &SampleArgs) -> CliResult<()> {
    let spec = SketchSpec::load(&args.sketch)?;
    let sketches = spec.sample_sketches(args.samples, &RngStream::new(args.seed, 0))?;
    fs::create_dir_all(&args.out).map_err(|e| format!("{}: {e}", args.out.display()))?;
    let format: MatrixFormat = args.format.into();
    for (i, s) in sketches.iter().enumerate() {
        let path = args.out.join(format!("sketch_{i:04}.{}", format.extension()));
        write_matrix(&path, s, format)?;
    }
    kv("samples", sketches.len());
    kv("out", args.out.display());
    eprintln!("wrote {} sketches to {}", sketches.len(), args.out.display());
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> CliResult<()> {
    let spec = SketchSpec::load(&args.sketch)?;
    let (m, n) = spec.shape();
    kv("kind", format!("{:?}", spec.kind()).to_lowercase());
    kv("rows", m);
    kv("cols", n);
    kv("nnz", spec.support_nnz());
    kv("density", density_of(&spec));
    if let Some(v) = spec.noise_var() {
        kv("noise_var", v);
    }
    eprintln!("{:?} sketch {m}x{n}", spec.kind());
    Ok(())
}

/// Turns `key=value` lines into `--key=value` arguments. Blank lines and
/// `#` comments are skipped.
fn config_args(text: &str, path: &Path) -> CliResult<Vec<String>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), i + 1))?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        out.push(format!("--{key}={}", value.trim()));
    }
    Ok(out)
}

fn config_path(argv: &[String]) -> Option<PathBuf> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Inserts config-file arguments right after the subcommand, ahead of the
/// flags given on the command line.
fn expand_argv(argv: Vec<String>) -> CliResult<Vec<String>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let extra = config_args(&text, &path)?;
    let sub = (1..argv.len()).find(|&i| !argv[i].starts_with('-') && argv[i - 1] != "--config");
    let mut out = argv;
    if let Some(i) = sub {
        out.splice(i + 1..i + 1, extra);
    }
    Ok(out)
}

fn run(cli: Cli) -> CliResult<bool> {
    match &cli.command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Sweep(a) => cmd_sweep(a),
        Command::GenData(a) => cmd_gen_data(a).map(|_| true),
        Command::SampleSketch(a) => cmd_sample(a).map(|_| true),
        Command::Inspect(a) => cmd_inspect(a).map(|_| true),
    }
}

fn main() -> ExitCode {
    let argv = match expand_argv(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
