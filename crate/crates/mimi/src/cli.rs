//! Command-line front end: argument parsing, dispatch and exit codes.
//!
//! Exit code 0 means success (and a converged fit), 1 a usage or input
//! error, 2 a fit that stopped at the iteration cap (its outputs are still
//! written).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mimi_core::selection::{cross_validate_with, default_grid, CvOptions, DEFAULT_FOLDS};
use mimi_core::simulate::{simulate, ColumnLayout, SimDesign};
use mimi_core::{bcgd, fit, Dictionary, Link, MixedDataFrame, ModelFit, SolverConfig};

use crate::error::{Error, Result};
use crate::experiments::{
    run_estimation_study, run_imputation_study, run_rate_study, write_study, EstimationStudy,
    ImputationStudy, Manifest, RateStudy, StudyOutput, Tuning,
};
use crate::io::{self, Schema};
use crate::report::{self, FitReport};

#[derive(Debug, Parser)]
#[command(name = "mimi", version, about = "Main effects and interactions in mixed, incomplete data frames")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit at fixed penalties; writes report.json, alpha.csv and l.csv.
    Fit(FitArgs),
    /// Fill the missing cells with fitted means.
    Impute(ImputeArgs),
    /// Cross-validate the penalties; writes cv.json and cv.csv.
    Cv(CvArgs),
    /// Draw a synthetic data set with its ground truth.
    Simulate(SimulateArgs),
    /// Run a simulation study and write its tables and manifest.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Data frame (CSV with a header row; NA or empty = missing).
    #[arg(long)]
    pub data: PathBuf,
    /// Column types as JSON; inferred from the data when absent.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Dictionary descriptor as JSON.
    #[arg(long)]
    pub dict: PathBuf,
    /// Solver configuration as JSON (missing fields take defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub lambda1: f64,
    #[arg(long)]
    pub lambda2: f64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, required_unless_present = "auto_lambda")]
    pub lambda1: Option<f64>,
    #[arg(long, required_unless_present = "auto_lambda")]
    pub lambda2: Option<f64>,
    /// Choose the penalties by cross-validation with default settings.
    #[arg(long, conflicts_with_all = ["lambda1", "lambda2"])]
    pub auto_lambda: bool,
    /// Round binary imputations to 0/1.
    #[arg(long)]
    pub round: bool,
    /// Output CSV (default: standard output).
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 13)]
    pub n1: usize,
    #[arg(long, default_value_t = 7)]
    pub n2: usize,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stop after this many lambda1 rows without improvement.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LayoutArg {
    Numeric,
    Mixed,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Design as JSON; flags below override its fields.
    #[arg(long)]
    pub design: Option<PathBuf>,
    #[arg(long)]
    pub m1: Option<usize>,
    #[arg(long)]
    pub m2: Option<usize>,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub s: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub p_obs: Option<f64>,
    #[arg(long, value_enum)]
    pub layout: Option<LayoutArg>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub x_max: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StudyArg {
    Estimation,
    Imputation,
    Rates,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TuningArg {
    Pilot,
    PerReplicate,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    #[arg(long, value_enum)]
    pub study: StudyArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replicates per design cell.
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, value_enum)]
    pub tuning: Option<TuningArg>,
    /// Rerun the configuration recorded in a manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

/// How a successful command ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Done,
    NotConverged,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Done => 0,
            Outcome::NotConverged => 2,
        }
    }
}

struct Loaded {
    data: MixedDataFrame,
    links: Vec<Link>,
    dict: Dictionary,
    config: SolverConfig,
}

fn load(input: &InputArgs) -> Result<Loaded> {
    let schema = input.schema.as_ref().map(Schema::from_path).transpose()?;
    let data = io::read_csv_path(&input.data, schema.as_ref())?;
    let links = match &schema {
        Some(s) => s.links(&data)?,
        None => data.default_links(),
    };
    let dict = io::read_dictionary_path(&input.dict, data.nrows(), data.ncols())?;
    let config = match &input.config {
        Some(p) => serde_json::from_reader(io::open_file(p)?)?,
        None => SolverConfig::default(),
    };
    Ok(Loaded { data, links, dict, config })
}

fn outcome(fit: &ModelFit) -> Outcome {
    if fit.converged {
        Outcome::Done
    } else {
        Outcome::NotConverged
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn run_fit(args: &FitArgs) -> Result<Outcome> {
    let l = load(&args.input)?;
    let config = SolverConfig { lambda1: args.lambda1, lambda2: args.lambda2, ..l.config };
    let start = Instant::now();
    let model = fit(&l.data, &l.links, &l.dict, &config)?;
    let elapsed = start.elapsed();
    create_dir(&args.out)?;
    let rep = FitReport::new(&model, &l.data, &config, elapsed)?;
    rep.to_writer(io::create_file(&args.out.join("report.json"))?)?;
    let labels = io::atom_labels(&l.dict, l.data.names());
    io::write_alpha_csv(&model.alpha_hat, &labels, io::create_file(&args.out.join("alpha.csv"))?)?;
    io::write_matrix_csv(&model.l_hat, l.data.names(), io::create_file(&args.out.join("l.csv"))?)?;
    Ok(outcome(&model))
}

pub fn run_impute(args: &ImputeArgs) -> Result<Outcome> {
    let l = load(&args.input)?;
    let config = if args.auto_lambda {
        let grid = default_grid(&l.data, &l.links, &l.dict, 13, 7)?;
        let opts = CvOptions { seed: args.seed, ..CvOptions::default() };
        let cv = cross_validate_with(&l.data, &l.links, &l.dict, &grid, &opts, &l.config)?;
        SolverConfig { lambda1: cv.chosen.0, lambda2: cv.chosen.1, ..l.config }
    } else {
        let (Some(l1), Some(l2)) = (args.lambda1, args.lambda2) else {
            return Err(Error::Invalid("--lambda1 and --lambda2 are required without --auto-lambda".into()));
        };
        SolverConfig { lambda1: l1, lambda2: l2, ..l.config }
    };
    let model = fit(&l.data, &l.links, &l.dict, &config)?;
    let completed = if args.round {
        bcgd::impute_rounded(&model, &l.data, &l.links)?
    } else {
        bcgd::impute(&model, &l.data, &l.links)?
    };
    match &args.output {
        Some(p) => io::write_csv(&completed, io::create_file(p)?)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            io::write_csv(&completed, &mut lock)?;
            lock.flush().map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    Ok(outcome(&model))
}

pub fn run_cv(args: &CvArgs) -> Result<Outcome> {
    let l = load(&args.input)?;
    let grid = default_grid(&l.data, &l.links, &l.dict, args.n1, args.n2)?;
    let opts = CvOptions { n_folds: args.folds, seed: args.seed, patience: args.patience };
    let cv = cross_validate_with(&l.data, &l.links, &l.dict, &grid, &opts, &l.config)?;
    create_dir(&args.out)?;
    report::cv_to_json(&cv, io::create_file(&args.out.join("cv.json"))?)?;
    report::cv_to_csv(&cv, io::create_file(&args.out.join("cv.csv"))?)?;
    eprintln!("chosen lambda1 = {:?}, lambda2 = {:?}", cv.chosen.0, cv.chosen.1);
    Ok(Outcome::Done)
}

pub fn run_simulate(args: &SimulateArgs) -> Result<Outcome> {
    let mut d: SimDesign = match &args.design {
        Some(p) => serde_json::from_reader(io::open_file(p)?)?,
        None => SimDesign::default(),
    };
    macro_rules! set {
        ($($field:ident <- $arg:expr),*) => { $(if let Some(v) = $arg { d.$field = v; })* };
    }
    set!(m1 <- args.m1, m2 <- args.m2, n_groups <- args.groups, s <- args.s, r <- args.r,
         p_obs <- args.p_obs, rho <- args.rho, x_max <- args.x_max, seed <- args.seed);
    if let Some(layout) = args.layout {
        d.layout = match layout {
            LayoutArg::Numeric => ColumnLayout::Numeric,
            LayoutArg::Mixed => ColumnLayout::Mixed,
        };
    }
    let sim = simulate(&d)?;
    create_dir(&args.out)?;
    let data = &sim.observations.data;
    let out = |name: &str| io::create_file(&args.out.join(name));
    io::write_csv(data, out("data.csv")?)?;
    Schema::from_frame(data, &sim.links)?.to_writer(out("schema.json")?)?;
    io::write_dictionary(&sim.dictionary, out("dict.json")?)?;
    serde_json::to_writer_pretty(out("design.json")?, &d)?;
    let labels = io::atom_labels(&sim.dictionary, data.names());
    io::write_alpha_csv(&sim.truth.alpha, &labels, out("alpha_true.csv")?)?;
    io::write_matrix_csv(&sim.truth.l, data.names(), out("l_true.csv")?)?;
    io::write_matrix_csv(&sim.observations.complete, data.names(), out("complete.csv")?)?;
    Ok(Outcome::Done)
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    Ok(serde_json::from_reader(io::open_file(path)?)?)
}

pub fn run_reproduce(args: &ReproduceArgs) -> Result<Outcome> {
    let manifest = args.manifest.as_deref().map(read_manifest).transpose()?;
    let name = match args.study {
        StudyArg::Estimation => "estimation",
        StudyArg::Imputation => "imputation",
        StudyArg::Rates => "rates",
    };
    if let Some(m) = &manifest {
        if m.study != name {
            return Err(Error::Invalid(format!("manifest is for the {} study, not {name}", m.study)));
        }
    }
    let tuning = args.tuning.map(|t| match t {
        TuningArg::Pilot => Tuning::Pilot,
        TuningArg::PerReplicate => Tuning::PerReplicate,
    });
    macro_rules! configure {
        ($ty:ty) => {{
            let mut study: $ty = match &manifest {
                Some(m) => serde_json::from_value(m.config.clone())?,
                None => <$ty>::default(),
            };
            if let Some(s) = args.seed {
                study.seed = s;
            }
            if let Some(n) = args.reps {
                study.n_reps = n;
            }
            if let Some(t) = tuning {
                study.cv.tuning = t;
            }
            study
        }};
    }
    let output: StudyOutput = match args.study {
        StudyArg::Estimation => run_estimation_study(&configure!(EstimationStudy))?,
        StudyArg::Imputation => run_imputation_study(&configure!(ImputationStudy))?,
        StudyArg::Rates => run_rate_study(&configure!(RateStudy))?,
    };
    for path in write_study(&output, &args.out)? {
        eprintln!("wrote {}", path.display());
    }
    if let Some(r) = &output.rates {
        eprintln!(
            "err_L slope {:.3} [{:.3}, {:.3}], err_alpha slope {:.3} [{:.3}, {:.3}]",
            r.err_l.slope, r.err_l.ci_low, r.err_l.ci_high, r.err_alpha.slope, r.err_alpha.ci_low, r.err_alpha.ci_high
        );
    }
    Ok(Outcome::Done)
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Invalid("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Impute(a) => run_impute(a),
        Command::Cv(a) => run_cv(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Reproduce(a) => run_reproduce(a),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(o) => o.exit_code(),
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
