mod diag;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process;
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{Context, Result};
use cashgof::calibrate::{self, builtin_methods, ExperimentGrid, Family};
use cashgof::cumulants::{build_table, write_atomic, CumulantSource, CumulantTable, TableSpec, TABLE_ENV};
use cashgof::dataset::{segment, BinnedDataset, SegmentMode};
use cashgof::fit::fit_mle;
use cashgof::gof::{run_gof, Algorithm, GofOptions};
use cashgof::model::{ModelConfig, SpectralModel};
use cashgof::report::{write_pvalue_table, AnalysisReport, ConfigEcho};
use cashgof::response::InstrumentResponse;
use cashgof::simulate::simulate_counts;
use clap::{Args, Parser, Subcommand, ValueEnum};

use diag::{Code, Diagnostic, InputContext};

#[derive(Parser)]
#[command(
    name = "cashgof",
    about = "Goodness-of-fit tests for Poisson spectra based on the C statistic",
    version,
    after_help = "\
Examples:
  cashgof fit --data spectrum.csv --model '{\"model\":\"powerlaw\"}'
  cashgof gof --data spectrum.csv --model model.json --method lr-chi2,corrected-z-high,bootstrap --seed 1
  cashgof table build --out cumulants.bin
  cashgof calibrate type1-desk --seed 7 --format csv --out type1.csv"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model by minimising C
    Fit(FitArgs),
    /// Fit, then test goodness of fit with one or more methods
    Gof(GofArgs),
    /// Simulate a Poisson dataset from a model with given parameters
    Simulate(SimulateArgs),
    /// Build, verify or export the cumulant look-up table
    Table {
        #[command(subcommand)]
        action: TableAction,
    },
    /// Monte Carlo Type-I error or power study
    Calibrate(CalibrateArgs),
    /// Time the corrected Z-test against the parametric bootstrap
    Bench(BenchArgs),
    /// Split a dataset into k exposure segments
    Segment(SegmentArgs),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Args)]
struct Inputs {
    /// Spectrum CSV (`channel,lo,hi,count[,background]`)
    #[arg(long)]
    data: PathBuf,
    /// Redistribution matrix CSV (model bins x channels, no header)
    #[arg(long, requires = "arf")]
    rmf: Option<PathBuf>,
    /// Effective-area CSV (`j,x_mid,width,area`)
    #[arg(long, requires = "rmf")]
    arf: Option<PathBuf>,
    /// Model configuration: a JSON file or an inline JSON object
    #[arg(long)]
    model: String,
    /// Cumulant table (defaults to $CASHGOF_TABLE, else direct summation)
    #[arg(long)]
    table: Option<PathBuf>,
    /// Output file (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    inputs: Inputs,
}

#[derive(Args)]
struct GofArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Comma-separated test methods
    #[arg(long, value_delimiter = ',', default_value = "corrected-z-high")]
    method: Vec<String>,
    /// Bootstrap replicates
    #[arg(long = "B", default_value_t = 300)]
    b: usize,
    /// Outer double-bootstrap replicates
    #[arg(long = "B1", default_value_t = 300)]
    b1: usize,
    /// Inner double-bootstrap replicates
    #[arg(long = "B2", default_value_t = 300)]
    b2: usize,
    /// Significance level recorded with the report
    #[arg(long)]
    alpha: Option<f64>,
    /// Master seed (required by resampling methods)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Template dataset giving the channel grid, exposure and background
    #[arg(long, conflicts_with = "bins")]
    data: Option<PathBuf>,
    /// Number of channels on the unit grid when no template is given
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long, requires = "arf")]
    rmf: Option<PathBuf>,
    #[arg(long, requires = "rmf")]
    arf: Option<PathBuf>,
    /// Model configuration with parameter values
    #[arg(long)]
    model: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TableAction {
    /// Compute the table and write it atomically
    Build {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = TableSpec::default().rows)]
        rows: usize,
        #[arg(long, default_value_t = TableSpec::default().step)]
        step: f64,
        #[arg(long, default_value_t = TableSpec::default().s_min)]
        s_min: f64,
        #[arg(long, default_value_t = TableSpec::default().tau)]
        tau: f64,
    },
    /// Check the digest and interpolation accuracy of a table file
    Verify { path: PathBuf },
    /// Write the table rows as CSV
    ExportCsv {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CalibrateArgs {
    /// Grid JSON file, or a preset: type1-full, type1-desk, power-emission,
    /// power-absorption, power-emission-gamma1, power-absorption-gamma1
    grid: String,
    /// Override the grid's master seed (required for presets)
    #[arg(long)]
    seed: Option<u64>,
    /// Override the bootstrap replicates
    #[arg(long = "B")]
    b: Option<usize>,
    /// Override the significance levels
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    /// Override the algorithms
    #[arg(long, value_delimiter = ',')]
    method: Option<Vec<String>>,
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct BenchArgs {
    /// Channel counts to time
    #[arg(long, value_delimiter = ',', default_value = "25,50,100")]
    n: Vec<usize>,
    #[arg(long = "B", default_value_t = 100)]
    b: usize,
    /// Repetitions per channel count
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    data: PathBuf,
    /// Number of segments
    #[arg(long)]
    k: usize,
    /// Seed for binomial thinning
    #[arg(long, conflicts_with = "counts")]
    seed: Option<u64>,
    /// JSON array of per-segment count vectors, instead of thinning
    #[arg(long)]
    counts: Option<PathBuf>,
    /// Output directory for `segment_XX.csv`
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let d = diag::classify(&e);
        eprintln!("{}", d.to_json());
        process::exit(d.code.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Gof(a) => cmd_gof(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Table { action } => cmd_table(action),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Segment(a) => cmd_segment(a),
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn require_seed(seed: Option<u64>, what: &str) -> Result<u64, Diagnostic> {
    seed.ok_or_else(|| Diagnostic::new(Code::SeedRequired, format!("{what} needs --seed")))
}

fn load_model_config(arg: &str) -> Result<ModelConfig, Diagnostic> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_owned()
    } else {
        std::fs::read_to_string(arg).map_err(|e| Diagnostic::new(Code::Io, format!("model {arg}: {e}")))?
    };
    serde_json::from_str(&text).map_err(|e| Diagnostic::new(Code::Schema, format!("model: {e}")))
}

fn load_response(rmf: Option<&Path>, arf: Option<&Path>) -> Result<Option<InstrumentResponse>, Diagnostic> {
    match (rmf, arf) {
        (Some(r), Some(a)) => InstrumentResponse::read_csv(r, a).input("response").map(Some),
        _ => Ok(None),
    }
}

fn cumulant_source(table: Option<&Path>) -> Result<(CumulantSource, Option<PathBuf>), Diagnostic> {
    let path = table
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(TABLE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
    match path {
        Some(p) => {
            let t = CumulantTable::read(&p).input(&format!("table {}", p.display()))?;
            Ok((CumulantSource::with_table(Arc::new(t)), Some(p)))
        }
        None => Ok((CumulantSource::direct(), None)),
    }
}

struct Loaded {
    data: BinnedDataset,
    config: ModelConfig,
    model: Box<dyn SpectralModel>,
    init: Option<Vec<f64>>,
    source: CumulantSource,
    table: Option<PathBuf>,
}

fn load(inputs: &Inputs) -> Result<Loaded> {
    let data = BinnedDataset::read_csv(&inputs.data).input(&format!("data {}", inputs.data.display()))?;
    let response = load_response(inputs.rmf.as_deref(), inputs.arf.as_deref())?;
    let config = load_model_config(&inputs.model)?;
    let model = config
        .build(&data, response.as_ref())
        .with_code(Code::Incompatible, "model")?;
    let init = config.theta(model.as_ref()).with_code(Code::Incompatible, "model")?;
    let (source, table) = cumulant_source(inputs.table.as_deref())?;
    Ok(Loaded {
        data,
        config,
        model,
        init,
        source,
        table,
    })
}

fn echo(command: &str, inputs: &Inputs, config: &ModelConfig, table: Option<&Path>) -> ConfigEcho {
    let show = |p: &Path| p.display().to_string();
    ConfigEcho {
        command: command.to_owned(),
        data: Some(show(&inputs.data)),
        rmf: inputs.rmf.as_deref().map(show),
        arf: inputs.arf.as_deref().map(show),
        model: Some(config.clone()),
        table: table.map(show),
        ..ConfigEcho::default()
    }
}

fn spectrum_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn render_report(report: &AnalysisReport, format: Format, name: String) -> Result<Vec<u8>> {
    match format {
        Format::Json => Ok(report.to_json()?.into_bytes()),
        Format::Csv => {
            let mut buf = Vec::new();
            write_pvalue_table(&[(name, report.clone())], &mut buf)?;
            Ok(buf)
        }
    }
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let l = load(&a.inputs)?;
    let fit = fit_mle(&l.data, l.model.as_ref(), l.init.as_deref())?;
    let checksum = l.source.checksum();
    let report = AnalysisReport::new(
        echo("fit", &a.inputs, &l.config, l.table.as_deref()),
        fit,
        Vec::new(),
        checksum,
    );
    let bytes = match a.inputs.format {
        Format::Json => report.to_json()?.into_bytes(),
        Format::Csv => {
            let mut s = String::from("parameter,value\n");
            for (n, v) in report.fit.theta_hat.names.iter().zip(&report.fit.theta_hat.values) {
                s.push_str(&format!("{n},{v}\n"));
            }
            s.push_str(&format!("C,{}\n", report.fit.c_min));
            s.into_bytes()
        }
    };
    emit(a.inputs.out.as_deref(), &bytes)
}

fn cmd_gof(a: GofArgs) -> Result<()> {
    let methods = a
        .method
        .iter()
        .map(|m| Algorithm::from_str(m.trim()).input("--method"))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(m) = methods.iter().find(|m| m.is_stochastic()) {
        require_seed(a.seed, &format!("method {m}"))?;
    }
    if let Some(alpha) = a.alpha {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Diagnostic::new(Code::Schema, "--alpha must lie in (0, 1)").into());
        }
    }
    let l = load(&a.inputs)?;
    let fit = fit_mle(&l.data, l.model.as_ref(), l.init.as_deref())?;
    let opts = GofOptions {
        b: a.b,
        b1: a.b1,
        b2: a.b2,
        seed: a.seed,
        ..GofOptions::default()
    };
    let gof = methods
        .iter()
        .map(|&m| run_gof(m, &l.data, l.model.as_ref(), &fit, &l.source, &opts).with_context(|| format!("method {m}")))
        .collect::<Result<Vec<_>>>()?;
    let stochastic = methods.iter().any(|m| m.is_stochastic());
    let config = ConfigEcho {
        methods: methods.clone(),
        b: methods
            .iter()
            .any(|m| matches!(m, Algorithm::Bootstrap | Algorithm::NaiveZBoot))
            .then_some(a.b),
        b1: methods.contains(&Algorithm::DoubleBootstrap).then_some(a.b1),
        b2: methods.contains(&Algorithm::DoubleBootstrap).then_some(a.b2),
        alpha: a.alpha,
        seed: a.seed.filter(|_| stochastic),
        ..echo("gof", &a.inputs, &l.config, l.table.as_deref())
    };
    let report = AnalysisReport::new(config, fit, gof, l.source.checksum());
    let bytes = render_report(&report, a.inputs.format, spectrum_name(&a.inputs.data))?;
    emit(a.inputs.out.as_deref(), &bytes)
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let seed = require_seed(a.seed, "simulate")?;
    let template = match (&a.data, a.bins) {
        (Some(p), _) => BinnedDataset::read_csv(p).input(&format!("data {}", p.display()))?,
        (None, Some(n)) => BinnedDataset::on_unit_grid(vec![0; n]).input("--bins")?,
        (None, None) => return Err(Diagnostic::new(Code::Schema, "simulate needs --data or --bins").into()),
    };
    let response = load_response(a.rmf.as_deref(), a.arf.as_deref())?;
    let config = load_model_config(&a.model)?;
    let model = config
        .build(&template, response.as_ref())
        .with_code(Code::Incompatible, "model")?;
    let theta = config
        .theta(model.as_ref())
        .with_code(Code::Incompatible, "model")?
        .ok_or_else(|| Diagnostic::new(Code::Schema, "simulate needs parameter values in the model `params`"))?;
    let data = simulate_counts(model.as_ref(), &theta, &template, seed)?;
    let mut buf = Vec::new();
    data.write_csv(&mut buf)?;
    emit(a.out.as_deref(), &buf)
}

fn table_timestamp() -> i64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

fn cmd_table(action: TableAction) -> Result<()> {
    match action {
        TableAction::Build {
            out,
            rows,
            step,
            s_min,
            tau,
        } => {
            let spec = TableSpec { s_min, step, rows, tau };
            if !(s_min > 0.0 && step > 0.0 && tau > 0.0) || rows < 4 {
                return Err(Diagnostic::new(Code::Schema, "table needs s_min, step, tau > 0 and rows >= 4").into());
            }
            let table = build_table(spec, table_timestamp())?;
            table
                .write(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            let summary = serde_json::json!({
                "path": out.display().to_string(),
                "rows": rows,
                "s_max": table.spec().s_max(),
                "checksum": table.checksum(),
            });
            println!("{summary}");
            Ok(())
        }
        TableAction::Verify { path } => {
            let table = CumulantTable::read(&path).input(&format!("table {}", path.display()))?;
            table.validate().input(&format!("table {}", path.display()))?;
            let summary = serde_json::json!({
                "path": path.display().to_string(),
                "status": "ok",
                "checksum": table.checksum(),
            });
            println!("{summary}");
            Ok(())
        }
        TableAction::ExportCsv { table, out } => {
            let t = CumulantTable::read(&table).input(&format!("table {}", table.display()))?;
            let mut buf = Vec::new();
            t.write_csv(&mut buf)?;
            emit(out.as_deref(), &buf)
        }
    }
}

fn load_grid(arg: &str, seed: Option<u64>) -> Result<ExperimentGrid, Diagnostic> {
    let preset = |f: fn(u64) -> ExperimentGrid| require_seed(seed, &format!("preset {arg}")).map(f);
    let mut grid = match arg {
        "type1-full" => preset(ExperimentGrid::type1_full)?,
        "type1-desk" => preset(ExperimentGrid::type1_desk)?,
        "power-emission" => preset(|s| ExperimentGrid::power(Family::Emission, s))?,
        "power-absorption" => preset(|s| ExperimentGrid::power(Family::Absorption, s))?,
        "power-emission-gamma1" => preset(|s| ExperimentGrid::power_gamma1(Family::Emission, s))?,
        "power-absorption-gamma1" => preset(|s| ExperimentGrid::power_gamma1(Family::Absorption, s))?,
        path => {
            let text =
                std::fs::read_to_string(path).map_err(|e| Diagnostic::new(Code::Io, format!("grid {path}: {e}")))?;
            serde_json::from_str(&text).map_err(|e| Diagnostic::new(Code::Schema, format!("grid {path}: {e}")))?
        }
    };
    if let Some(s) = seed {
        grid.seed = s;
    }
    Ok(grid)
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let mut grid = load_grid(&a.grid, a.seed)?;
    if let Some(b) = a.b {
        grid.bootstrap_b = b;
    }
    if let Some(alpha) = a.alpha {
        grid.alphas = alpha;
    }
    if let Some(m) = &a.method {
        grid.algorithms = m
            .iter()
            .map(|s| Algorithm::from_str(s.trim()).input("--method"))
            .collect::<Result<_, _>>()?;
    }
    grid.validate().input("grid")?;
    let (source, _) = cumulant_source(a.table.as_deref())?;
    let methods = builtin_methods(&grid, &source);
    let report = calibrate::run_grid(&grid, &methods)?;
    let bytes = match a.format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&report)?;
            s.push('\n');
            s.into_bytes()
        }
        Format::Csv => {
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            buf
        }
    };
    emit(a.out.as_deref(), &bytes)
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let seed = require_seed(a.seed, "bench")?;
    if a.n.iter().any(|&n| n < 3) {
        return Err(Diagnostic::new(Code::Schema, "--n values must be at least 3").into());
    }
    let (source, _) = cumulant_source(a.table.as_deref())?;
    let rows = calibrate::runtime_bench(&a.n, a.b, a.reps, seed, &source)?;
    let bytes = match a.format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&rows)?;
            s.push('\n');
            s.into_bytes()
        }
        Format::Csv => {
            let mut s = String::from("n,B,repetitions,corrected_z_secs,bootstrap_secs\n");
            for r in &rows {
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.n, r.bootstrap_b, r.repetitions, r.corrected_z_secs, r.bootstrap_secs
                ));
            }
            s.into_bytes()
        }
    };
    emit(a.out.as_deref(), &bytes)
}

fn cmd_segment(a: SegmentArgs) -> Result<()> {
    let data = BinnedDataset::read_csv(&a.data).input(&format!("data {}", a.data.display()))?;
    let mode = match &a.counts {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Diagnostic::new(Code::Io, format!("counts {}: {e}", p.display())))?;
            let counts: Vec<Vec<u64>> = serde_json::from_str(&text)
                .map_err(|e| Diagnostic::new(Code::Schema, format!("counts {}: {e}", p.display())))?;
            SegmentMode::Supplied(counts)
        }
        None => SegmentMode::Thin {
            seed: require_seed(a.seed, "segment thinning")?,
        },
    };
    let parts = segment(&data, a.k, mode).input("segment")?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let width = a.k.to_string().len().max(2);
    for (i, part) in parts.iter().enumerate() {
        let mut buf = Vec::new();
        part.write_csv(&mut buf)?;
        emit(Some(&a.out.join(format!("segment_{:0width$}.csv", i + 1))), &buf)?;
    }
    Ok(())
}
