use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use holeburn_core::analysis::{fit_double_exponential, fit_exponential_offset, fit_linear, fit_lorentzian, FitResult};
use holeburn_core::scenario::{run_scenario, RunManifest};
use holeburn_core::{list_presets, parse_config, preset, ExperimentConfig};

/// Optical pumping and spectral hole-burning simulator.
#[derive(Debug, Parser)]
#[command(name = "holeburn", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a configuration file or a built-in preset.
    Run(RunArgs),
    /// Fit a model to two-column CSV data.
    Fit(FitArgs),
    /// List the built-in presets.
    ListPresets,
    /// Print a preset as a TOML configuration.
    ShowPreset { name: String },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(required_unless_present = "preset", conflicts_with = "preset")]
    config: Option<PathBuf>,

    /// Run a built-in preset instead of a file.
    #[arg(long)]
    preset: Option<String>,

    /// Output directory; defaults to `holeburn-out/<name>`.
    #[arg(long, env = "HOLEBURN_OUT_DIR")]
    out: Option<PathBuf>,

    /// Worker threads (all cores when omitted).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Model {
    Doubleexp,
    Lorentzian,
    Linear,
    Expoffset,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// CSV with x in the first column and y in the second; a header row is
    /// skipped.
    csv: PathBuf,

    #[arg(long, value_enum)]
    model: Model,

    /// Also write the result as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = dispatch(cli.command) {
        // a closed pipe on stdout (e.g. `| head`) is not a failure
        if e.downcast_ref::<io::Error>()
            .is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe)
        {
            return;
        }
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(command: Command) -> Result<()> {
    let mut stdout = io::stdout().lock();
    match command {
        Command::Run(args) => run(args, &mut stdout),
        Command::Fit(args) => fit(args, &mut stdout),
        Command::ListPresets => {
            for (name, description) in list_presets() {
                writeln!(stdout, "{name:<24}{description}")?;
            }
            Ok(())
        }
        Command::ShowPreset { name } => {
            write!(stdout, "{}", preset(&name)?.to_toml()?)?;
            Ok(())
        }
    }
}

fn load(args: &RunArgs) -> Result<ExperimentConfig> {
    match (&args.config, &args.preset) {
        (Some(path), None) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            let mut config =
                parse_config(&text).with_context(|| format!("invalid configuration {}", path.display()))?;
            if config.name.is_empty() {
                config.name = path
                    .file_stem()
                    .map_or("run".into(), |s| s.to_string_lossy().into_owned());
            }
            Ok(config)
        }
        (None, Some(name)) => Ok(preset(name)?),
        _ => bail!("give exactly one of a configuration file or --preset"),
    }
}

fn run(args: RunArgs, stdout: &mut impl Write) -> Result<()> {
    let config = load(&args)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| Path::new("holeburn-out").join(&config.name));
    if args.threads == Some(0) {
        bail!("--threads must be at least 1");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads.unwrap_or(0))
        .build()
        .context("cannot start the worker pool")?;
    log::info!("running {} into {}", config.name, out.display());
    let manifest = pool.install(|| run_scenario(&config, &out))?;
    report(&manifest, &out, stdout)?;
    Ok(())
}

fn report(manifest: &RunManifest, out: &Path, stdout: &mut impl Write) -> io::Result<()> {
    writeln!(
        stdout,
        "{}: {} files in {} ({:.2} s, {} threads)",
        manifest.name,
        manifest.files.len(),
        out.display(),
        manifest.wall_time_s,
        manifest.threads
    )?;
    for file in &manifest.files {
        writeln!(stdout, "  {file}")?;
    }
    for d in &manifest.diagnostics {
        writeln!(stdout, "  note: {d}")?;
    }
    Ok(())
}

fn read_xy(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (i, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{}: malformed CSV", path.display()))?;
        let parse = |k: usize| record.get(k).and_then(|s| s.parse::<f64>().ok());
        match (parse(0), parse(1)) {
            (Some(a), Some(b)) => {
                x.push(a);
                y.push(b);
            }
            _ if i == 0 => continue,
            _ => bail!("{}: line {} does not hold two numbers", path.display(), i + 1),
        }
    }
    Ok((x, y))
}

fn fit(args: FitArgs, stdout: &mut impl Write) -> Result<()> {
    let (x, y) = read_xy(&args.csv)?;
    let result: FitResult = match args.model {
        Model::Doubleexp => fit_double_exponential(&x, &y, None)?,
        Model::Lorentzian => fit_lorentzian(&x, &y)?,
        Model::Linear => fit_linear(&x, &y)?.into_result(x.len()),
        Model::Expoffset => fit_exponential_offset(&x, &y)?,
    };
    if let Some(out) = &args.out {
        result.save(out)?;
    }
    writeln!(stdout, "{}", serde_json::to_string_pretty(&result)?)?;
    if !result.converged {
        log::warn!("the fit did not converge");
    }
    Ok(())
}
