use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use collab_tta::data::{assemble_stream, write_embedding_dataset, ManifestEntry, SuiteManifest, SyntheticSuiteConfig};
use collab_tta::data::generate_suite_datasets;
use collab_tta::engine::{Method, RunConfig};
use collab_tta::report::{
    ablation, entropy_profile_csv, format_table, generalization_csv, grid_preset, inapplicable_cells, labeled_csv, shifts_csv, sweep,
    table_csv, Experiment, TableRow,
};
use collab_tta::{Error, Result};

#[derive(Parser)]
#[command(name = "collab-tta", version, about = "Online continual test-time adaptation over embedding streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SuiteArgs {
    /// Suite manifest JSON path, or a synthetic preset name (reference, ssl-like, tiny).
    #[arg(long, default_value = "reference")]
    suite: String,
    /// Run configuration JSON file; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Batch size for manifest suites (synthetic presets carry their own).
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Overrides `optimizer.base_lr` from the config.
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Online adaptation of one method, reported against the no-adapt baseline.
    Run {
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        suite: SuiteArgs,
    },
    /// AWS hyperparameter grid.
    Sweep {
        /// kn, lkd, lml or paper-all.
        #[arg(long, default_value = "paper-all")]
        grid: String,
        #[command(flatten)]
        suite: SuiteArgs,
    },
    /// Toggle the contrastive, distillation and mutual-learning terms.
    Ablate {
        #[command(flatten)]
        suite: SuiteArgs,
    },
    /// Adapt on the first domains, then evaluate frozen on the following ones.
    Dgen {
        #[arg(long, default_value_t = 10)]
        adapt_first: usize,
        #[arg(long, default_value_t = 5)]
        holdout: usize,
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        suite: SuiteArgs,
    },
    /// Write a synthetic preset to embedding files plus a manifest.
    Gen {
        #[arg(long, default_value = "reference")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Manifest {
        path: path.display().to_string(),
        source,
    })
}

fn load_experiment(args: &SuiteArgs) -> Result<Experiment> {
    let path = Path::new(&args.suite);
    if path.is_file() {
        let manifest = SuiteManifest::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let loaded = manifest.load(base)?;
        let stream = assemble_stream(&loaded.domains, args.batch_size, args.seed)?;
        return Ok(Experiment {
            source: loaded.source,
            stream,
        });
    }
    if args.suite.ends_with(".json") {
        return Err(io_err(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    Experiment::synthetic(&SyntheticSuiteConfig::preset(&args.suite, args.seed)?)
}

fn prepare(args: &SuiteArgs, method: Option<&str>) -> Result<(Experiment, RunConfig)> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(m) = method {
        cfg.method.method = m.parse::<Method>()?;
    }
    if let Some(lr) = args.base_lr {
        cfg.optimizer.base_lr = lr;
    }
    let exp = load_experiment(args)?;
    cfg.validate(exp.stream.classes)?;
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    Ok((exp, cfg))
}

fn run(method: Option<&str>, args: &SuiteArgs) -> Result<()> {
    let (exp, cfg) = prepare(args, method)?;
    let (base, report) = exp.run_with_baseline(&cfg, args.seed)?;
    let rows = [TableRow::from(&base), TableRow::from(&report)];
    write(&args.out, "report.json", &report.to_json())?;
    write(&args.out, "table.csv", &table_csv(&rows)?)?;
    write(&args.out, "shifts.csv", &shifts_csv(&report.shifts))?;
    write(&args.out, "entropy_profile.csv", &entropy_profile_csv(&report.entropy_profile))?;
    print!("{}", format_table(&rows));
    Ok(())
}

fn run_sweep(grid: &str, args: &SuiteArgs) -> Result<()> {
    let cells = grid_preset(grid)?;
    let (exp, cfg) = prepare(args, Some("aws"))?;
    let classes = exp.stream.classes;
    for label in inapplicable_cells(&cells, &cfg, classes) {
        eprintln!("note: cell {label} needs more than {classes} classes; left empty");
    }
    let rows = sweep(&cells, &cfg, classes, |c| exp.mean_error(c, args.seed))?;
    let text = labeled_csv("grid", "value", &rows);
    write(&args.out, "sweep.csv", &text)?;
    print!("{text}");
    Ok(())
}

fn run_ablate(args: &SuiteArgs) -> Result<()> {
    let (exp, cfg) = prepare(args, Some("aws"))?;
    let rows = ablation(&cfg, |c| exp.mean_error(c, args.seed))?;
    let text = labeled_csv("table", "configuration", &rows);
    write(&args.out, "ablation.csv", &text)?;
    print!("{text}");
    Ok(())
}

fn run_dgen(adapt_first: usize, holdout: usize, method: Option<&str>, args: &SuiteArgs) -> Result<()> {
    let (exp, cfg) = prepare(args, method)?;
    let baseline = exp.generalization(&Experiment::baseline_config(&cfg), args.seed, adapt_first, holdout)?;
    let report = exp.generalization(&cfg, args.seed, adapt_first, holdout)?;
    if !report.holdout_was_frozen() {
        return Err(Error::InvalidConfig("parameters changed during held-out evaluation".into()));
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write(&args.out, "report.json", &json)?;
    let mut text = generalization_csv("none", &baseline)?;
    let method_rows = generalization_csv(cfg.method.method.name(), &report)?;
    text.push_str(method_rows.lines().nth(1).unwrap_or_default());
    text.push('\n');
    write(&args.out, "table.csv", &text)?;
    print!("{text}");
    Ok(())
}

fn run_gen(preset: &str, seed: u64, out: &Path) -> Result<()> {
    let cfg = SyntheticSuiteConfig::preset(preset, seed)?;
    let suite = generate_suite_datasets(&cfg)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_embedding_dataset(&suite.source, out.join("source.txt"))?;
    let mut domains = Vec::new();
    for d in &suite.domains {
        let file = format!("{}.txt", d.name);
        write_embedding_dataset(&d.data, out.join(&file))?;
        domains.push(ManifestEntry {
            name: d.name.clone(),
            path: file.into(),
        });
    }
    let manifest = SuiteManifest {
        source: ManifestEntry {
            name: "source".into(),
            path: "source.txt".into(),
        },
        domains,
    };
    manifest.write(out.join("manifest.json"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { method, suite } => run(method.as_deref(), suite),
        Command::Sweep { grid, suite } => run_sweep(grid, suite),
        Command::Ablate { suite } => run_ablate(suite),
        Command::Dgen {
            adapt_first,
            holdout,
            method,
            suite,
        } => run_dgen(*adapt_first, *holdout, method.as_deref(), suite),
        Command::Gen { preset, seed, out } => run_gen(preset, *seed, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
