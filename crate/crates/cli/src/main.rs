use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use pixelsynth::geometry::GeometryParams;
use pixelsynth::impm::PortConfiguration;
use pixelsynth::pipeline::{
    curve_csv, run_pipeline_with_table, run_stage1, run_tuning, verify_against_oracle, DesignReport, PipelineConfig,
    PipelineError,
};
use pixelsynth::response::{extract_features, DbResponse};
use pixelsynth::search::value_table_csv;

#[derive(Parser)]
#[command(
    name = "pixelsynth",
    version,
    about = "Pixel antenna topology search and geometry tuning"
)]
struct Cli {
    /// Worker threads for search and Jacobian builds (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for test sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Both stages: topology search, then geometry tuning.
    Run {
        #[command(flatten)]
        common: Common,
        /// Skip the full search table.
        #[arg(long)]
        no_table: bool,
    },
    /// Stage 1 only.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        no_table: bool,
    },
    /// Stage 2 only, for a given topology.
    Tune {
        #[command(flatten)]
        common: Common,
        /// Port states, one character per port ('1' = closed).
        #[arg(long)]
        y: String,
    },
    /// Reflection curve of one design, as CSV.
    Curve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        y: String,
        /// Comma-separated l,d,alpha,gamma; defaults to the configured x0.
        #[arg(long)]
        x: Option<String>,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare port reduction against the direct circuit solve.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 50)]
        samples: u64,
    },
    /// Extract resonance features from a curve CSV.
    Features {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        q: usize,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Pipeline(PipelineError),
    Runtime(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::Pipeline(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Pipeline(e) => e.exit_code() as u8,
            Failure::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
            Failure::Pipeline(e) => write!(f, "{e}"),
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn parse_y(bits: &str) -> Result<PortConfiguration, Failure> {
    PortConfiguration::from_bitstring(bits).map_err(|e| Failure::Usage(e.to_string()))
}

fn parse_x(spec: &str) -> Result<GeometryParams, Failure> {
    let v: Vec<f64> = spec
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Usage(format!("--x '{spec}': {e}")))?;
    if v.len() != GeometryParams::DIM {
        return Err(Failure::Usage(format!(
            "--x needs {} comma-separated values, got {}",
            GeometryParams::DIM,
            v.len()
        )));
    }
    Ok(GeometryParams::from_slice(&v))
}

fn write_report(out: &Path, report: &DesignReport) -> Result<(), Failure> {
    write(&out.join("report.json"), &report.to_json())?;
    write(&out.join("trace.csv"), &report.trace.to_csv())?;
    write(&out.join("trace.json"), &report.trace.to_json())?;
    if let Some(c) = &report.curves.predicted_x0 {
        write(&out.join("curves/predicted_x0.csv"), &curve_csv(c))?;
    }
    write(&out.join("curves/initial.csv"), &curve_csv(&report.curves.initial))?;
    write(&out.join("curves/final.csv"), &curve_csv(&report.curves.final_))
}

fn read_curve(path: &Path) -> Result<(Vec<f64>, Vec<f64>), Failure> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Failure::Usage(format!("{}: missing column '{name}'", path.display())))
    };
    let (fi, di) = (col("freq_ghz")?, col("mag_db")?);
    let (mut freqs, mut db) = (Vec::new(), Vec::new());
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let num = |i: usize| {
            record
                .get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Failure::Usage(format!("{}: bad number on data row {}", path.display(), row + 1)))
        };
        freqs.push(num(fi)?);
        db.push(num(di)?);
    }
    Ok((freqs, db))
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Run { common, no_table } => {
            let cfg = PipelineConfig::load(&common.config)?;
            let (report, stage1) = run_pipeline_with_table(&cfg, !no_table)?;
            write_report(&common.out, &report)?;
            if let Some(table) = &stage1.search.value_table {
                write(
                    &common.out.join("search_table.csv"),
                    &value_table_csv(table, stage1.partitioned.m()),
                )?;
            }
            println!(
                "y* = {}  x* = {:?}  U: {:.6} -> {:.6}  cost = {:.1}",
                report.y_star,
                report.x_star.to_array(),
                report.initial_objective,
                report.final_objective,
                report.ledger.total()
            );
        }
        Command::Search { common, no_table } => {
            let cfg = PipelineConfig::load(&common.config)?;
            let s = run_stage1(&cfg, !no_table)?;
            let summary = serde_json::json!({
                "version": env!("CARGO_PKG_VERSION"),
                "port_count": s.partitioned.m(),
                "search": pixelsynth::pipeline::Stage1Summary::from(&s.search),
                "ledger": s.ledger,
            });
            write(
                &common.out.join("search.json"),
                &serde_json::to_string_pretty(&summary).expect("summary serialises"),
            )?;
            write(
                &common.out.join("curves/predicted_x0.csv"),
                &curve_csv(&s.predicted_curve),
            )?;
            if let Some(table) = &s.search.value_table {
                write(
                    &common.out.join("search_table.csv"),
                    &value_table_csv(table, s.partitioned.m()),
                )?;
            }
            println!(
                "y* = {}  U = {:.6}",
                s.search.best_config.to_bitstring(),
                s.search.best_value
            );
        }
        Command::Tune { common, y } => {
            let cfg = PipelineConfig::load(&common.config)?;
            let report = run_tuning(&cfg, &parse_y(&y)?)?;
            write_report(&common.out, &report)?;
            println!(
                "x* = {:?}  U: {:.6} -> {:.6}",
                report.x_star.to_array(),
                report.initial_objective,
                report.final_objective
            );
        }
        Command::Curve { config, y, x, out } => {
            let cfg = PipelineConfig::load(&config)?;
            let y = parse_y(&y)?;
            let m = cfg.port_count()?;
            if y.len() != m {
                return Err(Failure::Usage(format!("--y has {} ports, the grid has {m}", y.len())));
            }
            let x = x.as_deref().map(parse_x).transpose()?;
            let curve = pixelsynth::pipeline::curve_for(&cfg, &y, x.as_ref())?;
            write(&out, &curve_csv(&curve))?;
        }
        Command::Verify { config, samples } => {
            let cfg = PipelineConfig::load(&config)?;
            let check = verify_against_oracle(&cfg, samples, cli.seed)?;
            println!("{}", serde_json::to_string_pretty(&check).expect("check serialises"));
        }
        Command::Features { input, q } => {
            let (freqs, db) = read_curve(&input)?;
            let fv = extract_features(DbResponse::new(&freqs, &db), q).map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("{}", serde_json::to_string_pretty(&fv).expect("features serialise"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let start = Instant::now();
    match run(cli) {
        Ok(()) => {
            eprintln!("elapsed: {:.3} s", start.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
