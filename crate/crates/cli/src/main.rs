use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use locrel::radiomap::{build_map, RadioMap};
use locrel::rateselect::{CalibrationRecord, RateSelector};
use locrel::runner::{
    self, ExperimentPlan, Figure, FigureParams, Format, ResultTable, Scheme, Session,
};
use locrel::{Error, Result, SystemConfig};

#[derive(Parser, Debug)]
#[command(name = "locrel", version, about = "Location-based rate selection under localization error")]
struct Cli {
    /// JSON configuration; missing keys take the default system values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for tables, maps and calibrations.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "csv")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build or query the radio map.
    #[command(subcommand)]
    Map(MapCommand),
    /// Average CRLB standard deviation over a range of locations.
    CrlbSweep(RangeArgs),
    /// Tune a rate selector so the meta-probability stays below delta.
    Calibrate {
        /// backoff, ci, oracle or all
        #[arg(long, default_value = "all")]
        scheme: String,
        #[command(flatten)]
        levels: LevelArgs,
        /// Calibration range of true locations, metres.
        #[arg(long, allow_negative_numbers = true, default_value_t = 45.0)]
        xmin: f64,
        #[arg(long, allow_negative_numbers = true, default_value_t = 955.0)]
        xmax: f64,
    },
    /// Meta-probability of a selector over a range of locations.
    Meta {
        #[command(flatten)]
        selector: SelectorArgs,
        #[command(flatten)]
        range: RangeArgs,
    },
    /// Throughput ratio of a selector over a range of locations.
    Throughput {
        #[command(flatten)]
        selector: SelectorArgs,
        #[command(flatten)]
        range: RangeArgs,
    },
    /// Single-subcarrier closed forms.
    Analytic {
        #[arg(long, default_value_t = 0.25)]
        k: f64,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[command(flatten)]
        range: RangeArgs,
    },
    /// Reproduce one of the result figures as tables plus a plotting script.
    Figure {
        /// fig1, fig2 or fig3
        which: Figure,
        #[command(flatten)]
        levels: LevelArgs,
    },
    /// Quick internal consistency checks.
    Selftest,
}

#[derive(Subcommand, Debug)]
enum MapCommand {
    /// Build the map and write it to OUT/map.json.
    Build,
    /// Quantiles and serving probabilities at given locations.
    Query {
        /// Map file (default: OUT/map.json).
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        /// Only this serving BS (1 or 2).
        #[arg(long)]
        bs: Option<usize>,
        /// Also report the outage probability of this rate.
        #[arg(long)]
        rate: Option<f64>,
        #[command(flatten)]
        range: RangeArgs,
    },
}

#[derive(Args, Debug, Clone)]
struct RangeArgs {
    /// Explicit locations in metres (repeatable).
    #[arg(long = "x", allow_negative_numbers = true)]
    xs: Vec<f64>,
    #[arg(long, visible_alias = "xmin", allow_negative_numbers = true, default_value_t = 10.0)]
    from: f64,
    #[arg(long, visible_alias = "xmax", allow_negative_numbers = true, default_value_t = 990.0)]
    to: f64,
    #[arg(long, default_value_t = 10.0)]
    step: f64,
}

impl RangeArgs {
    fn points(&self) -> Result<Vec<f64>> {
        if !self.xs.is_empty() {
            return Ok(self.xs.clone());
        }
        if !(self.step > 0.0 && self.from <= self.to) {
            return Err(Error::Validation {
                field: "range".into(),
                message: format!("empty range [{}, {}] step {}", self.from, self.to, self.step),
            });
        }
        let n = ((self.to - self.from) / self.step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| self.from + i as f64 * self.step).collect())
    }
}

#[derive(Args, Debug, Clone)]
struct LevelArgs {
    /// Outage target.
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    /// Bound on the meta-probability.
    #[arg(long, default_value_t = 1e-3)]
    delta: f64,
}

impl LevelArgs {
    fn params(&self) -> FigureParams {
        FigureParams {
            eps: self.eps,
            delta: self.delta,
            ..FigureParams::default()
        }
    }
}

#[derive(Args, Debug, Clone)]
struct SelectorArgs {
    /// Calibration record written by `calibrate`.
    #[arg(long, visible_alias = "calibration", conflicts_with_all = ["k", "alpha"])]
    selector: Option<PathBuf>,
    /// Backoff factor.
    #[arg(long, conflicts_with = "alpha")]
    k: Option<f64>,
    /// Confidence-interval level.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
}

impl SelectorArgs {
    fn selector(&self) -> Result<RateSelector> {
        let sel = if let Some(path) = &self.selector {
            CalibrationRecord::from_json(&std::fs::read_to_string(path)?)?.selector
        } else if let Some(k) = self.k {
            RateSelector::backoff(k, self.eps)
        } else if let Some(alpha) = self.alpha {
            RateSelector::conf_interval(alpha, self.eps)
        } else {
            return Err(Error::Validation {
                field: "selector".into(),
                message: "give --selector, --k or --alpha".into(),
            });
        };
        sel.validate()?;
        Ok(sel)
    }
}

fn load_map(path: &Path, cfg: &SystemConfig) -> Result<RadioMap> {
    let map = RadioMap::load(path)?;
    map.ensure_matches(cfg)?;
    Ok(map)
}

fn report(plan: &ExperimentPlan, table: &ResultTable) -> Result<()> {
    let path = runner::write_table(plan, table)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => runner::load_config(p)?,
        None => SystemConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.numerics.seed = seed;
    }
    cfg.validate()?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Validation {
                field: "threads".into(),
                message: e.to_string(),
            })?;
    }
    let mut plan = ExperimentPlan::new("", cfg.clone(), &cli.out);
    plan.config_path = cli.config.clone();
    plan.threads = cli.threads;
    plan.format = cli.format;

    match cli.command {
        Command::Map(MapCommand::Build) => {
            plan.name = "map-build".into();
            plan.prepare()?;
            let map = build_map(&cfg)?;
            let path = plan.out_dir.join(runner::MAP_FILE);
            map.save(&path)?;
            eprintln!("wrote {} ({} grid points)", path.display(), map.grid.len);
        }
        Command::Map(MapCommand::Query { map, eps, bs, rate, range }) => {
            plan.name = "map-query".into();
            let path = map.unwrap_or_else(|| plan.out_dir.join(runner::MAP_FILE));
            let map = load_map(&path, &cfg)?;
            let table = runner::map_query(&map, &cfg, &range.points()?, eps, rate, bs)?;
            print!("{}", table.to_csv()?);
        }
        Command::CrlbSweep(range) => {
            plan.name = "crlb-sweep".into();
            report(&plan, &runner::crlb_sweep(&cfg, &range.points()?)?)?;
        }
        Command::Calibrate { scheme, levels, xmin, xmax } => {
            plan.name = "calibrate".into();
            let schemes = if scheme == "all" {
                Scheme::ALL.to_vec()
            } else {
                vec![scheme.parse()?]
            };
            plan.prepare()?;
            let map = runner::obtain_map(&cfg, &plan.out_dir)?;
            let params = FigureParams {
                calib_range: (xmin, xmax),
                ..levels.params()
            };
            let session = Session::new(&cfg, &map, params)?;
            let cache = session.phase_cache()?;
            for s in schemes {
                let rec = session.calibrate(s, &cache)?;
                let path = plan.out_dir.join(format!("calibration_{}.json", s.name()));
                std::fs::write(&path, rec.to_json())?;
                eprintln!("{}: max meta {:e}, wrote {}", s.name(), rec.max_meta, path.display());
            }
        }
        Command::Meta { selector, range } => {
            plan.name = "meta".into();
            let sel = selector.selector()?;
            let map = runner::obtain_map(&cfg, &plan.out_dir)?;
            let session = Session::new(&cfg, &map, FigureParams { eps: sel.eps, ..FigureParams::default() })?;
            report(&plan, &session.meta_table(&sel, &range.points()?)?)?;
        }
        Command::Throughput { selector, range } => {
            plan.name = "throughput".into();
            let sel = selector.selector()?;
            let map = runner::obtain_map(&cfg, &plan.out_dir)?;
            let session = Session::new(&cfg, &map, FigureParams { eps: sel.eps, ..FigureParams::default() })?;
            report(&plan, &session.throughput_table(&sel, &range.points()?)?)?;
        }
        Command::Analytic { k, eps, range } => {
            plan.name = "analytic".into();
            let table = runner::analytic_table(&cfg, &range.points()?, k, eps)?;
            if range.xs.len() == 1 {
                for (c, v) in table.columns.iter().zip(&table.rows[0]) {
                    println!("{c}: {v}");
                }
            } else {
                report(&plan, &table)?;
            }
        }
        Command::Figure { which, levels } => {
            plan.name = "figure".into();
            let tables = runner::run_figure(which, &plan, levels.params())?;
            for t in &tables {
                eprintln!("wrote {}", plan.path(&t.name).display());
            }
        }
        Command::Selftest => {
            let checks = runner::selftest(&cfg);
            let mut failed = 0;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(Error::InvalidDomain(format!("{failed} self checks failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
