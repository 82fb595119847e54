//! Experiment runner behind the `analog-md` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::annealer::{anneal_with, AnnealOutcome};
use crate::baselines::{linear_scheme, projection_baseline_2to1};
use crate::config::{ConfigFile, RunConfig};
use crate::error::{Error, Result};
use crate::io::{fmt_num, write_atomic};
use crate::md2to1::{anneal_2to1_with, evaluate_mmse_2to1, export_structure, source_grid_2to1, AnnealOutcome2to1, VectorMapping};
use crate::opta::{opta_min_cost, OptaPoint, OptaQuery};
use crate::system::{evaluate_mmse, Metrics, Mode, ScalarMapping, SystemConfig};

#[derive(Debug, Parser)]
#[command(name = "analog-md", version, about = "Zero-delay analog multiple-description mappings over two AWGN channels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `1to1` or `2to1`.
    #[arg(long, global = true)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Information-theoretic bound at the configured powers.
    Opta,
    /// Linear (1:1) or projection (2:1) reference scheme.
    Linear,
    /// Anneal and refine an encoder pair.
    Optimize,
    /// Evaluate a mapping file with MMSE decoders.
    Evaluate {
        #[arg(long)]
        mapping: PathBuf,
    },
    /// Optimize, linear and bound for every ε of the sweep.
    Sweep,
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    RunConfig::resolve(file, cli.mode, cli.seed, cli.out.clone())
}

/// Runs one command and returns a short human-readable summary.
pub fn run(cli: &Cli) -> Result<String> {
    let rc = resolve(cli)?;
    match &cli.command {
        Command::Opta => run_opta(&rc),
        Command::Linear => run_linear(&rc),
        Command::Optimize => run_optimize(&rc),
        Command::Evaluate { mapping } => run_evaluate(&rc, mapping),
        Command::Sweep => run_sweep(&rc),
    }
}

fn power(rc: &RunConfig) -> Result<f64> {
    rc.system.power_target.ok_or_else(|| Error::Config("this command needs `csnr_db` in the config".into()))
}

fn write_common(rc: &RunConfig) -> Result<()> {
    write_atomic(&rc.out.join("effective_config.toml"), &rc.to_toml())?;
    let info = format!(
        "execution = \"{}\"\nreduction = \"fixed-order\"\nseed = {}\n",
        rc.grids.exec.label(),
        rc.seed
    );
    write_atomic(&rc.out.join("run_info.toml"), &info)
}

fn opta_query(cfg: &SystemConfig, p1: f64, p2: f64) -> OptaQuery {
    let beta = cfg.mode.bandwidth_ratio();
    OptaQuery {
        p1: p1 / cfg.noise_variance_1,
        p2: p2 / cfg.noise_variance_2,
        beta1: beta,
        beta2: beta,
        sigma2: cfg.source_variance,
        epsilon: cfg.epsilon,
    }
}

pub fn opta_at(cfg: &SystemConfig, p1: f64, p2: f64) -> Result<OptaPoint> {
    opta_min_cost(&opta_query(cfg, p1, p2))
}

pub fn run_opta(rc: &RunConfig) -> Result<String> {
    let p = power(rc)?;
    let mut s = String::from("epsilon,d1,d2,d0,nu,d_total,snr_db\n");
    let eps: Vec<f64> = if rc.sweep_epsilons.contains(&rc.system.epsilon) {
        rc.sweep_epsilons.clone()
    } else {
        std::iter::once(rc.system.epsilon).chain(rc.sweep_epsilons.iter().copied()).collect()
    };
    for e in eps {
        let o = opta_at(&rc.system.clone().with_epsilon(e), p, p)?;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            fmt_num(e),
            fmt_num(o.d1),
            fmt_num(o.d2),
            fmt_num(o.d0),
            fmt_num(o.nu),
            fmt_num(o.d_total),
            fmt_num(o.snr_db)
        );
    }
    write_common(rc)?;
    write_atomic(&rc.out.join("opta.csv"), &s)?;
    Ok(s)
}

pub fn run_linear(rc: &RunConfig) -> Result<String> {
    let p = power(rc)?;
    let m = match rc.system.mode {
        Mode::OneToOne => {
            let ls = linear_scheme(&rc.system, p, p, &rc.grids)?;
            ls.mapping.write_csv(&rc.out.join("mapping.csv"))?;
            ls.numeric
        }
        Mode::TwoToOne => {
            let (mapping, m) = projection_baseline_2to1(&rc.system, p, &rc.grids)?;
            mapping.write_csv(&rc.out.join("mapping.csv"))?;
            m
        }
    };
    write_common(rc)?;
    m.write(&rc.out.join("metrics.txt"))?;
    Ok(m.to_text())
}

/// A finished design in either mode.
pub enum Designed {
    Scalar(AnnealOutcome),
    Vector(AnnealOutcome2to1),
}

impl Designed {
    pub fn metrics(&self) -> Metrics {
        match self {
            Designed::Scalar(o) => o.metrics,
            Designed::Vector(o) => o.metrics,
        }
    }

    pub fn baseline(&self) -> Metrics {
        match self {
            Designed::Scalar(o) => o.baseline,
            Designed::Vector(o) => o.baseline,
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        match self {
            Designed::Scalar(o) => {
                o.mapping.write_csv(&dir.join("mapping.csv"))?;
                o.metrics.write(&dir.join("metrics.txt"))?;
                write_atomic(&dir.join("trace.csv"), &o.trace.to_csv())
            }
            Designed::Vector(o) => {
                o.mapping.write_csv(&dir.join("mapping.csv"))?;
                o.metrics.write(&dir.join("metrics.txt"))?;
                write_atomic(&dir.join("trace.csv"), &o.trace.to_csv())?;
                write_atomic(&dir.join("g1_structure.csv"), &export_structure(&o.mapping, 0))?;
                write_atomic(&dir.join("g2_structure.csv"), &export_structure(&o.mapping, 1))
            }
        }
    }
}

fn design(rc: &RunConfig, cfg: &SystemConfig, warm: Option<&Designed>) -> Result<Designed> {
    Ok(match cfg.mode {
        Mode::OneToOne => {
            let seeded: Vec<ScalarMapping> = match warm {
                Some(Designed::Scalar(o)) => vec![o.mapping.clone()],
                _ => vec![],
            };
            Designed::Scalar(anneal_with(cfg, &rc.schedule, &rc.grids, rc.seed, &seeded)?)
        }
        Mode::TwoToOne => {
            let seeded: Vec<VectorMapping> = match warm {
                Some(Designed::Vector(o)) => vec![o.mapping.clone()],
                _ => vec![],
            };
            Designed::Vector(anneal_2to1_with(cfg, &rc.schedule, &rc.grids, rc.seed, &seeded)?)
        }
    })
}

pub fn run_optimize(rc: &RunConfig) -> Result<String> {
    let d = design(rc, &rc.system, None)?;
    write_common(rc)?;
    d.write(&rc.out)?;
    let m = d.metrics();
    Ok(format!("{}baseline_snr_db = {}\n", m.to_text(), fmt_num(d.baseline().snr_db)))
}

pub fn run_evaluate(rc: &RunConfig, mapping: &Path) -> Result<String> {
    let m = match rc.system.mode {
        Mode::OneToOne => {
            let grid = rc.grids.source_grid(rc.system.source_variance)?;
            evaluate_mmse(&ScalarMapping::read_csv(mapping, grid)?, &rc.system, &rc.grids)?.0
        }
        Mode::TwoToOne => {
            let grid = source_grid_2to1(&rc.system, &rc.grids)?;
            evaluate_mmse_2to1(&VectorMapping::read_csv(mapping, grid)?, &rc.system, &rc.grids)?.0
        }
    };
    write_common(rc)?;
    m.write(&rc.out.join("metrics.txt"))?;
    Ok(m.to_text())
}

/// One row of the sweep table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub epsilon: f64,
    pub snr_opta: f64,
    pub snr_linear: f64,
    pub optimized: Metrics,
    pub linear: Metrics,
}

pub const SWEEP_HEADER: &str = "epsilon,snr_opta,snr_linear,snr_optimized,d0,d1,d2,p1,p2";

impl SweepRow {
    pub fn to_csv_line(&self) -> String {
        let m = &self.optimized;
        [self.epsilon, self.snr_opta, self.snr_linear, m.snr_db, m.d0, m.d1, m.d2, m.p1, m.p2]
            .map(fmt_num)
            .join(",")
    }
}

/// Each ε is designed with the previous point's mapping as an extra warm start.
pub fn sweep(rc: &RunConfig) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let mut prev: Option<Designed> = None;
    for (i, &e) in rc.sweep_epsilons.iter().enumerate() {
        let cfg = rc.system.clone().with_epsilon(e);
        let d = design(rc, &cfg, prev.as_ref())?;
        let m = d.metrics();
        let opta = opta_at(&cfg, m.p1, m.p2)?;
        let dir = rc.out.join(format!("point_{i:02}"));
        d.write(&dir)?;
        d.baseline().write(&dir.join("baseline_metrics.txt"))?;
        rows.push(SweepRow { epsilon: e, snr_opta: opta.snr_db, snr_linear: d.baseline().snr_db, optimized: m, linear: d.baseline() });
        prev = Some(d);
    }
    Ok(rows)
}

pub fn run_sweep(rc: &RunConfig) -> Result<String> {
    power(rc)?;
    let rows = sweep(rc)?;
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    write_common(rc)?;
    write_atomic(&rc.out.join("sweep.csv"), &s)?;
    Ok(s)
}
