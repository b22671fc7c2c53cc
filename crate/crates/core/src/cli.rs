//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diversity::{expected_diversity, DiversityQuery};
use crate::error::Error;
use crate::harness::runner::{load_records, render_table};
use crate::harness::{component_rng, make_scenario, run_stream, streams, RunOptions, World};
use crate::momentum::{effective_batch_count, effective_pool, select_momentum, MomentumConfig};
use crate::stats::save_stats;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "tema", version, about = "Test-time normalization statistics: analysis and simulation")]
pub struct Cli {
    /// Overrides the configured top-level seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for `simulate`, input directory for `report`.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the default configuration and exit.
    #[arg(long)]
    pub print_defaults: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Expected number of distinct classes in a batch.
    Diversity {
        #[arg(long)]
        k: Option<u64>,
        /// A size, a comma list (`2,16,128`) or an inclusive range (`1..200`).
        #[arg(long)]
        n: Option<String>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Grid-search the moving-average momentum for a target batch size.
    SelectMomentum {
        #[arg(long, default_value_t = 128)]
        ns: u64,
        #[arg(long)]
        nt: u64,
        #[arg(long, default_value_t = 10)]
        k: u64,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Run the configured simulation and write per-run CSVs plus a manifest.
    Simulate,
    /// Summarize a simulation directory as a mode x batch-size table.
    Report {
        /// Defaults to `--out-dir`.
        dir: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// One stream in a simulation directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub mode: String,
    pub batch_size: usize,
    pub replicate: u64,
    pub seed: u64,
    pub momentum: f64,
    pub file: String,
    pub samples: usize,
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub replicate_seeds: Vec<u64>,
    pub config: RunConfig,
    pub runs: Vec<RunEntry>,
}

pub fn run<W: Write>(cli: Cli, out: &mut W) -> CliResult<()> {
    if cli.print_defaults {
        let text = RunConfig::default().to_toml()?;
        return write_out(out, &text);
    }
    let Some(command) = cli.command.as_ref() else {
        return Err(Failure::Usage("no subcommand given; see --help".into()));
    };
    let config = load_config(&cli)?;
    match command {
        Command::Diversity { k, n, csv } => cmd_diversity(&config, *k, n.as_deref(), csv.as_deref(), out),
        Command::SelectMomentum {
            ns,
            nt,
            k,
            lambda,
            epsilon,
            grid,
        } => {
            let mut search = config.engine.momentum_search.clone();
            if let Some(l) = lambda {
                search.lambda = *l;
            }
            if let Some(e) = epsilon {
                search.epsilon = *e;
            }
            if let Some(g) = grid {
                search.grid = g.clone();
            }
            cmd_select_momentum(*ns, *nt, *k, &search, out)
        }
        Command::Simulate => {
            let manifest = cmd_simulate(&config)?;
            write_out(out, &summary_table(&manifest.runs))
        }
        Command::Report { dir } => {
            let dir = dir.clone().unwrap_or_else(|| config.out_dir.clone());
            let text = cmd_report(&dir)?;
            write_out(out, &text)
        }
    }
}

fn write_out<W: Write>(out: &mut W, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Failure::Runtime(format!("cannot write output: {e}")))
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        config.out_dir = dir.clone();
    }
    Ok(config)
}

/// Parses `128`, `2,16,128` or `1..200` (inclusive).
pub fn parse_sizes(spec: &str) -> CliResult<Vec<u64>> {
    let bad = || Failure::Usage(format!("cannot parse batch sizes `{spec}`"));
    if let Some((a, b)) = spec.split_once("..") {
        let lo: u64 = a.trim().parse().map_err(|_| bad())?;
        let hi: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

pub fn cmd_diversity<W: Write>(
    config: &RunConfig,
    k: Option<u64>,
    n: Option<&str>,
    csv_path: Option<&Path>,
    out: &mut W,
) -> CliResult<()> {
    let classes = k.unwrap_or(config.diversity.classes);
    let sizes = match n {
        Some(spec) => parse_sizes(spec)?,
        None => config.diversity.batch_sizes.clone(),
    };
    let values = sizes
        .iter()
        .map(|&n| Ok((n, expected_diversity(DiversityQuery::new(classes, n)?))))
        .collect::<crate::Result<Vec<_>>>()?;
    let text = if let [(_, v)] = values[..] {
        format!("{v:.4}\n")
    } else {
        let mut t = String::from("N\tE(M|N)\n");
        for (n, v) in &values {
            t.push_str(&format!("{n}\t{v:.4}\n"));
        }
        t
    };
    if let Some(path) = csv_path {
        let mut w = csv::Writer::from_path(path).map_err(|e| Failure::Runtime(e.to_string()))?;
        let rows = std::iter::once(["classes".to_string(), "batch_size".into(), "expected_diversity".into()])
            .chain(values.iter().map(|(n, v)| [classes.to_string(), n.to_string(), v.to_string()]));
        for row in rows {
            w.write_record(&row).map_err(|e| Failure::Runtime(e.to_string()))?;
        }
        w.flush().map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    write_out(out, &text)
}

pub fn cmd_select_momentum<W: Write>(ns: u64, nt: u64, k: u64, search: &MomentumConfig, out: &mut W) -> CliResult<()> {
    let choice = select_momentum(ns, nt, k, search)?;
    let mut text = format!("m={:?}\n", choice.m_star);
    text.push_str(&format!("{:>8} {:>8} {:>8} {:>12}\n", "m", "batches", "pool", "objective"));
    for &(m, value) in &choice.objective_values {
        text.push_str(&format!(
            "{:>8} {:>8} {:>8} {:>12.6}\n",
            format!("{m:?}"),
            effective_batch_count(m, search.epsilon)?,
            effective_pool(m, nt, search.epsilon)?,
            value
        ));
    }
    write_out(out, &text)
}

fn file_stem(mode: &str) -> String {
    mode.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect::<String>()
        .trim_end_matches('_')
        .to_string()
}

/// Files and directories created so far, removed again on failure.
struct Created(Vec<PathBuf>);

impl Created {
    fn dir(&mut self, path: &Path) -> crate::Result<()> {
        if !path.exists() {
            fs::create_dir_all(path)?;
            self.0.push(path.to_path_buf());
        }
        Ok(())
    }

    fn rollback(self) {
        for path in self.0.iter().rev() {
            if path.is_dir() {
                let _ = fs::remove_dir(path);
            } else {
                let _ = fs::remove_file(path);
            }
        }
    }
}

pub fn cmd_simulate(config: &RunConfig) -> CliResult<Manifest> {
    config.validate()?;
    let mut created = Created(Vec::new());
    match simulate_into(config, &mut created) {
        Ok(m) => Ok(m),
        Err(e) => {
            created.rollback();
            Err(Failure::Runtime(e.to_string()))
        }
    }
}

fn simulate_into(config: &RunConfig, created: &mut Created) -> crate::Result<Manifest> {
    let dir = &config.out_dir;
    created.dir(dir)?;
    let seeds = config.replicate_seeds();
    let mut runs = Vec::new();
    for (replicate, &seed) in seeds.iter().enumerate() {
        let world = World::build(&config.world, config.sampler, seed)?;
        let stats_dir = dir.join("source_stats").join(format!("r{replicate}"));
        created.dir(&stats_dir)?;
        for (l, layer) in world.network.layers().iter().enumerate() {
            let path = stats_dir.join(format!("layer_{l:02}.json"));
            created.0.push(path.clone());
            save_stats(&path, layer.source())?;
        }
        for &batch_size in &config.batch_sizes {
            let scenario = make_scenario(
                &config.scenario,
                world.bank.len(),
                batch_size,
                &mut component_rng(seed, streams::SCENARIO),
            )?;
            for &mode in &config.modes {
                let engine = config.engine.for_mode(mode);
                let options = RunOptions {
                    track_estimation: config.track_estimation,
                    keep_traces: false,
                };
                let metrics = run_stream(&world, &scenario, &engine, batch_size, seed, options)?;
                let mode_name = mode.to_string();
                let file = format!("{}_n{batch_size}_r{replicate}.csv", file_stem(&mode_name));
                let path = dir.join(&file);
                created.0.push(path.clone());
                metrics.save_csv(&path)?;
                runs.push(RunEntry {
                    mode: mode_name,
                    batch_size,
                    replicate: replicate as u64,
                    seed,
                    momentum: metrics.momentum,
                    file,
                    samples: metrics.samples,
                    error_rate: metrics.error_rate(),
                });
            }
        }
    }
    let manifest = Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        seed: config.seed,
        replicate_seeds: seeds,
        config: config.clone(),
        runs,
    };
    let path = dir.join(MANIFEST_FILE);
    created.0.push(path.clone());
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Seed-averaged error table; rows and columns in first-appearance order.
fn summary_table(runs: &[RunEntry]) -> String {
    let mut modes: Vec<String> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    let mut sums: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for r in runs {
        let m = modes.iter().position(|x| *x == r.mode).unwrap_or_else(|| {
            modes.push(r.mode.clone());
            modes.len() - 1
        });
        let b = sizes.iter().position(|&x| x == r.batch_size).unwrap_or_else(|| {
            sizes.push(r.batch_size);
            sizes.len() - 1
        });
        let cell = sums.entry((m, b)).or_insert((0.0, 0));
        cell.0 += r.error_rate;
        cell.1 += 1;
    }
    let cells: Vec<Vec<f64>> = (0..modes.len())
        .map(|m| {
            (0..sizes.len())
                .map(|b| sums.get(&(m, b)).map_or(f64::NAN, |(s, c)| s / *c as f64))
                .collect()
        })
        .collect();
    render_table(&modes, &sizes, &cells)
}

/// Rebuilds the summary from the CSV files listed in the manifest.
pub fn cmd_report(dir: &Path) -> CliResult<String> {
    let runtime = |msg: String| Failure::Runtime(msg);
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| runtime(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| runtime(format!("corrupt manifest {}: {e}", manifest_path.display())))?;
    if manifest.runs.is_empty() {
        return Err(runtime(format!("{} lists no runs", manifest_path.display())));
    }
    let mut measured = Vec::with_capacity(manifest.runs.len());
    for entry in &manifest.runs {
        let path = dir.join(&entry.file);
        let records = load_records(&path).map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))?;
        let last = records
            .last()
            .ok_or_else(|| runtime(format!("{} has no rows", path.display())))?;
        let samples: usize = records.iter().map(|r| r.batch_size).sum();
        if records.iter().any(|r| r.mode != entry.mode || r.batch_size != entry.batch_size) || samples != entry.samples {
            return Err(runtime(format!("{} does not match its manifest entry", path.display())));
        }
        measured.push(RunEntry {
            error_rate: last.cum_error,
            ..entry.clone()
        });
    }
    Ok(summary_table(&measured))
}
