//! Stream execution and metric aggregation.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::generator::SourceGenerator;
use super::scenario::{make_scenario, ScenarioSpec, ShiftScenario};
use super::{component_rng, streams, World};
use crate::diversity::{expected_diversity, multinomial_diversity, DiversityQuery};
use crate::engine::{classify, Engine, EngineConfig, GaussianMoments, Mode};
use crate::error::{check_dim, invalid, Result};

/// One CSV row; field order is the file's column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub step: usize,
    pub batch_size: usize,
    pub corruption_id: usize,
    pub severity: u8,
    pub mode: String,
    pub error_rate: f64,
    pub cum_error: f64,
    pub mean_alpha: f64,
    pub mean_estimation_error: f64,
    pub realized_diversity: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Score the target-statistics estimate against the analytic truth on
    /// every batch (costs a covariance propagation per batch).
    pub track_estimation: bool,
    /// Keep per-layer alpha and estimation traces.
    pub keep_traces: bool,
}

#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub records: Vec<BatchRecord>,
    /// Per batch, per layer.
    pub alpha_trace: Vec<Vec<f64>>,
    pub estimation_trace: Vec<Vec<f64>>,
    pub momentum: f64,
    pub samples: usize,
    pub errors: usize,
    pub wall_clock: Duration,
}

impl RunMetrics {
    pub fn error_rate(&self) -> f64 {
        self.errors as f64 / self.samples as f64
    }

    /// Mean of each layer's estimation error over the stream.
    pub fn mean_layer_estimation_error(&self) -> Vec<f64> {
        let Some(first) = self.estimation_trace.first() else {
            return Vec::new();
        };
        let n = self.estimation_trace.len() as f64;
        (0..first.len())
            .map(|l| self.estimation_trace.iter().map(|e| e[l]).sum::<f64>() / n)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        for r in &self.records {
            writer.serialize(r)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Reads a file written by [`RunMetrics::save_csv`].
pub fn load_records(path: &Path) -> Result<Vec<BatchRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Streams every batch of `scenario` once, in order, through an engine
/// configured by `config`.
pub fn run_stream(
    world: &World,
    scenario: &ShiftScenario,
    config: &EngineConfig,
    batch_size: usize,
    seed: u64,
    options: RunOptions,
) -> Result<RunMetrics> {
    let started = Instant::now();
    let generator = &world.generator;
    check_dim(world.network.input_width(), generator.width())?;
    check_dim(world.network.output_width(), world.anchors.ncols())?;
    if batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let mut engine = Engine::new(
        world.network.clone(),
        config.clone(),
        batch_size as u64,
        generator.classes() as u64,
    )?;
    let mode = config.mode.to_string();
    let clean = options.track_estimation.then(|| generator.population_moments());
    let mut references: HashMap<(usize, u8), GaussianMoments> = HashMap::new();
    let mut rng = component_rng(seed, streams::DATA);

    let total = scenario.total_batches();
    let mut metrics = RunMetrics {
        records: Vec::with_capacity(total),
        alpha_trace: Vec::new(),
        estimation_trace: Vec::new(),
        momentum: engine.momentum(),
        samples: 0,
        errors: 0,
        wall_clock: Duration::ZERO,
    };
    for (step, (corruption_id, severity)) in scenario.batches().enumerate() {
        let corruption = world.bank.corruption(corruption_id, severity)?;
        let (clean_x, labels) = generator.sample_batch(&mut rng, batch_size)?;
        let x = corruption.apply(&clean_x)?;
        let reference = clean.as_ref().map(|c| {
            &*references
                .entry((corruption_id, severity))
                .or_insert_with(|| corruption.moments(c))
        });
        let result = engine.process_batch_with_reference(&x, reference)?;
        let predicted = classify(&result.output, &world.anchors)?;
        let wrong = predicted.iter().zip(&labels).filter(|(p, y)| p != y).count();
        metrics.samples += batch_size;
        metrics.errors += wrong;

        let tracked: Vec<f64> = result.estimation_error.iter().copied().filter(|e| e.is_finite()).collect();
        let mean_estimation_error = if tracked.is_empty() {
            f64::NAN
        } else {
            tracked.iter().sum::<f64>() / tracked.len() as f64
        };
        metrics.records.push(BatchRecord {
            step,
            batch_size,
            corruption_id,
            severity,
            mode: mode.clone(),
            error_rate: wrong as f64 / batch_size as f64,
            cum_error: metrics.error_rate(),
            mean_alpha: result.alphas.iter().sum::<f64>() / result.alphas.len() as f64,
            mean_estimation_error,
            realized_diversity: labels.iter().collect::<BTreeSet<_>>().len(),
        });
        if options.keep_traces {
            metrics.alpha_trace.push(result.alphas);
            metrics.estimation_trace.push(result.estimation_error);
        }
    }
    metrics.wall_clock = started.elapsed();
    Ok(metrics)
}

/// Mode x batch-size error matrix, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub modes: Vec<String>,
    pub batch_sizes: Vec<usize>,
    /// `cells[mode][batch]`: mean over seeds of the stream error rate.
    pub cells: Vec<Vec<f64>>,
    /// `per_seed[mode][batch][seed]`.
    pub per_seed: Vec<Vec<Vec<f64>>>,
}

impl ComparisonTable {
    pub fn cell(&self, mode: &str, batch_size: usize) -> Option<f64> {
        let m = self.modes.iter().position(|x| x == mode)?;
        let b = self.batch_sizes.iter().position(|&x| x == batch_size)?;
        Some(self.cells[m][b])
    }

    pub fn row_average(&self, mode_index: usize) -> f64 {
        let row = &self.cells[mode_index];
        row.iter().sum::<f64>() / row.len() as f64
    }

    /// Plain-text table with error rates in percent and an `Avg.` column.
    pub fn render(&self) -> String {
        render_table(&self.modes, &self.batch_sizes, &self.cells)
    }
}

pub(crate) fn render_table(modes: &[String], batch_sizes: &[usize], cells: &[Vec<f64>]) -> String {
    let label_width = modes.iter().map(String::len).max().unwrap_or(0).max("mode".len());
    let mut out = format!("{:<label_width$}", "mode");
    for b in batch_sizes {
        out.push_str(&format!(" {:>8}", b));
    }
    out.push_str(&format!(" {:>8}\n", "Avg."));
    for (mode, row) in modes.iter().zip(cells) {
        out.push_str(&format!("{mode:<label_width$}"));
        for v in row {
            out.push_str(&format!(" {:>8.2}", 100.0 * v));
        }
        let avg = row.iter().sum::<f64>() / row.len() as f64;
        out.push_str(&format!(" {:>8.2}\n", 100.0 * avg));
    }
    out
}

/// Runs every (mode, batch size, seed) combination. `worlds[s]` and
/// `seeds[s]` belong together; the scenario is laid out per batch size from
/// the seed's scenario stream.
pub fn compare_modes(
    worlds: &[World],
    seeds: &[u64],
    spec: &ScenarioSpec,
    base: &EngineConfig,
    modes: &[Mode],
    batch_sizes: &[usize],
) -> Result<ComparisonTable> {
    if modes.is_empty() || batch_sizes.is_empty() || seeds.is_empty() {
        return Err(invalid("comparison needs at least one mode, batch size and seed"));
    }
    check_dim(seeds.len(), worlds.len())?;
    let mut per_seed = vec![vec![Vec::with_capacity(seeds.len()); batch_sizes.len()]; modes.len()];
    for (world, &seed) in worlds.iter().zip(seeds) {
        for (b, &batch_size) in batch_sizes.iter().enumerate() {
            let scenario = make_scenario(
                spec,
                world.bank.len(),
                batch_size,
                &mut component_rng(seed, streams::SCENARIO),
            )?;
            for (m, &mode) in modes.iter().enumerate() {
                let config = EngineConfig {
                    mode,
                    ..base.clone()
                };
                let run = run_stream(world, &scenario, &config, batch_size, seed, RunOptions::default())?;
                per_seed[m][b].push(run.error_rate());
            }
        }
    }
    let cells = per_seed
        .iter()
        .map(|row| row.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect())
        .collect();
    Ok(ComparisonTable {
        modes: modes.iter().map(Mode::to_string).collect(),
        batch_sizes: batch_sizes.to_vec(),
        cells,
        per_seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityTrace {
    /// Distinct classes in each batch.
    pub realized: Vec<usize>,
    pub mean: f64,
    /// `K (1 - (1 - 1/K)^N)`: the expectation under i.i.d. uniform labels.
    pub multinomial: f64,
    /// Expectation under uniformly random class-count compositions.
    pub composition: f64,
}

/// Realized per-batch class diversity of `batches` label draws.
pub fn diversity_trace(generator: &SourceGenerator, batch_size: usize, batches: usize, seed: u64) -> Result<DiversityTrace> {
    if batch_size == 0 || batches == 0 {
        return Err(invalid("batch size and batch count must be positive"));
    }
    let mut rng = component_rng(seed, streams::DATA);
    let mut seen = vec![false; generator.classes()];
    let realized: Vec<usize> = (0..batches)
        .map(|_| {
            seen.fill(false);
            for y in generator.sample_labels(&mut rng, batch_size)? {
                seen[y] = true;
            }
            Ok(seen.iter().filter(|&&s| s).count())
        })
        .collect::<Result<_>>()?;
    let k = generator.classes() as u64;
    let n = batch_size as u64;
    Ok(DiversityTrace {
        mean: realized.iter().sum::<usize>() as f64 / batches as f64,
        realized,
        multinomial: multinomial_diversity(k, n),
        composition: expected_diversity(DiversityQuery::new(k, n)?),
    })
}
