//! Synthetic domain-shift simulator.
//!
//! A [`World`] bundles a labelled Gaussian-mixture source, a randomly
//! initialized normalization network calibrated on that source, nearest-mean
//! class anchors and a bank of input corruptions. Everything is derived from
//! one seed, split into independent ChaCha streams per component.

pub mod generator;
pub mod runner;
pub mod scenario;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::{LayerModel, Network};
use crate::error::{invalid, Result};
use crate::stats::{ChannelStats, DEFAULT_NORM_EPS};

pub use generator::{Sampler, SourceGenerator};
pub use runner::{
    compare_modes, diversity_trace, run_stream, BatchRecord, ComparisonTable, DiversityTrace, RunMetrics, RunOptions,
};
pub use scenario::{make_scenario, Corruption, CorruptionBank, Ordering, ScenarioSpec, Segment, ShiftScenario};

/// RNG stream ids, one per consumer of randomness.
pub mod streams {
    pub const GENERATOR: u64 = 1;
    pub const NETWORK: u64 = 2;
    pub const CORRUPTIONS: u64 = 3;
    pub const CALIBRATION: u64 = 4;
    pub const SCENARIO: u64 = 5;
    pub const DATA: u64 = 6;
}

/// An independent RNG for one component of a seeded run.
pub fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of the `index`-th replicate of a run seeded with `seed`.
pub fn replicate_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer: nearby inputs give unrelated outputs.
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub classes: usize,
    pub width: usize,
    pub depth: usize,
    /// Distance between the two closest class means, in class std units.
    pub separation: f64,
    pub class_variance: f64,
    pub corruptions: usize,
    /// Offset magnitude at severity 5, in class std units.
    pub max_offset: f64,
    /// Relative per-channel gain change at severity 5.
    pub max_scale: f64,
    /// Apply a positive-part nonlinearity after each layer.
    pub rectify: bool,
    pub calibration_samples: usize,
    pub norm_eps: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            width: 32,
            depth: 4,
            separation: 3.0,
            class_variance: 1.0,
            corruptions: 15,
            max_offset: 0.5,
            max_scale: 0.6,
            rectify: false,
            calibration_samples: 50_000,
            norm_eps: DEFAULT_NORM_EPS,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.width == 0 || self.depth == 0 || self.corruptions == 0 {
            return Err(invalid("classes, width, depth and corruptions must be positive"));
        }
        if !(self.separation >= 0.0) || !(self.class_variance > 0.0) {
            return Err(invalid("separation must be nonnegative and class_variance positive"));
        }
        if !(self.max_offset >= 0.0) || !(0.0..1.0).contains(&self.max_scale) {
            return Err(invalid("max_offset must be nonnegative and max_scale in [0,1)"));
        }
        if self.calibration_samples < 2 {
            return Err(invalid("calibration_samples must be at least 2"));
        }
        if !(self.norm_eps >= 0.0) {
            return Err(invalid("norm_eps must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub generator: SourceGenerator,
    pub network: Network,
    /// `K x F_L` class anchors for nearest-mean classification.
    pub anchors: DMatrix<f64>,
    pub bank: CorruptionBank,
}

impl World {
    pub fn build(spec: &WorldSpec, sampler: Sampler, seed: u64) -> Result<Self> {
        spec.validate()?;
        let generator = SourceGenerator::random(
            &mut component_rng(seed, streams::GENERATOR),
            spec.classes,
            spec.width,
            spec.separation,
            spec.class_variance,
            sampler,
        )?;

        let mut rng = component_rng(seed, streams::NETWORK);
        let layers = (0..spec.depth)
            .map(|_| {
                let gaussian = DMatrix::from_fn(spec.width, spec.width, |_, _| rng.sample::<f64, _>(StandardNormal));
                LayerModel::new(
                    gaussian.qr().q(),
                    vec![1.0; spec.width],
                    vec![0.0; spec.width],
                    ChannelStats::standard(spec.width),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut network = Network::new(layers, spec.rectify, spec.norm_eps)?;

        let calibration = generator.clone().with_sampler(Sampler::IidUniform)?;
        let (sample, _) =
            calibration.sample_batch(&mut component_rng(seed, streams::CALIBRATION), spec.calibration_samples)?;
        // Stand-in for training: each layer's affine parameters undo its own
        // source standardization, so on source data the stack is an isometry
        // and nearest-anchor classification is the Bayes rule. Layer l's
        // statistics depend only on layers before it, hence the sweep.
        for l in 0..spec.depth {
            network.calibrate(&sample)?;
            let layers = network
                .layers()
                .iter()
                .enumerate()
                .map(|(i, layer)| if i == l { restore_source(layer, spec.norm_eps) } else { Ok(layer.clone()) })
                .collect::<Result<Vec<_>>>()?;
            network = Network::new(layers, spec.rectify, spec.norm_eps)?;
        }
        let anchors = network.anchors(generator.class_means())?;

        let bank = CorruptionBank::random(
            &mut component_rng(seed, streams::CORRUPTIONS),
            spec.corruptions,
            spec.width,
            spec.max_offset * spec.class_variance.sqrt(),
            spec.max_scale,
        )?;
        Ok(Self {
            generator,
            network,
            anchors,
            bank,
        })
    }
}

fn restore_source(layer: &LayerModel, eps: f64) -> Result<LayerModel> {
    let source = layer.source();
    LayerModel::new(
        layer.transform().clone(),
        source.variance().iter().map(|v| (v + eps).sqrt()).collect(),
        source.mean().to_vec(),
        source.clone(),
    )
}
