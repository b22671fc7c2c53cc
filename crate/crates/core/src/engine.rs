//! Per-batch adaptation over a stack of normalization layers.
//!
//! Each layer applies a fixed linear map, normalizes with whatever
//! statistics the active mode dictates, applies its affine parameters and
//! (optionally) a positive-part nonlinearity.
//!
//! In [`Mode::Full`] every batch takes two forward passes:
//!
//! 1. measure batch moments layer by layer, fold them into the moving
//!    averages, normalize with statistics mixed by the *prior* coefficients;
//! 2. compute the source/target divergence of every layer, turn it into
//!    fresh coefficients, run the prediction pass with those, and finally
//!    fold the fresh coefficients into the prior.
//!
//! The moving averages are updated exactly once per batch, during pass 1;
//! pass 2 reuses them.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_dim, invalid, Error, Result};
use crate::momentum::{select_momentum, MomentumChoice, MomentumConfig, DEFAULT_SOURCE_BATCH};
use crate::rectifier::{divergence_to_alpha, gaussian_sym_kl_with, DivergenceVector, RectifierParams, RectifierState};
use crate::stats::{affine_coefficients, batch_moments, mix_statistics, normalize_features, ChannelStats, TemaState};

/// One normalization layer with frozen source statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerModel {
    transform: DMatrix<f64>,
    scale: Vec<f64>,
    shift: Vec<f64>,
    source: ChannelStats,
}

impl LayerModel {
    pub fn new(transform: DMatrix<f64>, scale: Vec<f64>, shift: Vec<f64>, source: ChannelStats) -> Result<Self> {
        let width = transform.nrows();
        if width == 0 || transform.ncols() == 0 {
            return Err(Error::Empty("layer transform"));
        }
        check_dim(width, scale.len())?;
        check_dim(width, shift.len())?;
        check_dim(width, source.channels())?;
        Ok(Self {
            transform,
            scale,
            shift,
            source,
        })
    }

    pub fn width(&self) -> usize {
        self.transform.nrows()
    }

    pub fn input_width(&self) -> usize {
        self.transform.ncols()
    }

    pub fn transform(&self) -> &DMatrix<f64> {
        &self.transform
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn source(&self) -> &ChannelStats {
        &self.source
    }

    pub fn with_source(mut self, source: ChannelStats) -> Result<Self> {
        check_dim(self.width(), source.channels())?;
        self.source = source;
        Ok(self)
    }
}

/// A stack of layers sharing a normalization epsilon.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerModel>,
    rectify: bool,
    norm_eps: f64,
}

/// Output of [`forward_pass`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Moments of each layer's pre-normalization activations.
    pub batch_stats: Vec<ChannelStats>,
    /// Statistics each layer actually normalized with.
    pub used_stats: Vec<ChannelStats>,
    pub output: DMatrix<f64>,
}

impl Network {
    pub fn new(layers: Vec<LayerModel>, rectify: bool, norm_eps: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("network layers"));
        }
        for pair in layers.windows(2) {
            check_dim(pair[0].width(), pair[1].input_width())?;
        }
        if !(norm_eps >= 0.0) {
            return Err(invalid(format!("normalization epsilon must be nonnegative, got {norm_eps}")));
        }
        Ok(Self {
            layers,
            rectify,
            norm_eps,
        })
    }

    pub fn layers(&self) -> &[LayerModel] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].width()
    }

    pub fn rectify(&self) -> bool {
        self.rectify
    }

    pub fn norm_eps(&self) -> f64 {
        self.norm_eps
    }

    pub fn source_stats(&self) -> Vec<ChannelStats> {
        self.layers.iter().map(|l| l.source.clone()).collect()
    }

    /// Replaces every layer's source statistics with the moments measured on
    /// `sample`, normalizing each layer with its own fresh statistics before
    /// feeding the next.
    pub fn calibrate(&mut self, sample: &DMatrix<f64>) -> Result<()> {
        let trace = forward_pass(self, sample, |_, measured| Ok(measured.clone()))?;
        for (layer, stats) in self.layers.iter_mut().zip(trace.batch_stats) {
            layer.source = stats;
        }
        Ok(())
    }

    pub fn with_source_stats(mut self, stats: Vec<ChannelStats>) -> Result<Self> {
        check_dim(self.layers.len(), stats.len())?;
        let layers = std::mem::take(&mut self.layers);
        self.layers = layers
            .into_iter()
            .zip(stats)
            .map(|(l, s)| l.with_source(s))
            .collect::<Result<_>>()?;
        Ok(self)
    }

    /// Pushes `input` through the network normalized with source statistics.
    pub fn source_forward(&self, input: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(forward_pass(self, input, |l, _| Ok(self.layers[l].source.clone()))?.output)
    }

    /// Class anchors (`K x F_L`) from class means given as rows of `K x F_0`.
    pub fn anchors(&self, class_means: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.source_forward(&class_means.transpose())?.transpose())
    }
}

/// Runs `input` (`F_0 x N`) through every layer, asking `provider` for the
/// statistics to normalize layer `l` with, given that layer's measured
/// batch moments.
pub fn forward_pass<P>(network: &Network, input: &DMatrix<f64>, mut provider: P) -> Result<ForwardTrace>
where
    P: FnMut(usize, &ChannelStats) -> Result<ChannelStats>,
{
    if input.ncols() == 0 {
        return Err(Error::Empty("input batch"));
    }
    check_dim(network.input_width(), input.nrows())?;
    let depth = network.depth();
    let mut batch_stats = Vec::with_capacity(depth);
    let mut used_stats = Vec::with_capacity(depth);
    let mut h = input.clone();
    for (l, layer) in network.layers.iter().enumerate() {
        check_dim(layer.input_width(), h.nrows())?;
        let pre = &layer.transform * &h;
        let measured = batch_moments(&pre)?;
        let used = provider(l, &measured)?;
        h = normalize_features(&pre, &used, &layer.scale, &layer.shift, network.norm_eps)?;
        if network.rectify {
            h.apply(|x| *x = x.max(0.0));
        }
        batch_stats.push(measured);
        used_stats.push(used);
    }
    Ok(ForwardTrace {
        batch_stats,
        used_stats,
        output: h,
    })
}

/// Nearest anchor by Euclidean distance; ties go to the lower class index.
pub fn classify(features: &DMatrix<f64>, anchors: &DMatrix<f64>) -> Result<Vec<usize>> {
    check_dim(anchors.ncols(), features.nrows())?;
    if anchors.nrows() == 0 {
        return Err(Error::Empty("class anchors"));
    }
    Ok(features
        .column_iter()
        .map(|x| {
            let mut best = (0usize, f64::INFINITY);
            for (k, a) in anchors.row_iter().enumerate() {
                let d: f64 = a.iter().zip(x.iter()).map(|(u, v)| (u - v) * (u - v)).sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect())
}

/// Normalization mode; mirrors the usual ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Source statistics only, no adaptation.
    SourceOnly,
    /// Current batch statistics only.
    Tbn,
    /// Moving-average target statistics with the selected momentum.
    TemaOnly,
    /// Constant source/batch mixing.
    FixedAlpha(f64),
    /// Moving average plus layer-wise rectification.
    Full,
}

impl Mode {
    pub fn validate(&self) -> Result<()> {
        if let Mode::FixedAlpha(a) = self {
            if !(0.0..=1.0).contains(a) {
                return Err(invalid(format!("fixed_alpha coefficient must lie in [0,1], got {a}")));
            }
        }
        Ok(())
    }

    fn uses_tema(&self) -> bool {
        !matches!(self, Mode::SourceOnly)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::SourceOnly => write!(f, "source_only"),
            Mode::Tbn => write!(f, "tbn"),
            Mode::TemaOnly => write!(f, "tema_only"),
            Mode::FixedAlpha(a) => write!(f, "fixed_alpha({a})"),
            Mode::Full => write!(f, "full"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mode = match s.trim() {
            "source_only" => Mode::SourceOnly,
            "tbn" => Mode::Tbn,
            "tema_only" => Mode::TemaOnly,
            "full" => Mode::Full,
            other => {
                let alpha = other
                    .strip_prefix("fixed_alpha(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|a| a.trim().parse::<f64>().ok())
                    .ok_or_else(|| invalid(format!("unknown mode `{other}`")))?;
                Mode::FixedAlpha(alpha)
            }
        };
        mode.validate()?;
        Ok(mode)
    }
}

impl Serialize for Mode {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Either a fixed momentum or `"auto"` (grid search from the batch sizes).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum MomentumSetting {
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for MomentumSetting {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MomentumSetting::Auto => serializer.serialize_str("auto"),
            MomentumSetting::Fixed(m) => serializer.serialize_f64(*m),
        }
    }
}

impl<'de> Deserialize<'de> for MomentumSetting {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(m) => Ok(MomentumSetting::Fixed(m)),
            Raw::Str(s) if s == "auto" => Ok(MomentumSetting::Auto),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "momentum must be a number or \"auto\", got `{s}`"
            ))),
        }
    }
}

/// How the moving averages are seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemaInit {
    #[default]
    Source,
    FirstBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub mode: Mode,
    pub momentum: MomentumSetting,
    /// Training batch size the source statistics were accumulated with.
    pub source_batch: u64,
    pub momentum_search: MomentumConfig,
    pub rectifier: RectifierParams,
    pub init: TemaInit,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            momentum: MomentumSetting::Auto,
            source_batch: DEFAULT_SOURCE_BATCH,
            momentum_search: MomentumConfig::default(),
            rectifier: RectifierParams::default(),
            init: TemaInit::Source,
        }
    }
}

impl EngineConfig {
    pub fn with_mode(mode: Mode) -> Self {
        Self {
            mode,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mode.validate()?;
        if let MomentumSetting::Fixed(m) = self.momentum {
            crate::momentum::check_momentum(m)?;
        }
        if self.source_batch == 0 {
            return Err(invalid("source batch size must be at least 1"));
        }
        self.momentum_search.validate()?;
        self.rectifier.validate()
    }

    /// Momentum the mode runs with, plus the search table when one was run.
    ///
    /// `tbn` and `fixed_alpha` always use the current batch only.
    pub fn resolve_momentum(&self, target_batch: u64, classes: u64) -> Result<(f64, Option<MomentumChoice>)> {
        match (self.mode, self.momentum) {
            (Mode::SourceOnly | Mode::Tbn | Mode::FixedAlpha(_), _) => Ok((1.0, None)),
            (_, MomentumSetting::Fixed(m)) => Ok((m, None)),
            (_, MomentumSetting::Auto) => {
                let choice = select_momentum(self.source_batch, target_batch, classes, &self.momentum_search)?;
                Ok((choice.m_star, Some(choice)))
            }
        }
    }
}

/// Resumable engine state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub mode: Mode,
    pub momentum: f64,
    /// Empty in `source_only` mode.
    pub tema: Vec<TemaState>,
    pub rectifier: RectifierState,
    pub step: u64,
}

impl EngineState {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Mean vector and full covariance of a layer input.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    fn linear(&self, map: &DMatrix<f64>) -> GaussianMoments {
        let left = map * &self.cov;
        GaussianMoments {
            mean: map * &self.mean,
            cov: &left * map.transpose(),
        }
    }

    fn channel_stats(&self) -> ChannelStats {
        ChannelStats::new(
            self.mean.iter().copied().collect(),
            self.cov.diagonal().iter().map(|v| v.max(0.0)).collect(),
        )
        .expect("covariance diagonal is nonnegative")
    }
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    /// Coefficient each layer used for the prediction pass (1 = all source).
    pub alphas: Vec<f64>,
    pub divergences: DivergenceVector,
    pub output: DMatrix<f64>,
    /// Pass-1 moments of each layer's pre-normalization activations.
    pub batch_stats: Vec<ChannelStats>,
    /// Squared 2-Wasserstein distance per channel between the target estimate
    /// and the true per-channel moments, averaged over channels. Empty when no
    /// reference was supplied; NaN for layers whose reference is not
    /// analytically available (layers after a rectifying nonlinearity).
    pub estimation_error: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Engine {
    network: Network,
    config: EngineConfig,
    state: EngineState,
    momentum_choice: Option<MomentumChoice>,
}

impl Engine {
    /// `classes` is only consulted when the momentum is chosen automatically.
    pub fn new(network: Network, config: EngineConfig, target_batch: u64, classes: u64) -> Result<Self> {
        config.validate()?;
        let (momentum, momentum_choice) = config.resolve_momentum(target_batch, classes)?;
        let tema = if config.mode.uses_tema() {
            network
                .layers
                .iter()
                .map(|l| TemaState::new(momentum, l.source.clone()))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let rectifier = RectifierState::new(network.depth(), config.rectifier.gamma, config.rectifier.tau)?;
        let state = EngineState {
            mode: config.mode,
            momentum,
            tema,
            rectifier,
            step: 0,
        };
        Ok(Self {
            network,
            config,
            state,
            momentum_choice,
        })
    }

    /// Rebuilds an engine from a saved state.
    pub fn resume(network: Network, config: EngineConfig, state: EngineState) -> Result<Self> {
        config.validate()?;
        if state.mode != config.mode {
            return Err(invalid(format!(
                "saved state is for mode {}, config asks for {}",
                state.mode, config.mode
            )));
        }
        if state.rectifier.prior().len() != network.depth() {
            return Err(Error::DimensionMismatch {
                expected: network.depth(),
                actual: state.rectifier.prior().len(),
            });
        }
        if config.mode.uses_tema() {
            check_dim(network.depth(), state.tema.len())?;
            for (t, l) in state.tema.iter().zip(&network.layers) {
                check_dim(l.width(), t.stats().channels())?;
            }
        }
        Ok(Self {
            network,
            config,
            state,
            momentum_choice: None,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn momentum(&self) -> f64 {
        self.state.momentum
    }

    pub fn momentum_choice(&self) -> Option<&MomentumChoice> {
        self.momentum_choice.as_ref()
    }

    pub fn process_batch(&mut self, batch: &DMatrix<f64>) -> Result<BatchResult> {
        self.process_batch_with_reference(batch, None)
    }

    /// Like [`process_batch`](Self::process_batch), additionally scoring the
    /// target estimate against the true input distribution `reference`.
    pub fn process_batch_with_reference(
        &mut self,
        batch: &DMatrix<f64>,
        reference: Option<&GaussianMoments>,
    ) -> Result<BatchResult> {
        if batch.ncols() == 0 {
            return Err(Error::Empty("test batch"));
        }
        check_dim(self.network.input_width(), batch.nrows())?;
        let depth = self.network.depth();
        let mode = self.state.mode;
        let first = self.state.step == 0;
        let init = self.config.init;

        let network = &self.network;
        let state = &mut self.state;
        let prior = state.rectifier.prior().to_vec();
        let measure_alpha = |l: usize| match mode {
            Mode::SourceOnly => 1.0,
            Mode::Tbn | Mode::TemaOnly => 0.0,
            Mode::FixedAlpha(a) => a,
            Mode::Full => prior[l],
        };

        // Pass 1: measure, update the moving averages, normalize.
        let tema = &mut state.tema;
        let pass1 = forward_pass(network, batch, |l, measured| {
            let source = &network.layers[l].source;
            if mode == Mode::SourceOnly {
                return Ok(source.clone());
            }
            if first && init == TemaInit::FirstBatch {
                tema[l].seed_with(measured)?;
            } else {
                tema[l].update(measured)?;
            }
            mix_statistics(measure_alpha(l), source, tema[l].stats())
        })?;

        let target_estimates: Vec<&ChannelStats> = if mode == Mode::SourceOnly {
            network.layers.iter().map(|l| &l.source).collect()
        } else {
            state.tema.iter().map(|t| t.stats()).collect()
        };
        let rect = self.config.rectifier;
        let divergences = DivergenceVector::new(
            network
                .layers
                .iter()
                .zip(&target_estimates)
                .map(|(l, t)| gaussian_sym_kl_with(&l.source, t, rect.kl_eps, rect.reduction))
                .collect::<Result<_>>()?,
        )?;

        let estimation_error = match reference {
            Some(r) => estimation_errors(network, r, &pass1.used_stats, &target_estimates)?,
            None => Vec::new(),
        };

        let (alphas, output) = if mode == Mode::Full {
            let fresh = divergence_to_alpha(&divergences, state.rectifier.gamma())?;
            let tema = &state.tema;
            let pass2 = forward_pass(network, batch, |l, _| {
                mix_statistics(fresh[l], &network.layers[l].source, tema[l].stats())
            })?;
            state.rectifier.update_prior(&fresh)?;
            (fresh, pass2.output)
        } else {
            ((0..depth).map(measure_alpha).collect(), pass1.output)
        };
        state.step += 1;

        Ok(BatchResult {
            alphas,
            divergences,
            output,
            batch_stats: pass1.batch_stats,
            estimation_error,
        })
    }
}

/// Propagates the input distribution through the layers as normalized by
/// `used`, comparing each layer's true pre-activation moments to `estimates`.
fn estimation_errors(
    network: &Network,
    input: &GaussianMoments,
    used: &[ChannelStats],
    estimates: &[&ChannelStats],
) -> Result<Vec<f64>> {
    check_dim(network.input_width(), input.mean.len())?;
    let mut errors = Vec::with_capacity(network.depth());
    let mut current = Some(input.clone());
    for (l, layer) in network.layers.iter().enumerate() {
        let Some(moments) = current.take() else {
            errors.push(f64::NAN);
            continue;
        };
        let pre = moments.linear(&layer.transform);
        errors.push(wasserstein2_sq(estimates[l], &pre.channel_stats()));
        if !network.rectify {
            let (gain, offset) = affine_coefficients(&used[l], &layer.scale, &layer.shift, network.norm_eps);
            let gain = DVector::from_vec(gain);
            let mut cov = pre.cov;
            for (j, mut col) in cov.column_iter_mut().enumerate() {
                col.component_mul_assign(&gain);
                col *= gain[j];
            }
            current = Some(GaussianMoments {
                mean: pre.mean.component_mul(&gain) + DVector::from_vec(offset),
                cov,
            });
        }
    }
    Ok(errors)
}

/// Mean over channels of `(mu_a - mu_b)^2 + (sd_a - sd_b)^2`.
pub fn wasserstein2_sq(a: &ChannelStats, b: &ChannelStats) -> f64 {
    let n = a.channels() as f64;
    a.mean()
        .iter()
        .zip(b.mean())
        .zip(a.variance().iter().zip(b.variance()))
        .map(|((ma, mb), (va, vb))| (ma - mb).powi(2) + (va.sqrt() - vb.sqrt()).powi(2))
        .sum::<f64>()
        / n
}
