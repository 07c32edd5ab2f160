//! The multi-stage loop: pick ranks, compress or recompress the scheduled
//! layers, fine-tune, repeat until a stopping rule fires.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::decomp::{
    cpd3_decompose, cpd3_recompress, svd_decompose, svd_recompress, tucker2_decompose, tucker2_recompress,
    AlsOptions, MultilinearRank2, Ranks, Scheme,
};
use crate::error::{Error, Result};
use crate::modelgraph::{count_flops, count_params, GroupFactors, LayerKind, ModelGraph, Unit};
use crate::rank_select::{select_ranks, LayerState, RankMode, RankProposal, RankStrategy, SkipReason};
use crate::tensor::reshape_kernel;
use crate::trainer::{evaluate, fine_tune, Dataset, TrainConfig, TrainHistory};

/// What to do with fully connected layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FcScheme {
    #[default]
    Svd,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuscoConfig {
    pub strategy: RankStrategy,
    /// `tucker2` or `cpd3`.
    #[serde(default = "default_conv_scheme")]
    pub conv_scheme: Scheme,
    #[serde(default)]
    pub fc_scheme: FcScheme,
    /// Maximum number of iterations.
    pub steps: usize,
    /// Stop once `params(original) / params(current)` reaches this.
    #[serde(default)]
    pub target_global_ratio: Option<f64>,
    /// Share of the eligible layers compressed per iteration, round-robin.
    #[serde(default = "one")]
    pub layer_fraction: f64,
    #[serde(default)]
    pub finetune: TrainConfig,
    /// Stop after this many consecutive iterations without a rank change.
    #[serde(default = "two")]
    pub rank_stabilization_window: usize,
    #[serde(default)]
    pub als: AlsOptions,
}

fn default_conv_scheme() -> Scheme {
    Scheme::Tucker2
}

fn one() -> f64 {
    1.0
}

fn two() -> usize {
    2
}

impl MuscoConfig {
    pub fn new(strategy: RankStrategy, steps: usize) -> Self {
        Self {
            strategy,
            conv_scheme: Scheme::Tucker2,
            fc_scheme: FcScheme::Svd,
            steps,
            target_global_ratio: None,
            layer_fraction: 1.0,
            finetune: TrainConfig::default(),
            rank_stabilization_window: 2,
            als: AlsOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        self.finetune.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.layer_fraction > 0.0 && self.layer_fraction <= 1.0) {
            return Err(Error::Config(format!("layer_fraction {} is not in (0, 1]", self.layer_fraction)));
        }
        if self.rank_stabilization_window == 0 {
            return Err(Error::Config("rank_stabilization_window must be at least 1".into()));
        }
        if self.conv_scheme == Scheme::Svd {
            return Err(Error::Config("conv layers take tucker2 or cpd3".into()));
        }
        if let Some(t) = self.target_global_ratio {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Config(format!("target_global_ratio {t}")));
            }
        }
        Ok(())
    }

    /// Run label such as `MUSCO(vbmf, 0.7, 2)` or `MUSCO(nx, 3.16, 2)`.
    pub fn run_name(&self) -> String {
        let (mode, param) = match self.strategy.mode {
            RankMode::Bayesian { weakening_factor } => ("vbmf", weakening_factor),
            RankMode::ConstantRate { alpha, .. } => ("nx", alpha),
        };
        format!("MUSCO({mode}, {param}, {})", self.steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    RatioReached,
    MaxSteps,
    RanksStabilized,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::RatioReached => "ratio_reached",
            StopReason::MaxSteps => "max_steps",
            StopReason::RanksStabilized => "ranks_stabilized",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum LayerAction {
    Decomposed,
    Recompressed,
    Unchanged,
    Skipped { reason: SkipReason },
}

/// One scheduled layer within one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    #[serde(flatten)]
    pub action: LayerAction,
    pub ranks_before: Option<Ranks>,
    pub ranks_after: Option<Ranks>,
    pub params_before: usize,
    pub params_after: usize,
    pub macs_before: u64,
    pub macs_after: u64,
}

impl LayerRecord {
    pub fn changed(&self) -> bool {
        matches!(self.action, LayerAction::Decomposed | LayerAction::Recompressed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub index: usize,
    pub layers: Vec<LayerRecord>,
    pub params_before: usize,
    pub params_after: usize,
    pub macs_before: u64,
    pub macs_after: u64,
    /// Eval accuracy right after compression.
    pub accuracy_compressed: Option<f64>,
    /// Eval accuracy after fine-tuning.
    pub accuracy_finetuned: Option<f64>,
    pub finetune: Option<TrainHistory>,
}

impl IterationRecord {
    pub fn changed(&self) -> bool {
        self.layers.iter().any(LayerRecord::changed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub iteration: usize,
    pub ranks: Ranks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub run_name: String,
    pub config: MuscoConfig,
    pub original_params: usize,
    pub original_macs: u64,
    pub final_params: usize,
    pub final_macs: u64,
    pub param_ratio: f64,
    pub flop_ratio: f64,
    /// Original over current weight count, summed over the layers that were
    /// factorized.
    pub compressed_kernel_ratio: Option<f64>,
    pub baseline_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub iterations: Vec<IterationRecord>,
    /// Ranks of every group after each iteration, from its creation on.
    pub rank_history: BTreeMap<String, Vec<RankEntry>>,
    pub stop_reason: Option<StopReason>,
}

impl CompressionReport {
    fn new(model: &ModelGraph, cfg: &MuscoConfig, baseline_accuracy: Option<f64>) -> Result<Self> {
        let params = count_params(model).total();
        let macs = count_flops(model, model.input_shape())?.total;
        Ok(Self {
            run_name: cfg.run_name(),
            config: cfg.clone(),
            original_params: params,
            original_macs: macs,
            final_params: params,
            final_macs: macs,
            param_ratio: 1.0,
            flop_ratio: 1.0,
            compressed_kernel_ratio: None,
            baseline_accuracy,
            final_accuracy: baseline_accuracy,
            iterations: Vec::new(),
            rank_history: BTreeMap::new(),
            stop_reason: None,
        })
    }

    fn refresh(&mut self, original: &ModelGraph, model: &ModelGraph) -> Result<()> {
        self.final_params = count_params(model).total();
        self.final_macs = count_flops(model, model.input_shape())?.total;
        self.param_ratio = ratio(self.original_params as f64, self.final_params as f64);
        self.flop_ratio = ratio(self.original_macs as f64, self.final_macs as f64);
        self.compressed_kernel_ratio = compressed_kernel_ratio(original, model);
        Ok(())
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a / b
    }
}

/// Original over current weights, over the layers `model` has factorized.
pub fn compressed_kernel_ratio(original: &ModelGraph, model: &ModelGraph) -> Option<f64> {
    if model.groups().is_empty() {
        return None;
    }
    let before = count_params(original);
    let after = count_params(model);
    let (mut a, mut b) = (0usize, 0usize);
    for g in model.groups() {
        a += before.layer_weights(&g.name, original);
        b += after.layer_weights(&g.name, model);
    }
    Some(ratio(a as f64, b as f64))
}

/// Units the driver may touch, in model order: dense conv layers, fc layers
/// unless skipped, and existing groups.
pub fn eligible_units(model: &ModelGraph, cfg: &MuscoConfig) -> Vec<String> {
    model
        .units()
        .into_iter()
        .filter(|u| match u {
            Unit::Group { .. } => true,
            Unit::Dense { index, .. } => match &model.layers()[*index].kind {
                LayerKind::Conv2d(c) => !c.is_depthwise(),
                LayerKind::Fc(_) => cfg.fc_scheme == FcScheme::Svd,
                _ => false,
            },
        })
        .map(|u| u.name().to_string())
        .collect()
}

/// The units scheduled at 0-based iteration `k`: `ceil(fraction·n)` of them,
/// continuing round-robin where the previous iteration stopped.
pub fn schedule(eligible: &[String], fraction: f64, k: usize) -> Vec<String> {
    let n = eligible.len();
    if n == 0 {
        return Vec::new();
    }
    let per = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    if per == n {
        return eligible.to_vec();
    }
    let mut picked: Vec<usize> = (0..per).map(|j| (k * per + j) % n).collect();
    picked.sort_unstable();
    picked.into_iter().map(|i| eligible[i].clone()).collect()
}

fn unit_cost(model: &ModelGraph, name: &str) -> Result<(usize, u64)> {
    let p = count_params(model).layer_weights(name, model);
    let f = count_flops(model, model.input_shape())?.layer_macs(name, model);
    Ok((p, f))
}

fn tucker_rank(r: Ranks) -> Result<MultilinearRank2> {
    match r {
        Ranks::Tucker2 { r_out, r_in } => Ok(MultilinearRank2::new(r_out, r_in)),
        other => Err(Error::ShapeMismatch(format!("expected Tucker-2 ranks, got {other}"))),
    }
}

fn single_rank(r: Ranks) -> usize {
    match r {
        Ranks::Cpd3 { rank } | Ranks::Svd { rank } => rank,
        Ranks::Tucker2 { r_out, r_in } => r_out.min(r_in),
    }
}

/// Compresses or recompresses one unit. Returns the new model and record.
fn compress_unit(model: &ModelGraph, name: &str, cfg: &MuscoConfig) -> Result<(ModelGraph, LayerRecord)> {
    let (params_before, macs_before) = unit_cost(model, name)?;
    let mut record = LayerRecord {
        name: name.to_string(),
        action: LayerAction::Unchanged,
        ranks_before: None,
        ranks_after: None,
        params_before,
        params_after: params_before,
        macs_before,
        macs_after: macs_before,
    };
    let next = if model.group(name).is_ok() {
        let current = model.group_factors(name)?;
        let ranks = current.ranks();
        record.ranks_before = Some(ranks);
        record.ranks_after = Some(ranks);
        let state = match &current {
            GroupFactors::Tucker2(f) => LayerState::Tucker2(f),
            GroupFactors::Cpd3(f) => LayerState::Cp(f),
            GroupFactors::Svd(f) => LayerState::Svd(f),
        };
        match select_ranks(state, &cfg.strategy)? {
            RankProposal::Skip { reason } => {
                record.action = LayerAction::Skipped { reason };
                return Ok((model.clone(), record));
            }
            RankProposal::Propose { ranks: new } if new == ranks => return Ok((model.clone(), record)),
            RankProposal::Propose { ranks: new } => {
                let f = match &current {
                    GroupFactors::Tucker2(f) => GroupFactors::Tucker2(tucker2_recompress(f, tucker_rank(new)?)?),
                    GroupFactors::Cpd3(f) => GroupFactors::Cpd3(cpd3_recompress(f, single_rank(new), &cfg.als)?.factors),
                    GroupFactors::Svd(f) => GroupFactors::Svd(svd_recompress(f, single_rank(new))?),
                };
                record.action = LayerAction::Recompressed;
                record.ranks_after = Some(new);
                model.update_group_weights(name, &f)?
            }
        }
    } else {
        let layer = model.layer(name)?;
        let state = match &layer.kind {
            LayerKind::Conv2d(c) => LayerState::Conv {
                kernel: &c.weight,
                scheme: cfg.conv_scheme,
            },
            LayerKind::Fc(fc) => LayerState::Fc { weight: &fc.weight },
            other => return Err(Error::UnsupportedLayer(format!("`{name}` is a {}", other.name()))),
        };
        match select_ranks(state, &cfg.strategy)? {
            RankProposal::Skip { reason } => {
                record.action = LayerAction::Skipped { reason };
                return Ok((model.clone(), record));
            }
            RankProposal::Propose { ranks } => {
                let f = match (&layer.kind, ranks) {
                    (LayerKind::Conv2d(c), Ranks::Tucker2 { .. }) => {
                        GroupFactors::Tucker2(tucker2_decompose(&c.weight, tucker_rank(ranks)?)?)
                    }
                    (LayerKind::Conv2d(c), Ranks::Cpd3 { rank }) => {
                        GroupFactors::Cpd3(cpd3_decompose(&reshape_kernel(&c.weight), rank, &cfg.als)?.factors)
                    }
                    (LayerKind::Fc(fc), Ranks::Svd { rank }) => GroupFactors::Svd(svd_decompose(&fc.weight, rank)?),
                    (_, r) => return Err(Error::ShapeMismatch(format!("ranks {r} do not fit `{name}`"))),
                };
                record.action = LayerAction::Decomposed;
                record.ranks_after = Some(ranks);
                model.substitute(name, &f)?
            }
        }
    };
    let (params_after, macs_after) = unit_cost(&next, name)?;
    record.params_after = params_after;
    record.macs_after = macs_after;
    Ok((next, record))
}

/// Compresses the units scheduled for 0-based iteration `k`, without
/// fine-tuning.
pub fn one_iteration(model: &ModelGraph, cfg: &MuscoConfig, k: usize) -> Result<(ModelGraph, IterationRecord)> {
    cfg.validate()?;
    let params_before = count_params(model).total();
    let macs_before = count_flops(model, model.input_shape())?.total;
    let mut current = model.clone();
    let mut layers = Vec::new();
    for name in schedule(&eligible_units(model, cfg), cfg.layer_fraction, k) {
        let (next, rec) = compress_unit(&current, &name, cfg)?;
        current = next;
        layers.push(rec);
    }
    let record = IterationRecord {
        index: k + 1,
        layers,
        params_before,
        params_after: count_params(&current).total(),
        macs_before,
        macs_after: count_flops(&current, current.input_shape())?.total,
        accuracy_compressed: None,
        accuracy_finetuned: None,
        finetune: None,
    };
    Ok((current, record))
}

/// Whether to stop after the iterations recorded so far.
pub fn check_stop(report: &CompressionReport, cfg: &MuscoConfig) -> Option<StopReason> {
    if let Some(target) = cfg.target_global_ratio {
        if report.param_ratio >= target {
            return Some(StopReason::RatioReached);
        }
    }
    let w = cfg.rank_stabilization_window;
    let n = report.iterations.len();
    if n >= w && report.iterations[n - w..].iter().all(|it| !it.changed()) {
        return Some(StopReason::RanksStabilized);
    }
    if n >= cfg.steps {
        return Some(StopReason::MaxSteps);
    }
    None
}

fn accuracy(model: &ModelGraph, eval: &Dataset) -> Result<Option<f64>> {
    if eval.is_empty() {
        Ok(None)
    } else {
        Ok(Some(evaluate(model, eval)?.0))
    }
}

/// Runs compression iterations until the target ratio is met, `steps`
/// iterations are done, or ranks stop changing. Ranks of later iterations
/// are estimated from the fine-tuned weights of the previous one.
pub fn musco_run(
    model: &ModelGraph,
    train: &Dataset,
    eval: &Dataset,
    cfg: &MuscoConfig,
) -> Result<(ModelGraph, CompressionReport)> {
    cfg.validate()?;
    model.validate()?;
    let mut report = CompressionReport::new(model, cfg, accuracy(model, eval)?)?;
    if cfg.target_global_ratio.is_some_and(|t| t <= 1.0) {
        report.stop_reason = Some(StopReason::RatioReached);
        return Ok((model.clone(), report));
    }
    let mut current = model.clone();
    for k in 0.. {
        let (compressed, mut record) = one_iteration(&current, cfg, k)?;
        if record.changed() {
            record.accuracy_compressed = accuracy(&compressed, eval)?;
            current = compressed;
            if cfg.finetune.epochs > 0 {
                let tc = TrainConfig {
                    seed: cfg.finetune.seed.wrapping_add(k as u64),
                    ..cfg.finetune
                };
                let (tuned, history) = fine_tune(&current, train, eval, &tc)?;
                current = tuned;
                record.finetune = Some(history);
            }
            record.accuracy_finetuned = accuracy(&current, eval)?;
        }
        let index = record.index;
        report.iterations.push(record);
        for g in current.groups() {
            report.rank_history.entry(g.name.clone()).or_default().push(RankEntry {
                iteration: index,
                ranks: g.ranks,
            });
        }
        report.refresh(model, &current)?;
        if let Some(reason) = check_stop(&report, cfg) {
            report.stop_reason = Some(reason);
            break;
        }
    }
    report.final_accuracy = accuracy(&current, eval)?;
    Ok((current, report))
}
