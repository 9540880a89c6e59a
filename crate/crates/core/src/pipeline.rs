//! End-to-end fusion: align, train, predict once more, patch a copy of the
//! target, and write the fused adapter with its report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::config::{FusionConfig, ObjectiveKind};
use crate::context::build_context;
use crate::error::{FuseError, Result};
use crate::harness::{Preset, World};
use crate::hypernet::{
    apply_patch, forward_unit, frobenius_norm, prepare_context, stability_bound, DeltaPrediction, HyperNetParams,
    PreparedContext,
};
use crate::store::{
    encode_container, load_adapter, parse_container, save_adapter, validate_adapter, AdapterSet, ModuleKey,
};
use crate::surrogate::{mse, Batch, ConstantObjective, DenseStack, SurrogateObjective};
use crate::topology::{build_groups, layer_maps, select_active_units, TransferUnit, Vocabulary};
use crate::trainer::{write_loss_curve, FusionState, StepRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub group: usize,
    pub module_type: String,
    pub rank: usize,
    pub layer: usize,
    pub delta_norm: f64,
    pub alpha: f64,
    pub lhs: f64,
    pub frob_identity: f64,
    pub bound: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionReport {
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
    /// The predicted `delta_b` of every exported unit, in row order.
    pub deltas: Vec<(ModuleKey, Array2<f64>)>,
}

const REPORT_HEADER: [&str; 13] = [
    "seed",
    "config_hash",
    "group",
    "module_type",
    "rank",
    "layer",
    "delta_norm",
    "alpha",
    "lhs",
    "frob_identity",
    "bound",
    "entropy",
    "within_bound",
];

impl FusionReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            w.write_record([
                self.seed.to_string(),
                self.config_hash.clone(),
                r.group.to_string(),
                r.module_type.clone(),
                r.rank.to_string(),
                r.layer.to_string(),
                r.delta_norm.to_string(),
                r.alpha.to_string(),
                r.lhs.to_string(),
                r.frob_identity.to_string(),
                r.bound.to_string(),
                r.entropy.to_string(),
                (r.lhs <= r.bound * (1.0 + 1e-9)).to_string(),
            ])?;
        }
        w.flush().map_err(|e| FuseError::io(path, e))?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FusionOutcome {
    pub fused: AdapterSet,
    pub report: FusionReport,
    pub params: HyperNetParams,
    pub curve: Vec<StepRecord>,
}

/// Aligned units, a freshly initialized network and the prepared contexts.
pub struct Prepared {
    pub units: Vec<TransferUnit>,
    pub params: HyperNetParams,
    pub contexts: Vec<PreparedContext>,
}

pub fn prepare(target: &AdapterSet, sources: &[AdapterSet], cfg: &FusionConfig) -> Result<Prepared> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(FuseError::Config("at least one source adapter is required".into()));
    }
    let vocab = Vocabulary::with_aliases(cfg.aliases.clone());
    let groups = build_groups(target, sources, &vocab);
    if groups.is_empty() {
        return Err(FuseError::NothingFuseable);
    }
    let maps = layer_maps(target, sources)?;
    let units = select_active_units(&groups, target, sources, &maps, &vocab)?;
    if units.is_empty() {
        return Err(FuseError::NothingFuseable);
    }
    let max_rank = groups.iter().map(|g| g.rank).max().unwrap_or(1);
    let params = HyperNetParams::new(&cfg.network(sources.len(), groups.len(), max_rank))?;
    let contexts = units
        .iter()
        .map(|u| build_context(u, cfg.context.block_rows, cfg.context.descriptor_len).and_then(|c| prepare_context(&c, &params)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        units,
        params,
        contexts,
    })
}

/// Runs the whole fusion in memory. `data` is the replay dataset fed to
/// `objective`; it may be empty only when `train.epochs == 0`.
pub fn fuse_sets(
    target: &AdapterSet,
    sources: &[AdapterSet],
    cfg: &FusionConfig,
    objective: &dyn SurrogateObjective,
    data: &[Batch],
) -> Result<FusionOutcome> {
    let Prepared {
        units,
        params,
        contexts,
    } = prepare(target, sources, cfg)?;
    let mut state = FusionState::new(target.clone(), contexts, params, cfg.train.clone(), cfg.rdm())?;
    let curve = if cfg.train.epochs > 0 {
        state.fit(data, objective)?
    } else {
        Vec::new()
    };
    let predictions = state.predict()?;
    finish(target, &units, predictions, state.params, curve, cfg)
}

/// Rebuilds the fused adapter from a saved network checkpoint, without training.
pub fn fuse_from_checkpoint(
    target: &AdapterSet,
    sources: &[AdapterSet],
    cfg: &FusionConfig,
    checkpoint: &Path,
) -> Result<FusionOutcome> {
    let Prepared {
        units,
        mut params,
        contexts,
    } = prepare(target, sources, cfg)?;
    let bytes = std::fs::read(checkpoint).map_err(|e| FuseError::io(checkpoint, e))?;
    let (_, records) = parse_container(&bytes)?;
    params.load_records(&records)?;
    let predictions = contexts
        .iter()
        .map(|c| forward_unit(c, &params).map(|f| f.prediction))
        .collect::<Result<Vec<_>>>()?;
    finish(target, &units, predictions, params, Vec::new(), cfg)
}

fn finish(
    target: &AdapterSet,
    units: &[TransferUnit],
    predictions: Vec<DeltaPrediction>,
    params: HyperNetParams,
    curve: Vec<StepRecord>,
    cfg: &FusionConfig,
) -> Result<FusionOutcome> {
    let mut fused = target.clone();
    let mut rows = Vec::with_capacity(units.len());
    let mut deltas = Vec::with_capacity(units.len());
    for (unit, pred) in units.iter().zip(predictions) {
        let alpha = params.alphas[unit.group.alpha_index];
        let original = &unit.target_pair;
        let sb = stability_bound(original, &pred.delta_b, alpha)?;
        fused.pairs.insert(original.key.clone(), apply_patch(original, &pred.delta_b, alpha)?);
        rows.push(ReportRow {
            group: unit.group.id,
            module_type: unit.group.module_type.clone(),
            rank: unit.group.rank,
            layer: unit.target_layer,
            delta_norm: frobenius_norm(&pred.delta_b),
            alpha,
            lhs: sb.lhs,
            frob_identity: sb.frob_identity,
            bound: sb.bound,
            entropy: pred.entropy,
        });
        deltas.push((pred.key, pred.delta_b));
    }
    Ok(FusionOutcome {
        fused,
        report: FusionReport {
            seed: cfg.train.seed,
            config_hash: cfg.hash(),
            rows,
            deltas,
        },
        params,
        curve,
    })
}

/// Task model, replay data and (for harness objectives) evaluation data.
pub struct ResolvedObjective {
    pub model: Box<dyn SurrogateObjective>,
    pub dense: Option<DenseStack>,
    pub replay: Vec<Batch>,
    pub eval: Option<Batch>,
}

pub fn resolve_objective(cfg: &FusionConfig) -> Result<ResolvedObjective> {
    match cfg.objective.kind {
        ObjectiveKind::None => {
            let dummy = Batch {
                inputs: Array2::zeros((1, 1)),
                targets: Array2::zeros((1, 1)),
            };
            Ok(ResolvedObjective {
                model: Box::new(ConstantObjective(0.0)),
                dense: None,
                replay: vec![dummy; cfg.train.grad_accum],
                eval: None,
            })
        }
        ObjectiveKind::Harness => {
            let preset: Preset = cfg.objective.preset.parse()?;
            let scenario = preset.scenario(&cfg.objective.variant)?;
            let world = World::new(cfg.objective.seed, Default::default())?;
            let data = world.task_data(&scenario)?;
            Ok(ResolvedObjective {
                model: Box::new(data.model.clone()),
                dense: Some(data.model),
                replay: data.replay,
                eval: Some(data.eval),
            })
        }
    }
}

/// Loads and validates the adapters named in `cfg`.
pub fn load_inputs(cfg: &FusionConfig) -> Result<(AdapterSet, Vec<AdapterSet>)> {
    cfg.validate_paths()?;
    let check = |path: &PathBuf| -> Result<AdapterSet> {
        let set = load_adapter(path)?;
        let violations = validate_adapter(&set);
        if violations.is_empty() {
            Ok(set)
        } else {
            Err(FuseError::Invalid(format!("{}: {}", path.display(), violations.join("; "))))
        }
    };
    let target = check(&cfg.adapters.target)?;
    let sources = cfg.adapters.sources.iter().map(check).collect::<Result<Vec<_>>>()?;
    Ok((target, sources))
}

pub fn fuse(cfg: &FusionConfig) -> Result<FusionOutcome> {
    cfg.validate()?;
    let (target, sources) = load_inputs(cfg)?;
    let objective = resolve_objective(cfg)?;
    fuse_sets(&target, &sources, cfg, objective.model.as_ref(), &objective.replay)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportPaths {
    pub fused: PathBuf,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub loss_curve: PathBuf,
}

pub fn export_paths(cfg: &FusionConfig) -> ExportPaths {
    let dir = &cfg.output.dir;
    let hash = cfg.hash();
    ExportPaths {
        fused: dir.join(&cfg.output.fused),
        checkpoint: dir.join(format!("hypernet-{hash}.safetensors")),
        report: dir.join(format!("report-{hash}.csv")),
        loss_curve: dir.join(format!("loss-{hash}.csv")),
    }
}

/// Writes the fused adapter, the network checkpoint, the report and the
/// loss curve under `cfg.output.dir`.
pub fn export_fused(outcome: &FusionOutcome, cfg: &FusionConfig) -> Result<ExportPaths> {
    let paths = export_paths(cfg);
    std::fs::create_dir_all(&cfg.output.dir).map_err(|e| FuseError::io(&cfg.output.dir, e))?;
    save_adapter(&outcome.fused, &paths.fused)?;
    let meta = BTreeMap::from([
        ("config_hash".to_string(), outcome.report.config_hash.clone()),
        ("seed".to_string(), outcome.report.seed.to_string()),
    ]);
    let bytes = encode_container(&meta, &outcome.params.to_records())?;
    std::fs::write(&paths.checkpoint, bytes).map_err(|e| FuseError::io(&paths.checkpoint, e))?;
    outcome.report.write_csv(&paths.report)?;
    write_loss_curve(&paths.loss_curve, &outcome.curve)?;
    Ok(paths)
}

/// Summary numbers for one run; evaluations exist only for harness objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    pub fused_eval: Option<f64>,
    pub target_only_eval: Option<f64>,
    pub final_loss: f64,
    pub mean_delta_norm: f64,
    pub max_bound_ratio: f64,
}

impl RunMetrics {
    pub fn all_finite(&self) -> bool {
        [self.fused_eval, self.target_only_eval]
            .iter()
            .flatten()
            .chain([self.final_loss, self.mean_delta_norm, self.max_bound_ratio].iter())
            .all(|v| v.is_finite())
    }
}

pub fn metrics(outcome: &FusionOutcome, target: &AdapterSet, objective: &ResolvedObjective) -> Result<RunMetrics> {
    let (fused_eval, target_only_eval) = match (&objective.dense, &objective.eval) {
        (Some(model), Some(eval)) => (
            Some(mse(&model.predict(&outcome.fused, &eval.inputs)?, &eval.targets)),
            Some(mse(&model.predict(target, &eval.inputs)?, &eval.targets)),
        ),
        _ => (None, None),
    };
    let rows = &outcome.report.rows;
    let n = rows.len().max(1) as f64;
    Ok(RunMetrics {
        fused_eval,
        target_only_eval,
        final_loss: outcome.curve.last().map_or(0.0, |r| r.total),
        mean_delta_norm: rows.iter().map(|r| r.delta_norm).sum::<f64>() / n,
        max_bound_ratio: rows
            .iter()
            .map(|r| if r.bound > 0.0 { r.lhs / r.bound } else { 0.0 })
            .fold(0.0, f64::max),
    })
}

/// Fuses with `cfg` and returns the run metrics.
pub fn run_metrics(cfg: &FusionConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    let (target, sources) = load_inputs(cfg)?;
    let objective = resolve_objective(cfg)?;
    let outcome = fuse_sets(&target, &sources, cfg, objective.model.as_ref(), &objective.replay)?;
    metrics(&outcome, &target, &objective)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    AlphaInit,
    MuGate,
}

impl std::str::FromStr for SweepParam {
    type Err = FuseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha_init" | "alpha" => Ok(SweepParam::AlphaInit),
            "mu_gate" => Ok(SweepParam::MuGate),
            other => Err(FuseError::Config(format!("cannot sweep {other:?}; use alpha_init or mu_gate"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::AlphaInit => "alpha_init",
            SweepParam::MuGate => "mu_gate",
        }
    }

    pub fn apply(self, cfg: &mut FusionConfig, value: f64) {
        match self {
            SweepParam::AlphaInit => cfg.train.alpha_init = value,
            SweepParam::MuGate => cfg.denoise.mu_gate = value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub metrics: RunMetrics,
}

/// One fused run per value, everything else (including seeds) shared.
pub fn sweep(cfg: &FusionConfig, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(FuseError::Config("sweep needs at least one value".into()));
    }
    cfg.validate()?;
    let (target, sources) = load_inputs(cfg)?;
    let objective = resolve_objective(cfg)?;
    values
        .iter()
        .map(|&value| {
            let mut run = cfg.clone();
            param.apply(&mut run, value);
            let outcome = fuse_sets(&target, &sources, &run, objective.model.as_ref(), &objective.replay)?;
            Ok(SweepRow {
                param,
                value,
                metrics: metrics(&outcome, &target, &objective)?,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "param",
        "value",
        "fused_eval",
        "target_only_eval",
        "final_loss",
        "mean_delta_norm",
        "max_bound_ratio",
    ])?;
    for r in rows {
        w.write_record([
            r.param.name().to_string(),
            r.value.to_string(),
            opt(r.metrics.fused_eval),
            opt(r.metrics.target_only_eval),
            r.metrics.final_loss.to_string(),
            r.metrics.mean_delta_norm.to_string(),
            r.metrics.max_bound_ratio.to_string(),
        ])?;
    }
    w.flush().map_err(|e| FuseError::io(path, e))?;
    Ok(())
}

/// Process exit code for an error: 1 validation, 2 nothing fuseable, 3 training abort.
pub fn exit_code(err: &FuseError) -> i32 {
    match err {
        FuseError::NothingFuseable => 2,
        FuseError::TrainingAbort(_) => 3,
        _ => 1,
    }
}
