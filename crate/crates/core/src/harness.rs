//! Synthetic heterogeneous model families and transfer scenarios.
//!
//! Every family realizes one shared latent residual MLP in its own basis:
//! family `f` has an orthonormal geometry `Q_f` (width x latent) and its tail
//! layers carry `Q_f W Q_f^T`; deeper families get extra leading layers with
//! small weights. A task is a planted low-rank latent update on the tail
//! layers plus a task-specific input mean, so an expert trained in one family
//! holds signal another family's expert lacks, expressed in a different basis.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::FusionConfig;
use crate::error::{FuseError, Result};
use crate::nn::rng_for;
use crate::pipeline::fuse_sets;
use crate::store::{AdapterSet, LoraPair, ModuleKey};
use crate::surrogate::{mse, Batch, DenseStack, ResidualBlock, SurrogateObjective};

pub const MODULE_TYPES: [&str; 2] = ["up_proj", "down_proj"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessSettings {
    pub latent: usize,
    pub inputs: usize,
    pub outputs: usize,
    /// Depth of the shared latent stack; every family has at least this many layers.
    pub core_layers: usize,
    pub rank: usize,
    pub task_rank: usize,
    pub task_scale: f64,
    pub tasks: usize,
    pub replay_per_task: usize,
    pub eval_per_task: usize,
    pub batch_size: usize,
    pub expert_samples: usize,
    pub expert_steps: usize,
    pub expert_lr: f64,
    /// Expert training stops once loss falls below this fraction of the start.
    pub expert_stop: f64,
    pub noise_sources: usize,
}

impl Default for HarnessSettings {
    fn default() -> Self {
        HarnessSettings {
            latent: 32,
            inputs: 16,
            outputs: 16,
            core_layers: 4,
            rank: 8,
            task_rank: 2,
            task_scale: 0.8,
            tasks: 3,
            replay_per_task: 128,
            eval_per_task: 256,
            batch_size: 32,
            expert_samples: 256,
            expert_steps: 1500,
            expert_lr: 1e-2,
            expert_stop: 0.02,
            noise_sources: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FamilyShape {
    pub family_id: String,
    pub depth: usize,
    pub width: usize,
}

impl FamilyShape {
    pub fn new(family_id: &str, depth: usize, width: usize) -> Self {
        FamilyShape {
            family_id: family_id.into(),
            depth,
            width,
        }
    }
}

/// Target first, then the two source families.
pub fn default_shapes() -> Vec<FamilyShape> {
    vec![
        FamilyShape::new("mini-t", 4, 64),
        FamilyShape::new("mini-a", 6, 48),
        FamilyShape::new("mini-b", 5, 56),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFamily {
    pub family_id: String,
    pub depth: usize,
    pub widths: Vec<usize>,
    pub module_types: Vec<String>,
    /// Orthonormal columns mapping latent space into this family.
    pub geometry: Array2<f64>,
    pub base: DenseStack,
}

impl SyntheticFamily {
    pub fn width(&self) -> usize {
        self.widths[0]
    }

    /// Index of the first layer that carries the shared latent stack.
    pub fn tail_offset(&self, core_layers: usize) -> usize {
        self.depth - core_layers
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: usize,
    pub mean: Array1<f64>,
    /// Latent updates per core layer.
    pub up: Vec<Array2<f64>>,
    pub down: Vec<Array2<f64>>,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v * std
    })
}

/// Gram-Schmidt on a Gaussian matrix.
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut q = gaussian(rows, cols, 1.0, rng);
    for j in 0..cols {
        for _ in 0..2 {
            for k in 0..j {
                let dot = q.column(j).dot(&q.column(k));
                let prev = q.column(k).to_owned();
                q.column_mut(j).scaled_add(-dot, &prev);
            }
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    q
}

struct Latent {
    embed: Array2<f64>,
    up: Vec<Array2<f64>>,
    down: Vec<Array2<f64>>,
    readout: Array2<f64>,
}

fn gen_latent(seed: u64, st: &HarnessSettings) -> Latent {
    let mut rng = rng_for(seed, "latent");
    let d = st.latent;
    let w = 0.5 / (d as f64).sqrt();
    Latent {
        embed: gaussian(d, st.inputs, 1.0 / (st.inputs as f64).sqrt(), &mut rng),
        up: (0..st.core_layers).map(|_| gaussian(d, d, w, &mut rng)).collect(),
        down: (0..st.core_layers).map(|_| gaussian(d, d, w, &mut rng)).collect(),
        readout: gaussian(st.outputs, d, 1.0 / (d as f64).sqrt(), &mut rng),
    }
}

fn realize(q: &Array2<f64>, m: &Array2<f64>) -> Array2<f64> {
    q.dot(m).dot(&q.t())
}

/// Deterministic families sharing one latent stack.
pub fn gen_families(seed: u64, shapes: &[FamilyShape], st: &HarnessSettings) -> Result<Vec<SyntheticFamily>> {
    let latent = gen_latent(seed, st);
    shapes
        .iter()
        .map(|shape| {
            if shape.width < st.latent || shape.depth < st.core_layers || shape.width == 0 {
                return Err(FuseError::Invalid(format!(
                    "family {} ({}x{}) cannot hold a {}-wide, {}-deep latent stack",
                    shape.family_id, shape.depth, shape.width, st.latent, st.core_layers
                )));
            }
            let mut rng = rng_for(seed, &format!("family/{}", shape.family_id));
            let wd = shape.width;
            let q = orthonormal_columns(wd, st.latent, &mut rng);
            let offset = shape.depth - st.core_layers;
            let jitter = 0.02 / (wd as f64).sqrt();
            let blocks = (0..shape.depth)
                .map(|l| {
                    let (up, down) = if l < offset {
                        let s = 0.1 / (wd as f64).sqrt();
                        (gaussian(wd, wd, s, &mut rng), gaussian(wd, wd, s, &mut rng))
                    } else {
                        let j = l - offset;
                        (
                            realize(&q, &latent.up[j]) + gaussian(wd, wd, jitter, &mut rng),
                            realize(&q, &latent.down[j]) + gaussian(wd, wd, jitter, &mut rng),
                        )
                    };
                    ResidualBlock {
                        layer: l,
                        up_type: MODULE_TYPES[0].into(),
                        up_base: up,
                        down_type: MODULE_TYPES[1].into(),
                        down_base: down,
                    }
                })
                .collect();
            Ok(SyntheticFamily {
                family_id: shape.family_id.clone(),
                depth: shape.depth,
                widths: vec![wd; shape.depth],
                module_types: MODULE_TYPES.iter().map(|s| s.to_string()).collect(),
                base: DenseStack {
                    embed: q.dot(&latent.embed),
                    blocks,
                    readout: latent.readout.dot(&q.t()),
                },
                geometry: q,
            })
        })
        .collect()
}

pub fn gen_tasks(seed: u64, st: &HarnessSettings) -> Vec<Task> {
    (0..st.tasks)
        .map(|id| {
            let mut rng = rng_for(seed, &format!("task/{id}"));
            let d = st.latent;
            let std = 1.0 / (d as f64).sqrt();
            let mut pair = || {
                let u = gaussian(d, st.task_rank, std, &mut rng);
                let v = gaussian(d, st.task_rank, std, &mut rng);
                u.dot(&v.t()) * st.task_scale
            };
            let up = (0..st.core_layers).map(|_| pair()).collect();
            let down = (0..st.core_layers).map(|_| pair()).collect();
            let mean = Array1::from_shape_fn(st.inputs, |_| StandardNormal.sample(&mut rng));
            Task { id, mean, up, down }
        })
        .collect()
}

/// The family's network with the task's update built into its weights.
pub fn teacher(family: &SyntheticFamily, task: &Task, core_layers: usize) -> DenseStack {
    let mut stack = family.base.clone();
    let offset = family.tail_offset(core_layers);
    for j in 0..core_layers {
        let blk = &mut stack.blocks[offset + j];
        blk.up_base += &realize(&family.geometry, &task.up[j]);
        blk.down_base += &realize(&family.geometry, &task.down[j]);
    }
    stack
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertReport {
    pub family_id: String,
    pub tasks: Vec<usize>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Preset {
    SingleSource,
    MultiSource,
    NoisySource,
    AnchorVariants,
}

impl std::str::FromStr for Preset {
    type Err = FuseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single-source" => Ok(Preset::SingleSource),
            "multi-source" => Ok(Preset::MultiSource),
            "noisy-source" => Ok(Preset::NoisySource),
            "anchor-variants" => Ok(Preset::AnchorVariants),
            other => Err(FuseError::Config(format!(
                "unknown preset {other:?}; expected single-source, multi-source, noisy-source or anchor-variants"
            ))),
        }
    }
}

/// One fusion run inside a preset.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub preset: Preset,
    pub variant: String,
    pub target_task: usize,
    /// `(family index, task)` per real source.
    pub sources: Vec<(usize, usize)>,
    pub noise_sources: usize,
    pub replay_tasks: Vec<usize>,
    pub eval_tasks: Vec<usize>,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::SingleSource,
        Preset::MultiSource,
        Preset::NoisySource,
        Preset::AnchorVariants,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::SingleSource => "single-source",
            Preset::MultiSource => "multi-source",
            Preset::NoisySource => "noisy-source",
            Preset::AnchorVariants => "anchor-variants",
        }
    }

    /// Scenarios run by this preset; the last one is the preset's main run.
    pub fn scenarios(self, noise_sources: usize) -> Vec<Scenario> {
        let sc = |variant: &str, target_task, sources: Vec<(usize, usize)>, noise, replay: Vec<usize>, eval: Vec<usize>| Scenario {
            preset: self,
            variant: variant.into(),
            target_task,
            sources,
            noise_sources: noise,
            replay_tasks: replay,
            eval_tasks: eval,
        };
        match self {
            Preset::SingleSource => vec![sc("single", 0, vec![(1, 1)], 0, vec![0, 1], vec![0, 1])],
            Preset::MultiSource => vec![
                sc("one-source", 0, vec![(1, 1)], 0, vec![0, 1], vec![0, 1, 2]),
                sc("two-source", 0, vec![(1, 1), (2, 2)], 0, vec![0, 1, 2], vec![0, 1, 2]),
            ],
            Preset::NoisySource => vec![
                sc("clean", 0, vec![(1, 1)], 0, vec![0, 1], vec![0, 1]),
                sc("noisy", 0, vec![(1, 1)], noise_sources, vec![0, 1], vec![0, 1]),
            ],
            Preset::AnchorVariants => (0..3)
                .map(|a| {
                    let b = (a + 1) % 3;
                    sc(&format!("anchor-{a}"), a, vec![(1, b)], 0, vec![a, b], vec![a, b])
                })
                .collect(),
        }
    }

    /// Looks up a scenario by variant name; empty picks the main one.
    pub fn scenario(self, variant: &str) -> Result<Scenario> {
        let all = self.scenarios(HarnessSettings::default().noise_sources);
        if variant.is_empty() {
            return Ok(all.last().cloned().expect("presets have scenarios"));
        }
        all.into_iter()
            .find(|s| s.variant == variant)
            .ok_or_else(|| FuseError::Config(format!("preset {} has no variant {variant:?}", self.name())))
    }
}

/// Target-family model plus replay and evaluation data for a scenario.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub model: DenseStack,
    pub replay: Vec<Batch>,
    pub eval: Batch,
}

fn stack_batches(parts: &[Batch]) -> Batch {
    let xs: Vec<_> = parts.iter().map(|b| b.inputs.view()).collect();
    let ys: Vec<_> = parts.iter().map(|b| b.targets.view()).collect();
    Batch {
        inputs: concatenate(Axis(0), &xs).expect("equal widths"),
        targets: concatenate(Axis(0), &ys).expect("equal widths"),
    }
}

/// Shuffles rows with a seeded permutation and cuts them into batches.
fn into_batches(all: Batch, batch_size: usize, seed: u64, tag: &str) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut rng_for(seed, tag));
    order
        .chunks(batch_size.max(1))
        .map(|idx| Batch {
            inputs: all.inputs.select(Axis(0), idx),
            targets: all.targets.select(Axis(0), idx),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub preset: Preset,
    pub variant: String,
    pub seed: u64,
    pub n_sources: usize,
    pub fused_eval: f64,
    pub target_only_eval: f64,
    pub joint_oracle_eval: f64,
}

/// Families, tasks and a cache of trained adapters for one seed.
pub struct World {
    pub seed: u64,
    pub settings: HarnessSettings,
    pub families: Vec<SyntheticFamily>,
    pub tasks: Vec<Task>,
    experts: BTreeMap<(usize, Vec<usize>), (AdapterSet, ExpertReport)>,
}

impl World {
    pub fn new(seed: u64, settings: HarnessSettings) -> Result<Self> {
        Ok(World {
            seed,
            families: gen_families(seed, &default_shapes(), &settings)?,
            tasks: gen_tasks(seed, &settings),
            settings,
            experts: BTreeMap::new(),
        })
    }

    fn task(&self, k: usize) -> Result<&Task> {
        self.tasks
            .get(k)
            .ok_or_else(|| FuseError::Invalid(format!("task {k} does not exist")))
    }

    fn family(&self, f: usize) -> Result<&SyntheticFamily> {
        self.families
            .get(f)
            .ok_or_else(|| FuseError::Invalid(format!("family {f} does not exist")))
    }

    pub fn teacher(&self, family: usize, task: usize) -> Result<DenseStack> {
        Ok(teacher(self.family(family)?, self.task(task)?, self.settings.core_layers))
    }

    /// `n` samples of `task` labelled by `family`'s teacher; `purpose`
    /// selects an independent stream (train, replay, eval).
    pub fn sample(&self, family: usize, task: usize, n: usize, purpose: &str) -> Result<Batch> {
        let t = self.task(task)?;
        let mut rng = rng_for(self.seed, &format!("data/{family}/{purpose}/{task}"));
        let mut inputs: Array2<f64> = gaussian(n, self.settings.inputs, 1.0, &mut rng);
        inputs += &t.mean;
        let targets = self.teacher(family, task)?.predict(&AdapterSet::new("", 0), &inputs)?;
        Ok(Batch { inputs, targets })
    }

    pub fn task_data(&self, scenario: &Scenario) -> Result<TaskData> {
        let st = &self.settings;
        let replay = scenario
            .replay_tasks
            .iter()
            .map(|&k| self.sample(0, k, st.replay_per_task, "replay"))
            .collect::<Result<Vec<_>>>()?;
        let eval = scenario
            .eval_tasks
            .iter()
            .map(|&k| self.sample(0, k, st.eval_per_task, "eval"))
            .collect::<Result<Vec<_>>>()?;
        let tag = format!("replay-mix/{:?}", scenario.replay_tasks);
        Ok(TaskData {
            model: self.family(0)?.base.clone(),
            replay: into_batches(stack_batches(&replay), st.batch_size, self.seed, &tag),
            eval: stack_batches(&eval),
        })
    }

    /// Rank-`r` adapter on `family` trained on the listed tasks (cached).
    pub fn expert(&mut self, family: usize, tasks: &[usize]) -> Result<(AdapterSet, ExpertReport)> {
        let key = (family, tasks.to_vec());
        if let Some(hit) = self.experts.get(&key) {
            return Ok(hit.clone());
        }
        let parts = tasks
            .iter()
            .map(|&k| self.sample(family, k, self.settings.expert_samples, "train"))
            .collect::<Result<Vec<_>>>()?;
        let data = stack_batches(&parts);
        let fam = self.family(family)?;
        let tag = format!("expert/{family}/{tasks:?}");
        let trained = train_adapter(fam, &data, &self.settings, self.seed, &tag, tasks)?;
        self.experts.insert(key, trained.clone());
        Ok(trained)
    }

    /// Random adapter with the target expert's shapes and per-factor scale.
    pub fn noise_adapter(&self, like: &AdapterSet, index: usize) -> AdapterSet {
        let mut rng = rng_for(self.seed, &format!("noise/{index}"));
        let mut set = AdapterSet::new(format!("noise-{index}"), like.layer_count);
        for (key, pair) in &like.pairs {
            let rms = |m: &Array2<f64>| (m.iter().map(|v| v * v).sum::<f64>() / m.len() as f64).sqrt();
            let a = gaussian(pair.a.nrows(), pair.a.ncols(), rms(&pair.a), &mut rng);
            let b = gaussian(pair.b.nrows(), pair.b.ncols(), rms(&pair.b).max(1e-3), &mut rng);
            set.insert(LoraPair::new(key.clone(), a, b).expect("shapes copied from a valid pair"));
        }
        set
    }

    pub fn run(&mut self, scenario: &Scenario, cfg: &FusionConfig) -> Result<ExperimentRow> {
        let (target, _) = self.expert(0, &[scenario.target_task])?;
        let mut sources = Vec::new();
        for &(f, k) in &scenario.sources {
            sources.push(self.expert(f, &[k])?.0);
        }
        for i in 0..scenario.noise_sources {
            sources.push(self.noise_adapter(&target, i));
        }
        let data = self.task_data(scenario)?;
        let outcome = fuse_sets(&target, &sources, cfg, &data.model, &data.replay)?;
        let eval = |set: &AdapterSet| -> Result<f64> { Ok(mse(&data.model.predict(set, &data.eval.inputs)?, &data.eval.targets)) };
        let (oracle, _) = self.expert(0, &scenario.eval_tasks)?;
        Ok(ExperimentRow {
            preset: scenario.preset,
            variant: scenario.variant.clone(),
            seed: self.seed,
            n_sources: sources.len(),
            fused_eval: eval(&outcome.fused)?,
            target_only_eval: eval(&target)?,
            joint_oracle_eval: eval(&oracle)?,
        })
    }
}

/// Fresh LoRA pairs on every layer and module of `family`: `A` uniform in
/// `+-1/sqrt(width)`, `B` zero.
pub fn init_adapter(family: &SyntheticFamily, rank: usize, seed: u64, tag: &str) -> AdapterSet {
    let mut rng = rng_for(seed, tag);
    let mut set = AdapterSet::new(family.family_id.clone(), family.depth);
    for blk in &family.base.blocks {
        for (ty, base) in [(&blk.up_type, &blk.up_base), (&blk.down_type, &blk.down_base)] {
            let bound = 1.0 / (base.ncols() as f64).sqrt();
            let a = Array2::from_shape_fn((rank, base.ncols()), |_| rng.random_range(-bound..bound));
            let b = Array2::zeros((base.nrows(), rank));
            set.insert(LoraPair::new(ModuleKey::new(blk.layer, ty.clone(), rank), a, b).expect("consistent shapes"));
        }
    }
    set
}

/// Full-batch Adam on every `A` and `B` entry against `family`'s base model.
pub fn train_adapter(
    family: &SyntheticFamily,
    data: &Batch,
    st: &HarnessSettings,
    seed: u64,
    tag: &str,
    tasks: &[usize],
) -> Result<(AdapterSet, ExpertReport)> {
    let mut set = init_adapter(family, st.rank, seed, tag);
    let model = &family.base;
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut moments: BTreeMap<ModuleKey, [Array2<f64>; 4]> = set
        .pairs
        .iter()
        .map(|(k, p)| {
            let za = Array2::zeros(p.a.dim());
            let zb = Array2::zeros(p.b.dim());
            (k.clone(), [za.clone(), za, zb.clone(), zb])
        })
        .collect();
    let mut initial = None;
    let mut last = f64::NAN;
    let mut steps = 0;
    let mut converged = false;
    for t in 1..=st.expert_steps {
        let e = model.evaluate(&set, data)?;
        if !e.loss.is_finite() {
            return Err(FuseError::TrainingAbort(format!("expert {tag} diverged at step {t}")));
        }
        let start = *initial.get_or_insert(e.loss);
        last = e.loss;
        steps = t - 1;
        if e.loss < st.expert_stop * start {
            converged = true;
            break;
        }
        let (c1, c2) = (1.0 - f64::powi(b1, t as i32), 1.0 - f64::powi(b2, t as i32));
        for (key, pair) in set.pairs.iter_mut() {
            let [ma, va, mb, vb] = moments.get_mut(key).expect("moments mirror pairs");
            for (theta, g, m, v) in [
                (&mut pair.a, &e.grad_a[key], ma, va),
                (&mut pair.b, &e.grad_b[key], mb, vb),
            ] {
                ndarray::Zip::from(theta).and(g).and(m).and(v).for_each(|th, &gi, mi, vi| {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                    *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    *th -= st.expert_lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                });
            }
        }
        steps = t;
    }
    if !converged {
        let e = model.evaluate(&set, data)?;
        last = e.loss;
        converged = e.loss < st.expert_stop * initial.unwrap_or(f64::INFINITY);
    }
    Ok((
        set,
        ExpertReport {
            family_id: family.family_id.clone(),
            tasks: tasks.to_vec(),
            initial_loss: initial.unwrap_or(f64::NAN),
            final_loss: last,
            steps,
            converged,
        },
    ))
}

/// Fusion settings sized for the synthetic families.
pub fn fusion_config() -> FusionConfig {
    let mut cfg = FusionConfig::default();
    cfg.hypernet.embed_dim = 32;
    cfg.hypernet.heads = 4;
    cfg.hypernet.max_positions = 256;
    cfg.denoise.n_proj = 64;
    cfg.train.learning_rate = 2e-3;
    cfg.train.epochs = 60;
    cfg.train.grad_accum = 1;
    cfg
}

/// Runs every scenario of `preset` for each seed.
pub fn run_preset(preset: Preset, seeds: &[u64], settings: &HarnessSettings, cfg: &FusionConfig) -> Result<Vec<ExperimentRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut world = World::new(seed, settings.clone())?;
        let mut run_cfg = cfg.clone();
        run_cfg.train.seed = seed;
        for scenario in preset.scenarios(settings.noise_sources) {
            rows.push(world.run(&scenario, &run_cfg)?);
        }
    }
    Ok(rows)
}

pub fn write_experiment_csv(path: &Path, rows: &[ExperimentRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "preset",
        "variant",
        "seed",
        "n_sources",
        "fused_eval",
        "target_only_eval",
        "joint_oracle_eval",
    ])?;
    for r in rows {
        w.write_record([
            r.preset.name().to_string(),
            r.variant.clone(),
            r.seed.to_string(),
            r.n_sources.to_string(),
            r.fused_eval.to_string(),
            r.target_only_eval.to_string(),
            r.joint_oracle_eval.to_string(),
        ])?;
    }
    w.flush().map_err(|e| FuseError::io(path, e))?;
    Ok(())
}

/// Mean and standard deviation of every base weight of a family.
pub fn weight_moments(family: &SyntheticFamily) -> (f64, f64) {
    let vals: Vec<f64> = family
        .base
        .blocks
        .iter()
        .flat_map(|b| b.up_base.iter().chain(b.down_base.iter()).copied())
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Loss of `adapter` on `family`'s teacher for `task`, next to the loss with no adapter.
pub fn task_losses(world: &World, family: usize, adapter: &AdapterSet, task: usize) -> Result<(f64, f64)> {
    let data = world.sample(family, task, world.settings.eval_per_task, "eval")?;
    let model = &world.family(family)?.base;
    let empty = AdapterSet::new("", 0);
    Ok((model.evaluate(&empty, &data)?.loss, model.evaluate(adapter, &data)?.loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_is_orthonormal() {
        let q = orthonormal_columns(48, 32, &mut rng_for(1, "q"));
        let g = q.t().dot(&q);
        for ((i, j), v) in g.indexed_iter() {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn families_are_deterministic_and_heterogeneous() {
        let st = HarnessSettings::default();
        let a = gen_families(3, &default_shapes(), &st).unwrap();
        let b = gen_families(3, &default_shapes(), &st).unwrap();
        assert_eq!(a, b);
        assert_ne!((a[0].depth, a[0].width()), (a[1].depth, a[1].width()));
        assert_eq!(a[1].base.blocks.len(), 6);
    }

    #[test]
    fn bad_shapes_are_rejected() {
        let st = HarnessSettings::default();
        assert!(gen_families(0, &[FamilyShape::new("tiny", 4, 16)], &st).is_err());
        assert!(gen_families(0, &[FamilyShape::new("shallow", 2, 64)], &st).is_err());
    }

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("two-towers".parse::<Preset>().is_err());
        assert_eq!(Preset::MultiSource.scenario("").unwrap().variant, "two-source");
        assert!(Preset::MultiSource.scenario("three").is_err());
    }
}
