//! Joint objective, dynamic patching, Adam updates and gradient checking.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::denoise::{rdm_against_with_grad, GaussianPrior, PriorSampler, ProjectionBank, RdmConfig};
use crate::error::{FuseError, Result};
use crate::hypernet::{backward_unit, forward_unit, DeltaPrediction, HyperNetParams, PreparedContext, UnitForward};
use crate::nn::{derive_seed, relu, rng_for};
use crate::store::{AdapterSet, ModuleKey};
use crate::surrogate::{fold_mask, Batch, SurrogateObjective, SIG_SEED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "lr")]
    pub learning_rate: f64,
    pub epochs: usize,
    pub grad_accum: usize,
    pub lambda_reg: f64,
    pub alpha_init: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            epochs: 3,
            grad_accum: 8,
            lambda_reg: 0.005,
            alpha_init: 0.3,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    /// `epochs == 0` is accepted and means "no training".
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FuseError::Config(m.to_string()));
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return bad("train.lr must be a positive number");
        }
        if self.grad_accum == 0 {
            return bad("train.grad_accum must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("adam moments need beta in [0, 1) and epsilon > 0");
        }
        if !self.lambda_reg.is_finite() || !self.alpha_init.is_finite() {
            return bad("train.lambda_reg and train.alpha_init must be finite");
        }
        Ok(())
    }
}

/// Fixed projection directions and prior settings for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Regularizer {
    pub config: RdmConfig,
    pub bank: ProjectionBank,
}

impl Regularizer {
    pub fn new(config: RdmConfig, embed_dim: usize) -> Result<Self> {
        let bank = ProjectionBank::new(config.seed, config.n_proj, embed_dim)?;
        Ok(Regularizer { config, bank })
    }

    fn prior(&self, stream: u64, unit: usize, side: usize, n: usize, d: usize) -> Result<Array2<f64>> {
        let seed = derive_seed(stream, &format!("prior/{unit}/{side}"));
        Ok(GaussianPrior::new(&self.config, seed)?.draw(n, d))
    }
}

/// Everything the joint objective reads besides the network parameters.
pub struct JointProblem<'a> {
    pub units: &'a [PreparedContext],
    pub live: &'a mut AdapterSet,
    pub batch: &'a Batch,
    pub surrogate: &'a dyn SurrogateObjective,
    pub regularizer: &'a Regularizer,
    pub lambda_reg: f64,
    /// Seeds the prior samples; fixed for one micro-step.
    pub stream: u64,
    pub precision: Precision,
}

#[derive(Debug, Clone)]
pub struct JointEval {
    pub total: f64,
    pub surrogate: f64,
    /// `(group id, mean over the group's units of rdm_t + rdm_s)`.
    pub group_rdm: Vec<(usize, f64)>,
    /// `(1/G) * sum of group_rdm`; `total = surrogate + lambda_reg * rdm`.
    pub rdm: f64,
    pub predictions: Vec<DeltaPrediction>,
    pub grad: Option<HyperNetParams>,
    /// Identifies the smooth piece of the objective the point lies on.
    pub signature: u64,
}

fn patch_live(
    live: &mut AdapterSet,
    units: &[PreparedContext],
    fwds: &[UnitForward],
    params: &HyperNetParams,
    precision: Precision,
    saved: &mut Vec<(ModuleKey, Array2<f64>)>,
) -> Result<()> {
    for (u, f) in units.iter().zip(fwds) {
        let pair = live
            .pairs
            .get_mut(&u.key)
            .ok_or_else(|| FuseError::Invalid(format!("unit {} has no live pair", u.key)))?;
        let delta = &f.prediction.delta_b;
        if pair.b.dim() != delta.dim() {
            return Err(FuseError::Shape(format!("delta for {} has shape {:?}", u.key, delta.dim())));
        }
        let alpha = params.alphas[u.alpha_index];
        let mut patched = &pair.b + &(delta * alpha);
        patched.mapv_inplace(|v| precision.round(v));
        saved.push((u.key.clone(), std::mem::replace(&mut pair.b, patched)));
    }
    Ok(())
}

fn unit_signature(sig: &mut u64, fwd: &UnitForward, bank: &ProjectionBank) {
    for side in [&fwd.target, &fwd.source] {
        let c = &side.denoise;
        fold_mask(sig, &c.gate_pre_hidden, |v| u64::from(v > 0.0));
        fold_mask(sig, &c.gate_pre, |v| if v <= 0.0 { 0 } else if v >= 1.0 { 2 } else { 1 });
        fold_mask(sig, &c.z, |v| u64::from(v > 0.0));
        let u = relu(&c.z).dot(&bank.p.t());
        for col in u.columns() {
            let mut idx: Vec<usize> = (0..col.len()).collect();
            idx.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
            for i in idx {
                *sig ^= i as u64 + 1;
                *sig = sig.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    fold_mask(sig, &fwd.decoder.pre_hidden, |v| u64::from(v > 0.0));
}

/// Surrogate loss on the patched target plus the weighted regularizer.
///
/// The live set is patched with `B + alpha_g * delta_b` for every unit, the
/// surrogate is evaluated, and the original `B` buffers are put back before
/// this returns, including on error.
pub fn joint_objective(pb: &mut JointProblem<'_>, params: &HyperNetParams, want_grad: bool) -> Result<JointEval> {
    if pb.units.is_empty() {
        return Err(FuseError::NothingFuseable);
    }
    let fwds = pb
        .units
        .iter()
        .map(|u| forward_unit(u, params))
        .collect::<Result<Vec<_>>>()?;

    let mut saved = Vec::with_capacity(pb.units.len());
    let eval = patch_live(pb.live, pb.units, &fwds, params, pb.precision, &mut saved)
        .and_then(|_| pb.surrogate.evaluate(pb.live, pb.batch));
    for (key, b) in saved.into_iter().rev() {
        if let Some(pair) = pb.live.pairs.get_mut(&key) {
            pair.b = b;
        }
    }
    let eval = eval?;

    let mut groups: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut rdm_grads = Vec::with_capacity(pb.units.len());
    for (i, (u, f)) in pb.units.iter().zip(&fwds).enumerate() {
        let mut term = 0.0;
        let mut dz = Vec::with_capacity(2);
        for (side, z) in [f.target.z(), f.source.z()].into_iter().enumerate() {
            let y = pb.regularizer.prior(pb.stream, i, side, z.nrows(), z.ncols())?;
            let (l, g) = rdm_against_with_grad(z, &y, &pb.regularizer.bank)?;
            term += l;
            dz.push(g);
        }
        let e = groups.entry(u.group_id).or_insert((0.0, 0));
        e.0 += term;
        e.1 += 1;
        rdm_grads.push(dz);
    }
    let n_groups = groups.len() as f64;
    let group_rdm: Vec<(usize, f64)> = groups.iter().map(|(&g, &(s, n))| (g, s / n as f64)).collect();
    let rdm = group_rdm.iter().map(|(_, v)| v).sum::<f64>() / n_groups;
    let total = eval.loss + pb.lambda_reg * rdm;

    let grad = if want_grad {
        let mut grad = params.zeros_like();
        for ((u, f), dz) in pb.units.iter().zip(&fwds).zip(&rdm_grads) {
            let delta = &f.prediction.delta_b;
            let db = eval.grad_b.get(&u.key).cloned().unwrap_or_else(|| Array2::zeros(delta.dim()));
            grad.alphas[u.alpha_index] += (&db * delta).sum();
            let d_delta = db * params.alphas[u.alpha_index];
            let scale = pb.lambda_reg / (n_groups * groups[&u.group_id].1 as f64);
            let dzt = &dz[0] * scale;
            let dzs = &dz[1] * scale;
            backward_unit(u, f, params, &d_delta, Some(&dzt), Some(&dzs), &mut grad);
        }
        Some(grad)
    } else {
        None
    };

    let mut signature = SIG_SEED ^ eval.signature;
    for f in &fwds {
        unit_signature(&mut signature, f, &pb.regularizer.bank);
    }
    Ok(JointEval {
        total,
        surrogate: eval.loss,
        group_rdm,
        rdm,
        predictions: fwds.into_iter().map(|f| f.prediction).collect(),
        grad,
        signature,
    })
}

/// Adam moments, one flat buffer per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &HyperNetParams) -> Self {
        let m: Vec<Vec<f64>> = params.blocks().iter().map(|b| vec![0.0; b.values.len()]).collect();
        OptimizerState {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut HyperNetParams, grad: &HyperNetParams, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let grads = grad.blocks();
        for (((_, theta), g), (m, v)) in params
            .blocks_mut()
            .into_iter()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..theta.len() {
                let gi = g.values[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let step = cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
                theta[i] = cfg.precision.round(theta[i] - step);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub surrogate: f64,
    pub rdm: f64,
    pub total: f64,
}

/// Live target adapter, prepared units, network, and optimizer for one run.
pub struct FusionState {
    pub live: AdapterSet,
    pub units: Vec<PreparedContext>,
    pub params: HyperNetParams,
    pub optimizer: OptimizerState,
    pub regularizer: Regularizer,
    pub config: TrainConfig,
    pub micro_steps: u64,
    pending: Option<HyperNetParams>,
    pending_count: usize,
}

impl FusionState {
    pub fn new(
        live: AdapterSet,
        units: Vec<PreparedContext>,
        mut params: HyperNetParams,
        config: TrainConfig,
        rdm: RdmConfig,
    ) -> Result<Self> {
        config.validate()?;
        if units.is_empty() {
            return Err(FuseError::NothingFuseable);
        }
        for (_, v) in params.blocks_mut() {
            v.iter_mut().for_each(|x| *x = config.precision.round(*x));
        }
        let regularizer = Regularizer::new(rdm, params.embed_dim())?;
        Ok(FusionState {
            optimizer: OptimizerState::new(&params),
            live,
            units,
            params,
            regularizer,
            config,
            micro_steps: 0,
            pending: None,
            pending_count: 0,
        })
    }

    /// Optimizer updates applied so far.
    pub fn updates(&self) -> u64 {
        self.optimizer.step
    }

    /// Micro-steps accumulated but not yet applied.
    pub fn pending_micro_steps(&self) -> usize {
        self.pending_count
    }

    pub fn evaluate(&mut self, batch: &Batch, surrogate: &dyn SurrogateObjective, want_grad: bool) -> Result<JointEval> {
        let mut pb = JointProblem {
            units: &self.units,
            live: &mut self.live,
            batch,
            surrogate,
            regularizer: &self.regularizer,
            lambda_reg: self.config.lambda_reg,
            stream: derive_seed(self.config.seed, &format!("step/{}", self.micro_steps)),
            precision: self.config.precision,
        };
        joint_objective(&mut pb, &self.params, want_grad)
    }

    /// One micro-step: patch, evaluate, restore, accumulate; every
    /// `grad_accum` micro-steps the averaged gradient is applied.
    pub fn training_step(&mut self, batch: &Batch, surrogate: &dyn SurrogateObjective) -> Result<StepRecord> {
        let eval = self.evaluate(batch, surrogate, true)?;
        let grad = eval.grad.expect("gradient requested");
        if !eval.total.is_finite() || !grad.all_finite() {
            return Err(FuseError::TrainingAbort(format!(
                "non-finite loss or gradient at micro-step {}",
                self.micro_steps
            )));
        }
        match &mut self.pending {
            Some(acc) => {
                for ((_, a), g) in acc.blocks_mut().into_iter().zip(grad.blocks()) {
                    a.iter_mut().zip(g.values).for_each(|(a, g)| *a += g);
                }
            }
            None => self.pending = Some(grad),
        }
        self.pending_count += 1;
        let record = StepRecord {
            step: self.micro_steps,
            surrogate: eval.surrogate,
            rdm: eval.rdm,
            total: eval.total,
        };
        self.micro_steps += 1;
        if self.pending_count == self.config.grad_accum {
            self.flush();
        }
        Ok(record)
    }

    /// Applies any partially accumulated gradient.
    pub fn flush(&mut self) {
        if let Some(mut acc) = self.pending.take() {
            let n = self.pending_count as f64;
            for (_, a) in acc.blocks_mut() {
                a.iter_mut().for_each(|v| *v /= n);
            }
            self.optimizer.update(&mut self.params, &acc, &self.config);
        }
        self.pending_count = 0;
    }

    /// `epochs` passes in seeded shuffled order; leftover accumulation is
    /// applied at the end.
    pub fn fit(&mut self, dataset: &[Batch], surrogate: &dyn SurrogateObjective) -> Result<Vec<StepRecord>> {
        if dataset.is_empty() {
            return Err(FuseError::Invalid("training dataset is empty".into()));
        }
        let mut curve = Vec::with_capacity(dataset.len() * self.config.epochs);
        for epoch in 0..self.config.epochs {
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut rng_for(self.config.seed, &format!("shuffle/{epoch}")));
            for i in order {
                curve.push(self.training_step(&dataset[i], surrogate)?);
            }
        }
        self.flush();
        Ok(curve)
    }

    /// Final forward pass with the current parameters.
    pub fn predict(&self) -> Result<Vec<DeltaPrediction>> {
        self.units
            .iter()
            .map(|u| forward_unit(u, &self.params).map(|f| f.prediction))
            .collect()
    }
}

pub fn write_loss_curve(path: &Path, curve: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "surrogate", "rdm", "total"])?;
    for r in curve {
        w.write_record([
            r.step.to_string(),
            r.surrogate.to_string(),
            r.rdm.to_string(),
            r.total.to_string(),
        ])?;
    }
    w.flush().map_err(|e| FuseError::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrad {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates dropped because a perturbation crossed a kink.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub blocks: Vec<BlockGrad>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.checked > 0 && b.max_rel_error < self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Central differences on `coords` seeded coordinates per block (all of
/// them for smaller blocks). Coordinates whose perturbation changes the
/// objective's signature are replaced by fresh ones.
pub fn grad_check(
    pb: &mut JointProblem<'_>,
    params: &HyperNetParams,
    tolerance: f64,
    coords: usize,
    seed: u64,
) -> Result<GradReport> {
    let base = joint_objective(pb, params, true)?;
    let grad = base.grad.clone().expect("gradient requested");
    let grad_blocks = grad.blocks();
    let mut probe = params.clone();
    let mut blocks = Vec::with_capacity(grad_blocks.len());
    for (bi, gb) in grad_blocks.iter().enumerate() {
        let len = gb.values.len();
        // Alternate coordinates with a non-zero analytic gradient and
        // uniformly drawn ones, so sparse blocks are still exercised.
        let mut rng = rng_for(seed, &format!("gradcheck/{}", gb.name));
        let mut uniform: Vec<usize> = (0..len).collect();
        uniform.shuffle(&mut rng);
        let mut active: Vec<usize> = (0..len).filter(|&i| gb.values[i] != 0.0).collect();
        active.shuffle(&mut rng);
        let mut seen = vec![false; len];
        let mut candidates = Vec::with_capacity(len);
        for pair in active.iter().map(Some).chain(std::iter::repeat(None)).zip(&uniform) {
            for &i in pair.0.into_iter().chain(std::iter::once(pair.1)) {
                if !seen[i] {
                    seen[i] = true;
                    candidates.push(i);
                }
            }
        }
        let mut report = BlockGrad {
            name: gb.name,
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for idx in candidates {
            if report.checked >= coords {
                break;
            }
            let theta = probe.blocks_mut()[bi].1[idx];
            let h = 1e-5 * (1.0 + theta.abs());
            probe.blocks_mut()[bi].1[idx] = theta + h;
            let up = joint_objective(pb, &probe, false);
            probe.blocks_mut()[bi].1[idx] = theta - h;
            let down = joint_objective(pb, &probe, false);
            probe.blocks_mut()[bi].1[idx] = theta;
            let (up, down) = (up?, down?);
            if up.signature != base.signature || down.signature != base.signature {
                report.skipped += 1;
                continue;
            }
            let fd = (up.total - down.total) / (2.0 * h);
            let err = relative_error(gb.values[idx], fd);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
        blocks.push(report);
    }
    Ok(GradReport { blocks, tolerance })
}

/// Writes a human-readable gradient report.
pub fn write_grad_report(mut out: impl Write, report: &GradReport) -> std::io::Result<()> {
    for b in &report.blocks {
        writeln!(
            out,
            "{:<20} max_rel={:.3e} checked={} skipped={}",
            b.name, b.max_rel_error, b.checked, b.skipped
        )?;
    }
    writeln!(
        out,
        "overall max_rel={:.3e} tolerance={:.1e} {}",
        report.max_rel_error(),
        report.tolerance,
        if report.passed() { "PASS" } else { "FAIL" }
    )
}
