//! Differentiable stand-ins for the task loss evaluated on a patched adapter.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::error::{FuseError, Result};
use crate::store::{AdapterSet, LoraPair, ModuleKey};

/// A mini-batch of `(input, target)` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

#[derive(Debug, Clone)]
pub struct SurrogateEval {
    pub loss: f64,
    pub grad_a: BTreeMap<ModuleKey, Array2<f64>>,
    pub grad_b: BTreeMap<ModuleKey, Array2<f64>>,
    /// Hash of every branch decision taken (ReLU masks); equal signatures
    /// mean both evaluations lie on the same smooth piece.
    pub signature: u64,
}

/// Scalar task loss on an adapter set with exact gradients for each factor.
pub trait SurrogateObjective: Send + Sync {
    fn evaluate(&self, adapters: &AdapterSet, batch: &Batch) -> Result<SurrogateEval>;
}

/// Loss that ignores the adapters entirely; every gradient is zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantObjective(pub f64);

impl SurrogateObjective for ConstantObjective {
    fn evaluate(&self, adapters: &AdapterSet, _batch: &Batch) -> Result<SurrogateEval> {
        let zeros = |f: fn(&LoraPair) -> &Array2<f64>| {
            adapters
                .pairs
                .iter()
                .map(|(k, p)| (k.clone(), Array2::zeros(f(p).dim())))
                .collect()
        };
        Ok(SurrogateEval {
            loss: self.0,
            grad_a: zeros(|p| &p.a),
            grad_b: zeros(|p| &p.b),
            signature: 0,
        })
    }
}

pub(crate) fn fold_mask(sig: &mut u64, m: &Array2<f64>, mut class: impl FnMut(f64) -> u64) {
    for &v in m.iter() {
        *sig ^= class(v);
        *sig = sig.wrapping_mul(0x0100_0000_01b3);
    }
}

pub(crate) const SIG_SEED: u64 = 0xcbf2_9ce4_8422_2325;

/// One residual MLP block: `h <- h + (W_down + dW_down) ReLU((W_up + dW_up) h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub layer: usize,
    pub up_type: String,
    pub up_base: Array2<f64>,
    pub down_type: String,
    pub down_base: Array2<f64>,
}

/// A frozen residual MLP whose block weights take LoRA deltas from the
/// adapter set, looked up by `(layer, module_type)`. Loss is mean squared
/// error against the batch targets.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseStack {
    pub embed: Array2<f64>,
    pub blocks: Vec<ResidualBlock>,
    pub readout: Array2<f64>,
}

fn find_pair<'a>(set: &'a AdapterSet, layer: usize, module_type: &str) -> Option<&'a LoraPair> {
    set.pairs
        .range(ModuleKey::new(layer, module_type, 0)..)
        .next()
        .filter(|(k, _)| k.layer == layer && k.module_type == module_type)
        .map(|(_, p)| p)
}

struct LayerCache {
    input: Array2<f64>,
    up_pre: Array2<f64>,
    up_act: Array2<f64>,
    up_proj: Option<Array2<f64>>,
    down_proj: Option<Array2<f64>>,
}

/// `x (W + B A)^T`, returning also `x A^T` when a pair is present.
fn adapted(x: &Array2<f64>, base: &Array2<f64>, pair: Option<&LoraPair>) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
    let mut y = x.dot(&base.t());
    match pair {
        Some(p) => {
            if p.d_in() != base.ncols() || p.d_out() != base.nrows() {
                return Err(FuseError::Shape(format!(
                    "{} has delta {}x{} for base {:?}",
                    p.key,
                    p.d_out(),
                    p.d_in(),
                    base.dim()
                )));
            }
            let xa = x.dot(&p.a.t());
            y += &xa.dot(&p.b.t());
            Ok((y, Some(xa)))
        }
        None => Ok((y, None)),
    }
}

impl DenseStack {
    pub fn input_dim(&self) -> usize {
        self.embed.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.readout.nrows()
    }

    pub fn predict(&self, adapters: &AdapterSet, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(adapters, inputs)?.0)
    }

    fn forward(&self, adapters: &AdapterSet, inputs: &Array2<f64>) -> Result<(Array2<f64>, Vec<LayerCache>, Array2<f64>)> {
        if inputs.ncols() != self.input_dim() {
            return Err(FuseError::Shape(format!(
                "batch has {} features, model expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        let mut h = inputs.dot(&self.embed.t());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let up = find_pair(adapters, blk.layer, &blk.up_type);
            let down = find_pair(adapters, blk.layer, &blk.down_type);
            let (up_pre, up_proj) = adapted(&h, &blk.up_base, up)?;
            let up_act = up_pre.mapv(|v| v.max(0.0));
            let (delta, down_proj) = adapted(&up_act, &blk.down_base, down)?;
            let next = &h + &delta;
            caches.push(LayerCache {
                input: std::mem::replace(&mut h, next),
                up_pre,
                up_act,
                up_proj,
                down_proj,
            });
        }
        let out = h.dot(&self.readout.t());
        Ok((out, caches, h))
    }
}

/// Accumulates weight-gradient `dW = dy^T x` into the factor gradients.
fn factor_grads(
    pair: &LoraPair,
    x: &Array2<f64>,
    xa: &Array2<f64>,
    dy: &Array2<f64>,
    grad_a: &mut BTreeMap<ModuleKey, Array2<f64>>,
    grad_b: &mut BTreeMap<ModuleKey, Array2<f64>>,
) {
    // dB = dy^T (x A^T); dA = B^T dy^T x
    let gb = dy.t().dot(xa);
    let ga = pair.b.t().dot(&dy.t()).dot(x);
    *grad_b.entry(pair.key.clone()).or_insert_with(|| Array2::zeros(pair.b.dim())) += &gb;
    *grad_a.entry(pair.key.clone()).or_insert_with(|| Array2::zeros(pair.a.dim())) += &ga;
}

fn input_grad(dy: &Array2<f64>, base: &Array2<f64>, pair: Option<&LoraPair>) -> Array2<f64> {
    let mut dx = dy.dot(base);
    if let Some(p) = pair {
        dx += &dy.dot(&p.b).dot(&p.a);
    }
    dx
}

impl SurrogateObjective for DenseStack {
    fn evaluate(&self, adapters: &AdapterSet, batch: &Batch) -> Result<SurrogateEval> {
        if batch.is_empty() || batch.targets.dim() != (batch.len(), self.output_dim()) {
            return Err(FuseError::Shape("batch targets do not match the model output".into()));
        }
        let (out, caches, _) = self.forward(adapters, &batch.inputs)?;
        let diff = &out - &batch.targets;
        let count = diff.len() as f64;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / count;

        let mut grad_a = BTreeMap::new();
        let mut grad_b = BTreeMap::new();
        let mut signature = SIG_SEED;
        let dout = diff * (2.0 / count);
        let mut dh = dout.dot(&self.readout);
        for (blk, cache) in self.blocks.iter().zip(caches.iter()).rev() {
            fold_mask(&mut signature, &cache.up_pre, |v| u64::from(v > 0.0));
            let up = find_pair(adapters, blk.layer, &blk.up_type);
            let down = find_pair(adapters, blk.layer, &blk.down_type);
            if let (Some(p), Some(xa)) = (down, cache.down_proj.as_ref()) {
                factor_grads(p, &cache.up_act, xa, &dh, &mut grad_a, &mut grad_b);
            }
            let mut d_pre = input_grad(&dh, &blk.down_base, down);
            d_pre.zip_mut_with(&cache.up_pre, |d, &p| {
                if p <= 0.0 {
                    *d = 0.0
                }
            });
            if let (Some(p), Some(xa)) = (up, cache.up_proj.as_ref()) {
                factor_grads(p, &cache.input, xa, &d_pre, &mut grad_a, &mut grad_b);
            }
            dh = &dh + &input_grad(&d_pre, &blk.up_base, up);
        }
        Ok(SurrogateEval {
            loss,
            grad_a,
            grad_b,
            signature,
        })
    }
}

/// Mean squared error of `pred` against `targets`.
pub fn mse(pred: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let d = pred - targets;
    d.iter().map(|v| v * v).sum::<f64>() / d.len().max(1) as f64
}

/// Per-row mean of squared errors, used for per-task breakdowns.
pub fn row_errors(pred: &Array2<f64>, targets: &Array2<f64>) -> Array1<f64> {
    let d = pred - targets;
    d.map_axis(ndarray::Axis(1), |r| r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng_for;
    use rand::Rng;

    fn stack(seed: u64) -> (DenseStack, AdapterSet) {
        let mut rng = rng_for(seed, "stack");
        let mut m = |r: usize, c: usize, s: f64| Array2::from_shape_fn((r, c), |_| rng.random_range(-s..s));
        let w = 6;
        let st = DenseStack {
            embed: m(w, 3, 0.6),
            blocks: (0..2)
                .map(|l| ResidualBlock {
                    layer: l,
                    up_type: "up_proj".into(),
                    up_base: m(w, w, 0.5),
                    down_type: "down_proj".into(),
                    down_base: m(w, w, 0.5),
                })
                .collect(),
            readout: m(2, w, 0.6),
        };
        let mut set = AdapterSet::new("t", 2);
        for l in 0..2 {
            for ty in ["up_proj", "down_proj"] {
                let pair = LoraPair::new(ModuleKey::new(l, ty, 2), m(2, w, 0.5), m(w, 2, 0.5)).unwrap();
                set.insert(pair);
            }
        }
        (st, set)
    }

    #[test]
    fn factor_gradients_match_finite_differences() {
        let (st, mut set) = stack(1);
        let mut rng = rng_for(2, "batch");
        let batch = Batch {
            inputs: Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0)),
            targets: Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0)),
        };
        let base = st.evaluate(&set, &batch).unwrap();
        let keys: Vec<ModuleKey> = set.pairs.keys().cloned().collect();
        for key in keys {
            for factor in 0..2 {
                for idx in [(0usize, 1usize), (1, 0)] {
                    let h = 1e-6;
                    let get = |s: &mut AdapterSet| -> *mut f64 {
                        let p = s.pairs.get_mut(&key).unwrap();
                        if factor == 0 {
                            &mut p.a[idx]
                        } else {
                            &mut p.b[idx]
                        }
                    };
                    let orig = unsafe { *get(&mut set) };
                    unsafe { *get(&mut set) = orig + h };
                    let up = st.evaluate(&set, &batch).unwrap().loss;
                    unsafe { *get(&mut set) = orig - h };
                    let dn = st.evaluate(&set, &batch).unwrap().loss;
                    unsafe { *get(&mut set) = orig };
                    let fd = (up - dn) / (2.0 * h);
                    let an = if factor == 0 { base.grad_a[&key][idx] } else { base.grad_b[&key][idx] };
                    assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{key} {factor} {idx:?}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn constant_objective_has_zero_gradients() {
        let (_, set) = stack(3);
        let batch = Batch {
            inputs: Array2::zeros((1, 3)),
            targets: Array2::zeros((1, 2)),
        };
        let e = ConstantObjective(2.5).evaluate(&set, &batch).unwrap();
        assert_eq!(e.loss, 2.5);
        assert!(e.grad_b.values().all(|g| g.iter().all(|&v| v == 0.0)));
    }
}
