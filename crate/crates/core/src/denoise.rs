//! Conflict-aware denoising: row/column views of each block token, a gate
//! driven by the token's singular values, LayerNorm, and the rectified
//! distribution matching (sliced Wasserstein) regularizer.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::context::{BlockToken, SvdDescriptor};
use crate::error::{FuseError, Result};
use crate::nn::{layer_norm_backward, layer_norm_rows, relu, relu_backward, rng_for, Linear};

/// `P_row` reads the token row-major, `P_col` reads its transpose. Tokens with
/// rank below `max_rank` are zero-padded on the right before flattening.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewProjections {
    pub row: Linear,
    pub col: Linear,
    pub block_rows: usize,
    pub max_rank: usize,
}

impl ViewProjections {
    pub fn input_dim(&self) -> usize {
        self.block_rows * self.max_rank
    }

    pub fn embed_dim(&self) -> usize {
        self.row.output_dim()
    }

    fn check(&self, token: &BlockToken) -> Result<()> {
        let (c, r) = token.data.dim();
        if c != self.block_rows || r > self.max_rank {
            return Err(FuseError::Shape(format!(
                "token {c}x{r} does not fit views built for {}x{}",
                self.block_rows, self.max_rank
            )));
        }
        Ok(())
    }

    /// Flattened row-major and transposed views, one row per token.
    pub fn flatten(&self, tokens: &[BlockToken]) -> Result<(Array2<f64>, Array2<f64>)> {
        let (c, rm) = (self.block_rows, self.max_rank);
        let mut xr = Array2::zeros((tokens.len(), c * rm));
        let mut xc = Array2::zeros((tokens.len(), c * rm));
        for (t, tok) in tokens.iter().enumerate() {
            self.check(tok)?;
            for ((i, j), &v) in tok.data.indexed_iter() {
                xr[[t, i * rm + j]] = v;
                xc[[t, j * c + i]] = v;
            }
        }
        Ok((xr, xc))
    }
}

pub fn view_features(token: &BlockToken, views: &ViewProjections) -> Result<(Array1<f64>, Array1<f64>)> {
    let (xr, xc) = views.flatten(std::slice::from_ref(token))?;
    let f_row = views.row.forward(&xr).row(0).to_owned();
    let f_col = views.col.forward(&xc).row(0).to_owned();
    Ok((f_row, f_col))
}

/// Two-layer ReLU MLP over descriptors plus a scalar shift.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub hidden: Linear,
    pub out: Linear,
    pub mu_gate: f64,
}

impl GateParams {
    /// Output layer zeroed, so the initial gate is the constant `clip(mu_gate)`.
    pub fn new(s_len: usize, embed_dim: usize, mu_gate: f64, rng: &mut impl Rng) -> Self {
        GateParams {
            hidden: Linear::xavier(s_len, 4 * s_len, rng),
            out: Linear::zeros(4 * s_len, embed_dim),
            mu_gate,
        }
    }

    pub fn descriptor_len(&self) -> usize {
        self.hidden.input_dim()
    }
}

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

pub fn gate_values(s: &SvdDescriptor, params: &GateParams) -> Array1<f64> {
    let x = Array1::from(s.values.clone());
    let h = params.hidden.forward_vec(&x).mapv(|v| v.max(0.0));
    params.out.forward_vec(&h).mapv(|m| clip01((m + params.mu_gate).max(0.0)))
}

/// Intermediate values of one side's denoising pass, kept for backward.
#[derive(Debug, Clone)]
pub struct DenoiseCache {
    pub xr: Array2<f64>,
    pub xc: Array2<f64>,
    pub s: Array2<f64>,
    pub f: Array2<f64>,
    pub gate_pre_hidden: Array2<f64>,
    pub gate_hidden: Array2<f64>,
    pub gate_pre: Array2<f64>,
    pub gate: Array2<f64>,
    pub z: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Stacks per-token descriptors into an `n x s_len` matrix.
pub fn descriptor_matrix(descriptors: &[SvdDescriptor], s_len: usize) -> Result<Array2<f64>> {
    let mut s = Array2::zeros((descriptors.len(), s_len));
    for (i, d) in descriptors.iter().enumerate() {
        if d.values.len() != s_len {
            return Err(FuseError::Shape(format!(
                "descriptor of length {} where {s_len} expected",
                d.values.len()
            )));
        }
        for (j, &v) in d.values.iter().enumerate() {
            s[[i, j]] = v;
        }
    }
    Ok(s)
}

/// Forward pass from pre-flattened inputs; see [`denoise_tokens`].
pub fn denoise_forward(
    xr: Array2<f64>,
    xc: Array2<f64>,
    s: Array2<f64>,
    views: &ViewProjections,
    gate: &GateParams,
) -> Result<DenoiseCache> {
    if views.embed_dim() < 2 {
        return Err(FuseError::Invalid("LayerNorm needs an embedding dimension of at least 2".into()));
    }
    let f = views.row.forward(&xr) + views.col.forward(&xc);
    let gate_pre_hidden = gate.hidden.forward(&s);
    let gate_hidden = relu(&gate_pre_hidden);
    let gate_pre = gate.out.forward(&gate_hidden) + gate.mu_gate;
    let g = gate_pre.mapv(clip01);
    let v = &f * &g;
    let (z, inv_std) = layer_norm_rows(&v);
    Ok(DenoiseCache {
        xr,
        xc,
        s,
        f,
        gate_pre_hidden,
        gate_hidden,
        gate_pre,
        gate: g,
        z,
        inv_std,
    })
}

/// Backpropagates `dz` into view and gate parameter gradients.
pub fn denoise_backward(
    cache: &DenoiseCache,
    dz: &Array2<f64>,
    views: &ViewProjections,
    gate: &GateParams,
    d_views: &mut ViewProjections,
    d_gate: &mut GateParams,
) {
    let dv = layer_norm_backward(&cache.z, &cache.inv_std, dz);
    let df = &dv * &cache.gate;
    let mut dpre = &dv * &cache.f;
    // clip(ReLU(x)) passes gradient only strictly inside (0, 1).
    dpre.zip_mut_with(&cache.gate_pre, |d, &p| {
        if p <= 0.0 || p >= 1.0 {
            *d = 0.0
        }
    });
    d_gate.mu_gate += dpre.sum();
    let dh = gate.out.backward(&cache.gate_hidden, &dpre, &mut d_gate.out);
    let dh = relu_backward(&cache.gate_pre_hidden, &dh);
    gate.hidden.backward(&cache.s, &dh, &mut d_gate.hidden);
    views.row.backward(&cache.xr, &df, &mut d_views.row);
    views.col.backward(&cache.xc, &df, &mut d_views.col);
}

/// `z = LN((f_row + f_col) * g)` per token, stacked in token order.
pub fn denoise_tokens(
    tokens: &[BlockToken],
    descriptors: &[SvdDescriptor],
    views: &ViewProjections,
    gate: &GateParams,
) -> Result<Array2<f64>> {
    if tokens.len() != descriptors.len() {
        return Err(FuseError::Shape(format!(
            "{} tokens but {} descriptors",
            tokens.len(),
            descriptors.len()
        )));
    }
    let (xr, xc) = views.flatten(tokens)?;
    let s = descriptor_matrix(descriptors, gate.descriptor_len())?;
    Ok(denoise_forward(xr, xc, s, views, gate)?.z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdmConfig {
    pub n_proj: usize,
    pub mu_target: f64,
    pub sigma_target: f64,
    pub seed: u64,
}

impl Default for RdmConfig {
    fn default() -> Self {
        RdmConfig {
            n_proj: 2048,
            mu_target: 0.0,
            sigma_target: 1.0,
            seed: 0,
        }
    }
}

/// `n_proj x d` directions, each drawn standard normal and scaled to unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBank {
    pub p: Array2<f64>,
}

impl ProjectionBank {
    pub fn new(seed: u64, n_proj: usize, d: usize) -> Result<Self> {
        if n_proj == 0 || d == 0 {
            return Err(FuseError::Invalid("projection bank needs n_proj >= 1 and d >= 1".into()));
        }
        let mut rng = rng_for(seed, "rdm.projections");
        let mut p: Array2<f64> = Array2::from_shape_fn((n_proj, d), |_| StandardNormal.sample(&mut rng));
        for mut row in p.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row /= norm;
        }
        Ok(ProjectionBank { p })
    }

    pub fn from_matrix(p: Array2<f64>) -> Self {
        ProjectionBank { p }
    }

    pub fn dim(&self) -> usize {
        self.p.ncols()
    }
}

/// Source of prior samples `y`.
pub trait PriorSampler {
    fn draw(&mut self, n: usize, d: usize) -> Array2<f64>;
}

/// i.i.d. `N(mu_target, sigma_target^2)` entries.
pub struct GaussianPrior {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl GaussianPrior {
    pub fn new(cfg: &RdmConfig, stream_seed: u64) -> Result<Self> {
        let normal = Normal::new(cfg.mu_target, cfg.sigma_target)
            .map_err(|e| FuseError::Invalid(format!("prior: {e}")))?;
        Ok(GaussianPrior {
            rng: rng_for(stream_seed, "rdm.prior"),
            normal,
        })
    }
}

impl PriorSampler for GaussianPrior {
    fn draw(&mut self, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| self.normal.sample(&mut self.rng))
    }
}

fn sorted_with_order(col: ndarray::ArrayView1<'_, f64>) -> (Vec<usize>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..col.len()).collect();
    idx.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
    let vals = idx.iter().map(|&i| col[i]).collect();
    (idx, vals)
}

/// Sliced loss against a given prior sample together with `dL/dz`.
///
/// For every projection row `p`, the per-token values `p . ReLU(z_i)` and
/// `p . ReLU(y_i)` are sorted and compared; the loss is the mean squared gap
/// over all `n_proj * n` sorted entries. Gradients follow the sorting
/// permutation; the ReLU derivative at zero is zero.
pub fn rdm_against_with_grad(z: &Array2<f64>, y: &Array2<f64>, bank: &ProjectionBank) -> Result<(f64, Array2<f64>)> {
    let (n, d) = z.dim();
    if n == 0 {
        return Err(FuseError::Invalid("rdm loss needs at least one token".into()));
    }
    if y.dim() != (n, d) || bank.dim() != d {
        return Err(FuseError::Shape(format!(
            "z {:?}, y {:?}, projections {:?}",
            z.dim(),
            y.dim(),
            bank.p.dim()
        )));
    }
    let n_proj = bank.p.nrows();
    let scale = 1.0 / (n_proj * n) as f64;
    let u = relu(z).dot(&bank.p.t());
    let v = relu(y).dot(&bank.p.t());
    let mut loss = 0.0;
    let mut du = Array2::zeros((n, n_proj));
    for p in 0..n_proj {
        let (order, us) = sorted_with_order(u.column(p));
        let (_, vs) = sorted_with_order(v.column(p));
        let mut acc = 0.0;
        for j in 0..n {
            let gap = us[j] - vs[j];
            acc += gap * gap;
            du[[order[j], p]] = 2.0 * gap * scale;
        }
        loss += acc;
    }
    let dz = relu_backward(z, &du.dot(&bank.p));
    Ok((loss * scale, dz))
}

pub fn rdm_against(z: &Array2<f64>, y: &Array2<f64>, bank: &ProjectionBank) -> Result<f64> {
    rdm_against_with_grad(z, y, bank).map(|(l, _)| l)
}

/// Draws `y` from `sampler` and evaluates the sliced loss of `z` against it.
pub fn rdm_loss(z: &Array2<f64>, bank: &ProjectionBank, sampler: &mut dyn PriorSampler) -> Result<f64> {
    let y = sampler.draw(z.nrows(), z.ncols());
    rdm_against(z, &y, bank)
}
