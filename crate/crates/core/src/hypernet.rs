//! The transfer network.
//!
//! Per transfer unit: both sides of the block context are denoised, summed
//! with position/segment/source embeddings, and fed to one multi-head
//! cross-attention block in which target tokens are the queries and the
//! concatenated source tokens supply keys and values. A two-layer decoder maps
//! every target row to a block delta; only rows of `TargetB` tokens are kept
//! and reassembled into `delta_b` (`d_out x r`). `A` is never predicted.
//!
//! Every forward function has a matching backward that accumulates into a
//! gradient-shaped [`HyperNetParams`].

use ndarray::{s, Array1, Array2, Axis};

use crate::context::GroupContext;
use crate::denoise::{
    denoise_backward, denoise_forward, descriptor_matrix, DenoiseCache, GateParams, ViewProjections,
};
use crate::error::{FuseError, Result};
use crate::nn::{relu, relu_backward, rng_for, xavier, Linear};
use crate::store::{LoraPair, ModuleKey, TensorRecord};
use crate::svd::spectral_norm;

#[derive(Debug, Clone, PartialEq)]
pub struct HyperNetConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub block_rows: usize,
    pub max_rank: usize,
    pub descriptor_len: usize,
    pub n_sources: usize,
    pub n_groups: usize,
    /// Adds position/segment/source vectors to the denoised tokens.
    pub encodings: bool,
    pub alpha_init: f64,
    pub mu_gate: f64,
    pub seed: u64,
}

impl Default for HyperNetConfig {
    fn default() -> Self {
        HyperNetConfig {
            embed_dim: 1024,
            heads: 8,
            max_positions: 4096,
            block_rows: 8,
            max_rank: 8,
            descriptor_len: 8,
            n_sources: 1,
            n_groups: 1,
            encodings: true,
            alpha_init: 0.3,
            mu_gate: 0.10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionTable {
    pub table: Array2<f64>,
    /// Rows: TargetA, TargetB, SourceA, SourceB.
    pub segment: Array2<f64>,
    pub source: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub hidden: Linear,
    pub out: Linear,
}

/// All trainable state: the network weights plus one `alpha` per group.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperNetParams {
    pub views: ViewProjections,
    pub gate: GateParams,
    pub positions: PositionTable,
    pub attention: Attention,
    pub decoder: Decoder,
    pub alphas: Array1<f64>,
    pub encodings: bool,
}

/// A named, flat view of one parameter tensor.
pub struct ParamBlock<'a> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub values: &'a [f64],
}

fn flat(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameters are contiguous")
}

fn flat_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are contiguous")
}

fn flat1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameters are contiguous")
}

fn flat1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are contiguous")
}

impl HyperNetParams {
    pub fn new(cfg: &HyperNetConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
            return Err(FuseError::Invalid(format!(
                "embedding dim {d} is not divisible by {} heads",
                cfg.heads
            )));
        }
        if d < 2 || cfg.block_rows == 0 || cfg.max_rank == 0 || cfg.descriptor_len == 0 {
            return Err(FuseError::Invalid("hypernet dimensions must be positive (d >= 2)".into()));
        }
        let seed = cfg.seed;
        let input = cfg.block_rows * cfg.max_rank;
        let lin = |tag: &str, i: usize, o: usize| Linear::xavier(i, o, &mut rng_for(seed, tag));
        Ok(HyperNetParams {
            views: ViewProjections {
                row: lin("views.row", input, d),
                col: lin("views.col", input, d),
                block_rows: cfg.block_rows,
                max_rank: cfg.max_rank,
            },
            gate: GateParams::new(cfg.descriptor_len, d, cfg.mu_gate, &mut rng_for(seed, "gate")),
            positions: PositionTable {
                table: xavier(cfg.max_positions, d, &mut rng_for(seed, "pos.table")),
                segment: xavier(4, d, &mut rng_for(seed, "pos.segment")),
                source: xavier(cfg.n_sources.max(1), d, &mut rng_for(seed, "pos.source")),
            },
            attention: Attention {
                query: lin("attn.query", d, d),
                // Softmax ignores a key bias, so it stays zero and untrained.
                key: Linear {
                    bias: Array1::zeros(d),
                    ..lin("attn.key", d, d)
                },
                value: lin("attn.value", d, d),
                output: lin("attn.output", d, d),
                heads: cfg.heads,
            },
            decoder: Decoder {
                hidden: lin("dec.hidden", d, 4 * d),
                out: Linear::zeros(4 * d, input),
            },
            alphas: Array1::from_elem(cfg.n_groups, cfg.alpha_init),
            encodings: cfg.encodings,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.views.embed_dim()
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, v) in z.blocks_mut() {
            v.fill(0.0);
        }
        z
    }

    pub fn blocks(&self) -> Vec<ParamBlock<'_>> {
        fn b2<'a>(name: &'static str, a: &'a Array2<f64>) -> ParamBlock<'a> {
            ParamBlock {
                name,
                shape: vec![a.nrows(), a.ncols()],
                values: flat(a),
            }
        }
        fn b1<'a>(name: &'static str, a: &'a Array1<f64>) -> ParamBlock<'a> {
            ParamBlock {
                name,
                shape: vec![a.len()],
                values: flat1(a),
            }
        }
        vec![
            b2("views.row.weight", &self.views.row.weight),
            b1("views.row.bias", &self.views.row.bias),
            b2("views.col.weight", &self.views.col.weight),
            b1("views.col.bias", &self.views.col.bias),
            b2("gate.hidden.weight", &self.gate.hidden.weight),
            b1("gate.hidden.bias", &self.gate.hidden.bias),
            b2("gate.out.weight", &self.gate.out.weight),
            b1("gate.out.bias", &self.gate.out.bias),
            ParamBlock {
                name: "gate.mu",
                shape: vec![1],
                values: std::slice::from_ref(&self.gate.mu_gate),
            },
            b2("pos.table", &self.positions.table),
            b2("pos.segment", &self.positions.segment),
            b2("pos.source", &self.positions.source),
            b2("attn.query.weight", &self.attention.query.weight),
            b1("attn.query.bias", &self.attention.query.bias),
            b2("attn.key.weight", &self.attention.key.weight),
            b2("attn.value.weight", &self.attention.value.weight),
            b1("attn.value.bias", &self.attention.value.bias),
            b2("attn.output.weight", &self.attention.output.weight),
            b1("attn.output.bias", &self.attention.output.bias),
            b2("dec.hidden.weight", &self.decoder.hidden.weight),
            b1("dec.hidden.bias", &self.decoder.hidden.bias),
            b2("dec.out.weight", &self.decoder.out.weight),
            b1("dec.out.bias", &self.decoder.out.bias),
            b1("alphas", &self.alphas),
        ]
    }

    /// Mutable counterpart of [`blocks`](Self::blocks), in the same order.
    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("views.row.weight", flat_mut(&mut self.views.row.weight)),
            ("views.row.bias", flat1_mut(&mut self.views.row.bias)),
            ("views.col.weight", flat_mut(&mut self.views.col.weight)),
            ("views.col.bias", flat1_mut(&mut self.views.col.bias)),
            ("gate.hidden.weight", flat_mut(&mut self.gate.hidden.weight)),
            ("gate.hidden.bias", flat1_mut(&mut self.gate.hidden.bias)),
            ("gate.out.weight", flat_mut(&mut self.gate.out.weight)),
            ("gate.out.bias", flat1_mut(&mut self.gate.out.bias)),
            ("gate.mu", std::slice::from_mut(&mut self.gate.mu_gate)),
            ("pos.table", flat_mut(&mut self.positions.table)),
            ("pos.segment", flat_mut(&mut self.positions.segment)),
            ("pos.source", flat_mut(&mut self.positions.source)),
            ("attn.query.weight", flat_mut(&mut self.attention.query.weight)),
            ("attn.query.bias", flat1_mut(&mut self.attention.query.bias)),
            ("attn.key.weight", flat_mut(&mut self.attention.key.weight)),
            ("attn.value.weight", flat_mut(&mut self.attention.value.weight)),
            ("attn.value.bias", flat1_mut(&mut self.attention.value.bias)),
            ("attn.output.weight", flat_mut(&mut self.attention.output.weight)),
            ("attn.output.bias", flat1_mut(&mut self.attention.output.bias)),
            ("dec.hidden.weight", flat_mut(&mut self.decoder.hidden.weight)),
            ("dec.hidden.bias", flat1_mut(&mut self.decoder.hidden.bias)),
            ("dec.out.weight", flat_mut(&mut self.decoder.out.weight)),
            ("dec.out.bias", flat1_mut(&mut self.decoder.out.bias)),
            ("alphas", flat1_mut(&mut self.alphas)),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.values.iter().all(|v| v.is_finite()))
    }

    /// Checkpoint tensors, named `hypernet.<block>`.
    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.blocks()
            .into_iter()
            .map(|b| {
                let vals: Vec<f32> = b.values.iter().map(|&v| v as f32).collect();
                TensorRecord::from_f32(format!("hypernet.{}", b.name), b.shape, &vals)
            })
            .collect()
    }

    /// Fills parameters from checkpoint records; shapes must match.
    pub fn load_records(&mut self, records: &[TensorRecord]) -> Result<()> {
        let shapes: Vec<Vec<usize>> = self.blocks().into_iter().map(|b| b.shape).collect();
        for ((name, values), shape) in self.blocks_mut().into_iter().zip(shapes) {
            let full = format!("hypernet.{name}");
            let rec = records
                .iter()
                .find(|r| r.name == full)
                .ok_or_else(|| FuseError::Config(format!("checkpoint lacks {full}")))?;
            if rec.shape != shape {
                return Err(FuseError::TensorMismatch {
                    name: full,
                    reason: format!("expected shape {shape:?}, found {:?}", rec.shape),
                });
            }
            for (dst, src) in values.iter_mut().zip(rec.values()) {
                *dst = f64::from(src);
            }
        }
        Ok(())
    }
}

/// Flattened, descriptor-augmented inputs for one side of a context.
#[derive(Debug, Clone)]
pub struct PreparedSide {
    pub xr: Array2<f64>,
    pub xc: Array2<f64>,
    pub s: Array2<f64>,
    pub position: Vec<usize>,
    pub segment: Vec<usize>,
    pub source: Vec<Option<usize>>,
}

impl PreparedSide {
    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }
}

/// A context converted once into the matrices the network consumes.
#[derive(Debug, Clone)]
pub struct PreparedContext {
    pub key: ModuleKey,
    pub group_id: usize,
    pub alpha_index: usize,
    pub target: PreparedSide,
    pub source: PreparedSide,
    /// `(target row, valid rows)` for each `TargetB` token, in order.
    pub b_rows: Vec<(usize, usize)>,
    pub block_rows: usize,
    pub rank: usize,
    pub d_out: usize,
}

pub fn prepare_context(ctx: &GroupContext, params: &HyperNetParams) -> Result<PreparedContext> {
    let views = &params.views;
    if ctx.source_tokens.is_empty() {
        return Err(FuseError::NoSourceTokens);
    }
    if ctx.block_rows != views.block_rows {
        return Err(FuseError::Shape(format!(
            "context block rows {} but network expects {}",
            ctx.block_rows, views.block_rows
        )));
    }
    let s_len = params.gate.descriptor_len();
    let max_pos = params.positions.table.nrows();
    let n_src_rows = params.positions.source.nrows();

    let (xr, xc) = views.flatten(&ctx.target_tokens)?;
    let target = PreparedSide {
        xr,
        xc,
        s: descriptor_matrix(&ctx.target_descriptors, s_len)?,
        position: ctx.target_tokens.iter().map(|t| t.position).collect(),
        segment: ctx.target_tokens.iter().map(|t| t.segment.kind_index()).collect(),
        source: vec![None; ctx.target_tokens.len()],
    };
    if target.len() > max_pos {
        return Err(FuseError::SequenceTooLong {
            len: target.len(),
            max: max_pos,
        });
    }

    // Source positions restart at every source run.
    let mut position = Vec::with_capacity(ctx.source_tokens.len());
    let mut current: Option<usize> = None;
    let mut run = 0usize;
    for t in &ctx.source_tokens {
        let k = t.segment.source();
        if k != current {
            current = k;
            run = 0;
        }
        if run >= max_pos {
            return Err(FuseError::SequenceTooLong { len: run + 1, max: max_pos });
        }
        if let Some(k) = k {
            if k >= n_src_rows {
                return Err(FuseError::Invalid(format!(
                    "source index {k} but the network was built for {n_src_rows} sources"
                )));
            }
        }
        position.push(run);
        run += 1;
    }
    let (xr, xc) = views.flatten(&ctx.source_tokens)?;
    let source = PreparedSide {
        xr,
        xc,
        s: descriptor_matrix(&ctx.source_descriptors, s_len)?,
        position,
        segment: ctx.source_tokens.iter().map(|t| t.segment.kind_index()).collect(),
        source: ctx.source_tokens.iter().map(|t| t.segment.source()).collect(),
    };

    let b_rows: Vec<(usize, usize)> = ctx.target_b_tokens().map(|(i, t)| (i, t.valid_rows())).collect();
    if b_rows.is_empty() {
        return Err(FuseError::NoTargetB);
    }
    let d_out = ctx.d_out();
    if b_rows.iter().map(|&(_, v)| v).sum::<usize>() != d_out {
        return Err(FuseError::Shape("TargetB tokens do not cover d_out rows".into()));
    }
    if ctx.rank() > views.max_rank {
        return Err(FuseError::Shape(format!(
            "rank {} exceeds network max rank {}",
            ctx.rank(),
            views.max_rank
        )));
    }
    if ctx.unit.group.alpha_index >= params.alphas.len() {
        return Err(FuseError::Invalid(format!(
            "group alpha index {} but only {} alphas",
            ctx.unit.group.alpha_index,
            params.alphas.len()
        )));
    }
    Ok(PreparedContext {
        key: ctx.unit.target_pair.key.clone(),
        group_id: ctx.unit.group.id,
        alpha_index: ctx.unit.group.alpha_index,
        target,
        source,
        b_rows,
        block_rows: ctx.block_rows,
        rank: ctx.rank(),
        d_out,
    })
}

/// Denoised tokens and their encoded (attention-input) counterparts.
#[derive(Debug, Clone)]
pub struct SideForward {
    pub denoise: DenoiseCache,
    pub encoded: Array2<f64>,
}

impl SideForward {
    pub fn z(&self) -> &Array2<f64> {
        &self.denoise.z
    }
}

fn encodings_for(side: &PreparedSide, pos: &PositionTable, d: usize) -> Array2<f64> {
    let mut e = Array2::zeros((side.len(), d));
    for i in 0..side.len() {
        let mut row = e.row_mut(i);
        row += &pos.table.row(side.position[i]);
        row += &pos.segment.row(side.segment[i]);
        if let Some(k) = side.source[i] {
            row += &pos.source.row(k);
        }
    }
    e
}

fn embed_side(side: &PreparedSide, params: &HyperNetParams) -> Result<SideForward> {
    let denoise = denoise_forward(side.xr.clone(), side.xc.clone(), side.s.clone(), &params.views, &params.gate)?;
    let encoded = if params.encodings {
        &denoise.z + &encodings_for(side, &params.positions, params.embed_dim())
    } else {
        denoise.z.clone()
    };
    Ok(SideForward { denoise, encoded })
}

/// Denoise both sides and add encodings; returns `(target, source)`.
pub fn embed_context(prep: &PreparedContext, params: &HyperNetParams) -> Result<(SideForward, SideForward)> {
    if prep.source.is_empty() {
        return Err(FuseError::NoSourceTokens);
    }
    Ok((embed_side(&prep.target, params)?, embed_side(&prep.source, params)?))
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Per head, `n_t x n_s` attention weights.
    pub probs: Vec<Array2<f64>>,
    pub concat: Array2<f64>,
}

impl AttentionCache {
    /// Mean Shannon entropy of the attention rows over heads and queries.
    pub fn mean_entropy(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for p in &self.probs {
            for row in p.rows() {
                total -= row.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

fn softmax_rows(mut s: Array2<f64>) -> Array2<f64> {
    for mut row in s.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    s
}

/// Target-as-query multi-head cross-attention, followed by the output map.
pub fn cross_attend(zt: &Array2<f64>, zs: &Array2<f64>, attn: &Attention) -> Result<(Array2<f64>, AttentionCache)> {
    let d = attn.query.output_dim();
    if zt.ncols() != attn.query.input_dim() || zs.ncols() != attn.key.input_dim() {
        return Err(FuseError::Shape(format!(
            "attention inputs {:?}/{:?} for model width {d}",
            zt.dim(),
            zs.dim()
        )));
    }
    if zs.nrows() == 0 {
        return Err(FuseError::NoSourceTokens);
    }
    let h = attn.heads;
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = attn.query.forward(zt);
    let k = attn.key.forward(zs);
    let v = attn.value.forward(zs);
    let mut concat = Array2::zeros((zt.nrows(), d));
    let mut probs = Vec::with_capacity(h);
    for head in 0..h {
        let cols = s![.., head * dh..(head + 1) * dh];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let p = softmax_rows(scores);
        concat.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    let out = attn.output.forward(&concat);
    Ok((out, AttentionCache { q, k, v, probs, concat }))
}

/// Returns `(dL/dzt, dL/dzs)` and accumulates attention gradients.
pub fn cross_attend_backward(
    cache: &AttentionCache,
    zt: &Array2<f64>,
    zs: &Array2<f64>,
    dout: &Array2<f64>,
    attn: &Attention,
    grad: &mut Attention,
) -> (Array2<f64>, Array2<f64>) {
    let d = attn.query.output_dim();
    let h = attn.heads;
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let dconcat = attn.output.backward(&cache.concat, dout, &mut grad.output);
    let mut dq = Array2::zeros(cache.q.dim());
    let mut dk = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    for head in 0..h {
        let cols = s![.., head * dh..(head + 1) * dh];
        let p = &cache.probs[head];
        let d_o = dconcat.slice(cols);
        let dp = d_o.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&d_o));
        let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = p * &(&dp - &row_dot);
        dq.slice_mut(cols).assign(&(ds.dot(&cache.k.slice(cols)) * scale));
        dk.slice_mut(cols).assign(&(ds.t().dot(&cache.q.slice(cols)) * scale));
    }
    let dzt = attn.query.backward(zt, &dq, &mut grad.query);
    let dzs = attn.key.backward(zs, &dk, &mut grad.key) + attn.value.backward(zs, &dv, &mut grad.value);
    (dzt, dzs)
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    pub pre_hidden: Array2<f64>,
    pub hidden: Array2<f64>,
    pub out: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaPrediction {
    pub key: ModuleKey,
    pub delta_b: Array2<f64>,
    /// Mean attention-row entropy for the unit.
    pub entropy: f64,
}

/// Decodes every target row, then keeps only the `TargetB` blocks.
pub fn decode_delta(h: &Array2<f64>, prep: &PreparedContext, decoder: &Decoder) -> Result<(Array2<f64>, DecoderCache)> {
    if h.nrows() != prep.target.len() {
        return Err(FuseError::Shape(format!(
            "{} attention rows for {} target tokens",
            h.nrows(),
            prep.target.len()
        )));
    }
    if prep.b_rows.is_empty() {
        return Err(FuseError::NoTargetB);
    }
    let pre_hidden = decoder.hidden.forward(h);
    let hidden = relu(&pre_hidden);
    let out = decoder.out.forward(&hidden);
    let width = out.ncols() / prep.block_rows;
    let mut delta = Array2::zeros((prep.d_out, prep.rank));
    for (bi, &(row, valid)) in prep.b_rows.iter().enumerate() {
        for i in 0..valid {
            for j in 0..prep.rank {
                delta[[bi * prep.block_rows + i, j]] = out[[row, i * width + j]];
            }
        }
    }
    Ok((delta, DecoderCache { pre_hidden, hidden, out }))
}

fn decode_backward(
    cache: &DecoderCache,
    h: &Array2<f64>,
    prep: &PreparedContext,
    d_delta: &Array2<f64>,
    decoder: &Decoder,
    grad: &mut Decoder,
) -> Array2<f64> {
    let width = cache.out.ncols() / prep.block_rows;
    let mut dout = Array2::zeros(cache.out.dim());
    for (bi, &(row, valid)) in prep.b_rows.iter().enumerate() {
        for i in 0..valid {
            for j in 0..prep.rank {
                dout[[row, i * width + j]] = d_delta[[bi * prep.block_rows + i, j]];
            }
        }
    }
    let dhidden = decoder.out.backward(&cache.hidden, &dout, &mut grad.out);
    let dpre = relu_backward(&cache.pre_hidden, &dhidden);
    decoder.hidden.backward(h, &dpre, &mut grad.hidden)
}

/// Everything the backward pass of one unit needs.
#[derive(Debug, Clone)]
pub struct UnitForward {
    pub target: SideForward,
    pub source: SideForward,
    pub attention: AttentionCache,
    pub h: Array2<f64>,
    pub decoder: DecoderCache,
    pub prediction: DeltaPrediction,
}

pub fn forward_unit(prep: &PreparedContext, params: &HyperNetParams) -> Result<UnitForward> {
    let (target, source) = embed_context(prep, params)?;
    let (h, attention) = cross_attend(&target.encoded, &source.encoded, &params.attention)?;
    let (delta_b, decoder) = decode_delta(&h, prep, &params.decoder)?;
    let entropy = attention.mean_entropy();
    Ok(UnitForward {
        target,
        source,
        attention,
        h,
        decoder,
        prediction: DeltaPrediction {
            key: prep.key.clone(),
            delta_b,
            entropy,
        },
    })
}

fn encodings_backward(side: &PreparedSide, de: &Array2<f64>, grad: &mut PositionTable) {
    for i in 0..side.len() {
        let row = de.row(i);
        let mut t = grad.table.row_mut(side.position[i]);
        t += &row;
        let mut sg = grad.segment.row_mut(side.segment[i]);
        sg += &row;
        if let Some(k) = side.source[i] {
            let mut sr = grad.source.row_mut(k);
            sr += &row;
        }
    }
}

/// Backpropagates `dL/d(delta_b)` plus extra gradients on the denoised
/// embeddings (from the regularizer) into `grad`. Alphas are left untouched.
pub fn backward_unit(
    prep: &PreparedContext,
    fwd: &UnitForward,
    params: &HyperNetParams,
    d_delta_b: &Array2<f64>,
    dz_target_extra: Option<&Array2<f64>>,
    dz_source_extra: Option<&Array2<f64>>,
    grad: &mut HyperNetParams,
) {
    let dh = decode_backward(&fwd.decoder, &fwd.h, prep, d_delta_b, &params.decoder, &mut grad.decoder);
    let (mut dzt, mut dzs) = cross_attend_backward(
        &fwd.attention,
        &fwd.target.encoded,
        &fwd.source.encoded,
        &dh,
        &params.attention,
        &mut grad.attention,
    );
    if params.encodings {
        encodings_backward(&prep.target, &dzt, &mut grad.positions);
        encodings_backward(&prep.source, &dzs, &mut grad.positions);
    }
    if let Some(extra) = dz_target_extra {
        dzt += extra;
    }
    if let Some(extra) = dz_source_extra {
        dzs += extra;
    }
    denoise_backward(&fwd.target.denoise, &dzt, &params.views, &params.gate, &mut grad.views, &mut grad.gate);
    denoise_backward(&fwd.source.denoise, &dzs, &params.views, &params.gate, &mut grad.views, &mut grad.gate);
}

/// `B' = B + alpha * delta_b`; `A` is copied unchanged.
pub fn apply_patch(pair: &LoraPair, delta_b: &Array2<f64>, alpha: f64) -> Result<LoraPair> {
    if pair.b.dim() != delta_b.dim() {
        return Err(FuseError::Shape(format!(
            "delta_b {:?} does not match B {:?}",
            delta_b.dim(),
            pair.b.dim()
        )));
    }
    let mut b = pair.b.clone();
    b.scaled_add(alpha, delta_b);
    Ok(LoraPair {
        key: pair.key.clone(),
        a: pair.a.clone(),
        b,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityBound {
    /// `||(B + alpha dB) A - B A||_F`
    pub lhs: f64,
    /// `|alpha| ||dB A||_F`
    pub frob_identity: f64,
    /// `|alpha| ||dB||_F sigma_max(A)`
    pub bound: f64,
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn stability_bound(pair: &LoraPair, delta_b: &Array2<f64>, alpha: f64) -> Result<StabilityBound> {
    let patched = apply_patch(pair, delta_b, alpha)?;
    let lhs = frobenius(&(patched.b.dot(&pair.a) - pair.b.dot(&pair.a)));
    let frob_identity = alpha.abs() * frobenius(&delta_b.dot(&pair.a));
    let bound = alpha.abs() * frobenius(delta_b) * spectral_norm(pair.a.view())?;
    Ok(StabilityBound {
        lhs,
        frob_identity,
        bound,
    })
}

pub fn frobenius_norm(m: &Array2<f64>) -> f64 {
    frobenius(m)
}
