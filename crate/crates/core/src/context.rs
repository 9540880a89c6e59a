//! Block-token contexts built from adapter factors.
//!
//! Both `A^T` (`d_in x r`) and `B` (`d_out x r`) are tiled along their long
//! axis into `c x r` row blocks, zero-padding the tail block. The target side
//! is `[Blk(A_t^T); Blk(B_t)]`; the source side concatenates the same layout
//! for every source in index order. Each token carries the singular values of
//! its unpadded rows.

use ndarray::{s, Array2};

use crate::error::{FuseError, Result};
use crate::store::LoraPair;
use crate::svd::singular_values;
use crate::topology::TransferUnit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Segment {
    TargetA,
    TargetB,
    SourceA(usize),
    SourceB(usize),
}

impl Segment {
    /// Row in the segment embedding table.
    pub fn kind_index(self) -> usize {
        match self {
            Segment::TargetA => 0,
            Segment::TargetB => 1,
            Segment::SourceA(_) => 2,
            Segment::SourceB(_) => 3,
        }
    }

    pub fn source(self) -> Option<usize> {
        match self {
            Segment::SourceA(k) | Segment::SourceB(k) => Some(k),
            _ => None,
        }
    }

    pub fn label(self) -> String {
        match self {
            Segment::TargetA => "target_a".into(),
            Segment::TargetB => "target_b".into(),
            Segment::SourceA(k) => format!("source_a{k}"),
            Segment::SourceB(k) => format!("source_b{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockToken {
    /// `c x r`, rows past `c - pad_rows` are zero.
    pub data: Array2<f64>,
    pub segment: Segment,
    pub position: usize,
    pub pad_rows: usize,
}

impl BlockToken {
    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn valid_rows(&self) -> usize {
        self.data.nrows() - self.pad_rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvdDescriptor {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupContext {
    pub unit: TransferUnit,
    pub block_rows: usize,
    pub target_tokens: Vec<BlockToken>,
    pub source_tokens: Vec<BlockToken>,
    pub target_descriptors: Vec<SvdDescriptor>,
    pub source_descriptors: Vec<SvdDescriptor>,
}

impl GroupContext {
    pub fn rank(&self) -> usize {
        self.unit.target_pair.rank()
    }

    pub fn d_out(&self) -> usize {
        self.unit.target_pair.d_out()
    }

    pub fn target_b_tokens(&self) -> impl Iterator<Item = (usize, &BlockToken)> {
        self.target_tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.segment == Segment::TargetB)
    }
}

pub fn compute_delta_w(pair: &LoraPair) -> Result<Array2<f64>> {
    if pair.b.ncols() != pair.a.nrows() {
        return Err(FuseError::Shape(format!(
            "B is {:?} but A is {:?}",
            pair.b.dim(),
            pair.a.dim()
        )));
    }
    Ok(pair.b.dot(&pair.a))
}

/// Tiles the rows of `m` into `ceil(n / c)` tokens of `c` rows each.
pub fn blockify(m: &Array2<f64>, c: usize, segment: Segment) -> Result<Vec<BlockToken>> {
    let (n, r) = m.dim();
    if n == 0 || r == 0 {
        return Err(FuseError::Shape("cannot blockify an empty matrix".into()));
    }
    if c == 0 {
        return Err(FuseError::Invalid("block rows must be at least 1".into()));
    }
    let count = n.div_ceil(c);
    Ok((0..count)
        .map(|i| {
            let lo = i * c;
            let hi = ((i + 1) * c).min(n);
            let mut data = Array2::zeros((c, r));
            data.slice_mut(s![..hi - lo, ..]).assign(&m.slice(s![lo..hi, ..]));
            BlockToken {
                data,
                segment,
                position: i,
                pad_rows: c - (hi - lo),
            }
        })
        .collect())
}

/// Inverse of [`blockify`]: stacks token rows and drops padding.
pub fn unblockify(tokens: &[BlockToken], n: usize) -> Result<Array2<f64>> {
    let first = tokens
        .first()
        .ok_or_else(|| FuseError::Shape("no tokens to unblockify".into()))?;
    let (c, r) = first.data.dim();
    if tokens.iter().any(|t| t.data.dim() != (c, r)) {
        return Err(FuseError::Shape("tokens have inconsistent block shapes".into()));
    }
    if n == 0 || tokens.len() != n.div_ceil(c) {
        return Err(FuseError::Shape(format!(
            "{} tokens of {c} rows cannot hold exactly {n} rows",
            tokens.len()
        )));
    }
    let mut out = Array2::zeros((n, r));
    for (i, t) in tokens.iter().enumerate() {
        let lo = i * c;
        let hi = ((i + 1) * c).min(n);
        out.slice_mut(s![lo..hi, ..]).assign(&t.data.slice(s![..hi - lo, ..]));
    }
    Ok(out)
}

pub fn svd_descriptor(token: &BlockToken, s_len: usize) -> Result<SvdDescriptor> {
    if token.data.iter().any(|v| !v.is_finite()) {
        return Err(FuseError::NonFinite(format!("block token {}", token.position)));
    }
    let valid = token.data.slice(s![..token.valid_rows(), ..]);
    let mut values = singular_values(valid)?;
    values.resize(s_len, 0.0);
    Ok(SvdDescriptor { values })
}

fn pair_tokens(pair: &LoraPair, c: usize, seg_a: Segment, seg_b: Segment) -> Result<Vec<BlockToken>> {
    let at = pair.a.t().to_owned();
    let mut tokens = blockify(&at, c, seg_a)?;
    tokens.extend(blockify(&pair.b, c, seg_b)?);
    Ok(tokens)
}

fn describe(tokens: &[BlockToken], s_len: usize) -> Result<Vec<SvdDescriptor>> {
    tokens.iter().map(|t| svd_descriptor(t, s_len)).collect()
}

pub fn build_context(unit: &TransferUnit, c: usize, s_len: usize) -> Result<GroupContext> {
    let mut target_tokens = pair_tokens(&unit.target_pair, c, Segment::TargetA, Segment::TargetB)?;
    let mut source_tokens = Vec::new();
    for (k, pair) in &unit.source_pairs {
        source_tokens.extend(pair_tokens(pair, c, Segment::SourceA(*k), Segment::SourceB(*k))?);
    }
    for (i, t) in target_tokens.iter_mut().enumerate() {
        t.position = i;
    }
    for (i, t) in source_tokens.iter_mut().enumerate() {
        t.position = i;
    }
    let target_descriptors = describe(&target_tokens, s_len)?;
    let source_descriptors = describe(&source_tokens, s_len)?;
    Ok(GroupContext {
        unit: unit.clone(),
        block_rows: c,
        target_tokens,
        source_tokens,
        target_descriptors,
        source_descriptors,
    })
}

/// CSV rows `(unit, segment, position, s_1..s_len)` for both sides.
pub fn descriptor_rows(unit_id: &str, ctx: &GroupContext) -> Vec<Vec<String>> {
    ctx.target_tokens
        .iter()
        .zip(&ctx.target_descriptors)
        .chain(ctx.source_tokens.iter().zip(&ctx.source_descriptors))
        .map(|(t, d)| {
            let mut row = vec![unit_id.to_string(), t.segment.label(), t.position.to_string()];
            row.extend(d.values.iter().map(|v| v.to_string()));
            row
        })
        .collect()
}
