//! Dense building blocks with hand-written backward passes.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mixes a run seed with a tag into an independent stream seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

/// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// `y = x W^T + b` applied row-wise; `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn xavier(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let weight = xavier(output, input, rng);
        let bound = (6.0 / (input + output) as f64).sqrt();
        let bias = Array1::from_shape_fn(output, |_| rng.random_range(-bound..bound));
        Linear { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn forward_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

/// Zeroes `dy` where the pre-activation was not strictly positive.
pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    out.zip_mut_with(pre, |d, &p| {
        if p <= 0.0 {
            *d = 0.0
        }
    });
    out
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise LayerNorm without affine parameters. A constant row maps to zero.
/// Returns the normalized rows and each row's `1 / sqrt(var + eps)`.
pub fn layer_norm_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let (n, d) = x.dim();
    let mut y = Array2::zeros((n, d));
    let mut inv = Array1::zeros(n);
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        inv[i] = s;
        let first = row[0];
        if row.iter().all(|&v| v == first) {
            continue;
        }
        for (j, &v) in row.iter().enumerate() {
            y[[i, j]] = (v - mean) * s;
        }
    }
    (y, inv)
}

pub fn layer_norm_backward(y: &Array2<f64>, inv: &Array1<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let d = y.ncols() as f64;
    let mut dx = Array2::zeros(y.dim());
    for i in 0..y.nrows() {
        let yr = y.row(i);
        let dr = dy.row(i);
        let mean_dy = dr.sum() / d;
        let mean_dyy = dr.dot(&yr) / d;
        for j in 0..y.ncols() {
            dx[[i, j]] = inv[i] * (dr[j] - mean_dy - yr[j] * mean_dyy);
        }
    }
    dx
}
