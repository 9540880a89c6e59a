//! Independent reference implementations and shared fixtures.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use lorafuse::config::{FusionConfig, ObjectiveKind};
use lorafuse::harness::{fusion_config, init_adapter, World};
use lorafuse::hypernet::HyperNetParams;
use lorafuse::nn::rng_for;
use lorafuse::store::{save_adapter, AdapterSet};
use lorafuse::surrogate::Batch;
use ndarray::Array2;
use rand::Rng;

/// Plain triple-loop product.
pub fn naive_matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let m = b.ncols();
    assert_eq!(k, b.nrows());
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[[i, t]] * b[[t, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

pub fn naive_frobenius(m: &Array2<f64>) -> f64 {
    let mut acc = 0.0;
    for v in m.iter() {
        acc += v * v;
    }
    acc.sqrt()
}

fn insertion_sort(v: &mut [f64]) {
    for i in 1..v.len() {
        let mut j = i;
        while j > 0 && v[j - 1] > v[j] {
            v.swap(j - 1, j);
            j -= 1;
        }
    }
}

/// Sliced distance between rectified rows of `z` and `y`: per projection,
/// sort both projected samples and average the squared gaps.
pub fn sw_oracle(z: &Array2<f64>, y: &Array2<f64>, p: &Array2<f64>) -> f64 {
    let (n, d) = z.dim();
    let mut total = 0.0;
    for k in 0..p.nrows() {
        let mut u = vec![0.0; n];
        let mut v = vec![0.0; n];
        for i in 0..n {
            for j in 0..d {
                u[i] += p[[k, j]] * z[[i, j]].max(0.0);
                v[i] += p[[k, j]] * y[[i, j]].max(0.0);
            }
        }
        insertion_sort(&mut u);
        insertion_sort(&mut v);
        for i in 0..n {
            total += (u[i] - v[i]) * (u[i] - v[i]);
        }
    }
    total / (p.nrows() * n) as f64
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations.
pub fn symmetric_eigenvalues(m: &Array2<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    for _ in 0..200 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum();
        let diag: f64 = (0..n).map(|i| a[[i, i]] * a[[i, i]]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[[i, i]]).collect()
}

/// Singular values from the eigenvalues of the smaller Gram matrix.
pub fn gram_singular_values(m: &Array2<f64>) -> Vec<f64> {
    let gram = if m.nrows() <= m.ncols() {
        naive_matmul(m, &m.t().to_owned())
    } else {
        naive_matmul(&m.t().to_owned(), m)
    };
    let mut s: Vec<f64> = symmetric_eigenvalues(&gram).into_iter().map(|l| l.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Tail alignment written directly from its definition.
pub fn map_layer_oracle(lt: usize, ls: usize, l: usize) -> usize {
    let shifted = l as i64 + ls as i64 - lt as i64;
    if shifted < 0 {
        0
    } else if shifted > ls as i64 - 1 {
        ls - 1
    } else {
        shifted as usize
    }
}

/// `(canonical type, rank)` pairs present in the target and in any source.
pub fn group_oracle(
    target: &[(usize, String, usize)],
    sources: &[Vec<(usize, String, usize)>],
    canonical: &BTreeSet<String>,
    aliases: &BTreeMap<String, String>,
) -> Vec<(String, usize)> {
    let canon = |t: &str| -> Option<String> {
        if let Some(c) = aliases.get(t) {
            return Some(c.clone());
        }
        if canonical.contains(t) {
            Some(t.to_string())
        } else {
            None
        }
    };
    let mut out = Vec::new();
    for (_, ty, r) in target {
        let Some(c) = canon(ty) else { continue };
        let hit = sources
            .iter()
            .any(|s| s.iter().any(|(_, sty, sr)| sr == r && canon(sty).as_deref() == Some(c.as_str())));
        if hit && !out.contains(&(c.clone(), *r)) {
            out.push((c, *r));
        }
    }
    out.sort();
    out
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// Adapters for the harness families with random, non-zero `B` factors.
pub struct GradFixture {
    pub world: World,
    pub target: AdapterSet,
    pub sources: Vec<AdapterSet>,
    pub batch: Batch,
    pub cfg: FusionConfig,
}

pub fn grad_fixture(seed: u64) -> GradFixture {
    let world = World::new(seed, Default::default()).unwrap();
    let mut rng = rng_for(seed, "fixture");
    let mut randomize_b = |mut set: AdapterSet| {
        for pair in set.pairs.values_mut() {
            pair.b = random_matrix(pair.b.nrows(), pair.b.ncols(), 0.2, &mut rng);
        }
        set
    };
    let target = randomize_b(init_adapter(&world.families[0], 8, seed, "t"));
    let sources = vec![
        randomize_b(init_adapter(&world.families[1], 8, seed, "s1")),
        randomize_b(init_adapter(&world.families[2], 8, seed, "s2")),
    ];
    let batch = world.sample(0, 0, 16, "check").unwrap();
    let mut cfg = fusion_config();
    cfg.train.seed = seed;
    GradFixture {
        world,
        target,
        sources,
        batch,
        cfg,
    }
}

/// Moves the network off its zero-decoder start so every block matters.
pub fn randomize_heads(params: &mut HyperNetParams, seed: u64) {
    let mut rng = rng_for(seed, "heads");
    for (name, values) in params.blocks_mut() {
        let scale = match name {
            "dec.out.weight" | "dec.out.bias" => 0.3,
            "gate.out.weight" | "gate.out.bias" => 0.5,
            _ => continue,
        };
        values.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    }
    let n = params.alphas.len();
    for (i, a) in params.alphas.iter_mut().enumerate() {
        *a = 0.3 - 0.6 * i as f64 / n as f64;
    }
}

/// Writes harness experts to `dir` and returns a config that fuses them.
pub fn harness_files(dir: &Path, seed: u64, preset: &str) -> FusionConfig {
    let mut world = World::new(seed, Default::default()).unwrap();
    let scenario = preset.parse::<lorafuse::harness::Preset>().unwrap().scenario("").unwrap();
    let (target, _) = world.expert(0, &[scenario.target_task]).unwrap();
    let target_path = dir.join("target.safetensors");
    save_adapter(&target, &target_path).unwrap();
    let mut sources = Vec::new();
    for (i, &(f, k)) in scenario.sources.iter().enumerate() {
        let (set, _) = world.expert(f, &[k]).unwrap();
        let p = dir.join(format!("source{i}.safetensors"));
        save_adapter(&set, &p).unwrap();
        sources.push(p);
    }
    let mut cfg = fusion_config();
    cfg.adapters.target = target_path;
    cfg.adapters.sources = sources;
    cfg.objective.kind = ObjectiveKind::Harness;
    cfg.objective.preset = preset.into();
    cfg.objective.seed = seed;
    cfg.train.seed = seed;
    cfg.output.dir = dir.join("out");
    cfg
}
