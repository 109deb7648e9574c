//! Naive-loop reference implementations and a finite-difference checker
//! shared by the integration tests.
#![allow(dead_code)]

use paca_core::params::ParamStore;
use paca_core::tape::{Tape, Var};
use paca_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(dims: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(-scale..scale)).unwrap()
}

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let d = t.dims();
    assert_eq!(d.len(), 2);
    (0..d[0])
        .map(|i| t.data()[i * d[1]..(i + 1) * d[1]].to_vec())
        .collect()
}

pub fn from_mat(m: &Mat) -> Tensor<f64> {
    Tensor::new(&[m.len(), m[0].len()], m.concat()).unwrap()
}

pub fn param(store: &ParamStore<f64>, name: &str) -> Tensor<f64> {
    store
        .get(
            store
                .id(name)
                .unwrap_or_else(|| panic!("no parameter {name}")),
        )
        .clone()
}

pub fn param_mat(store: &ParamStore<f64>, name: &str) -> Mat {
    to_mat(&param(store, name))
}

pub fn param_vec(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    param(store, name).data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len())
        .map(|j| a.iter().map(|r| r[j]).collect())
        .collect()
}

pub fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let mut y = matmul(x, w);
    for row in &mut y {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
    y
}

pub fn linear_named(store: &ParamStore<f64>, prefix: &str, x: &Mat) -> Mat {
    linear(
        x,
        &param_mat(store, &format!("{prefix}.weight")),
        &param_vec(store, &format!("{prefix}.bias")),
    )
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn softmax_rows(a: &Mat) -> Mat {
    a.iter().map(|r| softmax(r)).collect()
}

pub fn softmax_cols(a: &Mat) -> Mat {
    transpose(&softmax_rows(&transpose(a)))
}

pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + eps).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

pub fn norm_named(store: &ParamStore<f64>, prefix: &str, x: &Mat) -> Mat {
    layer_norm(
        x,
        &param_vec(store, &format!("{prefix}.weight")),
        &param_vec(store, &format!("{prefix}.bias")),
        1e-6,
    )
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_mat(a: &Mat) -> Mat {
    a.iter()
        .map(|r| r.iter().map(|&v| gelu(v)).collect())
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

/// Cross-correlation of a `[H, W, Cin]` map (rows of `x` in raster order)
/// with `w[k, k, Cin/g, Cout]`, zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (h, w): (usize, usize),
    cin: usize,
    wt: &[f64],
    k: usize,
    cout: usize,
    bias: &[f64],
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, (usize, usize)) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let cig = cin / groups;
    let cog = cout / groups;
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let g = co / cog;
                let mut acc = bias[co];
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cig {
                            let xv = x[(iy as usize * w + ix as usize) * cin + g * cig + ci];
                            let wv = wt[((ky * k + kx) * cig + ci) * cout + co];
                            acc += xv * wv;
                        }
                    }
                }
                out[(oy * wo + ox) * cout + co] = acc;
            }
        }
    }
    (out, (ho, wo))
}

pub fn conv_named(
    store: &ParamStore<f64>,
    prefix: &str,
    x: &Mat,
    hw: (usize, usize),
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Mat, (usize, usize)) {
    let wt = param(store, &format!("{prefix}.weight"));
    let (k, cout) = (wt.dims()[0], wt.dims()[3]);
    let cin = x[0].len();
    let (out, ohw) = conv2d(
        &x.concat(),
        hw,
        cin,
        wt.data(),
        k,
        cout,
        &param_vec(store, &format!("{prefix}.bias")),
        stride,
        pad,
        groups,
    );
    (out.chunks(cout).map(|c| c.to_vec()).collect(), ohw)
}

/// Multi-head attention of queries from `x` over keys/values from `kv`,
/// projection weights under `prefix`. Returns `(out, attn[h][N][M])`.
pub fn attend(
    store: &ParamStore<f64>,
    prefix: &str,
    x: &Mat,
    kv: &Mat,
    heads: usize,
) -> (Mat, Vec<Mat>) {
    let q = linear_named(store, &format!("{prefix}.q"), x);
    let k = linear_named(store, &format!("{prefix}.k"), kv);
    let v = linear_named(store, &format!("{prefix}.v"), kv);
    let c = x[0].len();
    let d = c / heads;
    let mut merged = vec![vec![0.0; c]; x.len()];
    let mut attns = Vec::new();
    for h in 0..heads {
        let cols = |m: &Mat| -> Mat { m.iter().map(|r| r[h * d..(h + 1) * d].to_vec()).collect() };
        let (qh, kh, vh) = (cols(&q), cols(&k), cols(&v));
        let scores: Mat = matmul(&qh, &transpose(&kh))
            .into_iter()
            .map(|r| r.into_iter().map(|s| s / (d as f64).sqrt()).collect())
            .collect();
        let a = softmax_rows(&scores);
        let o = matmul(&a, &vh);
        for (i, row) in o.iter().enumerate() {
            merged[i][h * d..(h + 1) * d].copy_from_slice(row);
        }
        attns.push(a);
    }
    (
        linear_named(store, &format!("{prefix}.proj"), &merged),
        attns,
    )
}

/// Cluster assignment and PaCa tokens for `x` under `prefix`.
pub fn paca_tokens(
    store: &ParamStore<f64>,
    prefix: &str,
    x: &Mat,
    hw: (usize, usize),
) -> (Mat, Mat) {
    let (u, _) = conv_named(store, &format!("{prefix}.cluster.conv"), x, hw, 1, 1, 1);
    let logits = linear_named(store, &format!("{prefix}.cluster.linear"), &gelu_mat(&u));
    let clusters = softmax_cols(&logits);
    let z = matmul(&transpose(&clusters), x);
    (
        clusters,
        norm_named(store, &format!("{prefix}.token_norm"), &z),
    )
}

pub fn nested_tokens(
    store: &ParamStore<f64>,
    prefix: &str,
    x: &Mat,
    hw: (usize, usize),
    patch: usize,
) -> Mat {
    let (z, _) = conv_named(store, &format!("{prefix}.reduce.conv"), x, hw, patch, 0, 1);
    norm_named(store, &format!("{prefix}.reduce.norm"), &z)
}

pub fn mblock(store: &ParamStore<f64>, prefix: &str, x: &Mat, hw: (usize, usize)) -> Mat {
    let hidden = linear_named(store, &format!("{prefix}.fc1"), x);
    let e = hidden[0].len();
    let (mixed, _) = conv_named(store, &format!("{prefix}.dwconv"), &hidden, hw, 1, 1, e);
    linear_named(store, &format!("{prefix}.fc2"), &gelu_mat(&mixed))
}

/// Central-difference gradient check. `f` maps the leaf vars to any
/// tensor; the loss is `Σ out ⊙ R` for a fixed random `R`. Returns the
/// worst `|a − n| / max(|a|, |n|)` over elements whose absolute
/// difference exceeds `floor`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    grad_errors(inputs, seed, f).0
}

/// `(worst relative error, worst absolute difference)` of [`grad_check`].
pub fn grad_errors<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> (f64, f64)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut r = rng(seed ^ 0xFD);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).dims().to_vec()
    };
    let weights = uniform(&probe, 1.0, &mut r);
    let loss_of = |vals: &[Tensor<f64>], grad: bool| -> (f64, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let out = f(&mut tape, &vars);
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let value = tape.value(loss).data()[0];
        if !grad {
            return (value, Vec::new());
        }
        tape.backward(loss).unwrap();
        let grads = vars
            .iter()
            .zip(vals)
            .map(|(&v, t)| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.dims()).unwrap())
            })
            .collect();
        (value, grads)
    };
    let (_, analytic) = loss_of(inputs, true);
    let h = 1e-5;
    let floor = 1e-9;
    let mut worst: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut vals = inputs.to_vec();
            vals[i].data_mut()[j] += h;
            let (plus, _) = loss_of(&vals, false);
            vals[i].data_mut()[j] -= 2.0 * h;
            let (minus, _) = loss_of(&vals, false);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[j];
            let diff = (a - numeric).abs();
            worst_abs = worst_abs.max(diff);
            if diff > floor {
                worst = worst.max(diff / a.abs().max(numeric.abs()));
            }
        }
    }
    (worst, worst_abs)
}
