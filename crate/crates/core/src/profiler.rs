//! Exact FLOP accounting for the attention mechanisms.
//!
//! Convention: one multiply-add is 2 FLOPs. Softmax and layer norm cost 2
//! FLOPs per element and are reported separately in `normalization`; they
//! are not part of `total`. Analytic counts match the tape's instrumented
//! counters exactly (convolutions count taps over the zero-padded input).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{Attention, Mechanism};
use crate::blocks::MBlock;
use crate::error::{Error, Result};
use crate::params::{init_tensor, Init, ParamStore};
use crate::tape::{FlopScope, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct FlopReport {
    pub mechanism: Mechanism,
    pub n: usize,
    pub channels: usize,
    pub heads: usize,
    /// Key/value sequence length.
    pub m: usize,
    pub qkv_projection: u64,
    pub attention_matrix: u64,
    pub attention_apply: u64,
    pub output_projection: u64,
    /// Clustering overhead for PaCa, strided conv for the nested baseline.
    pub kv_reduction: u64,
    pub ffn: u64,
    pub normalization: u64,
    pub total: u64,
    /// Retained activation elements; only known for instrumented runs.
    pub peak_retained: Option<u64>,
}

impl FlopReport {
    /// Attention-matrix plus attention-apply FLOPs.
    pub fn attention(&self) -> u64 {
        self.attention_matrix + self.attention_apply
    }

    fn sum_components(&mut self) {
        self.total = self.qkv_projection
            + self.attention_matrix
            + self.attention_apply
            + self.output_projection
            + self.kv_reduction
            + self.ffn;
    }
}

pub fn mechanism_name(m: Mechanism) -> &'static str {
    match m {
        Mechanism::Vanilla => "vanilla",
        Mechanism::Nested { .. } => "nested",
        Mechanism::Paca { .. } => "paca",
    }
}

/// `(H, W)` with `H·W = n` and `H` the largest divisor of `n` not above √n.
pub fn map_for(n: usize) -> (usize, usize) {
    let mut h = libm::sqrt(n as f64) as usize;
    while h > 1 && !n.is_multiple_of(h) {
        h -= 1;
    }
    let h = h.max(1);
    (h, n / h)
}

fn key_count(mechanism: Mechanism, n: usize, hw: (usize, usize)) -> Result<usize> {
    match mechanism {
        Mechanism::Vanilla => Ok(n),
        Mechanism::Nested { patch } => {
            if patch == 0 || !hw.0.is_multiple_of(patch) || !hw.1.is_multiple_of(patch) {
                return Err(Error::InvalidConfig(format!(
                    "patch {patch} does not tile the {}x{} map of N={n}",
                    hw.0, hw.1
                )));
            }
            Ok(n / (patch * patch))
        }
        Mechanism::Paca { clusters, .. } => Ok(clusters),
    }
}

fn validate(mechanism: Mechanism, n: usize, c: usize, heads: usize) -> Result<usize> {
    if n == 0 || c == 0 || heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::InvalidConfig(format!(
            "need N, C ≥ 1 and C divisible by heads (N={n}, C={c}, h={heads})"
        )));
    }
    if let Mechanism::Paca {
        clusters,
        reduction,
    } = mechanism
    {
        if clusters == 0 || reduction == 0 || !c.is_multiple_of(reduction) {
            return Err(Error::InvalidConfig(format!(
                "invalid clustering M={clusters}, r={reduction} for C={c}"
            )));
        }
    }
    key_count(mechanism, n, map_for(n))
}

/// Closed-form counts for one attention layer on `N` tokens of width `C`.
pub fn attention_flops(
    mechanism: Mechanism,
    n: usize,
    c: usize,
    heads: usize,
) -> Result<FlopReport> {
    let m = validate(mechanism, n, c, heads)?;
    let (n64, m64, c64, h64) = (n as u64, m as u64, c as u64, heads as u64);
    let (kv_reduction, extra_norm) = match mechanism {
        Mechanism::Vanilla => (0, 0),
        Mechanism::Nested { patch } => {
            let p = patch as u64;
            (2 * m64 * p * p * c64 * c64, 2 * m64 * c64)
        }
        Mechanism::Paca { reduction, .. } => {
            let squeezed = c64 / reduction as u64;
            let conv = n64 * 9 * c64 * squeezed;
            let linear = n64 * squeezed * m64;
            let pool = m64 * n64 * c64;
            (2 * (conv + linear + pool), 2 * n64 * m64 + 2 * m64 * c64)
        }
    };
    let mut r = FlopReport {
        mechanism,
        n,
        channels: c,
        heads,
        m,
        qkv_projection: 2 * (n64 * c64 * c64 + 2 * m64 * c64 * c64),
        attention_matrix: 2 * n64 * m64 * c64,
        attention_apply: 2 * n64 * m64 * c64,
        output_projection: 2 * n64 * c64 * c64,
        kv_reduction,
        ffn: 0,
        normalization: 2 * h64 * n64 * m64 + extra_norm,
        total: 0,
        peak_retained: None,
    };
    r.sum_components();
    Ok(r)
}

/// Closed-form MBlock cost: two pointwise linears and a depthwise 3×3.
pub fn ffn_flops(n: usize, c: usize, expansion: usize) -> u64 {
    let (n, c, e) = (n as u64, c as u64, expansion as u64);
    2 * (n * c * e * c + n * e * c * 9 + n * e * c * c)
}

/// Adds the MBlock cost to a report.
pub fn with_ffn(mut report: FlopReport, expansion: usize) -> FlopReport {
    report.ffn = ffn_flops(report.n, report.channels, expansion);
    report.sum_components();
    report
}

/// Runs the layer on random inputs and reads the tape's counters.
pub fn measure_attention(
    mechanism: Mechanism,
    n: usize,
    c: usize,
    heads: usize,
    expansion: Option<usize>,
    seed: u64,
) -> Result<FlopReport> {
    let m = validate(mechanism, n, c, heads)?;
    let hw = map_for(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let attn = Attention::register(&mut store, &mut rng, "attn", c, heads, mechanism)?;
    let ffn = expansion
        .map(|e| MBlock::register(&mut store, &mut rng, "ffn", c, e))
        .transpose()?;
    let mut tape = Tape::new().with_finite_checks(false);
    let p = store.bind(&mut tape, false);
    let x = tape.constant(init_tensor(&[n, c], Init::Normal(1.0), &mut rng)?);
    attn.forward(&mut tape, &p, x, hw)?;
    if let Some(ffn) = ffn {
        ffn.forward(&mut tape, &p, x, hw)?;
    }
    let f = tape.flops();
    let flops = |s| 2 * f.macs(s);
    let normalization = FlopScope::ALL.iter().map(|&s| f.normalization(s)).sum();
    let mut r = FlopReport {
        mechanism,
        n,
        channels: c,
        heads,
        m,
        qkv_projection: flops(FlopScope::QkvProjection),
        attention_matrix: flops(FlopScope::AttentionMatrix),
        attention_apply: flops(FlopScope::AttentionApply),
        output_projection: flops(FlopScope::OutputProjection),
        kv_reduction: flops(FlopScope::KvReduction),
        ffn: flops(FlopScope::Ffn),
        normalization,
        total: 0,
        peak_retained: Some(tape.activation_elements()),
    };
    r.sum_components();
    Ok(r)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|&x| libm::log(x)).collect();
    let ly: Vec<f64> = ys.iter().map(|&y| libm::log(y)).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub rows: Vec<FlopReport>,
    /// Fitted exponent of attention-matrix plus attention-apply FLOPs.
    pub attention_slope: f64,
    /// Fitted exponent of `total`.
    pub total_slope: f64,
}

/// Counts for each `N` and the fitted log-log exponents.
pub fn scaling_report(
    mechanism: Mechanism,
    c: usize,
    heads: usize,
    ns: &[usize],
    instrumented: bool,
) -> Result<ScalingReport> {
    if ns.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "scaling fit needs at least 3 sequence lengths, got {}",
            ns.len()
        )));
    }
    let rows = ns
        .iter()
        .map(|&n| {
            if instrumented {
                measure_attention(mechanism, n, c, heads, None, 0)
            } else {
                attention_flops(mechanism, n, c, heads)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let att: Vec<f64> = rows.iter().map(|r| r.attention() as f64).collect();
    let tot: Vec<f64> = rows.iter().map(|r| r.total as f64).collect();
    Ok(ScalingReport {
        attention_slope: loglog_slope(&xs, &att),
        total_slope: loglog_slope(&xs, &tot),
        rows,
    })
}

impl ScalingReport {
    pub const HEADER: &'static str = "mechanism,n,m,qkv_projection,attention_matrix,attention_apply,output_projection,kv_reduction,ffn,normalization,total,peak_retained";

    /// One row per `N`, then a `slope` footer carrying the attention
    /// exponent in the `attention_matrix` column and the total exponent in
    /// the `total` column.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = write!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},",
                mechanism_name(r.mechanism),
                r.n,
                r.m,
                r.qkv_projection,
                r.attention_matrix,
                r.attention_apply,
                r.output_projection,
                r.kv_reduction,
                r.ffn,
                r.normalization,
                r.total
            );
            if let Some(p) = r.peak_retained {
                let _ = write!(s, "{p}");
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "slope,,,,{:.6},,,,,,{:.6},",
            self.attention_slope, self.total_slope
        );
        s
    }
}
