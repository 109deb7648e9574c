//! Patch-to-patch, nested-embedding and patch-to-cluster attention.
//!
//! All three share the same query path: queries come from the full
//! `N`-token sequence. They differ in where keys and values come from:
//!
//! * [`KeyValueSource::Full`]: the sequence itself (`M = N`, quadratic).
//! * [`KeyValueSource::Nested`]: a strided `p×p` convolution plus layer
//!   norm over the feature map (`M = N / p²`, still quadratic in `N`).
//! * [`KeyValueSource::Paca`]: `M` learned cluster tokens pooled with a
//!   spatially softmaxed assignment (`M` fixed, linear in `N`).

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Conv, Linear, Norm};
use crate::params::{Bound, ParamStore};
use crate::scalar::Real;
use crate::tape::{FlopScope, Tape, Var};
use crate::tensor::Tensor;

/// Query/key/value/output projections for `heads` heads over `dim` channels.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!(
                "{dim} channels not divisible by {heads} heads"
            )));
        }
        Ok(AttentionParams {
            q: Linear::register(store, rng, &format!("{prefix}.q"), dim, dim)?,
            k: Linear::register(store, rng, &format!("{prefix}.k"), dim, dim)?,
            v: Linear::register(store, rng, &format!("{prefix}.v"), dim, dim)?,
            proj: Linear::register(store, rng, &format!("{prefix}.proj"), dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Learnable clustering: 3×3 conv squeezing `C` to `C/r`, GELU, then a
/// linear map to `M` cluster logits.
#[derive(Debug, Clone)]
pub struct ClusterParams {
    pub conv: Conv,
    pub linear: Linear,
    pub clusters: usize,
    pub reduction: usize,
}

impl ClusterParams {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        clusters: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || !dim.is_multiple_of(reduction) {
            return Err(Error::InvalidConfig(format!(
                "{dim} channels not divisible by reduction ratio {reduction}"
            )));
        }
        if clusters == 0 {
            return Err(Error::InvalidConfig(
                "cluster count must be at least 1".into(),
            ));
        }
        let squeezed = dim / reduction;
        Ok(ClusterParams {
            conv: Conv::register(
                store,
                rng,
                &format!("{prefix}.conv"),
                dim,
                squeezed,
                3,
                1,
                1,
                1,
            )?,
            linear: Linear::register(store, rng, &format!("{prefix}.linear"), squeezed, clusters)?,
            clusters,
            reduction,
        })
    }
}

/// Clustering module plus the layer norm applied to pooled tokens.
#[derive(Debug, Clone)]
pub struct PacaParams {
    pub cluster: ClusterParams,
    pub token_norm: Norm,
}

/// Strided `patch×patch` convolution and layer norm producing keys/values.
#[derive(Debug, Clone)]
pub struct NestedParams {
    pub conv: Conv,
    pub norm: Norm,
    pub patch: usize,
}

#[derive(Debug, Clone)]
pub enum KeyValueSource {
    Full,
    Nested(NestedParams),
    Paca(PacaParams),
}

/// One attention layer: projections plus its key/value source.
#[derive(Debug, Clone)]
pub struct Attention {
    pub params: AttentionParams,
    pub source: KeyValueSource,
}

/// Which key/value source to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    Vanilla,
    Nested { patch: usize },
    Paca { clusters: usize, reduction: usize },
}

impl Attention {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        heads: usize,
        mechanism: Mechanism,
    ) -> Result<Self> {
        let params = AttentionParams::register(store, rng, prefix, dim, heads)?;
        let source = match mechanism {
            Mechanism::Vanilla => KeyValueSource::Full,
            Mechanism::Nested { patch } => {
                if patch == 0 {
                    return Err(Error::InvalidConfig(
                        "nested patch size must be positive".into(),
                    ));
                }
                KeyValueSource::Nested(NestedParams {
                    conv: Conv::register(
                        store,
                        rng,
                        &format!("{prefix}.reduce.conv"),
                        dim,
                        dim,
                        patch,
                        patch,
                        0,
                        1,
                    )?,
                    norm: Norm::register(store, rng, &format!("{prefix}.reduce.norm"), dim)?,
                    patch,
                })
            }
            Mechanism::Paca {
                clusters,
                reduction,
            } => KeyValueSource::Paca(PacaParams {
                cluster: ClusterParams::register(
                    store,
                    rng,
                    &format!("{prefix}.cluster"),
                    dim,
                    clusters,
                    reduction,
                )?,
                token_norm: Norm::register(store, rng, &format!("{prefix}.token_norm"), dim)?,
            }),
        };
        Ok(Attention { params, source })
    }

    /// Runs the layer on `x[N, C]` laid out as an `H×W` map.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        hw: (usize, usize),
    ) -> Result<AttentionOutput> {
        match &self.source {
            KeyValueSource::Full => mhsa(tape, p, x, &self.params),
            KeyValueSource::Nested(np) => nested_attention(tape, p, x, hw, np, &self.params),
            KeyValueSource::Paca(pp) => paca_attention(tape, p, x, hw, pp, &self.params),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[N, C]`
    pub out: Var,
    /// `[h, N, M]`, row-stochastic.
    pub attn: Var,
    /// `[N, M]` cluster assignment, PaCa only.
    pub clusters: Option<Var>,
}

/// Column-stochastic `N×M` assignment of spatial positions to clusters,
/// remembering the `H×W` layout of the `N` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment<T> {
    matrix: Tensor<T>,
    hw: (usize, usize),
}

impl<T: Real> ClusterAssignment<T> {
    pub fn new(matrix: Tensor<T>, hw: (usize, usize)) -> Result<Self> {
        if matrix.shape().rank() != 2 || matrix.dims()[0] != hw.0 * hw.1 {
            return Err(Error::InvalidShape {
                op: "cluster assignment",
                msg: format!(
                    "{} does not match {}x{} positions",
                    matrix.shape(),
                    hw.0,
                    hw.1
                ),
            });
        }
        Ok(ClusterAssignment { matrix, hw })
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.matrix
    }

    pub fn hw(&self) -> (usize, usize) {
        self.hw
    }

    pub fn positions(&self) -> usize {
        self.matrix.dims()[0]
    }

    pub fn clusters(&self) -> usize {
        self.matrix.dims()[1]
    }

    /// Column `m`: the weights cluster `m` places on each position.
    pub fn column(&self, m: usize) -> Vec<T> {
        let k = self.clusters();
        (0..self.positions())
            .map(|n| self.matrix.data()[n * k + m])
            .collect()
    }

    pub fn column_sums(&self) -> Vec<T> {
        (0..self.clusters())
            .map(|m| self.column(m).into_iter().sum())
            .collect()
    }
}

fn with_scope<T: Real, O>(
    tape: &mut Tape<T>,
    scope: FlopScope,
    f: impl FnOnce(&mut Tape<T>) -> Result<O>,
) -> Result<O> {
    let prev = tape.set_scope(scope);
    let out = f(tape);
    tape.set_scope(prev);
    out
}

/// Per-head `softmax(q·kᵀ/√d)·v` for `q[h,N,d]`, `k,v[h,M,d]`.
/// Returns `(out[h,N,d], attn[h,N,M])`.
pub fn scaled_attention<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (
        tape.shape(q).clone(),
        tape.shape(k).clone(),
        tape.shape(v).clone(),
    );
    if qs.rank() != 3
        || ks != vs
        || ks.rank() != 3
        || qs.dim(0) != ks.dim(0)
        || qs.dim(2) != ks.dim(2)
    {
        return Err(Error::ShapeMismatch {
            op: "scaled_attention",
            left: qs,
            right: ks,
        });
    }
    let d = qs.dim(2);
    let attn = with_scope(tape, FlopScope::AttentionMatrix, |t| {
        let scores = t.batch_matmul(q, k, true)?;
        let scaled = t.scale(scores, T::ONE / T::from_usize(d).sqrt())?;
        t.softmax(scaled, 2)
    })?;
    let out = with_scope(tape, FlopScope::AttentionApply, |t| {
        t.batch_matmul(attn, v, false)
    })?;
    Ok((out, attn))
}

/// Attention of the `N` queries from `x` over keys/values projected from
/// `kv[M, C]`, followed by the head-merging output projection.
fn attend<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    x: Var,
    kv: Var,
    ap: &AttentionParams,
) -> Result<(Var, Var)> {
    let (q, k, v) = with_scope(tape, FlopScope::QkvProjection, |t| {
        Ok((
            ap.q.forward(t, p, x)?,
            ap.k.forward(t, p, kv)?,
            ap.v.forward(t, p, kv)?,
        ))
    })?;
    let qh = tape.split_heads(q, ap.heads)?;
    let kh = tape.split_heads(k, ap.heads)?;
    let vh = tape.split_heads(v, ap.heads)?;
    let (oh, attn) = scaled_attention(tape, qh, kh, vh)?;
    let merged = tape.merge_heads(oh)?;
    let out = with_scope(tape, FlopScope::OutputProjection, |t| {
        ap.proj.forward(t, p, merged)
    })?;
    Ok((out, attn))
}

fn check_dim<T: Real>(tape: &Tape<T>, x: Var, ap: &AttentionParams) -> Result<()> {
    let s = tape.shape(x);
    if s.rank() != 2 || s.dim(1) != ap.dim {
        return Err(Error::InvalidShape {
            op: "attention",
            msg: format!("input {s} does not have {} channels", ap.dim),
        });
    }
    Ok(())
}

fn check_hw<T: Real>(tape: &Tape<T>, x: Var, hw: (usize, usize)) -> Result<()> {
    let n = tape.shape(x).dim(0);
    if n != hw.0 * hw.1 {
        return Err(Error::InvalidShape {
            op: "attention",
            msg: format!("{n} tokens do not form a {}x{} map", hw.0, hw.1),
        });
    }
    Ok(())
}

/// Vanilla multi-head self-attention over all `N` tokens.
pub fn mhsa<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    x: Var,
    ap: &AttentionParams,
) -> Result<AttentionOutput> {
    check_dim(tape, x, ap)?;
    let (out, attn) = attend(tape, p, x, x, ap)?;
    Ok(AttentionOutput {
        out,
        attn,
        clusters: None,
    })
}

/// Cluster assignment `[N, M]`: softmax over positions of
/// `linear(gelu(conv3x3(x)))`.
pub fn compute_clusters<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    x: Var,
    hw: (usize, usize),
    cp: &ClusterParams,
) -> Result<Var> {
    check_hw(tape, x, hw)?;
    let c = tape.shape(x).dim(1);
    with_scope(tape, FlopScope::KvReduction, |t| {
        let map = t.reshape(x, &[hw.0, hw.1, c])?;
        let squeezed = cp.conv.forward(t, p, map)?;
        let u = t.gelu(squeezed)?;
        let u = t.reshape(u, &[hw.0 * hw.1, c / cp.reduction])?;
        let logits = cp.linear.forward(t, p, u)?;
        t.softmax(logits, 0)
    })
}

/// `LayerNorm(Cᵀ · X)`: `M` tokens, each a convex combination of the rows
/// of `x` before normalization.
pub fn paca_tokens<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    clusters: Var,
    x: Var,
    norm: &Norm,
) -> Result<Var> {
    let (cs, xs) = (tape.shape(clusters), tape.shape(x));
    if cs.rank() != 2 || xs.rank() != 2 || cs.dim(0) != xs.dim(0) {
        return Err(Error::ShapeMismatch {
            op: "paca_tokens",
            left: cs.clone(),
            right: xs.clone(),
        });
    }
    with_scope(tape, FlopScope::KvReduction, |t| {
        let ct = t.transpose(clusters)?;
        let pooled = t.matmul(ct, x)?;
        norm.forward(t, p, pooled)
    })
}

/// Patch-to-cluster attention: queries from `x`, keys/values from the `M`
/// pooled cluster tokens.
pub fn paca_attention<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    x: Var,
    hw: (usize, usize),
    pp: &PacaParams,
    ap: &AttentionParams,
) -> Result<AttentionOutput> {
    check_dim(tape, x, ap)?;
    let clusters = compute_clusters(tape, p, x, hw, &pp.cluster)?;
    let z = paca_tokens(tape, p, clusters, x, &pp.token_norm)?;
    let (out, attn) = attend(tape, p, x, z, ap)?;
    Ok(AttentionOutput {
        out,
        attn,
        clusters: Some(clusters),
    })
}

/// `LayerNorm(conv_{p×p, stride p}(x))` flattened to `[N/p², C]`.
pub fn nested_embed_tokens<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    x: Var,
    hw: (usize, usize),
    np: &NestedParams,
) -> Result<Var> {
    check_hw(tape, x, hw)?;
    if !hw.0.is_multiple_of(np.patch) || !hw.1.is_multiple_of(np.patch) {
        return Err(Error::InvalidShape {
            op: "nested_embed_tokens",
            msg: format!("{}x{} map not divisible by patch {}", hw.0, hw.1, np.patch),
        });
    }
    let c = tape.shape(x).dim(1);
    with_scope(tape, FlopScope::KvReduction, |t| {
        let map = t.reshape(x, &[hw.0, hw.1, c])?;
        let reduced = np.conv.forward(t, p, map)?;
        let m = (hw.0 / np.patch) * (hw.1 / np.patch);
        let tokens = t.reshape(reduced, &[m, c])?;
        np.norm.forward(t, p, tokens)
    })
}

pub fn nested_attention<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    x: Var,
    hw: (usize, usize),
    np: &NestedParams,
    ap: &AttentionParams,
) -> Result<AttentionOutput> {
    check_dim(tape, x, ap)?;
    let z = nested_embed_tokens(tape, p, x, hw, np)?;
    let (out, attn) = attend(tape, p, x, z, ap)?;
    Ok(AttentionOutput {
        out,
        attn,
        clusters: None,
    })
}
