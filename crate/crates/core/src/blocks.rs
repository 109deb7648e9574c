//! Stem, transition, MBlock feed-forward and the pre-norm transformer block.

use alloc::format;

use rand::Rng;

use crate::attention::{Attention, AttentionOutput, Mechanism};
use crate::error::{Error, Result};
use crate::layers::{Conv, Linear, Norm};
use crate::params::{Bound, ParamStore};
use crate::scalar::Real;
use crate::tape::{FlopScope, Tape, Var};

/// Convolution geometry of a stem or transition: kernel, stride, zero
/// padding and output channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub channels: usize,
}

impl ConvSpec {
    pub const fn new(kernel: usize, stride: usize, pad: usize, channels: usize) -> Self {
        ConvSpec {
            kernel,
            stride,
            pad,
            channels,
        }
    }

    /// Output extent for an input extent, `None` when the kernel does not
    /// fit the padded input.
    pub fn out_extent(&self, extent: usize) -> Option<usize> {
        if self.kernel == 0 || self.stride == 0 {
            return None;
        }
        (extent + 2 * self.pad)
            .checked_sub(self.kernel)
            .map(|v| v / self.stride + 1)
    }
}

/// Convolution followed by layer norm over channels; used both as the stem
/// (on the image) and as a transition (on the previous stage's map).
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub conv: Conv,
    pub norm: Norm,
}

impl PatchEmbed {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        c_in: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        Ok(PatchEmbed {
            conv: Conv::register(
                store,
                rng,
                &format!("{prefix}.conv"),
                c_in,
                spec.channels,
                spec.kernel,
                spec.stride,
                spec.pad,
                1,
            )?,
            norm: Norm::register(store, rng, &format!("{prefix}.norm"), spec.channels)?,
        })
    }

    /// `x` is a `[H, W, Cin]` map. Returns the `[H'·W', C]` sequence and
    /// `(H', W')`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
    ) -> Result<(Var, (usize, usize))> {
        let y = self.conv.forward(tape, p, x)?;
        let dims = tape.shape(y).dims().to_vec();
        let (h, w, c) = (dims[0], dims[1], dims[2]);
        let seq = tape.reshape(y, &[h * w, c])?;
        Ok((self.norm.forward(tape, p, seq)?, (h, w)))
    }

    /// Transition entry: reshapes the `[N, C]` sequence to its map first.
    pub fn forward_seq<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        hw: (usize, usize),
    ) -> Result<(Var, (usize, usize))> {
        let c = tape.shape(x).last();
        let map = tape.reshape(x, &[hw.0, hw.1, c])?;
        self.forward(tape, p, map)
    }
}

/// Inverted-bottleneck feed-forward: `fc(C→eC)`, depthwise 3×3 conv,
/// GELU, `fc(eC→C)`.
#[derive(Debug, Clone)]
pub struct MBlock {
    pub fc1: Linear,
    pub dwconv: Conv,
    pub fc2: Linear,
    pub expansion: usize,
}

impl MBlock {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        expansion: usize,
    ) -> Result<Self> {
        if expansion == 0 {
            return Err(Error::InvalidConfig(
                "expansion ratio must be positive".into(),
            ));
        }
        let hidden = dim * expansion;
        Ok(MBlock {
            fc1: Linear::register(store, rng, &format!("{prefix}.fc1"), dim, hidden)?,
            dwconv: Conv::register(
                store,
                rng,
                &format!("{prefix}.dwconv"),
                hidden,
                hidden,
                3,
                1,
                1,
                hidden,
            )?,
            fc2: Linear::register(store, rng, &format!("{prefix}.fc2"), hidden, dim)?,
            expansion,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        hw: (usize, usize),
    ) -> Result<Var> {
        let n = tape.shape(x).dim(0);
        if n != hw.0 * hw.1 {
            return Err(Error::InvalidShape {
                op: "mblock",
                msg: format!("{n} tokens do not form a {}x{} map", hw.0, hw.1),
            });
        }
        let prev = tape.set_scope(FlopScope::Ffn);
        let out = (|| {
            let hidden = self.fc1.forward(tape, p, x)?;
            let e = tape.shape(hidden).dim(1);
            let map = tape.reshape(hidden, &[hw.0, hw.1, e])?;
            let mixed = self.dwconv.forward(tape, p, map)?;
            let act = tape.gelu(mixed)?;
            let seq = tape.reshape(act, &[n, e])?;
            self.fc2.forward(tape, p, seq)
        })();
        tape.set_scope(prev);
        out
    }
}

/// `z = x + Attn(LN(x))`, `out = z + FFN(LN(z))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub ffn: MBlock,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub out: Var,
    pub attn: Var,
    pub clusters: Option<Var>,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        heads: usize,
        expansion: usize,
        mechanism: Mechanism,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: Norm::register(store, rng, &format!("{prefix}.norm1"), dim)?,
            attn: Attention::register(
                store,
                rng,
                &format!("{prefix}.attn"),
                dim,
                heads,
                mechanism,
            )?,
            norm2: Norm::register(store, rng, &format!("{prefix}.norm2"), dim)?,
            ffn: MBlock::register(store, rng, &format!("{prefix}.ffn"), dim, expansion)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        hw: (usize, usize),
    ) -> Result<BlockOutput> {
        let normed = self.norm1.forward(tape, p, x)?;
        let AttentionOutput {
            out,
            attn,
            clusters,
        } = self.attn.forward(tape, p, normed, hw)?;
        let z = tape.add(x, out)?;
        let normed = self.norm2.forward(tape, p, z)?;
        let ffn = self.ffn.forward(tape, p, normed, hw)?;
        let out = tape.add(z, ffn)?;
        Ok(BlockOutput {
            out,
            attn,
            clusters,
        })
    }
}
