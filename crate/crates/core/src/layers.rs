//! Parameter handles for the primitive layers shared by every block.

use alloc::format;

use rand::Rng;

use crate::error::Result;
use crate::params::{init_tensor, Bound, Init, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tape::{Tape, Var};

/// Layer-norm epsilon used throughout the network.
pub const LN_EPS: f64 = 1e-6;

/// `y = x · W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let w = init_tensor(&[fan_in, fan_out], Init::TruncNormal(0.02), rng)?;
        let b = init_tensor(&[fan_out], Init::Zeros, rng)?;
        Ok(Linear {
            weight: store.register(format!("{prefix}.weight"), w, true)?,
            bias: store.register(format!("{prefix}.bias"), b, false)?,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.weight], p[self.bias])
    }
}

/// Square-kernel channels-last convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        // fan-out scaled normal: std = sqrt(2 / (k·k·Cout/groups))
        let fan_out = kernel * kernel * c_out / groups;
        let std = libm::sqrt(2.0 / fan_out as f64);
        let w = init_tensor(
            &[kernel, kernel, c_in / groups, c_out],
            Init::Normal(std),
            rng,
        )?;
        let b = init_tensor(&[c_out], Init::Zeros, rng)?;
        Ok(Conv {
            weight: store.register(format!("{prefix}.weight"), w, true)?,
            bias: store.register(format!("{prefix}.bias"), b, false)?,
            kernel,
            stride,
            pad,
            groups,
            c_in,
            c_out,
        })
    }

    /// `x` is `[H, W, Cin]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            p[self.weight],
            p[self.bias],
            self.stride,
            self.pad,
            self.groups,
        )
    }

    pub fn out_extent(&self, extent: usize) -> Option<usize> {
        (extent + 2 * self.pad)
            .checked_sub(self.kernel)
            .map(|v| v / self.stride + 1)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
    ) -> Result<Self> {
        let g = init_tensor(&[dim], Init::Ones, rng)?;
        let b = init_tensor(&[dim], Init::Zeros, rng)?;
        Ok(Norm {
            gamma: store.register(format!("{prefix}.weight"), g, false)?,
            beta: store.register(format!("{prefix}.bias"), b, false)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], T::from_f64(LN_EPS))
    }
}
