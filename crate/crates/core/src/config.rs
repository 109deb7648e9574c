//! Declarative network configuration and the B0/B1/B2 presets.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::attention::Mechanism;
use crate::blocks::ConvSpec;
use crate::error::{Error, Result};

/// Input-geometry flavor of a preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    /// 224×224 inputs, stride-4 stem.
    In1k,
    /// 32×32 inputs, stride-1 stem.
    C100,
    /// In-repo debugging geometry; not one of the published configurations.
    Debug,
}

impl Flavor {
    pub fn as_str(self) -> &'static str {
        match self {
            Flavor::In1k => "in1k",
            Flavor::C100 => "c100",
            Flavor::Debug => "debug",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    B0,
    B1,
    B2,
    TinyDebug,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::B0 => "b0",
            Preset::B1 => "b1",
            Preset::B2 => "b2",
            Preset::TinyDebug => "tiny-debug",
        }
    }
}

impl core::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "b0" => Ok(Preset::B0),
            "b1" => Ok(Preset::B1),
            "b2" => Ok(Preset::B2),
            "tiny-debug" => Ok(Preset::TinyDebug),
            other => Err(Error::InvalidConfig(format!(
                "unknown model preset {other:?}"
            ))),
        }
    }
}

/// Token mixer of every block in a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mixer {
    Paca {
        clusters: usize,
        reduction: usize,
    },
    Mhsa,
    /// Strided-convolution key/value reduction baseline.
    Nested {
        patch: usize,
    },
}

impl Mixer {
    pub fn mechanism(self) -> Mechanism {
        match self {
            Mixer::Paca {
                clusters,
                reduction,
            } => Mechanism::Paca {
                clusters,
                reduction,
            },
            Mixer::Mhsa => Mechanism::Vanilla,
            Mixer::Nested { patch } => Mechanism::Nested { patch },
        }
    }

    pub fn is_paca(self) -> bool {
        matches!(self, Mixer::Paca { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    /// Stem (first stage) or transition convolution.
    pub conv: ConvSpec,
    pub depth: usize,
    pub heads: usize,
    pub expansion: usize,
    pub mixer: Mixer,
}

impl StageConfig {
    pub fn channels(&self) -> usize {
        self.conv.channels
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub name: String,
    pub flavor: Flavor,
    pub input: (usize, usize),
    pub in_channels: usize,
    pub classes: usize,
    pub stages: Vec<StageConfig>,
}

struct Family {
    channels: [usize; 4],
    depths: [usize; 4],
}

const HEADS: [usize; 4] = [1, 2, 5, 8];
const EXPANSIONS: [usize; 4] = [8, 8, 4, 4];
const REDUCTION: usize = 4;

impl ModelConfig {
    pub fn preset(preset: Preset, flavor: Flavor, classes: usize) -> Result<Self> {
        let family = match preset {
            Preset::B0 => Family {
                channels: [32, 64, 160, 256],
                depths: [2, 2, 2, 2],
            },
            Preset::B1 => Family {
                channels: [64, 128, 320, 512],
                depths: [2, 2, 2, 2],
            },
            Preset::B2 => Family {
                channels: [64, 128, 320, 512],
                depths: [3, 4, 6, 3],
            },
            Preset::TinyDebug => return Self::tiny_debug(classes, (16, 16)),
        };
        let (input, convs, clusters, stage3_paca) = match flavor {
            Flavor::In1k => (
                (224, 224),
                [(7, 4, 3), (3, 2, 1), (3, 2, 1), (3, 2, 1)],
                49,
                true,
            ),
            Flavor::C100 => (
                (32, 32),
                [(3, 1, 1), (3, 2, 1), (3, 2, 1), (3, 1, 1)],
                64,
                false,
            ),
            Flavor::Debug => {
                return Err(Error::InvalidConfig(format!(
                    "preset {} has no debug geometry",
                    preset.as_str()
                )))
            }
        };
        let stages = (0..4)
            .map(|i| {
                let (k, s, p) = convs[i];
                let paca = i < 2 || (i == 2 && stage3_paca);
                StageConfig {
                    conv: ConvSpec::new(k, s, p, family.channels[i]),
                    depth: family.depths[i],
                    heads: HEADS[i],
                    expansion: EXPANSIONS[i],
                    mixer: if paca {
                        Mixer::Paca {
                            clusters,
                            reduction: REDUCTION,
                        }
                    } else {
                        Mixer::Mhsa
                    },
                }
            })
            .collect();
        let cfg = ModelConfig {
            name: preset.as_str().into(),
            flavor,
            input,
            in_channels: 3,
            classes,
            stages,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Two-stage debugging network: channels (8, 16), one block each,
    /// heads (1, 2), four clusters with reduction 4, stride-2 stem and
    /// transition.
    pub fn tiny_debug(classes: usize, input: (usize, usize)) -> Result<Self> {
        let paca = Mixer::Paca {
            clusters: 4,
            reduction: REDUCTION,
        };
        let cfg = ModelConfig {
            name: Preset::TinyDebug.as_str().into(),
            flavor: Flavor::Debug,
            input,
            in_channels: 3,
            classes,
            stages: alloc::vec![
                StageConfig {
                    conv: ConvSpec::new(3, 2, 1, 8),
                    depth: 1,
                    heads: 1,
                    expansion: 4,
                    mixer: paca,
                },
                StageConfig {
                    conv: ConvSpec::new(3, 2, 1, 16),
                    depth: 1,
                    heads: 2,
                    expansion: 4,
                    mixer: paca,
                },
            ],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Spatial extents `(H, W)` after each stage's stem/transition.
    pub fn stage_extents(&self) -> Result<Vec<(usize, usize)>> {
        let mut hw = self.input;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            let h = st.conv.out_extent(hw.0);
            let w = st.conv.out_extent(hw.1);
            match (h, w) {
                (Some(h), Some(w)) => hw = (h, w),
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "stage {i}: kernel {} does not fit {}x{} input",
                        st.conv.kernel, hw.0, hw.1
                    )))
                }
            }
            out.push(hw);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("no stages".into()));
        }
        if self.classes == 0 || self.in_channels == 0 {
            return Err(Error::InvalidConfig(
                "class and input channel counts must be positive".into(),
            ));
        }
        let extents = self.stage_extents()?;
        for (i, (st, hw)) in self.stages.iter().zip(&extents).enumerate() {
            let c = st.channels();
            if st.conv.stride == 0 || st.conv.kernel == 0 || c == 0 {
                return Err(Error::InvalidConfig(format!(
                    "stage {i}: degenerate convolution"
                )));
            }
            if st.depth == 0 || st.expansion == 0 {
                return Err(Error::InvalidConfig(format!(
                    "stage {i}: depth and expansion must be positive"
                )));
            }
            if st.heads == 0 || c % st.heads != 0 {
                return Err(Error::InvalidConfig(format!(
                    "stage {i}: {c} channels not divisible by {} heads",
                    st.heads
                )));
            }
            match st.mixer {
                Mixer::Paca {
                    clusters,
                    reduction,
                } => {
                    if clusters == 0 {
                        return Err(Error::InvalidConfig(format!("stage {i}: zero clusters")));
                    }
                    if reduction == 0 || c % reduction != 0 {
                        return Err(Error::InvalidConfig(format!(
                            "stage {i}: {c} channels not divisible by reduction {reduction}"
                        )));
                    }
                }
                Mixer::Nested { patch } => {
                    if patch == 0 || hw.0 % patch != 0 || hw.1 % patch != 0 {
                        return Err(Error::InvalidConfig(format!(
                            "stage {i}: {}x{} map not divisible by patch {patch}",
                            hw.0, hw.1
                        )));
                    }
                }
                Mixer::Mhsa => {}
            }
        }
        Ok(())
    }

    /// Canonical text form; its hash identifies checkpoints.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "paca-vit;name={};flavor={};input={}x{}x{};classes={}",
            self.name,
            self.flavor.as_str(),
            self.input.0,
            self.input.1,
            self.in_channels,
            self.classes
        );
        for (i, st) in self.stages.iter().enumerate() {
            let _ = write!(
                s,
                ";stage{i}=conv({},{},{},{}),depth={},heads={},expansion={},",
                st.conv.kernel,
                st.conv.stride,
                st.conv.pad,
                st.conv.channels,
                st.depth,
                st.heads,
                st.expansion
            );
            let _ = match st.mixer {
                Mixer::Paca {
                    clusters,
                    reduction,
                } => write!(s, "paca(m={clusters},r={reduction})"),
                Mixer::Mhsa => write!(s, "mhsa"),
                Mixer::Nested { patch } => write!(s, "nested(p={patch})"),
            };
        }
        s
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical().as_bytes())
    }

    /// Total transformer blocks across stages.
    pub fn layer_count(&self) -> usize {
        self.stages.iter().map(|s| s.depth).sum()
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}
