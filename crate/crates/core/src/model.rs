//! The stage-wise network with a classification head.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::ClusterAssignment;
use crate::blocks::{PatchEmbed, TransformerBlock};
use crate::config::{Mixer, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::{Linear, Norm};
use crate::params::{Bound, ParamStore};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Stage {
    pub embed: PatchEmbed,
    pub blocks: Vec<TransformerBlock>,
    pub norm: Norm,
    pub mixer: Mixer,
}

/// Position of one transformer block in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerInfo {
    /// Global block index across stages.
    pub layer: usize,
    pub stage: usize,
    pub block: usize,
    pub hw: (usize, usize),
    pub mixer: Mixer,
}

/// Values retained from one block for explanation.
#[derive(Debug, Clone)]
pub struct LayerTrace<T> {
    pub info: LayerInfo,
    pub clusters: Option<ClusterAssignment<T>>,
    /// `[h, N, M]`
    pub attention: Tensor<T>,
}

impl<T: Real> LayerTrace<T> {
    pub fn retained_elements(&self) -> usize {
        self.attention.numel() + self.clusters.as_ref().map_or(0, |c| c.matrix().numel())
    }
}

pub struct ForwardOutput<T> {
    /// `[B, classes]`
    pub logits: Var,
    /// Per image, per layer; `None` unless retention was requested.
    pub traces: Option<Vec<Vec<LayerTrace<T>>>>,
    /// Elements copied out for retention; zero when not retaining.
    pub retained_elements: usize,
}

/// Stage-wise patch-to-cluster attention network.
#[derive(Debug, Clone)]
pub struct PaCaModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    stages: Vec<Stage>,
    head: Linear,
}

impl<T: Real> PaCaModel<T> {
    /// Builds and initializes the network. Same `(cfg, seed)` gives bitwise
    /// identical parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut c_in = config.in_channels;
        for (i, st) in config.stages.iter().enumerate() {
            let embed = PatchEmbed::register(
                &mut params,
                &mut rng,
                &format!("stages.{i}.embed"),
                c_in,
                st.conv,
            )?;
            let blocks = (0..st.depth)
                .map(|j| {
                    TransformerBlock::register(
                        &mut params,
                        &mut rng,
                        &format!("stages.{i}.blocks.{j}"),
                        st.channels(),
                        st.heads,
                        st.expansion,
                        st.mixer.mechanism(),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = Norm::register(
                &mut params,
                &mut rng,
                &format!("stages.{i}.norm"),
                st.channels(),
            )?;
            stages.push(Stage {
                embed,
                blocks,
                norm,
                mixer: st.mixer,
            });
            c_in = st.channels();
        }
        let head = Linear::register(&mut params, &mut rng, "head", c_in, config.classes)?;
        Ok(PaCaModel {
            config: config.clone(),
            params,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Total trainable elements.
    pub fn param_count(&self) -> usize {
        self.params.element_count()
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        let extents = self.config.stage_extents().unwrap_or_default();
        let mut out = Vec::new();
        for (i, (stage, &hw)) in self.stages.iter().zip(&extents).enumerate() {
            for j in 0..stage.blocks.len() {
                out.push(LayerInfo {
                    layer: out.len(),
                    stage: i,
                    block: j,
                    hw,
                    mixer: stage.mixer,
                });
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> PaCaModel<U> {
        PaCaModel {
            config: self.config.clone(),
            params: self.params.cast(),
            stages: self.stages.clone(),
            head: self.head.clone(),
        }
    }

    /// One `[H₀, W₀, Cin]` image to `[1, classes]` logits.
    pub fn forward_image(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        image: Var,
        retain: bool,
    ) -> Result<(Var, Option<Vec<LayerTrace<T>>>)> {
        let expected = [
            self.config.input.0,
            self.config.input.1,
            self.config.in_channels,
        ];
        if tape.shape(image).dims() != expected {
            return Err(Error::InvalidShape {
                op: "forward",
                msg: format!("image {} does not match {:?}", tape.shape(image), expected),
            });
        }
        let mut traces = retain.then(Vec::new);
        let mut layer = 0;
        let mut x = image;
        let mut hw = (0, 0);
        for (i, stage) in self.stages.iter().enumerate() {
            let (seq, next_hw) = if i == 0 {
                stage.embed.forward(tape, p, x)?
            } else {
                stage.embed.forward_seq(tape, p, x, hw)?
            };
            x = seq;
            hw = next_hw;
            for (j, block) in stage.blocks.iter().enumerate() {
                let out = block.forward(tape, p, x, hw)?;
                if let Some(traces) = traces.as_mut() {
                    let clusters = out
                        .clusters
                        .map(|c| ClusterAssignment::new(tape.value(c).clone(), hw))
                        .transpose()?;
                    traces.push(LayerTrace {
                        info: LayerInfo {
                            layer,
                            stage: i,
                            block: j,
                            hw,
                            mixer: stage.mixer,
                        },
                        clusters,
                        attention: tape.value(out.attn).clone(),
                    });
                }
                layer += 1;
                x = out.out;
            }
            x = stage.norm.forward(tape, p, x)?;
        }
        let pooled = tape.mean_rows(x)?;
        let logits = self.head.forward(tape, p, pooled)?;
        Ok((logits, traces))
    }

    /// Batched forward over `[B, H₀, W₀, Cin]`; images share weights and
    /// are processed independently.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        images: &Tensor<T>,
        retain: bool,
    ) -> Result<ForwardOutput<T>> {
        let dims = images.dims();
        if dims.len() != 4 {
            return Err(Error::InvalidShape {
                op: "forward",
                msg: format!("expected [B, H, W, C] batch, got {}", images.shape()),
            });
        }
        let per_image = dims[1] * dims[2] * dims[3];
        let mut rows = Vec::with_capacity(dims[0]);
        let mut traces = retain.then(Vec::new);
        let mut retained_elements = 0;
        for b in 0..dims[0] {
            let img = Tensor::new(
                &dims[1..],
                images.data()[b * per_image..(b + 1) * per_image].to_vec(),
            )?;
            let img = tape.constant(img);
            let (logits, trace) = self.forward_image(tape, p, img, retain)?;
            rows.push(logits);
            if let (Some(all), Some(trace)) = (traces.as_mut(), trace) {
                retained_elements += trace
                    .iter()
                    .map(LayerTrace::retained_elements)
                    .sum::<usize>();
                all.push(trace);
            }
        }
        let logits = tape.concat_rows(&rows)?;
        Ok(ForwardOutput {
            logits,
            traces,
            retained_elements,
        })
    }

    /// Inference-only logits `[B, classes]`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, images, false)?;
        Ok(tape.value(out.logits).clone())
    }
}
