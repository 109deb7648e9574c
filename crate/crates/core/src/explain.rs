//! Forward explanation by cluster masking.
//!
//! Each cluster column of a PaCa assignment is reshaped to its `H×W` map
//! and min-max normalized into a heatmap `ℋ`. The input is masked with the
//! bilinearly upsampled `1 − ℋ`, and the drop in the true-class softmax
//! probability scores how much the model relies on that cluster.
//! Near-ties are broken toward the cluster whose assignment has the lowest
//! Shannon entropy.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::model::{LayerTrace, PaCaModel};
use crate::scalar::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::argmax;

/// Importance differences within this band count as ties.
pub const TIE_EPSILON: f64 = 1e-3;

/// What the heatmaps visualize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeatmapSource {
    /// Columns of the cluster assignment (PaCa layers only).
    #[default]
    Clusters,
    /// Columns of the head-averaged attention matrix, softmaxed over
    /// positions.
    Attention,
}

/// Min-max normalized `h×w` map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub layer: usize,
    pub cluster: usize,
}

impl Heatmap {
    pub fn new(values: Vec<f64>, h: usize, w: usize) -> Result<Self> {
        if values.len() != h * w || h == 0 || w == 0 {
            return Err(Error::Invalid(alloc::format!(
                "{} heatmap values for a {h}x{w} grid",
                values.len()
            )));
        }
        Ok(Heatmap {
            values,
            h,
            w,
            layer: 0,
            cluster: 0,
        })
    }

    pub fn filled(h: usize, w: usize, value: f64) -> Self {
        Heatmap {
            values: vec![value; h * w],
            h,
            w,
            layer: 0,
            cluster: 0,
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.w + x]
    }

    /// 8-bit gray levels, `round(255·v)`.
    pub fn to_gray(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|&v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8)
            .collect()
    }
}

/// `(v − min) / (max − min)`; a constant slice maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range.is_nan() || range <= 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| (v - min) / range).collect()
}

/// Shannon entropy (nats) of a distribution; zero entries contribute 0.
pub fn entropy(dist: &[f64]) -> f64 {
    -dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * libm::log(p))
        .sum::<f64>()
}

/// Per-cluster distributions over the `N` positions of a traced layer.
pub fn source_columns<T: Real>(
    trace: &LayerTrace<T>,
    source: HeatmapSource,
) -> Result<Vec<Vec<f64>>> {
    match source {
        HeatmapSource::Clusters => {
            let c = trace
                .clusters
                .as_ref()
                .ok_or(Error::NotPacaLayer(trace.info.layer))?;
            Ok((0..c.clusters())
                .map(|m| c.column(m).into_iter().map(|v| v.to_f64()).collect())
                .collect())
        }
        HeatmapSource::Attention => {
            let dims = trace.attention.dims();
            let (h, n, m) = (dims[0], dims[1], dims[2]);
            let a = trace.attention.data();
            Ok((0..m)
                .map(|j| {
                    let col: Vec<f64> = (0..n)
                        .map(|i| {
                            (0..h).map(|k| a[(k * n + i) * m + j].to_f64()).sum::<f64>() / h as f64
                        })
                        .collect();
                    let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = col.iter().map(|&v| libm::exp(v - max)).collect();
                    let s: f64 = e.iter().sum();
                    e.into_iter().map(|v| v / s).collect()
                })
                .collect())
        }
    }
}

pub fn heatmaps_from_trace<T: Real>(
    trace: &LayerTrace<T>,
    source: HeatmapSource,
) -> Result<Vec<Heatmap>> {
    let (h, w) = trace.info.hw;
    source_columns(trace, source)?
        .iter()
        .enumerate()
        .map(|(m, col)| {
            let mut hm = Heatmap::new(min_max_normalize(col), h, w)?;
            hm.layer = trace.info.layer;
            hm.cluster = m;
            Ok(hm)
        })
        .collect()
}

fn check_image<T: Real>(model: &PaCaModel<T>, raw: &Tensor<T>) -> Result<()> {
    let cfg = model.config();
    if raw.dims() != [cfg.input.0, cfg.input.1, cfg.in_channels] {
        return Err(Error::InvalidShape {
            op: "explain",
            msg: alloc::format!("image {} does not match model input", raw.shape()),
        });
    }
    Ok(())
}

/// Runs one retained forward of a raw-range `[H₀, W₀, 3]` image and returns
/// the trace of `layer` plus class probabilities.
pub fn trace_layer<T: Real>(
    model: &PaCaModel<T>,
    raw: &Tensor<T>,
    layer: usize,
    norm: Normalization,
) -> Result<(LayerTrace<T>, Vec<f64>)> {
    check_image(model, raw)?;
    let layers = model.config().layer_count();
    if layer >= layers {
        return Err(Error::LayerOutOfRange { layer, layers });
    }
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, false);
    let img = tape.constant(norm.tensor(raw));
    let (logits, traces) = model.forward_image(&mut tape, &p, img, true)?;
    let probs = softmax_f64(tape.value(logits).data());
    let trace = traces
        .and_then(|mut t| (layer < t.len()).then(|| t.swap_remove(layer)))
        .ok_or(Error::LayerOutOfRange { layer, layers })?;
    Ok((trace, probs))
}

pub fn extract_heatmaps<T: Real>(
    model: &PaCaModel<T>,
    raw: &Tensor<T>,
    layer: usize,
    source: HeatmapSource,
    norm: Normalization,
) -> Result<Vec<Heatmap>> {
    let (trace, _) = trace_layer(model, raw, layer, norm)?;
    heatmaps_from_trace(&trace, source)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn upsample_bilinear(hm: &Heatmap, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let src =
            ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = libm::floor(src) as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, hm.h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, hm.w, out_w);
            let top = hm.at(y0, x0) * (1.0 - fx) + hm.at(y0, x1) * fx;
            let bottom = hm.at(y1, x0) * (1.0 - fx) + hm.at(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// `x ⊙ upsample(1 − ℋ)` on a raw-range `[H, W, C]` image.
pub fn mask_image<T: Real>(raw: &Tensor<T>, hm: &Heatmap) -> Result<Tensor<T>> {
    let dims = raw.dims();
    if dims.len() != 3 {
        return Err(Error::InvalidShape {
            op: "mask_image",
            msg: alloc::format!("expected [H, W, C], got {}", raw.shape()),
        });
    }
    let (h, w, c) = (dims[0], dims[1], dims[2]);
    let up = upsample_bilinear(hm, h, w);
    let data = raw
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * T::from_f64(1.0 - up[i / c]))
        .collect();
    Tensor::new(dims, data)
}

fn softmax_f64<T: Real>(logits: &[T]) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|v| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| libm::exp(v.to_f64() - max)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax class probabilities for a raw-range image.
pub fn class_probabilities<T: Real>(
    model: &PaCaModel<T>,
    raw: &Tensor<T>,
    norm: Normalization,
) -> Result<Vec<f64>> {
    check_image(model, raw)?;
    let dims = raw.dims();
    let batch = norm.tensor(raw).reshape(&[1, dims[0], dims[1], dims[2]])?;
    let logits = model.predict(&batch)?;
    Ok(softmax_f64(logits.data()))
}

/// Cluster order: importance descending; runs of scores within
/// [`TIE_EPSILON`] of the run's leader are ordered by entropy ascending.
pub fn rank_clusters(importance: &[f64], entropies: &[f64], eps: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]));
    let mut start = 0;
    while start < order.len() {
        let lead = importance[order[start]];
        let mut end = start + 1;
        while end < order.len() && lead - importance[order[end]] <= eps {
            end += 1;
        }
        order[start..end].sort_by(|&a, &b| entropies[a].total_cmp(&entropies[b]));
        start = end;
    }
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterScore {
    pub cluster: usize,
    /// `p_y(x) − p_y(x̃)`
    pub importance: f64,
    /// Entropy of the unnormalized column distribution.
    pub entropy: f64,
    /// 0 is most important.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub layer: usize,
    pub label: usize,
    pub predicted: usize,
    /// Set when the model misclassifies the unmasked image.
    pub misclassified: bool,
    pub p_clean: f64,
    /// Indexed by cluster.
    pub scores: Vec<ClusterScore>,
    /// Cluster indices, most important first.
    pub ranking: Vec<usize>,
    pub heatmaps: Vec<Heatmap>,
}

/// Scores every cluster of `layer` by the probability drop its mask causes.
pub fn cluster_importance<T: Real>(
    model: &PaCaModel<T>,
    raw: &Tensor<T>,
    label: usize,
    layer: usize,
    source: HeatmapSource,
    norm: Normalization,
) -> Result<ImportanceReport> {
    let classes = model.config().classes;
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let (trace, probs) = trace_layer(model, raw, layer, norm)?;
    let columns = source_columns(&trace, source)?;
    let heatmaps = heatmaps_from_trace(&trace, source)?;
    let predicted = argmax(&probs);
    let p_clean = probs[label];
    let mut importance = Vec::with_capacity(heatmaps.len());
    for hm in &heatmaps {
        let masked = mask_image(raw, hm)?;
        importance.push(p_clean - class_probabilities(model, &masked, norm)?[label]);
    }
    let entropies: Vec<f64> = columns.iter().map(|c| entropy(c)).collect();
    let ranking = rank_clusters(&importance, &entropies, TIE_EPSILON);
    let mut scores: Vec<ClusterScore> = (0..importance.len())
        .map(|m| ClusterScore {
            cluster: m,
            importance: importance[m],
            entropy: entropies[m],
            rank: 0,
        })
        .collect();
    for (r, &m) in ranking.iter().enumerate() {
        scores[m].rank = r;
    }
    Ok(ImportanceReport {
        layer,
        label,
        predicted,
        misclassified: predicted != label,
        p_clean,
        scores,
        ranking,
        heatmaps,
    })
}

/// Linear blue→red colormap.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [255.0 * v, 0.0, 255.0 * (1.0 - v)]
}

/// `0.5·image + 0.5·colormap(upsampled heatmap)` as RGB bytes.
pub fn overlay<T: Real>(raw: &Tensor<T>, hm: &Heatmap) -> Result<Vec<u8>> {
    let dims = raw.dims();
    if dims.len() != 3 || dims[2] != 3 {
        return Err(Error::InvalidShape {
            op: "overlay",
            msg: alloc::format!("expected [H, W, 3], got {}", raw.shape()),
        });
    }
    let up = upsample_bilinear(hm, dims[0], dims[1]);
    Ok(raw
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let color = colormap(up[i / 3])[i % 3];
            libm::round((0.5 * v.to_f64() + 0.5 * color).clamp(0.0, 255.0)) as u8
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_slice_normalizes_to_zero() {
        assert_eq!(min_max_normalize(&[0.25; 6]), vec![0.0; 6]);
        assert_eq!(min_max_normalize(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn entropy_bounds() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        let u = [0.25; 4];
        assert!((entropy(&u) - libm::log(4.0)).abs() < 1e-12);
    }

    #[test]
    fn upsample_two_to_four_matches_hand_interpolation() {
        let hm = Heatmap::new(vec![0.0, 1.0, 0.5, 0.25], 2, 2).unwrap();
        let up = upsample_bilinear(&hm, 4, 4);
        // per axis weights: [1, 0], [.75, .25], [.25, .75], [0, 1]
        let wts = [(1.0, 0.0), (0.75, 0.25), (0.25, 0.75), (0.0, 1.0)];
        for (y, &(a0, a1)) in wts.iter().enumerate() {
            for (x, &(b0, b1)) in wts.iter().enumerate() {
                let expect = a0 * (b0 * 0.0 + b1 * 1.0) + a1 * (b0 * 0.5 + b1 * 0.25);
                assert!((up[y * 4 + x] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_extremes() {
        let img = Tensor::<f64>::from_fn(&[4, 4, 3], |i| (i % 256) as f64).unwrap();
        let same = mask_image(&img, &Heatmap::filled(2, 2, 0.0)).unwrap();
        assert_eq!(same, img);
        let dark = mask_image(&img, &Heatmap::filled(2, 2, 1.0)).unwrap();
        assert!(dark.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ties_prefer_low_entropy() {
        let order = rank_clusters(&[0.2, 0.2005, 0.5], &[1.0, 2.0, 3.0], TIE_EPSILON);
        assert_eq!(order, vec![2, 0, 1]);
        let order = rank_clusters(&[0.1, 0.3], &[0.0, 5.0], TIE_EPSILON);
        assert_eq!(order, vec![1, 0]);
    }

    #[test]
    fn gray_levels_round() {
        let hm = Heatmap::new(vec![0.0, 0.5, 1.0, 0.002], 2, 2).unwrap();
        assert_eq!(hm.to_gray(), vec![0, 128, 255, 1]);
    }
}
