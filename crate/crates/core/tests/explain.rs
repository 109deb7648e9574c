mod common;

use paca_core::config::{Flavor, ModelConfig, Preset};
use paca_core::data::{synth_dataset, Normalization};
use paca_core::explain::{
    class_probabilities, cluster_importance, colormap, entropy, extract_heatmaps, mask_image,
    min_max_normalize, overlay, rank_clusters, source_columns, trace_layer, Heatmap, HeatmapSource,
    TIE_EPSILON,
};
use paca_core::model::PaCaModel;
use paca_core::{Error, Tensor};
use proptest::prelude::*;

fn tiny(seed: u64) -> PaCaModel<f64> {
    PaCaModel::build(&ModelConfig::tiny_debug(4, (16, 16)).unwrap(), seed).unwrap()
}

fn image(seed: u64) -> Tensor<f64> {
    synth_dataset(seed, 1, 4, (16, 16)).unwrap().raw_image(0)
}

#[test]
fn heatmaps_have_stage_geometry() {
    let model = tiny(0);
    let norm = Normalization::default();
    for (layer, hw) in [(0, (8, 8)), (1, (4, 4))] {
        let maps =
            extract_heatmaps(&model, &image(1), layer, HeatmapSource::Clusters, norm).unwrap();
        assert_eq!(maps.len(), 4);
        for (m, hm) in maps.iter().enumerate() {
            assert_eq!((hm.h, hm.w), hw);
            assert_eq!((hm.layer, hm.cluster), (layer, m));
            let lo = hm.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = hm.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((lo == 0.0 && hi == 1.0) || hi == 0.0);
        }
    }
}

#[test]
fn normalization_matches_scalar_oracle() {
    let model = tiny(2);
    let norm = Normalization::default();
    let (trace, _) = trace_layer(&model, &image(3), 0, norm).unwrap();
    let cols = source_columns(&trace, HeatmapSource::Clusters).unwrap();
    let maps = extract_heatmaps(&model, &image(3), 0, HeatmapSource::Clusters, norm).unwrap();
    for (col, hm) in cols.iter().zip(&maps) {
        let mut lo = col[0];
        let mut hi = col[0];
        for &v in col {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        let want: Vec<f64> = col.iter().map(|&v| (v - lo) / (hi - lo)).collect();
        assert_eq!(hm.values, want);
        let h = entropy(col);
        assert!(h >= 0.0 && h <= (col.len() as f64).ln() + 1e-12);
    }
}

#[test]
fn non_paca_layer_rejected() {
    let cfg = ModelConfig::preset(Preset::B0, Flavor::C100, 10).unwrap();
    let model = PaCaModel::<f32>::build(&cfg, 0).unwrap();
    let raw = Tensor::<f32>::full(&[32, 32, 3], 128.0).unwrap();
    let norm = Normalization::default();
    // stage 3 (blocks 4, 5) uses plain MHSA in this geometry
    let err = extract_heatmaps(&model, &raw, 4, HeatmapSource::Clusters, norm).unwrap_err();
    assert!(matches!(err, Error::NotPacaLayer(4)));
    let attn = extract_heatmaps(&model, &raw, 6, HeatmapSource::Attention, norm).unwrap();
    assert_eq!(attn.len(), 64);
    assert!(matches!(
        extract_heatmaps(&model, &raw, 8, HeatmapSource::Clusters, norm),
        Err(Error::LayerOutOfRange {
            layer: 8,
            layers: 8
        })
    ));
}

#[test]
fn attention_source_columns_are_distributions() {
    let model = tiny(4);
    let (trace, _) = trace_layer(&model, &image(5), 1, Normalization::default()).unwrap();
    for col in source_columns(&trace, HeatmapSource::Attention).unwrap() {
        assert_eq!(col.len(), 16);
        assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn constant_assignment_gives_zero_importance() {
    let mut model = tiny(6);
    // zero cluster logits: every column is uniform, so every heatmap is
    // constant and maps to zero
    for name in [
        "stages.0.blocks.0.attn.cluster.linear.weight",
        "stages.0.blocks.0.attn.cluster.linear.bias",
    ] {
        let dims = model
            .params()
            .get(model.params().id(name).unwrap())
            .dims()
            .to_vec();
        model
            .params_mut()
            .set(name, Tensor::zeros(&dims).unwrap())
            .unwrap();
    }
    let report = cluster_importance(
        &model,
        &image(7),
        1,
        0,
        HeatmapSource::Clusters,
        Normalization::default(),
    )
    .unwrap();
    for s in &report.scores {
        assert_eq!(s.importance, 0.0);
        assert!((s.entropy - 64f64.ln()).abs() < 1e-9);
    }
    let mut ranks: Vec<usize> = report.scores.iter().map(|s| s.rank).collect();
    ranks.sort();
    assert_eq!(ranks, vec![0, 1, 2, 3]);
}

#[test]
fn all_one_heatmap_equals_zero_image_drop() {
    let model = tiny(8);
    let norm = Normalization::default();
    let raw = image(9);
    let p = class_probabilities(&model, &raw, norm).unwrap();
    let masked = mask_image(&raw, &Heatmap::filled(8, 8, 1.0)).unwrap();
    let zero = Tensor::zeros(&[16, 16, 3]).unwrap();
    assert_eq!(masked, zero);
    let pz = class_probabilities(&model, &zero, norm).unwrap();
    let pm = class_probabilities(&model, &masked, norm).unwrap();
    assert_eq!(p[2] - pm[2], p[2] - pz[2]);
    let same = mask_image(&raw, &Heatmap::filled(8, 8, 0.0)).unwrap();
    assert_eq!(class_probabilities(&model, &same, norm).unwrap(), p);
}

#[test]
fn importance_scores_are_bounded_and_ranked() {
    let model = tiny(10);
    let report = cluster_importance(
        &model,
        &image(11),
        0,
        1,
        HeatmapSource::Clusters,
        Normalization::default(),
    )
    .unwrap();
    assert_eq!(report.heatmaps.len(), 4);
    for s in &report.scores {
        assert!(s.importance.is_finite() && (-1.0..=1.0).contains(&s.importance));
        assert_eq!(report.ranking[s.rank], s.cluster);
    }
    assert_eq!(report.misclassified, report.predicted != 0);
}

#[test]
fn exact_tie_prefers_lower_entropy() {
    assert_eq!(
        rank_clusters(&[0.3, 0.3], &[0.9, 0.1], TIE_EPSILON),
        vec![1, 0]
    );
    assert_eq!(
        rank_clusters(&[0.3, 0.3], &[0.1, 0.9], TIE_EPSILON),
        vec![0, 1]
    );
}

#[test]
fn one_hot_column_has_zero_entropy() {
    let mut col = vec![0.0; 9];
    col[4] = 1.0;
    assert_eq!(entropy(&col), 0.0);
    assert_eq!(min_max_normalize(&col)[4], 1.0);
}

#[test]
fn overlay_blends_half_and_half() {
    let raw = Tensor::<f64>::full(&[2, 2, 3], 100.0).unwrap();
    let hot = overlay(&raw, &Heatmap::filled(1, 1, 1.0)).unwrap();
    assert_eq!(&hot[..3], &[178, 50, 50]);
    let cold = overlay(&raw, &Heatmap::filled(1, 1, 0.0)).unwrap();
    assert_eq!(&cold[..3], &[50, 50, 178]);
    assert_eq!(colormap(0.5), [127.5, 0.0, 127.5]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ranking_invariant_under_monotone_rescaling(
        steps in prop::collection::vec(2u32..200, 2..8),
        perm_seed in any::<u64>(),
        a in 1.0f64..10.0,
        b in -5.0f64..5.0,
        cubic in any::<bool>(),
    ) {
        use rand::seq::SliceRandom;
        // distinct scores separated by more than the tie band
        let mut scores: Vec<f64> = steps
            .iter()
            .scan(-1.0, |acc, &s| { *acc += s as f64 * 2e-3; Some(*acc) })
            .collect();
        scores.shuffle(&mut common::rng(perm_seed));
        let entropies: Vec<f64> = (0..scores.len()).map(|i| i as f64).collect();
        let g = |x: f64| if cubic { x + x * x * x } else { a * x + b };
        let rescaled: Vec<f64> = scores.iter().map(|&x| g(x)).collect();
        prop_assert_eq!(
            rank_clusters(&scores, &entropies, TIE_EPSILON),
            rank_clusters(&rescaled, &entropies, TIE_EPSILON)
        );
    }

    #[test]
    fn ranking_is_a_permutation(scores in prop::collection::vec(-1.0f64..1.0, 1..12)) {
        let ent = vec![0.0; scores.len()];
        let mut r = rank_clusters(&scores, &ent, TIE_EPSILON);
        r.sort();
        prop_assert_eq!(r, (0..scores.len()).collect::<Vec<_>>());
    }
}
