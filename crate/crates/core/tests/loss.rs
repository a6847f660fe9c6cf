use conform_core::attention::AttentionMaps;
use conform_core::loss::{conform_loss_from_features, infonce_from_sims};
use conform_core::metrics::check_guidance_gradient;
use conform_core::numerics::{derived, Tensor};
use conform_core::pairing::{LabeledFeature, Source};
use conform_core::sampler::{ModelDims, ToyModel};
use conform_core::{conform_loss, cosine_sim, LossConfig, TokenGroup, TokenGroups};
use proptest::prelude::*;

fn feature(label: usize, map: Vec<f64>) -> LabeledFeature {
    LabeledFeature {
        label,
        token: 0,
        source: Source::Current,
        detached: false,
        map: Tensor::new(vec![map.len()], map).unwrap(),
    }
}

/// The objective written out directly: for every ordered same-label pair,
/// `−log(e^{s_ap/τ} / (e^{s_ap/τ} + Σ_n e^{s_an/τ}))`, averaged.
fn naive(features: &[LabeledFeature], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    };
    let (mut total, mut count) = (0.0, 0);
    for (i, a) in features.iter().enumerate() {
        for (j, p) in features.iter().enumerate() {
            if i == j || a.label != p.label {
                continue;
            }
            let num = (cos(a.flat(), p.flat()) / tau).exp();
            let mut den = num;
            for n in features.iter().filter(|n| n.label != a.label) {
                den += (cos(a.flat(), n.flat()) / tau).exp();
            }
            total += -(num / den).ln();
            count += 1;
        }
    }
    total / count as f64
}

/// 2–10 positive features of length 6 with every label used at least twice.
fn labelled_features() -> impl Strategy<Value = Vec<LabeledFeature>> {
    (2usize..=5)
        .prop_flat_map(|pairs| {
            let n = 2 * pairs;
            (
                Just(pairs),
                prop::collection::vec(prop::collection::vec(0.01..1.0f64, 6), n),
                prop::collection::vec(0usize..2, n),
            )
        })
        .prop_map(|(pairs, maps, extra)| {
            // labels 0 and 1 get two features each; the rest spread over {0, 1, 2}
            let mut labels = vec![0, 0, 1, 1];
            labels.extend(extra.iter().take(2 * pairs - 4).map(|&b| b + 1));
            if labels.iter().filter(|&&l| l == 2).count() == 1 {
                let k = labels.iter().position(|&l| l == 2).unwrap();
                labels[k] = 1;
            }
            labels
                .into_iter()
                .zip(maps)
                .map(|(l, m)| feature(l, m))
                .collect()
        })
}

proptest! {
    #[test]
    fn matches_the_naive_double_loop(features in labelled_features(), tau in 0.1..2.0f64) {
        let got = conform_loss_from_features(&features, LossConfig::new(tau).unwrap()).unwrap();
        prop_assert!((got - naive(&features, tau)).abs() < 1e-12);
        prop_assert!(got > 0.0);
    }

    #[test]
    fn positive_rescaling_of_maps_is_invisible(
        features in labelled_features(),
        scales in prop::collection::vec(0.01..100.0f64, 10),
    ) {
        let cfg = LossConfig::default();
        let scaled: Vec<LabeledFeature> = features
            .iter()
            .zip(&scales)
            .map(|(f, &c)| feature(f.label, f.flat().iter().map(|x| x * c).collect()))
            .collect();
        for (f, g) in features.iter().zip(&scaled).skip(1) {
            let a = cosine_sim(features[0].flat(), f.flat()).unwrap();
            let b = cosine_sim(features[0].flat(), g.flat()).unwrap();
            prop_assert!((a - b).abs() < 1e-14);
        }
        let a = conform_loss_from_features(&features, cfg).unwrap();
        let b = conform_loss_from_features(&scaled, cfg).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn a_shared_similarity_offset_cancels(
        pos in -1.0..1.0f64,
        negs in prop::collection::vec(-1.0..1.0f64, 1..8),
        shift in -5.0..5.0f64,
        tau in 0.1..2.0f64,
    ) {
        let base = infonce_from_sims(pos, &negs, tau).unwrap();
        let moved: Vec<f64> = negs.iter().map(|s| s + shift).collect();
        let shifted = infonce_from_sims(pos + shift, &moved, tau).unwrap();
        prop_assert!((base - shifted).abs() < 1e-10);
        prop_assert!(base > 0.0);
    }
}

fn maps(seed: u64, t: usize) -> AttentionMaps {
    let a = Tensor::randn(&[16, 6], &mut derived(seed, 0))
        .scale(2.0)
        .unwrap()
        .softmax_rows()
        .unwrap();
    AttentionMaps::new(4, 4, 6, t, &a).unwrap()
}

#[test]
fn group_order_does_not_change_the_loss() {
    let groups = TokenGroups::new(vec![
        TokenGroup::new(0, [1]),
        TokenGroup::new(2, []),
        TokenGroup::new(3, [4, 5]),
    ])
    .unwrap();
    let cfg = LossConfig::default();
    for seed in 0..5 {
        let (cur, prev) = (maps(seed, 3), maps(seed + 50, 4));
        let base = conform_loss(&cur, Some(&prev), &groups, cfg).unwrap();
        for perm in [[1, 2, 0], [2, 0, 1], [0, 2, 1]] {
            let other =
                conform_loss(&cur, Some(&prev), &groups.permuted(&perm).unwrap(), cfg).unwrap();
            assert!((base - other).abs() < 1e-12);
        }
    }
}

#[test]
fn latent_gradient_on_small_sandbox() {
    let dims = ModelDims {
        h: 4,
        w: 4,
        c: 2,
        ..ModelDims::default()
    };
    let model = ToyModel::from_seed(dims, 2, 10).unwrap();
    let groups = TokenGroups::new(vec![TokenGroup::new(3, [2]), TokenGroup::new(7, [6])]).unwrap();
    for point in 0..10 {
        let z = model.initial_latent(point);
        let prev = model
            .predict(&model.initial_latent(point + 10), 5)
            .unwrap()
            .maps;
        let c = check_guidance_gradient(
            &model,
            &z,
            4,
            Some(&prev),
            &groups,
            LossConfig::default(),
            1e-5,
        )
        .unwrap();
        assert!(c.max_rel_error < 1e-6, "point {point}: {c:?}");
    }
}
