use std::collections::HashSet;
use std::path::{Path, PathBuf};

use approx::assert_abs_diff_eq;
use rsd_core::diagnostics::{component_mass, mass_canonicalize, residual_ranking};
use rsd_core::fixtures::{generate_synthetic, make_holdout_mask, GeneratorKind, SyntheticSpec};
use rsd_core::ingestion::{embed_statements, load_block_fixture, load_embeddings_for, tokenize, topic_proxy};
use rsd_core::pullback::{compare_learned_vs_pullback, pullback_poles};
use rsd_core::trainer::{train, TrainConfig};
use rsd_core::{Hyperparams, TopicAffinity};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

#[test]
fn theorem_block_with_topic_proxy() {
    let fixture = load_block_fixture(data("theorems.txt")).unwrap();
    let texts = fixture.texts();
    let wanted: HashSet<String> = texts.iter().flat_map(|t| tokenize(t)).collect();
    let table = load_embeddings_for::<f64>(data("tiny_vectors.txt"), &wanted, 0).unwrap();
    let (block, coverage) = embed_statements(&texts, &table).unwrap();
    assert_eq!(block.n_items(), 12);
    assert!(coverage.iter().all(|&c| c == 1.0));

    let proxy = topic_proxy::<f64>(&fixture.items, TopicAffinity::default()).unwrap();
    let hyper = Hyperparams::default().with_components(3);
    let fit = train(&block, &proxy, &TrainConfig::default(), &hyper).unwrap();
    assert_eq!(fit.history.len(), 500);
    assert!(fit.history.iter().all(|o| o.is_finite()));
    assert!(fit.best_total() <= fit.history[0].total);

    let canon = mass_canonicalize(&fit.memberships, fit.poles(), &fit.model.heads, &fit.model.router);
    let mass = component_mass(&canon.s);
    assert!(mass.windows(2).into_iter().all(|w| w[0] >= w[1]));
    assert_abs_diff_eq!(mass.sum(), 1.0, epsilon = 1e-12);

    let (learned, pulled) = compare_learned_vs_pullback(&block, &fit.memberships, fit.poles(), 1e-8).unwrap();
    assert!(pulled <= learned + 1e-12);
    let r = rsd_core::block::residual(&block, &canon.s, &canon.c).unwrap();
    let ranking = residual_ranking(&block, &r, 12).unwrap();
    assert!(ranking.windows(2).all(|w| w[0].residual_norm >= w[1].residual_norm));
}

#[test]
fn f32_pipeline_tracks_f64() {
    let spec = SyntheticSpec::standard(GeneratorKind::Mixed, 3);
    let fx64 = generate_synthetic::<f64>(&spec).unwrap();
    let fx32 = generate_synthetic::<f32>(&spec).unwrap();
    for (a, b) in fx64.block.coords().iter().zip(fx32.block.coords()) {
        assert_abs_diff_eq!(*a, f64::from(*b), epsilon = 1e-5);
    }
    let cfg = TrainConfig {
        steps: 200,
        ..TrainConfig::default()
    };
    let hyper = Hyperparams::default();
    let fit64 = train(&fx64.block, &fx64.proxy, &cfg, &hyper).unwrap();
    let fit32 = train(&fx32.block, &fx32.proxy, &cfg, &hyper).unwrap();
    let (l64, l32) = (fit64.final_objective.total, f64::from(fit32.final_objective.total));
    assert!((l64 - l32).abs() <= 1e-2 * l64.max(1e-3), "f64 {l64} vs f32 {l32}");
    for row in fit32.memberships.matrix().rows() {
        assert_abs_diff_eq!(row.sum(), 1.0f32, epsilon = 1e-5);
    }
    let pb = pullback_poles(&fx32.block, &fx32.s_star).unwrap();
    assert!(pb.energy_gap <= 1e-3 * pb.energy_x);
}

#[test]
fn holdout_pairs_are_excluded_from_training_signal() {
    let spec = SyntheticSpec::standard(GeneratorKind::Hyperbolic, 5);
    let fx = generate_synthetic::<f64>(&spec).unwrap();
    let mask = make_holdout_mask(18, 0.2, 5).unwrap();
    assert_eq!(mask.pairs.len(), 30);
    let mut raw = fx.proxy.matrix().clone();
    for &(i, j) in &mask.pairs {
        raw[[i, j]] = 1.0 - raw[[i, j]];
        raw[[j, i]] = raw[[i, j]];
    }
    let flipped = rsd_core::ProxyMatrix::new(raw, "flipped").unwrap();
    let cfg = TrainConfig {
        steps: 60,
        masked_pairs: Some(mask.pairs.clone()),
        ..TrainConfig::default()
    };
    // the relation loss is scaled by the norm of the full proxy, so the
    // weight absorbs the change in norm
    let cfg_flipped = TrainConfig {
        lambda: flipped.frobenius_norm() / fx.proxy.frobenius_norm(),
        ..cfg.clone()
    };
    let a = train(&fx.block, &fx.proxy, &cfg, &Hyperparams::default()).unwrap();
    let b = train(&fx.block, &flipped, &cfg_flipped, &Hyperparams::default()).unwrap();
    for (x, y) in a.a_hat().iter().zip(b.a_hat()) {
        assert_abs_diff_eq!(*x, *y, epsilon = 1e-8);
    }
}
