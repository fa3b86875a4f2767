//! Probe, distance, attribution, collapse and constancy diagnostics.

mod common;

use common::{compact_config, random_views, rng, tiny_config};
use lsn_core::augment::AugPolicy;
use lsn_core::backbone::{collapse_stage, init_params, ArchConfig};
use lsn_core::data::synth_dataset;
use lsn_core::eval::{
    attribution_map, collapse_metric, extract_all_features, extract_features, gradient_attribution, level_gradient,
    linear_probe, theorem1_probe, view_distance_stats, Features, LossSelection, ProbeConfig,
};
use lsn_core::ssl::Preset;
use lsn_core::train::TrainState;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn probe_separates_blobs_like_the_closed_form_rule() {
    let mut r = rng(1);
    let (n, d) = (1000, 8);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let sign = if y == 1 { 1.0 } else { -1.0 };
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(&mut r);
            data.push(if j == 0 { 3.0 * sign + 0.5 * noise } else { noise });
        }
        labels.push(y);
    }
    let f = Features { rows: n, dim: d, data };
    // The margin is six noise deviations, so the rule x₀ > 0 is all but exact.
    let rule = (0..n).filter(|&i| usize::from(f.row(i)[0] > 0.0) == labels[i]).count() as f64 / n as f64;
    assert!(rule > 0.999);
    let probe = linear_probe(&f, &labels, 2, &ProbeConfig::default()).unwrap();
    assert!(probe.accuracy >= 0.99, "{probe:?}");
    assert!(probe.accuracy >= rule - 0.01);
    assert_eq!(linear_probe(&f, &labels, 2, &ProbeConfig::default()).unwrap(), probe);
}

#[test]
fn probe_on_shuffled_labels_sits_at_chance() {
    let mut r = rng(2);
    let (n, d, k) = (5000, 16, 10);
    let data: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect();
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let f = Features { rows: n, dim: d, data };
    let probe = linear_probe(&f, &labels, k, &ProbeConfig::default()).unwrap();
    assert!((probe.accuracy - 1.0 / k as f64).abs() <= 0.03, "{probe:?}");
}

#[test]
fn raw_pixels_of_the_synthetic_set_are_linearly_informative() {
    let ds = synth_dataset(2000, 10, 7).unwrap();
    let f = Features {
        rows: ds.len(),
        dim: ds.image_len(),
        data: ds.images.iter().map(|&v| v as f64).collect(),
    };
    let probe = linear_probe(&f, &ds.labels, 10, &ProbeConfig::default()).unwrap();
    eprintln!("raw-pixel probe accuracy {:.3}", probe.accuracy);
    assert!(probe.accuracy > 0.4, "{probe:?}");
    // Regression anchor for this generator and probe recipe.
    assert!((probe.accuracy - 0.703).abs() < 0.01, "{probe:?}");
}

#[test]
fn uniform_sphere_spread_matches_reference() {
    let mut r = rng(3);
    let (n, d) = (4000, 64);
    let data: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect();
    let report = collapse_metric(&Features { rows: n, dim: d, data }).unwrap();
    let reference = 1.0 / (d as f64).sqrt();
    assert!((report.mean_std / reference - 1.0).abs() < 0.1, "{report:?}");
    assert!(!report.collapsed);
}

#[test]
fn features_have_stage_width_and_follow_collapse() {
    let arch = ArchConfig::compact();
    let ds = synth_dataset(12, 4, 1).unwrap();
    let params = init_params(&arch, 9).unwrap();
    let f = extract_all_features(&params, &arch, &ds).unwrap();
    for (s, fs) in f.iter().enumerate() {
        assert_eq!((fs.rows, fs.dim), (12, arch.stage_channels[s]));
    }
    let twice = ds.subset(&[3, 3]);
    let f2 = extract_features(&params, &arch, 4, &twice).unwrap();
    assert_eq!(f2.row(0), f2.row(1));
    assert!(extract_features(&params, &arch, 5, &ds).is_err());

    let mut collapsed = params.clone();
    collapse_stage(&mut collapsed, &arch, 2).unwrap();
    let fc = extract_all_features(&collapsed, &arch, &ds).unwrap();
    for (s, fs) in fc.iter().enumerate() {
        let constant = (1..fs.rows).all(|i| fs.row(i) == fs.row(0));
        assert_eq!(constant, s + 1 >= 2, "stage {}", s + 1);
    }
}

#[test]
fn view_distances_are_bounded_and_vanish_without_augmentation() {
    let arch = ArchConfig::compact();
    let ds = synth_dataset(40, 4, 2).unwrap();
    let params = init_params(&arch, 1).unwrap();
    let stats = view_distance_stats(&params, &arch, &ds, &[1, 2, 3, 4], 30, &AugPolicy::default(), 0).unwrap();
    assert_eq!(stats.len(), 4);
    for s in &stats {
        assert_eq!(s.distances.len(), 30);
        assert!(s.distances.iter().all(|&d| (0.0..=2.0).contains(&d)));
        assert!(s.min <= s.q25 && s.q25 <= s.median && s.median <= s.q75 && s.q75 <= s.max);
    }
    let same = view_distance_stats(&params, &arch, &ds, &[1, 4], 10, &AugPolicy::identity(32), 0).unwrap();
    assert!(same.iter().all(|s| s.distances.iter().all(|&d| d == 0.0)));
    assert!(view_distance_stats(&params, &arch, &ds, &[1], 41, &AugPolicy::default(), 0).is_err());
}

#[test]
fn per_level_gradients_add_up_to_the_total() {
    for (preset, seed) in [(Preset::LadderByol, 1), (Preset::LadderDenseByol, 2)] {
        let cfg = tiny_config(preset);
        let state = TrainState::init(&cfg).unwrap();
        let (xa, xb) = random_views(&cfg.arch, 4, seed);
        let total = level_gradient(&state.online, &state.target, &cfg, &xa, &xb, LossSelection::Total, 1).unwrap();
        let mut sum = vec![0.0; total.numel()];
        for level in 1..=4 {
            let g = level_gradient(&state.online, &state.target, &cfg, &xa, &xb, LossSelection::WeightedLevel(level), 1).unwrap();
            sum.iter_mut().zip(g.data()).for_each(|(s, v)| *s += v);
        }
        let diff = sum.iter().zip(total.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = total.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(scale > 0.0 && diff / scale < 1e-12, "{preset}: {:e}", diff / scale);
    }
}

#[test]
fn attribution_ignores_level_weights_and_matches_stage_one_extent() {
    let mut cfg = compact_config(Preset::LadderByol, 1, 4);
    cfg.heads.hidden = 16;
    let state = TrainState::init(&cfg).unwrap();
    let (xa, xb) = random_views(&cfg.arch, 4, 3);
    let a = gradient_attribution(&state.online, &state.target, &cfg, &xa, &xb, 4, 1).unwrap();
    assert_eq!((a.side, a.maps.len(), a.maps[0].len()), (32, 4, 32 * 32));

    let mut zeroed = cfg.clone();
    zeroed.ladder.weights = vec![0.0, 0.0, 0.0, 1.0];
    let b = gradient_attribution(&state.online, &state.target, &zeroed, &xa, &xb, 4, 1).unwrap();
    assert_eq!(a.maps, b.maps);
    let weighted = level_gradient(&state.online, &state.target, &zeroed, &xa, &xb, LossSelection::WeightedLevel(2), 1).unwrap();
    assert!(attribution_map(&weighted).iter().flatten().all(|&v| v == 0.0));

    assert!(gradient_attribution(&state.online, &state.target, &cfg, &xa, &xb, 1, 1).is_err());
    let byol = compact_config(Preset::Byol, 1, 4);
    let s = TrainState::init(&byol).unwrap();
    assert!(gradient_attribution(&s.online, &s.target, &byol, &xa, &xb, 2, 1).is_err());
}

#[test]
fn collapse_nests_upward_for_every_stage() {
    let arch = ArchConfig::compact();
    for seed in 0..3 {
        for stage in 1..=4 {
            let r = theorem1_probe(&arch, seed, stage, 4).unwrap();
            assert!(r.holds, "seed {seed} stage {stage}: {r:?}");
            assert_eq!(r.constant.iter().filter(|&&c| c).count(), 5 - stage);
        }
    }
}
