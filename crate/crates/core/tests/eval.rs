use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sonokey::eval::{
    detect_video, embed_video, frame_average_correct, input_batch, knn_coclassify, pooled_features, sp_sn, tsne,
    Reference, TsneConfig,
};
use sonokey::harness::{generate, scenes};
use sonokey::rtfpm::RtfpmConfig;
use sonokey::transporter::{encode, AttentionMode, ModelConfig, TransporterModel};

fn random_case(seed: u64, frames: usize) -> (Vec<Vec<(f64, f64)>>, Vec<Array2<bool>>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let kps = (0..frames)
        .map(|_| (0..r.random_range(1..6)).map(|_| (r.random_range(-2.0..26.0), r.random_range(-2.0..26.0))).collect())
        .collect();
    let density = r.random_range(0.0..0.2);
    let masks = (0..frames)
        .map(|_| Array2::from_shape_fn((24, 24), |_| r.random::<f64>() < density))
        .collect();
    (kps, masks)
}

/// Labels components by repeated relaxation rather than search, then counts
/// every keypoint-pixel pair.
fn brute_force(kps: &[Vec<(f64, f64)>], masks: &[Array2<bool>], radius: f64) -> (f64, Option<f64>) {
    let (mut sp_sum, mut sn_sum, mut sn_frames) = (0.0, 0.0, 0);
    for (k, m) in kps.iter().zip(masks) {
        let (h, w) = m.dim();
        let mut label = Array2::from_shape_fn((h, w), |(r, c)| if m[(r, c)] { (r * w + c) as i64 } else { -1 });
        loop {
            let mut changed = false;
            for r in 0..h {
                for c in 0..w {
                    if label[(r, c)] < 0 {
                        continue;
                    }
                    let mut best = label[(r, c)];
                    for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                        let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                        if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w && label[(rr as usize, cc as usize)] >= 0 {
                            best = best.min(label[(rr as usize, cc as usize)]);
                        }
                    }
                    if best != label[(r, c)] {
                        label[(r, c)] = best;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut ids: Vec<i64> = label.iter().copied().filter(|&l| l >= 0).collect();
        ids.sort();
        ids.dedup();
        let hits = |p: &(f64, f64), id: i64| {
            label
                .indexed_iter()
                .any(|((r, c), &l)| l == id && ((p.0 - c as f64).powi(2) + (p.1 - r as f64).powi(2)).sqrt() <= radius)
        };
        let detecting = k.iter().filter(|p| ids.iter().any(|&id| hits(p, id))).count();
        sp_sum += detecting as f64 / k.len() as f64;
        if !ids.is_empty() {
            let found = ids.iter().filter(|&&id| k.iter().any(|p| hits(p, id))).count();
            sn_sum += found as f64 / ids.len() as f64;
            sn_frames += 1;
        }
    }
    (sp_sum / kps.len() as f64, (sn_frames > 0).then(|| sn_sum / sn_frames as f64))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sp_sn_matches_brute_force(seed in any::<u64>(), radius in 0.0f64..6.0) {
        let (kps, masks) = random_case(seed, 20);
        let r = sp_sn(&kps, &masks, radius).unwrap();
        let (sp, sn) = brute_force(&kps, &masks, radius);
        prop_assert!((r.sp - sp).abs() < 1e-12);
        match (r.sn, sn) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn sp_sn_grow_with_radius(seed in any::<u64>(), r1 in 0.0f64..8.0, extra in 0.0f64..8.0) {
        let (kps, masks) = random_case(seed, 6);
        let a = sp_sn(&kps, &masks, r1).unwrap();
        let b = sp_sn(&kps, &masks, r1 + extra).unwrap();
        prop_assert!(b.sp >= a.sp && b.sp_pooled >= a.sp_pooled);
        prop_assert!(b.sn >= a.sn && b.sn_pooled >= a.sn_pooled);
        prop_assert!((0.0..=1.0).contains(&a.sp));
    }

    #[test]
    fn far_apart_classes_are_always_separated(seed in any::<u64>(), gap in 3.0f64..50.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (c, name) in ["a", "b", "c"].iter().enumerate() {
            for _ in 0..8 {
                // Each class fits in a unit ball; centres are `gap` apart.
                let u: f64 = r.random_range(-0.5..0.5);
                let v: f64 = r.random_range(-0.5..0.5);
                pts.push(vec![c as f64 * gap + u, v]);
                labels.push(name.to_string());
            }
        }
        let rep = knn_coclassify(&pts, &labels, 0.7, 3, seed, 5).unwrap();
        prop_assert_eq!(rep.median.accuracy, 1.0);
        prop_assert!(rep.trials.iter().all(|t| t.accuracy == 1.0));
    }

    #[test]
    fn tsne_lowers_the_divergence(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..18).map(|_| (0..4).map(|_| r.random_range(0.0..1.0)).collect()).collect();
        let res = tsne(&x, &TsneConfig { perplexity: 5.0, iterations: 600, seed, ..TsneConfig::default() }).unwrap();
        prop_assert!(res.kl_final <= res.kl_initial, "{} > {}", res.kl_final, res.kl_initial);
    }
}

#[test]
fn shuffled_labels_sit_at_chance() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let pts: Vec<Vec<f64>> = (0..60).map(|_| vec![r.random_range(0.0..1.0), r.random_range(0.0..1.0)]).collect();
    let labels: Vec<String> = (0..60).map(|i| if i % 2 == 0 { "a" } else { "b" }.to_string()).collect();
    let rep = knn_coclassify(&pts, &labels, 0.7, 5, 11, 10).unwrap();
    assert!((rep.median.accuracy - 0.5).abs() <= 0.15, "{}", rep.median.accuracy);
}

fn model() -> TransporterModel<f32> {
    let cfg = ModelConfig {
        input_size: 32,
        k: 3,
        feature_channels: 6,
        width: 4,
        attention: AttentionMode::LearnedSigma,
        ..ModelConfig::default()
    };
    TransporterModel::new(cfg, 4).unwrap()
}

fn rtfpm() -> RtfpmConfig {
    RtfpmConfig {
        size: 32,
        ..RtfpmConfig::default()
    }
}

#[test]
fn pooled_features_are_channel_means() {
    let m = model();
    let v = generate(&scenes::band_streaks_overlay(128, 3, 2)).unwrap();
    let mut frames = v.frames.clone();
    frames.push(v.frames[0].clone());
    let x = input_batch(&frames, &rtfpm()).unwrap();
    let pooled = pooled_features(&m, &x).unwrap();
    let psi = encode(&m, &x).unwrap();
    let s = psi.shape().to_vec();
    assert_eq!(pooled[0].len(), 6);
    for (i, p) in pooled.iter().enumerate() {
        for (c, &val) in p.iter().enumerate() {
            let mut mean = 0.0f64;
            for y in 0..s[2] {
                for xx in 0..s[3] {
                    mean += psi.data()[((i * s[1] + c) * s[2] + y) * s[3] + xx] as f64;
                }
            }
            mean /= (s[2] * s[3]) as f64;
            assert!((val as f64 - mean).abs() < 1e-6, "{val} vs {mean}");
        }
    }
    assert_eq!(pooled[0], pooled[3]);

    let recs = embed_video(&m, "v", &frames.iter().cloned().enumerate().collect::<Vec<_>>(), Some("x"), &rtfpm(), 2).unwrap();
    assert_eq!(recs.len(), 4);
    assert_eq!(recs[1].vector, pooled[1]);
    assert_eq!(recs[3].frame, 3);
}

#[test]
fn correction_only_changes_the_input() {
    let m = model();
    let v = generate(&scenes::band_streaks_overlay(128, 5, 9)).unwrap();
    let on = detect_video(&m, &v.frames, &rtfpm(), Some(Reference::Median), 3).unwrap();
    let pre = frame_average_correct(&v.frames, Reference::Median).unwrap();
    let manual = detect_video(&m, &pre, &rtfpm(), None, 3).unwrap();
    assert_eq!(on, manual);
    let off = detect_video(&m, &v.frames, &rtfpm(), None, 3).unwrap();
    assert_eq!(off.len(), 5);
    // Pixels refer to the 128 px frame, not the 32 px network input.
    assert!(off.iter().flat_map(|f| &f.pixels).flatten().all(|&p| (0.0..=127.0).contains(&p)));
}
