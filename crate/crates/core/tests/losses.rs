use std::f64::consts::PI;

use creasenet::losses::triplet::{mine_triplets, triplet_loss, TripletConfig};
use creasenet::losses::{arcface_logits, cosine_distance, softmax_cross_entropy, ArcConfig};
use creasenet::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn cosine_distance_examples() {
    assert!(cosine_distance(&[3.0, -1.0], &[3.0, -1.0]).unwrap().abs() < 1e-15);
    assert!((cosine_distance(&[1.0, 0.0], &[0.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
    let s = 0.5f64.sqrt();
    assert!((cosine_distance(&[s, s], &[1.0, 0.0]).unwrap() - 0.292_893_218_813_452_5).abs() < 1e-12);
    assert!(matches!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateEmbedding)));
}

#[test]
fn triplet_loss_examples() {
    assert_eq!(triplet_loss(0.2, 0.9, 0.5), 0.0);
    assert!((triplet_loss(0.8, 0.4, 0.5) - 0.9).abs() < 1e-15);
    assert_eq!(triplet_loss(0.3, 0.3, 0.5), 0.5);
}

#[test]
fn triplet_loss_is_monotone() {
    let grid: Vec<f64> = (0..=40).map(|i| i as f64 * 0.05).collect();
    for &m in &[0.1, 0.5, 1.5] {
        for &a in &grid {
            for w in grid.windows(2) {
                assert!(triplet_loss(w[0], a, m) <= triplet_loss(w[1], a, m));
                assert!(triplet_loss(a, w[0], m) >= triplet_loss(a, w[1], m));
            }
        }
    }
}

#[test]
fn mining_separated_classes_yields_nothing() {
    let e = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
    assert!(mine_triplets(&e, &[0, 0, 1, 1], &TripletConfig::default()).unwrap().is_empty());
}

#[test]
fn mining_identical_embeddings_returns_every_valid_triplet() {
    let e = vec![vec![0.6, 0.8]; 4];
    let t = mine_triplets(&e, &[0, 0, 1, 1], &TripletConfig::default()).unwrap();
    assert_eq!(t.len(), 8);
    let mut sorted = t.clone();
    sorted.sort();
    assert_eq!(t, sorted);
}

#[test]
fn arcface_margin_zero_unit_scale_is_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = ArcConfig { margin: 0.0, scale: 1.0, num_classes: 3 };
    let angles: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let w: Vec<f64> = vec![angles[0].cos(), angles[1].cos(), angles[2].cos(), angles[0].sin(), angles[1].sin(), angles[2].sin()];
    let l = arcface_logits(&[1.0, 0.0], &w, 1, &cfg).unwrap();
    for j in 0..3 {
        assert!((l[j] - angles[j].cos()).abs() < 1e-12);
    }
}

#[test]
fn arcface_aligned_target_logit() {
    let cfg = ArcConfig { margin: 0.5, scale: 30.0, num_classes: 2 };
    let l = arcface_logits(&[1.0, 0.0], &[1.0, 0.0, 0.0, 1.0], 0, &cfg).unwrap();
    // cos = 1 is clamped to 1 - 1e-7 before arccos, which moves theta to ~4.5e-4 rad.
    assert!((l[0] - 26.321_042_055_559_18).abs() < 1e-9);
    assert!((l[0] - 30.0 * 0.5f64.cos()).abs() < 1e-2);
}

#[test]
fn arcface_two_class_hand_oracle() {
    // Unit embedding on the x axis, class columns at 30 and 80 degrees, target 0.
    let (a0, a1) = (30f64.to_radians(), 80f64.to_radians());
    let w = vec![a0.cos(), a1.cos(), a0.sin(), a1.sin()];
    let cfg = ArcConfig { margin: 0.5, scale: 30.0, num_classes: 2 };
    let logits = arcface_logits(&[1.0, 0.0], &w, 0, &cfg).unwrap();
    let target = 30.0 * (a0 + 0.5).cos();
    let other = 30.0 * a1.cos();
    let expected = (1.0 + (other - target).exp()).ln();
    assert!((softmax_cross_entropy(&logits, 0) - expected).abs() < 1e-12);
    // Hand values: 30 cos(1.023599) = 15.60888, 30 cos(80 deg) = 5.20944.
    assert!((target - 15.60888).abs() < 1e-5);
    assert!((other - 5.20944).abs() < 1e-5);
}

#[test]
fn arcface_margin_lowers_target_logit() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = 0.5;
    for _ in 0..500 {
        let theta = rng.random_range(1e-3..PI - m - 1e-3);
        let w = vec![theta.cos(), 0.0, theta.sin(), 1.0];
        let plain = arcface_logits(&[1.0, 0.0], &w, 0, &ArcConfig { margin: 0.0, scale: 30.0, num_classes: 2 }).unwrap();
        let with = arcface_logits(&[1.0, 0.0], &w, 0, &ArcConfig { margin: m, scale: 30.0, num_classes: 2 }).unwrap();
        assert!(with[0] < plain[0], "theta {theta}");
        assert_eq!(with[1], plain[1]);
    }
}

#[test]
fn arcface_rejects_bad_input() {
    let cfg = ArcConfig { margin: 0.5, scale: 30.0, num_classes: 2 };
    let w = [1.0, 0.0, 0.0, 1.0];
    assert!(matches!(arcface_logits(&[1.0, 0.0], &w, 2, &cfg), Err(Error::InvalidTarget { .. })));
    assert!(matches!(arcface_logits(&[1.0, 0.0, 0.0], &w, 0, &cfg), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn softmax_cross_entropy_examples() {
    assert!((softmax_cross_entropy(&[0.7; 5], 2) - 5f64.ln()).abs() < 1e-12);
    assert!(softmax_cross_entropy(&[50.0, 0.0], 0) < 1e-20);
    assert!((softmax_cross_entropy(&[1.0, 2.0], 0) - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
}
