use codemae::data::{Sample, SynthConfig, NUM_CLASSES};
use codemae::diagnostics::{linear_probe, pooled_matrix, ProbeConfig};
use codemae::model::{Modality, ModelConfig, ModelState};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scenes(seed: u64) -> Vec<Sample<f32>> {
    SynthConfig {
        scenes: 240,
        size: 32,
        seed,
        class_coherence: 0.7,
        ..Default::default()
    }
    .samples()
    .unwrap()
}

fn encoder() -> ModelState<f32> {
    let cfg = ModelConfig {
        image_size: 32,
        patch: 8,
        width: 32,
        heads: 4,
        encoder_depth: 2,
        decoder_width: 16,
        decoder_heads: 2,
        decoder_depth: 1,
        cdr_depth: 1,
        ..Default::default()
    };
    ModelState::init(&cfg, 11).unwrap()
}

#[test]
fn shuffled_labels_give_chance() {
    let model = encoder();
    let samples = scenes(21);
    let chance = 1.0 / NUM_CLASSES as f64;
    for m in Modality::BOTH {
        let (x, mut y) = pooled_matrix(&model, &samples, m, None).unwrap();
        let mut acc = 0.0;
        for seed in 0..5 {
            y.shuffle(&mut ChaCha8Rng::seed_from_u64(100 + seed));
            acc += linear_probe(&x, &y, &ProbeConfig { seed, ..Default::default() }).unwrap().accuracy / 5.0;
        }
        assert!((acc - chance).abs() <= 0.1, "{m}: {acc}");
    }
}

#[test]
fn random_encoder_beats_chance() {
    let model = encoder();
    let samples = scenes(22);
    let chance = 1.0 / NUM_CLASSES as f64;
    for m in Modality::BOTH {
        let (x, y) = pooled_matrix(&model, &samples, m, None).unwrap();
        let mut acc = 0.0;
        for seed in 0..5 {
            acc += linear_probe(&x, &y, &ProbeConfig { seed, ..Default::default() }).unwrap().accuracy / 5.0;
        }
        assert!(acc > chance + 0.1, "{m}: {acc}");
    }
}

#[test]
fn same_seed_same_accuracy() {
    let model = encoder();
    let samples = scenes(23);
    let (x, y) = pooled_matrix(&model, &samples, Modality::Sar, None).unwrap();
    let cfg = ProbeConfig { seed: 4, ..Default::default() };
    assert_eq!(linear_probe(&x, &y, &cfg).unwrap(), linear_probe(&x, &y, &cfg).unwrap());
}
