use vec2instance_core::data::{centroid_sample, extract_instance_patches, generate_synthetic_tile, InstancePatch, SynthConfig};
use vec2instance_core::models::DecoderKind;
use vec2instance_core::training::{train_centroid, train_instance, CentroidDataset, Hooks, InstanceDataset, TrainConfig};

fn tiles(first_seed: u64, n: usize) -> Vec<vec2instance_core::data::ImageTile> {
    (0..n as u64)
        .map(|i| generate_synthetic_tile(first_seed + i, &SynthConfig::default()).unwrap().tile)
        .collect()
}

fn patches(first_seed: u64, n: usize) -> Vec<InstancePatch> {
    let mut out = Vec::new();
    let mut seed = first_seed;
    while out.len() < n {
        let t = generate_synthetic_tile(seed, &SynthConfig::default()).unwrap().tile;
        out.extend(extract_instance_patches(&t).unwrap().0);
        seed += 1;
    }
    out.truncate(n);
    out
}

/// RMSE of predicting zero everywhere, from a direct foreground count.
fn all_zero_baseline(ps: &[InstancePatch]) -> f64 {
    let mut fg = 0usize;
    let mut total = 0usize;
    for p in ps {
        for &v in &p.mask.values {
            assert!(v == 0.0 || v == 1.0);
            fg += (v == 1.0) as usize;
            total += 1;
        }
    }
    (fg as f64 / total as f64).sqrt()
}

#[test]
fn centroid_training_lowers_train_loss() {
    let all: Vec<_> = tiles(100, 20).iter().map(|t| centroid_sample(t).unwrap()).collect();
    let data = CentroidDataset {
        train: all[..16].to_vec(),
        test: all[16..].to_vec(),
    };
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 4,
        checkpoint_every: 0,
        ..TrainConfig::centroid_default()
    };
    let (_, log) = train_centroid(&data, &cfg, Hooks::default()).unwrap();
    assert_eq!(log.len(), 5);
    let first = log.records[0].train_loss;
    let last = log.last().unwrap().train_loss;
    assert!(last < first, "train loss {first} -> {last}");
}

#[test]
fn instance_training_beats_all_zero_baseline() {
    let train = patches(200, 200);
    let test = patches(900, 50);
    let baseline = all_zero_baseline(&test);
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 16,
        checkpoint_every: 0,
        ..TrainConfig::instance_default()
    };
    let data = InstanceDataset { train, test };
    let (_, log) = train_instance(&data, &cfg, DecoderKind::Vec2Instance, Hooks::default()).unwrap();
    assert_eq!(log.len(), 50);
    let final_test = log.last().unwrap().test_loss;
    assert!(final_test < 0.45, "final test loss {final_test}");
    assert!(final_test < baseline, "final test loss {final_test} vs all-zero {baseline}");
}
