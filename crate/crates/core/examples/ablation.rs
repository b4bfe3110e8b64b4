//! Trains every variant on the same synthetic scenes and reports context
//! length, parameter count and held-out bits per occupied voxel.
//!
//! cargo run --release --example ablation

use nnoc::codec;
use nnoc::context::collect_from_clouds;
use nnoc::model::{train, TrainConfig};
use nnoc::synth::structured_scene;
use nnoc::{Variant, VoxelSet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let depth = 6;
    let train_set: Vec<VoxelSet> = (0..5).map(|s| structured_scene(depth, s)).collect();
    let val_set = vec![structured_scene(depth, 100)];
    let test_set: Vec<VoxelSet> = (200..203).map(|s| structured_scene(depth, s)).collect();
    let cfg = TrainConfig {
        batch_size: 256,
        max_epochs: 30,
        seed: 7,
        ..TrainConfig::default()
    };

    println!("variant  n_C  params  best_epoch  bpov");
    for variant in Variant::ALL {
        let hist = collect_from_clouds(&train_set, variant.template());
        let val = collect_from_clouds(&val_set, variant.template());
        let out = train(&hist, &val, variant, &cfg)?;
        let mut bpov = 0.0;
        for vs in &test_set {
            let bs = codec::encode(vs, &out.model, variant)?;
            bpov += codec::bpov(&bs, vs)?.total;
        }
        println!(
            "{:<7} {:>4} {:>7} {:>11}  {:.4}",
            variant.name(),
            variant.context_len(),
            out.model.param_count(),
            out.best_epoch,
            bpov / test_set.len() as f64
        );
    }
    Ok(())
}
