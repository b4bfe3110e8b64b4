//! Trains a model on synthetic sphere and plane scenes, then codes a
//! held-out scene with it and with the uniform model.
//!
//! cargo run --release --example train_model -- [variant] [out.model]

use std::time::Instant;

use nnoc::codec::{self, ideal_codelength};
use nnoc::context::collect_from_clouds;
use nnoc::model::{train, TrainConfig};
use nnoc::synth::structured_scene;
use nnoc::{Model, Variant, VoxelSet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let variant: Variant = args.next().as_deref().unwrap_or("nnoc").parse()?;
    let out = args.next();

    let depth = 6;
    let train_scenes: Vec<VoxelSet> = (0..5).map(|s| structured_scene(depth, s)).collect();
    let val_scene = vec![structured_scene(depth, 100)];
    let test_scene = structured_scene(depth, 200);

    let hist = collect_from_clouds(&train_scenes, variant.template());
    let val = collect_from_clouds(&val_scene, variant.template());
    println!(
        "training contexts: {} unique, {} occurrences",
        hist.unique(),
        hist.total()
    );

    let cfg = TrainConfig {
        batch_size: 256,
        max_epochs: 60,
        seed: 7,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let outcome = train(&hist, &val, variant, &cfg)?;
    println!("trained in {:.1}s, best epoch {}", start.elapsed().as_secs_f64(), outcome.best_epoch);
    for e in &outcome.log {
        println!(
            "epoch {:>3}  train {:.4}  val {:.4}  best {:.4}",
            e.epoch, e.train_bits, e.val_bits, e.best_val_bits
        );
    }

    for (name, model) in [("uniform", Model::uniform(variant)), ("trained", outcome.model.clone())] {
        let (bs, trace) = codec::encode_traced(&test_scene, &model, variant)?;
        let b = codec::bpov(&bs, &test_scene)?;
        println!(
            "{name:>8}: {} voxels, {:.4} bits/decision, {:.4} bpov",
            test_scene.len(),
            ideal_codelength(&trace) / trace.len() as f64,
            b.total
        );
        assert_eq!(codec::decode(&bs, &model)?, test_scene);
    }

    if let Some(path) = out {
        std::fs::write(&path, outcome.model.to_bytes())?;
        println!("model written to {path}");
    }
    Ok(())
}
