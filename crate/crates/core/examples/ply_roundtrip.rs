//! Writes a scene as PLY, reads it back, requantizes it to a coarser grid
//! and codes both versions.
//!
//! cargo run --release --example ply_roundtrip -- [out_dir]

use nnoc::codec;
use nnoc::synth::structured_scene;
use nnoc::{read_ply, requantize, write_ply, Model, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map(Into::into).unwrap_or_else(std::env::temp_dir);
    let path = dir.join("nnoc_scene.ply");

    let cloud = structured_scene(9, 4);
    write_ply(&cloud, &path)?;
    let raw = read_ply(&path)?;
    println!("{}: {} points, declared depth {:?}", path.display(), raw.len(), raw.bitdepth);

    let model = Model::uniform(Variant::Nnoc);
    for depth in [9, 8, 7] {
        let vs = requantize(&raw, depth)?;
        let bs = codec::encode(&vs, &model, Variant::Nnoc)?;
        assert_eq!(codec::decode(&bs, &model)?, vs);
        println!(
            "depth {depth}: {:>6} voxels, {:.4} bpov with the uniform model",
            vs.len(),
            codec::bpov(&bs, &vs)?.total
        );
    }
    Ok(())
}
