//! Codes a synthetic scene with an untrained model and checks the
//! reconstruction, printing the per-resolution stream sizes.
//!
//! cargo run --release --example encode_decode -- [depth] [variant]

use nnoc::codec::{self, Bitstream};
use nnoc::synth::structured_scene;
use nnoc::{Model, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let depth: u8 = args.next().map(|a| a.parse()).transpose()?.unwrap_or(7);
    let variant: Variant = args.next().as_deref().unwrap_or("nnoc").parse()?;

    let cloud = structured_scene(depth, 1);
    let model = Model::init(variant, 0);
    let bytes = codec::encode(&cloud, &model, variant)?.to_bytes();

    let bs = Bitstream::from_bytes(&bytes)?;
    let decoded = codec::decode(&bs, &model)?;
    assert_eq!(decoded, cloud);

    let b = codec::bpov(&bs, &cloud)?;
    println!("{} voxels at depth {depth}, variant {variant}", cloud.len());
    println!("{} bytes, {:.4} bpov ({:.4} without header)", bytes.len(), b.total, b.content);
    for level in &bs.levels {
        println!("  r={:<2} mask {:>3} B  payload {:>6} B", level.r, level.mask.len(), level.payload.len());
    }
    println!("LOSSLESS: OK");
    Ok(())
}
