//! Compares sequential (NNOC) and section-batched (fNNOC) decoding time on
//! the same scene, and checks that the fNNOC decoder reproduces the
//! encoder's probabilities bit for bit.
//!
//! cargo run --release --example fast_variant -- [depth]

use std::time::Instant;

use nnoc::codec;
use nnoc::synth::structured_scene;
use nnoc::{Model, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let depth: u8 = std::env::args().nth(1).map(|a| a.parse()).transpose()?.unwrap_or(8);
    let cloud = structured_scene(depth, 3);
    println!("{} voxels at depth {depth}", cloud.len());

    for variant in [Variant::Nnoc, Variant::Fnnoc] {
        let model = Model::init(variant, 0);
        let t = Instant::now();
        let (bs, enc) = codec::encode_traced(&cloud, &model, variant)?;
        let encode_s = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let (out, dec) = codec::decode_traced(&bs, &model)?;
        let decode_s = t.elapsed().as_secs_f64();
        assert_eq!(out, cloud);
        let identical = enc
            .iter()
            .zip(&dec)
            .all(|(a, b)| a.p1.to_bits() == b.p1.to_bits() && a.context == b.context);
        println!(
            "{variant:>6}: encode {encode_s:.3}s  decode {decode_s:.3}s  {} decisions  traces identical: {identical}",
            enc.len()
        );
    }
    Ok(())
}
