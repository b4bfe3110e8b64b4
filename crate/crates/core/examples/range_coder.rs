//! Codes a skewed bit source with the binary range coder and compares the
//! output size with the ideal code length.
//!
//! cargo run --release --example range_coder -- [symbols] [p1]

use nnoc::entropy::{Decoder, Encoder};
use nnoc::model::quantize;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(1_000_000);
    let p1: f32 = args.next().map(|a| a.parse()).transpose()?.unwrap_or(0.05);

    let dist = quantize(p1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bits: Vec<bool> = (0..n).map(|_| rng.gen_bool(p1 as f64)).collect();

    let mut enc = Encoder::new();
    let mut ideal = 0.0;
    for &b in &bits {
        enc.encode(b, dist);
        ideal += dist.cost(b);
    }
    let bytes = enc.finish();

    let mut dec = Decoder::new(&bytes)?;
    for &b in &bits {
        assert_eq!(dec.decode(dist)?, b);
    }
    println!("{n} symbols, p1 = {p1} (c1 = {} / 16384)", dist.c1());
    println!("ideal  {:.0} bits", ideal);
    println!("actual {} bits ({:+.1})", 8 * bytes.len(), 8.0 * bytes.len() as f64 - ideal);
    Ok(())
}
