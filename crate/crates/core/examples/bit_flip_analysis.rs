//! What a single bit flip does to small binary32 values, bit by bit.

use faultline::inject::flip_bit;
use faultline::metrics::bit_outcome_analysis;
use faultline::tensor::SeededRng;

fn main() {
    let mut rng = SeededRng::new(0, 0);
    let values: Vec<f32> = (0..100_000).map(|_| rng.uniform(-1.5, 1.5)).collect();
    let table = bit_outcome_analysis(&values);
    println!("{} values considered, {} skipped", table.considered, table.skipped);
    println!("bit  large   small   non-finite  max amplification");
    for b in &table.bits {
        println!(
            "{:>3}  {:.4}  {:.4}  {:.4}      {:.3e}",
            b.bit, b.large, b.small, b.non_finite, b.max_amplification
        );
    }
    for v in [0.5f32, -1.25, 1e-3] {
        println!("{v} with bit 30 flipped: {:e}", flip_bit(v, 30));
    }
}
