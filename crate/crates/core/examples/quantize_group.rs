//! Quantize one group at 2 and 4 bits and inspect codes, packing and error.

use mixkvq::{dequantize_group, quantization_error_bound, quantize_group, BitWidth};

fn main() -> mixkvq::Result<()> {
    let x = [0.12, -0.80, 0.33, 1.70, -0.05, 0.91, -1.24, 0.48];
    for bits in [BitWidth::Two, BitWidth::Four] {
        let g = quantize_group(&x, bits)?;
        let xt = dequantize_group(&g);
        let worst = x.iter().zip(&xt).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("{bits}-bit: z = {:.4}, s = {:.4}", g.zero_point(), g.scale());
        println!("  codes  {:?}", g.codes());
        println!("  packed {:02x?}", g.packed().bytes());
        println!("  max error {worst:.4} <= bound {:.4}", quantization_error_bound(&g));
    }
    Ok(())
}
