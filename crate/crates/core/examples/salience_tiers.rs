//! Score channels of a small key block and split them into precision tiers.

use mixkvq::{assign_precision, ChannelSalience, QueryAccumulator};
use ndarray::array;

fn main() -> mixkvq::Result<()> {
    // Channel 1 has a wide key range but tiny queries; channel 2 the reverse.
    let keys = array![[0.1, 4.0, 0.2, 0.3], [-0.2, -5.0, 0.1, -0.4], [0.3, 3.5, -0.3, 0.2], [0.0, -4.5, 0.2, 0.1]];
    let queries = array![[1.0, 0.01, 6.0, 1.2], [-0.8, 0.02, -5.5, 0.9], [1.1, -0.01, 6.5, -1.0], [0.9, 0.0, -6.0, 1.1]];
    let mut acc = QueryAccumulator::new(4);
    acc.accumulate(queries.view())?;
    let scores = ChannelSalience::compute(&acc, keys.view())?;
    let tiers = assign_precision(&scores.salience, 1.44, 0.79)?;
    println!("channel  importance  sensitivity  salience  tier");
    for d in 0..4 {
        println!(
            "{d:>7}  {:>10.4}  {:>11.4}  {:>8.4}  {}",
            scores.importance[d],
            scores.sensitivity[d],
            scores.salience[d],
            tiers.tiers[d].label()
        );
    }
    println!("mean bits per channel: {:.3}", tiers.mean_bits());
    Ok(())
}
