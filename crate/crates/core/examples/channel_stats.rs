//! Per-channel importance vs sensitivity on planted instances.

use mixkvq::io::emit_channel_stats;
use mixkvq::{PlantedSpec, Thresholds};

fn main() -> mixkvq::Result<()> {
    for overlap in [0, 2, 4] {
        let spec = PlantedSpec { overlap, ..Default::default() };
        let planted = spec.generate(3)?;
        let stats = emit_channel_stats(&planted.instance, Thresholds::default())?;
        let s = &stats.summary;
        println!(
            "overlap {overlap}: pearson(I, S) = {:+.3}, tiers bf16/uint4/uint2 = {:?}",
            s.pearson_importance_sensitivity, s.tier_counts
        );
        for &d in &planted.scale_channels {
            let r = &stats.rows[d];
            println!("  wide-range channel {d:>2}: I = {:.3}, S = {:.3}, A = {:.3}, {}", r.importance, r.sensitivity, r.salience, r.tier.label());
        }
    }
    Ok(())
}
