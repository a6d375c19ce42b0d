//! Compare allocation policies on the same planted decode run.

use mixkvq::io::default_compare_budget;
use mixkvq::{decode_simulation, AllocationPolicy, BitWidth, CacheConfig, DecodeSource, PlantedSpec};

fn main() -> mixkvq::Result<()> {
    let spec = PlantedSpec::default();
    let source = DecodeSource::Planted(spec);
    let cfg = CacheConfig::default();
    let budget = default_compare_budget(spec.dim);
    let policies = [
        AllocationPolicy::full_precision(),
        AllocationPolicy::fixed_uniform(BitWidth::Four)?,
        AllocationPolicy::fixed_uniform(BitWidth::Two)?,
        AllocationPolicy::salience().with_budget(budget),
        AllocationPolicy::error_only().with_budget(budget),
    ];
    println!("{:<15} {:>7} {:>12} {:>10} {:>12}", "policy", "b_eff", "||E||_F", "max|E|", "output err");
    for p in policies {
        let r = decode_simulation(&source, &cfg, p, spec.tokens, 7)?;
        println!(
            "{:<15} {:>7.3} {:>12.3} {:>10.3} {:>12.4}",
            r.policy_label, r.effective_bits, r.e_attn_frobenius, r.e_attn_max, r.output_error_frobenius
        );
    }
    Ok(())
}
