//! Stream tokens into the mixed-precision cache and watch blocks flush.

use mixkvq::{AllocationPolicy, CacheConfig, MixedKvCache, PlantedSpec};

fn main() -> mixkvq::Result<()> {
    let inst = PlantedSpec { dim: 32, tokens: 300, ..Default::default() }.generate(1)?.instance;
    let cfg = CacheConfig::default();
    let mut cache = MixedKvCache::new(cfg, 32, 32, AllocationPolicy::salience())?;
    for t in 0..inst.keys.nrows() {
        let (k, v, q) = (inst.keys.row(t), inst.values.row(t), inst.queries.row(t));
        cache.append_kv(k.as_slice().unwrap(), v.as_slice().unwrap(), q.as_slice().unwrap(), t)?;
        if cache.residual_len() == 0 {
            println!("t = {t}: flushed block {}", cache.keys().blocks().len() - 1);
        }
    }
    for (i, b) in cache.keys().blocks().iter().enumerate() {
        match &b.assignment {
            Some(a) => {
                let (f, m, l) = a.counts();
                println!("block {i}: tokens {}..{}, {} sink rows, tiers bf16/uint4/uint2 = {f}/{m}/{l}", b.first_token, b.first_token + b.len, b.sink_rows);
            }
            None => println!("block {i}: all sink"),
        }
    }
    println!("residual tokens: {}", cache.residual_len());
    println!("effective key bits: {:.4}", cache.effective_bitwidth()?);
    let err = (&cache.reconstruct_keys() - &inst.keys).iter().map(|x| x * x).sum::<f64>().sqrt();
    println!("key reconstruction error (Frobenius): {err:.4}");
    Ok(())
}
