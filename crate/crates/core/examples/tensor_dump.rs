//! Write a trace to an `MKVQ` file, read it back and replay it.

use mixkvq::io::{read_dump, write_dump, TensorDump};
use mixkvq::{decode_simulation, AllocationPolicy, CacheConfig, DecodeSource, PlantedSpec};

fn main() -> mixkvq::Result<()> {
    let inst = PlantedSpec { dim: 32, tokens: 256, ..Default::default() }.generate(11)?.instance;
    let mut dump = TensorDump::new();
    dump.insert_instance("layer0.head0", &inst);
    let path = std::env::temp_dir().join("mixkvq-example.mkvq");
    write_dump(&dump, &path)?;
    let back = read_dump(&path)?;
    for s in back.sections() {
        println!("{:<16} dims {:?}", s.name, s.dims);
    }
    let trace = DecodeSource::Trace(back.attention_instance(Some("layer0.head0"))?);
    let r = decode_simulation(&trace, &CacheConfig::default(), AllocationPolicy::salience(), 256, 0)?;
    println!("replayed {} steps: b_eff {:.3}, ||E||_F {:.3}", r.steps, r.effective_bits, r.e_attn_frobenius);
    std::fs::remove_file(&path)?;
    Ok(())
}
