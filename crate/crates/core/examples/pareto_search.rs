//! Small threshold grid search and budget selection.

use mixkvq::{pareto_search, select_under_budget, CacheConfig, DecodeSource, PlantedSpec, SearchSpec};

fn main() -> mixkvq::Result<()> {
    let spec = SearchSpec {
        range: (0.1, 2.0),
        grid_points: 6,
        seeds: vec![0, 1, 2],
        source: DecodeSource::Planted(PlantedSpec { dim: 32, tokens: 256, n_outlier_scale: 2, n_outlier_query: 2, overlap: 0 }),
        cache: CacheConfig::default(),
        steps: 256,
        max_b_eff: Some(8.0),
        include_endpoints: true,
    };
    let out = pareto_search(&spec)?;
    println!("{} candidates evaluated; frontier:", out.evaluations.len());
    println!("{:>8} {:>12} {:>9} {:>9}", "b_eff", "fidelity", "tau_bf16", "tau_uint4");
    for p in &out.frontier {
        println!("{:>8.4} {:>12.3} {:>9.3} {:>9.3}", p.b_eff, p.fidelity, p.tau_bf16, p.tau_uint4);
    }
    let pick = select_under_budget(&out.frontier, 8.0)?;
    println!("best under 8 bits: ({:.3}, {:.3}) at {:.4} bits", pick.tau_bf16, pick.tau_uint4, pick.b_eff);
    Ok(())
}
