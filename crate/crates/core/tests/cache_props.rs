use mixkvq::cache::ImportanceWindow;
use mixkvq::{AllocationPolicy, BitWidth, CacheConfig, MixedKvCache, PrecisionTier, Thresholds, TierBudget};
use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-3.0..3.0))
}

fn config(g: usize, r: usize, sink: usize) -> CacheConfig {
    CacheConfig { group_size: g, residual_len: r, sink_len: sink, thresholds: Thresholds::new(1.0, 0.3).unwrap(), ..Default::default() }
}

fn streamed(cfg: CacheConfig, policy: AllocationPolicy, k: &Array2<f64>, v: &Array2<f64>, q: &Array2<f64>) -> MixedKvCache {
    let mut c = MixedKvCache::new(cfg, k.ncols(), v.ncols(), policy).unwrap();
    for t in 0..k.nrows() {
        c.append_kv(k.row(t).as_slice().unwrap(), v.row(t).as_slice().unwrap(), q.row(t).as_slice().unwrap(), t).unwrap();
    }
    c
}

fn batched(cfg: CacheConfig, policy: AllocationPolicy, k: &Array2<f64>, v: &Array2<f64>, q: &Array2<f64>) -> MixedKvCache {
    let mut c = MixedKvCache::new(cfg, k.ncols(), v.ncols(), policy).unwrap();
    let pos: Vec<usize> = (0..k.nrows()).collect();
    c.append_block(k.view(), v.view(), q.view(), &pos).unwrap();
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn streaming_equals_batched(
        seed in any::<u64>(),
        blocks in 1usize..4,
        extra in 0usize..8,
        sink in 0usize..12,
        block_window in any::<bool>(),
        rope in any::<bool>(),
    ) {
        let (d, r) = (6, 8);
        let t = blocks * r + extra;
        let (k, v, q) = (random(t, d, seed), random(t, d, seed ^ 1), random(t, d, seed ^ 2));
        let mut cfg = config(4, r, sink);
        if block_window {
            cfg.importance_window = ImportanceWindow::Block;
        }
        if rope {
            cfg.rope_theta = Some(10_000.0);
        }
        let a = streamed(cfg, AllocationPolicy::salience(), &k, &v, &q);
        let b = batched(cfg, AllocationPolicy::salience(), &k, &v, &q);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.reconstruct_keys(), b.reconstruct_keys());
        prop_assert_eq!(a.keys().blocks().len(), blocks);
        prop_assert_eq!(a.residual_len(), extra);
    }

    #[test]
    fn batch_splits_do_not_matter(seed in any::<u64>(), cut in 0usize..40) {
        let (k, v, q) = (random(40, 5, seed), random(40, 5, seed ^ 3), random(40, 5, seed ^ 4));
        let cfg = config(4, 12, 3);
        let whole = batched(cfg, AllocationPolicy::salience(), &k, &v, &q);
        let mut split = MixedKvCache::new(cfg, 5, 5, AllocationPolicy::salience()).unwrap();
        let pos: Vec<usize> = (0..40).collect();
        split.append_block(k.slice(s![..cut, ..]), v.slice(s![..cut, ..]), q.slice(s![..cut, ..]), &pos[..cut]).unwrap();
        split.append_block(k.slice(s![cut.., ..]), v.slice(s![cut.., ..]), q.slice(s![cut.., ..]), &pos[cut..]).unwrap();
        prop_assert_eq!(whole, split);
    }

    #[test]
    fn flushed_blocks_ignore_later_tokens(seed in any::<u64>()) {
        let (k, v, q) = (random(24, 4, seed), random(24, 4, seed ^ 5), random(24, 4, seed ^ 6));
        let cfg = config(4, 8, 2);
        let short = streamed(cfg, AllocationPolicy::salience(), &k.slice(s![..16, ..]).to_owned(), &v.slice(s![..16, ..]).to_owned(), &q.slice(s![..16, ..]).to_owned());
        let long = streamed(cfg, AllocationPolicy::salience(), &k, &v, &q);
        for b in 0..2 {
            prop_assert_eq!(&short.keys().blocks()[b], &long.keys().blocks()[b]);
            prop_assert_eq!(short.reconstruct_block_values(b), long.reconstruct_block_values(b));
        }
    }

    #[test]
    fn tier_accounting_matches_storage(seed in any::<u64>(), full in 0usize..4, mid in 0usize..4) {
        let d = 8;
        let (k, v, q) = (random(32, d, seed), random(32, d, seed ^ 7), random(32, d, seed ^ 8));
        let policy = AllocationPolicy::salience().with_budget(TierBudget::new(full, mid));
        let c = streamed(config(4, 16, 0), policy, &k, &v, &q);
        let stats = c.key_storage_stats();
        prop_assert_eq!(stats.elements(), 32 * d);
        prop_assert_eq!(stats.full_precision, 32 * full);
        prop_assert_eq!(stats.mid, 32 * mid);
        let expected = (16 * full + 4 * mid + 2 * (d - full - mid)) as f64 / d as f64;
        prop_assert!((c.effective_bitwidth().unwrap() - expected).abs() < 1e-12);
        for (a, block) in c.assignments().zip(c.keys().blocks()) {
            prop_assert_eq!(a.counts(), (full, mid, d - full - mid));
            let outliers: Vec<usize> = a.channels_in(PrecisionTier::FullPrecision).collect();
            prop_assert_eq!(&block.outliers.channels, &outliers);
            prop_assert_eq!(block.packed.len() + outliers.len(), d);
        }
    }

    #[test]
    fn reconstruction_error_is_bounded(seed in any::<u64>()) {
        let (k, v, q) = (random(32, 6, seed), random(32, 6, seed ^ 9), random(32, 6, seed ^ 10));
        let c = streamed(config(8, 16, 4), AllocationPolicy::fixed_uniform(BitWidth::Two).unwrap(), &k, &v, &q);
        let kr = c.reconstruct_keys();
        // 2-bit groups over a range of at most 6 have a step of at most 2.
        for (a, b) in k.iter().zip(kr.iter()) {
            prop_assert!((a - b).abs() <= 1.0 + 1e-12);
        }
        prop_assert_eq!(kr.slice(s![..4, ..]), k.slice(s![..4, ..]));
    }
}

#[test]
fn full_precision_policy_is_lossless() {
    let (k, v, q) = (random(50, 7, 1), random(50, 3, 2), random(50, 7, 3));
    let c = streamed(config(4, 16, 0), AllocationPolicy::full_precision(), &k, &v, &q);
    assert_eq!(c.reconstruct_keys(), k);
    assert_eq!(c.reconstruct_values(), v);
    assert_eq!(c.effective_bitwidth().unwrap(), 16.0);
}

#[test]
fn gqa_queries_pool_across_heads() {
    let (d, heads) = (4, 3);
    let (k, v) = (random(8, d, 11), random(8, d, 12));
    let q = random(8, d * heads, 13);
    let cfg = CacheConfig { heads_per_kv_group: heads, ..config(4, 8, 0) };
    let c = streamed(cfg, AllocationPolicy::salience(), &k, &v, &q);
    let acc = c.query_accumulator().unwrap();
    assert_eq!(acc.count(), 8 * heads);
    let manual: Vec<f64> = (0..d)
        .map(|ch| (0..heads).map(|h| q.column(h * d + ch).iter().map(|x| x.abs()).sum::<f64>()).sum::<f64>() / (8 * heads) as f64)
        .collect();
    for (a, b) in acc.importance().unwrap().iter().zip(&manual) {
        assert!((a - b).abs() < 1e-12);
    }
    let mut bad = MixedKvCache::new(cfg, d, d, AllocationPolicy::salience()).unwrap();
    assert!(bad.append_kv(&[0.0; 4], &[0.0; 4], &[0.0; 4], 0).is_err());
}
