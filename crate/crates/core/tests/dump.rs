use mixkvq::io::{read_dump, write_dump, TensorDump};
use mixkvq::{AllocationPolicy, CacheConfig, Error, MixedKvCache, PlantedSpec};
use ndarray::s;

#[test]
fn file_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let inst = PlantedSpec { dim: 8, tokens: 20, n_outlier_scale: 1, n_outlier_query: 1, overlap: 0 }.generate(4).unwrap().instance;
    let mut dump = TensorDump::new();
    dump.insert_instance("layer0.head0", &inst);
    let path = dir.path().join("trace.mkvq");
    write_dump(&dump, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = read_dump(&path).unwrap();
    assert_eq!(back, dump);
    assert_eq!(back.to_bytes(), bytes);
    let replay = back.attention_instance(None).unwrap();
    assert_eq!(replay.keys.dim(), (20, 8));
    for (a, b) in replay.keys.iter().zip(inst.keys.iter()) {
        assert_eq!(*a, *b as f32 as f64);
    }
}

#[test]
fn declared_dims_beyond_payload_are_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let mut dump = TensorDump::new();
    dump.insert("k", vec![4, 4], vec![1.0; 16]).unwrap();
    let mut bytes = dump.to_bytes();
    bytes.truncate(bytes.len() - 4);
    let path = dir.path().join("short.mkvq");
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(read_dump(&path), Err(Error::CorruptFile(_))));
}

#[test]
fn cache_snapshot_survives_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let inst = PlantedSpec { dim: 16, tokens: 70, ..Default::default() }.generate(9).unwrap().instance;
    let cfg = CacheConfig { group_size: 8, residual_len: 32, sink_len: 4, ..Default::default() };
    let mut cache = MixedKvCache::new(cfg, 16, 16, AllocationPolicy::salience()).unwrap();
    let pos: Vec<usize> = (0..70).collect();
    cache.append_block(inst.keys.view(), inst.values.view(), inst.queries.view(), &pos).unwrap();
    let path = dir.path().join("snap.mkvq");
    write_dump(&cache.snapshot(), &path).unwrap();
    let back = read_dump(&path).unwrap();
    assert_eq!(back, cache.snapshot());
    let keys = back.array2("keys").unwrap();
    assert_eq!(keys.dim(), (70, 16));
    assert_eq!(back.section("tiers").unwrap().dims, vec![2, 16]);
    // Residual rows are stored exactly, up to f32 narrowing.
    for (a, b) in keys.slice(s![64.., ..]).iter().zip(inst.keys.slice(s![64.., ..]).iter()) {
        assert_eq!(*a, *b as f32 as f64);
    }
}
