//! Acceptance suite. Each test covers one release criterion at its stated
//! tolerance and prints a single pass line; a panic is the fail line.

use std::time::Instant;

use vqcache::*;

fn pass(name: &str, detail: &str) {
    println!("[PASS] {name}: {detail}");
}

/// Scores cross zero, so errors are measured against the oracle's peak
/// magnitude (see `rel_err`).
const SCORE_TOL: f64 = 1e-4;

#[test]
fn dual_transform_invariance() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for &d in &[64usize, 128] {
        for &n in &[1usize, 128, 8192] {
            for seed in 0..20u64 {
                let base = seed * 1000 + (d + n) as u64;
                let keys = gaussian_matrix(n, d, base);
                let queries = gaussian_matrix(4, d, base + 1);
                let s = calibrate_smoothing(&keys, &TransformConfig::new(d)).unwrap();
                let kt = transform_keys(&keys, &s).unwrap();
                let qt = transform_query(&queries, &s).unwrap();
                let raw = queries.matmul_transpose(&keys).unwrap();
                let transformed = qt.matmul_transpose(&kt).unwrap();
                let err = rel_err(transformed.data(), raw.data());
                worst = worst.max(err);
                assert!(
                    err <= SCORE_TOL,
                    "D={d} N={n} seed={seed}: score error {err}"
                );
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "ran {elapsed:.1}s, budget is 10s");
    pass(
        "dual-transform invariance",
        &format!("max score error {worst:.3e} <= 1e-4 over 120 cases in {elapsed:.2}s"),
    );
}

#[test]
fn hadamard_correctness() {
    // Orthogonality up to D = 256.
    let mut worst_dev = 0.0f32;
    for k in 0..=8u32 {
        let h = walsh_hadamard_matrix(k).unwrap();
        let n = 1usize << k;
        let prod = h.matmul_transpose(&h).unwrap();
        for r in 0..n {
            for c in 0..n {
                let expect = if r == c { 1.0 } else { 0.0 };
                worst_dev = worst_dev.max((prod.get(r, c) - expect).abs());
            }
        }
    }
    assert!(worst_dev <= 1e-6, "|HH^T - I| = {worst_dev}");

    // Per-row mean-square identity after the fast transform.
    let mut worst_ms = 0.0f64;
    for (i, &d) in [64usize, 128, 256].iter().enumerate() {
        let x = gaussian_matrix(128, d, 300 + i as u64);
        let report = distribution_report(&x).unwrap();
        worst_ms = worst_ms.max(report.row_ms_error);
        let rotated = hadamard_apply(&x).unwrap();
        for r in 0..x.rows() {
            let target: f64 =
                x.row(r).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / d as f64;
            let ms: f64 = rotated
                .row(r)
                .iter()
                .map(|&v| f64::from(v).powi(2))
                .sum::<f64>()
                / d as f64;
            let err = (ms - target).abs() / target;
            worst_ms = worst_ms.max(err);
        }
    }
    assert!(worst_ms <= 1e-6, "row mean-square identity error {worst_ms}");

    // Fast butterfly agrees with the explicit matrix multiply.
    let mut worst_fast = 0.0f64;
    for k in 1..=8u32 {
        let d = 1usize << k;
        let x = gaussian_matrix(16, d, 400 + u64::from(k));
        let fast = hadamard_apply(&x).unwrap();
        let explicit = x
            .matmul_transpose(&walsh_hadamard_matrix(k).unwrap())
            .unwrap();
        worst_fast = worst_fast.max(rel_err(fast.data(), explicit.data()));
    }
    assert!(worst_fast <= 1e-5, "fast-vs-explicit error {worst_fast}");
    pass(
        "hadamard correctness",
        &format!(
            "orthogonality {worst_dev:.2e} <= 1e-6, row identity {worst_ms:.2e} <= 1e-6, fast-vs-explicit {worst_fast:.2e} <= 1e-5"
        ),
    );
}

/// Trains key/value codebooks for one config pair on synthetic corpora,
/// prefills a cache of `n` tokens, and returns the transformed query rows.
fn build_workload(
    config_id: &str,
    head_dim: usize,
    n: usize,
    residual_len: usize,
    seed: u64,
) -> (QuantizedKVCache, Codebook, Codebook, HeadMatrix) {
    let (key_cfg, value_cfg) = parse_config_pair(config_id, head_dim).unwrap();

    let train_tokens = |cfg: &VQConfig| -> usize {
        let want_subvectors = (cfg.num_centroids() * 4).clamp(4096, 16384);
        want_subvectors.div_ceil(cfg.num_subvectors())
    };
    let corpus_k = gaussian_matrix(train_tokens(&key_cfg), head_dim, seed);
    let corpus_v = gaussian_matrix(train_tokens(&value_cfg), head_dim, seed + 1);
    let smoothing = calibrate_smoothing(&corpus_k, &TransformConfig::new(head_dim)).unwrap();
    let corpus_kt = transform_keys(&corpus_k, &smoothing).unwrap();
    let cb_k = kmeans_train(
        &subvectors_of(&corpus_kt, key_cfg.sub_dim).unwrap(),
        key_cfg,
        6,
        seed + 2,
    )
    .unwrap();
    let cb_v = kmeans_train(
        &subvectors_of(&corpus_v, value_cfg.sub_dim).unwrap(),
        value_cfg,
        6,
        seed + 3,
    )
    .unwrap();

    let keys = gaussian_matrix(n, head_dim, seed + 4);
    let values = gaussian_matrix(n, head_dim, seed + 5);
    let cache_cfg = CacheConfig::new(key_cfg, value_cfg, residual_len).unwrap();
    let cache = prefill(&keys, &values, &smoothing, &cb_k, &cb_v, cache_cfg).unwrap();
    let qt = transform_query(&gaussian_matrix(2, head_dim, seed + 6), &smoothing).unwrap();
    (cache, cb_k, cb_v, qt)
}

#[test]
fn fused_kernel_equivalence() {
    const CONFIGS: [&str; 7] = [
        "d2b8",
        "d4b12",
        "d4b8",
        "d8b12",
        "d8b8",
        "K-d8b12/V-d8b8",
        "K-d4b10/V-d8b12",
    ];
    const N: usize = 65536;
    const D: usize = 128;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let start = Instant::now();
    let mut worst_quant = 0.0f64;
    let mut worst_identity = 0.0f64;

    pool.install(|| {
        for (i, config_id) in CONFIGS.iter().enumerate() {
            let (cache, cb_k, cb_v, qt) =
                build_workload(config_id, D, N, DEFAULT_RESIDUAL_LEN, 1000 + i as u64 * 50);
            let (mk, mv) = materialize(&cache, &cb_k, &cb_v).unwrap();
            for q in 0..qt.rows() {
                let oracle = reference_attention(qt.row(q), &mk, &mv).unwrap();
                let mut baseline: Option<AttentionOutput> = None;
                for &block in &[16usize, 128, 256] {
                    for &splits in &[1usize, 4] {
                        let tiles = TileConfig {
                            block_size: block,
                            num_splits: splits,
                            prefetch: true,
                        };
                        let out =
                            fused_decode_attention(qt.row(q), &cache, &cb_k, &cb_v, &tiles)
                                .unwrap();
                        let err = rel_err(&out.o, &oracle.o);
                        worst_quant = worst_quant.max(err);
                        assert!(
                            err <= SCORE_TOL,
                            "{config_id} q={q} B={block} S={splits}: error {err}"
                        );
                        let l_err = f64::from((out.logsumexp - oracle.logsumexp).abs());
                        assert!(l_err <= SCORE_TOL, "{config_id}: logsumexp error {l_err}");
                        // Tile shapes must agree among themselves more tightly.
                        match &baseline {
                            None => baseline = Some(out),
                            Some(base) => {
                                let tile_err = rel_err(&out.o, &base.o);
                                assert!(
                                    tile_err <= 1e-5,
                                    "{config_id}: tile disagreement {tile_err}"
                                );
                            }
                        }
                    }
                }
            }
        }

        // Lossless path: codebooks enumerating the exact sub-vectors carry
        // full-precision data through the quantized blocks.
        let d = 128;
        let keys = gaussian_matrix(256, d, 4242);
        let values = gaussian_matrix(256, d, 4243);
        let smoothing = calibrate_smoothing(&keys, &TransformConfig::new(d)).unwrap();
        let kt = transform_keys(&keys, &smoothing).unwrap();
        let cfg = VQConfig::new(8, 12, d).unwrap();
        let cb_k = Codebook::from_exact_subvectors(&kt, cfg).unwrap();
        let cb_v = Codebook::from_exact_subvectors(&values, cfg).unwrap();
        let cache_cfg = CacheConfig::new(cfg, cfg, 128).unwrap();
        let cache = prefill(&keys, &values, &smoothing, &cb_k, &cb_v, cache_cfg).unwrap();
        let (mk, mv) = materialize(&cache, &cb_k, &cb_v).unwrap();
        assert_eq!(mk.data(), kt.data(), "identity codebooks must be lossless");
        assert_eq!(mv.data(), values.data());
        let qt = transform_query(&gaussian_matrix(2, d, 4244), &smoothing).unwrap();
        for q in 0..qt.rows() {
            let oracle = reference_attention(qt.row(q), &mk, &mv).unwrap();
            for &block in &[16usize, 128, 256] {
                for &splits in &[1usize, 4] {
                    let tiles = TileConfig {
                        block_size: block,
                        num_splits: splits,
                        prefetch: true,
                    };
                    let out =
                        fused_decode_attention(qt.row(q), &cache, &cb_k, &cb_v, &tiles).unwrap();
                    let err = rel_err(&out.o, &oracle.o);
                    worst_identity = worst_identity.max(err);
                    assert!(err <= 1e-5, "identity path error {err}");
                    let l_err = f64::from((out.logsumexp - oracle.logsumexp).abs());
                    assert!(l_err <= 1e-6, "identity path logsumexp error {l_err}");
                }
            }
        }
    });

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "ran {elapsed:.1}s, budget is 120s single-threaded");
    pass(
        "fused-kernel equivalence",
        &format!(
            "7 configs at N=64k: quantized error {worst_quant:.3e} <= 1e-4, lossless path {worst_identity:.3e} <= 1e-5, {elapsed:.1}s single-threaded"
        ),
    );
}

#[test]
fn bit_accounting() {
    let d4b8 = VQConfig::parse("d4b8", 128).unwrap();
    let d8b12 = VQConfig::parse("d8b12", 128).unwrap();
    let d8b8 = VQConfig::parse("d8b8", 128).unwrap();
    assert_eq!(d4b8.avg_bits(), 2.0);
    assert_eq!(d8b12.avg_bits(), 1.5);
    assert_eq!(avg_bits_pair(&d8b12, &d8b8), 1.25);

    // Footprint formula vs the bytes actually serialized. Sub-byte packing is
    // exercised by the b=10 key config.
    const D: usize = 64;
    let (cache, _cb_k, _cb_v, _qt) = build_workload("K-d4b10/V-d8b12", D, 512, 32, 7000);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("acc.vikv");
    io::write_snapshot(&path, &cache).unwrap();
    let file_len = std::fs::read(&path).unwrap().len();

    let nq = cache.quantized_rows();
    let nr = cache.residual_rows();
    let fp_k = memory_footprint(&cache.config().key_cfg, nq);
    let fp_v = memory_footprint(&cache.config().value_cfg, nq);
    // Header fields are fixed-width; residual rows are stored as f32.
    const HEADER_BYTES: usize = 4 + 4 + 4 + 4 + 1 + 4 + 1 + 4 + 8 + 8 + 8;
    const CHECKSUM_BYTES: usize = 8;
    let expected =
        HEADER_BYTES + fp_k.index_bytes + fp_v.index_bytes + 2 * nr * D * 4 + CHECKSUM_BYTES;
    assert_eq!(
        file_len, expected,
        "snapshot bytes {file_len} != formula {expected}"
    );
    // In-memory accounting agrees with the packed payloads byte for byte.
    let bytes = cache.cache_bytes();
    assert_eq!(bytes.key_index_bytes, cache.key_codes().data().len());
    assert_eq!(bytes.value_index_bytes, cache.value_codes().data().len());
    assert_eq!(bytes.key_index_bytes, fp_k.index_bytes);
    assert_eq!(bytes.value_index_bytes, fp_v.index_bytes);
    pass(
        "bit accounting",
        &format!(
            "avg bits 2.0/1.5/1.25 exact; snapshot of {nq} quantized rows is {file_len} bytes, matching the formula exactly"
        ),
    );
}

#[test]
fn outlier_suppression_direction() {
    let cfg = VQConfig::new(4, 8, 64).unwrap();
    let mut summaries = Vec::new();
    for seed in [7u64, 11, 13] {
        let keys = generate(
            &GenSpec::new(512, 64, seed)
                .with_outliers(4, 3.0)
                .with_tail(Tail::Laplace),
        )
        .unwrap();
        let queries = generate(&GenSpec::new(8, 64, seed + 1000)).unwrap();
        let err = |mode| {
            transform_ablation(&keys, &queries, cfg, mode, seed)
                .unwrap()
                .score_error
        };
        let none = err(TransformMode::None);
        let s = err(TransformMode::Smooth);
        let h = err(TransformMode::Hadamard);
        let hs = err(TransformMode::HadamardThenSmooth);
        let sh = err(TransformMode::SmoothThenHadamard);
        assert!(none >= s, "seed {seed}: none {none} < smooth {s}");
        assert!(none >= h, "seed {seed}: none {none} < hadamard {h}");
        assert!(
            hs.min(sh) <= s.min(h),
            "seed {seed}: best combined {} > best single {}",
            hs.min(sh),
            s.min(h)
        );
        let band = (hs - sh).abs() / hs.max(sh);
        assert!(
            band <= 0.2,
            "seed {seed}: order gap {band:.3} exceeds the 20% band (hs {hs}, sh {sh})"
        );
        summaries.push(format!("seed {seed} band {band:.2}"));
    }
    pass(
        "outlier suppression direction",
        &format!(
            "none >= single >= best combined and H+S ~ S+H on seeds 7/11/13 ({})",
            summaries.join(", ")
        ),
    );
}

#[test]
fn rotation_statistics() {
    // Heavy-tailed inputs: kurtosis and outlier ratio drop under the rotation.
    let mut drops = Vec::new();
    for seed in [13u64, 21, 99] {
        let k = generate(&GenSpec::new(4096, 128, seed).with_tail(Tail::Laplace)).unwrap();
        let stats = lemma1_check(&k).unwrap();
        assert!(stats.kurtosis_before > 1.0, "generator is not heavy-tailed");
        assert!(
            stats.kurtosis_after < stats.kurtosis_before,
            "seed {seed}: kurtosis {} -> {}",
            stats.kurtosis_before,
            stats.kurtosis_after
        );
        drops.push(format!(
            "{:.2}->{:.2}",
            stats.kurtosis_before, stats.kurtosis_after
        ));
    }

    // A single huge entry spreads over the row: ratio shrinks by sqrt(2) at
    // minimum (by sqrt(D) ideally).
    let base = gaussian_matrix(64, 128, 15);
    let scaled: Vec<f32> = base.data().iter().map(|v| v * 1e-3).collect();
    let mut spiked = HeadMatrix::from_vec(64, 128, scaled).unwrap();
    spiked.row_mut(0)[0] = 1000.0;
    let stats = lemma1_check(&spiked).unwrap();
    assert!(
        stats.outlier_ratio_after <= stats.outlier_ratio_before / std::f64::consts::SQRT_2,
        "spike ratio {} -> {}",
        stats.outlier_ratio_before,
        stats.outlier_ratio_after
    );
    pass(
        "rotation statistics",
        &format!(
            "kurtosis drops [{}]; spike outlier ratio {:.1} -> {:.1}",
            drops.join(", "),
            stats.outlier_ratio_before,
            stats.outlier_ratio_after
        ),
    );
}

#[test]
fn traffic_stand_in() {
    const N: usize = 65536;
    const D: usize = 128;
    let (cache, cb_k, cb_v, qt) = build_workload("d4b8", D, N, DEFAULT_RESIDUAL_LEN, 9000);
    let out = fused_decode_attention(qt.row(0), &cache, &cb_k, &cb_v, &TileConfig::default())
        .unwrap();
    // traffic_report errors out unless the counters match the storage formula
    // exactly; this is the counter-vs-formula cross-check.
    let report = traffic_report(
        &out,
        cache.quantized_rows(),
        cache.residual_rows(),
        &cache.config().key_cfg,
        &cache.config().value_cfg,
    )
    .unwrap();

    // Third, fully manual accounting.
    let nq = cache.quantized_rows();
    let manual = (nq * 32) as u64 * 2 // packed 8-bit codes, 32 per row, keys and values
        + 2 * 2048                    // two 256 x 4 codebooks at 2 bytes per entry
        + (cache.residual_rows() * D * 2 * 2) as u64;
    assert_eq!(report.compressed_bytes, manual);
    assert!(
        report.bytes_vs_fp16 <= 0.15,
        "d4b8 at N=64k reads {:.4} of fp16 bytes",
        report.bytes_vs_fp16
    );
    pass(
        "traffic stand-in",
        &format!(
            "d4b8 at N=64k: {} compressed bytes vs {} fp16 bytes = {:.4} <= 0.15, counters exact",
            report.compressed_bytes, report.fp16_equiv_bytes, report.bytes_vs_fp16
        ),
    );
}

#[test]
fn residual_append_semantics() {
    const D: usize = 64;
    const R: usize = 128;
    let total = 700usize;
    let (key_cfg, value_cfg) = parse_config_pair("d4b8", D).unwrap();
    let corpus_k = gaussian_matrix(512, D, 8000);
    let corpus_v = gaussian_matrix(512, D, 8001);
    let smoothing = calibrate_smoothing(&corpus_k, &TransformConfig::new(D)).unwrap();
    let corpus_kt = transform_keys(&corpus_k, &smoothing).unwrap();
    let cb_k = kmeans_train(&subvectors_of(&corpus_kt, 4).unwrap(), key_cfg, 8, 8002).unwrap();
    let cb_v = kmeans_train(&subvectors_of(&corpus_v, 4).unwrap(), value_cfg, 8, 8003).unwrap();

    let keys = gaussian_matrix(total, D, 8004);
    let values = gaussian_matrix(total, D, 8005);
    let cache_cfg = CacheConfig::new(key_cfg, value_cfg, R).unwrap();

    let build = |n0: usize| {
        let mut cache = prefill(
            &keys.slice_rows(0, n0),
            &values.slice_rows(0, n0),
            &smoothing,
            &cb_k,
            &cb_v,
            cache_cfg,
        )
        .unwrap();
        for t in n0..total {
            append(
                &mut cache,
                &keys.slice_rows(t, t + 1),
                &values.slice_rows(t, t + 1),
                &smoothing,
                &cb_k,
                &cb_v,
            )
            .unwrap();
        }
        cache
    };

    let replayed = build(200);
    let quantized = replayed.quantized_rows();
    let (rk, rv) = materialize(&replayed, &cb_k, &cb_v).unwrap();

    // Composition oracle at the observed flush boundary.
    let kt = transform_keys(&keys, &smoothing).unwrap();
    let ok = decode(&encode(&kt.slice_rows(0, quantized), &cb_k).unwrap(), &cb_k)
        .unwrap()
        .vstack(&kt.slice_rows(quantized, total))
        .unwrap();
    let ov = decode(
        &encode(&values.slice_rows(0, quantized), &cb_v).unwrap(),
        &cb_v,
    )
    .unwrap()
    .vstack(&values.slice_rows(quantized, total))
    .unwrap();
    assert_eq!(rk.data(), ok.data(), "keys diverge from the replay oracle");
    assert_eq!(rv.data(), ov.data(), "values diverge from the replay oracle");

    // One-shot prefill with the matching flush boundary is byte-identical.
    let one_shot_cfg = CacheConfig::new(key_cfg, value_cfg, total - quantized).unwrap();
    let one_shot = prefill(&keys, &values, &smoothing, &cb_k, &cb_v, one_shot_cfg).unwrap();
    assert_eq!(one_shot.quantized_rows(), quantized);
    let (pk, pv) = materialize(&one_shot, &cb_k, &cb_v).unwrap();
    assert_eq!(rk.data(), pk.data());
    assert_eq!(rv.data(), pv.data());

    // Interleavings sharing flush boundaries produce identical code bytes.
    let other = build(200 + R);
    assert_eq!(other.quantized_rows(), quantized);
    assert_eq!(replayed.key_codes().data(), other.key_codes().data());
    assert_eq!(replayed.value_codes().data(), other.value_codes().data());
    pass(
        "residual/append semantics",
        &format!(
            "prefill+append over {total} tokens flushed {quantized} rows; replay, one-shot, and shifted interleaving all byte-identical"
        ),
    );
}
