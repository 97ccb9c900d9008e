//! Fused dequantization attention: lookup-table scores over quantized
//! blocks, tiled online softmax, a double-buffered block loader, split
//! reduction, and byte-traffic counters.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kvcache::{PackedCodes, QuantizedKVCache};
use crate::matrix::HeadMatrix;
use crate::vq::{memory_footprint, Codebook, VQConfig};

/// Block size and split count for the tiled pass. `prefetch` toggles the
/// double-buffered loader; outputs are bit-identical either way.
#[derive(Debug, Clone, Copy)]
pub struct TileConfig {
    pub block_size: usize,
    pub num_splits: usize,
    pub prefetch: bool,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            block_size: 128,
            num_splits: 1,
            prefetch: true,
        }
    }
}

impl TileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::InvalidConfig("block_size must be >= 1".into()));
        }
        if self.num_splits == 0 {
            return Err(Error::InvalidConfig("num_splits must be >= 1".into()));
        }
        Ok(())
    }
}

/// Bytes moved by one attention call, in 16-bit-equivalent units for
/// codebooks and residual rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Traffic {
    pub code_bytes_read: u64,
    pub codebook_bytes_read: u64,
    pub residual_bytes_read: u64,
    pub fp16_equiv_bytes: u64,
}

impl Traffic {
    pub fn compressed_bytes(&self) -> u64 {
        self.code_bytes_read + self.codebook_bytes_read + self.residual_bytes_read
    }
}

/// Output row, logsumexp, and traffic counters from one decode-attention call.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub o: Vec<f32>,
    pub logsumexp: f32,
    pub traffic: Traffic,
}

/// Per-query table of sub-vector dot products against the key centroids.
#[derive(Debug, Clone)]
pub struct LookupTable {
    /// `M x 2^b`, row-major.
    entries: Vec<f32>,
    m: usize,
    k: usize,
}

impl LookupTable {
    pub fn num_subvectors(&self) -> usize {
        self.m
    }

    pub fn num_centroids(&self) -> usize {
        self.k
    }

    pub fn entry(&self, sub: usize, code: usize) -> f32 {
        self.entries[sub * self.k + code]
    }

    pub fn row(&self, sub: usize) -> &[f32] {
        &self.entries[sub * self.k..(sub + 1) * self.k]
    }

    /// Sum of table gathers for one token's code row: the unscaled score.
    pub fn score(&self, codes: &[u16]) -> f32 {
        debug_assert_eq!(codes.len(), self.m);
        let mut acc = 0.0f32;
        for (sub, &code) in codes.iter().enumerate() {
            acc += self.entries[sub * self.k + code as usize];
        }
        acc
    }
}

/// Builds the score lookup table `lut[m][j] = dot(q sub-vector m, centroid j)`
/// for a query already in the transformed space.
pub fn build_lut(query: &[f32], cb_k: &Codebook) -> Result<LookupTable> {
    let cfg = cb_k.config();
    if query.len() != cfg.head_dim {
        return Err(Error::ShapeMismatch(format!(
            "query has {} entries, codebook head_dim is {}",
            query.len(),
            cfg.head_dim
        )));
    }
    let m = cfg.num_subvectors();
    let k = cfg.num_centroids();
    let d = cfg.sub_dim;
    let mut entries = vec![0.0f32; m * k];
    for (sub, q_sub) in query.chunks_exact(d).enumerate() {
        let out = &mut entries[sub * k..(sub + 1) * k];
        for (j, slot) in out.iter_mut().enumerate() {
            let c = cb_k.centroid(j);
            let mut acc = 0.0f32;
            for (x, y) in q_sub.iter().zip(c) {
                acc += x * y;
            }
            *slot = acc;
        }
    }
    Ok(LookupTable { entries, m, k })
}

/// Unnormalized online-softmax state from one contiguous token range.
#[derive(Debug, Clone)]
pub struct SoftmaxPartial {
    /// Running rescaled output accumulator, not yet divided by `l`.
    pub o: Vec<f32>,
    /// Running normalizer.
    pub l: f32,
    /// Running max score.
    pub m: f32,
}

impl SoftmaxPartial {
    fn empty(head_dim: usize) -> Self {
        Self {
            o: vec![0.0; head_dim],
            l: 0.0,
            m: f32::NEG_INFINITY,
        }
    }

    /// Folds one block of scores and its value rows into the running state.
    fn absorb_scores<F>(&mut self, scores: &[f32], mut add_value_row: F)
    where
        F: FnMut(usize, f32, &mut [f32]),
    {
        if scores.is_empty() {
            return;
        }
        let block_max = scores.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let m_new = self.m.max(block_max);
        let correction = (self.m - m_new).exp();
        let mut row_sum = 0.0f32;
        for v in self.o.iter_mut() {
            *v *= correction;
        }
        self.l *= correction;
        for (j, &s) in scores.iter().enumerate() {
            let p = (s - m_new).exp();
            row_sum += p;
            add_value_row(j, p, &mut self.o);
        }
        self.l += row_sum;
        self.m = m_new;
    }

    /// Merges another partial from a disjoint token range.
    fn merge(&mut self, other: &SoftmaxPartial) {
        let m_new = self.m.max(other.m);
        if m_new == f32::NEG_INFINITY {
            return;
        }
        let self_scale = (self.m - m_new).exp();
        let other_scale = (other.m - m_new).exp();
        for (a, &b) in self.o.iter_mut().zip(&other.o) {
            *a = *a * self_scale + b * other_scale;
        }
        self.l = self.l * self_scale + other.l * other_scale;
        self.m = m_new;
    }

    fn finalize(mut self, traffic: Traffic) -> Result<AttentionOutput> {
        if !(self.l > 0.0) {
            return Err(Error::EmptyInput(
                "softmax normalizer is zero; no tokens were absorbed".into(),
            ));
        }
        let inv = 1.0 / self.l;
        for v in self.o.iter_mut() {
            *v *= inv;
        }
        Ok(AttentionOutput {
            o: self.o,
            logsumexp: self.m + self.l.ln(),
            traffic,
        })
    }
}

/// Merges per-split partials, in list order, into the final normalized
/// output. Identical to a single-split evaluation up to rounding.
pub fn split_reduce(partials: &[SoftmaxPartial]) -> Result<AttentionOutput> {
    let first = partials
        .first()
        .ok_or_else(|| Error::EmptyInput("split_reduce needs at least one partial".into()))?;
    let mut state = SoftmaxPartial::empty(first.o.len());
    for p in partials {
        if p.o.len() != first.o.len() {
            return Err(Error::ShapeMismatch(format!(
                "partial output lengths differ: {} vs {}",
                p.o.len(),
                first.o.len()
            )));
        }
        state.merge(p);
    }
    state.finalize(Traffic::default())
}

/// Exact single-pass attention with a global max, used as the oracle.
/// Scores and accumulation run in f64.
pub fn reference_attention(
    query: &[f32],
    keys: &HeadMatrix,
    values: &HeadMatrix,
) -> Result<AttentionOutput> {
    let n = keys.rows();
    let d = query.len();
    if n == 0 {
        return Err(Error::EmptyInput("reference_attention on empty cache".into()));
    }
    if keys.cols() != d || values.cols() != d || values.rows() != n {
        return Err(Error::ShapeMismatch(format!(
            "query {}o, keys {}x{}, values {}x{}",
            d,
            keys.rows(),
            keys.cols(),
            values.rows(),
            values.cols()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = vec![0.0f64; n];
    for (j, row) in keys.iter_rows().enumerate() {
        let mut acc = 0.0f64;
        for (x, y) in query.iter().zip(row) {
            acc += f64::from(*x) * f64::from(*y);
        }
        scores[j] = acc * scale;
    }
    let m = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut l = 0.0f64;
    let mut o = vec![0.0f64; d];
    for (j, &s) in scores.iter().enumerate() {
        let p = (s - m).exp();
        l += p;
        for (acc, &v) in o.iter_mut().zip(values.row(j)) {
            *acc += p * f64::from(v);
        }
    }
    let inv = 1.0 / l;
    Ok(AttentionOutput {
        o: o.into_iter().map(|v| (v * inv) as f32).collect(),
        logsumexp: (m + l.ln()) as f32,
        traffic: Traffic {
            fp16_equiv_bytes: (n * d * 2 * 2) as u64,
            ..Traffic::default()
        },
    })
}

/// Double-buffered block loader over packed code rows.
///
/// `prefetch_block` models the asynchronous copy into the back buffer while
/// compute proceeds; `wait_block` is the barrier that makes a block visible.
/// With prefetching off, the copy happens at the barrier instead. Either way
/// each block is read exactly once and the decoded codes are identical.
struct BlockLoader<'a> {
    packed: &'a PackedCodes,
    prefetch: bool,
    front: Vec<u16>,
    front_range: Option<(usize, usize)>,
    back: Vec<u16>,
    back_range: Option<(usize, usize)>,
    bytes_read: u64,
    m: usize,
}

impl<'a> BlockLoader<'a> {
    fn new(packed: &'a PackedCodes, m: usize, block_size: usize, prefetch: bool) -> Self {
        Self {
            packed,
            prefetch,
            front: vec![0; m * block_size],
            front_range: None,
            back: vec![0; m * block_size],
            back_range: None,
            bytes_read: 0,
            m,
        }
    }

    fn prefetch_block(&mut self, start: usize, end: usize) {
        if !self.prefetch || start >= end {
            return;
        }
        let rows = end - start;
        self.packed
            .unpack_rows(start, end, &mut self.back[..rows * self.m]);
        self.bytes_read += (rows * self.packed.row_bytes()) as u64;
        self.back_range = Some((start, end));
    }

    fn wait_block(&mut self, start: usize, end: usize) {
        if self.back_range == Some((start, end)) {
            std::mem::swap(&mut self.front, &mut self.back);
            self.front_range = self.back_range.take();
            return;
        }
        let rows = end - start;
        self.packed
            .unpack_rows(start, end, &mut self.front[..rows * self.m]);
        self.bytes_read += (rows * self.packed.row_bytes()) as u64;
        self.front_range = Some((start, end));
    }

    fn front_codes(&self, rows: usize) -> &[u16] {
        debug_assert!(self.front_range.is_some());
        &self.front[..rows * self.m]
    }
}

/// Online-softmax pass over one contiguous quantized token range.
/// Returns the unnormalized partial state and the code bytes it read.
fn run_quantized_range(
    lut: &LookupTable,
    cache: &QuantizedKVCache,
    cb_v: &Codebook,
    start: usize,
    end: usize,
    tiles: &TileConfig,
    inv_sqrt_d: f32,
) -> (SoftmaxPartial, u64) {
    let head_dim = cache.config().head_dim;
    let mut state = SoftmaxPartial::empty(head_dim);
    if start >= end {
        return (state, 0);
    }
    let v_cfg = cache.config().value_cfg;
    let m_k = cache.config().key_cfg.num_subvectors();
    let m_v = v_cfg.num_subvectors();
    let d_v = v_cfg.sub_dim;
    let b = tiles.block_size;

    let mut k_loader = BlockLoader::new(cache.key_codes(), m_k, b, tiles.prefetch);
    let mut v_loader = BlockLoader::new(cache.value_codes(), m_v, b, tiles.prefetch);
    let mut scores = vec![0.0f32; b];

    let block_starts: Vec<usize> = (start..end).step_by(b).collect();
    // Initial synchronous load of the first key block.
    let first_end = (start + b).min(end);
    k_loader.wait_block(start, first_end);

    for (i, &bs) in block_starts.iter().enumerate() {
        let be = (bs + b).min(end);
        let rows = be - bs;
        // Value codes stream in while scores are computed from the key block.
        v_loader.prefetch_block(bs, be);

        {
            let codes = k_loader.front_codes(rows);
            for j in 0..rows {
                scores[j] = lut.score(&codes[j * m_k..(j + 1) * m_k]) * inv_sqrt_d;
            }
        }

        v_loader.wait_block(bs, be);
        // Next key block streams in while the value contribution accumulates.
        if let Some(&ns) = block_starts.get(i + 1) {
            k_loader.prefetch_block(ns, (ns + b).min(end));
        }

        {
            let v_codes = v_loader.front_codes(rows);
            state.absorb_scores(&scores[..rows], |j, p, o| {
                for (sub, &code) in v_codes[j * m_v..(j + 1) * m_v].iter().enumerate() {
                    let c = cb_v.centroid(code as usize);
                    let out = &mut o[sub * d_v..(sub + 1) * d_v];
                    for (acc, &cv) in out.iter_mut().zip(c) {
                        *acc += p * cv;
                    }
                }
            });
        }

        if let Some(&ns) = block_starts.get(i + 1) {
            k_loader.wait_block(ns, (ns + b).min(end));
        }
    }
    let bytes = k_loader.bytes_read + v_loader.bytes_read;
    (state, bytes)
}

/// Contiguous split ranges covering `0..n`, sizes differing by at most one.
fn split_ranges(n: usize, splits: usize) -> Vec<(usize, usize)> {
    let splits = splits.max(1);
    let base = n / splits;
    let extra = n % splits;
    let mut out = Vec::with_capacity(splits);
    let mut pos = 0;
    for s in 0..splits {
        let len = base + usize::from(s < extra);
        out.push((pos, pos + len));
        pos += len;
    }
    out
}

/// Fused dequantize-attention over a cache snapshot.
///
/// Scores for quantized tokens come from lookup-table gathers scaled by
/// `1/sqrt(D)`; value rows are decoded per block inside the same online
/// softmax. Residual tokens are folded in last at full precision. The query
/// must already be in the transformed space.
pub fn fused_decode_attention(
    query: &[f32],
    cache: &QuantizedKVCache,
    cb_k: &Codebook,
    cb_v: &Codebook,
    tiles: &TileConfig,
) -> Result<AttentionOutput> {
    tiles.validate()?;
    if cache.is_empty() {
        return Err(Error::EmptyInput("attention over an empty cache".into()));
    }
    let head_dim = cache.config().head_dim;
    if query.len() != head_dim {
        return Err(Error::ShapeMismatch(format!(
            "query has {} entries, cache head_dim is {head_dim}",
            query.len()
        )));
    }
    if *cb_k.config() != cache.config().key_cfg || *cb_v.config() != cache.config().value_cfg {
        return Err(Error::InvalidConfig(
            "codebook configs do not match the cache".into(),
        ));
    }

    let inv_sqrt_d = 1.0 / (head_dim as f32).sqrt();
    let nq = cache.quantized_rows();
    let mut traffic = Traffic {
        fp16_equiv_bytes: (cache.total_len() * head_dim * 2 * 2) as u64,
        ..Traffic::default()
    };

    let mut state = SoftmaxPartial::empty(head_dim);
    if nq > 0 {
        let lut = build_lut(query, cb_k)?;
        traffic.codebook_bytes_read += (memory_footprint(&cache.config().key_cfg, 0)
            .codebook_bytes
            + memory_footprint(&cache.config().value_cfg, 0).codebook_bytes)
            as u64;

        let ranges = split_ranges(nq, tiles.num_splits);
        let partials: Vec<(SoftmaxPartial, u64)> = ranges
            .par_iter()
            .map(|&(s, e)| run_quantized_range(&lut, cache, cb_v, s, e, tiles, inv_sqrt_d))
            .collect();
        // Merge in split order so the result is schedule-independent.
        for (partial, bytes) in partials {
            state.merge(&partial);
            traffic.code_bytes_read += bytes;
        }
    }

    let nr = cache.residual_rows();
    if nr > 0 {
        let k_res = cache.key_residual();
        let v_res = cache.value_residual();
        let mut scores = vec![0.0f32; tiles.block_size];
        let mut bs = 0;
        while bs < nr {
            let be = (bs + tiles.block_size).min(nr);
            for (j, r) in (bs..be).enumerate() {
                let mut acc = 0.0f32;
                for (x, y) in query.iter().zip(k_res.row(r)) {
                    acc += x * y;
                }
                scores[j] = acc * inv_sqrt_d;
            }
            state.absorb_scores(&scores[..be - bs], |j, p, o| {
                for (acc, &v) in o.iter_mut().zip(v_res.row(bs + j)) {
                    *acc += p * v;
                }
            });
            bs = be;
        }
        traffic.residual_bytes_read += (nr * head_dim * 2 * 2) as u64;
    }

    state.finalize(traffic)
}

/// Compression accounting for one attention call, cross-checked two ways:
/// the counters observed by the kernel and the storage formula.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct TrafficReport {
    pub compressed_bytes: u64,
    pub fp16_equiv_bytes: u64,
    /// compressed / fp16-equivalent.
    pub bytes_vs_fp16: f64,
    /// fp16-equivalent / compressed.
    pub compression_ratio: f64,
}

pub fn traffic_report(
    out: &AttentionOutput,
    n_quantized: usize,
    n_residual: usize,
    key_cfg: &VQConfig,
    value_cfg: &VQConfig,
) -> Result<TrafficReport> {
    let head_dim = key_cfg.head_dim;
    let k_fp = memory_footprint(key_cfg, n_quantized);
    let v_fp = memory_footprint(value_cfg, n_quantized);
    let codebook_bytes = if n_quantized > 0 {
        k_fp.codebook_bytes + v_fp.codebook_bytes
    } else {
        0
    };
    let formula_compressed =
        (k_fp.index_bytes + v_fp.index_bytes + codebook_bytes + n_residual * head_dim * 2 * 2)
            as u64;
    let formula_fp16 = ((n_quantized + n_residual) * head_dim * 2 * 2) as u64;

    let counted = out.traffic.compressed_bytes();
    if counted != formula_compressed {
        return Err(Error::AccountingMismatch(format!(
            "counters read {counted} bytes, storage formula gives {formula_compressed}"
        )));
    }
    if out.traffic.fp16_equiv_bytes != formula_fp16 {
        return Err(Error::AccountingMismatch(format!(
            "counter fp16-equivalent {} bytes, formula gives {formula_fp16}",
            out.traffic.fp16_equiv_bytes
        )));
    }
    Ok(TrafficReport {
        compressed_bytes: counted,
        fp16_equiv_bytes: formula_fp16,
        bytes_vs_fp16: counted as f64 / formula_fp16 as f64,
        compression_ratio: formula_fp16 as f64 / counted as f64,
    })
}
