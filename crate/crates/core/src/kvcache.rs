//! Quantized KV-cache store: bulk prefill, decode-time append with a
//! full-precision residual window, and mixed key/value precision.
//!
//! Keys enter the cache already smoothed and rotated (including residual
//! rows), so the attention engine never needs the smoothing factors. Values
//! are stored untransformed.

use crate::error::{Error, Result};
use crate::matrix::HeadMatrix;
use crate::transform::{transform_keys, SmoothingFactors};
use crate::vq::{
    decode, encode, memory_footprint, pack_row, packed_row_bytes, unpack_row, CodeMatrix,
    Codebook, VQConfig,
};

/// Key/value quantization configs plus the residual window length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheConfig {
    pub key_cfg: VQConfig,
    pub value_cfg: VQConfig,
    pub residual_len: usize,
    pub head_dim: usize,
}

pub const DEFAULT_RESIDUAL_LEN: usize = 128;

impl CacheConfig {
    pub fn new(key_cfg: VQConfig, value_cfg: VQConfig, residual_len: usize) -> Result<Self> {
        key_cfg.validate()?;
        value_cfg.validate()?;
        if key_cfg.head_dim != value_cfg.head_dim {
            return Err(Error::InvalidConfig(format!(
                "key head_dim {} != value head_dim {}",
                key_cfg.head_dim, value_cfg.head_dim
            )));
        }
        Ok(Self {
            key_cfg,
            value_cfg,
            residual_len,
            head_dim: key_cfg.head_dim,
        })
    }

    /// Rows flushed per batch once the residual window fills.
    fn flush_granularity(&self) -> usize {
        self.residual_len.max(1)
    }
}

/// Bit-packed code rows, one padded byte span per token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    rows: usize,
    m: usize,
    bits: u8,
    row_bytes: usize,
    data: Vec<u8>,
}

impl PackedCodes {
    pub fn new(m: usize, bits: u8) -> Self {
        Self {
            rows: 0,
            m,
            bits,
            row_bytes: packed_row_bytes(m, bits),
            data: Vec::new(),
        }
    }

    /// Rebuilds from raw bytes, validating length and per-row padding.
    pub fn from_raw(m: usize, bits: u8, rows: usize, data: Vec<u8>) -> Result<Self> {
        let row_bytes = packed_row_bytes(m, bits);
        if data.len() != rows * row_bytes {
            return Err(Error::CorruptFile(format!(
                "packed code payload is {} bytes, expected {} ({} rows x {} bytes)",
                data.len(),
                rows * row_bytes,
                rows,
                row_bytes
            )));
        }
        let mut scratch = vec![0u16; m];
        for r in 0..rows {
            unpack_row(&data[r * row_bytes..(r + 1) * row_bytes], bits, m, &mut scratch)?;
        }
        Ok(Self {
            rows,
            m,
            bits,
            row_bytes,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row_bytes(&self) -> usize {
        self.row_bytes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn push_matrix(&mut self, codes: &CodeMatrix) {
        debug_assert_eq!(codes.cols(), self.m);
        for r in 0..codes.rows() {
            pack_row(codes.row(r), self.bits, &mut self.data);
        }
        self.rows += codes.rows();
    }

    /// Unpacks rows `start..end` into `out` (length `(end-start)*m`).
    pub fn unpack_rows(&self, start: usize, end: usize, out: &mut [u16]) {
        debug_assert!(start <= end && end <= self.rows);
        debug_assert_eq!(out.len(), (end - start) * self.m);
        for (i, r) in (start..end).enumerate() {
            let bytes = &self.data[r * self.row_bytes..(r + 1) * self.row_bytes];
            unpack_row(bytes, self.bits, self.m, &mut out[i * self.m..(i + 1) * self.m])
                .expect("packed rows were validated on construction");
        }
    }

    pub fn to_code_matrix(&self) -> CodeMatrix {
        let mut codes = vec![0u16; self.rows * self.m];
        self.unpack_rows(0, self.rows, &mut codes);
        CodeMatrix::new(self.rows, self.m, codes).expect("shape by construction")
    }
}

/// Exact byte accounting for a cache snapshot, 16-bit equivalent storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheBytes {
    pub key_index_bytes: usize,
    pub value_index_bytes: usize,
    pub residual_bytes: usize,
    pub key_codebook_bytes: usize,
    pub value_codebook_bytes: usize,
}

impl CacheBytes {
    pub fn total(&self) -> usize {
        self.key_index_bytes
            + self.value_index_bytes
            + self.residual_bytes
            + self.key_codebook_bytes
            + self.value_codebook_bytes
    }
}

/// Quantized code rows plus the trailing full-precision residual window.
#[derive(Debug, Clone)]
pub struct QuantizedKVCache {
    config: CacheConfig,
    key_codes: PackedCodes,
    value_codes: PackedCodes,
    key_residual: HeadMatrix,
    value_residual: HeadMatrix,
    total_len: usize,
}

impl QuantizedKVCache {
    pub fn empty(config: CacheConfig) -> Self {
        let d = config.head_dim;
        Self {
            key_codes: PackedCodes::new(config.key_cfg.num_subvectors(), config.key_cfg.bits),
            value_codes: PackedCodes::new(
                config.value_cfg.num_subvectors(),
                config.value_cfg.bits,
            ),
            key_residual: HeadMatrix::zeros(0, d),
            value_residual: HeadMatrix::zeros(0, d),
            total_len: 0,
            config,
        }
    }

    /// Reassembles a cache from its stored parts (snapshot loading).
    pub fn from_parts(
        config: CacheConfig,
        key_codes: PackedCodes,
        value_codes: PackedCodes,
        key_residual: HeadMatrix,
        value_residual: HeadMatrix,
        total_len: usize,
    ) -> Result<Self> {
        if key_codes.rows() != value_codes.rows() {
            return Err(Error::CorruptFile(format!(
                "key codes have {} rows, value codes {}",
                key_codes.rows(),
                value_codes.rows()
            )));
        }
        if key_residual.rows() != value_residual.rows() {
            return Err(Error::CorruptFile(format!(
                "key residual has {} rows, value residual {}",
                key_residual.rows(),
                value_residual.rows()
            )));
        }
        if key_codes.rows() + key_residual.rows() != total_len {
            return Err(Error::CorruptFile(format!(
                "total_len {} != {} quantized + {} residual rows",
                total_len,
                key_codes.rows(),
                key_residual.rows()
            )));
        }
        Ok(Self {
            config,
            key_codes,
            value_codes,
            key_residual,
            value_residual,
            total_len,
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn quantized_rows(&self) -> usize {
        self.key_codes.rows()
    }

    pub fn residual_rows(&self) -> usize {
        self.key_residual.rows()
    }

    pub fn key_codes(&self) -> &PackedCodes {
        &self.key_codes
    }

    pub fn value_codes(&self) -> &PackedCodes {
        &self.value_codes
    }

    /// Residual keys, already transformed.
    pub fn key_residual(&self) -> &HeadMatrix {
        &self.key_residual
    }

    pub fn value_residual(&self) -> &HeadMatrix {
        &self.value_residual
    }

    pub fn is_empty(&self) -> bool {
        self.total_len == 0
    }

    /// Byte accounting: packed indices + 16-bit-equivalent residual rows for
    /// keys and values + both codebooks.
    pub fn cache_bytes(&self) -> CacheBytes {
        let nq = self.quantized_rows();
        let k_fp = memory_footprint(&self.config.key_cfg, nq);
        let v_fp = memory_footprint(&self.config.value_cfg, nq);
        CacheBytes {
            key_index_bytes: k_fp.index_bytes,
            value_index_bytes: v_fp.index_bytes,
            residual_bytes: self.residual_rows() * self.config.head_dim * 2 * 2,
            key_codebook_bytes: k_fp.codebook_bytes,
            value_codebook_bytes: v_fp.codebook_bytes,
        }
    }
}

fn check_books(cfg: &CacheConfig, cb_k: &Codebook, cb_v: &Codebook) -> Result<()> {
    if *cb_k.config() != cfg.key_cfg {
        return Err(Error::InvalidConfig(format!(
            "key codebook is {}, cache expects {}",
            cb_k.config().id(),
            cfg.key_cfg.id()
        )));
    }
    if *cb_v.config() != cfg.value_cfg {
        return Err(Error::InvalidConfig(format!(
            "value codebook is {}, cache expects {}",
            cb_v.config().id(),
            cfg.value_cfg.id()
        )));
    }
    Ok(())
}

/// Bulk-quantizes a prompt: keys are smoothed and rotated then encoded,
/// values encoded as-is; the trailing `residual_len` tokens stay full
/// precision (keys stored transformed).
pub fn prefill(
    keys: &HeadMatrix,
    values: &HeadMatrix,
    smoothing: &SmoothingFactors,
    cb_k: &Codebook,
    cb_v: &Codebook,
    config: CacheConfig,
) -> Result<QuantizedKVCache> {
    if keys.rows() != values.rows() || keys.cols() != values.cols() {
        return Err(Error::ShapeMismatch(format!(
            "keys are {}x{}, values are {}x{}",
            keys.rows(),
            keys.cols(),
            values.rows(),
            values.cols()
        )));
    }
    if keys.cols() != config.head_dim && keys.rows() > 0 {
        return Err(Error::ShapeMismatch(format!(
            "tokens have {} columns, cache head_dim is {}",
            keys.cols(),
            config.head_dim
        )));
    }
    check_books(&config, cb_k, cb_v)?;

    let n = keys.rows();
    let keep = config.residual_len.min(n);
    let quantized = n - keep;

    let transformed = transform_keys(keys, smoothing)?;
    let mut cache = QuantizedKVCache::empty(config);
    if quantized > 0 {
        let k_head = transformed.slice_rows(0, quantized);
        let v_head = values.slice_rows(0, quantized);
        cache.key_codes.push_matrix(&encode(&k_head, cb_k)?);
        cache.value_codes.push_matrix(&encode(&v_head, cb_v)?);
    }
    cache.key_residual = transformed.slice_rows(quantized, n);
    cache.value_residual = values.slice_rows(quantized, n);
    cache.total_len = n;
    Ok(cache)
}

/// Appends one decode-step token. The key is transformed online; both rows
/// join the residual window, and once the window holds twice the residual
/// length the oldest half is flushed through the encoder in one batch.
pub fn append(
    cache: &mut QuantizedKVCache,
    key: &HeadMatrix,
    value: &HeadMatrix,
    smoothing: &SmoothingFactors,
    cb_k: &Codebook,
    cb_v: &Codebook,
) -> Result<()> {
    if key.rows() != 1 || value.rows() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "append takes single-token rows, got {} and {}",
            key.rows(),
            value.rows()
        )));
    }
    if key.cols() != cache.config.head_dim || value.cols() != cache.config.head_dim {
        return Err(Error::ShapeMismatch(format!(
            "token has {} columns, cache head_dim is {}",
            key.cols(),
            cache.config.head_dim
        )));
    }
    check_books(&cache.config, cb_k, cb_v)?;

    let transformed = transform_keys(key, smoothing)?;
    cache.key_residual = cache.key_residual.vstack(&transformed)?;
    cache.value_residual = cache.value_residual.vstack(value)?;
    cache.total_len += 1;

    let granularity = cache.config.flush_granularity();
    if cache.key_residual.rows() >= cache.config.residual_len + granularity {
        let k_flush = cache.key_residual.slice_rows(0, granularity);
        let v_flush = cache.value_residual.slice_rows(0, granularity);
        cache.key_codes.push_matrix(&encode(&k_flush, cb_k)?);
        cache.value_codes.push_matrix(&encode(&v_flush, cb_v)?);
        let rows = cache.key_residual.rows();
        cache.key_residual = cache.key_residual.slice_rows(granularity, rows);
        cache.value_residual = cache.value_residual.slice_rows(granularity, rows);
    }
    Ok(())
}

/// Reconstructs the cache contents in token order: decoded code rows followed
/// by the residual window. Keys come back in transformed space.
pub fn materialize(
    cache: &QuantizedKVCache,
    cb_k: &Codebook,
    cb_v: &Codebook,
) -> Result<(HeadMatrix, HeadMatrix)> {
    check_books(&cache.config, cb_k, cb_v)?;
    let keys = decode(&cache.key_codes.to_code_matrix(), cb_k)?.vstack(&cache.key_residual)?;
    let values =
        decode(&cache.value_codes.to_code_matrix(), cb_v)?.vstack(&cache.value_residual)?;
    Ok((keys, values))
}
