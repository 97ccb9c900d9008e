//! Binary file formats: tensors, codebooks (with embedded smoothing
//! factors), and cache snapshots. All integers little-endian; f16 payloads
//! are widened to f32 on load; snapshots carry a trailing FNV-1a checksum so
//! payload corruption is detectable even when every bit pattern decodes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kvcache::{CacheConfig, PackedCodes, QuantizedKVCache};
use crate::matrix::HeadMatrix;
use crate::transform::SmoothingFactors;
use crate::vq::{Codebook, VQConfig};

pub const TENSOR_MAGIC: [u8; 4] = *b"VITN";
pub const CODEBOOK_MAGIC: [u8; 4] = *b"VICB";
pub const SNAPSHOT_MAGIC: [u8; 4] = *b"VIKV";
pub const FORMAT_VERSION: u32 = 1;

pub const DTYPE_F32: u8 = 0;
pub const DTYPE_F16: u8 = 1;

/// Widens one IEEE binary16 value to f32 (exact, including subnormals).
pub fn f16_bits_to_f32(bits: u16) -> f32 {
    let sign = if bits & 0x8000 != 0 { -1.0f32 } else { 1.0 };
    let exp = (bits >> 10) & 0x1f;
    let frac = u32::from(bits & 0x3ff);
    match exp {
        0 => sign * (frac as f32) * (-24f32).exp2(),
        0x1f => {
            if frac == 0 {
                sign * f32::INFINITY
            } else {
                f32::NAN
            }
        }
        _ => {
            let bits32 = (u32::from(bits & 0x8000) << 16)
                | (((i32::from(exp) - 15 + 127) as u32) << 23)
                | (frac << 13);
            f32::from_bits(bits32)
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptFile("unexpected end of file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::CorruptFile(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn check_magic(cursor: &mut Cursor, expected: [u8; 4]) -> Result<()> {
    let found: [u8; 4] = cursor.take(4)?.try_into().unwrap();
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    let version = cursor.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    Ok(())
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

// ---------------------------------------------------------------------------
// Tensor files
// ---------------------------------------------------------------------------

fn encode_tensor(dtype: u8, dims: &[u64], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + dims.len() * 8 + payload.len());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(dtype);
    out.push(dims.len() as u8);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(payload);
    out
}

/// Writes a 2-D f32 tensor.
pub fn write_tensor(path: &Path, m: &HeadMatrix) -> Result<()> {
    let mut payload = Vec::with_capacity(m.data().len() * 4);
    push_f32s(&mut payload, m.data());
    fs::write(
        path,
        encode_tensor(DTYPE_F32, &[m.rows() as u64, m.cols() as u64], &payload),
    )?;
    Ok(())
}

/// Writes a 2-D f16 tensor from raw bit patterns (test and interop surface).
pub fn write_tensor_f16(path: &Path, rows: usize, cols: usize, bits: &[u16]) -> Result<()> {
    if bits.len() != rows * cols {
        return Err(Error::ShapeMismatch(format!(
            "expected {rows}x{cols} half words, got {}",
            bits.len()
        )));
    }
    let mut payload = Vec::with_capacity(bits.len() * 2);
    for b in bits {
        payload.extend_from_slice(&b.to_le_bytes());
    }
    fs::write(
        path,
        encode_tensor(DTYPE_F16, &[rows as u64, cols as u64], &payload),
    )?;
    Ok(())
}

/// Reads a 2-D tensor, widening f16 payloads to f32.
pub fn read_tensor(path: &Path) -> Result<HeadMatrix> {
    let buf = fs::read(path)?;
    let mut cursor = Cursor::new(&buf);
    check_magic(&mut cursor, TENSOR_MAGIC)?;
    let dtype = cursor.u8()?;
    let ndims = cursor.u8()? as usize;
    if ndims != 2 {
        return Err(Error::CorruptFile(format!(
            "expected a 2-D tensor, got {ndims} dims"
        )));
    }
    let rows = cursor.u64()? as usize;
    let cols = cursor.u64()? as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::CorruptFile("dimension overflow".into()))?;
    let data = match dtype {
        DTYPE_F32 => cursor.f32s(count)?,
        DTYPE_F16 => {
            let bytes = cursor.take(count * 2)?;
            bytes
                .chunks_exact(2)
                .map(|c| f16_bits_to_f32(u16::from_le_bytes(c.try_into().unwrap())))
                .collect()
        }
        other => {
            return Err(Error::CorruptFile(format!("unknown dtype {other}")));
        }
    };
    cursor.done()?;
    HeadMatrix::from_vec(rows, cols, data)
}

// ---------------------------------------------------------------------------
// Codebook files (smoothing factors ride along)
// ---------------------------------------------------------------------------

/// Decoded codebook file: a trained codebook, smoothing factors, or both.
#[derive(Debug, Clone)]
pub struct CodebookFile {
    pub head_dim: usize,
    pub codebook: Option<Codebook>,
    pub smoothing: Option<SmoothingFactors>,
    pub provenance: String,
}

/// Writes a codebook file. A smoothing-only file (no trained centroids)
/// stores `b = 0` with a single placeholder centroid slot.
pub fn write_codebook_file(
    path: &Path,
    head_dim: usize,
    codebook: Option<&Codebook>,
    smoothing: Option<&SmoothingFactors>,
    provenance: &str,
) -> Result<()> {
    if let Some(s) = smoothing {
        if s.head_dim() != head_dim {
            return Err(Error::ShapeMismatch(format!(
                "smoothing factors have {} entries, head_dim is {head_dim}",
                s.head_dim()
            )));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(&CODEBOOK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(head_dim as u32).to_le_bytes());
    match codebook {
        Some(cb) => {
            if cb.config().head_dim != head_dim {
                return Err(Error::ShapeMismatch(format!(
                    "codebook head_dim {} != file head_dim {head_dim}",
                    cb.config().head_dim
                )));
            }
            out.extend_from_slice(&(cb.config().sub_dim as u32).to_le_bytes());
            out.push(cb.config().bits);
        }
        None => {
            out.extend_from_slice(&1u32.to_le_bytes());
            out.push(0);
        }
    }
    out.push(u8::from(smoothing.is_some()));
    if let Some(s) = smoothing {
        push_f32s(&mut out, s.lambda());
    }
    match codebook {
        Some(cb) => push_f32s(&mut out, cb.centroids()),
        None => push_f32s(&mut out, &[0.0]),
    }
    out.extend_from_slice(&(provenance.len() as u32).to_le_bytes());
    out.extend_from_slice(provenance.as_bytes());
    fs::write(path, out)?;
    Ok(())
}

pub fn read_codebook_file(path: &Path) -> Result<CodebookFile> {
    let buf = fs::read(path)?;
    let mut cursor = Cursor::new(&buf);
    check_magic(&mut cursor, CODEBOOK_MAGIC)?;
    let head_dim = cursor.u32()? as usize;
    let sub_dim = cursor.u32()? as usize;
    let bits = cursor.u8()?;
    if bits > 16 {
        return Err(Error::CorruptFile(format!("bits {bits} exceeds 16")));
    }
    if sub_dim == 0 || head_dim == 0 || head_dim % sub_dim != 0 {
        return Err(Error::CorruptFile(format!(
            "sub_dim {sub_dim} does not divide head_dim {head_dim}"
        )));
    }
    let has_smoothing = cursor.u8()?;
    let smoothing = if has_smoothing == 1 {
        let lambda = cursor.f32s(head_dim)?;
        let floor = lambda.iter().copied().fold(f32::INFINITY, f32::min);
        if !(floor > 0.0) {
            return Err(Error::CorruptFile(
                "smoothing factors must be positive".into(),
            ));
        }
        Some(SmoothingFactors::from_lambda(lambda, floor)?)
    } else if has_smoothing == 0 {
        None
    } else {
        return Err(Error::CorruptFile(format!(
            "has_smoothing flag is {has_smoothing}"
        )));
    };
    let centroid_count = 1usize << bits;
    let centroids = cursor.f32s(centroid_count * sub_dim)?;
    let prov_len = cursor.u32()? as usize;
    let provenance = String::from_utf8(cursor.take(prov_len)?.to_vec())
        .map_err(|_| Error::CorruptFile("provenance is not UTF-8".into()))?;
    cursor.done()?;
    let codebook = if bits == 0 {
        None
    } else {
        Some(Codebook::new(
            VQConfig::new(sub_dim, bits, head_dim)?,
            centroids,
            provenance.clone(),
        )?)
    };
    Ok(CodebookFile {
        head_dim,
        codebook,
        smoothing,
        provenance,
    })
}

// ---------------------------------------------------------------------------
// Cache snapshots
// ---------------------------------------------------------------------------

pub fn write_snapshot(path: &Path, cache: &QuantizedKVCache) -> Result<()> {
    let cfg = cache.config();
    let mut out = Vec::new();
    out.extend_from_slice(&SNAPSHOT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.head_dim as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.key_cfg.sub_dim as u32).to_le_bytes());
    out.push(cfg.key_cfg.bits);
    out.extend_from_slice(&(cfg.value_cfg.sub_dim as u32).to_le_bytes());
    out.push(cfg.value_cfg.bits);
    out.extend_from_slice(&(cfg.residual_len as u32).to_le_bytes());
    out.extend_from_slice(&(cache.total_len() as u64).to_le_bytes());
    out.extend_from_slice(&(cache.quantized_rows() as u64).to_le_bytes());
    out.extend_from_slice(&(cache.residual_rows() as u64).to_le_bytes());
    out.extend_from_slice(cache.key_codes().data());
    out.extend_from_slice(cache.value_codes().data());
    push_f32s(&mut out, cache.key_residual().data());
    push_f32s(&mut out, cache.value_residual().data());
    let checksum = fnv1a(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    fs::write(path, out)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<QuantizedKVCache> {
    let buf = fs::read(path)?;
    if buf.len() < 8 {
        return Err(Error::CorruptFile("snapshot shorter than a checksum".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = fnv1a(body);
    if stored != computed {
        return Err(Error::CorruptFile(format!(
            "checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
        )));
    }
    let mut cursor = Cursor::new(body);
    check_magic(&mut cursor, SNAPSHOT_MAGIC)?;
    let head_dim = cursor.u32()? as usize;
    let key_d = cursor.u32()? as usize;
    let key_b = cursor.u8()?;
    let value_d = cursor.u32()? as usize;
    let value_b = cursor.u8()?;
    let residual_len = cursor.u32()? as usize;
    let total_len = cursor.u64()? as usize;
    let n_quantized = cursor.u64()? as usize;
    let n_residual = cursor.u64()? as usize;

    let key_cfg = VQConfig::new(key_d, key_b, head_dim)?;
    let value_cfg = VQConfig::new(value_d, value_b, head_dim)?;
    let config = CacheConfig::new(key_cfg, value_cfg, residual_len)?;

    let key_rows = key_cfg.num_subvectors();
    let key_bytes = crate::vq::packed_row_bytes(key_rows, key_b) * n_quantized;
    let key_codes = PackedCodes::from_raw(
        key_rows,
        key_b,
        n_quantized,
        cursor.take(key_bytes)?.to_vec(),
    )?;
    let value_rows = value_cfg.num_subvectors();
    let value_bytes = crate::vq::packed_row_bytes(value_rows, value_b) * n_quantized;
    let value_codes = PackedCodes::from_raw(
        value_rows,
        value_b,
        n_quantized,
        cursor.take(value_bytes)?.to_vec(),
    )?;

    let key_residual = HeadMatrix::from_vec(
        n_residual,
        head_dim,
        cursor.f32s(n_residual * head_dim)?,
    )?;
    let value_residual = HeadMatrix::from_vec(
        n_residual,
        head_dim,
        cursor.f32s(n_residual * head_dim)?,
    )?;
    cursor.done()?;

    QuantizedKVCache::from_parts(
        config,
        key_codes,
        value_codes,
        key_residual,
        value_residual,
        total_len,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvcache::{materialize, prefill};
    use crate::synth::gaussian_matrix;
    use crate::transform::{calibrate_smoothing, TransformConfig};
    use crate::vq::{kmeans_train, subvectors_of};
    use tempfile::tempdir;

    #[test]
    fn f16_known_values() {
        assert_eq!(f16_bits_to_f32(0x3c00), 1.0);
        assert_eq!(f16_bits_to_f32(0xc000), -2.0);
        assert_eq!(f16_bits_to_f32(0x7bff), 65504.0);
        assert_eq!(f16_bits_to_f32(0x0001), 2f32.powi(-24));
        assert_eq!(f16_bits_to_f32(0x8000), 0.0);
        assert!(f16_bits_to_f32(0x7c00).is_infinite());
        assert!(f16_bits_to_f32(0x7e00).is_nan());
    }

    #[test]
    fn tensor_round_trip_f32() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.vitn");
        let m = gaussian_matrix(7, 16, 3);
        write_tensor(&path, &m).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.data(), m.data());
        // Byte-identical on rewrite.
        let first = std::fs::read(&path).unwrap();
        write_tensor(&path, &m).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn tensor_f16_widens_on_load() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t16.vitn");
        write_tensor_f16(&path, 1, 4, &[0x3c00, 0xc000, 0x0000, 0x3800]).unwrap();
        let m = read_tensor(&path).unwrap();
        assert_eq!(m.data(), &[1.0, -2.0, 0.0, 0.5]);
    }

    #[test]
    fn tensor_f16_rejects_non_finite_payload() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("inf.vitn");
        write_tensor_f16(&path, 1, 2, &[0x7c00, 0x0000]).unwrap();
        assert!(matches!(
            read_tensor(&path),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn tensor_rejects_bad_magic_and_version() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.vitn");
        let m = gaussian_matrix(2, 2, 1);
        write_tensor(&path, &m).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::BadMagic { .. })));

        write_tensor(&path, &m).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_tensor(&path),
            Err(Error::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn tensor_rejects_truncated_payload() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("short.vitn");
        write_tensor(&path, &gaussian_matrix(2, 4, 1)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn codebook_file_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cb.vicb");
        let x = gaussian_matrix(64, 16, 4);
        let cfg = VQConfig::new(4, 4, 16).unwrap();
        let cb = kmeans_train(&subvectors_of(&x, 4).unwrap(), cfg, 10, 4).unwrap();
        let s = calibrate_smoothing(&x, &TransformConfig::new(16)).unwrap();
        write_codebook_file(&path, 16, Some(&cb), Some(&s), cb.provenance()).unwrap();
        let file = read_codebook_file(&path).unwrap();
        let back = file.codebook.unwrap();
        assert_eq!(back.centroids(), cb.centroids());
        assert_eq!(back.config(), cb.config());
        assert_eq!(file.smoothing.unwrap().lambda(), s.lambda());
        assert_eq!(file.provenance, cb.provenance());
        // Bit-exact rewrite.
        let first = std::fs::read(&path).unwrap();
        write_codebook_file(&path, 16, Some(&cb), Some(&s), cb.provenance()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn smoothing_only_codebook_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("lambda.vicb");
        let x = gaussian_matrix(32, 8, 5);
        let s = calibrate_smoothing(&x, &TransformConfig::new(8)).unwrap();
        write_codebook_file(&path, 8, None, Some(&s), "calibration only").unwrap();
        let file = read_codebook_file(&path).unwrap();
        assert!(file.codebook.is_none());
        assert_eq!(file.smoothing.unwrap().lambda(), s.lambda());
        assert_eq!(file.provenance, "calibration only");
    }

    fn sample_cache() -> (QuantizedKVCache, Codebook, Codebook) {
        let keys = gaussian_matrix(80, 16, 6);
        let values = gaussian_matrix(80, 16, 7);
        let s = calibrate_smoothing(&keys, &TransformConfig::new(16)).unwrap();
        let kt = crate::transform::transform_keys(&keys, &s).unwrap();
        let k_cfg = VQConfig::new(4, 5, 16).unwrap();
        let v_cfg = VQConfig::new(8, 3, 16).unwrap();
        let cb_k = kmeans_train(&subvectors_of(&kt, 4).unwrap(), k_cfg, 10, 6).unwrap();
        let cb_v = kmeans_train(&subvectors_of(&values, 8).unwrap(), v_cfg, 10, 7).unwrap();
        let cfg = CacheConfig::new(k_cfg, v_cfg, 16).unwrap();
        let cache = prefill(&keys, &values, &s, &cb_k, &cb_v, cfg).unwrap();
        (cache, cb_k, cb_v)
    }

    #[test]
    fn snapshot_round_trip_materializes_bit_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cache.vikv");
        let (cache, cb_k, cb_v) = sample_cache();
        write_snapshot(&path, &cache).unwrap();
        let back = read_snapshot(&path).unwrap();
        assert_eq!(back.total_len(), cache.total_len());
        assert_eq!(back.quantized_rows(), cache.quantized_rows());
        let (mk, mv) = materialize(&cache, &cb_k, &cb_v).unwrap();
        let (bk, bv) = materialize(&back, &cb_k, &cb_v).unwrap();
        assert_eq!(mk.data(), bk.data());
        assert_eq!(mv.data(), bv.data());
    }

    #[test]
    fn snapshot_detects_code_byte_corruption() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cache.vikv");
        let (cache, _, _) = sample_cache();
        write_snapshot(&path, &cache).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Flip one byte inside the key code payload (header is 43 bytes).
        let offset = 43 + 5;
        bytes[offset] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_snapshot(&path), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn snapshot_rejects_bad_magic_distinctly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cache.vikv");
        let (cache, _, _) = sample_cache();
        write_snapshot(&path, &cache).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        // Recompute the checksum so the magic check itself is exercised.
        let body_len = bytes.len() - 8;
        let checksum = super::fnv1a(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&checksum.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_snapshot(&path),
            Err(Error::BadMagic { .. })
        ));
    }
}
