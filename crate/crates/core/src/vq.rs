//! Product-quantization primitives: codebook training, sub-vector
//! encode/decode, bit packing, and memory accounting.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::HeadMatrix;

/// Sub-vector dimension `d`, code width `b` bits, and the head dimension the
/// codes tile. Written `d{n}b{m}` in config ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VQConfig {
    pub sub_dim: usize,
    pub bits: u8,
    pub head_dim: usize,
}

impl VQConfig {
    pub fn new(sub_dim: usize, bits: u8, head_dim: usize) -> Result<Self> {
        let cfg = Self {
            sub_dim,
            bits,
            head_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sub_dim == 0 || self.head_dim == 0 {
            return Err(Error::InvalidConfig("zero dimension".into()));
        }
        if self.head_dim % self.sub_dim != 0 {
            return Err(Error::InvalidConfig(format!(
                "sub_dim {} does not divide head_dim {}",
                self.sub_dim, self.head_dim
            )));
        }
        if self.bits == 0 || self.bits > 16 {
            return Err(Error::InvalidConfig(format!(
                "bits must be in 1..=16, got {}",
                self.bits
            )));
        }
        Ok(())
    }

    /// Number of sub-vectors per token row.
    pub fn num_subvectors(&self) -> usize {
        self.head_dim / self.sub_dim
    }

    pub fn num_centroids(&self) -> usize {
        1usize << self.bits
    }

    /// Average storage cost in bits per stored element.
    pub fn avg_bits(&self) -> f64 {
        f64::from(self.bits) / self.sub_dim as f64
    }

    /// Parses `d{n}b{m}`, e.g. `d4b8`.
    pub fn parse(id: &str, head_dim: usize) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("bad config id '{id}' (expected d{{n}}b{{m}})"));
        let rest = id.strip_prefix('d').ok_or_else(bad)?;
        let (d_str, b_str) = rest.split_once('b').ok_or_else(bad)?;
        let sub_dim: usize = d_str.parse().map_err(|_| bad())?;
        let bits: u8 = b_str.parse().map_err(|_| bad())?;
        Self::new(sub_dim, bits, head_dim)
    }

    pub fn id(&self) -> String {
        format!("d{}b{}", self.sub_dim, self.bits)
    }
}

/// Parses a config id that may assign keys and values separately:
/// `d4b8` (shared) or `K-d8b12/V-d8b8` (mixed precision).
pub fn parse_config_pair(id: &str, head_dim: usize) -> Result<(VQConfig, VQConfig)> {
    if let Some((k_part, v_part)) = id.split_once('/') {
        let k_id = k_part.strip_prefix("K-").ok_or_else(|| {
            Error::InvalidConfig(format!("bad mixed config '{id}': expected K-.../V-..."))
        })?;
        let v_id = v_part.strip_prefix("V-").ok_or_else(|| {
            Error::InvalidConfig(format!("bad mixed config '{id}': expected K-.../V-..."))
        })?;
        Ok((
            VQConfig::parse(k_id, head_dim)?,
            VQConfig::parse(v_id, head_dim)?,
        ))
    } else {
        let cfg = VQConfig::parse(id, head_dim)?;
        Ok((cfg, cfg))
    }
}

/// Average bits per element across a key/value config pair.
pub fn avg_bits_pair(key: &VQConfig, value: &VQConfig) -> f64 {
    (key.avg_bits() + value.avg_bits()) / 2.0
}

/// Codebook and index storage cost in bytes.
///
/// Codebook entries are accounted at 16-bit storage; sub-byte codes are
/// bit-packed and padded to a byte boundary per token row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryFootprint {
    pub codebook_bytes: usize,
    pub index_bytes: usize,
}

/// Packed bytes for one token row of `m` codes at `b` bits each.
pub fn packed_row_bytes(m: usize, bits: u8) -> usize {
    (m * bits as usize + 7) / 8
}

pub fn memory_footprint(cfg: &VQConfig, n_tokens: usize) -> MemoryFootprint {
    MemoryFootprint {
        codebook_bytes: cfg.num_centroids() * cfg.sub_dim * 2,
        index_bytes: n_tokens * packed_row_bytes(cfg.num_subvectors(), cfg.bits),
    }
}

/// The learned centroids shared by all sub-vectors of a stream.
#[derive(Debug, Clone)]
pub struct Codebook {
    config: VQConfig,
    /// `2^b x d`, row-major.
    centroids: Vec<f32>,
    /// Column-major copy plus per-centroid squared norms for the encode scan.
    scan_cols: Vec<f32>,
    scan_norms: Vec<f32>,
    provenance: String,
}

impl Codebook {
    pub fn new(config: VQConfig, centroids: Vec<f32>, provenance: String) -> Result<Self> {
        config.validate()?;
        let k = config.num_centroids();
        let d = config.sub_dim;
        if centroids.len() != k * d {
            return Err(Error::ShapeMismatch(format!(
                "expected {k} x {d} centroid entries, got {}",
                centroids.len()
            )));
        }
        if let Some(pos) = centroids.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / d,
                col: pos % d,
            });
        }
        let mut scan_cols = vec![0.0f32; k * d];
        let mut scan_norms = vec![0.0f32; k];
        for j in 0..k {
            let mut norm = 0.0f32;
            for l in 0..d {
                let v = centroids[j * d + l];
                scan_cols[l * k + j] = v;
                norm += v * v;
            }
            scan_norms[j] = norm;
        }
        Ok(Self {
            config,
            centroids,
            scan_cols,
            scan_norms,
            provenance,
        })
    }

    pub fn config(&self) -> &VQConfig {
        &self.config
    }

    pub fn centroid(&self, j: usize) -> &[f32] {
        let d = self.config.sub_dim;
        &self.centroids[j * d..(j + 1) * d]
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// A lossless codebook enumerating the distinct sub-vectors of `x`.
    ///
    /// Fails when `x` contains more than `2^b` distinct sub-vectors; unused
    /// slots repeat the first sub-vector, which ties resolve away from. With
    /// such a codebook `decode(encode(x)) == x` bit-exactly, so the quantized
    /// path carries full-precision data.
    pub fn from_exact_subvectors(x: &HeadMatrix, cfg: VQConfig) -> Result<Self> {
        cfg.validate()?;
        if x.cols() != cfg.head_dim {
            return Err(Error::ShapeMismatch(format!(
                "matrix has {} columns, config head_dim is {}",
                x.cols(),
                cfg.head_dim
            )));
        }
        let d = cfg.sub_dim;
        let k = cfg.num_centroids();
        let mut seen: Vec<Vec<u32>> = Vec::new();
        let mut centroids: Vec<f32> = Vec::new();
        for row in x.iter_rows() {
            for sub in row.chunks_exact(d) {
                let bits: Vec<u32> = sub.iter().map(|v| v.to_bits()).collect();
                if !seen.contains(&bits) {
                    seen.push(bits);
                    centroids.extend_from_slice(sub);
                }
            }
        }
        if seen.len() > k {
            return Err(Error::InvalidConfig(format!(
                "{} distinct sub-vectors exceed the {k} codebook slots",
                seen.len()
            )));
        }
        let first: Vec<f32> = if centroids.is_empty() {
            vec![0.0; d]
        } else {
            centroids[..d].to_vec()
        };
        while centroids.len() < k * d {
            centroids.extend_from_slice(&first);
        }
        Self::new(cfg, centroids, "exact sub-vector snapshot".into())
    }

    /// Scores every centroid against `sub`: `score[j] = |c_j|^2 - 2 sub.c_j`.
    /// Ordering matches squared distance; the `|sub|^2` term is common.
    fn scan_scores(&self, sub: &[f32], scores: &mut [f32]) {
        let k = self.config.num_centroids();
        let w0 = -2.0 * sub[0];
        let col0 = &self.scan_cols[..k];
        for ((s, &n), &c) in scores.iter_mut().zip(&self.scan_norms).zip(col0) {
            *s = n + w0 * c;
        }
        for (l, &x) in sub.iter().enumerate().skip(1) {
            let col = &self.scan_cols[l * k..(l + 1) * k];
            let w = -2.0 * x;
            for (s, &c) in scores.iter_mut().zip(col) {
                *s += w * c;
            }
        }
    }

    /// Scores four sub-vectors at once; each centroid column is streamed a
    /// single time for all four accumulator rows.
    fn scan_scores_x4(&self, subs: [&[f32]; 4], scores: &mut [f32]) {
        let k = self.config.num_centroids();
        debug_assert_eq!(scores.len(), 4 * k);
        let (s0, rest) = scores.split_at_mut(k);
        let (s1, rest) = rest.split_at_mut(k);
        let (s2, s3) = rest.split_at_mut(k);
        let col0 = &self.scan_cols[..k];
        let w = [
            -2.0 * subs[0][0],
            -2.0 * subs[1][0],
            -2.0 * subs[2][0],
            -2.0 * subs[3][0],
        ];
        for j in 0..k {
            let c = col0[j];
            let n = self.scan_norms[j];
            s0[j] = n + w[0] * c;
            s1[j] = n + w[1] * c;
            s2[j] = n + w[2] * c;
            s3[j] = n + w[3] * c;
        }
        for l in 1..self.config.sub_dim {
            let col = &self.scan_cols[l * k..(l + 1) * k];
            let w = [
                -2.0 * subs[0][l],
                -2.0 * subs[1][l],
                -2.0 * subs[2][l],
                -2.0 * subs[3][l],
            ];
            for j in 0..k {
                let c = col[j];
                s0[j] += w[0] * c;
                s1[j] += w[1] * c;
                s2[j] += w[2] * c;
                s3[j] += w[3] * c;
            }
        }
    }

    /// Index of the nearest centroid, ties to the lowest index.
    fn nearest(&self, sub: &[f32], scores: &mut [f32]) -> u16 {
        self.scan_scores(sub, scores);
        argmin_lowest(scores)
    }
}

/// First index holding the minimum score; both passes vectorize and the
/// first-match scan preserves the lowest-index tie rule.
fn argmin_lowest(scores: &[f32]) -> u16 {
    const LANES: usize = 8;
    let mut mins = [f32::INFINITY; LANES];
        let mut chunks = scores.chunks_exact(LANES);
        for chunk in &mut chunks {
            for (m, &s) in mins.iter_mut().zip(chunk) {
                if s < *m {
                    *m = s;
                }
            }
        }
        let mut best_score = mins.iter().fold(f32::INFINITY, |a, &b| a.min(b));
        for &s in chunks.remainder() {
            if s < best_score {
                best_score = s;
            }
        }
        let mut base = 0usize;
        for chunk in scores.chunks_exact(LANES) {
            let mut hit = false;
            for &s in chunk {
                hit |= s == best_score;
            }
            if hit {
                for (i, &s) in chunk.iter().enumerate() {
                    if s == best_score {
                        return (base + i) as u16;
                    }
                }
            }
            base += LANES;
        }
        for (i, &s) in scores[base..].iter().enumerate() {
            if s == best_score {
                return (base + i) as u16;
            }
        }
    unreachable!("minimum must be present in the scanned scores");
}

/// Per-token code rows: `N x M` centroid indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMatrix {
    rows: usize,
    cols: usize,
    codes: Vec<u16>,
}

impl CodeMatrix {
    pub fn new(rows: usize, cols: usize, codes: Vec<u16>) -> Result<Self> {
        if codes.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "expected {rows}x{cols} codes, got {}",
                codes.len()
            )));
        }
        Ok(Self { rows, cols, codes })
    }

    pub fn empty(cols: usize) -> Self {
        Self {
            rows: 0,
            cols,
            codes: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[u16] {
        &self.codes[r * self.cols..(r + 1) * self.cols]
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }
}

/// Reshapes `N x D` token rows into `(N*M) x d` sub-vector rows.
pub fn subvectors_of(x: &HeadMatrix, sub_dim: usize) -> Result<HeadMatrix> {
    if sub_dim == 0 || x.cols() % sub_dim != 0 {
        return Err(Error::ShapeMismatch(format!(
            "sub_dim {sub_dim} does not divide {} columns",
            x.cols()
        )));
    }
    let m = x.cols() / sub_dim;
    Ok(HeadMatrix::from_vec_unchecked(
        x.rows() * m,
        sub_dim,
        x.data().to_vec(),
    ))
}

/// Trains a `2^b`-entry codebook on sub-vector rows with seeded k-means++
/// initialization. Deterministic for a fixed seed; the within-cluster
/// objective is non-increasing across iterations.
pub fn kmeans_train(
    subvectors: &HeadMatrix,
    cfg: VQConfig,
    max_iters: usize,
    seed: u64,
) -> Result<Codebook> {
    cfg.validate()?;
    if subvectors.cols() != cfg.sub_dim {
        return Err(Error::ShapeMismatch(format!(
            "sub-vectors have {} columns, config sub_dim is {}",
            subvectors.cols(),
            cfg.sub_dim
        )));
    }
    let p = subvectors.rows();
    let k = cfg.num_centroids();
    let d = cfg.sub_dim;
    if p < k {
        return Err(Error::InsufficientData {
            points: p,
            centroids: k,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(subvectors, k, &mut rng);

    let mut assignments = vec![0u16; p];
    let mut prev_assignments = vec![u16::MAX; p];
    let mut objective = f64::INFINITY;

    for _iter in 0..max_iters.max(1) {
        let book = Codebook::new(cfg, centroids.clone(), String::new())?;
        let mut dists = vec![0.0f64; p];
        assignments
            .par_iter_mut()
            .zip(dists.par_iter_mut())
            .enumerate()
            .for_each_init(
                || vec![0.0f32; k],
                |scores, (i, (a, dist))| {
                    let sub = subvectors.row(i);
                    let j = book.nearest(sub, scores) as usize;
                    *a = j as u16;
                    *dist = sq_dist(sub, book.centroid(j));
                },
            );
        // Serial reduction keeps the objective independent of thread count.
        let new_objective: f64 = dists.iter().sum();
        debug_assert!(new_objective <= objective * (1.0 + 1e-9) + 1e-12);
        objective = new_objective;

        if assignments == prev_assignments {
            break;
        }
        prev_assignments.copy_from_slice(&assignments);

        // Centroid update with f64 accumulators.
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            let j = a as usize;
            counts[j] += 1;
            for (s, &v) in sums[j * d..(j + 1) * d].iter_mut().zip(subvectors.row(i)) {
                *s += f64::from(v);
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for l in 0..d {
                    centroids[j * d + l] = (sums[j * d + l] * inv) as f32;
                }
            }
        }
        // Empty clusters re-seed at the currently worst-quantized points.
        let empties: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        if !empties.is_empty() {
            let mut order: Vec<usize> = (0..p).collect();
            order.sort_by(|&a, &b| {
                dists[b]
                    .partial_cmp(&dists[a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            for (slot, j) in empties.into_iter().enumerate() {
                let point = order[slot.min(p - 1)];
                centroids[j * d..(j + 1) * d].copy_from_slice(subvectors.row(point));
            }
        }
    }

    let provenance = format!(
        "kmeans p={p} {} max_iters={max_iters} seed={seed} objective={objective:.6e}",
        cfg.id()
    );
    Codebook::new(cfg, centroids, provenance)
}

/// Final within-cluster sum of squared distances for `cb` on `subvectors`.
pub fn kmeans_objective(subvectors: &HeadMatrix, cb: &Codebook) -> Result<f64> {
    if subvectors.cols() != cb.config().sub_dim {
        return Err(Error::ShapeMismatch(format!(
            "sub-vectors have {} columns, codebook sub_dim is {}",
            subvectors.cols(),
            cb.config().sub_dim
        )));
    }
    let mut scores = vec![0.0f32; cb.config().num_centroids()];
    let mut total = 0.0f64;
    for i in 0..subvectors.rows() {
        let sub = subvectors.row(i);
        let j = cb.nearest(sub, &mut scores) as usize;
        total += sq_dist(sub, cb.centroid(j));
    }
    Ok(total)
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let diff = f64::from(*x) - f64::from(*y);
            diff * diff
        })
        .sum()
}

fn kmeans_pp_init(subvectors: &HeadMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let p = subvectors.rows();
    let d = subvectors.cols();
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.gen_range(0..p);
    centroids.extend_from_slice(subvectors.row(first));

    let mut min_dist = vec![0.0f64; p];
    for i in 0..p {
        min_dist[i] = sq_dist(subvectors.row(i), &centroids[..d]);
    }
    for c in 1..k {
        let total: f64 = min_dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = p - 1;
            for (i, &w) in min_dist.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // All points coincide with chosen centroids; any pick works.
            rng.gen_range(0..p)
        };
        let start = c * d;
        centroids.extend_from_slice(subvectors.row(pick));
        for i in 0..p {
            let dist = sq_dist(subvectors.row(i), &centroids[start..start + d]);
            if dist < min_dist[i] {
                min_dist[i] = dist;
            }
        }
    }
    centroids
}

/// Assigns every sub-vector of every token row to its nearest centroid.
///
/// Rows are processed in batches of four so each centroid column is streamed
/// once per batch; parallel over batches and bit-identical to a serial scan.
pub fn encode(x: &HeadMatrix, cb: &Codebook) -> Result<CodeMatrix> {
    let cfg = cb.config();
    if x.cols() != cfg.head_dim {
        return Err(Error::ShapeMismatch(format!(
            "matrix has {} columns, codebook head_dim is {}",
            x.cols(),
            cfg.head_dim
        )));
    }
    const BATCH: usize = 4;
    let m = cfg.num_subvectors();
    let d = cfg.sub_dim;
    let k = cfg.num_centroids();
    let n = x.rows();
    let mut codes = vec![0u16; n * m];
    codes
        .par_chunks_mut(m.max(1) * BATCH)
        .enumerate()
        .for_each_init(
            || vec![0.0f32; k * BATCH],
            |scores, (t, out)| {
                let r0 = t * BATCH;
                let rows = out.len() / m;
                if rows == BATCH {
                    for s in 0..m {
                        let subs = [
                            &x.row(r0)[s * d..(s + 1) * d],
                            &x.row(r0 + 1)[s * d..(s + 1) * d],
                            &x.row(r0 + 2)[s * d..(s + 1) * d],
                            &x.row(r0 + 3)[s * d..(s + 1) * d],
                        ];
                        cb.scan_scores_x4(subs, scores);
                        for i in 0..BATCH {
                            out[i * m + s] = argmin_lowest(&scores[i * k..(i + 1) * k]);
                        }
                    }
                } else {
                    for (i, chunk) in out.chunks_exact_mut(m).enumerate() {
                        let row = x.row(r0 + i);
                        for (sub, slot) in row.chunks_exact(d).zip(chunk.iter_mut()) {
                            *slot = cb.nearest(sub, &mut scores[..k]);
                        }
                    }
                }
            },
        );
    CodeMatrix::new(n, m, codes)
}

/// Reconstructs token rows by concatenating looked-up centroids.
pub fn decode(codes: &CodeMatrix, cb: &Codebook) -> Result<HeadMatrix> {
    let cfg = cb.config();
    if codes.cols() != cfg.num_subvectors() {
        return Err(Error::ShapeMismatch(format!(
            "codes have {} sub-vectors per row, codebook expects {}",
            codes.cols(),
            cfg.num_subvectors()
        )));
    }
    let limit = cfg.num_centroids() as u32;
    let mut data = Vec::with_capacity(codes.rows() * cfg.head_dim);
    for r in 0..codes.rows() {
        for (s, &code) in codes.row(r).iter().enumerate() {
            if u32::from(code) >= limit {
                return Err(Error::CorruptCode {
                    row: r,
                    sub: s,
                    code: u32::from(code),
                    limit,
                });
            }
            data.extend_from_slice(cb.centroid(code as usize));
        }
    }
    Ok(HeadMatrix::from_vec_unchecked(
        codes.rows(),
        cfg.head_dim,
        data,
    ))
}

/// Mean squared reconstruction error per element of `x` under `cb`.
pub fn quantization_mse(x: &HeadMatrix, cb: &Codebook) -> Result<f64> {
    let codes = encode(x, cb)?;
    let decoded = decode(&codes, cb)?;
    let n = x.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = x
        .data()
        .iter()
        .zip(decoded.data())
        .map(|(a, b)| {
            let diff = f64::from(*a) - f64::from(*b);
            diff * diff
        })
        .sum();
    Ok(sum / n as f64)
}

/// Packs one row of codes into a little-endian bitstream, `b` bits per code,
/// padded with zero bits to a byte boundary.
pub fn pack_row(codes: &[u16], bits: u8, out: &mut Vec<u8>) {
    let start = out.len();
    out.resize(start + packed_row_bytes(codes.len(), bits), 0);
    let bytes = &mut out[start..];
    let mut bit_pos = 0usize;
    for &code in codes {
        for i in 0..bits as usize {
            if (code >> i) & 1 == 1 {
                bytes[bit_pos / 8] |= 1 << (bit_pos % 8);
            }
            bit_pos += 1;
        }
    }
}

/// Unpacks one row previously written by [`pack_row`]; nonzero padding bits
/// are treated as corruption.
pub fn unpack_row(bytes: &[u8], bits: u8, m: usize, out: &mut [u16]) -> Result<()> {
    debug_assert_eq!(out.len(), m);
    let expected = packed_row_bytes(m, bits);
    if bytes.len() != expected {
        return Err(Error::CorruptFile(format!(
            "packed row has {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut bit_pos = 0usize;
    for slot in out.iter_mut() {
        let mut code = 0u16;
        for i in 0..bits as usize {
            if (bytes[bit_pos / 8] >> (bit_pos % 8)) & 1 == 1 {
                code |= 1 << i;
            }
            bit_pos += 1;
        }
        *slot = code;
    }
    while bit_pos < bytes.len() * 8 {
        if (bytes[bit_pos / 8] >> (bit_pos % 8)) & 1 == 1 {
            return Err(Error::CorruptFile(
                "nonzero padding bits in packed code row".into(),
            ));
        }
        bit_pos += 1;
    }
    Ok(())
}
