//! Paired pre/post-projection embedding sets and the `EMBD` container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EMBD" | version u32 = 1 | N | S_pre | D_pre | S_post | D_post | M1 | M2   (u32 each)
//! id table: N × (len u16 | utf-8 bytes)
//! pre payload:  N·S_pre·D_pre  f32, sample-major then patch then dim
//! post payload: N·S_post·D_post f32, same order
//! CRC32 (IEEE) of every preceding byte, u32
//! ```
//!
//! A CSV variant (`id,space,patch,v0,v1,...`) is accepted for hand-written fixtures.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const EMBD_MAGIC: &[u8; 4] = b"EMBD";
pub const EMBD_VERSION: u32 = 1;
pub const MAX_ID_BYTES: usize = 256;
/// Lower bound applied to every per-dimension standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

const HEADER_LEN: usize = 4 + 8 * 4;

/// Which side of the connector a tensor comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    /// Vision-encoder output.
    Pre,
    /// Connector output.
    Post,
}

impl std::fmt::Display for Space {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Space::Pre => "pre",
            Space::Post => "post",
        })
    }
}

impl std::str::FromStr for Space {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(Space::Pre),
            "post" => Ok(Space::Post),
            other => Err(Error::Parse(format!("unknown space {other:?}"))),
        }
    }
}

/// Shape of an [`EmbeddingSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetDims {
    pub n: usize,
    pub s_pre: usize,
    pub d_pre: usize,
    pub s_post: usize,
    pub d_post: usize,
    pub m1: usize,
    pub m2: usize,
}

impl SetDims {
    fn validate(&self) -> Result<()> {
        let positive = [self.s_pre, self.d_pre, self.s_post, self.d_post, self.m1, self.m2];
        if positive.contains(&0) {
            return Err(Error::DimMismatch(format!("zero-sized dimension in {self:?}")));
        }
        if self.m1 * self.m2 != self.s_pre {
            return Err(Error::DimMismatch(format!(
                "grid {}x{} does not cover S_pre = {}",
                self.m1, self.m2, self.s_pre
            )));
        }
        Ok(())
    }

    pub fn seq_len(&self, space: Space) -> usize {
        match space {
            Space::Pre => self.s_pre,
            Space::Post => self.s_post,
        }
    }

    pub fn dim(&self, space: Space) -> usize {
        match space {
            Space::Pre => self.d_pre,
            Space::Post => self.d_post,
        }
    }
}

/// Paired embeddings for `N` samples, stored as 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<String>,
    dims: SetDims,
    pre: Vec<f32>,
    post: Vec<f32>,
}

impl EmbeddingSet {
    /// Builds a set, checking every invariant (unique ids, shapes, finiteness).
    pub fn new(ids: Vec<String>, dims: SetDims, pre: Vec<f32>, post: Vec<f32>) -> Result<Self> {
        let set = Self { ids, dims, pre, post };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        let d = &self.dims;
        d.validate()?;
        if self.ids.len() != d.n {
            return Err(Error::DimMismatch(format!("{} ids for N = {}", self.ids.len(), d.n)));
        }
        if self.pre.len() != d.n * d.s_pre * d.d_pre {
            return Err(Error::DimMismatch(format!(
                "pre tensor has {} values, expected {}x{}x{}",
                self.pre.len(),
                d.n,
                d.s_pre,
                d.d_pre
            )));
        }
        if self.post.len() != d.n * d.s_post * d.d_post {
            return Err(Error::DimMismatch(format!(
                "post tensor has {} values, expected {}x{}x{}",
                self.post.len(),
                d.n,
                d.s_post,
                d.d_post
            )));
        }
        let mut seen = HashSet::with_capacity(d.n);
        for id in &self.ids {
            if id.len() > MAX_ID_BYTES {
                return Err(Error::IdTooLong(id.clone()));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        check_finite(&self.pre, d.s_pre, d.d_pre)?;
        check_finite(&self.post, d.s_post, d.d_post)?;
        Ok(())
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dims(&self) -> SetDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.n
    }

    pub fn is_empty(&self) -> bool {
        self.dims.n == 0
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.dims.m1, self.dims.m2)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Raw tensor for one space, sample-major.
    pub fn tensor(&self, space: Space) -> &[f32] {
        match space {
            Space::Pre => &self.pre,
            Space::Post => &self.post,
        }
    }

    /// `S × D` block for one sample, row-major.
    pub fn sample(&self, space: Space, i: usize) -> &[f32] {
        let block = self.dims.seq_len(space) * self.dims.dim(space);
        &self.tensor(space)[i * block..(i + 1) * block]
    }

    /// New set containing the listed rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let mut dims = self.dims;
        dims.n = rows.len();
        let mut ids = Vec::with_capacity(rows.len());
        let mut pre = Vec::with_capacity(rows.len() * dims.s_pre * dims.d_pre);
        let mut post = Vec::with_capacity(rows.len() * dims.s_post * dims.d_post);
        for &r in rows {
            if r >= self.dims.n {
                return Err(Error::RowOutOfRange { row: r, n: self.dims.n });
            }
            ids.push(self.ids[r].clone());
            pre.extend_from_slice(self.sample(Space::Pre, r));
            post.extend_from_slice(self.sample(Space::Post, r));
        }
        Self::new(ids, dims, pre, post)
    }
}

fn check_finite(values: &[f32], seq: usize, dim: usize) -> Result<()> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            sample: pos / (seq * dim),
            patch: (pos / dim) % seq,
            dim: pos % dim,
        });
    }
    Ok(())
}

/// Serializes `set` to the binary container layout.
pub fn encode_container(set: &EmbeddingSet) -> Result<Vec<u8>> {
    set.validate()?;
    let d = set.dims;
    let id_bytes: usize = set.ids.iter().map(|s| 2 + s.len()).sum();
    let mut buf = Vec::with_capacity(HEADER_LEN + id_bytes + 4 * (set.pre.len() + set.post.len()) + 4);
    buf.extend_from_slice(EMBD_MAGIC);
    for v in [
        EMBD_VERSION as usize,
        d.n,
        d.s_pre,
        d.d_pre,
        d.s_post,
        d.d_post,
        d.m1,
        d.m2,
    ] {
        let v = u32::try_from(v).map_err(|_| Error::DimMismatch(format!("dimension {v} exceeds u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for id in &set.ids {
        buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }
    for v in set.pre.iter().chain(&set.post) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

/// Writes `set` to `path`. Invariant violations abort before the file is touched.
pub fn write_container(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_container(set)?;
    fs::write(path, bytes).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_container(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    decode_container(&bytes)
}

/// Little-endian cursor that reports truncation with offsets.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                needed: n as u64,
                available: self.buf.len() as u64,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32_vec(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::DimMismatch("payload size overflows".into()))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Verifies the trailing CRC32 over everything before it and that nothing follows.
    pub(crate) fn finish_with_crc(mut self) -> Result<()> {
        let body_end = self.pos;
        let stored = self.u32()?;
        let computed = crc32fast::hash(&self.buf[..body_end]);
        if self.pos != self.buf.len() {
            return Err(Error::TrailingBytes {
                offset: self.pos as u64,
                len: self.buf.len() as u64,
            });
        }
        if stored != computed {
            return Err(Error::CrcMismatch {
                offset: body_end as u64,
                stored,
                computed,
            });
        }
        Ok(())
    }
}

pub(crate) fn check_magic(r: &mut ByteReader<'_>, magic: &[u8; 4]) -> Result<()> {
    let found = r.take(4)?;
    if found != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    Ok(())
}

pub fn decode_container(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut r = ByteReader::new(bytes);
    check_magic(&mut r, EMBD_MAGIC)?;
    let version_offset = r.offset();
    let version = r.u32()?;
    if version != EMBD_VERSION {
        return Err(Error::VersionMismatch {
            expected: EMBD_VERSION,
            found: version,
            offset: version_offset,
        });
    }
    let mut header = [0usize; 7];
    for h in header.iter_mut() {
        *h = r.u32()? as usize;
    }
    let [n, s_pre, d_pre, s_post, d_post, m1, m2] = header;
    let dims = SetDims {
        n,
        s_pre,
        d_pre,
        s_post,
        d_post,
        m1,
        m2,
    };
    dims.validate()?;

    let mut ids = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let len = r.u16()? as usize;
        let offset = r.offset();
        if len > MAX_ID_BYTES {
            return Err(Error::DimMismatch(format!(
                "id length {len} at offset {offset} exceeds {MAX_ID_BYTES}"
            )));
        }
        let raw = r.take(len)?;
        let id =
            std::str::from_utf8(raw).map_err(|e| Error::Parse(format!("id at offset {offset} is not utf-8: {e}")))?;
        ids.push(id.to_owned());
    }

    // Check the full payload length up front so truncation is reported as such.
    let payload = (n * s_pre * d_pre + n * s_post * d_post) as u64 * 4;
    let needed = payload + 4;
    let remaining = bytes.len() as u64 - r.offset();
    if remaining < needed {
        return Err(Error::Truncated {
            offset: r.offset(),
            needed,
            available: bytes.len() as u64,
        });
    }
    let pre = r.f32_vec(n * s_pre * d_pre)?;
    let post = r.f32_vec(n * s_post * d_post)?;
    r.finish_with_crc()?;
    EmbeddingSet::new(ids, dims, pre, post)
}

/// Reads the CSV fixture variant: rows `id,space,patch,v0,...` with `space` in
/// `{pre, post}` and patches listed in order from 0. Samples keep first-seen order.
/// Without an explicit grid, a square `S_pre` becomes `√S × √S`, otherwise `S_pre × 1`.
pub fn read_csv(path: impl AsRef<Path>, grid: Option<(usize, usize)>) -> Result<EmbeddingSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;

    struct Partial {
        pre: Vec<Vec<f32>>,
        post: Vec<Vec<f32>>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut samples: std::collections::HashMap<String, Partial> = Default::default();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() < 4 {
            return Err(Error::Parse(format!(
                "csv row {}: expected id,space,patch,values",
                line + 1
            )));
        }
        if line == 0 && rec.get(1) == Some("space") {
            continue;
        }
        let id = rec[0].to_owned();
        let space: Space = rec[1].parse()?;
        let patch: usize = rec[2]
            .parse()
            .map_err(|e| Error::Parse(format!("csv row {}: patch index: {e}", line + 1)))?;
        let values = rec
            .iter()
            .skip(3)
            .map(|v| v.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("csv row {}: {e}", line + 1)))?;
        let entry = samples.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Partial {
                pre: Vec::new(),
                post: Vec::new(),
            }
        });
        let seq = match space {
            Space::Pre => &mut entry.pre,
            Space::Post => &mut entry.post,
        };
        if patch != seq.len() {
            return Err(Error::Parse(format!(
                "csv row {}: sample {id:?} {space} patch {patch} out of order (expected {})",
                line + 1,
                seq.len()
            )));
        }
        seq.push(values);
    }
    let first = order
        .first()
        .map(|id| &samples[id])
        .ok_or_else(|| Error::Parse("csv has no rows".into()))?;
    let s_pre = first.pre.len();
    let s_post = first.post.len();
    let d_pre = first.pre.first().map_or(0, Vec::len);
    let d_post = first.post.first().map_or(0, Vec::len);
    let (m1, m2) = grid.unwrap_or_else(|| {
        let root = (s_pre as f64).sqrt().round() as usize;
        if root * root == s_pre {
            (root, root)
        } else {
            (s_pre, 1)
        }
    });
    let mut pre = Vec::new();
    let mut post = Vec::new();
    for id in &order {
        let s = &samples[id];
        if s.pre.len() != s_pre || s.post.len() != s_post {
            return Err(Error::DimMismatch(format!(
                "sample {id:?} has a different sequence length"
            )));
        }
        for v in &s.pre {
            if v.len() != d_pre {
                return Err(Error::DimMismatch(format!(
                    "sample {id:?} pre vector width {}",
                    v.len()
                )));
            }
            pre.extend_from_slice(v);
        }
        for v in &s.post {
            if v.len() != d_post {
                return Err(Error::DimMismatch(format!(
                    "sample {id:?} post vector width {}",
                    v.len()
                )));
            }
            post.extend_from_slice(v);
        }
    }
    let dims = SetDims {
        n: order.len(),
        s_pre,
        d_pre,
        s_post,
        d_post,
        m1,
        m2,
    };
    EmbeddingSet::new(order, dims, pre, post)
}

/// Loads a set by extension: `.csv` goes through [`read_csv`], anything else is `EMBD`.
pub fn load(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => read_csv(path, None),
        _ => read_container(path),
    }
}

/// Row `i` is the mean over sample `i`'s sequence in `space`.
pub fn mean_pool(set: &EmbeddingSet, space: Space) -> Matrix {
    let n = set.len();
    let seq = set.dims.seq_len(space);
    let dim = set.dims.dim(space);
    let mut out = Matrix::zeros(n, dim);
    for i in 0..n {
        let block = set.sample(space, i);
        let row = out.row_mut(i);
        for patch in block.chunks_exact(dim) {
            for (acc, &v) in row.iter_mut().zip(patch) {
                *acc += v as f64;
            }
        }
        let inv = 1.0 / seq as f64;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Per-dimension mean and (population, floored) standard deviation of both spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub pre_mean: Vec<f64>,
    pub pre_std: Vec<f64>,
    pub post_mean: Vec<f64>,
    pub post_std: Vec<f64>,
}

fn mean_std(values: &[f32], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let count = values.len() / dim;
    let mut mean = vec![0.0; dim];
    for v in values.chunks_exact(dim) {
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count.max(1) as f64);
    let mut var = vec![0.0; dim];
    for v in values.chunks_exact(dim) {
        for ((s, &x), m) in var.iter_mut().zip(v).zip(&mean) {
            let d = x as f64 - m;
            *s += d * d;
        }
    }
    let std = var
        .into_iter()
        .map(|s| (s / count.max(1) as f64).sqrt().max(STD_FLOOR))
        .collect();
    (mean, std)
}

/// Statistics over the flattened `N·S` patch population of each space.
pub fn compute_norm_stats(set: &EmbeddingSet) -> NormStats {
    let (pre_mean, pre_std) = mean_std(&set.pre, set.dims.d_pre);
    let (post_mean, post_std) = mean_std(&set.post, set.dims.d_post);
    NormStats {
        pre_mean,
        pre_std,
        post_mean,
        post_std,
    }
}

impl NormStats {
    fn stats(&self, space: Space) -> (&[f64], &[f64]) {
        match space {
            Space::Pre => (&self.pre_mean, &self.pre_std),
            Space::Post => (&self.post_mean, &self.post_std),
        }
    }

    pub fn dim(&self, space: Space) -> usize {
        self.stats(space).0.len()
    }

    /// Z-scores a row-major block of vectors.
    pub fn normalize(&self, space: Space, block: &[f32]) -> Vec<f64> {
        let (mean, std) = self.stats(space);
        let dim = mean.len();
        let mut out = Vec::with_capacity(block.len());
        for v in block.chunks_exact(dim) {
            for ((&x, m), s) in v.iter().zip(mean).zip(std) {
                out.push((x as f64 - m) / s);
            }
        }
        out
    }

    pub fn denormalize(&self, space: Space, block: &[f64]) -> Vec<f64> {
        let (mean, std) = self.stats(space);
        let dim = mean.len();
        let mut out = Vec::with_capacity(block.len());
        for v in block.chunks_exact(dim) {
            for ((&z, m), s) in v.iter().zip(mean).zip(std) {
                out.push(z * s + m);
            }
        }
        out
    }
}
