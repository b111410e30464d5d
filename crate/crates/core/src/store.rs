//! Bit-exact binary formats.
//!
//! All integers are unsigned little-endian, all reals little-endian `f32`.
//!
//! | file        | layout                                                            |
//! |-------------|-------------------------------------------------------------------|
//! | tensor      | `CFT1`, u32 W, u32 H, u32 K, W·H·K f32                            |
//! | keypoints   | `KPT1`, u32 W_I, u32 H_I, u32 n, n × (f32 x, f32 y)               |
//! | descriptors | `GDF1`, u32 n, u32 D, per item: u16 name length, name, D f32      |
//! | codes       | `BCF1`, u32 n, u32 L, per item: u16 name length, name, ⌈L/64⌉ u64 |
//! | matrix blob | `MAT1`, u32 rows, u32 cols, rows·cols f32 (row-major)             |

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{FeatureTensor, KeypointList};

pub const TENSOR_MAGIC: &[u8; 4] = b"CFT1";
pub const KEYPOINT_MAGIC: &[u8; 4] = b"KPT1";
pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"GDF1";
pub const CODE_MAGIC: &[u8; 4] = b"BCF1";
pub const MATRIX_MAGIC: &[u8; 4] = b"MAT1";

/// Number of 64-bit words holding an `bits`-bit code.
pub fn words_for_bits(bits: usize) -> usize {
    bits.div_ceil(64)
}

struct Writer<W> {
    inner: W,
    written: usize,
}

impl<W: Write> Writer<W> {
    fn new(inner: W) -> Self {
        Self { inner, written: 0 }
    }

    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        self.written += b.len();
        Ok(())
    }

    fn u16(&mut self, v: u16) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| Error::InvalidDimensions(format!("{v} does not fit in u32")))?;
        self.bytes(&v.to_le_bytes())
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn f32s(&mut self, values: &[f32]) -> Result<()> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        let mut buf = Vec::with_capacity(values.len() * 4);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.bytes(&buf)
    }

    fn name(&mut self, name: &str) -> Result<()> {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidDimensions(format!("item name of {} bytes", name.len())))?;
        self.u16(len)?;
        self.bytes(name.as_bytes())
    }

    fn finish(mut self) -> Result<usize> {
        self.inner.flush()?;
        Ok(self.written)
    }
}

struct Reader<R> {
    inner: R,
    what: &'static str,
}

impl<R: Read> Reader<R> {
    fn new(inner: R, what: &'static str) -> Self {
        Self { inner, what }
    }

    fn exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::Truncated(self.what),
            _ => Error::Io(e),
        })
    }

    fn magic(&mut self, expected: &'static [u8; 4]) -> Result<()> {
        let mut found = [0u8; 4];
        self.exact(&mut found)?;
        if &found != expected {
            return Err(Error::BadMagic {
                expected: std::str::from_utf8(expected).unwrap_or("?"),
                found,
            });
        }
        Ok(())
    }

    fn u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<usize> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b) as usize)
    }

    fn u64s(&mut self, n: usize) -> Result<Vec<u64>> {
        let mut buf = vec![0u8; n * 8];
        self.exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        // Bound the up-front allocation so a corrupt header cannot request gigabytes
        // before the truncation is noticed.
        let mut out = Vec::with_capacity(n.min(1 << 20));
        let mut chunk = vec![0u8; 4 * n.min(1 << 16)];
        let mut remaining = n;
        while remaining > 0 {
            let take = remaining.min(1 << 16);
            let bytes = &mut chunk[..take * 4];
            self.exact(bytes)?;
            for c in bytes.chunks_exact(4) {
                let v = f32::from_le_bytes(c.try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::NonFinite(out.len()));
                }
                out.push(v);
            }
            remaining -= take;
        }
        Ok(out)
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let mut buf = vec![0u8; len];
        self.exact(&mut buf)?;
        String::from_utf8(buf).map_err(|_| Error::Malformed("item name is not UTF-8".into()))
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::Malformed(format!(
                "trailing bytes after {}",
                self.what
            ))),
        }
    }
}

pub fn write_tensor<W: Write>(t: &FeatureTensor, sink: W) -> Result<usize> {
    let mut w = Writer::new(sink);
    w.bytes(TENSOR_MAGIC)?;
    w.u32(t.width())?;
    w.u32(t.height())?;
    w.u32(t.channels())?;
    w.f32s(t.data())?;
    w.finish()
}

pub fn read_tensor<R: Read>(source: R) -> Result<FeatureTensor> {
    let mut r = Reader::new(source, "tensor");
    r.magic(TENSOR_MAGIC)?;
    let (w, h, k) = (r.u32()?, r.u32()?, r.u32()?);
    if w == 0 || h == 0 || k == 0 {
        return Err(Error::InvalidDimensions(format!(
            "tensor header {w}x{h}x{k} has a zero extent"
        )));
    }
    let data = r.f32s(w * h * k)?;
    r.expect_eof()?;
    FeatureTensor::new(w, h, k, data)
}

pub fn write_keypoints<W: Write>(kp: &KeypointList, sink: W) -> Result<usize> {
    let mut w = Writer::new(sink);
    w.bytes(KEYPOINT_MAGIC)?;
    w.u32(kp.image_width() as usize)?;
    w.u32(kp.image_height() as usize)?;
    w.u32(kp.points().len())?;
    let flat: Vec<f32> = kp.points().iter().flat_map(|&(x, y)| [x, y]).collect();
    w.f32s(&flat)?;
    w.finish()
}

pub fn read_keypoints<R: Read>(source: R) -> Result<KeypointList> {
    let mut r = Reader::new(source, "keypoints");
    r.magic(KEYPOINT_MAGIC)?;
    let (iw, ih, n) = (r.u32()?, r.u32()?, r.u32()?);
    let flat = r.f32s(2 * n)?;
    r.expect_eof()?;
    let points = flat.chunks_exact(2).map(|c| (c[0], c[1])).collect();
    KeypointList::new(iw as u32, ih as u32, points)
}

/// Named real-valued global descriptors (GDF1).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GlobalDescriptorFile {
    dim: usize,
    names: Vec<String>,
    data: Vec<f32>,
}

impl GlobalDescriptorFile {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            names: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        self.names.push(name.into());
        self.data.extend_from_slice(v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> + '_ {
        self.names
            .iter()
            .enumerate()
            .map(move |(i, n)| (n.as_str(), self.vector(i)))
    }
}

pub fn write_descriptors<W: Write>(f: &GlobalDescriptorFile, sink: W) -> Result<usize> {
    let mut w = Writer::new(sink);
    w.bytes(DESCRIPTOR_MAGIC)?;
    w.u32(f.len())?;
    w.u32(f.dim())?;
    for (name, v) in f.iter() {
        w.name(name)?;
        w.f32s(v)?;
    }
    w.finish()
}

pub fn read_descriptors<R: Read>(source: R) -> Result<GlobalDescriptorFile> {
    let mut r = Reader::new(source, "global descriptors");
    r.magic(DESCRIPTOR_MAGIC)?;
    let (n, dim) = (r.u32()?, r.u32()?);
    let mut f = GlobalDescriptorFile::new(dim);
    for _ in 0..n {
        let name = r.name()?;
        let v = r.f32s(dim)?;
        f.push(name, &v)?;
    }
    r.expect_eof()?;
    Ok(f)
}

/// Named packed binary codes (BCF1). Bit `i` lives in word `i / 64` at
/// position `i % 64`; bits past `L` are zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BinaryCodeFile {
    bits: usize,
    names: Vec<String>,
    words: Vec<u64>,
}

impl BinaryCodeFile {
    pub fn new(bits: usize) -> Self {
        Self {
            bits,
            names: Vec::new(),
            words: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, code: &[u64]) -> Result<()> {
        check_code(self.bits, code)?;
        self.names.push(name.into());
        self.words.extend_from_slice(code);
        Ok(())
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn words_per_code(&self) -> usize {
        words_for_bits(self.bits)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn code(&self, i: usize) -> &[u64] {
        let w = self.words_per_code();
        &self.words[i * w..(i + 1) * w]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[u64])> + '_ {
        self.names
            .iter()
            .enumerate()
            .map(move |(i, n)| (n.as_str(), self.code(i)))
    }
}

/// Validates word count and that unused high bits are clear.
pub fn check_code(bits: usize, code: &[u64]) -> Result<()> {
    let words = words_for_bits(bits);
    if code.len() != words {
        return Err(Error::DimensionMismatch {
            expected: words,
            actual: code.len(),
        });
    }
    let tail = bits % 64;
    if tail != 0 {
        let mask = !((1u64 << tail) - 1);
        if code[words - 1] & mask != 0 {
            return Err(Error::Malformed(format!(
                "code has bits set beyond its length {bits}"
            )));
        }
    }
    Ok(())
}

pub fn write_codes<W: Write>(f: &BinaryCodeFile, sink: W) -> Result<usize> {
    let mut w = Writer::new(sink);
    w.bytes(CODE_MAGIC)?;
    w.u32(f.len())?;
    w.u32(f.bits())?;
    for (name, code) in f.iter() {
        w.name(name)?;
        for &word in code {
            w.u64(word)?;
        }
    }
    w.finish()
}

pub fn read_codes<R: Read>(source: R) -> Result<BinaryCodeFile> {
    let mut r = Reader::new(source, "binary codes");
    r.magic(CODE_MAGIC)?;
    let (n, bits) = (r.u32()?, r.u32()?);
    let mut f = BinaryCodeFile::new(bits);
    let words = f.words_per_code();
    for _ in 0..n {
        let name = r.name()?;
        let code = r.u64s(words)?;
        f.push(name, &code)?;
    }
    r.expect_eof()?;
    Ok(f)
}

pub fn write_matrix<W: Write>(rows: usize, cols: usize, data: &[f32], sink: W) -> Result<usize> {
    if data.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            expected: rows * cols,
            actual: data.len(),
        });
    }
    let mut w = Writer::new(sink);
    w.bytes(MATRIX_MAGIC)?;
    w.u32(rows)?;
    w.u32(cols)?;
    w.f32s(data)?;
    w.finish()
}

/// Returns `(rows, cols, row-major data)`.
pub fn read_matrix<R: Read>(source: R) -> Result<(usize, usize, Vec<f32>)> {
    let mut r = Reader::new(source, "matrix blob");
    r.magic(MATRIX_MAGIC)?;
    let (rows, cols) = (r.u32()?, r.u32()?);
    let data = r.f32s(rows * cols)?;
    r.expect_eof()?;
    Ok((rows, cols, data))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

pub fn save_tensor(t: &FeatureTensor, path: impl AsRef<Path>) -> Result<usize> {
    write_tensor(t, create(path.as_ref())?)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<FeatureTensor> {
    read_tensor(open(path.as_ref())?)
}

pub fn save_keypoints(kp: &KeypointList, path: impl AsRef<Path>) -> Result<usize> {
    write_keypoints(kp, create(path.as_ref())?)
}

pub fn load_keypoints(path: impl AsRef<Path>) -> Result<KeypointList> {
    read_keypoints(open(path.as_ref())?)
}

pub fn save_descriptors(f: &GlobalDescriptorFile, path: impl AsRef<Path>) -> Result<usize> {
    write_descriptors(f, create(path.as_ref())?)
}

pub fn load_descriptors(path: impl AsRef<Path>) -> Result<GlobalDescriptorFile> {
    read_descriptors(open(path.as_ref())?)
}

pub fn save_codes(f: &BinaryCodeFile, path: impl AsRef<Path>) -> Result<usize> {
    write_codes(f, create(path.as_ref())?)
}

pub fn load_codes(path: impl AsRef<Path>) -> Result<BinaryCodeFile> {
    read_codes(open(path.as_ref())?)
}
