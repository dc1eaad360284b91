//! `GDEB` embedding files.
//!
//! Little-endian throughout:
//!
//! ```text
//! "GDEB" | version u32 = 1 | d_in u32 | relation count u32
//! relation names: (len u32, UTF-8 bytes) * count
//! example count u64
//! per example:
//!   id (len u32, UTF-8) | label u32 | T u32 | flags u8
//!   [flags & 0x01] T surface forms, each (len u32, UTF-8)
//!   [flags & 0x02] subject start, subject end, object start, object end: u32 each
//!   [flags & 0x04] T trigger-mask bytes (0 or 1)
//!   (T + 2) * d_in f32 values: CLS row, token rows, SEP row
//! ```

use std::collections::HashSet;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, EntitySpans, Span, TokenSequence};
use crate::diffcore::DenseArray;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GDEB";
pub const VERSION: u32 = 1;

pub const FLAG_STRINGS: u8 = 0x01;
pub const FLAG_SPANS: u8 = 0x02;
pub const FLAG_TRIGGERS: u8 = 0x04;
const KNOWN_FLAGS: u8 = FLAG_STRINGS | FLAG_SPANS | FLAG_TRIGGERS;

/// Little-endian reader that tracks its byte offset for error messages.
pub(crate) struct ByteReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub(crate) fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.offset,
            message: message.into(),
        }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => self.error("unexpected end of file"),
            _ => Error::Io(e),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b)?;
        Ok(b[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let start = self.offset;
        let len = self.u32()? as usize;
        let raw = self.bytes(len)?;
        String::from_utf8(raw).map_err(|_| Error::Parse {
            offset: start,
            message: "string is not valid UTF-8".into(),
        })
    }
}

fn write_str<W: Write>(out: &mut W, s: &str) -> Result<()> {
    out.write_all(&(s.len() as u32).to_le_bytes())?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

/// Serializes `dataset`. Embedding values are narrowed to `f32`.
pub fn write_dataset<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    dataset.validate()?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(dataset.input_width as u32).to_le_bytes())?;
    out.write_all(&(dataset.relations.len() as u32).to_le_bytes())?;
    for name in &dataset.relations {
        write_str(&mut out, name)?;
    }
    out.write_all(&(dataset.examples.len() as u64).to_le_bytes())?;
    for ex in &dataset.examples {
        write_str(&mut out, &ex.id)?;
        out.write_all(&(ex.label as u32).to_le_bytes())?;
        out.write_all(&(ex.token_count() as u32).to_le_bytes())?;
        let mut flags = 0u8;
        if ex.token_strings.is_some() {
            flags |= FLAG_STRINGS;
        }
        if ex.spans.is_some() {
            flags |= FLAG_SPANS;
        }
        if ex.trigger_mask.is_some() {
            flags |= FLAG_TRIGGERS;
        }
        out.write_all(&[flags])?;
        if let Some(strings) = &ex.token_strings {
            for s in strings {
                write_str(&mut out, s)?;
            }
        }
        if let Some(spans) = &ex.spans {
            for v in [spans.subject.start, spans.subject.end, spans.object.start, spans.object.end] {
                out.write_all(&(v as u32).to_le_bytes())?;
            }
        }
        if let Some(mask) = &ex.trigger_mask {
            let bytes: Vec<u8> = mask.iter().map(|&b| b as u8).collect();
            out.write_all(&bytes)?;
        }
        for &v in ex.embeddings.values() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Parses a dataset, validating every invariant; `split` tags the result.
pub fn read_dataset<R: Read>(input: R, split: &str) -> Result<Dataset> {
    let mut r = ByteReader::new(input);
    if r.bytes(4)? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic, expected GDEB".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let input_width = r.u32()? as usize;
    if input_width == 0 {
        return Err(r.error("embedding width is zero"));
    }
    let n_rel = r.u32()? as usize;
    let mut relations = Vec::with_capacity(n_rel.min(4096));
    for _ in 0..n_rel {
        relations.push(r.string()?);
    }
    let count = r.u64()?;
    let mut examples = Vec::with_capacity((count as usize).min(1 << 16));
    let mut seen = HashSet::new();
    for _ in 0..count {
        let start = r.offset;
        let id = r.string()?;
        if !seen.insert(id.clone()) {
            return Err(Error::Parse {
                offset: start,
                message: format!("duplicate example id `{id}`"),
            });
        }
        let label = r.u32()? as usize;
        if label >= n_rel {
            return Err(r.error(format!("label {label} outside {n_rel} relations")));
        }
        let t = r.u32()? as usize;
        if t == 0 {
            return Err(r.error("example has no tokens"));
        }
        let flags = r.u8()?;
        if flags & !KNOWN_FLAGS != 0 {
            return Err(r.error(format!("unknown flag bits {flags:#04x}")));
        }
        let token_strings = if flags & FLAG_STRINGS != 0 {
            Some((0..t).map(|_| r.string()).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let spans = if flags & FLAG_SPANS != 0 {
            let mut v = [0usize; 4];
            for slot in &mut v {
                *slot = r.u32()? as usize;
            }
            let spans = EntitySpans {
                subject: Span { start: v[0], end: v[1] },
                object: Span { start: v[2], end: v[3] },
            };
            if !spans.subject.within(t) || !spans.object.within(t) {
                return Err(r.error(format!("span out of range for {t} tokens")));
            }
            Some(spans)
        } else {
            None
        };
        let trigger_mask = if flags & FLAG_TRIGGERS != 0 {
            let raw = r.bytes(t)?;
            if raw.iter().any(|&b| b > 1) {
                return Err(r.error("trigger mask bytes must be 0 or 1"));
            }
            Some(raw.into_iter().map(|b| b == 1).collect())
        } else {
            None
        };
        let n = (t + 2) * input_width;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(r.f32()? as f64);
        }
        let embeddings = DenseArray::matrix(t + 2, input_width, values)?;
        examples.push(TokenSequence {
            id,
            label,
            embeddings,
            token_strings,
            spans,
            trigger_mask,
        });
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(r.error("trailing bytes after last example"));
    }
    let dataset = Dataset::new(relations, examples, split, input_width)?;
    Ok(dataset)
}

/// Reads a `GDEB` file; the split tag is the file stem.
pub fn load_embedding_file(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let split = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    read_dataset(BufReader::new(file), split)
}

pub fn save_embedding_file(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write_dataset(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}
