//! Binary codebook and parameter files, and the semantic-ID table.
//!
//! All integers are `u32` little-endian and all values `f32` little-endian.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::quantizer::{CodeSequence, CodebookSet};
use crate::tensor::Matrix;

pub const CODEBOOK_MAGIC: &[u8; 7] = b"SODA-CB";
pub const TENSOR_MAGIC: &[u8; 7] = b"SODA-NT";
pub const FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "unexpected end of file"))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect())
    }

    fn header(&mut self, magic: &[u8]) -> Result<()> {
        if self.take(magic.len())? != magic {
            return Err(Error::format(self.path, "bad magic"));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(self.path, format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("dimension fits in u32");
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn codebooks_to_bytes(books: &CodebookSet) -> Vec<u8> {
    let mut out = CODEBOOK_MAGIC.to_vec();
    push_u32(&mut out, FORMAT_VERSION as usize);
    push_u32(&mut out, books.num_layers());
    push_u32(&mut out, books.codebook_size());
    push_u32(&mut out, books.code_dim());
    for layer in books.layers() {
        push_f32s(&mut out, layer.data());
    }
    out
}

pub fn codebooks_from_bytes(bytes: &[u8], path: &Path) -> Result<CodebookSet> {
    let mut r = Reader { bytes, at: 0, path };
    r.header(CODEBOOK_MAGIC)?;
    let layers = r.u32()? as usize;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let books = (0..layers)
        .map(|_| Ok(Matrix::from_vec(k, d, r.f32s(k * d)?)))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    CodebookSet::new(books)
}

pub fn write_codebooks(path: impl AsRef<Path>, books: &CodebookSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, codebooks_to_bytes(books)).map_err(|e| Error::io(path, e))
}

pub fn read_codebooks(path: impl AsRef<Path>) -> Result<CodebookSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    codebooks_from_bytes(&bytes, path)
}

pub fn params_to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = TENSOR_MAGIC.to_vec();
    push_u32(&mut out, FORMAT_VERSION as usize);
    push_u32(&mut out, store.len());
    for (_, name, value) in store.iter() {
        push_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, 2);
        push_u32(&mut out, value.rows());
        push_u32(&mut out, value.cols());
        push_f32s(&mut out, value.data());
    }
    out
}

/// Named tensors in file order. Rank-1 tensors load as row vectors.
pub fn tensors_from_bytes(bytes: &[u8], path: &Path) -> Result<Vec<(String, Matrix)>> {
    let mut r = Reader { bytes, at: 0, path };
    r.header(TENSOR_MAGIC)?;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims[..] {
            [] => (1, 1),
            [n] => (1, n),
            [a, b] => (a, b),
            _ => return Err(Error::format(path, format!("tensor `{name}` has rank {rank}"))),
        };
        out.push((name, Matrix::from_vec(rows, cols, r.f32s(rows * cols)?)));
    }
    r.finish()?;
    Ok(out)
}

pub fn write_params(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, params_to_bytes(store)).map_err(|e| Error::io(path, e))
}

/// Overwrites every parameter of `store` from the file; names and shapes must match exactly.
pub fn read_params_into(path: impl AsRef<Path>, store: &mut ParamStore) -> Result<()> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = tensors_from_bytes(&bytes, path)?;
    if tensors.len() != store.len() {
        return Err(Error::format(
            path,
            format!("{} tensors for {} parameters", tensors.len(), store.len()),
        ));
    }
    for (name, value) in tensors {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::format(path, format!("unknown parameter `{name}`")))?;
        if store.get(id).shape() != value.shape() {
            return Err(Error::format(
                path,
                format!("shape mismatch for `{name}`: {:?} vs {:?}", store.get(id).shape(), value.shape()),
            ));
        }
        *store.get_mut(id) = value;
    }
    Ok(())
}

/// Rounds every parameter to the nearest `f32`, matching what a reload yields.
pub fn round_to_f32(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// `item_id`, codes `c_1..c_L`, disambiguation token; one item per line after a header.
pub fn semantic_ids_to_tsv(item_ids: &[String], ids: &[CodeSequence]) -> String {
    let layers = ids.first().map_or(0, |s| s.codes.len());
    let mut out = String::from("item_id");
    for l in 1..=layers {
        let _ = write!(out, "\tc_{l}");
    }
    out.push_str("\tdisambiguation\n");
    for (item, seq) in item_ids.iter().zip(ids) {
        out.push_str(item);
        for c in &seq.codes {
            let _ = write!(out, "\t{c}");
        }
        let _ = writeln!(out, "\t{}", seq.disambiguation);
    }
    out
}

pub fn write_semantic_ids(path: impl AsRef<Path>, item_ids: &[String], ids: &[CodeSequence]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, semantic_ids_to_tsv(item_ids, ids)).map_err(|e| Error::io(path, e))
}

pub fn read_semantic_ids(path: impl AsRef<Path>) -> Result<Vec<(String, CodeSequence)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if fields.len() < 2 {
            return Err(parse_err("expected an item id and a disambiguation token".into()));
        }
        let numbers = fields[1..]
            .iter()
            .map(|f| f.parse::<usize>().map_err(|_| parse_err(format!("bad code `{f}`"))))
            .collect::<Result<Vec<_>>>()?;
        let (disambiguation, codes) = numbers.split_last().expect("at least one number");
        out.push((
            fields[0].to_string(),
            CodeSequence {
                codes: codes.to_vec(),
                disambiguation: *disambiguation,
            },
        ));
    }
    Ok(out)
}
