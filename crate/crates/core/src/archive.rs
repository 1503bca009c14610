//! Model archive: a UTF-8 manifest followed by raw little-endian `f64`
//! blocks in manifest order.
//!
//! ```text
//! mmcap-archive
//! version 1
//! dim K 16
//! meta embed.margin 0.2
//! list embed.vocab 3
//! <one item per line>
//! tensor embed.W_I 16 16 0
//! end
//! <binary blocks>
//! ```
//!
//! Tensor offsets are byte offsets into the binary section. Loading checks
//! that every block is contiguous, in order and fully present.

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Parameters};

pub const MAGIC: &str = "mmcap-archive";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    dims: BTreeMap<String, usize>,
    meta: BTreeMap<String, String>,
    lists: BTreeMap<String, Vec<String>>,
    tensors: IndexMap<String, Matrix>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Archive(msg.into())
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(bad(format!("invalid entry name {name:?}")));
    }
    Ok(())
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_dim(&mut self, name: &str, value: usize) {
        self.dims.insert(name.to_string(), value);
    }

    pub fn dim(&self, name: &str) -> Result<usize> {
        self.dims
            .get(name)
            .copied()
            .ok_or_else(|| bad(format!("missing dimension {name}")))
    }

    pub fn dims(&self) -> &BTreeMap<String, usize> {
        &self.dims
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing metadata {key}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| bad(format!("unparsable metadata {key}")))
    }

    pub fn set_list(&mut self, name: &str, items: Vec<String>) {
        self.lists.insert(name.to_string(), items);
    }

    pub fn list(&self, name: &str) -> Result<&[String]> {
        self.lists
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| bad(format!("missing list {name}")))
    }

    pub fn insert_tensor(&mut self, name: &str, m: Matrix) {
        self.tensors.insert(name.to_string(), m);
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))
    }

    /// Fetches a tensor and verifies its declared shape.
    pub fn tensor_shaped(&self, name: &str, rows: usize, cols: usize) -> Result<&Matrix> {
        let m = self.tensor(name)?;
        m.ensure_shape(name, rows, cols)?;
        Ok(m)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
            || self.meta.keys().any(|k| k.starts_with(prefix))
    }

    pub fn put_params<P: Parameters>(&mut self, prefix: &str, params: &P) {
        params.for_each_param(&mut |name, m| {
            self.tensors.insert(format!("{prefix}{name}"), m.clone());
        });
    }

    /// Fills `params` from tensors named `prefix + name`; each stored shape must
    /// equal the shape already held by `params`.
    pub fn get_params<P: Parameters>(&self, prefix: &str, params: &mut P) -> Result<()> {
        let mut err = None;
        params.for_each_param_mut(&mut |name, m| {
            if err.is_some() {
                return;
            }
            let full = format!("{prefix}{name}");
            match self.tensor_shaped(&full, m.rows(), m.cols()) {
                Ok(src) => m.as_mut_slice().copy_from_slice(src.as_slice()),
                Err(e) => err = Some(e),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Copies every entry of `other` into `self`, replacing same-named ones.
    pub fn merge(&mut self, other: Archive) {
        self.dims.extend(other.dims);
        self.meta.extend(other.meta);
        self.lists.extend(other.lists);
        for (k, v) in other.tensors {
            self.tensors.insert(k, v);
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = format!("{MAGIC}\nversion {FORMAT_VERSION}\n");
        for (k, v) in &self.dims {
            check_name(k)?;
            head.push_str(&format!("dim {k} {v}\n"));
        }
        for (k, v) in &self.meta {
            check_name(k)?;
            if v.contains('\n') {
                return Err(bad(format!("metadata {k} contains a newline")));
            }
            head.push_str(&format!("meta {k} {v}\n"));
        }
        for (k, items) in &self.lists {
            check_name(k)?;
            head.push_str(&format!("list {k} {}\n", items.len()));
            for item in items {
                if item.contains('\n') {
                    return Err(bad(format!("list {k} item contains a newline")));
                }
                head.push_str(item);
                head.push('\n');
            }
        }
        let mut offset = 0usize;
        for (k, m) in &self.tensors {
            check_name(k)?;
            head.push_str(&format!("tensor {k} {} {} {offset}\n", m.rows(), m.cols()));
            offset += m.len() * 8;
        }
        head.push_str("end\n");
        let mut bytes = head.into_bytes();
        bytes.reserve(offset);
        for m in self.tensors.values() {
            for v in m.as_slice() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|b| *b == b'\n')
                .ok_or_else(|| bad("truncated manifest"))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("manifest is not UTF-8"))?;
            pos += nl + 1;
            Ok(line)
        };
        if next_line()? != MAGIC {
            return Err(bad("not an mmcap archive"));
        }
        let version = next_line()?;
        if version != format!("version {FORMAT_VERSION}") {
            return Err(bad(format!("unsupported {version:?}")));
        }
        let mut archive = Archive::new();
        let mut declared: Vec<(String, usize, usize, usize)> = Vec::new();
        loop {
            let line = next_line()?.to_string();
            if line == "end" {
                break;
            }
            let (kind, rest) = line.split_once(' ').ok_or_else(|| bad(format!("bad line {line:?}")))?;
            match kind {
                "dim" => {
                    let (k, v) = rest.split_once(' ').ok_or_else(|| bad("bad dim line"))?;
                    let v = v.parse().map_err(|_| bad(format!("bad dim value for {k}")))?;
                    archive.dims.insert(k.to_string(), v);
                }
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    archive.meta.insert(k.to_string(), v.to_string());
                }
                "list" => {
                    let (k, n) = rest.split_once(' ').ok_or_else(|| bad("bad list line"))?;
                    let n: usize = n.parse().map_err(|_| bad(format!("bad list length for {k}")))?;
                    let mut items = Vec::with_capacity(n);
                    for _ in 0..n {
                        items.push(next_line()?.to_string());
                    }
                    archive.lists.insert(k.to_string(), items);
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 4 {
                        return Err(bad(format!("bad tensor line {line:?}")));
                    }
                    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number in {line:?}")));
                    declared.push((f[0].to_string(), parse(f[1])?, parse(f[2])?, parse(f[3])?));
                }
                other => return Err(bad(format!("unknown manifest entry {other:?}"))),
            }
        }
        let blob = &bytes[pos..];
        let mut expected_offset = 0usize;
        for (name, rows, cols, offset) in declared {
            if offset != expected_offset {
                return Err(bad(format!("tensor {name}: offset {offset}, expected {expected_offset}")));
            }
            let n = rows * cols;
            let end = offset + n * 8;
            if end > blob.len() {
                return Err(bad(format!("tensor {name}: data truncated")));
            }
            let values: Vec<f64> = blob[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Matrix::new(rows, cols, values).map_err(|e| bad(format!("tensor {name}: {e}")))?;
            archive.tensors.insert(name, m);
            expected_offset = end;
        }
        if expected_offset != blob.len() {
            return Err(bad(format!(
                "{} trailing bytes after last tensor",
                blob.len() - expected_offset
            )));
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new();
        a.set_dim("K", 2);
        a.set_meta("embed.margin", 0.2);
        a.set_list("embed.vocab", vec!["a".into(), "<unk>".into()]);
        a.insert_tensor("W", Matrix::new(2, 2, vec![1.0, -2.5, 3.0, 1e-300]).unwrap());
        a.insert_tensor("b", Matrix::column(vec![0.5, 0.25]).unwrap());
        a
    }

    #[test]
    fn round_trip() {
        let a = sample();
        let bytes = a.to_bytes().unwrap();
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_bytes().unwrap(), bytes);
        assert_eq!(b.meta_parse::<f64>("embed.margin").unwrap(), 0.2);
        assert!(b.tensor_shaped("W", 2, 1).is_err());
    }

    #[test]
    fn truncation_and_garbage_detected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Archive::from_bytes(&extra).is_err());
        assert!(Archive::from_bytes(b"nope\n").is_err());
    }
}
