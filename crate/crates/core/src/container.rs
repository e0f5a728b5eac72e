//! Binary container shared by model files and dataset caches.
//!
//! Layout: a UTF-8 manifest of `key = value` lines closed by `end_manifest`,
//! then for every array a line `array <name> <rows> <cols>` followed by
//! `rows * cols` little-endian f64 values.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "dbu-container 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        self.arrays.push((name.to_string(), t));
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad_format(format!("missing key {key}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| bad_format(format!("bad value for {key}")))
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| bad_format(format!("missing array {name}")))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{MAGIC}")?;
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Contract(format!("manifest entry {k:?} not representable")));
            }
            writeln!(w, "{k} = {v}")?;
        }
        writeln!(w, "end_manifest")?;
        for (name, t) in &self.arrays {
            if name.contains(char::is_whitespace) {
                return Err(Error::Contract(format!("array name {name:?} has whitespace")));
            }
            writeln!(w, "array {name} {} {}", t.rows(), t.cols())?;
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read, path: &str) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            path: path.into(),
            msg,
        };
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let next_line = |r: &mut BufReader<_>, line: &mut String| -> Result<bool> {
            line.clear();
            let n = r.read_line(line)?;
            if line.ends_with('\n') {
                line.pop();
            }
            Ok(n > 0)
        };
        if !next_line(&mut r, &mut line)? || line != MAGIC {
            return Err(bad("not a dbu container".into()));
        }
        let mut out = Container::new();
        loop {
            if !next_line(&mut r, &mut line)? {
                return Err(bad("manifest not terminated".into()));
            }
            if line == "end_manifest" {
                break;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| bad(format!("bad manifest line {line:?}")))?;
            out.meta.insert(k.to_string(), v.to_string());
        }
        while next_line(&mut r, &mut line)? {
            let parts: Vec<&str> = line.split(' ').collect();
            let [tag, name, rows, cols] = parts[..] else {
                return Err(bad(format!("bad array header {line:?}")));
            };
            if tag != "array" {
                return Err(bad(format!("bad array header {line:?}")));
            }
            let rows: usize = rows.parse().map_err(|_| bad("bad row count".into()))?;
            let cols: usize = cols.parse().map_err(|_| bad("bad column count".into()))?;
            let len = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| bad("array too large".into()))?;
            let mut bytes = vec![0u8; len];
            r.read_exact(&mut bytes)
                .map_err(|_| bad(format!("array {name} truncated")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            out.arrays.push((name.to_string(), Tensor::new(rows, cols, data)?));
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(f, &path.display().to_string())
    }
}

fn bad_format(msg: String) -> Error {
    Error::Format {
        path: Default::default(),
        msg,
    }
}
