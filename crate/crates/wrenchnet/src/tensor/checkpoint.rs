//! Flat-block parameter file: a text header naming every block, then raw
//! little-endian f32 data in declared order. Loading then re-saving an
//! unchanged file reproduces it byte for byte.

use std::io::{BufRead, BufReader, Read, Write};

use super::Tensor;
use crate::{Error, Result};

const MAGIC: &str = "wrenchnet-blocks v1";

/// Parsed block file: ordered header key/value lines plus named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFile {
    pub header: Vec<(String, String)>,
    pub blocks: Vec<(String, Tensor<f32>)>,
}

impl BlockFile {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn block(&self, name: &str) -> Option<&Tensor<f32>> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

/// Writes header lines, a block manifest, `---`, then raw data.
pub fn write_blocks<W: Write>(
    mut w: W,
    header: &[(String, String)],
    blocks: &[(String, &Tensor<f32>)],
) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    for (k, v) in header {
        debug_assert!(!k.contains(char::is_whitespace), "header key {k:?}");
        writeln!(w, "{k} {v}")?;
    }
    for (name, t) in blocks {
        if name.contains(char::is_whitespace) {
            return Err(Error::Format(format!("block name {name:?} has spaces")));
        }
        writeln!(w, "block {name} {} {}", t.rows(), t.cols())?;
    }
    writeln!(w, "---")?;
    let mut buf = Vec::new();
    for (_, t) in blocks {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_blocks<R: Read>(r: R) -> Result<BlockFile> {
    let mut reader = BufReader::new(r);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {MAGIC:?}",
            line.trim_end()
        )));
    }

    let mut header = Vec::new();
    let mut manifest: Vec<(String, usize, usize)> = Vec::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Format("unterminated header".into()));
        }
        let t = line.trim_end();
        if t == "---" {
            break;
        }
        let mut it = t.splitn(2, ' ');
        let key = it.next().unwrap_or("");
        let rest = it.next().unwrap_or("");
        if key == "block" {
            let parts: Vec<&str> = rest.split(' ').collect();
            if parts.len() != 3 {
                return Err(Error::Format(format!("bad block line {t:?}")));
            }
            let rows: usize = parts[1]
                .parse()
                .map_err(|_| Error::Format(format!("bad rows in {t:?}")))?;
            let cols: usize = parts[2]
                .parse()
                .map_err(|_| Error::Format(format!("bad cols in {t:?}")))?;
            manifest.push((parts[0].to_string(), rows, cols));
        } else {
            header.push((key.to_string(), rest.to_string()));
        }
    }

    let mut blocks = Vec::with_capacity(manifest.len());
    for (name, rows, cols) in manifest {
        let mut bytes = vec![0u8; rows * cols * 4];
        reader.read_exact(&mut bytes).map_err(|e| {
            Error::Format(format!("block {name} truncated ({rows}x{cols}): {e}"))
        })?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        blocks.push((name, Tensor::from_vec(rows, cols, data)));
    }
    let mut trailing = Vec::new();
    reader.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(Error::Format(format!(
            "{} unexpected trailing bytes",
            trailing.len()
        )));
    }
    Ok(BlockFile { header, blocks })
}
