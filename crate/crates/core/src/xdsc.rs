//! XDSC v1 descriptor files.
//!
//! Text form: a header line
//! `xdsc 1 <name> <dim> <domain> <metric> <norm> <count>` followed by one
//! record per line, `patch_id` then `dim` values separated by single spaces.
//! Floats are written in shortest round-trip form, so identical matrices
//! always serialize to identical bytes and parsing restores them exactly.
//!
//! Binary form: a fixed 32-byte header
//!
//! | bytes  | content                         |
//! |--------|---------------------------------|
//! | 0..8   | magic `XDSCBIN\0`               |
//! | 8..12  | version, u32 LE (= 1)           |
//! | 12..16 | dim, u32 LE                     |
//! | 16..24 | count, u64 LE                   |
//! | 24     | domain (0 real, 1 binary)       |
//! | 25     | metric (0 l2, 1 hamming)        |
//! | 26     | norm (0 none, 1 unit_l2, 2 nonneg_unit_l2) |
//! | 27     | reserved, 0                     |
//! | 28..32 | name length, u32 LE             |
//!
//! then the UTF-8 name and `count` records of `u64` patch id followed by
//! `dim` little-endian `f32` values.

use crate::descriptor::{AlgorithmSpec, DescriptorMatrix, Domain, Metric, OutputNorm};
use crate::error::{Error, Result};
use ndarray::Array2;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const BINARY_MAGIC: &[u8; 8] = b"XDSCBIN\0";
const FORMAT: &str = "XDSC";

pub fn write_text<W: Write>(m: &DescriptorMatrix, out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    let s = m.spec();
    writeln!(
        w,
        "xdsc 1 {} {} {} {} {} {}",
        s.name(),
        s.dim(),
        s.domain(),
        s.metric(),
        s.output_norm(),
        m.len()
    )?;
    for (id, row) in m.patch_ids().iter().zip(m.values().outer_iter()) {
        write!(w, "{id}")?;
        for v in row {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_text<R: Read>(input: R) -> Result<DescriptorMatrix> {
    let mut lines = BufReader::new(input).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(FORMAT, "header", "empty file"))??;
    let tok: Vec<&str> = header.split_whitespace().collect();
    if tok.len() != 8 || tok[0] != "xdsc" {
        return Err(Error::format(
            FORMAT,
            "header",
            format!("expected 'xdsc 1 <name> <dim> <domain> <metric> <norm> <count>', got '{header}'"),
        ));
    }
    if tok[1] != "1" {
        return Err(Error::format(
            FORMAT,
            "version",
            format!("unsupported version '{}'", tok[1]),
        ));
    }
    let dim: usize = tok[3]
        .parse()
        .map_err(|_| Error::format(FORMAT, "dim", format!("not an integer: '{}'", tok[3])))?;
    let domain: Domain = tok[4]
        .parse()
        .map_err(|e: Error| Error::format(FORMAT, "domain", e.to_string()))?;
    let metric: Metric = tok[5]
        .parse()
        .map_err(|e: Error| Error::format(FORMAT, "metric", e.to_string()))?;
    let norm: OutputNorm = tok[6]
        .parse()
        .map_err(|e: Error| Error::format(FORMAT, "norm", e.to_string()))?;
    let count: usize = tok[7]
        .parse()
        .map_err(|_| Error::format(FORMAT, "count", format!("not an integer: '{}'", tok[7])))?;
    let spec = AlgorithmSpec::new(tok[2], dim, domain, metric, norm)
        .map_err(|e| Error::format(FORMAT, "header", e.to_string()))?;

    let mut ids = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count * dim);
    for r in 0..count {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(FORMAT, format!("record {r}"), format!("expected {count} records")))??;
        let mut fields = line.split_whitespace();
        let id = fields
            .next()
            .and_then(|t| t.parse::<u64>().ok())
            .ok_or_else(|| Error::format(FORMAT, format!("record {r} patch_id"), "missing or invalid"))?;
        ids.push(id);
        let before = values.len();
        for t in fields {
            let v: f32 = t
                .parse()
                .map_err(|_| Error::format(FORMAT, format!("record {r} value"), format!("not a float: '{t}'")))?;
            values.push(v);
        }
        if values.len() - before != dim {
            return Err(Error::format(
                FORMAT,
                format!("record {r}"),
                format!("expected {dim} values, got {}", values.len() - before),
            ));
        }
    }
    if let Some(extra) = lines.next() {
        if !extra?.trim().is_empty() {
            return Err(Error::format(FORMAT, "count", "more records than declared"));
        }
    }
    let values = Array2::from_shape_vec((count, dim), values).expect("shape checked");
    DescriptorMatrix::new(spec, ids, values).map_err(|e| Error::format(FORMAT, "values", e.to_string()))
}

fn domain_code(d: Domain) -> u8 {
    match d {
        Domain::Real => 0,
        Domain::Binary => 1,
    }
}

fn metric_code(m: Metric) -> u8 {
    match m {
        Metric::L2 => 0,
        Metric::Hamming => 1,
    }
}

fn norm_code(n: OutputNorm) -> u8 {
    match n {
        OutputNorm::None => 0,
        OutputNorm::UnitL2 => 1,
        OutputNorm::NonnegUnitL2 => 2,
    }
}

pub fn write_binary<W: Write>(m: &DescriptorMatrix, out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    let s = m.spec();
    let mut header = [0u8; 32];
    header[..8].copy_from_slice(BINARY_MAGIC);
    header[8..12].copy_from_slice(&1u32.to_le_bytes());
    header[12..16].copy_from_slice(&(s.dim() as u32).to_le_bytes());
    header[16..24].copy_from_slice(&(m.len() as u64).to_le_bytes());
    header[24] = domain_code(s.domain());
    header[25] = metric_code(s.metric());
    header[26] = norm_code(s.output_norm());
    header[28..32].copy_from_slice(&(s.name().len() as u32).to_le_bytes());
    w.write_all(&header)?;
    w.write_all(s.name().as_bytes())?;
    for (id, row) in m.patch_ids().iter().zip(m.values().outer_iter()) {
        w.write_all(&id.to_le_bytes())?;
        for v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary(bytes: &[u8]) -> Result<DescriptorMatrix> {
    if bytes.len() < 32 || &bytes[..8] != BINARY_MAGIC {
        return Err(Error::format(FORMAT, "magic", "missing binary XDSC magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != 1 {
        return Err(Error::format(
            FORMAT,
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let dim = u32_at(12) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let domain = match bytes[24] {
        0 => Domain::Real,
        1 => Domain::Binary,
        c => return Err(Error::format(FORMAT, "domain", format!("unknown code {c}"))),
    };
    let metric = match bytes[25] {
        0 => Metric::L2,
        1 => Metric::Hamming,
        c => return Err(Error::format(FORMAT, "metric", format!("unknown code {c}"))),
    };
    let norm = match bytes[26] {
        0 => OutputNorm::None,
        1 => OutputNorm::UnitL2,
        2 => OutputNorm::NonnegUnitL2,
        c => return Err(Error::format(FORMAT, "norm", format!("unknown code {c}"))),
    };
    let name_len = u32_at(28) as usize;
    let body = &bytes[32..];
    if body.len() < name_len {
        return Err(Error::format(FORMAT, "name", "truncated"));
    }
    let name = std::str::from_utf8(&body[..name_len]).map_err(|_| Error::format(FORMAT, "name", "not UTF-8"))?;
    let spec = AlgorithmSpec::new(name, dim, domain, metric, norm)
        .map_err(|e| Error::format(FORMAT, "header", e.to_string()))?;
    let records = &body[name_len..];
    let rec_len = 8 + 4 * dim;
    if records.len() != rec_len * count {
        return Err(Error::format(
            FORMAT,
            "count",
            format!("expected {} record bytes, found {}", rec_len * count, records.len()),
        ));
    }
    let mut ids = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count * dim);
    for rec in records.chunks_exact(rec_len) {
        ids.push(u64::from_le_bytes(rec[..8].try_into().unwrap()));
        values.extend(
            rec[8..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        );
    }
    let values = Array2::from_shape_vec((count, dim), values).expect("shape checked");
    DescriptorMatrix::new(spec, ids, values).map_err(|e| Error::format(FORMAT, "values", e.to_string()))
}

/// Reads either XDSC form, sniffing the binary magic.
pub fn read_bytes(bytes: &[u8]) -> Result<DescriptorMatrix> {
    if bytes.starts_with(BINARY_MAGIC) {
        read_binary(bytes)
    } else {
        read_text(bytes)
    }
}

pub fn load(path: impl AsRef<Path>) -> Result<DescriptorMatrix> {
    let path = path.as_ref();
    let bytes =
        fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read_bytes(&bytes)
}

pub fn save(m: &DescriptorMatrix, path: impl AsRef<Path>, binary: bool) -> Result<()> {
    let file = fs::File::create(path)?;
    if binary {
        write_binary(m, file)
    } else {
        write_text(m, file)
    }
}
