//! Bit-stable report writing: 17 significant digits, fixed key order, and a
//! header carrying the resolved configuration and its hash.

use std::io;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// JSON formatter printing every float with 17 significant digits.
struct Json17;

impl serde_json::ser::Formatter for Json17 {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(fmt_f64(value).as_bytes())
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        writer.write_all(fmt_f64(value as f64).as_bytes())
    }
}

/// `1.2345678901234567e-3` style; non-finite values as `nan`, `inf`, `-inf`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

/// Compact single-line JSON. Non-finite floats become `null`.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Json17);
    value.serialize(&mut ser).expect("in-memory serialization");
    String::from_utf8(buf).expect("serde_json writes UTF-8")
}

#[derive(Serialize)]
pub struct Header {
    pub version: &'static str,
    pub config_sha256: String,
    pub config: RunConfig,
}

impl Header {
    /// The output path is not part of the embedded configuration, so the
    /// same run written to two places produces identical bytes.
    pub fn new(config: &RunConfig) -> Header {
        let mut config = config.clone();
        config.out = None;
        let canonical = to_json(&config);
        let digest = Sha256::digest(format!("{}\n{canonical}", env!("CARGO_PKG_VERSION")).as_bytes());
        Header {
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
            config,
        }
    }
}

#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    header: &'a Header,
    result: &'a T,
}

pub fn json_document<T: Serialize>(header: &Header, result: &T) -> String {
    let mut s = to_json(&Document { header, result });
    s.push('\n');
    s
}

#[derive(Serialize)]
struct HeaderLine<'a> {
    header: &'a Header,
}

/// Header line followed by one JSON value per line.
pub fn jsonl_document<T: Serialize>(header: &Header, records: &[T]) -> String {
    let mut s = to_json(&HeaderLine { header });
    s.push('\n');
    for r in records {
        s.push_str(&to_json(r));
        s.push('\n');
    }
    s
}

pub enum Cell {
    Float(f64),
    Int(i64),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Float(v) => fmt_f64(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Empty => String::new(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Cell {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Cell {
        Cell::Int(v as i64)
    }
}

/// `#`-prefixed header lines, then the column row, then data rows.
pub fn csv_document(header: &Header, columns: &[String], rows: &[Vec<Cell>]) -> String {
    let mut s = String::new();
    s.push_str(&format!("# version {}\n", header.version));
    s.push_str(&format!("# config_sha256 {}\n", header.config_sha256));
    s.push_str(&format!("# config {}\n", to_json(&header.config)));
    s.push_str(&columns.join(","));
    s.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(Cell::render).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_have_seventeen_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02e23, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(to_json(&vec![1.5, f64::NAN, f64::INFINITY]), "[1.5000000000000000e0,null,null]");
    }

    #[test]
    fn header_hash_ignores_output_path() {
        let a = RunConfig { kappa: Some(0.5), out: Some("a.json".into()), ..RunConfig::default() };
        let b = RunConfig { kappa: Some(0.5), out: Some("b.json".into()), ..RunConfig::default() };
        assert_eq!(Header::new(&a).config_sha256, Header::new(&b).config_sha256);
        let c = RunConfig { kappa: Some(0.6), ..RunConfig::default() };
        assert_ne!(Header::new(&a).config_sha256, Header::new(&c).config_sha256);
    }
}
