//! File formats: atomic writes, 16-bit binary PGM, ASCII PLY tables and
//! correspondence JSON.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Raw 16-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray16 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], IoError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(IoError::Parse("truncated PGM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn pgm_number(bytes: &[u8], pos: &mut usize) -> Result<usize, IoError> {
    let tok = pgm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| IoError::Parse(format!("bad PGM header field {:?}", String::from_utf8_lossy(tok))))
}

/// Parses a binary (`P5`) PGM. Samples are big-endian when `maxval > 255`.
pub fn parse_pgm(bytes: &[u8]) -> Result<Gray16, IoError> {
    let mut pos = 0;
    if pgm_token(bytes, &mut pos)? != b"P5" {
        return Err(IoError::Parse("not a binary PGM (P5)".into()));
    }
    let width = pgm_number(bytes, &mut pos)?;
    let height = pgm_number(bytes, &mut pos)?;
    let maxval = pgm_number(bytes, &mut pos)?;
    if maxval == 0 || maxval > 65535 {
        return Err(IoError::Parse(format!("PGM maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| IoError::Parse(format!("PGM raster needs {need} bytes")))?;
    let data = if wide {
        raster
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect()
    } else {
        raster.iter().map(|&b| b as u16).collect()
    };
    Ok(Gray16 { width, height, data })
}

pub fn encode_pgm16(img: &Gray16) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for v in &img.data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

/// A table of named float columns, read from or written to ASCII PLY.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyTable {
    pub properties: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl PlyTable {
    pub fn new(properties: Vec<String>) -> Self {
        Self {
            properties,
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.properties.iter().position(|p| p == name)
    }

    /// Index of a required column.
    pub fn require(&self, name: &str) -> Result<usize, IoError> {
        self.column(name)
            .ok_or_else(|| IoError::Parse(format!("PLY has no property {name}")))
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.properties.len());
        self.rows.push(row);
    }

    /// ASCII PLY with one `vertex` element. `r`, `g`, `b` columns are typed
    /// `uchar` and scaled from `[0, 1]`; every other column is `double`.
    pub fn to_ply(&self, comments: &[String]) -> String {
        let is_color = |p: &str| matches!(p, "red" | "green" | "blue");
        let mut s = String::from("ply\nformat ascii 1.0\n");
        for c in comments {
            s.push_str(&format!("comment {c}\n"));
        }
        s.push_str(&format!("element vertex {}\n", self.rows.len()));
        for p in &self.properties {
            let ty = if is_color(p) { "uchar" } else { "double" };
            s.push_str(&format!("property {ty} {p}\n"));
        }
        s.push_str("end_header\n");
        for row in &self.rows {
            let mut first = true;
            for (v, p) in row.iter().zip(&self.properties) {
                if !first {
                    s.push(' ');
                }
                first = false;
                if is_color(p) {
                    s.push_str(&format!("{}", (v.clamp(0.0, 1.0) * 255.0).round() as u8));
                } else {
                    // shortest round-trip representation
                    s.push_str(&format!("{v:?}"));
                }
            }
            s.push('\n');
        }
        s
    }

    /// Parses the first element of an ASCII PLY; colour columns come back in `[0, 1]`.
    pub fn from_ply(text: &str) -> Result<Self, IoError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("ply") {
            return Err(IoError::Parse("missing ply magic".into()));
        }
        let mut count = None;
        let mut properties = Vec::new();
        let mut uchar = Vec::new();
        let mut in_first = false;
        for line in lines.by_ref() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["format", fmt, ..] if *fmt != "ascii" => {
                    return Err(IoError::Parse(format!("unsupported PLY format {fmt}")))
                }
                ["element", _, n] => {
                    if count.is_some() {
                        in_first = false;
                        continue;
                    }
                    count = Some(
                        n.parse::<usize>()
                            .map_err(|_| IoError::Parse(format!("bad element count {n}")))?,
                    );
                    in_first = true;
                }
                ["property", "list", ..] if in_first => {
                    return Err(IoError::Parse("list properties are not supported".into()))
                }
                ["property", ty, name] if in_first => {
                    properties.push(name.to_string());
                    uchar.push(*ty == "uchar" || *ty == "uint8");
                }
                ["end_header"] => break,
                _ => {}
            }
        }
        let count = count.ok_or_else(|| IoError::Parse("PLY has no element".into()))?;
        let mut rows = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines
                .next()
                .ok_or_else(|| IoError::Parse(format!("PLY ends before {count} rows")))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| IoError::Parse(format!("bad PLY value: {e}")))?;
            if vals.len() != properties.len() {
                return Err(IoError::Parse(format!(
                    "PLY row has {} values, header declares {}",
                    vals.len(),
                    properties.len()
                )));
            }
            let row = vals
                .into_iter()
                .zip(&uchar)
                .map(|(v, &u)| if u { v / 255.0 } else { v })
                .collect();
            rows.push(row);
        }
        Ok(Self { properties, rows })
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        Self::from_ply(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path, comments: &[String]) -> Result<(), IoError> {
        write_atomic(path, self.to_ply(comments).as_bytes())?;
        Ok(())
    }
}

/// On-disk form of a correspondence set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondencesJson {
    pub source: Vec<[f64; 3]>,
    pub target: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl CorrespondencesJson {
    pub fn into_correspondences(self) -> Result<crate::Correspondences, crate::geometry::GeometryError> {
        use nalgebra::Vector3;
        let v = |p: Vec<[f64; 3]>| p.into_iter().map(Vector3::from).collect::<Vec<_>>();
        crate::Correspondences::new(v(self.source), v(self.target), self.weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm16_round_trip() {
        let img = Gray16 {
            width: 3,
            height: 2,
            data: vec![0, 1, 255, 256, 20000, 65535],
        };
        assert_eq!(parse_pgm(&encode_pgm16(&img)).unwrap(), img);
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n# depth\n65535\n".to_vec();
        bytes.extend_from_slice(&[0x01, 0x00, 0x00, 0x02]);
        let img = parse_pgm(&bytes).unwrap();
        assert_eq!(img.data, vec![256, 2]);
    }

    #[test]
    fn truncated_pgm_is_rejected() {
        assert!(parse_pgm(b"P5\n4 4\n65535\n\x00\x01").is_err());
        assert!(parse_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn ply_round_trip_preserves_doubles_exactly() {
        let mut t = PlyTable::new(vec!["x".into(), "y".into(), "z".into(), "label".into()]);
        t.push(vec![0.1, -2.0 / 3.0, 1e-17, 2.0]);
        t.push(vec![std::f64::consts::PI, 0.0, -0.0, 0.0]);
        let back = PlyTable::from_ply(&t.to_ply(&["test".into()])).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn ply_colors_are_quantised_to_uchar() {
        let mut t = PlyTable::new(vec!["x".into(), "red".into()]);
        t.push(vec![1.0, 1.0]);
        let back = PlyTable::from_ply(&t.to_ply(&[])).unwrap();
        assert_eq!(back.rows[0], vec![1.0, 1.0]);
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
