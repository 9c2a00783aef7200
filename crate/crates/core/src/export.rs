//! PLY point clouds, the viridis colormap and flat little-endian array files.

use std::fs;
use std::io::{BufRead, BufReader, Cursor, Read, Write};
use std::path::Path;

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

/// Vertices with colors and an optional scalar `value` per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[u8; 3]>,
    pub values: Option<Vec<f64>>,
}

impl PlyCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.colors.len() != self.points.len() || self.values.as_ref().is_some_and(|v| v.len() != self.points.len()) {
            return Err(Error::Ply("points, colors and values must have equal length".into()));
        }
        Ok(())
    }
}

pub fn encode_ply(cloud: &PlyCloud, format: PlyFormat) -> Result<Vec<u8>> {
    cloud.check()?;
    let mut out = Vec::new();
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    write!(out, "ply\nformat {fmt} 1.0\nelement vertex {}\n", cloud.len()).unwrap();
    out.extend_from_slice(
        b"property double x\nproperty double y\nproperty double z\n\
          property uchar red\nproperty uchar green\nproperty uchar blue\n",
    );
    if cloud.values.is_some() {
        out.extend_from_slice(b"property double value\n");
    }
    out.extend_from_slice(b"end_header\n");
    for i in 0..cloud.len() {
        let p = cloud.points[i];
        let c = cloud.colors[i];
        let v = cloud.values.as_ref().map(|v| v[i]);
        match format {
            PlyFormat::Ascii => {
                write!(out, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]).unwrap();
                if let Some(v) = v {
                    write!(out, " {v}").unwrap();
                }
                out.push(b'\n');
            }
            PlyFormat::BinaryLittleEndian => {
                for x in p {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                out.extend_from_slice(&c);
                if let Some(v) = v {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

pub fn write_ply(path: impl AsRef<Path>, cloud: &PlyCloud, format: PlyFormat) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ply(cloud, format)?).at(path)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::Ply(format!("unsupported property type {other:?}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Reads the vertex element of an ASCII or little-endian binary PLY.
///
/// `x`, `y`, `z` are required; `red`, `green`, `blue` default to 0 and
/// `value` is read when present. Other vertex properties are skipped.
pub fn decode_ply(bytes: &[u8]) -> Result<PlyCloud> {
    let mut reader = BufReader::new(Cursor::new(bytes));
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<Cursor<&[u8]>>| -> Result<String> {
        line.clear();
        if reader.read_line(&mut line).map_err(|e| Error::Ply(e.to_string()))? == 0 {
            return Err(Error::Ply("unexpected end of header".into()));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut reader)? != "ply" {
        return Err(Error::Ply("missing 'ply' magic".into()));
    }
    let mut format = None;
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    loop {
        let l = next_line(&mut reader)?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", other, ..] => return Err(Error::Ply(format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(Error::Ply("vertex must be the first element".into()));
                }
                count = Some(n.parse::<usize>().map_err(|_| Error::Ply(format!("bad vertex count {n}")))?);
                in_vertex = true;
            }
            ["element", ..] => {
                if count.is_none() {
                    return Err(Error::Ply("vertex must be the first element".into()));
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => return Err(Error::Ply("list properties on vertices are unsupported".into())),
            ["property", ty, name] if in_vertex => props.push((name.to_string(), Scalar::parse(ty)?)),
            ["property", ..] => {}
            _ => return Err(Error::Ply(format!("unexpected header line {l:?}"))),
        }
    }
    let format = format.ok_or_else(|| Error::Ply("missing format line".into()))?;
    let count = count.ok_or_else(|| Error::Ply("missing vertex element".into()))?;
    let find = |n: &str| props.iter().position(|(p, _)| p == n);
    let xyz = [find("x"), find("y"), find("z")];
    if xyz.iter().any(Option::is_none) {
        return Err(Error::Ply("vertex needs x, y and z".into()));
    }
    let rgb = [find("red"), find("green"), find("blue")];
    let value = find("value");

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    match format {
        PlyFormat::Ascii => {
            let mut body = String::new();
            reader.read_to_string(&mut body).map_err(|e| Error::Ply(e.to_string()))?;
            let mut lines = body.lines().filter(|l| !l.trim().is_empty());
            for i in 0..count {
                let l = lines.next().ok_or_else(|| Error::Ply(format!("missing vertex {i}")))?;
                let row = l
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| Error::Ply(format!("bad number {t:?} in vertex {i}"))))
                    .collect::<Result<Vec<_>>>()?;
                if row.len() != props.len() {
                    return Err(Error::Ply(format!("vertex {i} has {} fields, expected {}", row.len(), props.len())));
                }
                rows.push(row);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = props.iter().map(|p| p.1.size()).sum();
            let mut buf = vec![0u8; stride];
            for i in 0..count {
                reader
                    .read_exact(&mut buf)
                    .map_err(|_| Error::Ply(format!("truncated at vertex {i}")))?;
                let mut off = 0;
                rows.push(
                    props
                        .iter()
                        .map(|(_, t)| {
                            let v = t.read_le(&buf[off..]);
                            off += t.size();
                            v
                        })
                        .collect(),
                );
            }
        }
    }
    let pick = |r: &[f64], i: Option<usize>| i.map_or(0.0, |i| r[i]);
    Ok(PlyCloud {
        points: rows.iter().map(|r| [pick(r, xyz[0]), pick(r, xyz[1]), pick(r, xyz[2])]).collect(),
        colors: rows
            .iter()
            .map(|r| rgb.map(|c| pick(r, c).clamp(0.0, 255.0) as u8))
            .collect(),
        values: value.map(|v| rows.iter().map(|r| r[v]).collect()),
    })
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PlyCloud> {
    let path = path.as_ref();
    decode_ply(&fs::read(path).at(path)?)
}

const VIRIDIS: [[u8; 3]; 10] = [
    [68, 1, 84],
    [72, 40, 120],
    [62, 73, 137],
    [49, 104, 142],
    [38, 130, 142],
    [31, 158, 137],
    [53, 183, 121],
    [110, 206, 88],
    [181, 222, 43],
    [253, 231, 37],
];

/// Viridis color for `t` in `[0, 1]` (clamped), linearly interpolated.
pub fn viridis(t: f64) -> [u8; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [0, 1, 2].map(|c| (a[c] as f64 + f * (b[c] as f64 - a[c] as f64)).round() as u8)
}

/// Viridis colors for `values` scaled to their own min-max range.
pub fn colormap(values: &[f64]) -> Vec<[u8; 3]> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    values
        .iter()
        .map(|&v| viridis(if range > 0.0 { (v - lo) / range } else { 0.0 }))
        .collect()
}

pub fn write_f32s(path: impl AsRef<Path>, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = values.into_iter().flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).at(path)
}

pub fn read_f32s(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).at(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::MissingArtifact(format!("{} is not a whole number of f32 values", path.display())));
    }
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect())
}

pub fn write_u32s(path: impl AsRef<Path>, values: &[u32]) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).at(path)
}

pub fn read_u32s(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).at(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::MissingArtifact(format!("{} is not a whole number of u32 values", path.display())));
    }
    Ok(bytes.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PlyCloud {
        PlyCloud {
            points: vec![[0.1, -2.5, 1e-17], [3.0, 0.0, f64::MAX], [1.0 / 3.0, 2.0, -0.0]],
            colors: vec![[0, 128, 255], [1, 2, 3], [9, 9, 9]],
            values: Some(vec![1000.0, 0.123456789012345, -7.0]),
        }
    }

    #[test]
    fn round_trips_both_formats() {
        for f in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let bytes = encode_ply(&sample(), f).unwrap();
            assert_eq!(decode_ply(&bytes).unwrap(), sample());
        }
        let mut bare = sample();
        bare.values = None;
        let bytes = encode_ply(&bare, PlyFormat::Ascii).unwrap();
        assert_eq!(decode_ply(&bytes).unwrap(), bare);
    }

    #[test]
    fn header_layout() {
        let text = String::from_utf8(encode_ply(&sample(), PlyFormat::Ascii).unwrap()).unwrap();
        let header: Vec<&str> = text.lines().take(11).collect();
        assert_eq!(
            header,
            [
                "ply",
                "format ascii 1.0",
                "element vertex 3",
                "property double x",
                "property double y",
                "property double z",
                "property uchar red",
                "property uchar green",
                "property uchar blue",
                "property double value",
                "end_header"
            ]
        );
    }

    #[test]
    fn reads_foreign_layouts() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\ncomment x\nelement vertex 1\nproperty float z\nproperty uchar alpha\nproperty float x\nproperty float y\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n".to_vec();
        {
            let v = 3.0f32;
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.push(7);
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        let c = decode_ply(&bytes).unwrap();
        assert_eq!(c.points, vec![[1.0, 2.0, 3.0]]);
        assert_eq!(c.colors, vec![[0, 0, 0]]);
        assert_eq!(c.values, None);
    }

    #[test]
    fn rejects_broken_files() {
        assert!(decode_ply(b"plx\n").is_err());
        assert!(decode_ply(b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n").is_err());
        assert!(decode_ply(b"ply\nformat binary_big_endian 1.0\nend_header\n").is_err());
        let mut truncated = encode_ply(&sample(), PlyFormat::BinaryLittleEndian).unwrap();
        truncated.pop();
        assert!(decode_ply(&truncated).is_err());
        let mut bad = sample();
        bad.colors.pop();
        assert!(encode_ply(&bad, PlyFormat::Ascii).is_err());
    }

    #[test]
    fn viridis_ends() {
        assert_eq!(viridis(0.0), [68, 1, 84]);
        assert_eq!(viridis(1.0), [253, 231, 37]);
        assert_eq!(viridis(-3.0), [68, 1, 84]);
        assert_eq!(viridis(f64::NAN), [68, 1, 84]);
        assert_eq!(colormap(&[5.0, 5.0]), vec![[68, 1, 84]; 2]);
        assert_eq!(colormap(&[1.0, 3.0])[1], [253, 231, 37]);
    }

    #[test]
    fn streams_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("v.f32");
        write_f32s(&f, [1.5, -2.25, 1e10]).unwrap();
        assert_eq!(read_f32s(&f).unwrap(), vec![1.5, -2.25, 1e10f32 as f64]);
        let u = dir.path().join("v.u32");
        write_u32s(&u, &[0, 7, u32::MAX]).unwrap();
        assert_eq!(read_u32s(&u).unwrap(), vec![0, 7, u32::MAX]);
        fs::write(&u, [1u8, 2, 3]).unwrap();
        assert!(read_u32s(&u).is_err());
    }
}
