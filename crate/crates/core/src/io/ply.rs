//! PLY subset: `ascii` and `binary_little_endian`, one `vertex` element with
//! `float` x, y, z and optional `uchar` red, green, blue. Other scalar vertex
//! properties are skipped; list properties are rejected.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{Point, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

struct Header {
    binary: bool,
    vertices: usize,
    props: Vec<(String, Scalar)>,
    body: usize,
}

fn err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Ply {
        offset,
        msg: msg.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut binary = None;
    let mut vertices = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    loop {
        let start = pos;
        let Some(len) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(err(start, "header not terminated by end_header"));
        };
        pos += len + 1;
        let line = std::str::from_utf8(&bytes[start..start + len])
            .map_err(|_| err(start, "header is not UTF-8"))?
            .trim_end_matches('\r');
        let words: Vec<&str> = line.split_whitespace().collect();
        if line_no == 0 {
            if line != "ply" {
                return Err(err(start, "missing `ply` magic"));
            }
            line_no += 1;
            continue;
        }
        line_no += 1;
        match words.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", kind, "1.0"] => {
                binary = Some(match *kind {
                    "ascii" => false,
                    "binary_little_endian" => true,
                    other => return Err(err(start, format!("unsupported format `{other}`"))),
                });
            }
            ["element", name, count] => {
                let n: usize = count.parse().map_err(|_| err(start, format!("bad element count `{count}`")))?;
                if *name == "vertex" {
                    if vertices.is_some() {
                        return Err(err(start, "duplicate vertex element"));
                    }
                    vertices = Some(n);
                    in_vertex = true;
                } else if vertices.is_none() {
                    return Err(err(start, format!("element `{name}` before vertex is unsupported")));
                } else {
                    // Trailing elements are ignored.
                    in_vertex = false;
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(err(start, "list properties on vertex are unsupported"));
            }
            ["property", ty, name] if in_vertex => {
                let t = Scalar::parse(ty).ok_or_else(|| err(start, format!("unsupported property type `{ty}`")))?;
                props.push((name.to_string(), t));
            }
            ["property", ..] if !in_vertex => {}
            ["end_header"] => break,
            _ => return Err(err(start, format!("malformed header line `{line}`"))),
        }
    }
    let binary = binary.ok_or_else(|| err(0, "missing format line"))?;
    let vertices = vertices.ok_or_else(|| err(0, "missing vertex element"))?;
    for axis in ["x", "y", "z"] {
        match props.iter().find(|(n, _)| n == axis) {
            Some((_, Scalar::F32)) => {}
            Some(_) => return Err(err(0, format!("property `{axis}` must be float"))),
            None => return Err(err(0, format!("missing property `{axis}`"))),
        }
    }
    let colors = ["red", "green", "blue"].map(|c| props.iter().find(|(n, _)| n == c).map(|p| p.1));
    if colors.iter().any(|c| c.is_some()) && colors.iter().any(|c| *c != Some(Scalar::U8)) {
        return Err(err(0, "red, green, blue must all be present as uchar"));
    }
    Ok(Header {
        binary,
        vertices,
        props,
        body: pos,
    })
}

fn read_binary(b: &[u8], t: Scalar) -> f64 {
    match t {
        Scalar::I8 => b[0] as i8 as f64,
        Scalar::U8 => b[0] as f64,
        Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
        Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
        Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
    }
}

fn parse_ascii(t: Scalar, word: &str) -> Option<f64> {
    match t {
        Scalar::F32 => word.parse::<f32>().ok().map(f64::from),
        Scalar::F64 => word.parse::<f64>().ok(),
        Scalar::U8 => word.parse::<u8>().ok().map(f64::from),
        Scalar::I8 => word.parse::<i8>().ok().map(f64::from),
        Scalar::I16 => word.parse::<i16>().ok().map(f64::from),
        Scalar::U16 => word.parse::<u16>().ok().map(f64::from),
        Scalar::I32 => word.parse::<i32>().ok().map(f64::from),
        Scalar::U32 => word.parse::<u32>().ok().map(f64::from),
    }
}

/// Parses a PLY document. Colors become auxiliary channels `c / 255`.
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let h = parse_header(bytes)?;
    let idx = |name: &str| h.props.iter().position(|(n, _)| n == name);
    let xyz = [idx("x"), idx("y"), idx("z")].map(|i| i.expect("checked in header"));
    let rgb = [idx("red"), idx("green"), idx("blue")];
    let has_rgb = rgb[0].is_some();

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(h.vertices.min(1 << 20));
    if h.binary {
        let stride: usize = h.props.iter().map(|p| p.1.size()).sum();
        let offsets: Vec<usize> = h
            .props
            .iter()
            .scan(0, |acc, p| {
                let o = *acc;
                *acc += p.1.size();
                Some(o)
            })
            .collect();
        let need = h.vertices.checked_mul(stride).ok_or_else(|| err(h.body, "vertex count overflows"))?;
        if bytes.len() - h.body < need {
            let complete = (bytes.len() - h.body) / stride;
            return Err(err(
                h.body + complete * stride,
                format!("truncated payload: {} of {} vertices present", complete, h.vertices),
            ));
        }
        for v in 0..h.vertices {
            let base = h.body + v * stride;
            rows.push(
                h.props
                    .iter()
                    .zip(&offsets)
                    .map(|(p, o)| read_binary(&bytes[base + o..], p.1))
                    .collect(),
            );
        }
    } else {
        let mut pos = h.body;
        for v in 0..h.vertices {
            // Skip blank lines between records.
            let (start, line) = loop {
                if pos >= bytes.len() {
                    return Err(err(pos, format!("truncated payload: {v} of {} vertices present", h.vertices)));
                }
                let start = pos;
                let len = bytes[pos..].iter().position(|&b| b == b'\n').unwrap_or(bytes.len() - pos);
                pos += len + 1;
                let line = std::str::from_utf8(&bytes[start..start + len]).map_err(|_| err(start, "vertex line is not UTF-8"))?;
                if !line.trim().is_empty() {
                    break (start, line);
                }
            };
            let words: Vec<&str> = line.split_whitespace().collect();
            if words.len() != h.props.len() {
                return Err(err(start, format!("expected {} values, found {}", h.props.len(), words.len())));
            }
            let row = h
                .props
                .iter()
                .zip(&words)
                .map(|(p, w)| parse_ascii(p.1, w).ok_or_else(|| err(start, format!("bad value `{w}` for `{}`", p.0))))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
    }

    let points = rows.iter().map(|r| Point::new(r[xyz[0]], r[xyz[1]], r[xyz[2]])).collect();
    if has_rgb {
        let aux = rows
            .iter()
            .flat_map(|r| rgb.map(|i| r[i.expect("all colors present")] / 255.0))
            .collect();
        PointCloud::with_aux(points, aux, 3)
    } else {
        Ok(PointCloud::new(points))
    }
}

fn color_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Serializes `cloud`. Coordinates are stored as `f32`; three auxiliary
/// channels, if present, are stored as rounded `uchar` colors.
pub fn encode_ply(cloud: &PointCloud, encoding: PlyEncoding) -> Result<Vec<u8>> {
    cloud.validate()?;
    let rgb = match cloud.aux_channels() {
        0 => false,
        3 => true,
        c => return Err(Error::InvalidArgument(format!("ply stores 0 or 3 auxiliary channels, cloud has {c}"))),
    };
    let format = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    let mut out = format!(
        "ply\nformat {format} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n",
        cloud.len()
    );
    if rgb {
        out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    out.push_str("end_header\n");
    let mut bytes = out.into_bytes();
    for (i, p) in cloud.points.iter().enumerate() {
        let xyz = [p.x as f32, p.y as f32, p.z as f32];
        let colors: Vec<u8> = if rgb {
            cloud.aux_row(i).iter().map(|&v| color_byte(v)).collect()
        } else {
            Vec::new()
        };
        match encoding {
            PlyEncoding::BinaryLittleEndian => {
                for v in xyz {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                bytes.extend_from_slice(&colors);
            }
            PlyEncoding::Ascii => {
                let mut line = format!("{} {} {}", xyz[0], xyz[1], xyz[2]);
                for c in colors {
                    line.push_str(&format!(" {c}"));
                }
                line.push('\n');
                bytes.extend_from_slice(line.as_bytes());
            }
        }
    }
    Ok(bytes)
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    parse_ply(&fs::read(path)?)
}

pub fn write_ply(cloud: &PointCloud, path: &Path, encoding: PlyEncoding) -> Result<()> {
    fs::write(path, encode_ply(cloud, encoding)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three() -> PointCloud {
        PointCloud::new(vec![
            Point::new(0.0, 0.0, 0.0),
            Point::new(1.5, -2.25, 3.125),
            Point::new(f32::MAX as f64, f32::MIN_POSITIVE as f64, -0.1f32 as f64),
        ])
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let c = three();
        let back = parse_ply(&encode_ply(&c, PlyEncoding::BinaryLittleEndian).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn ascii_round_trip_is_exact_for_f32_values() {
        let c = three();
        let back = parse_ply(&encode_ply(&c, PlyEncoding::Ascii).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn colors_map_to_unit_channels() {
        let aux = vec![0.0, 1.0, 51.0 / 255.0];
        let c = PointCloud::with_aux(vec![Point::new(1.0, 2.0, 3.0)], aux.clone(), 3).unwrap();
        for enc in [PlyEncoding::Ascii, PlyEncoding::BinaryLittleEndian] {
            let back = parse_ply(&encode_ply(&c, enc).unwrap()).unwrap();
            assert_eq!(back.aux(), aux.as_slice());
        }
    }

    #[test]
    fn minimal_ascii_fixture() {
        let doc = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";
        let c = parse_ply(doc).unwrap();
        assert_eq!(c.points, vec![Point::zeros()]);
        assert_eq!(c.aux_channels(), 0);
    }

    #[test]
    fn extra_properties_and_trailing_elements_are_tolerated() {
        let doc = b"ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty float x\nproperty double nx\nproperty float y\nproperty float z\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n1 9 2 3\n4 9 5 6\n";
        let c = parse_ply(doc).unwrap();
        assert_eq!(c.points[1], Point::new(4.0, 5.0, 6.0));
    }

    #[test]
    fn truncation_reports_the_offset() {
        let mut c = three();
        c.points.extend([Point::zeros(), Point::zeros()]);
        let bytes = encode_ply(&c, PlyEncoding::BinaryLittleEndian).unwrap();
        let cut = bytes.len() - 2 * 12;
        match parse_ply(&bytes[..cut]) {
            Err(Error::Ply { offset, msg }) => {
                assert_eq!(offset, cut);
                assert!(msg.contains("3 of 5"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        let ascii = b"ply\nformat ascii 1.0\nelement vertex 5\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 1 1\n2 2 2\n";
        assert!(matches!(parse_ply(ascii), Err(Error::Ply { offset, .. }) if offset == ascii.len()));
    }

    #[test]
    fn malformed_headers_are_rejected() {
        let cases: [&[u8]; 5] = [
            b"plx\n",
            b"ply\nformat binary_big_endian 1.0\nend_header\n",
            b"ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nproperty float y\nproperty float z\nend_header\n0 0 0\n",
            b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n",
            b"ply\nformat ascii 1.0\nelement vertex 1\nproperty int128 x\nend_header\n",
        ];
        for c in cases {
            assert!(matches!(parse_ply(c), Err(Error::Ply { .. })), "{:?}", String::from_utf8_lossy(c));
        }
        let bad_value = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 zero 0\n";
        let line = bad_value.len() - b"0 zero 0\n".len();
        assert!(matches!(parse_ply(bad_value), Err(Error::Ply { offset, .. }) if offset == line));
    }
}
