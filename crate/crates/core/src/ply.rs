//! PLY serialization.
//!
//! Gaussian clouds use the common splatting vertex layout
//! (`x y z nx ny nz f_dc_0..2 opacity scale_0..2 rot_0..3`), binary little
//! endian. Raw, pre-activation values are stored. Point PLYs (positions with
//! optional colors) are read in ascii or binary little-endian form.

use std::io::Write;

use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;

pub const GAUSSIAN_PROPERTIES: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0",
    "rot_1", "rot_2", "rot_3",
];

/// Scalar width used when writing a Gaussian PLY.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyPrecision {
    /// `double` properties; round-trips the in-memory cloud bit for bit.
    #[default]
    Double,
    /// `float` properties, the width most external viewers expect.
    Float,
}

pub fn save_ply(cloud: &GaussianCloud) -> Vec<u8> {
    save_ply_with(cloud, PlyPrecision::Double)
}

pub fn save_ply_with(cloud: &GaussianCloud, precision: PlyPrecision) -> Vec<u8> {
    let ty = match precision {
        PlyPrecision::Double => "double",
        PlyPrecision::Float => "float",
    };
    let mut out = Vec::new();
    write!(out, "ply\nformat binary_little_endian 1.0\nelement vertex {}\n", cloud.len()).unwrap();
    for name in GAUSSIAN_PROPERTIES {
        writeln!(out, "property {ty} {name}").unwrap();
    }
    out.extend_from_slice(b"end_header\n");
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let c = cloud.colors[i];
        let s = cloud.log_scales[i];
        let r = cloud.rotations[i];
        let row = [
            p[0], p[1], p[2], 0.0, 0.0, 0.0, c[0], c[1], c[2], cloud.opacity_logits[i], s[0], s[1], s[2], r[0], r[1], r[2],
            r[3],
        ];
        for v in row {
            match precision {
                PlyPrecision::Double => out.extend_from_slice(&v.to_le_bytes()),
                PlyPrecision::Float => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
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

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
struct Header {
    format: Format,
    vertex_count: usize,
    properties: Vec<(String, ScalarType)>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    const END: &[u8] = b"end_header";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::PlyHeader("missing end_header".into()))?;
    let mut body_offset = end + END.len();
    if bytes.get(body_offset) == Some(&b'\r') {
        body_offset += 1;
    }
    if bytes.get(body_offset) != Some(&b'\n') {
        return Err(Error::PlyHeader("end_header not terminated by a newline".into()));
    }
    body_offset += 1;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::PlyHeader("header is not utf-8".into()))?;
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some("ply") {
        return Err(Error::PlyHeader("missing `ply` magic".into()));
    }

    let mut format = None;
    let mut vertex_count = None;
    let mut properties = Vec::new();
    let mut in_vertex = false;
    let mut seen_other_element = false;
    for line in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", f, _version] => {
                format = Some(match *f {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLe,
                    other => return Err(Error::PlyHeader(format!("unsupported format `{other}`"))),
                })
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                if vertex_count.is_some() || seen_other_element {
                    return Err(Error::PlyHeader("vertex element must come first and only once".into()));
                }
                vertex_count =
                    Some(n.parse::<usize>().map_err(|_| Error::PlyHeader(format!("bad vertex count `{n}`")))?);
                in_vertex = true;
            }
            ["element", ..] => {
                seen_other_element = true;
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::PlyProperties("list properties on vertices are not supported".into()))
            }
            ["property", ty, name] if in_vertex => {
                let ty = ScalarType::parse(ty)
                    .ok_or_else(|| Error::PlyProperties(format!("unknown property type `{ty}`")))?;
                properties.push((name.to_string(), ty));
            }
            ["property", ..] => {}
            _ => return Err(Error::PlyHeader(format!("unrecognized header line `{line}`"))),
        }
    }
    Ok(Header {
        format: format.ok_or_else(|| Error::PlyHeader("missing format line".into()))?,
        vertex_count: vertex_count.ok_or_else(|| Error::PlyHeader("missing vertex element".into()))?,
        properties,
        body_offset,
    })
}

/// Vertex rows, one `Vec` of property values per vertex.
fn read_rows(bytes: &[u8], header: &Header) -> Result<Vec<Vec<f64>>> {
    let body = &bytes[header.body_offset..];
    let nprops = header.properties.len();
    match header.format {
        Format::BinaryLe => {
            let stride: usize = header.properties.iter().map(|(_, t)| t.size()).sum();
            let expected = stride * header.vertex_count;
            if body.len() < expected {
                return Err(Error::PlyTruncated { expected, found: body.len() });
            }
            let mut rows = Vec::with_capacity(header.vertex_count);
            for chunk in body[..expected].chunks_exact(stride.max(1)).take(header.vertex_count) {
                let mut off = 0;
                let mut row = Vec::with_capacity(nprops);
                for (_, ty) in &header.properties {
                    row.push(ty.read_le(&chunk[off..]));
                    off += ty.size();
                }
                rows.push(row);
            }
            Ok(rows)
        }
        Format::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| Error::PlyBody("ascii body is not utf-8".into()))?;
            let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
            let mut rows = Vec::with_capacity(header.vertex_count);
            for i in 0..header.vertex_count {
                let line = lines.next().ok_or(Error::PlyTruncated { expected: header.vertex_count, found: i })?;
                let row: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| Error::PlyBody(format!("bad number `{t}` in vertex {i}"))))
                    .collect::<Result<_>>()?;
                if row.len() != nprops {
                    return Err(Error::PlyBody(format!("vertex {i} has {} values, expected {nprops}", row.len())));
                }
                rows.push(row);
            }
            Ok(rows)
        }
    }
}

pub fn load_ply(bytes: &[u8]) -> Result<GaussianCloud> {
    let header = parse_header(bytes)?;
    if header.format != Format::BinaryLe {
        return Err(Error::PlyHeader("Gaussian PLY must be binary_little_endian".into()));
    }
    let names: Vec<&str> = header.properties.iter().map(|(n, _)| n.as_str()).collect();
    if names != GAUSSIAN_PROPERTIES {
        return Err(Error::PlyProperties(format!(
            "expected properties [{}], found [{}]",
            GAUSSIAN_PROPERTIES.join(" "),
            names.join(" ")
        )));
    }
    let ty = header.properties[0].1;
    if !matches!(ty, ScalarType::F32 | ScalarType::F64) || header.properties.iter().any(|(_, t)| *t != ty) {
        return Err(Error::PlyProperties("all Gaussian properties must share one float or double type".into()));
    }
    let stride = ty.size() * GAUSSIAN_PROPERTIES.len();
    let body_len = bytes.len() - header.body_offset;
    if body_len > stride * header.vertex_count {
        return Err(Error::PlyBody(format!(
            "{} trailing bytes after {} vertices",
            body_len - stride * header.vertex_count,
            header.vertex_count
        )));
    }
    let rows = read_rows(bytes, &header)?;
    let mut cloud = GaussianCloud::with_capacity(rows.len());
    for r in rows {
        cloud.push([r[0], r[1], r[2]], [r[13], r[14], r[15], r[16]], [r[10], r[11], r[12]], r[9], [r[6], r[7], r[8]]);
    }
    Ok(cloud)
}

/// Points with optional 0..1 colors, as read from a point PLY.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub positions: Vec<[f64; 3]>,
    pub colors: Option<Vec<[f64; 3]>>,
}

pub fn load_point_ply(bytes: &[u8]) -> Result<PointSet> {
    let header = parse_header(bytes)?;
    let find = |name: &str| header.properties.iter().position(|(n, _)| n == name);
    let (Some(ix), Some(iy), Some(iz)) = (find("x"), find("y"), find("z")) else {
        return Err(Error::PlyProperties("point PLY needs x, y and z properties".into()));
    };
    let color_idx = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        (None, None, None) => None,
        _ => return Err(Error::PlyProperties("partial color properties".into())),
    };
    let rows = read_rows(bytes, &header)?;
    let positions = rows.iter().map(|r| [r[ix], r[iy], r[iz]]).collect();
    let colors = color_idx.map(|idx| {
        rows.iter()
            .map(|r| {
                let mut c = [0.0; 3];
                for k in 0..3 {
                    let (_, ty) = header.properties[idx[k]];
                    c[k] = match ty {
                        ScalarType::F32 | ScalarType::F64 => r[idx[k]],
                        ScalarType::U16 => r[idx[k]] / 65535.0,
                        _ => r[idx[k]] / 255.0,
                    };
                }
                c
            })
            .collect()
    });
    Ok(PointSet { positions, colors })
}

/// Binary point PLY with `float` positions and optional `uchar` colors.
pub fn save_point_ply(points: &PointSet) -> Vec<u8> {
    let mut out = Vec::new();
    write!(out, "ply\nformat binary_little_endian 1.0\nelement vertex {}\n", points.positions.len()).unwrap();
    out.extend_from_slice(b"property float x\nproperty float y\nproperty float z\n");
    if points.colors.is_some() {
        out.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    out.extend_from_slice(b"end_header\n");
    for (i, p) in points.positions.iter().enumerate() {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        if let Some(colors) = &points.colors {
            for v in colors[i] {
                out.push(crate::image::quantize_u8(v));
            }
        }
    }
    out
}
