//! PLY point clouds.
//!
//! Reads ASCII and binary little-endian files whose `vertex` element carries
//! `x`, `y`, `z` and optionally `radius`, `opacity` and `red`/`green`/`blue`.
//! Integer color channels are scaled by their type maximum; floating ones are
//! taken as is. Other elements are skipped. Written files use `double` for
//! every property so binary round trips are bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::scene::{GaussianCloud, Vec3, DEFAULT_COLOR, DEFAULT_OPACITY, DEFAULT_RADIUS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlyFormat {
    Ascii,
    #[default]
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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
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

    /// Maximum value for integer types, used to normalize colors.
    fn int_max(self) -> Option<f64> {
        match self {
            Scalar::I8 => Some(i8::MAX as f64),
            Scalar::U8 => Some(u8::MAX as f64),
            Scalar::I16 => Some(i16::MAX as f64),
            Scalar::U16 => Some(u16::MAX as f64),
            Scalar::I32 => Some(i32::MAX as f64),
            Scalar::U32 => Some(u32::MAX as f64),
            Scalar::F32 | Scalar::F64 => None,
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

#[derive(Clone, Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body_offset: usize,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut offset = 0;
    let mut lines = Vec::new();
    loop {
        let rest = &bytes[offset..];
        let end = rest
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| format_err("PLY header is not terminated by end_header"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| format_err("PLY header is not valid UTF-8"))?
            .trim_end_matches('\r')
            .trim()
            .to_string();
        offset += end + 1;
        if line == "end_header" {
            break;
        }
        lines.push(line);
    }
    if lines.first().map(String::as_str) != Some("ply") {
        return Err(format_err("missing PLY magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in &lines[1..] {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", kind, _version] => {
                format = Some(match *kind {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(format_err(format!("unsupported PLY format {other}"))),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| format_err(format!("bad element count {count:?}")))?,
                properties: Vec::new(),
            }),
            ["property", "list", count, item, _name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| format_err("property before any element"))?;
                let count = Scalar::parse(count).ok_or_else(|| format_err(format!("unknown type {count}")))?;
                let item = Scalar::parse(item).ok_or_else(|| format_err(format!("unknown type {item}")))?;
                el.properties.push(Property::List { count, item });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| format_err("property before any element"))?;
                let ty = Scalar::parse(ty).ok_or_else(|| format_err(format!("unknown type {ty}")))?;
                el.properties.push(Property::Scalar {
                    name: name.to_string(),
                    ty,
                });
            }
            _ => return Err(format_err(format!("unrecognized header line {line:?}"))),
        }
    }
    Ok(Header {
        format: format.ok_or_else(|| format_err("PLY header has no format line"))?,
        elements,
        body_offset: offset,
    })
}

struct VertexLayout {
    /// Property index of x, y, z.
    xyz: [usize; 3],
    radius: Option<usize>,
    opacity: Option<usize>,
    rgb: Option<[usize; 3]>,
    types: Vec<Scalar>,
}

fn vertex_layout(el: &Element) -> Result<VertexLayout> {
    let mut types = Vec::new();
    let mut find = std::collections::HashMap::new();
    for (i, p) in el.properties.iter().enumerate() {
        match p {
            Property::Scalar { name, ty } => {
                find.insert(name.as_str(), i);
                types.push(*ty);
            }
            Property::List { .. } => return Err(format_err("list properties on vertices are not supported")),
        }
    }
    let get = |n: &str| find.get(n).copied();
    let xyz = match (get("x"), get("y"), get("z")) {
        (Some(x), Some(y), Some(z)) => [x, y, z],
        _ => return Err(format_err("vertex element lacks x, y or z")),
    };
    let rgb = match (get("red"), get("green"), get("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    Ok(VertexLayout {
        xyz,
        radius: get("radius"),
        opacity: get("opacity"),
        rgb,
        types,
    })
}

fn build_cloud(layout: &VertexLayout, rows: &[Vec<f64>]) -> Result<GaussianCloud> {
    let n = rows.len();
    let mut points = Vec::with_capacity(n);
    let mut radii = Vec::with_capacity(n);
    let mut opacities = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for row in rows {
        points.push(Vec3::new(row[layout.xyz[0]], row[layout.xyz[1]], row[layout.xyz[2]]));
        radii.push(layout.radius.map_or(DEFAULT_RADIUS, |i| row[i]));
        opacities.push(layout.opacity.map_or(DEFAULT_OPACITY, |i| row[i]));
        colors.push(layout.rgb.map_or(DEFAULT_COLOR, |idx| {
            idx.map(|i| match layout.types[i].int_max() {
                Some(m) => row[i] / m,
                None => row[i],
            })
        }));
    }
    GaussianCloud::new(points, radii, opacities, colors)
}

/// Parses a PLY file held in memory.
pub fn read_ply(bytes: &[u8]) -> Result<GaussianCloud> {
    let header = parse_header(bytes)?;
    let vi = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| format_err("PLY file has no vertex element"))?;
    let vertex = &header.elements[vi];
    let layout = vertex_layout(vertex)?;
    if vertex.count == 0 {
        return Err(Error::EmptyCloud);
    }
    let body = &bytes[header.body_offset..];
    let rows = match header.format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| format_err("ASCII PLY body is not UTF-8"))?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            for el in &header.elements[..vi] {
                for _ in 0..el.count {
                    lines.next().ok_or_else(|| format_err("PLY body is truncated"))?;
                }
            }
            let mut rows = Vec::with_capacity(vertex.count);
            for r in 0..vertex.count {
                let line = lines
                    .next()
                    .ok_or_else(|| format_err(format!("PLY body is truncated at vertex {r}")))?;
                let row = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| format_err(format!("vertex {r}: {e}")))?;
                if row.len() != layout.types.len() {
                    return Err(format_err(format!(
                        "vertex {r} has {} values, expected {}",
                        row.len(),
                        layout.types.len()
                    )));
                }
                rows.push(row);
            }
            rows
        }
        PlyFormat::BinaryLittleEndian => {
            let mut pos = 0;
            for el in &header.elements[..vi] {
                pos += skip_binary_element(el, &body[pos..])?;
            }
            let stride: usize = layout.types.iter().map(|t| t.size()).sum();
            let need = stride
                .checked_mul(vertex.count)
                .ok_or_else(|| format_err("vertex count overflows"))?;
            if body.len() < pos + need {
                return Err(format_err(format!(
                    "PLY body is truncated: {} bytes for {} vertices of {} bytes",
                    body.len() - pos,
                    vertex.count,
                    stride
                )));
            }
            body[pos..pos + need]
                .chunks_exact(stride)
                .map(|chunk| {
                    let mut off = 0;
                    layout
                        .types
                        .iter()
                        .map(|t| {
                            let v = t.read_le(&chunk[off..]);
                            off += t.size();
                            v
                        })
                        .collect()
                })
                .collect()
        }
    };
    build_cloud(&layout, &rows)
}

fn skip_binary_element(el: &Element, body: &[u8]) -> Result<usize> {
    let truncated = || format_err(format!("PLY body is truncated in element {}", el.name));
    let mut pos = 0;
    for _ in 0..el.count {
        for p in &el.properties {
            match p {
                Property::Scalar { ty, .. } => pos += ty.size(),
                Property::List { count, item } => {
                    let bytes = body.get(pos..pos + count.size()).ok_or_else(truncated)?;
                    let n = count.read_le(bytes);
                    if !(n >= 0.0) {
                        return Err(format_err("negative list length"));
                    }
                    pos += count.size() + n as usize * item.size();
                }
            }
            if pos > body.len() {
                return Err(truncated());
            }
        }
    }
    Ok(pos)
}

const PROPS: [&str; 8] = ["x", "y", "z", "radius", "opacity", "red", "green", "blue"];

/// Serializes a cloud.
pub fn write_ply(cloud: &GaussianCloud, format: PlyFormat) -> Vec<u8> {
    let mut header = String::from("ply\n");
    header.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    let _ = writeln!(header, "element vertex {}", cloud.len());
    for name in PROPS {
        let _ = writeln!(header, "property double {name}");
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    let rows = cloud
        .points()
        .iter()
        .zip(cloud.radii())
        .zip(cloud.opacities())
        .zip(cloud.colors())
        .map(|(((p, r), o), c)| [p.x, p.y, p.z, *r, *o, c[0], c[1], c[2]]);
    match format {
        PlyFormat::Ascii => {
            let mut text = String::new();
            for row in rows {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                text.push_str(&cells.join(" "));
                text.push('\n');
            }
            out.extend_from_slice(text.as_bytes());
        }
        PlyFormat::BinaryLittleEndian => {
            for row in rows {
                for v in row {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn load_ply(path: &Path) -> Result<GaussianCloud> {
    read_ply(&read_bytes(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_ply(cloud: &GaussianCloud, path: &Path, format: PlyFormat) -> Result<()> {
    write_atomic(path, &write_ply(cloud, format))
}
