//! Binary little-endian splat PLY, in the attribute layout written by the
//! common 3DGS trainers: `x y z`, `f_dc_0..2`, `f_rest_*` (channel-major),
//! `opacity` as a logit, `scale_0..2` as logs, `rot_0..3` as (w, x, y, z).

use std::io::Write;
use std::path::Path;

use nalgebra::{Quaternion, Vector3};

use crate::scene::{sh_terms, Gaussian, Scene};
use crate::{Error, Result};

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

    fn read(self, b: &[u8]) -> f64 {
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
struct Element {
    name: String,
    count: usize,
    /// `(name, type, byte offset within the record)`.
    props: Vec<(String, ScalarType, usize)>,
    stride: usize,
    has_list: bool,
}

struct Header {
    elements: Vec<Element>,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let err = |m: String| Error::Ply(m);
    let end = find(bytes, b"end_header")
        .ok_or_else(|| err("missing end_header".into()))?;
    let mut data_start = end + b"end_header".len();
    if bytes.get(data_start) == Some(&b'\r') {
        data_start += 1;
    }
    if bytes.get(data_start) != Some(&b'\n') {
        return Err(err("end_header not followed by newline".into()));
    }
    data_start += 1;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| err("header is not utf-8".into()))?;
    let mut lines = text.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err(err("not a PLY file (missing magic)".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(err(format!("unsupported format `{fmt}`; only binary_little_endian is read")));
                }
                saw_format = true;
            }
            ["element", name, count] => {
                let count = count.parse().map_err(|_| err(format!("bad element count `{count}`")))?;
                elements.push(Element { name: name.to_string(), count, props: Vec::new(), stride: 0, has_list: false });
            }
            ["property", "list", ..] => {
                let el = elements.last_mut().ok_or_else(|| err("property before element".into()))?;
                el.has_list = true;
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| err("property before element".into()))?;
                let ty = ScalarType::parse(ty).ok_or_else(|| err(format!("unknown property type `{ty}`")))?;
                el.props.push((name.to_string(), ty, el.stride));
                el.stride += ty.size();
            }
            _ => return Err(err(format!("unrecognized header line `{line}`"))),
        }
    }
    if !saw_format {
        return Err(err("missing format line".into()));
    }
    Ok(Header { elements, data_start })
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    (p / (1.0 - p)).ln()
}

pub fn read_splat_ply(path: &Path) -> Result<Scene> {
    let bytes = std::fs::read(path)?;
    parse_splat_ply(&bytes)
}

pub fn parse_splat_ply(bytes: &[u8]) -> Result<Scene> {
    let header = parse_header(bytes)?;
    let mut offset = header.data_start;
    let mut vertex = None;
    for el in &header.elements {
        if el.name == "vertex" {
            vertex = Some(el);
            break;
        }
        if el.has_list {
            return Err(Error::Ply(format!("cannot skip list element `{}` before vertices", el.name)));
        }
        offset += el.count * el.stride;
    }
    let vertex = vertex.ok_or_else(|| Error::Ply("no vertex element".into()))?;
    if vertex.has_list {
        return Err(Error::Ply("vertex element has list properties".into()));
    }
    let prop = |name: &str| vertex.props.iter().find(|p| p.0 == name).map(|p| (p.1, p.2));
    let required = |name: &str| prop(name).ok_or_else(|| Error::Ply(format!("missing required property `{name}`")));

    let pos = [required("x")?, required("y")?, required("z")?];
    let dc = [required("f_dc_0")?, required("f_dc_1")?, required("f_dc_2")?];
    let opacity = required("opacity")?;
    let scale = [required("scale_0")?, required("scale_1")?, required("scale_2")?];
    let rot = [required("rot_0")?, required("rot_1")?, required("rot_2")?, required("rot_3")?];
    let filter = prop("filter_variance");

    let n_rest = vertex.props.iter().filter(|p| p.0.starts_with("f_rest_")).count();
    let degree = (0..=3)
        .find(|&d| 3 * (sh_terms(d) - 1) == n_rest)
        .ok_or_else(|| Error::Ply(format!("{n_rest} f_rest properties do not match any SH degree")))?;
    let rest: Vec<(ScalarType, usize)> = (0..n_rest)
        .map(|i| required(&format!("f_rest_{i}")))
        .collect::<Result<_>>()?;
    let terms = sh_terms(degree);

    let need = offset + vertex.count * vertex.stride;
    if bytes.len() < need {
        return Err(Error::Ply(format!(
            "truncated data: {} vertices need {} bytes, file has {}",
            vertex.count,
            need - header.data_start,
            bytes.len().saturating_sub(header.data_start)
        )));
    }

    let mut gaussians = Vec::with_capacity(vertex.count);
    for i in 0..vertex.count {
        let rec = &bytes[offset + i * vertex.stride..offset + (i + 1) * vertex.stride];
        let get = |(ty, off): (ScalarType, usize)| ty.read(&rec[off..]);
        let mut values: Vec<f64> = Vec::with_capacity(16 + n_rest);
        values.extend(pos.iter().map(|&p| get(p)));
        values.extend(dc.iter().map(|&p| get(p)));
        values.push(get(opacity));
        values.extend(scale.iter().map(|&p| get(p)));
        values.extend(rot.iter().map(|&p| get(p)));
        values.extend(rest.iter().map(|&p| get(p)));
        if let Some(v) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Ply(format!("vertex {i}: non-finite value in field {v}")));
        }
        let q = Quaternion::new(values[10], values[11], values[12], values[13]);
        let norm = q.norm();
        if norm == 0.0 {
            return Err(Error::Ply(format!("vertex {i}: zero rotation quaternion")));
        }
        let mut sh = vec![0.0; 3 * terms];
        sh[..3].copy_from_slice(&values[3..6]);
        for c in 0..3 {
            for k in 1..terms {
                sh[3 * k + c] = values[14 + c * (terms - 1) + (k - 1)];
            }
        }
        let filter_variance = match filter {
            Some(p) => get(p),
            None => 0.0,
        };
        if !filter_variance.is_finite() {
            return Err(Error::Ply(format!("vertex {i}: non-finite filter_variance")));
        }
        gaussians.push(Gaussian {
            mean: Vector3::new(values[0], values[1], values[2]),
            scale: Vector3::new(values[7].exp(), values[8].exp(), values[9].exp()),
            rotation: q / norm,
            opacity: sigmoid(values[6]),
            sh_coeffs: sh,
            filter_variance,
        });
    }
    Ok(Scene::new(gaussians, degree))
}

/// Writes `scene` in the standard layout. A `filter_variance` property is
/// added only when some Gaussian carries a nonzero filter.
pub fn write_splat_ply(path: &Path, scene: &Scene) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode_splat_ply(scene)?)?;
    f.flush()?;
    Ok(())
}

pub fn encode_splat_ply(scene: &Scene) -> Result<Vec<u8>> {
    let terms = sh_terms(scene.sh_degree);
    let with_filter = scene.gaussians.iter().any(|g| g.filter_variance != 0.0);
    let mut out = Vec::new();
    writeln!(out, "ply")?;
    writeln!(out, "format binary_little_endian 1.0")?;
    writeln!(out, "element vertex {}", scene.gaussians.len())?;
    for p in ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"] {
        writeln!(out, "property float {p}")?;
    }
    for i in 0..3 * (terms - 1) {
        writeln!(out, "property float f_rest_{i}")?;
    }
    for p in ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"] {
        writeln!(out, "property float {p}")?;
    }
    if with_filter {
        writeln!(out, "property float filter_variance")?;
    }
    writeln!(out, "end_header")?;
    for (i, g) in scene.gaussians.iter().enumerate() {
        if g.sh_coeffs.len() != 3 * terms {
            return Err(Error::InvalidArgument(format!(
                "gaussian {i} has {} sh coefficients, scene degree {} needs {}",
                g.sh_coeffs.len(),
                scene.sh_degree,
                3 * terms
            )));
        }
        let mut vals: Vec<f64> = Vec::with_capacity(17 + 3 * terms);
        vals.extend(g.mean.iter());
        vals.extend(&g.sh_coeffs[..3]);
        for c in 0..3 {
            for k in 1..terms {
                vals.push(g.sh_coeffs[3 * k + c]);
            }
        }
        vals.push(logit(g.opacity));
        vals.extend(g.scale.iter().map(|s| s.ln()));
        vals.extend([g.rotation.w, g.rotation.i, g.rotation.j, g.rotation.k]);
        if with_filter {
            vals.push(g.filter_variance);
        }
        for v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn minimal(opacity_logit: f32, scale0: f32) -> Vec<u8> {
        let mut out = b"ply\nformat binary_little_endian 1.0\ncomment test\nelement vertex 1\n".to_vec();
        let names = [
            "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1",
            "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
        ];
        for n in names {
            out.extend_from_slice(format!("property float {n}\n").as_bytes());
        }
        out.extend_from_slice(b"end_header\n");
        let vals = [1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.3, opacity_logit, scale0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0];
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    #[test]
    fn decodes_activations() {
        let s = parse_splat_ply(&minimal(0.0, 0.0)).unwrap();
        assert_eq!(s.sh_degree, 0);
        let g = &s.gaussians[0];
        assert_eq!(g.opacity, 0.5);
        assert_eq!(g.scale.x, 1.0);
        assert_eq!(g.rotation.w, 1.0);
        assert_eq!(g.mean, Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let ascii = b"ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nend_header\n";
        assert!(matches!(parse_splat_ply(ascii), Err(Error::Ply(m)) if m.contains("binary_little_endian")));
        let big = b"ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n";
        assert!(parse_splat_ply(big).is_err());
        let missing = b"ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty float x\nend_header\n";
        assert!(matches!(parse_splat_ply(missing), Err(Error::Ply(m)) if m.contains("missing required")));
        let nan = minimal(f32::NAN, 0.0);
        assert!(matches!(parse_splat_ply(&nan), Err(Error::Ply(m)) if m.contains("vertex 0")));
        let mut trunc = minimal(0.0, 0.0);
        trunc.truncate(trunc.len() - 3);
        assert!(matches!(parse_splat_ply(&trunc), Err(Error::Ply(m)) if m.contains("truncated")));
        assert!(parse_splat_ply(b"garbage").is_err());
    }

    fn arb_gaussian(degree: usize) -> impl Strategy<Value = Gaussian> {
        let terms = 3 * sh_terms(degree);
        (
            prop::array::uniform3(-50.0f64..50.0),
            prop::array::uniform3(0.001f64..3.0),
            prop::array::uniform4(-1.0f64..1.0),
            0.01f64..0.99,
            prop::collection::vec(-2.0f64..2.0, terms),
        )
            .prop_filter("non-degenerate rotation", |(_, _, q, _, _)| q.iter().map(|v| v * v).sum::<f64>() > 0.01)
            .prop_map(|(m, s, q, o, sh)| {
                let q = Quaternion::new(q[0], q[1], q[2], q[3]);
                Gaussian {
                    mean: Vector3::from(m),
                    scale: Vector3::from(s),
                    rotation: q / q.norm(),
                    opacity: o,
                    sh_coeffs: sh,
                    filter_variance: 0.0,
                }
            })
    }

    fn arb_scene() -> impl Strategy<Value = Scene> {
        (0usize..=3).prop_flat_map(|degree| {
            prop::collection::vec(arb_gaussian(degree), 100).prop_map(move |gs| Scene::new(gs, degree))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip_within_f32(scene in arb_scene()) {
            let back = parse_splat_ply(&encode_splat_ply(&scene).unwrap()).unwrap();
            prop_assert_eq!(back.sh_degree, scene.sh_degree);
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-6 * x.abs().max(1.0);
            for (a, b) in scene.gaussians.iter().zip(&back.gaussians) {
                prop_assert!(a.mean.iter().zip(b.mean.iter()).all(|(x, y)| close(*x, *y)));
                prop_assert!(a.scale.iter().zip(b.scale.iter()).all(|(x, y)| close(*x, *y)));
                prop_assert!(a.rotation.coords.iter().zip(b.rotation.coords.iter()).all(|(x, y)| close(*x, *y)));
                prop_assert!(close(a.opacity, b.opacity));
                prop_assert!(a.sh_coeffs.iter().zip(&b.sh_coeffs).all(|(x, y)| close(*x, *y)));
            }
        }
    }
}
