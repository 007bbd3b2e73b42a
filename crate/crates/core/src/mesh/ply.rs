//! ASCII PLY reading and writing.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use super::{MeshError, TriMesh};

pub fn to_ply_ascii(m: &TriMesh) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", m.vertex_count());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    let _ = writeln!(s, "element face {}", m.face_count());
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for v in m.vertices() {
        let _ = writeln!(s, "{} {} {}", v.x, v.y, v.z);
    }
    for f in m.faces() {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

pub fn write_ply(m: &TriMesh, path: &Path) -> Result<(), MeshError> {
    std::fs::write(path, to_ply_ascii(m))?;
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<TriMesh, MeshError> {
    parse_ply(&std::fs::read_to_string(path)?)
}

struct Element {
    name: String,
    count: usize,
    props: Vec<Prop>,
}

enum Prop {
    Scalar(String),
    List(String),
}

pub fn parse_ply(text: &str) -> Result<TriMesh, MeshError> {
    let bad = |msg: &str| MeshError::Format(msg.to_string());
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing ply magic"));
    }
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let line = lines.next().ok_or_else(|| bad("unterminated header"))?.trim();
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(MeshError::Format(format!("unsupported PLY format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| bad("bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", _, _, name] => elements
                .last_mut()
                .ok_or_else(|| bad("property before element"))?
                .props
                .push(Prop::List(name.to_string())),
            ["property", _, name] => elements
                .last_mut()
                .ok_or_else(|| bad("property before element"))?
                .props
                .push(Prop::Scalar(name.to_string())),
            _ => return Err(MeshError::Format(format!("unrecognized header line {line:?}"))),
        }
    }
    let mut body = lines.flat_map(str::split_whitespace);
    let mut next_num = |what: &str| -> Result<f64, MeshError> {
        let t = body.next().ok_or_else(|| MeshError::Format(format!("truncated {what} data")))?;
        t.parse().map_err(|_| MeshError::Format(format!("bad number {t:?} in {what}")))
    };
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for el in &elements {
        for _ in 0..el.count {
            let mut xyz = [f64::NAN; 3];
            let mut face: Option<Vec<u32>> = None;
            for p in &el.props {
                match p {
                    Prop::Scalar(name) => {
                        let v = next_num(&el.name)?;
                        match name.as_str() {
                            "x" => xyz[0] = v,
                            "y" => xyz[1] = v,
                            "z" => xyz[2] = v,
                            _ => {}
                        }
                    }
                    Prop::List(name) => {
                        let n = next_num(&el.name)? as usize;
                        let items = (0..n)
                            .map(|_| next_num(&el.name).map(|v| v as u32))
                            .collect::<Result<Vec<_>, _>>()?;
                        if name == "vertex_indices" || name == "vertex_index" {
                            face = Some(items);
                        }
                    }
                }
            }
            match el.name.as_str() {
                "vertex" => {
                    if xyz.iter().any(|v| v.is_nan()) {
                        return Err(bad("vertex element lacks x, y or z"));
                    }
                    vertices.push(Vector3::from(xyz));
                }
                "face" => {
                    let idx = face.ok_or_else(|| bad("face element lacks vertex_indices"))?;
                    // fan-triangulate polygons
                    for k in 1..idx.len().saturating_sub(1) {
                        faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
    }
    TriMesh::new(vertices, faces)
}
