//! Triangle meshes with optional per-vertex colours or features, plus OBJ I/O.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::binio;
use crate::error::{Error, Result};
use crate::Vec3;

#[derive(Debug, Clone, PartialEq, Default)]
pub enum VertexAttributes {
    #[default]
    None,
    /// RGB in [0, 1], one triple per vertex.
    Colors(Vec<[f64; 3]>),
    /// `channels` values per vertex, row-major.
    Features { channels: usize, data: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub attributes: VertexAttributes,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let mesh = Self {
            vertices,
            faces,
            attributes: VertexAttributes::None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn with_colors(mut self, colors: Vec<[f64; 3]>) -> Result<Self> {
        if colors.len() != self.vertices.len() {
            return Err(Error::Dimension(format!(
                "{} colours for {} vertices",
                colors.len(),
                self.vertices.len()
            )));
        }
        self.attributes = VertexAttributes::Colors(colors);
        Ok(self)
    }

    pub fn with_features(mut self, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * self.vertices.len() {
            return Err(Error::Dimension(format!(
                "{} feature values for {} vertices x {} channels",
                data.len(),
                self.vertices.len(),
                channels
            )));
        }
        self.attributes = VertexAttributes::Features { channels, data };
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::InvalidArgument(format!(
                    "face {i} references a vertex out of range ({n} vertices)"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidArgument(format!("face {i} repeats a vertex index")));
            }
        }
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidArgument("non-finite vertex coordinate".into()));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn colors(&self) -> Option<&[[f64; 3]]> {
        match &self.attributes {
            VertexAttributes::Colors(c) => Some(c),
            _ => None,
        }
    }

    /// Area-weighted vertex normals. Zero for isolated vertices.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut normals = vec![Vec3::zeros(); self.vertices.len()];
        for f in &self.faces {
            let [a, b, c] = f.map(|i| self.vertices[i as usize]);
            let n = (b - a).cross(&(c - a));
            for &i in f {
                normals[i as usize] += n;
            }
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }
        normals
    }

    /// Concatenate two meshes (attributes must be of the same kind).
    pub fn merged(&self, other: &TriMesh) -> Result<TriMesh> {
        let offset = self.vertices.len() as u32;
        let mut vertices = self.vertices.clone();
        vertices.extend_from_slice(&other.vertices);
        let mut faces = self.faces.clone();
        faces.extend(other.faces.iter().map(|f| f.map(|i| i + offset)));
        let attributes = match (&self.attributes, &other.attributes) {
            (VertexAttributes::None, VertexAttributes::None) => VertexAttributes::None,
            (VertexAttributes::Colors(a), VertexAttributes::Colors(b)) => {
                VertexAttributes::Colors(a.iter().chain(b).copied().collect())
            }
            (
                VertexAttributes::Features { channels: ca, data: a },
                VertexAttributes::Features { channels: cb, data: b },
            ) if ca == cb => VertexAttributes::Features {
                channels: *ca,
                data: a.iter().chain(b).copied().collect(),
            },
            _ => return Err(Error::InvalidArgument("cannot merge meshes with different attribute kinds".into())),
        };
        Ok(TriMesh {
            vertices,
            faces,
            attributes,
        })
    }
}

/// Subdivided icosahedron on the unit sphere. Level 4 has 2562 vertices and 5120 faces.
/// Faces are wound counter-clockwise seen from outside.
pub fn icosphere(level: u32) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|v| Vec3::from(*v).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalize());
                verts.len() as u32 - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    TriMesh {
        vertices,
        faces,
        attributes: VertexAttributes::None,
    }
}

/// Serialise as Wavefront OBJ. Vertex colours use the common `v x y z r g b` extension.
/// Coordinates are written with shortest round-trip formatting, so a reload is exact.
pub fn obj_to_string(mesh: &TriMesh) -> String {
    let mut s = String::with_capacity(mesh.vertices.len() * 48 + mesh.faces.len() * 20);
    let colors = mesh.colors();
    for (i, v) in mesh.vertices.iter().enumerate() {
        match colors {
            Some(c) => {
                let c = c[i];
                writeln!(s, "v {} {} {} {} {} {}", v.x, v.y, v.z, c[0], c[1], c[2]).unwrap();
            }
            None => writeln!(s, "v {} {} {}", v.x, v.y, v.z).unwrap(),
        }
    }
    for f in &mesh.faces {
        writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    s
}

pub fn parse_obj(text: &str) -> Result<TriMesh> {
    let mut vertices = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<([u32; 3], usize)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let tag = parts.next().unwrap();
        let err = |msg: String| Error::Parse { line: line_no, msg };
        match tag {
            "v" => {
                let vals: Vec<f64> = parts
                    .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number `{t}`"))))
                    .collect::<Result<_>>()?;
                match vals.len() {
                    3 | 6 => {}
                    n => return Err(err(format!("vertex needs 3 or 6 values, got {n}"))),
                }
                vertices.push(Vec3::new(vals[0], vals[1], vals[2]));
                if vals.len() == 6 {
                    if colors.len() + 1 != vertices.len() {
                        return Err(err("vertex colours must be given for all vertices or none".into()));
                    }
                    colors.push([vals[3], vals[4], vals[5]]);
                }
            }
            "f" => {
                let idx: Vec<u32> = parts
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        match first.parse::<i64>() {
                            Ok(i) if i >= 1 && i <= u32::MAX as i64 => Ok((i - 1) as u32),
                            _ => Err(err(format!("bad face index `{t}`"))),
                        }
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(err("face needs at least 3 indices".into()));
                }
                // Fan-triangulate polygons.
                for k in 1..idx.len() - 1 {
                    faces.push(([idx[0], idx[k], idx[k + 1]], line_no));
                }
            }
            // Normals, texture coordinates, groups and materials are ignored.
            _ => {}
        }
    }
    let n = vertices.len() as u32;
    for (f, line) in &faces {
        if f.iter().any(|&i| i >= n) {
            return Err(Error::Parse {
                line: *line,
                msg: format!("face index out of range ({n} vertices)"),
            });
        }
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            return Err(Error::Parse {
                line: *line,
                msg: "degenerate face repeats a vertex".into(),
            });
        }
    }
    if !colors.is_empty() && colors.len() != vertices.len() {
        return Err(Error::Parse {
            line: text.lines().count(),
            msg: "vertex colours must be given for all vertices or none".into(),
        });
    }
    let attributes = if colors.is_empty() {
        VertexAttributes::None
    } else {
        VertexAttributes::Colors(colors)
    };
    Ok(TriMesh {
        vertices,
        faces: faces.into_iter().map(|(f, _)| f).collect(),
        attributes,
    })
}

pub fn save_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    binio::write_file(path, obj_to_string(mesh).as_bytes())
}

pub fn load_obj(path: &Path) -> Result<TriMesh> {
    let bytes = binio::read_file(path)?;
    parse_obj(&String::from_utf8_lossy(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TETRA: &str = "# unit tetrahedron\nv 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 3 2\nf 1 2 4\nf 1 4 3\nf 2 3 4\n";

    #[test]
    fn tetrahedron_fixture() {
        let m = parse_obj(TETRA).unwrap();
        assert_eq!(m.vertices.len(), 4);
        assert_eq!(m.faces.len(), 4);
        assert_eq!(m.faces[0], [0, 2, 1]);
    }

    #[test]
    fn out_of_range_face_names_line() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\n\nf 1 2 7\n";
        match parse_obj(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse_obj("v 0 0 zz\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn random_mesh_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut mesh = icosphere(1);
        for v in &mut mesh.vertices {
            *v *= rng.random_range(0.5..1.5);
        }
        let colors = (0..mesh.vertices.len())
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let mesh = mesh.with_colors(colors).unwrap();
        let back = parse_obj(&obj_to_string(&mesh)).unwrap();
        assert_eq!(back, mesh);
    }

    #[test]
    fn icosphere_counts() {
        let m = icosphere(4);
        assert_eq!(m.vertices.len(), 2562);
        assert_eq!(m.faces.len(), 5120);
        m.validate().unwrap();
        // Outward winding: normals point away from the centre.
        let n = m.vertex_normals();
        assert!(m.vertices.iter().zip(&n).all(|(v, n)| v.dot(n) > 0.9));
    }
}
