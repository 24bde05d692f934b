//! Triangle meshes and the Wavefront OBJ subset (`v`, `vn`, `vt`, `f`).

use std::fmt::Write as _;
use std::path::Path;

use glam::{DVec2, DVec3};

use crate::error::{Error, Result};

/// Indices of one triangle corner into the mesh attribute arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Corner {
    pub position: usize,
    pub normal: usize,
    pub uv: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub positions: Vec<DVec3>,
    pub normals: Vec<DVec3>,
    pub uvs: Vec<DVec2>,
    pub triangles: Vec<[Corner; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingSphere {
    pub center: DVec3,
    pub radius: f64,
}

impl TriMesh {
    pub fn has_uvs(&self) -> bool {
        !self.triangles.is_empty()
            && self
                .triangles
                .iter()
                .all(|t| t.iter().all(|c| c.uv.is_some()))
    }

    pub fn require_uvs(&self) -> Result<()> {
        if self.has_uvs() {
            Ok(())
        } else {
            Err(Error::MissingUvs)
        }
    }

    pub fn corner_positions(&self, tri: &[Corner; 3]) -> [DVec3; 3] {
        tri.map(|c| self.positions[c.position])
    }

    pub fn corner_normals(&self, tri: &[Corner; 3]) -> [DVec3; 3] {
        tri.map(|c| self.normals[c.normal])
    }

    /// Corner UVs; zero when the mesh has none.
    pub fn corner_uvs(&self, tri: &[Corner; 3]) -> [DVec2; 3] {
        tri.map(|c| c.uv.map_or(DVec2::ZERO, |i| self.uvs[i]))
    }

    /// Sphere centered on the axis-aligned bounds, enclosing every vertex.
    pub fn bounding_sphere(&self) -> BoundingSphere {
        let (lo, hi) = self.positions.iter().fold(
            (DVec3::splat(f64::INFINITY), DVec3::splat(f64::NEG_INFINITY)),
            |(lo, hi), p| (lo.min(*p), hi.max(*p)),
        );
        let center = (lo + hi) * 0.5;
        let radius = self
            .positions
            .iter()
            .map(|p| p.distance(center))
            .fold(0.0, f64::max);
        BoundingSphere { center, radius }
    }

    pub fn translated(&self, offset: DVec3) -> TriMesh {
        let mut m = self.clone();
        m.positions.iter_mut().for_each(|p| *p += offset);
        m
    }

    fn validate(&self) -> Result<()> {
        for t in &self.triangles {
            for c in t {
                if c.position >= self.positions.len()
                    || c.normal >= self.normals.len()
                    || c.uv.is_some_and(|u| u >= self.uvs.len())
                {
                    return Err(Error::InvalidArgument("triangle index out of range".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ObjOptions {
    /// Fail with [`Error::MissingUvs`] when any face corner lacks a `vt`.
    pub require_uvs: bool,
}

impl Default for ObjOptions {
    fn default() -> Self {
        Self { require_uvs: true }
    }
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriMesh> {
    load_mesh_with(path, ObjOptions::default())
}

pub fn load_mesh_with(path: impl AsRef<Path>, opts: ObjOptions) -> Result<TriMesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, opts)
}

fn parse_floats<const N: usize>(rest: &[&str], line: usize, min: usize) -> Result<[f64; N]> {
    if rest.len() < min || rest.len() > N + 1 {
        return Err(Error::parse(line, format!("expected {min}..{N} numbers")));
    }
    let mut out = [0.0; N];
    for (o, tok) in out.iter_mut().zip(rest) {
        *o = tok
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::parse(line, format!("bad number {tok:?}")))?;
    }
    Ok(out)
}

fn resolve_index(tok: &str, count: usize, line: usize) -> Result<usize> {
    let i: i64 = tok
        .parse()
        .map_err(|_| Error::parse(line, format!("bad index {tok:?}")))?;
    let idx = if i > 0 {
        i - 1
    } else if i < 0 {
        count as i64 + i
    } else {
        -1
    };
    if idx < 0 || idx as usize >= count {
        return Err(Error::parse(line, format!("index {i} out of range")));
    }
    Ok(idx as usize)
}

pub fn parse_obj(text: &str, opts: ObjOptions) -> Result<TriMesh> {
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    let mut uvs = Vec::new();
    // Corners with `usize::MAX` as a placeholder normal until resolved.
    let mut triangles: Vec<[Corner; 3]> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut toks = content.split_whitespace();
        let Some(tag) = toks.next() else { continue };
        let rest: Vec<&str> = toks.collect();
        match tag {
            "v" => {
                let [x, y, z] = parse_floats::<3>(&rest, line, 3)?;
                positions.push(DVec3::new(x, y, z));
            }
            "vn" => {
                let [x, y, z] = parse_floats::<3>(&rest, line, 3)?;
                normals.push(DVec3::new(x, y, z));
            }
            "vt" => {
                let [u, v] = parse_floats::<2>(&rest, line, 2)?;
                uvs.push(DVec2::new(u, v));
            }
            "f" => {
                if rest.len() < 3 {
                    return Err(Error::parse(line, "face needs at least 3 corners"));
                }
                let mut corners = Vec::with_capacity(rest.len());
                for tok in &rest {
                    let mut parts = tok.split('/');
                    let p = resolve_index(parts.next().unwrap_or(""), positions.len(), line)?;
                    let t = match parts.next() {
                        Some("") | None => None,
                        Some(s) => Some(resolve_index(s, uvs.len(), line)?),
                    };
                    let n = match parts.next() {
                        Some("") | None => usize::MAX,
                        Some(s) => resolve_index(s, normals.len(), line)?,
                    };
                    if parts.next().is_some() {
                        return Err(Error::parse(line, format!("bad face corner {tok:?}")));
                    }
                    corners.push(Corner {
                        position: p,
                        normal: n,
                        uv: t,
                    });
                }
                // Fan triangulation around the first corner.
                for i in 1..corners.len() - 1 {
                    triangles.push([corners[0], corners[i], corners[i + 1]]);
                }
            }
            "o" | "g" | "s" | "usemtl" | "mtllib" | "l" | "p" => {}
            other => return Err(Error::parse(line, format!("unsupported record {other:?}"))),
        }
    }

    if triangles.is_empty() {
        return Err(Error::InvalidArgument("mesh has no faces".into()));
    }
    if opts.require_uvs && triangles.iter().any(|t| t.iter().any(|c| c.uv.is_none())) {
        return Err(Error::MissingUvs);
    }

    if triangles.iter().any(|t| t.iter().any(|c| c.normal == usize::MAX)) {
        let base = normals.len();
        normals.extend(vertex_normals(&positions, &triangles));
        for t in &mut triangles {
            for c in t.iter_mut() {
                if c.normal == usize::MAX {
                    c.normal = base + c.position;
                }
            }
        }
    }
    for n in &mut normals {
        // Leave unit vectors untouched so load -> save -> load is a fixpoint.
        if (n.length_squared() - 1.0).abs() > 1e-12 {
            *n = n.try_normalize().unwrap_or(DVec3::Z);
        }
    }

    let mesh = TriMesh {
        positions,
        normals,
        uvs,
        triangles,
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Area-weighted per-vertex normals: the unnormalized face cross product is
/// twice the face area times the face normal.
pub fn vertex_normals(positions: &[DVec3], triangles: &[[Corner; 3]]) -> Vec<DVec3> {
    let mut acc = vec![DVec3::ZERO; positions.len()];
    for t in triangles {
        let [a, b, c] = t.map(|c| positions[c.position]);
        let n = (b - a).cross(c - a);
        for corner in t {
            acc[corner.position] += n;
        }
    }
    acc.into_iter()
        .map(|n| n.try_normalize().unwrap_or(DVec3::Z))
        .collect()
}

pub fn obj_string(mesh: &TriMesh) -> String {
    let mut s = String::new();
    for p in &mesh.positions {
        let _ = writeln!(s, "v {} {} {}", p.x, p.y, p.z);
    }
    for t in &mesh.uvs {
        let _ = writeln!(s, "vt {} {}", t.x, t.y);
    }
    for n in &mesh.normals {
        let _ = writeln!(s, "vn {} {} {}", n.x, n.y, n.z);
    }
    for tri in &mesh.triangles {
        s.push('f');
        for c in tri {
            match c.uv {
                Some(t) => {
                    let _ = write!(s, " {}/{}/{}", c.position + 1, t + 1, c.normal + 1);
                }
                None => {
                    let _ = write!(s, " {}//{}", c.position + 1, c.normal + 1);
                }
            }
        }
        s.push('\n');
    }
    s
}

pub fn save_mesh(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, obj_string(mesh)).map_err(|e| Error::io(path, e))
}

/// Procedural meshes used by tests, examples and the CLI demo paths.
pub mod shapes {
    use std::f64::consts::PI;

    use super::*;

    fn corner(p: usize, uv: Option<usize>) -> Corner {
        Corner {
            position: p,
            normal: p,
            uv,
        }
    }

    /// Quad spanning `[-s/2, s/2]^2` at height `z`, facing +Z, with UVs
    /// remapped into the rectangle `uv_min..uv_max`.
    pub fn quad_with_uv_rect(size: f64, z: f64, uv_min: DVec2, uv_max: DVec2) -> TriMesh {
        let h = size * 0.5;
        let positions = vec![
            DVec3::new(-h, -h, z),
            DVec3::new(h, -h, z),
            DVec3::new(h, h, z),
            DVec3::new(-h, h, z),
        ];
        let uvs = vec![
            uv_min,
            DVec2::new(uv_max.x, uv_min.y),
            uv_max,
            DVec2::new(uv_min.x, uv_max.y),
        ];
        let triangles = vec![
            [corner(0, Some(0)), corner(1, Some(1)), corner(2, Some(2))],
            [corner(0, Some(0)), corner(2, Some(2)), corner(3, Some(3))],
        ];
        TriMesh {
            positions,
            normals: vec![DVec3::Z; 4],
            uvs,
            triangles,
        }
    }

    /// Unit quad `[-0.5, 0.5]^2` at `z = 0`, UVs spanning `[0, 1]^2`.
    pub fn unit_quad() -> TriMesh {
        quad_with_uv_rect(1.0, 0.0, DVec2::ZERO, DVec2::ONE)
    }

    /// Subdivided icosahedron on the unit sphere, no UVs.
    pub fn icosphere(subdivisions: usize) -> TriMesh {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut positions: Vec<DVec3> = [
            (-1.0, t, 0.0),
            (1.0, t, 0.0),
            (-1.0, -t, 0.0),
            (1.0, -t, 0.0),
            (0.0, -1.0, t),
            (0.0, 1.0, t),
            (0.0, -1.0, -t),
            (0.0, 1.0, -t),
            (t, 0.0, -1.0),
            (t, 0.0, 1.0),
            (-t, 0.0, -1.0),
            (-t, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| DVec3::new(x, y, z).normalize())
        .collect();
        let mut faces: Vec<[usize; 3]> = vec![
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
        for _ in 0..subdivisions {
            let mut cache = std::collections::HashMap::new();
            let mut mid = |a: usize, b: usize, positions: &mut Vec<DVec3>| {
                let key = (a.min(b), a.max(b));
                *cache.entry(key).or_insert_with(|| {
                    positions.push(((positions[a] + positions[b]) * 0.5).normalize());
                    positions.len() - 1
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for [a, b, c] in faces {
                let ab = mid(a, b, &mut positions);
                let bc = mid(b, c, &mut positions);
                let ca = mid(c, a, &mut positions);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        let normals = positions.clone();
        TriMesh {
            positions,
            normals,
            uvs: Vec::new(),
            triangles: faces
                .into_iter()
                .map(|f| f.map(|p| corner(p, None)))
                .collect(),
        }
    }

    /// Parametric grid `(u, v) -> (position, normal)` with UVs `(u, v)` and
    /// a duplicated seam column/row so UVs stay continuous per triangle.
    fn param_grid(nu: usize, nv: usize, f: impl Fn(f64, f64) -> (DVec3, DVec3)) -> TriMesh {
        let mut positions = Vec::with_capacity((nu + 1) * (nv + 1));
        let mut normals = Vec::with_capacity(positions.capacity());
        let mut uvs = Vec::with_capacity(positions.capacity());
        for j in 0..=nv {
            for i in 0..=nu {
                let (u, v) = (i as f64 / nu as f64, j as f64 / nv as f64);
                let (p, n) = f(u, v);
                positions.push(p);
                normals.push(n.normalize());
                uvs.push(DVec2::new(u, v));
            }
        }
        let idx = |i: usize, j: usize| j * (nu + 1) + i;
        let mut triangles = Vec::with_capacity(nu * nv * 2);
        for j in 0..nv {
            for i in 0..nu {
                let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
                for tri in [[a, b, c], [a, c, d]] {
                    let [p0, p1, p2] = tri.map(|k| positions[k]);
                    if (p1 - p0).cross(p2 - p0).length_squared() > 1e-24 {
                        triangles.push(tri.map(|k| corner(k, Some(k))));
                    }
                }
            }
        }
        TriMesh {
            positions,
            normals,
            uvs,
            triangles,
        }
    }

    /// Unit sphere with equirectangular UVs (`u` along azimuth, `v` from
    /// the south pole to the north pole around +Y).
    pub fn uv_sphere(n_lon: usize, n_lat: usize) -> TriMesh {
        param_grid(n_lon, n_lat, |u, v| {
            let phi = 2.0 * PI * u;
            let theta = PI * (1.0 - v);
            let p = DVec3::new(theta.sin() * phi.cos(), theta.cos(), -theta.sin() * phi.sin());
            (p, p)
        })
    }

    /// Torus around +Y with major radius `major` and tube radius `minor`,
    /// unwrapped so the full UV square covers the surface once.
    pub fn torus(major: f64, minor: f64, nu: usize, nv: usize) -> TriMesh {
        param_grid(nu, nv, |u, v| {
            let phi = 2.0 * PI * u;
            let theta = 2.0 * PI * v;
            let ring = DVec3::new(phi.cos(), 0.0, -phi.sin());
            let n = ring * theta.cos() + DVec3::Y * theta.sin();
            (ring * major + n * minor, n)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUAD_OBJ: &str = "\
v -0.5 -0.5 0
v 0.5 -0.5 0
v 0.5 0.5 0
v -0.5 0.5 0
vt 0 0
vt 1 0
vt 1 1
vt 0 1
vn 0 0 1
f 1/1/1 2/2/1 3/3/1
f 1/1/1 3/3/1 4/4/1
";

    #[test]
    fn loads_unit_quad() {
        let m = parse_obj(QUAD_OBJ, ObjOptions::default()).unwrap();
        assert_eq!(m.triangles.len(), 2);
        assert_eq!(m.uvs.len(), 4);
        assert!(m.has_uvs());
    }

    #[test]
    fn quad_face_fans_on_first_diagonal() {
        let text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 1 1\nvt 0 1\n\
                    vn 0 0 1\nvn 0 0 1\nvn 0 0 1\nvn 0 0 1\nf 1/1/1 2/2/2 3/3/3 4/4/4\n";
        let m = parse_obj(text, ObjOptions::default()).unwrap();
        assert_eq!(m.triangles.len(), 2);
        let pos: Vec<[usize; 3]> = m.triangles.iter().map(|t| t.map(|c| c.position)).collect();
        assert_eq!(pos, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn missing_uvs_is_distinct() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n";
        assert!(matches!(parse_obj(text, ObjOptions::default()), Err(Error::MissingUvs)));
        let m = parse_obj(text, ObjOptions { require_uvs: false }).unwrap();
        assert!(!m.has_uvs());
        assert!(matches!(m.require_uvs(), Err(Error::MissingUvs)));
    }

    #[test]
    fn malformed_record_reports_line() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 oops\n";
        match parse_obj(text, ObjOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let text = "v 0 0 0\nvt 0 0\nf 1/1 2/1 1/1\n";
        assert!(matches!(parse_obj(text, ObjOptions::default()), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn normals_are_renormalized() {
        let text = QUAD_OBJ.replace("vn 0 0 1", "vn 0 0 7");
        let m = parse_obj(&text, ObjOptions::default()).unwrap();
        assert!((m.normals[0].length() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn negative_indices_resolve_relative() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf -3/-1 -2/-1 -1/-1\n";
        let m = parse_obj(text, ObjOptions::default()).unwrap();
        assert_eq!(m.triangles[0].map(|c| c.position), [0, 1, 2]);
    }

    #[test]
    fn computed_normals_match_sphere() {
        // Oracle: exact sphere normal at each vertex is p / |p|.
        let ico = shapes::icosphere(2);
        let mut text = String::new();
        for p in &ico.positions {
            text += &format!("v {} {} {}\nvt 0 0\n", p.x, p.y, p.z);
        }
        for t in &ico.triangles {
            let [a, b, c] = t.map(|c| c.position + 1);
            text += &format!("f {a}/1 {b}/1 {c}/1\n");
        }
        let m = parse_obj(&text, ObjOptions::default()).unwrap();
        let max_deg = m
            .triangles
            .iter()
            .flat_map(|t| t.iter())
            .map(|c| {
                let exact = m.positions[c.position].normalize();
                m.normals[c.normal].dot(exact).clamp(-1.0, 1.0).acos().to_degrees()
            })
            .fold(0.0, f64::max);
        assert!(max_deg < 2.0, "max deviation {max_deg} deg");
    }

    #[test]
    fn load_save_load_is_fixpoint() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("a.obj");
        std::fs::write(&src, obj_string(&shapes::torus(1.0, 0.3, 12, 8))).unwrap();
        let first = load_mesh(&src).unwrap();
        let again = dir.path().join("b.obj");
        save_mesh(&first, &again).unwrap();
        let second = load_mesh(&again).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn shapes_are_well_formed() {
        for m in [shapes::uv_sphere(16, 8), shapes::torus(1.0, 0.25, 16, 8), shapes::unit_quad()] {
            assert!(m.has_uvs());
            m.validate().unwrap();
        }
        let s = shapes::uv_sphere(32, 16);
        assert!(s.positions.iter().all(|p| (p.length() - 1.0).abs() < 1e-12));
        let b = s.bounding_sphere();
        assert!(b.center.length() < 1e-9 && (b.radius - 1.0).abs() < 1e-9);
    }
}
