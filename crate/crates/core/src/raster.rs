//! Z-buffered software rasterization into G-buffers.
//!
//! Coverage uses a fixed-point edge function with 64 subpixel steps and the
//! top-left fill rule, so which pixels a triangle owns does not depend on
//! floating-point evaluation order. Attribute interpolation uses the
//! unsnapped floating-point vertices.

use std::ops::Range;

use glam::{DVec2, DVec3};
use rayon::prelude::*;

use crate::camera::{Camera, Projection};
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::mesh::TriMesh;

pub const SUBPIXEL: i64 = 64;
/// Vertices further than this many pixels off-screen are rejected to keep
/// the edge products inside `i64`.
const MAX_COORD_PX: f64 = (1u64 << 24) as f64;
const BAND_ROWS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SetupError {
    Degenerate,
    OutOfRange,
}

/// Triangle prepared for fixed-point coverage tests.
#[derive(Debug, Clone)]
pub(crate) struct ScreenTriangle {
    fixed: [[i64; 2]; 3],
    /// Edge owning flags for edges (1,2), (2,0), (0,1).
    top_left: [bool; 3],
    pts: [DVec2; 3],
    inv_area: f64,
    xs: Range<usize>,
    ys: Range<usize>,
}

#[inline]
fn edge(a: [i64; 2], b: [i64; 2], p: [i64; 2]) -> i64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

#[inline]
fn is_top_left(a: [i64; 2], b: [i64; 2]) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    dy < 0 || (dy == 0 && dx > 0)
}

impl ScreenTriangle {
    /// `pts` are continuous pixel coordinates (pixel centers at `i + 0.5`).
    pub(crate) fn new(pts: [DVec2; 3], width: usize, height: usize) -> std::result::Result<Self, SetupError> {
        if pts
            .iter()
            .any(|p| !p.x.is_finite() || !p.y.is_finite() || p.x.abs() > MAX_COORD_PX || p.y.abs() > MAX_COORD_PX)
        {
            return Err(SetupError::OutOfRange);
        }
        let snap = |p: DVec2| [(p.x * SUBPIXEL as f64).round() as i64, (p.y * SUBPIXEL as f64).round() as i64];
        let mut fixed = pts.map(snap);
        let area = edge(fixed[0], fixed[1], fixed[2]);
        if area == 0 {
            return Err(SetupError::Degenerate);
        }
        if area < 0 {
            fixed.swap(1, 2);
        }
        let top_left = [
            is_top_left(fixed[1], fixed[2]),
            is_top_left(fixed[2], fixed[0]),
            is_top_left(fixed[0], fixed[1]),
        ];
        let half = SUBPIXEL / 2;
        let lo = |k: usize| fixed.iter().map(|v| v[k]).min().unwrap_or(0);
        let hi = |k: usize| fixed.iter().map(|v| v[k]).max().unwrap_or(0);
        let range = |k: usize, n: usize| {
            // First and last sample centers `i * 64 + 32` inside [lo, hi].
            let first = -(-(lo(k) - half)).div_euclid(SUBPIXEL);
            let last = (hi(k) - half).div_euclid(SUBPIXEL);
            let first = first.max(0) as usize;
            let last = last.min(n as i64 - 1);
            if last < first as i64 {
                0..0
            } else {
                first..last as usize + 1
            }
        };
        let fa = (pts[1] - pts[0]).perp_dot(pts[2] - pts[0]);
        Ok(ScreenTriangle {
            xs: range(0, width),
            ys: range(1, height),
            fixed,
            top_left,
            pts,
            inv_area: if fa != 0.0 { 1.0 / fa } else { 0.0 },
        })
    }

    pub(crate) fn rows(&self) -> Range<usize> {
        self.ys.clone()
    }

    #[inline]
    fn covers(&self, x: usize, y: usize) -> bool {
        let p = [x as i64 * SUBPIXEL + SUBPIXEL / 2, y as i64 * SUBPIXEL + SUBPIXEL / 2];
        let w = [
            edge(self.fixed[1], self.fixed[2], p),
            edge(self.fixed[2], self.fixed[0], p),
            edge(self.fixed[0], self.fixed[1], p),
        ];
        (0..3).all(|k| w[k] > 0 || (w[k] == 0 && self.top_left[k]))
    }

    /// Barycentric weights of the pixel center in the caller's vertex order,
    /// from the unsnapped vertices.
    #[inline]
    fn barycentric(&self, x: usize, y: usize) -> [f64; 3] {
        let s = DVec2::new(x as f64 + 0.5, y as f64 + 0.5);
        let [a, b, c] = self.pts;
        let l0 = (b - s).perp_dot(c - s) * self.inv_area;
        let l1 = (c - s).perp_dot(a - s) * self.inv_area;
        [l0, l1, 1.0 - l0 - l1]
    }

    /// Visits covered pixels inside `rows`, passing barycentric weights in
    /// the caller's vertex order.
    pub(crate) fn for_each_covered(&self, rows: Range<usize>, mut f: impl FnMut(usize, usize, [f64; 3])) {
        let y0 = rows.start.max(self.ys.start);
        let y1 = rows.end.min(self.ys.end);
        for y in y0..y1 {
            for x in self.xs.clone() {
                if self.covers(x, y) {
                    f(x, y, self.barycentric(x, y));
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RasterStats {
    pub triangles: usize,
    /// Zero-area triangles skipped.
    pub degenerate: usize,
    /// Triangles crossing the camera plane or far off-screen, skipped.
    pub clipped: usize,
    pub covered_pixels: usize,
}

/// Per-pixel geometry for one view.
#[derive(Debug, Clone)]
pub struct GBuffer {
    pub width: usize,
    pub height: usize,
    pub position: ImageF,
    pub normal: ImageF,
    pub uv: ImageF,
    pub depth: ImageF,
    pub mask: Vec<bool>,
    /// Index of the visible triangle, `u32::MAX` on background.
    pub triangle: Vec<u32>,
    pub stats: RasterStats,
}

impl GBuffer {
    #[inline]
    pub fn covered(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn coverage_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    pub fn mask_image(&self) -> ImageF {
        let data = self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        ImageF::from_vec(self.width, self.height, 1, data).expect("mask shape")
    }

    pub fn position_at(&self, x: usize, y: usize) -> DVec3 {
        let p = self.position.pixel(x, y);
        DVec3::new(p[0], p[1], p[2])
    }

    pub fn normal_at(&self, x: usize, y: usize) -> DVec3 {
        let n = self.normal.pixel(x, y);
        DVec3::new(n[0], n[1], n[2])
    }

    pub fn check_shape(&self, width: usize, height: usize) -> Result<()> {
        if (self.width, self.height) == (width, height) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "G-buffer is {}x{}, expected {width}x{height}",
                self.width, self.height
            )))
        }
    }
}

#[derive(Clone, Copy)]
struct Fragment {
    depth: f64,
    position: DVec3,
    normal: DVec3,
    uv: DVec2,
    triangle: u32,
}

struct Prepared {
    tri: ScreenTriangle,
    index: u32,
    depth: [f64; 3],
}

/// Rasterizes `mesh` from `camera`. Back faces are kept.
pub fn rasterize_gbuffer(mesh: &TriMesh, camera: &Camera) -> Result<GBuffer> {
    camera.validate()?;
    if mesh.triangles.is_empty() {
        return Err(Error::InvalidArgument("mesh has no triangles".into()));
    }
    let (w, h) = (camera.width, camera.height);
    let mut stats = RasterStats {
        triangles: mesh.triangles.len(),
        ..Default::default()
    };
    let near = 1e-9;

    let mut prepared = Vec::with_capacity(mesh.triangles.len());
    for (i, t) in mesh.triangles.iter().enumerate() {
        let proj = mesh.corner_positions(t).map(|p| camera.project(p));
        if camera.mode == Projection::Persp && proj.iter().any(|p| p.depth <= near) {
            stats.clipped += 1;
            continue;
        }
        match ScreenTriangle::new(proj.map(|p| DVec2::new(p.px, p.py)), w, h) {
            Ok(tri) => prepared.push(Prepared {
                tri,
                index: i as u32,
                depth: proj.map(|p| p.depth),
            }),
            Err(SetupError::Degenerate) => stats.degenerate += 1,
            Err(SetupError::OutOfRange) => stats.clipped += 1,
        }
    }

    let fwd = camera.frame().forward;
    let persp = camera.mode == Projection::Persp;
    let mut frags: Vec<Option<Fragment>> = vec![None; w * h];
    frags
        .par_chunks_mut(w * BAND_ROWS)
        .enumerate()
        .for_each(|(band, out)| {
            let rows = band * BAND_ROWS..((band + 1) * BAND_ROWS).min(h);
            for pre in &prepared {
                let r = pre.tri.rows();
                if r.end <= rows.start || r.start >= rows.end {
                    continue;
                }
                let t = &mesh.triangles[pre.index as usize];
                let ps = mesh.corner_positions(t);
                let ns = mesh.corner_normals(t);
                let uvs = mesh.corner_uvs(t);
                pre.tri.for_each_covered(rows.clone(), |x, y, b| {
                    let b = if persp {
                        let q = [b[0] / pre.depth[0], b[1] / pre.depth[1], b[2] / pre.depth[2]];
                        let s = q[0] + q[1] + q[2];
                        [q[0] / s, q[1] / s, q[2] / s]
                    } else {
                        b
                    };
                    let position = ps[0] * b[0] + ps[1] * b[1] + ps[2] * b[2];
                    let depth = (position - camera.position).dot(fwd);
                    let slot = &mut out[(y - rows.start) * w + x];
                    if slot.is_some_and(|f| f.depth <= depth) {
                        return;
                    }
                    let n = (ns[0] * b[0] + ns[1] * b[1] + ns[2] * b[2])
                        .try_normalize()
                        .unwrap_or_else(|| (ps[1] - ps[0]).cross(ps[2] - ps[0]).normalize());
                    *slot = Some(Fragment {
                        depth,
                        position,
                        normal: n,
                        uv: uvs[0] * b[0] + uvs[1] * b[1] + uvs[2] * b[2],
                        triangle: pre.index,
                    });
                });
            }
        });

    let mut gb = GBuffer {
        width: w,
        height: h,
        position: ImageF::zeros(w, h, 3)?,
        normal: ImageF::zeros(w, h, 3)?,
        uv: ImageF::zeros(w, h, 2)?,
        depth: ImageF::zeros(w, h, 1)?,
        mask: vec![false; w * h],
        triangle: vec![u32::MAX; w * h],
        stats,
    };
    for (i, f) in frags.iter().enumerate() {
        let Some(f) = f else { continue };
        let (x, y) = (i % w, i / w);
        gb.position.pixel_mut(x, y).copy_from_slice(&f.position.to_array());
        gb.normal.pixel_mut(x, y).copy_from_slice(&f.normal.to_array());
        gb.uv.pixel_mut(x, y).copy_from_slice(&f.uv.to_array());
        gb.depth.set(x, y, 0, f.depth);
        gb.mask[i] = true;
        gb.triangle[i] = f.triangle;
        gb.stats.covered_pixels += 1;
    }
    Ok(gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes;

    fn front_cam(extent: f64, res: usize) -> Camera {
        Camera::ortho(DVec3::new(0.0, 0.0, 5.0), DVec3::ZERO, DVec3::Y, extent, res, res)
    }

    #[test]
    fn facing_quad_fills_frame() {
        let gb = rasterize_gbuffer(&shapes::unit_quad(), &front_cam(0.5, 32)).unwrap();
        assert!(gb.mask.iter().all(|&m| m));
        for y in 0..32 {
            for x in 0..32 {
                assert!((gb.normal_at(x, y) - DVec3::Z).length() < 1e-12);
                assert!((gb.depth.get(x, y, 0) - 5.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wide_window_covers_a_quarter() {
        let gb = rasterize_gbuffer(&shapes::unit_quad(), &front_cam(1.0, 64)).unwrap();
        let frac = gb.coverage_fraction();
        // One extra row and column at most.
        assert!((frac - 0.25).abs() <= (2.0 * 33.0) / (64.0 * 64.0), "{frac}");
    }

    #[test]
    fn shared_edges_cover_each_pixel_once() {
        // Tiny fan of triangles sharing a vertex exactly on pixel centers.
        let pts = [
            DVec2::new(4.5, 4.5),
            DVec2::new(0.0, 0.0),
            DVec2::new(9.0, 0.0),
            DVec2::new(9.0, 9.0),
            DVec2::new(0.0, 9.0),
        ];
        let mut count = vec![0u32; 81];
        for k in 0..4 {
            let t = ScreenTriangle::new([pts[0], pts[1 + k], pts[1 + (k + 1) % 4]], 9, 9).unwrap();
            t.for_each_covered(0..9, |x, y, _| count[y * 9 + x] += 1);
        }
        assert!(count.iter().all(|&c| c == 1), "{count:?}");
    }

    #[test]
    fn degenerate_triangles_are_counted() {
        let mut m = shapes::unit_quad();
        let c = m.triangles[0][0];
        m.triangles.push([c, c, c]);
        let gb = rasterize_gbuffer(&m, &front_cam(0.5, 8)).unwrap();
        assert_eq!(gb.stats.degenerate, 1);
    }

    #[test]
    fn barycentrics_reproduce_vertex_attributes() {
        let t = ScreenTriangle::new([DVec2::new(0.5, 0.5), DVec2::new(7.5, 0.5), DVec2::new(0.5, 7.5)], 8, 8).unwrap();
        t.for_each_covered(0..8, |x, y, b| {
            let px = 0.5 * b[0] + 7.5 * b[1] + 0.5 * b[2];
            let py = 0.5 * b[0] + 0.5 * b[1] + 7.5 * b[2];
            assert!((px - (x as f64 + 0.5)).abs() < 1e-12 && (py - (y as f64 + 0.5)).abs() < 1e-12);
        });
    }

    #[test]
    fn band_split_matches_serial_result() {
        let mesh = shapes::torus(0.7, 0.25, 24, 12);
        let cam = Camera::persp(DVec3::new(0.3, 1.5, 3.0), DVec3::ZERO, DVec3::Y, 45.0, 37, 29);
        let a = rasterize_gbuffer(&mesh, &cam).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| rasterize_gbuffer(&mesh, &cam)).unwrap();
        assert_eq!(a.position, b.position);
        assert_eq!(a.triangle, b.triangle);
    }
}
