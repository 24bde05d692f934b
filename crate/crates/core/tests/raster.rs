use glam::{DVec2, DVec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use matforge::camera::Camera;
use matforge::mesh::{shapes, vertex_normals, Corner, TriMesh};
use matforge::rasterize_gbuffer;

fn soup(rng: &mut ChaCha8Rng, count: usize) -> TriMesh {
    let mut positions = Vec::new();
    let mut triangles = Vec::new();
    for t in 0..count {
        let c = DVec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6));
        for _ in 0..3 {
            positions.push(c + DVec3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)));
        }
        let corner = |k: usize| Corner {
            position: 3 * t + k,
            normal: 3 * t + k,
            uv: None,
        };
        triangles.push([corner(0), corner(1), corner(2)]);
    }
    let normals = vertex_normals(&positions, &triangles);
    TriMesh {
        positions,
        normals,
        uvs: Vec::<DVec2>::new(),
        triangles,
    }
}

/// Nearest hit along the ray, as distance along the camera axis.
fn ray_cast(mesh: &TriMesh, origin: DVec3, dir: DVec3, forward: DVec3, cam_pos: DVec3) -> Option<f64> {
    let mut best: Option<f64> = None;
    for t in &mesh.triangles {
        let [a, b, c] = mesh.corner_positions(t);
        let (e1, e2) = (b - a, c - a);
        let p = dir.cross(e2);
        let det = e1.dot(p);
        if det.abs() < 1e-14 {
            continue;
        }
        let s = origin - a;
        let u = s.dot(p) / det;
        let q = s.cross(e1);
        let v = dir.dot(q) / det;
        if u < 0.0 || v < 0.0 || u + v > 1.0 {
            continue;
        }
        let dist = e2.dot(q) / det;
        if dist <= 0.0 {
            continue;
        }
        let depth = (origin + dir * dist - cam_pos).dot(forward);
        if best.is_none_or(|d| depth < d) {
            best = Some(depth);
        }
    }
    best
}

fn random_camera(rng: &mut ChaCha8Rng, persp: bool) -> Camera {
    let dir = loop {
        let d = DVec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if d.length_squared() > 0.05 && d.length_squared() <= 1.0 {
            break d.normalize();
        }
    };
    let up = if dir.y.abs() > 0.9 { DVec3::Z } else { DVec3::Y };
    let (w, h) = (rng.gen_range(60..90), rng.gen_range(50..80));
    if persp {
        Camera::persp(dir * 3.5, DVec3::ZERO, up, 45.0, w, h)
    } else {
        Camera::ortho(dir * 3.5, DVec3::ZERO, up, 1.3, w, h)
    }
}

#[test]
fn depth_matches_ray_casting() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let meshes = [shapes::icosphere(2), shapes::torus(0.8, 0.3, 24, 12), soup(&mut rng, 40)];
    let (mut agree, mut total) = (0usize, 0usize);
    for mesh in &meshes {
        for k in 0..10 {
            let cam = random_camera(&mut rng, k % 2 == 1);
            let g = rasterize_gbuffer(mesh, &cam).unwrap();
            let fwd = cam.frame().forward;
            for y in 0..cam.height {
                for x in 0..cam.width {
                    let (o, d) = cam.ray(x as f64 + 0.5, y as f64 + 0.5);
                    let want = ray_cast(mesh, o, d, fwd, cam.position);
                    let got = g.covered(x, y).then(|| g.depth.get(x, y, 0));
                    if want.is_none() && got.is_none() {
                        continue;
                    }
                    total += 1;
                    if let (Some(a), Some(b)) = (want, got) {
                        if (a - b).abs() < 1e-3 {
                            agree += 1;
                        }
                    }
                }
            }
        }
    }
    let frac = agree as f64 / total as f64;
    assert!(frac >= 0.999, "{agree}/{total} = {frac}");
}

#[test]
fn positions_reproject_to_their_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mesh = shapes::torus(0.8, 0.3, 32, 16);
    for k in 0..6 {
        let cam = random_camera(&mut rng, k % 2 == 0);
        let g = rasterize_gbuffer(&mesh, &cam).unwrap();
        let mut worst: f64 = 0.0;
        for y in 0..cam.height {
            for x in 0..cam.width {
                if !g.covered(x, y) {
                    continue;
                }
                let p = cam.project(g.position_at(x, y));
                worst = worst.max((p.px - (x as f64 + 0.5)).abs()).max((p.py - (y as f64 + 0.5)).abs());
            }
        }
        assert!(worst < 0.75, "camera {k}: {worst}");
    }
}
