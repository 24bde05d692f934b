use std::path::Path;

use glam::DVec3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    #[serde(alias = "orthographic")]
    Ortho,
    #[serde(alias = "perspective")]
    Persp,
}

fn default_fov() -> f64 {
    40.0
}

/// Pinhole or orthographic camera. Image `x` runs along the camera right
/// axis, image `y` runs downward; pixel `(i, j)` covers `[i, i+1) x [j, j+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub mode: Projection,
    pub position: DVec3,
    pub target: DVec3,
    pub up: DVec3,
    /// Orthographic half-height of the view window, in world units.
    #[serde(default)]
    pub extent: f64,
    /// Perspective vertical field of view, in degrees.
    #[serde(default = "default_fov")]
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

/// Orthonormal camera frame.
#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub right: DVec3,
    pub up: DVec3,
    pub forward: DVec3,
}

/// A world point mapped into continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub px: f64,
    pub py: f64,
    /// Distance along the view axis.
    pub depth: f64,
}

impl Camera {
    pub fn ortho(position: DVec3, target: DVec3, up: DVec3, extent: f64, width: usize, height: usize) -> Self {
        Camera {
            mode: Projection::Ortho,
            position,
            target,
            up,
            extent,
            fov_y: default_fov(),
            width,
            height,
        }
    }

    pub fn persp(position: DVec3, target: DVec3, up: DVec3, fov_y: f64, width: usize, height: usize) -> Self {
        Camera {
            mode: Projection::Persp,
            position,
            target,
            up,
            extent: 0.0,
            fov_y,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let view = self.target - self.position;
        if !(view.length() > 1e-12) {
            return Err(Error::InvalidArgument("camera view direction is zero".into()));
        }
        if view.normalize().cross(self.up).length() < 1e-9 {
            return Err(Error::InvalidArgument("camera up is parallel to the view direction".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("camera resolution must be at least 1x1".into()));
        }
        match self.mode {
            Projection::Ortho if !(self.extent > 0.0) => {
                Err(Error::InvalidArgument("orthographic extent must be positive".into()))
            }
            Projection::Persp if !(self.fov_y > 0.0 && self.fov_y < 180.0) => {
                Err(Error::InvalidArgument("perspective fov must be in (0, 180)".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn frame(&self) -> Frame {
        let forward = (self.target - self.position).normalize();
        let right = forward.cross(self.up).normalize();
        let up = right.cross(forward);
        Frame { right, up, forward }
    }

    fn aspect(&self) -> f64 {
        self.width as f64 / self.height as f64
    }

    /// Half extents of the image plane at unit depth (perspective) or in
    /// world units (orthographic).
    fn half_extents(&self) -> (f64, f64) {
        let h = match self.mode {
            Projection::Ortho => self.extent,
            Projection::Persp => (self.fov_y.to_radians() * 0.5).tan(),
        };
        (h * self.aspect(), h)
    }

    pub fn project(&self, p: DVec3) -> Projected {
        let f = self.frame();
        let d = p - self.position;
        let depth = d.dot(f.forward);
        let (hx, hy) = self.half_extents();
        let (mut sx, mut sy) = (d.dot(f.right), d.dot(f.up));
        if self.mode == Projection::Persp {
            sx /= depth;
            sy /= depth;
        }
        Projected {
            px: (sx / hx + 1.0) * 0.5 * self.width as f64,
            py: (1.0 - sy / hy) * 0.5 * self.height as f64,
            depth,
        }
    }

    /// Ray through continuous pixel coordinates. Returns `(origin, dir)`
    /// with unit `dir`.
    pub fn ray(&self, px: f64, py: f64) -> (DVec3, DVec3) {
        let f = self.frame();
        let (hx, hy) = self.half_extents();
        let sx = (px / self.width as f64 * 2.0 - 1.0) * hx;
        let sy = (1.0 - py / self.height as f64 * 2.0) * hy;
        match self.mode {
            Projection::Ortho => (self.position + f.right * sx + f.up * sy, f.forward),
            Projection::Persp => (
                self.position,
                (f.forward + f.right * sx + f.up * sy).normalize(),
            ),
        }
    }

    /// Unit vector from `p` toward the viewer.
    pub fn view_vector(&self, p: DVec3) -> DVec3 {
        match self.mode {
            Projection::Ortho => -self.frame().forward,
            Projection::Persp => (self.position - p).normalize(),
        }
    }

    /// World-space footprint of one pixel at `depth` (vertical).
    pub fn pixel_size_at(&self, depth: f64) -> f64 {
        let (_, hy) = self.half_extents();
        let h = match self.mode {
            Projection::Ortho => hy,
            Projection::Persp => hy * depth,
        };
        2.0 * h / self.height as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraSet {
    pub cameras: Vec<Camera>,
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let set: CameraSet = serde_json::from_str(&text)?;
    for c in &set.cameras {
        c.validate()?;
    }
    Ok(set.cameras)
}

pub fn save_cameras(cameras: &[Camera], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&CameraSet {
        cameras: cameras.to_vec(),
    })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_schema_parses() {
        let text = r#"{ "cameras": [ { "mode": "ortho", "position": [0,0,5], "target": [0,0,0],
                        "up": [0,1,0], "extent": 0.5, "width": 8, "height": 4 } ] }"#;
        let set: CameraSet = serde_json::from_str(text).unwrap();
        let c = &set.cameras[0];
        assert_eq!(c.mode, Projection::Ortho);
        assert_eq!((c.width, c.height), (8, 4));
        c.validate().unwrap();
    }

    #[test]
    fn validation_errors() {
        let ok = Camera::ortho(DVec3::Z, DVec3::ZERO, DVec3::Y, 1.0, 4, 4);
        ok.validate().unwrap();
        let mut c = ok.clone();
        c.target = c.position;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.up = DVec3::Z;
        assert!(c.validate().is_err());
        let mut c = ok;
        c.width = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn project_and_ray_agree() {
        for cam in [
            Camera::ortho(DVec3::new(1.0, 2.0, 5.0), DVec3::ZERO, DVec3::Y, 1.5, 32, 24),
            Camera::persp(DVec3::new(1.0, 2.0, 5.0), DVec3::ZERO, DVec3::Y, 50.0, 32, 24),
        ] {
            for &(px, py, t) in &[(3.2, 7.9, 2.0), (31.0, 0.5, 4.5), (16.0, 12.0, 1.0)] {
                let (o, d) = cam.ray(px, py);
                let p = o + d * t;
                let pr = cam.project(p);
                assert!((pr.px - px).abs() < 1e-9 && (pr.py - py).abs() < 1e-9);
                assert!((pr.depth - (p - cam.position).dot(cam.frame().forward)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn image_y_points_down() {
        let cam = Camera::ortho(DVec3::Z * 5.0, DVec3::ZERO, DVec3::Y, 1.0, 10, 10);
        assert!(cam.project(DVec3::new(0.0, 0.9, 0.0)).py < 1.0);
        assert!(cam.project(DVec3::new(0.9, 0.0, 0.0)).px > 9.0);
    }
}
