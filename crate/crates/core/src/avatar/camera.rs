//! Pinhole camera, projection and seeded camera placement.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AvatarError;

/// Points closer than this to the image plane are invalid.
pub const NEAR_PLANE: f64 = 0.01;

/// Axis-aligned occluding rectangle in pixel coordinates (half-open).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub u0: f64,
    pub v0: f64,
    pub u1: f64,
    pub v1: f64,
    pub color: [u8; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation; camera looks along +z with image v pointing down.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Unit vector pointing toward the light.
    pub light: Vector3<f64>,
    pub ambient: f64,
    pub occluder: Option<Occluder>,
}

/// Camera-space projection of a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

impl Camera {
    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.focal, 0.0, self.cx, 0.0, self.focal, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn extrinsics(&self) -> Matrix3x4<f64> {
        let mut e = Matrix3x4::zeros();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        e.set_column(3, &self.translation);
        e
    }

    /// `K · [R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        self.intrinsics() * self.extrinsics()
    }

    /// Row-major 3×4 projection matrix.
    pub fn projection_row_major(&self) -> [f64; 12] {
        let p = self.projection_matrix();
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[r * 4 + c] = p[(r, c)];
            }
        }
        out
    }

    pub fn project_point(&self, p: &Vector3<f64>) -> Projected {
        let c = self.rotation * p + self.translation;
        if c.z <= NEAR_PLANE {
            return Projected {
                u: f64::NAN,
                v: f64::NAN,
                depth: c.z,
                valid: false,
            };
        }
        Projected {
            u: self.cx + self.focal * c.x / c.z,
            v: self.cy + self.focal * c.y / c.z,
            depth: c.z,
            valid: true,
        }
    }
}

/// Projects world points; invalid entries are flagged, never dropped.
pub fn project(camera: &Camera, points: &[[f64; 3]]) -> Vec<Projected> {
    points.iter().map(|p| camera.project_point(&Vector3::from(*p))).collect()
}

/// Ranges for random camera placement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    /// Azimuth around the subject in radians; 0 faces the subject's front.
    pub azimuth: (f64, f64),
    pub elevation: (f64, f64),
    /// Fraction of the image the subject's larger extent should fill.
    pub fill: (f64, f64),
    /// Focal length as a multiple of image width.
    pub focal_factor: f64,
    pub max_retries: usize,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            azimuth: (-0.9, 0.9),
            elevation: (-0.15, 0.35),
            fill: (0.7, 0.88),
            focal_factor: 1.2,
            max_retries: 25,
        }
    }
}

/// World-space box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Self {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        Self { min, max }
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let (a, b) = (self.min, self.max);
        std::array::from_fn(|i| {
            Vector3::new(
                if i & 1 == 0 { a.x } else { b.x },
                if i & 2 == 0 { a.y } else { b.y },
                if i & 4 == 0 { a.z } else { b.z },
            )
        })
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }
}

/// True when all box corners project strictly inside the image.
pub fn box_in_frame(camera: &Camera, bbox: &Aabb, height: usize, width: usize) -> bool {
    bbox.corners().iter().all(|c| {
        let p = camera.project_point(c);
        p.valid && p.u > 0.0 && p.v > 0.0 && p.u < width as f64 && p.v < height as f64
    })
}

fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Matrix3<f64> {
    let z = (target - eye).normalize();
    let up = Vector3::new(0.0, 1.0, 0.0);
    let x = z.cross(&up).normalize();
    let y = z.cross(&x);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Samples a framed camera for the posed subject bounding box. Placement,
/// lighting and (with probability `occlusion_prob`) an occluder all come from
/// `seed`.
pub fn sample_camera(
    seed: u64,
    bbox: &Aabb,
    height: usize,
    width: usize,
    config: &CameraConfig,
    occlusion_prob: f64,
) -> Result<Camera, AvatarError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let focal = config.focal_factor * width as f64;
    let extent = bbox.max - bbox.min;
    let span = extent.y.max(extent.x.hypot(extent.z));
    let size = height.min(width) as f64;
    for _ in 0..config.max_retries.max(1) {
        let az = uniform(&mut rng, config.azimuth);
        let el = uniform(&mut rng, config.elevation);
        let fill = uniform(&mut rng, config.fill);
        let dist = focal * span / (fill * size) + 0.5 * extent.x.hypot(extent.z);
        let dir = Vector3::new(az.sin() * el.cos(), el.sin(), az.cos() * el.cos());
        let jitter = Vector3::new(
            0.04 * span * (rng.random::<f64>() - 0.5),
            0.04 * span * (rng.random::<f64>() - 0.5),
            0.0,
        );
        let target = bbox.center() + jitter;
        let eye = target + dir * dist;
        let rotation = look_at(&eye, &target);
        let random_unit = {
            let z = 2.0 * rng.random::<f64>() - 1.0;
            let phi = 2.0 * PI * rng.random::<f64>();
            let r = (1.0 - z * z).sqrt();
            Vector3::new(r * phi.cos(), z, r * phi.sin())
        };
        let light = (dir + Vector3::new(0.0, 0.6, 0.0) + 0.7 * random_unit).normalize();
        let ambient = uniform(&mut rng, (0.25, 0.45));
        let cam = Camera {
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation: -(rotation * eye),
            light,
            ambient,
            occluder: None,
        };
        if box_in_frame(&cam, bbox, height, width) {
            let occluder = (rng.random::<f64>() < occlusion_prob).then(|| {
                let cu = uniform(&mut rng, (0.25, 0.75)) * width as f64;
                let cv = uniform(&mut rng, (0.1, 0.9)) * height as f64;
                let hw = uniform(&mut rng, (0.08, 0.25)) * width as f64;
                let hh = uniform(&mut rng, (0.08, 0.25)) * height as f64;
                let g = rng.random_range(40..200u8);
                Occluder {
                    u0: cu - hw,
                    v0: cv - hh,
                    u1: cu + hw,
                    v1: cv + hh,
                    color: [g, g.saturating_add(10), g.saturating_sub(10)],
                }
            });
            return Ok(Camera { occluder, ..cam });
        }
    }
    Err(AvatarError::Generation(format!(
        "no in-frame camera after {} attempts (seed {seed})",
        config.max_retries
    )))
}
