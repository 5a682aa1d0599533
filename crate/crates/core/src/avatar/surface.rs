//! Surface sampling of the posed body.
//!
//! Each part gets a deterministic low-discrepancy sample sequence over its
//! primitives. A cloud of `V` vertices and the `50·V` render splats share the
//! same sequences, so the cloud is a prefix of the splat set part by part.

use std::f64::consts::PI;

use nalgebra::{Point3, Vector3};

use super::body::{BodyTemplate, Identity, PartId, Pose, Primitive, NUM_PARTS};
use super::AvatarError;

/// Splats emitted per cloud vertex when rendering.
pub const SPLAT_FACTOR: usize = 50;

/// Point cloud with one part id per vertex; vertices are grouped by part in
/// ascending id order.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCloud {
    pub points: Vec<[f64; 3]>,
    pub parts: Vec<PartId>,
}

impl LabeledCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Vertex indices belonging to `part`, ascending.
    pub fn part_indices(&self, part: PartId) -> Vec<usize> {
        (0..self.parts.len()).filter(|&i| self.parts[i] == part).collect()
    }
}

/// Oriented surface sample in world coordinates.
#[derive(Clone, Copy, Debug)]
pub struct SurfacePoint {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// Normal in the part's local frame.
    pub local_normal: Vector3<f64>,
    pub part: PartId,
    /// Index of the primitive within the part.
    pub primitive: u8,
}

/// Surface area of a primitive.
pub fn primitive_area(p: &Primitive) -> f64 {
    match *p {
        Primitive::Capsule { length, radius, .. } => 2.0 * PI * radius * length + 4.0 * PI * radius * radius,
        Primitive::Ellipsoid { radii, .. } => {
            // Knud Thomsen's approximation, < 1.1% relative error
            let q = 1.6075;
            let (a, b, c) = (radii.x.powf(q), radii.y.powf(q), radii.z.powf(q));
            4.0 * PI * ((a * b + a * c + b * c) / 3.0).powf(1.0 / q)
        }
    }
}

/// Surface area of every part for `identity`.
pub fn part_areas(template: &BodyTemplate, identity: &Identity) -> [f64; NUM_PARTS] {
    let mut areas = [0.0; NUM_PARTS];
    for part in PartId::all() {
        areas[part.index()] = template.parts[part.index()]
            .primitives
            .iter()
            .map(|p| primitive_area(&identity.scaled_primitive(part, p)))
            .sum();
    }
    areas
}

/// Splits `total` vertices over parts: one per part, the rest proportional to
/// area by largest remainder (ties to the lower part id).
pub fn allocate_vertices(areas: &[f64; NUM_PARTS], total: usize) -> Result<[usize; NUM_PARTS], AvatarError> {
    if total < NUM_PARTS {
        return Err(AvatarError::Config(format!(
            "vertex count {total} is below one per part ({NUM_PARTS})"
        )));
    }
    let sum: f64 = areas.iter().sum();
    let free = (total - NUM_PARTS) as f64;
    let mut counts = [1usize; NUM_PARTS];
    let mut rema = [(0.0f64, 0usize); NUM_PARTS];
    let mut used = NUM_PARTS;
    for i in 0..NUM_PARTS {
        let q = free * areas[i] / sum;
        let f = q.floor();
        counts[i] += f as usize;
        used += f as usize;
        rema[i] = (q - f, i);
    }
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rema.iter().take(total - used) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// `k`-th point of the two-dimensional R2 sequence.
fn r2(k: usize) -> (f64, f64) {
    const G: f64 = 1.324_717_957_244_746;
    let a1 = 1.0 / G;
    let a2 = 1.0 / (G * G);
    let k = k as f64;
    ((0.5 + a1 * k).fract(), (0.5 + a2 * k).fract())
}

/// Area-uniform point and outward normal on a primitive from `(u, v) ∈ [0,1)²`.
fn sample_primitive(p: &Primitive, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
    let phi = 2.0 * PI * v;
    let (sp, cp) = phi.sin_cos();
    match *p {
        Primitive::Capsule {
            length,
            radius,
            dir,
        } => {
            let side = 2.0 * PI * radius * length;
            let cap = 2.0 * PI * radius * radius;
            let t = u * (side + 2.0 * cap);
            if t < side {
                let h = t / side * length;
                let n = Vector3::new(cp, 0.0, sp);
                (Vector3::new(radius * cp, dir * h, radius * sp), n)
            } else {
                let (w, end) = if t < side + cap {
                    ((t - side) / cap, 0.0)
                } else {
                    ((t - side - cap) / cap, 1.0)
                };
                // uniform on a hemisphere: cos(theta) uniform in [0,1)
                let ct = w;
                let st = (1.0 - ct * ct).sqrt();
                let outward = if end == 0.0 { -dir } else { dir };
                let n = Vector3::new(st * cp, outward * ct, st * sp);
                (n * radius + Vector3::new(0.0, end * dir * length, 0.0), n)
            }
        }
        Primitive::Ellipsoid { center, radii } => {
            let z = 1.0 - 2.0 * u;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let s = Vector3::new(r * cp, z, r * sp);
            let pos = center + s.component_mul(&radii);
            let n = Vector3::new(s.x / radii.x, s.y / radii.y, s.z / radii.z).normalize();
            (pos, n)
        }
    }
}

/// Strict interior test in the primitive's own frame.
fn inside(p: &Primitive, x: &Vector3<f64>) -> bool {
    const MARGIN: f64 = 1e-9;
    match *p {
        Primitive::Capsule {
            length,
            radius,
            dir,
        } => {
            let t = (x.y * dir).clamp(0.0, length);
            let d = Vector3::new(x.x, x.y - dir * t, x.z);
            d.norm() < radius * (1.0 - MARGIN)
        }
        Primitive::Ellipsoid { center, radii } => {
            let d = (x - center).component_div(&radii);
            d.norm_squared() < 1.0 - MARGIN
        }
    }
}

/// Sample stream of one part: R2 points mapped area-uniformly onto the
/// part's primitives.
fn part_sample(prims: &[Primitive], areas: &[f64], total: f64, k: usize) -> (usize, Vector3<f64>, Vector3<f64>) {
    let (u, v) = r2(k);
    let mut t = u * total;
    let mut idx = prims.len() - 1;
    for (i, &a) in areas.iter().enumerate() {
        if t < a {
            idx = i;
            break;
        }
        t -= a;
    }
    let uu = (t / areas[idx]).clamp(0.0, 1.0 - 1e-12);
    let (pos, n) = sample_primitive(&prims[idx], uu, v);
    (idx, pos, n)
}

/// Posed surface samples with `per_part[i]` samples for part `i`, grouped by
/// part. Candidates hidden inside any other primitive of the posed body are
/// skipped, so only the outer surface of the union is sampled; the candidate
/// stream is fixed, which keeps smaller sets prefixes of larger ones.
pub fn posed_samples(
    template: &BodyTemplate,
    identity: &Identity,
    pose: &Pose,
    per_part: &[usize; NUM_PARTS],
) -> Vec<SurfacePoint> {
    let frames = pose.forward_kinematics(template, identity);
    let prims: Vec<Vec<Primitive>> = PartId::all()
        .map(|part| {
            template.parts[part.index()]
                .primitives
                .iter()
                .map(|p| identity.scaled_primitive(part, p))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(per_part.iter().sum());
    for part in PartId::all() {
        let i = part.index();
        let frame = &frames[i];
        let areas: Vec<f64> = prims[i].iter().map(primitive_area).collect();
        let total: f64 = areas.iter().sum();
        let want = per_part[i];
        let mut taken = 0;
        let mut k = 0;
        // the cap only matters for degenerate bodies where a part is buried
        let cap = 64 * want + 1024;
        while taken < want {
            let (idx, mut pos, n) = part_sample(&prims[i], &areas, total, k);
            k += 1;
            if part == PartId::HEAD {
                if let Primitive::Ellipsoid { center, radii } = prims[i][idx] {
                    let mean_r = (radii.x + radii.y + radii.z) / 3.0;
                    pos += n * (mean_r * identity.head_displacement(&(pos - center).normalize()));
                }
            }
            let world = frame * Point3::from(pos);
            let hidden = k <= cap
                && (0..NUM_PARTS).any(|j| {
                    let local = frames[j].inverse_transform_point(&world).coords;
                    prims[j]
                        .iter()
                        .enumerate()
                        .any(|(pi, p)| !(j == i && pi == idx) && inside(p, &local))
                });
            if hidden {
                continue;
            }
            out.push(SurfacePoint {
                position: world.coords,
                normal: frame.rotation * n,
                local_normal: n,
                part,
                primitive: idx as u8,
            });
            taken += 1;
        }
    }
    out
}

/// Labeled `V`-vertex cloud over the posed surface.
pub fn pose_point_cloud(identity: &Identity, pose: &Pose, vertices: usize) -> Result<LabeledCloud, AvatarError> {
    pose_point_cloud_with(&BodyTemplate::default(), identity, pose, vertices)
}

pub fn pose_point_cloud_with(
    template: &BodyTemplate,
    identity: &Identity,
    pose: &Pose,
    vertices: usize,
) -> Result<LabeledCloud, AvatarError> {
    let counts = allocate_vertices(&part_areas(template, identity), vertices)?;
    let samples = posed_samples(template, identity, pose, &counts);
    Ok(LabeledCloud {
        points: samples.iter().map(|s| s.position.into()).collect(),
        parts: samples.iter().map(|s| s.part).collect(),
    })
}
