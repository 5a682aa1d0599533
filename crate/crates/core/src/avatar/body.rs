//! Articulated body: fixed 14-part kinematic tree, per-identity shape, poses.

use std::f64::consts::PI;

use nalgebra::{Isometry3, Rotation3, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AvatarError;

pub const NUM_PARTS: usize = 14;

/// Body part id in `0..14`. Label images store `id + 1`, with 0 for background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PartId(u8);

impl PartId {
    pub const HEAD: PartId = PartId(0);
    pub const NECK: PartId = PartId(1);
    pub const TORSO: PartId = PartId(2);
    pub const PELVIS: PartId = PartId(3);

    pub fn new(id: u8) -> Option<Self> {
        ((id as usize) < NUM_PARTS).then_some(Self(id))
    }

    /// From a label-image value in `1..=14`.
    pub fn from_label(label: u8) -> Option<Self> {
        label.checked_sub(1).and_then(Self::new)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn label(self) -> u8 {
        self.0 + 1
    }

    pub fn name(self) -> &'static str {
        PART_NAMES[self.index()]
    }

    pub fn all() -> impl Iterator<Item = PartId> {
        (0..NUM_PARTS as u8).map(PartId)
    }
}

pub const PART_NAMES: [&str; NUM_PARTS] = [
    "head",
    "neck",
    "torso",
    "pelvis",
    "left upper arm",
    "right upper arm",
    "left forearm",
    "right forearm",
    "left hand",
    "right hand",
    "left thigh",
    "right thigh",
    "left shin and foot",
    "right shin and foot",
];

/// Surface primitive in a part's local frame; the bone runs along local ±y.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    /// Segment from the origin to `(0, dir·length, 0)` swept by `radius`.
    Capsule { length: f64, radius: f64, dir: f64 },
    /// Axis-aligned ellipsoid centred at `center`.
    Ellipsoid { center: Vector3<f64>, radii: Vector3<f64> },
}

#[derive(Clone, Debug)]
pub struct PartSpec {
    pub parent: Option<PartId>,
    /// Joint position in the parent's local frame (template scale).
    pub offset: Vector3<f64>,
    /// Fixed rotation of the local frame relative to the parent's in rest pose.
    pub rest: Rotation3<f64>,
    pub primitives: Vec<Primitive>,
}

/// Template body with default dimensions in meters. Part index = [`PartId`].
#[derive(Clone, Debug)]
pub struct BodyTemplate {
    pub parts: Vec<PartSpec>,
}

fn capsule(length: f64, radius: f64, dir: f64) -> Primitive {
    Primitive::Capsule {
        length,
        radius,
        dir,
    }
}

fn ellipsoid(center: [f64; 3], radii: [f64; 3]) -> Primitive {
    Primitive::Ellipsoid {
        center: Vector3::from(center),
        radii: Vector3::from(radii),
    }
}

impl Default for BodyTemplate {
    fn default() -> Self {
        let none = Rotation3::identity();
        let rz = |a: f64| Rotation3::from_axis_angle(&Vector3::z_axis(), a);
        let p = |i: u8| Some(PartId(i));
        let v = |x: f64, y: f64, z: f64| Vector3::new(x, y, z);
        let spec = |parent, offset, rest, primitives| PartSpec {
            parent,
            offset,
            rest,
            primitives,
        };
        let upper_arm = 0.28;
        let forearm = 0.25;
        let thigh = 0.42;
        let shin = 0.42;
        let parts = vec![
            // head
            spec(p(1), v(0.0, 0.08, 0.0), none, vec![ellipsoid([0.0, 0.11, 0.01], [0.085, 0.115, 0.10])]),
            // neck
            spec(p(2), v(0.0, 0.50, 0.0), none, vec![capsule(0.07, 0.05, 1.0)]),
            // torso
            spec(p(3), v(0.0, 0.08, 0.0), none, vec![ellipsoid([0.0, 0.25, 0.0], [0.17, 0.26, 0.11])]),
            // pelvis (root)
            spec(None, v(0.0, 0.0, 0.0), none, vec![ellipsoid([0.0, 0.0, 0.0], [0.16, 0.11, 0.11])]),
            // upper arms
            spec(p(2), v(0.21, 0.44, 0.0), rz(0.35), vec![capsule(upper_arm, 0.048, -1.0)]),
            spec(p(2), v(-0.21, 0.44, 0.0), rz(-0.35), vec![capsule(upper_arm, 0.048, -1.0)]),
            // forearms
            spec(p(4), v(0.0, -upper_arm, 0.0), none, vec![capsule(forearm, 0.038, -1.0)]),
            spec(p(5), v(0.0, -upper_arm, 0.0), none, vec![capsule(forearm, 0.038, -1.0)]),
            // hands
            spec(p(6), v(0.0, -forearm, 0.0), none, vec![ellipsoid([0.0, -0.08, 0.0], [0.03, 0.08, 0.045])]),
            spec(p(7), v(0.0, -forearm, 0.0), none, vec![ellipsoid([0.0, -0.08, 0.0], [0.03, 0.08, 0.045])]),
            // thighs
            spec(p(3), v(0.09, -0.06, 0.0), rz(0.04), vec![capsule(thigh, 0.072, -1.0)]),
            spec(p(3), v(-0.09, -0.06, 0.0), rz(-0.04), vec![capsule(thigh, 0.072, -1.0)]),
            // shins with feet
            spec(
                p(10),
                v(0.0, -thigh, 0.0),
                rz(-0.04),
                vec![capsule(shin, 0.052, -1.0), ellipsoid([0.0, -0.45, 0.05], [0.045, 0.035, 0.11])],
            ),
            spec(
                p(11),
                v(0.0, -thigh, 0.0),
                rz(0.04),
                vec![capsule(shin, 0.052, -1.0), ellipsoid([0.0, -0.45, 0.05], [0.045, 0.035, 0.11])],
            ),
        ];
        Self { parts }
    }
}

impl BodyTemplate {
    /// Parts ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> Vec<PartId> {
        let mut order = Vec::with_capacity(NUM_PARTS);
        let mut placed = [false; NUM_PARTS];
        while order.len() < self.parts.len() {
            let before = order.len();
            for (i, spec) in self.parts.iter().enumerate() {
                if placed[i] {
                    continue;
                }
                if spec.parent.is_none_or(|p| placed[p.index()]) {
                    placed[i] = true;
                    order.push(PartId(i as u8));
                }
            }
            assert!(order.len() > before, "kinematic tree has a cycle");
        }
        order
    }
}

/// Per-identity body shape and coloring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub id: u32,
    pub seed: u64,
    /// Per-part bone-length scale.
    pub length_scale: [f64; NUM_PARTS],
    /// Per-part girth scale.
    pub radius_scale: [f64; NUM_PARTS],
    pub head_bumps: Vec<HeadBump>,
    pub skin: [f64; 3],
    pub hair: [f64; 3],
}

/// One lobe of the per-identity head surface displacement field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadBump {
    pub direction: [f64; 3],
    pub amplitude: f64,
    pub sharpness: f64,
}

pub const SCALE_BOUNDS: (f64, f64) = (0.7, 1.3);

/// Weight of the whole-body factor in each part scale.
const SHARED: f64 = 0.8;

/// `perturbation` is the maximum relative deviation from template scales.
pub fn make_identity(id: u32, seed: u64, perturbation: f64) -> Identity {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sym = |rng: &mut ChaCha8Rng| rng.random::<f64>() * 2.0 - 1.0;
    // whole-body height and build spread over identities on a low-discrepancy
    // sequence so that bodies stay far apart; per-part jitter comes on top
    let r2 = |alpha: f64| 2.0 * (0.5 + f64::from(id) * alpha).fract() - 1.0;
    let height = r2(0.754_877_666_2);
    let build = r2(0.569_840_290_9);
    let clamp = |v: f64| v.clamp(SCALE_BOUNDS.0, SCALE_BOUNDS.1);
    let mut length_scale = [1.0; NUM_PARTS];
    let mut radius_scale = [1.0; NUM_PARTS];
    for i in 0..NUM_PARTS {
        let l = SHARED * height + (1.0 - SHARED) * sym(&mut rng);
        let r = SHARED * build + (1.0 - SHARED) * sym(&mut rng);
        length_scale[i] = clamp(1.0 + perturbation * l);
        radius_scale[i] = clamp(1.0 + perturbation * r);
    }
    // keep left/right limbs symmetric
    for (l, r) in [(4, 5), (6, 7), (8, 9), (10, 11), (12, 13)] {
        length_scale[r] = length_scale[l];
        radius_scale[r] = radius_scale[l];
    }
    let head_bumps = (0..6)
        .map(|_| {
            let z = sym(&mut rng);
            let phi = rng.random::<f64>() * 2.0 * PI;
            let s = (1.0 - z * z).sqrt();
            HeadBump {
                direction: [s * phi.cos(), z, s * phi.sin()],
                amplitude: 0.08 * rng.random::<f64>(),
                sharpness: 2.0 + 6.0 * rng.random::<f64>(),
            }
        })
        .collect();
    // skin tone along a light-to-dark ramp, hair from a small palette with jitter
    let tone = rng.random::<f64>();
    let skin_light = [0.95, 0.80, 0.68];
    let skin_dark = [0.36, 0.23, 0.16];
    let mut skin = [0.0; 3];
    for c in 0..3 {
        skin[c] = skin_light[c] * (1.0 - tone) + skin_dark[c] * tone + 0.04 * sym(&mut rng);
    }
    const HAIR: [[f64; 3]; 6] = [
        [0.06, 0.05, 0.05],
        [0.30, 0.18, 0.09],
        [0.85, 0.70, 0.40],
        [0.60, 0.22, 0.08],
        [0.65, 0.65, 0.65],
        [0.15, 0.10, 0.30],
    ];
    let base = HAIR[rng.random_range(0..HAIR.len())];
    let mut hair = [0.0; 3];
    for c in 0..3 {
        hair[c] = (base[c] + 0.06 * sym(&mut rng)).clamp(0.0, 1.0);
    }
    for c in &mut skin {
        *c = c.clamp(0.0, 1.0);
    }
    Identity {
        id,
        seed,
        length_scale,
        radius_scale,
        head_bumps,
        skin,
        hair,
    }
}

impl Identity {
    /// Template-default shape; used when no perturbation is requested.
    pub fn template(id: u32) -> Self {
        make_identity(id, 0, 0.0)
    }

    /// Radial displacement factor of the head surface along unit normal `n`.
    pub fn head_displacement(&self, n: &Vector3<f64>) -> f64 {
        self.head_bumps
            .iter()
            .map(|b| {
                let d = Vector3::from(b.direction);
                let c = n.dot(&d).max(0.0);
                b.amplitude * c.powf(b.sharpness)
            })
            .sum()
    }

    /// Primitive of `part` with this identity's scales applied.
    pub fn scaled_primitive(&self, part: PartId, prim: &Primitive) -> Primitive {
        let sl = self.length_scale[part.index()];
        let sr = self.radius_scale[part.index()];
        match *prim {
            Primitive::Capsule {
                length,
                radius,
                dir,
            } => Primitive::Capsule {
                length: length * sl,
                radius: radius * sr,
                dir,
            },
            Primitive::Ellipsoid { center, radii } => Primitive::Ellipsoid {
                center: Vector3::new(center.x * sr, center.y * sl, center.z * sr),
                radii: Vector3::new(radii.x * sr, radii.y * sl, radii.z * sr),
            },
        }
    }

    /// Joint offset of `part` scaled by its parent's shape.
    pub fn scaled_offset(&self, template: &BodyTemplate, part: PartId) -> Vector3<f64> {
        let spec = &template.parts[part.index()];
        match spec.parent {
            None => spec.offset,
            Some(p) => {
                let sl = self.length_scale[p.index()];
                let sr = self.radius_scale[p.index()];
                Vector3::new(spec.offset.x * sr, spec.offset.y * sl, spec.offset.z * sr)
            }
        }
    }
}

/// Per-joint Euler angles (x, y, z) in radians, one joint per part.
/// The pelvis joint carries the global body orientation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub angles: [[f64; 3]; NUM_PARTS],
}

impl Pose {
    pub fn rest() -> Self {
        Self {
            angles: [[0.0; 3]; NUM_PARTS],
        }
    }

    pub fn rotation(&self, part: PartId) -> Rotation3<f64> {
        let [x, y, z] = self.angles[part.index()];
        Rotation3::from_axis_angle(&Vector3::z_axis(), z)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), y)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), x)
    }

    /// World transform of every part's local frame.
    pub fn forward_kinematics(&self, template: &BodyTemplate, identity: &Identity) -> Vec<Isometry3<f64>> {
        let mut frames = vec![Isometry3::identity(); NUM_PARTS];
        for part in template.topological_order() {
            let spec = &template.parts[part.index()];
            let local_rot = spec.rest * self.rotation(part);
            let local = Isometry3::from_parts(
                Translation3::from(identity.scaled_offset(template, part)),
                UnitQuaternion::from_rotation_matrix(&local_rot),
            );
            frames[part.index()] = match spec.parent {
                None => local,
                Some(p) => frames[p.index()] * local,
            };
        }
        frames
    }
}

/// Inclusive angle interval per joint axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub lo: [[f64; 3]; NUM_PARTS],
    pub hi: [[f64; 3]; NUM_PARTS],
}

impl Default for JointLimits {
    fn default() -> Self {
        let mut lo = [[0.0; 3]; NUM_PARTS];
        let mut hi = [[0.0; 3]; NUM_PARTS];
        let mut set = |i: usize, l: [f64; 3], h: [f64; 3]| {
            lo[i] = l;
            hi[i] = h;
        };
        set(0, [-0.3, -0.6, -0.2], [0.3, 0.6, 0.2]);
        set(1, [-0.3, -0.4, -0.15], [0.35, 0.4, 0.15]);
        set(2, [-0.15, -0.35, -0.2], [0.45, 0.35, 0.2]);
        set(3, [-0.12, -PI / 5.0, -0.08], [0.12, PI / 5.0, 0.08]);
        set(4, [-1.3, -0.5, -0.3], [0.7, 0.5, 1.2]);
        set(5, [-1.3, -0.5, -1.2], [0.7, 0.5, 0.3]);
        set(6, [-2.0, -0.4, -0.1], [0.0, 0.4, 0.1]);
        set(7, [-2.0, -0.4, -0.1], [0.0, 0.4, 0.1]);
        set(8, [-0.5, -0.4, -0.3], [0.5, 0.4, 0.3]);
        set(9, [-0.5, -0.4, -0.3], [0.5, 0.4, 0.3]);
        set(10, [-1.1, -0.3, -0.05], [0.45, 0.3, 0.45]);
        set(11, [-1.1, -0.3, -0.45], [0.45, 0.3, 0.05]);
        set(12, [0.0, -0.2, -0.05], [1.8, 0.2, 0.05]);
        set(13, [0.0, -0.2, -0.05], [1.8, 0.2, 0.05]);
        Self { lo, hi }
    }
}

impl JointLimits {
    pub fn validate(&self) -> Result<(), AvatarError> {
        for i in 0..NUM_PARTS {
            for a in 0..3 {
                let (l, h) = (self.lo[i][a], self.hi[i][a]);
                if !(l.is_finite() && h.is_finite() && l <= h) {
                    return Err(AvatarError::Config(format!(
                        "joint limits for {} axis {a}: lo {l} > hi {h}",
                        PART_NAMES[i]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, pose: &Pose) -> bool {
        (0..NUM_PARTS).all(|i| (0..3).all(|a| pose.angles[i][a] >= self.lo[i][a] && pose.angles[i][a] <= self.hi[i][a]))
    }
}

/// Samples a pose from a gait-like template (phase-coupled arm and leg swing)
/// plus independent per-joint jitter, clamped into `limits`.
pub fn sample_pose(seed: u64, limits: &JointLimits) -> Result<Pose, AvatarError> {
    limits.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rng.random::<f64>() * 2.0 * PI;
    let stride = rng.random::<f64>();
    let (s, c) = phase.sin_cos();
    let mut a = [[0.0; 3]; NUM_PARTS];
    // legs swing in antiphase, knees bend on the trailing leg
    a[10][0] = -0.55 * stride * s;
    a[11][0] = 0.55 * stride * s;
    a[12][0] = 0.9 * stride * (0.5 + 0.5 * c).max(0.0) * (s < 0.0) as u8 as f64 + 0.1;
    a[13][0] = 0.9 * stride * (0.5 - 0.5 * c).max(0.0) * (s > 0.0) as u8 as f64 + 0.1;
    // arms counter-swing
    a[4][0] = 0.45 * stride * s;
    a[5][0] = -0.45 * stride * s;
    a[6][0] = -0.3 - 0.6 * rng.random::<f64>();
    a[7][0] = -0.3 - 0.6 * rng.random::<f64>();
    let mut angles = [[0.0; 3]; NUM_PARTS];
    for i in 0..NUM_PARTS {
        for k in 0..3 {
            let (lo, hi) = (limits.lo[i][k], limits.hi[i][k]);
            let jitter = if i == PartId::PELVIS.index() && k == 1 {
                // body yaw spans its whole range
                lo + (hi - lo) * rng.random::<f64>()
            } else {
                a[i][k] + 0.25 * (hi - lo) * (rng.random::<f64>() - 0.5)
            };
            angles[i][k] = jitter.clamp(lo, hi);
        }
    }
    Ok(Pose { angles })
}
