//! Z-buffered splat rendering with Lambertian shading.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::body::{BodyTemplate, Identity, PartId, Pose, NUM_PARTS};
use super::camera::{sample_camera, Aabb, Camera, CameraConfig};
use super::surface::{allocate_vertices, part_areas, posed_samples, SurfacePoint, SPLAT_FACTOR};
use super::AvatarError;

/// Largest fraction of subject pixels an occluder may hide.
pub const MAX_OCCLUDED_FRACTION: f64 = 0.2;

/// Parts whose splats grow under loose clothing.
const LOOSE_PARTS: [usize; 4] = [2, 3, 10, 11];
const LOOSE_SCALE: f64 = 1.6;

/// Per-sample clothing, background and noise, all drawn from one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub part_albedo: [[f64; 3]; NUM_PARTS],
    pub shoe: [f64; 3],
    pub background: [f64; 3],
    pub noise_sigma: f64,
    pub loose: bool,
    pub noise_seed: u64,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| 0.05 + 0.9 * rng.random::<f64>())
}

impl Appearance {
    pub fn sample(seed: u64, identity: &Identity, loose_clothing_prob: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let top = random_color(&mut rng);
        let bottom = random_color(&mut rng);
        let shoe = random_color(&mut rng);
        let background = random_color(&mut rng);
        let long_sleeves = rng.random::<f64>() < 0.5;
        let long_pants = rng.random::<f64>() < 0.7;
        let noise_sigma = 0.02 + 0.1 * rng.random::<f64>();
        let loose = rng.random::<f64>() < loose_clothing_prob;
        let noise_seed = rng.random();
        let skin = identity.skin;
        let mut part_albedo = [skin; NUM_PARTS];
        for i in [2, 4, 5] {
            part_albedo[i] = top;
        }
        for i in [3, 10, 11] {
            part_albedo[i] = bottom;
        }
        if long_sleeves {
            part_albedo[6] = top;
            part_albedo[7] = top;
        }
        if long_pants {
            part_albedo[12] = bottom;
            part_albedo[13] = bottom;
        }
        Self {
            part_albedo,
            shoe,
            background,
            noise_sigma,
            loose,
            noise_seed,
        }
    }

    fn albedo(&self, identity: &Identity, s: &SurfacePoint) -> [f64; 3] {
        let i = s.part.index();
        if s.part == PartId::HEAD {
            let n = s.local_normal;
            // hair on the crown and the back of the head
            if n.y > 0.3 || (n.z < -0.2 && n.y > -0.45) {
                return identity.hair;
            }
        }
        if (i == 12 || i == 13) && s.primitive == 1 {
            return self.shoe;
        }
        self.part_albedo[i]
    }
}

/// One rendered observation. Per-pixel buffers are row-major `H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderSample {
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB.
    pub image: Vec<u8>,
    /// 1 on the subject, 0 elsewhere.
    pub fg_mask: Vec<u8>,
    /// 0 background, 1..=14 part label.
    pub part_labels: Vec<u8>,
    /// Camera-space depth of the visible splat, `+inf` on background.
    pub depth: Vec<f32>,
    pub proj: [f64; 12],
    pub identity: u32,
    pub pose_seed: u64,
    pub camera_seed: u64,
    pub appearance_seed: u64,
}

/// Seeds that fully determine one sample given its identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleSeeds {
    pub pose: u64,
    pub camera: u64,
    pub appearance: u64,
}

/// Generator knobs shared by every sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub occlusion_prob: f64,
    pub loose_clothing_prob: f64,
    pub camera: CameraConfig,
    pub limits: super::body::JointLimits,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            occlusion_prob: 0.2,
            loose_clothing_prob: 0.0,
            camera: CameraConfig::default(),
            limits: super::body::JointLimits::default(),
        }
    }
}

fn check_size(height: usize, width: usize) -> Result<(), AvatarError> {
    if height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0 {
        return Err(AvatarError::Config(format!(
            "image size {height}x{width} must be positive multiples of 4"
        )));
    }
    Ok(())
}

/// Dense render splats for `vertices` cloud vertices and their per-part
/// spacing (meters).
fn splats(identity: &Identity, pose: &Pose, vertices: usize) -> Result<(Vec<SurfacePoint>, [f64; NUM_PARTS]), AvatarError> {
    let template = BodyTemplate::default();
    let areas = part_areas(&template, identity);
    let counts = allocate_vertices(&areas, vertices)?;
    let dense = counts.map(|c| c * SPLAT_FACTOR);
    let mut spacing = [0.0; NUM_PARTS];
    for i in 0..NUM_PARTS {
        spacing[i] = (areas[i] / dense[i] as f64).sqrt();
    }
    Ok((posed_samples(&template, identity, pose, &dense), spacing))
}

/// Renders with an explicit camera. `vertices` sets splat density
/// (`50 × vertices` splats).
#[allow(clippy::too_many_arguments)]
pub fn render(
    identity: &Identity,
    pose: &Pose,
    camera: &Camera,
    appearance_seed: u64,
    height: usize,
    width: usize,
    vertices: usize,
    loose_clothing_prob: f64,
) -> Result<RenderSample, AvatarError> {
    check_size(height, width)?;
    let (pts, spacing) = splats(identity, pose, vertices)?;
    let appearance = Appearance::sample(appearance_seed, identity, loose_clothing_prob);
    let bbox = Aabb::from_points(pts.iter().map(|p| &p.position));
    if !super::camera::box_in_frame(camera, &bbox, height, width) {
        return Err(AvatarError::Generation("subject is not fully inside the frame".into()));
    }
    let mut s = rasterize(identity, &pts, &spacing, camera, &appearance, height, width);
    s.identity = identity.id;
    s.appearance_seed = appearance_seed;
    Ok(s)
}

/// Samples pose and a framed camera from the seeds, then renders.
pub fn generate_sample(
    identity: &Identity,
    seeds: SampleSeeds,
    height: usize,
    width: usize,
    vertices: usize,
    options: &RenderOptions,
) -> Result<(RenderSample, Pose, Camera), AvatarError> {
    check_size(height, width)?;
    let pose = super::body::sample_pose(seeds.pose, &options.limits)?;
    let (pts, spacing) = splats(identity, &pose, vertices)?;
    let bbox = Aabb::from_points(pts.iter().map(|p| &p.position));
    let camera = sample_camera(seeds.camera, &bbox, height, width, &options.camera, options.occlusion_prob)?;
    let appearance = Appearance::sample(seeds.appearance, identity, options.loose_clothing_prob);
    let mut s = rasterize(identity, &pts, &spacing, &camera, &appearance, height, width);
    s.identity = identity.id;
    s.pose_seed = seeds.pose;
    s.camera_seed = seeds.camera;
    s.appearance_seed = seeds.appearance;
    Ok((s, pose, camera))
}

fn rasterize(
    identity: &Identity,
    pts: &[SurfacePoint],
    spacing: &[f64; NUM_PARTS],
    camera: &Camera,
    appearance: &Appearance,
    height: usize,
    width: usize,
) -> RenderSample {
    let n = height * width;
    let mut depth = vec![f32::INFINITY; n];
    let mut zbuf = vec![f64::INFINITY; n];
    let mut labels = vec![0u8; n];
    let mut color = vec![[0.0f64; 3]; n];
    let eye = -(camera.rotation.transpose() * camera.translation);
    for s in pts {
        let p = camera.project_point(&s.position);
        if !p.valid {
            continue;
        }
        let i = s.part.index();
        let loose = if appearance.loose && LOOSE_PARTS.contains(&i) { LOOSE_SCALE } else { 1.0 };
        let r = (0.9 * spacing[i] * camera.focal / p.depth).max(0.6) * loose;
        let shade = {
            let lambert = s.normal.dot(&camera.light).max(0.0);
            let facing = s.normal.dot(&(eye - s.position)) >= 0.0;
            let lit = camera.ambient + (1.0 - camera.ambient) * if facing { lambert } else { 0.0 };
            let a = appearance.albedo(identity, s);
            [a[0] * lit, a[1] * lit, a[2] * lit]
        };
        let (cu, cv) = (p.u.floor() as i64, p.v.floor() as i64);
        let reach = r.ceil() as i64;
        for y in (cv - reach).max(0)..=(cv + reach).min(height as i64 - 1) {
            for x in (cu - reach).max(0)..=(cu + reach).min(width as i64 - 1) {
                let dx = x as f64 + 0.5 - p.u;
                let dy = y as f64 + 0.5 - p.v;
                let own = x == cu && y == cv;
                if !own && dx * dx + dy * dy > r * r {
                    continue;
                }
                let k = y as usize * width + x as usize;
                if p.depth < zbuf[k] {
                    zbuf[k] = p.depth;
                    labels[k] = s.part.label();
                    color[k] = shade;
                }
            }
        }
    }
    if let Some(occ) = camera.occluder {
        apply_occluder(occ, &mut labels, &mut zbuf, &mut color, height, width);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(appearance.noise_seed);
    let noise = Normal::new(0.0, appearance.noise_sigma).expect("finite sigma");
    let mut image = vec![0u8; n * 3];
    for k in 0..n {
        let c = if labels[k] > 0 || zbuf[k] == f64::NEG_INFINITY {
            color[k]
        } else {
            let e = noise.sample(&mut rng);
            let b = appearance.background;
            [b[0] + e, b[1] + e, b[2] + e]
        };
        for ch in 0..3 {
            image[k * 3 + ch] = (c[ch] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
        if labels[k] > 0 {
            depth[k] = zbuf[k] as f32;
        }
    }
    RenderSample {
        height,
        width,
        image,
        fg_mask: labels.iter().map(|&l| (l > 0) as u8).collect(),
        part_labels: labels,
        depth,
        proj: camera.projection_row_major(),
        identity: 0,
        pose_seed: 0,
        camera_seed: 0,
        appearance_seed: 0,
    }
}

/// Shrinks the occluder about its center until it hides at most
/// [`MAX_OCCLUDED_FRACTION`] of the subject, then paints it. Occluded pixels
/// carry `-inf` in `zbuf` so they keep the occluder color.
fn apply_occluder(
    occ: super::camera::Occluder,
    labels: &mut [u8],
    zbuf: &mut [f64],
    color: &mut [[f64; 3]],
    height: usize,
    width: usize,
) {
    let fg = labels.iter().filter(|&&l| l > 0).count();
    let (cu, cv) = ((occ.u0 + occ.u1) / 2.0, (occ.v0 + occ.v1) / 2.0);
    let (mut hu, mut hv) = ((occ.u1 - occ.u0) / 2.0, (occ.v1 - occ.v0) / 2.0);
    let inside = |x: usize, y: usize, hu: f64, hv: f64| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        (px - cu).abs() < hu && (py - cv).abs() < hv
    };
    loop {
        let mut covered = 0;
        for y in 0..height {
            for x in 0..width {
                if labels[y * width + x] > 0 && inside(x, y, hu, hv) {
                    covered += 1;
                }
            }
        }
        if covered as f64 <= MAX_OCCLUDED_FRACTION * fg as f64 {
            break;
        }
        hu *= 0.9;
        hv *= 0.9;
    }
    let c = occ.color.map(|v| v as f64 / 255.0);
    for y in 0..height {
        for x in 0..width {
            if inside(x, y, hu, hv) {
                let k = y * width + x;
                labels[k] = 0;
                zbuf[k] = f64::NEG_INFINITY;
                color[k] = c;
            }
        }
    }
}

/// Majority part label of every 4×4 block over its foreground pixels; ties
/// go to the smaller label, empty blocks are background.
pub fn downsample_labels(labels: &[u8], height: usize, width: usize) -> Result<Vec<u8>, AvatarError> {
    check_size(height, width)?;
    if labels.len() != height * width {
        return Err(AvatarError::Config(format!(
            "label buffer holds {} values, expected {height}x{width}",
            labels.len()
        )));
    }
    let (h, w) = (height / 4, width / 4);
    let mut out = vec![0u8; h * w];
    for by in 0..h {
        for bx in 0..w {
            let mut hist = [0u32; NUM_PARTS + 1];
            for y in by * 4..by * 4 + 4 {
                for x in bx * 4..bx * 4 + 4 {
                    let l = labels[y * width + x] as usize;
                    if l > NUM_PARTS {
                        return Err(AvatarError::Config(format!("label {l} at ({y},{x}) out of range")));
                    }
                    hist[l] += 1;
                }
            }
            let (mut best, mut count) = (0, 0);
            for (l, &c) in hist.iter().enumerate().skip(1) {
                if c > count {
                    best = l;
                    count = c;
                }
            }
            out[by * w + bx] = best as u8;
        }
    }
    Ok(out)
}

/// 4-connected background components that do not touch the border.
pub fn enclosed_background(mask: &[u8], height: usize, width: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if mask[start] != 0 || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut comp = Vec::new();
        let mut border = false;
        while let Some(k) = stack.pop() {
            comp.push(k);
            let (y, x) = (k / width, k % width);
            if y == 0 || x == 0 || y + 1 == height || x + 1 == width {
                border = true;
            }
            let mut push = |j: usize| {
                if mask[j] == 0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                push(k - width);
            }
            if y + 1 < height {
                push(k + width);
            }
            if x > 0 {
                push(k - 1);
            }
            if x + 1 < width {
                push(k + 1);
            }
        }
        if !border {
            out.push(comp);
        }
    }
    out
}

/// Camera center in world coordinates.
pub fn camera_center(camera: &Camera) -> Vector3<f64> {
    -(camera.rotation.transpose() * camera.translation)
}
