//! Procedural articulated humans with exact part labels.
//!
//! A fixed 14-part body built from capsules and ellipsoids is shaped per
//! identity, posed by forward kinematics, sampled into labeled point clouds
//! and rendered by z-buffered splatting.

mod body;
mod camera;
mod dataset;
mod io;
mod render;
mod surface;

use std::path::PathBuf;

use thiserror::Error;

pub use body::{
    make_identity, sample_pose, BodyTemplate, HeadBump, Identity, JointLimits, PartId, PartSpec, Pose, Primitive,
    NUM_PARTS, PART_NAMES, SCALE_BOUNDS,
};
pub use camera::{box_in_frame, project, sample_camera, Aabb, Camera, CameraConfig, Occluder, Projected, NEAR_PLANE};
pub use dataset::{
    dataset_generate, identities, identity_seed, load_clouds, load_sample, manifest_root, read_manifest, sample_seeds,
    GenerateConfig, LoadedSample, ManifestRecord, Split,
};
pub use io::{read_pcp, read_pnm, write_pcp, write_pgm, write_ppm, Raster};
pub use render::{
    camera_center, downsample_labels, enclosed_background, generate_sample, render, Appearance, RenderOptions,
    RenderSample, SampleSeeds, MAX_OCCLUDED_FRACTION,
};
pub use surface::{
    allocate_vertices, part_areas, pose_point_cloud, pose_point_cloud_with, posed_samples, primitive_area,
    LabeledCloud, SurfacePoint, SPLAT_FACTOR,
};

#[derive(Debug, Error)]
pub enum AvatarError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}: {msg}", path.display())]
    Format { path: PathBuf, line: usize, msg: String },
}
