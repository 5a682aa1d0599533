//! Dataset generation: rendered samples, per-identity clouds and a manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::body::{make_identity, Identity, Pose};
use super::io::{read_pcp, read_pnm, write_pcp, write_pgm, write_ppm};
use super::render::{generate_sample, RenderOptions, RenderSample, SampleSeeds};
use super::surface::{pose_point_cloud, LabeledCloud};
use super::AvatarError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub identities: u32,
    pub train_images: u32,
    pub test_images: u32,
    pub height: usize,
    pub width: usize,
    pub vertices: usize,
    pub seed: u64,
    /// Maximum relative deviation of body scales from the template.
    pub perturbation: f64,
    pub occlusion_prob: f64,
    pub loose_clothing_prob: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            identities: 8,
            train_images: 500,
            test_images: 20,
            height: 64,
            width: 64,
            vertices: 256,
            seed: 7,
            perturbation: 0.3,
            occlusion_prob: 0.2,
            loose_clothing_prob: 0.0,
        }
    }
}

impl GenerateConfig {
    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            occlusion_prob: self.occlusion_prob,
            loose_clothing_prob: self.loose_clothing_prob,
            ..RenderOptions::default()
        }
    }

    pub fn validate(&self) -> Result<(), AvatarError> {
        let fail = |m: String| Err(AvatarError::Config(m));
        if self.identities == 0 {
            return fail("identities must be positive".into());
        }
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height == 0 || self.width == 0 {
            return fail(format!("image size {}x{} must be positive multiples of 4", self.height, self.width));
        }
        if self.vertices < super::NUM_PARTS {
            return fail(format!("vertices {} below the part count", self.vertices));
        }
        if self.train_images >= 1 << 24 || self.test_images >= 1 << 24 || self.identities >= 1 << 16 {
            return fail("image or identity count exceeds the seed layout".into());
        }
        for (name, p) in [
            ("occlusion_prob", self.occlusion_prob),
            ("loose_clothing_prob", self.loose_clothing_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(0.0..=0.3).contains(&self.perturbation) {
            return fail(format!("perturbation {} outside [0, 0.3]", self.perturbation));
        }
        Ok(())
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub mask: String,
    pub labels: String,
    pub pcp: String,
    pub identity: u32,
    pub proj: [f64; 12],
    pub pose_seed: u64,
    pub camera_seed: u64,
    pub appearance_seed: u64,
    pub split: Split,
}

// Seed layout: bits 48.. master seed, bit 47 split, bits 40..42 purpose,
// bits 24..40 identity, bits 0..24 image index. Train and test therefore
// occupy disjoint ranges.
const PURPOSE_POSE: u64 = 0;
const PURPOSE_CAMERA: u64 = 1;
const PURPOSE_APPEARANCE: u64 = 2;
const PURPOSE_IDENTITY: u64 = 7;

fn seed_base(master: u64) -> u64 {
    (master & 0xFFFF) << 48
}

pub fn identity_seed(master: u64, id: u32) -> u64 {
    seed_base(master) | PURPOSE_IDENTITY << 40 | (id as u64 & 0xFFFF) << 24
}

pub fn sample_seeds(master: u64, split: Split, id: u32, index: u32) -> SampleSeeds {
    let split_bit = match split {
        Split::Train => 0,
        Split::Test => 1u64 << 47,
    };
    let base = seed_base(master) | split_bit | (id as u64 & 0xFFFF) << 24 | (index as u64 & 0xFF_FFFF);
    SampleSeeds {
        pose: base | PURPOSE_POSE << 40,
        camera: base | PURPOSE_CAMERA << 40,
        appearance: base | PURPOSE_APPEARANCE << 40,
    }
}

pub fn identities(config: &GenerateConfig) -> Vec<Identity> {
    (0..config.identities)
        .map(|i| make_identity(i, identity_seed(config.seed, i), config.perturbation))
        .collect()
}

fn mkdir(path: &Path) -> Result<(), AvatarError> {
    fs::create_dir_all(path).map_err(|source| AvatarError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Renders every sample, writes all files under `out_dir` and returns the
/// manifest records in file order (train then test, by identity then index).
pub fn dataset_generate(config: &GenerateConfig, out_dir: &Path) -> Result<Vec<ManifestRecord>, AvatarError> {
    config.validate()?;
    for sub in ["clouds", "images", "masks", "labels"] {
        mkdir(&out_dir.join(sub))?;
    }
    let ids = identities(config);
    for id in &ids {
        let cloud = pose_point_cloud(id, &Pose::rest(), config.vertices)?;
        write_pcp(&out_dir.join(cloud_path(id.id)), &cloud)?;
    }
    let mut jobs = Vec::new();
    for (split, n) in [(Split::Train, config.train_images), (Split::Test, config.test_images)] {
        for id in 0..config.identities {
            for k in 0..n {
                jobs.push((split, id, k));
            }
        }
    }
    let opts = config.render_options();
    let records: Vec<Result<ManifestRecord, AvatarError>> = jobs
        .par_iter()
        .map(|&(split, id, k)| {
            let seeds = sample_seeds(config.seed, split, id, k);
            let (s, _, _) = generate_sample(&ids[id as usize], seeds, config.height, config.width, config.vertices, &opts)?;
            let stem = format!("{}/id{id:03}_{k:05}", split.as_str());
            let rec = ManifestRecord {
                image: format!("images/{stem}.ppm"),
                mask: format!("masks/{stem}.pgm"),
                labels: format!("labels/{stem}.pgm"),
                pcp: cloud_path(id),
                identity: id,
                proj: s.proj,
                pose_seed: seeds.pose,
                camera_seed: seeds.camera,
                appearance_seed: seeds.appearance,
                split,
            };
            write_sample(out_dir, &rec, &s)?;
            Ok(rec)
        })
        .collect();
    let records: Vec<ManifestRecord> = records.into_iter().collect::<Result<_, _>>()?;
    let manifest = out_dir.join("manifest.jsonl");
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("manifest records serialize"));
        text.push('\n');
    }
    let mut f = fs::File::create(&manifest).map_err(|source| AvatarError::Io {
        path: manifest.clone(),
        source,
    })?;
    f.write_all(text.as_bytes()).map_err(|source| AvatarError::Io { path: manifest, source })?;
    Ok(records)
}

fn cloud_path(id: u32) -> String {
    format!("clouds/id{id:03}.pcp")
}

fn write_sample(out_dir: &Path, rec: &ManifestRecord, s: &RenderSample) -> Result<(), AvatarError> {
    for sub in [&rec.image, &rec.mask, &rec.labels] {
        if let Some(parent) = out_dir.join(sub).parent() {
            mkdir(parent)?;
        }
    }
    let mask: Vec<u8> = s.fg_mask.iter().map(|&m| m * 255).collect();
    write_ppm(&out_dir.join(&rec.image), s.width, s.height, &s.image)?;
    write_pgm(&out_dir.join(&rec.mask), s.width, s.height, &mask)?;
    write_pgm(&out_dir.join(&rec.labels), s.width, s.height, &s.part_labels)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, AvatarError> {
    let f = fs::File::open(path).map_err(|source| AvatarError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|source| AvatarError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| AvatarError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Sample pixels read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<u8>,
    pub fg_mask: Vec<u8>,
    pub part_labels: Vec<u8>,
}

pub fn load_sample(root: &Path, rec: &ManifestRecord) -> Result<LoadedSample, AvatarError> {
    let img = read_pnm(&root.join(&rec.image))?;
    let mask = read_pnm(&root.join(&rec.mask))?;
    let labels = read_pnm(&root.join(&rec.labels))?;
    let bad = |p: &str, m: &str| AvatarError::Format {
        path: root.join(p),
        line: 1,
        msg: m.into(),
    };
    if img.channels != 3 {
        return Err(bad(&rec.image, "expected an RGB image"));
    }
    for (r, p) in [(&mask, &rec.mask), (&labels, &rec.labels)] {
        if r.channels != 1 || r.width != img.width || r.height != img.height {
            return Err(bad(p, "size or channel mismatch with the image"));
        }
    }
    Ok(LoadedSample {
        height: img.height,
        width: img.width,
        image: img.data,
        fg_mask: mask.data.iter().map(|&m| (m > 0) as u8).collect(),
        part_labels: labels.data,
    })
}

/// Reads every distinct cloud referenced by the manifest, keyed by identity.
pub fn load_clouds(root: &Path, records: &[ManifestRecord]) -> Result<std::collections::BTreeMap<u32, LabeledCloud>, AvatarError> {
    let mut out = std::collections::BTreeMap::new();
    for r in records {
        if !out.contains_key(&r.identity) {
            out.insert(r.identity, read_pcp(&root.join(&r.pcp))?);
        }
    }
    Ok(out)
}

/// Directory holding the manifest; relative record paths resolve against it.
pub fn manifest_root(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}
