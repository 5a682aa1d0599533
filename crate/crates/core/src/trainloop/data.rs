use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use super::sets::{part_cell_indices, vertex_part_indices, BatchLayout, PartSets};
use super::{TrainConfig, TrainError};
use crate::avatar::{downsample_labels, load_clouds, load_sample, manifest_root, read_manifest, LabeledCloud, Split};
use crate::netarch::{points_tensor, stack, ModelConfig};
use crate::numcore::Tensor;

/// One identity's prototype ready for the point branch.
#[derive(Clone, Debug)]
pub struct Prototype {
    pub identity: u32,
    /// `[3, V]`
    pub points: Tensor,
    /// Part label per vertex, `1..=14`.
    pub labels: Vec<u8>,
    pub sets: PartSets,
}

impl Prototype {
    pub fn new(identity: u32, cloud: &LabeledCloud) -> Result<Self, TrainError> {
        let labels: Vec<u8> = cloud.parts.iter().map(|p| p.label()).collect();
        Ok(Self {
            identity,
            points: points_tensor(&cloud.points)?,
            sets: vertex_part_indices(&labels)?,
            labels,
        })
    }
}

/// A training image with its cell supervision.
#[derive(Clone, Debug)]
pub struct Example {
    pub identity: u32,
    /// `[3, H, W]`, normalized.
    pub image: Tensor,
    /// Part label per feature cell, `0..=14`.
    pub cells: Vec<u8>,
}

impl Example {
    pub fn new(identity: u32, rgb: &[u8], labels: &[u8], height: usize, width: usize) -> Result<Self, TrainError> {
        Ok(Self {
            identity,
            image: crate::netarch::image_tensor(rgb, height, width)?,
            cells: downsample_labels(labels, height, width)?,
        })
    }
}

/// The training split held in memory.
pub struct TrainingSet {
    pub examples: Vec<Example>,
    pub prototypes: BTreeMap<u32, Prototype>,
    /// Example indices per identity, ascending.
    pub by_identity: BTreeMap<u32, Vec<usize>>,
}

impl TrainingSet {
    pub fn from_parts(examples: Vec<Example>, prototypes: BTreeMap<u32, Prototype>) -> Result<Self, TrainError> {
        let mut by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (k, e) in examples.iter().enumerate() {
            if !prototypes.contains_key(&e.identity) {
                return Err(TrainError::Data(format!("identity {} has no point cloud", e.identity)));
            }
            by_identity.entry(e.identity).or_default().push(k);
        }
        Ok(Self {
            examples,
            prototypes,
            by_identity,
        })
    }

    /// Loads the train split of a manifest, checking sizes against the model.
    pub fn load(manifest: &Path, model: &ModelConfig) -> Result<Self, TrainError> {
        Self::load_split(manifest, model, Split::Train)
    }

    pub fn load_split(manifest: &Path, model: &ModelConfig, split: Split) -> Result<Self, TrainError> {
        if !manifest.is_file() {
            return Err(TrainError::Io {
                path: manifest.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
            });
        }
        let records = read_manifest(manifest)?;
        let root = manifest_root(manifest);
        let train: Vec<_> = records.into_iter().filter(|r| r.split == split).collect();
        if train.is_empty() {
            return Err(TrainError::Data(format!(
                "{} lists no {} images",
                manifest.display(),
                split.as_str()
            )));
        }
        let clouds = load_clouds(&root, &train)?;
        let mut prototypes = BTreeMap::new();
        for (&id, cloud) in &clouds {
            if cloud.len() != model.vertices {
                return Err(TrainError::Shape(format!(
                    "cloud of identity {id} has {} vertices, model expects {}",
                    cloud.len(),
                    model.vertices
                )));
            }
            prototypes.insert(id, Prototype::new(id, cloud)?);
        }
        let mut examples = Vec::with_capacity(train.len());
        for rec in &train {
            let s = load_sample(&root, rec)?;
            if (s.height, s.width) != (model.height, model.width) {
                return Err(TrainError::Shape(format!(
                    "{} is {}x{}, model expects {}x{}",
                    rec.image, s.height, s.width, model.height, model.width
                )));
            }
            examples.push(Example::new(rec.identity, &s.image, &s.part_labels, s.height, s.width)?);
        }
        Self::from_parts(examples, prototypes)
    }

    pub fn identities(&self) -> Vec<u32> {
        self.by_identity.keys().copied().collect()
    }
}

/// Everything one training step consumes.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    /// `[B, 3, H, W]`
    pub images: Tensor,
    pub identities: Vec<u32>,
    /// Cell foreground per sample, concatenated (`B · h · w`).
    pub foreground: Vec<bool>,
    /// Point-branch inputs: `(image sample, cloud)`. `[P, 3, V]`.
    pub clouds: Tensor,
    pub pairs: Vec<(usize, u32)>,
    pub layout: BatchLayout,
}

impl PreparedBatch {
    /// `members` are example indices. Every image pairs with its own
    /// identity's cloud; with `cross_pairs`, each image is also paired with
    /// the cloud of the next identity in the batch, whose vertices then count
    /// as that identity's.
    pub fn assemble<R: Rng>(
        set: &TrainingSet,
        members: &[usize],
        n_cap: usize,
        cross_pairs: bool,
        rng: &mut R,
    ) -> Result<Self, TrainError> {
        let examples: Vec<&Example> = members.iter().map(|&k| &set.examples[k]).collect();
        let images = stack(&examples.iter().map(|e| &e.image).collect::<Vec<_>>())?;
        let identities: Vec<u32> = examples.iter().map(|e| e.identity).collect();
        let mut cells = Vec::with_capacity(examples.len());
        for e in &examples {
            cells.push(part_cell_indices(&e.cells, n_cap, rng)?);
        }
        let foreground = examples.iter().flat_map(|e| e.cells.iter().map(|&c| c > 0)).collect();

        let mut pairs: Vec<(usize, u32)> = identities.iter().copied().enumerate().collect();
        if cross_pairs {
            let mut distinct = identities.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() > 1 {
                for (s, id) in identities.iter().enumerate() {
                    let k = distinct.binary_search(id).expect("listed identity");
                    pairs.push((s, distinct[(k + 1) % distinct.len()]));
                }
            }
        }
        let clouds = stack(&pairs.iter().map(|(_, id)| &set.prototypes[id].points).collect::<Vec<_>>())?;
        let pixel: Vec<(u32, &PartSets)> = identities.iter().copied().zip(cells.iter()).collect();
        let vertex: Vec<(u32, &PartSets)> = pairs.iter().map(|&(_, id)| (id, &set.prototypes[&id].sets)).collect();
        let layout = BatchLayout::new(&pixel, &vertex)?;
        Ok(Self {
            images,
            identities,
            foreground,
            clouds,
            pairs,
            layout,
        })
    }
}

/// Draws `batch_identities` distinct identities and `images_per_identity`
/// distinct images of each, in identity order.
pub fn sample_members<R: Rng>(set: &TrainingSet, cfg: &TrainConfig, rng: &mut R) -> Result<Vec<usize>, TrainError> {
    let ids = set.identities();
    if ids.len() < cfg.batch_identities {
        return Err(TrainError::Config(format!(
            "batch needs {} identities, training data has {}",
            cfg.batch_identities,
            ids.len()
        )));
    }
    let mut chosen: Vec<u32> = index::sample(rng, ids.len(), cfg.batch_identities)
        .into_iter()
        .map(|i| ids[i])
        .collect();
    chosen.sort_unstable();
    let mut members = Vec::with_capacity(cfg.batch_size());
    for id in chosen {
        let pool = &set.by_identity[&id];
        if pool.len() < cfg.images_per_identity {
            return Err(TrainError::Config(format!(
                "identity {id} has {} train images, batch needs {}",
                pool.len(),
                cfg.images_per_identity
            )));
        }
        let mut pick: Vec<usize> = index::sample(rng, pool.len(), cfg.images_per_identity)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        pick.sort_unstable();
        members.extend(pick);
    }
    Ok(members)
}
