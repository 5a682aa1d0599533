use rand::seq::index;
use rand::Rng;

use super::TrainError;
use crate::avatar::NUM_PARTS;
use crate::numcore::{NumError, Tensor};

/// Column indices per part: `indices[i - 1]` holds the positions labeled `i`,
/// ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PartSets {
    pub indices: Vec<Vec<usize>>,
}

impl PartSets {
    pub fn part(&self, label: u8) -> &[usize] {
        &self.indices[label as usize - 1]
    }

    pub fn len(&self) -> usize {
        self.indices.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature vectors of each part from a `[C, N]` (or `[C, h, w]`) map.
    pub fn features(&self, map: &Tensor) -> Result<Vec<Vec<Vec<f32>>>, TrainError> {
        let (c, n) = columns_of(map)?;
        self.indices
            .iter()
            .map(|idx| {
                idx.iter()
                    .map(|&j| {
                        if j >= n {
                            return Err(NumError::dim("part_features", format!("column {j} outside {n}")).into());
                        }
                        Ok((0..c).map(|ch| map.data()[ch * n + j]).collect())
                    })
                    .collect()
            })
            .collect()
    }
}

/// `[C, h, w]` or `[C, N]` viewed as `C` rows of `N` columns.
fn columns_of(map: &Tensor) -> Result<(usize, usize), TrainError> {
    match map.shape() {
        [c, h, w] => Ok((*c, h * w)),
        [c, n] => Ok((*c, *n)),
        s => Err(NumError::dim("part_sets", format!("expected [C,h,w] or [C,N], got {s:?}")).into()),
    }
}

/// Cells grouped by label, each part capped at `n_cap` by uniform subsampling
/// without replacement. Label 0 is background and is skipped.
pub fn part_cell_indices<R: Rng>(labels: &[u8], n_cap: usize, rng: &mut R) -> Result<PartSets, TrainError> {
    let mut indices = vec![Vec::new(); NUM_PARTS];
    for (k, &l) in labels.iter().enumerate() {
        match l {
            0 => {}
            1..=14 => indices[l as usize - 1].push(k),
            _ => return Err(TrainError::Data(format!("cell label {l} outside 0..=14"))),
        }
    }
    for set in &mut indices {
        if set.len() > n_cap {
            let mut keep: Vec<usize> = index::sample(rng, set.len(), n_cap).into_iter().map(|i| set[i]).collect();
            keep.sort_unstable();
            *set = keep;
        }
    }
    Ok(PartSets { indices })
}

/// Part sets of an image feature map `[C, h, w]` from its cell-label grid.
pub fn extract_part_sets<R: Rng>(
    f_i: &Tensor,
    cell_labels: &[u8],
    n_cap: usize,
    rng: &mut R,
) -> Result<PartSets, TrainError> {
    let (_, n) = columns_of(f_i)?;
    if f_i.rank() != 3 || cell_labels.len() != n {
        return Err(NumError::dim(
            "extract_part_sets",
            format!("feature map {:?} vs {} cell labels", f_i.shape(), cell_labels.len()),
        )
        .into());
    }
    part_cell_indices(cell_labels, n_cap, rng)
}

/// Vertex indices per part. Every label must lie in `1..=14`.
pub fn vertex_part_indices(labels: &[u8]) -> Result<PartSets, TrainError> {
    let mut indices = vec![Vec::new(); NUM_PARTS];
    for (j, &l) in labels.iter().enumerate() {
        if !(1..=14).contains(&l) {
            return Err(TrainError::Data(format!("vertex {j} has part label {l} outside 1..=14")));
        }
        indices[l as usize - 1].push(j);
    }
    Ok(PartSets { indices })
}

/// Vertex sets of a point feature map `[C, V]`.
pub fn extract_vertex_sets(f_p: &Tensor, labels: &[u8]) -> Result<PartSets, TrainError> {
    if f_p.rank() != 2 || f_p.shape()[1] != labels.len() {
        return Err(NumError::dim(
            "extract_vertex_sets",
            format!("feature map {:?} vs {} vertex labels", f_p.shape(), labels.len()),
        )
        .into());
    }
    vertex_part_indices(labels)
}

/// Where one row of a batch feature matrix came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Provenance {
    /// Position of the contributing entry in its side's list.
    pub sample: usize,
    pub identity: u32,
    pub part: u8,
    /// Cell or vertex index within the sample.
    pub index: usize,
}

/// Concatenated row layout of one batch, `(sample, part, index)` ordered.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLayout {
    pub pixel: Vec<Provenance>,
    pub vertex: Vec<Provenance>,
}

fn concat(sides: &[(u32, &PartSets)]) -> Vec<Provenance> {
    let mut out = Vec::new();
    for (sample, &(identity, sets)) in sides.iter().enumerate() {
        for (p, idx) in sets.indices.iter().enumerate() {
            out.extend(idx.iter().map(|&index| Provenance {
                sample,
                identity,
                part: p as u8 + 1,
                index,
            }));
        }
    }
    out
}

impl BatchLayout {
    /// `pixel` and `vertex` list `(identity, sets)` per contributing entry.
    /// An empty side is [`TrainError::EmptyBatch`].
    pub fn new(pixel: &[(u32, &PartSets)], vertex: &[(u32, &PartSets)]) -> Result<Self, TrainError> {
        let layout = Self {
            pixel: concat(pixel),
            vertex: concat(vertex),
        };
        if layout.pixel.is_empty() || layout.vertex.is_empty() {
            return Err(TrainError::EmptyBatch {
                pixel_rows: layout.pixel.len(),
                vertex_rows: layout.vertex.len(),
            });
        }
        Ok(layout)
    }

    /// `(sample, column)` pairs for gathering rows of each side.
    pub fn pixel_rows(&self) -> Vec<(usize, usize)> {
        self.pixel.iter().map(|p| (p.sample, p.index)).collect()
    }

    pub fn vertex_rows(&self) -> Vec<(usize, usize)> {
        self.vertex.iter().map(|p| (p.sample, p.index)).collect()
    }

    pub fn ground_truth(&self) -> GroundTruth {
        build_gt_matrix(&self.pixel, &self.vertex)
    }
}

/// Batch feature matrices `B_P: [R, C]`, `B_V: [M, C]` and their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchFeatures {
    pub b_p: Tensor,
    pub b_v: Tensor,
    pub layout: BatchLayout,
}

/// Concatenates per-sample part sets. `pixel` pairs each image feature map
/// `[C,h,w]` with its sets; `vertex` likewise with point maps `[C,V]`.
pub fn build_batch_features(
    pixel: &[(u32, &Tensor, &PartSets)],
    vertex: &[(u32, &Tensor, &PartSets)],
) -> Result<BatchFeatures, TrainError> {
    let ps: Vec<(u32, &PartSets)> = pixel.iter().map(|&(i, _, s)| (i, s)).collect();
    let vs: Vec<(u32, &PartSets)> = vertex.iter().map(|&(i, _, s)| (i, s)).collect();
    let layout = BatchLayout::new(&ps, &vs)?;
    let stack = |side: &[(u32, &Tensor, &PartSets)]| -> Result<Tensor, TrainError> {
        let mut rows = 0;
        let mut data = Vec::new();
        let mut width = None;
        for &(_, map, sets) in side {
            let c = map.shape()[0];
            if *width.get_or_insert(c) != c {
                return Err(NumError::dim("build_batch_features", "feature widths differ".into()).into());
            }
            for part in sets.features(map)? {
                for row in part {
                    data.extend(row);
                    rows += 1;
                }
            }
        }
        Ok(Tensor::new(vec![rows, width.unwrap_or(0)], data)?)
    };
    Ok(BatchFeatures {
        b_p: stack(pixel)?,
        b_v: stack(vertex)?,
        layout,
    })
}

/// Binary correspondence matrix: 1 iff identity and part both match.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<u8>,
}

impl GroundTruth {
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.values[r * self.cols + c]
    }

    pub fn positives(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        let d = self.values.iter().map(|&v| v as f32).collect();
        Tensor::new(vec![self.rows, self.cols], d).expect("rows * cols values")
    }
}

pub fn build_gt_matrix(pixel: &[Provenance], vertex: &[Provenance]) -> GroundTruth {
    let mut values = Vec::with_capacity(pixel.len() * vertex.len());
    for p in pixel {
        values.extend(
            vertex
                .iter()
                .map(|v| u8::from(p.identity == v.identity && p.part == v.part)),
        );
    }
    GroundTruth {
        rows: pixel.len(),
        cols: vertex.len(),
        values,
    }
}
