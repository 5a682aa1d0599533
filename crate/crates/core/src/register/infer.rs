use super::RegisterError;
use crate::netarch::{binarize_detector, image_forward, point_forward, stack, ModelParams};
use crate::numcore::{cosine_similarity_matrix, sigmoid, Tensor};
use crate::trainloop::Prototype;

/// One thresholded match between an image cell and a cloud vertex.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    /// `(row, col)` on the feature grid.
    pub cell: (usize, usize),
    pub vertex: usize,
    /// `σ(τ · sim)`
    pub confidence: f32,
    /// Part label of the matched vertex, `1..=14`.
    pub part: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
    pub threshold: f32,
    pub gallery_identity: u32,
    /// Detector-positive cells, row-major indices.
    pub foreground: Vec<usize>,
    /// Set when the detector found no foreground.
    pub no_foreground: bool,
}

/// Image-side outputs of one probe, reusable across gallery clouds.
#[derive(Clone, Debug)]
pub struct ProbeFeatures {
    pub grid: (usize, usize),
    /// Detector-positive cells, row-major.
    pub foreground: Vec<usize>,
    /// `[F, C_s]` feature rows of the foreground cells.
    pub cells: Option<Tensor>,
    /// `[1, C_g]`
    pub global: Tensor,
}

pub fn probe_features(params: &ModelParams, image: &Tensor) -> Result<ProbeFeatures, RegisterError> {
    let out = image_forward(params, &stack(&[image])?)?;
    let s = out.f_i.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let foreground: Vec<usize> = binarize_detector(out.d_i_logits.data())
        .into_iter()
        .enumerate()
        .filter_map(|(k, fg)| fg.then_some(k))
        .collect();
    let cells = if foreground.is_empty() {
        None
    } else {
        let n = h * w;
        let mut d = Vec::with_capacity(foreground.len() * c);
        for &k in &foreground {
            d.extend((0..c).map(|ch| out.f_i.data()[ch * n + k]));
        }
        Some(Tensor::new(vec![foreground.len(), c], d)?)
    };
    Ok(ProbeFeatures {
        grid: (h, w),
        foreground,
        cells,
        global: out.global,
    })
}

/// Confidences `σ(τ · sim)` of every foreground cell against every vertex,
/// `[F, V]` row-major; `None` without foreground.
pub fn confidence_matrix(
    params: &ModelParams,
    probe: &ProbeFeatures,
    cloud: &Prototype,
) -> Result<Option<Vec<f32>>, RegisterError> {
    let Some(cells) = &probe.cells else {
        return Ok(None);
    };
    let f_p = point_forward(params, &probe.global, &stack(&[&cloud.points])?)?;
    let s = f_p.shape().to_vec();
    let (c, v) = (s[1], s[2]);
    let mut cols = vec![0.0f32; v * c];
    for ch in 0..c {
        for j in 0..v {
            cols[j * c + ch] = f_p.data()[ch * v + j];
        }
    }
    let vertices = Tensor::new(vec![v, c], cols)?;
    let sim = cosine_similarity_matrix(cells, &vertices)?;
    let tau = params.temperature();
    Ok(Some(sim.data().iter().map(|&x| sigmoid(tau * x)).collect()))
}

/// Pairs of a confidence matrix strictly above `theta`.
pub fn threshold_pairs(
    probe: &ProbeFeatures,
    cloud: &Prototype,
    confidences: Option<&[f32]>,
    theta: f32,
) -> CorrespondenceSet {
    let v = cloud.labels.len();
    let mut pairs = Vec::new();
    if let Some(conf) = confidences {
        for (r, &k) in probe.foreground.iter().enumerate() {
            let cell = (k / probe.grid.1, k % probe.grid.1);
            for (j, &c) in conf[r * v..(r + 1) * v].iter().enumerate() {
                if c > theta {
                    pairs.push(Correspondence {
                        cell,
                        vertex: j,
                        confidence: c,
                        part: cloud.labels[j],
                    });
                }
            }
        }
    }
    CorrespondenceSet {
        pairs,
        threshold: theta,
        gallery_identity: cloud.identity,
        foreground: probe.foreground.clone(),
        no_foreground: probe.foreground.is_empty(),
    }
}

/// Detector-filtered, thresholded correspondences of an image `[3,H,W]`
/// against a labeled cloud.
pub fn infer_correspondences(
    params: &ModelParams,
    image: &Tensor,
    cloud: &Prototype,
    theta: f32,
) -> Result<CorrespondenceSet, RegisterError> {
    check_theta(theta)?;
    let probe = probe_features(params, image)?;
    if probe.foreground.is_empty() {
        log::warn!("detector found no foreground; returning no correspondences");
    }
    let conf = confidence_matrix(params, &probe, cloud)?;
    Ok(threshold_pairs(&probe, cloud, conf.as_deref(), theta))
}

pub(crate) fn check_theta(theta: f32) -> Result<(), RegisterError> {
    if !(0.0..1.0).contains(&theta) {
        return Err(RegisterError::Config(format!("threshold {theta} outside [0, 1)")));
    }
    Ok(())
}
