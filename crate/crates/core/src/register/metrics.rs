use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::infer::{check_theta, confidence_matrix, probe_features, CorrespondenceSet};
use super::RegisterError;
use crate::avatar::NUM_PARTS;
use crate::netarch::ModelParams;
use crate::numcore::Tensor;
use crate::trainloop::Prototype;

/// Per-part matching summary of one (image, cloud) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    /// Distinct matched vertices per part.
    pub matched: [usize; NUM_PARTS],
    /// Vertices per part in the cloud.
    pub available: [usize; NUM_PARTS],
    /// Sum of per-part matched fractions, in `[0, 14]`.
    pub rho: f64,
    /// Number of (cell, vertex) pairs.
    pub total: usize,
}

impl MatchReport {
    fn new(matched: [usize; NUM_PARTS], available: [usize; NUM_PARTS], total: usize) -> Self {
        let rho = matched
            .iter()
            .zip(&available)
            .filter(|(_, &a)| a > 0)
            .map(|(&m, &a)| m as f64 / a as f64)
            .sum();
        Self {
            matched,
            available,
            rho,
            total,
        }
    }

    /// `C_i / C_i_max`, 0 for parts without vertices.
    pub fn fractions(&self) -> [f64; NUM_PARTS] {
        std::array::from_fn(|i| {
            if self.available[i] == 0 {
                0.0
            } else {
                self.matched[i] as f64 / self.available[i] as f64
            }
        })
    }
}

/// Correspondence rate of a set against the cloud it was computed on.
pub fn correspondence_rate(corrs: &CorrespondenceSet, cloud: &Prototype) -> MatchReport {
    let mut hit = vec![false; cloud.labels.len()];
    for c in &corrs.pairs {
        hit[c.vertex] = true;
    }
    report_from_hits(&hit, &cloud.labels, corrs.pairs.len())
}

fn report_from_hits(hit: &[bool], labels: &[u8], total: usize) -> MatchReport {
    let mut matched = [0usize; NUM_PARTS];
    let mut available = [0usize; NUM_PARTS];
    for (&h, &l) in hit.iter().zip(labels) {
        let p = l as usize - 1;
        available[p] += 1;
        matched[p] += h as usize;
    }
    MatchReport::new(matched, available, total)
}

/// Reports at every threshold from one `[F, V]` confidence matrix.
pub fn reports_from_confidences(conf: Option<&[f32]>, labels: &[u8], thetas: &[f32]) -> Vec<MatchReport> {
    let v = labels.len();
    match conf {
        None => thetas
            .iter()
            .map(|_| report_from_hits(&vec![false; v], labels, 0))
            .collect(),
        Some(conf) => {
            let mut best = vec![f32::NEG_INFINITY; v];
            for row in conf.chunks(v) {
                for (b, &c) in best.iter_mut().zip(row) {
                    *b = b.max(c);
                }
            }
            thetas
                .iter()
                .map(|&t| {
                    let total = conf.iter().filter(|&&c| c > t).count();
                    let hit: Vec<bool> = best.iter().map(|&b| b > t).collect();
                    report_from_hits(&hit, labels, total)
                })
                .collect()
        }
    }
}

/// One gallery entry's score for a probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub identity: u32,
    pub rho: f64,
    pub total: usize,
}

/// Descending ρ; ties by total correspondence count, then ascending identity.
pub fn rank(mut scores: Vec<Ranked>) -> Vec<Ranked> {
    scores.sort_by(|a, b| {
        b.rho
            .total_cmp(&a.rho)
            .then(b.total.cmp(&a.total))
            .then(a.identity.cmp(&b.identity))
    });
    scores
}

/// Ranks the gallery for one probe image `[3,H,W]`.
pub fn identify(
    params: &ModelParams,
    image: &Tensor,
    gallery: &[Prototype],
    theta: f32,
) -> Result<Vec<Ranked>, RegisterError> {
    check_theta(theta)?;
    if gallery.is_empty() {
        return Err(RegisterError::Config("gallery is empty".into()));
    }
    let probe = probe_features(params, image)?;
    let mut scores = Vec::with_capacity(gallery.len());
    for g in gallery {
        let conf = confidence_matrix(params, &probe, g)?;
        let r = &reports_from_confidences(conf.as_deref(), &g.labels, &[theta])[0];
        scores.push(Ranked {
            identity: g.identity,
            rho: r.rho,
            total: r.total,
        });
    }
    Ok(rank(scores))
}

/// A probe image with its true identity.
#[derive(Clone, Debug)]
pub struct Probe {
    pub identity: u32,
    /// `[3, H, W]`
    pub image: Tensor,
}

/// Every probe scored against every gallery cloud at every threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub thetas: Vec<f32>,
    pub gallery: Vec<u32>,
    pub probe_identities: Vec<u32>,
    /// `reports[probe][theta][gallery]`
    pub reports: Vec<Vec<Vec<MatchReport>>>,
}

pub fn evaluate(
    params: &ModelParams,
    probes: &[Probe],
    gallery: &[Prototype],
    thetas: &[f32],
) -> Result<Evaluation, RegisterError> {
    for &t in thetas {
        check_theta(t)?;
    }
    if gallery.is_empty() {
        return Err(RegisterError::Config("gallery is empty".into()));
    }
    let ids: Vec<u32> = gallery.iter().map(|g| g.identity).collect();
    if let Some(p) = probes.iter().find(|p| !ids.contains(&p.identity)) {
        return Err(RegisterError::Data(format!("identity {} is not in the gallery", p.identity)));
    }
    let reports = probes
        .par_iter()
        .map(|p| -> Result<Vec<Vec<MatchReport>>, RegisterError> {
            let probe = probe_features(params, &p.image)?;
            let mut per_gallery = Vec::with_capacity(gallery.len());
            for g in gallery {
                let conf = confidence_matrix(params, &probe, g)?;
                per_gallery.push(reports_from_confidences(conf.as_deref(), &g.labels, thetas));
            }
            // [gallery][theta] -> [theta][gallery]
            Ok((0..thetas.len())
                .map(|t| per_gallery.iter().map(|r| r[t].clone()).collect())
                .collect())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Evaluation {
        thetas: thetas.to_vec(),
        gallery: ids,
        probe_identities: probes.iter().map(|p| p.identity).collect(),
        reports,
    })
}

/// Mean ρ per (gallery cloud, probe identity).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub theta: f32,
    pub gallery: Vec<u32>,
    pub probes: Vec<u32>,
    /// `values[g][c]`
    pub values: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    /// Mean of the entries whose gallery and probe identities agree.
    pub fn diagonal_mean(&self) -> f64 {
        let (s, n) = self.fold(|g, c| g == c);
        s / n.max(1) as f64
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let (s, n) = self.fold(|g, c| g != c);
        s / n.max(1) as f64
    }

    fn fold(&self, keep: impl Fn(u32, u32) -> bool) -> (f64, usize) {
        let mut s = 0.0;
        let mut n = 0;
        for (gi, &g) in self.gallery.iter().enumerate() {
            for (ci, &c) in self.probes.iter().enumerate() {
                if keep(g, c) {
                    s += self.values[gi][ci];
                    n += 1;
                }
            }
        }
        (s, n)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("gallery");
        for p in &self.probes {
            write!(out, ",{p}").unwrap();
        }
        out.push('\n');
        for (g, row) in self.gallery.iter().zip(&self.values) {
            write!(out, "{g}").unwrap();
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, theta: f32) -> Result<Self, RegisterError> {
        let bad = |m: &str| RegisterError::Data(format!("confusion csv: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        let mut cols = header.split(',');
        if cols.next() != Some("gallery") {
            return Err(bad("header must start with `gallery`"));
        }
        let probes = cols.map(|s| s.parse().map_err(|_| bad("probe id"))).collect::<Result<Vec<u32>, _>>()?;
        let mut gallery = Vec::new();
        let mut values = Vec::new();
        for line in lines {
            let mut f = line.split(',');
            gallery.push(f.next().unwrap_or("").parse().map_err(|_| bad("gallery id"))?);
            let row = f.map(|s| s.parse().map_err(|_| bad("value"))).collect::<Result<Vec<f64>, _>>()?;
            if row.len() != probes.len() {
                return Err(bad("ragged row"));
            }
            values.push(row);
        }
        Ok(Self {
            theta,
            gallery,
            probes,
            values,
        })
    }
}

fn class_groups(ids: &[u32]) -> BTreeMap<u32, Vec<usize>> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (k, &id) in ids.iter().enumerate() {
        groups.entry(id).or_default().push(k);
    }
    groups
}

impl Evaluation {
    fn theta_index(&self, theta: f32) -> Result<usize, RegisterError> {
        self.thetas
            .iter()
            .position(|&t| t == theta)
            .ok_or_else(|| RegisterError::Config(format!("threshold {theta} was not evaluated")))
    }

    pub fn confusion(&self, theta: f32) -> Result<ConfusionMatrix, RegisterError> {
        let t = self.theta_index(theta)?;
        let groups = class_groups(&self.probe_identities);
        let values = (0..self.gallery.len())
            .map(|g| {
                groups
                    .values()
                    .map(|members| {
                        let s: f64 = members.iter().map(|&k| self.reports[k][t][g].rho).sum();
                        s / members.len() as f64
                    })
                    .collect()
            })
            .collect();
        Ok(ConfusionMatrix {
            theta,
            gallery: self.gallery.clone(),
            probes: groups.keys().copied().collect(),
            values,
        })
    }

    /// Ranked gallery per probe.
    pub fn rankings(&self, theta: f32) -> Result<Vec<Vec<Ranked>>, RegisterError> {
        let t = self.theta_index(theta)?;
        Ok(self
            .reports
            .iter()
            .map(|per_theta| {
                rank(
                    per_theta[t]
                        .iter()
                        .zip(&self.gallery)
                        .map(|(r, &identity)| Ranked {
                            identity,
                            rho: r.rho,
                            total: r.total,
                        })
                        .collect(),
                )
            })
            .collect())
    }

    /// `(true, rank-1)` identity per probe.
    pub fn decisions(&self, theta: f32) -> Result<Vec<(u32, u32)>, RegisterError> {
        Ok(self
            .rankings(theta)?
            .iter()
            .zip(&self.probe_identities)
            .map(|(r, &truth)| (truth, r[0].identity))
            .collect())
    }

    pub fn rank1_accuracy(&self, theta: f32) -> Result<f64, RegisterError> {
        let d = self.decisions(theta)?;
        Ok(d.iter().filter(|(t, p)| t == p).count() as f64 / d.len().max(1) as f64)
    }

    /// Mean correspondence count of each identity's probes against its own cloud.
    pub fn avg_matches(&self, theta: f32) -> Result<Vec<(u32, f64)>, RegisterError> {
        let t = self.theta_index(theta)?;
        let groups = class_groups(&self.probe_identities);
        Ok(groups
            .iter()
            .map(|(&id, members)| {
                let g = self.gallery.iter().position(|&x| x == id).expect("probe identity in gallery");
                let s: usize = members.iter().map(|&k| self.reports[k][t][g].total).sum();
                (id, s as f64 / members.len() as f64)
            })
            .collect())
    }

    pub fn report(&self, probe: usize, theta: f32, gallery_identity: u32) -> Result<&MatchReport, RegisterError> {
        let t = self.theta_index(theta)?;
        let g = self
            .gallery
            .iter()
            .position(|&x| x == gallery_identity)
            .ok_or_else(|| RegisterError::Data(format!("identity {gallery_identity} is not in the gallery")))?;
        Ok(&self.reports[probe][t][g])
    }
}

/// Per-class F1 from decisions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassF1 {
    pub class: u32,
    pub f1: f64,
    pub support: usize,
    /// No true instances of this class were seen.
    pub zero_support: bool,
}

/// `F1 = 2TP / (2TP + FP + FN)` per class over `(true, predicted)` decisions.
pub fn f1_per_class(decisions: &[(u32, u32)], classes: &[u32]) -> Vec<ClassF1> {
    classes
        .iter()
        .map(|&c| {
            let tp = decisions.iter().filter(|&&(t, p)| t == c && p == c).count();
            let fp = decisions.iter().filter(|&&(t, p)| t != c && p == c).count();
            let fn_ = decisions.iter().filter(|&&(t, p)| t == c && p != c).count();
            let support = tp + fn_;
            let denom = 2 * tp + fp + fn_;
            ClassF1 {
                class: c,
                f1: if support == 0 || denom == 0 {
                    0.0
                } else {
                    2.0 * tp as f64 / denom as f64
                },
                support,
                zero_support: support == 0,
            }
        })
        .collect()
}

pub fn macro_f1(scores: &[ClassF1]) -> f64 {
    scores.iter().map(|s| s.f1).sum::<f64>() / scores.len().max(1) as f64
}

pub fn f1_csv(scores: &[ClassF1]) -> String {
    let mut out = String::from("class,f1,support\n");
    for s in scores {
        writeln!(out, "{},{},{}", s.class, s.f1, s.support).unwrap();
    }
    out
}

pub fn avg_matches_csv(rows: &[(u32, f64)]) -> String {
    let mut out = String::from("class,mean_matches\n");
    for (c, m) in rows {
        writeln!(out, "{c},{m}").unwrap();
    }
    out
}

/// Mean ρ per (gallery, probe identity) at one threshold.
pub fn confusion_matrix(
    params: &ModelParams,
    probes: &[Probe],
    gallery: &[Prototype],
    theta: f32,
) -> Result<ConfusionMatrix, RegisterError> {
    evaluate(params, probes, gallery, &[theta])?.confusion(theta)
}

/// Mean correspondence count per identity against its own cloud.
pub fn avg_matches_per_class(
    params: &ModelParams,
    probes: &[Probe],
    gallery: &[Prototype],
    theta: f32,
) -> Result<Vec<(u32, f64)>, RegisterError> {
    evaluate(params, probes, gallery, &[theta])?.avg_matches(theta)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), RegisterError> {
    std::fs::write(path, text).map_err(|source| RegisterError::Io {
        path: path.to_path_buf(),
        source,
    })
}
