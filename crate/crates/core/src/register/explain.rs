use serde::{Deserialize, Serialize};

use super::infer::CorrespondenceSet;
use super::metrics::MatchReport;
use crate::avatar::{NUM_PARTS, PART_NAMES};

pub const SUPPORT_FRACTION: f64 = 0.5;
pub const CONFLICT_FRACTION: f64 = 0.1;

/// Overlay color per part label `1..=14`.
pub const PART_PALETTE: [[u8; 3]; NUM_PARTS] = [
    [0xe6, 0x19, 0x4b],
    [0x3c, 0xb4, 0x4b],
    [0xff, 0xe1, 0x19],
    [0x43, 0x63, 0xd8],
    [0xf5, 0x82, 0x31],
    [0x91, 0x1e, 0xb4],
    [0x46, 0xf0, 0xf0],
    [0xf0, 0x32, 0xe6],
    [0xbc, 0xf6, 0x0c],
    [0xfa, 0xbe, 0xbe],
    [0x00, 0x80, 0x80],
    [0x9a, 0x63, 0x24],
    [0x80, 0x00, 0x00],
    [0x00, 0x00, 0x75],
];

/// What the explanation is about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub gallery_identity: u32,
    /// The gallery identity was ranked first.
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub decision: Decision,
    pub text: String,
    pub support: Vec<String>,
    pub conflict: Vec<String>,
    pub rho: f64,
    /// Matched fraction per part name, in part order.
    pub fractions: Vec<(String, f64)>,
}

fn join(names: &[String]) -> String {
    names.join(", ")
}

pub fn explain(report: &MatchReport, decision: Decision) -> Explanation {
    let fr = report.fractions();
    let support: Vec<String> = (0..NUM_PARTS)
        .filter(|&i| fr[i] >= SUPPORT_FRACTION)
        .map(|i| PART_NAMES[i].to_string())
        .collect();
    let conflict: Vec<String> = (0..NUM_PARTS)
        .filter(|&i| fr[i] < CONFLICT_FRACTION)
        .map(|i| PART_NAMES[i].to_string())
        .collect();
    let verdict = if decision.accepted { "match" } else { "no match" };
    let mut text = format!(
        "identity {}: {verdict} (rho {:.2} of 14); ",
        decision.gallery_identity, report.rho
    );
    if support.is_empty() {
        text.push_str("no supporting body parts");
    } else {
        text.push_str(&format!("supporting: {}", join(&support)));
    }
    if !conflict.is_empty() {
        text.push_str(&format!("; conflicting: {}", join(&conflict)));
    }
    Explanation {
        decision,
        text,
        support,
        conflict,
        rho: report.rho,
        fractions: (0..NUM_PARTS).map(|i| (PART_NAMES[i].to_string(), fr[i])).collect(),
    }
}

/// Paints each matched cell's 4×4 pixel block with the palette color of the
/// part matched there most often (ties to the lower label). `rgb` is
/// interleaved `H·W·3`.
pub fn overlay(rgb: &[u8], height: usize, width: usize, corrs: &CorrespondenceSet) -> Vec<u8> {
    let (h, w) = (height / 4, width / 4);
    let mut votes = vec![[0u32; NUM_PARTS]; h * w];
    for c in &corrs.pairs {
        votes[c.cell.0 * w + c.cell.1][c.part as usize - 1] += 1;
    }
    let mut out = rgb.to_vec();
    for (k, v) in votes.iter().enumerate() {
        let mut best = 0;
        for p in 1..NUM_PARTS {
            if v[p] > v[best] {
                best = p;
            }
        }
        if v[best] == 0 {
            continue;
        }
        let (cy, cx) = (k / w, k % w);
        for y in cy * 4..cy * 4 + 4 {
            for x in cx * 4..cx * 4 + 4 {
                out[(y * width + x) * 3..][..3].copy_from_slice(&PART_PALETTE[best]);
            }
        }
    }
    out
}
