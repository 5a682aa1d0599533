use serde::{Deserialize, Serialize};

use super::NetError;
use crate::numcore::BlockKind;

/// Normalization used inside blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Batch statistics in training, running averages at inference.
    Batch,
    /// Per-sample statistics everywhere.
    Instance,
}

/// Network shape. The local encoder always has three stages separated by two
/// 2× max-pools.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub vertices: usize,
    pub local_widths: [usize; 3],
    pub local_blocks: [usize; 3],
    pub detector_width: usize,
    pub detector_blocks: usize,
    pub semantic_width: usize,
    pub semantic_blocks: usize,
    pub semantic_dim: usize,
    pub global_widths: Vec<usize>,
    pub point_widths: Vec<usize>,
    pub final_widths: Vec<usize>,
    pub temperature_init: f32,
    pub norm: NormKind,
}

/// One block in network order.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    /// Parameter name prefix, e.g. `local.1.2`.
    pub name: String,
    pub kind: BlockKind,
    pub cin: usize,
    pub cout: usize,
    /// Linear output projection: no normalization, no ReLU.
    pub projection: bool,
}

impl BlockSpec {
    pub fn layer(&self) -> &'static str {
        match self.kind {
            BlockKind::Conv3x3 => "conv",
            BlockKind::Pointwise => "linear",
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration sized for CPU training.
    pub fn desk() -> Self {
        Self {
            height: 64,
            width: 64,
            vertices: 256,
            local_widths: [8, 16, 32],
            local_blocks: [4, 4, 4],
            detector_width: 16,
            detector_blocks: 2,
            semantic_width: 32,
            semantic_blocks: 12,
            semantic_dim: 64,
            global_widths: vec![32, 64, 64, 128],
            point_widths: vec![64, 64, 128],
            final_widths: vec![128, 128, 64, 64, 64, 64],
            temperature_init: 10.0,
            norm: NormKind::Batch,
        }
    }

    /// Full-size configuration.
    pub fn paper() -> Self {
        Self {
            height: 224,
            width: 224,
            vertices: 1024,
            local_widths: [32, 64, 128],
            local_blocks: [4, 4, 4],
            detector_width: 128,
            detector_blocks: 2,
            semantic_width: 256,
            semantic_blocks: 12,
            semantic_dim: 512,
            global_widths: vec![256, 512, 512, 1024],
            point_widths: vec![64, 128, 1024],
            final_widths: vec![1024, 1024, 512, 512, 512, 512],
            temperature_init: 10.0,
            norm: NormKind::Batch,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    pub fn local_dim(&self) -> usize {
        self.local_widths[2]
    }

    pub fn global_dim(&self) -> usize {
        *self.global_widths.last().unwrap()
    }

    pub fn point_dim(&self) -> usize {
        *self.point_widths.last().unwrap()
    }

    pub fn final_dim(&self) -> usize {
        *self.final_widths.last().unwrap()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let fail = |m: String| Err(NetError::Config(m));
        if self.height == 0 || self.width == 0 || self.height % 4 != 0 || self.width % 4 != 0 {
            return fail(format!("image size {}x{} must be positive multiples of 4", self.height, self.width));
        }
        if self.vertices < 1 {
            return fail("vertex count must be positive".into());
        }
        if self.local_blocks.contains(&0) || self.local_widths.contains(&0) {
            return fail("every local stage needs at least one block of positive width".into());
        }
        if self.detector_blocks == 0 || self.semantic_blocks == 0 {
            return fail("detector and semantic heads need at least one block".into());
        }
        if self.detector_blocks > 1 && self.detector_width == 0 || self.semantic_blocks > 1 && self.semantic_width == 0 {
            return fail("hidden head widths must be positive".into());
        }
        for (name, w) in [
            ("global", &self.global_widths),
            ("point", &self.point_widths),
            ("final", &self.final_widths),
        ] {
            if w.is_empty() || w.contains(&0) {
                return fail(format!("{name} widths must be non-empty and positive"));
            }
        }
        if self.semantic_dim != self.final_dim() {
            return fail(format!(
                "semantic dim {} must equal final point dim {}",
                self.semantic_dim,
                self.final_dim()
            ));
        }
        if !(self.temperature_init.is_finite() && self.temperature_init > 0.0) {
            return fail(format!("temperature init {} must be positive", self.temperature_init));
        }
        Ok(())
    }

    /// All blocks in stage order: local, detector, semantic, global, point, final.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let mut out = Vec::new();
        let conv = |name: String, cin, cout, projection| BlockSpec {
            name,
            kind: BlockKind::Conv3x3,
            cin,
            cout,
            projection,
        };
        let mut cin = 3;
        for s in 0..3 {
            for b in 0..self.local_blocks[s] {
                out.push(conv(format!("local.{s}.{b}"), cin, self.local_widths[s], false));
                cin = self.local_widths[s];
            }
        }
        let cl = self.local_dim();
        let head = |out: &mut Vec<BlockSpec>, stage: &str, blocks: usize, hidden: usize, dim: usize| {
            let mut cin = cl;
            for b in 0..blocks {
                let last = b + 1 == blocks;
                let cout = if last { dim } else { hidden };
                out.push(conv(format!("{stage}.{b}"), cin, cout, last));
                cin = cout;
            }
        };
        head(&mut out, "detector", self.detector_blocks, self.detector_width, 1);
        head(&mut out, "semantic", self.semantic_blocks, self.semantic_width, self.semantic_dim);
        let mut cin = cl;
        for (b, &w) in self.global_widths.iter().enumerate() {
            out.push(conv(format!("global.{b}"), cin, w, false));
            cin = w;
        }
        let pw = |name: String, cin, cout, projection| BlockSpec {
            name,
            kind: BlockKind::Pointwise,
            cin,
            cout,
            projection,
        };
        let mut cin = 3;
        for (b, &w) in self.point_widths.iter().enumerate() {
            out.push(pw(format!("point.{b}"), cin, w, false));
            cin = w;
        }
        let mut cin = self.global_dim() + self.point_dim();
        let n = self.final_widths.len();
        for (b, &w) in self.final_widths.iter().enumerate() {
            out.push(pw(format!("final.{b}"), cin, w, b + 1 == n));
            cin = w;
        }
        out
    }
}
