use serde::{Deserialize, Serialize};

use super::registry::{ParamRegistry, Role};
use super::BackboneError;
use crate::autograd::conv_out_extent;

/// Shape of a stem-plus-four-stage residual network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub stem_channels: usize,
    /// Square stem kernel. Stem geometry follows from it: a 7×7 stem uses
    /// stride 2 (large-image layout), smaller stems use stride 1.
    pub stem_kernel: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
}

impl Default for BackboneConfig {
    /// ResNet10 layout on 64×64 RGB input.
    fn default() -> Self {
        Self {
            input_channels: 3,
            input_size: 64,
            stem_channels: 64,
            stem_kernel: 7,
            stage_channels: [64, 128, 256, 512],
            blocks_per_stage: [1, 1, 1, 1],
        }
    }
}

impl BackboneConfig {
    /// The small CPU-friendly network used throughout the test suites.
    pub fn desk() -> Self {
        Self {
            input_channels: 3,
            input_size: 32,
            stem_channels: 16,
            stem_kernel: 3,
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: [1, 1, 1, 1],
        }
    }

    /// ResNet18 block counts on top of another layout.
    pub fn with_resnet18_blocks(mut self) -> Self {
        self.blocks_per_stage = [2, 2, 2, 2];
        self
    }

    pub fn embedding_dim(&self) -> usize {
        self.stage_channels[3]
    }

    pub fn stem_stride(&self) -> usize {
        if self.stem_kernel >= 7 {
            2
        } else {
            1
        }
    }

    pub fn stem_padding(&self) -> usize {
        self.stem_kernel / 2
    }

    /// Stage 1 keeps resolution; stages 2–4 halve it in their first block.
    pub fn stage_stride(stage: usize) -> usize {
        if stage == 0 {
            1
        } else {
            2
        }
    }

    /// Spatial extent after the stem and after each stage, for square input
    /// of `size`.
    pub fn spatial_extents(&self, size: usize) -> Result<[usize; 5], BackboneError> {
        let too_small = || BackboneError::InputTooSmall { size, config: self.clone() };
        let stem = conv_out_extent(size, self.stem_kernel, self.stem_stride(), self.stem_padding())
            .ok_or_else(too_small)?;
        let mut ext = [stem / 2, 0, 0, 0, 0];
        if ext[0] == 0 {
            return Err(too_small());
        }
        for s in 0..4 {
            let prev = ext[s];
            let next = conv_out_extent(prev, 3, Self::stage_stride(s), 1).ok_or_else(too_small)?;
            ext[s + 1] = next;
        }
        if ext.contains(&0) {
            return Err(too_small());
        }
        Ok(ext)
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let bad = |why: &str| BackboneError::InvalidConfig(why.to_string());
        if self.input_channels == 0 || self.stem_channels == 0 || self.stem_kernel == 0 {
            return Err(bad("channel counts and stem kernel must be positive"));
        }
        if self.stage_channels.contains(&0) {
            return Err(bad("stage channels must be positive"));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(bad("every stage needs at least one block"));
        }
        // Spatial extents after stride 2 at stages 2–4 must stay ≥ 2 before
        // the last halving so that the final map is non-empty.
        let ext = self.spatial_extents(self.input_size)?;
        if ext[4] < 1 || ext[3] < 2 {
            return Err(BackboneError::InputTooSmall { size: self.input_size, config: self.clone() });
        }
        Ok(())
    }

    /// Recovers the layout from a backbone registry's tensor shapes.
    pub fn infer(registry: &ParamRegistry, input_size: usize) -> Result<Self, BackboneError> {
        let stem = registry.get("stem.conv", Role::ConvWeight)?;
        let s = stem.shape();
        let mut stage_channels = [0; 4];
        let mut blocks_per_stage = [0; 4];
        for stage in 0..4 {
            let mut b = 0;
            while registry.get(&format!("stage{}.block{}.conv1", stage + 1, b + 1), Role::ConvWeight).is_ok() {
                b += 1;
            }
            if b == 0 {
                return Err(BackboneError::InvalidConfig(format!("stage{} has no blocks", stage + 1)));
            }
            blocks_per_stage[stage] = b;
            stage_channels[stage] = registry
                .get(&format!("stage{}.block1.conv1", stage + 1), Role::ConvWeight)?
                .shape()[0];
        }
        Ok(Self {
            input_channels: s[1],
            input_size,
            stem_channels: s[0],
            stem_kernel: s[2],
            stage_channels,
            blocks_per_stage,
        })
    }
}
