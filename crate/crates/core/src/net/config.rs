//! Model configuration: the per-stage hyperparameters and whole-model
//! settings, with JSON (de)serialization for the CLI.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixer::attention_split;

/// Default kernel sizes of the multi-scale FFN groups.
pub const DEFAULT_FFN_SCALES: [usize; 4] = [1, 3, 5, 7];

/// Token-mixer selection: the dual mixer, or a plain depthwise 7x7 baseline
/// used for receptive-field contrast experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MixerMode {
    #[default]
    Dmixer,
    DwconvBaseline,
}

/// Hyperparameters of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
    /// Spatial-reduction stride of the attention branch (1 = no reduction).
    pub sr_stride: usize,
    pub heads: usize,
    pub idconv_kernel: usize,
    pub idconv_groups: usize,
    pub ffn_expansion: usize,
    /// Feature-map resolution of this stage, `[H, W]`.
    pub resolution: [usize; 2],
}

/// Whole-model configuration. The input resolution is bound at build time:
/// it is four times the first stage's resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stem_channels: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_ratio")]
    pub attention_ratio: f64,
    #[serde(default)]
    pub mixer_mode: MixerMode,
    pub stages: Vec<StageConfig>,
}

fn default_classes() -> usize {
    1000
}

fn default_ratio() -> f64 {
    0.5
}

/// Output extent of the strided embeds: 7x7 stride-4 pad-3 at the stem,
/// 3x3 stride-2 pad-1 between stages.
pub fn embed_out_extent(input: usize, stage_index: usize) -> usize {
    if stage_index == 0 {
        (input + 6 - 7) / 4 + 1
    } else {
        (input + 2 - 3) / 2 + 1
    }
}

/// Key/value map extent after an overlapping reduction of stride `s`
/// (kernel `s + 3`, padding `(s + 2) / 2`).
pub fn reduced_extent(extent: usize, stride: usize) -> usize {
    if stride <= 1 {
        extent
    } else {
        (extent - 1) / stride + 1
    }
}

impl ModelConfig {
    /// The input resolution this configuration is bound to.
    pub fn input_resolution(&self) -> [usize; 2] {
        let r = self.stages[0].resolution;
        [r[0] * 4, r[1] * 4]
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::config(format!(
                "expected 4 stages, got {}",
                self.stages.len()
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be >= 1".into()));
        }
        if !(self.attention_ratio > 0.0 && self.attention_ratio < 1.0) {
            return Err(Error::config(format!(
                "attention_ratio {} must lie in (0, 1)",
                self.attention_ratio
            )));
        }
        if self.stem_channels != self.stages[0].channels {
            return Err(Error::config(format!(
                "stem_channels {} must equal stage1 channels {}",
                self.stem_channels, self.stages[0].channels
            )));
        }
        let input = self.input_resolution();
        let mut prev = input;
        for (i, s) in self.stages.iter().enumerate() {
            let stage = i + 1;
            let want = [
                embed_out_extent(prev[0], i),
                embed_out_extent(prev[1], i),
            ];
            if s.resolution != want {
                return Err(Error::config(format!(
                    "stage{stage}: resolution {:?} does not follow the embed chain (expected {:?})",
                    s.resolution, want
                )));
            }
            prev = s.resolution;
            if s.channels == 0 || s.blocks == 0 || s.sr_stride == 0 || s.heads == 0 {
                return Err(Error::config(format!(
                    "stage{stage}: channels/blocks/sr_stride/heads must be >= 1"
                )));
            }
            if s.idconv_kernel % 2 == 0 {
                return Err(Error::config(format!(
                    "stage{stage}: idconv_kernel {} must be odd",
                    s.idconv_kernel
                )));
            }
            if s.idconv_groups == 0 {
                return Err(Error::config(format!("stage{stage}: idconv_groups must be >= 1")));
            }
            let hidden = s.ffn_expansion * s.channels;
            if hidden == 0 || hidden % DEFAULT_FFN_SCALES.len() != 0 {
                return Err(Error::config(format!(
                    "stage{stage}: ffn hidden width {hidden} not divisible into {} scale groups",
                    DEFAULT_FFN_SCALES.len()
                )));
            }
            if self.mixer_mode == MixerMode::Dmixer {
                let ca = attention_split(s.channels, self.attention_ratio).map_err(|_| {
                    Error::config(format!(
                        "stage{stage}: channels {} cannot be split at attention_ratio {}",
                        s.channels, self.attention_ratio
                    ))
                })?;
                if ca % s.heads != 0 {
                    return Err(Error::config(format!(
                        "stage{stage}: attention channels {ca} not divisible by heads {}",
                        s.heads
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("malformed config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn variant(
        channels: [usize; 4],
        blocks: [usize; 4],
        heads: [usize; 4],
        groups: [usize; 4],
        expansions: [usize; 4],
    ) -> Self {
        let strides = [8, 4, 2, 1];
        let mut res = [56, 56];
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            if i > 0 {
                res = [embed_out_extent(res[0], i), embed_out_extent(res[1], i)];
            }
            stages.push(StageConfig {
                channels: channels[i],
                blocks: blocks[i],
                sr_stride: strides[i],
                heads: heads[i],
                idconv_kernel: 7,
                idconv_groups: groups[i],
                ffn_expansion: expansions[i],
                resolution: res,
            });
        }
        ModelConfig {
            stem_channels: channels[0],
            num_classes: 1000,
            attention_ratio: 0.5,
            mixer_mode: MixerMode::Dmixer,
            stages,
        }
    }

    /// TransXNet-T: 12.8M params, 1.8 GFLOPs at 224x224.
    pub fn tiny() -> Self {
        Self::variant(
            [48, 96, 224, 448],
            [3, 3, 9, 3],
            [1, 2, 4, 8],
            [2, 2, 2, 2],
            [4, 4, 4, 4],
        )
    }

    /// TransXNet-S: 26.9M params, 4.5 GFLOPs at 224x224.
    pub fn small() -> Self {
        Self::variant(
            [64, 128, 320, 512],
            [4, 4, 12, 4],
            [1, 2, 5, 8],
            [2, 2, 3, 4],
            [6, 6, 4, 4],
        )
    }

    /// TransXNet-B: 48.0M params, 8.3 GFLOPs at 224x224.
    pub fn base() -> Self {
        Self::variant(
            [76, 152, 336, 672],
            [4, 4, 21, 4],
            [2, 4, 8, 16],
            [2, 2, 4, 4],
            [8, 8, 4, 4],
        )
    }

    /// Desk-scale configuration for tests: one block per stage, narrow
    /// channels, arbitrary (divisible-by-4) input resolution.
    pub fn micro(input: usize) -> Self {
        let channels = [8usize, 16, 32, 64];
        let heads = [1usize, 2, 4, 8];
        let strides = [8usize, 4, 2, 1];
        let mut res = [embed_out_extent(input, 0); 2];
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            if i > 0 {
                res = [embed_out_extent(res[0], i), embed_out_extent(res[1], i)];
            }
            stages.push(StageConfig {
                channels: channels[i],
                blocks: 1,
                sr_stride: strides[i],
                heads: heads[i],
                idconv_kernel: 7,
                idconv_groups: 2,
                ffn_expansion: 4,
                resolution: res,
            });
        }
        ModelConfig {
            stem_channels: channels[0],
            num_classes: 10,
            attention_ratio: 0.5,
            mixer_mode: MixerMode::Dmixer,
            stages,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_variants_validate() {
        for cfg in [ModelConfig::tiny(), ModelConfig::small(), ModelConfig::base()] {
            cfg.validate().unwrap();
            assert_eq!(cfg.input_resolution(), [224, 224]);
            let res: Vec<usize> = cfg.stages.iter().map(|s| s.resolution[0]).collect();
            assert_eq!(res, vec![56, 28, 14, 7]);
        }
    }

    #[test]
    fn micro_chain() {
        let cfg = ModelConfig::micro(32);
        cfg.validate().unwrap();
        let res: Vec<usize> = cfg.stages.iter().map(|s| s.resolution[0]).collect();
        assert_eq!(res, vec![8, 4, 2, 1]);
        let cfg64 = ModelConfig::micro(64);
        cfg64.validate().unwrap();
        let res: Vec<usize> = cfg64.stages.iter().map(|s| s.resolution[0]).collect();
        assert_eq!(res, vec![16, 8, 4, 2]);
    }

    #[test]
    fn json_round_trip() {
        let cfg = ModelConfig::tiny();
        let text = cfg.to_json();
        let back = ModelConfig::from_json(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn odd_channels_with_half_ratio_rejected() {
        let mut cfg = ModelConfig::micro(32);
        cfg.stages[2].channels = 33;
        let err = cfg.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stage3"), "message should name the stage: {msg}");
    }

    #[test]
    fn broken_resolution_chain_rejected() {
        let mut cfg = ModelConfig::micro(32);
        cfg.stages[1].resolution = [5, 5];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn malformed_json_names_field() {
        let err = ModelConfig::from_json("{\"stem_channels\": 8}").unwrap_err();
        assert!(err.to_string().contains("stages"));
    }

    #[test]
    fn reduced_extents() {
        assert_eq!(reduced_extent(56, 8), 7);
        assert_eq!(reduced_extent(28, 4), 7);
        assert_eq!(reduced_extent(14, 2), 7);
        assert_eq!(reduced_extent(7, 1), 7);
        assert_eq!(reduced_extent(7, 2), 4);
    }
}
