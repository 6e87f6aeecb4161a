use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::ConvGeometry;

/// Patch embedding / downsampling convolution feeding a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub patch: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PatchSpec {
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            kernel: self.patch,
            stride: self.stride,
            padding: self.padding,
        }
    }
}

fn default_mlp_ratio() -> f32 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub depth: usize,
    pub dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f32,
    pub downsample: PatchSpec,
}

impl StageSpec {
    pub fn hidden_dim(&self) -> usize {
        ((self.dim as f32) * self.mlp_ratio).round().max(1.0) as usize
    }
}

/// Token mixer selection, resolved by name through a [`super::MixerRegistry`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerSpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<usize>,
}

impl MixerSpec {
    pub fn pooling(k: usize) -> Self {
        Self {
            kind: "pooling".into(),
            pool_size: Some(k),
        }
    }

    pub fn affine() -> Self {
        Self {
            kind: "affine".into(),
            pool_size: None,
        }
    }

    pub fn identity() -> Self {
        Self {
            kind: "identity".into(),
            pool_size: None,
        }
    }
}

fn default_in_channels() -> usize {
    3
}

fn default_norm_eps() -> f32 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub stages: Vec<StageSpec>,
    pub mixer: MixerSpec,
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub layer_scale_init: f32,
    #[serde(default)]
    pub drop_path_rate: f32,
    pub input_resolution: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
}

/// Where a block sits in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSlot {
    pub global: usize,
    pub stage: usize,
    pub index_in_stage: usize,
    pub dim: usize,
}

impl ModelSpec {
    /// The desk-scale default: depths `[1, 1, 3, 1]`, widths `[16, 32, 64, 128]`,
    /// 64×64 input, 7/4 stem and 3/2 inter-stage patch embeddings.
    pub fn nano(mixer: MixerSpec) -> Self {
        let stem = PatchSpec { patch: 7, stride: 4, padding: 2 };
        let down = PatchSpec { patch: 3, stride: 2, padding: 1 };
        let stages = [(1, 16), (1, 32), (3, 64), (1, 128)]
            .into_iter()
            .enumerate()
            .map(|(i, (depth, dim))| StageSpec {
                depth,
                dim,
                mlp_ratio: 4.0,
                downsample: if i == 0 { stem } else { down },
            })
            .collect();
        Self {
            stages,
            mixer,
            num_classes: 10,
            in_channels: 3,
            layer_scale_init: 1e-5,
            drop_path_rate: 0.0,
            input_resolution: 64,
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::InvalidSpec(format!("expected 4 stages, got {}", self.stages.len())));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth == 0 || s.dim == 0 {
                return Err(Error::InvalidSpec(format!("stage {i}: depth and dim must be >= 1")));
            }
            if !(s.mlp_ratio > 0.0) {
                return Err(Error::InvalidSpec(format!("stage {i}: mlp_ratio must be > 0")));
            }
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::InvalidSpec("num_classes and in_channels must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::InvalidSpec(format!("drop_path_rate {} outside [0, 1)", self.drop_path_rate)));
        }
        if !(self.norm_eps >= 0.0) {
            return Err(Error::InvalidSpec("norm_eps must be >= 0".into()));
        }
        self.feature_resolutions().map(|_| ())
    }

    /// Spatial extent after each stage's patch embedding. Every embedding
    /// must divide its input exactly.
    pub fn feature_resolutions(&self) -> Result<Vec<usize>> {
        let mut res = self.input_resolution;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            let d = s.downsample;
            if d.stride == 0 || res % d.stride != 0 {
                return Err(Error::InvalidSpec(format!(
                    "stage {i}: resolution {res} not divisible by stride {}",
                    d.stride
                )));
            }
            let next = d.geometry().output_extent(res).map_err(|e| Error::InvalidSpec(e.to_string()))?;
            if next != res / d.stride {
                return Err(Error::InvalidSpec(format!(
                    "stage {i}: patch {} / padding {} maps {res} to {next}, expected {}",
                    d.patch,
                    d.padding,
                    res / d.stride
                )));
            }
            res = next;
            out.push(res);
        }
        Ok(out)
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.depth).sum()
    }

    pub fn block_slots(&self) -> Vec<BlockSlot> {
        let mut slots = Vec::with_capacity(self.total_blocks());
        for (stage, s) in self.stages.iter().enumerate() {
            for index_in_stage in 0..s.depth {
                slots.push(BlockSlot {
                    global: slots.len(),
                    stage,
                    index_in_stage,
                    dim: s.dim,
                });
            }
        }
        slots
    }

    /// Same stages, widths, head and input: everything but the mixer matches.
    pub fn is_isomorphic(&self, other: &ModelSpec) -> bool {
        self.stages == other.stages
            && self.num_classes == other.num_classes
            && self.in_channels == other.in_channels
            && self.input_resolution == other.input_resolution
    }

    /// Per-block stochastic-depth rates, linear from 0 to `drop_path_rate`.
    pub fn drop_path_rates(&self) -> Vec<f32> {
        let n = self.total_blocks();
        (0..n)
            .map(|i| if n > 1 { self.drop_path_rate * i as f32 / (n - 1) as f32 } else { 0.0 })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nano_layout() {
        let spec = ModelSpec::nano(MixerSpec::affine());
        spec.validate().unwrap();
        assert_eq!(spec.total_blocks(), 6);
        assert_eq!(spec.feature_resolutions().unwrap(), vec![16, 8, 4, 2]);
        let slots = spec.block_slots();
        assert_eq!(slots[4].stage, 2);
        assert_eq!(slots[4].index_in_stage, 2);
        assert_eq!(slots[5].dim, 128);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = ModelSpec::nano(MixerSpec::identity());
        spec.stages.pop();
        assert!(spec.validate().is_err());

        let mut spec = ModelSpec::nano(MixerSpec::identity());
        spec.input_resolution = 60;
        assert!(spec.validate().is_err());

        let mut spec = ModelSpec::nano(MixerSpec::identity());
        spec.stages[1].depth = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn json_round_trip_fills_defaults() {
        let json = r#"{
            "stages": [
                {"depth": 1, "dim": 8, "downsample": {"patch": 7, "stride": 4, "padding": 2}},
                {"depth": 1, "dim": 8, "downsample": {"patch": 3, "stride": 2, "padding": 1}},
                {"depth": 1, "dim": 8, "downsample": {"patch": 3, "stride": 2, "padding": 1}},
                {"depth": 1, "dim": 8, "downsample": {"patch": 3, "stride": 2, "padding": 1}}
            ],
            "mixer": {"kind": "pooling", "pool_size": 3},
            "num_classes": 4,
            "layer_scale_init": 1e-5,
            "input_resolution": 32
        }"#;
        let spec: ModelSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.stages[0].mlp_ratio, 4.0);
        assert_eq!(spec.in_channels, 3);
        assert_eq!(spec.mixer, MixerSpec::pooling(3));
        let back: ModelSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
