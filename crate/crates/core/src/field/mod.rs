//! Radiance field conditioned on tracked body vertices and input views.
//!
//! Per query frame: image features are sampled at projected body vertices
//! for the query time and its memory frames ([`bank`]), fused over time
//! ([`temporal`]), diffused into a body-local sparse voxel grid ([`voxel`])
//! and, per query point, cross-attended with pixel-aligned features
//! ([`multiview`]) before the density/color heads ([`head`]).

pub mod bank;
pub mod grid;
pub mod head;
pub mod model;
pub mod multiview;
pub mod temporal;
pub mod voxel;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

pub use bank::{
    build_skeletal_bank, memory_frames, sample_query_pixel_features, FrameInputs, SkeletalBank,
};
pub use grid::{GridSpec, VoxelLayout};
pub use head::{posenc_dir, HeadWeights};
pub use model::{FrameState, FrozenFrame, Model, PointOutput};
pub use multiview::{multiview_attention, multiview_fuse, MultiViewWeights};
pub use temporal::{temporal_attention, temporal_fuse, TemporalWeights};
pub use voxel::{diffuse_to_voxels, sample_skeletal, VoxelGrid, VoxelWeights};

/// Which parts of the field are active. Serialized as its label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ablation {
    pub skeletal: bool,
    pub pixel_aligned: bool,
    pub temporal: bool,
    pub multiview: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        skeletal: true,
        pixel_aligned: true,
        temporal: true,
        multiview: true,
    };

    pub const fn new(skeletal: bool, pixel_aligned: bool, temporal: bool, multiview: bool) -> Self {
        Ablation {
            skeletal,
            pixel_aligned,
            temporal,
            multiview,
        }
    }

    /// The six variants compared in the ablation study, weakest first.
    pub const VARIANTS: [Ablation; 6] = [
        Ablation::new(true, false, false, false),
        Ablation::new(false, true, false, false),
        Ablation::new(true, true, false, false),
        Ablation::new(true, true, true, false),
        Ablation::new(true, true, false, true),
        Ablation::FULL,
    ];

    pub fn validate(&self) -> Result<()> {
        if !self.skeletal && !self.pixel_aligned {
            return Err(Error::invalid(
                "at least one of skeletal or pixel-aligned features must be enabled",
            ));
        }
        if self.temporal && !self.skeletal {
            return Err(Error::invalid("the temporal transformer needs skeletal features"));
        }
        if self.multiview && !(self.skeletal && self.pixel_aligned) {
            return Err(Error::invalid(
                "the multi-view transformer needs both skeletal and pixel-aligned features",
            ));
        }
        Ok(())
    }

    /// Short label such as `Sk+Px+T+MV`.
    pub fn label(&self) -> String {
        let parts = [
            (self.skeletal, "Sk"),
            (self.pixel_aligned, "Px"),
            (self.temporal, "T"),
            (self.multiview, "MV"),
        ];
        parts
            .iter()
            .filter(|p| p.0)
            .map(|p| p.1)
            .collect::<Vec<_>>()
            .join("+")
    }

    /// Parses labels like `Sk+Px+T`, case-insensitive, spaces ignored.
    pub fn parse(label: &str) -> Result<Self> {
        let mut a = Ablation::new(false, false, false, false);
        let cleaned: String = label.chars().filter(|c| !c.is_whitespace()).collect();
        for part in cleaned.split('+') {
            match part.to_ascii_lowercase().as_str() {
                "sk" => a.skeletal = true,
                "px" => a.pixel_aligned = true,
                "t" => a.temporal = true,
                "mv" => a.multiview = true,
                other => return Err(Error::invalid(format!("unknown ablation component {other:?}"))),
            }
        }
        a.validate()?;
        Ok(a)
    }
}

impl TryFrom<String> for Ablation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Ablation::parse(&s)
    }
}

impl From<Ablation> for String {
    fn from(a: Ablation) -> String {
        a.label()
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder channels after the first and second stage.
    pub encoder_c1: usize,
    pub encoder_c2: usize,
    /// Image (and voxel) feature width `d`.
    pub d_img: usize,
    /// Temporal attention embedding width `d₀`.
    pub d_temporal: usize,
    /// Multi-view embedding width `d₁`.
    pub d_multiview: usize,
    pub hidden: usize,
    pub dir_freqs: usize,
    pub grid_divisions: usize,
    pub grid_padding: usize,
    pub bbox_margin: f64,
    /// Use a distinct query map for skeletal features in the multi-view
    /// attention instead of sharing the key map.
    pub separate_query: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_c1: 16,
            encoder_c2: 32,
            d_img: 32,
            d_temporal: 64,
            d_multiview: 128,
            hidden: 64,
            dir_freqs: 4,
            grid_divisions: 32,
            grid_padding: 2,
            bbox_margin: 0.025,
            separate_query: false,
            ablation: Ablation::FULL,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            c1: self.encoder_c1,
            c2: self.encoder_c2,
            d_img: self.d_img,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        let widths = [
            self.encoder_c1,
            self.encoder_c2,
            self.d_img,
            self.d_temporal,
            self.d_multiview,
            self.hidden,
            self.grid_divisions,
        ];
        if widths.contains(&0) {
            return Err(Error::invalid("model widths and grid divisions must be positive"));
        }
        if !(self.bbox_margin >= 0.0) {
            return Err(Error::invalid("bbox margin must be non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        for a in Ablation::VARIANTS {
            assert_eq!(Ablation::parse(&a.label()).unwrap(), a);
        }
        assert_eq!(Ablation::parse("sk + px + t + mv").unwrap(), Ablation::FULL);
        assert!(Ablation::parse("Px+T").is_err());
        assert!(Ablation::parse("Sk+MV").is_err());
        assert!(Ablation::parse("Sk+Q").is_err());
    }
}
