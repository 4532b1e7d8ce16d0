//! Declarative descriptions of ViTAE variants.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::ActivationKind;

/// Where the convolutional branch joins the attention branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Added before the FFN.
    Pre,
    /// Added after the FFN residual.
    Post,
}

/// What runs beside the attention branch of a reduction cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParallelBranch {
    Pcm,
    Prm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosEmbeddingKind {
    #[default]
    Sinusoid,
}

fn default_true() -> bool {
    true
}
fn default_ffn_ratio() -> f64 {
    2.0
}
fn default_one() -> usize {
    1
}
fn default_fusion() -> Fusion {
    Fusion::Pre
}
fn default_silu() -> ActivationKind {
    ActivationKind::Silu
}
fn default_gelu() -> ActivationKind {
    ActivationKind::Gelu
}
fn default_branch() -> ParallelBranch {
    ParallelBranch::Pcm
}

/// One reduction cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RcConfig {
    pub in_channels: usize,
    /// Output channels of each dilation branch of the pyramid reduction.
    pub branch_channels: usize,
    pub dilation_set: Vec<usize>,
    pub stride: usize,
    pub kernel: usize,
    /// Token width leaving the cell.
    pub out_channels: usize,
    #[serde(default = "default_one")]
    pub heads: usize,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: f64,
    #[serde(default = "default_true")]
    pub pcm_enabled: bool,
    pub pcm_strides: [usize; 3],
    /// Groups of the second and third PCM convolutions.
    #[serde(default = "default_one")]
    pub pcm_groups: usize,
    #[serde(default = "default_fusion")]
    pub fusion: Fusion,
    #[serde(default = "default_true")]
    pub pcm_bn: bool,
    #[serde(default)]
    pub pcm_extra_bn: bool,
    #[serde(default = "default_silu")]
    pub pcm_activation: ActivationKind,
    #[serde(default = "default_branch")]
    pub parallel_branch: ParallelBranch,
    #[serde(default = "default_gelu")]
    pub prm_activation: ActivationKind,
}

impl RcConfig {
    /// Width of the multi-scale tokens inside the cell: `|S| · branch_channels`.
    pub fn cell_dim(&self) -> usize {
        self.dilation_set.len() * self.branch_channels
    }

    pub fn ffn_hidden(&self) -> usize {
        ffn_hidden(self.out_channels, self.ffn_ratio)
    }

    fn validate(&self, idx: usize) -> Result<()> {
        let tag = format!("rc{}", idx + 1);
        if self.dilation_set.is_empty() {
            return Err(config_err!("{tag}: dilation_set must not be empty"));
        }
        if self.dilation_set.contains(&0) {
            return Err(config_err!("{tag}: dilation rates must be positive"));
        }
        if self.branch_channels == 0 || self.out_channels == 0 || self.in_channels == 0 {
            return Err(config_err!("{tag}: channel counts must be positive"));
        }
        if self.stride == 0 {
            return Err(config_err!("{tag}: stride must be positive"));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(config_err!("{tag}: kernel {} must be odd", self.kernel));
        }
        if self.heads == 0 || self.cell_dim() % self.heads != 0 {
            return Err(config_err!(
                "{tag}: cell dim {} (|S|={} x {}) not divisible by heads {}",
                self.cell_dim(),
                self.dilation_set.len(),
                self.branch_channels,
                self.heads
            ));
        }
        let pcm_product: usize = self.pcm_strides.iter().product();
        if pcm_product != self.stride {
            return Err(config_err!(
                "{tag}: pcm_strides {:?} multiply to {pcm_product}, cell stride is {}",
                self.pcm_strides,
                self.stride
            ));
        }
        if self.pcm_groups == 0 || self.out_channels % self.pcm_groups != 0 {
            return Err(config_err!(
                "{tag}: pcm_groups {} must divide out_channels {}",
                self.pcm_groups,
                self.out_channels
            ));
        }
        if self.parallel_branch == ParallelBranch::Prm
            && self.pcm_enabled
            && self.out_channels % self.dilation_set.len() != 0
        {
            return Err(config_err!(
                "{tag}: parallel PRM needs out_channels {} divisible by |S| = {}",
                self.out_channels,
                self.dilation_set.len()
            ));
        }
        check_ratio(&tag, self.ffn_ratio)
    }
}

/// One normal cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NcConfig {
    pub embed_dim: usize,
    pub heads: usize,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: f64,
    #[serde(default = "default_one")]
    pub pcm_groups: usize,
    #[serde(default = "default_fusion")]
    pub fusion: Fusion,
    #[serde(default = "default_true")]
    pub pcm_bn: bool,
    #[serde(default)]
    pub pcm_extra_bn: bool,
    #[serde(default = "default_silu")]
    pub pcm_activation: ActivationKind,
    #[serde(default = "default_true")]
    pub pcm_enabled: bool,
}

impl NcConfig {
    pub fn ffn_hidden(&self) -> usize {
        ffn_hidden(self.embed_dim, self.ffn_ratio)
    }

    fn validate(&self, idx: usize) -> Result<()> {
        let tag = format!("nc{}", idx + 1);
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(config_err!(
                "{tag}: embed_dim {} not divisible by heads {}",
                self.embed_dim,
                self.heads
            ));
        }
        if self.pcm_groups == 0 || self.embed_dim % self.pcm_groups != 0 {
            return Err(config_err!(
                "{tag}: pcm_groups {} must divide embed_dim {}",
                self.pcm_groups,
                self.embed_dim
            ));
        }
        check_ratio(&tag, self.ffn_ratio)
    }
}

fn ffn_hidden(dim: usize, ratio: f64) -> usize {
    ((dim as f64) * ratio).round().max(1.0) as usize
}

fn check_ratio(tag: &str, ratio: f64) -> Result<()> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(config_err!("{tag}: ffn_ratio must be positive, got {ratio}"));
    }
    Ok(())
}

/// A full ViTAE variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `(H, W, C)`.
    pub input_size: (usize, usize, usize),
    pub rcs: Vec<RcConfig>,
    pub ncs: Vec<NcConfig>,
    pub num_classes: usize,
    #[serde(default = "default_true")]
    pub use_pos_embedding: bool,
    #[serde(default)]
    pub pos_embedding_kind: PosEmbeddingKind,
    #[serde(default)]
    pub seed: u64,
}

pub const PRESET_NAMES: [&str; 4] = ["vitae-t", "vitae-s", "vitae-micro", "vitae-micro-64"];

impl ModelConfig {
    /// Looks up a compiled-in variant by name.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "vitae-t" => Ok(Self::vitae_t()),
            "vitae-s" => Ok(Self::vitae_s()),
            "vitae-micro" => Ok(Self::vitae_micro()),
            "vitae-micro-64" => Ok(Self::vitae_micro_64()),
            other => Err(config_err!(
                "unknown preset {other:?}; expected one of {}",
                PRESET_NAMES.join(", ")
            )),
        }
    }

    /// ViTAE-T: 4.8M parameters, 1.5 GMACs at 224².
    pub fn vitae_t() -> Self {
        Self::imagenet(256, 4, 7, 64)
    }

    /// ViTAE-S: 23.6M parameters, 5.6 GMACs at 224².
    pub fn vitae_s() -> Self {
        Self::imagenet(384, 6, 14, 96)
    }

    fn imagenet(embed: usize, heads: usize, cells: usize, nc_groups: usize) -> Self {
        let rc = |in_channels, branch_channels, dilation_set: &[usize], stride, kernel, out_channels, pcm_strides| {
            RcConfig {
                in_channels,
                branch_channels,
                dilation_set: dilation_set.to_vec(),
                stride,
                kernel,
                out_channels,
                heads: 1,
                ffn_ratio: 2.0,
                pcm_enabled: true,
                pcm_strides,
                pcm_groups: out_channels / 4,
                fusion: Fusion::Pre,
                pcm_bn: true,
                pcm_extra_bn: false,
                pcm_activation: ActivationKind::Silu,
                parallel_branch: ParallelBranch::Pcm,
                prm_activation: ActivationKind::Gelu,
            }
        };
        ModelConfig {
            input_size: (224, 224, 3),
            rcs: vec![
                rc(3, 4, &[1, 2, 3, 4], 4, 7, 64, [2, 2, 1]),
                rc(64, 16, &[1, 2, 3], 2, 3, 64, [2, 1, 1]),
                rc(64, embed / 2, &[1, 2], 2, 3, embed, [2, 1, 1]),
            ],
            ncs: vec![Self::nc(embed, heads, nc_groups); cells],
            num_classes: 1000,
            use_pos_embedding: true,
            pos_embedding_kind: PosEmbeddingKind::Sinusoid,
            seed: 0,
        }
    }

    fn nc(embed_dim: usize, heads: usize, pcm_groups: usize) -> NcConfig {
        NcConfig {
            embed_dim,
            heads,
            ffn_ratio: 2.0,
            pcm_groups,
            fusion: Fusion::Pre,
            pcm_bn: true,
            pcm_extra_bn: false,
            pcm_activation: ActivationKind::Silu,
            pcm_enabled: true,
        }
    }

    fn micro_rc(in_channels: usize, stride: usize, kernel: usize, pcm_strides: [usize; 3]) -> RcConfig {
        RcConfig {
            in_channels,
            branch_channels: 4,
            dilation_set: vec![1, 2],
            stride,
            kernel,
            out_channels: 8,
            heads: 1,
            ffn_ratio: 2.0,
            pcm_enabled: true,
            pcm_strides,
            pcm_groups: 1,
            fusion: Fusion::Pre,
            pcm_bn: true,
            pcm_extra_bn: false,
            pcm_activation: ActivationKind::Silu,
            parallel_branch: ParallelBranch::Pcm,
            prm_activation: ActivationKind::Gelu,
        }
    }

    /// Smallest legal model: one reduction cell (S = [1, 2]) and one normal
    /// cell of width 8 with 2 heads on a 16×16×1 input (4×4 token grid).
    pub fn vitae_micro() -> Self {
        ModelConfig {
            input_size: (16, 16, 1),
            rcs: vec![Self::micro_rc(1, 4, 7, [2, 2, 1])],
            ncs: vec![Self::nc(8, 2, 2)],
            num_classes: 3,
            use_pos_embedding: true,
            pos_embedding_kind: PosEmbeddingKind::Sinusoid,
            seed: 0,
        }
    }

    /// The micro model scaled to a 64×64×1 input: three reduction cells
    /// (strides 4, 2, 2) bring the input down to the same 4×4 token grid,
    /// followed by two normal cells.
    pub fn vitae_micro_64() -> Self {
        ModelConfig {
            input_size: (64, 64, 1),
            rcs: vec![
                Self::micro_rc(1, 4, 7, [2, 2, 1]),
                Self::micro_rc(8, 2, 3, [2, 1, 1]),
                Self::micro_rc(8, 2, 3, [2, 1, 1]),
            ],
            ncs: vec![Self::nc(8, 2, 2); 2],
            ..Self::vitae_micro()
        }
    }

    pub fn total_stride(&self) -> usize {
        self.rcs.iter().map(|r| r.stride).product()
    }

    /// Token grid entering the normal cells for an `h×w` input.
    pub fn grid_for(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.total_stride();
        if s == 0 || h % s != 0 || w % s != 0 {
            return Err(config_err!(
                "input {h}x{w} must be a multiple of the total stride {s}"
            ));
        }
        Ok((h / s, w / s))
    }

    /// Token width entering the normal cells.
    pub fn embed_dim(&self) -> usize {
        self.rcs.last().map(|r| r.out_channels).unwrap_or(self.input_size.2)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, ch) = self.input_size;
        if h == 0 || w == 0 || ch == 0 {
            return Err(config_err!("input_size {:?} must be positive", self.input_size));
        }
        if self.rcs.is_empty() {
            return Err(config_err!("at least one reduction cell is required"));
        }
        if self.num_classes == 0 {
            return Err(config_err!("num_classes must be positive"));
        }
        let mut channels = ch;
        for (i, rc) in self.rcs.iter().enumerate() {
            rc.validate(i)?;
            if rc.in_channels != channels {
                return Err(config_err!(
                    "rc{}: in_channels {} but the previous stage produces {channels}",
                    i + 1,
                    rc.in_channels
                ));
            }
            channels = rc.out_channels;
        }
        self.grid_for(h, w)?;
        for (i, nc) in self.ncs.iter().enumerate() {
            nc.validate(i)?;
            if nc.embed_dim != channels {
                return Err(config_err!(
                    "nc{}: embed_dim {} must equal the last reduction cell's out_channels {channels}",
                    i + 1,
                    nc.embed_dim
                ));
            }
        }
        if self.use_pos_embedding && channels % 2 != 0 {
            return Err(config_err!(
                "sinusoid position encoding needs an even token width, got {channels}"
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESET_NAMES {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("vitae-xl").is_err());
    }

    #[test]
    fn preset_dilation_schedule_descends() {
        let t = ModelConfig::vitae_t();
        let sets: Vec<_> = t.rcs.iter().map(|r| r.dilation_set.clone()).collect();
        assert_eq!(sets, vec![vec![1, 2, 3, 4], vec![1, 2, 3], vec![1, 2]]);
        assert_eq!(t.total_stride(), 16);
        assert_eq!(t.rcs[0].kernel, 7);
        assert_eq!(t.rcs[1].kernel, 3);
        let s = ModelConfig::vitae_s();
        assert_eq!((s.ncs.len(), s.ncs[0].heads, s.embed_dim()), (14, 6, 384));
        assert_eq!((t.ncs.len(), t.ncs[0].heads, t.embed_dim()), (7, 4, 256));
    }

    #[test]
    fn pcm_stride_product_must_match() {
        let mut cfg = ModelConfig::vitae_micro();
        cfg.rcs[0].pcm_strides = [2, 1, 1];
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("pcm_strides"), "{err}");
    }

    #[test]
    fn indivisible_input_rejected() {
        let mut cfg = ModelConfig::vitae_t();
        cfg.input_size = (100, 100, 3);
        assert!(cfg.validate().unwrap_err().to_string().contains("multiple of the total stride 16"));
    }

    #[test]
    fn embed_mismatch_rejected() {
        let mut cfg = ModelConfig::vitae_micro();
        cfg.ncs[0].embed_dim = 6;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let cfg = ModelConfig::vitae_t();
        assert_eq!(ModelConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(ModelConfig::from_json(&v.to_string()).is_err());
    }
}
