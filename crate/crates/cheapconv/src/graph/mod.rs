//! Declarative network descriptions, the standard→cheap convolution rewrite,
//! and realized network instances.
//!
//! An [`ArchDescriptor`] is the serializable form (JSON). [`plan::expand`]
//! lowers it into a concrete layer plan that both the cost model and the
//! network builder walk, so parameter accounting and the realized network
//! cannot drift apart.

pub mod network;
pub mod plan;
pub mod presets;

use crate::error::{Error, Result};
use crate::layers::ConvKind;
use serde::{Deserialize, Serialize};

pub use network::{ForwardPass, NetworkInstance};

/// Number of image channels every network ingests (CIFAR-style RGB).
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Plain convolution layer(s), e.g. the stem.
    Conv,
    /// Post-activation basic residual block (two K×K convs).
    ResidualBasic,
    /// Bottleneck residual block (1×1 reduce, K×K, 1×1 expand ×4).
    Bottleneck,
    /// Dense layers with channel concatenation; `stride: 2` appends a
    /// transition (1×1 conv + 2×2 average pool) after the stage.
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConv {
    pub kind: ConvKind,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub block: BlockKind,
    pub conv: StageConv,
    /// Output channels for conv/residual stages; growth rate for dense stages.
    pub channels: usize,
    pub stride: usize,
    pub repeat: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub name: String,
    pub stages: Vec<StageSpec>,
    pub head: HeadSpec,
}

impl ArchDescriptor {
    /// Structural validation; concrete per-layer checks (group divisibility,
    /// spatial sizes) happen during expansion.
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Arch("descriptor has no stages".into()));
        }
        if self.head.classes < 2 {
            return Err(Error::Arch(format!(
                "head must have at least 2 classes, got {}",
                self.head.classes
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let at = |m: String| Error::Arch(format!("stage {i} ({:?}): {m}", s.block));
            if s.channels == 0 || s.repeat == 0 {
                return Err(at(format!("channels={} repeat={} must be positive", s.channels, s.repeat)));
            }
            if s.stride != 1 && s.stride != 2 {
                return Err(at(format!("stride must be 1 or 2, got {}", s.stride)));
            }
            if s.conv.k == 0 || s.conv.k % 2 == 0 {
                return Err(at(format!("kernel must be odd and positive, got {}", s.conv.k)));
            }
            match s.conv.kind {
                ConvKind::Group => {
                    if s.conv.groups.map_or(true, |g| g == 0) {
                        return Err(at("group convolution needs groups > 0".into()));
                    }
                }
                _ => {
                    if s.conv.groups.is_some() {
                        return Err(at(format!("groups given for {} convolution", s.conv.kind)));
                    }
                }
            }
            if s.conv.kind == ConvKind::Pointwise && s.conv.k != 1 {
                return Err(at("pointwise convolution must have k = 1".into()));
            }
        }
        // the plan must expand cleanly too (channel chaining, divisibility)
        plan::expand(self)?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("descriptor serializes")
    }
}

/// Parse and validate a descriptor from JSON text.
pub fn parse_arch(text: &str) -> Result<ArchDescriptor> {
    let arch: ArchDescriptor =
        serde_json::from_str(text).map_err(|e| Error::Arch(format!("descriptor parse: {e}")))?;
    arch.validate()?;
    Ok(arch)
}

pub fn load_arch(path: &std::path::Path) -> Result<ArchDescriptor> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_arch(&text)
}

/// Rewrite every K>1 standard convolution inside blocks into the cheap pair
/// (spatial stage + pointwise). Plain-conv stages (the stem) and 1×1
/// convolutions are kept standard; block topology is unchanged.
pub fn substitute_conv(
    arch: &ArchDescriptor,
    target: ConvKind,
    groups: Option<usize>,
) -> Result<ArchDescriptor> {
    match target {
        ConvKind::Group => {
            if groups.map_or(true, |g| g == 0) {
                return Err(Error::Config("group substitution needs --groups > 0".into()));
            }
        }
        ConvKind::Depthwise | ConvKind::Shift => {
            if groups.is_some() {
                return Err(Error::Config(format!("--groups is only valid for group, not {target}")));
            }
        }
        _ => return Err(Error::Config(format!("substitution target must be group, depthwise or shift, not {target}"))),
    }
    let mut out = arch.clone();
    for s in out.stages.iter_mut() {
        if s.block == BlockKind::Conv || s.conv.k <= 1 {
            continue;
        }
        s.conv.kind = target;
        s.conv.groups = if target == ConvKind::Group { groups } else { None };
    }
    // re-expand so divisibility violations surface now, naming every offender
    let errs = plan::expand_errors(&out);
    if !errs.is_empty() {
        return Err(Error::Arch(format!(
            "substitution is invalid for {} layer(s):\n  {}",
            errs.len(),
            errs.join("\n  ")
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_descriptor_parses() {
        let text = r#"{
            "name": "mini",
            "stages": [
                {"block": "conv", "conv": {"kind": "standard", "k": 3}, "channels": 8, "stride": 1, "repeat": 1}
            ],
            "head": {"classes": 10}
        }"#;
        let arch = parse_arch(text).unwrap();
        assert_eq!(arch.stages.len(), 1);
        assert_eq!(arch.head.classes, 10);
    }

    #[test]
    fn serialize_parse_roundtrip() {
        let arch = presets::resnet(3, 10, "resnet20");
        let text = arch.to_json();
        let back = parse_arch(&text).unwrap();
        assert_eq!(arch, back);
        // normalized JSON is idempotent
        assert_eq!(text, back.to_json());
    }

    #[test]
    fn resnet56_has_27_blocks_in_three_stages() {
        let arch = presets::resnet56(10);
        let res: Vec<_> =
            arch.stages.iter().filter(|s| s.block == BlockKind::ResidualBasic).collect();
        assert_eq!(res.len(), 3);
        assert_eq!(res.iter().map(|s| s.repeat).sum::<usize>(), 27);
        assert_eq!(res.iter().map(|s| s.channels).collect::<Vec<_>>(), vec![16, 32, 64]);
    }

    #[test]
    fn unknown_block_type_rejected() {
        let text = r#"{"name":"x","stages":[{"block":"wat","conv":{"kind":"standard","k":3},"channels":8,"stride":1,"repeat":1}],"head":{"classes":10}}"#;
        assert!(parse_arch(text).is_err());
    }

    #[test]
    fn missing_head_rejected() {
        let text = r#"{"name":"x","stages":[{"block":"conv","conv":{"kind":"standard","k":3},"channels":8,"stride":1,"repeat":1}]}"#;
        assert!(parse_arch(text).is_err());
    }

    #[test]
    fn substitution_is_idempotent() {
        let arch = presets::resnet8(10);
        let once = substitute_conv(&arch, ConvKind::Shift, None).unwrap();
        let twice = substitute_conv(&once, ConvKind::Shift, None).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn substitution_skips_stem_and_pointwise() {
        let arch = presets::resnet8(10);
        let sub = substitute_conv(&arch, ConvKind::Depthwise, None).unwrap();
        assert_eq!(sub.stages[0].conv.kind, ConvKind::Standard, "stem must stay standard");
        for s in &sub.stages[1..] {
            assert_eq!(s.conv.kind, ConvKind::Depthwise);
        }
    }

    #[test]
    fn group_substitution_divisibility_error_names_layers() {
        // 12-channel stages cannot split into 16 groups
        let mut arch = presets::resnet8(10);
        for s in arch.stages.iter_mut() {
            if s.block == BlockKind::ResidualBasic {
                s.channels = 12;
            }
        }
        let err = substitute_conv(&arch, ConvKind::Group, Some(16)).unwrap_err().to_string();
        assert!(err.contains("16") && err.contains("12"), "{err}");
    }
}
