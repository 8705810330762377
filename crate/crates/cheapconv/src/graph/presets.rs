//! Shipped architecture presets. Full-size networks mirror the common
//! CIFAR definitions; the small variants are desk-scale versions of the same
//! shapes for fast experiments and tests.

use super::{ArchDescriptor, BlockKind, HeadSpec, StageConv, StageSpec};
use crate::layers::ConvKind;

fn std3() -> StageConv {
    StageConv { kind: ConvKind::Standard, k: 3, groups: None }
}

fn conv_stage(channels: usize, stride: usize, repeat: usize) -> StageSpec {
    StageSpec { block: BlockKind::Conv, conv: std3(), channels, stride, repeat }
}

fn res_stage(channels: usize, stride: usize, repeat: usize) -> StageSpec {
    StageSpec { block: BlockKind::ResidualBasic, conv: std3(), channels, stride, repeat }
}

fn dense_stage(growth: usize, stride: usize, repeat: usize) -> StageSpec {
    StageSpec { block: BlockKind::Dense, conv: std3(), channels: growth, stride, repeat }
}

/// CIFAR ResNet of depth `6n+2`: stem + 3 stages of `n` basic blocks at
/// 16/32/64 channels.
pub fn resnet(n: usize, classes: usize, name: &str) -> ArchDescriptor {
    ArchDescriptor {
        name: name.into(),
        stages: vec![
            conv_stage(16, 1, 1),
            res_stage(16, 1, n),
            res_stage(32, 2, n),
            res_stage(64, 2, n),
        ],
        head: HeadSpec { classes },
    }
}

pub fn resnet56(classes: usize) -> ArchDescriptor {
    resnet(9, classes, "resnet56")
}

pub fn resnet20(classes: usize) -> ArchDescriptor {
    resnet(3, classes, "resnet20")
}

pub fn resnet8(classes: usize) -> ArchDescriptor {
    resnet(1, classes, "resnet8")
}

/// Wide ResNet with widening factor `width` and `n` blocks per group
/// (depth `6n+4` in the usual accounting).
pub fn wrn(n: usize, width: usize, classes: usize, name: &str) -> ArchDescriptor {
    ArchDescriptor {
        name: name.into(),
        stages: vec![
            conv_stage(16, 1, 1),
            res_stage(16 * width, 1, n),
            res_stage(32 * width, 2, n),
            res_stage(64 * width, 2, n),
        ],
        head: HeadSpec { classes },
    }
}

pub fn wrn40_1(classes: usize) -> ArchDescriptor {
    wrn(6, 1, classes, "wrn40_1")
}

pub fn wrn10_1(classes: usize) -> ArchDescriptor {
    wrn(1, 1, classes, "wrn10_1")
}

/// DenseNet with 3 dense stages of `per_stage` layers at the given growth
/// rate; stem outputs `2×growth`; transitions keep channel count.
pub fn densenet(growth: usize, per_stage: usize, classes: usize, name: &str) -> ArchDescriptor {
    ArchDescriptor {
        name: name.into(),
        stages: vec![
            StageSpec { block: BlockKind::Conv, conv: std3(), channels: 2 * growth, stride: 1, repeat: 1 },
            dense_stage(growth, 2, per_stage),
            dense_stage(growth, 2, per_stage),
            dense_stage(growth, 1, per_stage),
        ],
        head: HeadSpec { classes },
    }
}

pub fn densenet40_12(classes: usize) -> ArchDescriptor {
    densenet(12, 12, classes, "densenet40_12")
}

pub fn densenet_tiny(classes: usize) -> ArchDescriptor {
    densenet(4, 3, classes, "densenet_tiny")
}

/// Look up a preset by name (used by the CLI when `--arch` is not a file).
pub fn by_name(name: &str, classes: usize) -> Option<ArchDescriptor> {
    match name {
        "resnet56" => Some(resnet56(classes)),
        "resnet20" => Some(resnet20(classes)),
        "resnet8" => Some(resnet8(classes)),
        "wrn40_1" => Some(wrn40_1(classes)),
        "wrn10_1" => Some(wrn10_1(classes)),
        "densenet40_12" => Some(densenet40_12(classes)),
        "densenet_tiny" => Some(densenet_tiny(classes)),
        _ => None,
    }
}

pub const PRESET_NAMES: &[&str] =
    &["resnet56", "resnet20", "resnet8", "wrn40_1", "wrn10_1", "densenet40_12", "densenet_tiny"];
