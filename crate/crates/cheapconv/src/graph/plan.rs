//! Lowering from [`ArchDescriptor`] to a concrete layer plan.
//!
//! The plan is the single source of truth for what a network contains: the
//! cost model walks it to count parameters and FLOPs, and the builder walks
//! it to allocate parameters and record forward ops. Names are stable and
//! used as checkpoint keys.

use super::{ArchDescriptor, BlockKind, INPUT_CHANNELS};
use crate::error::{Error, Result};
use crate::layers::{ConvKind, ConvSpec};

/// Where a conv slot's batch norm (and ReLU) sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnPlace {
    /// No normalization (bare projections, dense-net stems).
    None,
    /// conv → BN (ReLU happens later, e.g. after the residual add).
    PostBn,
    /// conv → BN → ReLU.
    PostBnRelu,
    /// BN → ReLU → conv (dense layers and transitions).
    PreBnRelu,
}

/// One primitive op inside a slot.
#[derive(Clone, Debug, PartialEq)]
pub enum UnitOp {
    Conv(ConvSpec),
    /// Zero-parameter per-channel shift.
    Shift { channels: usize, kernel: usize, stride: usize, padding: usize },
}

impl UnitOp {
    pub fn out_channels(&self) -> usize {
        match self {
            UnitOp::Conv(s) => s.out_channels,
            UnitOp::Shift { channels, .. } => *channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            UnitOp::Conv(s) => s.in_channels,
            UnitOp::Shift { channels, .. } => *channels,
        }
    }
}

/// The position one original convolution occupied: a single standard conv or
/// a cheap pair (spatial stage + pointwise), plus the slot's BN placement.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSlot {
    pub name: String,
    pub units: Vec<(String, UnitOp)>,
    pub bn: BnPlace,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PlanNode {
    Slot(ConvSlot),
    /// Post-activation residual join: `relu(body(x) + shortcut(x))`;
    /// empty shortcut means identity.
    Residual { body: Vec<PlanNode>, shortcut: Vec<PlanNode> },
    /// Dense connectivity: `concat(x, body(x))` along channels.
    DenseLayer { body: Vec<PlanNode> },
    AvgPool2,
    /// Standalone BN+ReLU before global pooling (pre-activation nets).
    FinalBnRelu { name: String, channels: usize },
}

/// Expanded network: stages of plan nodes plus the classifier head input width.
#[derive(Clone, Debug)]
pub struct NetPlan {
    pub name: String,
    /// One entry per descriptor stage (stage ends feed attention transfer).
    pub stages: Vec<Vec<PlanNode>>,
    /// Which descriptor stages are "real" feature stages (non-stem).
    pub feature_stage: Vec<bool>,
    pub head_in: usize,
    pub classes: usize,
}

fn same_pad(k: usize) -> usize {
    (k - 1) / 2
}

/// Build the unit list for one conv slot of `k×k`, `cin→cout`, given the
/// stage's conv kind. Cheap kinds expand to the spatial stage (carrying the
/// stride, same-padded) followed by a 1×1 pointwise; 1×1 slots and standard
/// convs stay single.
fn make_slot(
    name: String,
    kind: ConvKind,
    groups: Option<usize>,
    k: usize,
    cin: usize,
    cout: usize,
    stride: usize,
    bn: BnPlace,
) -> Result<ConvSlot> {
    let pad = same_pad(k);
    let units: Vec<(String, UnitOp)> = match kind {
        _ if k == 1 => vec![(
            name.clone(),
            UnitOp::Conv(ConvSpec::new(ConvKind::Standard, 1, cin, cout, 1, stride, 0)),
        )],
        ConvKind::Standard => vec![(
            name.clone(),
            UnitOp::Conv(ConvSpec::standard(k, cin, cout, stride, pad)),
        )],
        ConvKind::Pointwise => {
            return Err(Error::Arch(format!("{name}: pointwise requires k=1, got k={k}")))
        }
        ConvKind::Group => {
            let g = groups.ok_or_else(|| Error::Arch(format!("{name}: group conv without groups")))?;
            if cin % g != 0 {
                return Err(Error::Arch(format!(
                    "{name}: groups={g} does not divide {cin} input channels"
                )));
            }
            vec![
                (
                    format!("{name}.spatial"),
                    UnitOp::Conv(ConvSpec::new(ConvKind::Group, k, cin, cin, g, stride, pad)),
                ),
                (format!("{name}.pw"), UnitOp::Conv(ConvSpec::pointwise(cin, cout, 1))),
            ]
        }
        ConvKind::Depthwise => vec![
            (
                format!("{name}.spatial"),
                UnitOp::Conv(ConvSpec::new(ConvKind::Depthwise, k, cin, cin, cin, stride, pad)),
            ),
            (format!("{name}.pw"), UnitOp::Conv(ConvSpec::pointwise(cin, cout, 1))),
        ],
        ConvKind::Shift => vec![
            (
                format!("{name}.spatial"),
                UnitOp::Shift { channels: cin, kernel: k, stride, padding: pad },
            ),
            (format!("{name}.pw"), UnitOp::Conv(ConvSpec::pointwise(cin, cout, 1))),
        ],
    };
    Ok(ConvSlot { name, units, bn })
}

/// Bare 1×1 projection used on downsampling shortcuts; always standard.
fn projection(name: String, cin: usize, cout: usize, stride: usize) -> PlanNode {
    PlanNode::Slot(ConvSlot {
        name: name.clone(),
        units: vec![(name, UnitOp::Conv(ConvSpec::pointwise(cin, cout, stride)))],
        bn: BnPlace::None,
    })
}

pub fn expand(arch: &ArchDescriptor) -> Result<NetPlan> {
    let mut errors = Vec::new();
    let plan = expand_inner(arch, &mut errors);
    if let Some(first) = errors.into_iter().next() {
        return Err(Error::Arch(first));
    }
    plan
}

/// Like [`expand`] but collects every per-layer error (used by the transform
/// command to list all offending layers at once).
pub fn expand_errors(arch: &ArchDescriptor) -> Vec<String> {
    let mut errors = Vec::new();
    let _ = expand_inner(arch, &mut errors);
    errors
}

fn expand_inner(arch: &ArchDescriptor, errors: &mut Vec<String>) -> Result<NetPlan> {
    // dense stages make the net pre-activation style: bare stem, final BN+ReLU
    let preact = arch.stages.iter().any(|s| s.block == BlockKind::Dense);
    let mut cur = INPUT_CHANNELS;
    let mut stages: Vec<Vec<PlanNode>> = Vec::new();
    let mut feature_stage = Vec::new();

    let slot = |name: String,
                    kind: ConvKind,
                    groups: Option<usize>,
                    k: usize,
                    cin: usize,
                    cout: usize,
                    stride: usize,
                    bn: BnPlace,
                    errors: &mut Vec<String>|
     -> Option<PlanNode> {
        match make_slot(name, kind, groups, k, cin, cout, stride, bn) {
            Ok(s) => Some(PlanNode::Slot(s)),
            Err(e) => {
                errors.push(e.to_string());
                None
            }
        }
    };

    for (si, st) in arch.stages.iter().enumerate() {
        let mut nodes: Vec<PlanNode> = Vec::new();
        match st.block {
            BlockKind::Conv => {
                feature_stage.push(false);
                for r in 0..st.repeat {
                    let stride = if r == 0 { st.stride } else { 1 };
                    let bn = if preact { BnPlace::None } else { BnPlace::PostBnRelu };
                    let name = format!("s{si}.conv{r}");
                    if let Some(n) = slot(name, st.conv.kind, st.conv.groups, st.conv.k, cur, st.channels, stride, bn, errors) {
                        nodes.push(n);
                    }
                    cur = st.channels;
                }
            }
            BlockKind::ResidualBasic => {
                feature_stage.push(true);
                for b in 0..st.repeat {
                    let stride = if b == 0 { st.stride } else { 1 };
                    let cin = cur;
                    let cout = st.channels;
                    let mut body = Vec::new();
                    let n1 = format!("s{si}.b{b}.conv1");
                    let n2 = format!("s{si}.b{b}.conv2");
                    if let Some(n) = slot(n1, st.conv.kind, st.conv.groups, st.conv.k, cin, cout, stride, BnPlace::PostBnRelu, errors) {
                        body.push(n);
                    }
                    if let Some(n) = slot(n2, st.conv.kind, st.conv.groups, st.conv.k, cout, cout, 1, BnPlace::PostBn, errors) {
                        body.push(n);
                    }
                    let shortcut = if stride != 1 || cin != cout {
                        vec![projection(format!("s{si}.b{b}.proj"), cin, cout, stride)]
                    } else {
                        vec![]
                    };
                    nodes.push(PlanNode::Residual { body, shortcut });
                    cur = cout;
                }
            }
            BlockKind::Bottleneck => {
                feature_stage.push(true);
                let expansion = 4;
                for b in 0..st.repeat {
                    let stride = if b == 0 { st.stride } else { 1 };
                    let cin = cur;
                    let width = st.channels;
                    let cout = width * expansion;
                    let mut body = Vec::new();
                    for (tag, kind, k, ci, co, s, bn) in [
                        ("conv1", ConvKind::Standard, 1, cin, width, 1, BnPlace::PostBnRelu),
                        ("conv2", st.conv.kind, st.conv.k, width, width, stride, BnPlace::PostBnRelu),
                        ("conv3", ConvKind::Standard, 1, width, cout, 1, BnPlace::PostBn),
                    ] {
                        let groups = if kind == ConvKind::Group { st.conv.groups } else { None };
                        if let Some(n) = slot(format!("s{si}.b{b}.{tag}"), kind, groups, k, ci, co, s, bn, errors) {
                            body.push(n);
                        }
                    }
                    let shortcut = if stride != 1 || cin != cout {
                        vec![projection(format!("s{si}.b{b}.proj"), cin, cout, stride)]
                    } else {
                        vec![]
                    };
                    nodes.push(PlanNode::Residual { body, shortcut });
                    cur = cout;
                }
            }
            BlockKind::Dense => {
                feature_stage.push(true);
                let growth = st.channels;
                for l in 0..st.repeat {
                    let name = format!("s{si}.d{l}.conv");
                    let mut body = Vec::new();
                    if let Some(n) = slot(name, st.conv.kind, st.conv.groups, st.conv.k, cur, growth, 1, BnPlace::PreBnRelu, errors) {
                        body.push(n);
                    }
                    nodes.push(PlanNode::DenseLayer { body });
                    cur += growth;
                }
                if st.stride == 2 {
                    let name = format!("s{si}.trans");
                    if let Some(n) = slot(name, ConvKind::Standard, None, 1, cur, cur, 1, BnPlace::PreBnRelu, errors) {
                        nodes.push(n);
                    }
                    nodes.push(PlanNode::AvgPool2);
                }
            }
        }
        stages.push(nodes);
    }
    if preact {
        stages
            .last_mut()
            .expect("non-empty stages")
            .push(PlanNode::FinalBnRelu { name: "final".into(), channels: cur });
    }
    Ok(NetPlan {
        name: arch.name.clone(),
        stages,
        feature_stage,
        head_in: cur,
        classes: arch.head.classes,
    })
}
