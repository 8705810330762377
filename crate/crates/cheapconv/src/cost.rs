//! Exact parameter and FLOP accounting.
//!
//! Conventions (documented in the README):
//! - parameters: every learnable element the realized network carries —
//!   convolution kernels (bias-free), BN scale/shift, FC weight and bias.
//!   Projection shortcuts are bare convolutions.
//! - FLOPs: one multiply-accumulate = 1 FLOP for convolutions and the FC
//!   head. Each batch norm is costed as its inference-folded affine: 2 ops
//!   per element of the convolution output it attaches to (per-map for the
//!   standalone final BN). Shift stages, ReLU, pooling and residual adds
//!   cost zero.

use crate::error::{Error, Result};
use crate::graph::plan::{self, BnPlace, ConvSlot, PlanNode, UnitOp};
use crate::graph::ArchDescriptor;
use crate::layers::{ConvKind, ConvSpec};
use serde::{Deserialize, Serialize};

/// Cost of one layer (or one BN affine) in the report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: String,
    pub kind: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostReport {
    pub name: String,
    pub input_hw: usize,
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_flops: u64,
    /// Compression rate vs a reference network (`ref_params / params`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compression_rate: Option<f64>,
    /// Speedup rate vs a reference network (`ref_flops / flops`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speedup_rate: Option<f64>,
}

impl CostReport {
    pub fn with_reference(mut self, reference: &CostReport) -> Result<Self> {
        let (cr, sr) = rate_totals(
            reference.total_params,
            reference.total_flops,
            self.total_params,
            self.total_flops,
        )?;
        self.compression_rate = Some(cr);
        self.speedup_rate = Some(sr);
        Ok(self)
    }

    /// Human-readable fixed table.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{} (input {}x{})\n{:<24} {:>12} {:>16}\n",
            self.name, self.input_hw, self.input_hw, "layer", "params", "flops"
        ));
        for l in &self.layers {
            s.push_str(&format!("{:<24} {:>12} {:>16}  {}\n", l.layer, l.params, l.flops, l.kind));
        }
        s.push_str(&format!(
            "{:<24} {:>12} {:>16}  ({:.2}M params, {:.2}M flops)\n",
            "total",
            self.total_params,
            self.total_flops,
            self.total_params as f64 / 1e6,
            self.total_flops as f64 / 1e6
        ));
        if let (Some(cr), Some(sr)) = (self.compression_rate, self.speedup_rate) {
            s.push_str(&format!("CR {cr:.2}x  SR {sr:.2}x vs reference\n"));
        }
        s
    }
}

/// Table-2 algebra for one convolution position (cheap kinds are costed as
/// spatial stage + the fused pointwise). Pure formula, no BN.
pub fn layer_cost(spec: &ConvSpec, out_h: usize, out_w: usize) -> Result<LayerCost> {
    spec.validate()?;
    let (k2, cin, cout) = (spec.kernel * spec.kernel, spec.in_channels, spec.out_channels);
    let params = match spec.kind {
        ConvKind::Standard => cout * cin * k2,
        ConvKind::Pointwise => cin * cout,
        ConvKind::Group => cin * cin * k2 / spec.groups + cin * cout,
        ConvKind::Depthwise => cin * k2 + cin * cout,
        ConvKind::Shift => cin * cout,
    } as u64;
    let flops = (out_h * out_w) as u64 * params;
    Ok(LayerCost { layer: String::new(), kind: spec.kind.to_string(), params, flops })
}

/// Compression and speedup rates of a cheap layer vs its reference.
pub fn rate(reference: &LayerCost, cheap: &LayerCost) -> Result<(f64, f64)> {
    rate_totals(reference.params, reference.flops, cheap.params, cheap.flops)
}

fn rate_totals(ref_params: u64, ref_flops: u64, params: u64, flops: u64) -> Result<(f64, f64)> {
    if params == 0 || flops == 0 {
        return Err(Error::Config("rate: cheap cost must be positive".into()));
    }
    Ok((ref_params as f64 / params as f64, ref_flops as f64 / flops as f64))
}

struct Walker {
    rows: Vec<LayerCost>,
}

impl Walker {
    fn unit_cost(op: &UnitOp, oh: usize, ow: usize) -> (u64, u64) {
        match op {
            UnitOp::Conv(spec) => {
                let w: u64 = spec
                    .weight_shape()
                    .map(|s| s.iter().product::<usize>() as u64)
                    .unwrap_or(0);
                (w, w * (oh * ow) as u64)
            }
            // channel permutation: zero parameters, zero FLOPs
            UnitOp::Shift { .. } => (0, 0),
        }
    }

    fn slot(&mut self, slot: &ConvSlot, cin: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let mut c = cin;
        let (mut ch, mut cw) = (h, w);
        if slot.units[0].1.in_channels() != c {
            return Err(Error::Arch(format!(
                "{}: expects {} input channels, gets {c}",
                slot.name,
                slot.units[0].1.in_channels()
            )));
        }
        for (uname, unit) in &slot.units {
            let (oh, ow) = match unit {
                UnitOp::Conv(spec) => {
                    if !spec.geom().fits(ch, cw) {
                        return Err(Error::Arch(format!(
                            "{uname}: kernel {} larger than padded input {ch}x{cw}",
                            spec.kernel
                        )));
                    }
                    spec.geom().out_hw(ch, cw)
                }
                UnitOp::Shift { kernel, stride, padding, .. } => {
                    let g = crate::kernels::ConvGeom { kernel: *kernel, stride: *stride, pad: *padding };
                    g.out_hw(ch, cw)
                }
            };
            let (p, f) = Self::unit_cost(unit, oh, ow);
            let kind = match unit {
                UnitOp::Conv(s) if s.kernel == 1 => "pointwise".to_string(),
                UnitOp::Conv(s) => s.kind.to_string(),
                UnitOp::Shift { .. } => "shift".to_string(),
            };
            self.rows.push(LayerCost { layer: uname.clone(), kind, params: p, flops: f });
            c = unit.out_channels();
            ch = oh;
            cw = ow;
        }
        // BN folded into this slot: affine params on its normalized channels,
        // 2 ops per element of the slot's output map
        match slot.bn {
            BnPlace::None => {}
            BnPlace::PostBn | BnPlace::PostBnRelu | BnPlace::PreBnRelu => {
                let bn_c = if slot.bn == BnPlace::PreBnRelu {
                    slot.units[0].1.in_channels()
                } else {
                    c
                };
                self.rows.push(LayerCost {
                    layer: format!("{}.bn", slot.name),
                    kind: "batchnorm".into(),
                    params: 2 * bn_c as u64,
                    flops: 2 * (c * ch * cw) as u64,
                });
            }
        }
        Ok((c, ch, cw))
    }

    fn nodes(&mut self, nodes: &[PlanNode], cin: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let (mut c, mut ch, mut cw) = (cin, h, w);
        for node in nodes {
            match node {
                PlanNode::Slot(slot) => {
                    (c, ch, cw) = self.slot(slot, c, ch, cw)?;
                }
                PlanNode::Residual { body, shortcut } => {
                    let bo = self.nodes(body, c, ch, cw)?;
                    if !shortcut.is_empty() {
                        let so = self.nodes(shortcut, c, ch, cw)?;
                        if so != bo {
                            return Err(Error::Arch(format!(
                                "residual branches disagree: body {bo:?} vs shortcut {so:?}"
                            )));
                        }
                    } else if bo != (c, ch, cw) {
                        return Err(Error::Arch(format!(
                            "identity shortcut needs matching dims: {bo:?} vs ({c}, {ch}, {cw})"
                        )));
                    }
                    (c, ch, cw) = bo;
                }
                PlanNode::DenseLayer { body } => {
                    let (gc, gh, gw) = self.nodes(body, c, ch, cw)?;
                    if (gh, gw) != (ch, cw) {
                        return Err(Error::Arch("dense layer changed spatial dims".into()));
                    }
                    c += gc;
                }
                PlanNode::AvgPool2 => {
                    if ch % 2 != 0 || cw % 2 != 0 {
                        return Err(Error::Arch(format!("avg pool on odd map {ch}x{cw}")));
                    }
                    ch /= 2;
                    cw /= 2;
                }
                PlanNode::FinalBnRelu { name, channels } => {
                    self.rows.push(LayerCost {
                        layer: format!("{name}.bn"),
                        kind: "batchnorm".into(),
                        params: 2 * *channels as u64,
                        flops: 2 * (channels * ch * cw) as u64,
                    });
                }
            }
        }
        Ok((c, ch, cw))
    }
}

/// Whole-network cost at the given square input resolution.
pub fn network_cost(arch: &ArchDescriptor, input_hw: usize) -> Result<CostReport> {
    let net_plan = plan::expand(arch)?;
    let mut walker = Walker { rows: Vec::new() };
    let (mut c, mut h, mut w) = (crate::graph::INPUT_CHANNELS, input_hw, input_hw);
    for stage in &net_plan.stages {
        (c, h, w) = walker.nodes(stage, c, h, w)?;
    }
    debug_assert_eq!(c, net_plan.head_in);
    walker.rows.push(LayerCost {
        layer: "head.fc".into(),
        kind: "fc".into(),
        params: (c * net_plan.classes + net_plan.classes) as u64,
        flops: (c * net_plan.classes) as u64,
    });
    let total_params = walker.rows.iter().map(|l| l.params).sum();
    let total_flops = walker.rows.iter().map(|l| l.flops).sum();
    Ok(CostReport {
        name: arch.name.clone(),
        input_hw,
        layers: walker.rows,
        total_params,
        total_flops,
        compression_rate: None,
        speedup_rate: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{presets, substitute_conv};

    fn spec_std16() -> ConvSpec {
        ConvSpec::standard(3, 16, 16, 1, 1)
    }

    #[test]
    fn table2_standard_row() {
        let c = layer_cost(&spec_std16(), 32, 32).unwrap();
        assert_eq!(c.params, 2304);
        assert_eq!(c.flops, 2_359_296);
    }

    #[test]
    fn table2_shift_row_and_k2_rate() {
        let shift = ConvSpec::new(ConvKind::Shift, 3, 16, 16, 1, 1, 1);
        let c = layer_cost(&shift, 32, 32).unwrap();
        assert_eq!(c.params, 256);
        assert_eq!(c.flops, 262_144);
        let std = layer_cost(&spec_std16(), 32, 32).unwrap();
        let (cr, sr) = rate(&std, &c).unwrap();
        assert_eq!(cr, 9.0);
        assert_eq!(sr, 9.0);
    }

    #[test]
    fn pointwise_1x1_single_param() {
        let pw = ConvSpec::pointwise(1, 1, 1);
        let c = layer_cost(&pw, 1, 1).unwrap();
        assert_eq!(c.params, 1);
    }

    #[test]
    fn group_k3_g4_rate_is_36_over_13() {
        let grp = ConvSpec::new(ConvKind::Group, 3, 16, 16, 4, 1, 1);
        let g = layer_cost(&grp, 32, 32).unwrap();
        let s = layer_cost(&spec_std16(), 32, 32).unwrap();
        let (cr, sr) = rate(&s, &g).unwrap();
        assert!((cr - 36.0 / 13.0).abs() < 1e-12, "{cr}");
        assert!((sr - 36.0 / 13.0).abs() < 1e-12);
        assert!((cr - 2.769).abs() < 1e-3);
    }

    #[test]
    fn depthwise_c64_rate() {
        let dw = ConvSpec::new(ConvKind::Depthwise, 3, 64, 64, 64, 1, 1);
        let st = ConvSpec::standard(3, 64, 64, 1, 1);
        let (cr, _) = rate(&layer_cost(&st, 8, 8).unwrap(), &layer_cost(&dw, 8, 8).unwrap()).unwrap();
        assert!((cr - 576.0 / 73.0).abs() < 1e-12);
        assert!((cr - 7.89).abs() < 0.01);
    }

    #[test]
    fn identical_layers_rate_one() {
        let c = layer_cost(&spec_std16(), 32, 32).unwrap();
        let (cr, sr) = rate(&c, &c).unwrap();
        assert_eq!((cr, sr), (1.0, 1.0));
    }

    #[test]
    fn zero_cost_divisor_rejected() {
        let std = layer_cost(&spec_std16(), 32, 32).unwrap();
        let zero = LayerCost { layer: String::new(), kind: "shift".into(), params: 0, flops: 0 };
        assert!(rate(&std, &zero).is_err());
    }

    #[test]
    fn group_params_strictly_decrease_in_g() {
        let mut last = u64::MAX;
        for g in [1usize, 2, 4, 8, 16] {
            let spec = ConvSpec::new(ConvKind::Group, 3, 16, 16, g, 1, 1);
            let c = layer_cost(&spec, 32, 32).unwrap();
            assert!(c.params < last, "g={g}");
            last = c.params;
        }
    }

    #[test]
    fn table1_ordering_shift_le_dw_le_group_le_standard() {
        let mk = |kind, g| ConvSpec::new(kind, 3, 64, 64, g, 1, 1);
        let shift = layer_cost(&mk(ConvKind::Shift, 1), 8, 8).unwrap();
        let dw = layer_cost(&mk(ConvKind::Depthwise, 64), 8, 8).unwrap();
        let g16 = layer_cost(&mk(ConvKind::Group, 16), 8, 8).unwrap();
        let std = layer_cost(&mk(ConvKind::Standard, 1), 8, 8).unwrap();
        assert!(shift.params <= dw.params && dw.params <= g16.params && g16.params <= std.params);
        assert!(shift.flops <= dw.flops && dw.flops <= g16.flops && g16.flops <= std.flops);
    }

    #[test]
    fn depthwise_equals_group_at_g_eq_c() {
        let dw = layer_cost(&ConvSpec::new(ConvKind::Depthwise, 3, 32, 32, 32, 1, 1), 16, 16).unwrap();
        let g = layer_cost(&ConvSpec::new(ConvKind::Group, 3, 32, 32, 32, 1, 1), 16, 16).unwrap();
        assert_eq!(dw.params, g.params);
        assert_eq!(dw.flops, g.flops);
    }

    #[test]
    fn shift_rows_in_network_report_are_zero() {
        let arch = substitute_conv(&presets::resnet8(10), ConvKind::Shift, None).unwrap();
        let report = network_cost(&arch, 32).unwrap();
        let shift_rows: Vec<_> = report.layers.iter().filter(|l| l.kind == "shift").collect();
        assert!(!shift_rows.is_empty());
        for row in shift_rows {
            assert_eq!(row.params, 0);
            assert_eq!(row.flops, 0);
        }
    }

    #[test]
    fn totals_are_sum_of_rows() {
        let report = network_cost(&presets::resnet20(10), 32).unwrap();
        assert_eq!(report.total_params, report.layers.iter().map(|l| l.params).sum::<u64>());
        assert_eq!(report.total_flops, report.layers.iter().map(|l| l.flops).sum::<u64>());
    }

    /// Frozen regression values for the shipped presets at 32x32 under the
    /// documented conventions.
    #[test]
    fn preset_cost_regression() {
        let cases: &[(ArchDescriptor, u64, u64)] = &[
            (presets::resnet56(10), 855_578, 126_812_800),
            (presets::wrn40_1(10), 563_930, 84_001_408),
            (presets::densenet40_12(10), 1_059_298, 283_866_576),
        ];
        for (arch, p, f) in cases {
            let r = network_cost(arch, 32).unwrap();
            assert_eq!(r.total_params, *p, "{} params", arch.name);
            assert_eq!(r.total_flops, *f, "{} flops", arch.name);
        }
        let subs: &[(ConvKind, Option<usize>, u64, u64)] = &[
            (ConvKind::Shift, None, 101_914, 15_663_744),
            (ConvKind::Depthwise, None, 119_626, 20_253_312),
            (ConvKind::Group, Some(16), 154_186, 23_405_184),
        ];
        for (kind, g, p, f) in subs {
            let arch = substitute_conv(&presets::resnet56(10), *kind, *g).unwrap();
            let r = network_cost(&arch, 32).unwrap();
            assert_eq!(r.total_params, *p, "resnet56-{kind} params");
            assert_eq!(r.total_flops, *f, "resnet56-{kind} flops");
        }
    }

    /// Instantiated parameter element count must equal the cost model's count.
    #[test]
    fn cost_matches_instantiated_parameter_count() {
        use crate::graph::NetworkInstance;
        for arch in [
            presets::resnet8(10),
            substitute_conv(&presets::resnet8(10), ConvKind::Shift, None).unwrap(),
            substitute_conv(&presets::resnet8(10), ConvKind::Group, Some(4)).unwrap(),
            presets::densenet_tiny(10),
        ] {
            let report = network_cost(&arch, 32).unwrap();
            let net = NetworkInstance::<f32>::build(&arch, 0).unwrap();
            assert_eq!(
                report.total_params,
                net.params.element_count() as u64,
                "{}",
                arch.name
            );
        }
    }

    #[test]
    fn substitution_strictly_reduces_params() {
        for kind in [ConvKind::Shift, ConvKind::Depthwise] {
            let base = network_cost(&presets::resnet8(10), 32).unwrap();
            let sub = substitute_conv(&presets::resnet8(10), kind, None).unwrap();
            let cheap = network_cost(&sub, 32).unwrap();
            assert!(cheap.total_params < base.total_params);
            assert!(cheap.total_flops < base.total_flops);
        }
    }

    #[test]
    fn substitution_preserves_output_shapes() {
        use crate::graph::NetworkInstance;
        use crate::tensor::Tensor;
        let base = presets::resnet8(10);
        let sub = substitute_conv(&base, ConvKind::Shift, None).unwrap();
        let mut a = NetworkInstance::<f32>::build(&base, 0).unwrap();
        let mut b = NetworkInstance::<f32>::build(&sub, 0).unwrap();
        for hw in [8usize, 16] {
            let x = Tensor::zeros(&[1, 3, hw, hw]);
            let oa = a.infer(&x).unwrap();
            let ob = b.infer(&x).unwrap();
            assert_eq!(oa.features.shape(), ob.features.shape());
            assert_eq!(oa.logits.shape(), ob.logits.shape());
            for (sa, sb) in oa.stage_ends.iter().zip(ob.stage_ends.iter()) {
                assert_eq!(sa.shape(), sb.shape());
            }
        }
        let _ = (&mut a, &mut b);
    }
}
