//! Realized networks: parameter allocation from a plan, tape-recorded forward
//! for training, a tape-free forward for evaluation and frozen teachers, and
//! checkpoint IO.

use super::plan::{self, BnPlace, NetPlan, PlanNode, UnitOp};
use super::ArchDescriptor;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::kernels;
use crate::layers::{self, BnState, ConvKind, Init, ShiftSpec};
use crate::tape::{GradBuf, Tape, Var};
use crate::tensor::{ParamSet, Parameter, Scalar, Tensor};
use std::collections::HashMap;
use std::path::Path;

pub struct NetworkInstance<S> {
    pub arch: ArchDescriptor,
    pub plan: NetPlan,
    pub params: ParamSet<S>,
    param_idx: HashMap<String, usize>,
    bn_states: HashMap<String, BnState<S>>,
    shift_specs: HashMap<String, ShiftSpec>,
}

/// Everything one recorded forward produces.
pub struct ForwardPass {
    pub input: Var,
    /// Output of each feature stage (used for attention transfer pairs).
    pub stage_ends: Vec<Var>,
    /// Final feature map `Z^L` (input to GAP), `[N, C, H, W]`.
    pub features: Var,
    /// Classifier logits `[N, classes]`.
    pub logits: Var,
    /// Tape vars of every parameter, aligned with `params` indices.
    pub param_vars: Vec<Var>,
}

/// Tape-free forward outputs.
pub struct InferOut<S> {
    pub stage_ends: Vec<Tensor<S>>,
    pub features: Tensor<S>,
    pub logits: Tensor<S>,
}

impl<S: Scalar> NetworkInstance<S> {
    /// Instantiate a validated descriptor with seeded fan-in Gaussian weights.
    pub fn build(arch: &ArchDescriptor, seed: u64) -> Result<Self> {
        let net_plan = plan::expand(arch)?;
        let mut init = Init::new(seed);
        let mut params = ParamSet::new();
        let mut param_idx = HashMap::new();
        let mut bn_states = HashMap::new();
        let mut shift_specs = HashMap::new();

        fn alloc<S: Scalar>(
            nodes: &[PlanNode],
            init: &mut Init,
            params: &mut ParamSet<S>,
            param_idx: &mut HashMap<String, usize>,
            bn_states: &mut HashMap<String, BnState<S>>,
            shift_specs: &mut HashMap<String, ShiftSpec>,
        ) {
            let add = |name: String, t: Tensor<S>, params: &mut ParamSet<S>, idx: &mut HashMap<String, usize>| {
                let i = params.push(Parameter::new(name.clone(), t));
                idx.insert(name, i);
            };
            let add_bn = |key: String,
                              channels: usize,
                              params: &mut ParamSet<S>,
                              idx: &mut HashMap<String, usize>,
                              bn_states: &mut HashMap<String, BnState<S>>| {
                let gi = params.push(Parameter::new(format!("{key}.gamma"), Tensor::ones(&[channels])));
                idx.insert(format!("{key}.gamma"), gi);
                let bi = params.push(Parameter::new(format!("{key}.beta"), Tensor::zeros(&[channels])));
                idx.insert(format!("{key}.beta"), bi);
                bn_states.insert(key, BnState::new(channels));
            };
            for node in nodes {
                match node {
                    PlanNode::Slot(slot) => {
                        if slot.bn == BnPlace::PreBnRelu {
                            let c = slot.units[0].1.in_channels();
                            add_bn(format!("{}.bn", slot.name), c, params, param_idx, bn_states);
                        }
                        for (uname, unit) in &slot.units {
                            match unit {
                                UnitOp::Conv(spec) => {
                                    let w = init.conv_weight::<S>(spec).expect("learnable conv");
                                    add(format!("{uname}.w"), w, params, param_idx);
                                }
                                UnitOp::Shift { channels, kernel, .. } => {
                                    shift_specs.insert(uname.clone(), ShiftSpec::round_robin(*channels, *kernel));
                                }
                            }
                        }
                        if matches!(slot.bn, BnPlace::PostBn | BnPlace::PostBnRelu) {
                            let c = slot.units.last().unwrap().1.out_channels();
                            add_bn(format!("{}.bn", slot.name), c, params, param_idx, bn_states);
                        }
                    }
                    PlanNode::Residual { body, shortcut } => {
                        alloc(body, init, params, param_idx, bn_states, shift_specs);
                        alloc(shortcut, init, params, param_idx, bn_states, shift_specs);
                    }
                    PlanNode::DenseLayer { body } => {
                        alloc(body, init, params, param_idx, bn_states, shift_specs);
                    }
                    PlanNode::AvgPool2 => {}
                    PlanNode::FinalBnRelu { name, channels } => {
                        add_bn(format!("{name}.bn"), *channels, params, param_idx, bn_states);
                    }
                }
            }
        }

        for stage in &net_plan.stages {
            alloc(stage, &mut init, &mut params, &mut param_idx, &mut bn_states, &mut shift_specs);
        }
        let wi = params.push(Parameter::new(
            "head.fc.w",
            init.fc_weight::<S>(net_plan.head_in, net_plan.classes),
        ));
        param_idx.insert("head.fc.w".into(), wi);
        let bi = params.push(Parameter::new("head.fc.b", Tensor::zeros(&[net_plan.classes])));
        param_idx.insert("head.fc.b".into(), bi);

        Ok(NetworkInstance {
            arch: arch.clone(),
            plan: net_plan,
            params,
            param_idx,
            bn_states,
            shift_specs,
        })
    }

    pub fn classes(&self) -> usize {
        self.plan.classes
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Parameter<S>> {
        self.param_idx.get(name).map(|&i| self.params.get(i))
    }

    pub fn param_by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<S>> {
        self.param_idx.get(name).copied().map(move |i| self.params.get_mut(i))
    }

    /// Record a forward pass on `tape`. `train` selects batch statistics for
    /// BN (updating running stats); eval uses the running estimates and
    /// leaves them untouched.
    pub fn forward(&mut self, tape: &mut Tape<S>, x: &Tensor<S>, train: bool) -> Result<ForwardPass> {
        let (_, c, _, _) = x.dim4();
        if c != super::INPUT_CHANNELS {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                super::INPUT_CHANNELS
            )));
        }
        let input = tape.leaf(x.clone());
        let mut param_vars = Vec::with_capacity(self.params.len());
        for p in self.params.iter() {
            param_vars.push(tape.leaf(p.value.clone()));
        }
        let var_of = |name: &str, idx: &HashMap<String, usize>| -> Var {
            param_vars[*idx.get(name).unwrap_or_else(|| panic!("missing param {name}"))]
        };

        struct Ctx<'a, S: Scalar> {
            param_idx: &'a HashMap<String, usize>,
            bn_states: &'a mut HashMap<String, BnState<S>>,
            shift_specs: &'a HashMap<String, ShiftSpec>,
            train: bool,
        }

        fn walk<S: Scalar>(
            tape: &mut Tape<S>,
            nodes: &[PlanNode],
            mut cur: Var,
            ctx: &mut Ctx<'_, S>,
            param_vars: &[Var],
        ) -> Result<Var> {
            let var_of = |name: &str, ctx: &Ctx<'_, S>| -> Var {
                param_vars[*ctx.param_idx.get(name).unwrap_or_else(|| panic!("missing param {name}"))]
            };
            let apply_bn = |tape: &mut Tape<S>, key: String, x: Var, ctx: &mut Ctx<'_, S>| -> Result<Var> {
                let gamma = var_of(&format!("{key}.gamma"), ctx);
                let beta = var_of(&format!("{key}.beta"), ctx);
                let state = ctx.bn_states.get_mut(&key).unwrap_or_else(|| panic!("missing bn {key}"));
                layers::batchnorm(tape, x, gamma, beta, state, ctx.train)
            };
            for node in nodes {
                match node {
                    PlanNode::Slot(slot) => {
                        if slot.bn == BnPlace::PreBnRelu {
                            cur = apply_bn(tape, format!("{}.bn", slot.name), cur, ctx)?;
                            cur = tape.relu(cur);
                        }
                        for (uname, unit) in &slot.units {
                            cur = match unit {
                                UnitOp::Conv(spec) => {
                                    let w = var_of(&format!("{uname}.w"), ctx);
                                    if spec.kind == ConvKind::Depthwise {
                                        layers::conv2d_depthwise(tape, cur, w, spec)?
                                    } else {
                                        layers::conv2d(tape, cur, w, spec)?
                                    }
                                }
                                UnitOp::Shift { stride, padding, .. } => {
                                    let shifts = &ctx.shift_specs[uname];
                                    layers::shift2d(tape, cur, shifts, *stride, *padding)?
                                }
                            };
                        }
                        match slot.bn {
                            BnPlace::PostBn => {
                                cur = apply_bn(tape, format!("{}.bn", slot.name), cur, ctx)?;
                            }
                            BnPlace::PostBnRelu => {
                                cur = apply_bn(tape, format!("{}.bn", slot.name), cur, ctx)?;
                                cur = tape.relu(cur);
                            }
                            _ => {}
                        }
                    }
                    PlanNode::Residual { body, shortcut } => {
                        let saved = cur;
                        let out = walk(tape, body, cur, ctx, param_vars)?;
                        let sc = if shortcut.is_empty() {
                            saved
                        } else {
                            walk(tape, shortcut, saved, ctx, param_vars)?
                        };
                        let sum = tape.add(out, sc)?;
                        cur = tape.relu(sum);
                    }
                    PlanNode::DenseLayer { body } => {
                        let newf = walk(tape, body, cur, ctx, param_vars)?;
                        cur = tape.concat_channels(&[cur, newf])?;
                    }
                    PlanNode::AvgPool2 => {
                        cur = tape.avgpool2(cur);
                    }
                    PlanNode::FinalBnRelu { name, .. } => {
                        cur = apply_bn(tape, format!("{name}.bn"), cur, ctx)?;
                        cur = tape.relu(cur);
                    }
                }
            }
            Ok(cur)
        }

        let mut ctx = Ctx {
            param_idx: &self.param_idx,
            bn_states: &mut self.bn_states,
            shift_specs: &self.shift_specs,
            train,
        };
        let mut cur = input;
        let mut stage_ends = Vec::new();
        let stages = self.plan.stages.clone();
        for (si, stage) in stages.iter().enumerate() {
            cur = walk(tape, stage, cur, &mut ctx, &param_vars)?;
            if self.plan.feature_stage[si] {
                stage_ends.push(cur);
            }
        }
        let features = cur;
        let pooled = tape.gap(features);
        let logits = layers::fc(
            tape,
            pooled,
            var_of("head.fc.w", &self.param_idx),
            var_of("head.fc.b", &self.param_idx),
        )?;
        Ok(ForwardPass { input, stage_ends, features, logits, param_vars })
    }

    /// Accumulate tape gradients into the parameters' `grad` buffers.
    pub fn apply_grads(&mut self, grads: &GradBuf<S>, pass: &ForwardPass) {
        for (i, &v) in pass.param_vars.iter().enumerate() {
            if let Some(g) = grads.get(v) {
                self.params.get_mut(i).grad.add_assign(g);
            }
        }
    }

    /// Tape-free forward in eval mode (running BN statistics, no recording,
    /// no mutation). Used for validation, the frozen DK/AT teacher, and the
    /// eval CLI.
    pub fn infer(&self, x: &Tensor<S>) -> Result<InferOut<S>> {
        fn walk<S: Scalar>(net: &NetworkInstance<S>, nodes: &[PlanNode], mut cur: Tensor<S>) -> Result<Tensor<S>> {
            let apply_bn = |net: &NetworkInstance<S>, key: String, x: &Tensor<S>| -> Tensor<S> {
                let state = &net.bn_states[&key];
                let gamma = net.param_by_name(&format!("{key}.gamma")).unwrap();
                let beta = net.param_by_name(&format!("{key}.beta")).unwrap();
                kernels::bn_apply(
                    x,
                    state.running_mean.data(),
                    state.running_var.data(),
                    gamma.value.data(),
                    beta.value.data(),
                    state.eps,
                )
            };
            let relu = |t: &Tensor<S>| t.map(|v| if v > S::zero() { v } else { S::zero() });
            for node in nodes {
                match node {
                    PlanNode::Slot(slot) => {
                        if slot.bn == BnPlace::PreBnRelu {
                            cur = relu(&apply_bn(net, format!("{}.bn", slot.name), &cur));
                        }
                        for (uname, unit) in &slot.units {
                            cur = match unit {
                                UnitOp::Conv(spec) => {
                                    let w = &net.param_by_name(&format!("{uname}.w")).unwrap().value;
                                    if spec.kind == ConvKind::Depthwise {
                                        kernels::depthwise_forward(&cur, w, &spec.geom())
                                    } else {
                                        kernels::conv2d_forward(&cur, w, spec.runtime_groups(), &spec.geom())
                                    }
                                }
                                UnitOp::Shift { stride, padding, kernel, .. } => {
                                    let shifts = &net.shift_specs[uname];
                                    let g = kernels::ConvGeom { kernel: *kernel, stride: *stride, pad: *padding };
                                    kernels::shift_forward(&cur, &shifts.offsets, &g)
                                }
                            };
                        }
                        match slot.bn {
                            BnPlace::PostBn => cur = apply_bn(net, format!("{}.bn", slot.name), &cur),
                            BnPlace::PostBnRelu => {
                                cur = relu(&apply_bn(net, format!("{}.bn", slot.name), &cur))
                            }
                            _ => {}
                        }
                    }
                    PlanNode::Residual { body, shortcut } => {
                        let saved = cur.clone();
                        let mut out = walk(net, body, cur)?;
                        let sc = if shortcut.is_empty() { saved } else { walk(net, shortcut, saved)? };
                        out.add_assign(&sc);
                        cur = relu(&out);
                    }
                    PlanNode::DenseLayer { body } => {
                        let newf = walk(net, body, cur.clone())?;
                        let (n, c0, h, w) = cur.dim4();
                        let (_, c1, _, _) = newf.dim4();
                        let mut cat = Tensor::zeros(&[n, c0 + c1, h, w]);
                        for ni in 0..n {
                            cat.data_mut()[(ni * (c0 + c1)) * h * w..][..c0 * h * w]
                                .copy_from_slice(&cur.data()[ni * c0 * h * w..(ni + 1) * c0 * h * w]);
                            cat.data_mut()[(ni * (c0 + c1) + c0) * h * w..][..c1 * h * w]
                                .copy_from_slice(&newf.data()[ni * c1 * h * w..(ni + 1) * c1 * h * w]);
                        }
                        cur = cat;
                    }
                    PlanNode::AvgPool2 => cur = kernels::avgpool2_forward(&cur),
                    PlanNode::FinalBnRelu { name, .. } => {
                        cur = relu(&apply_bn(net, format!("{name}.bn"), &cur));
                    }
                }
            }
            Ok(cur)
        }

        let mut cur = x.clone();
        let mut stage_ends = Vec::new();
        for (si, stage) in self.plan.stages.iter().enumerate() {
            cur = walk(self, stage, cur)?;
            if self.plan.feature_stage[si] {
                stage_ends.push(cur.clone());
            }
        }
        let features = cur;
        let pooled = kernels::gap_forward(&features);
        let (n, cin) = pooled.dim2();
        let w = &self.param_by_name("head.fc.w").unwrap().value;
        let b = &self.param_by_name("head.fc.b").unwrap().value;
        let classes = self.plan.classes;
        let mut logits = Tensor::zeros(&[n, classes]);
        kernels::gemm_nn(pooled.data(), w.data(), n, cin, classes, logits.data_mut());
        for ni in 0..n {
            for ci in 0..classes {
                logits.data_mut()[ni * classes + ci] =
                    logits.data()[ni * classes + ci] + b.data()[ci];
            }
        }
        Ok(InferOut { stage_ends, features, logits })
    }

    /// All checkpoint entries: parameters plus BN running statistics.
    fn checkpoint_entries(&self) -> Vec<(String, Tensor<S>)> {
        let mut out: Vec<(String, Tensor<S>)> =
            self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        let mut keys: Vec<&String> = self.bn_states.keys().collect();
        keys.sort();
        for k in keys {
            let st = &self.bn_states[k];
            out.push((format!("{k}.running_mean"), st.running_mean.clone()));
            out.push((format!("{k}.running_var"), st.running_var.clone()));
        }
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_entries())
    }

    /// Load named tensors into this instance; shapes must match exactly.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let entries = checkpoint::load::<S>(path)?;
        let mut seen = 0usize;
        for (name, tensor) in entries {
            if let Some(stripped) = name.strip_suffix(".running_mean") {
                let st = self
                    .bn_states
                    .get_mut(stripped)
                    .ok_or_else(|| Error::Config(format!("checkpoint has unknown bn {stripped}")))?;
                if st.running_mean.shape() != tensor.shape() {
                    return Err(Error::Config(format!("checkpoint shape mismatch for {name}")));
                }
                st.running_mean = tensor;
                seen += 1;
            } else if let Some(stripped) = name.strip_suffix(".running_var") {
                let st = self
                    .bn_states
                    .get_mut(stripped)
                    .ok_or_else(|| Error::Config(format!("checkpoint has unknown bn {stripped}")))?;
                if st.running_var.shape() != tensor.shape() {
                    return Err(Error::Config(format!("checkpoint shape mismatch for {name}")));
                }
                st.running_var = tensor;
                seen += 1;
            } else {
                let p = self
                    .param_by_name_mut(&name)
                    .ok_or_else(|| Error::Config(format!("checkpoint has unknown tensor {name}")))?;
                if p.value.shape() != tensor.shape() {
                    return Err(Error::Config(format!(
                        "checkpoint shape mismatch for {name}: {:?} vs {:?}",
                        tensor.shape(),
                        p.value.shape()
                    )));
                }
                p.value = tensor;
                seen += 1;
            }
        }
        let want = self.params.len() + 2 * self.bn_states.len();
        if seen != want {
            return Err(Error::Config(format!(
                "checkpoint is incomplete: {seen} tensors loaded, network has {want}"
            )));
        }
        Ok(())
    }
}
