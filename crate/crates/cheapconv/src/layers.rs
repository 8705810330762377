//! Layer definitions: the convolution family (standard / group / depthwise /
//! shift / pointwise), batch normalization, ReLU, global average pooling and
//! the fully-connected head, each as a recorded tape op with its backward
//! rule, plus weight initialization.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    Standard,
    Group,
    Depthwise,
    Shift,
    Pointwise,
}

impl std::fmt::Display for ConvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ConvKind::Standard => "standard",
            ConvKind::Group => "group",
            ConvKind::Depthwise => "depthwise",
            ConvKind::Shift => "shift",
            ConvKind::Pointwise => "pointwise",
        };
        f.write_str(s)
    }
}

/// Full description of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kind: ConvKind,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(kind: ConvKind, kernel: usize, cin: usize, cout: usize, groups: usize, stride: usize, padding: usize) -> Self {
        ConvSpec { kind, kernel, in_channels: cin, out_channels: cout, groups, stride, padding }
    }

    pub fn standard(kernel: usize, cin: usize, cout: usize, stride: usize, padding: usize) -> Self {
        Self::new(ConvKind::Standard, kernel, cin, cout, 1, stride, padding)
    }

    pub fn pointwise(cin: usize, cout: usize, stride: usize) -> Self {
        Self::new(ConvKind::Pointwise, 1, cin, cout, 1, stride, 0)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Arch(m));
        if self.kernel == 0 || self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return fail(format!("conv spec has zero extent: {self:?}"));
        }
        match self.kind {
            ConvKind::Standard => {
                if self.groups != 1 {
                    return fail(format!("standard conv must have groups=1, got {}", self.groups));
                }
            }
            ConvKind::Group => {
                if self.groups == 0 || self.in_channels % self.groups != 0 {
                    return fail(format!(
                        "groups={} does not divide in_channels={}",
                        self.groups, self.in_channels
                    ));
                }
                if self.out_channels % self.groups != 0 {
                    return fail(format!(
                        "groups={} does not divide out_channels={}",
                        self.groups, self.out_channels
                    ));
                }
            }
            ConvKind::Depthwise => {
                if self.groups != self.in_channels || self.out_channels != self.in_channels {
                    return fail(format!(
                        "depthwise conv needs groups == in == out channels, got {self:?}"
                    ));
                }
            }
            ConvKind::Shift => {
                if self.out_channels != self.in_channels {
                    return fail(format!("shift op keeps channel count, got {self:?}"));
                }
            }
            ConvKind::Pointwise => {
                if self.kernel != 1 || self.groups != 1 {
                    return fail(format!("pointwise conv needs kernel=1, groups=1, got {self:?}"));
                }
            }
        }
        Ok(())
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom { kernel: self.kernel, stride: self.stride, pad: self.padding }
    }

    /// Shape of the learnable kernel tensor, `None` for shift.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            ConvKind::Shift => None,
            ConvKind::Depthwise => Some(vec![self.in_channels, self.kernel, self.kernel]),
            _ => Some(vec![
                self.out_channels,
                self.in_channels / self.groups,
                self.kernel,
                self.kernel,
            ]),
        }
    }

    /// Number of weight groups the runtime convolution uses.
    pub fn runtime_groups(&self) -> usize {
        match self.kind {
            ConvKind::Group => self.groups,
            _ => 1,
        }
    }
}

/// Fixed per-channel shift offsets `(i_c, j_c)`, 1-based cells of the logical
/// `K×K` one-hot kernel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShiftSpec {
    pub kernel: usize,
    pub offsets: Vec<(usize, usize)>,
}

impl ShiftSpec {
    /// Round-robin assignment: channel `c` takes cell `c mod K²` of the grid
    /// in row-major order, so all K² directions are evenly represented.
    pub fn round_robin(channels: usize, kernel: usize) -> Self {
        let kk = kernel * kernel;
        let offsets = (0..channels)
            .map(|c| {
                let cell = c % kk;
                (cell / kernel + 1, cell % kernel + 1)
            })
            .collect();
        ShiftSpec { kernel, offsets }
    }

    /// All channels shifted by nothing: the center cell `(⌈K/2⌉, ⌈K/2⌉)`.
    pub fn centered(channels: usize, kernel: usize) -> Self {
        let c = kernel.div_ceil(2);
        ShiftSpec { kernel, offsets: vec![(c, c); channels] }
    }

    pub fn validate(&self) -> Result<()> {
        for (c, &(i, j)) in self.offsets.iter().enumerate() {
            if i < 1 || i > self.kernel || j < 1 || j > self.kernel {
                return Err(Error::Arch(format!(
                    "shift offset ({i},{j}) for channel {c} outside [1..{}]²",
                    self.kernel
                )));
            }
        }
        Ok(())
    }

    /// Equivalent depthwise one-hot kernels, `[C, K, K]`.
    pub fn to_one_hot_kernels<S: Scalar>(&self) -> Tensor<S> {
        let k = self.kernel;
        let mut w = Tensor::zeros(&[self.offsets.len(), k, k]);
        for (c, &(i, j)) in self.offsets.iter().enumerate() {
            w.data_mut()[c * k * k + (i - 1) * k + (j - 1)] = S::one();
        }
        w
    }
}

// ---- tape ops --------------------------------------------------------------

/// Standard / grouped / pointwise convolution. `w: [Cout, Cin/g, K, K]`, bias-free.
pub fn conv2d<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, spec: &ConvSpec) -> Result<Var> {
    spec.validate()?;
    let (_, cin, h, wd) = tape.value(x).dim4();
    if cin != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {cin}",
            spec.in_channels
        )));
    }
    let g = spec.geom();
    if !g.fits(h, wd) {
        return Err(Error::Shape(format!(
            "kernel {0}x{0} larger than padded input {h}x{wd} (pad {1})",
            spec.kernel, spec.padding
        )));
    }
    let groups = spec.runtime_groups();
    let out = kernels::conv2d_forward(tape.value(x), tape.value(w), groups, &g);
    Ok(tape.push_conv(out, x, w, groups, g))
}

/// Depthwise convolution. `w: [C, K, K]`.
pub fn conv2d_depthwise<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, spec: &ConvSpec) -> Result<Var> {
    spec.validate()?;
    let (_, cin, h, wd) = tape.value(x).dim4();
    if cin != spec.in_channels {
        return Err(Error::Shape(format!(
            "depthwise conv expects {} channels, got {cin}",
            spec.in_channels
        )));
    }
    let g = spec.geom();
    if !g.fits(h, wd) {
        return Err(Error::Shape(format!(
            "kernel {0}x{0} larger than padded input {h}x{wd}",
            spec.kernel
        )));
    }
    Ok(tape.push_depthwise(x, w, g))
}

/// Zero-parameter per-channel spatial shift.
pub fn shift2d<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    shifts: &ShiftSpec,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    shifts.validate()?;
    let (_, cin, _, _) = tape.value(x).dim4();
    if cin != shifts.offsets.len() {
        return Err(Error::Shape(format!(
            "shift spec has {} offsets, input has {cin} channels",
            shifts.offsets.len()
        )));
    }
    let g = ConvGeom { kernel: shifts.kernel, stride, pad: padding };
    Ok(tape.push_shift(x, shifts.offsets.clone(), g))
}

/// Running statistics owned by one batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnState<S> {
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub momentum: f64,
    pub eps: f64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

impl<S: Scalar> BnState<S> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }
}

/// Batch normalization over `(N, H, W)` per channel. Train mode normalizes by
/// batch statistics and folds them into the running estimates; eval mode uses
/// the running estimates.
pub fn batchnorm<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &mut BnState<S>,
    train: bool,
) -> Result<Var> {
    let (_, c, _, _) = tape.value(x).dim4();
    if tape.value(gamma).numel() != c || tape.value(beta).numel() != c {
        return Err(Error::Shape(format!(
            "batchnorm affine length {} does not match {c} channels",
            tape.value(gamma).numel()
        )));
    }
    if train {
        let (mean, var) = kernels::batch_stats(tape.value(x));
        let keep = S::of(state.momentum);
        let blend = S::of(1.0 - state.momentum);
        for ci in 0..c {
            state.running_mean.data_mut()[ci] = keep * state.running_mean.data()[ci] + blend * mean[ci];
            state.running_var.data_mut()[ci] = keep * state.running_var.data()[ci] + blend * var[ci];
        }
        Ok(tape.push_batchnorm(x, gamma, beta, mean, var, state.eps, true))
    } else {
        let mean = state.running_mean.data().to_vec();
        let var = state.running_var.data().to_vec();
        Ok(tape.push_batchnorm(x, gamma, beta, mean, var, state.eps, false))
    }
}

/// Fully-connected head: `x: [N, In] × w: [In, Out] + b: [Out]`.
pub fn fc<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

// ---- recorded backward rules for the conv family ----------------------------

impl<S: Scalar> Tape<S> {
    pub(crate) fn push_conv(&mut self, out: Tensor<S>, x: Var, w: Var, groups: usize, g: ConvGeom) -> Var {
        self.push(
            out,
            Some(Box::new(move |dout, tape, grads| {
                let (dx, dw) = kernels::conv2d_backward(tape.value(x), tape.value(w), dout, groups, &g);
                grads.accumulate(x, dx);
                grads.accumulate(w, dw);
            })),
        )
    }

    pub(crate) fn push_depthwise(&mut self, x: Var, w: Var, g: ConvGeom) -> Var {
        let out = kernels::depthwise_forward(self.value(x), self.value(w), &g);
        self.push(
            out,
            Some(Box::new(move |dout, tape, grads| {
                let (dx, dw) = kernels::depthwise_backward(tape.value(x), tape.value(w), dout, &g);
                grads.accumulate(x, dx);
                grads.accumulate(w, dw);
            })),
        )
    }

    pub(crate) fn push_shift(&mut self, x: Var, offsets: Vec<(usize, usize)>, g: ConvGeom) -> Var {
        let out = kernels::shift_forward(self.value(x), &offsets, &g);
        let xshape = self.value(x).shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |dout, _tape, grads| {
                grads.accumulate(x, kernels::shift_backward(&xshape, dout, &offsets, &g));
            })),
        )
    }

    pub(crate) fn push_batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<S>,
        var: Vec<S>,
        eps: f64,
        train: bool,
    ) -> Var {
        let out = kernels::bn_apply(
            self.value(x),
            &mean,
            &var,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        self.push(
            out,
            Some(Box::new(move |dout, tape, grads| {
                let xv = tape.value(x);
                let gv = tape.value(gamma);
                let (n, c, h, w) = xv.dim4();
                let m = S::of((n * h * w) as f64);
                let epss = S::of(eps);
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                let mut dx = Tensor::zeros(xv.shape());
                for ci in 0..c {
                    let inv = S::one() / (var[ci] + epss).sqrt();
                    let mu = mean[ci];
                    let ga = gv.data()[ci];
                    // pass 1: per-channel reductions over (N,H,W)
                    let mut sum_dy = S::zero();
                    let mut sum_dy_xhat = S::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * h * w;
                        let xs = &xv.data()[base..base + h * w];
                        let ds = &dout.data()[base..base + h * w];
                        for (&xi, &dyi) in xs.iter().zip(ds.iter()) {
                            sum_dy = sum_dy + dyi;
                            sum_dy_xhat = sum_dy_xhat + dyi * (xi - mu) * inv;
                        }
                    }
                    dbeta.data_mut()[ci] = sum_dy;
                    dgamma.data_mut()[ci] = sum_dy_xhat;
                    if train {
                        // batch stats depend on x: dx = γ·inv/m · (m·dy − Σdy − x̂·Σ(dy·x̂))
                        let scale = ga * inv / m;
                        for ni in 0..n {
                            let base = (ni * c + ci) * h * w;
                            let xs = &xv.data()[base..base + h * w];
                            let ds = &dout.data()[base..base + h * w];
                            let dd = &mut dx.data_mut()[base..base + h * w];
                            for ((d, &xi), &dyi) in dd.iter_mut().zip(xs.iter()).zip(ds.iter()) {
                                let xhat = (xi - mu) * inv;
                                *d = scale * (m * dyi - sum_dy - xhat * sum_dy_xhat);
                            }
                        }
                    } else {
                        // running stats are constants: dx = γ·inv·dy
                        let scale = ga * inv;
                        for ni in 0..n {
                            let base = (ni * c + ci) * h * w;
                            let ds = &dout.data()[base..base + h * w];
                            let dd = &mut dx.data_mut()[base..base + h * w];
                            for (d, &dyi) in dd.iter_mut().zip(ds.iter()) {
                                *d = scale * dyi;
                            }
                        }
                    }
                }
                grads.accumulate(x, dx);
                grads.accumulate(gamma, dgamma);
                grads.accumulate(beta, dbeta);
            })),
        )
    }
}

// ---- parameter initialization -----------------------------------------------

/// Deterministic fan-in-scaled Gaussian initializer (He), seeded.
pub struct Init {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    /// Standard normal via Box-Muller (keeps init identical for f32/f64 nets
    /// with the same seed, up to rounding).
    fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        loop {
            let u: f64 = self.rng.gen::<f64>();
            let v: f64 = self.rng.gen::<f64>();
            if u <= f64::MIN_POSITIVE {
                continue;
            }
            let r = (-2.0 * u.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * v;
            self.spare = Some(r * theta.sin());
            return r * theta.cos();
        }
    }

    pub fn gaussian<S: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<S> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::of(self.normal() * std)).collect();
        Tensor::new(shape.to_vec(), data).expect("init shape")
    }

    /// Kernel init with std `sqrt(2 / fan_in)`.
    pub fn conv_weight<S: Scalar>(&mut self, spec: &ConvSpec) -> Option<Tensor<S>> {
        let shape = spec.weight_shape()?;
        let fan_in = match spec.kind {
            ConvKind::Depthwise => spec.kernel * spec.kernel,
            _ => (spec.in_channels / spec.groups) * spec.kernel * spec.kernel,
        };
        Some(self.gaussian(&shape, (2.0 / fan_in as f64).sqrt()))
    }

    pub fn fc_weight<S: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<S> {
        self.gaussian(&[fan_in, fan_out], (2.0 / fan_in as f64).sqrt())
    }
}
