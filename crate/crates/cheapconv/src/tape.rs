//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Forward ops append nodes in topological order; [`Tape::backward`] walks the
//! nodes in reverse, handing each node's upstream gradient to its recorded
//! rule. Gradients accumulate additively when a value feeds several consumers.
//! One tape lives for one training step.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn<S> = Box<dyn Fn(&Tensor<S>, &Tape<S>, &mut GradBuf<S>)>;

struct Node<S> {
    value: Tensor<S>,
    backward: Option<BackFn<S>>,
}

/// Per-node gradient accumulator produced by [`Tape::backward`].
pub struct GradBuf<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> GradBuf<S> {
    fn new(n: usize) -> Self {
        GradBuf { grads: (0..n).map(|_| None).collect() }
    }

    pub fn accumulate(&mut self, v: Var, g: Tensor<S>) {
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Gradient of the root w.r.t. `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, backward: Option<BackFn<S>>) -> Var {
        self.nodes.push(Node { value, backward });
        Var(self.nodes.len() - 1)
    }

    /// Record an input with no backward rule (constants, data, parameters).
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, None)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.leaf(v)
    }

    /// Reverse sweep from a scalar root. Every reachable node's gradient is
    /// visited exactly once; unreachable nodes keep `None`.
    pub fn backward(&self, root: Var) -> Result<GradBuf<S>> {
        if self.nodes.is_empty() {
            return Err(Error::Shape("backward on empty tape".into()));
        }
        let rshape = self.value(root).shape();
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!("backward root must be scalar, got shape {rshape:?}")));
        }
        let mut grads = GradBuf::new(self.nodes.len());
        grads.accumulate(root, Tensor::ones(self.value(root).shape()));
        for id in (0..=root.0).rev() {
            let Some(rule) = self.nodes[id].backward.as_ref() else { continue };
            // take the accumulated gradient, run the rule, then put it back so
            // leaf reads stay available to the caller
            let Some(g) = grads.take(Var(id)) else { continue };
            rule(&g, self, &mut grads);
            grads.grads[id] = Some(g);
        }
        Ok(grads)
    }

    // ---- elementwise binary ops ----------------------------------------

    fn broadcast_check(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa == sb {
            return Ok(());
        }
        if sb.len() > sa.len() {
            return Err(Error::Shape(format!("{op}: cannot broadcast {sb:?} onto {sa:?}")));
        }
        let off = sa.len() - sb.len();
        for (i, &db) in sb.iter().enumerate() {
            if db != 1 && db != sa[off + i] {
                return Err(Error::Shape(format!("{op}: shapes {sa:?} and {sb:?} incompatible")));
            }
        }
        Ok(())
    }

    /// Map a linear index in `a`'s shape to the corresponding index in `b`'s
    /// (right-aligned, singleton dims of `b` broadcast).
    fn bcast_index(sa: &[usize], sb: &[usize], mut ia: usize) -> usize {
        let off = sa.len() - sb.len();
        let mut coords = vec![0usize; sa.len()];
        for d in (0..sa.len()).rev() {
            coords[d] = ia % sa[d];
            ia /= sa[d];
        }
        let mut ib = 0;
        for (d, &e) in sb.iter().enumerate() {
            let c = if e == 1 { 0 } else { coords[off + d] };
            ib = ib * e + c;
        }
        ib
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: fn(S, S) -> S,
        back: fn(S, S, S) -> (S, S), // (av, bv, dout) -> (da, db)
        name: &'static str,
    ) -> Result<Var> {
        self.broadcast_check(a, b, name)?;
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let same = sa == sb;
        let out = if same {
            let mut o = Tensor::zeros(&sa);
            for ((o, &x), &y) in o.data_mut().iter_mut().zip(self.value(a).data()).zip(self.value(b).data()) {
                *o = f(x, y);
            }
            o
        } else {
            let mut o = Tensor::zeros(&sa);
            let (av, bv) = (self.value(a), self.value(b));
            for (i, o) in o.data_mut().iter_mut().enumerate() {
                *o = f(av.data()[i], bv.data()[Self::bcast_index(&sa, &sb, i)]);
            }
            o
        };
        Ok(self.push(
            out,
            Some(Box::new(move |dout, tape, grads| {
                let (av, bv) = (tape.value(a), tape.value(b));
                let mut da = Tensor::zeros(&sa);
                let mut db = Tensor::zeros(&sb);
                for (i, &g) in dout.data().iter().enumerate() {
                    let ib = if same { i } else { Self::bcast_index(&sa, &sb, i) };
                    let (ga, gb) = back(av.data()[i], bv.data()[ib], g);
                    da.data_mut()[i] = da.data()[i] + ga;
                    db.data_mut()[ib] = db.data()[ib] + gb;
                }
                grads.accumulate(a, da);
                grads.accumulate(b, db);
            })),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, |_, _, g| (g, g), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, |_, _, g| (g, -g), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, |x, y, g| (g * y, g * x), "mul")
    }

    // ---- elementwise unary ops ------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, dfdx: impl Fn(S) -> S + 'static) -> Var {
        let out = self.value(a).map(&f);
        self.push(
            out,
            Some(Box::new(move |dout, tape, grads| {
                let av = tape.value(a);
                let mut da = Tensor::zeros(av.shape());
                for ((d, &g), &x) in da.data_mut().iter_mut().zip(dout.data()).zip(av.data()) {
                    *d = g * dfdx(x);
                }
                grads.accumulate(a, da);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = S::of(c);
        self.unary(a, move |x| x * c, move |_| c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > S::zero() { x } else { S::zero() },
            |x| if x > S::zero() { S::one() } else { S::zero() },
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), |x| S::one() / x)
    }

    /// `max(x, lo)`; gradient passes only where `x > lo`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let lo = S::of(lo);
        self.unary(
            a,
            move |x| if x > lo { x } else { lo },
            move |x| if x > lo { S::one() } else { S::zero() },
        )
    }

    /// `sqrt(x + eps)`, safe at zero.
    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        let eps = S::of(eps);
        let half = S::of(0.5);
        self.unary(a, move |x| (x + eps).sqrt(), move |x| half / (x + eps).sqrt())
    }

    // ---- matmul ----------------------------------------------------------

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dim2();
        let (kb, n) = self.value(b).dim2();
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul: inner dims differ, {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n, out.data_mut());
        Ok(self.push(
            out,
            Some(Box::new(move |dout, tape, grads| {
                let (av, bv) = (tape.value(a), tape.value(b));
                // dA = dC · Bᵀ ; dB = Aᵀ · dC
                let mut da = Tensor::zeros(&[m, k]);
                kernels::gemm_nt(dout.data(), bv.data(), m, n, k, da.data_mut());
                let mut db = Tensor::zeros(&[k, n]);
                kernels::gemm_tn(av.data(), dout.data(), m, k, n, db.data_mut());
                grads.accumulate(a, da);
                grads.accumulate(b, db);
            })),
        ))
    }

    // ---- reductions -------------------------------------------------------

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: S = self.value(a).data().iter().copied().sum();
        let shape = self.value(a).shape().to_vec();
        self.push(
            Tensor::new(vec![1], vec![total]).expect("scalar"),
            Some(Box::new(move |dout, _tape, grads| {
                let g = dout.data()[0];
                let mut da = Tensor::zeros(&shape);
                for v in da.data_mut() {
                    *v = g;
                }
                grads.accumulate(a, da);
            })),
        )
    }

    /// Mean of all elements as `[1]`.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Row sums: `[N,M] -> [N]`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let (n, m) = self.value(a).dim2();
        let mut out = Tensor::zeros(&[n]);
        for i in 0..n {
            let row = &self.value(a).data()[i * m..(i + 1) * m];
            out.data_mut()[i] = row.iter().copied().sum();
        }
        self.push(
            out,
            Some(Box::new(move |dout, _tape, grads| {
                let mut da = Tensor::zeros(&[n, m]);
                for i in 0..n {
                    let g = dout.data()[i];
                    for v in &mut da.data_mut()[i * m..(i + 1) * m] {
                        *v = g;
                    }
                }
                grads.accumulate(a, da);
            })),
        )
    }

    /// Row-wise L2 normalization `x / sqrt(|x|² + eps)` for `[N,M]`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let (n, m) = self.value(a).dim2();
        let eps = S::of(eps);
        let mut out = Tensor::zeros(&[n, m]);
        let mut norms = vec![S::zero(); n];
        for i in 0..n {
            let row = &self.value(a).data()[i * m..(i + 1) * m];
            let sq: S = row.iter().map(|&v| v * v).sum();
            let norm = (sq + eps).sqrt();
            norms[i] = norm;
            for (o, &v) in out.data_mut()[i * m..(i + 1) * m].iter_mut().zip(row.iter()) {
                *o = v / norm;
            }
        }
        let outc = out.clone();
        self.push(
            out,
            Some(Box::new(move |dout, _tape, grads| {
                // dx = (dout - y * <dout, y>) / norm, per row
                let mut da = Tensor::zeros(&[n, m]);
                for i in 0..n {
                    let y = &outc.data()[i * m..(i + 1) * m];
                    let g = &dout.data()[i * m..(i + 1) * m];
                    let dot: S = y.iter().zip(g.iter()).map(|(&yv, &gv)| yv * gv).sum();
                    for ((d, &gv), &yv) in
                        da.data_mut()[i * m..(i + 1) * m].iter_mut().zip(g.iter()).zip(y.iter())
                    {
                        *d = (gv - yv * dot) / norms[i];
                    }
                }
                grads.accumulate(a, da);
            })),
        )
    }

    // ---- softmax ----------------------------------------------------------

    /// Row-wise temperature softmax of logits `[N,C]`. Stable via max
    /// subtraction; gradient uses the softmax Jacobian scaled by `1/τ`.
    pub fn softmax_rows(&mut self, a: Var, tau: f64) -> Var {
        assert!(tau > 0.0, "temperature must be positive");
        let p = kernels::softmax_rows(self.value(a), tau);
        let (n, c) = p.dim2();
        let pc = p.clone();
        self.push(
            p,
            Some(Box::new(move |dout, _tape, grads| {
                let inv_tau = S::of(1.0 / tau);
                let mut da = Tensor::zeros(&[n, c]);
                for i in 0..n {
                    let prow = &pc.data()[i * c..(i + 1) * c];
                    let grow = &dout.data()[i * c..(i + 1) * c];
                    let dot: S = prow.iter().zip(grow.iter()).map(|(&p, &g)| p * g).sum();
                    for ((d, &p), &g) in
                        da.data_mut()[i * c..(i + 1) * c].iter_mut().zip(prow.iter()).zip(grow.iter())
                    {
                        *d = p * (g - dot) * inv_tau;
                    }
                }
                grads.accumulate(a, da);
            })),
        )
    }

    // ---- structural ops ----------------------------------------------------

    /// Concatenate `[N,C_i,H,W]` tensors along channels, preserving order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_channels needs at least one tensor".into()));
        }
        let (n, _, h, w) = self.value(parts[0]).dim4();
        let mut cs = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dim4();
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels: got {:?}, expected batch/spatial [{n}, _, {h}, {w}]",
                    self.value(p).shape()
                )));
            }
            cs.push(pc);
        }
        let ctot: usize = cs.iter().sum();
        let mut out = Tensor::zeros(&[n, ctot, h, w]);
        {
            let od = out.data_mut();
            for ni in 0..n {
                let mut coff = 0;
                for (&p, &pc) in parts.iter().zip(cs.iter()) {
                    let src = &self.nodes[p.0].value;
                    let s = &src.data()[ni * pc * h * w..(ni + 1) * pc * h * w];
                    od[(ni * ctot + coff) * h * w..][..pc * h * w].copy_from_slice(s);
                    coff += pc;
                }
            }
        }
        let parts = parts.to_vec();
        Ok(self.push(
            out,
            Some(Box::new(move |dout, _tape, grads| {
                let mut coff = 0;
                for (&p, &pc) in parts.iter().zip(cs.iter()) {
                    let mut dp = Tensor::zeros(&[n, pc, h, w]);
                    for ni in 0..n {
                        let src = &dout.data()[(ni * ctot + coff) * h * w..][..pc * h * w];
                        dp.data_mut()[ni * pc * h * w..(ni + 1) * pc * h * w].copy_from_slice(src);
                    }
                    grads.accumulate(p, dp);
                    coff += pc;
                }
            })),
        ))
    }

    /// Global average pooling `[N,C,H,W] -> [N,C]`.
    pub fn gap(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.value(a).dim4();
        let out = kernels::gap_forward(self.value(a));
        self.push(
            out,
            Some(Box::new(move |dout, _tape, grads| {
                let inv = S::of(1.0 / (h * w) as f64);
                let mut da = Tensor::zeros(&[n, c, h, w]);
                for ni in 0..n {
                    for ci in 0..c {
                        let g = dout.data()[ni * c + ci] * inv;
                        for v in &mut da.data_mut()[(ni * c + ci) * h * w..][..h * w] {
                            *v = g;
                        }
                    }
                }
                grads.accumulate(a, da);
            })),
        )
    }

    /// 2×2/stride-2 average pooling.
    pub fn avgpool2(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let out = kernels::avgpool2_forward(self.value(a));
        self.push(
            out,
            Some(Box::new(move |dout, _tape, grads| {
                grads.accumulate(a, kernels::avgpool2_backward(&shape, dout));
            })),
        )
    }

    /// Channel-mean of squared activations, flattened: `[N,C,H,W] -> [N, H·W]`.
    pub fn channel_mean_sq(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.value(a).dim4();
        let inv_c = S::of(1.0 / c as f64);
        let mut out = Tensor::zeros(&[n, h * w]);
        for ni in 0..n {
            for ci in 0..c {
                let plane = &self.value(a).data()[(ni * c + ci) * h * w..][..h * w];
                let dst = &mut out.data_mut()[ni * h * w..(ni + 1) * h * w];
                for (o, &v) in dst.iter_mut().zip(plane.iter()) {
                    *o = *o + v * v * inv_c;
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |dout, tape, grads| {
                let av = tape.value(a);
                let two = S::of(2.0);
                let mut da = Tensor::zeros(&[n, c, h, w]);
                for ni in 0..n {
                    let grow = &dout.data()[ni * h * w..(ni + 1) * h * w];
                    for ci in 0..c {
                        let plane = &av.data()[(ni * c + ci) * h * w..][..h * w];
                        let dst = &mut da.data_mut()[(ni * c + ci) * h * w..][..h * w];
                        for ((d, &g), &x) in dst.iter_mut().zip(grow.iter()).zip(plane.iter()) {
                            *d = g * two * x * inv_c;
                        }
                    }
                }
                grads.accumulate(a, da);
            })),
        )
    }

    /// Sum a list of scalar `[1]` vars (loss assembly).
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut acc = terms
            .first()
            .copied()
            .ok_or_else(|| Error::Shape("sum_scalars needs at least one term".into()))?;
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_mul_examples() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let b = t.leaf(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s).data(), &[4.0, 6.0]);

        let ones = t.leaf(Tensor::ones(&[2]));
        let m = t.mul(a, ones).unwrap();
        assert_eq!(t.value(m).data(), t.value(a).data());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 2]));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_identity_and_vec() {
        let mut t = Tape::<f64>::new();
        let eye = t.leaf(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = t.leaf(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = t.matmul(eye, m).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = t.leaf(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let b = t.leaf(Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn backward_sum_gives_ones_and_quadratic_gives_w() {
        let mut t = Tape::<f64>::new();
        let w = t.leaf(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        let s = t.sum_all(w);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::<f64>::new();
        let w = t.leaf(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        let sq = t.mul(w, w).unwrap();
        let s = t.sum_all(sq);
        let half = t.scale(s, 0.5);
        let g = t.backward(half).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::<f64>::new();
        let w = t.leaf(Tensor::zeros(&[3]));
        assert!(t.backward(w).is_err());
    }

    #[test]
    fn multi_consumer_accumulation() {
        // grad of x in sum(x+x) equals grad of x in sum(2x)
        let mut t1 = Tape::<f64>::new();
        let x1 = t1.leaf(Tensor::from_f64(&[2], &[1.0, 5.0]).unwrap());
        let s1 = t1.add(x1, x1).unwrap();
        let r1 = t1.sum_all(s1);
        let g1 = t1.backward(r1).unwrap();

        let mut t2 = Tape::<f64>::new();
        let x2 = t2.leaf(Tensor::from_f64(&[2], &[1.0, 5.0]).unwrap());
        let s2 = t2.scale(x2, 2.0);
        let r2 = t2.sum_all(s2);
        let g2 = t2.backward(r2).unwrap();

        assert_eq!(g1.get(x1).unwrap().data(), g2.get(x2).unwrap().data());
    }

    #[test]
    fn concat_roundtrip_recovers_inputs() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::from_f64(&[1, 2, 1, 1], &[1.0, 2.0]).unwrap());
        let b = t.leaf(Tensor::from_f64(&[1, 2, 1, 1], &[3.0, 4.0]).unwrap());
        let c = t.concat_channels(&[a, b]).unwrap();
        assert_eq!(t.value(c).shape(), &[1, 4, 1, 1]);
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        // single-tensor concat is identity
        let one = t.concat_channels(&[a]).unwrap();
        assert_eq!(t.value(one).data(), t.value(a).data());

        // backward slices the gradient back per input
        let s = t.sum_all(c);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().shape(), &[1, 2, 1, 1]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let d = t.detach(x);
        let m = t.mul(d, d).unwrap();
        let s = t.sum_all(m);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).is_none());
        assert!(g.get(d).is_some());
    }

    #[test]
    fn broadcast_trailing_bias() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_f64(&[2, 3], &[0.0; 6].to_vec().as_slice()).unwrap());
        let b = t.leaf(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let y = t.add(x, b).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = t.sum_all(y);
        let g = t.backward(s).unwrap();
        // bias gradient sums over the broadcast batch dim
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_argmax_preserved_across_temperatures() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::from_f64(&[1, 4], &[0.3, -1.0, 2.0, 0.9]).unwrap());
        for tau in [0.1, 1.0, 4.0, 100.0] {
            let p = t.softmax_rows(a, tau);
            let pd = t.value(p).data();
            let am = pd
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(am, 2, "argmax moved at tau={tau}");
            let sum: f64 = pd.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}
