//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! The tape owns every tensor produced during a forward pass in an arena of
//! slots; ops append nodes recording which slots they read and wrote, which
//! makes the node list a valid topological order by construction. `backward`
//! replays the list in reverse, accumulating gradients into the slots whose
//! subgraphs reach a watched leaf (parameters, or inputs under gradient
//! checking). Granularity is deliberately coarse — a whole BLSTM pass or
//! convolution is one node — so tape overhead stays negligible next to the
//! kernel work.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels;
use crate::layers::{BlstmNode, Conv2dNode, Deconv1dNode, LayerNormNode, SeqAxis};
use crate::scalar::Scalar;
use crate::stft::StftConfig;
use crate::tensor::Tensor;

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor slot on a specific tape. Using it with any other tape
/// is rejected at the API boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId {
    pub(crate) slot: u32,
    pub(crate) tape: u64,
}

pub(crate) struct Slot<S> {
    pub(crate) value: Tensor<S>,
    pub(crate) grad: Option<Tensor<S>>,
    pub(crate) needs_grad: bool,
}

pub(crate) struct Node<S: Scalar> {
    pub(crate) op: Op<S>,
    pub(crate) out: u32,
}

pub(crate) enum Op<S: Scalar> {
    Leaf,
    Add { a: u32, b: u32 },
    Sub { a: u32, b: u32 },
    Mul { a: u32, b: u32 },
    Div { a: u32, b: u32 },
    Scale { a: u32, c: S },
    AddConst { a: u32 },
    Ln { a: u32 },
    Sum { a: u32 },
    Dot { a: u32, b: u32 },
    AbsSum { a: u32 },
    ScaleByScalar { v: u32, s: u32 },
    Matmul { a: u32, b: u32, m: usize, k: usize, n: usize },
    AddBias { a: u32, bias: u32, n: usize },
    Reshape { a: u32 },
    Permute { a: u32, perm: Vec<usize> },
    ConcatLast { parts: Vec<u32>, widths: Vec<usize> },
    SliceLast { a: u32, start: usize, len: usize, width: usize },
    Clamp { a: u32, lo: S, hi: S },
    ComplexMul { a: u32, b: u32 },
    Softmax { a: u32, rows: usize, n: usize },
    Prelu { a: u32, alpha: u32 },
    LayerNorm(Box<LayerNormNode<S>>),
    Unfold { a: u32, i: usize, j: usize, axis: SeqAxis },
    Deconv1d(Box<Deconv1dNode>),
    Blstm(Box<BlstmNode<S>>),
    Conv2d(Box<Conv2dNode>),
    Stft { a: u32, cfg: StftConfig },
    Istft { a: u32, cfg: StftConfig, n_out: usize },
}

impl<S: Scalar> Op<S> {
    #[cfg(test)]
    pub(crate) fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::Scale { .. } => "scale",
            Op::AddConst { .. } => "add_const",
            Op::Ln { .. } => "ln",
            Op::Sum { .. } => "sum",
            Op::Dot { .. } => "dot",
            Op::AbsSum { .. } => "abs_sum",
            Op::ScaleByScalar { .. } => "scale_by_scalar",
            Op::Matmul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::ConcatLast { .. } => "concat_last",
            Op::SliceLast { .. } => "slice_last",
            Op::Clamp { .. } => "clamp",
            Op::ComplexMul { .. } => "complex_mul",
            Op::Softmax { .. } => "softmax",
            Op::Prelu { .. } => "prelu",
            Op::LayerNorm(_) => "layer_norm",
            Op::Unfold { .. } => "unfold",
            Op::Deconv1d(_) => "deconv1d",
            Op::Blstm(_) => "blstm",
            Op::Conv2d(_) => "conv2d",
            Op::Stft { .. } => "stft",
            Op::Istft { .. } => "istft",
        }
    }
}

pub struct Tape<S: Scalar> {
    pub(crate) id: u64,
    pub(crate) slots: Vec<Slot<S>>,
    pub(crate) nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            slots: Vec::new(),
            nodes: Vec::new(),
        }
    }

    /// Register a constant input; no gradient will be tracked through it.
    pub fn input(&mut self, t: Tensor<S>) -> TensorId {
        self.push_slot(t, false, Op::Leaf)
    }

    /// Register a leaf whose gradient should be accumulated (parameters,
    /// or probed inputs under gradient checking).
    pub fn watched(&mut self, t: Tensor<S>) -> TensorId {
        self.push_slot(t, true, Op::Leaf)
    }

    pub(crate) fn push_slot(&mut self, value: Tensor<S>, needs_grad: bool, op: Op<S>) -> TensorId {
        let slot = self.slots.len() as u32;
        self.slots.push(Slot { value, grad: None, needs_grad });
        self.nodes.push(Node { op, out: slot });
        TensorId { slot, tape: self.id }
    }

    pub(crate) fn chk(&self, id: TensorId) -> Result<u32> {
        if id.tape != self.id {
            return Err(Error::TapeMismatch { expected: self.id, got: id.tape });
        }
        debug_assert!((id.slot as usize) < self.slots.len());
        Ok(id.slot)
    }

    pub fn value(&self, id: TensorId) -> Result<&Tensor<S>> {
        let s = self.chk(id)?;
        Ok(&self.slots[s as usize].value)
    }

    /// Scalar convenience for loss slots.
    pub fn scalar_value(&self, id: TensorId) -> Result<S> {
        let v = self.value(id)?;
        if !v.is_scalar() {
            return Err(Error::invalid("scalar_value", format!("shape {:?}", v.shape())));
        }
        Ok(v.first())
    }

    pub fn grad(&self, id: TensorId) -> Result<Option<&Tensor<S>>> {
        let s = self.chk(id)?;
        Ok(self.slots[s as usize].grad.as_ref())
    }

    pub fn take_grad(&mut self, id: TensorId) -> Result<Option<Tensor<S>>> {
        let s = self.chk(id)?;
        Ok(self.slots[s as usize].grad.take())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub(crate) fn needs(&self, slot: u32) -> bool {
        self.slots[slot as usize].needs_grad
    }

    pub(crate) fn val(&self, slot: u32) -> &Tensor<S> {
        &self.slots[slot as usize].value
    }

    pub(crate) fn acc(&mut self, slot: u32, g: Tensor<S>) {
        let s = &mut self.slots[slot as usize];
        if !s.needs_grad {
            return;
        }
        debug_assert_eq!(s.value.shape(), g.shape());
        match &mut s.grad {
            Some(cur) => kernels::add_assign(cur.data_mut(), g.data()),
            None => s.grad = Some(g),
        }
    }

    fn any_needs(&self, ids: &[u32]) -> bool {
        ids.iter().any(|&s| self.needs(s))
    }

    /// Reverse sweep from a scalar loss. Gradients land in the slots of all
    /// watched leaves (and intermediates on paths to them).
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let l = self.chk(loss)?;
        if !self.slots[l as usize].value.is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.slots[l as usize].value.shape()),
            ));
        }
        for s in &mut self.slots {
            s.grad = None;
        }
        let seed_shape = self.slots[l as usize].value.shape().to_vec();
        self.slots[l as usize].grad = Some(Tensor::from_vec(&seed_shape, vec![S::one()])?);
        for idx in (0..self.nodes.len()).rev() {
            let out = self.nodes[idx].out;
            if self.slots[out as usize].grad.is_none() {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backward_op(&op, out)?;
            self.nodes[idx].op = op;
        }
        Ok(())
    }

    /// `backward` with per-op-kind wall time, for the ignored profiling
    /// tests. Returns (kind, seconds, visits) sorted by descending time.
    #[cfg(test)]
    pub(crate) fn backward_profiled(
        &mut self,
        loss: TensorId,
    ) -> Result<Vec<(&'static str, f64, usize)>> {
        use std::collections::HashMap;
        let l = self.chk(loss)?;
        for s in &mut self.slots {
            s.grad = None;
        }
        let seed_shape = self.slots[l as usize].value.shape().to_vec();
        self.slots[l as usize].grad = Some(Tensor::from_vec(&seed_shape, vec![S::one()])?);
        let mut agg: HashMap<&'static str, (f64, usize)> = HashMap::new();
        for idx in (0..self.nodes.len()).rev() {
            let out = self.nodes[idx].out;
            if self.slots[out as usize].grad.is_none() {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            let t0 = std::time::Instant::now();
            self.backward_op(&op, out)?;
            let dt = t0.elapsed().as_secs_f64();
            let e = agg.entry(op.kind()).or_insert((0.0, 0));
            e.0 += dt;
            e.1 += 1;
            self.nodes[idx].op = op;
        }
        let mut rows: Vec<_> = agg.into_iter().map(|(k, (t, c))| (k, t, c)).collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(rows)
    }

    fn backward_op(&mut self, op: &Op<S>, out: u32) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let g = self.slots[out as usize].grad.clone().unwrap();
                self.acc(*a, g.clone());
                self.acc(*b, g);
            }
            Op::Sub { a, b } => {
                let g = self.slots[out as usize].grad.clone().unwrap();
                let mut gb = g.clone();
                kernels::scale_in_place(gb.data_mut(), -S::one());
                self.acc(*a, g);
                self.acc(*b, gb);
            }
            Op::Mul { a, b } => {
                let g = self.grad_out(out);
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for (gi, bi) in ga.data_mut().iter_mut().zip(self.val(*b).data()) {
                        *gi *= *bi;
                    }
                    self.acc(*a, ga);
                }
                if self.needs(*b) {
                    let mut gb = g;
                    for (gi, ai) in gb.data_mut().iter_mut().zip(self.val(*a).data()) {
                        *gi *= *ai;
                    }
                    self.acc(*b, gb);
                }
            }
            Op::Div { a, b } => {
                let g = self.grad_out(out);
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for (gi, bi) in ga.data_mut().iter_mut().zip(self.val(*b).data()) {
                        *gi /= *bi;
                    }
                    self.acc(*a, ga);
                }
                if self.needs(*b) {
                    let mut gb = g;
                    {
                        let av = self.val(*a).data();
                        let bv = self.val(*b).data();
                        for (i, gi) in gb.data_mut().iter_mut().enumerate() {
                            *gi = -*gi * av[i] / (bv[i] * bv[i]);
                        }
                    }
                    self.acc(*b, gb);
                }
            }
            Op::Scale { a, c } => {
                let mut g = self.grad_out(out);
                kernels::scale_in_place(g.data_mut(), *c);
                self.acc(*a, g);
            }
            Op::AddConst { a } => {
                let g = self.grad_out(out);
                self.acc(*a, g);
            }
            Op::Ln { a } => {
                let mut g = self.grad_out(out);
                for (gi, xi) in g.data_mut().iter_mut().zip(self.val(*a).data()) {
                    *gi /= *xi;
                }
                self.acc(*a, g);
            }
            Op::Sum { a } => {
                let g = self.slots[out as usize].grad.as_ref().unwrap().first();
                let sh = self.val(*a).shape().to_vec();
                self.acc(*a, Tensor::filled(&sh, g));
            }
            Op::Dot { a, b } => {
                let g = self.slots[out as usize].grad.as_ref().unwrap().first();
                if self.needs(*a) {
                    let mut ga = self.val(*b).clone();
                    kernels::scale_in_place(ga.data_mut(), g);
                    self.acc(*a, ga);
                }
                if self.needs(*b) {
                    let mut gb = self.val(*a).clone();
                    kernels::scale_in_place(gb.data_mut(), g);
                    self.acc(*b, gb);
                }
            }
            Op::AbsSum { a } => {
                let g = self.slots[out as usize].grad.as_ref().unwrap().first();
                let mut ga = self.val(*a).clone();
                for v in ga.data_mut() {
                    *v = if *v > S::zero() {
                        g
                    } else if *v < S::zero() {
                        -g
                    } else {
                        S::zero()
                    };
                }
                self.acc(*a, ga);
            }
            Op::ScaleByScalar { v, s } => {
                let g = self.grad_out(out);
                if self.needs(*v) {
                    let sv = self.val(*s).first();
                    let mut gv = g.clone();
                    kernels::scale_in_place(gv.data_mut(), sv);
                    self.acc(*v, gv);
                }
                if self.needs(*s) {
                    let gs = kernels::dot(g.data(), self.val(*v).data());
                    let gs = Tensor::from_vec(self.val(*s).shape(), vec![gs]).expect("scalar slot");
                    self.acc(*s, gs);
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                let g = self.grad_out(out);
                if self.needs(*a) {
                    let mut ga = Tensor::zeros(&[*m, *k]);
                    kernels::matmul_abt_acc(ga.data_mut(), g.data(), self.val(*b).data(), *m, *n, *k);
                    self.acc(*a, ga);
                }
                if self.needs(*b) {
                    let mut gb = Tensor::zeros(&[*k, *n]);
                    kernels::matmul_atb_acc(gb.data_mut(), self.val(*a).data(), g.data(), *m, *k, *n);
                    self.acc(*b, gb);
                }
            }
            Op::AddBias { a, bias, n } => {
                let g = self.grad_out(out);
                if self.needs(*bias) {
                    let mut gb = Tensor::zeros(&[*n]);
                    for row in g.data().chunks_exact(*n) {
                        kernels::add_assign(gb.data_mut(), row);
                    }
                    self.acc(*bias, gb);
                }
                self.acc(*a, g);
            }
            Op::Reshape { a } => {
                let g = self.grad_out(out);
                let sh = self.val(*a).shape().to_vec();
                self.acc(*a, g.reshaped(&sh).expect("reshape grad"));
            }
            Op::Permute { a, perm } => {
                let g = self.grad_out(out);
                let mut inv = vec![0usize; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                self.acc(*a, permute_copy(&g, &inv));
            }
            Op::ConcatLast { parts, widths } => {
                let g = self.grad_out(out);
                let total: usize = widths.iter().sum();
                let rows = g.numel() / total;
                let mut off = 0;
                for (p, &w) in parts.iter().zip(widths) {
                    if self.needs(*p) {
                        let mut gp = Tensor::zeros(self.val(*p).shape());
                        for r in 0..rows {
                            gp.data_mut()[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        self.acc(*p, gp);
                    }
                    off += w;
                }
            }
            Op::SliceLast { a, start, len, width } => {
                let g = self.grad_out(out);
                let rows = g.numel() / len;
                let mut ga = Tensor::zeros(self.val(*a).shape());
                for r in 0..rows {
                    ga.data_mut()[r * width + start..r * width + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.acc(*a, ga);
            }
            Op::Clamp { a, lo, hi } => {
                let mut g = self.grad_out(out);
                for (gi, xi) in g.data_mut().iter_mut().zip(self.val(*a).data()) {
                    if *xi < *lo || *xi > *hi {
                        *gi = S::zero();
                    }
                }
                self.acc(*a, g);
            }
            Op::ComplexMul { a, b } => {
                let g = self.grad_out(out);
                for (x, y) in [(*a, *b), (*b, *a)] {
                    if !self.needs(x) {
                        continue;
                    }
                    let mut gx = Tensor::zeros(self.val(x).shape());
                    {
                        let other = self.val(y).data();
                        let gd = g.data();
                        let gxd = gx.data_mut();
                        for i in (0..gd.len()).step_by(2) {
                            let (br, bi) = (other[i], other[i + 1]);
                            gxd[i] = gd[i] * br + gd[i + 1] * bi;
                            gxd[i + 1] = -gd[i] * bi + gd[i + 1] * br;
                        }
                    }
                    self.acc(x, gx);
                }
            }
            Op::Softmax { a, rows, n } => {
                let mut g = self.grad_out(out);
                {
                    let y = self.slots[out as usize].value.data();
                    let gd = g.data_mut();
                    for r in 0..*rows {
                        let yr = &y[r * n..r * n + n];
                        let gr = &mut gd[r * n..r * n + n];
                        let inner = kernels::dot(gr, yr);
                        for (gi, yi) in gr.iter_mut().zip(yr) {
                            *gi = (*gi - inner) * *yi;
                        }
                    }
                }
                self.acc(*a, g);
            }
            Op::Prelu { a, alpha } => {
                let g = self.grad_out(out);
                let al = self.val(*alpha).first();
                if self.needs(*alpha) {
                    let mut gsum = S::zero();
                    for (gi, xi) in g.data().iter().zip(self.val(*a).data()) {
                        if *xi < S::zero() {
                            gsum += *gi * *xi;
                        }
                    }
                    let gsum = Tensor::from_vec(self.val(*alpha).shape(), vec![gsum]).expect("scalar slot");
                    self.acc(*alpha, gsum);
                }
                if self.needs(*a) {
                    let mut ga = g;
                    for (gi, xi) in ga.data_mut().iter_mut().zip(self.val(*a).data()) {
                        if *xi < S::zero() {
                            *gi *= al;
                        }
                    }
                    self.acc(*a, ga);
                }
            }
            Op::LayerNorm(node) => crate::layers::layer_norm_backward(self, node, out),
            Op::Unfold { a, i, j, axis } => crate::layers::unfold_backward(self, *a, *i, *j, *axis, out),
            Op::Deconv1d(node) => crate::layers::deconv1d_backward(self, node, out),
            Op::Blstm(node) => crate::layers::blstm_backward(self, node, out),
            Op::Conv2d(node) => crate::layers::conv2d_backward(self, node, out),
            Op::Stft { a, cfg } => crate::stft::stft_backward(self, *a, cfg, out),
            Op::Istft { a, cfg, n_out } => crate::stft::istft_backward(self, *a, cfg, *n_out, out),
        }
        Ok(())
    }

    /// Clone of the output gradient (owned, so slot values can be borrowed
    /// immutably while it is consumed).
    pub(crate) fn grad_out(&self, out: u32) -> Tensor<S> {
        self.slots[out as usize].grad.clone().expect("missing output grad")
    }

    // ── elementwise / reduction ops ──────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.chk(a)?, self.chk(b)?);
        self.same_shape("add", sa, sb)?;
        let mut out = self.val(sa).clone();
        kernels::add_assign(out.data_mut(), self.val(sb).data());
        Ok(self.record(out, &[sa, sb], Op::Add { a: sa, b: sb }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.chk(a)?, self.chk(b)?);
        self.same_shape("sub", sa, sb)?;
        let mut out = self.val(sa).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.val(sb).data()) {
            *o -= *x;
        }
        Ok(self.record(out, &[sa, sb], Op::Sub { a: sa, b: sb }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.chk(a)?, self.chk(b)?);
        self.same_shape("mul", sa, sb)?;
        let mut out = self.val(sa).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.val(sb).data()) {
            *o *= *x;
        }
        Ok(self.record(out, &[sa, sb], Op::Mul { a: sa, b: sb }))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.chk(a)?, self.chk(b)?);
        self.same_shape("div", sa, sb)?;
        let mut out = self.val(sa).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.val(sb).data()) {
            *o /= *x;
        }
        Ok(self.record(out, &[sa, sb], Op::Div { a: sa, b: sb }))
    }

    pub fn scale(&mut self, a: TensorId, c: S) -> Result<TensorId> {
        let sa = self.chk(a)?;
        let mut out = self.val(sa).clone();
        kernels::scale_in_place(out.data_mut(), c);
        Ok(self.record(out, &[sa], Op::Scale { a: sa, c }))
    }

    pub fn add_const(&mut self, a: TensorId, c: S) -> Result<TensorId> {
        let sa = self.chk(a)?;
        let mut out = self.val(sa).clone();
        for o in out.data_mut() {
            *o += c;
        }
        Ok(self.record(out, &[sa], Op::AddConst { a: sa }))
    }

    /// Elementwise natural log; caller guarantees strictly positive inputs
    /// (all uses in this crate add an epsilon first).
    pub fn ln(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.chk(a)?;
        let mut out = self.val(sa).clone();
        for o in out.data_mut() {
            *o = o.ln();
        }
        Ok(self.record(out, &[sa], Op::Ln { a: sa }))
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.chk(a)?;
        let out = Tensor::scalar(kernels::sum(self.val(sa).data()));
        Ok(self.record(out, &[sa], Op::Sum { a: sa }))
    }

    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.chk(a)?, self.chk(b)?);
        if self.val(sa).numel() != self.val(sb).numel() {
            return Err(Error::shape("dot", "length mismatch"));
        }
        let out = Tensor::scalar(kernels::dot(self.val(sa).data(), self.val(sb).data()));
        Ok(self.record(out, &[sa, sb], Op::Dot { a: sa, b: sb }))
    }

    pub fn abs_sum(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.chk(a)?;
        let v: S = self.val(sa).data().iter().map(|x| x.abs()).sum();
        Ok(self.record(Tensor::scalar(v), &[sa], Op::AbsSum { a: sa }))
    }

    /// out = v * s where s is a scalar-shaped tensor (broadcast multiply).
    pub fn scale_by_scalar(&mut self, v: TensorId, s: TensorId) -> Result<TensorId> {
        let (sv, ss) = (self.chk(v)?, self.chk(s)?);
        if !self.val(ss).is_scalar() {
            return Err(Error::shape("scale_by_scalar", "scale must be scalar"));
        }
        let c = self.val(ss).first();
        let mut out = self.val(sv).clone();
        kernels::scale_in_place(out.data_mut(), c);
        Ok(self.record(out, &[sv, ss], Op::ScaleByScalar { v: sv, s: ss }))
    }

    // ── linear algebra ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.chk(a)?, self.chk(b)?);
        let (ash, bsh) = (self.val(sa).shape(), self.val(sb).shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ash, bsh)));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = Tensor::zeros(&[m, n]);
        kernels::matmul_acc(out.data_mut(), self.val(sa).data(), self.val(sb).data(), m, k, n);
        Ok(self.record(out, &[sa, sb], Op::Matmul { a: sa, b: sb, m, k, n }))
    }

    /// Broadcast-add `bias` (shape [n]) over the last axis of `a`.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.chk(a)?, self.chk(bias)?);
        let n = *self.val(sa).shape().last().ok_or_else(|| Error::shape("add_bias", "rank 0"))?;
        if self.val(sb).shape() != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} vs last dim {}", self.val(sb).shape(), n),
            ));
        }
        let mut out = self.val(sa).clone();
        {
            let bd = self.val(sb).data();
            for row in out.data_mut().chunks_exact_mut(n) {
                kernels::add_assign(row, bd);
            }
        }
        Ok(self.record(out, &[sa, sb], Op::AddBias { a: sa, bias: sb, n }))
    }

    // ── shape manipulation ───────────────────────────────────────────────

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let sa = self.chk(a)?;
        let out = self.val(sa).clone().reshaped(shape)?;
        Ok(self.record(out, &[sa], Op::Reshape { a: sa }))
    }

    pub fn permute(&mut self, a: TensorId, perm: &[usize]) -> Result<TensorId> {
        let sa = self.chk(a)?;
        let rank = self.val(sa).rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("perm {:?} for rank {}", perm, rank)));
        }
        let out = permute_copy(self.val(sa), perm);
        Ok(self.record(out, &[sa], Op::Permute { a: sa, perm: perm.to_vec() }))
    }

    /// Concatenate along the last axis; all leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_last", "no parts"));
        }
        let slots: Vec<u32> = parts.iter().map(|&p| self.chk(p)).collect::<Result<_>>()?;
        let lead = {
            let sh = self.val(slots[0]).shape();
            sh[..sh.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(slots.len());
        for &s in &slots {
            let sh = self.val(s).shape();
            if sh[..sh.len() - 1] != lead[..] {
                return Err(Error::shape("concat_last", "leading dims differ"));
            }
            widths.push(sh[sh.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut shape = lead;
        shape.push(total);
        let mut out = vec![S::zero(); rows * total];
        let mut off = 0;
        for (&s, &w) in slots.iter().zip(&widths) {
            let src = self.val(s).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.record(out, &slots, Op::ConcatLast { parts: slots.clone(), widths }))
    }

    pub fn slice_last(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sa = self.chk(a)?;
        let sh = self.val(sa).shape().to_vec();
        let width = *sh.last().ok_or_else(|| Error::shape("slice_last", "rank 0"))?;
        if start + len > width {
            return Err(Error::invalid(
                "slice_last",
                format!("slice {}..{} out of width {}", start, start + len, width),
            ));
        }
        let rows: usize = sh[..sh.len() - 1].iter().product();
        let mut oshape = sh[..sh.len() - 1].to_vec();
        oshape.push(len);
        let mut out = vec![S::zero(); rows * len];
        {
            let src = self.val(sa).data();
            for r in 0..rows {
                out[r * len..(r + 1) * len]
                    .copy_from_slice(&src[r * width + start..r * width + start + len]);
            }
        }
        let out = Tensor::from_vec(&oshape, out)?;
        Ok(self.record(out, &[sa], Op::SliceLast { a: sa, start, len, width }))
    }

    // ── nonlinearities ───────────────────────────────────────────────────

    pub fn clamp(&mut self, a: TensorId, lo: S, hi: S) -> Result<TensorId> {
        let sa = self.chk(a)?;
        if !(lo < hi) {
            return Err(Error::invalid("clamp", format!("lo {} >= hi {}", lo, hi)));
        }
        let mut out = self.val(sa).clone();
        for v in out.data_mut() {
            *v = v.min(hi).max(lo);
        }
        Ok(self.record(out, &[sa], Op::Clamp { a: sa, lo, hi }))
    }

    /// Pairwise complex multiply; both tensors are [.., 2] with (re, im)
    /// interleaved on the last axis.
    pub fn complex_mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.chk(a)?, self.chk(b)?);
        self.same_shape("complex_mul", sa, sb)?;
        if self.val(sa).shape().last() != Some(&2) {
            return Err(Error::shape("complex_mul", "last axis must be 2 (re, im)"));
        }
        let av = self.val(sa).data();
        let bv = self.val(sb).data();
        let mut out = vec![S::zero(); av.len()];
        for i in (0..av.len()).step_by(2) {
            out[i] = av[i] * bv[i] - av[i + 1] * bv[i + 1];
            out[i + 1] = av[i] * bv[i + 1] + av[i + 1] * bv[i];
        }
        let out = Tensor::from_vec(self.val(sa).shape(), out)?;
        Ok(self.record(out, &[sa, sb], Op::ComplexMul { a: sa, b: sb }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.chk(a)?;
        let n = *self.val(sa).shape().last().ok_or_else(|| Error::shape("softmax", "rank 0"))?;
        if n == 0 {
            return Err(Error::invalid("softmax", "empty last axis"));
        }
        let rows = self.val(sa).numel() / n;
        let mut out = vec![S::zero(); self.val(sa).numel()];
        kernels::softmax_rows(&mut out, self.val(sa).data(), rows, n);
        let out = Tensor::from_vec(self.val(sa).shape(), out)?;
        Ok(self.record(out, &[sa], Op::Softmax { a: sa, rows, n }))
    }

    pub fn prelu(&mut self, a: TensorId, alpha: TensorId) -> Result<TensorId> {
        let (sa, sal) = (self.chk(a)?, self.chk(alpha)?);
        if !self.val(sal).is_scalar() {
            return Err(Error::shape("prelu", "alpha must be a single scalar"));
        }
        let al = self.val(sal).first();
        let mut out = self.val(sa).clone();
        for v in out.data_mut() {
            if *v < S::zero() {
                *v *= al;
            }
        }
        Ok(self.record(out, &[sa, sal], Op::Prelu { a: sa, alpha: sal }))
    }

    // ── plumbing ─────────────────────────────────────────────────────────

    pub(crate) fn record(&mut self, out: Tensor<S>, inputs: &[u32], op: Op<S>) -> TensorId {
        let needs = self.any_needs(inputs);
        self.push_slot(out, needs, op)
    }

    fn same_shape(&self, op: &'static str, a: u32, b: u32) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape()),
            ));
        }
        Ok(())
    }
}

pub(crate) fn permute_copy<S: Scalar>(x: &Tensor<S>, perm: &[usize]) -> Tensor<S> {
    let ish = x.shape();
    let rank = ish.len();
    let osh: Vec<usize> = perm.iter().map(|&p| ish[p]).collect();
    let mut istr = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        istr[d] = istr[d + 1] * ish[d + 1];
    }
    let mut out = vec![S::zero(); x.numel()];
    let mut idx = vec![0usize; rank];
    let xd = x.data();
    for o in out.iter_mut() {
        let mut iflat = 0;
        for d in 0..rank {
            iflat += idx[d] * istr[perm[d]];
        }
        *o = xd[iflat];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < osh[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_vec(&osh, out).expect("permute shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_grad_is_2p() {
        let mut tape = Tape::<f64>::new();
        let p = tape.watched(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq).unwrap();
        assert_eq!(tape.scalar_value(loss).unwrap(), 1.0 + 4.0 + 0.25);
        tape.backward(loss).unwrap();
        let g = tape.grad(p).unwrap().unwrap();
        assert_eq!(g.data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn reuse_of_a_tensor_accumulates_both_branch_gradients() {
        // loss = sum(p) + dot(p, p): grad = 1 + 2p
        let mut tape = Tape::<f64>::new();
        let p = tape.watched(Tensor::from_vec(&[2], vec![3.0, -1.0]).unwrap());
        let s = tape.sum(p).unwrap();
        let d = tape.dot(p, p).unwrap();
        let loss = tape.add(s, d).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(p).unwrap().unwrap().to_f64_vec();
        assert_eq!(g, vec![7.0, -1.0]);

        // single-branch runs for comparison
        let mut t1 = Tape::<f64>::new();
        let p1 = t1.watched(Tensor::from_vec(&[2], vec![3.0, -1.0]).unwrap());
        let l1 = t1.sum(p1).unwrap();
        t1.backward(l1).unwrap();
        let mut t2 = Tape::<f64>::new();
        let p2 = t2.watched(Tensor::from_vec(&[2], vec![3.0, -1.0]).unwrap());
        let l2 = t2.dot(p2, p2).unwrap();
        t2.backward(l2).unwrap();
        let g1 = t1.grad(p1).unwrap().unwrap().to_f64_vec();
        let g2 = t2.grad(p2).unwrap().unwrap().to_f64_vec();
        for i in 0..2 {
            assert_eq!(g[i], g1[i] + g2[i]);
        }
    }

    #[test]
    fn cross_tape_tensor_is_rejected() {
        let mut t1 = Tape::<f64>::new();
        let mut t2 = Tape::<f64>::new();
        let a = t1.input(Tensor::scalar(1.0));
        let b = t2.input(Tensor::scalar(2.0));
        match t1.add(a, b) {
            Err(Error::TapeMismatch { .. }) => {}
            other => panic!("expected TapeMismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let p = tape.watched(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let y = tape.scale(p, 2.0).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn constant_inputs_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.watched(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let c = tape.input(Tensor::from_vec(&[2], vec![5.0, 7.0]).unwrap());
        let m = tape.mul(p, c).unwrap();
        let loss = tape.sum(m).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).unwrap().is_none());
        assert_eq!(tape.grad(p).unwrap().unwrap().data(), &[5.0, 7.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_vec(&[2, 3], vec![0.1, -0.4, 2.0, 100.0, 101.0, 99.5]).unwrap());
        let y = tape.softmax(x).unwrap();
        let v = tape.value(y).unwrap();
        for r in 0..2 {
            let s: f64 = v.data()[r * 3..r * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.watched(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.watched(Tensor::from_vec(&[2, 1], vec![9.0, 8.0]).unwrap());
        let cat = tape.concat_last(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).unwrap().data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let back = tape.slice_last(cat, 2, 1).unwrap();
        assert_eq!(tape.value(back).unwrap().data(), &[9.0, 8.0]);
        let loss = tape.sum(back).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap().unwrap().data(), &[1.0, 1.0]);
        assert_eq!(tape.grad(a).unwrap().unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn permute_matches_manual_transpose_and_inverts_in_backward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.watched(Tensor::from_vec(&[2, 3], (1..=6).map(f64::from).collect()).unwrap());
        let y = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.value(y).unwrap().shape(), &[3, 2]);
        assert_eq!(tape.value(y).unwrap().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        // loss weights distinguish positions so the inverse permute is exercised
        let w = tape.input(Tensor::from_vec(&[3, 2], vec![1.0, 10.0, 100.0, 1000.0, 2.0, 20.0]).unwrap());
        let m = tape.mul(y, w).unwrap();
        let loss = tape.sum(m).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[1.0, 100.0, 2.0, 10.0, 1000.0, 20.0]);
    }

    #[test]
    fn complex_mul_matches_hand_computation() {
        // (1+2i)(3-1i) = 5+5i and (0.5-0.5i)(2+4i) = 3+1i
        let mut tape = Tape::<f64>::new();
        let a = tape.input(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 0.5, -0.5]).unwrap());
        let b = tape.input(Tensor::from_vec(&[2, 2], vec![3.0, -1.0, 2.0, 4.0]).unwrap());
        let y = tape.complex_mul(a, b).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[5.0, 5.0, 3.0, 1.0]);
    }
}
