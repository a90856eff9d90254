//! Differentiable layer primitives recorded on the tape.
//!
//! Embedding layout is `[T, F, C]` (channel-last). The unfold/deconv pair
//! additionally moves the sequence axis to the front so the BLSTM sees
//! `[steps, batch, features]` with contiguous per-step batches — that turns
//! the recurrence into one dense matmul per step instead of per-sequence
//! loops.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, TensorId};
use crate::tensor::Tensor;

/// Which axis of `[T, F, C]` a sequence op walks along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqAxis {
    /// Sequences run along frequency; batch is the frame axis (intra-frame module).
    Freq,
    /// Sequences run along time; batch is the frequency axis (sub-band module).
    Time,
}

/// Grouping for layer normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics over the channel axis per position (chanLN); affine `[C]`.
    LastOne,
    /// Statistics over (frequency, channel) per frame (cfLN); affine `[F, C]`.
    LastTwo,
    /// Statistics over the whole (batchless) tensor (gLN); affine `[C]`.
    All,
}

const NORM_EPS: f64 = 1e-5;

pub struct BlstmWeightIds {
    pub w_ih: TensorId,
    pub w_hh: TensorId,
    pub b_ih: TensorId,
    pub b_hh: TensorId,
}

pub(crate) struct DirState<S> {
    pub w_ih: u32,
    pub w_hh: u32,
    pub b_ih: u32,
    pub b_hh: u32,
    /// Post-activation gates [L, B, 4H] in (i, f, g, o) blocks.
    pub gates: Vec<S>,
    /// Cell states [L, B, H].
    pub c: Vec<S>,
    /// tanh of cell states [L, B, H].
    pub tanh_c: Vec<S>,
}

pub(crate) struct BlstmNode<S> {
    pub x: u32,
    pub l: usize,
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub dirs: [DirState<S>; 2],
}

pub(crate) struct Deconv1dNode {
    pub x: u32,
    pub w: u32,
    pub b: u32,
    pub i: usize,
    pub j: usize,
    pub axis: SeqAxis,
    pub out_len: usize,
}

pub(crate) struct Conv2dNode {
    pub x: u32,
    pub w: u32,
    pub b: u32,
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub t: usize,
    pub f: usize,
    pub transposed: bool,
}

pub(crate) struct LayerNormNode<S> {
    pub x: u32,
    pub gamma: u32,
    pub beta: u32,
    pub groups: usize,
    pub gsize: usize,
    pub mu: Vec<S>,
    pub inv_std: Vec<S>,
}

impl<S: Scalar> Tape<S> {
    /// Stack `I` neighboring positions with stride `J` along one axis of a
    /// `[T, F, C]` tensor, zero-padding on the right. Output is
    /// `[K, batch, I·C]` with `K = ⌈len/J⌉` and features ordered
    /// channel-major (`c·I + w`).
    pub fn unfold_seq(&mut self, x: TensorId, i: usize, j: usize, axis: SeqAxis) -> Result<TensorId> {
        let sx = self.chk(x)?;
        let sh = self.val(sx).shape();
        if sh.len() != 3 {
            return Err(Error::shape("unfold_seq", format!("want rank 3, got {:?}", sh)));
        }
        if j == 0 || i < j {
            return Err(Error::invalid("unfold_seq", format!("need I >= J >= 1, got I={i} J={j}")));
        }
        let (t, f, c) = (sh[0], sh[1], sh[2]);
        let (len, batch) = match axis {
            SeqAxis::Freq => (f, t),
            SeqAxis::Time => (t, f),
        };
        if len == 0 || batch == 0 || c == 0 {
            return Err(Error::invalid("unfold_seq", format!("empty input {:?}", sh)));
        }
        let k = len.div_ceil(j);
        let mut out = vec![S::zero(); k * batch * i * c];
        {
            let xd = self.val(sx).data();
            for kk in 0..k {
                for bb in 0..batch {
                    let orow = &mut out[(kk * batch + bb) * i * c..(kk * batch + bb + 1) * i * c];
                    for cc in 0..c {
                        for w in 0..i {
                            let p = kk * j + w;
                            if p < len {
                                let src = match axis {
                                    SeqAxis::Freq => (bb * f + p) * c + cc,
                                    SeqAxis::Time => (p * f + bb) * c + cc,
                                };
                                orow[cc * i + w] = xd[src];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[k, batch, i * c], out)?;
        Ok(self.record(out, &[sx], Op::Unfold { a: sx, i, j, axis }))
    }

    /// Transposed 1-D convolution over the sequence axis, inverting the
    /// unfold's framing: input `[K, batch, Cin]`, weight `[Cin, Cout, I]`,
    /// bias `[Cout]`; overlap-added output cropped to `out_len`, returned in
    /// embedding layout `[T, F, Cout]`.
    pub fn deconv1d_seq(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        i: usize,
        j: usize,
        axis: SeqAxis,
        out_len: usize,
    ) -> Result<TensorId> {
        let (sx, sw, sb) = (self.chk(x)?, self.chk(w)?, self.chk(b)?);
        let xsh = self.val(sx).shape().to_vec();
        let wsh = self.val(sw).shape().to_vec();
        if xsh.len() != 3 || wsh.len() != 3 {
            return Err(Error::shape("deconv1d_seq", format!("x {:?}, w {:?}", xsh, wsh)));
        }
        if j == 0 || i < j {
            return Err(Error::invalid("deconv1d_seq", format!("need I >= J >= 1, got I={i} J={j}")));
        }
        let (k, batch, cin) = (xsh[0], xsh[1], xsh[2]);
        let cout = wsh[1];
        if wsh != [cin, cout, i] || self.val(sb).shape() != [cout] {
            return Err(Error::shape(
                "deconv1d_seq",
                format!("weight {:?} / bias {:?} vs cin={cin}, I={i}", wsh, self.val(sb).shape()),
            ));
        }
        if out_len == 0 || (k - 1) * j + i < out_len {
            return Err(Error::invalid(
                "deconv1d_seq",
                format!("out_len {out_len} not covered by K={k}, I={i}, J={j}"),
            ));
        }
        let node = Deconv1dNode { x: sx, w: sw, b: sb, i, j, axis, out_len };
        let out = deconv1d_forward(self, &node, k, batch, cin, cout)?;
        Ok(self.record(out, &[sx, sw, sb], Op::Deconv1d(Box::new(node))))
    }

    /// Bidirectional LSTM over `[steps, batch, Cin]`, all `batch` sequences
    /// advanced together. Output `[steps, batch, 2H]`: forward direction in
    /// channels `0..H`, backward in `H..2H`, each at its own time index.
    pub fn blstm(&mut self, x: TensorId, fwd: &BlstmWeightIds, bwd: &BlstmWeightIds) -> Result<TensorId> {
        let sx = self.chk(x)?;
        let xsh = self.val(sx).shape().to_vec();
        if xsh.len() != 3 {
            return Err(Error::shape("blstm", format!("want rank 3, got {:?}", xsh)));
        }
        let (l, b, cin) = (xsh[0], xsh[1], xsh[2]);
        if l == 0 || b == 0 {
            return Err(Error::invalid("blstm", "empty sequence"));
        }
        let mut h = 0;
        let mut dir_slots = Vec::with_capacity(2);
        for ids in [fwd, bwd] {
            let (wi, wh, bi, bh) =
                (self.chk(ids.w_ih)?, self.chk(ids.w_hh)?, self.chk(ids.b_ih)?, self.chk(ids.b_hh)?);
            let wish = self.val(wi).shape().to_vec();
            if wish.len() != 2 || wish[0] % 4 != 0 || wish[0] == 0 || wish[1] != cin {
                return Err(Error::shape("blstm", format!("w_ih {:?} vs cin {}", wish, cin)));
            }
            let hh = wish[0] / 4;
            if h == 0 {
                h = hh;
            } else if h != hh {
                return Err(Error::shape("blstm", "direction hidden sizes differ"));
            }
            if self.val(wh).shape() != [4 * h, h]
                || self.val(bi).shape() != [4 * h]
                || self.val(bh).shape() != [4 * h]
            {
                return Err(Error::shape("blstm", "w_hh/bias shapes"));
            }
            dir_slots.push((wi, wh, bi, bh));
        }
        let mut node = BlstmNode {
            x: sx,
            l,
            b,
            cin,
            h,
            dirs: [
                DirState {
                    w_ih: dir_slots[0].0,
                    w_hh: dir_slots[0].1,
                    b_ih: dir_slots[0].2,
                    b_hh: dir_slots[0].3,
                    gates: Vec::new(),
                    c: Vec::new(),
                    tanh_c: Vec::new(),
                },
                DirState {
                    w_ih: dir_slots[1].0,
                    w_hh: dir_slots[1].1,
                    b_ih: dir_slots[1].2,
                    b_hh: dir_slots[1].3,
                    gates: Vec::new(),
                    c: Vec::new(),
                    tanh_c: Vec::new(),
                },
            ],
        };
        let out = blstm_forward(self, &mut node)?;
        Ok(self.record(out, &[sx, dir_slots[0].0, dir_slots[1].0], Op::Blstm(Box::new(node))))
    }

    /// 2-D convolution over `(T, F)` with odd kernel and same-padding.
    /// Input `[T, F, Cin]`, weight `[Cout, Cin, kh, kw]`, bias `[Cout]`.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        self.conv2d_impl(x, w, b, false)
    }

    /// Transposed 2-D convolution (stride 1, same-padding); weight stored
    /// `[Cin, Cout, kh, kw]`. Shape-equivalent to a convolution with the
    /// spatially flipped kernel.
    pub fn deconv2d(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        self.conv2d_impl(x, w, b, true)
    }

    fn conv2d_impl(&mut self, x: TensorId, w: TensorId, b: TensorId, transposed: bool) -> Result<TensorId> {
        let (sx, sw, sb) = (self.chk(x)?, self.chk(w)?, self.chk(b)?);
        let xsh = self.val(sx).shape().to_vec();
        let wsh = self.val(sw).shape().to_vec();
        let op_name: &'static str = if transposed { "deconv2d" } else { "conv2d" };
        if xsh.len() != 3 || wsh.len() != 4 {
            return Err(Error::shape(op_name, format!("x {:?}, w {:?}", xsh, wsh)));
        }
        let (t, f, cin) = (xsh[0], xsh[1], xsh[2]);
        let (cout, w_cin, kh, kw) = if transposed {
            (wsh[1], wsh[0], wsh[2], wsh[3])
        } else {
            (wsh[0], wsh[1], wsh[2], wsh[3])
        };
        if w_cin != cin {
            return Err(Error::shape(op_name, format!("x has {} channels, weight expects {}", cin, w_cin)));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(op_name, "kernel sides must be odd (same-padding)"));
        }
        if self.val(sb).shape() != [cout] {
            return Err(Error::shape(op_name, format!("bias {:?} vs cout {}", self.val(sb).shape(), cout)));
        }
        if t == 0 || f == 0 {
            return Err(Error::invalid(op_name, "empty spatial extent"));
        }
        let node = Conv2dNode { x: sx, w: sw, b: sb, kh, kw, cin, cout, t, f, transposed };
        let out = conv2d_forward(self, &node)?;
        Ok(self.record(out, &[sx, sw, sb], Op::Conv2d(Box::new(node))))
    }

    /// Layer normalization (ε = 1e-5) with the grouping given by `mode`.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, mode: NormMode) -> Result<TensorId> {
        let (sx, sg, sb) = (self.chk(x)?, self.chk(gamma)?, self.chk(beta)?);
        let xsh = self.val(sx).shape().to_vec();
        let rank = xsh.len();
        let (groups, gsize, want_aff): (usize, usize, Vec<usize>) = match mode {
            NormMode::LastOne => {
                if rank == 0 {
                    return Err(Error::shape("layer_norm", "rank 0 input"));
                }
                let c = xsh[rank - 1];
                (xsh[..rank - 1].iter().product(), c, vec![c])
            }
            NormMode::LastTwo => {
                if rank < 2 {
                    return Err(Error::shape("layer_norm", "LastTwo needs rank >= 2"));
                }
                let (f, c) = (xsh[rank - 2], xsh[rank - 1]);
                (xsh[..rank - 2].iter().product(), f * c, vec![f, c])
            }
            NormMode::All => {
                if rank == 0 {
                    return Err(Error::shape("layer_norm", "rank 0 input"));
                }
                let c = xsh[rank - 1];
                (1, xsh.iter().product(), vec![c])
            }
        };
        if gsize == 0 || groups == 0 {
            return Err(Error::invalid("layer_norm", format!("zero-size normalization axis in {:?}", xsh)));
        }
        if self.val(sg).shape() != want_aff || self.val(sb).shape() != want_aff {
            return Err(Error::shape(
                "layer_norm",
                format!("affine {:?}/{:?}, want {:?}", self.val(sg).shape(), self.val(sb).shape(), want_aff),
            ));
        }
        let mut node = LayerNormNode {
            x: sx,
            gamma: sg,
            beta: sb,
            groups,
            gsize,
            mu: vec![S::zero(); groups],
            inv_std: vec![S::zero(); groups],
        };
        let out = layer_norm_forward(self, &mut node)?;
        Ok(self.record(out, &[sx, sg, sb], Op::LayerNorm(Box::new(node))))
    }
}

// ── unfold ───────────────────────────────────────────────────────────────

pub(crate) fn unfold_backward<S: Scalar>(tape: &mut Tape<S>, a: u32, i: usize, j: usize, axis: SeqAxis, out: u32) {
    if !tape.needs(a) {
        return;
    }
    let g = tape.grad_out(out);
    let xsh = tape.val(a).shape().to_vec();
    let (t, f, c) = (xsh[0], xsh[1], xsh[2]);
    let (len, batch) = match axis {
        SeqAxis::Freq => (f, t),
        SeqAxis::Time => (t, f),
    };
    let k = len.div_ceil(j);
    let mut gx = Tensor::zeros(&xsh);
    {
        let gd = g.data();
        let gxd = gx.data_mut();
        for kk in 0..k {
            for bb in 0..batch {
                let grow = &gd[(kk * batch + bb) * i * c..(kk * batch + bb + 1) * i * c];
                for cc in 0..c {
                    for w in 0..i {
                        let p = kk * j + w;
                        if p < len {
                            let dst = match axis {
                                SeqAxis::Freq => (bb * f + p) * c + cc,
                                SeqAxis::Time => (p * f + bb) * c + cc,
                            };
                            gxd[dst] += grow[cc * i + w];
                        }
                    }
                }
            }
        }
    }
    tape.acc(a, gx);
}

// ── deconv1d ─────────────────────────────────────────────────────────────

fn deconv1d_forward<S: Scalar>(
    tape: &Tape<S>,
    node: &Deconv1dNode,
    k: usize,
    batch: usize,
    cin: usize,
    cout: usize,
) -> Result<Tensor<S>> {
    let (i, j, out_len) = (node.i, node.j, node.out_len);
    let oshape = match node.axis {
        SeqAxis::Freq => [batch, out_len, cout],
        SeqAxis::Time => [out_len, batch, cout],
    };
    let mut out = vec![S::zero(); batch * out_len * cout];
    let xd = tape.val(node.x).data();
    let wd = tape.val(node.w).data();
    let mut yw = vec![S::zero(); k * batch * cout];
    let mut wslice = vec![S::zero(); cin * cout];
    for w in 0..i {
        for ci in 0..cin {
            for co in 0..cout {
                wslice[ci * cout + co] = wd[(ci * cout + co) * i + w];
            }
        }
        yw.fill(S::zero());
        kernels::matmul_acc(&mut yw, xd, &wslice, k * batch, cin, cout);
        for kk in 0..k {
            let p = kk * j + w;
            if p >= out_len {
                continue;
            }
            for bb in 0..batch {
                let src = &yw[(kk * batch + bb) * cout..(kk * batch + bb + 1) * cout];
                let dst_row = match node.axis {
                    SeqAxis::Freq => bb * out_len + p,
                    SeqAxis::Time => p * batch + bb,
                };
                kernels::add_assign(&mut out[dst_row * cout..(dst_row + 1) * cout], src);
            }
        }
    }
    let bd = tape.val(node.b).data();
    for row in out.chunks_exact_mut(cout) {
        kernels::add_assign(row, bd);
    }
    Tensor::from_vec(&oshape, out)
}

pub(crate) fn deconv1d_backward<S: Scalar>(tape: &mut Tape<S>, node: &Deconv1dNode, out: u32) {
    let g = tape.grad_out(out);
    let xsh = tape.val(node.x).shape().to_vec();
    let (k, batch, cin) = (xsh[0], xsh[1], xsh[2]);
    let cout = tape.val(node.b).numel();
    let (i, j, out_len) = (node.i, node.j, node.out_len);

    let mut gb = Tensor::zeros(&[cout]);
    for row in g.data().chunks_exact(cout) {
        kernels::add_assign(gb.data_mut(), row);
    }

    let mut gx = Tensor::zeros(&xsh);
    let mut gw = Tensor::zeros(tape.val(node.w).shape());
    {
        let gd = g.data();
        let xd = tape.val(node.x).data();
        let wd = tape.val(node.w).data();
        let mut gathered = vec![S::zero(); k * batch * cout];
        let mut wslice = vec![S::zero(); cin * cout];
        let mut gw_slice = vec![S::zero(); cin * cout];
        for w in 0..i {
            gathered.fill(S::zero());
            for kk in 0..k {
                let p = kk * j + w;
                if p >= out_len {
                    continue;
                }
                for bb in 0..batch {
                    let src_row = match node.axis {
                        SeqAxis::Freq => bb * out_len + p,
                        SeqAxis::Time => p * batch + bb,
                    };
                    gathered[(kk * batch + bb) * cout..(kk * batch + bb + 1) * cout]
                        .copy_from_slice(&gd[src_row * cout..(src_row + 1) * cout]);
                }
            }
            if tape.needs(node.x) {
                for ci in 0..cin {
                    for co in 0..cout {
                        wslice[ci * cout + co] = wd[(ci * cout + co) * i + w];
                    }
                }
                kernels::matmul_abt_acc(gx.data_mut(), &gathered, &wslice, k * batch, cout, cin);
            }
            gw_slice.fill(S::zero());
            kernels::matmul_atb_acc(&mut gw_slice, xd, &gathered, k * batch, cin, cout);
            for ci in 0..cin {
                for co in 0..cout {
                    gw.data_mut()[(ci * cout + co) * i + w] += gw_slice[ci * cout + co];
                }
            }
        }
    }
    let (x, w, b) = (node.x, node.w, node.b);
    tape.acc(x, gx);
    tape.acc(w, gw);
    tape.acc(b, gb);
}

// ── blstm ────────────────────────────────────────────────────────────────

fn blstm_forward<S: Scalar>(tape: &Tape<S>, node: &mut BlstmNode<S>) -> Result<Tensor<S>> {
    let (l, b, cin, h) = (node.l, node.b, node.cin, node.h);
    let xd = tape.val(node.x).data();
    let mut out = vec![S::zero(); l * b * 2 * h];
    for (d, dir) in node.dirs.iter_mut().enumerate() {
        let w_ih = tape.val(dir.w_ih).data();
        let w_hh = tape.val(dir.w_hh).data();
        let b_ih = tape.val(dir.b_ih).data();
        let b_hh = tape.val(dir.b_hh).data();
        let mut wih_t = vec![S::zero(); cin * 4 * h];
        kernels::transpose(&mut wih_t, w_ih, 4 * h, cin);
        let mut whh_t = vec![S::zero(); h * 4 * h];
        kernels::transpose(&mut whh_t, w_hh, 4 * h, h);

        // input contributions for every step at once
        let mut gates = vec![S::zero(); l * b * 4 * h];
        kernels::matmul_acc(&mut gates, xd, &wih_t, l * b, cin, 4 * h);
        for row in gates.chunks_exact_mut(4 * h) {
            for (g, (bi, bh)) in row.iter_mut().zip(b_ih.iter().zip(b_hh)) {
                *g += *bi + *bh;
            }
        }

        let mut cells = vec![S::zero(); l * b * h];
        let mut tanh_c = vec![S::zero(); l * b * h];
        let mut h_prev = vec![S::zero(); b * h];
        let mut c_prev = vec![S::zero(); b * h];
        let steps: Vec<usize> = if d == 0 { (0..l).collect() } else { (0..l).rev().collect() };
        for &t in &steps {
            let gt = &mut gates[t * b * 4 * h..(t + 1) * b * 4 * h];
            kernels::matmul_acc(gt, &h_prev, &whh_t, b, h, 4 * h);
            let ct = &mut cells[t * b * h..(t + 1) * b * h];
            let tct = &mut tanh_c[t * b * h..(t + 1) * b * h];
            // Activations and the cell update run as whole-slice passes so
            // they compile to SIMD instead of a per-element scalar chain.
            for (row, (crow, cprow)) in
                gt.chunks_exact_mut(4 * h).zip(ct.chunks_exact_mut(h).zip(c_prev.chunks_exact(h)))
            {
                let (ifg, rest) = row.split_at_mut(2 * h);
                let (gg, og) = rest.split_at_mut(h);
                S::fast_sigmoid_slice(ifg);
                S::fast_tanh_slice(gg);
                S::fast_sigmoid_slice(og);
                let (ig, fg) = ifg.split_at(h);
                for u in 0..h {
                    crow[u] = fg[u] * cprow[u] + ig[u] * gg[u];
                }
            }
            tct.copy_from_slice(ct);
            S::fast_tanh_slice(tct);
            for bb in 0..b {
                let og = &gt[bb * 4 * h + 3 * h..(bb + 1) * 4 * h];
                let tc = &tct[bb * h..(bb + 1) * h];
                let hp = &mut h_prev[bb * h..(bb + 1) * h];
                let orow = &mut out[(t * b + bb) * 2 * h + d * h..(t * b + bb) * 2 * h + (d + 1) * h];
                for u in 0..h {
                    let hv = og[u] * tc[u];
                    hp[u] = hv;
                    orow[u] = hv;
                }
            }
            c_prev.copy_from_slice(ct);
        }
        dir.gates = gates;
        dir.c = cells;
        dir.tanh_c = tanh_c;
    }
    Tensor::from_vec(&[l, b, 2 * h], out)
}

pub(crate) fn blstm_backward<S: Scalar>(tape: &mut Tape<S>, node: &BlstmNode<S>, out: u32) {
    let (l, b, cin, h) = (node.l, node.b, node.cin, node.h);
    let g = tape.grad_out(out);
    let gd = g.data();
    let xd = tape.val(node.x).data();
    let outv = tape.val(out).data();
    let one = S::one();

    let mut gx = Tensor::zeros(&[l, b, cin]);
    let mut grads: Vec<(u32, Tensor<S>)> = Vec::with_capacity(9);

    for (d, dir) in node.dirs.iter().enumerate() {
        let w_hh = tape.val(dir.w_hh).data();
        let mut dpre = vec![S::zero(); l * b * 4 * h];
        let mut dh = vec![S::zero(); b * h];
        let mut dc = vec![S::zero(); b * h];
        let mut gwhh = Tensor::zeros(&[4 * h, h]);
        let mut h_prev = vec![S::zero(); b * h];
        let zeros_row = vec![S::zero(); h];
        // reverse of the forward processing order
        let steps: Vec<usize> = if d == 0 { (0..l).rev().collect() } else { (0..l).collect() };
        for &t in &steps {
            let gates = &dir.gates[t * b * 4 * h..(t + 1) * b * 4 * h];
            let tct = &dir.tanh_c[t * b * h..(t + 1) * b * h];
            // previous cell/hidden in forward order (zeros at the boundary)
            let t_prev: Option<usize> = if d == 0 { t.checked_sub(1) } else { (t + 1 < l).then_some(t + 1) };
            let dpre_t = &mut dpre[t * b * 4 * h..(t + 1) * b * 4 * h];
            for bb in 0..b {
                let grow = &gates[bb * 4 * h..(bb + 1) * 4 * h];
                let (ig, grest) = grow.split_at(h);
                let (fg, grest) = grest.split_at(h);
                let (gg, og) = grest.split_at(h);
                let tc = &tct[bb * h..(bb + 1) * h];
                let cpr = match t_prev {
                    Some(tp) => &dir.c[tp * b * h + bb * h..tp * b * h + (bb + 1) * h],
                    None => &zeros_row[..],
                };
                let gdrow = &gd[(t * b + bb) * 2 * h + d * h..(t * b + bb) * 2 * h + (d + 1) * h];
                let dhrow = &mut dh[bb * h..(bb + 1) * h];
                let dcrow = &mut dc[bb * h..(bb + 1) * h];
                let drow = &mut dpre_t[bb * 4 * h..(bb + 1) * 4 * h];
                let (d_i, drest) = drow.split_at_mut(h);
                let (d_f, drest) = drest.split_at_mut(h);
                let (d_g, d_o) = drest.split_at_mut(h);
                for u in 0..h {
                    let dh_t = gdrow[u] + dhrow[u];
                    let dc_t = dcrow[u] + dh_t * og[u] * (one - tc[u] * tc[u]);
                    dcrow[u] = dc_t * fg[u];
                    d_i[u] = dc_t * gg[u] * ig[u] * (one - ig[u]);
                    d_f[u] = dc_t * cpr[u] * fg[u] * (one - fg[u]);
                    d_g[u] = dc_t * ig[u] * (one - gg[u] * gg[u]);
                    d_o[u] = dh_t * tc[u] * og[u] * (one - og[u]);
                }
            }
            // dh for the previous step and the recurrent weight gradient
            dh.fill(S::zero());
            kernels::matmul_acc(&mut dh, dpre_t, w_hh, b, 4 * h, h);
            if let Some(tp) = t_prev {
                for bb in 0..b {
                    for u in 0..h {
                        h_prev[bb * h + u] = outv[(tp * b + bb) * 2 * h + d * h + u];
                    }
                }
                kernels::matmul_atb_acc(gwhh.data_mut(), dpre_t, &h_prev, b, 4 * h, h);
            }
        }
        if tape.needs(node.x) {
            let w_ih = tape.val(dir.w_ih).data();
            kernels::matmul_acc(gx.data_mut(), &dpre, w_ih, l * b, 4 * h, cin);
        }
        let mut gwih = Tensor::zeros(&[4 * h, cin]);
        kernels::matmul_atb_acc(gwih.data_mut(), &dpre, xd, l * b, 4 * h, cin);
        let mut gbias = Tensor::zeros(&[4 * h]);
        for row in dpre.chunks_exact(4 * h) {
            kernels::add_assign(gbias.data_mut(), row);
        }
        grads.push((dir.w_ih, gwih));
        grads.push((dir.w_hh, gwhh));
        grads.push((dir.b_ih, gbias.clone()));
        grads.push((dir.b_hh, gbias));
    }
    let x = node.x;
    tape.acc(x, gx);
    for (slot, grad) in grads {
        tape.acc(slot, grad);
    }
}

// ── conv2d / deconv2d ────────────────────────────────────────────────────

fn weight_matrix<S: Scalar>(wd: &[S], node: &Conv2dNode) -> Vec<S> {
    let (cin, cout, kh, kw) = (node.cin, node.cout, node.kh, node.kw);
    let mut m = vec![S::zero(); cin * kh * kw * cout];
    for ci in 0..cin {
        for a in 0..kh {
            for bb in 0..kw {
                for co in 0..cout {
                    let src = if node.transposed {
                        ((ci * cout + co) * kh + (kh - 1 - a)) * kw + (kw - 1 - bb)
                    } else {
                        ((co * cin + ci) * kh + a) * kw + bb
                    };
                    m[((ci * kh + a) * kw + bb) * cout + co] = wd[src];
                }
            }
        }
    }
    m
}

fn weight_matrix_scatter<S: Scalar>(gm: &[S], node: &Conv2dNode, gw: &mut [S]) {
    let (cin, cout, kh, kw) = (node.cin, node.cout, node.kh, node.kw);
    for ci in 0..cin {
        for a in 0..kh {
            for bb in 0..kw {
                for co in 0..cout {
                    let dst = if node.transposed {
                        ((ci * cout + co) * kh + (kh - 1 - a)) * kw + (kw - 1 - bb)
                    } else {
                        ((co * cin + ci) * kh + a) * kw + bb
                    };
                    gw[dst] += gm[((ci * kh + a) * kw + bb) * cout + co];
                }
            }
        }
    }
}

fn im2col<S: Scalar>(xd: &[S], t: usize, f: usize, cin: usize, kh: usize, kw: usize) -> Vec<S> {
    let (ph, pw) = (kh / 2, kw / 2);
    let ckk = cin * kh * kw;
    let mut col = vec![S::zero(); t * f * ckk];
    for tt in 0..t {
        for ff in 0..f {
            let row = &mut col[(tt * f + ff) * ckk..(tt * f + ff + 1) * ckk];
            for ci in 0..cin {
                for a in 0..kh {
                    let st = tt as isize + a as isize - ph as isize;
                    if st < 0 || st as usize >= t {
                        continue;
                    }
                    for bb in 0..kw {
                        let sf = ff as isize + bb as isize - pw as isize;
                        if sf < 0 || sf as usize >= f {
                            continue;
                        }
                        row[(ci * kh + a) * kw + bb] = xd[(st as usize * f + sf as usize) * cin + ci];
                    }
                }
            }
        }
    }
    col
}

fn col2im_acc<S: Scalar>(dcol: &[S], t: usize, f: usize, cin: usize, kh: usize, kw: usize, dx: &mut [S]) {
    let (ph, pw) = (kh / 2, kw / 2);
    let ckk = cin * kh * kw;
    for tt in 0..t {
        for ff in 0..f {
            let row = &dcol[(tt * f + ff) * ckk..(tt * f + ff + 1) * ckk];
            for ci in 0..cin {
                for a in 0..kh {
                    let st = tt as isize + a as isize - ph as isize;
                    if st < 0 || st as usize >= t {
                        continue;
                    }
                    for bb in 0..kw {
                        let sf = ff as isize + bb as isize - pw as isize;
                        if sf < 0 || sf as usize >= f {
                            continue;
                        }
                        dx[(st as usize * f + sf as usize) * cin + ci] += row[(ci * kh + a) * kw + bb];
                    }
                }
            }
        }
    }
}

fn conv2d_forward<S: Scalar>(tape: &Tape<S>, node: &Conv2dNode) -> Result<Tensor<S>> {
    let (t, f, cin, cout, kh, kw) = (node.t, node.f, node.cin, node.cout, node.kh, node.kw);
    let xd = tape.val(node.x).data();
    let wm = weight_matrix(tape.val(node.w).data(), node);
    let mut out = vec![S::zero(); t * f * cout];
    if kh == 1 && kw == 1 {
        kernels::matmul_acc(&mut out, xd, &wm, t * f, cin, cout);
    } else {
        let col = im2col(xd, t, f, cin, kh, kw);
        kernels::matmul_acc(&mut out, &col, &wm, t * f, cin * kh * kw, cout);
    }
    let bd = tape.val(node.b).data();
    for row in out.chunks_exact_mut(cout) {
        kernels::add_assign(row, bd);
    }
    Tensor::from_vec(&[t, f, cout], out)
}

pub(crate) fn conv2d_backward<S: Scalar>(tape: &mut Tape<S>, node: &Conv2dNode, out: u32) {
    let (t, f, cin, cout, kh, kw) = (node.t, node.f, node.cin, node.cout, node.kh, node.kw);
    let ckk = cin * kh * kw;
    let g = tape.grad_out(out);
    let gd = g.data();

    let mut gb = Tensor::zeros(&[cout]);
    for row in gd.chunks_exact(cout) {
        kernels::add_assign(gb.data_mut(), row);
    }

    let xd = tape.val(node.x).data();
    let wm = weight_matrix(tape.val(node.w).data(), node);

    let mut gw = Tensor::zeros(tape.val(node.w).shape());
    let mut gx = Tensor::zeros(&[t, f, cin]);
    {
        let mut gwm = vec![S::zero(); ckk * cout];
        if kh == 1 && kw == 1 {
            kernels::matmul_atb_acc(&mut gwm, xd, gd, t * f, cin, cout);
            if tape.needs(node.x) {
                kernels::matmul_abt_acc(gx.data_mut(), gd, &wm, t * f, cout, cin);
            }
        } else {
            let col = im2col(xd, t, f, cin, kh, kw);
            kernels::matmul_atb_acc(&mut gwm, &col, gd, t * f, ckk, cout);
            if tape.needs(node.x) {
                let mut dcol = vec![S::zero(); t * f * ckk];
                kernels::matmul_abt_acc(&mut dcol, gd, &wm, t * f, cout, ckk);
                col2im_acc(&dcol, t, f, cin, kh, kw, gx.data_mut());
            }
        }
        weight_matrix_scatter(&gwm, node, gw.data_mut());
    }
    let (x, w, b) = (node.x, node.w, node.b);
    tape.acc(x, gx);
    tape.acc(w, gw);
    tape.acc(b, gb);
}

// ── layer norm ───────────────────────────────────────────────────────────

fn layer_norm_forward<S: Scalar>(tape: &Tape<S>, node: &mut LayerNormNode<S>) -> Result<Tensor<S>> {
    let xv = tape.val(node.x);
    let (groups, gsize) = (node.groups, node.gsize);
    let gdim = tape.val(node.gamma).numel();
    let gam = tape.val(node.gamma).data();
    let bet = tape.val(node.beta).data();
    let eps = S::from_f64(NORM_EPS);
    let inv_n = S::one() / S::from_f64(gsize as f64);
    let mut out = vec![S::zero(); xv.numel()];
    let xd = xv.data();
    for gi in 0..groups {
        let xs = &xd[gi * gsize..(gi + 1) * gsize];
        let mu = kernels::sum(xs) * inv_n;
        let mut var = S::zero();
        for &v in xs {
            let d = v - mu;
            var = d.mul_add(d, var);
        }
        var = var * inv_n;
        let inv_std = S::one() / (var + eps).sqrt();
        node.mu[gi] = mu;
        node.inv_std[gi] = inv_std;
        let os = &mut out[gi * gsize..(gi + 1) * gsize];
        for (k, (o, &v)) in os.iter_mut().zip(xs).enumerate() {
            let a = k % gdim;
            *o = (v - mu) * inv_std * gam[a] + bet[a];
        }
    }
    Tensor::from_vec(xv.shape(), out)
}

pub(crate) fn layer_norm_backward<S: Scalar>(tape: &mut Tape<S>, node: &LayerNormNode<S>, out: u32) {
    let g = tape.grad_out(out);
    let gd = g.data();
    let (groups, gsize) = (node.groups, node.gsize);
    let gdim = tape.val(node.gamma).numel();
    let inv_n = S::one() / S::from_f64(gsize as f64);

    let mut ggamma = Tensor::zeros(tape.val(node.gamma).shape());
    let mut gbeta = Tensor::zeros(tape.val(node.beta).shape());
    let mut gx = Tensor::zeros(tape.val(node.x).shape());
    {
        let xd = tape.val(node.x).data();
        let gam = tape.val(node.gamma).data();
        let ggd = ggamma.data_mut();
        let gbd = gbeta.data_mut();
        let gxd = gx.data_mut();
        for gi in 0..groups {
            let xs = &xd[gi * gsize..(gi + 1) * gsize];
            let gs = &gd[gi * gsize..(gi + 1) * gsize];
            let (mu, inv_std) = (node.mu[gi], node.inv_std[gi]);
            let mut mean_gh = S::zero();
            let mut mean_ghx = S::zero();
            for (k, (&gv, &xv)) in gs.iter().zip(xs).enumerate() {
                let a = k % gdim;
                let xhat = (xv - mu) * inv_std;
                let gh = gv * gam[a];
                ggd[a] = gv.mul_add(xhat, ggd[a]);
                gbd[a] += gv;
                mean_gh += gh;
                mean_ghx = gh.mul_add(xhat, mean_ghx);
            }
            mean_gh = mean_gh * inv_n;
            mean_ghx = mean_ghx * inv_n;
            if tape.needs(node.x) {
                let outs = &mut gxd[gi * gsize..(gi + 1) * gsize];
                for (k, (o, (&gv, &xv))) in outs.iter_mut().zip(gs.iter().zip(xs)).enumerate() {
                    let a = k % gdim;
                    let xhat = (xv - mu) * inv_std;
                    *o = (gv * gam[a] - mean_gh - xhat * mean_ghx) * inv_std;
                }
            }
        }
    }
    let (x, gamma, beta) = (node.x, node.gamma, node.beta);
    tape.acc(x, gx);
    tape.acc(gamma, ggamma);
    tape.acc(beta, gbeta);
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Deterministic test-vector generator mirrored in the oracle scripts.
    fn val(n: usize) -> f64 {
        (((n * 37 + 11) % 19) as f64 - 9.0) / 10.0
    }

    fn seq(n0: usize, count: usize) -> Vec<f64> {
        (0..count).map(|k| val(n0 + k)).collect()
    }

    fn tensor(shape: &[usize], n0: usize) -> Tensor<f64> {
        Tensor::from_vec(shape, seq(n0, shape.iter().product())).unwrap()
    }

    #[test]
    fn unfold_hand_example() {
        // x = [1,2,3] (D=1), I=2, J=1: pad to [1,2,3,0], columns [[1,2],[2,3],[3,0]]
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_vec(&[1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.unfold_seq(x, 2, 1, SeqAxis::Freq).unwrap();
        assert_eq!(tape.value(y).unwrap().shape(), &[3, 1, 2]);
        assert_eq!(tape.value(y).unwrap().data(), &[1.0, 2.0, 2.0, 3.0, 3.0, 0.0]);
    }

    #[test]
    fn unfold_identity_for_i1_j1() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(tensor(&[2, 3, 2], 0));
        let y = tape.unfold_seq(x, 1, 1, SeqAxis::Freq).unwrap();
        // [T,F,C] -> [F,T,C] pure transpose
        assert_eq!(tape.value(y).unwrap().shape(), &[3, 2, 2]);
        for t in 0..2 {
            for f in 0..3 {
                for c in 0..2 {
                    assert_eq!(
                        tape.value(y).unwrap().data()[(f * 2 + t) * 2 + c],
                        tape.value(x).unwrap().data()[(t * 3 + f) * 2 + c]
                    );
                }
            }
        }
    }

    #[test]
    fn unfold_shape_matches_f_over_j() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[1, 129, 2]));
        let y = tape.unfold_seq(x, 8, 1, SeqAxis::Freq).unwrap();
        assert_eq!(tape.value(y).unwrap().shape(), &[129, 1, 16]);
        let x2 = tape.input(Tensor::zeros(&[1, 129, 2]));
        let y2 = tape.unfold_seq(x2, 8, 2, SeqAxis::Freq).unwrap();
        assert_eq!(tape.value(y2).unwrap().shape(), &[65, 1, 16]);
    }

    #[test]
    fn unfold_rejects_bad_strides_and_empty_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[1, 4, 1]));
        assert!(tape.unfold_seq(x, 1, 2, SeqAxis::Freq).is_err());
        assert!(tape.unfold_seq(x, 2, 0, SeqAxis::Freq).is_err());
        let empty = tape.input(Tensor::zeros(&[1, 0, 1]));
        assert!(tape.unfold_seq(empty, 2, 1, SeqAxis::Freq).is_err());
    }

    #[test]
    fn deconv1d_matches_reference() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(tensor(&[3, 1, 2], 5));
        let w = tape.input(tensor(&[2, 1, 2], 110));
        let b = tape.input(tensor(&[1], 130));
        let y = tape.deconv1d_seq(x, w, b, 2, 1, SeqAxis::Freq, 3).unwrap();
        let want = [0.15999999999999998, -0.31000000000000005, -0.6699999999999999];
        assert_eq!(tape.value(y).unwrap().shape(), &[1, 3, 1]);
        for (got, want) in tape.value(y).unwrap().data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn deconv1d_of_unfold_reconstructs_interior_columns() {
        // one-hot kernel at window position w0 = 1: columns >= w0 come back exactly
        let (t, f, c, i) = (2usize, 6usize, 2usize, 3usize);
        let w0 = 1usize;
        let mut tape = Tape::<f64>::new();
        let x = tape.input(tensor(&[t, f, c], 3));
        let u = tape.unfold_seq(x, i, 1, SeqAxis::Freq).unwrap();
        let mut wdata = vec![0.0; (i * c) * c * i];
        for cc in 0..c {
            wdata[((cc * i + w0) * c + cc) * i + w0] = 1.0;
        }
        let w = tape.input(Tensor::from_vec(&[i * c, c, i], wdata).unwrap());
        let b = tape.input(Tensor::zeros(&[c]));
        let y = tape.deconv1d_seq(u, w, b, i, 1, SeqAxis::Freq, f).unwrap();
        let (xv, yv) = (tape.value(x).unwrap().data(), tape.value(y).unwrap().data());
        for tt in 0..t {
            for ff in 0..f {
                for cc in 0..c {
                    let want = if ff >= w0 { xv[(tt * f + ff) * c + cc] } else { 0.0 };
                    assert_eq!(yv[(tt * f + ff) * c + cc], want, "t={tt} f={ff} c={cc}");
                }
            }
        }
    }

    fn lstm_test_weights(tape: &mut Tape<f64>) -> BlstmWeightIds {
        BlstmWeightIds {
            w_ih: tape.input(Tensor::from_vec(&[4, 1], vec![0.5, -0.3, 0.8, 0.2]).unwrap()),
            w_hh: tape.input(Tensor::from_vec(&[4, 1], vec![0.1, 0.4, -0.5, 0.3]).unwrap()),
            b_ih: tape.input(Tensor::from_vec(&[4], vec![0.05, 1.0, -0.1, 0.0]).unwrap()),
            b_hh: tape.input(Tensor::from_vec(&[4], vec![0.02, -0.01, 0.03, 0.05]).unwrap()),
        }
    }

    #[test]
    fn blstm_matches_hand_unrolled_oracle() {
        // gate-by-gate unrolled reference for x = [1, 2], H = 1 (both
        // directions share weights; the backward half sees the sequence
        // reversed, so its state at t=0 comes from processing x=2 first).
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_vec(&[2, 1, 1], vec![1.0, 2.0]).unwrap());
        let fwd = lstm_test_weights(&mut tape);
        let bwd = lstm_test_weights(&mut tape);
        let y = tape.blstm(x, &fwd, &bwd).unwrap();
        let v = tape.value(y).unwrap();
        assert_eq!(v.shape(), &[2, 1, 2]);
        let want = [
            0.21263136883131026, // fwd @ t=0
            0.38965922574205963, // bwd @ t=0
            0.4517894728948678,  // fwd @ t=1
            0.3603699971397619,  // bwd @ t=1
        ];
        for (got, want) in v.data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-15, "got {got}, want {want}");
        }
    }

    #[test]
    fn blstm_time_reversal_swaps_directions() {
        let (l, b, cin, h) = (5usize, 2usize, 3usize, 4usize);
        let mut tape = Tape::<f64>::new();
        let mk = |tape: &mut Tape<f64>, n0: usize| BlstmWeightIds {
            w_ih: tape.input(tensor(&[4 * h, cin], n0)),
            w_hh: tape.input(tensor(&[4 * h, h], n0 + 201)),
            b_ih: tape.input(tensor(&[4 * h], n0 + 402)),
            b_hh: tape.input(tensor(&[4 * h], n0 + 503)),
        };
        let xv = tensor(&[l, b, cin], 17);
        let mut rev_data = vec![0.0; l * b * cin];
        for t in 0..l {
            rev_data[t * b * cin..(t + 1) * b * cin]
                .copy_from_slice(&xv.data()[(l - 1 - t) * b * cin..(l - t) * b * cin]);
        }
        let x = tape.input(xv);
        let xr = tape.input(Tensor::from_vec(&[l, b, cin], rev_data).unwrap());
        let fwd = mk(&mut tape, 11);
        let bwd = mk(&mut tape, 11);
        let fwd2 = mk(&mut tape, 11);
        let bwd2 = mk(&mut tape, 11);
        let y = tape.blstm(x, &fwd, &bwd).unwrap();
        let yr = tape.blstm(xr, &fwd2, &bwd2).unwrap();
        let (yv, yrv) = (tape.value(y).unwrap().data(), tape.value(yr).unwrap().data());
        for t in 0..l {
            for bb in 0..b {
                for u in 0..h {
                    let fwd_orig = yv[(t * b + bb) * 2 * h + u];
                    let bwd_rev = yrv[((l - 1 - t) * b + bb) * 2 * h + h + u];
                    assert!((fwd_orig - bwd_rev).abs() < 1e-14);
                    let bwd_orig = yv[(t * b + bb) * 2 * h + h + u];
                    let fwd_rev = yrv[((l - 1 - t) * b + bb) * 2 * h + u];
                    assert!((bwd_orig - fwd_rev).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn blstm_rejects_empty_sequence() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[0, 1, 1]));
        let fwd = lstm_test_weights(&mut tape);
        let bwd = lstm_test_weights(&mut tape);
        assert!(tape.blstm(x, &fwd, &bwd).is_err());
    }

    #[test]
    fn conv2d_matches_reference() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(tensor(&[2, 3, 2], 0));
        let w = tape.input(tensor(&[2, 2, 3, 3], 100));
        let b = tape.input(tensor(&[2], 400));
        let y = tape.conv2d(x, w, b).unwrap();
        let want = [
            -0.8, -0.34, -0.6900000000000001, -0.06999999999999997, -0.14000000000000007, 0.92,
            0.4999999999999998, 0.19999999999999987, 0.7100000000000003, 0.19, 0.30000000000000004,
            -0.15999999999999998,
        ];
        assert_eq!(tape.value(y).unwrap().shape(), &[2, 3, 2]);
        for (got, want) in tape.value(y).unwrap().data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-14, "got {got}, want {want}");
        }
    }

    #[test]
    fn deconv2d_matches_reference() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(tensor(&[2, 3, 2], 0));
        let w = tape.input(tensor(&[2, 2, 3, 3], 100));
        let b = tape.input(tensor(&[2], 400));
        let y = tape.deconv2d(x, w, b).unwrap();
        let want = [
            0.5800000000000001, -1.52, 1.47, -2.83, 1.6600000000000001, -2.04, 1.56, -0.92,
            3.3000000000000003, -1.57, 2.17, -0.96,
        ];
        for (got, want) in tape.value(y).unwrap().data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-14, "got {got}, want {want}");
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[2, 3, 2]));
        let w = tape.input(Tensor::zeros(&[2, 3, 3, 3])); // expects 3 input channels
        let b = tape.input(Tensor::zeros(&[2]));
        assert!(tape.conv2d(x, w, b).is_err());
    }

    #[test]
    fn chan_ln_matches_reference() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(tensor(&[2, 1, 3], 7));
        let g = tape.input(tensor(&[3], 50));
        let b = tape.input(tensor(&[3], 60));
        let y = tape.layer_norm(x, g, b, NormMode::LastOne).unwrap();
        let want = [
            1.0014446103438506, -0.2, -1.1566791413785504, -0.6811324457368998, -0.813417581611172,
            0.6887322861495864,
        ];
        for (got, want) in tape.value(y).unwrap().data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-14, "got {got}, want {want}");
        }
    }

    #[test]
    fn cf_ln_matches_reference() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(tensor(&[2, 2, 2], 20));
        let g = tape.input(tensor(&[2, 2], 70));
        let b = tape.input(tensor(&[2, 2], 80));
        let y = tape.layer_norm(x, g, b, NormMode::LastTwo).unwrap();
        let want = [
            0.8728835615716404, 0.0129243721250617, -0.6682208903929101, -1.1705522259822752,
            0.8728835615716402, 0.012924372125061367, -0.6682208903929103, -1.1705522259822754,
        ];
        for (got, want) in tape.value(y).unwrap().data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-14, "got {got}, want {want}");
        }
    }

    #[test]
    fn g_ln_matches_reference() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(tensor(&[2, 2, 2], 33));
        let g = tape.input(tensor(&[2], 90));
        let b = tape.input(tensor(&[2], 95));
        let y = tape.layer_norm(x, g, b, NormMode::All).unwrap();
        let want = [
            1.2691658416864695, 0.7545913316447774, 0.6582139321513443, 0.2309182663289556,
            0.047262022616218674, -0.2927547989868663, -0.5636898869189069, -0.8164278643026883,
        ];
        for (got, want) in tape.value(y).unwrap().data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-14, "got {got}, want {want}");
        }
    }

    #[test]
    fn layer_norm_normalizes_per_group() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(tensor(&[3, 1, 8], 2));
        let g = tape.input(Tensor::filled(&[8], 1.0));
        let b = tape.input(Tensor::zeros(&[8]));
        let y = tape.layer_norm(x, g, b, NormMode::LastOne).unwrap();
        for gi in 0..3 {
            let row = &tape.value(y).unwrap().data()[gi * 8..(gi + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_rejects_zero_size_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[2, 0]));
        let g = tape.input(Tensor::zeros(&[0]));
        let b = tape.input(Tensor::zeros(&[0]));
        assert!(tape.layer_norm(x, g, b, NormMode::LastOne).is_err());
    }
}
