//! Reverse-mode differentiation over a linear tape of fused vector ops.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep visits
//! every consumer before its inputs. Parameters are borrowed, never copied;
//! their gradients are accumulated into dense buffers shaped like the
//! parameter tensors.

use crate::error::{Error, Result};
use crate::scalar::{dot, softmax, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Const,
    Param(usize),
    ParamRow {
        pid: usize,
        row: usize,
    },
    MatVec {
        w: Var,
        x: Var,
    },
    Add(Var, Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Softmax(Var),
    Mask {
        x: Var,
        mask: Vec<T>,
    },
    Gru {
        x: Var,
        h: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
        // r, z, n and the recurrent candidate pre-activation W_hn h + b_hn
        cache: Vec<T>,
    },
    StackRows(Vec<Var>),
    MatMulT {
        x: Var,
        w: Var,
    },
    AttnScores {
        ws: Var,
        um: Var,
        va: Var,
        act: Vec<T>,
    },
    VecMat {
        alpha: Var,
        m: Var,
    },
    LightConv {
        x: Var,
        taps: Var,
        stride: usize,
        pad_left: usize,
    },
    CosDist {
        u: Var,
        target: Vec<T>,
        eps: T,
    },
    NegLogPick {
        p: Var,
        idx: usize,
        weight: T,
        floor: T,
    },
    WeightedSum {
        xs: Vec<Var>,
        w: Vec<T>,
    },
    Axpy {
        a: Var,
        b: Var,
        alpha: T,
    },
}

struct Node<T> {
    op: Op<T>,
    rows: usize,
    cols: usize,
    value: Vec<T>,
}

pub struct Tape<'p, T> {
    params: &'p [Tensor<T>],
    nodes: Vec<Node<T>>,
}

/// Source row of output position `o`, tap `j` under replicate padding.
pub(crate) fn conv_source(o: usize, j: usize, stride: usize, pad_left: usize, len: usize) -> usize {
    let pos = (o * stride + j) as isize - pad_left as isize;
    pos.clamp(0, len as isize - 1) as usize
}

/// `1 - cos(u, v)` with `eps` added to each norm.
pub fn cosine_distance<T: Scalar>(u: &[T], v: &[T], eps: T) -> T {
    let a = dot(u, u).sqrt() + eps;
    let b = dot(v, v).sqrt() + eps;
    T::one() - dot(u, v) / (a * b)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p [Tensor<T>]) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(1024),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(pid) => &self.params[pid].data,
            _ => &node.value,
        }
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    fn push(&mut self, op: Op<T>, rows: usize, cols: usize, value: Vec<T>) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<T>) -> Var {
        assert_eq!(value.len(), rows * cols, "constant shape");
        self.push(Op::Const, rows, cols, value)
    }

    pub fn vector(&mut self, value: Vec<T>) -> Var {
        let n = value.len();
        self.constant(1, n, value)
    }

    pub fn param(&mut self, pid: usize) -> Var {
        let t = &self.params[pid];
        let (rows, cols) = (t.rows(), t.cols());
        self.push(Op::Param(pid), rows, cols, Vec::new())
    }

    pub fn param_row(&mut self, pid: usize, row: usize) -> Var {
        let value = self.params[pid].row(row).to_vec();
        let n = value.len();
        self.push(Op::ParamRow { pid, row }, 1, n, value)
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (r, c) = self.shape(w);
        assert_eq!(self.value(x).len(), c, "matvec inner dimension");
        let wv = self.value(w);
        let xv = self.value(x);
        let out: Vec<T> = (0..r).map(|i| dot(&wv[i * c..(i + 1) * c], xv)).collect();
        self.push(Op::MatVec { w, x }, 1, r, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.value(a).len(), self.value(b).len(), "add shape");
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(Op::Add(a, b), r, c, out)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh(x), r, c, out)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let mut out = Vec::new();
        for &x in xs {
            out.extend_from_slice(self.value(x));
        }
        let n = out.len();
        self.push(Op::Concat(xs.to_vec()), 1, n, out)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = softmax(self.value(x));
        self.push(Op::Softmax(x), r, c, out)
    }

    /// Elementwise product with a constant mask (inverted dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<T>) -> Var {
        let (r, c) = self.shape(x);
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        self.push(Op::Mask { x, mask }, r, c, out)
    }

    /// Gated recurrent unit step, gate order (reset, update, candidate).
    pub fn gru(&mut self, x: Var, h: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var) -> Var {
        let hid = self.value(h).len();
        let xin = self.value(x).len();
        let (wr, wc) = self.shape(w_ih);
        assert_eq!((wr, wc), (3 * hid, xin), "gru input weight shape");
        let gi = {
            let w = self.value(w_ih);
            let b = self.value(b_ih);
            let xv = self.value(x);
            (0..3 * hid)
                .map(|i| dot(&w[i * xin..(i + 1) * xin], xv) + b[i])
                .collect::<Vec<T>>()
        };
        let gh = {
            let w = self.value(w_hh);
            let b = self.value(b_hh);
            let hv = self.value(h);
            (0..3 * hid)
                .map(|i| dot(&w[i * hid..(i + 1) * hid], hv) + b[i])
                .collect::<Vec<T>>()
        };
        let hv = self.value(h);
        let mut cache = vec![T::zero(); 4 * hid];
        let mut out = vec![T::zero(); hid];
        for k in 0..hid {
            let r = sigmoid(gi[k] + gh[k]);
            let z = sigmoid(gi[hid + k] + gh[hid + k]);
            let hn = gh[2 * hid + k];
            let n = (gi[2 * hid + k] + r * hn).tanh();
            out[k] = (T::one() - z) * n + z * hv[k];
            cache[k] = r;
            cache[hid + k] = z;
            cache[2 * hid + k] = n;
            cache[3 * hid + k] = hn;
        }
        self.push(
            Op::Gru {
                x,
                h,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                cache,
            },
            1,
            hid,
            out,
        )
    }

    pub fn stack_rows(&mut self, xs: &[Var]) -> Var {
        let cols = self.value(xs[0]).len();
        let mut out = Vec::with_capacity(cols * xs.len());
        for &x in xs {
            assert_eq!(self.value(x).len(), cols, "stack_rows width");
            out.extend_from_slice(self.value(x));
        }
        self.push(Op::StackRows(xs.to_vec()), xs.len(), cols, out)
    }

    /// `x w^T` for `x: l×c`, `w: a×c`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let (l, c) = self.shape(x);
        let (a, wc) = self.shape(w);
        assert_eq!(c, wc, "matmul_t inner dimension");
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = Vec::with_capacity(l * a);
        for i in 0..l {
            let xr = &xv[i * c..(i + 1) * c];
            for k in 0..a {
                out.push(dot(xr, &wv[k * c..(k + 1) * c]));
            }
        }
        self.push(Op::MatMulT { x, w }, l, a, out)
    }

    /// Additive attention energies `e_i = va · tanh(ws + um_i)`.
    pub fn attn_scores(&mut self, ws: Var, um: Var, va: Var) -> Var {
        let (l, a) = self.shape(um);
        let wsv = self.value(ws);
        let umv = self.value(um);
        let vav = self.value(va);
        let mut act = Vec::with_capacity(l * a);
        let mut out = Vec::with_capacity(l);
        for i in 0..l {
            let mut e = T::zero();
            for k in 0..a {
                let t = (wsv[k] + umv[i * a + k]).tanh();
                act.push(t);
                e += vav[k] * t;
            }
            out.push(e);
        }
        self.push(Op::AttnScores { ws, um, va, act }, 1, l, out)
    }

    /// `alpha^T m` for `alpha: l`, `m: l×h`.
    pub fn vecmat(&mut self, alpha: Var, m: Var) -> Var {
        let (l, h) = self.shape(m);
        let av = self.value(alpha);
        assert_eq!(av.len(), l, "vecmat length");
        let mv = self.value(m);
        let mut out = vec![T::zero(); h];
        for i in 0..l {
            let a = av[i];
            for (o, &x) in out.iter_mut().zip(&mv[i * h..(i + 1) * h]) {
                *o += a * x;
            }
        }
        self.push(Op::VecMat { alpha, m }, 1, h, out)
    }

    /// Depth-wise convolution of the rows of `x` with one kernel shared over
    /// all channels. `taps` must already be normalised. Borders replicate the
    /// edge rows so every output is a convex combination of inputs.
    pub fn light_conv(&mut self, x: Var, taps: Var, stride: usize, pad_left: usize) -> Var {
        let (l, h) = self.shape(x);
        let k = l.div_ceil(stride);
        let xv = self.value(x);
        let tv = self.value(taps);
        let mut out = vec![T::zero(); k * h];
        for o in 0..k {
            let dst = &mut out[o * h..(o + 1) * h];
            for (j, &w) in tv.iter().enumerate() {
                let src = conv_source(o, j, stride, pad_left, l);
                for (d, &s) in dst.iter_mut().zip(&xv[src * h..(src + 1) * h]) {
                    *d += w * s;
                }
            }
        }
        self.push(
            Op::LightConv {
                x,
                taps,
                stride,
                pad_left,
            },
            k,
            h,
            out,
        )
    }

    pub fn cos_dist(&mut self, u: Var, target: Vec<T>, eps: T) -> Var {
        let out = cosine_distance(self.value(u), &target, eps);
        self.push(Op::CosDist { u, target, eps }, 1, 1, vec![out])
    }

    /// `-weight * ln(max(p[idx], floor))`.
    pub fn neg_log_pick(&mut self, p: Var, idx: usize, weight: T, floor: T) -> Var {
        let v = self.value(p)[idx].max(floor);
        self.push(
            Op::NegLogPick {
                p,
                idx,
                weight,
                floor,
            },
            1,
            1,
            vec![-weight * v.ln()],
        )
    }

    pub fn weighted_sum(&mut self, xs: &[Var], w: Vec<T>) -> Var {
        assert_eq!(xs.len(), w.len(), "weighted_sum arity");
        let mut acc = T::zero();
        for (&x, &wi) in xs.iter().zip(&w) {
            acc += wi * self.scalar(x);
        }
        self.push(Op::WeightedSum { xs: xs.to_vec(), w }, 1, 1, vec![acc])
    }

    /// `a + alpha * b`.
    pub fn axpy(&mut self, a: Var, b: Var, alpha: T) -> Var {
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + alpha * y)
            .collect();
        self.push(Op::Axpy { a, b, alpha }, r, c, out)
    }

    /// Back-propagates from the scalar `root`, returning one gradient tensor
    /// per parameter (zeros where the parameter was not used).
    pub fn backward(&self, root: Var) -> Vec<Tensor<T>> {
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        let mut pgrads: Vec<Tensor<T>> =
            self.params.iter().map(|p| Tensor::zeros(&p.dims)).collect();
        grads[root.0] = Some(vec![T::one(); self.value(root).len()]);

        fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(pid) => add_into(&mut pgrads[*pid].data, &g),
                Op::ParamRow { pid, row } => add_into(pgrads[*pid].row_mut(*row), &g),
                Op::MatVec { w, x } => {
                    let (r, c) = self.shape(*w);
                    let wv = self.value(*w);
                    let xv = self.value(*x);
                    {
                        let gw = acc(&mut grads, *w, r * c);
                        for i in 0..r {
                            let gi = g[i];
                            if gi != T::zero() {
                                for (d, &xj) in gw[i * c..(i + 1) * c].iter_mut().zip(xv) {
                                    *d += gi * xj;
                                }
                            }
                        }
                    }
                    let gx = acc(&mut grads, *x, c);
                    for i in 0..r {
                        let gi = g[i];
                        if gi != T::zero() {
                            for (d, &wij) in gx.iter_mut().zip(&wv[i * c..(i + 1) * c]) {
                                *d += gi * wij;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    add_into(acc(&mut grads, *b, g.len()), &g);
                }
                Op::Tanh(x) => {
                    let gx = acc(&mut grads, *x, g.len());
                    for ((d, &gi), &y) in gx.iter_mut().zip(&g).zip(&node.value) {
                        *d += gi * (T::one() - y * y);
                    }
                }
                Op::Concat(xs) => {
                    let mut off = 0;
                    for &x in xs {
                        let n = self.value(x).len();
                        add_into(acc(&mut grads, x, n), &g[off..off + n]);
                        off += n;
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let gy = dot(&g, y);
                    let gx = acc(&mut grads, *x, g.len());
                    for ((d, &gi), &yi) in gx.iter_mut().zip(&g).zip(y) {
                        *d += yi * (gi - gy);
                    }
                }
                Op::Mask { x, mask } => {
                    let gx = acc(&mut grads, *x, g.len());
                    for ((d, &gi), &m) in gx.iter_mut().zip(&g).zip(mask) {
                        *d += gi * m;
                    }
                }
                Op::Gru {
                    x,
                    h,
                    w_ih,
                    w_hh,
                    b_ih,
                    b_hh,
                    cache,
                } => {
                    let hid = g.len();
                    let xv = self.value(*x);
                    let hv = self.value(*h);
                    let xin = xv.len();
                    let (r, z, n, hn) = (
                        &cache[..hid],
                        &cache[hid..2 * hid],
                        &cache[2 * hid..3 * hid],
                        &cache[3 * hid..],
                    );
                    let mut dgi = vec![T::zero(); 3 * hid];
                    let mut dgh = vec![T::zero(); 3 * hid];
                    let mut dh = vec![T::zero(); hid];
                    for k in 0..hid {
                        let dn = g[k] * (T::one() - z[k]);
                        let dz = g[k] * (hv[k] - n[k]);
                        dh[k] = g[k] * z[k];
                        let dn_pre = dn * (T::one() - n[k] * n[k]);
                        let dr = dn_pre * hn[k];
                        let dr_pre = dr * r[k] * (T::one() - r[k]);
                        let dz_pre = dz * z[k] * (T::one() - z[k]);
                        dgi[k] = dr_pre;
                        dgi[hid + k] = dz_pre;
                        dgi[2 * hid + k] = dn_pre;
                        dgh[k] = dr_pre;
                        dgh[hid + k] = dz_pre;
                        dgh[2 * hid + k] = dn_pre * r[k];
                    }
                    add_into(acc(&mut grads, *b_ih, 3 * hid), &dgi);
                    add_into(acc(&mut grads, *b_hh, 3 * hid), &dgh);
                    {
                        let gw = acc(&mut grads, *w_ih, 3 * hid * xin);
                        for i in 0..3 * hid {
                            for (d, &xj) in gw[i * xin..(i + 1) * xin].iter_mut().zip(xv) {
                                *d += dgi[i] * xj;
                            }
                        }
                    }
                    {
                        let gw = acc(&mut grads, *w_hh, 3 * hid * hid);
                        for i in 0..3 * hid {
                            for (d, &hj) in gw[i * hid..(i + 1) * hid].iter_mut().zip(hv) {
                                *d += dgh[i] * hj;
                            }
                        }
                    }
                    let wi = self.value(*w_ih);
                    let gx = acc(&mut grads, *x, xin);
                    for i in 0..3 * hid {
                        for (d, &w) in gx.iter_mut().zip(&wi[i * xin..(i + 1) * xin]) {
                            *d += dgi[i] * w;
                        }
                    }
                    let wh = self.value(*w_hh);
                    for i in 0..3 * hid {
                        for (d, &w) in dh.iter_mut().zip(&wh[i * hid..(i + 1) * hid]) {
                            *d += dgh[i] * w;
                        }
                    }
                    add_into(acc(&mut grads, *h, hid), &dh);
                }
                Op::StackRows(xs) => {
                    let c = node.cols;
                    for (i, &x) in xs.iter().enumerate() {
                        add_into(acc(&mut grads, x, c), &g[i * c..(i + 1) * c]);
                    }
                }
                Op::MatMulT { x, w } => {
                    let (l, c) = self.shape(*x);
                    let a = node.cols;
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    {
                        let gx = acc(&mut grads, *x, l * c);
                        for i in 0..l {
                            for k in 0..a {
                                let gik = g[i * a + k];
                                for (d, &wkj) in gx[i * c..(i + 1) * c]
                                    .iter_mut()
                                    .zip(&wv[k * c..(k + 1) * c])
                                {
                                    *d += gik * wkj;
                                }
                            }
                        }
                    }
                    let gw = acc(&mut grads, *w, a * c);
                    for i in 0..l {
                        for k in 0..a {
                            let gik = g[i * a + k];
                            for (d, &xij) in gw[k * c..(k + 1) * c]
                                .iter_mut()
                                .zip(&xv[i * c..(i + 1) * c])
                            {
                                *d += gik * xij;
                            }
                        }
                    }
                }
                Op::AttnScores { ws, um, va, act } => {
                    let (l, a) = self.shape(*um);
                    let vav = self.value(*va);
                    let mut dws = vec![T::zero(); a];
                    let mut dva = vec![T::zero(); a];
                    let mut dum = vec![T::zero(); l * a];
                    for i in 0..l {
                        for k in 0..a {
                            let t = act[i * a + k];
                            dva[k] += g[i] * t;
                            let dpre = g[i] * vav[k] * (T::one() - t * t);
                            dws[k] += dpre;
                            dum[i * a + k] = dpre;
                        }
                    }
                    add_into(acc(&mut grads, *ws, a), &dws);
                    add_into(acc(&mut grads, *va, a), &dva);
                    add_into(acc(&mut grads, *um, l * a), &dum);
                }
                Op::VecMat { alpha, m } => {
                    let (l, h) = self.shape(*m);
                    let av = self.value(*alpha);
                    let mv = self.value(*m);
                    {
                        let ga = acc(&mut grads, *alpha, l);
                        for i in 0..l {
                            ga[i] += dot(&g, &mv[i * h..(i + 1) * h]);
                        }
                    }
                    let gm = acc(&mut grads, *m, l * h);
                    for i in 0..l {
                        for (d, &gj) in gm[i * h..(i + 1) * h].iter_mut().zip(&g) {
                            *d += av[i] * gj;
                        }
                    }
                }
                Op::LightConv {
                    x,
                    taps,
                    stride,
                    pad_left,
                } => {
                    let (l, h) = self.shape(*x);
                    let k = node.rows;
                    let xv = self.value(*x);
                    let tv = self.value(*taps);
                    let mut dt = vec![T::zero(); tv.len()];
                    {
                        let gx = acc(&mut grads, *x, l * h);
                        for o in 0..k {
                            let go = &g[o * h..(o + 1) * h];
                            for (j, &w) in tv.iter().enumerate() {
                                let src = conv_source(o, j, *stride, *pad_left, l);
                                dt[j] += dot(go, &xv[src * h..(src + 1) * h]);
                                for (d, &gc) in gx[src * h..(src + 1) * h].iter_mut().zip(go) {
                                    *d += w * gc;
                                }
                            }
                        }
                    }
                    add_into(acc(&mut grads, *taps, dt.len()), &dt);
                }
                Op::CosDist { u, target, eps } => {
                    let uv = self.value(*u);
                    let nu = dot(uv, uv).sqrt();
                    let a = nu + *eps;
                    let b = dot(target, target).sqrt() + *eps;
                    let d = dot(uv, target);
                    let gu = acc(&mut grads, *u, uv.len());
                    for i in 0..uv.len() {
                        let radial = if nu > T::zero() {
                            uv[i] / nu
                        } else {
                            T::zero()
                        };
                        let dcos = target[i] / (a * b) - d / (a * a * b) * radial;
                        gu[i] -= g[0] * dcos;
                    }
                }
                Op::NegLogPick {
                    p,
                    idx,
                    weight,
                    floor,
                } => {
                    let pv = self.value(*p);
                    let n = pv.len();
                    let pi = pv[*idx];
                    let gp = acc(&mut grads, *p, n);
                    if pi > *floor {
                        gp[*idx] -= g[0] * *weight / pi;
                    }
                }
                Op::WeightedSum { xs, w } => {
                    for (&x, &wi) in xs.iter().zip(w) {
                        acc(&mut grads, x, 1)[0] += g[0] * wi;
                    }
                }
                Op::Axpy { a, b, alpha } => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    let gb = acc(&mut grads, *b, g.len());
                    for (d, &gi) in gb.iter_mut().zip(&g) {
                        *d += *alpha * gi;
                    }
                }
            }
        }
        pgrads
    }

    /// Fails with the array name when any gradient is non-finite.
    pub fn check_finite(grads: &[Tensor<T>], names: &[String]) -> Result<()> {
        for (g, name) in grads.iter().zip(names) {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check<F>(params: Vec<Tensor<f64>>, build: F)
    where
        F: Fn(&mut Tape<f64>) -> Var,
    {
        let tape_grads = {
            let mut tape = Tape::new(&params);
            let root = build(&mut tape);
            tape.backward(root)
        };
        let h = 1e-6;
        for (pid, p) in params.iter().enumerate() {
            for i in 0..p.len() {
                let mut plus = params.clone();
                plus[pid].data[i] += h;
                let mut minus = params.clone();
                minus[pid].data[i] -= h;
                let fp = {
                    let mut t = Tape::new(&plus);
                    let r = build(&mut t);
                    t.scalar(r)
                };
                let fm = {
                    let mut t = Tape::new(&minus);
                    let r = build(&mut t);
                    t.scalar(r)
                };
                let fd = (fp - fm) / (2.0 * h);
                let an = tape_grads[pid].data[i];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "param {pid}[{i}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn gru_and_softmax_gradients() {
        let params = vec![
            t(
                &[6, 3],
                &[
                    0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.1, -0.9, 0.2, 0.3, 0.4, -0.5, 0.6, 0.2,
                    0.8, -0.1, 0.3,
                ],
            ),
            t(
                &[6, 2],
                &[
                    0.2, -0.1, 0.4, 0.3, -0.3, 0.2, 0.1, 0.5, -0.2, 0.6, 0.3, -0.4,
                ],
            ),
            t(&[6], &[0.01, 0.02, -0.03, 0.04, 0.05, -0.06]),
            t(&[6], &[-0.01, 0.03, 0.02, -0.04, 0.01, 0.02]),
            t(&[3], &[0.5, -1.0, 0.25]),
        ];
        fd_check(params, |tape| {
            let x = tape.param(4);
            let h0 = tape.vector(vec![0.3, -0.2]);
            let (wi, wh, bi, bh) = (tape.param(0), tape.param(1), tape.param(2), tape.param(3));
            let h1 = tape.gru(x, h0, wi, wh, bi, bh);
            let h2 = tape.gru(x, h1, wi, wh, bi, bh);
            let p = tape.softmax(h2);
            tape.neg_log_pick(p, 1, 0.7, 1e-12)
        });
    }

    #[test]
    fn attention_conv_and_cosine_gradients() {
        let params = vec![
            t(
                &[4, 3],
                &[
                    0.1, 0.2, -0.3, 0.4, -0.5, 0.6, 0.7, 0.8, -0.9, 0.15, 0.25, 0.35,
                ],
            ),
            t(&[3, 3], &[0.2, -0.1, 0.3, 0.1, 0.4, -0.2, -0.3, 0.2, 0.1]),
            t(&[3], &[0.5, -0.4, 0.3]),
            t(&[2], &[0.3, -0.2]),
            t(&[3], &[0.1, 0.6, -0.2]),
        ];
        fd_check(params, |tape| {
            let m = tape.param(0);
            let taps_raw = tape.param(3);
            let taps = tape.softmax(taps_raw);
            let conv = tape.light_conv(m, taps, 2, 1);
            let u_a = tape.param(1);
            let um = tape.matmul_t(conv, u_a);
            let s = tape.param(4);
            let ws = tape.matvec(u_a, s);
            let va = tape.param(2);
            let e = tape.attn_scores(ws, um, va);
            let alpha = tape.softmax(e);
            let ctx = tape.vecmat(alpha, conv);
            let th = tape.tanh(ctx);
            let c1 = tape.cos_dist(th, vec![1.0, 0.5, -0.25], 1e-12);
            let c2 = tape.cos_dist(ctx, vec![-0.2, 0.1, 0.9], 1e-12);
            let ws2 = tape.weighted_sum(&[c1, c2], vec![0.3, 0.7]);
            tape.axpy(c1, ws2, 2.0)
        });
    }

    #[test]
    fn light_conv_preserves_constant_rows() {
        let params = vec![
            t(&[9, 2], &[1.5, -2.0].repeat(9)),
            t(&[4], &[0.3, -1.0, 2.0, 0.1]),
        ];
        let mut tape = Tape::new(&params);
        let x = tape.param(0);
        let raw = tape.param(1);
        let taps = tape.softmax(raw);
        let y = tape.light_conv(x, taps, 3, 2);
        assert_eq!(tape.shape(y), (3, 2));
        for row in tape.value(y).chunks(2) {
            assert!((row[0] - 1.5).abs() < 1e-12 && (row[1] + 2.0).abs() < 1e-12);
        }
    }
}
