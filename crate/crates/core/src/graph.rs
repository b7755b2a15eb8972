//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a single-use tape: forward calls append nodes and compute
//! values eagerly, [`Graph::backward`] walks the tape once in reverse. Nodes
//! only reference earlier nodes, so reverse insertion order is a valid
//! topological order.
//!
//! Gradients are exact derivatives of the recorded expression; every op's
//! backward rule is covered by finite-difference tests. Convolution and the
//! other plane-level kernels parallelize over disjoint output planes via
//! [`crate::exec`], which keeps results bit-identical across thread counts.

use crate::exec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BcastKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    PowScalar(NodeId, f64),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// (N,C,H,W) -> (N,C) mean over spatial positions.
    SpatialMean(NodeId),
    /// (N,C,H,W) combined with per-sample, per-channel (N,C) operand.
    Bcast { x: NodeId, s: NodeId, kind: BcastKind },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    ReflectPad { x: NodeId, pad: usize },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    Upsample2(NodeId),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    GatherCol { x: NodeId, idx: Vec<usize> },
    ConcatCols(Vec<NodeId>),
    /// (N,C,H,W) x (C) -> (N, H*W): per-position dot product over channels.
    ChanVecDot { x: NodeId, u: NodeId },
    /// (N,C,H,W) x (N, H*W) -> (N,C): weight-map-pooled channel descriptors.
    AttnPool { x: NodeId, m: NodeId },
    Dropout { x: NodeId, mask: Vec<f64> },
}

pub struct Graph {
    vals: Vec<Tensor>,
    ops: Vec<Op>,
    needs: Vec<bool>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { vals: Vec::new(), ops: Vec::new(), needs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.vals[id.0]
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.needs[id.0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs: bool) -> NodeId {
        self.vals.push(value);
        self.ops.push(op);
        self.needs.push(needs);
        NodeId(self.vals.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn needs_any(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.needs[id.0])
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.0].zip_map(&self.vals[b.0], |x, y| x + y);
        let needs = self.needs_any(&[a, b]);
        self.push(v, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.0].zip_map(&self.vals[b.0], |x, y| x - y);
        let needs = self.needs_any(&[a, b]);
        self.push(v, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.0].zip_map(&self.vals[b.0], |x, y| x * y);
        let needs = self.needs_any(&[a, b]);
        self.push(v, Op::Mul(a, b), needs)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.vals[a.0].map(|x| x + c);
        let needs = self.needs[a.0];
        self.push(v, Op::AddScalar(a), needs)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.vals[a.0].map(|x| x * c);
        let needs = self.needs[a.0];
        self.push(v, Op::MulScalar(a, c), needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.0].map(|x| x.max(0.0));
        let needs = self.needs[a.0];
        self.push(v, Op::Relu(a), needs)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.0].map(f64::exp);
        let needs = self.needs[a.0];
        self.push(v, Op::Exp(a), needs)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.0].map(f64::ln);
        let needs = self.needs[a.0];
        self.push(v, Op::Ln(a), needs)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.0].map(f64::sqrt);
        let needs = self.needs[a.0];
        self.push(v, Op::Sqrt(a), needs)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.0].map(f64::abs);
        let needs = self.needs[a.0];
        self.push(v, Op::Abs(a), needs)
    }

    pub fn pow_scalar(&mut self, a: NodeId, p: f64) -> NodeId {
        let v = self.vals[a.0].map(|x| x.powf(p));
        let needs = self.needs[a.0];
        self.push(v, Op::PowScalar(a, p), needs)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.vals[a.0].sum());
        let needs = self.needs[a.0];
        self.push(v, Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.vals[a.0].numel() as f64;
        let v = Tensor::scalar(self.vals[a.0].sum() / n);
        let needs = self.needs[a.0];
        self.push(v, Op::MeanAll(a), needs)
    }

    pub fn spatial_mean(&mut self, a: NodeId) -> NodeId {
        let (n, c, h, w) = self.vals[a.0].expect_nchw("spatial_mean").expect("nchw");
        let plane = h * w;
        let xd = self.vals[a.0].data();
        let mut out = Tensor::zeros(&[n, c]);
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let base = i * plane;
            *o = xd[base..base + plane].iter().sum::<f64>() / plane as f64;
        }
        let needs = self.needs[a.0];
        self.push(out, Op::SpatialMean(a), needs)
    }

    // ---- broadcast over (N,C) ----

    pub fn bcast(&mut self, x: NodeId, s: NodeId, kind: BcastKind) -> NodeId {
        let (n, c, h, w) = self.vals[x.0].expect_nchw("bcast").expect("nchw");
        assert_eq!(self.vals[s.0].shape(), &[n, c], "bcast operand must be (N,C)");
        let plane = h * w;
        let xd = self.vals[x.0].data();
        let sd = self.vals[s.0].data();
        let mut out = Tensor::zeros(&[n, c, h, w]);
        exec::for_each_chunk_mut(out.data_mut(), plane, |i, o| {
            let sv = sd[i];
            let xs = &xd[i * plane..(i + 1) * plane];
            match kind {
                BcastKind::Add => o.iter_mut().zip(xs).for_each(|(o, &x)| *o = x + sv),
                BcastKind::Sub => o.iter_mut().zip(xs).for_each(|(o, &x)| *o = x - sv),
                BcastKind::Mul => o.iter_mut().zip(xs).for_each(|(o, &x)| *o = x * sv),
                BcastKind::Div => o.iter_mut().zip(xs).for_each(|(o, &x)| *o = x / sv),
            }
        });
        let needs = self.needs_any(&[x, s]);
        self.push(out, Op::Bcast { x, s, kind }, needs)
    }

    // ---- spatial ops ----

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let out = conv2d_forward(
            &self.vals[x.0],
            &self.vals[w.0],
            b.map(|b| &self.vals[b.0]),
            stride,
            pad,
        );
        let mut ids = vec![x, w];
        if let Some(b) = b {
            ids.push(b);
        }
        let needs = self.needs_any(&ids);
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    pub fn reflect_pad(&mut self, x: NodeId, pad: usize) -> NodeId {
        let (n, c, h, w) = self.vals[x.0].expect_nchw("reflect_pad").expect("nchw");
        assert!(pad < h && pad < w, "reflect pad {pad} too large for {h}x{w}");
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let xd = self.vals[x.0].data();
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        exec::for_each_chunk_mut(out.data_mut(), ho * wo, |i, o| {
            let base = i * h * w;
            for oh in 0..ho {
                let ih = reflect_index(oh as isize - pad as isize, h);
                for ow in 0..wo {
                    let iw = reflect_index(ow as isize - pad as isize, w);
                    o[oh * wo + ow] = xd[base + ih * w + iw];
                }
            }
        });
        let needs = self.needs[x.0];
        self.push(out, Op::ReflectPad { x, pad }, needs)
    }

    pub fn max_pool(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> NodeId {
        let (n, c, h, w) = self.vals[x.0].expect_nchw("max_pool").expect("nchw");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let xd = self.vals[x.0].data();
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0usize; n * c * ho * wo];
        // plane-local argmax indices; plane p of the output maps to plane p of the input
        let plane_in = h * w;
        let plane_out = ho * wo;
        for p in 0..n * c {
            let xs = &xd[p * plane_in..(p + 1) * plane_in];
            let os = &mut out.data_mut()[p * plane_out..(p + 1) * plane_out];
            let am = &mut argmax[p * plane_out..(p + 1) * plane_out];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for r in 0..k {
                        let ih = (oh * stride + r) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for s in 0..k {
                            let iw = (ow * stride + s) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let idx = ih as usize * w + iw as usize;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_i = idx;
                            }
                        }
                    }
                    os[oh * wo + ow] = best;
                    am[oh * wo + ow] = best_i;
                }
            }
        }
        let needs = self.needs[x.0];
        self.push(out, Op::MaxPool { x, argmax }, needs)
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = self.vals[x.0].expect_nchw("upsample2").expect("nchw");
        let (ho, wo) = (2 * h, 2 * w);
        let xd = self.vals[x.0].data();
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        exec::for_each_chunk_mut(out.data_mut(), ho * wo, |i, o| {
            let xs = &xd[i * h * w..(i + 1) * h * w];
            for oh in 0..ho {
                let ih = oh / 2;
                for ow in 0..wo {
                    o[oh * wo + ow] = xs[ih * w + ow / 2];
                }
            }
        });
        let needs = self.needs[x.0];
        self.push(out, Op::Upsample2(x), needs)
    }

    // ---- dense ----

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xs = self.vals[x.0].shape();
        let ws = self.vals[w.0].shape();
        assert_eq!(xs.len(), 2, "linear input must be (N,K)");
        assert_eq!(ws.len(), 2, "linear weight must be (K,M)");
        assert_eq!(xs[1], ws[0], "linear: K mismatch {} vs {}", xs[1], ws[0]);
        let (n, k, m) = (xs[0], xs[1], ws[1]);
        let xd = self.vals[x.0].data();
        let wd = self.vals[w.0].data();
        let bd = b.map(|b| self.vals[b.0].data().to_vec());
        let mut out = Tensor::zeros(&[n, m]);
        exec::for_each_chunk_mut(out.data_mut(), m, |row, o| {
            if let Some(bd) = &bd {
                o.copy_from_slice(bd);
            }
            for kk in 0..k {
                let xv = xd[row * k + kk];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wd[kk * m..(kk + 1) * m];
                for (ov, &wv) in o.iter_mut().zip(wrow) {
                    *ov += xv * wv;
                }
            }
        });
        let mut ids = vec![x, w];
        if let Some(b) = b {
            ids.push(b);
        }
        let needs = self.needs_any(&ids);
        self.push(out, Op::Linear { x, w, b }, needs)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = softmax_rows_value(&self.vals[x.0]);
        let needs = self.needs[x.0];
        self.push(v, Op::SoftmaxRows(x), needs)
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xs = self.vals[x.0].shape();
        assert_eq!(xs.len(), 2);
        let (n, m) = (xs[0], xs[1]);
        let xd = self.vals[x.0].data();
        let mut out = Tensor::zeros(&[n, m]);
        for r in 0..n {
            let row = &xd[r * m..(r + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            for (o, &v) in out.data_mut()[r * m..(r + 1) * m].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let needs = self.needs[x.0];
        self.push(out, Op::LogSoftmaxRows(x), needs)
    }

    pub fn gather_col(&mut self, x: NodeId, idx: Vec<usize>) -> NodeId {
        let xs = self.vals[x.0].shape();
        assert_eq!(xs.len(), 2);
        let (n, m) = (xs[0], xs[1]);
        assert_eq!(idx.len(), n);
        let xd = self.vals[x.0].data();
        let data: Vec<f64> = idx.iter().enumerate().map(|(r, &c)| xd[r * m + c]).collect();
        let needs = self.needs[x.0];
        self.push(Tensor::from_vec(&[n], data), Op::GatherCol { x, idx }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.vals[parts[0].0].shape()[0];
        let total: usize = parts.iter().map(|p| self.vals[p.0].shape()[1]).sum();
        let mut out = Tensor::zeros(&[n, total]);
        let mut col = 0usize;
        for p in parts {
            let ps = self.vals[p.0].shape();
            assert_eq!(ps[0], n, "concat_cols: row mismatch");
            let pc = ps[1];
            let pd = self.vals[p.0].data();
            for r in 0..n {
                out.data_mut()[r * total + col..r * total + col + pc]
                    .copy_from_slice(&pd[r * pc..(r + 1) * pc]);
            }
            col += pc;
        }
        let needs = self.needs_any(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn chan_vec_dot(&mut self, x: NodeId, u: NodeId) -> NodeId {
        let (n, c, h, w) = self.vals[x.0].expect_nchw("chan_vec_dot").expect("nchw");
        assert_eq!(self.vals[u.0].shape(), &[c], "chan_vec_dot: u must be (C)");
        let plane = h * w;
        let xd = self.vals[x.0].data();
        let ud = self.vals[u.0].data();
        let mut out = Tensor::zeros(&[n, plane]);
        exec::for_each_chunk_mut(out.data_mut(), plane, |nn, o| {
            for cc in 0..c {
                let uv = ud[cc];
                let xs = &xd[(nn * c + cc) * plane..(nn * c + cc + 1) * plane];
                for (ov, &xv) in o.iter_mut().zip(xs) {
                    *ov += uv * xv;
                }
            }
        });
        let needs = self.needs_any(&[x, u]);
        self.push(out, Op::ChanVecDot { x, u }, needs)
    }

    pub fn attn_pool(&mut self, x: NodeId, m: NodeId) -> NodeId {
        let (n, c, h, w) = self.vals[x.0].expect_nchw("attn_pool").expect("nchw");
        let plane = h * w;
        assert_eq!(self.vals[m.0].shape(), &[n, plane], "attn_pool: map must be (N,H*W)");
        let xd = self.vals[x.0].data();
        let md = self.vals[m.0].data();
        let mut out = Tensor::zeros(&[n, c]);
        exec::for_each_chunk_mut(out.data_mut(), c, |nn, o| {
            let mrow = &md[nn * plane..(nn + 1) * plane];
            for (cc, ov) in o.iter_mut().enumerate() {
                let xs = &xd[(nn * c + cc) * plane..(nn * c + cc + 1) * plane];
                *ov = xs.iter().zip(mrow).map(|(&a, &b)| a * b).sum();
            }
        });
        let needs = self.needs_any(&[x, m]);
        self.push(out, Op::AttnPool { x, m }, needs)
    }

    /// Inverted dropout: the mask carries 0 or 1/(1-p) so eval needs no rescale.
    pub fn dropout<R: rand::Rng>(&mut self, x: NodeId, p: f64, rng: &mut R) -> NodeId {
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0,1)");
        if p == 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.vals[x.0].numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let xd = self.vals[x.0].data();
        let data: Vec<f64> = xd.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let v = Tensor::from_vec(self.vals[x.0].shape(), data);
        let needs = self.needs[x.0];
        self.push(v, Op::Dropout { x, mask }, needs)
    }

    // ---- backward ----

    /// Backpropagate from a scalar root. Returns per-node gradients; nodes on
    /// no differentiable path (or with `needs_grad = false`) stay `None`.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.vals[root.0].numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.needs[i] {
                grads[i] = None;
                continue;
            }
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, i: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let vals = &self.vals;
        // Adds `delta` into the gradient buffer of parent `p` via a closure
        // that writes into a zeroed-or-existing buffer.
        macro_rules! with_grad {
            ($p:expr, $f:expr) => {{
                let p: NodeId = $p;
                if self.needs[p.0] {
                    let buf = grads[p.0].get_or_insert_with(|| Tensor::zeros(vals[p.0].shape()));
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(buf);
                }
            }};
        }

        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_grad!(*a, |buf: &mut Tensor| add_into(buf, g.data()));
                with_grad!(*b, |buf: &mut Tensor| add_into(buf, g.data()));
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |buf: &mut Tensor| add_into(buf, g.data()));
                with_grad!(*b, |buf: &mut Tensor| {
                    for (o, &gv) in buf.data_mut().iter_mut().zip(g.data()) {
                        *o -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (vals[a.0].data(), vals[b.0].data());
                with_grad!(*a, |buf: &mut Tensor| {
                    for ((o, &gv), &bvv) in buf.data_mut().iter_mut().zip(g.data()).zip(bv) {
                        *o += gv * bvv;
                    }
                });
                with_grad!(*b, |buf: &mut Tensor| {
                    for ((o, &gv), &avv) in buf.data_mut().iter_mut().zip(g.data()).zip(av) {
                        *o += gv * avv;
                    }
                });
            }
            Op::AddScalar(a) => {
                with_grad!(*a, |buf: &mut Tensor| add_into(buf, g.data()));
            }
            Op::MulScalar(a, c) => {
                let c = *c;
                with_grad!(*a, |buf: &mut Tensor| {
                    for (o, &gv) in buf.data_mut().iter_mut().zip(g.data()) {
                        *o += gv * c;
                    }
                });
            }
            Op::Relu(a) => {
                let av = vals[a.0].data();
                with_grad!(*a, |buf: &mut Tensor| {
                    for ((o, &gv), &x) in buf.data_mut().iter_mut().zip(g.data()).zip(av) {
                        if x > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let yv = vals[i].data();
                with_grad!(*a, |buf: &mut Tensor| {
                    for ((o, &gv), &y) in buf.data_mut().iter_mut().zip(g.data()).zip(yv) {
                        *o += gv * y;
                    }
                });
            }
            Op::Ln(a) => {
                let av = vals[a.0].data();
                with_grad!(*a, |buf: &mut Tensor| {
                    for ((o, &gv), &x) in buf.data_mut().iter_mut().zip(g.data()).zip(av) {
                        *o += gv / x;
                    }
                });
            }
            Op::Sqrt(a) => {
                let yv = vals[i].data();
                with_grad!(*a, |buf: &mut Tensor| {
                    for ((o, &gv), &y) in buf.data_mut().iter_mut().zip(g.data()).zip(yv) {
                        *o += gv / (2.0 * y);
                    }
                });
            }
            Op::Abs(a) => {
                let av = vals[a.0].data();
                with_grad!(*a, |buf: &mut Tensor| {
                    for ((o, &gv), &x) in buf.data_mut().iter_mut().zip(g.data()).zip(av) {
                        *o += gv * x.signum() * if x == 0.0 { 0.0 } else { 1.0 };
                    }
                });
            }
            Op::PowScalar(a, p) => {
                let (av, p) = (vals[a.0].data(), *p);
                with_grad!(*a, |buf: &mut Tensor| {
                    for ((o, &gv), &x) in buf.data_mut().iter_mut().zip(g.data()).zip(av) {
                        *o += gv * p * x.powf(p - 1.0);
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g.item();
                with_grad!(*a, |buf: &mut Tensor| {
                    for o in buf.data_mut() {
                        *o += gv;
                    }
                });
            }
            Op::MeanAll(a) => {
                let gv = g.item() / vals[a.0].numel() as f64;
                with_grad!(*a, |buf: &mut Tensor| {
                    for o in buf.data_mut() {
                        *o += gv;
                    }
                });
            }
            Op::SpatialMean(a) => {
                let (_, _, h, w) = vals[a.0].expect_nchw("spatial_mean bw").expect("nchw");
                let plane = h * w;
                let inv = 1.0 / plane as f64;
                with_grad!(*a, |buf: &mut Tensor| {
                    for (p, &gv) in g.data().iter().enumerate() {
                        let gs = gv * inv;
                        for o in &mut buf.data_mut()[p * plane..(p + 1) * plane] {
                            *o += gs;
                        }
                    }
                });
            }
            Op::Bcast { x, s, kind } => {
                let (n, c, h, w) = vals[x.0].expect_nchw("bcast bw").expect("nchw");
                let plane = h * w;
                let (xd, sd) = (vals[x.0].data(), vals[s.0].data());
                let kind = *kind;
                with_grad!(*x, |buf: &mut Tensor| {
                    for p in 0..n * c {
                        let sv = sd[p];
                        let gs = &g.data()[p * plane..(p + 1) * plane];
                        let os = &mut buf.data_mut()[p * plane..(p + 1) * plane];
                        match kind {
                            BcastKind::Add | BcastKind::Sub => {
                                for (o, &gv) in os.iter_mut().zip(gs) {
                                    *o += gv;
                                }
                            }
                            BcastKind::Mul => {
                                for (o, &gv) in os.iter_mut().zip(gs) {
                                    *o += gv * sv;
                                }
                            }
                            BcastKind::Div => {
                                for (o, &gv) in os.iter_mut().zip(gs) {
                                    *o += gv / sv;
                                }
                            }
                        }
                    }
                });
                with_grad!(*s, |buf: &mut Tensor| {
                    for p in 0..n * c {
                        let sv = sd[p];
                        let gs = &g.data()[p * plane..(p + 1) * plane];
                        let xs = &xd[p * plane..(p + 1) * plane];
                        let acc: f64 = match kind {
                            BcastKind::Add => gs.iter().sum(),
                            BcastKind::Sub => -gs.iter().sum::<f64>(),
                            BcastKind::Mul => gs.iter().zip(xs).map(|(&gv, &xv)| gv * xv).sum(),
                            BcastKind::Div => {
                                gs.iter().zip(xs).map(|(&gv, &xv)| -gv * xv / (sv * sv)).sum()
                            }
                        };
                        buf.data_mut()[p] += acc;
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                conv2d_backward(self, *x, *w, *b, *stride, *pad, g, grads);
            }
            Op::ReflectPad { x, pad } => {
                let (n, c, h, w) = vals[x.0].expect_nchw("reflect bw").expect("nchw");
                let pad = *pad;
                let (ho, wo) = (h + 2 * pad, w + 2 * pad);
                with_grad!(*x, |buf: &mut Tensor| {
                    for p in 0..n * c {
                        let gs = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                        let os = &mut buf.data_mut()[p * h * w..(p + 1) * h * w];
                        for oh in 0..ho {
                            let ih = reflect_index(oh as isize - pad as isize, h);
                            for ow in 0..wo {
                                let iw = reflect_index(ow as isize - pad as isize, w);
                                os[ih * w + iw] += gs[oh * wo + ow];
                            }
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax, .. } => {
                let plane_in = vals[x.0].dim(2) * vals[x.0].dim(3);
                let plane_out = vals[i].dim(2) * vals[i].dim(3);
                with_grad!(*x, |buf: &mut Tensor| {
                    for p in 0..vals[i].dim(0) * vals[i].dim(1) {
                        let gs = &g.data()[p * plane_out..(p + 1) * plane_out];
                        let am = &argmax[p * plane_out..(p + 1) * plane_out];
                        let os = &mut buf.data_mut()[p * plane_in..(p + 1) * plane_in];
                        for (&gv, &idx) in gs.iter().zip(am) {
                            os[idx] += gv;
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = vals[x.0].expect_nchw("upsample bw").expect("nchw");
                let (ho, wo) = (2 * h, 2 * w);
                with_grad!(*x, |buf: &mut Tensor| {
                    for p in 0..n * c {
                        let gs = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                        let os = &mut buf.data_mut()[p * h * w..(p + 1) * h * w];
                        for oh in 0..ho {
                            for ow in 0..wo {
                                os[(oh / 2) * w + ow / 2] += gs[oh * wo + ow];
                            }
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xs = vals[x.0].shape();
                let (n, k, m) = (xs[0], xs[1], vals[w.0].shape()[1]);
                let (xd, wd) = (vals[x.0].data(), vals[w.0].data());
                with_grad!(*x, |buf: &mut Tensor| {
                    for r in 0..n {
                        let grow = &g.data()[r * m..(r + 1) * m];
                        let orow = &mut buf.data_mut()[r * k..(r + 1) * k];
                        for (kk, o) in orow.iter_mut().enumerate() {
                            let wrow = &wd[kk * m..(kk + 1) * m];
                            *o += grow.iter().zip(wrow).map(|(&a, &b)| a * b).sum::<f64>();
                        }
                    }
                });
                with_grad!(*w, |buf: &mut Tensor| {
                    for r in 0..n {
                        let grow = &g.data()[r * m..(r + 1) * m];
                        for kk in 0..k {
                            let xv = xd[r * k + kk];
                            if xv == 0.0 {
                                continue;
                            }
                            let orow = &mut buf.data_mut()[kk * m..(kk + 1) * m];
                            for (o, &gv) in orow.iter_mut().zip(grow) {
                                *o += xv * gv;
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    with_grad!(*b, |buf: &mut Tensor| {
                        for r in 0..n {
                            let grow = &g.data()[r * m..(r + 1) * m];
                            for (o, &gv) in buf.data_mut().iter_mut().zip(grow) {
                                *o += gv;
                            }
                        }
                    });
                }
            }
            Op::SoftmaxRows(x) => {
                let ys = vals[i].shape();
                let (n, m) = (ys[0], ys[1]);
                let yd = vals[i].data();
                with_grad!(*x, |buf: &mut Tensor| {
                    for r in 0..n {
                        let yrow = &yd[r * m..(r + 1) * m];
                        let grow = &g.data()[r * m..(r + 1) * m];
                        let dot: f64 = yrow.iter().zip(grow).map(|(&y, &gv)| y * gv).sum();
                        let orow = &mut buf.data_mut()[r * m..(r + 1) * m];
                        for ((o, &y), &gv) in orow.iter_mut().zip(yrow).zip(grow) {
                            *o += y * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let ys = vals[i].shape();
                let (n, m) = (ys[0], ys[1]);
                let yd = vals[i].data();
                with_grad!(*x, |buf: &mut Tensor| {
                    for r in 0..n {
                        let yrow = &yd[r * m..(r + 1) * m];
                        let grow = &g.data()[r * m..(r + 1) * m];
                        let gsum: f64 = grow.iter().sum();
                        let orow = &mut buf.data_mut()[r * m..(r + 1) * m];
                        for ((o, &y), &gv) in orow.iter_mut().zip(yrow).zip(grow) {
                            *o += gv - y.exp() * gsum;
                        }
                    }
                });
            }
            Op::GatherCol { x, idx } => {
                let m = vals[x.0].shape()[1];
                with_grad!(*x, |buf: &mut Tensor| {
                    for (r, (&c, &gv)) in idx.iter().zip(g.data()).enumerate() {
                        buf.data_mut()[r * m + c] += gv;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = vals[i].shape()[0];
                let total = vals[i].shape()[1];
                let mut col = 0usize;
                for p in parts {
                    let pc = vals[p.0].shape()[1];
                    with_grad!(*p, |buf: &mut Tensor| {
                        for r in 0..n {
                            let gs = &g.data()[r * total + col..r * total + col + pc];
                            for (o, &gv) in
                                buf.data_mut()[r * pc..(r + 1) * pc].iter_mut().zip(gs)
                            {
                                *o += gv;
                            }
                        }
                    });
                    col += pc;
                }
            }
            Op::ChanVecDot { x, u } => {
                let (n, c, h, w) = vals[x.0].expect_nchw("cvd bw").expect("nchw");
                let plane = h * w;
                let (xd, ud) = (vals[x.0].data(), vals[u.0].data());
                with_grad!(*x, |buf: &mut Tensor| {
                    for nn in 0..n {
                        let grow = &g.data()[nn * plane..(nn + 1) * plane];
                        for cc in 0..c {
                            let uv = ud[cc];
                            let os =
                                &mut buf.data_mut()[(nn * c + cc) * plane..(nn * c + cc + 1) * plane];
                            for (o, &gv) in os.iter_mut().zip(grow) {
                                *o += gv * uv;
                            }
                        }
                    }
                });
                with_grad!(*u, |buf: &mut Tensor| {
                    for nn in 0..n {
                        let grow = &g.data()[nn * plane..(nn + 1) * plane];
                        for cc in 0..c {
                            let xs = &xd[(nn * c + cc) * plane..(nn * c + cc + 1) * plane];
                            buf.data_mut()[cc] +=
                                xs.iter().zip(grow).map(|(&a, &b)| a * b).sum::<f64>();
                        }
                    }
                });
            }
            Op::AttnPool { x, m } => {
                let (n, c, h, w) = vals[x.0].expect_nchw("attnpool bw").expect("nchw");
                let plane = h * w;
                let (xd, md) = (vals[x.0].data(), vals[m.0].data());
                with_grad!(*x, |buf: &mut Tensor| {
                    for nn in 0..n {
                        let mrow = &md[nn * plane..(nn + 1) * plane];
                        for cc in 0..c {
                            let gv = g.data()[nn * c + cc];
                            let os =
                                &mut buf.data_mut()[(nn * c + cc) * plane..(nn * c + cc + 1) * plane];
                            for (o, &mv) in os.iter_mut().zip(mrow) {
                                *o += gv * mv;
                            }
                        }
                    }
                });
                with_grad!(*m, |buf: &mut Tensor| {
                    for nn in 0..n {
                        let orow = &mut buf.data_mut()[nn * plane..(nn + 1) * plane];
                        for cc in 0..c {
                            let gv = g.data()[nn * c + cc];
                            let xs = &xd[(nn * c + cc) * plane..(nn * c + cc + 1) * plane];
                            for (o, &xv) in orow.iter_mut().zip(xs) {
                                *o += gv * xv;
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                with_grad!(*x, |buf: &mut Tensor| {
                    for ((o, &gv), &mv) in buf.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *o += gv * mv;
                    }
                });
            }
        }
    }
}

fn add_into(buf: &mut Tensor, g: &[f64]) {
    for (o, &gv) in buf.data_mut().iter_mut().zip(g) {
        *o += gv;
    }
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
    debug_assert!((0..n).contains(&r));
    r as usize
}

pub fn softmax_rows_value(x: &Tensor) -> Tensor {
    let xs = x.shape();
    assert_eq!(xs.len(), 2, "softmax input must be (N,M)");
    let (n, m) = (xs[0], xs[1]);
    let xd = x.data();
    let mut out = Tensor::zeros(&[n, m]);
    for r in 0..n {
        let row = &xd[r * m..(r + 1) * m];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out.data_mut()[r * m..(r + 1) * m];
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mx).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Direct convolution, NCHW layout, zero padding. Parallel over output planes.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, wd) = x.expect_nchw("conv2d input").expect("nchw");
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv2d weight must be (Co,Ci,Kh,Kw)");
    let (co, ci2, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(ci, ci2, "conv2d: channel mismatch {ci} vs {ci2}");
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let wdt = w.data();
    let bd = b.map(|b| b.data());
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    exec::for_each_chunk_mut(out.data_mut(), ho * wo, |chunk, o| {
        let nn = chunk / co;
        let oc = chunk % co;
        if let Some(bd) = bd {
            o.fill(bd[oc]);
        }
        let xbase = nn * ci * h * wd;
        for ic in 0..ci {
            let xplane = &xd[xbase + ic * h * wd..xbase + (ic + 1) * h * wd];
            for r in 0..kh {
                for s in 0..kw {
                    let wv = wdt[((oc * ci + ic) * kh + r) * kw + s];
                    if stride == 1 {
                        let oh_lo = pad.saturating_sub(r);
                        let oh_hi = ho.min(h + pad - r);
                        let ow_lo = pad.saturating_sub(s);
                        let ow_hi = wo.min(wd + pad - s);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let len = ow_hi - ow_lo;
                        for oh in oh_lo..oh_hi {
                            let ih = oh + r - pad;
                            let iw0 = ow_lo + s - pad;
                            let xs = &xplane[ih * wd + iw0..ih * wd + iw0 + len];
                            let os = &mut o[oh * wo + ow_lo..oh * wo + ow_lo + len];
                            for (ov, &xv) in os.iter_mut().zip(xs) {
                                *ov += wv * xv;
                            }
                        }
                    } else {
                        for oh in 0..ho {
                            let ih = (oh * stride + r) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for ow in 0..wo {
                                let iw = (ow * stride + s) as isize - pad as isize;
                                if iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                o[oh * wo + ow] += wv * xplane[ih as usize * wd + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    graph: &Graph,
    x: NodeId,
    w: NodeId,
    b: Option<NodeId>,
    stride: usize,
    pad: usize,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
) {
    let xv = &graph.vals[x.0];
    let wv = &graph.vals[w.0];
    let (n, ci, h, wd) = xv.expect_nchw("conv bw x").expect("nchw");
    let ws = wv.shape();
    let (co, kh, kw) = (ws[0], ws[2], ws[3]);
    let (ho, wo) = (g.dim(2), g.dim(3));
    let gd = g.data();
    let xd = xv.data();
    let wdt = wv.data();

    if graph.needs[x.0] {
        let buf = grads[x.0].get_or_insert_with(|| Tensor::zeros(xv.shape()));
        exec::for_each_chunk_mut(buf.data_mut(), h * wd, |chunk, dx| {
            let nn = chunk / ci;
            let ic = chunk % ci;
            for oc in 0..co {
                let gplane = &gd[(nn * co + oc) * ho * wo..(nn * co + oc + 1) * ho * wo];
                for r in 0..kh {
                    for s in 0..kw {
                        let wvv = wdt[((oc * ci + ic) * kh + r) * kw + s];
                        if stride == 1 {
                            let oh_lo = pad.saturating_sub(r);
                            let oh_hi = ho.min(h + pad - r);
                            let ow_lo = pad.saturating_sub(s);
                            let ow_hi = wo.min(wd + pad - s);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let len = ow_hi - ow_lo;
                            for oh in oh_lo..oh_hi {
                                let ih = oh + r - pad;
                                let iw0 = ow_lo + s - pad;
                                let gs = &gplane[oh * wo + ow_lo..oh * wo + ow_lo + len];
                                let ds = &mut dx[ih * wd + iw0..ih * wd + iw0 + len];
                                for (dv, &gv) in ds.iter_mut().zip(gs) {
                                    *dv += wvv * gv;
                                }
                            }
                        } else {
                            for oh in 0..ho {
                                let ih = (oh * stride + r) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for ow in 0..wo {
                                    let iw = (ow * stride + s) as isize - pad as isize;
                                    if iw < 0 || iw >= wd as isize {
                                        continue;
                                    }
                                    dx[ih as usize * wd + iw as usize] += wvv * gplane[oh * wo + ow];
                                }
                            }
                        }
                    }
                }
            }
        });
    }

    if graph.needs[w.0] {
        let buf = grads[w.0].get_or_insert_with(|| Tensor::zeros(wv.shape()));
        exec::for_each_chunk_mut(buf.data_mut(), ci * kh * kw, |oc, dw| {
            for nn in 0..n {
                let gplane = &gd[(nn * co + oc) * ho * wo..(nn * co + oc + 1) * ho * wo];
                for ic in 0..ci {
                    let xplane = &xd[(nn * ci + ic) * h * wd..(nn * ci + ic + 1) * h * wd];
                    for r in 0..kh {
                        for s in 0..kw {
                            let mut acc = 0.0;
                            if stride == 1 {
                                let oh_lo = pad.saturating_sub(r);
                                let oh_hi = ho.min(h + pad - r);
                                let ow_lo = pad.saturating_sub(s);
                                let ow_hi = wo.min(wd + pad - s);
                                if ow_lo < ow_hi {
                                    let len = ow_hi - ow_lo;
                                    for oh in oh_lo..oh_hi {
                                        let ih = oh + r - pad;
                                        let iw0 = ow_lo + s - pad;
                                        let gs = &gplane[oh * wo + ow_lo..oh * wo + ow_lo + len];
                                        let xs = &xplane[ih * wd + iw0..ih * wd + iw0 + len];
                                        acc += gs
                                            .iter()
                                            .zip(xs)
                                            .map(|(&a, &b)| a * b)
                                            .sum::<f64>();
                                    }
                                }
                            } else {
                                for oh in 0..ho {
                                    let ih = (oh * stride + r) as isize - pad as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    for ow in 0..wo {
                                        let iw = (ow * stride + s) as isize - pad as isize;
                                        if iw < 0 || iw >= wd as isize {
                                            continue;
                                        }
                                        acc += gplane[oh * wo + ow]
                                            * xplane[ih as usize * wd + iw as usize];
                                    }
                                }
                            }
                            dw[(ic * kh + r) * kw + s] += acc;
                        }
                    }
                }
            }
        });
    }

    if let Some(b) = b {
        if graph.needs[b.0] {
            let buf = grads[b.0].get_or_insert_with(|| Tensor::zeros(graph.vals[b.0].shape()));
            exec::for_each_chunk_mut(buf.data_mut(), 1, |oc, db| {
                let mut acc = 0.0;
                for nn in 0..n {
                    let gplane = &gd[(nn * co + oc) * ho * wo..(nn * co + oc + 1) * ho * wo];
                    acc += gplane.iter().sum::<f64>();
                }
                db[0] += acc;
            });
        }
    }
}
